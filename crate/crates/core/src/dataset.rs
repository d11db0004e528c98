//! Clips, per-frame labels, the JSON manifest and the split index.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::egolane::{EgoPose, MapLight};
use crate::error::{invalid, Error, Result};
use crate::image::Image;
use crate::loss::{BBox, Target};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const INDEX_FILE: &str = "index.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LightState {
    Red,
    Yellow,
    Green,
    Off,
}

impl LightState {
    pub const ALL: [LightState; 4] = [Self::Red, Self::Yellow, Self::Green, Self::Off];
    pub const NAMES: [&'static str; 4] = ["red", "yellow", "green", "off"];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        Self::NAMES[self.index()]
    }
}

impl FromStr for LightState {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| invalid!("unknown light state `{s}`"))
    }
}

impl fmt::Display for LightState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Scenario condition a clip was generated under.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Tag {
    Occlusion,
    Truncation,
    Blur,
    Small,
    Easy,
}

impl Tag {
    pub const ALL: [Tag; 5] = [
        Self::Occlusion,
        Self::Truncation,
        Self::Blur,
        Self::Small,
        Self::Easy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Occlusion => "occlusion",
            Self::Truncation => "truncation",
            Self::Blur => "blur",
            Self::Small => "small",
            Self::Easy => "easy",
        }
    }
}

impl FromStr for Tag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| invalid!("unknown scenario tag `{s}`"))
    }
}

/// Nominal distance to the lights of a clip.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Distance {
    Near,
    Mid,
    Far,
}

impl Distance {
    pub const ALL: [Distance; 3] = [Self::Near, Self::Mid, Self::Far];

    pub fn name(self) -> &'static str {
        match self {
            Self::Near => "lt20",
            Self::Mid => "20-50",
            Self::Far => "50-100",
        }
    }

    /// Light height range in pixels for a 128-pixel-high frame.
    pub fn height_range_at_128(self) -> (f32, f32) {
        match self {
            Self::Near => (24.0, 48.0),
            Self::Mid => (10.0, 24.0),
            Self::Far => (4.0, 10.0),
        }
    }

    /// Light height range scaled to a frame of height `h`.
    pub fn height_range(self, h: usize) -> (f32, f32) {
        let (lo, hi) = self.height_range_at_128();
        let k = h as f32 / 128.0;
        (lo * k, hi * k)
    }
}

impl FromStr for Distance {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| invalid!("unknown distance bucket `{s}`"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LightLabel {
    pub bbox: BBox,
    pub state: LightState,
    pub visible: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameLabel {
    pub lights: Vec<LightLabel>,
    pub pose: Option<EgoPose>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub id: String,
    pub fps: f64,
    pub num_states: usize,
    pub frames: Vec<Image>,
    pub labels: Vec<FrameLabel>,
    pub map_light: Option<MapLight>,
    pub tags: Vec<Tag>,
    pub distance: Option<Distance>,
}

impl Clip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// The `n` frames ending at `end`, oldest first, as `[3, h, w]` tensors.
    pub fn window(&self, end: usize, n: usize) -> Result<Vec<Tensor>> {
        if n == 0 || end >= self.len() || end + 1 < n {
            return Err(invalid!(
                "window of {n} frames ending at {end} does not fit a clip of {}",
                self.len()
            ));
        }
        Ok(self.frames[end + 1 - n..=end]
            .iter()
            .map(Image::to_tensor)
            .collect())
    }

    /// Every labelled light of `frame`, occluded ones included.
    pub fn targets(&self, frame: usize) -> Vec<Target> {
        self.labels[frame]
            .lights
            .iter()
            .map(|l| Target {
                bbox: l.bbox,
                state: l.state.index(),
            })
            .collect()
    }

    /// Per-frame poses, if every frame carries one.
    pub fn poses(&self) -> Option<Vec<EgoPose>> {
        self.labels.iter().map(|l| l.pose).collect()
    }

    pub fn frame_file(i: usize) -> String {
        format!("frame_{i:03}.ppm")
    }
}

// ---------------------------------------------------------------------------
// Manifest JSON
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestJson {
    clip_id: String,
    fps: f64,
    num_states: usize,
    frames: Vec<FrameJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    map_light: Option<MapLightJson>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    tags: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    distance: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameJson {
    image: String,
    lights: Vec<LightJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pose: Option<PoseJson>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LightJson {
    cx: f32,
    cy: f32,
    w: f32,
    h: f32,
    state: String,
    visible: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoseJson {
    t: Vec<f64>,
    r: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MapLightJson {
    xyz: Vec<f64>,
    lane: String,
}

fn manifest_of(clip: &Clip) -> ManifestJson {
    ManifestJson {
        clip_id: clip.id.clone(),
        fps: clip.fps,
        num_states: clip.num_states,
        frames: clip
            .labels
            .iter()
            .enumerate()
            .map(|(i, label)| FrameJson {
                image: Clip::frame_file(i),
                lights: label
                    .lights
                    .iter()
                    .map(|l| LightJson {
                        cx: l.bbox.cx,
                        cy: l.bbox.cy,
                        w: l.bbox.w,
                        h: l.bbox.h,
                        state: l.state.name().to_string(),
                        visible: l.visible,
                    })
                    .collect(),
                pose: label.pose.map(|p| PoseJson {
                    t: p.position.to_vec(),
                    r: p.rotation.iter().flatten().copied().collect(),
                }),
            })
            .collect(),
        map_light: clip.map_light.as_ref().map(|m| MapLightJson {
            xyz: m.xyz.to_vec(),
            lane: m.lane.clone(),
        }),
        tags: clip.tags.iter().map(|t| t.name().to_string()).collect(),
        distance: clip.distance.map(|d| d.name().to_string()),
    }
}

fn field_err(field: &str, msg: impl fmt::Display) -> Error {
    Error::Format(format!("manifest field `{field}`: {msg}"))
}

fn vec3(v: &[f64], field: &str) -> Result<[f64; 3]> {
    <[f64; 3]>::try_from(v)
        .map_err(|_| field_err(field, format!("expected 3 numbers, got {}", v.len())))
}

/// Parsed manifest with image paths still unresolved.
struct ParsedManifest {
    clip: Clip,
    images: Vec<String>,
}

fn parse_manifest(text: &str) -> Result<ParsedManifest> {
    let m: ManifestJson = serde_json::from_str(text).map_err(|e| {
        Error::Format(format!(
            "manifest line {} column {}: {e}",
            e.line(),
            e.column()
        ))
    })?;
    if m.frames.is_empty() {
        return Err(field_err("frames", "clip has no frames"));
    }
    if m.num_states == 0 || m.num_states > LightState::ALL.len() {
        return Err(field_err(
            "num_states",
            format!("must be in 1..=4, got {}", m.num_states),
        ));
    }
    let mut labels = Vec::with_capacity(m.frames.len());
    let mut images = Vec::with_capacity(m.frames.len());
    for (fi, f) in m.frames.iter().enumerate() {
        let mut lights = Vec::with_capacity(f.lights.len());
        for (li, l) in f.lights.iter().enumerate() {
            let at = |k: &str| format!("frames[{fi}].lights[{li}].{k}");
            for (k, v) in [("cx", l.cx), ("cy", l.cy)] {
                if !v.is_finite() {
                    return Err(field_err(&at(k), format!("not finite ({v})")));
                }
            }
            for (k, v) in [("w", l.w), ("h", l.h)] {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(field_err(&at(k), format!("must be positive, got {v}")));
                }
            }
            let state: LightState = l.state.parse().map_err(|e| field_err(&at("state"), e))?;
            if state.index() >= m.num_states {
                return Err(field_err(
                    &at("state"),
                    format!("`{}` exceeds num_states {}", l.state, m.num_states),
                ));
            }
            lights.push(LightLabel {
                bbox: BBox::new(l.cx, l.cy, l.w, l.h),
                state,
                visible: l.visible,
            });
        }
        let pose = match &f.pose {
            None => None,
            Some(p) => {
                let field = format!("frames[{fi}].pose");
                let t = vec3(&p.t, &format!("{field}.t"))?;
                if p.r.len() != 9 {
                    return Err(field_err(
                        &format!("{field}.r"),
                        format!("expected 9 numbers, got {}", p.r.len()),
                    ));
                }
                let r = [
                    [p.r[0], p.r[1], p.r[2]],
                    [p.r[3], p.r[4], p.r[5]],
                    [p.r[6], p.r[7], p.r[8]],
                ];
                Some(EgoPose::new(t, r).map_err(|e| field_err(&field, e))?)
            }
        };
        labels.push(FrameLabel { lights, pose });
        images.push(f.image.clone());
    }
    let map_light = match &m.map_light {
        None => None,
        Some(ml) => Some(MapLight {
            xyz: vec3(&ml.xyz, "map_light.xyz")?,
            lane: ml.lane.clone(),
        }),
    };
    let tags = m
        .tags
        .iter()
        .map(|t| t.parse().map_err(|e| field_err("tags", e)))
        .collect::<Result<Vec<Tag>>>()?;
    let distance = m
        .distance
        .as_deref()
        .map(|d| d.parse().map_err(|e| field_err("distance", e)))
        .transpose()?;
    Ok(ParsedManifest {
        clip: Clip {
            id: m.clip_id,
            fps: m.fps,
            num_states: m.num_states,
            frames: Vec::new(),
            labels,
            map_light,
            tags,
            distance,
        },
        images,
    })
}

/// Writes frames as PPM files and the manifest into `dir` (created if missing).
pub fn write_clip(dir: &Path, clip: &Clip) -> Result<()> {
    if clip.frames.len() != clip.labels.len() {
        return Err(invalid!(
            "{} frames but {} labels",
            clip.frames.len(),
            clip.labels.len()
        ));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, frame) in clip.frames.iter().enumerate() {
        frame.write_ppm(&dir.join(Clip::frame_file(i)))?;
    }
    let text = serde_json::to_string_pretty(&manifest_of(clip))
        .map_err(|e| Error::Format(format!("manifest serialization: {e}")))?;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

/// Labels only; frames are left empty.
pub fn load_labels(dir: &Path) -> Result<Clip> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let parsed =
        parse_manifest(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Ok(parsed.clip)
}

pub fn load_clip(dir: &Path) -> Result<Clip> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let parsed =
        parse_manifest(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut clip = parsed.clip;
    for image in &parsed.images {
        let frame = Image::read_ppm(&dir.join(image))?;
        if let Some(first) = clip.frames.first() {
            if (frame.width, frame.height) != (first.width, first.height) {
                return Err(Error::Format(format!(
                    "{}: frame {image} is {}x{}, earlier frames are {}x{}",
                    dir.display(),
                    frame.width,
                    frame.height,
                    first.width,
                    first.height
                )));
            }
        }
        clip.frames.push(frame);
    }
    Ok(clip)
}

// ---------------------------------------------------------------------------
// Split index
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "valid" => Ok(Self::Valid),
            "test" => Ok(Self::Test),
            other => Err(invalid!("unknown split `{other}`")),
        }
    }
}

/// Clip directories per split, relative to the index file's directory.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetIndex {
    pub train: Vec<String>,
    pub valid: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetIndex {
    pub fn split(&self, s: Split) -> &[String] {
        match s {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.valid.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        let path = root.join(INDEX_FILE);
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format(format!("index serialization: {e}")))?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn read(root: &Path) -> Result<Self> {
        let path = root.join(INDEX_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| {
            Error::Format(format!(
                "{} line {} column {}: {e}",
                path.display(),
                e.line(),
                e.column()
            ))
        })
    }
}

/// Resolves a data argument to clip directories. Accepts a dataset root
/// (all splits), a split directory under a root (`root/test`), or a single
/// clip directory.
pub fn resolve_clip_dirs(path: &Path) -> Result<Vec<PathBuf>> {
    if path.join(MANIFEST_FILE).is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    if path.join(INDEX_FILE).is_file() {
        let index = DatasetIndex::read(path)?;
        return Ok(index
            .train
            .iter()
            .chain(&index.valid)
            .chain(&index.test)
            .map(|d| path.join(d))
            .collect());
    }
    let split_name = path.file_name().and_then(|s| s.to_str()).unwrap_or("");
    if let (Ok(split), Some(root)) = (split_name.parse::<Split>(), path.parent()) {
        if root.join(INDEX_FILE).is_file() {
            let index = DatasetIndex::read(root)?;
            return Ok(index.split(split).iter().map(|d| root.join(d)).collect());
        }
    }
    Err(invalid!(
        "{} is neither a clip directory, a dataset root, nor a split of one",
        path.display()
    ))
}

pub fn load_split(root: &Path, split: Split) -> Result<Vec<Clip>> {
    let index = DatasetIndex::read(root)?;
    index
        .split(split)
        .iter()
        .map(|d| load_clip(&root.join(d)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn enum_names_roundtrip() {
        for s in LightState::ALL {
            assert_eq!(s.name().parse::<LightState>().unwrap(), s);
        }
        for t in Tag::ALL {
            assert_eq!(t.name().parse::<Tag>().unwrap(), t);
        }
        for d in Distance::ALL {
            assert_eq!(d.name().parse::<Distance>().unwrap(), d);
        }
        assert!("purple".parse::<LightState>().is_err());
    }

    #[test]
    fn hand_written_manifest_parses() {
        let text = r#"{
            "clip_id": "hand", "fps": 10, "num_states": 4,
            "frames": [
                {"image": "a.ppm", "lights": [{"cx": 10, "cy": 12, "w": 4, "h": 9, "state": "red", "visible": true}]},
                {"image": "b.ppm", "lights": [{"cx": 11, "cy": 12, "w": 4, "h": 9, "state": "green", "visible": false}]}
            ]
        }"#;
        let p = parse_manifest(text).unwrap();
        assert_eq!(p.clip.labels.len(), 2);
        assert_eq!(p.clip.labels[1].lights[0].state, LightState::Green);
        assert!(!p.clip.labels[1].lights[0].visible);
        assert_eq!(p.images, ["a.ppm", "b.ppm"]);
    }

    #[test]
    fn negative_width_is_named() {
        let text = r#"{"clip_id": "x", "fps": 10, "num_states": 4, "frames": [
            {"image": "a.ppm", "lights": [{"cx": 1, "cy": 1, "w": -3, "h": 2, "state": "red", "visible": true}]}]}"#;
        let err = parse_manifest(text).err().unwrap().to_string();
        assert!(err.contains("frames[0].lights[0].w"), "{err}");
    }

    #[test]
    fn syntax_errors_carry_line_numbers() {
        let err = parse_manifest("{\n\"clip_id\": \"x\",\n oops }")
            .err()
            .unwrap()
            .to_string();
        assert!(err.contains("line 3"), "{err}");
    }
}
