//! Synthetic traffic-light clips: sampling, rendering and dataset layout.
//!
//! All randomness flows from [`SplitMix64`], so a [`ClipSpec`] fully
//! determines the rendered bytes and the labels.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::dataset::{Clip, DatasetIndex, Distance, FrameLabel, LightLabel, LightState, Tag};
use crate::egolane::{CameraModel, EgoPose, MapLight};
use crate::error::{invalid, Error, Result};
use crate::image::Image;
use crate::loss::BBox;
use crate::rng::{mix64, SplitMix64};

pub const DEFAULT_FPS: f64 = 10.0;
pub const DEFAULT_FRAMES: usize = 8;
/// Physical housing height used to place the map light.
pub const LIGHT_HEIGHT_M: f64 = 1.0;
const SUPERSAMPLE: usize = 4;
const ASPECT: (f32, f32) = (0.38, 0.45);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    Easy,
    Mixed,
    ScenarioSweep,
    Occlusion,
}

impl Profile {
    pub fn name(self) -> &'static str {
        match self {
            Self::Easy => "easy",
            Self::Mixed => "mixed",
            Self::ScenarioSweep => "scenario-sweep",
            Self::Occlusion => "occlusion",
        }
    }
}

impl FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "easy" => Ok(Self::Easy),
            "mixed" => Ok(Self::Mixed),
            "scenario-sweep" => Ok(Self::ScenarioSweep),
            "occlusion" => Ok(Self::Occlusion),
            other => Err(invalid!(
                "unknown profile `{other}` (expected easy, mixed, scenario-sweep or occlusion)"
            )),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One light's motion and state schedule. Sizes and positions are for frame 0.
#[derive(Clone, Debug, PartialEq)]
pub struct LightSpec {
    pub center: [f32; 2],
    /// Pixels per frame.
    pub velocity: [f32; 2],
    pub height: f32,
    /// Per-frame multiplicative growth of the box.
    pub growth: f32,
    /// Width over height.
    pub aspect: f32,
    pub state: LightState,
    /// `(frame, state)`: the state from that frame on.
    pub switch: Option<(usize, LightState)>,
}

impl LightSpec {
    pub fn bbox(&self, t: usize) -> BBox {
        let h = self.height * self.growth.powi(t as i32);
        BBox::new(
            self.center[0] + self.velocity[0] * t as f32,
            self.center[1] + self.velocity[1] * t as f32,
            h * self.aspect,
            h,
        )
    }

    pub fn state_at(&self, t: usize) -> LightState {
        match self.switch {
            Some((k, s)) if t >= k => s,
            _ => self.state,
        }
    }
}

/// A rectangle sweeping horizontally across one light.
#[derive(Clone, Debug, PartialEq)]
pub struct OccluderSpec {
    pub light: usize,
    /// First and last frame it covers the light centre band.
    pub span: (usize, usize),
    pub width: f32,
    /// Signed horizontal speed, pixels per frame.
    pub speed: f32,
    pub color: [u8; 3],
}

impl OccluderSpec {
    /// `(x0, y0, x1, y1)` at frame `t`, given the occluded light's box.
    pub fn rect(&self, light: &BBox, t: usize) -> (f32, f32, f32, f32) {
        let mid = (self.span.0 + self.span.1) as f32 / 2.0;
        let x = light.cx + self.speed * (t as f32 - mid);
        let h = 1.3 * light.h + 2.0;
        (
            x - self.width / 2.0,
            light.cy - h / 2.0,
            x + self.width / 2.0,
            light.cy + h / 2.0,
        )
    }
}

/// Camera trajectory that keeps light 0 on its rendered position.
#[derive(Clone, Debug, PartialEq)]
pub struct GeometrySpec {
    pub map_light: [f64; 3],
    pub yaw0: f64,
    pub yaw_rate: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipSpec {
    pub seed: u64,
    pub n_frames: usize,
    pub height: usize,
    pub width: usize,
    pub lights: Vec<LightSpec>,
    pub tags: Vec<Tag>,
    pub distance: Distance,
    pub occluder: Option<OccluderSpec>,
    pub geometry: Option<GeometrySpec>,
}

impl ClipSpec {
    pub fn has(&self, tag: Tag) -> bool {
        self.tags.contains(&tag)
    }

    pub fn validate(&self, max_lights: usize) -> Result<()> {
        if self.n_frames == 0 || self.height < 8 || self.width < 8 {
            return Err(invalid!(
                "clip needs ≥1 frame and extents ≥8, got {} frames of {}x{}",
                self.n_frames,
                self.width,
                self.height
            ));
        }
        if self.lights.len() > max_lights {
            return Err(invalid!(
                "{} lights exceed the query budget m={max_lights}",
                self.lights.len()
            ));
        }
        for (i, l) in self.lights.iter().enumerate() {
            if !(l.height > 0.0 && l.aspect > 0.0 && l.growth > 0.0) {
                return Err(invalid!("light {i} has non-positive size parameters"));
            }
            if let Some((k, _)) = l.switch {
                if k == 0 || k >= self.n_frames {
                    return Err(invalid!(
                        "light {i} switches at frame {k}, outside 1..{}",
                        self.n_frames
                    ));
                }
            }
        }
        if let Some(o) = &self.occluder {
            if o.light >= self.lights.len() || o.span.0 > o.span.1 || o.span.1 >= self.n_frames {
                return Err(invalid!(
                    "occluder references light {} over frames {:?}",
                    o.light,
                    o.span
                ));
            }
        }
        if self.geometry.is_some() && self.lights.is_empty() {
            return Err(invalid!("geometry needs at least one light"));
        }
        Ok(())
    }
}

/// Extents and sizes shared by every clip of a dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClipShape {
    pub height: usize,
    pub width: usize,
    pub n_frames: usize,
    /// Query budget; no clip carries more lights than this.
    pub max_lights: usize,
}

impl Default for ClipShape {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            n_frames: DEFAULT_FRAMES,
            max_lights: 4,
        }
    }
}

fn random_state(rng: &mut SplitMix64) -> LightState {
    LightState::ALL[rng.below(4)]
}

/// Scenario tag and distance of clip `i` in a scenario sweep. Every block of
/// twelve clips holds three clips per tag and four per distance bucket.
pub fn sweep_slot(i: usize) -> (Tag, Distance) {
    const TAGS: [Tag; 4] = [Tag::Occlusion, Tag::Truncation, Tag::Blur, Tag::Small];
    const OTHER: [Distance; 9] = [
        Distance::Near,
        Distance::Mid,
        Distance::Near,
        Distance::Mid,
        Distance::Near,
        Distance::Mid,
        Distance::Near,
        Distance::Mid,
        Distance::Far,
    ];
    let tag = TAGS[i % 4];
    if tag == Tag::Small {
        return (tag, Distance::Far);
    }
    let j = i % 12;
    // Position of j among the non-small slots of the block.
    let k = j - j / 4;
    (tag, OTHER[k])
}

impl ClipSpec {
    /// Samples clip number `index` of a dataset generated with `seed`.
    pub fn sample(profile: Profile, index: usize, seed: u64, shape: ClipShape) -> Result<Self> {
        if shape.max_lights == 0 {
            return Err(invalid!("query budget must be positive"));
        }
        if shape.n_frames < 2 {
            return Err(invalid!(
                "clips need at least 2 frames, got {}",
                shape.n_frames
            ));
        }
        let clip_seed = mix64(seed ^ mix64(index as u64 + 1));
        let mut rng = SplitMix64::new(clip_seed);
        let (tags, distance, count, moving, switch_p) = match profile {
            Profile::Easy => (vec![Tag::Easy], Distance::Near, 1, false, 0.0),
            Profile::Mixed => {
                let distance = Distance::ALL[rng.below(3)];
                let mut tags = Vec::new();
                for t in [Tag::Occlusion, Tag::Truncation, Tag::Blur] {
                    if rng.chance(0.2) {
                        tags.push(t);
                    }
                }
                if distance == Distance::Far {
                    tags.push(Tag::Small);
                }
                if tags.is_empty() {
                    tags.push(Tag::Easy);
                }
                let count = 1 + rng.below(3.min(shape.max_lights));
                (tags, distance, count, true, 0.2)
            }
            Profile::ScenarioSweep => {
                let (tag, distance) = sweep_slot(index);
                let count = 1 + rng.below(2.min(shape.max_lights));
                (vec![tag], distance, count, true, 0.2)
            }
            Profile::Occlusion => {
                let count = 1 + rng.below(2.min(shape.max_lights));
                (vec![Tag::Occlusion], Distance::Near, count, true, 0.0)
            }
        };
        let (h, w, nf) = (shape.height as f32, shape.width as f32, shape.n_frames);
        let (lo, hi) = distance.height_range(shape.height);
        let truncated = tags.contains(&Tag::Truncation);

        let mut lights: Vec<LightSpec> = Vec::with_capacity(count);
        'outer: for li in 0..count {
            for _attempt in 0..64 {
                let growth = if moving {
                    rng.uniform_f32(1.0, 1.02)
                } else {
                    1.0
                };
                let total = growth.powi(nf as i32 - 1);
                let height = rng.uniform_f32(lo, hi / total);
                let aspect = rng.uniform_f32(ASPECT.0, ASPECT.1);
                let (mut vx, mut vy) = if moving {
                    (rng.uniform_f32(-0.8, 0.8), rng.uniform_f32(-0.3, 0.3))
                } else {
                    (0.0, 0.0)
                };
                let hmax = height * total;
                let wmax = hmax * aspect;
                let cx;
                let cy;
                if truncated && li == 0 {
                    // Straddle a side edge with the centre kept inside.
                    vx = 0.0;
                    vy = 0.0;
                    let inset = rng.uniform_f32(0.5, (wmax / 2.0 - 0.5).max(0.6));
                    cx = if rng.chance(0.5) { inset } else { w - inset };
                    cy = rng.uniform_f32(hmax / 2.0 + 1.0, (0.7 * h).max(hmax / 2.0 + 1.5));
                } else {
                    let span_x = vx.abs() * (nf - 1) as f32;
                    let span_y = vy.abs() * (nf - 1) as f32;
                    let (x0, x1) = (wmax / 2.0 + 1.0 + span_x, w - wmax / 2.0 - 1.0 - span_x);
                    let (y0, y1) = (
                        hmax / 2.0 + 1.0 + span_y,
                        (0.75 * h).min(h - hmax / 2.0 - 1.0) - span_y,
                    );
                    if x0 >= x1 || y0 >= y1 {
                        vx = 0.0;
                        vy = 0.0;
                        if wmax + 2.0 >= w || hmax + 2.0 >= h {
                            continue;
                        }
                        cx = rng.uniform_f32(wmax / 2.0 + 1.0, w - wmax / 2.0 - 1.0);
                        cy = rng.uniform_f32(hmax / 2.0 + 1.0, h - hmax / 2.0 - 1.0);
                    } else {
                        cx = rng.uniform_f32(x0, x1);
                        cy = rng.uniform_f32(y0, y1);
                    }
                }
                let state = random_state(&mut rng);
                let switch = (rng.chance(switch_p)).then(|| {
                    let k = 1 + rng.below(nf - 1);
                    let mut next = random_state(&mut rng);
                    if next == state {
                        next = LightState::ALL[(state.index() + 1) % 4];
                    }
                    (k, next)
                });
                let cand = LightSpec {
                    center: [cx, cy],
                    velocity: [vx, vy],
                    height,
                    growth,
                    aspect,
                    state,
                    switch,
                };
                if lights.iter().all(|other| !boxes_overlap(&cand, other, nf)) {
                    lights.push(cand);
                    continue 'outer;
                }
            }
            if lights.is_empty() {
                return Err(invalid!(
                    "could not place a light in a {}x{} frame",
                    shape.width,
                    shape.height
                ));
            }
            break;
        }

        let occluder = tags.contains(&Tag::Occlusion).then(|| {
            let light = rng.below(lights.len());
            let k = 1 + rng.below(2.min(nf - 1));
            let p_last = if profile == Profile::Occlusion {
                0.7
            } else {
                0.6
            };
            let end = if rng.chance(p_last) {
                nf - 1
            } else {
                k - 1 + rng.below(nf - k)
            };
            let end = end.max(k - 1);
            let span = (end + 1 - k, end);
            let wmax = lights[light].bbox(nf - 1).w;
            let width = 1.3 * wmax + 2.0;
            let dir = if rng.chance(0.5) { 1.0 } else { -1.0 };
            let palette = [[46, 84, 38], [92, 92, 98], [98, 72, 46]];
            OccluderSpec {
                light,
                span,
                width,
                speed: dir * width / k as f32,
                color: palette[rng.below(3)],
            }
        });

        let geometry = Some(GeometrySpec {
            map_light: [
                rng.uniform(-20.0, 20.0),
                rng.uniform(-8.0, -4.0),
                rng.uniform(50.0, 150.0),
            ],
            yaw0: rng.uniform(-0.3, 0.3),
            yaw_rate: rng.uniform(-0.01, 0.01),
        });

        let spec = ClipSpec {
            seed: clip_seed,
            n_frames: nf,
            height: shape.height,
            width: shape.width,
            lights,
            tags,
            distance,
            occluder,
            geometry,
        };
        spec.validate(shape.max_lights)?;
        Ok(spec)
    }
}

fn boxes_overlap(a: &LightSpec, b: &LightSpec, nf: usize) -> bool {
    (0..nf).any(|t| {
        let (p, q) = (a.bbox(t), b.bbox(t));
        let (px0, py0, px1, py1) = extent(&p);
        let (qx0, qy0, qx1, qy1) = extent(&q);
        // Lights keep a margin so housings and poles do not touch.
        px0 - 3.0 < qx1 && qx0 - 3.0 < px1 && py0 - 3.0 < qy1 && qy0 - 3.0 < py1
    })
}

fn extent(b: &BBox) -> (f32, f32, f32, f32) {
    (
        b.cx - b.w / 2.0,
        b.cy - b.h / 2.0,
        b.cx + b.w / 2.0,
        b.cy + b.h / 2.0,
    )
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

const HOUSING: [u8; 3] = [28, 28, 31];
const POLE: [u8; 3] = [64, 64, 68];
const LAMP_OFF: [u8; 3] = [58, 58, 55];
const GLOW_SCALE: f32 = 3.0;

fn lamp_color(lamp: usize) -> [u8; 3] {
    match lamp {
        0 => [236, 42, 30],
        1 => [246, 198, 38],
        _ => [40, 222, 92],
    }
}

fn active_lamp(state: LightState) -> Option<usize> {
    match state {
        LightState::Red => Some(0),
        LightState::Yellow => Some(1),
        LightState::Green => Some(2),
        LightState::Off => None,
    }
}

/// Blends `color` into every pixel in proportion to the fraction of its
/// sub-samples for which `inside` holds.
fn paint(
    img: &mut Image,
    bounds: (f32, f32, f32, f32),
    color: [u8; 3],
    inside: impl Fn(f32, f32) -> bool,
) {
    let (x0, y0, x1, y1) = bounds;
    let px0 = x0.floor().max(0.0) as usize;
    let py0 = y0.floor().max(0.0) as usize;
    let px1 = (x1.ceil().max(0.0) as usize).min(img.width);
    let py1 = (y1.ceil().max(0.0) as usize).min(img.height);
    let n = SUPERSAMPLE;
    for py in py0..py1 {
        for px in px0..px1 {
            let mut hits = 0;
            for sy in 0..n {
                for sx in 0..n {
                    let x = px as f32 + (sx as f32 + 0.5) / n as f32;
                    let y = py as f32 + (sy as f32 + 0.5) / n as f32;
                    if inside(x, y) {
                        hits += 1;
                    }
                }
            }
            if hits == 0 {
                continue;
            }
            let a = hits as f32 / (n * n) as f32;
            let bg = img.get(px, py);
            let mixed =
                [0, 1, 2].map(|c| (bg[c] as f32 * (1.0 - a) + color[c] as f32 * a).round() as u8);
            img.set(px, py, mixed);
        }
    }
}

fn fill_rect(img: &mut Image, r: (f32, f32, f32, f32), color: [u8; 3]) {
    paint(img, r, color, |x, y| {
        x >= r.0 && x < r.2 && y >= r.1 && y < r.3
    });
}

fn fill_rounded(img: &mut Image, r: (f32, f32, f32, f32), radius: f32, color: [u8; 3]) {
    paint(img, r, color, |x, y| {
        if x < r.0 || x >= r.2 || y < r.1 || y >= r.3 {
            return false;
        }
        let dx = (r.0 + radius - x).max(x - (r.2 - radius)).max(0.0);
        let dy = (r.1 + radius - y).max(y - (r.3 - radius)).max(0.0);
        dx * dx + dy * dy <= radius * radius
    });
}

fn fill_disc(img: &mut Image, cx: f32, cy: f32, radius: f32, color: [u8; 3]) {
    let b = (cx - radius, cy - radius, cx + radius, cy + radius);
    paint(img, b, color, |x, y| {
        (x - cx).powi(2) + (y - cy).powi(2) <= radius * radius
    });
}

/// Additive-looking bloom around a lit lamp: blends toward `color` with
/// weight falling quadratically from `peak` at the centre to 0 at `radius`.
fn glow(img: &mut Image, cx: f32, cy: f32, radius: f32, peak: f32, color: [u8; 3]) {
    let px0 = (cx - radius).floor().max(0.0) as usize;
    let py0 = (cy - radius).floor().max(0.0) as usize;
    let px1 = ((cx + radius).ceil().max(0.0) as usize).min(img.width);
    let py1 = ((cy + radius).ceil().max(0.0) as usize).min(img.height);
    for py in py0..py1 {
        for px in px0..px1 {
            let d = ((px as f32 + 0.5 - cx).powi(2) + (py as f32 + 0.5 - cy).powi(2)).sqrt();
            if d >= radius {
                continue;
            }
            let a = peak * (1.0 - d / radius).powi(2);
            let bg = img.get(px, py);
            img.set(
                px,
                py,
                [0, 1, 2].map(|c| (bg[c] as f32 * (1.0 - a) + color[c] as f32 * a).round() as u8),
            );
        }
    }
}

fn smooth(t: f32) -> f32 {
    t * t * (3.0 - 2.0 * t)
}

/// Static scene behind the lights: value noise with a sky band on top.
pub fn render_background(spec: &ClipSpec) -> Image {
    let (w, h) = (spec.width, spec.height);
    let mut rng = SplitMix64::new(spec.seed ^ 0x6261_636b_6772_6f75);
    let cell = 8usize;
    let (gw, gh) = (w / cell + 2, h / cell + 2);
    let lattice: Vec<f32> = (0..gw * gh).map(|_| rng.next_f32()).collect();
    let horizon = rng.uniform_f32(0.35, 0.6) * h as f32;
    let tint = [
        rng.uniform_f32(0.9, 1.1),
        rng.uniform_f32(0.9, 1.1),
        rng.uniform_f32(0.9, 1.1),
    ];
    let mut img = Image::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let fx = x as f32 / cell as f32;
            let fy = y as f32 / cell as f32;
            let (ix, iy) = (fx as usize, fy as usize);
            let (tx, ty) = (smooth(fx - ix as f32), smooth(fy - iy as f32));
            let at = |i: usize, j: usize| lattice[j * gw + i];
            let top = at(ix, iy) * (1.0 - tx) + at(ix + 1, iy) * tx;
            let bottom = at(ix, iy + 1) * (1.0 - tx) + at(ix + 1, iy + 1) * tx;
            let noise = top * (1.0 - ty) + bottom * ty;
            let rgb = if (y as f32) < horizon {
                let g = y as f32 / horizon;
                [
                    110.0 + 50.0 * g + 20.0 * noise,
                    150.0 + 35.0 * g + 20.0 * noise,
                    200.0 + 15.0 * g + 15.0 * noise,
                ]
            } else {
                let v = 85.0 + 90.0 * noise;
                [v * 1.02, v, v * 0.93]
            };
            img.set(
                x,
                y,
                [0, 1, 2].map(|c| (rgb[c] * tint[c]).clamp(70.0, 235.0) as u8),
            );
        }
    }
    img
}

fn draw_light(img: &mut Image, b: &BBox, state: LightState) {
    let (x0, y0, x1, y1) = extent(b);
    fill_rounded(img, (x0, y0, x1, y1), 0.25 * b.w.min(b.h), HOUSING);
    let lamp_h = b.h / 3.0;
    let radius = 0.36 * b.w.min(lamp_h);
    let on = active_lamp(state);
    if let Some(lamp) = on {
        let cy = y0 + lamp_h * (lamp as f32 + 0.5);
        glow(img, b.cx, cy, GLOW_SCALE * radius, 0.8, lamp_color(lamp));
    }
    for lamp in 0..3 {
        let color = if on == Some(lamp) {
            lamp_color(lamp)
        } else {
            LAMP_OFF
        };
        fill_disc(img, b.cx, y0 + lamp_h * (lamp as f32 + 0.5), radius, color);
    }
}

fn overlap_area(a: (f32, f32, f32, f32), b: (f32, f32, f32, f32)) -> f32 {
    let w = (a.2.min(b.2) - a.0.max(b.0)).max(0.0);
    let h = (a.3.min(b.3) - a.1.max(b.1)).max(0.0);
    w * h
}

/// Renders every frame and its labels.
pub fn generate_clip(spec: &ClipSpec, max_lights: usize) -> Result<(Vec<Image>, Vec<FrameLabel>)> {
    spec.validate(max_lights)?;
    let background = render_background(spec);
    let poses = spec_poses(spec);
    let mut frames = Vec::with_capacity(spec.n_frames);
    let mut labels = Vec::with_capacity(spec.n_frames);
    for t in 0..spec.n_frames {
        let mut img = background.clone();
        let boxes: Vec<BBox> = spec.lights.iter().map(|l| l.bbox(t)).collect();
        for b in &boxes {
            let pw = (0.18 * b.w).max(1.0);
            fill_rect(
                &mut img,
                (b.cx - pw / 2.0, b.cy, b.cx + pw / 2.0, spec.height as f32),
                POLE,
            );
        }
        for (l, b) in spec.lights.iter().zip(&boxes) {
            draw_light(&mut img, b, l.state_at(t));
        }
        let occluder_rect = spec.occluder.as_ref().map(|o| o.rect(&boxes[o.light], t));
        if let (Some(o), Some(r)) = (&spec.occluder, occluder_rect) {
            fill_rect(&mut img, r, o.color);
        }
        if spec.has(Tag::Blur) {
            img = img.box_blur();
        }
        let lights = spec
            .lights
            .iter()
            .zip(&boxes)
            .map(|(l, b)| {
                let covered =
                    occluder_rect.map_or(0.0, |r| overlap_area(extent(b), r) / (b.w * b.h));
                LightLabel {
                    bbox: *b,
                    state: l.state_at(t),
                    visible: covered < 0.5,
                }
            })
            .collect();
        frames.push(img);
        labels.push(FrameLabel {
            lights,
            pose: poses.as_ref().map(|p| p[t]),
        });
    }
    Ok((frames, labels))
}

/// Poses that put the map light exactly on the rendered centre of light 0,
/// at the depth implied by its pixel height.
pub fn spec_poses(spec: &ClipSpec) -> Option<Vec<EgoPose>> {
    let g = spec.geometry.as_ref()?;
    let cam = CameraModel::synthetic(spec.width, spec.height);
    let light = spec.lights.first()?;
    Some(
        (0..spec.n_frames)
            .map(|t| {
                let b = light.bbox(t);
                let z = cam.fy * LIGHT_HEIGHT_M / b.h as f64;
                let p_cam = [
                    (b.cx as f64 - cam.cx) * z / cam.fx,
                    (b.cy as f64 - cam.cy) * z / cam.fy,
                    z,
                ];
                let yaw = g.yaw0 + g.yaw_rate * t as f64;
                EgoPose::placing(g.map_light, p_cam, EgoPose::yaw_rotation(yaw))
            })
            .collect(),
    )
}

pub fn clip_name(index: usize) -> String {
    format!("clip_{index:05}")
}

pub fn build_clip(spec: &ClipSpec, id: String, max_lights: usize) -> Result<Clip> {
    let (frames, labels) = generate_clip(spec, max_lights)?;
    Ok(Clip {
        id,
        fps: DEFAULT_FPS,
        num_states: LightState::ALL.len(),
        frames,
        labels,
        map_light: spec.geometry.as_ref().map(|g| MapLight {
            xyz: g.map_light,
            lane: "ego".to_string(),
        }),
        tags: spec.tags.clone(),
        distance: Some(spec.distance),
    })
}

/// Clip counts per split: 10% valid and 20% test rounded down, the rest train.
pub fn split_sizes(count: usize) -> (usize, usize, usize) {
    let valid = count * 10 / 100;
    let test = count * 20 / 100;
    (count - valid - test, valid, test)
}

/// Writes `count` clips under `out` with an index file and returns the index.
pub fn generate_dataset(
    out: &Path,
    profile: Profile,
    count: usize,
    seed: u64,
    shape: ClipShape,
) -> Result<DatasetIndex> {
    if count < 10 {
        return Err(invalid!("count must be at least 10, got {count}"));
    }
    let specs = (0..count)
        .map(|i| ClipSpec::sample(profile, i, seed, shape))
        .collect::<Result<Vec<_>>>()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let (train, valid, _) = split_sizes(count);
    let mut index = DatasetIndex::default();
    for (i, spec) in specs.iter().enumerate() {
        let (split, list) = if i < train {
            ("train", &mut index.train)
        } else if i < train + valid {
            ("valid", &mut index.valid)
        } else {
            ("test", &mut index.test)
        };
        let rel = format!("{split}/{}", clip_name(i));
        let clip = build_clip(spec, clip_name(i), shape.max_lights)?;
        crate::dataset::write_clip(&out.join(&rel), &clip)?;
        list.push(rel);
    }
    index.write(out)?;
    Ok(index)
}
