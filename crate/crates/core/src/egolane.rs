//! Ego-lane light selection: project the mapped light into the frame and pick
//! the nearest detection inside a pixel radius.

use serde::Serialize;

use crate::dataset::{Clip, LightState};
use crate::error::{invalid, Result};
use crate::metrics::{decode, Detection, CONFIDENCE_FLOOR};
use crate::model::ViTLR;

/// Points closer than this to the camera plane count as behind it.
pub const Z_MIN: f64 = 0.1;
pub const DEFAULT_RADIUS: f64 = 50.0;

/// Focal length of the synthetic camera relative to the frame height.
pub const SYNTH_FOCAL_PER_HEIGHT: f64 = 3.75;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraModel {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(invalid!(
                "focal lengths must be positive, got fx={fx} fy={fy}"
            ));
        }
        if !(0.0..=width as f64).contains(&cx) || !(0.0..=height as f64).contains(&cy) {
            return Err(invalid!(
                "principal point ({cx}, {cy}) outside the {width}x{height} image"
            ));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Intrinsics used by the synthetic generator for a `width × height` frame.
    pub fn synthetic(width: usize, height: usize) -> Self {
        let f = SYNTH_FOCAL_PER_HEIGHT * height as f64;
        Self {
            fx: f,
            fy: f,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
        }
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        (0.0..=self.width as f64).contains(&u) && (0.0..=self.height as f64).contains(&v)
    }
}

/// Camera position in world coordinates and the world→camera rotation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EgoPose {
    pub position: [f64; 3],
    /// Row-major 3×3.
    pub rotation: [[f64; 3]; 3],
}

impl EgoPose {
    pub fn new(position: [f64; 3], rotation: [[f64; 3]; 3]) -> Result<Self> {
        let r = rotation;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-6 {
                    return Err(invalid!(
                        "rotation is not orthonormal (RᵀR[{i}][{j}] = {dot})"
                    ));
                }
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        if (det - 1.0).abs() > 1e-6 {
            return Err(invalid!("rotation determinant is {det}, expected +1"));
        }
        if position.iter().any(|v| !v.is_finite()) {
            return Err(invalid!("pose position is not finite"));
        }
        Ok(Self { position, rotation })
    }

    pub fn identity() -> Self {
        Self {
            position: [0.0; 3],
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    /// Rotation about the camera's vertical axis by `yaw` radians.
    pub fn yaw_rotation(yaw: f64) -> [[f64; 3]; 3] {
        let (s, c) = yaw.sin_cos();
        [[c, 0.0, -s], [0.0, 1.0, 0.0], [s, 0.0, c]]
    }

    pub fn to_camera(&self, p_world: [f64; 3]) -> [f64; 3] {
        let d = [
            p_world[0] - self.position[0],
            p_world[1] - self.position[1],
            p_world[2] - self.position[2],
        ];
        let r = &self.rotation;
        [0, 1, 2].map(|i| r[i][0] * d[0] + r[i][1] * d[1] + r[i][2] * d[2])
    }

    /// The pose that places `p_world` at camera coordinates `p_cam` under `rotation`.
    pub fn placing(p_world: [f64; 3], p_cam: [f64; 3], rotation: [[f64; 3]; 3]) -> Self {
        let r = &rotation;
        // position = p_world − Rᵀ p_cam
        let rt = [0, 1, 2].map(|i| r[0][i] * p_cam[0] + r[1][i] * p_cam[1] + r[2][i] * p_cam[2]);
        Self {
            position: [p_world[0] - rt[0], p_world[1] - rt[1], p_world[2] - rt[2]],
            rotation,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapLight {
    pub xyz: [f64; 3],
    pub lane: String,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Projection {
    Pixel { u: f64, v: f64 },
    BehindCamera,
}

/// Pinhole projection of a camera-frame point.
pub fn project_camera(p_cam: [f64; 3], cam: &CameraModel) -> Projection {
    let [x, y, z] = p_cam;
    if z <= Z_MIN {
        return Projection::BehindCamera;
    }
    Projection::Pixel {
        u: cam.fx * x / z + cam.cx,
        v: cam.fy * y / z + cam.cy,
    }
}

pub fn project(p_world: [f64; 3], pose: &EgoPose, cam: &CameraModel) -> Projection {
    project_camera(pose.to_camera(p_world), cam)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Selection {
    /// Index into the detection list.
    pub index: usize,
    pub distance: f64,
}

/// Nearest detection center within `radius` of `(u, v)`. Equal distances
/// prefer higher confidence, then lower query index.
pub fn select_ego_light(dets: &[Detection], u: f64, v: f64, radius: f64) -> Option<Selection> {
    let mut best: Option<Selection> = None;
    for (i, d) in dets.iter().enumerate() {
        let dist = (d.bbox.cx as f64 - u).hypot(d.bbox.cy as f64 - v);
        if dist > radius {
            continue;
        }
        let better = match best {
            None => true,
            Some(b) => {
                let cur = &dets[b.index];
                dist < b.distance
                    || (dist == b.distance
                        && (d.confidence > cur.confidence
                            || (d.confidence == cur.confidence && d.query < cur.query)))
            }
        };
        if better {
            best = Some(Selection {
                index: i,
                distance: dist,
            });
        }
    }
    best
}

/// Something that turns the frames of a clip into detections for one frame.
pub trait Detector {
    /// Frames consumed per call, ending at the evaluated frame.
    fn window(&self) -> usize;
    fn detect(&self, clip: &Clip, frame: usize) -> Result<Vec<Detection>>;
}

impl Detector for ViTLR {
    fn window(&self) -> usize {
        self.config().n
    }

    fn detect(&self, clip: &Clip, frame: usize) -> Result<Vec<Detection>> {
        let window = clip.window(frame, self.config().n)?;
        Ok(decode(&self.predict_clip(&window)?, CONFIDENCE_FLOOR))
    }
}

/// Returns the annotated boxes as confidence-1 detections.
#[derive(Clone, Copy, Debug)]
pub struct OracleDetector {
    pub window: usize,
}

impl Detector for OracleDetector {
    fn window(&self) -> usize {
        self.window
    }

    fn detect(&self, clip: &Clip, frame: usize) -> Result<Vec<Detection>> {
        Ok(clip
            .targets(frame)
            .into_iter()
            .enumerate()
            .map(|(i, t)| Detection {
                bbox: t.bbox,
                state: t.state,
                confidence: 1.0,
                query: i,
            })
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EgoRecord {
    pub frame: usize,
    /// State name, or `"none"` when no detection was selected.
    pub state: String,
    pub distance_px: Option<f64>,
}

impl EgoRecord {
    pub fn state(&self) -> Option<LightState> {
        self.state.parse().ok()
    }
}

/// Slides a window over the clip and records the ego-lane state per frame,
/// starting at the first frame with a full window.
pub fn egolane_pipeline(
    detector: &dyn Detector,
    clip: &Clip,
    poses: &[EgoPose],
    light: &MapLight,
    cam: &CameraModel,
    radius: f64,
) -> Result<Vec<EgoRecord>> {
    if poses.len() != clip.len() {
        return Err(invalid!(
            "{} poses for a clip of {} frames",
            poses.len(),
            clip.len()
        ));
    }
    if !(radius > 0.0) {
        return Err(invalid!("radius must be positive, got {radius}"));
    }
    let n = detector.window();
    if clip.len() < n {
        return Err(invalid!("clip has {} frames, window needs {n}", clip.len()));
    }
    let mut records = Vec::with_capacity(clip.len() + 1 - n);
    for frame in n - 1..clip.len() {
        let dets = detector.detect(clip, frame)?;
        let chosen = match project(light.xyz, &poses[frame], cam) {
            Projection::Pixel { u, v } if cam.contains(u, v) => {
                select_ego_light(&dets, u, v, radius)
            }
            _ => None,
        };
        records.push(match chosen {
            Some(s) => EgoRecord {
                frame,
                state: LightState::from_index(dets[s.index].state).map_or_else(
                    || dets[s.index].state.to_string(),
                    |st| st.name().to_string(),
                ),
                distance_px: Some(s.distance),
            },
            None => EgoRecord {
                frame,
                state: "none".to_string(),
                distance_px: None,
            },
        });
    }
    Ok(records)
}
