//! Detection evaluation: greedy IoU matching, average precision, P/R/F1,
//! latency measurement and bucketed reports.

use std::fmt::Write as _;
use std::time::Instant;

use crate::dataset::{Clip, Distance, Tag};
use crate::error::{invalid, Result};
use crate::loss::{iou, BBox, Target};
use crate::model::{Prediction, ViTLR};
use crate::tensor::Tensor;

/// Detections below this confidence are dropped.
pub const CONFIDENCE_FLOOR: f32 = 0.05;
pub const IOU_THRESHOLD: f32 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub state: usize,
    /// Highest non-background probability.
    pub confidence: f32,
    /// Query slot that produced the detection.
    pub query: usize,
}

/// One detection per query whose argmax is not background and whose best
/// non-background probability reaches `floor`.
pub fn decode(pred: &Prediction, floor: f32) -> Vec<Detection> {
    let mut out = Vec::new();
    for (q, row) in pred.scores.iter().enumerate() {
        let background = row.len() - 1;
        let mut best = 0;
        for (k, &p) in row.iter().enumerate() {
            if p > row[best] {
                best = k;
            }
        }
        if best == background {
            continue;
        }
        let confidence = row[best].clamp(0.0, 1.0);
        if confidence >= floor {
            out.push(Detection {
                bbox: pred.bbox(q),
                state: best,
                confidence,
                query: q,
            });
        }
    }
    out
}

/// Per-frame matching outcome.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameMatch {
    /// `true` for each detection that is a true positive.
    pub det_tp: Vec<bool>,
    /// Index of the detection matched to each ground truth.
    pub gt_match: Vec<Option<usize>>,
}

impl FrameMatch {
    pub fn tp(&self) -> usize {
        self.det_tp.iter().filter(|&&t| t).count()
    }

    pub fn fp(&self) -> usize {
        self.det_tp.len() - self.tp()
    }

    pub fn fn_(&self) -> usize {
        self.gt_match.iter().filter(|m| m.is_none()).count()
    }
}

/// Detection indices by descending confidence; equal confidences keep input order.
fn by_confidence(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence));
    order
}

/// Greedy matching in descending confidence. A detection is a true positive
/// when some unmatched ground truth of the same state overlaps it with
/// IoU above `threshold`; the highest-IoU such ground truth is taken.
pub fn match_detections(dets: &[Detection], gts: &[Target], threshold: f32) -> FrameMatch {
    let mut det_tp = vec![false; dets.len()];
    let mut gt_match = vec![None; gts.len()];
    for d in by_confidence(dets) {
        let mut best: Option<(usize, f32)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if gt_match[g].is_some() || gt.state != dets[d].state {
                continue;
            }
            let v = iou(&dets[d].bbox, &gt.bbox);
            if v > threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            det_tp[d] = true;
            gt_match[g] = Some(d);
        }
    }
    FrameMatch { det_tp, gt_match }
}

/// All-point interpolated AP for one class over a set of frames. `None` when
/// the class has no ground truth.
pub fn average_precision(
    frames: &[(Vec<Detection>, Vec<Target>)],
    class: usize,
    threshold: f32,
) -> Option<f64> {
    let mut scored: Vec<(f32, bool)> = Vec::new();
    let mut total_gt = 0usize;
    for (dets, gts) in frames {
        let d: Vec<Detection> = dets.iter().filter(|d| d.state == class).copied().collect();
        let g: Vec<Target> = gts.iter().filter(|g| g.state == class).copied().collect();
        total_gt += g.len();
        let m = match_detections(&d, &g, threshold);
        scored.extend(
            d.iter()
                .zip(&m.det_tp)
                .map(|(det, &tp)| (det.confidence, tp)),
        );
    }
    if total_gt == 0 {
        return None;
    }
    // Stable sort keeps input order among equal confidences.
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut precision = Vec::with_capacity(scored.len());
    let mut recall = Vec::with_capacity(scored.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &(_, is_tp) in &scored {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(tp as f64 / total_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_r) * p;
        prev_r = *r;
    }
    Some(ap)
}

/// Mean AP over classes that have at least one ground truth.
pub fn mean_ap(aps: &[Option<f64>]) -> Result<f64> {
    let present: Vec<f64> = aps.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(invalid!("no class has any ground truth; mAP is undefined"));
    }
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

/// Precision, recall and F1; zero denominators give 0.
pub fn prf(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let p = ratio(tp, tp + fp);
    let r = ratio(tp, tp + fn_);
    let f1 = if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    };
    (p, r, f1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub bucket: String,
    /// Per-class AP; `None` for classes without ground truth.
    pub class_ap: Vec<Option<f64>>,
    /// `None` when the bucket holds no ground truth at all.
    pub map: Option<f64>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

/// Scores a set of frames, each with its detections and ground truths.
pub fn evaluate(
    bucket: &str,
    frames: &[(Vec<Detection>, Vec<Target>)],
    num_classes: usize,
) -> EvalReport {
    let class_ap: Vec<Option<f64>> = (0..num_classes)
        .map(|c| average_precision(frames, c, IOU_THRESHOLD))
        .collect();
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (dets, gts) in frames {
        let m = match_detections(dets, gts, IOU_THRESHOLD);
        tp += m.tp();
        fp += m.fp();
        fn_ += m.fn_();
    }
    let (precision, recall, f1) = prf(tp, fp, fn_);
    EvalReport {
        bucket: bucket.to_string(),
        map: mean_ap(&class_ap).ok(),
        class_ap,
        precision,
        recall,
        f1,
        tp,
        fp,
        fn_,
    }
}

pub const CSV_HEADER: &str = "bucket,class,ap,map,precision,recall,f1,tp,fp,fn";

/// One row per report, aggregated over classes.
pub fn reports_csv(reports: &[EvalReport]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in reports {
        let map = r.map.map_or(String::new(), |v| format!("{v:.6}"));
        let _ = writeln!(
            s,
            "{},all,{map},{map},{:.6},{:.6},{:.6},{},{},{}",
            r.bucket, r.precision, r.recall, r.f1, r.tp, r.fp, r.fn_
        );
    }
    s
}

/// Human-readable summary lines.
pub fn reports_summary(reports: &[EvalReport], state_names: &[&str]) -> String {
    let mut s = String::new();
    for r in reports {
        let map = r.map.map_or("n/a".to_string(), |v| format!("{:.4}", v));
        let _ = writeln!(
            s,
            "[{}] mAP {map}  P {:.4}  R {:.4}  F1 {:.4}  (tp {} fp {} fn {})",
            r.bucket, r.precision, r.recall, r.f1, r.tp, r.fp, r.fn_
        );
        for (c, ap) in r.class_ap.iter().enumerate() {
            if let Some(ap) = ap {
                let name = state_names.get(c).copied().unwrap_or("?");
                let _ = writeln!(s, "    AP[{name}] {ap:.4}");
            }
        }
    }
    s
}

/// Runs `model` on the last `n` frames of each clip and pairs the decoded
/// detections with the last frame's labels.
pub fn detect_clips(model: &ViTLR, clips: &[&Clip]) -> Result<Vec<(Vec<Detection>, Vec<Target>)>> {
    let n = model.config().n;
    clips
        .iter()
        .map(|clip| {
            let last = clip.len() - 1;
            let window = clip.window(last, n)?;
            let pred = model.predict_clip(&window)?;
            Ok((decode(&pred, CONFIDENCE_FLOOR), clip.targets(last)))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bucketing {
    Distance,
    Scenario,
    FramesN,
}

impl std::str::FromStr for Bucketing {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "distance" => Ok(Self::Distance),
            "scenario" => Ok(Self::Scenario),
            "frames-n" => Ok(Self::FramesN),
            other => Err(invalid!(
                "unknown bucket key `{other}` (expected distance, scenario or frames-n)"
            )),
        }
    }
}

/// One report per bucket. Distance and scenario buckets partition `clips` by
/// their labels and use `models[0]`; frames-n evaluates every model on all clips.
pub fn bucket_eval(
    models: &[ViTLR],
    clips: &[Clip],
    bucketing: Bucketing,
) -> Result<Vec<EvalReport>> {
    let first = models
        .first()
        .ok_or_else(|| invalid!("no model to evaluate"))?;
    let classes = first.config().l;
    let mut reports = Vec::new();
    match bucketing {
        Bucketing::FramesN => {
            let all: Vec<&Clip> = clips.iter().collect();
            for model in models {
                let frames = detect_clips(model, &all)?;
                reports.push(evaluate(
                    &format!("n={}", model.config().n),
                    &frames,
                    classes,
                ));
            }
        }
        Bucketing::Distance => {
            for d in Distance::ALL {
                let members: Vec<&Clip> = clips.iter().filter(|c| c.distance == Some(d)).collect();
                if !members.is_empty() {
                    reports.push(evaluate(d.name(), &detect_clips(first, &members)?, classes));
                }
            }
        }
        Bucketing::Scenario => {
            for t in Tag::ALL {
                let members: Vec<&Clip> = clips.iter().filter(|c| c.tags.contains(&t)).collect();
                if !members.is_empty() {
                    reports.push(evaluate(t.name(), &detect_clips(first, &members)?, classes));
                }
            }
        }
    }
    if reports.is_empty() {
        return Err(invalid!("no clip carries a label for this bucketing"));
    }
    Ok(reports)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FpsStats {
    pub median_ms: f64,
    pub p10_ms: f64,
    pub p90_ms: f64,
    /// `1000 / median_ms`.
    pub fps: f64,
    pub reps: usize,
    pub machine: String,
}

/// Nearest-rank percentile of sorted values.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((q * (sorted.len() - 1) as f64).round() as usize).min(sorted.len() - 1);
    sorted[idx]
}

/// Wall-clock latency of single-clip inference, cycling through `clips`.
pub fn fps_bench(
    model: &ViTLR,
    clips: &[Vec<Tensor>],
    warmup: usize,
    reps: usize,
) -> Result<FpsStats> {
    if reps < 3 {
        return Err(invalid!("need at least 3 timed repetitions, got {reps}"));
    }
    if clips.is_empty() {
        return Err(invalid!("no clips to benchmark"));
    }
    for i in 0..warmup {
        model.predict_clip(&clips[i % clips.len()])?;
    }
    let mut times = Vec::with_capacity(reps);
    for i in 0..reps {
        let clip = &clips[i % clips.len()];
        let start = Instant::now();
        model.predict_clip(clip)?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    let median_ms = percentile(&times, 0.5).max(1e-9);
    Ok(FpsStats {
        median_ms,
        p10_ms: percentile(&times, 0.1),
        p90_ms: percentile(&times, 0.9),
        fps: 1e3 / median_ms,
        reps,
        machine: machine_descriptor(),
    })
}

/// OS, architecture, logical CPU count and, where available, the CPU model.
pub fn machine_descriptor() -> String {
    let cpus = std::thread::available_parallelism().map_or(1, |n| n.get());
    let model = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|m| m.trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".to_string());
    format!(
        "{} {} {cpus} logical cpus, {model}",
        std::env::consts::OS,
        std::env::consts::ARCH
    )
}
