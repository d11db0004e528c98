use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use vitlr_core::config::KeyValues;
use vitlr_core::dataset::{load_clip, resolve_clip_dirs, DatasetIndex, Split, INDEX_FILE};
use vitlr_core::egolane::{
    egolane_pipeline, project, CameraModel, Detector, OracleDetector, Projection,
};
use vitlr_core::lint::lint_graph;
use vitlr_core::metrics::{
    bucket_eval, decode, detect_clips, evaluate, fps_bench, reports_csv, reports_summary,
    Detection, CONFIDENCE_FLOOR,
};
use vitlr_core::rng::SplitMix64;
use vitlr_core::synth::{generate_dataset, split_sizes, ClipShape};
use vitlr_core::train::{
    load_model, load_training_clips, train_on, TrainConfig, MODEL_CONFIG_FILE,
};
use vitlr_core::{Clip, Image, LightState, ModelConfig, Tensor, ViTLR};

use crate::args::*;
use crate::manifest::Run;

/// Exit 1 for rejected input, 2 for failures after validation.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<vitlr_core::Error> for Failure {
    fn from(e: vitlr_core::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn usage(e: impl ToString) -> Failure {
    Failure::Usage(e.to_string())
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |e| Failure::Runtime(format!("{}: {e}", path.display()))
}

fn state_name(state: usize) -> String {
    LightState::from_index(state).map_or_else(|| state.to_string(), |s| s.name().to_string())
}

/// Applies `key=value` overrides on top of `base`.
fn model_config(
    base: Option<&Path>,
    fallback: ModelConfig,
    opts: &[String],
) -> Result<ModelConfig, Failure> {
    let mut kv = match base {
        Some(p) => KeyValues::read(p).map_err(usage)?,
        None => KeyValues::parse(&fallback.to_text(), "model config").map_err(usage)?,
    };
    for opt in opts {
        let (k, v) = opt
            .split_once('=')
            .ok_or_else(|| usage(format!("--model-opt expects KEY=VALUE, got `{opt}`")))?;
        kv.set(k.trim(), v.trim());
    }
    ModelConfig::from_key_values(kv).map_err(usage)
}

fn record_model(run: &mut Run, cfg: &ModelConfig) {
    for line in cfg.to_text().lines() {
        if let Some((k, v)) = line.split_once('=') {
            run.set(format!("model.{}", k.trim()), v.trim());
        }
    }
}

fn emit_lines(out: Option<&Path>, file: &str, lines: &[String]) -> CmdResult {
    match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
            let path = dir.join(file);
            let text: String = lines.iter().map(|l| format!("{l}\n")).collect();
            fs::write(&path, text).map_err(io_err(&path))
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            for l in lines {
                writeln!(stdout, "{l}").map_err(|e| Failure::Runtime(e.to_string()))?;
            }
            Ok(())
        }
    }
}

fn json<T: Serialize>(value: &T) -> Result<String, Failure> {
    serde_json::to_string(value).map_err(|e| Failure::Runtime(e.to_string()))
}

/// Clips named by a data argument; a dataset root means its test split.
fn eval_clips(path: &Path) -> Result<Vec<Clip>, Failure> {
    let dirs = if path.join(INDEX_FILE).is_file() {
        let index = DatasetIndex::read(path)?;
        index
            .split(Split::Test)
            .iter()
            .map(|d| path.join(d))
            .collect()
    } else {
        resolve_clip_dirs(path).map_err(usage)?
    };
    Ok(dirs
        .iter()
        .map(|d| load_clip(d))
        .collect::<vitlr_core::Result<_>>()?)
}

pub fn gen_data(a: GenDataArgs, run: &mut Run) -> CmdResult {
    if a.count < 10 {
        return Err(usage(format!(
            "--count must be at least 10, got {}",
            a.count
        )));
    }
    let shape = ClipShape {
        height: a.height,
        width: a.width,
        n_frames: a.frames,
        max_lights: a.max_lights,
    };
    vitlr_core::synth::ClipSpec::sample(a.profile, 0, a.seed, shape).map_err(usage)?;
    run.set("profile", a.profile);
    run.set("count", a.count);
    run.set("height", a.height);
    run.set("width", a.width);
    run.set("frames", a.frames);
    run.set("max_lights", a.max_lights);
    run.set("out", a.out.display());
    run.seed = Some(a.seed);
    run.out = Some(a.out.clone());
    let index = generate_dataset(&a.out, a.profile, a.count, a.seed, shape)?;
    let (tr, va, te) = split_sizes(a.count);
    debug_assert_eq!(
        (index.train.len(), index.valid.len(), index.test.len()),
        (tr, va, te)
    );
    println!(
        "wrote {} clips to {} ({} train, {} valid, {} test)",
        index.len(),
        a.out.display(),
        index.train.len(),
        index.valid.len(),
        index.test.len()
    );
    Ok(())
}

pub fn train(a: TrainArgs, run: &mut Run) -> CmdResult {
    let mut kv = match &a.config {
        Some(p) => KeyValues::read(p).map_err(usage)?,
        None => KeyValues::empty("flags"),
    };
    for (k, v) in a.overrides() {
        kv.set(k, v);
    }
    let cfg = TrainConfig::from_key_values(kv).map_err(usage)?;
    let model_cfg = model_config(
        cfg.model_config.as_deref(),
        ModelConfig::tiny(),
        &a.model_opts,
    )?;
    for (k, v) in cfg.entries() {
        run.set(k, v);
    }
    record_model(run, &model_cfg);
    run.seed = Some(cfg.seed);
    run.out = Some(cfg.out.clone());

    let clips = load_training_clips(&cfg.dataset)?;
    let quiet = a.quiet;
    let interval = cfg.log_interval;
    let outcome = train_on(&cfg, &model_cfg, &clips, |row| {
        if !quiet && (row.step % interval == 0 || row.step == 1) {
            eprintln!(
                "step {:>6}  focal {:.5}  ciou {:.5}  total {:.5}",
                row.step, row.focal, row.ciou, row.total
            );
        }
    })?;
    let last = outcome.log.last().expect("steps >= 1");
    println!(
        "trained {} steps on {} clips, final loss {:.5}, checkpoint {}",
        last.step,
        clips.len(),
        last.total,
        outcome.checkpoint.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct BoxOut {
    cx: f32,
    cy: f32,
    w: f32,
    h: f32,
    state: String,
    conf: f32,
}

#[derive(Serialize)]
struct FrameOut {
    frame: usize,
    boxes: Vec<BoxOut>,
}

fn frame_line(frame: usize, dets: &[Detection]) -> Result<String, Failure> {
    json(&FrameOut {
        frame,
        boxes: dets
            .iter()
            .map(|d| BoxOut {
                cx: d.bbox.cx,
                cy: d.bbox.cy,
                w: d.bbox.w,
                h: d.bbox.h,
                state: state_name(d.state),
                conf: d.confidence,
            })
            .collect(),
    })
}

fn checkpoint_config(
    checkpoint: &Path,
    model_config: Option<&Path>,
) -> Result<ModelConfig, Failure> {
    let path = match model_config {
        Some(p) => p.to_path_buf(),
        None => checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join(MODEL_CONFIG_FILE),
    };
    ModelConfig::read(&path).map_err(usage)
}

pub fn infer(a: InferArgs, run: &mut Run) -> CmdResult {
    let cfg = checkpoint_config(&a.checkpoint, a.model_config.as_deref())?;
    if !a.frames.is_empty() && a.frames.len() != cfg.n {
        return Err(usage(format!(
            "expected {} frames, got {}",
            cfg.n,
            a.frames.len()
        )));
    }
    run.set("checkpoint", a.checkpoint.display());
    if let Some(c) = &a.clip {
        run.set("clip", c.display());
    }
    if !a.frames.is_empty() {
        let names: Vec<String> = a.frames.iter().map(|p| p.display().to_string()).collect();
        run.set("frames", names.join(","));
    }
    record_model(run, &cfg);
    run.out = a.out.clone();

    let model = load_model(&a.checkpoint, a.model_config.as_deref())?;
    let mut lines = Vec::new();
    if let Some(dir) = &a.clip {
        let clip = load_clip(dir)?;
        for frame in cfg.n.saturating_sub(1)..clip.len() {
            let dets = model.detect(&clip, frame)?;
            lines.push(frame_line(frame, &dets)?);
        }
        if lines.is_empty() {
            return Err(Failure::Runtime(format!(
                "clip has {} frames, the model needs {}",
                clip.len(),
                cfg.n
            )));
        }
    } else {
        let frames = a
            .frames
            .iter()
            .map(|p| Image::read_ppm(p).map(|img| img.to_tensor()))
            .collect::<vitlr_core::Result<Vec<Tensor>>>()?;
        let pred = model.predict_clip(&frames)?;
        lines.push(frame_line(
            frames.len() - 1,
            &decode(&pred, CONFIDENCE_FLOOR),
        )?);
    }
    emit_lines(a.out.as_deref(), "detections.jsonl", &lines)
}

pub fn eval(a: EvalArgs, run: &mut Run) -> CmdResult {
    let configs = a
        .checkpoint
        .iter()
        .map(|c| checkpoint_config(c, a.model_config.as_deref()))
        .collect::<Result<Vec<_>, _>>()?;
    if a.bucket != Some(vitlr_core::metrics::Bucketing::FramesN) && configs.len() > 1 {
        return Err(usage("several checkpoints need --bucket frames-n"));
    }
    let names: Vec<String> = a
        .checkpoint
        .iter()
        .map(|p| p.display().to_string())
        .collect();
    run.set("checkpoint", names.join(","));
    run.set("data", a.data.display());
    run.set(
        "bucket",
        match a.bucket {
            None => "none",
            Some(vitlr_core::metrics::Bucketing::Distance) => "distance",
            Some(vitlr_core::metrics::Bucketing::Scenario) => "scenario",
            Some(vitlr_core::metrics::Bucketing::FramesN) => "frames-n",
        },
    );
    run.out = a.out.clone();

    let models = a
        .checkpoint
        .iter()
        .map(|c| load_model(c, a.model_config.as_deref()))
        .collect::<vitlr_core::Result<Vec<ViTLR>>>()?;
    let clips = eval_clips(&a.data)?;
    if clips.is_empty() {
        return Err(Failure::Runtime(format!(
            "no clips under {}",
            a.data.display()
        )));
    }
    let reports = match a.bucket {
        Some(b) => bucket_eval(&models, &clips, b)?,
        None => {
            let refs: Vec<&Clip> = clips.iter().collect();
            let frames = detect_clips(&models[0], &refs)?;
            vec![evaluate("all", &frames, models[0].config().l)]
        }
    };
    let csv = reports_csv(&reports);
    let summary = reports_summary(&reports, &LightState::NAMES);
    match &a.out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
            let path = dir.join("report.csv");
            fs::write(&path, &csv).map_err(io_err(&path))?;
            print!("{summary}");
        }
        None => print!("{csv}\n{summary}"),
    }
    Ok(())
}

pub fn egolane(a: EgolaneArgs, run: &mut Run) -> CmdResult {
    if !(a.radius > 0.0) {
        return Err(usage(format!(
            "--radius must be positive, got {}",
            a.radius
        )));
    }
    if a.oracle && a.window == 0 {
        return Err(usage("--window must be at least 1"));
    }
    run.set("clip", a.clip.display());
    run.set("radius", a.radius);
    match &a.checkpoint {
        Some(c) => run.set("checkpoint", c.display()),
        None => {
            run.set("detector", "oracle");
            run.set("window", a.window);
        }
    }
    run.out = a.out.clone();

    let clip = load_clip(&a.clip)?;
    let poses = clip
        .poses()
        .ok_or_else(|| Failure::Runtime(format!("clip {} carries no poses", clip.id)))?;
    let light = clip
        .map_light
        .clone()
        .ok_or_else(|| Failure::Runtime(format!("clip {} carries no map light", clip.id)))?;
    let (w, h) = (clip.frames[0].width, clip.frames[0].height);
    let cam = CameraModel::synthetic(w, h);
    let detector: Box<dyn Detector> = match &a.checkpoint {
        Some(c) => Box::new(load_model(c, a.model_config.as_deref())?),
        None => Box::new(OracleDetector { window: a.window }),
    };
    let records = egolane_pipeline(detector.as_ref(), &clip, &poses, &light, &cam, a.radius)?;
    for r in records.iter().filter(|r| r.distance_px.is_none()) {
        match project(light.xyz, &poses[r.frame], &cam) {
            Projection::Pixel { u, v } if !cam.contains(u, v) => {
                eprintln!(
                    "frame {}: map light projects off-image at ({u:.1}, {v:.1})",
                    r.frame
                )
            }
            Projection::BehindCamera => {
                eprintln!("frame {}: map light is behind the camera", r.frame)
            }
            _ => {}
        }
    }
    let lines = records.iter().map(json).collect::<Result<Vec<_>, _>>()?;
    emit_lines(a.out.as_deref(), "egolane.jsonl", &lines)
}

#[derive(Serialize)]
struct BenchOut<'a> {
    n: usize,
    h: usize,
    w: usize,
    reps: usize,
    warmup: usize,
    median_ms: f64,
    p10_ms: f64,
    p90_ms: f64,
    fps: f64,
    machine: &'a str,
}

pub fn bench(a: BenchArgs, run: &mut Run) -> CmdResult {
    if a.reps < 3 {
        return Err(usage(format!("--reps must be at least 3, got {}", a.reps)));
    }
    let cfg = match &a.checkpoint {
        Some(c) => checkpoint_config(c, a.model.model_config.as_deref())?,
        None => model_config(
            a.model.model_config.as_deref(),
            ModelConfig::default(),
            &a.model.model_opts,
        )?,
    };
    if let Some(c) = &a.checkpoint {
        run.set("checkpoint", c.display());
    }
    if let Some(d) = &a.data {
        run.set("data", d.display());
    }
    run.set("warmup", a.warmup);
    run.set("reps", a.reps);
    record_model(run, &cfg);
    run.seed = Some(a.seed);
    run.out = a.out.clone();

    let model = match &a.checkpoint {
        Some(c) => load_model(c, a.model.model_config.as_deref())?,
        None => ViTLR::new(cfg.clone(), a.seed)?,
    };
    let inputs: Vec<Vec<Tensor>> = match &a.data {
        Some(d) => eval_clips(d)?
            .iter()
            .take(16)
            .map(|c| c.window(c.len() - 1, cfg.n))
            .collect::<vitlr_core::Result<_>>()?,
        None => {
            let mut rng = SplitMix64::new(a.seed).fork(1);
            (0..4)
                .map(|_| {
                    (0..cfg.n)
                        .map(|_| {
                            let mut t = Tensor::uniform(&[cfg.c, cfg.h, cfg.w], 0.5, &mut rng);
                            t.data_mut().iter_mut().for_each(|v| *v += 0.5);
                            t
                        })
                        .collect()
                })
                .collect()
        }
    };
    let stats = fps_bench(&model, &inputs, a.warmup, a.reps)?;
    println!(
        "n={} {}x{}: median {:.3} ms (p10 {:.3}, p90 {:.3}), {:.2} FPS over {} reps",
        cfg.n, cfg.h, cfg.w, stats.median_ms, stats.p10_ms, stats.p90_ms, stats.fps, stats.reps
    );
    println!("machine: {}", stats.machine);
    if let Some(dir) = &a.out {
        let out = BenchOut {
            n: cfg.n,
            h: cfg.h,
            w: cfg.w,
            reps: stats.reps,
            warmup: a.warmup,
            median_ms: stats.median_ms,
            p10_ms: stats.p10_ms,
            p90_ms: stats.p90_ms,
            fps: stats.fps,
            machine: &stats.machine,
        };
        emit_lines(Some(dir), "bench.json", &[json(&out)?])?;
    }
    Ok(())
}

pub fn lint(a: LintArgs, run: &mut Run) -> CmdResult {
    let cfg = match &a.checkpoint {
        Some(c) => checkpoint_config(c, a.model.model_config.as_deref())?,
        None => model_config(
            a.model.model_config.as_deref(),
            ModelConfig::default(),
            &a.model.model_opts,
        )?,
    };
    record_model(run, &cfg);
    run.out = a.out.clone();
    // The graph depends on the configuration only, so weights are never loaded.
    let report = lint_graph(&ViTLR::new(cfg, 0)?)?;
    let text = report.to_text();
    let json_text =
        serde_json::to_string_pretty(&report).map_err(|e| Failure::Runtime(e.to_string()))?;
    if a.json {
        println!("{json_text}");
    } else {
        print!("{text}");
    }
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        for (name, body) in [("lint.txt", text), ("lint.json", json_text + "\n")] {
            let path: PathBuf = dir.join(name);
            fs::write(&path, body).map_err(io_err(&path))?;
        }
    }
    Ok(())
}
