//! Adam optimisation over synthetic clips.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::checkpoint::save_checkpoint;
use crate::config::KeyValues;
use crate::dataset::{load_clip, resolve_clip_dirs, Clip, DatasetIndex, INDEX_FILE};
use crate::error::{invalid, Error, Result};
use crate::loss::{total_loss_on_tape, LossConfig, Target};
use crate::model::{ModelConfig, ViTLR};
use crate::ops::{BatchStats, NormMode};
use crate::params::ParamStore;
use crate::rng::SplitMix64;
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const LOSS_HEADER: &str = "step,focal,ciou,total";
pub const CHECKPOINT_FILE: &str = "checkpoint.vtlr";
pub const MODEL_CONFIG_FILE: &str = "model.cfg";
pub const LOSS_FILE: &str = "loss.csv";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        for (k, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("{k} must lie in (0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!(
                "eps must be positive, got {}",
                self.eps
            )));
        }
        Ok(())
    }
}

/// First and second moments per trainable parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl OptimState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: BTreeMap<String, Tensor> = params
            .trainable()
            .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
            .collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

fn first_missing<A, B>(a: &BTreeMap<String, A>, b: impl Fn(&str) -> Option<B>) -> Option<&str> {
    a.keys().map(String::as_str).find(|k| b(k).is_none())
}

/// One bias-corrected Adam update of every trainable parameter.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptimState,
    cfg: &AdamConfig,
) -> Result<()> {
    let trainable: BTreeMap<String, ()> =
        params.trainable().map(|(k, _)| (k.clone(), ())).collect();
    let checks = [
        first_missing(grads, |k| trainable.get(k))
            .map(|k| format!("gradient `{k}` has no trainable parameter")),
        first_missing(&trainable, |k| grads.get(k))
            .map(|k| format!("parameter `{k}` has no gradient")),
        first_missing(&trainable, |k| state.m.get(k))
            .map(|k| format!("parameter `{k}` has no optimiser state")),
        first_missing(&state.m, |k| trainable.get(k))
            .map(|k| format!("optimiser state `{k}` has no parameter")),
    ];
    if let Some(msg) = checks.into_iter().flatten().next() {
        return Err(invalid!("{msg}"));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - (cfg.beta1 as f64).powi(t);
    let bc2 = 1.0 - (cfg.beta2 as f64).powi(t);
    for (name, g) in grads {
        let p = params.get_mut(name)?;
        if p.shape() != g.shape() {
            return Err(invalid!(
                "gradient `{name}` has shape {:?}, parameter {:?}",
                g.shape(),
                p.shape()
            ));
        }
        let m = state.m.get_mut(name).expect("checked above");
        let v = state.v.get_mut(name).expect("checked above");
        for (((p, &g), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m as f64 / bc1;
            let v_hat = *v as f64 / bc2;
            *p -= (cfg.lr as f64 * m_hat / (v_hat.sqrt() + cfg.eps as f64)) as f32;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    /// Clips per step.
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub dataset: PathBuf,
    /// `None` trains the tiny configuration.
    pub model_config: Option<PathBuf>,
    pub out: PathBuf,
    pub log_interval: usize,
    /// Also checkpoint every this many steps; 0 only at the end.
    pub checkpoint_every: usize,
    pub loss: LossConfig,
}

impl TrainConfig {
    pub fn new(dataset: impl Into<PathBuf>, out: impl Into<PathBuf>) -> Self {
        Self {
            steps: 1000,
            batch_size: 8,
            adam: AdamConfig::default(),
            seed: 0,
            dataset: dataset.into(),
            model_config: None,
            out: out.into(),
            log_interval: 50,
            checkpoint_every: 0,
            loss: LossConfig::default(),
        }
    }

    pub fn from_key_values(mut kv: KeyValues) -> Result<Self> {
        let dataset: PathBuf = kv
            .take("dataset")?
            .ok_or_else(|| Error::Config("missing required key `dataset`".into()))?;
        let out: PathBuf = kv
            .take("out")?
            .ok_or_else(|| Error::Config("missing required key `out`".into()))?;
        let d = Self::new(dataset, out);
        let cfg = Self {
            steps: kv.take_or("steps", d.steps)?,
            batch_size: kv.take_or("batch_size", d.batch_size)?,
            adam: AdamConfig {
                lr: kv.take_or("lr", d.adam.lr)?,
                beta1: kv.take_or("beta1", d.adam.beta1)?,
                beta2: kv.take_or("beta2", d.adam.beta2)?,
                eps: kv.take_or("eps", d.adam.eps)?,
            },
            seed: kv.take_or("seed", d.seed)?,
            model_config: kv.take("model_config")?,
            log_interval: kv.take_or("log_interval", d.log_interval)?,
            checkpoint_every: kv.take_or("checkpoint_every", d.checkpoint_every)?,
            loss: LossConfig::take_from(&mut kv)?,
            ..d
        };
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_key_values(KeyValues::parse(text, "train config")?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_key_values(KeyValues::read(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.log_interval == 0 {
            return Err(Error::Config("log_interval must be at least 1".into()));
        }
        self.adam.validate()?;
        self.loss.validate()
    }

    /// Every resolved key with its value, in file syntax order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("steps", self.steps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.adam.lr.to_string()),
            ("beta1", self.adam.beta1.to_string()),
            ("beta2", self.adam.beta2.to_string()),
            ("eps", self.adam.eps.to_string()),
            ("seed", self.seed.to_string()),
            ("dataset", self.dataset.display().to_string()),
            (
                "model_config",
                self.model_config
                    .as_ref()
                    .map_or(String::new(), |p| p.display().to_string()),
            ),
            ("out", self.out.display().to_string()),
            ("log_interval", self.log_interval.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("lambda", self.loss.lambda.to_string()),
            ("focal_alpha", self.loss.alpha.to_string()),
            ("focal_gamma", self.loss.gamma.to_string()),
            ("cost_class", self.loss.cost_class.to_string()),
            ("cost_box", self.loss.cost_box.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .filter(|(_, v)| !v.is_empty())
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn resolve_model_config(&self) -> Result<ModelConfig> {
        match &self.model_config {
            Some(p) => ModelConfig::read(p),
            None => Ok(ModelConfig::tiny()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub focal: f64,
    pub ciou: f64,
    pub total: f64,
}

impl LossRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{:.9},{:.9},{:.9}",
            self.step, self.focal, self.ciou, self.total
        )
    }
}

/// Training clips under `path`: the train split of a dataset root, or every
/// clip under a split or clip directory.
pub fn load_training_clips(path: &Path) -> Result<Vec<Clip>> {
    let dirs = if path.join(INDEX_FILE).is_file() {
        DatasetIndex::read(path)?
            .train
            .iter()
            .map(|d| path.join(d))
            .collect()
    } else {
        resolve_clip_dirs(path)?
    };
    dirs.iter().map(|d| load_clip(d)).collect()
}

pub fn check_clips(clips: &[Clip], cfg: &ModelConfig) -> Result<()> {
    if clips.is_empty() {
        return Err(invalid!("dataset holds no training clips"));
    }
    for clip in clips {
        let first = &clip.frames[0];
        if (first.width, first.height) != (cfg.w, cfg.h) {
            return Err(invalid!(
                "clip {} has {}x{} frames, the model expects {}x{}",
                clip.id,
                first.width,
                first.height,
                cfg.w,
                cfg.h
            ));
        }
        if clip.len() < cfg.n {
            return Err(invalid!(
                "clip {} has {} frames, the model needs {}",
                clip.id,
                clip.len(),
                cfg.n
            ));
        }
        if let Some((i, l)) = clip
            .labels
            .iter()
            .enumerate()
            .find(|(_, l)| l.lights.len() > cfg.m)
        {
            return Err(invalid!(
                "clip {} frame {i} has {} lights, more than m={}",
                clip.id,
                l.lights.len(),
                cfg.m
            ));
        }
    }
    Ok(())
}

/// Stacks `[c, h, w]` tensors into `[B, c, h, w]`.
fn stack(items: &[Tensor]) -> Result<Tensor> {
    let shape = items[0].shape().to_vec();
    let mut data = Vec::with_capacity(items.len() * items[0].numel());
    for t in items {
        if t.shape() != shape.as_slice() {
            return Err(invalid!("cannot stack {:?} with {:?}", t.shape(), shape));
        }
        data.extend_from_slice(t.data());
    }
    let mut full = vec![items.len()];
    full.extend_from_slice(&shape);
    Tensor::new(&full, data)
}

/// Seeded epoch-wise shuffle; each draw also picks the window's last frame.
struct Sampler {
    rng: SplitMix64,
    order: Vec<usize>,
    cursor: usize,
}

impl Sampler {
    fn new(count: usize, rng: SplitMix64) -> Self {
        let mut s = Self {
            rng,
            order: (0..count).collect(),
            cursor: count,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.rng.shuffle(&mut self.order);
        self.cursor = 0;
    }

    fn next(&mut self) -> usize {
        if self.cursor == self.order.len() {
            self.reshuffle();
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }
}

/// One optimisation step on a batch of `(clip, last frame)` pairs.
pub fn train_step(
    model: &mut ViTLR,
    state: &mut OptimState,
    batch: &[(&Clip, usize)],
    adam: &AdamConfig,
    loss_cfg: &LossConfig,
) -> Result<(f64, f64, f64)> {
    let n = model.config().n;
    let windows = batch
        .iter()
        .map(|(clip, end)| clip.window(*end, n))
        .collect::<Result<Vec<_>>>()?;
    let frames = (0..n)
        .map(|k| stack(&windows.iter().map(|w| w[k].clone()).collect::<Vec<_>>()))
        .collect::<Result<Vec<_>>>()?;
    let targets: Vec<Vec<Target>> = batch.iter().map(|(clip, end)| clip.targets(*end)).collect();
    let mut tape = Tape::new();
    let (heads, stats) = model.forward(&mut tape, &frames, NormMode::Train)?;
    let (loss, parts, _) = total_loss_on_tape(&mut tape, &heads, &targets, loss_cfg)?;
    if !parts.total.is_finite() {
        return Ok((parts.focal, parts.ciou, parts.total));
    }
    let grads: BTreeMap<String, Tensor> = tape
        .backward(loss)?
        .into_params()
        .into_iter()
        .filter(|(k, _)| !crate::params::is_buffer(k))
        .collect();
    adam_step(model.params_mut(), &grads, state, adam)?;
    model.update_running_stats(&stats)?;
    Ok((parts.focal, parts.ciou, parts.total))
}

/// Re-estimates every batch-norm running buffer as the average of batch
/// statistics over all clips (window on the last frame) with the final
/// parameters. The momentum buffers lag behind the weights when training
/// stops at a non-zero learning rate.
pub fn recalibrate_norms(model: &mut ViTLR, clips: &[Clip], batch_size: usize) -> Result<()> {
    let n = model.config().n;
    let mut sums: Vec<(String, BatchStats)> = Vec::new();
    let mut batches = 0usize;
    for chunk in clips.chunks(batch_size.max(1)) {
        let windows = chunk
            .iter()
            .map(|c| c.window(c.len() - 1, n))
            .collect::<Result<Vec<_>>>()?;
        let frames = (0..n)
            .map(|k| stack(&windows.iter().map(|w| w[k].clone()).collect::<Vec<_>>()))
            .collect::<Result<Vec<_>>>()?;
        let mut tape = Tape::new();
        let (_, stats) = model.forward(&mut tape, &frames, NormMode::Train)?;
        if sums.is_empty() {
            sums = stats;
        } else {
            for ((_, acc), (_, s)) in sums.iter_mut().zip(&stats) {
                for (a, b) in [(&mut acc.mean, &s.mean), (&mut acc.var, &s.var)] {
                    a.data_mut()
                        .iter_mut()
                        .zip(b.data())
                        .for_each(|(x, y)| *x += y);
                }
            }
        }
        batches += 1;
    }
    if batches == 0 {
        return Ok(());
    }
    let k = 1.0 / batches as f32;
    for (_, s) in &mut sums {
        s.mean
            .data_mut()
            .iter_mut()
            .chain(s.var.data_mut().iter_mut())
            .for_each(|v| *v *= k);
    }
    model.set_running_stats(&sums)
}

pub struct TrainOutcome {
    pub model: ViTLR,
    pub log: Vec<LossRow>,
    pub checkpoint: PathBuf,
}

/// Trains on in-memory clips, writing the loss log, model config and
/// checkpoints into `cfg.out`. `progress` sees every row.
pub fn train_on(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    clips: &[Clip],
    mut progress: impl FnMut(&LossRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    check_clips(clips, model_cfg)?;
    fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    let cfg_path = cfg.out.join(MODEL_CONFIG_FILE);
    fs::write(&cfg_path, model_cfg.to_text()).map_err(|e| Error::io(&cfg_path, e))?;
    let log_path = cfg.out.join(LOSS_FILE);
    let file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut writer = BufWriter::new(file);
    let io = |e| Error::io(&log_path, e);
    writeln!(writer, "{LOSS_HEADER}").map_err(io)?;

    let mut model = ViTLR::new(model_cfg.clone(), cfg.seed)?;
    let mut state = OptimState::new(model.params());
    let root = SplitMix64::new(cfg.seed);
    let mut sampler = Sampler::new(clips.len(), root.fork(1));
    let mut ends = root.fork(2);
    let checkpoint = cfg.out.join(CHECKPOINT_FILE);
    let n = model_cfg.n;
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let batch: Vec<(&Clip, usize)> = (0..cfg.batch_size)
            .map(|_| {
                let clip = &clips[sampler.next()];
                let end = n - 1 + ends.below(clip.len() + 1 - n);
                (clip, end)
            })
            .collect();
        let (focal, ciou, total) =
            match train_step(&mut model, &mut state, &batch, &cfg.adam, &cfg.loss) {
                Err(Error::NonFinite(msg)) => {
                    writer.flush().map_err(io)?;
                    return Err(Error::NonFinite(format!("{msg} at step {step}")));
                }
                r => r?,
            };
        let row = LossRow {
            step,
            focal,
            ciou,
            total,
        };
        if !total.is_finite() {
            writer.flush().map_err(io)?;
            return Err(Error::NonFinite(format!(
                "training loss became {total} at step {step}"
            )));
        }
        writeln!(writer, "{}", row.csv()).map_err(io)?;
        progress(&row);
        log.push(row);
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step < cfg.steps {
            writer.flush().map_err(io)?;
            save_checkpoint(model.params(), &checkpoint)?;
        }
    }
    writer.flush().map_err(io)?;
    recalibrate_norms(&mut model, clips, cfg.batch_size)?;
    save_checkpoint(model.params(), &checkpoint)?;
    Ok(TrainOutcome {
        model,
        log,
        checkpoint,
    })
}

/// Loads the training clips named by `cfg.dataset` and trains.
pub fn train(cfg: &TrainConfig, progress: impl FnMut(&LossRow)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model_cfg = cfg.resolve_model_config()?;
    let clips = load_training_clips(&cfg.dataset)?;
    train_on(cfg, &model_cfg, &clips, progress)
}

/// Rebuilds a model from a checkpoint and the `model.cfg` beside it, unless
/// a configuration path is given.
pub fn load_model(checkpoint: &Path, model_config: Option<&Path>) -> Result<ViTLR> {
    let cfg_path = match model_config {
        Some(p) => p.to_path_buf(),
        None => checkpoint
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(MODEL_CONFIG_FILE),
    };
    let cfg = ModelConfig::read(&cfg_path)?;
    let params = crate::checkpoint::load_checkpoint(checkpoint)?;
    ViTLR::from_params(cfg, params)
}
