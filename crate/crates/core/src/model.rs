//! The multi-frame detector: per-frame conv backbone, convolutional token
//! projection, conv encoder, query decoder and detection heads.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::config::KeyValues;
use crate::error::{invalid, shape_err, Error, Result};
use crate::loss::BBox;
use crate::ops::{BatchStats, NormMode};
use crate::params::ParamStore;
use crate::rng::SplitMix64;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const BN_EPS: f32 = 1e-5;
pub const LN_EPS: f32 = 1e-6;
/// Weight of the newest batch statistic in the running average.
pub const BN_MOMENTUM: f32 = 0.1;

/// Box outputs are mapped into `[margin, 1 − margin]` of the frame extents.
pub const BOX_MARGIN: f32 = 1e-4;

/// Total downsampling of the three stride-2 backbone stages.
pub const BACKBONE_STRIDE: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Frames per input, current frame included.
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    /// Number of object queries.
    pub m: usize,
    /// Number of light states; the background class is index `l`.
    pub l: usize,
    /// Depthwise kernel of the token projection.
    pub s: usize,
    pub widths: [usize; 3],
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub query_dim: usize,
    pub mlp_ratio: usize,
    /// Append normalized x/y coordinate planes to the fused map.
    pub coord_channels: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n: 3,
            h: 128,
            w: 256,
            c: 3,
            m: 16,
            l: 4,
            s: 3,
            widths: [32, 64, 96],
            encoder_depth: 2,
            decoder_depth: 2,
            grid_h: 4,
            grid_w: 4,
            query_dim: 64,
            mlp_ratio: 2,
            coord_channels: true,
        }
    }
}

impl ModelConfig {
    /// Small configuration that trains on a laptop CPU in minutes.
    pub fn tiny() -> Self {
        Self {
            n: 3,
            h: 64,
            w: 64,
            c: 3,
            m: 4,
            l: 4,
            s: 3,
            widths: [8, 16, 24],
            encoder_depth: 1,
            decoder_depth: 1,
            grid_h: 2,
            grid_w: 2,
            query_dim: 32,
            mlp_ratio: 2,
            coord_channels: true,
        }
    }

    pub fn feature_h(&self) -> usize {
        self.h / BACKBONE_STRIDE
    }

    pub fn feature_w(&self) -> usize {
        self.w / BACKBONE_STRIDE
    }

    /// Channels of one frame's projected map.
    pub fn frame_channels(&self) -> usize {
        self.widths[2]
    }

    /// Channels of the fused map seen by the encoder.
    pub fn fused_channels(&self) -> usize {
        self.n * self.frame_channels() + if self.coord_channels { 2 } else { 0 }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n == 0 || self.m == 0 || self.c == 0 {
            return bad(format!(
                "n, m and c must be positive (n={}, m={}, c={})",
                self.n, self.m, self.c
            ));
        }
        if self.l < 2 {
            return bad(format!("l must be at least 2, got {}", self.l));
        }
        if self.s.is_multiple_of(2) {
            return bad(format!("projection kernel s must be odd, got {}", self.s));
        }
        if self.widths.contains(&0) || !self.widths[2].is_multiple_of(2) {
            return bad(format!(
                "backbone widths must be positive with an even last stage, got {:?}",
                self.widths
            ));
        }
        if !self.h.is_multiple_of(BACKBONE_STRIDE)
            || !self.w.is_multiple_of(BACKBONE_STRIDE)
            || self.h == 0
            || self.w == 0
        {
            return bad(format!(
                "frame extents {}x{} must be positive multiples of {BACKBONE_STRIDE}",
                self.h, self.w
            ));
        }
        if self.grid_h * self.grid_w != self.m {
            return bad(format!(
                "query grid {}x{} does not hold m={} queries",
                self.grid_h, self.grid_w, self.m
            ));
        }
        let (fh, fw) = (self.feature_h(), self.feature_w());
        if fh % self.grid_h != 0 || fw % self.grid_w != 0 {
            return bad(format!(
                "feature map {fh}x{fw} is not divisible by the query grid {}x{}",
                self.grid_h, self.grid_w
            ));
        }
        if self.query_dim < 2 || !self.query_dim.is_multiple_of(2) {
            return bad(format!(
                "query_dim must be even and >= 2, got {}",
                self.query_dim
            ));
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be positive".into());
        }
        Ok(())
    }

    /// Keys start from the default configuration; unknown keys are errors.
    pub fn from_key_values(mut kv: KeyValues) -> Result<Self> {
        let d = Self::default();
        let widths = match kv.take_list::<usize>("widths")? {
            None => d.widths,
            Some(v) => <[usize; 3]>::try_from(v.as_slice())
                .map_err(|_| Error::Config(format!("widths needs exactly 3 values, got {v:?}")))?,
        };
        let cfg = Self {
            n: kv.take_or("n", d.n)?,
            h: kv.take_or("h", d.h)?,
            w: kv.take_or("w", d.w)?,
            c: kv.take_or("c", d.c)?,
            m: kv.take_or("m", d.m)?,
            l: kv.take_or("l", d.l)?,
            s: kv.take_or("s", d.s)?,
            widths,
            encoder_depth: kv.take_or("encoder_depth", d.encoder_depth)?,
            decoder_depth: kv.take_or("decoder_depth", d.decoder_depth)?,
            grid_h: kv.take_or("grid_h", d.grid_h)?,
            grid_w: kv.take_or("grid_w", d.grid_w)?,
            query_dim: kv.take_or("query_dim", d.query_dim)?,
            mlp_ratio: kv.take_or("mlp_ratio", d.mlp_ratio)?,
            coord_channels: kv.take_or("coord_channels", d.coord_channels)?,
        };
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_key_values(KeyValues::parse(text, "model config")?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_key_values(KeyValues::read(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let [a, b, c] = self.widths;
        let _ = writeln!(s, "n = {}", self.n);
        let _ = writeln!(s, "h = {}", self.h);
        let _ = writeln!(s, "w = {}", self.w);
        let _ = writeln!(s, "c = {}", self.c);
        let _ = writeln!(s, "m = {}", self.m);
        let _ = writeln!(s, "l = {}", self.l);
        let _ = writeln!(s, "s = {}", self.s);
        let _ = writeln!(s, "widths = {a},{b},{c}");
        let _ = writeln!(s, "encoder_depth = {}", self.encoder_depth);
        let _ = writeln!(s, "decoder_depth = {}", self.decoder_depth);
        let _ = writeln!(s, "grid_h = {}", self.grid_h);
        let _ = writeln!(s, "grid_w = {}", self.grid_w);
        let _ = writeln!(s, "query_dim = {}", self.query_dim);
        let _ = writeln!(s, "mlp_ratio = {}", self.mlp_ratio);
        let _ = writeln!(s, "coord_channels = {}", self.coord_channels);
        s
    }

    /// Number of parameterized layers (convolutions, normalizations, dense heads).
    pub fn layer_count(&self) -> usize {
        8 + 3 + 4 * self.encoder_depth + 9 * self.decoder_depth + 2
    }
}

/// Per-frame decoupled features: regression and classification streams.
#[derive(Clone, Copy, Debug)]
pub struct FeatureSet {
    pub regression: Var,
    pub classification: Var,
}

/// Decoded output for one sample: pixel boxes and state probabilities per query.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub centers: Vec<[f32; 2]>,
    pub widths: Vec<f32>,
    pub heights: Vec<f32>,
    /// `m` rows of `l + 1` probabilities; the last column is background.
    pub scores: Vec<Vec<f32>>,
}

impl Prediction {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn bbox(&self, q: usize) -> BBox {
        BBox::new(
            self.centers[q][0],
            self.centers[q][1],
            self.widths[q],
            self.heights[q],
        )
    }

    /// Bounds, positivity and row-stochastic scores.
    pub fn check(&self, w: usize, h: usize) -> Result<()> {
        for q in 0..self.len() {
            let [cx, cy] = self.centers[q];
            if !(0.0..=w as f32).contains(&cx) || !(0.0..=h as f32).contains(&cy) {
                return Err(invalid!("query {q}: center ({cx}, {cy}) outside the frame"));
            }
            if !(self.widths[q] > 0.0 && self.heights[q] > 0.0) {
                return Err(invalid!("query {q}: non-positive box size"));
            }
            let total: f64 = self.scores[q].iter().map(|&p| p as f64).sum();
            if (total - 1.0).abs() > 1e-5 || self.scores[q].iter().any(|p| !p.is_finite()) {
                return Err(invalid!("query {q}: scores sum to {total}"));
            }
        }
        Ok(())
    }
}

/// Head outputs for a whole batch, still on the tape.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutputs {
    /// `[B·m, 4]` pixel `(cx, cy, w, h)`.
    pub boxes: Var,
    /// `[B·m, l + 1]` probabilities.
    pub probs: Var,
    pub batch: usize,
}

impl HeadOutputs {
    pub fn predictions(&self, tape: &Tape, m: usize) -> Vec<Prediction> {
        let boxes = tape.value(self.boxes).data();
        let probs = tape.value(self.probs);
        let k = probs.shape()[1];
        (0..self.batch)
            .map(|b| {
                let rows = b * m..(b + 1) * m;
                Prediction {
                    centers: rows
                        .clone()
                        .map(|r| [boxes[r * 4], boxes[r * 4 + 1]])
                        .collect(),
                    widths: rows.clone().map(|r| boxes[r * 4 + 2]).collect(),
                    heights: rows.clone().map(|r| boxes[r * 4 + 3]).collect(),
                    scores: rows
                        .map(|r| probs.data()[r * k..(r + 1) * k].to_vec())
                        .collect(),
                }
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Fan-in uniform weights, zero biases, identity batch norms, and the last
    /// convolution of every residual branch zeroed.
    Standard,
    /// Every tensor random, nothing zeroed; for perturbation and gradient probes.
    Random,
}

#[derive(Clone, Debug)]
pub struct ViTLR {
    config: ModelConfig,
    params: ParamStore,
}

impl ViTLR {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::with_init(config, seed, Init::Standard)
    }

    pub fn with_init(config: ModelConfig, seed: u64, init: Init) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            params: ParamStore::new(),
            rng: SplitMix64::new(seed),
            init,
        };
        let cfg = &config;
        let mut cin = cfg.c;
        for (i, &wd) in cfg.widths.iter().enumerate() {
            b.conv(&format!("backbone.stage{i}.conv"), wd, cin, 3, false);
            b.bn(&format!("backbone.stage{i}.bn"), wd);
            cin = wd;
        }
        let cf = cfg.frame_channels();
        b.conv("backbone.split.conv", cf, cf, 1, false);
        b.bn("backbone.split.bn", cf);

        b.conv("proj.dw", cf, 1, cfg.s, false);
        b.bn("proj.bn", cf);
        b.conv("proj.pw", cf, cf, 1, false);

        let ce = cfg.fused_channels();
        for j in 0..cfg.encoder_depth {
            b.convnext(&format!("encoder.{j}"), ce, 7, cfg.mlp_ratio);
        }

        let cq = cfg.query_dim;
        let queries = Tensor::uniform(&[1, cq, cfg.grid_h, cfg.grid_w], 1.0, &mut b.rng);
        b.params.insert("decoder.queries", queries);
        for j in 0..cfg.decoder_depth {
            let p = format!("decoder.{j}");
            b.convnext(&format!("{p}.sim"), cq, 3, cfg.mlp_ratio);
            b.conv(&format!("{p}.cim.proj"), cq, ce, 1, false);
            b.conv(&format!("{p}.cim.dw"), cq, 1, 3, false);
            b.conv(&format!("{p}.cim.out"), cq, cq, 1, true);
            b.conv(&format!("{p}.ffn.fc1"), cq * cfg.mlp_ratio, cq, 1, false);
            b.conv(&format!("{p}.ffn.fc2"), cq, cq * cfg.mlp_ratio, 1, true);
        }
        b.dense("head.box", 4, cq / 2);
        b.dense("head.cls", cfg.l + 1, cq / 2);
        if matches!(init, Init::Standard) {
            tile_query_boxes(&mut b.params, cfg)?;
        }
        Ok(Self {
            config,
            params: b.params,
        })
    }

    /// Reassemble a model from a configuration and a loaded parameter set.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        model.params.load(params)?;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    /// Starts recording a forward pass onto `tape`.
    pub fn graph<'a>(&'a self, tape: &'a mut Tape, mode: NormMode) -> Graph<'a> {
        Graph {
            model: self,
            tape,
            mode,
            vars: HashMap::new(),
            stats: Vec::new(),
        }
    }

    /// Full forward on `n` frames, each `[B, c, h, w]`, oldest first.
    pub fn forward(
        &self,
        tape: &mut Tape,
        frames: &[Tensor],
        mode: NormMode,
    ) -> Result<(HeadOutputs, Vec<(String, BatchStats)>)> {
        let mut g = self.graph(tape, mode);
        let out = g.model_forward(frames)?;
        Ok((out, g.stats))
    }

    /// Inference on a batch of clips; one [`Prediction`] per batch entry.
    pub fn predict(&self, frames: &[Tensor]) -> Result<Vec<Prediction>> {
        let mut tape = Tape::new();
        let (out, _) = self.forward(&mut tape, frames, NormMode::Eval)?;
        Ok(out.predictions(&tape, self.config.m))
    }

    /// Inference on a single clip of `[c, h, w]` (or `[1, c, h, w]`) frames.
    pub fn predict_clip(&self, frames: &[Tensor]) -> Result<Prediction> {
        let cfg = &self.config;
        let batched = frames
            .iter()
            .map(|f| f.reshape(&[1, cfg.c, cfg.h, cfg.w]))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.predict(&batched)?.remove(0))
    }

    /// Fold batch statistics from a training forward into the running buffers.
    pub fn update_running_stats(&mut self, stats: &[(String, BatchStats)]) -> Result<()> {
        self.blend_running_stats(stats, BN_MOMENTUM)
    }

    /// Replace the running buffers outright, e.g. with statistics averaged
    /// over many batches at fixed parameters.
    pub fn set_running_stats(&mut self, stats: &[(String, BatchStats)]) -> Result<()> {
        self.blend_running_stats(stats, 1.0)
    }

    fn blend_running_stats(&mut self, stats: &[(String, BatchStats)], momentum: f32) -> Result<()> {
        for (prefix, s) in stats {
            for (suffix, batch) in [("running_mean", &s.mean), ("running_var", &s.var)] {
                let running = self.params.get_mut(&format!("{prefix}.{suffix}"))?;
                for (r, &v) in running.data_mut().iter_mut().zip(batch.data()) {
                    *r = (1.0 - momentum) * *r + momentum * v;
                }
            }
        }
        Ok(())
    }
}

struct Builder {
    params: ParamStore,
    rng: SplitMix64,
    init: Init,
}

impl Builder {
    fn random(&self) -> bool {
        self.init == Init::Random
    }

    fn conv(&mut self, name: &str, cout: usize, cin_per_group: usize, k: usize, zero: bool) {
        let bound = 1.0 / ((cin_per_group * k * k) as f32).sqrt();
        let shape = [cout, cin_per_group, k, k];
        let weight = if zero && !self.random() {
            Tensor::zeros(&shape)
        } else {
            Tensor::uniform(&shape, bound, &mut self.rng)
        };
        self.params.insert(format!("{name}.weight"), weight);
        let bias = self.bias(cout);
        self.params.insert(format!("{name}.bias"), bias);
    }

    fn dense(&mut self, name: &str, out: usize, inp: usize) {
        let bound = 1.0 / (inp as f32).sqrt();
        let w = Tensor::uniform(&[out, inp], bound, &mut self.rng);
        self.params.insert(format!("{name}.weight"), w);
        let bias = self.bias(out);
        self.params.insert(format!("{name}.bias"), bias);
    }

    fn bias(&mut self, n: usize) -> Tensor {
        if self.random() {
            Tensor::uniform(&[n], 0.1, &mut self.rng)
        } else {
            Tensor::zeros(&[n])
        }
    }

    fn norm(&mut self, name: &str, c: usize, running: bool) {
        let (gamma, beta) = if self.random() {
            let mut g = Tensor::uniform(&[c], 0.5, &mut self.rng);
            g.data_mut().iter_mut().for_each(|v| *v += 1.0);
            (g, Tensor::uniform(&[c], 0.1, &mut self.rng))
        } else {
            (Tensor::full(&[c], 1.0), Tensor::zeros(&[c]))
        };
        self.params.insert(format!("{name}.gamma"), gamma);
        self.params.insert(format!("{name}.beta"), beta);
        if running {
            let (mean, var) = if self.random() {
                let mut v = Tensor::uniform(&[c], 0.5, &mut self.rng);
                v.data_mut().iter_mut().for_each(|x| *x += 1.0);
                (Tensor::uniform(&[c], 0.1, &mut self.rng), v)
            } else {
                (Tensor::zeros(&[c]), Tensor::full(&[c], 1.0))
            };
            self.params.insert(format!("{name}.running_mean"), mean);
            self.params.insert(format!("{name}.running_var"), var);
        }
    }

    fn bn(&mut self, name: &str, c: usize) {
        self.norm(name, c, true);
    }

    fn convnext(&mut self, p: &str, c: usize, k: usize, ratio: usize) {
        self.conv(&format!("{p}.dw"), c, 1, k, false);
        self.norm(&format!("{p}.ln"), c, false);
        self.conv(&format!("{p}.pw1"), c * ratio, c, 1, false);
        self.conv(&format!("{p}.pw2"), c, c * ratio, 1, true);
    }
}

/// A forward pass being recorded. Parameters are registered on first use;
/// batch-norm statistics from training mode are collected for the caller.
pub struct Graph<'a> {
    model: &'a ViTLR,
    tape: &'a mut Tape,
    mode: NormMode,
    vars: HashMap<String, Var>,
    pub stats: Vec<(String, BatchStats)>,
}

impl Graph<'_> {
    pub fn tape(&mut self) -> &mut Tape {
        self.tape
    }

    fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let t = self.model.params.get(name)?.clone();
        let v = self.tape.param(name, t);
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    fn conv(&mut self, x: Var, name: &str, stride: usize, pad: usize) -> Result<Var> {
        let w = self.p(&format!("{name}.weight"))?;
        let b = self.p(&format!("{name}.bias"))?;
        self.tape.conv2d(x, w, b, stride, pad)
    }

    fn dwconv(&mut self, x: Var, name: &str, stride: usize) -> Result<Var> {
        let w = self.p(&format!("{name}.weight"))?;
        let b = self.p(&format!("{name}.bias"))?;
        let k = self.tape.value(w).shape()[2];
        self.tape.dwconv2d(x, w, b, stride, k / 2)
    }

    fn bn(&mut self, x: Var, name: &str) -> Result<Var> {
        let g = self.p(&format!("{name}.gamma"))?;
        let b = self.p(&format!("{name}.beta"))?;
        let params = &self.model.params;
        let rm = params.get(&format!("{name}.running_mean"))?;
        let rv = params.get(&format!("{name}.running_var"))?;
        let (y, stats) = self.tape.batchnorm2d(x, g, b, rm, rv, BN_EPS, self.mode)?;
        if let Some(s) = stats {
            self.stats.push((name.to_string(), s));
        }
        Ok(y)
    }

    fn ln(&mut self, x: Var, name: &str) -> Result<Var> {
        let g = self.p(&format!("{name}.gamma"))?;
        let b = self.p(&format!("{name}.beta"))?;
        self.tape.layernorm(x, g, b, LN_EPS)
    }

    fn convnext(&mut self, x: Var, p: &str) -> Result<Var> {
        let y = self.dwconv(x, &format!("{p}.dw"), 1)?;
        let y = self.ln(y, &format!("{p}.ln"))?;
        let y = self.conv(y, &format!("{p}.pw1"), 1, 0)?;
        let y = self.tape.relu(y);
        let y = self.conv(y, &format!("{p}.pw2"), 1, 0)?;
        self.tape.add(x, y)
    }

    /// Three stride-2 conv stages, then a 1×1 conv split into two streams.
    pub fn backbone_forward(&mut self, frame: Var) -> Result<FeatureSet> {
        let cfg = &self.model.config;
        let [_, c, h, w] = self.tape.value(frame).dims4("frame")?;
        if (c, h, w) != (cfg.c, cfg.h, cfg.w) {
            return Err(shape_err!(
                "frame is {c}x{h}x{w} but the model expects {}x{}x{}",
                cfg.c,
                cfg.h,
                cfg.w
            ));
        }
        let mut x = frame;
        for i in 0..3 {
            x = self.conv(x, &format!("backbone.stage{i}.conv"), 2, 1)?;
            x = self.bn(x, &format!("backbone.stage{i}.bn"))?;
            x = self.tape.relu(x);
        }
        x = self.conv(x, "backbone.split.conv", 1, 0)?;
        x = self.bn(x, "backbone.split.bn")?;
        let half = cfg.frame_channels() / 2;
        Ok(FeatureSet {
            regression: self.tape.narrow(x, 1, 0, half)?,
            classification: self.tape.narrow(x, 1, half, half)?,
        })
    }

    /// Depthwise s×s → batch norm → pointwise 1×1, flattened to `[N, C, Hf·Wf]`.
    pub fn conv_projection(&mut self, features: Var) -> Result<Var> {
        let y = self.dwconv(features, "proj.dw", 1)?;
        let y = self.bn(y, "proj.bn")?;
        let y = self.conv(y, "proj.pw", 1, 0)?;
        self.tape.flatten_spatial(y)
    }

    pub fn encoder_forward(&mut self, fused: Var) -> Result<Var> {
        let mut x = fused;
        for j in 0..self.model.config.encoder_depth {
            x = self.convnext(x, &format!("encoder.{j}"))?;
        }
        Ok(x)
    }

    /// Query grid `[1, Cq, gh, gw]` refined against the encoded map `[N, Ce, Hf, Wf]`;
    /// returns `[N, Cq, gh, gw]`.
    pub fn decoder_forward(&mut self, encoded: Var) -> Result<Var> {
        let cfg = &self.model.config;
        let [n, _, fh, fw] = self.tape.value(encoded).dims4("encoded map")?;
        let (gh, gw) = (cfg.grid_h, cfg.grid_w);
        if fh % gh != 0 || fw % gw != 0 {
            return Err(shape_err!(
                "encoded map {fh}x{fw} is not divisible by the query grid {gh}x{gw}"
            ));
        }
        let q = self.p("decoder.queries")?;
        let mut q = self.tape.expand_batch(q, n)?;
        for j in 0..cfg.decoder_depth {
            let p = format!("decoder.{j}");
            q = self.convnext(q, &format!("{p}.sim"))?;

            let up = self.tape.upsample_nearest(q, fh / gh, fw / gw)?;
            let mem = self.conv(encoded, &format!("{p}.cim.proj"), 1, 0)?;
            let mixed = self.tape.add(up, mem)?;
            let mixed = self.dwconv(mixed, &format!("{p}.cim.dw"), 1)?;
            let pooled = self.tape.adaptive_avg_pool2d(mixed, gh, gw)?;
            let cross = self.conv(pooled, &format!("{p}.cim.out"), 1, 0)?;
            q = self.tape.add(q, cross)?;

            let f = self.conv(q, &format!("{p}.ffn.fc1"), 1, 0)?;
            let f = self.tape.relu(f);
            let f = self.conv(f, &format!("{p}.ffn.fc2"), 1, 0)?;
            q = self.tape.add(q, f)?;
        }
        Ok(q)
    }

    /// Box head on the first half of the query channels, class head on the second.
    pub fn heads_forward(&mut self, query_feats: Var) -> Result<HeadOutputs> {
        let cfg = &self.model.config;
        let (w, h) = (cfg.w as f32, cfg.h as f32);
        let batch = self.tape.value(query_feats).shape()[0];
        let tokens = self.tape.tokens(query_feats)?;
        let half = cfg.query_dim / 2;
        let reg = self.tape.narrow(tokens, 1, 0, half)?;
        let cls = self.tape.narrow(tokens, 1, half, half)?;

        let wb = self.p("head.box.weight")?;
        let bb = self.p("head.box.bias")?;
        let raw = self.tape.dense(reg, wb, bb)?;
        let unit = self.tape.sigmoid(raw);
        // Sigmoid saturates to exactly 0 in f32; keep sizes strictly positive.
        let k = 1.0 - 2.0 * BOX_MARGIN;
        let scaled = self
            .tape
            .scale_columns(unit, &[k * w, k * h, k * w, k * h])?;
        let rows = self.tape.value(scaled).shape()[0];
        let offset: Vec<f32> = (0..rows)
            .flat_map(|_| [w, h, w, h].map(|e| BOX_MARGIN * e))
            .collect();
        let offset = self.tape.leaf(Tensor::new(&[rows, 4], offset)?);
        let boxes = self.tape.add(scaled, offset)?;

        let wc = self.p("head.cls.weight")?;
        let bc = self.p("head.cls.bias")?;
        let logits = self.tape.dense(cls, wc, bc)?;
        let probs = self.tape.softmax(logits)?;
        Ok(HeadOutputs {
            boxes,
            probs,
            batch,
        })
    }

    /// `n` frames, each `[B, c, h, w]`, oldest first; outputs refer to the last.
    pub fn model_forward(&mut self, frames: &[Tensor]) -> Result<HeadOutputs> {
        let cfg = self.model.config.clone();
        if frames.len() != cfg.n {
            return Err(invalid!("expected {} frames, got {}", cfg.n, frames.len()));
        }
        let batch = frames[0].shape()[0];
        if let Some(f) = frames.iter().find(|f| f.shape()[0] != batch) {
            return Err(shape_err!(
                "frames disagree on batch size: {batch} vs {}",
                f.shape()[0]
            ));
        }
        let inputs: Vec<Var> = frames.iter().map(|f| self.tape.leaf(f.clone())).collect();
        let stacked = if inputs.len() == 1 {
            inputs[0]
        } else {
            self.tape.concat_batch(&inputs)?
        };
        let feats = self.backbone_forward(stacked)?;
        let joined = self
            .tape
            .concat_channels(&[feats.regression, feats.classification])?;
        let tokens = self.conv_projection(joined)?;
        let (fh, fw) = (cfg.feature_h(), cfg.feature_w());
        let cf = cfg.frame_channels();
        let map = self.tape.reshape(tokens, &[cfg.n * batch, cf, fh, fw])?;

        let mut parts = Vec::with_capacity(cfg.n + 1);
        for k in 0..cfg.n {
            parts.push(if cfg.n == 1 {
                map
            } else {
                self.tape.narrow(map, 0, k * batch, batch)?
            });
        }
        if cfg.coord_channels {
            parts.push(self.tape.leaf(coordinate_planes(batch, fh, fw)));
        }
        let fused = if parts.len() == 1 {
            parts[0]
        } else {
            self.tape.concat_channels(&parts)?
        };
        let encoded = self.encoder_forward(fused)?;
        let decoded = self.decoder_forward(encoded)?;
        self.heads_forward(decoded)
    }
}

/// Shifts the box-head half of every query by the minimum-norm amount that
/// puts its initial predicted center at the center of its grid cell. Residual
/// branches start at zero, so this fixes the boxes of a fresh model; spreading
/// them gives bipartite matching a consistent spatial assignment to start from.
fn tile_query_boxes(params: &mut ParamStore, cfg: &ModelConfig) -> Result<()> {
    let half = cfg.query_dim / 2;
    let w = params.get("head.box.weight")?.clone();
    let bias = params.get("head.box.bias")?.clone();
    let row = |r: usize| &w.data()[r * half..(r + 1) * half];
    let mut gram = [[0.0f64; 4]; 4];
    for (i, g) in gram.iter_mut().enumerate() {
        for (j, v) in g.iter_mut().enumerate() {
            *v = row(i)
                .iter()
                .zip(row(j))
                .map(|(a, b)| *a as f64 * *b as f64)
                .sum();
        }
    }
    let logit = |u: f64| {
        let s = ((u - BOX_MARGIN as f64) / (1.0 - 2.0 * BOX_MARGIN as f64)).clamp(1e-3, 1.0 - 1e-3);
        (s / (1.0 - s)).ln()
    };
    let (gh, gw) = (cfg.grid_h, cfg.grid_w);
    let queries = params.get_mut("decoder.queries")?;
    let q = queries.data_mut();
    for gy in 0..gh {
        for gx in 0..gw {
            let at = |c: usize| (c * gh + gy) * gw + gx;
            let target = [
                logit((gx as f64 + 0.5) / gw as f64),
                logit((gy as f64 + 0.5) / gh as f64),
                0.0,
                0.0,
            ];
            let mut resid = [0.0f64; 4];
            for (r, v) in resid.iter_mut().enumerate() {
                let now: f64 = (0..half).map(|c| row(r)[c] as f64 * q[at(c)] as f64).sum();
                *v = target[r] - bias.data()[r] as f64 - now;
            }
            let Some(y) = solve4(gram, resid) else {
                return Ok(());
            };
            for c in 0..half {
                let shift: f64 = (0..4).map(|r| row(r)[c] as f64 * y[r]).sum();
                q[at(c)] += shift as f32;
            }
        }
    }
    Ok(())
}

/// Gaussian elimination with partial pivoting; `None` if singular.
fn solve4(mut a: [[f64; 4]; 4], mut b: [f64; 4]) -> Option<[f64; 4]> {
    for col in 0..4 {
        let p = (col..4).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[p][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, p);
        b.swap(col, p);
        for r in col + 1..4 {
            let f = a[r][col] / a[col][col];
            for c in col..4 {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = [0.0; 4];
    for r in (0..4).rev() {
        let s: f64 = (r + 1..4).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Some(x)
}

/// `[N, 2, h, w]` planes holding x and y cell centers normalized to [-1, 1].
pub fn coordinate_planes(n: usize, h: usize, w: usize) -> Tensor {
    let mut t = Tensor::zeros(&[n, 2, h, w]);
    let d = t.data_mut();
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                d[((b * 2) * h + y) * w + x] = (2.0 * x as f32 + 1.0) / w as f32 - 1.0;
                d[((b * 2 + 1) * h + y) * w + x] = (2.0 * y as f32 + 1.0) / h as f32 - 1.0;
            }
        }
    }
    t
}
