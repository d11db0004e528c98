//! Operator compatibility report for NPU deployment.
//!
//! The model is traced once in inference mode and every recorded operation
//! is classified against the target runtime's operator allowlist.

use serde::Serialize;

use crate::error::Result;
use crate::model::{ModelConfig, ViTLR};
use crate::ops::NormMode;
use crate::tape::{OpKind, Tape};
use crate::tensor::Tensor;

/// Operators the runtime accepts.
pub const ALLOWLIST: [&str; 5] = [
    "Dense",
    "Flatten",
    "Reshape",
    "BatchNormalization",
    "Conv2D",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Allowed,
    /// Element-wise or layout glue outside the allowlist; reported, not flagged.
    Auxiliary,
    Warning,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LintEntry {
    pub index: usize,
    pub op: &'static str,
    /// Parameter prefix of the layer, empty for parameter-free operations.
    pub layer: String,
    pub kernel: Option<usize>,
    pub output_shape: Vec<usize>,
    pub verdict: Verdict,
    pub message: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LintReport {
    pub entries: Vec<LintEntry>,
}

fn op_name(kind: OpKind) -> &'static str {
    match kind {
        OpKind::Conv2d => "Conv2D",
        OpKind::DepthwiseConv2d => "DepthwiseConv2D",
        OpKind::BatchNorm => "BatchNormalization",
        OpKind::LayerNorm => "LayerNormalization",
        OpKind::Dense => "Dense",
        OpKind::Reshape => "Reshape",
        OpKind::Flatten => "Flatten",
        OpKind::Relu => "Relu",
        OpKind::Sigmoid => "Sigmoid",
        OpKind::Softmax => "Softmax",
        OpKind::AvgPool => "AveragePool",
        OpKind::Upsample => "Upsample",
        OpKind::Concat => "Concat",
        OpKind::Narrow => "Slice",
        OpKind::Tokens => "Transpose",
        OpKind::Add => "Add",
        OpKind::Expand => "Expand",
        OpKind::ScaleColumns | OpKind::Scale => "Mul",
        OpKind::Sum => "ReduceSum",
        OpKind::ScalarFn => "Loss",
        OpKind::Input => "Input",
        OpKind::Param => "Param",
    }
}

fn classify(kind: OpKind, kernel: Option<usize>) -> (Verdict, Option<String>) {
    match kind {
        OpKind::LayerNorm => (
            Verdict::Warning,
            Some("LayerNormalization is not in the operator allowlist".into()),
        ),
        OpKind::Conv2d | OpKind::DepthwiseConv2d => match kernel {
            Some(k) if k != 1 && k != 3 => (
                Verdict::Warning,
                Some(format!(
                    "preference violation: {k}x{k} kernel, 3x3 or 1x1 preferred"
                )),
            ),
            _ => (Verdict::Allowed, None),
        },
        OpKind::BatchNorm | OpKind::Dense | OpKind::Reshape | OpKind::Flatten => {
            (Verdict::Allowed, None)
        }
        _ => (Verdict::Auxiliary, None),
    }
}

fn layer_of(params: &[String]) -> String {
    params
        .first()
        .map(|p| {
            p.rsplit_once('.')
                .map_or(p.as_str(), |(head, _)| head)
                .to_string()
        })
        .unwrap_or_default()
}

/// Traces `model` on one all-zero clip and classifies every operation.
pub fn lint_graph(model: &ViTLR) -> Result<LintReport> {
    let cfg = model.config();
    let frames: Vec<Tensor> = (0..cfg.n)
        .map(|_| Tensor::zeros(&[1, cfg.c, cfg.h, cfg.w]))
        .collect();
    let mut tape = Tape::new();
    model.forward(&mut tape, &frames, NormMode::Eval)?;
    let entries = tape
        .records()
        .into_iter()
        .map(|r| {
            let (verdict, message) = classify(r.kind, r.kernel);
            LintEntry {
                index: r.index,
                op: op_name(r.kind),
                layer: layer_of(&r.params),
                kernel: r.kernel,
                output_shape: r.output_shape,
                verdict,
                message,
            }
        })
        .collect();
    Ok(LintReport { entries })
}

/// Warnings `config` should raise: one LayerNorm per encoder block and per
/// decoder interaction block, each 7×7 encoder kernel, and the projection
/// kernel when it is neither 1 nor 3.
pub fn expected_warning_count(config: &ModelConfig) -> usize {
    let s = usize::from(config.s != 1 && config.s != 3);
    2 * config.encoder_depth + config.decoder_depth + s
}

impl LintReport {
    /// Entries backed by parameters, i.e. instantiated layers.
    pub fn layers(&self) -> impl Iterator<Item = &LintEntry> {
        self.entries.iter().filter(|e| !e.layer.is_empty())
    }

    pub fn warnings(&self) -> impl Iterator<Item = &LintEntry> {
        self.entries
            .iter()
            .filter(|e| e.verdict == Verdict::Warning)
    }

    pub fn count(&self, verdict: Verdict) -> usize {
        self.entries.iter().filter(|e| e.verdict == verdict).count()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let kernel = e.kernel.map_or(String::from("-"), |k| format!("{k}x{k}"));
            let verdict = match e.verdict {
                Verdict::Allowed => "ok",
                Verdict::Auxiliary => "aux",
                Verdict::Warning => "WARN",
            };
            out.push_str(&format!(
                "{:>4}  {:<5} {:<20} {:<6} {:<28} {:?}",
                e.index,
                verdict,
                e.op,
                kernel,
                if e.layer.is_empty() { "-" } else { &e.layer },
                e.output_shape
            ));
            if let Some(m) = &e.message {
                out.push_str("  ");
                out.push_str(m);
            }
            out.push('\n');
        }
        out.push_str(&format!(
            "{} operations, {} layers: {} allowed, {} auxiliary, {} warnings\n",
            self.entries.len(),
            self.layers().count(),
            self.count(Verdict::Allowed),
            self.count(Verdict::Auxiliary),
            self.count(Verdict::Warning)
        ));
        out
    }
}
