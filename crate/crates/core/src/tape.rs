//! Record-and-replay reverse-mode differentiation.
//!
//! Every operation executed through a [`Tape`] appends a node holding its
//! output value and whatever the backward kernel needs. [`Tape::backward`]
//! walks the nodes in exact reverse order and accumulates gradients
//! additively, so a value consumed `k` times receives the sum of `k`
//! contributions.

use std::collections::BTreeMap;

use crate::error::{invalid, shape_err, Result};
use crate::ops::{self, BatchNormCache, BatchStats, LayerNormCache, NormMode};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operator class of a recorded node; used by the graph linter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Input,
    Param,
    Conv2d,
    DepthwiseConv2d,
    BatchNorm,
    LayerNorm,
    Relu,
    Sigmoid,
    Softmax,
    Dense,
    Reshape,
    Flatten,
    AvgPool,
    Upsample,
    Concat,
    Narrow,
    Tokens,
    Add,
    Expand,
    ScaleColumns,
    Scale,
    Sum,
    ScalarFn,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        groups: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: BatchNormCache,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: LayerNormCache,
    },
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    Dense {
        x: Var,
        w: Var,
        b: Var,
    },
    Reshape(Var),
    Pool(Var),
    Upsample(Var),
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Tokens(Var),
    Add(Var, Var),
    Expand(Var),
    ScaleColumns {
        x: Var,
        factors: Vec<f32>,
    },
    Scale {
        x: Var,
        k: f32,
    },
    Sum(Var),
    /// Scalar output whose gradient w.r.t. `x` was computed in the forward pass.
    ScalarFn {
        x: Var,
        local_grad: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    kind: OpKind,
    param: Option<String>,
}

/// One recorded operation as seen by an inspector such as the graph linter.
#[derive(Clone, Debug, PartialEq)]
pub struct OpRecord {
    pub index: usize,
    pub kind: OpKind,
    /// Names of parameters consumed directly by this operation.
    pub params: Vec<String>,
    /// Square kernel size for convolutions.
    pub kernel: Option<usize>,
    pub output_shape: Vec<usize>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: BTreeMap<String, Tensor>,
    visit_order: Vec<usize>,
}

impl Gradients {
    /// Gradient of a node; zero-shaped-like-value nodes that were not reached return `None`.
    pub fn of(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients keyed by parameter name; parameters registered on the tape but
    /// not reached by the loss are present with zero gradient.
    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor> {
        self.params
    }

    /// Indices of operation nodes in the order the reverse pass visited them.
    pub fn visit_order(&self) -> &[usize] {
        &self.visit_order
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, kind: OpKind) -> Var {
        self.nodes.push(Node {
            value,
            op,
            kind,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Constant input; receives a gradient but is not a parameter.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, OpKind::Input)
    }

    /// Named trainable parameter.
    pub fn param(&mut self, name: &str, t: Tensor) -> Var {
        let v = self.push(t, Op::Leaf, OpKind::Param);
        self.nodes[v.0].param = Some(name.to_string());
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let y = ops::conv2d(self.value(x), self.value(w), self.value(b), stride, pad, 1)?;
        Ok(self.push(
            y,
            Op::Conv {
                x,
                w,
                b,
                stride,
                pad,
                groups: 1,
            },
            OpKind::Conv2d,
        ))
    }

    /// Depthwise convolution: weight `[C, 1, k, k]`, one kernel per channel.
    pub fn dwconv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let c = self.value(x).dims4("depthwise input")?[1];
        let wc = self.value(w).shape()[0];
        if wc != c {
            return Err(shape_err!(
                "depthwise weight has {wc} kernels but input has {c} channels"
            ));
        }
        let y = ops::conv2d(self.value(x), self.value(w), self.value(b), stride, pad, c)?;
        Ok(self.push(
            y,
            Op::Conv {
                x,
                w,
                b,
                stride,
                pad,
                groups: c,
            },
            OpKind::DepthwiseConv2d,
        ))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor,
        running_var: &Tensor,
        eps: f32,
        mode: NormMode,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (y, cache, stats) = ops::batchnorm2d(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            running_mean,
            running_var,
            eps,
            mode,
        )?;
        let v = self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                cache,
            },
            OpKind::BatchNorm,
        );
        Ok((v, stats))
    }

    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let (y, cache) = ops::layernorm(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(
            y,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cache,
            },
            OpKind::LayerNorm,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = ops::relu(self.value(x));
        self.push(y, Op::Relu(x), OpKind::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = ops::sigmoid(self.value(x));
        self.push(y, Op::Sigmoid(x), OpKind::Sigmoid)
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let y = ops::softmax(self.value(x))?;
        Ok(self.push(y, Op::Softmax(x), OpKind::Softmax))
    }

    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = ops::dense(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(y, Op::Dense { x, w, b }, OpKind::Dense))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).reshape(shape)?;
        Ok(self.push(y, Op::Reshape(x), OpKind::Reshape))
    }

    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let y = ops::flatten(self.value(x))?;
        Ok(self.push(y, Op::Reshape(x), OpKind::Flatten))
    }

    /// `[N, C, H, W] -> [N, C, H·W]`: a token sequence per channel.
    pub fn flatten_spatial(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4("flatten input")?;
        let y = self.value(x).reshape(&[n, c, h * w])?;
        Ok(self.push(y, Op::Reshape(x), OpKind::Flatten))
    }

    pub fn adaptive_avg_pool2d(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let y = ops::adaptive_avg_pool2d(self.value(x), out_h, out_w)?;
        Ok(self.push(y, Op::Pool(x), OpKind::AvgPool))
    }

    pub fn upsample_nearest(&mut self, x: Var, fh: usize, fw: usize) -> Result<Var> {
        let y = ops::upsample_nearest(self.value(x), fh, fw)?;
        Ok(self.push(y, Op::Upsample(x), OpKind::Upsample))
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        self.concat(xs, 1)
    }

    pub fn concat_batch(&mut self, xs: &[Var]) -> Result<Var> {
        self.concat(xs, 0)
    }

    fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let refs: Vec<&Tensor> = xs.iter().map(|&v| self.value(v)).collect();
        let y = if axis == 0 {
            ops::concat_batch(&refs)?
        } else {
            ops::concat_channels(&refs)?
        };
        Ok(self.push(
            y,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            OpKind::Concat,
        ))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let y = ops::narrow(self.value(x), axis, start, len)?;
        Ok(self.push(y, Op::Narrow { x, axis, start }, OpKind::Narrow))
    }

    /// `[N, C, H, W] -> [N·H·W, C]`.
    pub fn tokens(&mut self, x: Var) -> Result<Var> {
        let y = ops::to_tokens(self.value(x))?;
        Ok(self.push(y, Op::Tokens(x), OpKind::Tokens))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Add(a, b), OpKind::Add))
    }

    pub fn expand_batch(&mut self, x: Var, n: usize) -> Result<Var> {
        let y = ops::expand_batch(self.value(x), n)?;
        Ok(self.push(y, Op::Expand(x), OpKind::Expand))
    }

    pub fn scale_columns(&mut self, x: Var, factors: &[f32]) -> Result<Var> {
        let y = ops::scale_columns(self.value(x), factors)?;
        Ok(self.push(
            y,
            Op::ScaleColumns {
                x,
                factors: factors.to_vec(),
            },
            OpKind::ScaleColumns,
        ))
    }

    pub fn scale(&mut self, x: Var, k: f32) -> Var {
        let y = ops::map(self.value(x), |v| v * k);
        self.push(y, Op::Scale { x, k }, OpKind::Scale)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum() as f32;
        self.push(Tensor::scalar(s), Op::Sum(x), OpKind::Sum)
    }

    /// Record a scalar function of `x` whose value and gradient the caller has
    /// already evaluated (used for losses with closed-form derivatives).
    pub fn scalar_fn(&mut self, x: Var, value: f32, local_grad: Tensor) -> Result<Var> {
        if local_grad.shape() != self.value(x).shape() {
            return Err(shape_err!(
                "local gradient {:?} does not match input {:?}",
                local_grad.shape(),
                self.value(x).shape()
            ));
        }
        Ok(self.push(
            Tensor::scalar(value),
            Op::ScalarFn { x, local_grad },
            OpKind::ScalarFn,
        ))
    }

    /// Operations in execution order (leaves and parameters excluded).
    pub fn records(&self) -> Vec<OpRecord> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| !matches!(n.op, Op::Leaf))
            .map(|(index, n)| {
                let (inputs, kernel): (Vec<Var>, Option<usize>) = match &n.op {
                    Op::Conv { x, w, b, .. } => (vec![*x, *w, *b], Some(self.value(*w).shape()[2])),
                    Op::BatchNorm { x, gamma, beta, .. } | Op::LayerNorm { x, gamma, beta, .. } => {
                        (vec![*x, *gamma, *beta], None)
                    }
                    Op::Dense { x, w, b } => (vec![*x, *w, *b], None),
                    _ => (vec![], None),
                };
                let params = inputs
                    .iter()
                    .filter_map(|v| self.nodes[v.0].param.clone())
                    .collect();
                OpRecord {
                    index,
                    kind: n.kind,
                    params,
                    kernel,
                    output_shape: n.value.shape().to_vec(),
                }
            })
            .collect()
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(invalid!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lt.shape(), 1.0));
        let mut visit_order = Vec::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !matches!(node.op, Op::Leaf) {
                visit_order.push(i);
            }
            for (target, contribution) in self.local_backward(node, &g)? {
                accumulate(&mut grads, target, contribution);
            }
            grads[i] = Some(g);
        }

        let mut params: BTreeMap<String, Tensor> = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(name) = &node.param {
                let g = grads[i]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                match params.get_mut(name) {
                    Some(existing) => existing.add_assign(&g),
                    None => {
                        params.insert(name.clone(), g);
                    }
                }
            }
        }
        Ok(Gradients {
            nodes: grads,
            params,
            visit_order,
        })
    }

    fn local_backward(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let val = |v: Var| self.value(v);
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::Conv {
                x,
                w,
                b,
                stride,
                pad,
                groups,
            } => {
                let (gx, gw, gb) =
                    ops::conv2d_backward(val(*x), val(*w), g, *stride, *pad, *groups)?;
                vec![(*x, gx), (*w, gw), (*b, gb)]
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                cache,
            } => {
                let (gx, gg, gb) = ops::batchnorm2d_backward(g, val(*gamma), cache)?;
                vec![(*x, gx), (*gamma, gg), (*beta, gb)]
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cache,
            } => {
                let (gx, gg, gb) = ops::layernorm_backward(g, val(*gamma), cache)?;
                vec![(*x, gx), (*gamma, gg), (*beta, gb)]
            }
            Op::Relu(x) => vec![(*x, ops::relu_backward(val(*x), g))],
            Op::Sigmoid(x) => vec![(*x, ops::sigmoid_backward(&node.value, g))],
            Op::Softmax(x) => vec![(*x, ops::softmax_backward(&node.value, g)?)],
            Op::Dense { x, w, b } => {
                let (gx, gw, gb) = ops::dense_backward(val(*x), val(*w), g)?;
                vec![(*x, gx), (*w, gw), (*b, gb)]
            }
            Op::Reshape(x) => vec![(*x, g.reshape(val(*x).shape())?)],
            Op::Pool(x) => vec![(*x, ops::adaptive_avg_pool2d_backward(val(*x).shape(), g)?)],
            Op::Upsample(x) => vec![(*x, ops::upsample_nearest_backward(val(*x).shape(), g)?)],
            Op::Concat { xs, axis } => {
                let mut start = 0;
                let mut out = Vec::with_capacity(xs.len());
                for &x in xs {
                    let len = val(x).shape()[*axis];
                    out.push((x, ops::narrow(g, *axis, start, len)?));
                    start += len;
                }
                out
            }
            Op::Narrow { x, axis, start } => {
                vec![(*x, ops::narrow_backward(val(*x).shape(), *axis, *start, g)?)]
            }
            Op::Tokens(x) => vec![(*x, ops::to_tokens_backward(val(*x).shape(), g)?)],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Expand(x) => vec![(*x, ops::expand_batch_backward(g)?)],
            Op::ScaleColumns { x, factors } => vec![(*x, ops::scale_columns(g, factors)?)],
            Op::Scale { x, k } => vec![(*x, ops::map(g, |v| v * k))],
            Op::Sum(x) => vec![(*x, Tensor::full(val(*x).shape(), g.item()))],
            Op::ScalarFn { x, local_grad } => {
                let s = g.item();
                vec![(*x, ops::map(local_grad, |v| v * s))]
            }
        })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], target: Var, contribution: Tensor) {
    match &mut grads[target.0] {
        Some(existing) => existing.add_assign(&contribution),
        slot @ None => *slot = Some(contribution),
    }
}
