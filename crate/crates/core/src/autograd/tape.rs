use std::sync::atomic::{AtomicU32, Ordering};

use super::kernels::{self, GroupNormSaved, ParamGrad};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

static NEXT_TAPE: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    index: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.index as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Leaf {
    /// Batch data; may or may not be differentiated.
    Data,
    /// Trainable parameter shared by every sample of the batch.
    Param,
    /// Fixed value, never differentiated.
    Constant,
}

/// Loss reduction over the batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

enum Op<T> {
    Leaf(Leaf),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        input: Var,
        window: usize,
        stride: usize,
        padding: usize,
    },
    AdaptiveAvgPool {
        input: Var,
    },
    GroupNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        saved: GroupNormSaved<T>,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: T,
    },
    Selu {
        input: Var,
    },
    Relu {
        input: Var,
    },
    Concat {
        inputs: Vec<Var>,
    },
    SliceChannels {
        input: Var,
        start: usize,
    },
    Reshape {
        input: Var,
    },
    Sum {
        input: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
        reduction: Reduction,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf(_) => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool { .. } => "maxpool2d",
            Op::AvgPool { .. } => "avgpool2d",
            Op::AdaptiveAvgPool { .. } => "adaptive_avgpool",
            Op::GroupNorm { .. } => "group_norm",
            Op::Linear { .. } => "linear",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Selu { .. } => "selu",
            Op::Relu { .. } => "relu",
            Op::Concat { .. } => "concat_channels",
            Op::SliceChannels { .. } => "slice_channels",
            Op::Reshape { .. } => "reshape",
            Op::Sum { .. } => "sum",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf(_) => vec![],
            Op::Conv2d {
                input, weight, bias, ..
            }
            | Op::Linear {
                input, weight, bias, ..
            } => {
                let mut v = vec![*input, *weight];
                v.extend(bias);
                v
            }
            Op::GroupNorm {
                input, gamma, beta, ..
            } => vec![*input, *gamma, *beta],
            Op::MatMul { a, b } | Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::Concat { inputs } => inputs.clone(),
            Op::MaxPool { input, .. }
            | Op::AvgPool { input, .. }
            | Op::AdaptiveAvgPool { input }
            | Op::Scale { input, .. }
            | Op::Selu { input }
            | Op::Relu { input }
            | Op::SliceChannels { input, .. }
            | Op::Reshape { input }
            | Op::Sum { input } => vec![*input],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }

    /// Ops that can take a parameter directly and split its gradient by sample.
    fn supports_per_sample_params(&self) -> bool {
        matches!(
            self,
            Op::Conv2d { .. } | Op::Linear { .. } | Op::GroupNorm { .. }
        )
    }

    /// Ops whose output couples different samples of the batch.
    fn reduces_batch(&self) -> bool {
        matches!(self, Op::Sum { .. } | Op::CrossEntropy { .. })
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    /// True when the value varies with the batch (indexed by sample).
    batched: bool,
}

/// The computation record: every executed primitive, in execution order,
/// with whatever it saved for the backward pass.
///
/// Inputs of an op always precede it, so a single reverse sweep visits each
/// op exactly once. A tape is single-threaded; independent tapes can run on
/// different threads.
pub struct Tape<T> {
    id: u32,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    /// Drops the record. Handles from before the reset become invalid.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.id = NEXT_TAPE.fetch_add(1, Ordering::Relaxed);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        if v.tape != self.id {
            return Err(Error::Record(format!(
                "value {v:?} does not belong to this record (reset or foreign tape)"
            )));
        }
        self.nodes
            .get(v.index())
            .ok_or_else(|| Error::Record(format!("unknown value {v:?}")))
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        self.node(v).map(|n| &n.value)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        let name = op.name();
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let mut requires_grad = false;
        let mut batched = false;
        for v in op.inputs() {
            let n = self.node(v)?;
            requires_grad |= n.requires_grad;
            batched |= n.batched;
        }
        if let Op::Leaf(kind) = &op {
            requires_grad = false;
            batched = *kind == Leaf::Data;
        }
        let var = Var {
            tape: self.id,
            index: self.nodes.len() as u32,
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            batched,
        });
        Ok(var)
    }

    fn push_leaf(&mut self, value: Tensor<T>, kind: Leaf, requires_grad: bool) -> Result<Var> {
        let v = self.push(value, Op::Leaf(kind))?;
        self.nodes[v.index()].requires_grad = requires_grad;
        Ok(v)
    }

    /// Batch data that is not differentiated.
    pub fn input(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push_leaf(value, Leaf::Data, false)
    }

    /// Batch data whose gradient is wanted (e.g. to check a block's input path).
    pub fn variable(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push_leaf(value, Leaf::Data, true)
    }

    /// A trainable parameter.
    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push_leaf(value, Leaf::Param, true)
    }

    /// A parameter recorded without gradient tracking (inference).
    pub fn frozen(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push_leaf(value, Leaf::Param, false)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push_leaf(value, Leaf::Constant, false)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let out = {
            let b = match bias {
                Some(b) => Some(self.value(b)?),
                None => None,
            };
            kernels::conv2d_forward(self.value(input)?, self.value(weight)?, b, stride, padding)?
        };
        self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
        )
    }

    pub fn maxpool2d(&mut self, input: Var, window: usize, stride: usize, padding: usize) -> Result<Var> {
        let (out, argmax) = kernels::maxpool2d_forward(self.value(input)?, window, stride, padding)?;
        self.push(out, Op::MaxPool { input, argmax })
    }

    pub fn avgpool2d(&mut self, input: Var, window: usize, stride: usize) -> Result<Var> {
        self.avgpool2d_padded(input, window, stride, 0)
    }

    /// Average pooling whose windows may overhang the border; only real
    /// cells enter each mean.
    pub fn avgpool2d_padded(
        &mut self,
        input: Var,
        window: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let out = kernels::avgpool2d_forward(self.value(input)?, window, stride, padding)?;
        self.push(
            out,
            Op::AvgPool {
                input,
                window,
                stride,
                padding,
            },
        )
    }

    pub fn adaptive_avgpool(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let out = kernels::adaptive_avgpool_forward(self.value(input)?, out_h, out_w)?;
        self.push(out, Op::AdaptiveAvgPool { input })
    }

    pub fn group_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        eps: f64,
    ) -> Result<Var> {
        let (out, saved) = kernels::group_norm_forward(
            self.value(input)?,
            self.value(gamma)?,
            self.value(beta)?,
            groups,
            eps,
        )?;
        self.push(
            out,
            Op::GroupNorm {
                input,
                gamma,
                beta,
                groups,
                saved,
            },
        )
    }

    /// `input·weight + bias` with `input: [N, F]`, `weight: [F, G]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let out = {
            let b = match bias {
                Some(b) => Some(self.value(b)?),
                None => None,
            };
            kernels::linear_forward(self.value(input)?, self.value(weight)?, b)?
        };
        self.push(
            out,
            Op::Linear {
                input,
                weight,
                bias,
            },
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::linear_forward(self.value(a)?, self.value(b)?, None)
            .map_err(|e| match e {
                Error::Shape { detail, .. } => Error::shape("matmul", detail),
                e => e,
            })?;
        self.push(out, Op::MatMul { a, b })
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(&Tensor<T>, &Tensor<T>)> {
        let (ta, tb) = (self.value(a)?, self.value(b)?);
        if ta.shape() != tb.shape() {
            return Err(Error::shape(op, format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        Ok((ta, tb))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = self.same_shape("add", a, b)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| *x + *y).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push(out, Op::Add { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = self.same_shape("mul", a, b)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| *x * *y).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push(out, Op::Mul { a, b })
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        let factor = T::from_f64(factor);
        let out = self.value(input)?.map(|x| x * factor);
        self.push(out, Op::Scale { input, factor })
    }

    pub fn selu(&mut self, input: Var) -> Result<Var> {
        let out = self.value(input)?.map(selu_scalar);
        self.push(out, Op::Selu { input })
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let out = self.value(input)?.map(|x| if x > T::ZERO { x } else { T::ZERO });
        self.push(out, Op::Relu { input })
    }

    /// Concatenates `[N, Ci, H, W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::shape("concat_channels", "no inputs"));
        }
        let first = self.value(inputs[0])?.dims4("concat_channels")?;
        let (n, _, h, w) = first;
        let mut total = 0;
        for &v in inputs {
            let (vn, vc, vh, vw) = self.value(v)?.dims4("concat_channels")?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(Error::shape(
                    "concat_channels",
                    format!("N,H,W {:?} vs {:?}", (vn, vh, vw), (n, h, w)),
                ));
            }
            total += vc;
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(n * total * hw);
        for s in 0..n {
            for &v in inputs {
                let t = self.value(v)?;
                let per = t.shape()[1] * hw;
                data.extend_from_slice(&t.data()[s * per..(s + 1) * per]);
            }
        }
        let out = Tensor::from_parts(vec![n, total, h, w], data);
        self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
        )
    }

    /// Channels `[start, end)` of an `[N, C, H, W]` tensor.
    pub fn slice_channels(&mut self, input: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(input)?;
        let (n, c, h, w) = t.dims4("slice_channels")?;
        if start >= end || end > c {
            return Err(Error::shape(
                "slice_channels",
                format!("range {start}..{end} of {c} channels"),
            ));
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(n * (end - start) * hw);
        for s in 0..n {
            data.extend_from_slice(&t.data()[(s * c + start) * hw..(s * c + end) * hw]);
        }
        let out = Tensor::from_parts(vec![n, end - start, h, w], data);
        self.push(out, Op::SliceChannels { input, start })
    }

    /// `[N, ...] → [N, prod(...)]`.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let t = self.value(input)?;
        let n = t.shape()[0];
        let out = t.clone().reshape(vec![n, t.numel() / n])?;
        self.push(out, Op::Reshape { input })
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let s = self.value(input)?.sum();
        self.push(Tensor::scalar(s), Op::Sum { input })
    }

    /// Softmax cross-entropy of `[N, K]` logits against class indices.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        reduction: Reduction,
    ) -> Result<Var> {
        let t = self.value(logits)?;
        let (n, k) = t.dims2("cross_entropy")?;
        if targets.len() != n {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} targets for {n} rows", targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&c| c >= k) {
            return Err(Error::shape(
                "cross_entropy",
                format!("target {bad} out of range for {k} classes"),
            ));
        }
        let probs = kernels::softmax_rows(t);
        let mut total = 0.0f64;
        for (row, &c) in t.data().chunks_exact(k).zip(targets) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max).as_f64();
            let lse = mx + row.iter().map(|v| (v.as_f64() - mx).exp()).sum::<f64>().ln();
            total += lse - row[c].as_f64();
        }
        let loss = match reduction {
            Reduction::Mean => total / n as f64,
            Reduction::Sum => total,
        };
        self.push(
            Tensor::scalar(T::from_f64(loss)),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                reduction,
            },
        )
    }

    /// Gradients of the scalar `loss` with respect to every leaf that
    /// requires them.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        self.run_backward(loss, false)
    }

    /// Like [`backward`](Self::backward), but parameter gradients keep a
    /// leading sample axis: entry `i` is the gradient of sample `i`'s own loss
    /// term. `loss` must be a sum over samples (e.g. cross-entropy with
    /// [`Reduction::Sum`]) and no other op may couple samples.
    pub fn backward_per_sample(&self, loss: Var) -> Result<Gradients<T>> {
        self.run_backward(loss, true)
    }

    fn run_backward(&self, loss: Var, per_sample: bool) -> Result<Gradients<T>> {
        let root = self.node(loss)?;
        if root.value.numel() != 1 {
            return Err(Error::Record(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        if per_sample {
            match &root.op {
                Op::CrossEntropy {
                    reduction: Reduction::Sum,
                    ..
                }
                | Op::Sum { .. } => {}
                op => {
                    return Err(Error::Record(format!(
                        "per-sample backward needs a summed loss, root is {}",
                        op.name()
                    )))
                }
            }
        }

        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(loss.index() + 1, || None);
        grads[loss.index()] = Some(Tensor::from_parts(
            root.value.shape().to_vec(),
            vec![T::ONE],
        ));

        for idx in (0..=loss.index()).rev() {
            let node = &self.nodes[idx];
            if let Op::Leaf(_) = node.op {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            if !node.requires_grad {
                continue;
            }
            if per_sample {
                self.check_per_sample(idx, loss.index())?;
            }
            let contributions = self.node_backward(node, &gy, per_sample)?;
            for (v, g) in contributions {
                accumulate(&mut grads[v.index()], g)?;
            }
        }

        let mut leaf_grads: Vec<Option<Tensor<T>>> = Vec::new();
        leaf_grads.resize_with(self.nodes.len(), || None);
        for (idx, g) in grads.into_iter().enumerate() {
            if matches!(self.nodes[idx].op, Op::Leaf(_)) && self.nodes[idx].requires_grad {
                leaf_grads[idx] = g;
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads: leaf_grads,
        })
    }

    fn check_per_sample(&self, idx: usize, root: usize) -> Result<()> {
        let node = &self.nodes[idx];
        if idx != root && node.op.reduces_batch() {
            return Err(Error::Record(format!(
                "{} couples samples; per-sample gradients unavailable",
                node.op.name()
            )));
        }
        for v in node.op.inputs() {
            let input = &self.nodes[v.index()];
            if !input.requires_grad {
                continue;
            }
            match input.op {
                Op::Leaf(Leaf::Param) if !node.op.supports_per_sample_params() => {
                    return Err(Error::Record(format!(
                        "{} cannot split parameter gradients by sample",
                        node.op.name()
                    )))
                }
                Op::Leaf(_) => {}
                _ if !input.batched => {
                    return Err(Error::Record(format!(
                        "{} output is derived from parameters only; per-sample gradients unavailable",
                        input.op.name()
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn param_mode(&self, v: Var, per_sample: bool) -> ParamGrad {
        let n = &self.nodes[v.index()];
        if !n.requires_grad {
            ParamGrad::Skip
        } else if per_sample && matches!(n.op, Op::Leaf(Leaf::Param)) {
            ParamGrad::PerSample
        } else {
            ParamGrad::Summed
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.index()].requires_grad
    }

    fn node_backward(
        &self,
        node: &Node<T>,
        gy: &Tensor<T>,
        per_sample: bool,
    ) -> Result<Vec<(Var, Tensor<T>)>> {
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf(_) => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let g = kernels::conv2d_backward(
                    self.value(*input)?,
                    self.value(*weight)?,
                    gy,
                    *stride,
                    *padding,
                    self.wants(*input),
                    self.param_mode(*weight, per_sample),
                    bias.map_or(ParamGrad::Skip, |b| self.param_mode(b, per_sample)),
                )?;
                out.extend(g.input.map(|t| (*input, t)));
                out.extend(g.weight.map(|t| (*weight, t)));
                if let (Some(b), Some(t)) = (bias, g.bias) {
                    out.push((*b, t));
                }
            }
            Op::MaxPool { input, argmax } => {
                let shape = self.value(*input)?.shape();
                out.push((*input, kernels::maxpool2d_backward(shape, argmax, gy)));
            }
            Op::AvgPool {
                input,
                window,
                stride,
                padding,
            } => {
                let shape = self.value(*input)?.shape();
                out.push((
                    *input,
                    kernels::avgpool2d_backward(shape, *window, *stride, *padding, gy),
                ));
            }
            Op::AdaptiveAvgPool { input } => {
                let shape = self.value(*input)?.shape();
                out.push((*input, kernels::adaptive_avgpool_backward(shape, gy)));
            }
            Op::GroupNorm {
                input,
                gamma,
                beta,
                groups,
                saved,
            } => {
                let g = kernels::group_norm_backward(
                    self.value(*input)?.shape(),
                    self.value(*gamma)?,
                    *groups,
                    saved,
                    gy,
                    self.wants(*input),
                    self.param_mode(*gamma, per_sample),
                    self.param_mode(*beta, per_sample),
                );
                out.extend(g.input.map(|t| (*input, t)));
                out.extend(g.gamma.map(|t| (*gamma, t)));
                out.extend(g.beta.map(|t| (*beta, t)));
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let g = kernels::linear_backward(
                    self.value(*input)?,
                    self.value(*weight)?,
                    gy,
                    self.wants(*input),
                    self.param_mode(*weight, per_sample),
                    bias.map_or(ParamGrad::Skip, |b| self.param_mode(b, per_sample)),
                );
                out.extend(g.input.map(|t| (*input, t)));
                out.extend(g.weight.map(|t| (*weight, t)));
                if let (Some(b), Some(t)) = (bias, g.bias) {
                    out.push((*b, t));
                }
            }
            Op::MatMul { a, b } => {
                let g = kernels::linear_backward(
                    self.value(*a)?,
                    self.value(*b)?,
                    gy,
                    self.wants(*a),
                    if self.wants(*b) {
                        ParamGrad::Summed
                    } else {
                        ParamGrad::Skip
                    },
                    ParamGrad::Skip,
                );
                out.extend(g.input.map(|t| (*a, t)));
                out.extend(g.weight.map(|t| (*b, t)));
            }
            Op::Add { a, b } => {
                if self.wants(*a) {
                    out.push((*a, gy.clone()));
                }
                if self.wants(*b) {
                    out.push((*b, gy.clone()));
                }
            }
            Op::Mul { a, b } => {
                let (ta, tb) = (self.value(*a)?, self.value(*b)?);
                let prod = |t: &Tensor<T>| {
                    let d = t.data().iter().zip(gy.data()).map(|(x, g)| *x * *g).collect();
                    Tensor::from_parts(t.shape().to_vec(), d)
                };
                if self.wants(*a) {
                    out.push((*a, prod(tb)));
                }
                if self.wants(*b) {
                    out.push((*b, prod(ta)));
                }
            }
            Op::Scale { input, factor } => {
                out.push((*input, gy.map(|g| g * *factor)));
            }
            Op::Selu { input } => {
                let x = self.value(*input)?;
                let d = x
                    .data()
                    .iter()
                    .zip(gy.data())
                    .map(|(&x, &g)| g * selu_derivative(x))
                    .collect();
                out.push((*input, Tensor::from_parts(x.shape().to_vec(), d)));
            }
            Op::Relu { input } => {
                let x = self.value(*input)?;
                let d = x
                    .data()
                    .iter()
                    .zip(gy.data())
                    .map(|(&x, &g)| if x > T::ZERO { g } else { T::ZERO })
                    .collect();
                out.push((*input, Tensor::from_parts(x.shape().to_vec(), d)));
            }
            Op::Concat { inputs } => {
                let (n, _, h, w) = gy.dims4("concat_channels")?;
                let hw = h * w;
                let total = gy.shape()[1];
                let mut offset = 0;
                for &v in inputs {
                    let c = self.value(v)?.shape()[1];
                    if self.wants(v) {
                        let mut d = Vec::with_capacity(n * c * hw);
                        for s in 0..n {
                            let lo = (s * total + offset) * hw;
                            d.extend_from_slice(&gy.data()[lo..lo + c * hw]);
                        }
                        out.push((v, Tensor::from_parts(vec![n, c, h, w], d)));
                    }
                    offset += c;
                }
            }
            Op::SliceChannels { input, start } => {
                let shape = self.value(*input)?.shape().to_vec();
                let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                let width = gy.shape()[1];
                let mut d = vec![T::ZERO; n * c * hw];
                for s in 0..n {
                    let dst = (s * c + start) * hw;
                    d[dst..dst + width * hw]
                        .copy_from_slice(&gy.data()[s * width * hw..(s + 1) * width * hw]);
                }
                out.push((*input, Tensor::from_parts(shape, d)));
            }
            Op::Reshape { input } => {
                let shape = self.value(*input)?.shape().to_vec();
                out.push((*input, gy.clone().reshape(shape)?));
            }
            Op::Sum { input } => {
                let shape = self.value(*input)?.shape().to_vec();
                out.push((*input, Tensor::full(shape, gy.data()[0])));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                reduction,
            } => {
                let shape = self.value(*logits)?.shape().to_vec();
                let k = shape[1];
                let scale = match reduction {
                    Reduction::Mean => gy.data()[0] / T::from_f64(targets.len() as f64),
                    Reduction::Sum => gy.data()[0],
                };
                let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (row, &c) in targets.iter().enumerate() {
                    d[row * k + c] -= scale;
                }
                out.push((*logits, Tensor::from_parts(shape, d)));
            }
        }
        Ok(out)
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) -> Result<()> {
    match slot {
        None => *slot = Some(g),
        Some(acc) => {
            if acc.shape() != g.shape() {
                return Err(Error::shape(
                    "backward",
                    format!("gradient {:?} vs {:?}", acc.shape(), g.shape()),
                ));
            }
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
    }
    Ok(())
}

/// SELU scale λ.
pub const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
/// SELU negative-branch saturation α.
pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_2;

pub(crate) fn selu_scalar<T: Scalar>(x: T) -> T {
    let lambda = T::from_f64(SELU_LAMBDA);
    if x > T::ZERO {
        lambda * x
    } else {
        lambda * T::from_f64(SELU_ALPHA) * x.exp_m1()
    }
}

fn selu_derivative<T: Scalar>(x: T) -> T {
    let lambda = T::from_f64(SELU_LAMBDA);
    if x > T::ZERO {
        lambda
    } else {
        lambda * T::from_f64(SELU_ALPHA) * x.exp()
    }
}

/// Leaf gradients produced by one backward sweep.
pub struct Gradients<T> {
    tape: u32,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf; `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index()).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.index()).and_then(Option::take)
    }
}
