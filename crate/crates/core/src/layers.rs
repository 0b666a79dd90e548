//! Trainable parameters, initializers, and the layer vocabulary the
//! architecture builders assemble models from.

use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Default group count for group normalization.
pub const GROUP_NORM_GROUPS: usize = 8;
/// Variance floor inside group normalization.
pub const GROUP_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Bias,
    NormScale,
    NormShift,
}

/// A named trainable tensor.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub fan_in: usize,
    pub fan_out: usize,
    pub role: ParamRole,
}

/// Index of a parameter inside its [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of a model's parameters. Iteration order is creation
/// order, which fixes the layout of every flattened gradient vector.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<T> {
    params: Vec<Parameter<T>>,
    names: HashSet<String>,
}

/// Parameters recorded on a particular tape, indexed like the [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            names: HashSet::new(),
        }
    }

    pub fn push(&mut self, param: Parameter<T>) -> Result<ParamId> {
        if !self.names.insert(param.name.clone()) {
            return Err(Error::Config(format!("duplicate parameter name {}", param.name)));
        }
        self.params.push(param);
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// All parameter values concatenated in stable order.
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.numel());
        for p in &self.params {
            out.extend_from_slice(p.tensor.data());
        }
        out
    }

    /// Overwrites every parameter from a flat vector laid out like [`flatten`](Self::flatten).
    pub fn assign_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.numel() {
            return Err(Error::shape(
                "assign_flat",
                format!("{} values for {} parameters", flat.len(), self.numel()),
            ));
        }
        let mut off = 0;
        for p in &mut self.params {
            let n = p.tensor.numel();
            p.tensor.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Records every parameter on `tape`, differentiable when `trainable`.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Result<Bound> {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    tape.param(p.tensor.clone())
                } else {
                    tape.frozen(p.tensor.clone())
                }
            })
            .collect::<Result<_>>()?;
        Ok(Bound(vars))
    }

    /// Flattens summed gradients; parameters the loss ignores contribute zeros.
    pub fn flatten_grads(&self, grads: &Gradients<T>, bound: &Bound) -> Vec<T> {
        let mut out = Vec::with_capacity(self.numel());
        for (p, &v) in self.params.iter().zip(&bound.0) {
            match grads.get(v) {
                Some(g) => out.extend_from_slice(g.data()),
                None => out.extend(std::iter::repeat_n(T::ZERO, p.tensor.numel())),
            }
        }
        out
    }

    /// Per-sample gradients as `batch` rows of length [`numel`](Self::numel),
    /// row-major in one buffer.
    pub fn flatten_per_sample_grads(
        &self,
        grads: &Gradients<T>,
        bound: &Bound,
        batch: usize,
    ) -> Result<Vec<T>> {
        let dim = self.numel();
        let mut out = vec![T::ZERO; batch * dim];
        let mut off = 0;
        for (p, &v) in self.params.iter().zip(&bound.0) {
            let n = p.tensor.numel();
            if let Some(g) = grads.get(v) {
                if g.numel() != batch * n {
                    return Err(Error::shape(
                        "per_sample_gradients",
                        format!("{} has gradient {:?}, expected {batch} rows", p.name, g.shape()),
                    ));
                }
                for s in 0..batch {
                    out[s * dim + off..s * dim + off + n]
                        .copy_from_slice(&g.data()[s * n..(s + 1) * n]);
                }
            }
            off += n;
        }
        Ok(out)
    }
}

/// Half-width of the Xavier-Glorot uniform distribution.
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> Result<f64> {
    if fan_in == 0 || fan_out == 0 {
        return Err(Error::Config(format!(
            "xavier init needs non-zero fans, got {fan_in}/{fan_out}"
        )));
    }
    Ok((6.0 / (fan_in + fan_out) as f64).sqrt())
}

/// Xavier-Glorot uniform initialization for weights; biases and norm shifts
/// are zeroed and norm scales set to one.
pub fn xavier_glorot_init<T: Scalar, R: Rng + ?Sized>(
    param: &mut Parameter<T>,
    rng: &mut R,
) -> Result<()> {
    match param.role {
        ParamRole::Weight => {
            let a = xavier_bound(param.fan_in, param.fan_out)?;
            for v in param.tensor.data_mut() {
                *v = T::from_f64(rng.gen_range(-a..=a));
            }
        }
        ParamRole::Bias | ParamRole::NormShift => param.tensor.data_mut().fill(T::ZERO),
        ParamRole::NormScale => param.tensor.data_mut().fill(T::ONE),
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Selu,
    Relu,
}

impl Activation {
    pub fn apply<T: Scalar>(self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        match self {
            Activation::Selu => tape.selu(x),
            Activation::Relu => tape.relu(x),
        }
    }
}

/// One stage of a model. Composite variants hold their own sub-stack.
#[derive(Clone, Debug)]
pub enum Layer {
    Conv2d {
        weight: ParamId,
        bias: ParamId,
        stride: usize,
        padding: usize,
    },
    GroupNorm {
        gamma: ParamId,
        beta: ParamId,
        groups: usize,
    },
    Activation(Activation),
    MaxPool {
        window: usize,
        stride: usize,
        padding: usize,
    },
    AvgPool {
        window: usize,
        stride: usize,
        padding: usize,
    },
    AdaptiveAvgPool {
        out_h: usize,
        out_w: usize,
    },
    Flatten,
    Linear {
        weight: ParamId,
        bias: ParamId,
    },
    /// `concat_channels(x, path(x))`.
    DenseConcat { path: Vec<Layer> },
    /// `shortcut(x) + path(x)`; the shortcut is the identity unless a
    /// projection is present.
    Residual {
        path: Vec<Layer>,
        projection: Option<Vec<Layer>>,
    },
}

/// Shape-level description of a layer, for summaries and audits.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerInfo {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    },
    GroupNorm {
        channels: usize,
        groups: usize,
    },
    Linear {
        in_features: usize,
        out_features: usize,
    },
    Activation(Activation),
    MaxPool { window: usize, stride: usize },
    AvgPool { window: usize, stride: usize },
    AdaptiveAvgPool { out_h: usize, out_w: usize },
    Flatten,
    DenseConcatBegin,
    ResidualBegin { projected: bool },
    End,
}

impl Layer {
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        match self {
            Layer::Conv2d {
                weight,
                bias,
                stride,
                padding,
            } => tape.conv2d(x, bound.var(*weight), Some(bound.var(*bias)), *stride, *padding),
            Layer::GroupNorm {
                gamma,
                beta,
                groups,
            } => tape.group_norm(
                x,
                bound.var(*gamma),
                bound.var(*beta),
                *groups,
                GROUP_NORM_EPS,
            ),
            Layer::Activation(a) => a.apply(tape, x),
            Layer::MaxPool {
                window,
                stride,
                padding,
            } => tape.maxpool2d(x, *window, *stride, *padding),
            Layer::AvgPool {
                window,
                stride,
                padding,
            } => tape.avgpool2d_padded(x, *window, *stride, *padding),
            Layer::AdaptiveAvgPool { out_h, out_w } => tape.adaptive_avgpool(x, *out_h, *out_w),
            Layer::Flatten => tape.flatten(x),
            Layer::Linear { weight, bias } => {
                tape.linear(x, bound.var(*weight), Some(bound.var(*bias)))
            }
            Layer::DenseConcat { path } => {
                let y = forward_stack(path, tape, bound, x)?;
                tape.concat_channels(&[x, y])
            }
            Layer::Residual { path, projection } => {
                let y = forward_stack(path, tape, bound, x)?;
                let shortcut = match projection {
                    Some(p) => forward_stack(p, tape, bound, x)?,
                    None => x,
                };
                tape.add(shortcut, y)
            }
        }
    }

    /// Appends this layer's description (recursively) to `out`.
    pub fn describe<T: Scalar>(&self, params: &ParamSet<T>, out: &mut Vec<LayerInfo>) {
        match self {
            Layer::Conv2d { weight, .. } => {
                let s = params.get(*weight).tensor.shape();
                out.push(LayerInfo::Conv2d {
                    in_channels: s[1],
                    out_channels: s[0],
                    kernel: s[2],
                });
            }
            Layer::GroupNorm { gamma, groups, .. } => out.push(LayerInfo::GroupNorm {
                channels: params.get(*gamma).tensor.numel(),
                groups: *groups,
            }),
            Layer::Linear { weight, .. } => {
                let s = params.get(*weight).tensor.shape();
                out.push(LayerInfo::Linear {
                    in_features: s[0],
                    out_features: s[1],
                });
            }
            Layer::Activation(a) => out.push(LayerInfo::Activation(*a)),
            Layer::MaxPool { window, stride, .. } => out.push(LayerInfo::MaxPool {
                window: *window,
                stride: *stride,
            }),
            Layer::AvgPool { window, stride, .. } => out.push(LayerInfo::AvgPool {
                window: *window,
                stride: *stride,
            }),
            Layer::AdaptiveAvgPool { out_h, out_w } => out.push(LayerInfo::AdaptiveAvgPool {
                out_h: *out_h,
                out_w: *out_w,
            }),
            Layer::Flatten => out.push(LayerInfo::Flatten),
            Layer::DenseConcat { path } => {
                out.push(LayerInfo::DenseConcatBegin);
                path.iter().for_each(|l| l.describe(params, out));
                out.push(LayerInfo::End);
            }
            Layer::Residual { path, projection } => {
                out.push(LayerInfo::ResidualBegin {
                    projected: projection.is_some(),
                });
                path.iter().for_each(|l| l.describe(params, out));
                if let Some(p) = projection {
                    p.iter().for_each(|l| l.describe(params, out));
                }
                out.push(LayerInfo::End);
            }
        }
    }
}

pub fn forward_stack<T: Scalar>(
    layers: &[Layer],
    tape: &mut Tape<T>,
    bound: &Bound,
    mut x: Var,
) -> Result<Var> {
    for layer in layers {
        x = layer.forward(tape, bound, x)?;
    }
    Ok(x)
}

/// Creates parameters with unique hierarchical names and initializes them
/// from one seeded stream, in creation order.
pub struct LayerFactory<'a, T, R> {
    pub params: &'a mut ParamSet<T>,
    pub rng: &'a mut R,
}

impl<T: Scalar, R: Rng> LayerFactory<'_, T, R> {
    fn create(
        &mut self,
        name: String,
        shape: Vec<usize>,
        fan_in: usize,
        fan_out: usize,
        role: ParamRole,
    ) -> Result<ParamId> {
        let mut p = Parameter {
            name,
            tensor: Tensor::zeros(shape),
            fan_in,
            fan_out,
            role,
        };
        xavier_glorot_init(&mut p, self.rng)?;
        self.params.push(p)
    }

    pub fn conv2d(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Layer> {
        let rf = kernel * kernel;
        let weight = self.create(
            format!("{name}.weight"),
            vec![cout, cin, kernel, kernel],
            cin * rf,
            cout * rf,
            ParamRole::Weight,
        )?;
        let bias = self.create(
            format!("{name}.bias"),
            vec![cout],
            cin * rf,
            cout * rf,
            ParamRole::Bias,
        )?;
        Ok(Layer::Conv2d {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn group_norm(&mut self, name: &str, channels: usize, groups: usize) -> Result<Layer> {
        if groups == 0 || !channels.is_multiple_of(groups) {
            return Err(Error::Config(format!(
                "{name}: {channels} channels not divisible into {groups} groups"
            )));
        }
        let gamma = self.create(
            format!("{name}.gamma"),
            vec![channels],
            channels,
            channels,
            ParamRole::NormScale,
        )?;
        let beta = self.create(
            format!("{name}.beta"),
            vec![channels],
            channels,
            channels,
            ParamRole::NormShift,
        )?;
        Ok(Layer::GroupNorm {
            gamma,
            beta,
            groups,
        })
    }

    pub fn linear(&mut self, name: &str, fin: usize, fout: usize) -> Result<Layer> {
        let weight = self.create(
            format!("{name}.weight"),
            vec![fin, fout],
            fin,
            fout,
            ParamRole::Weight,
        )?;
        let bias = self.create(format!("{name}.bias"), vec![fout], fin, fout, ParamRole::Bias)?;
        Ok(Layer::Linear { weight, bias })
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn xavier_bound_for_head_linear() {
        let a = xavier_bound(2048, 512).unwrap();
        assert!((a - 0.048_412).abs() < 1e-5, "{a}");
        assert!(xavier_bound(0, 4).is_err());
    }

    #[test]
    fn linear_param_count() {
        let mut params = ParamSet::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut f = LayerFactory {
            params: &mut params,
            rng: &mut rng,
        };
        f.linear("fc", 2048, 512).unwrap();
        assert_eq!(params.numel(), 1_049_088);
        assert_eq!(ParamSet::<f32>::new().numel(), 0);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut params = ParamSet::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut f = LayerFactory {
            params: &mut params,
            rng: &mut rng,
        };
        f.linear("fc", 2, 2).unwrap();
        assert!(f.linear("fc", 2, 2).is_err());
    }

    #[test]
    fn group_norm_needs_divisible_channels() {
        let mut params = ParamSet::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut f = LayerFactory {
            params: &mut params,
            rng: &mut rng,
        };
        assert!(f.group_norm("gn", 12, 8).is_err());
        assert!(f.group_norm("gn", 16, 8).is_ok());
    }

    #[test]
    fn init_roles() {
        let mut params = ParamSet::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut f = LayerFactory {
            params: &mut params,
            rng: &mut rng,
        };
        let Layer::Linear { weight, bias } = f.linear("fc", 30, 20).unwrap() else {
            unreachable!()
        };
        let Layer::GroupNorm { gamma, beta, .. } = f.group_norm("gn", 8, 8).unwrap() else {
            unreachable!()
        };
        let a = xavier_bound(30, 20).unwrap();
        assert!(params.get(weight).tensor.data().iter().all(|v| v.abs() <= a));
        assert!(params.get(bias).tensor.data().iter().all(|&v| v == 0.0));
        assert!(params.get(gamma).tensor.data().iter().all(|&v| v == 1.0));
        assert!(params.get(beta).tensor.data().iter().all(|&v| v == 0.0));
    }
}
