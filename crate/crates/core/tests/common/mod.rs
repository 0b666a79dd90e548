//! Shared oracles for the integration tests. Everything here is written
//! with plain loops, independent of the kernels under test.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use smoothnet::autograd::{finite_diff_check, Tape, Var};
use smoothnet::{Result, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn rel_close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len()
        && a
            .iter()
            .zip(b)
            .all(|(x, y)| (x - y).abs() <= tol * x.abs().max(y.abs()).max(1e-12))
}

pub fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-12))
        .fold(0.0, f64::max)
}

/// Direct six-nested-loop cross-correlation.
pub fn conv2d_oracle(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: &[f64],
    stride: usize,
    pad: usize,
) -> Tensor<f64> {
    let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * cout * ho * wo];
    for s in 0..n {
        for o in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b[o];
                    for c in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()
                                    [((s * cin + c) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data()[((o * cin + c) * kh + ky) * kw + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((s * cout + o) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, cout, ho, wo], out).unwrap()
}

pub fn maxpool_oracle(x: &Tensor<f64>, window: usize, stride: usize, pad: usize) -> Tensor<f64> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let ho = (h + 2 * pad - window) / stride + 1;
    let wo = (w + 2 * pad - window) / stride + 1;
    let mut out = Vec::new();
    for p in 0..n * c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                for ky in 0..window {
                    for kx in 0..window {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            best = best.max(x.data()[(p * h + iy as usize) * w + ix as usize]);
                        }
                    }
                }
                out.push(best);
            }
        }
    }
    Tensor::new(vec![n, c, ho, wo], out).unwrap()
}

pub fn avgpool_oracle(x: &Tensor<f64>, window: usize, stride: usize) -> Tensor<f64> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let ho = (h - window) / stride + 1;
    let wo = (w - window) / stride + 1;
    let mut out = Vec::new();
    for p in 0..n * c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                for ky in 0..window {
                    for kx in 0..window {
                        acc += x.data()[(p * h + oy * stride + ky) * w + ox * stride + kx];
                    }
                }
                out.push(acc / (window * window) as f64);
            }
        }
    }
    Tensor::new(vec![n, c, ho, wo], out).unwrap()
}

/// Adaptive average pooling with bins `[floor(i·H/h), ceil((i+1)·H/h))`.
pub fn adaptive_oracle(x: &Tensor<f64>, oh: usize, ow: usize) -> Tensor<f64> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut out = Vec::new();
    for p in 0..n * c {
        for i in 0..oh {
            let y0 = (i * h) / oh;
            let y1 = ((i + 1) * h).div_ceil(oh);
            for j in 0..ow {
                let x0 = (j * w) / ow;
                let x1 = ((j + 1) * w).div_ceil(ow);
                let mut acc = 0.0;
                for y in y0..y1 {
                    for xx in x0..x1 {
                        acc += x.data()[(p * h + y) * w + xx];
                    }
                }
                out.push(acc / ((y1 - y0) * (x1 - x0)) as f64);
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out).unwrap()
}

pub fn matmul_oracle(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for l in 0..k {
                out[i * n + j] += a.data()[i * k + l] * b.data()[l * n + j];
            }
        }
    }
    out
}

/// Group normalization from first principles (no affine).
pub fn group_norm_oracle(x: &Tensor<f64>, groups: usize, eps: f64) -> Vec<f64> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let cpg = c / groups;
    let mut out = vec![0.0; x.numel()];
    for s in 0..n {
        for g in 0..groups {
            let mut vals = Vec::new();
            for ch in g * cpg..(g + 1) * cpg {
                for i in 0..h * w {
                    vals.push(x.data()[(s * c + ch) * h * w + i]);
                }
            }
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            for ch in g * cpg..(g + 1) * cpg {
                for i in 0..h * w {
                    let idx = (s * c + ch) * h * w + i;
                    out[idx] = (x.data()[idx] - mean) / (var + eps).sqrt();
                }
            }
        }
    }
    out
}

/// Runs `build` on differentiable copies of `inputs`, reduces the output with
/// fixed random weights, and returns the worst relative error between the
/// analytic gradient and central differences (h = 1e−5).
pub fn grad_check<F>(inputs: &[Tensor<f64>], seed: u64, build: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let weights = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone()).unwrap()).collect();
        let out = build(&mut tape, &vars).unwrap();
        let shape = tape.value(out).unwrap().shape().to_vec();
        randn(&shape, &mut rng(seed ^ 0x5eed))
    };
    let loss_of = |tensors: &[Tensor<f64>], want_grad: bool| -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors
            .iter()
            .map(|t| tape.variable(t.clone()))
            .collect::<Result<_>>()?;
        let out = build(&mut tape, &vars)?;
        let w = tape.constant(weights.clone())?;
        let prod = tape.mul(out, w)?;
        let loss = tape.sum(prod)?;
        let value = tape.value(loss)?.data()[0];
        let mut grads = Vec::new();
        if want_grad {
            let g = tape.backward(loss)?;
            for (v, t) in vars.iter().zip(tensors) {
                match g.get(*v) {
                    Some(gt) => grads.extend_from_slice(gt.data()),
                    None => grads.extend(std::iter::repeat_n(0.0, t.numel())),
                }
            }
        }
        Ok((value, grads))
    };
    let (_, analytic) = loss_of(inputs, true).unwrap();
    let flat: Vec<f64> = inputs.iter().flat_map(|t| t.data().to_vec()).collect();
    let unflatten = |p: &[f64]| -> Vec<Tensor<f64>> {
        let mut off = 0;
        inputs
            .iter()
            .map(|t| {
                let n = t.numel();
                let out = Tensor::new(t.shape().to_vec(), p[off..off + n].to_vec()).unwrap();
                off += n;
                out
            })
            .collect()
    };
    finite_diff_check(
        |p| loss_of(&unflatten(p), false).map(|(v, _)| v),
        &flat,
        &analytic,
        1e-5,
    )
    .unwrap()
}

/// Finite-difference check of a whole model w.r.t. its parameters and its
/// input, using `sum(output · R)` with fixed random `R` as the loss. Returns
/// `(param_err, input_err, analytic_input_grad)`.
pub fn model_grad_check(
    model: &smoothnet::Model<f64>,
    input: &Tensor<f64>,
    seed: u64,
) -> (f64, f64, Vec<f64>) {
    model_grad_check_with_step(model, input, seed, 1e-5)
}

/// As [`model_grad_check`] with central-difference step `h`.
pub fn model_grad_check_with_step(
    model: &smoothnet::Model<f64>,
    input: &Tensor<f64>,
    seed: u64,
    h: f64,
) -> (f64, f64, Vec<f64>) {
    let out_shape = model.predict(input).unwrap().shape().to_vec();
    let weights = randn(&out_shape, &mut rng(seed ^ 0xfeed));
    let loss = |m: &smoothnet::Model<f64>, x: &Tensor<f64>, grads: bool| {
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape, true)?;
        let xv = tape.variable(x.clone())?;
        let y = m.forward(&mut tape, &bound, xv)?;
        let w = tape.constant(weights.clone())?;
        let p = tape.mul(y, w)?;
        let l = tape.sum(p)?;
        let value = tape.value(l)?.data()[0];
        if !grads {
            return Ok::<_, smoothnet::Error>((value, vec![], vec![]));
        }
        let g = tape.backward(l)?;
        let pg = m.params.flatten_grads(&g, &bound);
        let xg = g.get(xv).map(|t| t.data().to_vec()).unwrap_or(vec![0.0; x.numel()]);
        Ok((value, pg, xg))
    };
    let (_, pg, xg) = loss(model, input, true).unwrap();
    let flat = model.params.flatten();
    let param_err = finite_diff_check(
        |p| {
            let mut m = model.clone();
            m.params.assign_flat(p)?;
            loss(&m, input, false).map(|r| r.0)
        },
        &flat,
        &pg,
        h,
    )
    .unwrap();
    let input_err = finite_diff_check(
        |p| {
            let x = Tensor::new(input.shape().to_vec(), p.to_vec())?;
            loss(model, &x, false).map(|r| r.0)
        },
        input.data(),
        &xg,
        h,
    )
    .unwrap();
    (param_err, input_err, xg)
}

/// `max|a − b| / max|b|`.
pub fn rel_err_inf(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = b.iter().map(|y| y.abs()).fold(0.0, f64::max);
    diff / scale.max(1e-300)
}
