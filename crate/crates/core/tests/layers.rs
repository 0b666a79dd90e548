mod common;

use common::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use smoothnet::autograd::{SELU_ALPHA, SELU_LAMBDA};
use smoothnet::layers::{
    xavier_bound, xavier_glorot_init, LayerFactory, ParamRole, ParamSet, Parameter,
    GROUP_NORM_EPS,
};
use smoothnet::{Tape, Tensor};

fn group_norm(x: &Tensor<f64>, gamma: &[f64], beta: &[f64], groups: usize) -> Tensor<f64> {
    let c = x.shape()[1];
    let mut tape = Tape::<f64>::new();
    let xv = tape.input(x.clone()).unwrap();
    let g = tape.param(Tensor::new(vec![c], gamma.to_vec()).unwrap()).unwrap();
    let b = tape.param(Tensor::new(vec![c], beta.to_vec()).unwrap()).unwrap();
    let y = tape.group_norm(xv, g, b, groups, GROUP_NORM_EPS).unwrap();
    tape.value(y).unwrap().clone()
}

#[test]
fn group_norm_constant_input_is_zero() {
    let x = Tensor::full(vec![2, 16, 3, 3], 4.25);
    let y = group_norm(&x, &[1.0; 16], &[0.0; 16], 8);
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn group_norm_zero_scale_yields_shift() {
    let x = randn(&[2, 16, 3, 3], &mut rng(1));
    let y = group_norm(&x, &[0.0; 16], &[5.0; 16], 8);
    assert!(y.data().iter().all(|&v| v == 5.0));
}

#[test]
fn group_norm_matches_direct_statistics() {
    let x = randn(&[2, 16, 4, 4], &mut rng(2));
    let y = group_norm(&x, &[1.0; 16], &[0.0; 16], 8);
    let expect = group_norm_oracle(&x, 8, GROUP_NORM_EPS);
    assert!(max_rel_diff(y.data(), &expect) <= 1e-6);

    let gamma: Vec<f64> = (0..16).map(|i| 0.5 + i as f64 / 8.0).collect();
    let beta: Vec<f64> = (0..16).map(|i| i as f64 - 8.0).collect();
    let y = group_norm(&x, &gamma, &beta, 8);
    let affine: Vec<f64> = expect
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let ch = (i / 16) % 16;
            gamma[ch] * v + beta[ch]
        })
        .collect();
    assert!(max_rel_diff(y.data(), &affine) <= 1e-6);
}

#[test]
fn group_norm_requires_divisible_channels() {
    let mut params = ParamSet::<f64>::new();
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let mut f = LayerFactory {
        params: &mut params,
        rng: &mut r,
    };
    assert!(f.group_norm("gn", 12, 8).is_err());
    assert!(f.group_norm("gn", 16, 8).is_ok());

    let mut tape = Tape::<f64>::new();
    let x = tape.input(Tensor::zeros(vec![1, 12, 2, 2])).unwrap();
    let g = tape.param(Tensor::ones(vec![12])).unwrap();
    let b = tape.param(Tensor::zeros(vec![12])).unwrap();
    assert!(tape.group_norm(x, g, b, 8, GROUP_NORM_EPS).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn group_norm_output_is_standardized(seed in any::<u64>(), n in 1usize..4, hw in 2usize..6) {
        let x = randn(&[n, 16, hw, hw], &mut rng(seed));
        let y = group_norm(&x, &[1.0; 16], &[0.0; 16], 8);
        let group = 2 * hw * hw;
        for chunk in y.data().chunks(group) {
            let mean = chunk.iter().sum::<f64>() / group as f64;
            let var = chunk.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / group as f64;
            prop_assert!(mean.abs() <= 1e-5);
            prop_assert!((var - 1.0).abs() <= 1e-3);
        }
    }

    #[test]
    fn group_norm_is_batch_invariant(seed in any::<u64>(), n in 2usize..6, pick in 0usize..6) {
        let pick = pick % n;
        let x = randn(&[n, 16, 3, 3], &mut rng(seed));
        let gamma: Vec<f64> = (0..16).map(|i| 1.0 + i as f64 * 0.1).collect();
        let beta = vec![0.3; 16];
        let batched = group_norm(&x, &gamma, &beta, 8);
        let alone = group_norm(&x.slice_batch(pick, pick + 1).unwrap(), &gamma, &beta, 8);
        let row = batched.slice_batch(pick, pick + 1).unwrap();
        prop_assert_eq!(row.data(), alone.data());
    }

    #[test]
    fn selu_is_monotone_and_continuous(mut xs in prop::collection::vec(-20.0f64..20.0, 2..200)) {
        xs.sort_by(f64::total_cmp);
        xs.push(0.0);
        xs.push(1e-12);
        xs.push(-1e-12);
        xs.sort_by(f64::total_cmp);
        let y = selu(&xs);
        for i in 1..xs.len() {
            prop_assert!(y[i] >= y[i - 1]);
        }
        let at = |v: f64| selu(&[v])[0];
        prop_assert!((at(1e-12) - at(-1e-12)).abs() < 1e-11);
    }
}

fn selu(xs: &[f64]) -> Vec<f64> {
    let mut tape = Tape::<f64>::new();
    let x = tape.input(Tensor::new(vec![xs.len()], xs.to_vec()).unwrap()).unwrap();
    let y = tape.selu(x).unwrap();
    tape.value(y).unwrap().data().to_vec()
}

#[test]
fn selu_definition() {
    assert!(SELU_LAMBDA > 1.0 && SELU_ALPHA > 0.0);
    assert_eq!(selu(&[0.0])[0], 0.0);
    assert_eq!(selu(&[1.0])[0], SELU_LAMBDA);
    let neg = selu(&[-2.0])[0];
    assert!((neg - SELU_LAMBDA * SELU_ALPHA * ((-2f64).exp() - 1.0)).abs() < 1e-15);
}

#[test]
fn selu_preserves_standard_normal_moments() {
    let x = randn(&[1_000_000], &mut rng(3));
    let y = selu(x.data());
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    assert!(mean.abs() <= 0.02, "mean {mean}");
    assert!((var - 1.0).abs() <= 0.02, "var {var}");
}

#[test]
fn relu_definition() {
    let mut tape = Tape::<f64>::new();
    let x = tape.input(Tensor::from_f64(vec![3], &[-1.0, 0.0, 2.0]).unwrap()).unwrap();
    let y = tape.relu(x).unwrap();
    assert_eq!(tape.value(y).unwrap().data(), &[0.0, 0.0, 2.0]);
}

fn linear(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let mut tape = Tape::<f64>::new();
    let xv = tape.input(x.clone()).unwrap();
    let wv = tape.param(w.clone()).unwrap();
    let bv = tape.param(b.clone()).unwrap();
    let y = tape.linear(xv, wv, Some(bv)).unwrap();
    tape.value(y).unwrap().clone()
}

#[test]
fn linear_examples() {
    let x = randn(&[3, 4], &mut rng(4));
    let mut eye = vec![0.0; 16];
    for i in 0..4 {
        eye[i * 5] = 1.0;
    }
    let y = linear(&x, &Tensor::new(vec![4, 4], eye).unwrap(), &Tensor::zeros(vec![4]));
    assert_eq!(y, x);

    let y = linear(
        &Tensor::from_f64(vec![1, 2], &[1.0, 1.0]).unwrap(),
        &Tensor::from_f64(vec![2, 1], &[1.0, 1.0]).unwrap(),
        &Tensor::from_f64(vec![1], &[1.0]).unwrap(),
    );
    assert_eq!(y.data(), &[3.0]);

    let mut r = rng(5);
    let (x, w, b) = (randn(&[6, 9], &mut r), randn(&[9, 5], &mut r), randn(&[5], &mut r));
    let mut expect = matmul_oracle(&x, &w);
    for (i, v) in expect.iter_mut().enumerate() {
        *v += b.data()[i % 5];
    }
    assert!(max_rel_diff(linear(&x, &w, &b).data(), &expect) <= 1e-6);
}

#[test]
fn xavier_head_bound() {
    let a = xavier_bound(2048, 512).unwrap();
    assert!((a - (6.0f64 / 2560.0).sqrt()).abs() < 1e-15);
    assert!((a - 0.04841).abs() < 1e-5);
    assert!(xavier_bound(0, 1).is_err());
}

#[test]
fn xavier_statistics() {
    let mut p = Parameter {
        name: "w".into(),
        tensor: Tensor::<f64>::zeros(vec![1000, 1000]),
        fan_in: 2048,
        fan_out: 512,
        role: ParamRole::Weight,
    };
    xavier_glorot_init(&mut p, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let a = xavier_bound(2048, 512).unwrap();
    let d = p.tensor.data();
    assert!(d.iter().all(|v| v.abs() <= a));
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    assert!(mean.abs() <= 3.0 * a / (3.0 * n).sqrt(), "mean {mean}");
    assert!((var / (a * a / 3.0) - 1.0).abs() <= 0.02, "var {var}");

    let mut bias = Parameter {
        name: "b".into(),
        tensor: Tensor::<f64>::ones(vec![8]),
        fan_in: 4,
        fan_out: 8,
        role: ParamRole::Bias,
    };
    xavier_glorot_init(&mut bias, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(bias.tensor.data().iter().all(|&v| v == 0.0));

    let mut zero_fan = Parameter {
        fan_in: 0,
        ..p.clone()
    };
    assert!(xavier_glorot_init(&mut zero_fan, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
}

#[test]
fn conv_fans_include_receptive_field() {
    let mut params = ParamSet::<f64>::new();
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let mut f = LayerFactory {
        params: &mut params,
        rng: &mut r,
    };
    f.conv2d("c", 16, 32, 3, 1, 1).unwrap();
    let w = params.iter().next().unwrap();
    assert_eq!((w.fan_in, w.fan_out), (16 * 9, 32 * 9));
    let a = xavier_bound(16 * 9, 32 * 9).unwrap();
    assert!(w.tensor.data().iter().all(|v| v.abs() <= a));
}

#[test]
fn parameter_order_is_stable() {
    let build = || {
        let mut params = ParamSet::<f64>::new();
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let mut f = LayerFactory {
            params: &mut params,
            rng: &mut r,
        };
        f.conv2d("a", 3, 8, 3, 1, 1).unwrap();
        f.group_norm("b", 8, 8).unwrap();
        f.linear("c", 8, 4).unwrap();
        params
    };
    let names = |p: &ParamSet<f64>| p.iter().map(|p| p.name.clone()).collect::<Vec<_>>();
    let (p1, p2) = (build(), build());
    assert_eq!(names(&p1), ["a.weight", "a.bias", "b.gamma", "b.beta", "c.weight", "c.bias"]);
    assert_eq!(names(&p1), names(&p2));
    assert_eq!(p1.flatten(), p2.flatten());
}
