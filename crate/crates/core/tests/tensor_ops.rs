mod common;

use common::*;
use smoothnet::autograd::{Reduction, Tape};
use smoothnet::{Error, Tensor};

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape.to_vec(), data).unwrap()
}

#[test]
fn conv2d_scalar_product() {
    let mut tape = Tape::<f64>::new();
    let x = tape.input(t(&[1, 1, 1, 1], &[2.0])).unwrap();
    let w = tape.param(t(&[1, 1, 1, 1], &[3.0])).unwrap();
    let b = tape.param(t(&[1], &[0.0])).unwrap();
    let y = tape.conv2d(x, w, Some(b), 1, 0).unwrap();
    assert_eq!(tape.value(y).unwrap().data(), &[6.0]);
}

#[test]
fn conv2d_identity_kernel() {
    let mut r = rng(1);
    let input = randn(&[1, 1, 3, 3], &mut r);
    let mut kernel = vec![0.0; 9];
    kernel[4] = 1.0;
    let mut tape = Tape::<f64>::new();
    let x = tape.input(input.clone()).unwrap();
    let w = tape.param(t(&[1, 1, 3, 3], &kernel)).unwrap();
    let y = tape.conv2d(x, w, None, 1, 1).unwrap();
    assert_eq!(tape.value(y).unwrap(), &input);
}

#[test]
fn conv2d_matches_nested_loops() {
    for (seed, stride, pad) in [(2, 1, 1), (3, 2, 1), (4, 1, 0), (5, 2, 2)] {
        let mut r = rng(seed);
        let x = randn(&[2, 3, 5, 5], &mut r);
        let w = randn(&[4, 3, 3, 3], &mut r);
        let b = randn(&[4], &mut r);
        let mut tape = Tape::<f64>::new();
        let xv = tape.input(x.clone()).unwrap();
        let wv = tape.param(w.clone()).unwrap();
        let bv = tape.param(b.clone()).unwrap();
        let y = tape.conv2d(xv, wv, Some(bv), stride, pad).unwrap();
        let expect = conv2d_oracle(&x, &w, b.data(), stride, pad);
        let got = tape.value(y).unwrap();
        assert_eq!(got.shape(), expect.shape());
        assert!(max_rel_diff(got.data(), expect.data()) <= 1e-5);
    }
}

#[test]
fn conv2d_pointwise_matches_nested_loops() {
    let mut r = rng(9);
    let x = randn(&[2, 5, 4, 3], &mut r);
    let w = randn(&[6, 5, 1, 1], &mut r);
    let b = randn(&[6], &mut r);
    let mut tape = Tape::<f64>::new();
    let xv = tape.input(x.clone()).unwrap();
    let wv = tape.param(w.clone()).unwrap();
    let bv = tape.param(b.clone()).unwrap();
    let y = tape.conv2d(xv, wv, Some(bv), 1, 0).unwrap();
    let expect = conv2d_oracle(&x, &w, b.data(), 1, 0);
    assert!(max_rel_diff(tape.value(y).unwrap().data(), expect.data()) <= 1e-12);
}

#[test]
fn conv2d_shape_errors() {
    let mut tape = Tape::<f64>::new();
    let x = tape.input(Tensor::zeros(vec![1, 2, 4, 4])).unwrap();
    let w = tape.param(Tensor::zeros(vec![3, 3, 3, 3])).unwrap();
    assert!(matches!(tape.conv2d(x, w, None, 1, 1), Err(Error::Shape { .. })));
    let even = tape.param(Tensor::zeros(vec![3, 2, 2, 2])).unwrap();
    assert!(tape.conv2d(x, even, None, 1, 0).is_err());
    let big = tape.param(Tensor::zeros(vec![1, 2, 7, 7])).unwrap();
    assert!(tape.conv2d(x, big, None, 1, 1).is_err());
}

#[test]
fn maxpool_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.input(t(&[1, 1, 2, 2], &[1., 2., 3., 4.])).unwrap();
    let y = tape.maxpool2d(x, 2, 2, 0).unwrap();
    assert_eq!(tape.value(y).unwrap().data(), &[4.0]);

    let mut r = rng(3);
    let input = randn(&[2, 3, 4, 5], &mut r);
    let x = tape.input(input.clone()).unwrap();
    let y = tape.maxpool2d(x, 1, 1, 0).unwrap();
    assert_eq!(tape.value(y).unwrap(), &input);

    let x = tape.input(Tensor::zeros(vec![1, 1, 2, 2])).unwrap();
    assert!(tape.maxpool2d(x, 3, 1, 0).is_err());
}

#[test]
fn maxpool_matches_loop_oracle() {
    for seed in 0..5 {
        let input = randn(&[1, 2, 6, 6], &mut rng(seed));
        let mut tape = Tape::<f64>::new();
        let x = tape.input(input.clone()).unwrap();
        let y = tape.maxpool2d(x, 3, 1, 1).unwrap();
        assert_eq!(tape.value(y).unwrap(), &maxpool_oracle(&input, 3, 1, 1));
    }
}

#[test]
fn maxpool_tie_routes_to_first_element() {
    let mut tape = Tape::<f64>::new();
    let x = tape.variable(t(&[1, 1, 2, 2], &[5., 5., 5., 5.])).unwrap();
    let y = tape.maxpool2d(x, 2, 2, 0).unwrap();
    let loss = tape.sum(y).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1., 0., 0., 0.]);
}

#[test]
fn avgpool_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.input(t(&[1, 1, 2, 2], &[1., 2., 3., 4.])).unwrap();
    let y = tape.avgpool2d(x, 2, 2).unwrap();
    assert_eq!(tape.value(y).unwrap().data(), &[2.5]);

    let x = tape.input(Tensor::full(vec![2, 3, 6, 6], 1.75)).unwrap();
    let y = tape.avgpool2d(x, 2, 2).unwrap();
    assert!(tape.value(y).unwrap().data().iter().all(|&v| v == 1.75));

    let input = randn(&[2, 3, 7, 6], &mut rng(4));
    let x = tape.input(input.clone()).unwrap();
    let y = tape.avgpool2d(x, 3, 2).unwrap();
    let expect = avgpool_oracle(&input, 3, 2);
    assert!(max_rel_diff(tape.value(y).unwrap().data(), expect.data()) <= 1e-6);

    let x = tape.input(Tensor::zeros(vec![1, 1, 2, 2])).unwrap();
    assert!(tape.avgpool2d(x, 3, 1).is_err());
}

#[test]
fn adaptive_pool_examples() {
    let input = randn(&[2, 3, 5, 7], &mut rng(5));
    let mut tape = Tape::<f64>::new();
    let x = tape.input(input.clone()).unwrap();
    let same = tape.adaptive_avgpool(x, 5, 7).unwrap();
    assert_eq!(tape.value(same).unwrap(), &input);

    let global = tape.adaptive_avgpool(x, 1, 1).unwrap();
    for (p, v) in tape.value(global).unwrap().data().iter().enumerate() {
        let plane = &input.data()[p * 35..(p + 1) * 35];
        let mean = plane.iter().sum::<f64>() / 35.0;
        assert!((v - mean).abs() < 1e-12);
    }

    let ramp: Vec<f64> = (0..16).map(f64::from).collect();
    let x = tape.input(t(&[1, 1, 4, 4], &ramp)).unwrap();
    let y = tape.adaptive_avgpool(x, 2, 2).unwrap();
    assert_eq!(tape.value(y).unwrap().data(), &[2.5, 4.5, 10.5, 12.5]);
    assert_eq!(
        tape.value(y).unwrap(),
        &adaptive_oracle(&t(&[1, 1, 4, 4], &ramp), 2, 2)
    );

    let odd = randn(&[1, 2, 7, 5], &mut rng(6));
    let x = tape.input(odd.clone()).unwrap();
    let y = tape.adaptive_avgpool(x, 3, 2).unwrap();
    assert!(max_rel_diff(tape.value(y).unwrap().data(), adaptive_oracle(&odd, 3, 2).data()) < 1e-12);

    assert!(tape.adaptive_avgpool(x, 0, 1).is_err());
}

#[test]
fn concat_and_matmul_examples() {
    let mut tape = Tape::<f64>::new();
    let a = tape.input(Tensor::zeros(vec![2, 3, 4, 4])).unwrap();
    let b = tape.input(Tensor::ones(vec![2, 5, 4, 4])).unwrap();
    let c = tape.concat_channels(&[a, b]).unwrap();
    assert_eq!(tape.value(c).unwrap().shape(), &[2, 8, 4, 4]);
    let bad = tape.input(Tensor::zeros(vec![2, 5, 3, 4])).unwrap();
    assert!(tape.concat_channels(&[a, bad]).is_err());

    let m = randn(&[4, 3], &mut rng(7));
    let mut eye = vec![0.0; 16];
    for i in 0..4 {
        eye[i * 5] = 1.0;
    }
    let i4 = tape.input(t(&[4, 4], &eye)).unwrap();
    let mv = tape.input(m.clone()).unwrap();
    let p = tape.matmul(i4, mv).unwrap();
    assert_eq!(tape.value(p).unwrap(), &m);

    let a = randn(&[5, 7], &mut rng(8));
    let b = randn(&[7, 3], &mut rng(9));
    let av = tape.input(a.clone()).unwrap();
    let bv = tape.input(b.clone()).unwrap();
    let p = tape.matmul(av, bv).unwrap();
    assert!(max_rel_diff(tape.value(p).unwrap().data(), &matmul_oracle(&a, &b)) <= 1e-6);
    assert!(tape.matmul(bv, bv).is_err());
}

#[test]
fn concat_then_slice_reconstructs_upstream_gradients() {
    let mut r = rng(10);
    let mut tape = Tape::<f64>::new();
    let a = tape.variable(randn(&[2, 3, 2, 2], &mut r)).unwrap();
    let b = tape.variable(randn(&[2, 5, 2, 2], &mut r)).unwrap();
    let c = tape.concat_channels(&[a, b]).unwrap();
    let sa = tape.slice_channels(c, 0, 3).unwrap();
    let sb = tape.slice_channels(c, 3, 8).unwrap();
    let wa = randn(&[2, 3, 2, 2], &mut r);
    let wb = randn(&[2, 5, 2, 2], &mut r);
    let wav = tape.constant(wa.clone()).unwrap();
    let wbv = tape.constant(wb.clone()).unwrap();
    let pa = tape.mul(sa, wav).unwrap();
    let pb = tape.mul(sb, wbv).unwrap();
    let la = tape.sum(pa).unwrap();
    let lb = tape.sum(pb).unwrap();
    let loss = tape.add(la, lb).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(a).unwrap(), &wa);
    assert_eq!(g.get(b).unwrap(), &wb);
}

#[test]
fn backward_examples() {
    let mut tape = Tape::<f64>::new();
    let w = tape.param(randn(&[2, 3], &mut rng(11))).unwrap();
    let s = tape.sum(w).unwrap();
    let g = tape.backward(s).unwrap();
    assert!(g.get(w).unwrap().data().iter().all(|&v| v == 1.0));

    let mut tape = Tape::<f64>::new();
    let w = tape.param(t(&[2], &[3.0, -4.0])).unwrap();
    let sq = tape.mul(w, w).unwrap();
    let s = tape.sum(sq).unwrap();
    let half = tape.scale(s, 0.5).unwrap();
    let g = tape.backward(half).unwrap();
    assert_eq!(g.get(w).unwrap().data(), &[3.0, -4.0]);
}

#[test]
fn backward_errors() {
    let mut tape = Tape::<f64>::new();
    let w = tape.param(Tensor::ones(vec![3])).unwrap();
    let y = tape.scale(w, 2.0).unwrap();
    assert!(matches!(tape.backward(y), Err(Error::Record(_))));
    let s = tape.sum(y).unwrap();
    tape.reset();
    assert!(matches!(tape.backward(s), Err(Error::Record(_))));
    let other = Tape::<f64>::new();
    assert!(other.backward(s).is_err());
}

#[test]
fn non_finite_values_are_checked_errors() {
    let mut tape = Tape::<f64>::new();
    assert!(matches!(
        tape.input(t(&[2], &[1.0, f64::INFINITY])),
        Err(Error::NonFinite { .. })
    ));
    let x = tape.input(t(&[1], &[1e300])).unwrap();
    let y = tape.scale(x, 1e300).unwrap_err();
    assert!(matches!(y, Error::NonFinite { op: "scale" }));
}

#[test]
fn cross_entropy_known_values() {
    let mut tape = Tape::<f64>::new();
    let logits = tape.variable(t(&[2, 3], &[0., 0., 0., 1., 2., 3.])).unwrap();
    let loss = tape.cross_entropy(logits, &[0, 2], Reduction::Mean).unwrap();
    let l0 = 3f64.ln();
    let l1 = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln() - 3.0;
    let v = tape.value(loss).unwrap().data()[0];
    assert!((v - (l0 + l1) / 2.0).abs() < 1e-12);
    assert!(tape.cross_entropy(logits, &[0, 3], Reduction::Mean).is_err());
    assert!(tape.cross_entropy(logits, &[0], Reduction::Mean).is_err());
}

#[test]
fn forward_backward_is_deterministic() {
    let run = || {
        let mut r = rng(12);
        let mut tape = Tape::<f32>::new();
        let x = tape.input(randn(&[3, 4, 6, 6], &mut r).cast()).unwrap();
        let w = tape.param(randn(&[8, 4, 3, 3], &mut r).cast()).unwrap();
        let y = tape.conv2d(x, w, None, 1, 1).unwrap();
        let y = tape.selu(y).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        (tape.value(y).unwrap().clone(), g.get(w).unwrap().clone())
    };
    assert_eq!(run(), run());
}

mod finite_differences {
    use super::*;

    const SEEDS: u64 = 20;
    const TOL: f64 = 1e-4;

    fn check<F>(name: &str, shapes: &[&[usize]], build: F)
    where
        F: Fn(&mut Tape<f64>, &[smoothnet::Var]) -> smoothnet::Result<smoothnet::Var>,
    {
        for seed in 0..SEEDS {
            let mut r = rng(1000 + seed);
            let inputs: Vec<_> = shapes.iter().map(|s| randn(s, &mut r)).collect();
            let err = grad_check(&inputs, seed, &build);
            assert!(err <= TOL, "{name} seed {seed}: rel err {err:e}");
        }
    }

    #[test]
    fn conv2d() {
        check("conv2d", &[&[2, 3, 5, 5], &[4, 3, 3, 3], &[4]], |t, v| {
            t.conv2d(v[0], v[1], Some(v[2]), 1, 1)
        });
        check("conv2d/stride2", &[&[1, 2, 6, 5], &[3, 2, 3, 3], &[3]], |t, v| {
            t.conv2d(v[0], v[1], Some(v[2]), 2, 1)
        });
        check("conv2d/1x1", &[&[2, 4, 3, 3], &[5, 4, 1, 1], &[5]], |t, v| {
            t.conv2d(v[0], v[1], Some(v[2]), 1, 0)
        });
    }

    #[test]
    fn pools() {
        check("maxpool", &[&[2, 2, 6, 6]], |t, v| t.maxpool2d(v[0], 3, 1, 1));
        check("maxpool/s2", &[&[1, 3, 6, 6]], |t, v| t.maxpool2d(v[0], 2, 2, 0));
        check("avgpool", &[&[2, 2, 6, 6]], |t, v| t.avgpool2d(v[0], 2, 2));
        check("avgpool/padded", &[&[1, 2, 5, 5]], |t, v| t.avgpool2d_padded(v[0], 3, 1, 1));
        check("adaptive", &[&[2, 2, 7, 5]], |t, v| t.adaptive_avgpool(v[0], 3, 2));
    }

    #[test]
    fn group_norm() {
        check("group_norm", &[&[2, 16, 3, 3], &[16], &[16]], |t, v| {
            t.group_norm(v[0], v[1], v[2], 8, 1e-5)
        });
        check("group_norm/1", &[&[2, 4, 2, 3], &[4], &[4]], |t, v| {
            t.group_norm(v[0], v[1], v[2], 1, 1e-5)
        });
    }

    #[test]
    fn linear_and_matmul() {
        check("linear", &[&[3, 5], &[5, 4], &[4]], |t, v| t.linear(v[0], v[1], Some(v[2])));
        check("matmul", &[&[3, 5], &[5, 2]], |t, v| t.matmul(v[0], v[1]));
    }

    #[test]
    fn elementwise() {
        check("selu", &[&[4, 7]], |t, v| t.selu(v[0]));
        check("relu", &[&[4, 7]], |t, v| t.relu(v[0]));
        check("add", &[&[3, 4], &[3, 4]], |t, v| t.add(v[0], v[1]));
        check("mul", &[&[3, 4], &[3, 4]], |t, v| t.mul(v[0], v[1]));
        check("scale", &[&[3, 4]], |t, v| t.scale(v[0], -2.5));
    }

    #[test]
    fn structural() {
        check("concat", &[&[2, 3, 2, 2], &[2, 1, 2, 2]], |t, v| {
            t.concat_channels(&[v[0], v[1]])
        });
        check("slice", &[&[2, 5, 2, 2]], |t, v| t.slice_channels(v[0], 1, 4));
        check("flatten", &[&[2, 3, 2, 2]], |t, v| t.flatten(v[0]));
    }

    #[test]
    fn cross_entropy() {
        for reduction in [Reduction::Mean, Reduction::Sum] {
            check("cross_entropy", &[&[4, 5]], move |t, v| {
                t.cross_entropy(v[0], &[0, 3, 4, 1], reduction)
            });
        }
    }

    #[test]
    fn conv_selu_composite() {
        check("conv+selu", &[&[2, 3, 5, 5], &[4, 3, 3, 3], &[4]], |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
            t.selu(y)
        });
    }
}
