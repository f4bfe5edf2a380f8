use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-2.0..2.0))
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn conv_hand_sum_is_45() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_fn(Shape::new(1, 1, 3, 3), |i| (i + 1) as f64));
    let k = g.constant(Tensor::full(Shape::new(1, 1, 3, 3), 1.0));
    let b = g.constant(Tensor::zeros(Shape::new(1, 1, 1, 1)));
    let y = g.conv2d(x, k, Some(b), 1, 0).unwrap();
    assert_eq!(g.shape(y), Shape::new(1, 1, 1, 1));
    assert_eq!(g.value(y).data()[0], 45.0);
}

#[test]
fn conv_zero_input_emits_bias() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(Shape::new(2, 3, 5, 4)));
    let k = g.constant(Tensor::full(Shape::new(2, 3, 3, 3), 0.7));
    let b = g.constant(Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![1.5, -2.0]).unwrap());
    let y = g.conv2d(x, k, Some(b), 1, 1).unwrap();
    let v = g.value(y);
    for n in 0..2 {
        for y_ in 0..5 {
            for x_ in 0..4 {
                assert_eq!(v.at(n, 0, y_, x_), 1.5);
                assert_eq!(v.at(n, 1, y_, x_), -2.0);
            }
        }
    }
}

#[test]
fn pointwise_unit_kernel_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let input = random(Shape::new(2, 1, 4, 6), &mut rng);
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let k = g.constant(Tensor::full(Shape::new(1, 1, 1, 1), 1.0));
    let y = g.conv2d(x, k, None, 1, 0).unwrap();
    assert_eq!(g.value(y), &input);
}

#[test]
fn conv_output_size_formula() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(Shape::new(1, 2, 11, 16)));
    let k = g.constant(Tensor::zeros(Shape::new(3, 2, 3, 3)));
    let y = g.conv2d(x, k, None, 2, 1).unwrap();
    assert_eq!(g.shape(y), Shape::new(1, 3, (11 + 2 - 3) / 2 + 1, (16 + 2 - 3) / 2 + 1));
}

#[test]
fn conv_rejects_channel_mismatch() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(Shape::new(1, 2, 5, 5)));
    let k = g.constant(Tensor::zeros(Shape::new(1, 3, 3, 3)));
    let err = g.conv2d(x, k, None, 1, 1).unwrap_err();
    assert!(err.to_string().contains("input channels"), "{err}");
}

#[test]
fn group_norm_constant_input_yields_beta() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(Shape::new(2, 4, 3, 3), 3.25));
    let gamma = g.constant(Tensor::from_vec(Shape::new(1, 4, 1, 1), vec![2.0, -1.0, 0.5, 3.0]).unwrap());
    let beta = g.constant(Tensor::from_vec(Shape::new(1, 4, 1, 1), vec![0.1, 0.2, 0.3, 0.4]).unwrap());
    let y = g.group_norm(x, 2, gamma, beta, 1e-5).unwrap();
    let v = g.value(y);
    for n in 0..2 {
        for c in 0..4 {
            assert_eq!(v.at(n, c, 1, 2), [0.1, 0.2, 0.3, 0.4][c]);
        }
    }
}

#[test]
fn group_norm_hand_example() {
    // Group 0 = {1, 3}: mean 2, var 1. Group 1 = {2, 6}: mean 4, var 4.
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_vec(Shape::new(1, 2, 1, 2), vec![1.0, 3.0, 2.0, 6.0]).unwrap());
    let gamma = g.constant(Tensor::full(Shape::new(1, 2, 1, 1), 1.0));
    let beta = g.constant(Tensor::zeros(Shape::new(1, 2, 1, 1)));
    let y = g.group_norm(x, 2, gamma, beta, 1e-5).unwrap();
    let v = g.value(y).data();
    let a = 1.0 / (1.0 + 1e-5f64).sqrt();
    let b = 2.0 / (4.0 + 1e-5f64).sqrt();
    assert!(close(v[0], -a, 1e-15) && close(v[1], a, 1e-15));
    assert!(close(v[2], -b, 1e-15) && close(v[3], b, 1e-15));
    assert!(close(v[0], -1.0, 1e-5) && close(v[3], 1.0, 1e-5));
}

#[test]
fn group_norm_standardizes_groups() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut g = Graph::new();
    let x = g.constant(random(Shape::new(2, 6, 4, 5), &mut rng));
    let gamma = g.constant(Tensor::full(Shape::new(1, 6, 1, 1), 1.0));
    let beta = g.constant(Tensor::zeros(Shape::new(1, 6, 1, 1)));
    let y = g.group_norm(x, 3, gamma, beta, 1e-5).unwrap();
    let v = g.value(y);
    for n in 0..2 {
        for grp in 0..3 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|ci| {
                    let c = grp * 2 + ci;
                    (0..20).map(move |p| (c, p))
                })
                .map(|(c, p)| v.at(n, c, p / 5, p % 5))
                .collect();
            let mean = vals.iter().sum::<f64>() / 40.0;
            let var = vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 40.0;
            assert!(mean.abs() < 1e-12);
            assert!(close(var, 1.0, 1e-4));
        }
    }
}

#[test]
fn group_norm_rejects_indivisible_channels() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(Shape::new(1, 5, 2, 2)));
    let p = g.constant(Tensor::zeros(Shape::new(1, 5, 1, 1)));
    assert!(g.group_norm(x, 2, p, p, 1e-5).is_err());
}

#[test]
fn elementwise_analytic_values() {
    let mut g = Graph::new();
    let z = g.constant(Tensor::zeros(Shape::new(1, 1, 1, 1)));
    let s = g.sigmoid(z);
    let t = g.tanh(z);
    assert_eq!(g.value(s).data()[0], 0.5);
    assert_eq!(g.value(t).data()[0], 0.0);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = g.constant(random(Shape::new(1, 2, 3, 3), &mut rng));
    let nx = g.scale(x, -1.0);
    let a = g.sigmoid(x);
    let b = g.sigmoid(nx);
    let sum = g.add(a, b).unwrap();
    assert!(g.value(sum).data().iter().all(|v| close(*v, 1.0, 1e-15)));
}

#[test]
fn concat_stacks_channels() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::full(Shape::new(2, 2, 3, 4), 1.0));
    let b = g.constant(Tensor::full(Shape::new(2, 3, 3, 4), 2.0));
    let c = g.concat_channels(&[a, b]).unwrap();
    assert_eq!(g.shape(c), Shape::new(2, 5, 3, 4));
    assert_eq!(g.value(c).at(1, 1, 2, 3), 1.0);
    assert_eq!(g.value(c).at(1, 2, 0, 0), 2.0);
    let bad = g.constant(Tensor::zeros(Shape::new(2, 1, 3, 5)));
    assert!(g.concat_channels(&[a, bad]).is_err());
    assert!(g.add(a, b).is_err());
}

#[test]
fn backprop_of_sum_is_ones() {
    let mut g = Graph::new();
    let x = g.param(Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![0.5, -1.0, 4.0]).unwrap());
    let l = g.sum(x);
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn backprop_of_square_sum() {
    let mut g = Graph::new();
    let x = g.param(Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![1.0, 2.0]).unwrap());
    let sq = g.square(x);
    let l = g.sum(sq);
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn reused_leaf_accumulates() {
    let mut g = Graph::new();
    let x = g.param(Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![3.0, -7.0]).unwrap());
    let y = g.add(x, x).unwrap();
    let l = g.sum(y);
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2.0, 2.0]);
}

#[test]
fn backprop_rejects_non_scalar() {
    let mut g = Graph::new();
    let x = g.param(Tensor::zeros(Shape::new(1, 1, 1, 2)));
    assert!(matches!(g.backward(x), Err(crate::Error::NotScalar(_))));
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::new();
    let x = g.param(Tensor::full(Shape::new(1, 1, 2, 2), 1.0));
    let c = g.constant(Tensor::full(Shape::new(1, 1, 2, 2), 2.0));
    let y = g.mul(x, c).unwrap();
    let l = g.sum(y);
    g.backward(l).unwrap();
    assert!(g.grad(c).is_none());
    assert_eq!(g.grad(x).unwrap().data(), &[2.0; 4]);
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::new();
        let x = g.constant(random(Shape::new(2, 3, 9, 9), &mut rng));
        let k = g.constant(random(Shape::new(4, 3, 3, 3), &mut rng));
        let y = g.conv2d(x, k, None, 2, 1).unwrap();
        g.value(y).clone()
    };
    assert_eq!(run(), run());
}

/// Gradient of `sum(out * weights)` w.r.t. every param leaf, checked against
/// central differences of a rebuilt graph.
fn check_composite<F>(inputs: Vec<Tensor>, build: F)
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let forward = |vals: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars);
        g.value(out).sum()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars);
    g.backward(out).unwrap();
    for (i, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let numeric = finite_diff_gradient(
            |probe| {
                let mut vals = inputs.clone();
                vals[i] = probe.clone();
                Ok(forward(&vals))
            },
            &inputs[i],
            1e-5,
        )
        .unwrap();
        let err = relative_error(&analytic, &numeric);
        assert!(err < 1e-4, "input {i}: relative error {err}");
    }
}

fn weighted_sum(g: &mut Graph, out: Var, weights: &Tensor) -> Var {
    let w = g.constant(weights.clone());
    let p = g.mul(out, w).unwrap();
    g.sum(p)
}

#[test]
fn three_layer_composite_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(Shape::new(2, 2, 6, 7), &mut rng);
    let k1 = random(Shape::new(4, 2, 3, 3), &mut rng);
    let b1 = random(Shape::new(1, 4, 1, 1), &mut rng);
    let gamma = random(Shape::new(1, 4, 1, 1), &mut rng);
    let beta = random(Shape::new(1, 4, 1, 1), &mut rng);
    let k2 = random(Shape::new(3, 4, 3, 3), &mut rng);
    let proj = random(Shape::new(2, 3, 3, 4), &mut rng);
    check_composite(vec![x, k1, b1, gamma, beta, k2], move |g, v| {
        let h = g.conv2d(v[0], v[1], Some(v[2]), 1, 1).unwrap();
        let h = g.group_norm(h, 2, v[3], v[4], 1e-5).unwrap();
        let h = g.tanh(h);
        let h = g.conv2d(h, v[5], None, 2, 1).unwrap();
        let h = g.sigmoid(h);
        weighted_sum(g, h, &proj)
    });
}

#[test]
fn structural_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random(Shape::new(1, 2, 3, 4), &mut rng);
    let b = random(Shape::new(1, 2, 3, 4), &mut rng);
    let bias = random(Shape::new(1, 4, 1, 1), &mut rng);
    let map = Rc::new(random(Shape::new(1, 1, 3, 4), &mut rng));
    let proj = random(Shape::new(1, 2, 6, 8), &mut rng);
    check_composite(vec![a, b, bias], move |g, v| {
        let c = g.concat_channels(&[v[0], v[1]]).unwrap();
        let c = g.channel_bias(c, v[2]).unwrap();
        let c = g.pixel_scale(c, map.clone()).unwrap();
        let parts = g.split_channels(c, 2).unwrap();
        let m = g.mul(parts[0], parts[1]).unwrap();
        let e = g.exp(m);
        let s = g.sub(e, v[0]).unwrap();
        let s = g.activation(s, Activation::Softplus);
        let s = g.offset(s, 0.3);
        let u = g.upsample_nearest(s, 2).unwrap();
        weighted_sum(g, u, &proj)
    });
}
