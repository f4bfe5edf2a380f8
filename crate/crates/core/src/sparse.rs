//! Sparsity-invariant convolution.
//!
//! Each output is the kernel response over the valid pixels of its window,
//! divided by `eps + (valid count)`, plus the bias. Features at invalid pixels
//! are replaced by exact zeros before the convolution, so their values never
//! reach the output or receive gradient. Output validity is the max-pool of
//! the input validity over the same window.

use std::rc::Rc;

use crate::autodiff::{Graph, Shape, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-8;

/// Features paired with a single-channel {0,1} validity map.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedFeature {
    pub features: Tensor,
    pub validity: Tensor,
}

impl MaskedFeature {
    pub fn new(features: Tensor, validity: Tensor) -> Result<Self> {
        check_validity(features.shape(), &validity)?;
        Ok(MaskedFeature { features, validity })
    }
}

fn check_validity(features: Shape, validity: &Tensor) -> Result<()> {
    let vs = validity.shape();
    if vs.c != 1 || !vs.same_spatial(&features) {
        return Err(Error::shape(
            "sparse_conv2d",
            format!("validity {vs} for features {features}"),
        ));
    }
    if validity.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::invalid("sparse_conv2d", "validity must be 0 or 1"));
    }
    Ok(())
}

/// Number of valid pixels inside each zero-padded `k x k` window.
pub fn window_counts(validity: &Tensor, k: usize) -> Tensor {
    let s = validity.shape();
    let r = (k / 2) as isize;
    let mut rows = Tensor::zeros(s);
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        for y in 0..s.h {
            for x in 0..s.w {
                let lo = (x as isize - r).max(0) as usize;
                let hi = (x as isize + r).min(s.w as isize - 1) as usize;
                let acc: f64 = (lo..=hi).map(|xx| validity.at(n, 0, y, xx)).sum();
                rows.set(n, 0, y, x, acc);
            }
        }
        for y in 0..s.h {
            let lo = (y as isize - r).max(0) as usize;
            let hi = (y as isize + r).min(s.h as isize - 1) as usize;
            for x in 0..s.w {
                let acc: f64 = (lo..=hi).map(|yy| rows.at(n, 0, yy, x)).sum();
                out.set(n, 0, y, x, acc);
            }
        }
    }
    out
}

/// Records a sparse convolution on `g`. Validity is data, not differentiated.
///
/// Returns the output features and the propagated validity map.
pub fn sparse_conv2d(
    g: &mut Graph,
    features: Var,
    validity: &Tensor,
    kernel: Var,
    bias: Var,
    eps: f64,
) -> Result<(Var, Tensor)> {
    if !(eps > 0.0) {
        return Err(Error::invalid("sparse_conv2d", format!("eps must be > 0, got {eps}")));
    }
    let ks = g.shape(kernel);
    if ks.h != ks.w || ks.h % 2 == 0 {
        return Err(Error::invalid(
            "sparse_conv2d",
            format!("kernel must be square with odd size, got {}x{}", ks.h, ks.w),
        ));
    }
    let fs = g.shape(features);
    check_validity(fs, validity)?;
    let k = ks.h;

    let keep: Vec<bool> = validity.data().iter().map(|&v| v > 0.0).collect();
    let masked = g.mask_select(features, Rc::new(keep))?;
    let numerator = g.conv2d(masked, kernel, None, 1, k / 2)?;
    let counts = window_counts(validity, k);
    let inv = counts.map(|c| 1.0 / (eps + c));
    let normalized = g.pixel_scale(numerator, Rc::new(inv))?;
    let out = g.channel_bias(normalized, bias)?;
    let out_validity = counts.map(|c| if c > 0.0 { 1.0 } else { 0.0 });
    Ok((out, out_validity))
}

/// Eager evaluation without gradient tracking.
pub fn sparse_conv2d_eval(
    input: &MaskedFeature,
    kernel: &Tensor,
    bias: &Tensor,
    k: usize,
    eps: f64,
) -> Result<MaskedFeature> {
    if kernel.shape().h != k || kernel.shape().w != k {
        return Err(Error::shape(
            "sparse_conv2d",
            format!("kernel {} is not {k}x{k}", kernel.shape()),
        ));
    }
    let mut g = Graph::new();
    let f = g.constant(input.features.clone());
    let w = g.constant(kernel.clone());
    let b = g.constant(bias.clone());
    let (out, validity) = sparse_conv2d(&mut g, f, &input.validity, w, b, eps)?;
    Ok(MaskedFeature {
        features: g.value(out).clone(),
        validity,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_gradient, relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(vals: &[f64], h: usize, w: usize) -> Tensor {
        Tensor::from_vec(Shape::new(1, 1, h, w), vals.to_vec()).unwrap()
    }

    #[test]
    fn center_pixel_averages_valid_neighbours() {
        let x = grid(&[1., 2., 3., 4., 5., 6., 7., 8., 9.], 3, 3);
        let o = grid(&[1., 0., 1., 0., 1., 0., 1., 0., 1.], 3, 3);
        let input = MaskedFeature::new(x, o).unwrap();
        let out = sparse_conv2d_eval(
            &input,
            &Tensor::full(Shape::new(1, 1, 3, 3), 1.0),
            &Tensor::zeros(Shape::new(1, 1, 1, 1)),
            3,
            1e-8,
        )
        .unwrap();
        assert!((out.features.at(0, 0, 1, 1) - 5.0).abs() < 1e-6);
    }

    #[test]
    fn empty_validity_emits_bias() {
        let x = Tensor::from_fn(Shape::new(1, 1, 4, 5), |i| i as f64 + 1.0);
        let o = Tensor::zeros(Shape::new(1, 1, 4, 5));
        let out = sparse_conv2d_eval(
            &MaskedFeature::new(x, o).unwrap(),
            &Tensor::full(Shape::new(2, 1, 3, 3), 0.3),
            &Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![0.25, -1.0]).unwrap(),
            3,
            1e-8,
        )
        .unwrap();
        for y in 0..4 {
            for x in 0..5 {
                assert_eq!(out.features.at(0, 0, y, x), 0.25);
                assert_eq!(out.features.at(0, 1, y, x), -1.0);
            }
        }
        assert!(out.validity.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn full_validity_is_windowed_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (h, w, k) = (6, 7, 5);
        let x = Tensor::from_fn(Shape::new(1, 1, h, w), |_| rng.gen_range(-3.0..3.0));
        let o = Tensor::full(Shape::new(1, 1, h, w), 1.0);
        let out = sparse_conv2d_eval(
            &MaskedFeature::new(x.clone(), o).unwrap(),
            &Tensor::full(Shape::new(1, 1, k, k), 1.0),
            &Tensor::zeros(Shape::new(1, 1, 1, 1)),
            k,
            1e-8,
        )
        .unwrap();
        let r = (k / 2) as isize;
        for y in 0..h as isize {
            for xx in 0..w as isize {
                let mut sum = 0.0;
                let mut cnt = 0.0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (yy, xq) = (y + dy, xx + dx);
                        if yy >= 0 && xq >= 0 && yy < h as isize && xq < w as isize {
                            sum += x.at(0, 0, yy as usize, xq as usize);
                            cnt += 1.0;
                        }
                    }
                }
                let got = out.features.at(0, 0, y as usize, xx as usize);
                assert!((got - sum / (cnt + 1e-8)).abs() < 1e-12);
                assert!((got - sum / cnt).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn invalid_pixels_do_not_affect_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let s = Shape::new(2, 3, 8, 9);
        let o = Tensor::from_fn(Shape::new(2, 1, 8, 9), |_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 });
        let x = Tensor::from_fn(s, |_| rng.gen_range(-2.0..2.0));
        let mut garbage = x.clone();
        for n in 0..2 {
            for c in 0..3 {
                for y in 0..8 {
                    for xx in 0..9 {
                        if o.at(n, 0, y, xx) == 0.0 {
                            garbage.set(n, c, y, xx, rng.gen_range(-1e6..1e6));
                        }
                    }
                }
            }
        }
        let kernel = Tensor::from_fn(Shape::new(4, 3, 5, 5), |_| rng.gen_range(-1.0..1.0));
        let bias = Tensor::from_fn(Shape::new(1, 4, 1, 1), |_| rng.gen_range(-1.0..1.0));
        let a = sparse_conv2d_eval(&MaskedFeature::new(x, o.clone()).unwrap(), &kernel, &bias, 5, 1e-8).unwrap();
        let b = sparse_conv2d_eval(&MaskedFeature::new(garbage, o).unwrap(), &kernel, &bias, 5, 1e-8).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_eps_and_even_kernel() {
        let f = MaskedFeature::new(
            Tensor::zeros(Shape::new(1, 1, 4, 4)),
            Tensor::full(Shape::new(1, 1, 4, 4), 1.0),
        )
        .unwrap();
        let b = Tensor::zeros(Shape::new(1, 1, 1, 1));
        let k3 = Tensor::zeros(Shape::new(1, 1, 3, 3));
        let k4 = Tensor::zeros(Shape::new(1, 1, 4, 4));
        assert!(sparse_conv2d_eval(&f, &k3, &b, 3, 0.0).is_err());
        assert!(sparse_conv2d_eval(&f, &k3, &b, 3, -1.0).is_err());
        assert!(sparse_conv2d_eval(&f, &k4, &b, 4, 1e-8).is_err());
    }

    #[test]
    fn validity_is_window_max_pool() {
        let mut o = Tensor::zeros(Shape::new(1, 1, 9, 9));
        o.set(0, 0, 4, 4, 1.0);
        let f = MaskedFeature::new(Tensor::zeros(o.shape()), o).unwrap();
        let out = sparse_conv2d_eval(
            &f,
            &Tensor::zeros(Shape::new(1, 1, 3, 3)),
            &Tensor::zeros(Shape::new(1, 1, 1, 1)),
            3,
            1e-8,
        )
        .unwrap();
        for y in 0..9 {
            for x in 0..9 {
                let expect = (3..=5).contains(&y) && (3..=5).contains(&x);
                assert_eq!(out.validity.at(0, 0, y, x) == 1.0, expect);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences_and_vanish_on_invalid() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let o = Tensor::from_fn(Shape::new(1, 1, 6, 6), |_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 });
        let x = Tensor::from_fn(Shape::new(1, 2, 6, 6), |_| rng.gen_range(-2.0..2.0));
        let w = Tensor::from_fn(Shape::new(3, 2, 3, 3), |_| rng.gen_range(-2.0..2.0));
        let b = Tensor::from_fn(Shape::new(1, 3, 1, 1), |_| rng.gen_range(-2.0..2.0));
        let proj = Tensor::from_fn(Shape::new(1, 3, 6, 6), |_| rng.gen_range(-2.0..2.0));
        let loss = |x: &Tensor, w: &Tensor, b: &Tensor| -> f64 {
            let out = sparse_conv2d_eval(&MaskedFeature::new(x.clone(), o.clone()).unwrap(), w, b, 3, 1e-8).unwrap();
            out.features.data().iter().zip(proj.data()).map(|(a, p)| a * p).sum()
        };
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.param(x.clone()), g.param(w.clone()), g.param(b.clone()));
        let (out, _) = sparse_conv2d(&mut g, xv, &o, wv, bv, 1e-8).unwrap();
        let pv = g.constant(proj.clone());
        let prod = g.mul(out, pv).unwrap();
        let l = g.sum(prod);
        g.backward(l).unwrap();

        let nx = finite_diff_gradient(|t| Ok(loss(t, &w, &b)), &x, 1e-5).unwrap();
        let nw = finite_diff_gradient(|t| Ok(loss(&x, t, &b)), &w, 1e-5).unwrap();
        let nb = finite_diff_gradient(|t| Ok(loss(&x, &w, t)), &b, 1e-5).unwrap();
        assert!(relative_error(g.grad(xv).unwrap(), &nx) < 1e-4);
        assert!(relative_error(g.grad(wv).unwrap(), &nw) < 1e-4);
        assert!(relative_error(g.grad(bv).unwrap(), &nb) < 1e-4);
        let gx = g.grad(xv).unwrap();
        for c in 0..2 {
            for y in 0..6 {
                for xx in 0..6 {
                    if o.at(0, 0, y, xx) == 0.0 {
                        assert_eq!(gx.at(0, c, y, xx), 0.0);
                    }
                }
            }
        }
    }
}
