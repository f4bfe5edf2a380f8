//! Reconstruction and KL objectives for the twin networks.
//!
//! All reconstruction terms are sums over pixels (and batch items), not means.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::frame::FrameBatch;
use crate::model::{GaussVars, GaussianParams};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub reconstruction: f64,
    pub kl: f64,
    pub total: f64,
    pub lambda1: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.reconstruction.is_finite() && self.kl.is_finite() && self.total.is_finite()
    }

    /// Divides every term by `n` (batch normalization of a summed loss).
    pub fn scaled(self, n: f64) -> Self {
        LossBreakdown {
            reconstruction: self.reconstruction / n,
            kl: self.kl / n,
            total: self.total / n,
            lambda1: self.lambda1,
        }
    }
}

/// Reconstruction objective of the Mask network.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskObjective {
    /// Unmasked squared error against the {0,1} ground-truth mask.
    #[default]
    L2,
    /// Binary cross-entropy; kept only for comparison, it drives masks towards emptiness.
    Bce,
}

/// Graph handles for a loss plus its recorded components.
pub struct LossVars {
    pub total: Var,
    pub reconstruction: Var,
    pub kl: Option<Var>,
    pub lambda1: f64,
}

impl LossVars {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        LossBreakdown {
            reconstruction: g.value(self.reconstruction).data()[0],
            kl: self.kl.map_or(0.0, |k| g.value(k).data()[0]),
            total: g.value(self.total).data()[0],
            lambda1: self.lambda1,
        }
    }
}

/// Sum over pixels with lidar depth > 0 of `(dense - lidar)^2`.
pub fn masked_l2(g: &mut Graph, dense: Var, lidar: &FrameBatch) -> Result<Var> {
    let ds = g.shape(dense);
    if ds != lidar.depth.shape() {
        return Err(Error::shape(
            "masked_l2",
            format!("dense {ds} vs lidar {}", lidar.depth.shape()),
        ));
    }
    let target = g.constant(lidar.depth.clone());
    let diff = g.sub(dense, target)?;
    let keep: Vec<bool> = lidar.depth.data().iter().map(|&d| d > 0.0).collect();
    let diff = g.mask_select(diff, Rc::new(keep))?;
    let sq = g.square(diff);
    Ok(g.sum(sq))
}

/// Sum over latent cells of KL(N(mu_phi, sigma_phi^2) || N(mu_psi, sigma_psi^2)).
pub fn kl_gauss(g: &mut Graph, q_phi: GaussVars, q_psi: GaussVars) -> Result<Var> {
    let s = g.shape(q_phi.mu);
    for v in [q_phi.log_sigma, q_psi.mu, q_psi.log_sigma] {
        if g.shape(v) != s {
            return Err(Error::shape("kl_gauss", format!("{} vs {s}", g.shape(v))));
        }
    }
    // log(s_psi / s_phi) + (s_phi^2 + (mu_phi - mu_psi)^2) / (2 s_psi^2) - 1/2
    let log_ratio = g.sub(q_psi.log_sigma, q_phi.log_sigma)?;
    let var_ratio = g.scale(log_ratio, -2.0);
    let var_ratio = g.exp(var_ratio);
    let dmu = g.sub(q_phi.mu, q_psi.mu)?;
    let dmu2 = g.square(dmu);
    let inv_var = g.scale(q_psi.log_sigma, -2.0);
    let inv_var = g.exp(inv_var);
    let mean_term = g.mul(dmu2, inv_var)?;
    let spread = g.add(var_ratio, mean_term)?;
    let spread = g.scale(spread, 0.5);
    let cell = g.add(log_ratio, spread)?;
    let total = g.sum(cell);
    Ok(g.offset(total, -0.5 * s.numel() as f64))
}

fn combine(
    g: &mut Graph,
    reconstruction: Var,
    kl: Option<Var>,
    lambda1: f64,
) -> LossVars {
    let total = match kl {
        Some(k) => {
            let weighted = g.scale(k, lambda1);
            g.add(reconstruction, weighted).expect("scalars")
        }
        None => reconstruction,
    };
    LossVars {
        total,
        reconstruction,
        kl,
        lambda1,
    }
}

/// `masked_l2 + lambda1 * kl_gauss`.
pub fn depth_loss(
    g: &mut Graph,
    dense: Var,
    lidar: &FrameBatch,
    q_phi: GaussVars,
    q_psi: GaussVars,
    lambda1: f64,
) -> Result<LossVars> {
    let rec = masked_l2(g, dense, lidar)?;
    let kl = kl_gauss(g, q_phi, q_psi)?;
    Ok(combine(g, rec, Some(kl), lambda1))
}

/// Full-image mask regression plus (optionally) the weighted KL term.
#[allow(clippy::too_many_arguments)]
pub fn mask_loss(
    g: &mut Graph,
    pred_mask: Var,
    gt_mask: &Tensor,
    q_phi: GaussVars,
    q_psi: GaussVars,
    lambda1: f64,
    include_kl: bool,
    objective: MaskObjective,
) -> Result<LossVars> {
    let ps = g.shape(pred_mask);
    if ps != gt_mask.shape() {
        return Err(Error::shape(
            "mask_loss",
            format!("prediction {ps} vs ground truth {}", gt_mask.shape()),
        ));
    }
    if gt_mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::invalid("mask_loss", "ground-truth mask must be 0 or 1"));
    }
    let target = g.constant(gt_mask.clone());
    let rec = match objective {
        MaskObjective::L2 => {
            let diff = g.sub(pred_mask, target)?;
            let sq = g.square(diff);
            g.sum(sq)
        }
        MaskObjective::Bce => {
            const FLOOR: f64 = 1e-12;
            // -(y ln p + (1 - y) ln(1 - p))
            let lp = g.offset(pred_mask, FLOOR);
            let lp = g.activation(lp, Activation::Ln);
            let pos = g.mul(target, lp)?;
            let one_minus_p = g.scale(pred_mask, -1.0);
            let one_minus_p = g.offset(one_minus_p, 1.0 + FLOOR);
            let lq = g.activation(one_minus_p, Activation::Ln);
            let inv_target = g.constant(gt_mask.map(|v| 1.0 - v));
            let neg = g.mul(inv_target, lq)?;
            let ll = g.add(pos, neg)?;
            let s = g.sum(ll);
            g.scale(s, -1.0)
        }
    };
    let kl = if include_kl {
        Some(kl_gauss(g, q_phi, q_psi)?)
    } else {
        None
    };
    Ok(combine(g, rec, kl, lambda1))
}

/// Value-level Gaussian KL.
pub fn kl_gauss_value(q_phi: &GaussianParams, q_psi: &GaussianParams) -> Result<f64> {
    let mut g = Graph::new();
    let a = q_phi.enter(&mut g);
    let b = q_psi.enter(&mut g);
    let k = kl_gauss(&mut g, a, b)?;
    Ok(g.value(k).data()[0])
}

/// Value-level masked squared error of a dense (n, 1, h, w) map.
pub fn masked_l2_value(dense: &Tensor, lidar: &FrameBatch) -> Result<f64> {
    let mut g = Graph::new();
    let d = g.constant(dense.clone());
    let l = masked_l2(&mut g, d, lidar)?;
    Ok(g.value(l).data()[0])
}
