//! Autoregressive rollouts of the twin networks.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::frame::{compose, FrameBatch, SparseDepthFrame};
use crate::model::{Mode, NetKind, StepOptions, VrnnModel};

/// One predicted step.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictedFrame {
    /// Dense depth in meters, row-major.
    pub dense: Vec<f64>,
    /// Per-pixel probability of a valid return.
    pub mask_prob: Vec<f64>,
    pub composed: SparseDepthFrame,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub frames: Vec<PredictedFrame>,
}

/// Anything that continues a warmup sequence with sampled futures.
pub trait Forecaster: Sync {
    /// `samples` independent continuations of `horizon` frames after `warmup`.
    fn rollouts(
        &self,
        warmup: &[SparseDepthFrame],
        horizon: usize,
        samples: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Rollout>>;
}

/// The Depth and Mask networks run side by side.
#[derive(Clone, Copy)]
pub struct TwinModel<'a> {
    pub depth: &'a VrnnModel,
    pub mask: &'a VrnnModel,
    pub threshold: f64,
    /// Forces sigma to zero (z = mu) in warmup and prediction.
    pub zero_sigma: bool,
}

impl<'a> TwinModel<'a> {
    pub fn new(depth: &'a VrnnModel, mask: &'a VrnnModel, threshold: f64) -> Result<Self> {
        if depth.kind() != NetKind::Depth || mask.kind() != NetKind::Mask {
            return Err(Error::invalid(
                "twin model",
                format!("got {:?} and {:?} networks", depth.kind(), mask.kind()),
            ));
        }
        if depth.config().height != mask.config().height || depth.config().width != mask.config().width {
            return Err(Error::invalid("twin model", "networks disagree on resolution"));
        }
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::invalid("twin model", "threshold must lie in (0, 1)"));
        }
        Ok(TwinModel {
            depth,
            mask,
            threshold,
            zero_sigma: false,
        })
    }
}

/// Composes each batch item of a dense and a mask prediction.
pub(crate) fn compose_batch(
    dense: &crate::autodiff::Tensor,
    mask: &crate::autodiff::Tensor,
    threshold: f64,
) -> Result<Vec<PredictedFrame>> {
    let s = dense.shape();
    (0..s.n)
        .map(|n| {
            let d = dense.batch_item(n);
            let m = mask.batch_item(n);
            Ok(PredictedFrame {
                dense: d.to_vec(),
                mask_prob: m.to_vec(),
                composed: compose(d, m, s.h, s.w, threshold)?,
            })
        })
        .collect()
}

impl Forecaster for TwinModel<'_> {
    fn rollouts(
        &self,
        warmup: &[SparseDepthFrame],
        horizon: usize,
        samples: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Rollout>> {
        if warmup.is_empty() || samples == 0 {
            return Err(Error::invalid("rollout", "need warmup frames and at least one sample"));
        }
        let rep = |f: &SparseDepthFrame| FrameBatch::from_frames(std::iter::repeat_n(f, samples));
        let mut sd = self.depth.initial_state(samples);
        let mut sm = self.mask.initial_state(samples);
        let opts = StepOptions {
            zero_sigma: self.zero_sigma,
        };
        for t in 1..warmup.len() {
            let prev = rep(&warmup[t - 1])?;
            let target = rep(&warmup[t])?;
            sd = self.depth.next_frame(&prev, Some(&target), &sd, rng, Mode::Train, opts)?.state;
            sm = self.mask.next_frame(&prev, Some(&target), &sm, rng, Mode::Train, opts)?.state;
        }
        let mut input = rep(warmup.last().expect("non-empty"))?;
        let mut out = vec![Rollout { frames: Vec::with_capacity(horizon) }; samples];
        for _ in 0..horizon {
            let d = self.depth.next_frame(&input, None, &sd, rng, Mode::Infer, opts)?;
            let m = self.mask.next_frame(&input, None, &sm, rng, Mode::Infer, opts)?;
            sd = d.state;
            sm = m.state;
            let frames = compose_batch(&d.prediction, &m.prediction, self.threshold)?;
            input = FrameBatch::from_frames(frames.iter().map(|f| &f.composed))?;
            for (r, f) in out.iter_mut().zip(frames) {
                r.frames.push(f);
            }
        }
        Ok(out)
    }
}
