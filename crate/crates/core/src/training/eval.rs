//! Stochastic rollout evaluation against ground truth and the persistence baseline.

use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::rollout::{Forecaster, Rollout};
use crate::data::Sequence;
use crate::error::{Error, Result};
use crate::frame::SparseDepthFrame;
use crate::geometry::{backproject, chamfer, CameraIntrinsics};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub warmup_len: usize,
    pub predict_len: usize,
    /// Rollouts drawn per sequence.
    pub samples: usize,
    pub seed: u64,
    /// Worker threads; results do not depend on this.
    pub jobs: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            warmup_len: 15,
            predict_len: 15,
            samples: 20,
            seed: 0,
            jobs: 1,
        }
    }
}

/// Squared and absolute error sums over a pixel set.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ErrorSums {
    pub count: usize,
    pub sq: f64,
    pub abs: f64,
}

impl ErrorSums {
    pub fn rmse(&self) -> Option<f64> {
        (self.count > 0).then(|| (self.sq / self.count as f64).sqrt())
    }

    pub fn mae(&self) -> Option<f64> {
        (self.count > 0).then(|| self.abs / self.count as f64)
    }
}

/// Errors of `pred` at pixels valid in both `truth` and `reference`.
///
/// Restricting to the reference's valid pixels scores a model and the
/// copy-last-frame baseline on the same pixel set.
pub fn masked_errors(pred: &[f64], truth: &SparseDepthFrame, reference: &SparseDepthFrame) -> ErrorSums {
    let mut e = ErrorSums::default();
    for i in 0..pred.len() {
        if truth.mask()[i] && reference.mask()[i] {
            let d = pred[i] - truth.depth()[i];
            e.count += 1;
            e.sq += d * d;
            e.abs += d.abs();
        }
    }
    e
}

/// Metrics of one predicted frame of one rollout.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameMetrics {
    pub rmse: Option<f64>,
    pub mae: Option<f64>,
    /// None when the composed prediction has no valid pixel.
    pub cd: Option<f64>,
    pub valid_count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceEval {
    pub id: String,
    /// Indexed `[sample][frame]`.
    pub samples: Vec<Vec<FrameMetrics>>,
    pub baseline_rmse: Vec<Option<f64>>,
    pub baseline_mae: Vec<Option<f64>>,
    pub warmup_density: f64,
}

/// Per predicted frame summary; `frame_index` counts from 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EvalRow {
    pub frame_index: usize,
    pub rmse_mean: f64,
    pub rmse_ci95: f64,
    pub mae_mean: f64,
    pub cd_mean: f64,
    pub baseline_rmse: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub sequences: Vec<SequenceEval>,
}

/// Mean and 95% half-width (1.96 standard errors) of finite values.
pub fn mean_ci95(values: &[f64]) -> (f64, f64) {
    let v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * (var / n).sqrt())
}

fn frame_metrics(
    pred: &super::rollout::PredictedFrame,
    truth: &SparseDepthFrame,
    reference: &SparseDepthFrame,
    intr: &CameraIntrinsics,
) -> FrameMetrics {
    let e = masked_errors(&pred.dense, truth, reference);
    let truth_cloud = backproject(truth, intr);
    let pred_cloud = backproject(&pred.composed, intr);
    FrameMetrics {
        rmse: e.rmse(),
        mae: e.mae(),
        cd: chamfer(&pred_cloud, &truth_cloud).ok(),
        valid_count: pred.composed.valid_count(),
    }
}

fn evaluate_sequence(
    forecaster: &dyn Forecaster,
    seq: &Sequence,
    index: usize,
    cfg: &EvalConfig,
) -> Result<SequenceEval> {
    let w = cfg.warmup_len;
    let frames = seq.frames();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let rollouts: Vec<Rollout> = forecaster.rollouts(&frames[..w], cfg.predict_len, cfg.samples, &mut rng)?;
    if rollouts.len() != cfg.samples {
        return Err(Error::invalid(
            "evaluate",
            format!("{} rollouts for {} samples", rollouts.len(), cfg.samples),
        ));
    }
    let reference = &frames[w - 1];
    let truth = &frames[w..w + cfg.predict_len];
    let mut samples = Vec::with_capacity(cfg.samples);
    for r in rollouts {
        if r.frames.len() != cfg.predict_len {
            return Err(Error::invalid("evaluate", "rollout is shorter than the horizon"));
        }
        samples.push(
            r.frames
                .iter()
                .zip(truth)
                .map(|(p, t)| frame_metrics(p, t, reference, seq.intrinsics()))
                .collect(),
        );
    }
    let base: Vec<ErrorSums> = truth
        .iter()
        .map(|t| masked_errors(reference.depth(), t, reference))
        .collect();
    Ok(SequenceEval {
        id: seq.id().to_string(),
        samples,
        baseline_rmse: base.iter().map(ErrorSums::rmse).collect(),
        baseline_mae: base.iter().map(ErrorSums::mae).collect(),
        warmup_density: seq.mean_density(0..w),
    })
}

/// Runs `cfg.samples` rollouts per sequence and summarizes each predicted frame.
///
/// Sequences shorter than warmup + predict are skipped with a warning. Each
/// sequence draws from its own random stream, so results are independent of
/// `cfg.jobs`.
pub fn evaluate(forecaster: &dyn Forecaster, sequences: &[Sequence], cfg: &EvalConfig) -> Result<EvalReport> {
    if cfg.samples == 0 || cfg.warmup_len == 0 || cfg.predict_len == 0 {
        return Err(Error::invalid("evaluate", "samples, warmup_len and predict_len must be positive"));
    }
    let usable: Vec<(usize, &Sequence)> = sequences
        .iter()
        .enumerate()
        .filter(|(_, s)| {
            let ok = s.len() >= cfg.warmup_len + cfg.predict_len;
            if !ok {
                log::warn!("skipping sequence {}: {} frames", s.id(), s.len());
            }
            ok
        })
        .collect();
    if usable.is_empty() {
        return Err(Error::EmptyDataset("no sequence is long enough to evaluate".into()));
    }

    let results: Vec<Mutex<Option<Result<SequenceEval>>>> = usable.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let work = || loop {
        let k = next.fetch_add(1, Ordering::Relaxed);
        let Some(&(index, seq)) = usable.get(k) else {
            break;
        };
        let r = evaluate_sequence(forecaster, seq, index, cfg);
        *results[k].lock().expect("unpoisoned") = Some(r);
    };
    let jobs = cfg.jobs.clamp(1, usable.len());
    if jobs == 1 {
        work();
    } else {
        std::thread::scope(|s| {
            for _ in 0..jobs {
                s.spawn(&work);
            }
        });
    }
    let sequences: Vec<SequenceEval> = results
        .into_iter()
        .map(|m| m.into_inner().expect("unpoisoned").expect("every index visited"))
        .collect::<Result<_>>()?;

    let rows = (0..cfg.predict_len)
        .map(|t| {
            let per = |f: fn(&FrameMetrics) -> Option<f64>| -> Vec<f64> {
                sequences
                    .iter()
                    .flat_map(|s| s.samples.iter().map(move |smp| f(&smp[t]).unwrap_or(f64::NAN)))
                    .collect()
            };
            let (rmse_mean, rmse_ci95) = mean_ci95(&per(|m| m.rmse));
            let (mae_mean, _) = mean_ci95(&per(|m| m.mae));
            let (cd_mean, _) = mean_ci95(&per(|m| m.cd));
            let base: Vec<f64> = sequences.iter().map(|s| s.baseline_rmse[t].unwrap_or(f64::NAN)).collect();
            EvalRow {
                frame_index: t + 1,
                rmse_mean,
                rmse_ci95,
                mae_mean,
                cd_mean,
                baseline_rmse: mean_ci95(&base).0,
            }
        })
        .collect();
    Ok(EvalReport { rows, sequences })
}

pub const EVAL_CSV_HEADER: [&str; 6] = [
    "frame_index",
    "rmse_mean",
    "rmse_ci95",
    "mae_mean",
    "cd_mean",
    "baseline_rmse",
];

pub fn write_eval_csv(rows: &[EvalRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(EVAL_CSV_HEADER)?;
    for r in rows {
        w.write_record([
            r.frame_index.to_string(),
            r.rmse_mean.to_string(),
            r.rmse_ci95.to_string(),
            r.mae_mean.to_string(),
            r.cd_mean.to_string(),
            r.baseline_rmse.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::Csv(e.into()))?;
    Ok(())
}
