//! Truncated-BPTT training for both phases.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::eval::{masked_errors, mean_ci95};
use super::optimizer::{Adam, AdamConfig};
use super::rollout::{compose_batch, TwinModel};
use crate::autodiff::{Graph, Tensor};
use crate::data::{save_depth_png, Sequence};
use crate::error::{Error, Result};
use crate::frame::{FrameBatch, SparseDepthFrame};
use crate::losses::{depth_loss, mask_loss, LossBreakdown, MaskObjective};
use crate::model::{load_checkpoint, save_checkpoint, Mode, NetKind, StepOptions, VrnnModel, VrnnState};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Each network learns one-step prediction from ground-truth inputs.
    #[default]
    NextFrame,
    /// Both networks consume their own composed predictions.
    JointAutoregressive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub phase: Phase,
    pub warmup_len: usize,
    pub predict_len: usize,
    pub batch_size: usize,
    /// Weight of the KL term.
    pub lambda1: f64,
    pub optimizer: AdamConfig,
    pub epochs: usize,
    pub seed: u64,
    /// Write the latest checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
    /// Include the KL term in the Mask network objective.
    pub mask_kl: bool,
    pub mask_objective: MaskObjective,
    pub mask_threshold: f64,
    /// Feed ground-truth frames instead of composed predictions in the joint phase.
    pub strict_teacher_forcing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            phase: Phase::NextFrame,
            warmup_len: 15,
            predict_len: 15,
            batch_size: 8,
            lambda1: 1e-4,
            optimizer: AdamConfig::default(),
            epochs: 30,
            seed: 0,
            checkpoint_every: 1,
            mask_kl: true,
            mask_objective: MaskObjective::L2,
            mask_threshold: 0.5,
            strict_teacher_forcing: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train: {m}")));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.warmup_len == 0 || self.predict_len == 0 {
            return bad("warmup_len and predict_len must be positive");
        }
        if !(self.lambda1 >= 0.0 && self.lambda1.is_finite()) {
            return bad("lambda1 must be finite and non-negative");
        }
        if !(self.mask_threshold > 0.0 && self.mask_threshold < 1.0) {
            return bad("mask_threshold must lie in (0, 1)");
        }
        self.optimizer.validate()
    }

    /// Checks `warmup_len + predict_len <= seq_len`.
    pub fn check_sequence_length(&self, seq_len: usize) -> Result<()> {
        if self.warmup_len + self.predict_len > seq_len {
            return Err(Error::Config(format!(
                "warmup {} + predict {} exceeds sequence length {seq_len}",
                self.warmup_len, self.predict_len
            )));
        }
        Ok(())
    }
}

/// A network with its optimizer state.
#[derive(Clone, Debug)]
pub struct Learner {
    pub model: VrnnModel,
    pub optimizer: Adam,
}

impl Learner {
    pub fn new(model: VrnnModel, config: AdamConfig) -> Self {
        let optimizer = Adam::new(config, model.params().tensors());
        Learner { model, optimizer }
    }

    pub fn kind(&self) -> NetKind {
        self.model.kind()
    }

    /// Restores the latest checkpoint and optimizer state written to `dir`.
    ///
    /// Returns the learner and the number of completed epochs.
    pub fn resume(dir: &Path, net: NetKind) -> Result<(Learner, usize)> {
        let (model, meta) = load_checkpoint(&checkpoint_path(dir, net, "last"))?;
        if model.kind() != net {
            return Err(Error::Checkpoint(format!("expected a {} checkpoint", net.as_str())));
        }
        let optimizer = Adam::load(&optimizer_path(dir, net))?;
        if !optimizer.matches(model.params().tensors()) {
            return Err(Error::Checkpoint("optimizer state does not match the checkpoint".into()));
        }
        let epoch = meta
            .get("epoch")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| Error::Checkpoint("checkpoint metadata lacks an epoch".into()))?;
        Ok((Learner { model, optimizer }, epoch as usize))
    }
}

/// Loss settings shared by every step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSettings {
    pub lambda1: f64,
    pub mask_kl: bool,
    pub mask_objective: MaskObjective,
}

impl From<&TrainConfig> for LossSettings {
    fn from(c: &TrainConfig) -> Self {
        LossSettings {
            lambda1: c.lambda1,
            mask_kl: c.mask_kl,
            mask_objective: c.mask_objective,
        }
    }
}

/// Result of one truncated step.
#[derive(Clone, Debug)]
pub struct StepResult {
    /// Loss normalized by batch size.
    pub loss: LossBreakdown,
    /// Recurrent state values; the tape ends here.
    pub state: VrnnState,
    pub prediction: Tensor,
}

/// One train-mode forward pass, backward pass and optimizer update.
///
/// A non-finite loss or gradient aborts before the update is applied.
pub fn tbptt_step(
    learner: &mut Learner,
    prev: &FrameBatch,
    target: &FrameBatch,
    state: &VrnnState,
    rng: &mut ChaCha8Rng,
    settings: &LossSettings,
) -> Result<StepResult> {
    let model = &learner.model;
    let n = prev.len() as f64;
    let mut g = Graph::new();
    let p = model.bind(&mut g, true);
    let out = model.step_vars(&mut g, &p, prev, Some(target), state, rng, Mode::Train, StepOptions::default())?;
    let q = out.posterior.expect("train mode yields a posterior");
    let loss = match model.kind() {
        NetKind::Depth => depth_loss(&mut g, out.prediction, target, q, out.prior, settings.lambda1)?,
        NetKind::Mask => mask_loss(
            &mut g,
            out.prediction,
            &target.validity,
            q,
            out.prior,
            settings.lambda1,
            settings.mask_kl,
            settings.mask_objective,
        )?,
    };
    let breakdown = loss.breakdown(&g).scaled(n);
    let step = learner.optimizer.steps() as usize + 1;
    if !breakdown.is_finite() {
        return Err(Error::NonFinite {
            step,
            detail: format!("{} loss {breakdown:?}", model.kind().as_str()),
        });
    }
    let total = g.scale(loss.total, 1.0 / n);
    g.backward(total)?;
    let grads = p.gradients(&mut g);
    if let Some(i) = grads.iter().position(|t| !t.is_finite()) {
        return Err(Error::NonFinite {
            step,
            detail: format!("gradient of {}", model.params().name(model.params().ids().nth(i).expect("index"))),
        });
    }
    let result = StepResult {
        loss: breakdown,
        state: out.state.values(&g),
        prediction: g.value(out.prediction).clone(),
    };
    drop(g);
    learner.optimizer.update(learner.model.params_mut().tensors_mut(), &grads)?;
    Ok(result)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    /// Optimizer updates applied so far, including this one.
    pub step: usize,
    pub epoch: usize,
    pub net: NetKind,
    pub loss: LossBreakdown,
    pub lr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean batch-normalized total loss per net over the epoch.
    pub train_loss: f64,
    /// Validation score (lower is better); NaN without a validation split.
    pub val_score: f64,
    pub wall_secs: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub history: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub wall_secs: f64,
}

impl TrainReport {
    pub fn history_for(&self, net: NetKind) -> impl Iterator<Item = &StepRecord> {
        self.history.iter().filter(move |r| r.net == net)
    }

    /// Writes `step,recon,kl,total,lr` rows for one network.
    pub fn write_csv(&self, net: NetKind, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "recon", "kl", "total", "lr"])?;
        for r in self.history_for(net) {
            w.write_record([
                r.step.to_string(),
                r.loss.reconstruction.to_string(),
                r.loss.kl.to_string(),
                r.loss.total.to_string(),
                r.lr.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }
}

/// Where checkpoints and forensic dumps go, and where an interrupted run resumes.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    pub dir: Option<PathBuf>,
    /// First epoch to run (epochs before it are considered done).
    pub start_epoch: usize,
    /// Validation score of the existing best checkpoint when resuming.
    pub best_score: Option<f64>,
}

pub fn checkpoint_path(dir: &Path, net: NetKind, tag: &str) -> PathBuf {
    dir.join(format!("{}_{tag}.ckpt", net.as_str()))
}

pub fn optimizer_path(dir: &Path, net: NetKind) -> PathBuf {
    dir.join(format!("{}_last.adam", net.as_str()))
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

fn batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

fn frame_batch(seqs: &[&Sequence], t: usize) -> Result<FrameBatch> {
    FrameBatch::from_frames(seqs.iter().map(|s| &s.frames()[t]))
}

fn dump_nonfinite(dir: Option<&Path>, prev: &FrameBatch, target: &FrameBatch, err: &Error) {
    let Some(dir) = dir else { return };
    let dump = dir.join("nonfinite");
    let write = || -> Result<()> {
        fs::create_dir_all(&dump).map_err(|e| Error::io(&dump, e))?;
        for (name, b) in [("prev", prev), ("target", target)] {
            for (i, f) in b.frames().iter().enumerate() {
                save_depth_png(f, &dump.join(format!("{name}_{i:02}.png")))?;
            }
        }
        let p = dump.join("error.txt");
        fs::write(&p, err.to_string()).map_err(|e| Error::io(&p, e))
    };
    if let Err(e) = write() {
        log::error!("could not write non-finite dump: {e}");
    }
}

fn save_learner(dir: &Path, learner: &Learner, tag: &str, meta: serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_checkpoint(&learner.model, meta, &checkpoint_path(dir, learner.kind(), tag))?;
    if tag == "last" {
        learner.optimizer.save(&optimizer_path(dir, learner.kind()))?;
    }
    Ok(())
}

/// Teacher-forced next-frame scores on a split, one entry per (sequence, frame).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NextFrameScores {
    pub model_rmse: Vec<f64>,
    pub baseline_rmse: Vec<f64>,
    pub model_mae: Vec<f64>,
    /// Mean squared error of mask probabilities (Mask network only).
    pub mask_mse: Vec<f64>,
    /// Mean per-step KL(posterior || prior) per latent sample.
    pub kl: Vec<f64>,
}

impl NextFrameScores {
    pub fn mean_rmse(&self) -> f64 {
        mean_ci95(&self.model_rmse).0
    }

    pub fn mean_baseline_rmse(&self) -> f64 {
        mean_ci95(&self.baseline_rmse).0
    }
}

/// Predicts every frame from its ground-truth predecessor with prior samples.
///
/// Depth errors use pixels valid in both the target and its predecessor, the
/// pixel set on which the copy-last-frame baseline is defined.
pub fn next_frame_scores(model: &VrnnModel, seqs: &[Sequence], batch: usize, seed: u64) -> Result<NextFrameScores> {
    let mut scores = NextFrameScores::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for chunk in seqs.chunks(batch.max(1)) {
        let refs: Vec<&Sequence> = chunk.iter().collect();
        let len = refs.iter().map(|s| s.len()).min().unwrap_or(0);
        let mut state = model.initial_state(refs.len());
        for t in 1..len {
            let prev = frame_batch(&refs, t - 1)?;
            let target = frame_batch(&refs, t)?;
            let out = model.next_frame(&prev, Some(&target), &state, &mut rng, Mode::Infer, StepOptions::default())?;
            if let Some(q) = &out.posterior {
                let kl = crate::losses::kl_gauss_value(q, &out.prior)?;
                scores.kl.push(kl / refs.len() as f64);
            }
            for (i, s) in refs.iter().enumerate() {
                let (p, f) = (&s.frames()[t - 1], &s.frames()[t]);
                let pred = out.prediction.batch_item(i);
                match model.kind() {
                    NetKind::Depth => {
                        let m = masked_errors(pred, f, p);
                        let b = masked_errors(p.depth(), f, p);
                        if let (Some(mr), Some(br), Some(ma)) = (m.rmse(), b.rmse(), m.mae()) {
                            scores.model_rmse.push(mr);
                            scores.baseline_rmse.push(br);
                            scores.model_mae.push(ma);
                        }
                    }
                    NetKind::Mask => {
                        let mse = pred
                            .iter()
                            .zip(f.mask())
                            .map(|(&v, &m)| (v - if m { 1.0 } else { 0.0 }).powi(2))
                            .sum::<f64>()
                            / pred.len() as f64;
                        scores.mask_mse.push(mse);
                    }
                }
            }
            state = out.state;
        }
    }
    Ok(scores)
}

fn validation_score(model: &VrnnModel, val: &[Sequence], cfg: &TrainConfig) -> Result<f64> {
    if val.is_empty() {
        return Ok(f64::NAN);
    }
    let s = next_frame_scores(model, val, cfg.batch_size, cfg.seed ^ 0x5eed)?;
    Ok(match model.kind() {
        NetKind::Depth => s.mean_rmse(),
        NetKind::Mask => mean_ci95(&s.mask_mse).0,
    })
}

fn check_dataset(train: &[Sequence]) -> Result<()> {
    if train.is_empty() {
        return Err(Error::EmptyDataset("training split has no sequences".into()));
    }
    Ok(())
}

fn finish_epoch(
    report: &mut TrainReport,
    record: EpochRecord,
    best: &mut f64,
    learners: &[&Learner],
    outputs: &TrainOutputs,
    cfg: &TrainConfig,
) -> Result<()> {
    let meta = serde_json::json!({
        "phase": cfg.phase,
        "epoch": record.epoch + 1,
        "optimizer_steps": learners.first().map_or(0, |l| l.optimizer.steps()),
        "val_score": if record.val_score.is_finite() { Some(record.val_score) } else { None },
    });
    let improved = !(record.val_score >= *best);
    if improved {
        *best = record.val_score;
        report.best_epoch = Some(record.epoch);
    }
    if let Some(dir) = &outputs.dir {
        let periodic = cfg.checkpoint_every > 0 && (record.epoch + 1) % cfg.checkpoint_every == 0;
        let final_epoch = record.epoch + 1 == cfg.epochs;
        for l in learners {
            if periodic || final_epoch {
                save_learner(dir, l, "last", meta.clone())?;
            }
            if improved {
                save_learner(dir, l, "best", meta.clone())?;
            }
        }
    }
    log::info!(
        "epoch {} train_loss {:.6} val {:.6} ({:.1}s)",
        record.epoch + 1,
        record.train_loss,
        record.val_score,
        record.wall_secs
    );
    report.epochs.push(record);
    Ok(())
}

/// Phase one: the network learns frame t from ground-truth frame t-1.
pub fn train_next_frame(
    learner: &mut Learner,
    train: &[Sequence],
    val: &[Sequence],
    cfg: &TrainConfig,
    outputs: &TrainOutputs,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    check_dataset(train)?;
    learner.optimizer.set_lr(cfg.optimizer.lr);
    let settings = LossSettings::from(cfg);
    let start = Instant::now();
    let mut report = TrainReport::default();
    let mut best = outputs.best_score.unwrap_or(f64::INFINITY);
    for epoch in outputs.start_epoch..cfg.epochs {
        let t0 = Instant::now();
        let mut rng = epoch_rng(cfg.seed, epoch);
        let mut losses = Vec::new();
        for idx in batches(train.len(), cfg.batch_size, &mut rng) {
            let seqs: Vec<&Sequence> = idx.iter().map(|&i| &train[i]).collect();
            let len = seqs.iter().map(|s| s.len()).min().expect("non-empty batch");
            let mut state = learner.model.initial_state(seqs.len());
            for t in 1..len {
                let prev = frame_batch(&seqs, t - 1)?;
                let target = frame_batch(&seqs, t)?;
                let r = match tbptt_step(learner, &prev, &target, &state, &mut rng, &settings) {
                    Ok(r) => r,
                    Err(e) => {
                        dump_nonfinite(outputs.dir.as_deref(), &prev, &target, &e);
                        return Err(e);
                    }
                };
                report.history.push(StepRecord {
                    step: learner.optimizer.steps() as usize,
                    epoch,
                    net: learner.kind(),
                    loss: r.loss,
                    lr: cfg.optimizer.lr,
                });
                losses.push(r.loss.total);
                state = r.state;
            }
        }
        let record = EpochRecord {
            epoch,
            train_loss: mean_ci95(&losses).0,
            val_score: validation_score(&learner.model, val, cfg)?,
            wall_secs: t0.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        finish_epoch(&mut report, record, &mut best, &[learner], outputs, cfg)?;
    }
    report.wall_secs = start.elapsed().as_secs_f64();
    Ok(report)
}

fn composed_inputs(
    depth: &Tensor,
    mask: &Tensor,
    threshold: f64,
) -> Result<(FrameBatch, Vec<SparseDepthFrame>)> {
    let frames: Vec<SparseDepthFrame> = compose_batch(depth, mask, threshold)?
        .into_iter()
        .map(|f| f.composed)
        .collect();
    Ok((FrameBatch::from_frames(&frames)?, frames))
}

/// Mean rollout RMSE over the predicted frames of a split (one sample each).
pub fn rollout_score(depth: &VrnnModel, mask: &VrnnModel, val: &[Sequence], cfg: &TrainConfig) -> Result<f64> {
    if val.is_empty() {
        return Ok(f64::NAN);
    }
    let twin = TwinModel::new(depth, mask, cfg.mask_threshold)?;
    let eval = super::eval::EvalConfig {
        warmup_len: cfg.warmup_len,
        predict_len: cfg.predict_len,
        samples: 1,
        seed: cfg.seed ^ 0x5eed,
        jobs: 1,
    };
    let report = super::eval::evaluate(&twin, val, &eval)?;
    Ok(mean_ci95(&report.rows.iter().map(|r| r.rmse_mean).collect::<Vec<_>>()).0)
}

/// Phase two: warm up on ground truth, then feed composed predictions back
/// in while both losses target ground truth. Losses and updates apply to
/// predicted frames only.
pub fn train_joint_autoregressive(
    depth: &mut Learner,
    mask: &mut Learner,
    train: &[Sequence],
    val: &[Sequence],
    cfg: &TrainConfig,
    outputs: &TrainOutputs,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    check_dataset(train)?;
    TwinModel::new(&depth.model, &mask.model, cfg.mask_threshold)?;
    let span = cfg.warmup_len + cfg.predict_len;
    let usable: Vec<&Sequence> = train
        .iter()
        .filter(|s| {
            let ok = s.len() >= span;
            if !ok {
                log::warn!("skipping sequence {}: {} frames, need {span}", s.id(), s.len());
            }
            ok
        })
        .collect();
    if usable.is_empty() {
        return Err(Error::EmptyDataset(format!("no training sequence has {span} frames")));
    }
    depth.optimizer.set_lr(cfg.optimizer.lr);
    mask.optimizer.set_lr(cfg.optimizer.lr);
    let settings = LossSettings::from(cfg);
    let start = Instant::now();
    let mut report = TrainReport::default();
    let mut best = outputs.best_score.unwrap_or(f64::INFINITY);
    let warm = StepOptions::default();
    for epoch in outputs.start_epoch..cfg.epochs {
        let t0 = Instant::now();
        let mut rng = epoch_rng(cfg.seed, epoch);
        let mut losses = Vec::new();
        for idx in batches(usable.len(), cfg.batch_size, &mut rng) {
            let seqs: Vec<&Sequence> = idx.iter().map(|&i| usable[i]).collect();
            let mut sd = depth.model.initial_state(seqs.len());
            let mut sm = mask.model.initial_state(seqs.len());
            for t in 1..cfg.warmup_len {
                let prev = frame_batch(&seqs, t - 1)?;
                let target = frame_batch(&seqs, t)?;
                sd = depth.model.next_frame(&prev, Some(&target), &sd, &mut rng, Mode::Train, warm)?.state;
                sm = mask.model.next_frame(&prev, Some(&target), &sm, &mut rng, Mode::Train, warm)?.state;
            }
            let mut input = frame_batch(&seqs, cfg.warmup_len - 1)?;
            for t in cfg.warmup_len..span {
                let target = frame_batch(&seqs, t)?;
                let step = |l: &mut Learner, s: &VrnnState, rng: &mut ChaCha8Rng| {
                    tbptt_step(l, &input, &target, s, rng, &settings).inspect_err(|e| {
                        dump_nonfinite(outputs.dir.as_deref(), &input, &target, e);
                    })
                };
                let rd = step(depth, &sd, &mut rng)?;
                let rm = step(mask, &sm, &mut rng)?;
                for (net, loss) in [(NetKind::Depth, rd.loss), (NetKind::Mask, rm.loss)] {
                    report.history.push(StepRecord {
                        step: depth.optimizer.steps() as usize,
                        epoch,
                        net,
                        loss,
                        lr: cfg.optimizer.lr,
                    });
                    losses.push(loss.total);
                }
                input = if cfg.strict_teacher_forcing {
                    target
                } else {
                    composed_inputs(&rd.prediction, &rm.prediction, cfg.mask_threshold)?.0
                };
                sd = rd.state;
                sm = rm.state;
            }
        }
        let record = EpochRecord {
            epoch,
            train_loss: mean_ci95(&losses).0,
            val_score: rollout_score(&depth.model, &mask.model, val, cfg)?,
            wall_secs: t0.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        finish_epoch(&mut report, record, &mut best, &[depth, mask], outputs, cfg)?;
    }
    report.wall_secs = start.elapsed().as_secs_f64();
    Ok(report)
}

#[cfg(test)]
#[path = "trainer_tests.rs"]
mod tests;
