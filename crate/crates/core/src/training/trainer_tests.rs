use super::*;
use crate::data::{synth_dataset, SynthConfig};
use crate::model::ModelConfig;

fn tiny() -> ModelConfig {
    ModelConfig {
        height: 16,
        width: 32,
        sparse_channels: vec![3, 3, 3],
        sparse_kernels: vec![5, 3, 3],
        trunk_channels: vec![4, 4],
        blocks_per_stage: 1,
        norm_groups: 2,
        encoding_channels: 4,
        latent_channels: 2,
        lstm_hidden: 3,
        decoder_channels: vec![4, 4, 2],
        ..ModelConfig::default()
    }
}

fn sequences(n: usize, seq_len: usize) -> Vec<Sequence> {
    let cfg = SynthConfig {
        height: 16,
        width: 32,
        scanlines: 8,
        seq_len,
        seed: 3,
        ..SynthConfig::default()
    };
    synth_dataset(&cfg, n, 0).unwrap().0.into_iter().map(|s| s.sequence).collect()
}

fn learner(kind: NetKind, lr: f64) -> Learner {
    let cfg = AdamConfig { lr, ..AdamConfig::default() };
    Learner::new(VrnnModel::new(kind, tiny(), 7).unwrap(), cfg)
}

fn config(epochs: usize, lr: f64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 2,
        warmup_len: 3,
        predict_len: 2,
        optimizer: AdamConfig { lr, ..AdamConfig::default() },
        ..TrainConfig::default()
    }
}

fn no_callback() -> impl FnMut(&EpochRecord) {
    |_| {}
}

#[test]
fn zero_learning_rate_leaves_weights_bit_identical() {
    let seqs = sequences(3, 4);
    let mut l = learner(NetKind::Depth, 0.0);
    let before = l.model.params().tensors().to_vec();
    let r = train_next_frame(&mut l, &seqs, &[], &config(1, 0.0), &TrainOutputs::default(), &mut no_callback()).unwrap();
    assert_eq!(l.model.params().tensors(), &before[..]);
    // Two batches (2 + 1 sequences) of three steps each.
    assert_eq!(r.history.len(), 6);
    assert!(r.history.iter().all(|h| h.loss.is_finite() && h.loss.total > 0.0));
}

#[test]
fn zero_epochs_is_a_dry_run() {
    let seqs = sequences(2, 4);
    let mut l = learner(NetKind::Mask, 1e-3);
    let before = l.model.params().tensors().to_vec();
    let r = train_next_frame(&mut l, &seqs, &[], &config(0, 1e-3), &TrainOutputs::default(), &mut no_callback()).unwrap();
    assert!(r.history.is_empty() && r.epochs.is_empty() && r.best_epoch.is_none());
    assert_eq!(l.model.params().tensors(), &before[..]);
    let mut csv = Vec::new();
    r.write_csv(NetKind::Mask, &mut csv).unwrap();
    assert_eq!(String::from_utf8(csv).unwrap(), "step,recon,kl,total,lr\n");
}

#[test]
fn training_is_deterministic_and_reduces_loss() {
    let seqs = sequences(2, 5);
    let run = || {
        let mut l = learner(NetKind::Depth, 3e-3);
        let r = train_next_frame(&mut l, &seqs, &seqs, &config(4, 3e-3), &TrainOutputs::default(), &mut no_callback())
            .unwrap();
        (l, r)
    };
    let (a, ra) = run();
    let (b, rb) = run();
    assert_eq!(a.model.params().tensors(), b.model.params().tensors());
    assert_eq!(ra.history, rb.history);
    assert_eq!(ra.epochs.len(), 4);
    let first = ra.epochs[0].train_loss;
    let last = ra.epochs[3].train_loss;
    assert!(last < first, "loss {first} -> {last}");
}

#[test]
fn truncated_history_gives_identical_gradients() {
    let seqs = sequences(2, 5);
    let refs: Vec<&Sequence> = seqs.iter().collect();
    let settings = LossSettings::from(&config(1, 0.0));
    let mut taped = learner(NetKind::Depth, 0.0);
    let plain = taped.model.clone();

    // Earlier frames once with a full tape, once with no tape at all.
    let mut rng_a = ChaCha8Rng::seed_from_u64(5);
    let mut rng_b = ChaCha8Rng::seed_from_u64(5);
    let mut sa = taped.model.initial_state(2);
    let mut sb = plain.initial_state(2);
    for t in 1..4 {
        let prev = frame_batch(&refs, t - 1).unwrap();
        let target = frame_batch(&refs, t).unwrap();
        sa = tbptt_step(&mut taped, &prev, &target, &sa, &mut rng_a, &settings).unwrap().state;
        sb = plain
            .next_frame(&prev, Some(&target), &sb, &mut rng_b, Mode::Train, StepOptions::default())
            .unwrap()
            .state;
    }
    assert_eq!(sa, sb);

    let grads = |state: &VrnnState, rng: &mut ChaCha8Rng| {
        let prev = frame_batch(&refs, 3).unwrap();
        let target = frame_batch(&refs, 4).unwrap();
        let mut g = Graph::new();
        let p = plain.bind(&mut g, true);
        let out = plain
            .step_vars(&mut g, &p, &prev, Some(&target), state, rng, Mode::Train, StepOptions::default())
            .unwrap();
        let l = depth_loss(&mut g, out.prediction, &target, out.posterior.unwrap(), out.prior, 1e-4).unwrap();
        g.backward(l.total).unwrap();
        p.gradients(&mut g)
    };
    let ga = grads(&sa, &mut rng_a);
    let gb = grads(&sb, &mut rng_b);
    assert_eq!(ga, gb);
    assert!(ga.iter().any(|t| t.data().iter().any(|&v| v != 0.0)));
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let seqs = sequences(3, 4);
    let dir = tempfile::tempdir().unwrap();
    let outputs = TrainOutputs {
        dir: Some(dir.path().to_path_buf()),
        start_epoch: 0,
        best_score: None,
    };

    let mut full = learner(NetKind::Depth, 1e-3);
    train_next_frame(&mut full, &seqs, &[], &config(2, 1e-3), &TrainOutputs::default(), &mut no_callback()).unwrap();

    let mut first = learner(NetKind::Depth, 1e-3);
    train_next_frame(&mut first, &seqs, &[], &config(1, 1e-3), &outputs, &mut no_callback()).unwrap();
    let (mut resumed, done) = Learner::resume(dir.path(), NetKind::Depth).unwrap();
    assert_eq!(done, 1);
    let outputs = TrainOutputs { start_epoch: done, ..outputs };
    let r = train_next_frame(&mut resumed, &seqs, &[], &config(2, 1e-3), &outputs, &mut no_callback()).unwrap();
    assert_eq!(r.epochs.len(), 1);
    assert_eq!(resumed.model.params().tensors(), full.model.params().tensors());
    assert_eq!(resumed.optimizer, full.optimizer);
    assert!(Learner::resume(dir.path(), NetKind::Mask).is_err());
}

#[test]
fn best_checkpoint_tracks_validation() {
    let seqs = sequences(2, 4);
    let dir = tempfile::tempdir().unwrap();
    let outputs = TrainOutputs {
        dir: Some(dir.path().to_path_buf()),
        start_epoch: 0,
        best_score: None,
    };
    let mut l = learner(NetKind::Mask, 1e-3);
    let mut seen = Vec::new();
    let r = train_next_frame(&mut l, &seqs, &seqs, &config(3, 1e-3), &outputs, &mut |e| seen.push(e.val_score)).unwrap();
    assert_eq!(seen.len(), 3);
    let best = r.best_epoch.unwrap();
    let min = seen.iter().copied().fold(f64::INFINITY, f64::min);
    assert_eq!(seen[best], min);
    for tag in ["best", "last"] {
        assert!(checkpoint_path(dir.path(), NetKind::Mask, tag).exists());
    }
    assert!(optimizer_path(dir.path(), NetKind::Mask).exists());
}

#[test]
fn non_finite_loss_aborts_and_dumps_inputs() {
    let seqs = sequences(2, 4);
    let dir = tempfile::tempdir().unwrap();
    let outputs = TrainOutputs {
        dir: Some(dir.path().to_path_buf()),
        start_epoch: 0,
        best_score: None,
    };
    let mut l = learner(NetKind::Depth, 1e-3);
    let id = l.model.params().find("dec.head.out.bias").unwrap();
    l.model.params_mut().get_mut(id).data_mut()[0] = f64::NAN;
    let before = l.model.params().tensors().to_vec();
    let err = train_next_frame(&mut l, &seqs, &[], &config(1, 1e-3), &outputs, &mut no_callback()).unwrap_err();
    assert!(matches!(err, Error::NonFinite { step: 1, .. }), "{err}");
    let dump = dir.path().join("nonfinite");
    assert!(dump.join("prev_00.png").exists() && dump.join("target_01.png").exists());
    assert!(dump.join("error.txt").exists());
    assert_eq!(l.optimizer.steps(), 0);
    assert_eq!(l.model.params().tensors().len(), before.len());
}

#[test]
fn joint_phase_updates_both_networks_on_predicted_frames() {
    let seqs = sequences(3, 6);
    let cfg = TrainConfig {
        phase: Phase::JointAutoregressive,
        ..config(1, 1e-3)
    };
    let mut d = learner(NetKind::Depth, 1e-3);
    let mut m = learner(NetKind::Mask, 1e-3);
    let (d0, m0) = (d.model.clone(), m.model.clone());
    let r = train_joint_autoregressive(&mut d, &mut m, &seqs, &seqs, &cfg, &TrainOutputs::default(), &mut no_callback())
        .unwrap();
    // Two batches, predict_len steps each, one record per network.
    assert_eq!(r.history.len(), 2 * 2 * 2);
    assert_eq!(d.optimizer.steps(), 4);
    assert_eq!(m.optimizer.steps(), 4);
    assert_ne!(d.model.params().tensors(), d0.params().tensors());
    assert_ne!(m.model.params().tensors(), m0.params().tensors());
    assert!(r.epochs[0].val_score.is_finite());

    let strict = TrainConfig {
        strict_teacher_forcing: true,
        ..cfg.clone()
    };
    let (mut d2, mut m2) = (learner(NetKind::Depth, 1e-3), learner(NetKind::Mask, 1e-3));
    let rs = train_joint_autoregressive(&mut d2, &mut m2, &seqs, &[], &strict, &TrainOutputs::default(), &mut no_callback())
        .unwrap();
    assert_eq!(rs.history.len(), r.history.len());
    // The first predicted step sees the same input either way.
    assert_eq!(rs.history[0], r.history[0]);
    assert_ne!(rs.history, r.history);

    assert!(train_joint_autoregressive(&mut m2, &mut d2, &seqs, &[], &cfg, &TrainOutputs::default(), &mut no_callback())
        .is_err());
}

#[test]
fn joint_phase_with_zero_lr_keeps_weights() {
    let seqs = sequences(2, 6);
    let cfg = TrainConfig {
        phase: Phase::JointAutoregressive,
        ..config(1, 0.0)
    };
    let mut d = learner(NetKind::Depth, 0.0);
    let mut m = learner(NetKind::Mask, 0.0);
    let (d0, m0) = (d.model.clone(), m.model.clone());
    train_joint_autoregressive(&mut d, &mut m, &seqs, &[], &cfg, &TrainOutputs::default(), &mut no_callback()).unwrap();
    assert_eq!(d.model.params().tensors(), d0.params().tensors());
    assert_eq!(m.model.params().tensors(), m0.params().tensors());
}

#[test]
fn invalid_configs_are_rejected() {
    let seqs = sequences(1, 4);
    let mut l = learner(NetKind::Depth, 1e-3);
    for bad in [
        TrainConfig { batch_size: 0, ..config(1, 1e-3) },
        TrainConfig { lambda1: -1.0, ..config(1, 1e-3) },
        TrainConfig { mask_threshold: 1.0, ..config(1, 1e-3) },
        config(1, -1.0),
    ] {
        assert!(matches!(
            train_next_frame(&mut l, &seqs, &[], &bad, &TrainOutputs::default(), &mut no_callback()),
            Err(Error::Config(_))
        ));
    }
    assert!(matches!(
        train_next_frame(&mut l, &[], &[], &config(1, 1e-3), &TrainOutputs::default(), &mut no_callback()),
        Err(Error::EmptyDataset(_))
    ));
    assert!(config(1, 1e-3).check_sequence_length(5).is_ok());
    assert!(config(1, 1e-3).check_sequence_length(4).is_err());
}

#[test]
fn next_frame_scores_use_shared_valid_pixels() {
    let seqs = sequences(2, 4);
    let l = learner(NetKind::Depth, 0.0);
    let s = next_frame_scores(&l.model, &seqs, 2, 0).unwrap();
    assert_eq!(s.model_rmse.len(), 6);
    assert_eq!(s.kl.len(), 3);
    // Independent persistence oracle.
    let mut expect = Vec::new();
    for seq in &seqs {
        for t in 1..4 {
            let (p, f) = (&seq.frames()[t - 1], &seq.frames()[t]);
            let (mut sq, mut n) = (0.0, 0usize);
            for i in 0..p.depth().len() {
                if p.mask()[i] && f.mask()[i] {
                    sq += (p.depth()[i] - f.depth()[i]).powi(2);
                    n += 1;
                }
            }
            expect.push((sq / n as f64).sqrt());
        }
    }
    let mut got = s.baseline_rmse.clone();
    got.sort_by(f64::total_cmp);
    expect.sort_by(f64::total_cmp);
    for (a, b) in got.iter().zip(&expect) {
        assert!((a - b).abs() < 1e-12);
    }
}
