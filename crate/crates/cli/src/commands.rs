//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use sparse_vrnn::data::{frame_file_name, load_depth_png, load_sequences, save_depth_png, synth_dataset, Sequence};
use sparse_vrnn::model::{load_checkpoint, ModelConfig, NetKind, VrnnModel};
use sparse_vrnn::training::{
    checkpoint_path, evaluate, masked_errors, mean_ci95, train_joint_autoregressive, train_next_frame,
    write_eval_csv, EpochRecord, Forecaster, Learner, Phase, TrainOutputs, TrainReport, TwinModel,
};
use sparse_vrnn::SparseDepthFrame;

use crate::config::RunConfig;
use crate::render::{rmse_plot_svg, save_false_color, save_probability_png, write_text};
use crate::{Common, NetChoice, PhaseChoice, UsageError};

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn load_config(common: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.synth.seed = seed;
        cfg.train.seed = seed;
        cfg.eval.seed = seed;
    }
    Ok(cfg)
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn phase_dir_name(phase: Phase) -> &'static str {
    match phase {
        Phase::NextFrame => "next_frame",
        Phase::JointAutoregressive => "joint_autoregressive",
    }
}

pub fn synth(common: &Common) -> anyhow::Result<()> {
    let cfg = load_config(common)?;
    let root = common.out.clone().unwrap_or_else(|| cfg.data.root.clone());
    let (train, val) = synth_dataset(&cfg.synth, cfg.data.n_train, cfg.data.n_val)?;
    let mut drives = Vec::new();
    for (split, seqs) in [("train", &train), ("val", &val)] {
        for s in seqs.iter() {
            let dir = root.join(split).join(s.sequence.id());
            create_dir(&dir)?;
            for (t, f) in s.sequence.frames().iter().enumerate() {
                save_depth_png(f, &dir.join(frame_file_name(t)))?;
            }
            drives.push(json!({
                "split": split,
                "id": s.sequence.id(),
                "frames": s.sequence.len(),
                "density": s.sequence.mean_density(0..s.sequence.len()),
            }));
        }
    }
    let manifest = json!({
        "synth": cfg.synth,
        "n_train": cfg.data.n_train,
        "n_val": cfg.data.n_val,
        "drives": drives,
    });
    write_text(&root.join("manifest.json"), &(serde_json::to_string_pretty(&manifest)? + "\n"))?;
    println!(
        "wrote {} train and {} val sequences of {} frames to {}",
        train.len(),
        val.len(),
        cfg.synth.seq_len,
        root.display()
    );
    Ok(())
}

fn load_split(cfg: &RunConfig, dir: &Path) -> anyhow::Result<Vec<Sequence>> {
    if !dir.is_dir() {
        return Err(usage(format!(
            "dataset split {} does not exist; run `sparse-vrnn synth` or set data.root",
            dir.display()
        )));
    }
    let seqs = load_sequences(dir, cfg.data.window, cfg.data.stride, None)?;
    for s in &seqs {
        if (s.height(), s.width()) != (cfg.model.height, cfg.model.width) {
            return Err(usage(format!(
                "sequence {} is {}x{} but the model expects {}x{}",
                s.id(),
                s.height(),
                s.width(),
                cfg.model.height,
                cfg.model.width
            )));
        }
    }
    Ok(seqs)
}

fn nets(choice: NetChoice) -> Vec<NetKind> {
    match choice {
        NetChoice::Depth => vec![NetKind::Depth],
        NetChoice::Mask => vec![NetKind::Mask],
        NetChoice::Both => vec![NetKind::Depth, NetKind::Mask],
    }
}

fn net_seed(seed: u64, net: NetKind) -> u64 {
    match net {
        NetKind::Depth => seed,
        NetKind::Mask => seed ^ 1,
    }
}

fn check_model_config(model: &VrnnModel, cfg: &ModelConfig, path: &Path) -> anyhow::Result<()> {
    if model.config() != cfg {
        return Err(usage(format!(
            "checkpoint {} was trained with a different [model] configuration",
            path.display()
        )));
    }
    Ok(())
}

fn load_model(path: &Path, net: NetKind, cfg: &ModelConfig) -> anyhow::Result<VrnnModel> {
    if !path.is_file() {
        return Err(usage(format!("checkpoint {} does not exist", path.display())));
    }
    let (model, _) = load_checkpoint(path)?;
    if model.kind() != net {
        return Err(usage(format!("{} holds a {} network", path.display(), model.kind().as_str())));
    }
    check_model_config(&model, cfg, path)?;
    Ok(model)
}

fn best_score(dir: &Path, net: NetKind) -> anyhow::Result<Option<f64>> {
    let path = checkpoint_path(dir, net, "best");
    if !path.is_file() {
        return Ok(None);
    }
    let (_, meta) = load_checkpoint(&path)?;
    Ok(meta.get("val_score").and_then(serde_json::Value::as_f64))
}

/// Learner and completed epochs restored from the latest checkpoint in `dir`.
fn resumed(dir: &Path, net: NetKind, cfg: &RunConfig) -> anyhow::Result<(Learner, usize)> {
    let (mut learner, done) = Learner::resume(dir, net)
        .with_context(|| format!("resuming {} from {}", net.as_str(), dir.display()))?;
    check_model_config(&learner.model, &cfg.model, &checkpoint_path(dir, net, "last"))?;
    learner.optimizer.set_lr(cfg.train.optimizer.lr);
    Ok((learner, done))
}

fn print_epoch(net: &str, epochs: usize, r: &EpochRecord) {
    println!(
        "[{net}] epoch {}/{epochs} train_loss {:.6} val {:.6} ({:.1}s)",
        r.epoch + 1,
        r.train_loss,
        r.val_score,
        r.wall_secs
    );
}

/// Step losses per network plus the epoch summary. Resumed runs append.
fn write_reports(dir: &Path, report: &TrainReport, net_list: &[NetKind], append: bool) -> anyhow::Result<()> {
    for &net in net_list {
        let path = dir.join(format!("{}_loss.csv", net.as_str()));
        let mut buf = Vec::new();
        report.write_csv(net, &mut buf)?;
        append_or_write(&path, &buf, append)?;
    }
    let mut text = String::from("epoch,train_loss,val_score\n");
    for e in &report.epochs {
        text.push_str(&format!("{},{},{}\n", e.epoch + 1, e.train_loss, e.val_score));
    }
    append_or_write(&dir.join("epochs.csv"), text.as_bytes(), append)
}

fn append_or_write(path: &Path, csv: &[u8], append: bool) -> anyhow::Result<()> {
    if append && path.is_file() {
        let body = csv.iter().position(|&b| b == b'\n').map_or(&csv[..0], |i| &csv[i + 1..]);
        let mut existing = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        existing.extend_from_slice(body);
        fs::write(path, existing)
    } else {
        fs::write(path, csv)
    }
    .with_context(|| format!("writing {}", path.display()))
}

pub fn train(
    common: &Common,
    phase: Option<PhaseChoice>,
    net: NetChoice,
    epochs: Option<usize>,
    resume: bool,
    from_scratch: bool,
) -> anyhow::Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(p) = phase {
        cfg.train.phase = match p {
            PhaseChoice::NextFrame => Phase::NextFrame,
            PhaseChoice::JointAutoregressive => Phase::JointAutoregressive,
        };
    }
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    cfg.validate()?;
    let out = common.out.clone().unwrap_or_else(|| cfg.output.root.clone());
    let dir = out.join(phase_dir_name(cfg.train.phase));
    let joint = cfg.train.phase == Phase::JointAutoregressive;
    if joint && net != NetChoice::Both {
        return Err(usage("the joint phase trains both networks; use --net both"));
    }
    let phase1 = out.join(phase_dir_name(Phase::NextFrame));
    if joint && !from_scratch && !resume {
        for n in [NetKind::Depth, NetKind::Mask] {
            let p = checkpoint_path(&phase1, n, "best");
            if !p.is_file() {
                return Err(usage(format!(
                    "joint training starts from next-frame checkpoints but {} is missing; \
                     run `train --phase next-frame --net both` first or pass --from-scratch",
                    p.display()
                )));
            }
        }
    }
    let train = load_split(&cfg, &cfg.train_dir())?;
    let val = if cfg.val_dir().is_dir() {
        load_split(&cfg, &cfg.val_dir())?
    } else {
        log::warn!("no validation split at {}; best checkpoints follow the last epoch", cfg.val_dir().display());
        Vec::new()
    };
    create_dir(&dir)?;
    let net_list = nets(net);

    let start = |n: NetKind| -> anyhow::Result<(Learner, usize)> {
        if resume {
            return resumed(&dir, n, &cfg);
        }
        let model = if joint && !from_scratch {
            load_model(&checkpoint_path(&phase1, n, "best"), n, &cfg.model)?
        } else {
            VrnnModel::new(n, cfg.model.clone(), net_seed(cfg.train.seed, n))?
        };
        Ok((Learner::new(model, cfg.train.optimizer.clone()), 0))
    };

    if joint {
        let (mut depth, done) = start(NetKind::Depth)?;
        let (mut mask, done_m) = start(NetKind::Mask)?;
        if done != done_m {
            bail!("depth and mask checkpoints in {} disagree on the epoch", dir.display());
        }
        let outputs = TrainOutputs {
            dir: Some(dir.clone()),
            start_epoch: done,
            best_score: if resume { best_score(&dir, NetKind::Depth)? } else { None },
        };
        let total = cfg.train.epochs;
        let report = train_joint_autoregressive(&mut depth, &mut mask, &train, &val, &cfg.train, &outputs, &mut |r| {
            print_epoch("joint", total, r)
        })?;
        write_reports(&dir, &report, &net_list, resume)?;
    } else {
        for &n in &net_list {
            let (mut learner, done) = start(n)?;
            let outputs = TrainOutputs {
                dir: Some(dir.clone()),
                start_epoch: done,
                best_score: if resume { best_score(&dir, n)? } else { None },
            };
            let total = cfg.train.epochs;
            let report = train_next_frame(&mut learner, &train, &val, &cfg.train, &outputs, &mut |r| {
                print_epoch(n.as_str(), total, r)
            })?;
            let sub = dir.join(n.as_str());
            create_dir(&sub)?;
            write_reports(&sub, &report, &[n], resume)?;
        }
    }
    println!("reports and checkpoints in {}", dir.display());
    Ok(())
}

fn checkpoint_dir(cfg: &RunConfig, explicit: Option<PathBuf>) -> PathBuf {
    explicit.unwrap_or_else(|| cfg.output.root.join(phase_dir_name(Phase::JointAutoregressive)))
}

fn load_twin(dir: &Path, cfg: &ModelConfig) -> anyhow::Result<(VrnnModel, VrnnModel)> {
    Ok((
        load_model(&checkpoint_path(dir, NetKind::Depth, "best"), NetKind::Depth, cfg)?,
        load_model(&checkpoint_path(dir, NetKind::Mask, "best"), NetKind::Mask, cfg)?,
    ))
}

fn load_drive(dir: &Path) -> anyhow::Result<Vec<SparseDepthFrame>> {
    if !dir.is_dir() {
        return Err(usage(format!("input {} is not a directory", dir.display())));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    files.retain(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")));
    files.sort();
    Ok(files.iter().map(|p| load_depth_png(p)).collect::<Result<_, _>>()?)
}

pub fn predict(
    common: &Common,
    input: &Path,
    checkpoints: Option<PathBuf>,
    horizon: Option<usize>,
    samples: Option<usize>,
    compare: bool,
) -> anyhow::Result<()> {
    let cfg = load_config(common)?;
    let horizon = horizon.unwrap_or(cfg.eval.predict_len);
    let samples = samples.unwrap_or(cfg.eval.samples);
    let warmup = cfg.eval.warmup_len;
    if horizon == 0 || samples == 0 {
        return Err(usage("--horizon and --samples must be positive"));
    }
    let frames = load_drive(input)?;
    let needed = if compare { warmup + horizon } else { warmup };
    if frames.len() < needed {
        return Err(usage(format!(
            "{} has {} frames; {} needed for {warmup} warmup frames{}",
            input.display(),
            frames.len(),
            needed,
            if compare { format!(" and {horizon} compared frames") } else { String::new() }
        )));
    }
    if let Some(f) = frames.first() {
        if (f.height(), f.width()) != (cfg.model.height, cfg.model.width) {
            return Err(usage(format!(
                "input frames are {}x{} but the model expects {}x{}",
                f.height(),
                f.width(),
                cfg.model.height,
                cfg.model.width
            )));
        }
    }
    let (depth, mask) = load_twin(&checkpoint_dir(&cfg, checkpoints), &cfg.model)?;
    let twin = TwinModel::new(&depth, &mask, cfg.train.mask_threshold)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.eval.seed);
    let rollouts = twin.rollouts(&frames[..warmup], horizon, samples, &mut rng)?;

    let out = common.out.clone().unwrap_or_else(|| cfg.output.root.join("predict"));
    let (h, w) = (cfg.model.height, cfg.model.width);
    let range = (0.0, cfg.model.max_range);
    let mut compare_csv = String::from("sample,frame_index,rmse,mae\n");
    for (s, r) in rollouts.iter().enumerate() {
        let dir = out.join(format!("sample_{s:02}"));
        let preview = dir.join("preview");
        create_dir(&preview)?;
        for (t, p) in r.frames.iter().enumerate() {
            let dense = SparseDepthFrame::from_depth(h, w, p.dense.clone())?;
            save_depth_png(&dense, &dir.join(format!("dense_{t:02}.png")))?;
            save_probability_png(&p.mask_prob, h, w, &dir.join(format!("mask_{t:02}.png")))?;
            save_depth_png(&p.composed, &dir.join(format!("composed_{t:02}.png")))?;
            save_false_color(&p.dense, dense.mask(), h, w, range, &preview.join(format!("dense_{t:02}.png")))?;
            save_false_color(
                p.composed.depth(),
                p.composed.mask(),
                h,
                w,
                range,
                &preview.join(format!("composed_{t:02}.png")),
            )?;
            if compare {
                let e = masked_errors(&p.dense, &frames[warmup + t], &frames[warmup - 1]);
                let f = |v: Option<f64>| v.map_or_else(String::new, |v| v.to_string());
                compare_csv.push_str(&format!("{s},{},{},{}\n", t + 1, f(e.rmse()), f(e.mae())));
            }
        }
    }
    if compare {
        write_text(&out.join("compare.csv"), &compare_csv)?;
        let per_frame: Vec<f64> = (0..horizon)
            .flat_map(|t| rollouts.iter().map(move |r| (t, r)))
            .map(|(t, r)| masked_errors(&r.frames[t].dense, &frames[warmup + t], &frames[warmup - 1]).rmse().unwrap_or(f64::NAN))
            .collect();
        let (m, ci) = mean_ci95(&per_frame);
        println!("rollout RMSE {m:.4} +/- {ci:.4} m over {horizon} frames");
    }
    println!("wrote {samples} samples of {horizon} frames to {}", out.display());
    Ok(())
}

pub fn eval(
    common: &Common,
    checkpoints: Option<PathBuf>,
    dataset: Option<PathBuf>,
    horizon: Option<usize>,
    samples: Option<usize>,
    jobs: Option<usize>,
) -> anyhow::Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(h) = horizon {
        cfg.eval.predict_len = h;
    }
    if let Some(s) = samples {
        cfg.eval.samples = s;
    }
    if let Some(j) = jobs {
        cfg.eval.jobs = j.max(1);
    }
    if cfg.eval.samples == 0 || cfg.eval.predict_len == 0 {
        return Err(usage("--horizon and --samples must be positive"));
    }
    let data = dataset.unwrap_or_else(|| cfg.val_dir());
    let mut window = cfg.clone();
    window.data.window = window.data.window.max(cfg.eval.warmup_len + cfg.eval.predict_len);
    let seqs = load_split(&window, &data)?;
    let (depth, mask) = load_twin(&checkpoint_dir(&cfg, checkpoints), &cfg.model)?;
    let twin = TwinModel::new(&depth, &mask, cfg.train.mask_threshold)?;
    let report = evaluate(&twin, &seqs, &cfg.eval)?;

    let out = common.out.clone().unwrap_or_else(|| cfg.output.root.join("eval"));
    create_dir(&out)?;
    let mut csv = Vec::new();
    write_eval_csv(&report.rows, &mut csv)?;
    fs::write(out.join("eval.csv"), csv).with_context(|| format!("writing {}", out.join("eval.csv").display()))?;
    write_text(&out.join("rmse.svg"), &rmse_plot_svg(&report.rows))?;
    for r in &report.rows {
        println!(
            "frame {:2} rmse {:.4} +/- {:.4} mae {:.4} cd {:.4} baseline {:.4}",
            r.frame_index, r.rmse_mean, r.rmse_ci95, r.mae_mean, r.cd_mean, r.baseline_rmse
        );
    }
    println!("wrote {} and {}", out.join("eval.csv").display(), out.join("rmse.svg").display());
    Ok(())
}
