//! Optimizer, truncated-BPTT trainers for both phases, rollouts and evaluation.

mod eval;
mod optimizer;
mod rollout;
mod trainer;

pub use eval::{
    evaluate, masked_errors, mean_ci95, write_eval_csv, ErrorSums, EvalConfig, EvalReport, EvalRow,
    FrameMetrics, SequenceEval, EVAL_CSV_HEADER,
};
pub use optimizer::{optimizer_update, Adam, AdamConfig};
pub use rollout::{Forecaster, PredictedFrame, Rollout, TwinModel};
pub use trainer::{
    checkpoint_path, next_frame_scores, optimizer_path, rollout_score, tbptt_step, train_joint_autoregressive,
    train_next_frame, EpochRecord, Learner, LossSettings, NextFrameScores, Phase, StepRecord, StepResult,
    TrainConfig, TrainOutputs, TrainReport,
};
