//! Run configuration file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sparse_vrnn::data::SynthConfig;
use sparse_vrnn::model::ModelConfig;
use sparse_vrnn::training::{EvalConfig, TrainConfig};

use crate::UsageError;

/// Environment variable that replaces `output.root`.
pub const OUTPUT_ROOT_VAR: &str = "SPARSE_VRNN_OUTPUT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Dataset directory holding `train/` and `val/` drive folders.
    pub root: PathBuf,
    /// Sequences generated by `synth` for each split.
    pub n_train: usize,
    pub n_val: usize,
    /// Frames per sequence window cut from each drive.
    pub window: usize,
    /// Frames between consecutive window starts.
    pub stride: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            root: PathBuf::from("data"),
            n_train: 20,
            n_val: 4,
            window: 30,
            stride: 30,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    /// Checkpoints, reports and renderings go below this directory.
    pub root: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            root: PathBuf::from("runs"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataSection,
    pub output: OutputSection,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

/// Annotated default configuration printed by `--print-schema`.
pub const SCHEMA: &str = include_str!("../config.schema.toml");

impl RunConfig {
    /// Parses a file; relative paths resolve against the file's directory.
    pub fn load(path: &Path) -> anyhow::Result<RunConfig> {
        let text = fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| UsageError(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.data.root = base.join(&cfg.data.root);
        cfg.output.root = base.join(&cfg.output.root);
        if let Some(root) = std::env::var_os(OUTPUT_ROOT_VAR) {
            cfg.output.root = PathBuf::from(root);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let usage = |e: sparse_vrnn::Error| UsageError(e.to_string());
        self.synth.validate().map_err(usage)?;
        self.model.validate().map_err(usage)?;
        self.train.validate().map_err(usage)?;
        self.train.check_sequence_length(self.data.window).map_err(usage)?;
        if self.data.window < 2 || self.data.stride == 0 {
            return Err(UsageError("data.window must be >= 2 and data.stride >= 1".into()).into());
        }
        if (self.synth.height, self.synth.width) != (self.model.height, self.model.width) {
            return Err(UsageError(format!(
                "synth resolution {}x{} differs from model resolution {}x{}",
                self.synth.height, self.synth.width, self.model.height, self.model.width
            ))
            .into());
        }
        if self.eval.samples == 0 || self.eval.warmup_len == 0 || self.eval.predict_len == 0 {
            return Err(UsageError("eval.samples, eval.warmup_len and eval.predict_len must be positive".into()).into());
        }
        Ok(())
    }

    pub fn train_dir(&self) -> PathBuf {
        self.data.root.join("train")
    }

    pub fn val_dir(&self) -> PathBuf {
        self.data.root.join("val")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schema_is_the_default_config() {
        let parsed: RunConfig = toml::from_str(SCHEMA).unwrap();
        assert_eq!(parsed, RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in ["[train]\nepoch = 3", "[modle]\nheight = 48", "[data]\nroot = 'x'\nwindows = 3"] {
            assert!(toml::from_str::<RunConfig>(text).is_err(), "{text}");
        }
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "[data]\nroot = 'd'\n").unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.data.root, dir.path().join("d"));
    }
}
