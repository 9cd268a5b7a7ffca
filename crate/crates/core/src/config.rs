//! TOML run configuration shared by all CLI subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::StreamConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

/// Environment variable naming the root under which default output
/// directories are created.
pub const OUTPUT_ROOT_ENV: &str = "ICSID_OUTPUT_ROOT";
pub const DEFAULT_OUTPUT_ROOT: &str = "runs";
/// Name of the resolved configuration echoed into every output directory.
pub const RESOLVED_CONFIG: &str = "config.resolved.toml";

/// Fixed validation set drawn from the test-set generator domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValidationConfig {
    pub count: usize,
    /// Defaults to `stream.seed + 1`.
    pub seed: Option<u64>,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        ValidationConfig {
            count: 256,
            seed: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub output_dir: Option<PathBuf>,
    pub stream: StreamConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub validation: ValidationConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.stream.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        if self.model.n_in != self.stream.n_in {
            return Err(Error::Config(format!(
                "model.n_in ({}) must equal stream.n_in ({})",
                self.model.n_in, self.stream.n_in
            )));
        }
        self.model.patches(self.stream.m).map_err(|_| {
            Error::Config(format!(
                "stream.m ({}) must be a multiple of model.patch_len ({})",
                self.stream.m, self.model.patch_len
            ))
        })?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml()))
    }

    /// Stream of the validation set: the training stream under another seed.
    pub fn validation_stream(&self) -> StreamConfig {
        StreamConfig {
            seed: self.validation.seed.unwrap_or(self.stream.seed.wrapping_add(1)),
            ..self.stream.clone()
        }
    }

    /// `output_dir` when set, otherwise `$ICSID_OUTPUT_ROOT/<name>` (falling
    /// back to `runs/<name>`).
    pub fn output_dir(&self, name: &str, root: Option<&Path>) -> PathBuf {
        match &self.output_dir {
            Some(d) => d.clone(),
            None => root
                .map(Path::to_path_buf)
                .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT))
                .join(name),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_key_is_named() {
        let e = RunConfig::from_toml("[train]\nlearning_rate = 1.0\n").unwrap_err();
        assert!(e.to_string().contains("learning_rate"), "{e}");
        let e = RunConfig::from_toml("bogus = 1\n").unwrap_err();
        assert!(e.to_string().contains("bogus"), "{e}");
    }

    #[test]
    fn resolved_round_trip() {
        let mut c = RunConfig::default();
        c.train.warmup_iters = Some(5);
        c.stream.class.lti.order_max = 3;
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn cross_section_checks() {
        let e = RunConfig::from_toml("[model]\nn_in = 3\n").unwrap_err();
        assert!(e.to_string().contains("n_in"));
        let e = RunConfig::from_toml("[model]\npatch_len = 7\n").unwrap_err();
        assert!(e.to_string().contains("patch_len"));
    }
}
