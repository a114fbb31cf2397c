use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::ModelConfig;
use crate::data::DatasetSpec;
use crate::metrics::LpipsConfig;
use crate::training::TrainConfig;
use crate::{Error, Result};

fn default_grid() -> Vec<f64> {
    (-5..=5).map(f64::from).collect()
}

fn default_repeats() -> usize {
    10
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

/// Everything a `train` or `eval` invocation needs, read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run_id: String,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_grid")]
    pub eval_snr_grid_db: Vec<f64>,
    /// Noise realizations per test image and SNR.
    #[serde(default = "default_repeats")]
    pub eval_repeats: usize,
    /// Seed of the evaluation noise streams.
    #[serde(default)]
    pub eval_seed: u64,
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub lpips: LpipsConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) || self.run_id.starts_with('.') {
            return Err(Error::Config(format!("run_id `{}` is not a plain directory name", self.run_id)));
        }
        if self.eval_snr_grid_db.is_empty() {
            return Err(Error::Config("eval_snr_grid_db must not be empty".into()));
        }
        if self.eval_repeats == 0 {
            return Err(Error::Config("eval_repeats must be at least 1".into()));
        }
        self.dataset.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.dataset.image_dims() != self.model.image_dims {
            return Err(Error::Config(format!(
                "dataset images are {} but the model expects {}",
                self.dataset.image_dims(),
                self.model.image_dims
            )));
        }
        if self.train.p_avg != self.model.p_avg {
            return Err(Error::Config(format!(
                "train.p_avg {} differs from model.p_avg {}",
                self.train.p_avg, self.model.p_avg
            )));
        }
        Ok(())
    }

    /// The fully defaulted config as TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config serializes")
    }

    /// SHA-256 of [`Self::to_toml`].
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.run_id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOY: &str = r#"
        run_id = "toy"
        [dataset]
        name = "synthetic"
        [dataset.synthetic]
        dims = { channels = 3, height = 16, width = 32 }
        correlation_mode = "additive_noise"
        counts = { train = 8, val = 2, test = 2 }
        [model]
        variant = "wz"
        rho = 0.125
        base_width = 8
        image_dims = { channels = 3, height = 16, width = 32 }
    "#;

    #[test]
    fn defaults_are_filled_and_echoed() {
        let cfg = ExperimentConfig::from_toml(TOY).unwrap();
        assert_eq!(cfg.eval_snr_grid_db.len(), 11);
        assert_eq!(cfg.eval_repeats, 10);
        assert_eq!(cfg.train, TrainConfig::default());
        let echoed = cfg.to_toml();
        assert!(echoed.contains("learning_rate") && echoed.contains("patience_e"));
        assert_eq!(ExperimentConfig::from_toml(&echoed).unwrap(), cfg);
        assert_eq!(cfg.hash(), ExperimentConfig::from_toml(&echoed).unwrap().hash());
    }

    #[test]
    fn rejects_unknown_keys_and_mismatched_dims() {
        assert!(ExperimentConfig::from_toml(&format!("bogus = 1\n{TOY}")).is_err());
        let bad = TOY.replace(
            "base_width = 8\n        image_dims = { channels = 3, height = 16",
            "base_width = 8\n        image_dims = { channels = 3, height = 32",
        );
        assert_ne!(bad, TOY);
        assert!(matches!(ExperimentConfig::from_toml(&bad), Err(Error::Config(_))));
    }
}
