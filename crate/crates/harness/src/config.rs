//! JSON run configuration. Unknown keys are rejected at every level.
//!
//! ```json
//! {
//!   "train": { "n_way": 5, "k_shot": 5, "steps": 2000, "variant": "hypersphere" },
//!   "encoder": { "kind": "mlp", "hidden": [32], "output_dim": 16, "activation": "relu" },
//!   "data": {
//!     "source": "mixture",
//!     "mixture": { "n_classes": 25, "dim": 16, "samples_per_class": 60,
//!                  "mean_scale": 2.0, "spread_lo": 0.5, "spread_hi": 2.0 },
//!     "n_test_classes": 5
//!   },
//!   "out_dir": "runs/bench"
//! }
//! ```
//!
//! Relative paths are resolved against the directory holding the config file.

use std::path::{Path, PathBuf};

use hyperproto::training::RadiusDynamicsConfig;
use hyperproto::{Activation, MixtureSpec, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
#[derive(Default)]
pub enum EncoderSpec {
    /// Embeddings are the raw features.
    #[default]
    Identity,
    /// Input width comes from the data.
    Mlp {
        hidden: Vec<usize>,
        output_dim: usize,
        #[serde(default = "default_activation")]
        activation: Activation,
    },
}

fn default_activation() -> Activation {
    Activation::Relu
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSpec {
    /// Synthetic mixture split into disjoint train and test classes. The
    /// mixture's own seed is replaced by one derived from the run seed.
    Mixture {
        mixture: MixtureSpec,
        n_test_classes: usize,
    },
    /// Pre-split JSONL files.
    Files { train: PathBuf, test: PathBuf },
}

fn d_n_classes() -> usize {
    5
}
fn d_n_per_class() -> usize {
    5
}
fn yes() -> bool {
    true
}

/// What `export-matrices` writes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportSpec {
    #[serde(default = "d_n_classes")]
    pub n_classes: usize,
    #[serde(default = "d_n_per_class")]
    pub n_per_class: usize,
    #[serde(default = "yes")]
    pub distance: bool,
    #[serde(default = "yes")]
    pub similarity: bool,
    #[serde(default = "yes")]
    pub embeddings: bool,
}

impl Default for ExportSpec {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

fn d_out_dir() -> PathBuf {
    PathBuf::from("out")
}
fn d_shots() -> Vec<usize> {
    vec![1, 5]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub encoder: EncoderSpec,
    pub data: DataSpec,
    #[serde(default = "d_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub exports: ExportSpec,
    #[serde(default)]
    pub radius_dynamics: RadiusDynamicsConfig,
    /// Shot counts for `shot-sweep`.
    #[serde(default = "d_shots")]
    pub shots: Vec<usize>,
}

impl RunConfig {
    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let mut cfg: RunConfig = serde_json::from_str(text).map_err(|e| HarnessError::Config {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        cfg.validate(path)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Config {
            path: path.to_path_buf(),
            msg: format!("cannot read: {e}"),
        })?;
        Self::from_json(&text, path)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.out_dir);
        if let DataSpec::Files { train, test } = &mut self.data {
            join(train);
            join(test);
        }
    }

    fn validate(&self, path: &Path) -> Result<()> {
        let bad = |msg: String| HarnessError::Config {
            path: path.to_path_buf(),
            msg,
        };
        self.train.validate().map_err(|e| bad(e.to_string()))?;
        if let DataSpec::Mixture {
            mixture,
            n_test_classes,
        } = &self.data
        {
            mixture.validate().map_err(|e| bad(e.to_string()))?;
            if *n_test_classes == 0 || *n_test_classes >= mixture.n_classes {
                return Err(bad(format!(
                    "n_test_classes must be in 1..{}, got {n_test_classes}",
                    mixture.n_classes
                )));
            }
        }
        if let DataSpec::Files { train, test } = &self.data {
            for p in [train, test] {
                if !p.exists() {
                    return Err(bad(format!("dataset {} does not exist", p.display())));
                }
            }
        }
        if let EncoderSpec::Mlp { hidden, output_dim, .. } = &self.encoder {
            if *output_dim == 0 || hidden.contains(&0) {
                return Err(bad("encoder widths must be >= 1".into()));
            }
        }
        if self.exports.n_classes == 0 || self.exports.n_per_class == 0 {
            return Err(bad("exports need n_classes and n_per_class >= 1".into()));
        }
        if self.shots.is_empty() || self.shots.contains(&0) {
            return Err(bad("shots must be a non-empty list of counts >= 1".into()));
        }
        Ok(())
    }
}
