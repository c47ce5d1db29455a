//! Run configuration: one TOML file shared by every verb.
//!
//! Relative paths inside the file are resolved against the file's directory.
//! The configuration hash is taken over the parsed file (after the `--seed`
//! override) so it does not depend on where the file lives.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use simreuse::lsh::HasherConfig;
use simreuse::regularizers::RegConfig;
use simreuse::training::{Architecture, TrainConfig};
use simreuse::tuner::TuneBudget;

use crate::error::{CliError, CliResult};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    pub stream: StreamSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub reg: RegConfig,
    #[serde(default)]
    pub tune: TuneSection,
    #[serde(default)]
    pub bench: BenchSection,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
    #[serde(default)]
    pub analyze: AnalyzeSection,
}

/// Either a stream file or generation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSection {
    pub path: Option<PathBuf>,
    pub generate: Option<GenerateSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateSection {
    pub n_frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub rho: f64,
    #[serde(default)]
    pub n_classes: usize,
    /// Defaults to the run seed.
    pub seed: Option<u64>,
    /// Each generated frame is repeated this many times in place.
    #[serde(default = "one")]
    pub repeat: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Required to match the checkpoint when both are given; TinyConvNet
    /// when neither is.
    pub architecture: Option<Architecture>,
    pub checkpoint: Option<PathBuf>,
    /// Seed of a fresh model; defaults to the run seed.
    pub init_seed: Option<u64>,
    /// At most one of the three hasher overrides below.
    pub hashers: Option<Vec<HasherConfig>>,
    pub uniform_hasher: Option<UniformHasher>,
    /// Results file written by `tune`.
    pub tuning: Option<PathBuf>,
}

/// The same hasher on every layer. `input_dim` defaults to each layer's
/// full row length (and is capped by it); `seed` to the layer index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UniformHasher {
    pub hash_size: usize,
    pub input_dim: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub pretrain_epochs: usize,
    pub sa_epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub reuse_in_training: bool,
    /// Global gradient-norm bound; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            pretrain_epochs: 10,
            sa_epochs: 10,
            lr: t.lr,
            momentum: t.momentum,
            batch_size: t.batch_size,
            reuse_in_training: t.reuse_in_training,
            clip_norm: t.clip_norm.unwrap_or(0.0),
        }
    }
}

impl TrainSection {
    pub fn config(&self, epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            momentum: self.momentum,
            epochs,
            batch_size: self.batch_size,
            seed,
            reuse_in_training: self.reuse_in_training,
            clip_norm: (self.clip_norm != 0.0).then_some(self.clip_norm),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuneSection {
    pub n_init: usize,
    pub n_total: usize,
    pub max_hash_size: usize,
    pub min_input_dim: usize,
    pub parallel: bool,
}

impl Default for TuneSection {
    fn default() -> Self {
        let b = TuneBudget::default();
        TuneSection {
            n_init: b.n_init,
            n_total: b.n_total,
            max_hash_size: b.max_hash_size,
            min_input_dim: b.min_input_dim,
            parallel: true,
        }
    }
}

impl TuneSection {
    pub fn budget(&self) -> TuneBudget {
        TuneBudget {
            n_init: self.n_init,
            n_total: self.n_total,
            max_hash_size: self.max_hash_size,
            min_input_dim: self.min_input_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    /// Models to compare; all get the same hasher overrides.
    pub checkpoints: Vec<PathBuf>,
    /// Also evaluate with 8-bit reuse sites.
    pub quantize: bool,
    pub batch_size: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection {
            checkpoints: Vec::new(),
            quantize: false,
            batch_size: 16,
        }
    }
}

/// Values of one regularizer setting to sweep; exactly one list is given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub window: Option<Vec<usize>>,
    pub lambda_t: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeSection {
    /// Only the first frames enter the similarity matrix.
    pub max_frames: Option<usize>,
    /// Lag of the "distant" pairs in the summary.
    pub distant_lag: usize,
    /// Per-layer profile of the configured model.
    pub profile: bool,
}

impl Default for AnalyzeSection {
    fn default() -> Self {
        AnalyzeSection {
            max_frames: None,
            distant_lag: 10,
            profile: true,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(CliError::config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.stream.path.is_some() == self.stream.generate.is_some() {
            return Err(CliError::config(
                "[stream] needs exactly one of `path` or `generate`",
            ));
        }
        if let Some(g) = &self.stream.generate {
            if g.repeat == 0 {
                return Err(CliError::config("stream.generate.repeat must be >= 1"));
            }
        }
        let m = &self.model;
        let overrides = [
            m.hashers.is_some(),
            m.uniform_hasher.is_some(),
            m.tuning.is_some(),
        ];
        if overrides.iter().filter(|&&b| b).count() > 1 {
            return Err(CliError::config(
                "[model] takes at most one of `hashers`, `uniform_hasher`, `tuning`",
            ));
        }
        self.reg.validate()?;
        self.train.config(1, self.seed).validate()?;
        self.tune.budget().validate()?;
        if self.bench.batch_size == 0 {
            return Err(CliError::config("bench.batch_size must be >= 1"));
        }
        if let Some(s) = &self.sweep {
            match (&s.window, &s.lambda_t) {
                (Some(v), None) if !v.is_empty() => {}
                (None, Some(v)) if !v.is_empty() => {}
                _ => {
                    return Err(CliError::config(
                        "[sweep] needs exactly one non-empty list: `window` or `lambda_t`",
                    ))
                }
            }
        }
        if self.analyze.distant_lag == 0 {
            return Err(CliError::config("analyze.distant_lag must be >= 1"));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// A parsed configuration plus the directory its relative paths refer to.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: RunConfig,
    pub base: PathBuf,
}

impl Loaded {
    pub fn from_file(path: &Path, seed: Option<u64>) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        let mut config = RunConfig::parse(&text).map_err(|e| e.at(path))?;
        if let Some(s) = seed {
            config.seed = s;
        }
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Loaded { config, base })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    pub fn hash(&self) -> String {
        self.config.hash()
    }
}
