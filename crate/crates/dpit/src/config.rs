//! Training configuration: a TOML file with every key overridable from the
//! command line as dotted `key=value` pairs, plus seed resolution with the
//! `DPIT_SEED` environment variable as fallback.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::llcn::{LlcnConfig, LlcnKind};
use crate::losses::LossWeights;
use crate::network::NetworkConfig;
use crate::synth::DatasetMix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Llcn,
    Dscrt,
    Finetune,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Stage::Llcn => "llcn",
            Stage::Dscrt => "dscrt",
            Stage::Finetune => "finetune",
        };
        f.write_str(s)
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "llcn" => Ok(Stage::Llcn),
            "dscrt" => Ok(Stage::Dscrt),
            "finetune" => Ok(Stage::Finetune),
            other => Err(Error::Config(format!("unknown stage: {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    /// Micro-batches averaged into one optimizer step.
    pub grad_accum: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// None defers to `DPIT_SEED`, then 0.
    pub seed: Option<u64>,
    pub image_size: usize,
    /// Sizes of the three procedural source pools (synthetic, real-stand-in,
    /// nature-stand-in) and of the held-out validation set.
    pub pool_sizes: [usize; 3],
    pub val_pairs: usize,
    pub samples_per_epoch: usize,
    /// Draw ratios over the three pools; must sum to 1.
    pub mix: [f64; 3],
    /// Optional on-disk dataset; when set it replaces the first pool.
    pub data_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub llcn: LlcnConfig,
    pub llcn_kind: LlcnKind,
    /// Whether the separation stage consumes the learned prior at all.
    pub use_prior: bool,
    pub network: NetworkConfig,
    pub loss: LossWeights,
    pub perceptual: PerceptualSettings,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerceptualSettings {
    /// Seed offset for the frozen random feature extractor.
    pub seed: u64,
    pub taps: usize,
    pub width: usize,
}

impl Default for PerceptualSettings {
    fn default() -> Self {
        Self {
            seed: 7,
            taps: 3,
            width: 8,
        }
    }
}

impl Default for TrainConfig {
    /// Desk-scale defaults: a run finishes in seconds to minutes on CPU.
    fn default() -> Self {
        Self {
            stage: Stage::Llcn,
            epochs: 2,
            batch_size: 2,
            grad_accum: 1,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            seed: None,
            image_size: 32,
            pool_sizes: [6, 2, 2],
            val_pairs: 2,
            samples_per_epoch: 6,
            mix: [0.6, 0.2, 0.2],
            data_dir: None,
            out_dir: PathBuf::from("runs/default"),
            llcn: LlcnConfig::tiny(),
            llcn_kind: LlcnKind::Llcm,
            use_prior: true,
            network: NetworkConfig::micro(),
            loss: LossWeights::default(),
            perceptual: PerceptualSettings::default(),
        }
    }
}

impl TrainConfig {
    /// Full-scale settings matching the published training recipe: 80/80/20
    /// epochs, batch 2 with 2 accumulation steps, lr 1e-4, 224 px for the
    /// prior stage and 384 px for the separation stages.
    pub fn paper_scale(stage: Stage) -> Self {
        Self {
            stage,
            epochs: match stage {
                Stage::Finetune => 20,
                _ => 80,
            },
            batch_size: 2,
            grad_accum: 2,
            lr: 1e-4,
            image_size: match stage {
                Stage::Llcn => 224,
                _ => 384,
            },
            pool_sizes: [64, 16, 16],
            val_pairs: 16,
            samples_per_epoch: 64,
            llcn: LlcnConfig::default(),
            network: NetworkConfig::default(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.grad_accum == 0 {
            return Err(Error::Config(
                "epochs, batch_size and grad_accum must be >= 1".into(),
            ));
        }
        if self.lr <= 0.0 {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("optimizer moments must lie in [0, 1)".into()));
        }
        if self.image_size == 0 {
            return Err(Error::Config("image_size must be >= 1".into()));
        }
        if self.val_pairs == 0 {
            return Err(Error::Config("val_pairs must be >= 1".into()));
        }
        DatasetMix::new(self.mix, self.samples_per_epoch)?;
        for (k, n) in self.pool_sizes.iter().enumerate() {
            if self.mix[k] > 0.0 && *n == 0 && !(k == 0 && self.data_dir.is_some()) {
                return Err(Error::Config(format!(
                    "pool {k} has draw ratio {} but size 0",
                    self.mix[k]
                )));
            }
        }
        self.llcn.validate()?;
        self.network.validate()?;
        self.loss.validate()?;
        if self.perceptual.taps == 0 || self.perceptual.width == 0 {
            return Err(Error::Config("perceptual taps/width must be >= 1".into()));
        }
        Ok(())
    }

    /// Seed precedence: explicit CLI value, then the config file, then the
    /// `DPIT_SEED` environment variable, then 0.
    pub fn resolve_seed(&self, cli: Option<u64>) -> u64 {
        cli.or(self.seed)
            .or_else(|| std::env::var("DPIT_SEED").ok()?.parse().ok())
            .unwrap_or(0)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("config serialize: {e}")))
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Config(format!("config serialize: {e}")))
    }
}

/// Load a config, starting from the defaults, optionally replaced by a TOML
/// file, then patched by dotted-path `key=value` overrides (e.g.
/// `loss.lambda3=0.05`, `network.window_size=8`).
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<TrainConfig> {
    let mut table: toml::Table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            text.parse()
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for ov in overrides {
        apply_override(&mut table, ov)?;
    }
    let cfg: TrainConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e| Error::Config(format!("config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

fn apply_override(table: &mut toml::Table, kv: &str) -> Result<()> {
    let (key, value) = kv
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{kv}' is not key=value")))?;
    // Parse the right-hand side with full TOML syntax; bare words that are
    // not valid TOML scalars (e.g. enum names) fall back to strings.
    let parsed: toml::Value = match format!("v = {value}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(value.to_string()),
    };
    let mut node = table;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry.as_table_mut().ok_or_else(|| {
            Error::Config(format!("override '{key}': '{part}' is not a table"))
        })?;
    }
    node.insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}
