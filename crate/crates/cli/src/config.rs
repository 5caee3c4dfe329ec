//! Run configuration: desk defaults, an optional TOML file merged on top, then
//! command-line overrides.

use std::path::Path;

use camp::ablation::{select, table4};
use camp::data::SyntheticSpec;
use camp::model::FusionOp;
use camp::objectives::LossKind;
use camp::training::TrainConfig;
use camp::ModelConfig;
use clap::Args;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synthetic: SyntheticSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::desk(),
            train: TrainConfig::desk(),
            synthetic: SyntheticSpec::default(),
        }
    }
}

/// Recursively overlays `over` onto `base`; tables merge key by key, any
/// other value replaces.
pub fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    /// Parses TOML text merged over the defaults.
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let user: toml::Table = text.parse().map_err(|e| CliError::Config(format!("{e}")))?;
        let mut base = toml::Value::try_from(Self::default()).expect("defaults serialize");
        merge(&mut base, toml::Value::Table(user));
        base.try_into().map_err(|e| CliError::Config(format!("{e}")))
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| CliError::Io {
                    path: p.to_path_buf(),
                    source,
                })?;
                Self::from_toml(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn kebab<T: serde::de::DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| format!("unknown value {s:?}"))
}

fn parse_loss(s: &str) -> Result<LossKind, String> {
    kebab(s)
}

fn parse_fusion(s: &str) -> Result<FusionOp, String> {
    kebab(s)
}

/// Flags that override single configuration fields.
#[derive(Args, Clone, Debug, Default)]
pub struct Overrides {
    /// Shared feature width
    #[arg(long)]
    pub d: Option<usize>,
    /// Affinity projection width
    #[arg(long = "d-hidden")]
    pub d_hidden: Option<usize>,
    /// Captions per batch
    #[arg(long)]
    pub batch: Option<usize>,
    /// Learning rate of the first phase
    #[arg(long)]
    pub lr1: Option<f64>,
    /// Learning rate of the second phase
    #[arg(long)]
    pub lr2: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Ranking-loss margin
    #[arg(long)]
    pub margin: Option<f64>,
    /// bce-hardest, bce-plain or ranking
    #[arg(long, value_parser = parse_loss)]
    pub loss: Option<LossKind>,
    /// add, concat or product
    #[arg(long = "fusion-op", value_parser = parse_fusion)]
    pub fusion_op: Option<FusionOp>,
    #[arg(long = "no-gates")]
    pub no_gates: bool,
    #[arg(long = "no-residual")]
    pub no_residual: bool,
    /// Ablation row applied before the other flags (e.g. no-gates, base)
    #[arg(long)]
    pub variant: Option<String>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) -> Result<(), CliError> {
        if let Some(name) = &self.variant {
            let grid = table4(&cfg.model, &cfg.train);
            let row = select(&grid, &[name.as_str()])?.remove(0);
            cfg.model = row.model;
            cfg.train = row.train;
        }
        let (m, t) = (&mut cfg.model, &mut cfg.train);
        if let Some(v) = self.d {
            m.d = v;
        }
        if let Some(v) = self.d_hidden {
            m.d_h = v;
        }
        if let Some(v) = self.batch {
            t.batch_size = v;
        }
        if let Some(v) = self.lr1 {
            t.lr_phase1 = v;
        }
        if let Some(v) = self.lr2 {
            t.lr_phase2 = v;
        }
        if let Some(v) = self.epochs {
            t.epochs = v;
        }
        if let Some(v) = self.margin {
            t.loss.margin = v;
        }
        if let Some(v) = self.loss {
            t.loss.kind = v;
        }
        if let Some(v) = self.fusion_op {
            m.fusion_op = v;
        }
        if self.no_gates {
            m.use_gates = false;
        }
        if self.no_residual {
            m.use_residual = false;
        }
        Ok(())
    }
}
