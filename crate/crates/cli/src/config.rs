//! Experiment configuration: a TOML file with `[market]` and `[train]`
//! sections plus the sweep grid. Every field has a default, unknown keys
//! are errors, and the fully resolved configuration is echoed next to the
//! outputs so a run can be reproduced from its artifacts alone.

use std::fmt;
use std::path::{Path, PathBuf};

use ncb_core::bpg::TrainConfig;
use ncb_core::market::{MarketConfig, ValueAtom, ValueModel};
use serde::{Deserialize, Serialize};

/// Configuration and validation failures carry the field they refer to.
#[derive(Debug)]
pub enum ConfigError {
    Io { path: PathBuf, source: std::io::Error },
    Parse { path: PathBuf, message: String },
    Invalid { field: String, message: String },
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Io { path, source } => {
                write!(f, "cannot read config file {}: {source}", path.display())
            }
            ConfigError::Parse { path, message } => {
                write!(f, "cannot parse config file {}: {message}", path.display())
            }
            ConfigError::Invalid { field, message } => write!(f, "{field}: {message}"),
        }
    }
}

impl std::error::Error for ConfigError {}

fn invalid(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { field: field.into(), message: message.into() }
}

/// Which trainer a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Bpg,
    BpgZero,
    FullyCooperative,
    Independent,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Bpg => "bpg",
            Method::BpgZero => "bpg_zero",
            Method::FullyCooperative => "fully_cooperative",
            Method::Independent => "independent",
        }
    }
}

/// The value-generation model in file form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValueModelSection {
    /// `"uniform"` or `"discrete"`.
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base_lo: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base_hi: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bases: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub atom_probs: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub atom_multipliers: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exchangeable: Option<bool>,
}

impl Default for ValueModelSection {
    fn default() -> Self {
        ValueModelSection {
            kind: "uniform".into(),
            base_lo: Some(0.5),
            base_hi: Some(1.5),
            bases: None,
            atom_probs: None,
            atom_multipliers: None,
            exchangeable: None,
        }
    }
}

impl ValueModelSection {
    fn resolve(&self) -> Result<(ValueModelSection, ValueModel), ConfigError> {
        match self.kind.as_str() {
            "uniform" => {
                let base_lo = self.base_lo.unwrap_or(0.5);
                let base_hi = self.base_hi.unwrap_or(1.5);
                let resolved = ValueModelSection {
                    kind: "uniform".into(),
                    base_lo: Some(base_lo),
                    base_hi: Some(base_hi),
                    ..ValueModelSection::default()
                };
                Ok((resolved, ValueModel::Uniform { base_lo, base_hi }))
            }
            "discrete" => {
                let bases = self.bases.clone().ok_or_else(|| {
                    invalid("market.value_model.bases", "required for kind = \"discrete\"")
                })?;
                let probs = self.atom_probs.clone().ok_or_else(|| {
                    invalid("market.value_model.atom_probs", "required for kind = \"discrete\"")
                })?;
                let mults = self.atom_multipliers.clone().ok_or_else(|| {
                    invalid(
                        "market.value_model.atom_multipliers",
                        "required for kind = \"discrete\"",
                    )
                })?;
                if probs.len() != mults.len() {
                    return Err(invalid(
                        "market.value_model.atom_probs",
                        "must have the same length as atom_multipliers",
                    ));
                }
                let exchangeable = self.exchangeable.unwrap_or(false);
                let resolved = ValueModelSection {
                    kind: "discrete".into(),
                    base_lo: None,
                    base_hi: None,
                    bases: Some(bases.clone()),
                    atom_probs: Some(probs.clone()),
                    atom_multipliers: Some(mults.clone()),
                    exchangeable: Some(exchangeable),
                };
                let atoms = probs
                    .iter()
                    .zip(&mults)
                    .map(|(&prob, &multiplier)| ValueAtom { prob, multiplier })
                    .collect();
                Ok((resolved, ValueModel::Discrete { bases, atoms, exchangeable }))
            }
            other => Err(invalid(
                "market.value_model.kind",
                format!("unknown kind {other:?}; expected \"uniform\" or \"discrete\""),
            )),
        }
    }
}

/// `[market]` section; unset fields take the ten-agent benchmark defaults.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_agents: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub horizon: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub impressions_per_step: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub budgets: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reserve_price: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bid_levels: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub value_model: Option<ValueModelSection>,
}

/// Evenly spread budgets between 3 and 9, the benchmark default.
fn default_budgets(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![6.0];
    }
    (0..n).map(|i| 3.0 + 6.0 * i as f64 / (n - 1) as f64).collect()
}

impl MarketSection {
    fn resolve(&self) -> Result<(MarketSection, MarketConfig), ConfigError> {
        let n_agents = self.n_agents.unwrap_or(10);
        let horizon = self.horizon.unwrap_or(4);
        let impressions_per_step = self.impressions_per_step.unwrap_or(16);
        let budgets = self.budgets.clone().unwrap_or_else(|| default_budgets(n_agents));
        let reserve_price = self.reserve_price.unwrap_or(0.1);
        let bid_levels =
            self.bid_levels.clone().unwrap_or_else(|| vec![0.0, 0.5, 1.0, 1.5, 2.0]);
        let seed = self.seed.unwrap_or(0);
        let vm_section = self.value_model.clone().unwrap_or_default();
        let (vm_resolved, value_model) = vm_section.resolve()?;

        let market = MarketConfig {
            n_agents,
            horizon,
            impressions_per_step,
            budgets: budgets.clone(),
            value_model,
            reserve_price,
            bid_levels: bid_levels.clone(),
            seed,
        };
        market.validate().map_err(|e| match e {
            ncb_core::Error::InvalidConfig(message) => {
                let field = message.split(':').next().unwrap_or("market").to_string();
                let rest = message.splitn(2, ": ").nth(1).unwrap_or(&message).to_string();
                ConfigError::Invalid { field, message: rest }
            }
            other => ConfigError::Invalid { field: "market".into(), message: other.to_string() },
        })?;

        let resolved = MarketSection {
            n_agents: Some(n_agents),
            horizon: Some(horizon),
            impressions_per_step: Some(impressions_per_step),
            budgets: Some(budgets),
            reserve_price: Some(reserve_price),
            bid_levels: Some(bid_levels),
            seed: Some(seed),
            value_model: Some(vm_resolved),
        };
        Ok((resolved, market))
    }
}

macro_rules! train_section {
    ($($field:ident : $ty:ty),+ $(,)?) => {
        /// `[train]` section; unset fields take the trainer defaults.
        #[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
        #[serde(deny_unknown_fields)]
        pub struct TrainSection {
            $(
                #[serde(skip_serializing_if = "Option::is_none")]
                pub $field: Option<$ty>,
            )+
        }

        impl TrainSection {
            fn resolve(&self) -> (TrainSection, TrainConfig) {
                let defaults = TrainConfig::default();
                let cfg = TrainConfig {
                    $($field: self.$field.clone().unwrap_or(defaults.$field),)+
                };
                let resolved = TrainSection {
                    $($field: Some(cfg.$field.clone()),)+
                };
                (resolved, cfg)
            }
        }
    };
}

train_section! {
    xi: f64,
    alpha1: f64,
    alpha2: f64,
    unified_lr: f64,
    unified_train_iters: usize,
    episodes_per_estimate: usize,
    eval_episodes: usize,
    max_outer_iters: usize,
    convergence_window: usize,
    convergence_tol: f64,
    epsilon_norm: f64,
    epsilon_is_raw: bool,
    use_baseline: bool,
    clamp_competitive_factor: bool,
    cold_start_unified: bool,
    dual_alpha: f64,
    br_train_steps: usize,
    br_episodes: usize,
    br_lr: f64,
    inner_br_steps: usize,
    grad_clip: f64,
    weight_decay: f64,
    embed_dim: usize,
    seed: u64,
}

/// A whole experiment file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_version")]
    pub version: u32,
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default = "default_epsilon_list")]
    pub epsilon_list: Vec<f64>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub market: MarketSection,
    #[serde(default)]
    pub train: TrainSection,
}

fn default_version() -> u32 {
    1
}
fn default_method() -> Method {
    Method::Bpg
}
fn default_epsilon_list() -> Vec<f64> {
    vec![0.08]
}
fn default_seeds() -> Vec<u64> {
    vec![1]
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            version: default_version(),
            method: default_method(),
            epsilon_list: default_epsilon_list(),
            seeds: default_seeds(),
            output_dir: default_output_dir(),
            market: MarketSection::default(),
            train: TrainSection::default(),
        }
    }
}

/// A configuration with every default filled in and the concrete core
/// configs it maps to.
#[derive(Debug, Clone)]
pub struct ResolvedConfig {
    pub experiment: ExperimentConfig,
    pub market: MarketConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn resolve(&self) -> Result<ResolvedConfig, ConfigError> {
        if self.version != 1 {
            return Err(invalid("version", format!("unsupported version {}", self.version)));
        }
        if self.epsilon_list.is_empty() {
            return Err(invalid("epsilon_list", "must not be empty"));
        }
        if self.epsilon_list.iter().any(|e| !e.is_finite() || *e < 0.0) {
            return Err(invalid("epsilon_list", "entries must be finite and >= 0"));
        }
        if self.seeds.is_empty() {
            return Err(invalid("seeds", "must not be empty"));
        }
        let (market_resolved, market) = self.market.resolve()?;
        let (train_resolved, train) = self.train.resolve();
        train.validate().map_err(|e| match e {
            ncb_core::Error::InvalidConfig(message) => {
                let field = message.split(':').next().unwrap_or("train").to_string();
                let rest = message.splitn(2, ": ").nth(1).unwrap_or(&message).to_string();
                ConfigError::Invalid { field, message: rest }
            }
            other => ConfigError::Invalid { field: "train".into(), message: other.to_string() },
        })?;
        let experiment = ExperimentConfig {
            version: self.version,
            method: self.method,
            epsilon_list: self.epsilon_list.clone(),
            seeds: self.seeds.clone(),
            output_dir: self.output_dir.clone(),
            market: market_resolved,
            train: train_resolved,
        };
        Ok(ResolvedConfig { experiment, market, train })
    }

    /// Core training config for one grid cell.
    pub fn train_for(&self, base: &TrainConfig, seed: u64, epsilon: f64) -> TrainConfig {
        TrainConfig { seed, epsilon_norm: epsilon, ..base.clone() }
    }
}

/// Load and resolve a configuration file.
pub fn load_config(path: &Path) -> Result<ResolvedConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
    let parsed: ExperimentConfig = toml::from_str(&text)
        .map_err(|e| ConfigError::Parse { path: path.to_path_buf(), message: e.to_string() })?;
    parsed.resolve()
}

/// Serialize a resolved configuration back to TOML.
pub fn to_toml(config: &ExperimentConfig) -> String {
    toml::to_string_pretty(config).expect("resolved config serializes")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_fills_defaults() {
        let parsed: ExperimentConfig = toml::from_str(
            r#"
            [market]
            n_agents = 4
            [train]
            xi = 2.0
            "#,
        )
        .unwrap();
        let resolved = parsed.resolve().unwrap();
        assert_eq!(resolved.market.n_agents, 4);
        assert_eq!(resolved.market.budgets.len(), 4);
        assert_eq!(resolved.train.xi, 2.0);
        assert_eq!(resolved.train.episodes_per_estimate, 256);
        assert_eq!(resolved.experiment.epsilon_list, vec![0.08]);
    }

    #[test]
    fn unknown_keys_are_errors() {
        let result = toml::from_str::<ExperimentConfig>(
            r#"
            [market]
            n_agnets = 4
            "#,
        );
        let err = result.unwrap_err().to_string();
        assert!(err.contains("n_agnets"), "{err}");
    }

    #[test]
    fn validation_names_the_field() {
        let parsed: ExperimentConfig = toml::from_str(
            r#"
            [market]
            bid_levels = [0.0, 1.0, 1.0]
            "#,
        )
        .unwrap();
        let err = parsed.resolve().unwrap_err().to_string();
        assert!(err.contains("market.bid_levels"), "{err}");
    }

    #[test]
    fn resolved_config_is_a_fixed_point() {
        let parsed: ExperimentConfig = toml::from_str(
            r#"
            seeds = [3, 4]
            epsilon_list = [0.0, 0.16]
            [market]
            n_agents = 3
            [train]
            alpha1 = 0.015
            "#,
        )
        .unwrap();
        let resolved = parsed.resolve().unwrap();
        let text = to_toml(&resolved.experiment);
        let reparsed: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(reparsed, resolved.experiment);
        let re_resolved = reparsed.resolve().unwrap();
        assert_eq!(re_resolved.experiment, resolved.experiment);
    }

    #[test]
    fn discrete_value_model_roundtrip() {
        let parsed: ExperimentConfig = toml::from_str(
            r#"
            [market]
            n_agents = 2
            budgets = [1.2, 1.5]
            bid_levels = [0.0, 0.6, 1.2]
            horizon = 2
            impressions_per_step = 1
            [market.value_model]
            kind = "discrete"
            bases = [1.0, 1.3]
            atom_probs = [0.5, 0.5]
            atom_multipliers = [0.8, 1.2]
            "#,
        )
        .unwrap();
        let resolved = parsed.resolve().unwrap();
        match &resolved.market.value_model {
            ValueModel::Discrete { bases, atoms, exchangeable } => {
                assert_eq!(bases, &vec![1.0, 1.3]);
                assert_eq!(atoms.len(), 2);
                assert!(!exchangeable);
            }
            other => panic!("unexpected value model {other:?}"),
        }
        let text = to_toml(&resolved.experiment);
        let reparsed: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(reparsed, resolved.experiment);
    }
}
