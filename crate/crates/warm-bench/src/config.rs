//! Experiment configuration: one JSON document, every field optional.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use warm_core::align::RlConfig;
use warm_core::recipe::{DeskRecipe, Diversity};
use warm_core::theory::{TheoryWorld, MAX_SIGMA};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub recipe: DeskRecipe,
    pub pool: PoolSettings,
    pub lmc: LmcSettings,
    pub corrupt: CorruptSettings,
    pub select: SelectSettings,
    pub theory: TheorySettings,
    pub bon: BonSettings,
    pub rl: RlSettings,
    pub seeds: Vec<u64>,
    /// Where artifacts go unless `--out` is given.
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            recipe: DeskRecipe::default(),
            pool: PoolSettings::default(),
            lmc: LmcSettings::default(),
            corrupt: CorruptSettings::default(),
            select: SelectSettings::default(),
            theory: TheorySettings::default(),
            bon: BonSettings::default(),
            rl: RlSettings::default(),
            seeds: vec![0, 1, 2, 3, 4],
            out_dir: None,
        }
    }
}

/// The WARM pool used as proxy by the BoN and RL presets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolSettings {
    pub members: usize,
    pub diversity: Diversity,
}

impl Default for PoolSettings {
    fn default() -> Self {
        PoolSettings {
            members: 6,
            diversity: Diversity::Full,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmcSettings {
    pub grid_points: usize,
    pub diversity: Diversity,
}

impl Default for LmcSettings {
    fn default() -> Self {
        LmcSettings {
            grid_points: 11,
            diversity: Diversity::DataOrder,
        }
    }
}

/// Overrides applied to the recipe by the corruption preset only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorruptSettings {
    pub corruption: f64,
    pub diversity: Diversity,
}

impl Default for CorruptSettings {
    fn default() -> Self {
        CorruptSettings {
            corruption: 0.25,
            diversity: Diversity::Full,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectSettings {
    pub pool: usize,
    pub diversity: Diversity,
}

impl Default for SelectSettings {
    fn default() -> Self {
        SelectSettings {
            pool: 10,
            diversity: Diversity::Full,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheorySettings {
    pub world: TheoryWorld,
    pub members: usize,
    pub items: usize,
}

impl Default for TheorySettings {
    fn default() -> Self {
        TheorySettings {
            world: TheoryWorld::default(),
            members: 4096,
            items: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BonSettings {
    pub ns: Vec<usize>,
    pub prompts: usize,
    /// Std of the reference policy's logits.
    pub policy_sigma: f64,
    /// Sample size behind the exact KL column.
    pub kl_samples: usize,
}

impl Default for BonSettings {
    fn default() -> Self {
        BonSettings {
            ns: vec![1, 2, 4, 8, 16, 32, 64],
            prompts: 2000,
            policy_sigma: 1.0,
            kl_samples: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlSettings {
    pub alpha: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub baseline_decay: f64,
    pub eval_interval: usize,
    pub eval_samples: usize,
    pub policy_sigma: f64,
    /// Relative oracle drop that counts as a collapse.
    pub delta: f64,
}

impl Default for RlSettings {
    fn default() -> Self {
        let run = RlConfig::default();
        RlSettings {
            alpha: run.alpha,
            learning_rate: run.learning_rate,
            steps: run.steps,
            batch_size: run.batch_size,
            baseline_decay: run.baseline_decay,
            eval_interval: run.eval_interval,
            eval_samples: run.eval_samples,
            policy_sigma: 1.0,
            delta: 0.1,
        }
    }
}

impl RlSettings {
    pub fn run_config(&self) -> RlConfig {
        RlConfig {
            alpha: self.alpha,
            learning_rate: self.learning_rate,
            steps: self.steps,
            batch_size: self.batch_size,
            baseline_decay: self.baseline_decay,
            eval_interval: self.eval_interval,
            eval_samples: self.eval_samples,
        }
    }
}

/// One problem with a config, located by JSON path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl ConfigError {
    fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError {
            path: path.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

fn json_path(p: &serde_path_to_error::Path) -> String {
    let s = p.to_string();
    if s == "." {
        "$".to_string()
    } else {
        format!("$.{s}")
    }
}

impl ExperimentConfig {
    /// Every violated constraint. Does not stop at the first one.
    pub fn violations(&self) -> Vec<ConfigError> {
        let mut errs: Vec<ConfigError> = self
            .recipe
            .violations()
            .into_iter()
            .map(|(field, msg)| ConfigError::new(format!("$.recipe.{field}"), msg))
            .collect();
        let mut push = |path: &str, msg: String| errs.push(ConfigError::new(path, msg));
        if self.seeds.is_empty() {
            push("$.seeds", "must be nonempty".into());
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            push("$.seeds", "must not repeat".into());
        }
        if self.pool.members == 0 {
            push("$.pool.members", "must be >= 1".into());
        }
        if self.lmc.grid_points < 2 {
            push("$.lmc.grid_points", "must be >= 2".into());
        }
        if !(0.0..=1.0).contains(&self.corrupt.corruption) {
            push("$.corrupt.corruption", format!("must lie in [0,1], got {}", self.corrupt.corruption));
        }
        if self.select.pool < 2 {
            push("$.select.pool", "must be >= 2".into());
        }
        if let Err(e) = self.theory.world.validate() {
            push("$.theory.world", e.to_string());
        } else if self.theory.world.sigma > MAX_SIGMA {
            push("$.theory.world.sigma", format!("must be <= {MAX_SIGMA}"));
        }
        if self.theory.members == 0 || self.theory.items == 0 {
            push("$.theory", "members and items must be >= 1".into());
        }
        if self.bon.ns.is_empty() || self.bon.ns.contains(&0) {
            push("$.bon.ns", "must be nonempty with every N >= 1".into());
        }
        if self.bon.prompts == 0 || self.bon.kl_samples == 0 {
            push("$.bon", "prompts and kl_samples must be >= 1".into());
        }
        if !(self.bon.policy_sigma > 0.0) {
            push("$.bon.policy_sigma", "must be > 0".into());
        }
        if let Err(e) = self.rl.run_config().validate() {
            push("$.rl", e.to_string());
        }
        if !(self.rl.policy_sigma > 0.0) {
            push("$.rl.policy_sigma", "must be > 0".into());
        }
        if !(self.rl.delta > 0.0 && self.rl.delta < 1.0) {
            push("$.rl.delta", format!("must lie in (0,1), got {}", self.rl.delta));
        }
        errs
    }

    pub fn from_json(text: &str) -> Result<Self, Vec<ConfigError>> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = json_path(e.path());
            vec![ConfigError::new(path, e.into_inner().to_string())]
        })?;
        let errs = cfg.violations();
        if errs.is_empty() {
            Ok(cfg)
        } else {
            Err(errs)
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Reads a config file and fills in defaults. Problems come back together.
pub fn validate_config(path: &Path) -> Result<ExperimentConfig, Vec<ConfigError>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| vec![ConfigError::new("$", format!("cannot read {}: {e}", path.display()))])?;
    ExperimentConfig::from_json(&text)
}
