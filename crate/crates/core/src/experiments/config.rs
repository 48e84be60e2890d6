use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::{EnvKind, Layout};
use crate::error::{Error, Result};
use crate::oracle::{OracleConfig, Scenario, NUM_TEST_REWARDS};
use crate::tinynet::TrainHyper;

/// Environment variable holding the number of worker threads.
pub const WORKERS_ENV: &str = "CALIB_LAB_WORKERS";

/// Seed of the held-out test reward draw, shared by every run.
pub const DEFAULT_REWARD_GRID_SEED: u64 = 2024;

/// Optimizer settings for each training role.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperSet {
    pub calibrated_feature: TrainHyper,
    pub multitask_representation: TrainHyper,
    pub calibrated_reward: TrainHyper,
    pub multitask_reward: TrainHyper,
}

impl Default for HyperSet {
    fn default() -> Self {
        HyperSet {
            calibrated_feature: TrainHyper::calibrated_feature(),
            multitask_representation: TrainHyper::multitask_representation(),
            calibrated_reward: TrainHyper::calibrated_reward(),
            multitask_reward: TrainHyper::multitask_reward(),
        }
    }
}

/// Everything about a run except the environment, scenario and seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub state_count: usize,
    /// Test-state pairs shared by every method within a seed.
    pub eval_pairs: usize,
    /// Pre-training queries per calibrated feature; the multi-task
    /// baselines get this times the number of calibrated features.
    pub pretrain_queries_per_feature: usize,
    pub reward_query_grid: Vec<usize>,
    /// Query counts at which calibrated features are retrained for the
    /// learning curve.
    pub feature_query_grid: Vec<usize>,
    /// Training-reward counts of the multi-task baselines; 1 is the
    /// uniform single-preference model.
    pub multitask_heads: Vec<usize>,
    pub train_unfrozen: bool,
    pub reward_grid_seed: u64,
    pub oracle: OracleConfig,
    pub hyper: HyperSet,
    pub layout: Layout,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            state_count: 10_000,
            eval_pairs: 1000,
            pretrain_queries_per_feature: 100,
            reward_query_grid: vec![0, 5, 10, 25, 50, 100],
            feature_query_grid: vec![0, 10, 25, 50, 100],
            multitask_heads: vec![1, 10, 25, 50],
            train_unfrozen: true,
            reward_grid_seed: DEFAULT_REWARD_GRID_SEED,
            oracle: OracleConfig::default(),
            hyper: HyperSet::default(),
            layout: Layout::default(),
        }
    }
}

impl ExperimentConfig {
    /// Reads a TOML or JSON file (chosen by extension); missing keys keep
    /// their defaults.
    pub fn load(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&body)?,
            Some("toml") => toml::from_str(&body).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
            _ => return Err(Error::Config(format!("{}: expected a .toml or .json file", path.display()))),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.oracle.validate()?;
        self.layout.workspace.validate()?;
        for h in [
            &self.hyper.calibrated_feature,
            &self.hyper.multitask_representation,
            &self.hyper.calibrated_reward,
            &self.hyper.multitask_reward,
        ] {
            h.validate()?;
        }
        if self.eval_pairs == 0 {
            return Err(Error::Config("eval_pairs must be positive".into()));
        }
        if self.reward_query_grid.is_empty() {
            return Err(Error::Config("reward_query_grid is empty".into()));
        }
        if self.multitask_heads.contains(&0) {
            return Err(Error::Config("multitask_heads entries must be positive".into()));
        }
        let max_heads = crate::oracle::RewardWeights::grid().len() - NUM_TEST_REWARDS - 1;
        if let Some(&n) = self.multitask_heads.iter().find(|&&n| n > max_heads) {
            return Err(Error::Config(format!("{n} training rewards requested, at most {max_heads} exist")));
        }
        if self.state_count < 10 {
            return Err(Error::TooFewStates {
                min: 10,
                got: self.state_count,
            });
        }
        Ok(())
    }
}

/// One experiment: an environment, a calibration scenario and a seed list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub env: EnvKind,
    pub scenario: Scenario,
    pub seeds: Vec<u64>,
    pub config: ExperimentConfig,
}

impl ExperimentPlan {
    pub fn new(env: EnvKind, scenario: Scenario, seeds: Vec<u64>, config: ExperimentConfig) -> Result<Self> {
        scenario.validate(env)?;
        config.validate()?;
        Ok(ExperimentPlan {
            env,
            scenario,
            seeds,
            config,
        })
    }

    pub fn calibrated_count(&self) -> usize {
        self.scenario.calibrated_mask(self.env).iter().filter(|&&m| m).count()
    }

    /// Total representation-learning queries: split evenly across the
    /// calibrated features for our method, pooled for the baselines.
    pub fn pretrain_budget(&self) -> usize {
        self.config.pretrain_queries_per_feature * self.calibrated_count()
    }

    /// Every reward-learning method compared in this plan, in report order.
    pub fn methods(&self) -> Vec<Method> {
        let mut out = vec![Method::Calibrated];
        let flags: &[bool] = if self.config.train_unfrozen { &[true, false] } else { &[true] };
        for &heads in &self.config.multitask_heads {
            for &frozen in flags {
                out.push(Method::MultiTask { heads, frozen });
            }
        }
        out
    }
}

/// Worker count from [`WORKERS_ENV`], if set to a positive integer.
pub fn workers_from_env() -> Result<Option<usize>> {
    match std::env::var(WORKERS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(0) | Err(_) => Err(Error::Config(format!("{WORKERS_ENV} must be a positive integer, got {v:?}"))),
            Ok(n) => Ok(Some(n)),
        },
    }
}

/// A reward-learning method.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Method {
    /// Linear reward over calibrated features (always frozen).
    Calibrated,
    /// Reward head over a multi-task representation trained on `heads` rewards.
    MultiTask { heads: usize, frozen: bool },
}

impl Method {
    pub fn is_baseline(self) -> bool {
        matches!(self, Method::MultiTask { .. })
    }

    pub fn name(self) -> String {
        self.to_string()
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Method::Calibrated => f.write_str("cf"),
            Method::MultiTask { heads, frozen } => {
                let mode = if *frozen { "frozen" } else { "unfrozen" };
                if *heads == 1 {
                    write!(f, "single_pref_{mode}")
                } else {
                    write!(f, "joint_pref_{heads}_{mode}")
                }
            }
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "cf" {
            return Ok(Method::Calibrated);
        }
        let bad = || Error::Config(format!("unknown method {s:?}"));
        let (rest, frozen) = if let Some(r) = s.strip_suffix("_unfrozen") {
            (r, false)
        } else if let Some(r) = s.strip_suffix("_frozen") {
            (r, true)
        } else {
            return Err(bad());
        };
        let heads = if rest == "single_pref" {
            1
        } else {
            rest.strip_prefix("joint_pref_").and_then(|n| n.parse().ok()).filter(|&n| n > 1).ok_or_else(bad)?
        };
        Ok(Method::MultiTask { heads, frozen })
    }
}

impl TryFrom<String> for Method {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Method> for String {
    fn from(m: Method) -> String {
        m.to_string()
    }
}
