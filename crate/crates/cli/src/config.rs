//! Run configuration: every knob of a training or prediction run in one
//! struct, loadable from TOML and overridable flag by flag.  Dumping the
//! effective config and loading the dump reproduces the run exactly.

use std::path::Path;
use std::time::Duration;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use sentopic::inference::{Hyperparams, StopRule};
use sentopic::regression::Levels;
use sentopic::svi::{
    Budget, ForgettingSchedule, LocalRule, OnlineConfig, StochasticConfig,
};
use sentopic::Real;

/// Which trainer a `train` run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Batch,
    Stochastic,
    Online,
}

/// Full description of a run.  Unknown keys in a config file are rejected;
/// missing keys fall back to the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub mode: Mode,
    pub seed: u64,
    /// Worker threads for the local sweeps; 0 keeps the process default.
    pub threads: usize,

    // Model shape and priors.
    pub k: usize,
    pub t: usize,
    pub m: usize,
    pub alpha: Real,
    pub beta: Real,
    pub theta: Real,
    pub lambda: Vec<Real>,
    pub eta: Vec<Real>,
    pub sentiment_levels: Vec<Real>,
    pub preference_levels: Vec<Real>,
    pub epsilon: Real,

    // Batch stop rule (also the online base fit).
    pub max_iters: usize,
    pub tol: Real,
    pub window: usize,
    pub wall_secs: Option<Real>,

    // Stochastic budget and probing.
    pub max_steps: Option<usize>,
    pub probe_every: usize,
    pub probe_docs: usize,
    pub with_replacement: bool,

    // Online stream shape.
    pub base_size: usize,
    pub batch_size: usize,
    pub batch_cap: usize,
    /// Constant forgetting rate; unset keeps the mode's default schedule.
    pub rate: Option<Real>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let hp = Hyperparams::default();
        let stop = StopRule::default();
        Self {
            mode: Mode::Batch,
            seed: 0,
            threads: 0,
            k: hp.k,
            t: hp.t,
            m: hp.m,
            alpha: hp.alpha,
            beta: hp.beta,
            theta: hp.theta,
            lambda: hp.lambda,
            eta: hp.eta,
            sentiment_levels: hp.levels.sentiment.clone(),
            preference_levels: hp.levels.preference.clone(),
            epsilon: hp.epsilon,
            max_iters: stop.max_iters,
            tol: stop.tol,
            window: stop.window,
            wall_secs: None,
            max_steps: None,
            probe_every: 0,
            probe_docs: 0,
            with_replacement: false,
            base_size: 0,
            batch_size: 0,
            batch_cap: 5,
            rate: None,
        }
    }
}

impl RunConfig {
    /// Defaults, or the parsed file when a path is given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        toml::from_str(&text)
            .with_context(|| format!("config {} is invalid", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).context("cannot serialize config")
    }

    /// Validated model hyperparameters for this run.
    pub fn hyperparams(&self) -> Result<Hyperparams> {
        let levels =
            Levels::new(self.sentiment_levels.clone(), self.preference_levels.clone())?;
        let hp = Hyperparams {
            alpha: self.alpha,
            beta: self.beta,
            theta: self.theta,
            lambda: self.lambda.clone(),
            eta: self.eta.clone(),
            k: self.k,
            t: self.t,
            m: self.m,
            epsilon: self.epsilon,
            levels,
        };
        hp.validate()?;
        Ok(hp)
    }

    pub fn stop_rule(&self) -> StopRule {
        StopRule {
            max_iters: self.max_iters,
            tol: self.tol,
            window: self.window,
            wall_limit: self.wall_secs.map(Duration::from_secs_f64),
        }
    }

    fn wall_limit(&self) -> Option<Duration> {
        self.wall_secs.map(Duration::from_secs_f64)
    }

    pub fn stochastic(&self) -> StochasticConfig {
        // With neither a step nor a wall budget the run would be unbounded;
        // fall back to the stock step count instead of erroring.
        let budget = if self.max_steps.is_none() && self.wall_secs.is_none() {
            StochasticConfig::default().budget
        } else {
            Budget { max_steps: self.max_steps, wall_limit: self.wall_limit() }
        };
        StochasticConfig {
            budget,
            schedule: match self.rate {
                Some(r) => ForgettingSchedule::Constant(r),
                None => ForgettingSchedule::InverseT,
            },
            with_replacement: self.with_replacement,
            probe_every: self.probe_every,
            probe_docs: self.probe_docs,
            local: LocalRule::default(),
        }
    }

    pub fn online(&self) -> OnlineConfig {
        OnlineConfig {
            // The base corpus handed to the trainer already has the split
            // size, so let it define the reference count.
            base_size: 0,
            batch_cap: self.batch_cap,
            schedule: match self.rate {
                Some(r) => ForgettingSchedule::Constant(r),
                None => ForgettingSchedule::FixedRatio,
            },
            base_stop: self.stop_rule(),
            local: LocalRule::default(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<RunConfig>("mode = \"batch\"\nbogus = 1\n");
        assert!(err.is_err());
    }

    #[test]
    fn partial_file_keeps_defaults_elsewhere() {
        let cfg: RunConfig = toml::from_str("seed = 9\nk = 12\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.k, 12);
        assert_eq!(cfg.t, RunConfig::default().t);
        assert_eq!(cfg.mode, Mode::Batch);
    }

    #[test]
    fn hyperparams_validation_surfaces() {
        let cfg = RunConfig { k: 2, t: 5, ..RunConfig::default() };
        assert!(cfg.hyperparams().is_err());
    }

    #[test]
    fn stochastic_budget_defaults_when_unbounded() {
        let cfg = RunConfig::default();
        let sc = cfg.stochastic();
        assert!(sc.budget.max_steps.is_some());
        let timed = RunConfig { wall_secs: Some(1.0), ..RunConfig::default() };
        let sc = timed.stochastic();
        assert_eq!(sc.budget.max_steps, None);
        assert!(sc.budget.wall_limit.is_some());
    }
}
