//! Flat TOML run configuration.
//!
//! Every key has a default, unknown keys are rejected, and the resolved
//! configuration is written back out verbatim so a run directory can be
//! replayed from it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{FitConfig, KernelParams, MaternNu};
use crate::harness::{ALConfig, GfnSettings, Strategy, SweepConfig, TransferConfig, TransferMode};
use crate::reward::CovarianceMode;
use crate::subtb::TrainerConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    /// Independent seed replicas (`seed`, `seed + 1`, ...).
    pub replicas: usize,

    pub pool_size: usize,
    pub test_size: usize,
    pub noise_sd: f64,
    pub seed_size: usize,
    pub query_size: usize,
    pub al_steps: usize,
    pub strategies: Vec<Strategy>,
    pub transfer_mode: TransferMode,
    pub lookahead_samples: usize,
    pub lookahead_iterations: usize,
    pub lookahead_refit_gp: bool,
    pub warm_start_iterations: usize,

    pub temperature: f64,
    pub covariance: CovarianceMode,
    pub stochastic_bald_temperature: f64,

    pub subtb_lambda: f64,
    pub epsilon: f64,
    pub learning_rate: f64,
    pub traj_batch_size: usize,
    pub iterations: usize,
    pub hidden: usize,
    pub encoder_layers: usize,
    pub train_context: bool,
    pub scale_heads: bool,
    pub inference_samples: usize,

    pub gp_epochs: usize,
    pub gp_lr: f64,
    pub matern_nu: f64,
    pub init_lengthscale: f64,
    pub init_outputscale: f64,
    pub init_noise_var: f64,
    pub init_mean: f64,

    pub sweep_temperatures: Vec<f64>,
    pub sweep_runs: usize,
    pub checkpoint_every: usize,
    pub transfer_max_iterations: usize,
    pub enumeration_cap: u64,
}

impl Default for Config {
    fn default() -> Self {
        let t = TrainerConfig::default();
        let g = GfnSettings::default();
        let init = KernelParams::default();
        Config {
            seed: 0,
            replicas: 1,
            pool_size: 2000,
            test_size: 500,
            noise_sd: 0.1,
            seed_size: 10,
            query_size: 10,
            al_steps: 5,
            strategies: vec![Strategy::Gfn],
            transfer_mode: TransferMode::Reinit,
            lookahead_samples: 10,
            lookahead_iterations: g.lookahead_iterations,
            lookahead_refit_gp: true,
            warm_start_iterations: g.warm_start_iterations,
            temperature: 0.1,
            covariance: CovarianceMode::Posterior,
            stochastic_bald_temperature: 0.1,
            subtb_lambda: t.lambda,
            epsilon: t.epsilon,
            learning_rate: t.lr,
            traj_batch_size: t.traj_batch_size,
            iterations: t.iterations,
            hidden: g.hidden,
            encoder_layers: g.encoder_layers,
            train_context: g.train_context,
            scale_heads: g.scale_heads,
            inference_samples: g.inference_samples,
            gp_epochs: 1000,
            gp_lr: 0.1,
            matern_nu: 2.5,
            init_lengthscale: init.lengthscale,
            init_outputscale: init.outputscale,
            init_noise_var: init.noise_var,
            init_mean: init.mean_const,
            sweep_temperatures: vec![1.0, 0.1, 0.01],
            sweep_runs: 10,
            checkpoint_every: 50,
            transfer_max_iterations: 2000,
            enumeration_cap: 1_000_000,
        }
    }
}

/// A key changed from its file or default value.
#[derive(Clone, Debug, PartialEq)]
pub struct Override {
    pub key: String,
    pub old: String,
    pub new: String,
}

impl Config {
    /// Parses and validates. An empty string gives the defaults.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies `key = value` pairs in order, then validates once. Values
    /// are TOML literals; bare words are taken as strings.
    pub fn with_overrides<K: AsRef<str>, V: AsRef<str>>(&self, pairs: &[(K, V)]) -> Result<(Config, Vec<Override>)> {
        let mut next = self.clone();
        let mut log = Vec::with_capacity(pairs.len());
        for (k, v) in pairs {
            log.push(next.set_unchecked(k.as_ref(), v.as_ref())?);
        }
        next.validate()?;
        Ok((next, log))
    }

    /// Single override, validated. The config is unchanged on error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<Override> {
        let (next, mut log) = self.with_overrides(&[(key, value)])?;
        *self = next;
        Ok(log.remove(0))
    }

    fn set_unchecked(&mut self, key: &str, value: &str) -> Result<Override> {
        let mut table = toml::Table::try_from(&*self).expect("config serializes");
        let old = table
            .get(key)
            .ok_or_else(|| Error::Config(format!("unknown key {key:?}")))?
            .clone();
        let parsed = format!("v = {value}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        let parsed = match (&old, parsed) {
            (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
            (toml::Value::Array(_), v @ toml::Value::String(_)) => toml::Value::Array(
                v.as_str()
                    .unwrap()
                    .split(',')
                    .map(|s| toml::Value::String(s.trim().to_string()))
                    .collect(),
            ),
            (_, v) => v,
        };
        table.insert(key.to_string(), parsed.clone());
        let next: Config = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("{key}: {}", e.message())))?;
        *self = next;
        Ok(Override { key: key.to_string(), old: old.to_string(), new: parsed.to_string() })
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicas == 0 {
            return Err(Error::Config("replicas must be at least 1".into()));
        }
        // TOML integers are signed; the resolved config must stay loadable.
        if self.seed > i64::MAX as u64 - self.replicas as u64 {
            return Err(Error::Config(format!("seed {} leaves no room for {} replica seed(s) below 2^63", self.seed, self.replicas)));
        }
        if self.strategies.is_empty() {
            return Err(Error::Config("strategies must name at least one strategy".into()));
        }
        MaternNu::from_f64(self.matern_nu).map_err(|e| Error::Config(e.to_string()))?;
        self.gp_fit().init.validate().map_err(|e| Error::Config(e.to_string()))?;
        if !(self.gp_lr > 0.0 && self.gp_lr.is_finite()) {
            return Err(Error::Config(format!("gp_lr must be positive, got {}", self.gp_lr)));
        }
        if self.sweep_temperatures.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
            return Err(Error::Config("sweep_temperatures must all be positive".into()));
        }
        if self.sweep_runs == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config("sweep_runs and checkpoint_every must be at least 1".into()));
        }
        for &s in &self.strategies {
            self.al_config(s, self.seed)?.validate()?;
        }
        Ok(())
    }

    pub fn gp_fit(&self) -> FitConfig {
        FitConfig {
            epochs: self.gp_epochs,
            lr: self.gp_lr,
            nu: MaternNu::from_f64(self.matern_nu).unwrap_or(MaternNu::FiveHalves),
            init: KernelParams {
                lengthscale: self.init_lengthscale,
                outputscale: self.init_outputscale,
                noise_var: self.init_noise_var,
                mean_const: self.init_mean,
            },
        }
    }

    pub fn trainer(&self) -> TrainerConfig {
        TrainerConfig {
            lambda: self.subtb_lambda,
            epsilon: self.epsilon,
            lr: self.learning_rate,
            traj_batch_size: self.traj_batch_size,
            iterations: self.iterations,
        }
    }

    pub fn gfn(&self) -> GfnSettings {
        GfnSettings {
            hidden: self.hidden,
            encoder_layers: self.encoder_layers,
            train_context: self.train_context,
            scale_heads: self.scale_heads,
            trainer: self.trainer(),
            warm_start_iterations: self.warm_start_iterations,
            lookahead_iterations: self.lookahead_iterations,
            inference_samples: self.inference_samples,
        }
    }

    /// Harness configuration for one strategy and replica seed. Lookahead
    /// is only meaningful for the sampler; other strategies fall back to
    /// `reinit` (which they ignore).
    pub fn al_config(&self, strategy: Strategy, seed: u64) -> Result<ALConfig> {
        let transfer_mode = if strategy == Strategy::Gfn { self.transfer_mode } else { TransferMode::Reinit };
        let cfg = ALConfig {
            seed,
            pool_size: self.pool_size,
            test_size: self.test_size,
            noise_sd: self.noise_sd,
            seed_size: self.seed_size,
            query_size: self.query_size,
            al_steps: self.al_steps,
            strategy,
            transfer_mode,
            lookahead_samples: self.lookahead_samples,
            lookahead_refit_gp: self.lookahead_refit_gp,
            temperature: self.temperature,
            stochastic_bald_temperature: self.stochastic_bald_temperature,
            covariance: self.covariance,
            gp: self.gp_fit(),
            gfn: self.gfn(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn replica_seeds(&self) -> Vec<u64> {
        (0..self.replicas as u64).map(|r| self.seed.wrapping_add(r)).collect()
    }

    pub fn sweep_config(&self, seed: u64) -> Result<SweepConfig> {
        Ok(SweepConfig {
            al: self.al_config(Strategy::Gfn, seed)?,
            temperatures: self.sweep_temperatures.clone(),
            runs: self.sweep_runs,
        })
    }

    pub fn transfer_config(&self, seed: u64) -> Result<TransferConfig> {
        let mut al = self.al_config(Strategy::Gfn, seed)?;
        al.transfer_mode = TransferMode::Lookahead;
        Ok(TransferConfig {
            al,
            checkpoint_every: self.checkpoint_every,
            max_iterations: self.transfer_max_iterations,
            enumeration_cap: u128::from(self.enumeration_cap),
        })
    }
}
