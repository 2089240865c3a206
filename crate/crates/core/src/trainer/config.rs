use serde::{Deserialize, Serialize};

use crate::amortization::{DivergenceGenerator, Objective};
use crate::error::{Error, Result};
use crate::losses::RhoSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Amorlip,
    Clip,
}

/// Every knob of a training run. Field names double as the keys of the JSON
/// config file; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub objective: Objective,
    pub generator: DivergenceGenerator,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(rename = "d", alias = "embed_dim")]
    pub embed_dim: usize,
    pub hidden: usize,
    pub depth: usize,
    #[serde(rename = "f_d", alias = "dim_factor")]
    pub dim_factor: f64,
    #[serde(rename = "T_lambda", alias = "t_lambda")]
    pub t_lambda: usize,
    #[serde(rename = "T_online", alias = "t_online")]
    pub t_online: usize,
    #[serde(rename = "T_target", alias = "t_target")]
    pub t_target: usize,
    pub alpha: f64,
    #[serde(rename = "beta_T", alias = "beta_final")]
    pub beta_final: f64,
    pub include_positive: bool,
    pub lr_encoder: f64,
    pub lr_amortizer: f64,
    pub weight_decay: f64,
    pub rho: RhoSchedule,
    pub tau_init: f64,
    pub tau_max: f64,
    pub eval_fraction: f64,
    pub seed: u64,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Amorlip,
            objective: Objective::L2log,
            generator: DivergenceGenerator::KlAffine,
            epochs: 10,
            batch_size: 64,
            embed_dim: 32,
            hidden: 64,
            depth: 2,
            dim_factor: 0.5,
            t_lambda: 3,
            t_online: 8,
            t_target: 2,
            alpha: 0.999,
            beta_final: 0.8,
            include_positive: true,
            lr_encoder: 1e-3,
            lr_amortizer: 1e-3,
            weight_decay: 0.1,
            rho: RhoSchedule::default(),
            tau_init: 1.0 / 0.07,
            tau_max: 100.0,
            eval_fraction: 0.1,
            seed: 7,
            log_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.t_lambda < 1 || self.t_online < 1 || self.t_target < 1 {
            return bad(format!(
                "t_lambda, t_online and t_target must be ≥ 1 (got {}, {}, {})",
                self.t_lambda, self.t_online, self.t_target
            ));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        if !(0.0..=1.0).contains(&self.beta_final) {
            return bad(format!("beta_final must lie in [0, 1], got {}", self.beta_final));
        }
        if self.epochs == 0 || self.batch_size < 2 || self.embed_dim == 0 || self.hidden == 0 {
            return bad("epochs, embed_dim and hidden must be positive and batch_size ≥ 2".into());
        }
        if !(self.dim_factor > 0.0) {
            return bad(format!("dim_factor must be positive, got {}", self.dim_factor));
        }
        if !(self.tau_init > 0.0 && self.tau_init <= self.tau_max) {
            return bad(format!("tau_init must lie in (0, tau_max], got {}", self.tau_init));
        }
        if !(0.0..=1.0).contains(&self.rho.anneal_start_fraction) {
            return bad("rho.anneal_start_fraction must lie in [0, 1]".into());
        }
        if self.generator == DivergenceGenerator::L2log {
            return bad("generator must be one of kl, kl_affine, js".into());
        }
        if self.log_every == 0 {
            return bad("log_every must be ≥ 1".into());
        }
        Ok(())
    }

    /// Parses a flat JSON object; missing keys take their defaults.
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
    }
}
