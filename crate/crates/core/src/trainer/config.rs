use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::NetworkConfig;

/// Ablation switches. Each one disables a single stabilisation component.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablations {
    /// Normalise hash coordinates by voxel index instead of physical FOV.
    pub no_adaptive_hash: bool,
    pub no_aif_pretrain: bool,
    /// Full evidential weight from the first iteration.
    pub no_annealing: bool,
    /// Predict CBF directly and derive CBV from it.
    pub no_cbv_param: bool,
    pub no_phys_init: bool,
    /// Drop the NIG likelihood and regulariser (the plain PINN variant).
    pub no_evidential: bool,
    pub no_anticollapse: bool,
}

impl Ablations {
    /// Names of the active switches, as used on the command line.
    pub fn active(&self) -> Vec<&'static str> {
        let all = [
            (self.no_adaptive_hash, "no-adaptive-hash"),
            (self.no_aif_pretrain, "no-aif-pretrain"),
            (self.no_annealing, "no-annealing"),
            (self.no_cbv_param, "no-cbv-param"),
            (self.no_phys_init, "no-phys-init"),
            (self.no_evidential, "no-evidential"),
            (self.no_anticollapse, "no-anticollapse"),
        ];
        all.iter().filter(|(on, _)| *on).map(|(_, n)| *n).collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnnealSchedule {
    /// `ω(i) = min(1, i / iterations)`.
    #[default]
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub aif_pretrain_iters: usize,
    /// Samples per iteration, split evenly between data and residual draws.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda_data: f64,
    pub lambda_res: f64,
    pub lambda_edl: f64,
    pub lambda_reg: f64,
    pub lambda_ac: f64,
    pub lambda_pr: f64,
    /// Delay floor, s.
    pub eps_p: f64,
    pub delay_min: f64,
    pub delay_max: f64,
    pub mtt_max: f64,
    pub anneal: AnnealSchedule,
    /// Residual times are drawn from `[margin, duration − margin]`.
    pub residual_margin: f64,
    pub trace_every: usize,
    /// Residual probes per brain voxel used for coverage after training.
    pub probes_per_voxel: usize,
    pub seed: u64,
    pub ablations: Ablations,
    pub network: NetworkConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 5000,
            aif_pretrain_iters: 5000,
            batch_size: 25_000,
            learning_rate: 1e-3,
            lambda_data: 1.0,
            lambda_res: 1.0,
            lambda_edl: 0.5,
            lambda_reg: 1e-3,
            lambda_ac: 1e-2,
            lambda_pr: 1e-1,
            eps_p: 0.05,
            delay_min: 0.0,
            delay_max: 15.0,
            mtt_max: 30.0,
            anneal: AnnealSchedule::Linear,
            residual_margin: 0.5,
            trace_every: 50,
            probes_per_voxel: 16,
            seed: 0,
            ablations: Ablations::default(),
            network: NetworkConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [
            ("lambda_data", self.lambda_data),
            ("lambda_res", self.lambda_res),
            ("lambda_edl", self.lambda_edl),
            ("lambda_reg", self.lambda_reg),
            ("lambda_ac", self.lambda_ac),
            ("lambda_pr", self.lambda_pr),
        ];
        for (name, v) in lambdas {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidParams(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        if self.iterations == 0 {
            return Err(Error::InvalidParams("iterations must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidParams("batch_size must be at least 2".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidParams("learning_rate must be positive".into()));
        }
        if !(self.eps_p > 0.0) {
            return Err(Error::InvalidParams("eps_p must be positive".into()));
        }
        if !(self.delay_max > self.delay_min) || !(self.mtt_max > 0.0) {
            return Err(Error::InvalidParams("prior bounds are inconsistent".into()));
        }
        if self.network.param_outputs != 6 {
            return Err(Error::InvalidParams("parameter head must have 6 outputs".into()));
        }
        if self.trace_every == 0 {
            return Err(Error::InvalidParams("trace_every must be positive".into()));
        }
        Ok(())
    }

    /// Evidential weight at iteration `i`.
    pub fn anneal_weight(&self, i: usize) -> f64 {
        if self.ablations.no_annealing {
            return 1.0;
        }
        match self.anneal {
            AnnealSchedule::Linear => (i as f64 / self.iterations as f64).min(1.0),
        }
    }
}
