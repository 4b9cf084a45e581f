//! Normal–Inverse–Gamma evidence over the physics residual.
//!
//! The predictive mean is pinned at zero, so only (α, β, ν) are learned. The
//! NLL and regulariser come with closed-form gradients that the trainer
//! chains into the parameter network.

use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Error, Result};

/// Domain floor added after every softplus.
pub const EPS_EDL: f64 = 1e-3;

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NigParams {
    pub alpha: f64,
    pub beta: f64,
    pub nu: f64,
}

impl NigParams {
    pub fn is_valid(&self) -> bool {
        self.alpha >= 1.0 + EPS_EDL && self.beta >= EPS_EDL && self.nu >= EPS_EDL
            && self.alpha.is_finite() && self.beta.is_finite() && self.nu.is_finite()
    }
}

/// Map raw network outputs onto the valid NIG domain.
pub fn transform(raw_alpha: f64, raw_beta: f64, raw_nu: f64) -> NigParams {
    NigParams {
        alpha: 1.0 + softplus(raw_alpha) + EPS_EDL,
        beta: softplus(raw_beta) + EPS_EDL,
        nu: softplus(raw_nu) + EPS_EDL,
    }
}

/// d(α, β, ν)/d(raw); each transform is elementwise, so this is a diagonal.
pub fn transform_jacobian(raw_alpha: f64, raw_beta: f64, raw_nu: f64) -> [f64; 3] {
    [sigmoid(raw_alpha), sigmoid(raw_beta), sigmoid(raw_nu)]
}

/// `r`-independent part of the NLL: the Student-t normaliser.
fn log_normalizer(alpha: f64, nu: f64) -> f64 {
    0.5 * (2.0 * std::f64::consts::PI / nu).ln() + ln_gamma(alpha) - ln_gamma(alpha + 0.5)
}

/// Negative log-likelihood of residual `r` under the zero-mean NIG.
pub fn nig_nll(r: f64, p: &NigParams) -> f64 {
    let omega = p.beta + 0.5 * p.nu * r * r;
    -p.alpha * p.beta.ln() + (p.alpha + 0.5) * omega.ln() + log_normalizer(p.alpha, p.nu)
}

/// Loss value and its partial derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NigGrad {
    pub loss: f64,
    pub d_r: f64,
    pub d_alpha: f64,
    pub d_beta: f64,
    pub d_nu: f64,
}

pub fn nig_nll_grad(r: f64, p: &NigParams) -> NigGrad {
    let omega = p.beta + 0.5 * p.nu * r * r;
    let a_half = p.alpha + 0.5;
    NigGrad {
        loss: nig_nll(r, p),
        d_r: a_half * p.nu * r / omega,
        d_alpha: -p.beta.ln() + omega.ln() + digamma(p.alpha) - digamma(a_half),
        d_beta: -p.alpha / p.beta + a_half / omega,
        d_nu: a_half * 0.5 * r * r / omega - 0.5 / p.nu,
    }
}

/// Evidence regulariser `|r|·(2ν + α)`.
pub fn nig_reg(r: f64, p: &NigParams) -> f64 {
    r.abs() * (2.0 * p.nu + p.alpha)
}

pub fn nig_reg_grad(r: f64, p: &NigParams) -> NigGrad {
    NigGrad {
        loss: nig_reg(r, p),
        d_r: r.signum() * (2.0 * p.nu + p.alpha) * (r != 0.0) as u8 as f64,
        d_alpha: r.abs(),
        d_beta: 0.0,
        d_nu: 2.0 * r.abs(),
    }
}

/// Aleatoric, epistemic and total variance of one voxel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Uncertainty {
    pub aleatoric: f64,
    pub epistemic: f64,
    pub total: f64,
}

pub fn decompose(p: &NigParams) -> Result<Uncertainty> {
    if !(p.alpha > 1.0) {
        return Err(Error::InvalidAlpha(p.alpha));
    }
    let aleatoric = p.beta / (p.alpha - 1.0);
    let epistemic = aleatoric / p.nu;
    Ok(Uncertainty {
        aleatoric,
        epistemic,
        total: aleatoric + epistemic,
    })
}

/// Half-width `k·σ_total` of the zero-centred interval.
pub fn coverage_interval(p: &NigParams, k: f64) -> Result<f64> {
    Ok(k * decompose(p)?.total.sqrt())
}

/// Voxel grids of residual variance, in (a.u./s)².
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyMaps {
    pub aleatoric: Vec<f32>,
    pub epistemic: Vec<f32>,
    pub total: Vec<f32>,
}

impl UncertaintyMaps {
    /// Build from per-voxel variances; `total` is formed as `ale + epi` in f32.
    pub fn from_parts(aleatoric: Vec<f32>, epistemic: Vec<f32>) -> Self {
        let total = aleatoric.iter().zip(&epistemic).map(|(a, e)| a + e).collect();
        Self {
            aleatoric,
            epistemic,
            total,
        }
    }
}
