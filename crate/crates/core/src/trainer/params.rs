//! Mapping from raw parameter-network outputs to physical quantities.

use crate::evidential::{sigmoid, softplus, transform, transform_jacobian, NigParams};
use crate::kinetics::{VoxelParams, EPS_CBF, UNIT_K};

/// Column order of the raw parameter-network output.
pub const RAW_CBV: usize = 0;
pub const RAW_MTT: usize = 1;
pub const RAW_DELAY: usize = 2;
pub const RAW_ALPHA: usize = 3;
pub const RAW_BETA: usize = 4;
pub const RAW_NU: usize = 5;

/// Additive MTT floor, s.
pub const MTT_OFFSET: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamHead {
    /// ml/100g per unit softplus.
    pub s_cbv: f64,
    /// s per unit softplus.
    pub s_mtt: f64,
    /// s per unit exp.
    pub s_delay: f64,
    /// ml/100g/min per unit softplus, used when CBF is predicted directly.
    pub s_cbf: f64,
    pub eps_p: f64,
    pub predict_cbf: bool,
}

impl ParamHead {
    pub fn new(eps_p: f64, predict_cbf: bool) -> Self {
        Self {
            s_cbv: 6.0,
            s_mtt: 12.0,
            s_delay: 2.0,
            s_cbf: 60.0,
            eps_p,
            predict_cbf,
        }
    }

    pub fn eval(&self, raw: &[f64]) -> HeadOutput {
        let mtt = self.s_mtt * softplus(raw[RAW_MTT]) + MTT_OFFSET;
        let dmtt = self.s_mtt * sigmoid(raw[RAW_MTT]);
        let e = raw[RAW_DELAY].exp();
        let delay = self.s_delay * e + self.eps_p;
        let ddelay = self.s_delay * e;
        let (rate, drate_dcbv_raw, drate_dmtt_raw, cbv) = if self.predict_cbf {
            let cbf = self.s_cbf * softplus(raw[RAW_CBV]);
            let rate = cbf / UNIT_K;
            let cbv = rate * (mtt + EPS_CBF);
            (rate, self.s_cbf * sigmoid(raw[RAW_CBV]) / UNIT_K, 0.0, cbv)
        } else {
            let cbv = self.s_cbv * softplus(raw[RAW_CBV]);
            let denom = mtt + EPS_CBF;
            let rate = cbv / denom;
            let dcbv = self.s_cbv * sigmoid(raw[RAW_CBV]);
            (rate, dcbv / denom, -rate / denom * dmtt, cbv)
        };
        HeadOutput {
            cbv,
            mtt,
            delay,
            rate,
            nig: transform(raw[RAW_ALPHA], raw[RAW_BETA], raw[RAW_NU]),
            drate_draw: [drate_dcbv_raw, drate_dmtt_raw],
            dmtt_draw: dmtt,
            ddelay_draw: ddelay,
            dnig_draw: transform_jacobian(raw[RAW_ALPHA], raw[RAW_BETA], raw[RAW_NU]),
        }
    }

    /// Raw output that maps to the requested physical value (inverse head).
    pub fn raw_targets(&self, cbf: f64, mtt: f64, delay: f64) -> [f64; 6] {
        let inv_softplus = |y: f64| y.exp_m1().ln();
        let raw_mtt = inv_softplus((mtt - MTT_OFFSET) / self.s_mtt);
        let raw_cbv = if self.predict_cbf {
            inv_softplus(cbf / self.s_cbf)
        } else {
            inv_softplus(cbf * (mtt + EPS_CBF) / UNIT_K / self.s_cbv)
        };
        let raw_delay = ((delay - self.eps_p).max(1e-12) / self.s_delay).ln();
        [raw_cbv, raw_mtt, raw_delay, 0.0, 0.0, 0.0]
    }
}

/// Physical values and partial derivatives for one query point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadOutput {
    pub cbv: f64,
    pub mtt: f64,
    pub delay: f64,
    /// 1/s
    pub rate: f64,
    pub nig: NigParams,
    /// ∂rate/∂(raw cbv or cbf, raw mtt)
    pub drate_draw: [f64; 2],
    pub dmtt_draw: f64,
    pub ddelay_draw: f64,
    pub dnig_draw: [f64; 3],
}

impl HeadOutput {
    pub fn voxel_params(&self) -> crate::Result<VoxelParams> {
        VoxelParams::new(self.cbv, self.mtt, self.delay)
    }

    pub fn cbf(&self) -> f64 {
        UNIT_K * self.rate
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_raw_values() {
        let head = ParamHead::new(0.05, false);
        let out = head.eval(&[0.0; 6]);
        let ln2 = std::f64::consts::LN_2;
        assert!((out.cbv - 6.0 * ln2).abs() < 1e-12);
        assert!((out.mtt - (12.0 * ln2 + 0.1)).abs() < 1e-12);
        assert!((out.delay - 2.05).abs() < 1e-12);
    }

    #[test]
    fn bounds_hold_for_extreme_raw() {
        for predict_cbf in [false, true] {
            let head = ParamHead::new(0.05, predict_cbf);
            for x in [-1e3, -50.0, -1.0, 0.0, 1.0, 30.0] {
                let out = head.eval(&[x; 6]);
                assert!(out.delay >= 0.05);
                assert!(out.mtt >= 0.1);
                assert!(out.cbv >= 0.0 && out.rate >= 0.0);
                assert!(out.nig.is_valid());
            }
        }
    }

    #[test]
    fn raw_targets_invert_head() {
        for predict_cbf in [false, true] {
            let head = ParamHead::new(0.05, predict_cbf);
            let raw = head.raw_targets(20.0, 4.0, 2.0);
            let out = head.eval(&raw);
            assert!((out.cbf() - 20.0).abs() < 1e-9);
            assert!((out.mtt - 4.0).abs() < 1e-9);
            assert!((out.delay - 2.0).abs() < 1e-9);
            let vp = out.voxel_params().unwrap();
            assert!((vp.cbf - 20.0).abs() < 1e-9);
        }
    }

    #[test]
    fn partials_match_finite_differences() {
        for predict_cbf in [false, true] {
            let head = ParamHead::new(0.05, predict_cbf);
            let raw = [0.3, -0.7, 0.2, 0.1, -0.4, 0.9];
            let out = head.eval(&raw);
            let h = 1e-6;
            let fd = |k: usize, f: &dyn Fn(&HeadOutput) -> f64| {
                let mut p = raw;
                let mut m = raw;
                p[k] += h;
                m[k] -= h;
                (f(&head.eval(&p)) - f(&head.eval(&m))) / (2.0 * h)
            };
            assert!((fd(RAW_CBV, &|o| o.rate) - out.drate_draw[0]).abs() < 1e-7);
            assert!((fd(RAW_MTT, &|o| o.rate) - out.drate_draw[1]).abs() < 1e-7);
            assert!((fd(RAW_MTT, &|o| o.mtt) - out.dmtt_draw).abs() < 1e-6);
            assert!((fd(RAW_DELAY, &|o| o.delay) - out.ddelay_draw).abs() < 1e-6);
        }
    }
}
