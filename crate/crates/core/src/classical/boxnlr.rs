//! Box-residue nonlinear regression: coarse grid search followed by a bounded
//! Nelder–Mead refinement of (cbv, mtt, delay).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinetics::{tissue_curve_box_series, TimeSeries, VoxelParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NlrConfig {
    /// Log-spaced CBV grid bounds, ml/100g.
    pub cbv_range: (f64, f64),
    pub mtt_range: (f64, f64),
    pub delay_range: (f64, f64),
    pub grid_steps: usize,
    pub max_iter: usize,
    /// Stop when the simplex objective spread falls below this.
    pub tol: f64,
}

impl Default for NlrConfig {
    fn default() -> Self {
        Self {
            cbv_range: (0.05, 20.0),
            mtt_range: (1.0, 30.0),
            delay_range: (0.0, 15.0),
            grid_steps: 16,
            max_iter: 200,
            tol: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NlrFit {
    pub params: VoxelParams,
    pub sse: f64,
    /// False when refinement did not improve on the best grid point.
    pub refined: bool,
    pub iterations: usize,
    /// Best objective after each refinement iteration.
    pub history: Vec<f64>,
}

fn linspace(lo: f64, hi: f64, n: usize) -> impl Iterator<Item = f64> {
    (0..n).map(move |i| if n == 1 { lo } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 })
}

/// Sum of squared differences between `tissue` and the box model at `theta`.
fn objective(aif: &TimeSeries, tissue: &TimeSeries, theta: [f64; 3]) -> f64 {
    let Ok(p) = VoxelParams::new(theta[0], theta[1], theta[2]) else {
        return f64::INFINITY;
    };
    match tissue_curve_box_series(aif, &p, tissue.times()) {
        Ok(model) => model
            .iter()
            .zip(tissue.values())
            .map(|(m, c)| (c - m).powi(2))
            .sum(),
        Err(_) => f64::INFINITY,
    }
}

pub fn boxnlr_fit(aif: &TimeSeries, tissue: &TimeSeries, cfg: &NlrConfig) -> Result<NlrFit> {
    if aif.values().iter().all(|&v| v == 0.0) {
        return Err(Error::SingularAif);
    }
    let n = cfg.grid_steps.max(1);
    let (c_lo, c_hi) = cfg.cbv_range;
    let cbv_grid: Vec<f64> = linspace(c_lo.ln(), c_hi.ln(), n).map(f64::exp).collect();
    let c = tissue.values();

    // the model is linear in cbv, so one unit-cbv curve serves the whole cbv axis
    let mut best = ([cbv_grid[0], cfg.mtt_range.0, cfg.delay_range.0], f64::INFINITY);
    for mtt in linspace(cfg.mtt_range.0, cfg.mtt_range.1, n) {
        for delay in linspace(cfg.delay_range.0, cfg.delay_range.1, n) {
            let unit = VoxelParams::new(1.0, mtt, delay)?;
            let g = tissue_curve_box_series(aif, &unit, tissue.times())?;
            let gg: f64 = g.iter().map(|v| v * v).sum();
            let cg: f64 = g.iter().zip(c).map(|(a, b)| a * b).sum();
            let cc: f64 = c.iter().map(|v| v * v).sum();
            for &cbv in &cbv_grid {
                let sse = cc - 2.0 * cbv * cg + cbv * cbv * gg;
                if sse < best.1 {
                    best = ([cbv, mtt, delay], sse);
                }
            }
        }
    }
    let grid_theta = best.0;
    let grid_sse = objective(aif, tissue, grid_theta);

    let lower = [0.0, cfg.mtt_range.0, cfg.delay_range.0];
    let upper = [2.0 * c_hi, cfg.mtt_range.1, cfg.delay_range.1];
    let step = [
        0.1 * grid_theta[0].max(0.1),
        (cfg.mtt_range.1 - cfg.mtt_range.0) / (2 * n) as f64,
        (cfg.delay_range.1 - cfg.delay_range.0) / (2 * n) as f64,
    ];
    let nm = nelder_mead(
        |x| objective(aif, tissue, x),
        grid_theta,
        step,
        lower,
        upper,
        cfg.max_iter,
        cfg.tol,
    );
    let refined = nm.value.is_finite() && nm.value < grid_sse;
    let (theta, sse) = if refined { (nm.point, nm.value) } else { (grid_theta, grid_sse) };
    Ok(NlrFit {
        params: VoxelParams::new(theta[0], theta[1], theta[2])?,
        sse,
        refined,
        iterations: nm.iterations,
        history: nm.history,
    })
}

struct NmResult {
    point: [f64; 3],
    value: f64,
    iterations: usize,
    history: Vec<f64>,
}

fn project(x: [f64; 3], lo: [f64; 3], hi: [f64; 3]) -> [f64; 3] {
    std::array::from_fn(|i| x[i].clamp(lo[i], hi[i]))
}

fn combine(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    // a + t·(b − a)
    std::array::from_fn(|i| a[i] + t * (b[i] - a[i]))
}

/// Nelder–Mead with box constraints enforced by projection.
fn nelder_mead<F: Fn([f64; 3]) -> f64>(
    f: F,
    start: [f64; 3],
    step: [f64; 3],
    lo: [f64; 3],
    hi: [f64; 3],
    max_iter: usize,
    tol: f64,
) -> NmResult {
    let mut simplex: Vec<([f64; 3], f64)> = Vec::with_capacity(4);
    let x0 = project(start, lo, hi);
    simplex.push((x0, f(x0)));
    for i in 0..3 {
        let mut x = x0;
        x[i] += step[i];
        if x[i] > hi[i] {
            x[i] = x0[i] - step[i];
        }
        let x = project(x, lo, hi);
        simplex.push((x, f(x)));
    }
    let mut history = Vec::with_capacity(max_iter);
    let mut iterations = 0;
    for _ in 0..max_iter {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        if (simplex[3].1 - simplex[0].1).abs() <= tol * (1.0 + simplex[0].1.abs()) {
            break;
        }
        iterations += 1;
        let centroid: [f64; 3] = std::array::from_fn(|i| (simplex[0].0[i] + simplex[1].0[i] + simplex[2].0[i]) / 3.0);
        let worst = simplex[3];
        let reflect = project(combine(centroid, worst.0, -1.0), lo, hi);
        let fr = f(reflect);
        if fr < simplex[0].1 {
            let expand = project(combine(centroid, worst.0, -2.0), lo, hi);
            let fe = f(expand);
            simplex[3] = if fe < fr { (expand, fe) } else { (reflect, fr) };
        } else if fr < simplex[2].1 {
            simplex[3] = (reflect, fr);
        } else {
            let (target, ft) = if fr < worst.1 { (reflect, fr) } else { worst };
            let contract = project(combine(centroid, target, 0.5), lo, hi);
            let fc = f(contract);
            if fc < ft {
                simplex[3] = (contract, fc);
            } else {
                let best = simplex[0].0;
                for v in simplex.iter_mut().skip(1) {
                    let x = combine(best, v.0, 0.5);
                    *v = (x, f(x));
                }
            }
        }
        let best = simplex.iter().map(|v| v.1).fold(f64::INFINITY, f64::min);
        history.push(best);
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    NmResult {
        point: simplex[0].0,
        value: simplex[0].1,
        iterations,
        history,
    }
}
