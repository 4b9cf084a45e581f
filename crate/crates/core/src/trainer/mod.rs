//! Per-case EPPINN optimisation.
//!
//! Three coordinate networks are fitted jointly: an AIF network `â(τ)`, a
//! tissue network `ĉ(τ, h(x))` and a parameter network `θ(h(x))`, where `h` is
//! the shared hash encoding and `τ = 2t/D − 1`. Networks work on normalised
//! signals `ĉ = C/S_c`, `â = C_a/S_a`, so the physics residual becomes
//!
//! `r̂ = δ·∂ĉ/∂τ − κ·rate·[â(τ − δΔt) − â(τ − δ(Δt + MTT))]`
//!
//! with `δ = 2/D = dτ/dt` and `κ = S_a/S_c`, i.e. a residual in units of `S_c`
//! per second. Physical residuals are `r = S_c·r̂`.

pub mod config;
pub mod losses;
pub mod params;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use config::{Ablations, AnnealSchedule, TrainConfig};
pub use losses::{anticollapse_loss, prior_loss, BatchLoss};
pub use params::{HeadOutput, ParamHead};

use crate::error::{Error, Result};
use crate::evidential::{decompose, nig_nll_grad, nig_reg_grad, UncertaintyMaps};
use crate::grid::Geometry;
use crate::io::CaseBundle;
use crate::kinetics::VoxelParams;
use crate::maps::PerfusionMaps;
use crate::nn::{Adam, HashEncoding, NetworkBundle, OneCycle, Real, SirenMlp, SirenTape};

/// `x / fov` per axis.
pub fn fov_normalize(x_mm: [f64; 3], fov_mm: [f64; 3]) -> [f64; 3] {
    std::array::from_fn(|a| x_mm[a] / fov_mm[a])
}

/// Hash-grid coordinates of every voxel centre.
///
/// The adaptive mode divides physical positions by the field of view; the
/// ablated mode divides voxel indices by the largest grid extent.
pub fn voxel_coordinates(geometry: &Geometry, adaptive: bool) -> Vec<[f64; 3]> {
    let dims = geometry.dims;
    let fov = geometry.fov_mm();
    let extent = dims.x.max(dims.y).max(dims.z) as f64;
    (0..dims.n_voxels())
        .map(|v| {
            if adaptive {
                fov_normalize(geometry.center_mm(v), fov)
            } else {
                let (x, y, z) = dims.coords(v);
                [(x as f64 + 0.5) / extent, (y as f64 + 0.5) / extent, (z as f64 + 0.5) / extent]
            }
        })
        .collect()
}

/// Signal and time normalisation of one case.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalizer {
    pub s_c: f64,
    pub s_a: f64,
    pub duration: f64,
}

impl Normalizer {
    pub fn from_case(case: &CaseBundle) -> Self {
        let s_a = case.aif.iter().fold(0.0f64, |m, v| m.max((*v as f64).abs())).max(1e-6);
        let n = case.n_voxels();
        let mut s_c = 0.0f64;
        for (i, v) in case.ctp.iter().enumerate() {
            if case.in_brain(i % n) {
                s_c = s_c.max((*v as f64).abs());
            }
        }
        Self {
            s_c: s_c.max(1e-6),
            s_a,
            duration: case.duration(),
        }
    }

    pub fn tau(&self, t: f64) -> f64 {
        2.0 * t / self.duration - 1.0
    }

    /// `dτ/dt`.
    pub fn delta(&self) -> f64 {
        2.0 / self.duration
    }

    pub fn kappa(&self) -> f64 {
        self.s_a / self.s_c
    }

    /// Physical residual units per normalised unit.
    pub fn residual_scale(&self) -> f64 {
        self.s_c
    }
}

/// One iteration's samples in normalised units.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Batch {
    pub aif_tau: Vec<f64>,
    pub aif_target: Vec<f64>,
    pub data_coords: Vec<[f64; 3]>,
    pub data_tau: Vec<f64>,
    pub data_target: Vec<f64>,
    pub res_coords: Vec<[f64; 3]>,
    pub res_tau: Vec<f64>,
}

/// Loss weights and constants for one evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSettings {
    pub lambda_data: f64,
    pub lambda_res: f64,
    pub lambda_edl: f64,
    pub lambda_reg: f64,
    pub lambda_ac: f64,
    pub lambda_pr: f64,
    pub delay_min: f64,
    pub delay_max: f64,
    pub mtt_max: f64,
    /// Annealing weight of the evidential terms.
    pub omega: f64,
    pub evidential: bool,
    pub anticollapse: bool,
    pub kappa: f64,
    pub delta: f64,
    /// Tissue and arterial signal scales; losses are evaluated in physical units.
    pub s_c: f64,
    pub s_a: f64,
}

impl LossSettings {
    pub fn new(cfg: &TrainConfig, norm: &Normalizer, iteration: usize) -> Self {
        Self {
            lambda_data: cfg.lambda_data,
            lambda_res: cfg.lambda_res,
            lambda_edl: cfg.lambda_edl,
            lambda_reg: cfg.lambda_reg,
            lambda_ac: cfg.lambda_ac,
            lambda_pr: cfg.lambda_pr,
            delay_min: cfg.delay_min,
            delay_max: cfg.delay_max,
            mtt_max: cfg.mtt_max,
            omega: cfg.anneal_weight(iteration),
            evidential: !cfg.ablations.no_evidential,
            anticollapse: !cfg.ablations.no_anticollapse,
            kappa: norm.kappa(),
            delta: norm.delta(),
            s_c: norm.s_c,
            s_a: norm.s_a,
        }
    }
}

/// Loss components of one evaluation: unweighted means in physical units
/// unless noted.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    /// Weighted total.
    pub total: f64,
    pub data_aif: f64,
    pub data_tissue: f64,
    pub res_l1: f64,
    pub nll: f64,
    pub reg: f64,
    /// Weighted anti-collapse term.
    pub ac: f64,
    /// Weighted prior term.
    pub prior: f64,
    pub mean_cbf: f64,
}

/// Values needed to form residuals at a set of (x, τ) points.
struct ResidualEval<T> {
    enc: HashEncoding<T>,
    param_tape: SirenTape<T>,
    tissue_tape: SirenTape<T>,
    aif_tape: SirenTape<T>,
    heads: Vec<HeadOutput>,
    residual: Vec<f64>,
    // shifted AIF values and τ-derivatives, zero where the shift leaves the acquisition
    a: [Vec<f64>; 2],
    da: [Vec<f64>; 2],
}

fn to_real<T: Real>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::of(x)).collect()
}

fn tissue_input<T: Real>(enc: &HashEncoding<T>, taus: &[f64]) -> Vec<T> {
    let f = enc.features.len() / enc.batch.max(1);
    let mut input = Vec::with_capacity(enc.batch * (f + 1));
    for (i, &tau) in taus.iter().enumerate() {
        input.push(T::of(tau));
        input.extend_from_slice(&enc.features[i * f..(i + 1) * f]);
    }
    input
}

fn eval_residual<T: Real>(
    nets: &NetworkBundle<T>,
    head: &ParamHead,
    coords: &[[f64; 3]],
    taus: &[f64],
    kappa: f64,
    delta: f64,
) -> ResidualEval<T> {
    let n = coords.len();
    let enc = nets.hash.encode(coords);
    let param_tape = nets.param.forward(&enc.features, n, None);
    let raw = param_tape.values();
    let p_out = nets.param.out_dim();
    let heads: Vec<HeadOutput> = (0..n)
        .map(|i| {
            let r: Vec<f64> = raw[i * p_out..(i + 1) * p_out].iter().map(|v| v.f64()).collect();
            head.eval(&r)
        })
        .collect();
    let tissue_tape = nets.tissue.forward_with_time_derivative(&tissue_input(&enc, taus), n);

    let mut shifted = Vec::with_capacity(2 * n);
    shifted.extend((0..n).map(|i| taus[i] - delta * heads[i].delay));
    shifted.extend((0..n).map(|i| taus[i] - delta * (heads[i].delay + heads[i].mtt)));
    let aif_tape = nets.aif.forward_with_time_derivative(&to_real(&shifted), 2 * n);
    let (vals, tans) = (aif_tape.values(), aif_tape.tangents());
    let inside = |k: usize| shifted[k] >= -1.0;
    let pick = |src: &[T], k: usize| if inside(k) { src[k].f64() } else { 0.0 };
    let a = [
        (0..n).map(|i| pick(vals, i)).collect::<Vec<_>>(),
        (0..n).map(|i| pick(vals, n + i)).collect::<Vec<_>>(),
    ];
    let da = [
        (0..n).map(|i| pick(tans, i)).collect::<Vec<_>>(),
        (0..n).map(|i| pick(tans, n + i)).collect::<Vec<_>>(),
    ];
    let dc = tissue_tape.tangents();
    let residual = (0..n)
        .map(|i| delta * dc[i].f64() - kappa * heads[i].rate * (a[0][i] - a[1][i]))
        .collect();
    ResidualEval {
        enc,
        param_tape,
        tissue_tape,
        aif_tape,
        heads,
        residual,
        a,
        da,
    }
}

fn l1_grad(diff: f64) -> f64 {
    if diff > 0.0 {
        1.0
    } else if diff < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Evaluate the composite loss on `batch` and accumulate parameter gradients
/// into `nets` (callers zero them first).
pub fn loss_and_grad<T: Real>(nets: &mut NetworkBundle<T>, head: &ParamHead, batch: &Batch, s: &LossSettings) -> LossParts {
    let mut parts = LossParts::default();
    let feat_dim = nets.hash.output_dim();

    // AIF data term
    let n_a = batch.aif_tau.len();
    if n_a > 0 {
        let tape = nets.aif.forward(&to_real(&batch.aif_tau), n_a, None);
        let mut g = vec![T::zero(); n_a];
        for i in 0..n_a {
            let d = s.s_a * (tape.output[i].f64() - batch.aif_target[i]);
            parts.data_aif += d.abs() / n_a as f64;
            g[i] = T::of(s.lambda_data * s.s_a * l1_grad(d) / n_a as f64);
        }
        nets.aif.backward(&tape, &g);
    }

    // tissue data term
    let n_d = batch.data_tau.len();
    if n_d > 0 {
        let enc = nets.hash.encode(&batch.data_coords);
        let tape = nets.tissue.forward(&tissue_input(&enc, &batch.data_tau), n_d, None);
        let mut g = vec![T::zero(); n_d];
        for i in 0..n_d {
            let d = s.s_c * (tape.output[i].f64() - batch.data_target[i]);
            parts.data_tissue += d.abs() / n_d as f64;
            g[i] = T::of(s.lambda_data * s.s_c * l1_grad(d) / n_d as f64);
        }
        let g_in = nets.tissue.backward(&tape, &g);
        let g_feat = strip_time_column(&g_in, n_d, feat_dim);
        nets.hash.backward(&enc, &g_feat);
    }

    // physics residual, evidential and batch regularisers
    let n = batch.res_tau.len();
    if n > 0 {
        let ev = eval_residual(nets, head, &batch.res_coords, &batch.res_tau, s.kappa, s.delta);
        let nf = n as f64;
        let delays: Vec<f64> = ev.heads.iter().map(|h| h.delay).collect();
        let mtts: Vec<f64> = ev.heads.iter().map(|h| h.mtt).collect();
        let ac = s
            .anticollapse
            .then(|| anticollapse_loss(&delays, &mtts, s.lambda_ac));
        let pr = prior_loss(&delays, &mtts, s.lambda_pr, s.delay_min, s.delay_max, s.mtt_max);
        parts.ac = ac.as_ref().map_or(0.0, |a| a.loss);
        parts.prior = pr.loss;

        let w_edl = s.lambda_res * s.omega * s.lambda_edl / nf;
        let mut g_raw = vec![T::zero(); n * 6];
        let mut g_tissue = vec![T::zero(); 2 * n];
        let mut g_aif = vec![T::zero(); 4 * n];
        for i in 0..n {
            let r = s.s_c * ev.residual[i];
            let h = &ev.heads[i];
            parts.res_l1 += r.abs() / nf;
            parts.mean_cbf += h.cbf() / nf;
            let mut g_r = s.lambda_res * l1_grad(r) / nf;
            let mut g_nig = [0.0; 3];
            if s.evidential {
                let nll = nig_nll_grad(r, &h.nig);
                let reg = nig_reg_grad(r, &h.nig);
                parts.nll += nll.loss / nf;
                parts.reg += reg.loss / nf;
                g_r += w_edl * (nll.d_r + s.lambda_reg * reg.d_r);
                g_nig = [
                    w_edl * (nll.d_alpha + s.lambda_reg * reg.d_alpha),
                    w_edl * (nll.d_beta + s.lambda_reg * reg.d_beta),
                    w_edl * (nll.d_nu + s.lambda_reg * reg.d_nu),
                ];
            }
            // chain from the physical to the normalised residual
            let g_r = g_r * s.s_c;
            let scale = s.kappa * h.rate;
            let g_rate = -g_r * s.kappa * (ev.a[0][i] - ev.a[1][i]);
            let mut g_delay = g_r * scale * s.delta * (ev.da[0][i] - ev.da[1][i]) + pr.d_delay[i];
            let mut g_mtt = -g_r * scale * s.delta * ev.da[1][i] + pr.d_mtt[i];
            if let Some(ac) = &ac {
                g_delay += ac.d_delay[i];
                g_mtt += ac.d_mtt[i];
            }
            let row = &mut g_raw[i * 6..(i + 1) * 6];
            row[params::RAW_CBV] = T::of(g_rate * h.drate_draw[0]);
            row[params::RAW_MTT] = T::of(g_rate * h.drate_draw[1] + g_mtt * h.dmtt_draw);
            row[params::RAW_DELAY] = T::of(g_delay * h.ddelay_draw);
            for k in 0..3 {
                row[params::RAW_ALPHA + k] = T::of(g_nig[k] * h.dnig_draw[k]);
            }
            g_tissue[n + i] = T::of(g_r * s.delta);
            // masked shifts carry zero value, so their gradient must vanish too
            if ev.a[0][i] != 0.0 || ev.da[0][i] != 0.0 {
                g_aif[i] = T::of(-g_r * scale);
            }
            if ev.a[1][i] != 0.0 || ev.da[1][i] != 0.0 {
                g_aif[n + i] = T::of(g_r * scale);
            }
        }
        nets.aif.backward(&ev.aif_tape, &g_aif);
        let g_in_t = nets.tissue.backward(&ev.tissue_tape, &g_tissue);
        let g_in_p = nets.param.backward(&ev.param_tape, &g_raw);
        let mut g_feat = strip_time_column(&g_in_t[..n * (feat_dim + 1)], n, feat_dim);
        for (a, b) in g_feat.iter_mut().zip(&g_in_p) {
            *a += *b;
        }
        nets.hash.backward(&ev.enc, &g_feat);
    }

    parts.total = s.lambda_data * (parts.data_aif + parts.data_tissue)
        + s.lambda_res * (parts.res_l1 + s.omega * s.lambda_edl * (parts.nll + s.lambda_reg * parts.reg))
        + parts.ac
        + parts.prior;
    parts
}

fn strip_time_column<T: Real>(g_in: &[T], rows: usize, feat_dim: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(rows * feat_dim);
    for i in 0..rows {
        out.extend_from_slice(&g_in[i * (feat_dim + 1) + 1..(i + 1) * (feat_dim + 1)]);
    }
    out
}

/// Fit the AIF network to `(τ, target)` pairs with the L1 data term only.
/// Returns the final mean absolute error.
pub fn pretrain_aif<T: Real>(net: &mut SirenMlp<T>, taus: &[f64], targets: &[f64], iterations: usize, max_lr: f64) -> Result<f64> {
    if taus.is_empty() || taus.len() != targets.len() {
        return Err(Error::InvalidParams("AIF pretraining needs matching, nonempty samples".into()));
    }
    let n = taus.len();
    let input = to_real::<T>(taus);
    let mut adam = Adam::<T>::default();
    let schedule = OneCycle::new(max_lr, iterations.max(1));
    let mut mae = f64::NAN;
    for it in 0..iterations {
        net.zero_grad();
        let tape = net.forward(&input, n, None);
        let mut g = vec![T::zero(); n];
        let mut loss = 0.0;
        for i in 0..n {
            let d = tape.output[i].f64() - targets[i];
            loss += d.abs() / n as f64;
            g[i] = T::of(l1_grad(d) / n as f64);
        }
        if !loss.is_finite() {
            return Err(Error::AifPretrainDiverged(it));
        }
        mae = loss;
        net.backward(&tape, &g);
        adam.step(&mut net.tensors_mut(), schedule.lr(it));
    }
    Ok(mae)
}

/// Shift the parameter-network output biases so the mean raw output over
/// `probe_coords` maps to CBF ≈ 20 ml/100g/min, MTT ≈ 4 s and Δt ≈ 2 s, with
/// zero raw evidential outputs.
pub fn phys_init<T: Real>(nets: &mut NetworkBundle<T>, head: &ParamHead, probe_coords: &[[f64; 3]]) {
    let n = probe_coords.len();
    if n == 0 {
        return;
    }
    let mut target = head.raw_targets(20.0, 4.0, 2.0);
    target[params::RAW_DELAY] = (2.0 / head.s_delay).ln();
    let enc = nets.hash.encode(probe_coords);
    let tape = nets.param.forward(&enc.features, n, None);
    let out = nets.param.out_dim();
    let bias = &mut nets.param.layers.last_mut().unwrap().bias.data;
    for j in 0..out {
        let mean = (0..n).map(|i| tape.output[i * out + j].f64()).sum::<f64>() / n as f64;
        bias[j] = T::of(bias[j].f64() + target[j] - mean);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub lr: f64,
    pub omega: f64,
    pub parts: LossParts,
}

/// Loss components recorded every `trace_every` iterations.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub rows: Vec<TraceRow>,
}

impl Trace {
    pub const HEADER: &'static str = "iteration,lr,omega,total,data_aif,data_tissue,res_l1,nll,reg,anticollapse,prior,mean_cbf";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::HEADER);
        s.push('\n');
        for r in &self.rows {
            let p = &r.parts;
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.iteration, r.lr, r.omega, p.total, p.data_aif, p.data_tissue, p.res_l1, p.nll, p.reg, p.ac, p.prior, p.mean_cbf
            ));
        }
        s
    }

    pub fn has_nan(&self) -> bool {
        self.rows.iter().any(|r| !r.parts.total.is_finite())
    }
}

/// Per-voxel NIG parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct NigField {
    pub alpha: Vec<f32>,
    pub beta: Vec<f32>,
    pub nu: Vec<f32>,
}

/// Physical residuals of the trained model at random (voxel, t) draws.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResidualProbes {
    pub voxel: Vec<usize>,
    pub t: Vec<f64>,
    /// a.u./s
    pub residual: Vec<f64>,
    /// Total predictive standard deviation of the probe's voxel, a.u./s.
    pub sigma: Vec<f64>,
}

impl ResidualProbes {
    pub fn coverage(&self, k: f64) -> Result<f64> {
        crate::metrics::coverage(&self.residual, &self.sigma, k)
    }

    /// Coverage of each voxel's time-RMS residual against its σ.
    pub fn voxel_coverage(&self, k: f64) -> Result<f64> {
        let mut order: Vec<usize> = (0..self.voxel.len()).collect();
        order.sort_by_key(|&i| self.voxel[i]);
        let mut groups: Vec<Vec<f64>> = Vec::new();
        let mut sigmas = Vec::new();
        let mut last = None;
        for i in order {
            if last != Some(self.voxel[i]) {
                groups.push(Vec::new());
                sigmas.push(self.sigma[i]);
                last = Some(self.voxel[i]);
            }
            groups.last_mut().unwrap().push(self.residual[i]);
        }
        crate::metrics::voxel_coverage(&groups, &sigmas, k)
    }
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub maps: PerfusionMaps,
    pub nig: Option<NigField>,
    /// Residual variances in (a.u./s)²; present unless the evidential head is off.
    pub uncertainty: Option<UncertaintyMaps>,
    pub trace: Trace,
    pub probes: ResidualProbes,
    pub normalizer: Normalizer,
    pub aif_pretrain_mae: Option<f64>,
    pub flags: Vec<String>,
}

/// One training session over one case.
pub struct Trainer {
    cfg: TrainConfig,
    head: ParamHead,
    norm: Normalizer,
    dims: crate::grid::Dims,
    nets: NetworkBundle<f32>,
    coords: Vec<[f64; 3]>,
    brain: Vec<usize>,
    frame_tau: Vec<f64>,
    aif_target: Vec<f64>,
    // voxel-major normalised tissue curves
    tissue: Vec<f32>,
    n_frames: usize,
    rng: ChaCha8Rng,
    adam: Adam<f32>,
    schedule: OneCycle,
    iteration: usize,
    trace: Trace,
    aif_pretrain_mae: Option<f64>,
    flags: Vec<String>,
}

const STREAM_INIT: u64 = 1;
const STREAM_SAMPLING: u64 = 2;
const STREAM_PROBES: u64 = 3;

fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl Trainer {
    pub fn new(case: &CaseBundle, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        case.validate()?;
        let brain = case.brain_voxels();
        if brain.is_empty() {
            return Err(Error::InvalidSpec("case has no brain voxels".into()));
        }
        let norm = Normalizer::from_case(case);
        let n_frames = case.n_frames();
        let n_vox = case.n_voxels();
        let tissue_vm = crate::grid::to_voxel_major(&case.ctp, n_vox, n_frames);
        let tissue = tissue_vm.iter().map(|v| (*v as f64 / norm.s_c) as f32).collect();
        let mut init_rng = seeded(cfg.seed, STREAM_INIT);
        let nets = NetworkBundle::new(cfg.network.clone(), &mut init_rng);
        let coords = voxel_coordinates(&case.geometry, !cfg.ablations.no_adaptive_hash);
        let mut flags = Vec::new();
        if coords.iter().flatten().any(|c| !(0.0..=1.0).contains(c)) {
            flags.push("hash-coords-clamped".to_string());
        }
        Ok(Self {
            head: ParamHead::new(cfg.eps_p, cfg.ablations.no_cbv_param),
            norm,
            dims: case.dims(),
            nets,
            coords,
            brain,
            frame_tau: case.frame_times.iter().map(|&t| norm.tau(t)).collect(),
            aif_target: case.aif.iter().map(|&v| v as f64 / norm.s_a).collect(),
            tissue,
            n_frames,
            rng: seeded(cfg.seed, STREAM_SAMPLING),
            adam: Adam::default(),
            schedule: OneCycle::new(cfg.learning_rate, cfg.iterations),
            iteration: 0,
            trace: Trace::default(),
            aif_pretrain_mae: None,
            flags,
            cfg: cfg.clone(),
        })
    }

    pub fn networks(&self) -> &NetworkBundle<f32> {
        &self.nets
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn normalizer(&self) -> Normalizer {
        self.norm
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn pretrain_aif(&mut self) -> Result<f64> {
        let mae = pretrain_aif(
            &mut self.nets.aif,
            &self.frame_tau,
            &self.aif_target,
            self.cfg.aif_pretrain_iters,
            self.cfg.learning_rate,
        )?;
        self.aif_pretrain_mae = Some(mae);
        Ok(mae)
    }

    pub fn phys_init(&mut self) {
        let probes: Vec<[f64; 3]> = self.brain.iter().map(|&v| self.coords[v]).collect();
        phys_init(&mut self.nets, &self.head, &probes);
    }

    /// Draw the next iteration's batch.
    pub fn sample_batch(&mut self) -> Batch {
        let n_data = self.cfg.batch_size / 2;
        let n_res = self.cfg.batch_size - n_data;
        let mut b = Batch {
            aif_tau: self.frame_tau.clone(),
            aif_target: self.aif_target.clone(),
            ..Batch::default()
        };
        b.data_coords.reserve(n_data);
        for _ in 0..n_data {
            let v = self.brain[self.rng.random_range(0..self.brain.len())];
            let f = self.rng.random_range(0..self.n_frames);
            b.data_coords.push(self.coords[v]);
            b.data_tau.push(self.frame_tau[f]);
            b.data_target.push(self.tissue[v * self.n_frames + f] as f64);
        }
        let margin = self.cfg.residual_margin.min(0.25 * self.norm.duration);
        for _ in 0..n_res {
            let v = self.brain[self.rng.random_range(0..self.brain.len())];
            let t = self.rng.random_range(margin..self.norm.duration - margin);
            b.res_coords.push(self.coords[v]);
            b.res_tau.push(self.norm.tau(t));
        }
        b
    }

    /// One optimisation step.
    pub fn step(&mut self) -> Result<LossParts> {
        let i = self.iteration;
        let batch = self.sample_batch();
        let settings = LossSettings::new(&self.cfg, &self.norm, i);
        self.nets.zero_grad();
        let parts = loss_and_grad(&mut self.nets, &self.head, &batch, &settings);
        let lr = self.schedule.lr(i);
        let record = i % self.cfg.trace_every == 0 || i + 1 == self.cfg.iterations;
        if record || !parts.total.is_finite() {
            self.trace.rows.push(TraceRow {
                iteration: i,
                lr,
                omega: settings.omega,
                parts,
            });
        }
        if !parts.total.is_finite() {
            return Err(Error::TrainDiverged(format!("non-finite loss at iteration {i}")));
        }
        self.adam.step(&mut self.nets.tensors_mut(), lr);
        self.iteration += 1;
        Ok(parts)
    }

    /// Pretraining, initialisation and every remaining iteration.
    pub fn run(&mut self) -> Result<()> {
        if self.iteration == 0 {
            if !self.cfg.ablations.no_aif_pretrain && self.cfg.aif_pretrain_iters > 0 {
                self.pretrain_aif()?;
            }
            if !self.cfg.ablations.no_phys_init {
                self.phys_init();
            }
        }
        while self.iteration < self.cfg.iterations {
            self.step()?;
        }
        Ok(())
    }

    /// Query the parameter head at every brain voxel and probe residuals.
    pub fn extract(&self) -> Result<TrainResult> {
        let n_vox = self.dims.n_voxels();
        let coords: Vec<[f64; 3]> = self.brain.iter().map(|&v| self.coords[v]).collect();
        let heads = self.query_heads(&coords);
        let mut params: Vec<Option<VoxelParams>> = vec![None; n_vox];
        let evidential = !self.cfg.ablations.no_evidential;
        let mut nig = NigField {
            alpha: vec![0.0; n_vox],
            beta: vec![0.0; n_vox],
            nu: vec![0.0; n_vox],
        };
        let mut ale = vec![0.0f32; n_vox];
        let mut epi = vec![0.0f32; n_vox];
        let mut sigma_vox = vec![0.0f64; n_vox];
        for (&v, h) in self.brain.iter().zip(&heads) {
            if !(h.cbv.is_finite() && h.mtt.is_finite() && h.delay.is_finite()) {
                return Err(Error::TrainDiverged(format!("non-finite parameters at voxel {v}")));
            }
            params[v] = Some(h.voxel_params()?);
            nig.alpha[v] = h.nig.alpha as f32;
            nig.beta[v] = h.nig.beta as f32;
            nig.nu[v] = h.nig.nu as f32;
            let u = decompose(&h.nig)?;
            ale[v] = u.aleatoric as f32;
            epi[v] = u.epistemic as f32;
            sigma_vox[v] = u.total.sqrt();
        }
        let maps = PerfusionMaps::from_params(self.dims, &params)?;
        if !maps.all_finite() {
            return Err(Error::TrainDiverged("non-finite perfusion maps".into()));
        }
        let probes = if evidential {
            self.probe_residuals(&sigma_vox)
        } else {
            ResidualProbes::default()
        };
        Ok(TrainResult {
            maps,
            nig: evidential.then_some(nig),
            uncertainty: evidential.then(|| UncertaintyMaps::from_parts(ale, epi)),
            trace: self.trace.clone(),
            probes,
            normalizer: self.norm,
            aif_pretrain_mae: self.aif_pretrain_mae,
            flags: self.flags.clone(),
        })
    }

    fn query_heads(&self, coords: &[[f64; 3]]) -> Vec<HeadOutput> {
        let mut out = Vec::with_capacity(coords.len());
        for chunk in coords.chunks(4096) {
            let enc = self.nets.hash.encode(chunk);
            let tape = self.nets.param.forward(&enc.features, chunk.len(), None);
            let p = self.nets.param.out_dim();
            for i in 0..chunk.len() {
                let raw: Vec<f64> = tape.output[i * p..(i + 1) * p].iter().map(|v| v.f64()).collect();
                out.push(self.head.eval(&raw));
            }
        }
        out
    }

    fn probe_residuals(&self, sigma_vox: &[f64]) -> ResidualProbes {
        let mut rng = seeded(self.cfg.seed, STREAM_PROBES);
        let per = self.cfg.probes_per_voxel.max(1);
        let margin = self.cfg.residual_margin.min(0.25 * self.norm.duration);
        let mut probes = ResidualProbes::default();
        for &v in &self.brain {
            for _ in 0..per {
                probes.voxel.push(v);
                probes.t.push(rng.random_range(margin..self.norm.duration - margin));
            }
        }
        let scale = self.norm.residual_scale();
        for start in (0..probes.voxel.len()).step_by(4096) {
            let end = (start + 4096).min(probes.voxel.len());
            let coords: Vec<[f64; 3]> = probes.voxel[start..end].iter().map(|&v| self.coords[v]).collect();
            let taus: Vec<f64> = probes.t[start..end].iter().map(|&t| self.norm.tau(t)).collect();
            let ev = eval_residual(&self.nets, &self.head, &coords, &taus, self.norm.kappa(), self.norm.delta());
            probes.residual.extend(ev.residual.iter().map(|r| r * scale));
        }
        probes.sigma = probes.voxel.iter().map(|&v| sigma_vox[v]).collect();
        probes
    }
}

/// Train on `case` and extract maps, uncertainty and the convergence trace.
pub fn train_case(case: &CaseBundle, cfg: &TrainConfig) -> Result<TrainResult> {
    let mut trainer = Trainer::new(case, cfg)?;
    trainer.run()?;
    trainer.extract()
}
