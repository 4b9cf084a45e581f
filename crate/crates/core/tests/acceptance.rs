//! Acceptance criteria, run in order with one PASS/FAIL line each.
//!
//! `cargo test --test acceptance -- 3 8` runs a subset by number. Failures are
//! reported but only fail the process with `EPPINN_ACCEPTANCE_STRICT` set.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use eppinn::classical::{fit_case, ClassicalMethod, DeconvConfig};
use eppinn::evidential::{decompose, transform};
use eppinn::grid::{voxel_curve, Dims};
use eppinn::io::CaseBundle;
use eppinn::kinetics::{tissue_curve_box, GammaVariate, VoxelParams};
use eppinn::maps::{Param, PerfusionMaps};
use eppinn::metrics::{detect_core_default, mean_nmae, roi_nmae, RoiStats};
use eppinn::nn::{HashGridConfig, NetworkBundle, NetworkConfig};
use eppinn::phantom::{generate, PhantomSpec, RoiLabel};
use eppinn::trainer::{loss_and_grad, train_case, Batch, LossSettings, ParamHead, TrainConfig, TrainResult};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// Reduced-cost training setup for a single CPU: smaller batch and tissue
/// network than the full configuration, same losses and schedule.
fn desk_config(iterations: usize, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig {
        iterations,
        batch_size: 4096,
        seed,
        ..TrainConfig::default()
    };
    cfg.network.tissue_hidden = vec![64, 64, 64];
    cfg
}

fn phantom(psnr: Option<f64>, dt: f64, seed: u64) -> CaseBundle {
    generate(&PhantomSpec {
        dims: Dims::new(16, 16, 4),
        psnr_db: psnr,
        dt,
        seed,
        ..PhantomSpec::default()
    })
    .unwrap()
}

fn nmae_rows(maps: &PerfusionMaps, case: &CaseBundle) -> Vec<RoiStats> {
    roi_nmae(maps, case.truth.as_ref().unwrap()).unwrap()
}

fn c1_forward_model() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let g = GammaVariate::with_peak(rng.random_range(20.0..200.0), rng.random_range(0.0..8.0), rng.random_range(2.0..5.0), rng.random_range(0.8..3.0));
        let aif = g.sample(60.0, 0.005).unwrap();
        let p = VoxelParams::new(rng.random_range(0.5..8.0), rng.random_range(1.0..15.0), rng.random_range(0.0..8.0)).unwrap();
        // sample times within the bolus passage, where C is well above round-off
        let passage = g.onset + p.delay + (g.shape + 4.0) * g.scale;
        let t = rng.random_range(g.onset + p.delay + 1.0..passage.min(60.0));
        let closed = tissue_curve_box(&aif, &p, t).unwrap();
        // 1 ms midpoint sum over the residue window with the analytic AIF
        let hi = (t - p.delay).max(0.0);
        let lo = (t - p.delay - p.mtt).max(0.0);
        let n = ((hi - lo) / 1e-3).ceil().max(1.0) as usize;
        let h = (hi - lo) / n as f64;
        let sum: f64 = (0..n).map(|k| g.eval(lo + (k as f64 + 0.5) * h)).sum::<f64>() * h;
        let oracle = p.flow_rate() * sum;
        worst = worst.max((closed - oracle).abs() / oracle.abs());
    }
    outcome(worst < 1e-4, format!("max relative error {worst:.2e} (< 1e-4)"))
}

fn toy_settings() -> LossSettings {
    LossSettings {
        lambda_data: 0.0,
        lambda_res: 0.0,
        lambda_edl: 0.0,
        lambda_reg: 0.0,
        lambda_ac: 0.0,
        lambda_pr: 0.0,
        delay_min: 1.0,
        delay_max: 1.5,
        mtt_max: 3.0,
        omega: 0.6,
        evidential: true,
        anticollapse: true,
        kappa: 0.8,
        delta: 2.0 / 60.0,
        s_c: 3.0,
        s_a: 2.0,
    }
}

fn toy_batch(rng: &mut ChaCha8Rng) -> Batch {
    let coord = |rng: &mut ChaCha8Rng| [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
    let mut batch = Batch::default();
    for _ in 0..4 {
        batch.aif_tau.push(rng.random_range(-1.0..1.0));
        batch.aif_target.push(rng.random_range(1.0..2.0));
        batch.data_coords.push(coord(rng));
        batch.data_tau.push(rng.random_range(-1.0..1.0));
        batch.data_target.push(rng.random_range(1.0..2.0));
        batch.res_coords.push(coord(rng));
        batch.res_tau.push(rng.random_range(0.3..1.0));
    }
    batch
}

/// Every per-sample |·| in the L1 terms is at least 0.02 from zero, well
/// beyond h·|∂r/∂θ| for the toy network.
fn kink_free(nets: &mut NetworkBundle<f64>, head: &ParamHead, batch: &Batch) -> bool {
    let mut s = toy_settings();
    s.lambda_data = 1.0;
    s.lambda_res = 1.0;
    s.evidential = false;
    (0..batch.aif_tau.len()).all(|i| {
        let one = Batch {
            aif_tau: vec![batch.aif_tau[i]],
            aif_target: vec![batch.aif_target[i]],
            data_coords: vec![batch.data_coords[i]],
            data_tau: vec![batch.data_tau[i]],
            data_target: vec![batch.data_target[i]],
            res_coords: vec![batch.res_coords[i]],
            res_tau: vec![batch.res_tau[i]],
        };
        let p = loss_and_grad(nets, head, &one, &s);
        p.data_aif >= 0.02 && p.data_tissue >= 0.02 && p.res_l1 >= 0.02
    })
}

fn c2_gradients() -> Outcome {
    let config = NetworkConfig {
        hash: HashGridConfig {
            levels: 1,
            log2_table_size: 2,
            features: 2,
            base_resolution: 2,
            growth: 1.5,
        },
        omega0: 15.0,
        aif_hidden: vec![4],
        tissue_hidden: vec![4],
        param_hidden: vec![4],
        param_outputs: 6,
    };
    let head = ParamHead::new(0.05, false);
    let terms = ["data", "residual-l1", "nll", "reg", "anticollapse", "prior"];
    let mut worst: f64 = 0.0;
    let mut worst_term = "";
    let mut n_params = 0;
    let mut redraws = 0;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut nets = NetworkBundle::<f64>::new(config.clone(), &mut rng);
        n_params = nets.n_params();
        for v in nets.hash.table.data.iter_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
        // redraw until every L1 argument sits well clear of its kink, so a
        // central difference of width 2h stays on one smooth branch
        let mut batch = toy_batch(&mut rng);
        while !kink_free(&mut nets, &head, &batch) {
            batch = toy_batch(&mut rng);
            redraws += 1;
        }
        for (ti, term) in terms.iter().enumerate() {
            let mut s = toy_settings();
            match ti {
                0 => s.lambda_data = 1.0,
                1 => {
                    s.lambda_res = 1.0;
                    s.evidential = false;
                }
                // evidential terms with the L1 residual weighted out by ω·λ_EDL ≫ 1
                2 => {
                    s.lambda_res = 1.0;
                    s.lambda_edl = 1e6;
                    s.omega = 1.0;
                }
                3 => {
                    s.lambda_res = 1.0;
                    s.lambda_edl = 1.0;
                    s.lambda_reg = 1e6;
                    s.omega = 1.0;
                }
                4 => s.lambda_ac = 1.0,
                _ => s.lambda_pr = 1.0,
            }
            nets.zero_grad();
            loss_and_grad(&mut nets, &head, &batch, &s);
            let grads: Vec<Vec<f64>> = nets.tensors().iter().map(|t| t.grad.clone()).collect();
            let scale = grads.iter().flatten().fold(0.0f64, |m, g| m.max(g.abs())).max(1e-12);
            let h = 1e-3;
            for (k, g) in grads.iter().enumerate() {
                for j in 0..g.len() {
                    let eval = |d: f64| {
                        let mut probe = nets.clone();
                        probe.tensors_mut()[k].data[j] += d;
                        loss_and_grad(&mut probe, &head, &batch, &s).total
                    };
                    let fd = (eval(h) - eval(-h)) / (2.0 * h);
                    let rel = (fd - g[j]).abs() / scale;
                    if rel > worst {
                        worst = rel;
                        worst_term = term;
                    }
                }
            }
        }
    }
    outcome(
        worst < 1e-3,
        format!(
            "{n_params} params, 50 seeds, 6 terms, h = 1e-3: worst error relative to largest gradient {worst:.2e} ({worst_term}) (< 1e-3); {redraws} fixture redraws"
        ),
    )
}

fn peak_dcdt(case: &CaseBundle) -> f64 {
    let n = case.n_voxels();
    let mut peak: f64 = 0.0;
    for v in case.brain_voxels() {
        let c = voxel_curve(&case.ctp, n, v);
        for k in 1..c.len() {
            peak = peak.max(((c[k] - c[k - 1]) / (case.frame_times[k] - case.frame_times[k - 1])).abs());
        }
    }
    peak
}

fn c3_fixed_point(case: &CaseBundle, res: &TrainResult) -> Outcome {
    let rows = nmae_rows(&res.maps, case);
    let worst = |p: Param| {
        rows.iter()
            .filter(|r| r.param == p.name())
            .map(|r| r.nmae)
            .fold(0.0f64, f64::max)
    };
    let (cbf, mtt) = (worst(Param::Cbf), worst(Param::Mtt));
    let mean_r = res.probes.residual.iter().map(|r| r.abs()).sum::<f64>() / res.probes.residual.len() as f64;
    let ratio = mean_r / peak_dcdt(case);
    outcome(
        cbf < 0.1 && mtt < 0.1 && ratio < 0.01,
        format!("worst ROI NMAE cbf {cbf:.3}, mtt {mtt:.3} (< 0.10); mean |r| / peak dC/dt {ratio:.2e} (< 1e-2)"),
    )
}

fn c4_ordering() -> Outcome {
    let (mut ep, mut svd, mut bc) = (0.0, 0.0, 0.0);
    for seed in 0..3u64 {
        let case = phantom(Some(18.0), 3.0, seed);
        let red = RoiLabel::REDUCED;
        let res = train_case(&case, &desk_config(2000, seed)).unwrap();
        ep += mean_nmae(&nmae_rows(&res.maps, &case), Param::Cbf, &red).unwrap() / 3.0;
        let deconv = DeconvConfig::default();
        let s = fit_case(&case, ClassicalMethod::Svd, &deconv).unwrap();
        svd += mean_nmae(&nmae_rows(&s.maps, &case), Param::Cbf, &red).unwrap() / 3.0;
        let b = fit_case(&case, ClassicalMethod::Bcsvd, &deconv).unwrap();
        bc += mean_nmae(&nmae_rows(&b.maps, &case), Param::Cbf, &red).unwrap() / 3.0;
    }
    outcome(
        ep <= svd && ep <= bc,
        format!("reduced-flow CBF NMAE eppinn {ep:.3}, svd {svd:.3}, bcsvd {bc:.3}"),
    )
}

fn c5_calibration() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for seed in 0..3u64 {
        let case = phantom(Some(21.0), 1.0, seed);
        let res = train_case(&case, &desk_config(2000, seed)).unwrap();
        let (k1, k2) = (res.probes.coverage(1.0).unwrap(), res.probes.coverage(2.0).unwrap());
        pass &= k1 >= 0.68 && k2 >= 0.95;
        parts.push(format!("seed {seed}: {k1:.3}/{k2:.3}"));
    }
    outcome(pass, format!("coverage k=1/k=2 at PSNR 21 ({}) (>= 0.68/0.95)", parts.join(", ")))
}

fn delay_stats(delays: &mut [f32]) -> (f64, f64) {
    delays.sort_by(|a, b| a.total_cmp(b));
    let floor = delays.iter().filter(|d| **d < 0.2).count() as f64 / delays.len() as f64;
    (delays[delays.len() / 2] as f64, floor)
}

fn c6_anticollapse() -> Outcome {
    let mut with = Vec::new();
    let mut without = Vec::new();
    for seed in 0..5u64 {
        let mut spec = PhantomSpec {
            dims: Dims::new(16, 16, 4),
            seed,
            ..PhantomSpec::default()
        };
        spec.aif.scale = 4.0;
        let case = generate(&spec).unwrap();
        let brain = case.brain_voxels();
        for (ablate, out) in [(false, &mut with), (true, &mut without)] {
            let mut cfg = desk_config(2000, seed);
            cfg.ablations.no_anticollapse = ablate;
            let res = train_case(&case, &cfg).unwrap();
            out.extend(brain.iter().map(|&v| res.maps.delay[v]));
        }
    }
    let (med_on, floor_on) = delay_stats(&mut with);
    let (med_off, floor_off) = delay_stats(&mut without);
    let floor_ok = if floor_off > 0.0 { floor_on <= 0.5 * floor_off } else { false };
    outcome(
        med_on > med_off && floor_ok,
        format!(
            "median Δt {med_on:.3} s vs {med_off:.3} s without; fraction at floor (Δt < 0.2 s) {floor_on:.3} vs {floor_off:.3}"
        ),
    )
}

fn c7_ablations() -> Outcome {
    let all = RoiLabel::TISSUE;
    let mtt_nmae = |maps: &PerfusionMaps, case: &CaseBundle| mean_nmae(&nmae_rows(maps, case), Param::Mtt, &all).unwrap();
    let mut unstable = 0;
    let (mut full_mean, mut cbv_mean) = (0.0, 0.0);
    let mut notes = Vec::new();
    for seed in 0..5u64 {
        let case = phantom(Some(18.0), 1.0, seed);
        let full = train_case(&case, &desk_config(2000, seed)).unwrap();
        let full_mtt = mtt_nmae(&full.maps, &case);
        full_mean += full_mtt / 5.0;
        let mut cfg = desk_config(2000, seed);
        cfg.ablations.no_annealing = true;
        match train_case(&case, &cfg) {
            Err(_) => {
                unstable += 1;
                notes.push("NaN".to_string());
            }
            Ok(r) => {
                let m = mtt_nmae(&r.maps, &case);
                if m >= 2.0 * full_mtt {
                    unstable += 1;
                }
                notes.push(format!("{:.2}x", m / full_mtt));
            }
        }
        let mut cfg = desk_config(2000, seed);
        cfg.ablations.no_cbv_param = true;
        let r = train_case(&case, &cfg).unwrap();
        cbv_mean += mtt_nmae(&r.maps, &case) / 5.0;
    }
    outcome(
        unstable >= 3 && full_mean <= cbv_mean,
        format!(
            "no-annealing unstable in {unstable}/5 seeds (MTT NMAE vs full: {}); MTT NMAE full {full_mean:.3} vs no-cbv-param {cbv_mean:.3}",
            notes.join(", ")
        ),
    )
}

fn c8_detection(case: &CaseBundle, res: &TrainResult) -> Outcome {
    let truth = case.truth.as_ref().unwrap();
    let det = detect_core_default(&res.maps.cbf, truth).unwrap();
    let gm = truth.roi_mask(RoiLabel::HealthyGM);
    let fp_gm = eppinn::metrics::core_voxels_in(&res.maps.cbf, &gm);
    let sens = det.sensitivity.unwrap_or(0.0);
    outcome(
        sens >= 0.9 && fp_gm == 0,
        format!("core sensitivity {sens:.3} (>= 0.9); false positives in healthy GM {fp_gm}"),
    )
}

fn c9_determinism() -> Outcome {
    let tmp = tempfile::TempDir::new().unwrap();
    let dir = tmp.path();
    let bin = env!("CARGO_BIN_EXE_eppinn");
    let run = |args: &[&str]| {
        let out = Command::new(bin).args(args).env("EPPINN_THREADS", "1").output().unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    };
    let p = |x: &Path| x.to_str().unwrap().to_string();
    let case = dir.join("case");
    run(&["phantom", "--psnr", "21", "--seed", "7", "--dims", "16,16,4", "--out", &p(&case)]);
    let cfg = dir.join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"iterations": 300, "aif_pretrain_iters": 1000, "batch_size": 4096, "network": {"tissue_hidden": [64, 64, 64]}}"#,
    )
    .unwrap();
    for out in ["r1", "r2"] {
        run(&["fit", &p(&case), "--method", "eppinn", "--seed", "3", "--config", &p(&cfg), "--out", &p(&dir.join(out))]);
    }
    let mut identical = true;
    for sub in ["maps", "uncertainty"] {
        for e in std::fs::read_dir(dir.join("r1").join(sub)).unwrap() {
            let name = e.unwrap().file_name();
            let a = std::fs::read(dir.join("r1").join(sub).join(&name)).unwrap();
            let b = std::fs::read(dir.join("r2").join(sub).join(&name)).unwrap();
            identical &= a == b;
        }
    }
    outcome(identical, "two single-thread eppinn fits, same seed: maps and uncertainty byte-identical".into())
}

fn c10_evidential() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut bad_domain = 0;
    let mut bad_identity = 0;
    for i in 0..1_000_000 {
        let draw = |rng: &mut ChaCha8Rng| {
            if i % 2 == 0 {
                rng.random_range(-1e6..1e6)
            } else {
                rng.random_range(-20.0..20.0)
            }
        };
        let p = transform(draw(&mut rng), draw(&mut rng), draw(&mut rng));
        if !p.is_valid() {
            bad_domain += 1;
            continue;
        }
        let u = decompose(&p).unwrap();
        if u.total != u.aleatoric + u.epistemic {
            bad_identity += 1;
        }
    }
    outcome(
        bad_domain == 0 && bad_identity == 0,
        format!("10^6 raw draws: {bad_domain} out-of-domain NIG parameters, {bad_identity} decomposition identity violations"),
    )
}

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |n: usize| selected.is_empty() || selected.contains(&n);
    let mut failed = Vec::new();
    let mut report = |n: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        if !want(n) {
            return;
        }
        let start = Instant::now();
        let o = f();
        let status = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {n:>2} [{status}] {name}: {} [{:.1} s]", o.detail, start.elapsed().as_secs_f64());
        if !o.pass {
            failed.push(n);
        }
    };
    report(1, "forward-model oracle", &mut c1_forward_model);
    report(2, "gradient correctness", &mut c2_gradients);
    // criteria 3 and 8 share one noiseless training run
    let mut noiseless: Option<(CaseBundle, TrainResult)> = None;
    let mut noiseless_run = || {
        noiseless
            .get_or_insert_with(|| {
                let start = Instant::now();
                let case = phantom(None, 1.0, 0);
                let res = train_case(&case, &desk_config(5000, 0)).unwrap();
                println!("noiseless 5000-iteration run shared by criteria 3 and 8: {:.1} s", start.elapsed().as_secs_f64());
                (case, res)
            })
            .clone()
    };
    if want(3) || want(8) {
        let (case, res) = noiseless_run();
        report(3, "physics-consistency fixed point", &mut || c3_fixed_point(&case, &res));
        report(4, "ordering vs SVD/bcSVD", &mut c4_ordering);
        report(5, "calibration", &mut c5_calibration);
        report(6, "anti-collapse", &mut c6_anticollapse);
        report(7, "ablation directionality", &mut c7_ablations);
        report(8, "detection sanity", &mut || c8_detection(&case, &res));
    } else {
        report(4, "ordering vs SVD/bcSVD", &mut c4_ordering);
        report(5, "calibration", &mut c5_calibration);
        report(6, "anti-collapse", &mut c6_anticollapse);
        report(7, "ablation directionality", &mut c7_ablations);
    }
    report(9, "determinism", &mut c9_determinism);
    report(10, "evidential identities", &mut c10_evidential);
    if failed.is_empty() {
        println!("acceptance: all selected criteria passed");
        return;
    }
    println!("acceptance: {} criteria FAILED: {failed:?}", failed.len());
    if std::env::var_os("EPPINN_ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
