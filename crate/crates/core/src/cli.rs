//! Command-line surface: phantom generation, fitting, evaluation and sweeps.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::classical::{fit_case, ClassicalMethod, DeconvConfig};
use crate::error::{Error, Result};
use crate::grid::Dims;
use crate::io::{read_case, read_json, read_result, read_truth_of_case, write_case, write_result, CaseBundle, ResultBundle};
use crate::metrics::{coverage_row, detect_core_default, detection_row, nmae_csv, roi_nmae, COVERAGE_HEADER, DETECTION_HEADER};
use crate::phantom::{generate, PhantomSpec};
use crate::trainer::{TrainConfig, TrainResult, Trainer};

/// Thread-count environment variable for the rayon pool.
pub const THREADS_ENV: &str = "EPPINN_THREADS";

/// Frame spacings of the evaluation grid, s.
pub const SWEEP_DTS: [f64; 4] = [1.0, 2.0, 3.0, 4.0];

pub const SUMMARY_HEADER: &str = "case,method,param,roi,nmae,psnr,dt,seed";

#[derive(Debug, Parser)]
#[command(name = "eppinn", version, about = "CT perfusion maps from a per-case physics-informed fit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic phantom case with ground truth.
    Phantom(PhantomArgs),
    /// Estimate perfusion maps for one case.
    Fit(FitArgs),
    /// Score a result bundle against a case's ground truth.
    Eval(EvalArgs),
    /// Generate phantoms over a PSNR × dt × seed grid and fit every method.
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Eppinn,
    /// EPPINN without the evidential terms.
    Pinn,
    Svd,
    Bcsvd,
    Boxnlr,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Eppinn => "eppinn",
            Method::Pinn => "pinn",
            Method::Svd => "svd",
            Method::Bcsvd => "bcsvd",
            Method::Boxnlr => "boxnlr",
        }
    }

    fn classical(&self) -> Option<ClassicalMethod> {
        match self {
            Method::Svd => Some(ClassicalMethod::Svd),
            Method::Bcsvd => Some(ClassicalMethod::Bcsvd),
            Method::Boxnlr => Some(ClassicalMethod::BoxNlr),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct PhantomArgs {
    /// Peak signal-to-noise ratio, dB.
    #[arg(long, default_value_t = 24.0)]
    pub psnr: f64,
    /// Frame spacing, s; one of 1, 2, 3, 4 unless --force.
    #[arg(long, default_value_t = 1.0)]
    pub dt: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Skip noise.
    #[arg(long)]
    pub noiseless: bool,
    /// Grid size as X,Y,Z.
    #[arg(long, value_parser = parse_dims, default_value = "32,32,4")]
    pub dims: Dims,
    /// Gamma-variate AIF scale, s.
    #[arg(long)]
    pub aif_scale: Option<f64>,
    /// Accept off-grid settings and overwrite a non-empty output.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Default, Args)]
pub struct AblationArgs {
    #[arg(long)]
    pub no_adaptive_hash: bool,
    #[arg(long)]
    pub no_aif_pretrain: bool,
    #[arg(long)]
    pub no_annealing: bool,
    #[arg(long)]
    pub no_cbv_param: bool,
    #[arg(long)]
    pub no_phys_init: bool,
    #[arg(long)]
    pub no_evidential: bool,
    #[arg(long)]
    pub no_anticollapse: bool,
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    pub case_dir: PathBuf,
    #[arg(long, value_enum)]
    pub method: Method,
    #[arg(long)]
    pub out: PathBuf,
    /// Training configuration (JSON, any subset of fields).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Deconvolution configuration for the classical methods (JSON).
    #[arg(long)]
    pub deconv_config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[command(flatten)]
    pub ablations: AblationArgs,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Case directory holding gt/.
    #[arg(long)]
    pub gt: PathBuf,
    /// Result directory written by `fit`.
    #[arg(long)]
    pub pred: PathBuf,
    /// NMAE CSV; detection rows go to `<stem>_detection.csv` next to it.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [18.0, 21.0, 24.0, 27.0])]
    pub psnr: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = SWEEP_DTS)]
    pub dt: Vec<f64>,
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [Method::Svd, Method::Bcsvd, Method::Boxnlr, Method::Eppinn])]
    pub methods: Vec<Method>,
    #[arg(long, value_delimiter = ',', default_values_t = [0])]
    pub seeds: Vec<u64>,
    #[arg(long, value_parser = parse_dims, default_value = "32,32,4")]
    pub dims: Dims,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

fn parse_dims(s: &str) -> std::result::Result<Dims, String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match parts.as_slice() {
        [x, y, z] => Ok(Dims::new(*x, *y, *z)),
        _ => Err("expected X,Y,Z".into()),
    }
}

/// Size the global rayon pool from `EPPINN_THREADS` if set. Later calls are
/// no-ops.
pub fn init_threads() {
    if let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

/// A failure that should exit with the usage code.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Debug)]
pub enum CliError {
    Usage(UsageError),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(e) => write!(f, "usage: {e}"),
            CliError::Runtime(e) => write!(f, "{e}"),
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(UsageError(msg.into()))
}

pub fn run(cli: Cli) -> std::result::Result<(), CliError> {
    match cli.command {
        Command::Phantom(a) => cmd_phantom(&a),
        Command::Fit(a) => cmd_fit(&a).map(|_| ()),
        Command::Eval(a) => cmd_eval(&a),
        Command::Sweep(a) => cmd_sweep(&a),
    }
}

fn phantom_spec(a: &PhantomArgs) -> std::result::Result<PhantomSpec, CliError> {
    if !a.force && !SWEEP_DTS.contains(&a.dt) {
        return Err(usage(format!("--dt {} is outside the grid {{1, 2, 3, 4}} s (use --force)", a.dt)));
    }
    if !a.noiseless && !(a.psnr.is_finite() && a.psnr > 0.0) {
        return Err(usage(format!("--psnr must be a positive number of dB, got {}", a.psnr)));
    }
    let mut spec = PhantomSpec {
        dims: a.dims,
        dt: a.dt,
        psnr_db: (!a.noiseless).then_some(a.psnr),
        seed: a.seed,
        ..PhantomSpec::default()
    };
    if let Some(s) = a.aif_scale {
        spec.aif.scale = s;
    }
    spec.validate().map_err(|e| usage(e.to_string()))?;
    Ok(spec)
}

pub fn cmd_phantom(a: &PhantomArgs) -> std::result::Result<(), CliError> {
    let spec = phantom_spec(a)?;
    let case = generate(&spec)?;
    write_case(&a.out, &case, a.force)?;
    log::info!("phantom written to {}", a.out.display());
    Ok(())
}

/// Training configuration for the neural methods with CLI overrides applied.
pub fn train_config(a: &FitArgs) -> Result<TrainConfig> {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.iterations {
        cfg.iterations = n;
    }
    let ab = &a.ablations;
    let flags = &mut cfg.ablations;
    flags.no_adaptive_hash |= ab.no_adaptive_hash;
    flags.no_aif_pretrain |= ab.no_aif_pretrain;
    flags.no_annealing |= ab.no_annealing;
    flags.no_cbv_param |= ab.no_cbv_param;
    flags.no_phys_init |= ab.no_phys_init;
    flags.no_evidential |= ab.no_evidential || a.method == Method::Pinn;
    flags.no_anticollapse |= ab.no_anticollapse;
    cfg.validate()?;
    Ok(cfg)
}

fn case_name(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "case".into())
}

fn truth_metrics(case: &CaseBundle, name: &str, method: &str, maps: &crate::maps::PerfusionMaps) -> Result<Option<(String, String)>> {
    let Some(truth) = &case.truth else {
        return Ok(None);
    };
    let nmae = nmae_csv(name, method, &roi_nmae(maps, truth)?);
    let det = detect_core_default(&maps.cbf, truth)?;
    let detection = format!("{DETECTION_HEADER}\n{}\n", detection_row(name, method, &det));
    Ok(Some((nmae, detection)))
}

fn coverage_csv(name: &str, method: &str, res: &TrainResult) -> Result<String> {
    let mut s = format!("{COVERAGE_HEADER}\n");
    for k in [1.0, 2.0] {
        let _ = writeln!(s, "{}", coverage_row(name, method, "sample", k, res.probes.coverage(k)?));
        let _ = writeln!(s, "{}", coverage_row(name, method, "voxel", k, res.probes.voxel_coverage(k)?));
    }
    Ok(s)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Run one fit and write its result bundle.
pub fn cmd_fit(a: &FitArgs) -> std::result::Result<ResultBundle, CliError> {
    let case = read_case(&a.case_dir)?;
    crate::io::prepare_output_dir(&a.out, a.force)?;
    let name = case_name(&a.case_dir);
    let method = a.method.name();
    let start = Instant::now();
    let mut extra: Vec<(&str, String)> = Vec::new();
    let (maps, uncertainty, trace_csv, resolved, flags) = if let Some(cm) = a.method.classical() {
        let cfg: DeconvConfig = match &a.deconv_config {
            Some(p) => read_json(p)?,
            None => DeconvConfig::default(),
        };
        let fit = fit_case(&case, cm, &cfg)?;
        let resolved = json!({ "method": method, "case": a.case_dir, "deconv": cfg });
        (fit.maps, None, None, resolved, fit.flags)
    } else {
        let cfg = train_config(a)?;
        let mut trainer = Trainer::new(&case, &cfg)?;
        if let Err(e) = trainer.run() {
            // keep what was traced so far next to the failure
            write_text(&a.out.join("trace.csv"), &trainer.trace().to_csv())?;
            return Err(e.into());
        }
        let res = trainer.extract()?;
        if res.uncertainty.is_some() {
            extra.push(("coverage.csv", coverage_csv(&name, method, &res)?));
        }
        let resolved = json!({ "method": method, "case": a.case_dir, "train": cfg });
        (res.maps, res.uncertainty, Some(res.trace.to_csv()), resolved, res.flags)
    };
    let wall = start.elapsed().as_secs_f64();
    let metrics = truth_metrics(&case, &name, method, &maps)?;
    if let Some((_, det)) = &metrics {
        extra.push(("detection.csv", det.clone()));
    }
    let bundle = ResultBundle {
        method: method.to_string(),
        maps,
        uncertainty,
        trace_csv,
        metrics_csv: metrics.map(|m| m.0),
        resolved_config: resolved,
        wall_clock_s: wall,
        flags,
    };
    write_result(&a.out, &bundle, true)?;
    for (file, text) in &extra {
        write_text(&a.out.join(file), text)?;
    }
    log::info!("fit {method} on {name}: {wall:.1} s");
    eprintln!("fit: method={method} case={name} wall_clock={wall:.1}s");
    Ok(bundle)
}

pub fn cmd_eval(a: &EvalArgs) -> std::result::Result<(), CliError> {
    let (case, truth) = read_truth_of_case(&a.gt)?;
    let result = read_result(&a.pred)?;
    if result.dims() != case.dims() {
        return Err(Error::ShapeMismatch(format!("prediction grid {:?} differs from case grid {:?}", result.dims(), case.dims())).into());
    }
    let det_path = detection_path(&a.out);
    for p in [&a.out, &det_path] {
        if p.exists() && !a.force {
            return Err(Error::OutputExists(p.clone()).into());
        }
    }
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    let name = case_name(&a.gt);
    write_text(&a.out, &nmae_csv(&name, &result.method, &roi_nmae(&result.maps, &truth)?))?;
    let det = detect_core_default(&result.maps.cbf, &truth)?;
    write_text(&det_path, &format!("{DETECTION_HEADER}\n{}\n", detection_row(&name, &result.method, &det)))?;
    Ok(())
}

fn detection_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}_detection.csv"))
}

/// Directory name of one sweep cell.
pub fn cell_name(psnr: f64, dt: f64, seed: u64) -> String {
    format!("psnr{psnr}_dt{dt}_seed{seed}")
}

pub fn cmd_sweep(a: &SweepArgs) -> std::result::Result<(), CliError> {
    if a.psnr.is_empty() || a.dt.is_empty() || a.methods.is_empty() || a.seeds.is_empty() {
        return Err(usage("every sweep axis needs at least one value"));
    }
    crate::io::prepare_output_dir(&a.out, a.force)?;
    let mut summary = format!("{SUMMARY_HEADER}\n");
    for &psnr in &a.psnr {
        for &dt in &a.dt {
            for &seed in &a.seeds {
                let cell = cell_name(psnr, dt, seed);
                let case_dir = a.out.join(&cell).join("case");
                cmd_phantom(&PhantomArgs {
                    psnr,
                    dt,
                    seed,
                    out: case_dir.clone(),
                    noiseless: false,
                    dims: a.dims,
                    aif_scale: None,
                    force: true,
                })?;
                for &method in &a.methods {
                    let fit = cmd_fit(&FitArgs {
                        case_dir: case_dir.clone(),
                        method,
                        out: a.out.join(&cell).join(method.name()),
                        config: a.config.clone(),
                        deconv_config: None,
                        seed: Some(seed),
                        iterations: None,
                        ablations: AblationArgs::default(),
                        force: true,
                    })?;
                    let case = read_case(&case_dir)?;
                    let truth = case.truth.as_ref().ok_or_else(|| Error::NoGroundTruth(case_dir.clone()))?;
                    for r in roi_nmae(&fit.maps, truth)? {
                        let _ = writeln!(summary, "{cell},{},{},{},{},{psnr},{dt},{seed}", method.name(), r.param, r.roi, r.nmae);
                    }
                }
            }
        }
    }
    write_text(&a.out.join("summary.csv"), &summary)?;
    Ok(())
}
