mod commands;
mod config;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use qprop::Error;

#[derive(Parser, Debug)]
#[command(
    name = "qprop",
    version,
    about = "Signal propagation in quantized networks",
    args_override_self = true
)]
pub struct Cli {
    /// JSON file holding `command` plus long flag names as keys. Flags on
    /// the command line override it.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Fixed points, χ and depth scale for one activation.
    Analyze(AnalyzeArgs),
    /// Optimal spacing curves and the power-law fit of 1 − χ_max.
    Spacing(SpacingArgs),
    /// Depth-scale heat maps.
    Grid(GridArgs),
    /// Correlation propagation along a circle of inputs in random networks.
    Simulate(SimulateArgs),
    /// Initialization recommendation for an N-state activation.
    Init(InitArgs),
    /// Infinite-width NTK and its deep-limit structure.
    Ntk(NtkArgs),
    /// χ of the correlation map against χ of the variance map.
    CqCompare(CqArgs),
}

#[derive(Args, Debug)]
pub struct HpArgs {
    /// Weight standard deviation.
    #[arg(long, default_value_t = 1.0)]
    pub sw: f64,
    /// Bias standard deviation.
    #[arg(long, default_value_t = 0.0)]
    pub sb: f64,
}

#[derive(Args, Debug)]
pub struct SolverArgs {
    #[arg(long, default_value_t = 1e-12)]
    pub tol: f64,
    #[arg(long, default_value_t = 10_000)]
    pub max_iter: usize,
}

#[derive(Args, Debug)]
pub struct SpacingSearch {
    /// Coarse scan points over D̃.
    #[arg(long, default_value_t = qprop::calibrate::DEFAULT_COARSE_POINTS)]
    pub points: usize,
    /// Golden-section tolerance on D̃.
    #[arg(long, default_value_t = qprop::calibrate::DEFAULT_REFINE_TOL)]
    pub refine_tol: f64,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    /// Activation: `sign`, `constant:N` or a JSON descriptor.
    #[arg(long, required = true)]
    pub act: Option<String>,
    #[command(flatten)]
    pub hp: HpArgs,
    /// Replace σ_w, σ_b by the recommended initialization (constant spacing only).
    #[arg(long)]
    pub auto_init: bool,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[command(flatten)]
    pub search: SpacingSearch,
    /// Write the JSON report here as well as to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SpacingArgs {
    #[arg(long, value_delimiter = ',', default_value = "2,4,8,16,32,64")]
    pub states: Vec<usize>,
    #[command(flatten)]
    pub search: SpacingSearch,
    /// Output directory for spacing.csv and spacing_fit.json.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq)]
pub enum GridKind {
    /// ξ over (σ_w, σ_b) for a unit staircase.
    Depthscale,
    /// ξ over (D̃₀, D̃₁) for linearly growing spacings.
    Linear,
}

#[derive(Args, Debug)]
pub struct GridArgs {
    #[arg(long, value_enum, default_value_t = GridKind::Depthscale)]
    pub kind: GridKind,
    #[arg(long, default_value_t = 8)]
    pub states: usize,
    #[arg(long, value_delimiter = ',', num_args = 2, default_value = "1,3")]
    pub sw_range: Vec<f64>,
    #[arg(long, value_delimiter = ',', num_args = 2, default_value = "0,0.3")]
    pub sb_range: Vec<f64>,
    #[arg(long, value_delimiter = ',', num_args = 2, default_value = "0.01,2")]
    pub d0_range: Vec<f64>,
    #[arg(long, value_delimiter = ',', num_args = 2, default_value = "-1,0.99")]
    pub d1_range: Vec<f64>,
    #[arg(long, default_value_t = 50)]
    pub resolution: usize,
    /// Output directory for grid_<kind>.csv.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 16)]
    pub states: usize,
    #[arg(long, default_value_t = 1000)]
    pub input_dim: usize,
    #[arg(long, default_value_t = 1000)]
    pub width: usize,
    #[arg(long, default_value_t = 100)]
    pub depth: usize,
    /// Points on the input circle.
    #[arg(long, default_value_t = 500)]
    pub samples: usize,
    /// Weight scales as multiples of the optimal σ_w.
    #[arg(long, value_delimiter = ',', default_value = "0.5,1,2")]
    pub multipliers: Vec<f64>,
    #[arg(long, default_value_t = 5)]
    pub seeds: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Layers entering the theory-vs-simulation error.
    #[arg(long, default_value_t = 20)]
    pub mae_layers: usize,
    /// Output directory for manifold.csv and manifold_summary.json.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct InitArgs {
    #[arg(long)]
    pub states: usize,
    #[arg(long, requires = "fan_out")]
    pub fan_in: Option<usize>,
    #[arg(long, requires = "fan_in")]
    pub fan_out: Option<usize>,
    #[command(flatten)]
    pub search: SpacingSearch,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq)]
pub enum Derivative {
    /// ρ inside |u| < 1, zero outside.
    Ste,
    /// Gaussian-smoothed staircase derivative.
    Smooth,
}

#[derive(Args, Debug)]
pub struct NtkArgs {
    #[arg(long, required = true)]
    pub act: Option<String>,
    #[command(flatten)]
    pub hp: HpArgs,
    #[arg(long, value_enum, default_value_t = Derivative::Ste)]
    pub derivative: Derivative,
    /// STE gain; calibrated from σ_w and Q* when omitted.
    #[arg(long)]
    pub rho: Option<f64>,
    /// Standard deviation of the smoothing Gaussian.
    #[arg(long, default_value_t = 0.1)]
    pub smooth_width: f64,
    /// Hidden-layer counts; depth 0 is the affine transform of the Gram.
    #[arg(long, value_delimiter = ',', default_value = "5,30,100")]
    pub depths: Vec<usize>,
    /// CSV of numeric features with the label in the last column.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// The data file starts with a header row.
    #[arg(long)]
    pub header: bool,
    /// Synthetic set size when no data file is given.
    #[arg(long, default_value_t = 40)]
    pub points: usize,
    #[arg(long, default_value_t = 50)]
    pub dim: usize,
    #[arg(long, default_value_t = 1.0)]
    pub separation: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for kernel_depth_<L>.csv and ntk_metrics.json.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct CqArgs {
    #[arg(long, value_delimiter = ',', default_value = "4,10")]
    pub states: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,4")]
    pub beta: Vec<f64>,
    #[arg(long, value_delimiter = ',', num_args = 2, default_value = "0.3,30")]
    pub sw_range: Vec<f64>,
    /// Log-spaced σ_w points.
    #[arg(long, default_value_t = 60)]
    pub points: usize,
    /// Output directory for cq_compare.csv.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

/// Failure with its exit code: 1 usage, 2 numerical, 3 I/O.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub kind: &'static str,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            kind: "usage",
            message: message.into(),
        }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self {
            code: 3,
            kind: "io",
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let (code, kind) = match &e {
            Error::Domain(_) => (1, "domain"),
            Error::Parse(_) => (1, "parse"),
            Error::Resource { .. } => (1, "resource"),
            Error::Convergence { .. } => (2, "convergence"),
            Error::Singularity(_) => (2, "singularity"),
            Error::Estimation(_) => (2, "estimation"),
            Error::Fit(_) => (2, "fit"),
            Error::Io(_) => (3, "io"),
        };
        Self {
            code,
            kind,
            message: e.to_string(),
        }
    }
}

fn report(f: &Failure) -> ExitCode {
    let body = serde_json::json!({ "error": { "kind": f.kind, "message": f.message, "exit_code": f.code } });
    eprintln!("{body}");
    ExitCode::from(f.code)
}

/// Pulls `--config FILE` out of the arguments and splices in its contents.
fn with_config(args: Vec<OsString>) -> Result<Vec<OsString>, Failure> {
    let mut rest = Vec::with_capacity(args.len());
    let mut path = None;
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            path = Some(it.next().ok_or_else(|| Failure::usage("--config needs a file"))?);
        } else if let Some(p) = s.strip_prefix("--config=") {
            path = Some(OsString::from(p));
        } else {
            rest.push(a);
        }
    }
    let Some(path) = path else { return Ok(rest) };
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Failure::io(format!("reading {}: {e}", PathBuf::from(&path).display())))?;
    let expanded = config::expand(&text).map_err(Failure::usage)?;
    // `qprop --config f.json analyze --sw 2` names the command twice.
    if rest.len() > 1 && expanded.first().is_some_and(|c| rest[1] == OsString::from(c)) {
        rest.remove(1);
    }
    let mut out = Vec::with_capacity(rest.len() + expanded.len());
    out.push(rest.remove(0));
    out.extend(expanded.into_iter().map(OsString::from));
    out.extend(rest);
    Ok(out)
}

fn set_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var("QPROP_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Failure::usage(format!("QPROP_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::usage(format!("thread pool: {e}")))
}

fn main() -> ExitCode {
    let args = match with_config(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(f) => return report(&f),
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(f) = set_threads() {
        return report(&f);
    }
    match commands::dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => report(&f),
    }
}
