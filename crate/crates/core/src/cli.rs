//! The `dgp-compose` command line.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::diagnostics::{counterexample_eval, counterexample_mc, layer_variance_probe, noisy_input_expansion, second_derivative_scan};
use crate::error::{DgpError, Result};
use crate::estimate::SchemeKind;
use crate::experiments::{
    generate_dataset, run_replication, sample_rows, trace_rows, write_csv, write_json, DatasetSpec, ExperimentConfig, FitRecord,
};
use crate::linalg::Mat;
use crate::math::RngHandle;
use crate::scheme::{sample_layers, VariationalState};

/// Environment variable mirroring `--threads`.
pub const THREADS_ENV: &str = "DGP_COMPOSE_THREADS";

const FIT_FILE: &str = "fit.json";

#[derive(Debug, Parser, Serialize)]
#[command(name = "dgp-compose", version, about = "Deep Gaussian process fitting and compositional-uncertainty diagnostics")]
pub struct Cli {
    /// Upper bound on worker threads
    #[arg(long, global = true, env = THREADS_ENV, hide_env_values = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    /// Generate a dataset from a JSON spec and write it as CSV
    Datagen(DatagenArgs),
    /// Fit one scheme and seed of an experiment config
    Fit(FitArgs),
    /// Draw per-layer function samples from a fitted run
    Sample(SampleArgs),
    /// Collapse diagnostics
    #[command(subcommand)]
    Diagnose(Diagnose),
    /// Fit every scheme and seed of an experiment config
    Replicate(ReplicateArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct DatagenArgs {
    /// Dataset spec (JSON)
    #[arg(long)]
    pub spec: PathBuf,
    /// Output CSV
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the noise seed in the spec
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args, Serialize)]
pub struct FitArgs {
    /// Experiment config (JSON)
    #[arg(long)]
    pub config: PathBuf,
    /// Run directory to create
    #[arg(long)]
    pub out: PathBuf,
    /// Scheme to fit [default: first in config]
    #[arg(long, value_parser = parse_scheme)]
    pub scheme: Option<SchemeKind>,
    /// Training seed [default: first in config]
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args, Serialize)]
pub struct SampleArgs {
    /// Run directory written by `fit`
    #[arg(long)]
    pub run: PathBuf,
    /// Query grid as start:end:points
    #[arg(long, value_parser = parse_grid, allow_hyphen_values = true)]
    pub grid: (f64, f64, usize),
    /// Output CSV
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub n_samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Diagnose {
    /// Single-inducing-point derivative of the output variance in the input noise
    Counterexample(CounterexampleArgs),
    /// Second derivative of the prior conditional variance for several inducing densities
    Scan(ScanArgs),
    /// First-order variance of a fitted layer under noisy inputs
    NoisyInput(NoisyInputArgs),
    /// Monte-Carlo variance of each layer's output at one input
    LayerVariance(LayerVarianceArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct CounterexampleArgs {
    #[arg(long)]
    pub gamma: f64,
    #[arg(long, allow_hyphen_values = true)]
    pub u: f64,
    #[arg(long, allow_hyphen_values = true)]
    pub mu_star: f64,
    #[arg(long)]
    pub sigma_star2: f64,
    /// Also estimate the output variance by Monte Carlo with this many draws
    #[arg(long, default_value_t = 0)]
    pub mc_samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct ScanArgs {
    #[arg(long, default_value_t = 1.0)]
    pub gamma: f64,
    /// Comma-separated inducing counts
    #[arg(long, value_delimiter = ',', default_value = "2,4,8,16,32")]
    pub m: Vec<usize>,
    /// Grid points over [-3γ, 3γ]
    #[arg(long, default_value_t = 601)]
    pub grid_n: usize,
    /// Optional CSV of the full curves
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct NoisyInputArgs {
    /// Run directory written by `fit`
    #[arg(long)]
    pub run: PathBuf,
    /// Zero-based layer index
    #[arg(long, default_value_t = 0)]
    pub layer: usize,
    #[arg(long, allow_hyphen_values = true)]
    pub x_bar: f64,
    #[arg(long)]
    pub noise_variance: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct LayerVarianceArgs {
    /// Run directory written by `fit`
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub x0: f64,
    #[arg(long, default_value_t = 2000)]
    pub n_samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct ReplicateArgs {
    /// Experiment config (JSON)
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the output directory in the config
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_scheme(s: &str) -> std::result::Result<SchemeKind, String> {
    s.parse().map_err(|e: DgpError| e.to_string())
}

fn parse_grid(s: &str) -> std::result::Result<(f64, f64, usize), String> {
    let parts: Vec<&str> = s.split(':').collect();
    let [a, b, n] = parts[..] else {
        return Err(format!("expected start:end:points, got '{s}'"));
    };
    let a: f64 = a.parse().map_err(|e| format!("start: {e}"))?;
    let b: f64 = b.parse().map_err(|e| format!("end: {e}"))?;
    let n: usize = n.parse().map_err(|e| format!("points: {e}"))?;
    if !(a <= b) || n == 0 || (n > 1 && a == b) {
        return Err(format!("grid '{s}' is empty or reversed"));
    }
    Ok((a, b, n))
}

/// Formats `x` with 6 significant digits, like C's `%g`.
pub fn sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let exp = x.abs().log10().floor() as i32;
    let trim = |s: String| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    };
    if (-4..6).contains(&exp) {
        trim(format!("{:.*}", (5 - exp).max(0) as usize, x))
    } else {
        let s = format!("{x:.5e}");
        let (m, e) = s.split_once('e').expect("exponent form");
        format!("{}e{e}", trim(m.to_string()))
    }
}

fn exit_code(e: &DgpError) -> i32 {
    match e {
        DgpError::Io { .. } => 3,
        e if e.is_numerical() => 2,
        _ => 1,
    }
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn run<I, S>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return code;
        }
    };
    match execute(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn say(out: &mut dyn Write, line: impl AsRef<str>) {
    let _ = writeln!(out, "{}", line.as_ref());
}

fn print_config<T: Serialize>(out: &mut dyn Write, value: &T) {
    say(out, format!("resolved config: {}", serde_json::to_string(value).expect("config serialises")));
}

fn threads(cli: &Cli) -> usize {
    cli.threads.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get())).max(1)
}

fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| DgpError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| DgpError::Parse {
        source_name: path.display().to_string(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| DgpError::io(dir, e))
}

fn execute(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::Datagen(a) => datagen(a, out),
        Command::Fit(a) => fit(a, out),
        Command::Sample(a) => sample(a, out),
        Command::Diagnose(d) => diagnose(d, out),
        Command::Replicate(a) => replicate(a, threads(cli), out),
    }
}

fn datagen(a: &DatagenArgs, out: &mut dyn Write) -> Result<()> {
    let mut spec: DatasetSpec = load_json(&a.spec)?;
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    print_config(out, &spec);
    let data = generate_dataset(&spec)?;
    let hash = crate::experiments::hex_digest(&serde_json::to_string(&spec).expect("spec serialises"));
    let rows: Vec<Vec<f64>> = data.x.iter().zip(&data.y).map(|(&x, &y)| vec![x, y]).collect();
    write_csv(&a.out, &hash, spec.seed, &["x", "y"], &rows)?;
    say(out, format!("wrote {} rows to {}", rows.len(), a.out.display()));
    Ok(())
}

fn fit(a: &FitArgs, out: &mut dyn Write) -> Result<()> {
    let mut config = ExperimentConfig::load(&a.config)?;
    let scheme = a.scheme.unwrap_or(config.schemes[0]);
    let seed = a.seed.unwrap_or(config.seeds[0]);
    config.schemes = vec![scheme];
    config.seeds = vec![seed];
    config.outputs.dir = a.out.clone();
    print_config(out, &config);
    let hash = config.hash();
    let data = generate_dataset(&config.dataset)?;
    let (model, fitted) = crate::experiments::fit_single(&config, &data, scheme, seed)?;
    create_dir(&a.out)?;
    write_json(&a.out.join("config.json"), &config)?;
    let rows: Vec<Vec<f64>> = data.x.iter().zip(&data.y).map(|(&x, &y)| vec![x, y]).collect();
    write_csv(&a.out.join("data.csv"), &hash, seed, &["x", "y"], &rows)?;
    write_csv(&a.out.join("trace.csv"), &hash, seed, &["iteration", "elbo", "std_error"], &trace_rows(&fitted.trace))?;
    let record = FitRecord {
        config_hash: hash,
        scheme,
        seed,
        model,
        state: fitted.state,
        trace: fitted.trace,
        final_estimate: fitted.final_estimate.clone(),
    };
    write_json(&a.out.join(FIT_FILE), &record)?;
    let est = &fitted.final_estimate;
    say(out, format!("scheme {scheme} seed {seed}"));
    say(out, format!("elbo = {} (se {})", sig6(est.value), sig6(est.std_error)));
    say(out, format!("expected_log_lik = {}", sig6(est.expected_log_lik)));
    say(out, format!("kl = {}", sig6(est.kl)));
    Ok(())
}

fn load_run(dir: &Path) -> Result<FitRecord> {
    FitRecord::load(&dir.join(FIT_FILE))
}

fn sample(a: &SampleArgs, out: &mut dyn Write) -> Result<()> {
    print_config(out, a);
    let run = load_run(&a.run)?;
    let (start, end, n) = a.grid;
    let grid: Vec<f64> = if n == 1 { vec![start] } else { (0..n).map(|i| start + (end - start) * i as f64 / (n - 1) as f64).collect() };
    let draws = sample_layers(&run.model, &run.state, &grid, a.n_samples, RngHandle::new(a.seed))?;
    write_csv(&a.out, &run.config_hash, a.seed, &["layer", "sample", "x", "value"], &sample_rows(&draws.layers, &grid))?;
    say(out, format!("wrote {} draws of {} layers to {}", a.n_samples, draws.n_layers(), a.out.display()));
    Ok(())
}

/// Marginal moments of `q(u_layer)`.
fn layer_marginal(state: &VariationalState, layer: usize) -> Result<(Vec<f64>, Mat)> {
    let missing = || DgpError::Config(format!("state has no layer {layer}"));
    match state {
        VariationalState::MeanField(s) => {
            let q = s.layers.get(layer).ok_or_else(missing)?;
            Ok((q.mean.clone(), q.covariance()))
        }
        VariationalState::Chained(s) => {
            if layer > 0 {
                return Err(DgpError::Config("chained layers above the first have random inducing inputs; use layer 0".into()));
            }
            let q = s.layers.first().ok_or_else(missing)?;
            Ok((q.mean.clone(), q.covariance()))
        }
        VariationalState::JointGaussian(s) => {
            if layer >= s.num_layers() {
                return Err(missing());
            }
            let blocks = crate::joint::assemble_joint_blocks(s);
            Ok((blocks.means[layer].clone(), blocks.diagonal[layer].clone()))
        }
    }
}

fn diagnose(d: &Diagnose, out: &mut dyn Write) -> Result<()> {
    print_config(out, d);
    match d {
        Diagnose::Counterexample(a) => {
            let r = counterexample_eval(a.gamma, a.u, a.mu_star, a.sigma_star2)?;
            say(out, format!("q = {}", sig6(r.q)));
            say(out, format!("variance = {}", sig6(r.v)));
            say(out, format!("derivative = {}", sig6(r.derivative)));
            say(out, format!("derivative_at_zero = {}", sig6(r.derivative_at_zero)));
            say(out, format!("noise_reduces_variance = {}", r.noise_reduces_variance));
            if a.mc_samples > 0 {
                let v = counterexample_mc(a.gamma, a.u, a.mu_star, a.sigma_star2, a.mc_samples, RngHandle::new(a.seed))?;
                say(out, format!("variance_mc = {}", sig6(v)));
            }
        }
        Diagnose::Scan(a) => {
            let scans = second_derivative_scan(a.gamma, &a.m, a.grid_n)?;
            for s in &scans {
                say(out, format!("M = {} min_second_derivative = {} at x = {}", s.num_inducing, sig6(s.min_second_derivative), sig6(s.argmin)));
            }
            if let Some(path) = &a.out {
                let mut rows = Vec::new();
                for s in &scans {
                    let n = s.grid.len();
                    for i in 0..n {
                        // No central difference exists at the two end points.
                        let d2 = if i == 0 || i + 1 == n { f64::NAN } else { s.second_derivative[i - 1] };
                        rows.push(vec![s.num_inducing as f64, s.grid[i], s.variance[i], d2]);
                    }
                }
                write_csv(path, "scan", 0, &["num_inducing", "x", "variance", "second_derivative"], &rows)?;
            }
        }
        Diagnose::NoisyInput(a) => {
            let run = load_run(&a.run)?;
            let layer = run.model.layers.get(a.layer).ok_or_else(|| DgpError::Config(format!("model has no layer {}", a.layer)))?;
            let (m, s) = layer_marginal(&run.state, a.layer)?;
            let r = noisy_input_expansion(layer, &m, &s, a.x_bar, a.noise_variance)?;
            say(out, format!("base_variance = {}", sig6(r.base_variance)));
            say(out, format!("mean_derivative = {}", sig6(r.mean_derivative)));
            say(out, format!("variance_second_derivative = {}", sig6(r.variance_second_derivative)));
            say(out, format!("expanded_variance = {}", sig6(r.expanded_variance)));
        }
        Diagnose::LayerVariance(a) => {
            let run = load_run(&a.run)?;
            let r = layer_variance_probe(&run.model, &run.state, a.x0, a.n_samples, RngHandle::new(a.seed))?;
            for (l, (v, se)) in r.variance.iter().zip(&r.std_error).enumerate() {
                say(out, format!("layer {l} variance = {} (se {})", sig6(*v), sig6(*se)));
            }
        }
    }
    Ok(())
}

fn replicate(a: &ReplicateArgs, threads: usize, out: &mut dyn Write) -> Result<()> {
    let mut config = ExperimentConfig::load(&a.config)?;
    if let Some(dir) = &a.out {
        config.outputs.dir = dir.clone();
    }
    print_config(out, &config);
    let report = run_replication(&config, threads)?;
    for s in &report.summaries {
        let var: Vec<String> = s.layer_variance_mean.iter().map(|v| sig6(*v)).collect();
        say(
            out,
            format!(
                "{}: runs {} failed {} elbo {} ± {} layer variance [{}] rmse {}",
                s.scheme,
                s.runs,
                s.failures,
                sig6(s.elbo_mean),
                sig6(s.elbo_sd),
                var.join(", "),
                sig6(s.rmse_mean)
            ),
        );
    }
    say(out, format!("report written to {}", config.outputs.dir.join("report.json").display()));
    Ok(())
}
