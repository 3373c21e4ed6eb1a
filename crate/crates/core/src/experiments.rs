//! Dataset generators, experiment configs and the multi-seed replication harness.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::chained::ChainedInducingState;
use crate::diagnostics::layer_variance_probe;
use crate::error::{DgpError, Result};
use crate::estimate::{BaseNoise, Dataset, ElboEstimate, SchemeKind};
use crate::layers::{DgpModelSpec, GPLayerSpec, MeanFnSpec};
use crate::math::{KernelSpec, RngHandle};
use crate::meanfield::INIT_COVARIANCE_SCALE;
use crate::scheme::{sample_layers, VariationalState};
use crate::training::{fit_from, trace_slope, FitConfig, FitResult, TracePoint};

const DATA_STREAM: u64 = 0x6461_7461;
const PROBE_STREAM: u64 = 0x7072_6f62;
const SAMPLE_STREAM: u64 = 0x7361_6d70;

/// Base frequency of the chirp generator.
pub const CHIRP_F0: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Generator {
    /// `sin(2πx)`
    Sine,
    Identity,
    /// `sin(2π(x + 1.5x²)·f₀)`
    Chirp,
    /// Two-column CSV of `x,y`; `#` lines and a non-numeric header are skipped.
    FromFile { path: PathBuf },
}

fn default_n() -> usize {
    40
}

fn default_range() -> [f64; 2] {
    [-1.0, 1.0]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub generator: Generator,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_range")]
    pub range: [f64; 2],
    /// Standard deviation of additive Gaussian noise on `y`.
    #[serde(default)]
    pub noise_sd: f64,
    #[serde(default)]
    pub seed: u64,
}

impl DatasetSpec {
    pub fn new(generator: Generator, n: usize, range: [f64; 2]) -> Self {
        DatasetSpec { generator, n, range, noise_sd: 0.0, seed: 0 }
    }
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    let f: fn(f64) -> f64 = match &spec.generator {
        Generator::FromFile { path } => return read_dataset(path),
        Generator::Sine => |x| (2.0 * std::f64::consts::PI * x).sin(),
        Generator::Identity => |x| x,
        Generator::Chirp => |x| (2.0 * std::f64::consts::PI * (x + 1.5 * x * x) * CHIRP_F0).sin(),
    };
    if spec.n < 2 {
        return Err(DgpError::Config(format!("dataset needs at least 2 points, got {}", spec.n)));
    }
    let [a, b] = spec.range;
    if !(a < b) || !a.is_finite() || !b.is_finite() {
        return Err(DgpError::Config(format!("dataset range [{a}, {b}] is not an interval")));
    }
    if !(spec.noise_sd >= 0.0) || !spec.noise_sd.is_finite() {
        return Err(DgpError::Config("noise_sd must be finite and non-negative".into()));
    }
    let x: Vec<f64> = (0..spec.n).map(|i| a + (b - a) * i as f64 / (spec.n - 1) as f64).collect();
    let mut y: Vec<f64> = x.iter().map(|&v| f(v)).collect();
    if spec.noise_sd > 0.0 {
        let e = BaseNoise::draw(1, spec.n, RngHandle::new(spec.seed).derive(DATA_STREAM), false);
        for (v, n) in y.iter_mut().zip(e.row(0)) {
            *v += spec.noise_sd * n;
        }
    }
    Dataset::new(x, y)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| DgpError::io(path, e))?;
    parse_dataset(&text, &path.display().to_string())
}

pub fn parse_dataset(text: &str, source_name: &str) -> Result<Dataset> {
    let (mut x, mut y) = (Vec::new(), Vec::new());
    let mut seen_row = false;
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = t.split(',').map(str::trim).collect();
        let parse = |k: usize| -> std::result::Result<f64, String> {
            fields.get(k).ok_or_else(|| format!("missing column {}", k + 1))?.parse::<f64>().map_err(|e| e.to_string())
        };
        match (parse(0), parse(1)) {
            (Ok(a), Ok(b)) => {
                x.push(a);
                y.push(b);
                seen_row = true;
            }
            _ if !seen_row && fields.iter().any(|f| f.parse::<f64>().is_err()) && x.is_empty() && !fields.is_empty() && fields[0].parse::<f64>().is_err() => {
                seen_row = true;
            }
            (a, b) => {
                let (column, message) = match a {
                    Err(m) => (1, m),
                    Ok(_) => (2, b.err().unwrap_or_default()),
                };
                return Err(DgpError::Parse { source_name: source_name.to_string(), line: i + 1, column, message });
            }
        }
    }
    if x.len() < 2 {
        return Err(DgpError::Config(format!("{source_name} holds fewer than 2 data rows")));
    }
    Dataset::new(x, y)
}

fn default_init_scale() -> f64 {
    INIT_COVARIANCE_SCALE
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// One kernel per layer, input side first.
    pub kernels: Vec<KernelSpec>,
    /// Defaults to identity inner layers and a zero-mean output layer.
    #[serde(default)]
    pub mean_fns: Option<Vec<MeanFnSpec>>,
    pub num_inducing: usize,
    pub noise_variance: f64,
    /// Initial variational covariance as a multiple of the prior Gram.
    #[serde(default = "default_init_scale")]
    pub init_covariance_scale: f64,
}

impl ModelConfig {
    /// Every layer starts with `num_inducing` locations spread evenly over the input range.
    pub fn build(&self, data: &Dataset) -> Result<DgpModelSpec> {
        let l = self.kernels.len();
        if l == 0 {
            return Err(DgpError::Config("model needs at least one kernel".into()));
        }
        if self.num_inducing < 2 {
            return Err(DgpError::Config("num_inducing must be at least 2".into()));
        }
        if !(self.init_covariance_scale > 0.0) || !self.init_covariance_scale.is_finite() {
            return Err(DgpError::Config("init_covariance_scale must be positive".into()));
        }
        let mean_fns = match &self.mean_fns {
            Some(m) if m.len() != l => {
                return Err(DgpError::Config(format!("{} mean functions given for {l} layers", m.len())));
            }
            Some(m) => m.clone(),
            None => (0..l).map(|i| MeanFnSpec::default_for(i, l)).collect(),
        };
        let lo = data.x.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = data.x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let m = self.num_inducing;
        let z: Vec<f64> = (0..m).map(|i| lo + (hi - lo) * i as f64 / (m - 1) as f64).collect();
        let model = DgpModelSpec {
            layers: self
                .kernels
                .iter()
                .zip(mean_fns)
                .map(|(k, mean_fn)| GPLayerSpec { kernel: k.clone(), mean_fn, inducing: z.clone() })
                .collect(),
            noise_variance: self.noise_variance,
        };
        model.validate().map_err(|e| DgpError::Config(e.to_string()))?;
        Ok(model)
    }

    pub fn initial_state(&self, model: &DgpModelSpec, scheme: SchemeKind) -> Result<VariationalState> {
        let mut state = match scheme {
            SchemeKind::Chained => VariationalState::Chained(ChainedInducingState::init(model, model.layers[0].inducing.clone())?),
            other => VariationalState::init(other, model, &model.layers[0].inducing)?,
        };
        state.scale_covariances((self.init_covariance_scale / INIT_COVARIANCE_SCALE).sqrt());
        Ok(state)
    }
}

fn default_grid() -> [f64; 3] {
    [-1.5, 1.5, 61.0]
}

fn default_plot_samples() -> usize {
    50
}

fn default_probe_samples() -> usize {
    2000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// `[start, end, points]` of the sample grid.
    #[serde(default = "default_grid")]
    pub grid: [f64; 3],
    #[serde(default = "default_plot_samples")]
    pub plot_samples: usize,
    #[serde(default = "default_probe_samples")]
    pub probe_samples: usize,
    #[serde(default)]
    pub probe_x: f64,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("results"),
            grid: default_grid(),
            plot_samples: default_plot_samples(),
            probe_samples: default_probe_samples(),
            probe_x: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    pub schemes: Vec<SchemeKind>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub training: FitConfig,
    #[serde(default)]
    pub outputs: OutputConfig,
}

impl ExperimentConfig {
    pub fn from_json(text: &str, source_name: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| DgpError::Parse {
            source_name: source_name.to_string(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| DgpError::io(path, e))?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        if self.schemes.is_empty() || self.seeds.is_empty() {
            return Err(DgpError::Config("at least one scheme and one seed are required".into()));
        }
        let [a, b, n] = self.outputs.grid;
        if !(a < b) || !(n >= 1.0) || n.fract() != 0.0 {
            return Err(DgpError::Config("grid must be [start, end, points] with start < end".into()));
        }
        self.training.validate()
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form, with the
    /// output directory blanked so relocated runs hash alike.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.outputs.dir = PathBuf::new();
        hex_digest(&serde_json::to_string(&canonical).expect("config serialises"))
    }

    pub fn grid_points(&self) -> Vec<f64> {
        let [a, b, n] = self.outputs.grid;
        let n = n as usize;
        if n == 1 {
            return vec![a];
        }
        (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
    }
}

/// First 16 hex digits of the SHA-256 of `text`.
pub fn hex_digest(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().take(8).fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Writes a CSV whose first line is a `#` comment carrying the config hash and seed.
pub fn write_csv(path: &Path, config_hash: &str, seed: u64, columns: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let mut out = format!("# config_hash={config_hash} seed={seed}\n{}\n", columns.join(","));
    for row in rows {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| DgpError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("report serialises");
    text.push('\n');
    fs::write(path, text).map_err(|e| DgpError::io(path, e))
}

pub fn trace_rows(trace: &[TracePoint]) -> Vec<Vec<f64>> {
    trace.iter().map(|p| vec![p.iteration as f64, p.elbo, p.std_error]).collect()
}

/// Long format: one row per `(layer, sample, x)`.
pub fn sample_rows(layers: &[crate::linalg::Mat], inputs: &[f64]) -> Vec<Vec<f64>> {
    let mut rows = Vec::new();
    for (l, m) in layers.iter().enumerate() {
        for s in 0..m.rows() {
            for (j, &x) in inputs.iter().enumerate() {
                rows.push(vec![l as f64, s as f64, x, m[(s, j)]]);
            }
        }
    }
    rows
}

/// Everything needed to resample a fitted model later.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub config_hash: String,
    pub scheme: SchemeKind,
    pub seed: u64,
    pub model: DgpModelSpec,
    pub state: VariationalState,
    pub trace: Vec<TracePoint>,
    pub final_estimate: ElboEstimate,
}

impl FitRecord {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| DgpError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| DgpError::Parse {
            source_name: path.display().to_string(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })
    }
}

/// Fits one `(scheme, seed)` cell of an experiment.
pub fn fit_single(config: &ExperimentConfig, data: &Dataset, scheme: SchemeKind, seed: u64) -> Result<(DgpModelSpec, FitResult)> {
    let model = config.model.build(data)?;
    let state = config.model.initial_state(&model, scheme)?;
    let training = FitConfig { seed, ..config.training.clone() };
    let result = fit_from(&model, state, data, &training)?;
    Ok((model, result))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub scheme: SchemeKind,
    pub seed: u64,
    pub config_hash: String,
    pub ok: bool,
    pub error: Option<String>,
    pub final_elbo: Option<f64>,
    pub elbo_std_error: Option<f64>,
    /// Variance of each layer's output at the probe input.
    pub layer_variance: Vec<f64>,
    pub layer_variance_se: Vec<f64>,
    /// RMSE of the Monte-Carlo posterior-mean composition on the training data.
    pub train_rmse: Option<f64>,
    /// Least-squares slope of the last half of the ELBO trace.
    pub trace_slope: Option<f64>,
    pub artifacts: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchemeSummary {
    pub scheme: SchemeKind,
    pub runs: usize,
    pub failures: usize,
    pub elbo_mean: f64,
    pub elbo_sd: f64,
    pub layer_variance_mean: Vec<f64>,
    pub layer_variance_sd: Vec<f64>,
    pub rmse_mean: f64,
    pub rmse_sd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicationReport {
    pub config_hash: String,
    pub probe_x: f64,
    pub runs: Vec<RunRecord>,
    pub summaries: Vec<SchemeSummary>,
}

impl ReplicationReport {
    pub fn run(&self, scheme: SchemeKind, seed: u64) -> Option<&RunRecord> {
        self.runs.iter().find(|r| r.scheme == scheme && r.seed == seed)
    }

    pub fn summary(&self, scheme: SchemeKind) -> Option<&SchemeSummary> {
        self.summaries.iter().find(|s| s.scheme == scheme)
    }
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 { (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    (mean, sd)
}

fn summarise(scheme: SchemeKind, runs: &[RunRecord]) -> SchemeSummary {
    let mine: Vec<&RunRecord> = runs.iter().filter(|r| r.scheme == scheme).collect();
    let ok: Vec<&&RunRecord> = mine.iter().filter(|r| r.ok).collect();
    let elbo: Vec<f64> = ok.iter().filter_map(|r| r.final_elbo).collect();
    let rmse: Vec<f64> = ok.iter().filter_map(|r| r.train_rmse).collect();
    let n_layers = ok.first().map_or(0, |r| r.layer_variance.len());
    let per_layer: Vec<(f64, f64)> = (0..n_layers).map(|l| mean_sd(&ok.iter().map(|r| r.layer_variance[l]).collect::<Vec<_>>())).collect();
    let (elbo_mean, elbo_sd) = mean_sd(&elbo);
    let (rmse_mean, rmse_sd) = mean_sd(&rmse);
    SchemeSummary {
        scheme,
        runs: mine.len(),
        failures: mine.len() - ok.len(),
        elbo_mean,
        elbo_sd,
        layer_variance_mean: per_layer.iter().map(|p| p.0).collect(),
        layer_variance_sd: per_layer.iter().map(|p| p.1).collect(),
        rmse_mean,
        rmse_sd,
    }
}

fn run_cell(config: &ExperimentConfig, hash: &str, data: &Dataset, scheme: SchemeKind, seed: u64) -> RunRecord {
    let stem = format!("{}_seed{seed}", scheme.name());
    let mut record = RunRecord {
        scheme,
        seed,
        config_hash: hash.to_string(),
        ok: false,
        error: None,
        final_elbo: None,
        elbo_std_error: None,
        layer_variance: Vec::new(),
        layer_variance_se: Vec::new(),
        train_rmse: None,
        trace_slope: None,
        artifacts: Vec::new(),
    };
    let outcome = (|| -> Result<()> {
        let (_, fitted) = fit_single(config, data, scheme, seed)?;
        let dir = &config.outputs.dir;
        let trace_name = format!("{stem}_trace.csv");
        write_csv(&dir.join(&trace_name), hash, seed, &["iteration", "elbo", "std_error"], &trace_rows(&fitted.trace))?;
        record.artifacts.push(trace_name);
        record.final_elbo = Some(fitted.final_estimate.value);
        record.elbo_std_error = Some(fitted.final_estimate.std_error);
        record.trace_slope = Some(trace_slope(&fitted.trace, 0.5));

        let root = RngHandle::new(seed);
        let probe = layer_variance_probe(&fitted.model, &fitted.state, config.outputs.probe_x, config.outputs.probe_samples, root.derive(PROBE_STREAM))?;
        record.layer_variance = probe.variance;
        record.layer_variance_se = probe.std_error;

        let fit_draws = sample_layers(&fitted.model, &fitted.state, &data.x, config.outputs.probe_samples, root.derive(PROBE_STREAM + 1))?;
        let mean = fit_draws.layer_mean(fit_draws.n_layers() - 1);
        let sse: f64 = mean.iter().zip(&data.y).map(|(a, b)| (a - b).powi(2)).sum();
        record.train_rmse = Some((sse / data.len() as f64).sqrt());

        let grid = config.grid_points();
        let draws = sample_layers(&fitted.model, &fitted.state, &grid, config.outputs.plot_samples, root.derive(SAMPLE_STREAM))?;
        let samples_name = format!("{stem}_samples.csv");
        write_csv(&dir.join(&samples_name), hash, seed, &["layer", "sample", "x", "value"], &sample_rows(&draws.layers, &grid))?;
        record.artifacts.push(samples_name);
        Ok(())
    })();
    match outcome {
        Ok(()) => record.ok = true,
        Err(e) => {
            log::warn!("{stem} failed: {e}");
            record.error = Some(e.to_string());
        }
    }
    record
}

/// Fits every `(scheme, seed)` pair, writes per-run artifacts plus `data.csv`
/// and `report.json` into the output directory, and returns the report.
///
/// Failed runs are kept in the report with `ok = false`.
pub fn run_replication(config: &ExperimentConfig, threads: usize) -> Result<ReplicationReport> {
    config.validate()?;
    let hash = config.hash();
    let data = generate_dataset(&config.dataset)?;
    config.model.build(&data)?;
    let dir = &config.outputs.dir;
    fs::create_dir_all(dir).map_err(|e| DgpError::io(dir, e))?;
    let rows: Vec<Vec<f64>> = data.x.iter().zip(&data.y).map(|(&x, &y)| vec![x, y]).collect();
    write_csv(&dir.join("data.csv"), &hash, config.dataset.seed, &["x", "y"], &rows)?;

    let jobs: Vec<(SchemeKind, u64)> = config.schemes.iter().flat_map(|&s| config.seeds.iter().map(move |&seed| (s, seed))).collect();
    let results: Mutex<Vec<Option<RunRecord>>> = Mutex::new(vec![None; jobs.len()]);
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..threads.clamp(1, jobs.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(scheme, seed)) = jobs.get(i) else { break };
                log::info!("fitting {} seed {seed}", scheme.name());
                let rec = run_cell(config, &hash, &data, scheme, seed);
                results.lock().expect("no worker panicked")[i] = Some(rec);
            });
        }
    });
    let runs: Vec<RunRecord> = results.into_inner().expect("no worker panicked").into_iter().map(|r| r.expect("every job ran")).collect();
    let mut schemes = config.schemes.clone();
    schemes.dedup();
    let summaries = schemes.iter().map(|&s| summarise(s, &runs)).collect();
    let report = ReplicationReport { config_hash: hash, probe_x: config.outputs.probe_x, runs, summaries };
    write_json(&dir.join("report.json"), &report)?;
    Ok(report)
}
