//! Collapse diagnostics: noisy-input variance expansion, the single-inducing
//! point counterexample, the inducing-density scan and per-layer variance probes.

use serde::{Deserialize, Serialize};

use crate::error::{DgpError, Result};
use crate::layers::{marginal_conditional, Conditioner, DgpModelSpec, GPLayerSpec, MeanFnSpec};
use crate::linalg::{JitterSchedule, Mat};
use crate::math::{standard_normals, KernelSpec, RngHandle};
use crate::scheme::{sample_layers, VariationalState};

/// Stencil step relative to the kernel lengthscale.
pub const STENCIL_STEP: f64 = 1e-3;

/// Blocks used by the jackknife in [`layer_variance_probe`].
pub const JACKKNIFE_BLOCKS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoisyInputExpansion {
    pub base_variance: f64,
    pub mean_derivative: f64,
    pub variance_second_derivative: f64,
    pub noise_variance: f64,
    pub expanded_variance: f64,
}

/// Variance of a layer's output when its input is `x̄` plus zero-mean noise of
/// variance `noise_variance`, to first order in the noise:
/// `σ² + σ_n² [(μ̄′)² + ∂²σ²]`.
///
/// Derivatives come from a five-point stencil on the marginal moments with
/// step `10⁻³·γ`; if the moments are not finite the step is widened tenfold once.
pub fn noisy_input_expansion(layer: &GPLayerSpec, m: &[f64], s: &Mat, x_bar: f64, noise_variance: f64) -> Result<NoisyInputExpansion> {
    if !(noise_variance >= 0.0) || !noise_variance.is_finite() {
        return Err(DgpError::InvalidInput(format!("input noise variance {noise_variance} must be finite and non-negative")));
    }
    if !x_bar.is_finite() {
        return Err(DgpError::InvalidInput("expansion point must be finite".into()));
    }
    let base = STENCIL_STEP * layer.kernel.lengthscale;
    for h in [base, 10.0 * base] {
        let inputs: Vec<f64> = (-2..=2).map(|k| x_bar + k as f64 * h).collect();
        let mom = marginal_conditional(layer, &inputs, m, s)?;
        let mu = &mom.mean;
        let var = mom.variances();
        if mu.iter().chain(&var).any(|v| !v.is_finite()) {
            continue;
        }
        let d1 = (mu[0] - 8.0 * mu[1] + 8.0 * mu[3] - mu[4]) / (12.0 * h);
        let d2 = (-var[0] + 16.0 * var[1] - 30.0 * var[2] + 16.0 * var[3] - var[4]) / (12.0 * h * h);
        let sigma2 = var[2];
        let expanded = if noise_variance == 0.0 { sigma2 } else { sigma2 + noise_variance * (d1 * d1 + d2) };
        return Ok(NoisyInputExpansion {
            base_variance: sigma2,
            mean_derivative: d1,
            variance_second_derivative: d2,
            noise_variance,
            expanded_variance: expanded,
        });
    }
    Err(DgpError::NonFinite { layer: 0, detail: format!("stencil moments around {x_bar} are not finite") })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterexampleResult {
    pub gamma: f64,
    pub u: f64,
    pub mu_star: f64,
    pub sigma_star2: f64,
    pub q: f64,
    /// `1 − Q`, the output variance at the uncertain input.
    pub v: f64,
    /// `∂v/∂σ*²` at the supplied `σ*²`.
    pub derivative: f64,
    /// `∂v/∂σ*²` at `σ*² = 0`.
    pub derivative_at_zero: f64,
    /// `γ < √2 |u − μ*|`.
    pub noise_reduces_variance: bool,
}

/// Unit-variance squared-exponential GP conditioned on a single inducing
/// value of zero at location `u`, queried at `x* ~ N(μ*, σ*²)`.
pub fn counterexample_eval(gamma: f64, u: f64, mu_star: f64, sigma_star2: f64) -> Result<CounterexampleResult> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(DgpError::InvalidInput(format!("lengthscale {gamma} must be positive")));
    }
    if !u.is_finite() || !mu_star.is_finite() {
        return Err(DgpError::InvalidInput("inducing location and input mean must be finite".into()));
    }
    if !(sigma_star2 >= 0.0) || !sigma_star2.is_finite() {
        return Err(DgpError::InvalidInput(format!("input variance {sigma_star2} must be non-negative")));
    }
    let g2 = gamma * gamma;
    let d2 = (u - mu_star).powi(2);
    let c = g2 / 2.0 + sigma_star2;
    let r = 2.0 * sigma_star2 / g2 + 1.0;
    let e = (-d2 / (2.0 * c)).exp();
    let q = e / r.sqrt();
    let derivative = e * (-d2 / (2.0 * c * c * r.sqrt()) + 1.0 / (g2 * r.powf(1.5)));
    let derivative_at_zero = (-d2 / g2).exp() * (-2.0 * d2 / (g2 * g2) + 1.0 / g2);
    Ok(CounterexampleResult {
        gamma,
        u,
        mu_star,
        sigma_star2,
        q,
        v: 1.0 - q,
        derivative,
        derivative_at_zero,
        noise_reduces_variance: gamma < 2f64.sqrt() * (u - mu_star).abs(),
    })
}

/// Monte-Carlo estimate of the same variance: draw `x*`, then `f(x*)` from
/// the conditioned GP. Reusing `rng` across `σ*²` gives common random numbers.
pub fn counterexample_mc(gamma: f64, u: f64, mu_star: f64, sigma_star2: f64, n_samples: usize, rng: RngHandle) -> Result<f64> {
    counterexample_eval(gamma, u, mu_star, sigma_star2)?;
    if n_samples < 2 {
        return Err(DgpError::InvalidInput("need at least two samples".into()));
    }
    let mut r = rng.rng();
    let eta = standard_normals(&mut r, n_samples);
    let xi = standard_normals(&mut r, n_samples);
    let sd = sigma_star2.sqrt();
    let draws: Vec<f64> = eta
        .iter()
        .zip(&xi)
        .map(|(&a, &b)| {
            let x = mu_star + sd * a;
            let k = (-(x - u).powi(2) / (2.0 * gamma * gamma)).exp();
            (1.0 - k * k).max(0.0).sqrt() * b
        })
        .collect();
    let n = n_samples as f64;
    let mean = draws.iter().sum::<f64>() / n;
    Ok(draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanResult {
    pub num_inducing: usize,
    pub grid: Vec<f64>,
    /// Prior-conditional variance on the grid.
    pub variance: Vec<f64>,
    /// Central second difference; the two end points are left out.
    pub second_derivative: Vec<f64>,
    pub min_second_derivative: f64,
    pub argmin: f64,
}

/// For each `M`, places `M` evenly spaced locations inside `[−3γ, 3γ]` and scans
/// the second derivative of `k(x,x) − k(x,Z)K⁻¹k(Z,x)` over a `grid_n` grid.
pub fn second_derivative_scan(gamma: f64, m_list: &[usize], grid_n: usize) -> Result<Vec<ScanResult>> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(DgpError::InvalidInput(format!("lengthscale {gamma} must be positive")));
    }
    if grid_n < 3 {
        return Err(DgpError::InvalidInput("grid needs at least three points".into()));
    }
    let (lo, hi) = (-3.0 * gamma, 3.0 * gamma);
    let h = (hi - lo) / (grid_n - 1) as f64;
    let grid: Vec<f64> = (0..grid_n).map(|i| lo + h * i as f64).collect();
    let kernel = KernelSpec::squared_exponential(1.0, gamma);
    m_list
        .iter()
        .map(|&m| {
            if m < 2 {
                return Err(DgpError::InvalidInput(format!("scan needs M ≥ 2, got {m}")));
            }
            // Cell centres: even spacing with half a gap to either end.
            let z: Vec<f64> = (0..m).map(|i| lo + (hi - lo) * (i as f64 + 0.5) / m as f64).collect();
            let cond = Conditioner::new(&kernel, MeanFnSpec::Zero, &z, &JitterSchedule::default())?;
            let variance: Vec<f64> = grid.iter().map(|&x| cond.project(x).residual_variance()).collect();
            let second: Vec<f64> = (1..grid_n - 1).map(|i| (variance[i + 1] - 2.0 * variance[i] + variance[i - 1]) / (h * h)).collect();
            let (k, &min) = second
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(b.1))
                .expect("grid has interior points");
            Ok(ScanResult {
                num_inducing: m,
                grid: grid.clone(),
                variance,
                second_derivative: second.clone(),
                min_second_derivative: min,
                argmin: grid[k + 1],
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerVarianceProbe {
    pub x0: f64,
    pub n_samples: usize,
    pub variance: Vec<f64>,
    /// Delete-one-block jackknife standard errors.
    pub std_error: Vec<f64>,
}

fn sample_variance(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

/// Monte-Carlo variance of every layer's output at `x0`.
pub fn layer_variance_probe(model: &DgpModelSpec, state: &VariationalState, x0: f64, n_samples: usize, rng: RngHandle) -> Result<LayerVarianceProbe> {
    if n_samples < 2 * JACKKNIFE_BLOCKS {
        return Err(DgpError::InvalidInput(format!("need at least {} samples", 2 * JACKKNIFE_BLOCKS)));
    }
    let set = sample_layers(model, state, &[x0], n_samples, rng)?;
    let block = n_samples / JACKKNIFE_BLOCKS;
    let b = JACKKNIFE_BLOCKS as f64;
    let mut variance = Vec::with_capacity(set.n_layers());
    let mut std_error = Vec::with_capacity(set.n_layers());
    for l in 0..set.n_layers() {
        let draws = set.layers[l].column(0);
        variance.push(sample_variance(&draws));
        let leave_out: Vec<f64> = (0..JACKKNIFE_BLOCKS)
            .map(|k| {
                let kept: Vec<f64> = draws
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| i / block != k || *i >= block * JACKKNIFE_BLOCKS)
                    .map(|(_, &v)| v)
                    .collect();
                sample_variance(&kept)
            })
            .collect();
        let mean = leave_out.iter().sum::<f64>() / b;
        std_error.push(((b - 1.0) / b * leave_out.iter().map(|v| (v - mean).powi(2)).sum::<f64>()).sqrt());
    }
    Ok(LayerVarianceProbe { x0, n_samples, variance, std_error })
}
