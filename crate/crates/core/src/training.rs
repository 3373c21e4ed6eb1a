//! Gradient providers, Adam and the fitting loop.

use serde::{Deserialize, Serialize};

use crate::autodiff;
use crate::error::{DgpError, Result};
use crate::estimate::{BaseNoise, Dataset, ElboEstimate, SchemeKind};
use crate::layers::DgpModelSpec;
use crate::math::RngHandle;
use crate::params::{ParamVector, Problem, Trainable};
use crate::scheme::{JointEstimator, VariationalState};

/// Central-difference step relative to `1 + |θ_i|`.
pub const DEFAULT_FD_STEP: f64 = 1e-4;

/// ELBO values below this abort a fit.
pub const DIVERGENCE_THRESHOLD: f64 = -1e8;

const TRAIN_STREAM: u64 = 0x7472_6169_6e;
const EVAL_STREAM: u64 = 0x6576_616c;
const INIT_STREAM: u64 = 0x696e_6974;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum GradientProvider {
    /// Central finite differences with the base noise held fixed.
    Crn { step: f64 },
    /// Exact gradient of the same estimator by reverse-mode differentiation.
    Reverse,
}

impl Default for GradientProvider {
    fn default() -> Self {
        GradientProvider::Crn { step: DEFAULT_FD_STEP }
    }
}

/// `∂f/∂θ_i ≈ [f(θ + h e_i) − f(θ − h e_i)] / 2h` with `h = step·(1 + |θ_i|)`.
///
/// `objective` must be deterministic; freeze any randomness it uses.
pub fn grad_crn<F>(mut objective: F, theta: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut probe = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let h = step * (1.0 + theta[i].abs());
        probe[i] = theta[i] + h;
        let up = objective(&probe);
        probe[i] = theta[i] - h;
        let down = objective(&probe);
        probe[i] = theta[i];
        let g = match (up, down) {
            (Ok(a), Ok(b)) => (a - b) / (2.0 * h),
            _ => f64::NAN,
        };
        if !g.is_finite() {
            return Err(DgpError::NonFiniteGradient { coordinate: i, name: format!("#{i}") });
        }
        grad.push(g);
    }
    Ok(grad)
}

/// ELBO and its gradient with respect to the raw parameters, both under the
/// same frozen noise.
pub fn elbo_gradient(
    problem: &Problem,
    theta: &ParamVector,
    data: &Dataset,
    noise: &BaseNoise,
    provider: GradientProvider,
) -> Result<(f64, Vec<f64>)> {
    let name = |e: DgpError| match e {
        DgpError::NonFiniteGradient { coordinate, .. } => DgpError::NonFiniteGradient { coordinate, name: theta.name_of(coordinate) },
        other => other,
    };
    let (value, grad) = match provider {
        GradientProvider::Crn { step } => {
            let value = problem.objective(&theta.values, data, noise)?;
            let grad = grad_crn(|t| problem.objective(t, data, noise), &theta.values, step).map_err(name)?;
            (value, grad)
        }
        GradientProvider::Reverse => {
            autodiff::gradient(&theta.values, |vars| Ok::<_, DgpError>(problem.elbo_parts(vars, data, noise)?.value()))?
        }
    };
    if !value.is_finite() {
        return Err(DgpError::NonFinite { layer: 0, detail: "training objective is not finite".into() });
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(DgpError::NonFiniteGradient { coordinate: i, name: theta.name_of(i) });
    }
    Ok((value, grad))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(dim: usize, learning_rate: f64) -> Self {
        AdamState {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam step descending along `g`.
pub fn adam_step(state: &AdamState, theta: &[f64], g: &[f64]) -> (AdamState, Vec<f64>) {
    assert_eq!(theta.len(), g.len());
    assert_eq!(state.m.len(), g.len());
    let mut next = state.clone();
    next.t += 1;
    let t = next.t as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let mut out = theta.to_vec();
    for i in 0..g.len() {
        next.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g[i];
        next.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g[i] * g[i];
        let m_hat = next.m[i] / c1;
        let v_hat = next.v[i] / c2;
        out[i] -= state.learning_rate * m_hat / (v_hat.sqrt() + state.eps);
    }
    (next, out)
}

/// Clamps each `g_i` to `±k` times Adam's bias-corrected running RMS for that
/// coordinate. Coordinates with no history are left alone.
pub fn clip_to_running_rms(state: &AdamState, g: &mut [f64], k: f64) {
    if state.t == 0 {
        return;
    }
    let c2 = 1.0 - state.beta2.powi(state.t as i32);
    for (gi, vi) in g.iter_mut().zip(&state.v) {
        let bound = k * (vi / c2).sqrt();
        if bound > 0.0 {
            *gi = gi.clamp(-bound, bound);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    /// Monte-Carlo samples per training step.
    pub n_samples: usize,
    /// Monte-Carlo samples per trace evaluation.
    pub eval_samples: usize,
    pub eval_every: usize,
    pub seed: u64,
    pub refresh_noise_every: usize,
    pub gradient: GradientProvider,
    /// Standardise each noise column across samples.
    pub moment_match: bool,
    pub trainable: Trainable,
    pub joint_estimator: JointEstimator,
    /// Scale of a random perturbation added to the initial raw parameters.
    pub init_jitter: f64,
    /// Learning-rate multiplier for variational covariance factors.
    pub covariance_lr_scale: f64,
    /// Evaluation ELBO below which the fit aborts as diverged.
    pub divergence_threshold: f64,
    /// If set, gradients are clipped to this many running RMS units before each step.
    pub clip_sigma: Option<f64>,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            iterations: 3000,
            learning_rate: 5e-3,
            n_samples: 10,
            eval_samples: 2000,
            eval_every: 50,
            seed: 0,
            refresh_noise_every: 10,
            gradient: GradientProvider::default(),
            moment_match: false,
            trainable: Trainable::default(),
            joint_estimator: JointEstimator::Analytic,
            init_jitter: 0.0,
            covariance_lr_scale: 1.0,
            divergence_threshold: DIVERGENCE_THRESHOLD,
            clip_sigma: None,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DgpError::Config(m.to_string()));
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be finite and non-negative");
        }
        if self.n_samples == 0 || self.eval_samples < 2 {
            return bad("n_samples must be positive and eval_samples at least 2");
        }
        if self.eval_every == 0 || self.refresh_noise_every == 0 {
            return bad("eval_every and refresh_noise_every must be positive");
        }
        if let GradientProvider::Crn { step } = self.gradient {
            if !(step > 0.0) {
                return bad("finite-difference step must be positive");
            }
        }
        if let JointEstimator::Sampled { n_inner: 0 } = self.joint_estimator {
            return bad("n_inner must be positive");
        }
        if !(self.init_jitter >= 0.0) {
            return bad("init_jitter must be non-negative");
        }
        if !(self.covariance_lr_scale >= 0.0) || !self.covariance_lr_scale.is_finite() {
            return bad("covariance_lr_scale must be finite and non-negative");
        }
        if !self.divergence_threshold.is_finite() {
            return bad("divergence_threshold must be finite");
        }
        if self.clip_sigma.is_some_and(|k| !(k > 0.0) || !k.is_finite()) {
            return bad("clip_sigma must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub iteration: usize,
    pub elbo: f64,
    pub std_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub model: DgpModelSpec,
    pub state: VariationalState,
    pub trace: Vec<TracePoint>,
    pub final_estimate: ElboEstimate,
    pub theta: ParamVector,
}

/// Fits `scheme` from its default initial state.
pub fn fit(model: &DgpModelSpec, scheme: SchemeKind, data: &Dataset, config: &FitConfig) -> Result<FitResult> {
    let state = VariationalState::init(scheme, model, &data.x)?;
    fit_from(model, state, data, config)
}

/// Maximises the ELBO from a given initial state.
pub fn fit_from(model: &DgpModelSpec, state: VariationalState, data: &Dataset, config: &FitConfig) -> Result<FitResult> {
    config.validate()?;
    data.validate()?;
    if data.is_empty() {
        return Err(DgpError::InvalidInput("cannot fit an empty dataset".into()));
    }
    let problem = Problem::new(model.clone(), state, config.trainable, config.joint_estimator)?;
    let mut theta = problem.pack();
    let root = RngHandle::new(config.seed);
    if config.init_jitter > 0.0 {
        let noise = BaseNoise::draw(1, theta.len(), root.derive(INIT_STREAM), false);
        for (t, e) in theta.values.iter_mut().zip(noise.row(0)) {
            *t += config.init_jitter * e;
        }
    }
    let width = problem.noise_width(data.len());
    let eval_noise = BaseNoise::draw(config.eval_samples, width, root.derive(EVAL_STREAM), false);
    let train = root.derive(TRAIN_STREAM);
    let mut adam = AdamState::new(theta.len(), config.learning_rate);
    let mut step_scale = vec![1.0; theta.len()];
    for b in &theta.blocks {
        if b.name.contains(".chol") {
            step_scale[b.offset..b.offset + b.len].fill(config.covariance_lr_scale);
        }
    }
    let mut trace = Vec::new();
    let mut noise = None;

    let evaluate = |theta: &ParamVector| -> Result<ElboEstimate> {
        let parts = problem.elbo_parts(&theta.values, data, &eval_noise)?;
        Ok(parts.estimate())
    };
    let record = |iteration: usize, theta: &ParamVector, trace: &mut Vec<TracePoint>| -> Result<ElboEstimate> {
        let est = evaluate(theta)?;
        trace.push(TracePoint { iteration, elbo: est.value, std_error: est.std_error });
        log::info!("iteration {iteration}: elbo {:.6}", est.value);
        if !(est.value >= config.divergence_threshold) {
            return Err(DgpError::Diverged {
                iteration,
                elbo: est.value,
                trace: trace.iter().map(|p| (p.iteration, p.elbo)).collect(),
            });
        }
        Ok(est)
    };

    let mut last = record(0, &theta, &mut trace)?;
    for it in 0..config.iterations {
        if it % config.refresh_noise_every == 0 {
            let k = (it / config.refresh_noise_every) as u64;
            noise = Some(BaseNoise::draw(config.n_samples, width, train.derive(k), config.moment_match));
        }
        let frozen = noise.as_ref().expect("noise drawn on the first iteration");
        let (_, grad) = elbo_gradient(&problem, &theta, data, frozen, config.gradient)?;
        let mut descent: Vec<f64> = grad.iter().map(|g| -g).collect();
        if let Some(k) = config.clip_sigma {
            clip_to_running_rms(&adam, &mut descent, k);
        }
        let (next, values) = adam_step(&adam, &theta.values, &descent);
        adam = next;
        for ((t, v), s) in theta.values.iter_mut().zip(values).zip(&step_scale) {
            *t += s * (v - *t);
        }
        let done = it + 1;
        if done % config.eval_every == 0 || done == config.iterations {
            last = record(done, &theta, &mut trace)?;
        }
    }
    let (model, state) = problem.values(&theta.values)?;
    Ok(FitResult { model, state, trace, final_estimate: last, theta })
}

/// Least-squares slope of the trace over its last `fraction` of points.
pub fn trace_slope(trace: &[TracePoint], fraction: f64) -> f64 {
    let start = ((1.0 - fraction) * trace.len() as f64).floor() as usize;
    let tail = &trace[start.min(trace.len())..];
    if tail.len() < 2 {
        return 0.0;
    }
    let n = tail.len() as f64;
    let mx = tail.iter().map(|p| p.iteration as f64).sum::<f64>() / n;
    let my = tail.iter().map(|p| p.elbo).sum::<f64>() / n;
    let sxy: f64 = tail.iter().map(|p| (p.iteration as f64 - mx) * (p.elbo - my)).sum();
    let sxx: f64 = tail.iter().map(|p| (p.iteration as f64 - mx).powi(2)).sum();
    if sxx == 0.0 { 0.0 } else { sxy / sxx }
}
