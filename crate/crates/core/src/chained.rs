//! Inducing outputs of one layer used as the inducing inputs of the next.
//!
//! The variational family is a product of Gaussians over `f^z_l`, the value of
//! layer `l` at the shared input locations `z` pushed through the earlier
//! layers. Layer `l` conditions on the pair `(f^z_{l-1} → f^z_l)`, with
//! `f^z_0 = z`. The model's own per-layer inducing locations are not used by
//! this scheme.

use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::error::{DgpError, Result};
use crate::estimate::{floored, gaussian_log_density, BaseNoise, Dataset, ElboEstimate, ElboParts, OpCounts, SampleSet, SchemeKind};
use crate::layers::{validate_locations, Conditioner, DgpModelSpec};
use crate::linalg::{lower_mul, JitterSchedule, Mat};
use crate::math::{kl_from_factors, RngHandle};
use crate::meanfield::{InducingFactor, INIT_COVARIANCE_SCALE};

/// Conditioning draws needing more jitter than this fraction of the kernel
/// variance are redrawn once.
pub const RESAMPLE_JITTER_RATIO: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainedInducingState<T = f64> {
    pub z: Vec<T>,
    /// `q(f^z_l)` for every layer.
    pub layers: Vec<InducingFactor<T>>,
}

/// `max(8, ⌈N/4⌉)` locations spread evenly over the range of `x`.
pub fn default_locations(x: &[f64]) -> Vec<f64> {
    let m = 8usize.max(x.len().div_ceil(4));
    let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if lo.is_finite() && hi > lo { (lo, hi) } else { (-1.0, 1.0) };
    (0..m).map(|i| lo + (hi - lo) * i as f64 / (m - 1) as f64).collect()
}

impl ChainedInducingState<f64> {
    /// `m_1 = μ_1(z)`, `m_l = μ_l(m_{l-1})`, `S_l = 10⁻² K_l(m_{l-1}, m_{l-1})`.
    pub fn init(model: &DgpModelSpec, z: Vec<f64>) -> Result<Self> {
        model.validate()?;
        validate_locations(&z)?;
        let mut prev = z.clone();
        let mut layers = Vec::with_capacity(model.num_layers());
        for l in &model.layers {
            let mean: Vec<f64> = prev.iter().map(|&v| l.mean_fn.apply(v)).collect();
            let mut cov = l.kernel.gram(&prev).scale(INIT_COVARIANCE_SCALE);
            // Coincident inputs make the prior Gram singular; keep the start proper.
            let floor = 1e-6 * l.kernel.variance * INIT_COVARIANCE_SCALE;
            for i in 0..cov.rows() {
                cov[(i, i)] += floor;
            }
            layers.push(InducingFactor::from_moments(mean.clone(), &cov)?);
            prev = mean;
        }
        Ok(ChainedInducingState { z, layers })
    }

    /// `q(f^z_l)` equal to the prior pushed through the layer means:
    /// `N(μ_l(m_{l-1}), K_l(m_{l-1}, m_{l-1}))`.
    pub fn prior(model: &DgpModelSpec, z: Vec<f64>) -> Result<Self> {
        let mut s = Self::init(model, z)?;
        let mut prev = s.z.clone();
        for (q, l) in s.layers.iter_mut().zip(&model.layers) {
            *q = InducingFactor::from_moments(q.mean.clone(), &l.kernel.gram(&prev))?;
            prev = q.mean.clone();
        }
        Ok(s)
    }

    pub fn validate(&self, model: &DgpModelSpec) -> Result<()> {
        validate_locations(&self.z)?;
        if self.layers.len() != model.num_layers() {
            return Err(DgpError::DimensionMismatch {
                what: "chained layer count",
                expected: model.num_layers(),
                got: self.layers.len(),
            });
        }
        for q in &self.layers {
            q.validate(self.z.len(), "chained factor")?;
        }
        Ok(())
    }
}

pub(crate) fn noise_width_chained(n_layers: usize, m: usize, n_points: usize) -> usize {
    2 * n_layers * m + n_layers * n_points
}

fn draw_inducing<T: Real>(state: &ChainedInducingState<T>, eps: &[f64]) -> Vec<Vec<T>> {
    let m = state.z.len();
    state
        .layers
        .iter()
        .enumerate()
        .map(|(l, q)| {
            let e: Vec<T> = eps[l * m..(l + 1) * m].iter().map(|&v| T::cst(v)).collect();
            q.mean.iter().zip(lower_mul(&q.chol, &e)).map(|(&a, b)| a + b).collect()
        })
        .collect()
}

/// One Monte-Carlo sample's conditioning sets: `conds[l]` conditions layer
/// `l` on `(f^z_{l-1} → f^z_l)`.
struct SampleConditioning<T> {
    conds: Vec<Conditioner<T>>,
    centred: Vec<Vec<T>>,
    factorisations: usize,
    resampled: bool,
}

fn condition_sample<T: Real>(
    model: &DgpModelSpec<T>,
    state: &ChainedInducingState<T>,
    first: &Conditioner<T>,
    eps: &[f64],
    reserve: &[f64],
    schedule: &JitterSchedule,
) -> Result<SampleConditioning<T>> {
    let mut factorisations = 0;
    let mut resampled = false;
    let mut attempt = eps;
    loop {
        let fz = draw_inducing(state, attempt);
        let mut conds = vec![first.clone()];
        let mut rejected = false;
        for l in 1..model.num_layers() {
            let layer = &model.layers[l];
            let c = Conditioner::new(&layer.kernel, layer.mean_fn, &fz[l - 1], schedule)?;
            factorisations += 1;
            if c.chol.jitter() > RESAMPLE_JITTER_RATIO * layer.kernel.variance.val() {
                rejected = true;
            }
            conds.push(c);
        }
        if rejected && !resampled {
            resampled = true;
            attempt = reserve;
            continue;
        }
        if rejected {
            log::warn!("conditioning draw still needed large jitter after resampling");
        }
        let centred = conds.iter().zip(&fz).map(|(c, f)| c.centre(f)).collect();
        return Ok(SampleConditioning { conds, centred, factorisations, resampled });
    }
}

fn propagate<T: Real>(sc: &SampleConditioning<T>, x: f64, eps: impl Fn(usize) -> f64, out: &mut [T]) -> Result<()> {
    let mut f = T::cst(x);
    for (l, cond) in sc.conds.iter().enumerate() {
        let p = cond.project(f);
        let mean = p.mean_given(&sc.centred[l]);
        let var = p.residual_variance();
        if !mean.val().is_finite() || !var.val().is_finite() {
            return Err(DgpError::NonFinite {
                layer: l + 1,
                detail: format!("conditional moments degenerated at input {x}"),
            });
        }
        f = mean + floored(var).sqrt() * eps(l);
        out[l] = f;
    }
    Ok(())
}

fn first_conditioner<T: Real>(model: &DgpModelSpec<T>, state: &ChainedInducingState<T>) -> Result<Conditioner<T>> {
    let l = &model.layers[0];
    Conditioner::new(&l.kernel, l.mean_fn, &state.z, &JitterSchedule::default())
}

/// `KL(q(f^z_l) ‖ p(f^z_l | f^z_{l-1}))` for one conditioning set.
fn kl_layer<T: Real>(cond: &Conditioner<T>, q: &InducingFactor<T>) -> T {
    kl_from_factors(&q.mean, &q.chol, &cond.prior_mean, &cond.chol)
}

pub(crate) fn elbo_parts_chained<T: Real>(
    model: &DgpModelSpec<T>,
    state: &ChainedInducingState<T>,
    data: &Dataset,
    noise: &BaseNoise,
) -> Result<ElboParts<T>> {
    let n_layers = model.num_layers();
    let m = state.z.len();
    let n = data.len();
    noise.require_width(noise_width_chained(n_layers, m, n))?;
    let first = first_conditioner(model, state)?;
    let mut counts = OpCounts { factorisations: 1, ..OpCounts::default() };
    let mut kl_per_layer = vec![T::zero(); n_layers];
    kl_per_layer[0] = kl_layer(&first, &state.layers[0]);
    let mut out = vec![T::zero(); n_layers];
    let mut ell_per_sample = Vec::with_capacity(noise.n_samples());
    let inv = 1.0 / noise.n_samples() as f64;
    for s in 0..noise.n_samples() {
        let row = noise.row(s);
        let sc = condition_sample(model, state, &first, &row[..n_layers * m], &row[n_layers * m..2 * n_layers * m], &JitterSchedule::extended())?;
        counts.factorisations += sc.factorisations;
        counts.resamples += sc.resampled as usize;
        for l in 1..n_layers {
            kl_per_layer[l] += kl_layer(&sc.conds[l], &state.layers[l]) * inv;
        }
        let point_eps = &row[2 * n_layers * m..];
        let mut ell = T::zero();
        for (j, (&x, &y)) in data.x.iter().zip(&data.y).enumerate() {
            propagate(&sc, x, |l| point_eps[l * n + j], &mut out)?;
            ell += gaussian_log_density(y, out[n_layers - 1], model.noise_variance);
        }
        counts.scalar_conditionals += n_layers * n;
        ell_per_sample.push(ell);
    }
    Ok(ElboParts { ell_per_sample, kl_per_layer, n_inner: None, counts })
}

fn check(model: &DgpModelSpec, state: &ChainedInducingState) -> Result<()> {
    model.validate()?;
    state.validate(model)
}

pub fn elbo_chained_with_noise(model: &DgpModelSpec, state: &ChainedInducingState, data: &Dataset, noise: &BaseNoise) -> Result<ElboEstimate> {
    check(model, state)?;
    data.validate()?;
    let parts = elbo_parts_chained(model, state, data, noise)?;
    let est = parts.estimate();
    if !est.value.is_finite() {
        let layer = parts.kl_per_layer.iter().position(|k| !k.is_finite()).map_or(0, |l| l + 1);
        return Err(DgpError::NonFinite { layer, detail: "ELBO is not finite".into() });
    }
    Ok(est)
}

pub fn elbo_chained(
    model: &DgpModelSpec,
    state: &ChainedInducingState,
    data: &Dataset,
    n_samples: usize,
    rng: RngHandle,
) -> Result<ElboEstimate> {
    let noise = BaseNoise::draw(n_samples, noise_width_chained(model.num_layers(), state.z.len(), data.len()), rng, false);
    elbo_chained_with_noise(model, state, data, &noise)
}

/// Monte-Carlo average of the layer-`layer` KL over the given draws of
/// `f^z_{layer-1}` (one draw per row). Layer 0 conditions on `z` and ignores
/// `previous`.
pub fn kl_term_chained(model: &DgpModelSpec, state: &ChainedInducingState, layer: usize, previous: &Mat) -> Result<f64> {
    check(model, state)?;
    if layer >= model.num_layers() {
        return Err(DgpError::InvalidInput(format!("layer {layer} out of range")));
    }
    if layer == 0 {
        return Ok(kl_layer(&first_conditioner(model, state)?, &state.layers[0]).max(0.0));
    }
    if previous.cols() != state.z.len() || previous.rows() == 0 {
        return Err(DgpError::DimensionMismatch {
            what: "conditioning draws",
            expected: state.z.len(),
            got: previous.cols(),
        });
    }
    let l = &model.layers[layer];
    let mut total = 0.0;
    for s in 0..previous.rows() {
        let c = Conditioner::new(&l.kernel, l.mean_fn, previous.row(s), &JitterSchedule::extended())?;
        total += kl_layer(&c, &state.layers[layer]).max(0.0);
    }
    Ok(total / previous.rows() as f64)
}

/// Independent draws of `(f^z_1, …, f^z_L)`; `out[l]` is `n_samples × M`.
pub fn sample_inducing_chained(state: &ChainedInducingState, n_samples: usize, rng: RngHandle) -> Vec<Mat> {
    let m = state.z.len();
    let n_layers = state.layers.len();
    let noise = BaseNoise::draw(n_samples, n_layers * m, rng, false);
    let mut out = vec![Mat::zeros(n_samples, m); n_layers];
    for s in 0..n_samples {
        for (l, f) in draw_inducing(state, noise.row(s)).into_iter().enumerate() {
            for (j, v) in f.into_iter().enumerate() {
                out[l][(s, j)] = v;
            }
        }
    }
    out
}

/// Draws every layer at `query`, conditioning each sample on its own draw of
/// the inducing outputs.
pub fn sample_chain(
    model: &DgpModelSpec,
    state: &ChainedInducingState,
    query: &[f64],
    n_samples: usize,
    rng: RngHandle,
) -> Result<SampleSet> {
    check(model, state)?;
    if query.iter().any(|v| !v.is_finite()) {
        return Err(DgpError::InvalidInput("query inputs must be finite".into()));
    }
    let n_layers = model.num_layers();
    let m = state.z.len();
    let n = query.len();
    let noise = BaseNoise::draw(n_samples, noise_width_chained(n_layers, m, n), rng, false);
    let first = first_conditioner(model, state)?;
    let mut layers = vec![Mat::zeros(n_samples, n); n_layers];
    let mut out = vec![0.0; n_layers];
    for s in 0..n_samples {
        let row = noise.row(s);
        let sc = condition_sample(model, state, &first, &row[..n_layers * m], &row[n_layers * m..2 * n_layers * m], &JitterSchedule::extended())?;
        let point_eps = &row[2 * n_layers * m..];
        for (j, &x) in query.iter().enumerate() {
            propagate(&sc, x, |l| point_eps[l * n + j], &mut out)?;
            for l in 0..n_layers {
                layers[l][(s, j)] = out[l];
            }
        }
    }
    Ok(SampleSet { scheme: SchemeKind::Chained, rng, inputs: query.to_vec(), layers })
}

/// Predictive draws at test inputs; the training data play no part.
pub fn predict_chained(
    model: &DgpModelSpec,
    state: &ChainedInducingState,
    x_star: &[f64],
    n_samples: usize,
    rng: RngHandle,
) -> Result<SampleSet> {
    sample_chain(model, state, x_star, n_samples, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{GPLayerSpec, MeanFnSpec};
    use crate::math::{gauss_kl, KernelSpec, MvnMoments};
    use crate::meanfield::{elbo_mf, sample_layers_mf, MeanFieldState};

    fn model(n_layers: usize, z: &[f64]) -> DgpModelSpec {
        DgpModelSpec::with_defaults(
            (0..n_layers).map(|_| KernelSpec::squared_exponential(1.0, 0.6)).collect(),
            z.to_vec(),
            0.05,
        )
    }

    fn data() -> Dataset {
        Dataset::new(vec![-0.9, -0.4, 0.1, 0.5, 0.95], vec![0.1, -0.5, 0.3, 0.8, 0.2]).unwrap()
    }

    fn perturbed(model: &DgpModelSpec, z: &[f64]) -> ChainedInducingState {
        let mut st = ChainedInducingState::init(model, z.to_vec()).unwrap();
        for (l, q) in st.layers.iter_mut().enumerate() {
            for (i, v) in q.mean.iter_mut().enumerate() {
                *v += 0.2 * ((i + l) as f64).sin();
            }
            for i in 0..q.chol.rows() {
                q.chol[(i, i)] = 0.3 + 0.05 * i as f64;
            }
        }
        st
    }

    #[test]
    fn default_locations_cover_data() {
        let x: Vec<f64> = (0..40).map(|i| -1.0 + i as f64 / 19.5).collect();
        let z = default_locations(&x);
        assert_eq!(z.len(), 10);
        assert_eq!(z[0], -1.0);
        assert!((z[9] - x[39]).abs() < 1e-15);
        assert_eq!(default_locations(&[0.0, 1.0]).len(), 8);
    }

    #[test]
    fn query_at_z_reproduces_inducing_draws() {
        let z = [-1.0, -0.3, 0.4, 1.0];
        let m = model(2, &z);
        let st = perturbed(&m, &z);
        let rng = RngHandle::new(4);
        let s = sample_chain(&m, &st, &z, 50, rng).unwrap();
        let noise = BaseNoise::draw(50, noise_width_chained(2, 4, 4), rng, false);
        for smp in 0..50 {
            let fz = draw_inducing(&st, &noise.row(smp)[..8]);
            for l in 0..2 {
                for j in 0..4 {
                    // Interpolation error of the first layer is amplified by
                    // nearby conditioning inputs in the second.
                    let tol = if l == 0 { 1e-4 } else { 2e-3 };
                    assert!((s.layers[l][(smp, j)] - fz[l][j]).abs() < tol, "layer {l}");
                }
            }
        }
        let p = predict_chained(&m, &st, &z, 50, rng).unwrap();
        assert_eq!(p, s);
    }

    #[test]
    fn interpolation_variance_is_tiny() {
        let z = [-1.0, 0.0, 1.0];
        let m = model(1, &z);
        let mut st = perturbed(&m, &z);
        st.layers[0].chol = Mat::identity(3).scale(1e-6);
        let s = sample_chain(&m, &st, &z, 200, RngHandle::new(2)).unwrap();
        assert!(s.layer_variance(0).iter().all(|&v| v < 1e-8));
    }

    #[test]
    fn single_layer_matches_mean_field() {
        let z = [-1.0, 0.0, 1.0];
        let m = model(1, &z);
        let st = perturbed(&m, &z);
        let mf = MeanFieldState { layers: st.layers.clone() };
        let q = [-0.5, 0.3, 0.8];
        let n = 4000;
        let a = sample_chain(&m, &st, &q, n, RngHandle::new(1)).unwrap();
        let b = sample_layers_mf(&m, &mf, &q, n, RngHandle::new(2)).unwrap();
        let (ma, va) = (a.layer_mean(0), a.layer_variance(0));
        let (mb, vb) = (b.layer_mean(0), b.layer_variance(0));
        for j in 0..3 {
            let se = ((va[j] + vb[j]) / n as f64).sqrt();
            assert!((ma[j] - mb[j]).abs() < 3.0 * se, "mean {j}");
            let se_v = (2.0 * (va[j].powi(2) + vb[j].powi(2)) / n as f64).sqrt();
            assert!((va[j] - vb[j]).abs() < 3.0 * se_v, "var {j}");
        }
        let ea = elbo_chained(&m, &st, &data(), 4000, RngHandle::new(5)).unwrap();
        let eb = elbo_mf(&m, &mf, &data(), 4000, RngHandle::new(6)).unwrap();
        let se = (ea.std_error.powi(2) + eb.std_error.powi(2)).sqrt();
        assert!((ea.value - eb.value).abs() < 3.0 * se);
        assert!((ea.kl - eb.kl).abs() < 1e-12);
    }

    #[test]
    fn first_layer_kl_vanishes_at_prior() {
        let z = [-1.0, 0.0, 1.0];
        let m = model(2, &z);
        let st = ChainedInducingState::prior(&m, z.to_vec()).unwrap();
        let kl = kl_term_chained(&m, &st, 0, &Mat::zeros(0, 3)).unwrap();
        assert!(kl.abs() < 1e-9);
    }

    #[test]
    fn second_layer_kl_matches_monte_carlo() {
        let z = [-0.5, 0.5];
        let m = model(2, &z);
        let st = perturbed(&m, &z);
        let draws = sample_inducing_chained(&st, 1, RngHandle::new(7));
        let prev = &draws[0];
        let kl = kl_term_chained(&m, &st, 1, prev).unwrap();
        // Closed form against the dense oracle.
        let l = &m.layers[1];
        let prior = MvnMoments::new(vec![0.0; 2], l.kernel.gram(prev.row(0))).unwrap();
        let q = MvnMoments::new(st.layers[1].mean.clone(), st.layers[1].covariance()).unwrap();
        let dense = gauss_kl(&q, &prior).unwrap();
        assert!((kl - dense).abs() < 1e-6 * dense.max(1.0));
        // Monte-Carlo E_q[log q − log p].
        let cq = crate::linalg::chol_with_schedule(&q.covariance, &JitterSchedule::default()).unwrap();
        let cp = crate::linalg::chol_with_schedule(&prior.covariance, &JitterSchedule::default()).unwrap();
        let logn = |c: &crate::linalg::Cholesky, mean: &[f64], x: &[f64]| {
            let d: Vec<f64> = x.iter().zip(mean).map(|(a, b)| a - b).collect();
            -0.5 * crate::linalg::norm_sq(&c.solve_lower(&d)) - 0.5 * c.log_det()
        };
        let n = 1_000_000;
        let samples = crate::math::sample_mvn(&q, n, RngHandle::new(8)).unwrap();
        let vals: Vec<f64> = (0..n).map(|s| logn(&cq, &q.mean, samples.row(s)) - logn(&cp, &prior.mean, samples.row(s))).collect();
        let mean = vals.iter().sum::<f64>() / n as f64;
        let se = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0) / n as f64).sqrt();
        assert!((mean - kl).abs() < 3.0 * se, "{mean} ± {se} vs {kl}");
    }

    #[test]
    fn kl_is_non_negative_for_every_draw() {
        let z = [-1.0, -0.2, 0.5, 1.0];
        let m = model(3, &z);
        let st = perturbed(&m, &z);
        let draws = sample_inducing_chained(&st, 30, RngHandle::new(3));
        for l in 1..3 {
            for s in 0..30 {
                let one = Mat::from_row_slice(1, 4, draws[l - 1].row(s));
                assert!(kl_term_chained(&m, &st, l, &one).unwrap() >= 0.0);
            }
        }
    }

    #[test]
    fn prior_state_with_huge_noise_is_flat() {
        let z = [-1.0, 0.0, 1.0];
        let mut m = model(2, &z);
        m.noise_variance = 1e6;
        let st = ChainedInducingState::prior(&m, z.to_vec()).unwrap();
        let e = elbo_chained(&m, &st, &data(), 50, RngHandle::new(0)).unwrap();
        let flat = -0.5 * data().len() as f64 * (2.0 * std::f64::consts::PI * 1e6).ln();
        assert!((e.expected_log_lik - flat).abs() < 1e-4);
        assert!(e.kl_per_layer[0].abs() < 1e-9);
    }

    #[test]
    fn estimates_are_deterministic_and_counted() {
        let z = [-1.0, -0.3, 0.4, 1.0];
        let m = model(3, &z);
        let st = perturbed(&m, &z);
        let a = elbo_chained(&m, &st, &data(), 6, RngHandle::new(9)).unwrap();
        let b = elbo_chained(&m, &st, &data(), 6, RngHandle::new(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.counts.scalar_conditionals, 3 * 5 * 6);
        let per_sample = 2 * 6 + 1;
        assert!(a.counts.factorisations >= per_sample && a.counts.factorisations <= per_sample + 2 * 6);
    }

    #[test]
    fn predictions_at_training_inputs_match_training_draws() {
        let z = [-1.0, -0.3, 0.4, 1.0];
        let m = model(2, &z);
        let st = perturbed(&m, &z);
        let x = data().x;
        let a = sample_chain(&m, &st, &x, 4000, RngHandle::new(1)).unwrap();
        let b = predict_chained(&m, &st, &x, 4000, RngHandle::new(2)).unwrap();
        for j in 0..x.len() {
            let mut ca = a.layers[1].column(j);
            let mut cb = b.layers[1].column(j);
            ca.sort_by(f64::total_cmp);
            cb.sort_by(f64::total_cmp);
            // Two-sample KS statistic.
            let (mut i, mut k, mut d) = (0usize, 0usize, 0.0f64);
            while i < ca.len() && k < cb.len() {
                if ca[i] <= cb[k] {
                    i += 1;
                } else {
                    k += 1;
                }
                d = d.max((i as f64 / ca.len() as f64 - k as f64 / cb.len() as f64).abs());
            }
            assert!(d < 0.05, "point {j}: KS {d}");
        }
    }

    #[test]
    fn empty_query_gives_empty_set() {
        let z = [-1.0, 0.0, 1.0];
        let m = model(2, &z);
        let st = perturbed(&m, &z);
        let s = predict_chained(&m, &st, &[], 10, RngHandle::new(0)).unwrap();
        assert_eq!(s.layers.len(), 2);
        assert!(s.layers.iter().all(|l| l.cols() == 0));
    }

    #[test]
    fn large_jitter_triggers_one_resample() {
        let z = [-1.0, 0.0, 1.0];
        let m = model(2, &z);
        let st = perturbed(&m, &z);
        let first = first_conditioner(&m, &st).unwrap();
        let noise = BaseNoise::draw(1, 12, RngHandle::new(1), false);
        let row = noise.row(0);
        let ok = condition_sample(&m, &st, &first, &row[..6], &row[6..], &JitterSchedule::extended()).unwrap();
        assert!(!ok.resampled);
        assert_eq!(ok.factorisations, 1);
        let forced = JitterSchedule { factors: vec![1e-3] };
        let sc = condition_sample(&m, &st, &first, &row[..6], &row[6..], &forced).unwrap();
        assert!(sc.resampled);
        assert_eq!(sc.factorisations, 2);
        // The reserve draw is the one kept.
        let fz = draw_inducing(&st, &row[6..]);
        assert_eq!(sc.conds[1].locations, fz[0]);
    }

    #[test]
    fn coincident_draws_stay_finite() {
        let z = [-1.0, 0.0, 1.0];
        let m = DgpModelSpec {
            layers: vec![
                GPLayerSpec { kernel: KernelSpec::squared_exponential(1.0, 0.6), mean_fn: MeanFnSpec::Identity, inducing: z.to_vec() },
                GPLayerSpec { kernel: KernelSpec::squared_exponential(1.0, 0.6), mean_fn: MeanFnSpec::Zero, inducing: z.to_vec() },
            ],
            noise_variance: 0.1,
        };
        let mut st = perturbed(&m, &z);
        st.layers[0].mean = vec![0.5, 0.5, 0.5];
        st.layers[0].chol = Mat::identity(3).scale(1e-12);
        let e = elbo_chained(&m, &st, &data(), 4, RngHandle::new(1)).unwrap();
        assert!(e.value.is_finite());
    }
}
