//! Factorised Gaussian over each layer's inducing outputs, estimated by
//! sequential per-point sampling through the layers.

use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::error::{DgpError, Result};
use crate::estimate::{floored, gaussian_log_density, BaseNoise, Dataset, ElboEstimate, ElboParts, OpCounts, SampleSet, SchemeKind};
use crate::layers::{Conditioner, DgpModelSpec};
use crate::linalg::{chol_with_schedule, lower_tr_mul, norm_sq, JitterSchedule, Mat};
use crate::math::{kl_from_factors, RngHandle};

/// Initial covariance scale relative to the prior Gram matrix.
pub const INIT_COVARIANCE_SCALE: f64 = 1e-2;

/// `N(mean, chol cholᵀ)` over one layer's inducing outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InducingFactor<T = f64> {
    pub mean: Vec<T>,
    /// Lower triangular with a positive diagonal.
    pub chol: Mat<T>,
}

impl InducingFactor<f64> {
    pub fn from_moments(mean: Vec<f64>, cov: &Mat) -> Result<Self> {
        if cov.rows() != mean.len() || !cov.is_square() {
            return Err(DgpError::DimensionMismatch {
                what: "inducing covariance order",
                expected: mean.len(),
                got: cov.rows(),
            });
        }
        let chol = chol_with_schedule(cov, &JitterSchedule::default())?;
        Ok(InducingFactor { mean, chol: chol.into_factor() })
    }

    pub fn covariance(&self) -> Mat {
        self.chol.outer_self()
    }

    pub(crate) fn validate(&self, m: usize, what: &'static str) -> Result<()> {
        if self.mean.len() != m {
            return Err(DgpError::DimensionMismatch { what, expected: m, got: self.mean.len() });
        }
        if self.chol.rows() != m || self.chol.cols() != m {
            return Err(DgpError::DimensionMismatch { what, expected: m, got: self.chol.rows() });
        }
        if (0..m).any(|i| !(self.chol[(i, i)] > 0.0)) {
            return Err(DgpError::InvalidInput(format!("{what}: Cholesky diagonal must be positive")));
        }
        if self.mean.iter().any(|v| !v.is_finite()) || !self.chol.is_finite() {
            return Err(DgpError::InvalidInput(format!("{what}: non-finite entries")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanFieldState<T = f64> {
    pub layers: Vec<InducingFactor<T>>,
}

impl MeanFieldState<f64> {
    /// `m = μ(z)`, `S = 10⁻² K(z, z)` per layer.
    pub fn init(model: &DgpModelSpec) -> Result<Self> {
        model.validate()?;
        let layers = model
            .layers
            .iter()
            .map(|l| {
                let mean = l.inducing.iter().map(|&z| l.mean_fn.apply(z)).collect();
                InducingFactor::from_moments(mean, &l.kernel.gram(&l.inducing).scale(INIT_COVARIANCE_SCALE))
            })
            .collect::<Result<_>>()?;
        Ok(MeanFieldState { layers })
    }

    /// State equal to the prior `N(μ(z), K(z, z))` in every layer.
    pub fn prior(model: &DgpModelSpec) -> Result<Self> {
        model.validate()?;
        let layers = model
            .layers
            .iter()
            .map(|l| {
                let mean = l.inducing.iter().map(|&z| l.mean_fn.apply(z)).collect();
                InducingFactor::from_moments(mean, &l.kernel.gram(&l.inducing))
            })
            .collect::<Result<_>>()?;
        Ok(MeanFieldState { layers })
    }

    pub fn validate(&self, model: &DgpModelSpec) -> Result<()> {
        if self.layers.len() != model.num_layers() {
            return Err(DgpError::DimensionMismatch {
                what: "mean-field layer count",
                expected: model.num_layers(),
                got: self.layers.len(),
            });
        }
        for (f, l) in self.layers.iter().zip(&model.layers) {
            f.validate(l.num_inducing(), "mean-field factor")?;
        }
        Ok(())
    }
}

pub(crate) fn conditioners<T: Real>(model: &DgpModelSpec<T>) -> Result<Vec<Conditioner<T>>> {
    model.layers.iter().map(Conditioner::for_layer).collect()
}

/// One point pushed through every layer; writes each layer's output to `out`.
fn propagate_point<T: Real>(
    conds: &[Conditioner<T>],
    centred: &[Vec<T>],
    state: &MeanFieldState<T>,
    x: f64,
    eps: impl Fn(usize) -> f64,
    out: &mut [T],
) -> Result<()> {
    let mut f = T::cst(x);
    for (l, cond) in conds.iter().enumerate() {
        let p = cond.project(f);
        let mean = p.mean_given(&centred[l]);
        let var = p.residual_variance() + norm_sq(&lower_tr_mul(&state.layers[l].chol, &p.alpha));
        if !mean.val().is_finite() || !var.val().is_finite() {
            return Err(DgpError::NonFinite {
                layer: l + 1,
                detail: format!("moments degenerated at input {x}"),
            });
        }
        f = mean + floored(var).sqrt() * eps(l);
        out[l] = f;
    }
    Ok(())
}

pub(crate) fn noise_width_mf(n_layers: usize, n_points: usize) -> usize {
    n_layers * n_points
}

pub(crate) fn kl_mf<T: Real>(conds: &[Conditioner<T>], state: &MeanFieldState<T>) -> Vec<T> {
    conds
        .iter()
        .zip(&state.layers)
        .map(|(c, q)| kl_from_factors(&q.mean, &q.chol, &c.prior_mean, &c.chol))
        .collect()
}

pub(crate) fn elbo_parts_mf<T: Real>(
    model: &DgpModelSpec<T>,
    state: &MeanFieldState<T>,
    data: &Dataset,
    noise: &BaseNoise,
) -> Result<ElboParts<T>> {
    let n_layers = model.num_layers();
    let n = data.len();
    noise.require_width(noise_width_mf(n_layers, n))?;
    let conds = conditioners(model)?;
    let centred: Vec<Vec<T>> = conds.iter().zip(&state.layers).map(|(c, q)| c.centre(&q.mean)).collect();
    let mut out = vec![T::zero(); n_layers];
    let mut ell_per_sample = Vec::with_capacity(noise.n_samples());
    for s in 0..noise.n_samples() {
        let row = noise.row(s);
        let mut ell = T::zero();
        for (j, (&x, &y)) in data.x.iter().zip(&data.y).enumerate() {
            propagate_point(&conds, &centred, state, x, |l| row[l * n + j], &mut out)?;
            ell += gaussian_log_density(y, out[n_layers - 1], model.noise_variance);
        }
        ell_per_sample.push(ell);
    }
    let kl_per_layer = kl_mf(&conds, state);
    Ok(ElboParts {
        ell_per_sample,
        kl_per_layer,
        n_inner: None,
        counts: OpCounts {
            factorisations: n_layers,
            scalar_conditionals: n_layers * n * noise.n_samples(),
            resamples: 0,
        },
    })
}

fn check_value(parts: &ElboParts<f64>) -> Result<ElboEstimate> {
    let est = parts.estimate();
    if !est.value.is_finite() {
        let layer = parts.kl_per_layer.iter().position(|k| !k.is_finite()).map_or(0, |l| l + 1);
        return Err(DgpError::NonFinite { layer, detail: "ELBO is not finite".into() });
    }
    Ok(est)
}

/// Estimator with caller-supplied base noise of width `L·N`.
pub fn elbo_mf_with_noise(model: &DgpModelSpec, state: &MeanFieldState, data: &Dataset, noise: &BaseNoise) -> Result<ElboEstimate> {
    model.validate()?;
    state.validate(model)?;
    data.validate()?;
    check_value(&elbo_parts_mf(model, state, data, noise)?)
}

pub fn elbo_mf(model: &DgpModelSpec, state: &MeanFieldState, data: &Dataset, n_samples: usize, rng: RngHandle) -> Result<ElboEstimate> {
    let noise = BaseNoise::draw(n_samples, noise_width_mf(model.num_layers(), data.len()), rng, false);
    elbo_mf_with_noise(model, state, data, &noise)
}

/// Draws `f_1..f_L` at `query`, one independent marginal per point.
pub fn sample_layers_mf(
    model: &DgpModelSpec,
    state: &MeanFieldState,
    query: &[f64],
    n_samples: usize,
    rng: RngHandle,
) -> Result<SampleSet> {
    model.validate()?;
    state.validate(model)?;
    if query.iter().any(|v| !v.is_finite()) {
        return Err(DgpError::InvalidInput("query inputs must be finite".into()));
    }
    let n_layers = model.num_layers();
    let n = query.len();
    let noise = BaseNoise::draw(n_samples, noise_width_mf(n_layers, n), rng, false);
    let conds = conditioners(model)?;
    let centred: Vec<Vec<f64>> = conds.iter().zip(&state.layers).map(|(c, q)| c.centre(&q.mean)).collect();
    let mut layers = vec![Mat::zeros(n_samples, n); n_layers];
    let mut out = vec![0.0; n_layers];
    for s in 0..n_samples {
        let row = noise.row(s);
        for (j, &x) in query.iter().enumerate() {
            propagate_point(&conds, &centred, state, x, |l| row[l * n + j], &mut out)?;
            for l in 0..n_layers {
                layers[l][(s, j)] = out[l];
            }
        }
    }
    Ok(SampleSet { scheme: SchemeKind::MeanField, rng, inputs: query.to_vec(), layers })
}
