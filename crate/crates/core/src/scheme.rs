//! Dispatch over the three variational families.

use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::chained::{default_locations, elbo_parts_chained, noise_width_chained, sample_chain, ChainedInducingState};
use crate::error::{DgpError, Result};
use crate::estimate::{BaseNoise, Dataset, ElboEstimate, ElboParts, SampleSet, SchemeKind};
use crate::joint::{
    elbo_parts_jg_analytic, elbo_parts_jg_sampled, noise_width_analytic, noise_width_sampled, sample_layers_jg, ChainGaussianState,
};
use crate::layers::DgpModelSpec;
use crate::math::RngHandle;
use crate::meanfield::{elbo_parts_mf, noise_width_mf, sample_layers_mf, MeanFieldState};

/// How the joint scheme estimates its expected log-likelihood.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum JointEstimator {
    #[default]
    Analytic,
    /// Every outer sample is followed by `n_inner` inner passes.
    Sampled { n_inner: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "scheme", content = "state")]
pub enum VariationalState<T = f64> {
    MeanField(MeanFieldState<T>),
    JointGaussian(ChainGaussianState<T>),
    Chained(ChainedInducingState<T>),
}

impl<T> VariationalState<T> {
    pub fn kind(&self) -> SchemeKind {
        match self {
            VariationalState::MeanField(_) => SchemeKind::MeanField,
            VariationalState::JointGaussian(_) => SchemeKind::JointGaussian,
            VariationalState::Chained(_) => SchemeKind::Chained,
        }
    }
}

impl VariationalState<f64> {
    /// Default initial state for `kind`. The chained scheme places its shared
    /// locations over the range of `x`.
    pub fn init(kind: SchemeKind, model: &DgpModelSpec, x: &[f64]) -> Result<Self> {
        Ok(match kind {
            SchemeKind::MeanField => VariationalState::MeanField(MeanFieldState::init(model)?),
            SchemeKind::JointGaussian => VariationalState::JointGaussian(ChainGaussianState::init(model)?),
            SchemeKind::Chained => VariationalState::Chained(ChainedInducingState::init(model, default_locations(x))?),
        })
    }

    /// Multiplies every covariance factor by `factor`, so covariances scale by its square.
    pub fn scale_covariances(&mut self, factor: f64) {
        match self {
            VariationalState::MeanField(s) => s.layers.iter_mut().for_each(|q| q.chol = q.chol.scale(factor)),
            VariationalState::JointGaussian(s) => {
                s.first.chol = s.first.chol.scale(factor);
                s.links.iter_mut().for_each(|k| k.chol = k.chol.scale(factor));
            }
            VariationalState::Chained(s) => s.layers.iter_mut().for_each(|q| q.chol = q.chol.scale(factor)),
        }
    }

    pub fn validate(&self, model: &DgpModelSpec) -> Result<()> {
        match self {
            VariationalState::MeanField(s) => s.validate(model),
            VariationalState::JointGaussian(s) => s.validate(model),
            VariationalState::Chained(s) => s.validate(model),
        }
    }
}

/// Width of one row of base noise for an estimator call.
pub fn noise_width(kind: SchemeKind, model: &DgpModelSpec, m_shared: usize, n_points: usize, estimator: JointEstimator) -> usize {
    let n_layers = model.num_layers();
    match (kind, estimator) {
        (SchemeKind::MeanField, _) => noise_width_mf(n_layers, n_points),
        (SchemeKind::JointGaussian, JointEstimator::Analytic) => noise_width_analytic(n_layers, n_points),
        (SchemeKind::JointGaussian, JointEstimator::Sampled { n_inner }) => noise_width_sampled(model, n_points, n_inner),
        (SchemeKind::Chained, _) => noise_width_chained(n_layers, m_shared, n_points),
    }
}

pub(crate) fn shared_size<T>(state: &VariationalState<T>) -> usize {
    match state {
        VariationalState::Chained(s) => s.z.len(),
        _ => 0,
    }
}

pub(crate) fn elbo_parts<T: Real>(
    model: &DgpModelSpec<T>,
    state: &VariationalState<T>,
    data: &Dataset,
    noise: &BaseNoise,
    estimator: JointEstimator,
) -> Result<ElboParts<T>> {
    match (state, estimator) {
        (VariationalState::MeanField(s), _) => elbo_parts_mf(model, s, data, noise),
        (VariationalState::JointGaussian(s), JointEstimator::Analytic) => elbo_parts_jg_analytic(model, s, data, noise),
        (VariationalState::JointGaussian(s), JointEstimator::Sampled { n_inner }) => elbo_parts_jg_sampled(model, s, data, noise, n_inner),
        (VariationalState::Chained(s), _) => elbo_parts_chained(model, s, data, noise),
    }
}

/// ELBO of any scheme with caller-supplied base noise.
pub fn elbo_with_noise(
    model: &DgpModelSpec,
    state: &VariationalState,
    data: &Dataset,
    noise: &BaseNoise,
    estimator: JointEstimator,
) -> Result<ElboEstimate> {
    model.validate()?;
    state.validate(model)?;
    data.validate()?;
    let parts = elbo_parts(model, state, data, noise, estimator)?;
    let est = parts.estimate();
    if !est.value.is_finite() {
        let layer = est.kl_per_layer.iter().position(|k| !k.is_finite()).map_or(0, |l| l + 1);
        return Err(DgpError::NonFinite { layer, detail: "ELBO is not finite".into() });
    }
    Ok(est)
}

/// ELBO of any scheme with fresh noise from `rng`.
pub fn elbo(
    model: &DgpModelSpec,
    state: &VariationalState,
    data: &Dataset,
    n_samples: usize,
    rng: RngHandle,
    estimator: JointEstimator,
) -> Result<ElboEstimate> {
    let width = noise_width(state.kind(), model, shared_size(state), data.len(), estimator);
    let noise = BaseNoise::draw(n_samples, width, rng, false);
    elbo_with_noise(model, state, data, &noise, estimator)
}

/// Per-layer draws at `query` for any scheme.
pub fn sample_layers(model: &DgpModelSpec, state: &VariationalState, query: &[f64], n_samples: usize, rng: RngHandle) -> Result<SampleSet> {
    match state {
        VariationalState::MeanField(s) => sample_layers_mf(model, s, query, n_samples, rng),
        VariationalState::JointGaussian(s) => sample_layers_jg(model, s, query, n_samples, rng),
        VariationalState::Chained(s) => sample_chain(model, s, query, n_samples, rng),
    }
}
