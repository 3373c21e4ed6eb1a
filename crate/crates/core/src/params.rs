//! Flat unconstrained parameter vector for a model plus variational state.

use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::chained::ChainedInducingState;
use crate::error::{DgpError, Result};
use crate::estimate::{BaseNoise, Dataset, ElboParts};
use crate::joint::{ChainGaussianState, ChainLink};
use crate::layers::{DgpModelSpec, GPLayerSpec};
use crate::linalg::Mat;
use crate::math::KernelSpec;
use crate::meanfield::{InducingFactor, MeanFieldState};
use crate::scheme::{elbo_parts, noise_width, shared_size, JointEstimator, VariationalState};

/// Map from an unconstrained raw value to the constrained one.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Transform {
    Identity,
    /// `ln(1 + e^raw)`.
    Softplus,
    /// `floor + e^raw`.
    Log { floor: f64 },
}

impl Transform {
    pub fn forward<T: Real>(self, raw: T) -> T {
        match self {
            Transform::Identity => raw,
            Transform::Softplus => raw.softplus(),
            Transform::Log { floor } => raw.exp() + floor,
        }
    }

    /// Inverse of [`Transform::forward`]; values at or below the constraint
    /// boundary are pulled just inside it.
    pub fn inverse(self, value: f64) -> f64 {
        match self {
            Transform::Identity => value,
            Transform::Softplus => {
                let v = value.max(1e-300);
                // ln(e^v − 1)
                if v > 30.0 { v } else { v.exp_m1().ln() }
            }
            Transform::Log { floor } => {
                let excess = value - floor;
                let min = if floor > 0.0 { floor * 1e-6 } else { 1e-300 };
                excess.max(min).ln()
            }
        }
    }
}

/// A named slice of the flat vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    pub transform: Transform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub blocks: Vec<ParamBlock>,
}

impl ParamVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn block(&self, name: &str) -> Option<&ParamBlock> {
        self.blocks.iter().find(|b| b.name == name)
    }

    /// Block name owning coordinate `i`.
    pub fn name_of(&self, i: usize) -> String {
        self.blocks
            .iter()
            .find(|b| (b.offset..b.offset + b.len).contains(&i))
            .map_or_else(|| format!("#{i}"), |b| format!("{}[{}]", b.name, i - b.offset))
    }
}

/// Which model quantities are optimised alongside the variational state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Trainable {
    pub kernel_hyperparameters: bool,
    pub noise_variance: bool,
    pub inducing_locations: bool,
}

impl Default for Trainable {
    fn default() -> Self {
        Trainable { kernel_hyperparameters: true, noise_variance: true, inducing_locations: false }
    }
}

/// Smallest trainable likelihood noise.
pub const NOISE_VARIANCE_FLOOR: f64 = 1e-6;

/// Model, state template and the choice of trainable blocks. Frozen
/// quantities are read from the template on every unpack.
#[derive(Clone, Debug)]
pub struct Problem {
    pub model: DgpModelSpec,
    pub state: VariationalState,
    pub trainable: Trainable,
    pub estimator: JointEstimator,
}

struct Writer {
    values: Vec<f64>,
    blocks: Vec<ParamBlock>,
}

impl Writer {
    fn block(&mut self, name: String, values: impl IntoIterator<Item = f64>, transform: Transform) {
        let offset = self.values.len();
        self.values.extend(values.into_iter().map(|v| transform.inverse(v)));
        self.blocks.push(ParamBlock { name, offset, len: self.values.len() - offset, transform });
    }

    fn factor(&mut self, prefix: &str, q: &InducingFactor) {
        self.block(format!("{prefix}.mean"), q.mean.iter().copied(), Transform::Identity);
        self.chol(prefix, &q.chol);
    }

    fn chol(&mut self, prefix: &str, c: &Mat) {
        let n = c.rows();
        self.block(format!("{prefix}.chol_diag"), (0..n).map(|i| c[(i, i)]), Transform::Softplus);
        self.block(
            format!("{prefix}.chol_lower"),
            (0..n).flat_map(|i| (0..i).map(move |j| (i, j))).map(|(i, j)| c[(i, j)]),
            Transform::Identity,
        );
    }
}

struct Reader<'a, T> {
    raw: &'a [T],
    pos: usize,
}

impl<T: Real> Reader<'_, T> {
    fn take(&mut self, n: usize, transform: Transform) -> Vec<T> {
        let out = self.raw[self.pos..self.pos + n].iter().map(|&r| transform.forward(r)).collect();
        self.pos += n;
        out
    }

    fn one(&mut self, transform: Transform) -> T {
        self.take(1, transform)[0]
    }

    fn factor(&mut self, m: usize) -> InducingFactor<T> {
        let mean = self.take(m, Transform::Identity);
        InducingFactor { mean, chol: self.chol(m) }
    }

    fn chol(&mut self, n: usize) -> Mat<T> {
        let diag = self.take(n, Transform::Softplus);
        let lower = self.take(n * n.saturating_sub(1) / 2, Transform::Identity);
        let mut c = Mat::zeros(n, n);
        let mut k = 0;
        for i in 0..n {
            c[(i, i)] = diag[i];
            for j in 0..i {
                c[(i, j)] = lower[k];
                k += 1;
            }
        }
        c
    }
}

const POSITIVE: Transform = Transform::Log { floor: 0.0 };

impl Problem {
    pub fn new(model: DgpModelSpec, state: VariationalState, trainable: Trainable, estimator: JointEstimator) -> Result<Self> {
        model.validate()?;
        state.validate(&model)?;
        if trainable.noise_variance && model.noise_variance < NOISE_VARIANCE_FLOOR {
            return Err(DgpError::Config(format!(
                "trainable noise variance must start at or above {NOISE_VARIANCE_FLOOR:e}"
            )));
        }
        Ok(Problem { model, state, trainable, estimator })
    }

    fn locations_in_model(&self) -> bool {
        self.trainable.inducing_locations && !matches!(self.state, VariationalState::Chained(_))
    }

    /// Flat raw vector for the template's current values.
    pub fn pack(&self) -> ParamVector {
        self.pack_from(&self.model, &self.state)
    }

    /// Flat raw vector for another model and state with the same shapes.
    pub fn pack_from(&self, model: &DgpModelSpec, state: &VariationalState) -> ParamVector {
        let mut w = Writer { values: Vec::new(), blocks: Vec::new() };
        for (l, layer) in model.layers.iter().enumerate() {
            if self.trainable.kernel_hyperparameters {
                w.block(format!("layer{l}.variance"), [layer.kernel.variance], POSITIVE);
                w.block(format!("layer{l}.lengthscale"), [layer.kernel.lengthscale], POSITIVE);
                if let Some(p) = layer.kernel.period {
                    w.block(format!("layer{l}.period"), [p], POSITIVE);
                }
            }
            if self.locations_in_model() {
                w.block(format!("layer{l}.inducing"), layer.inducing.iter().copied(), Transform::Identity);
            }
        }
        if self.trainable.noise_variance {
            w.block("noise_variance".into(), [model.noise_variance], Transform::Log { floor: NOISE_VARIANCE_FLOOR });
        }
        match state {
            VariationalState::MeanField(s) => {
                for (l, q) in s.layers.iter().enumerate() {
                    w.factor(&format!("q{l}"), q);
                }
            }
            VariationalState::JointGaussian(s) => {
                w.factor("q0", &s.first);
                for (k, link) in s.links.iter().enumerate() {
                    let p = format!("link{}", k + 1);
                    w.block(format!("{p}.transition"), link.transition.as_slice().iter().copied(), Transform::Identity);
                    w.block(format!("{p}.offset"), link.offset.iter().copied(), Transform::Identity);
                    w.chol(&p, &link.chol);
                }
            }
            VariationalState::Chained(s) => {
                if self.trainable.inducing_locations {
                    w.block("z".into(), s.z.iter().copied(), Transform::Identity);
                }
                for (l, q) in s.layers.iter().enumerate() {
                    w.factor(&format!("q{l}"), q);
                }
            }
        }
        ParamVector { values: w.values, blocks: w.blocks }
    }

    pub fn dim(&self) -> usize {
        self.pack().len()
    }

    /// Model and state at raw parameters `raw`.
    pub fn unpack<T: Real>(&self, raw: &[T]) -> Result<(DgpModelSpec<T>, VariationalState<T>)> {
        let expected = self.dim();
        if raw.len() != expected {
            return Err(DgpError::DimensionMismatch { what: "parameter vector", expected, got: raw.len() });
        }
        let mut r = Reader { raw, pos: 0 };
        let mut layers = Vec::with_capacity(self.model.num_layers());
        for layer in &self.model.layers {
            let kernel = if self.trainable.kernel_hyperparameters {
                let variance = r.one(POSITIVE);
                let lengthscale = r.one(POSITIVE);
                let period = layer.kernel.period.map(|_| r.one(POSITIVE));
                KernelSpec { family: layer.kernel.family, variance, lengthscale, period }
            } else {
                KernelSpec::lift(&layer.kernel)
            };
            let inducing = if self.locations_in_model() {
                r.take(layer.inducing.len(), Transform::Identity)
            } else {
                layer.inducing.iter().map(|&v| T::cst(v)).collect()
            };
            layers.push(GPLayerSpec { kernel, mean_fn: layer.mean_fn, inducing });
        }
        let noise_variance = if self.trainable.noise_variance {
            r.one(Transform::Log { floor: NOISE_VARIANCE_FLOOR })
        } else {
            T::cst(self.model.noise_variance)
        };
        let model = DgpModelSpec { layers, noise_variance };
        let state = match &self.state {
            VariationalState::MeanField(s) => VariationalState::MeanField(MeanFieldState {
                layers: s.layers.iter().map(|q| r.factor(q.mean.len())).collect(),
            }),
            VariationalState::JointGaussian(s) => {
                let first = r.factor(s.first.mean.len());
                let links = s
                    .links
                    .iter()
                    .map(|link| {
                        let (rows, cols) = (link.transition.rows(), link.transition.cols());
                        let transition = Mat::from_row_slice(rows, cols, &r.take(rows * cols, Transform::Identity));
                        let offset = r.take(link.offset.len(), Transform::Identity);
                        let chol = r.chol(link.offset.len());
                        ChainLink { transition, offset, chol }
                    })
                    .collect();
                VariationalState::JointGaussian(ChainGaussianState { first, links })
            }
            VariationalState::Chained(s) => {
                let z = if self.trainable.inducing_locations {
                    r.take(s.z.len(), Transform::Identity)
                } else {
                    s.z.iter().map(|&v| T::cst(v)).collect()
                };
                let layers = s.layers.iter().map(|q| r.factor(q.mean.len())).collect();
                VariationalState::Chained(ChainedInducingState { z, layers })
            }
        };
        debug_assert_eq!(r.pos, raw.len());
        Ok((model, state))
    }

    /// Plain-valued model and state at `raw`.
    pub fn values(&self, raw: &[f64]) -> Result<(DgpModelSpec, VariationalState)> {
        self.unpack(raw)
    }

    pub fn noise_width(&self, n_points: usize) -> usize {
        noise_width(self.state.kind(), &self.model, shared_size(&self.state), n_points, self.estimator)
    }

    pub(crate) fn elbo_parts<T: Real>(&self, raw: &[T], data: &Dataset, noise: &BaseNoise) -> Result<ElboParts<T>> {
        let (model, state) = self.unpack(raw)?;
        elbo_parts(&model, &state, data, noise, self.estimator)
    }

    /// ELBO value at `raw` with frozen `noise`; deterministic.
    pub fn objective(&self, raw: &[f64], data: &Dataset, noise: &BaseNoise) -> Result<f64> {
        Ok(self.elbo_parts(raw, data, noise)?.value())
    }
}
