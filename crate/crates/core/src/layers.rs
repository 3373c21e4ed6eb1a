//! Sparse-GP conditionals shared by every variational scheme.

use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::error::{DgpError, Result};
use crate::linalg::{chol_with_schedule, dot, norm_sq, Cholesky, JitterSchedule, Mat};
use crate::math::{KernelSpec, MvnMoments};

/// Smallest admissible likelihood noise variance.
pub const NOISE_FLOOR: f64 = 1e-8;

/// Minimum separation between inducing locations of one layer.
pub const INDUCING_SEPARATION: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanFnSpec {
    Zero,
    Identity,
}

impl MeanFnSpec {
    #[inline]
    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            MeanFnSpec::Zero => T::zero(),
            MeanFnSpec::Identity => x,
        }
    }

    /// Identity inner layers, zero-mean output layer.
    pub fn default_for(layer: usize, n_layers: usize) -> Self {
        if layer + 1 < n_layers {
            MeanFnSpec::Identity
        } else {
            MeanFnSpec::Zero
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GPLayerSpec<T = f64> {
    pub kernel: KernelSpec<T>,
    pub mean_fn: MeanFnSpec,
    pub inducing: Vec<T>,
}

impl<T: Real> GPLayerSpec<T> {
    pub fn num_inducing(&self) -> usize {
        self.inducing.len()
    }

    pub fn values(&self) -> GPLayerSpec<f64> {
        GPLayerSpec {
            kernel: self.kernel.values(),
            mean_fn: self.mean_fn,
            inducing: self.inducing.iter().map(|v| v.val()).collect(),
        }
    }

    pub fn lift(l: &GPLayerSpec<f64>) -> Self {
        GPLayerSpec {
            kernel: KernelSpec::lift(&l.kernel),
            mean_fn: l.mean_fn,
            inducing: l.inducing.iter().map(|&v| T::cst(v)).collect(),
        }
    }
}

impl GPLayerSpec<f64> {
    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        validate_locations(&self.inducing)
    }
}

pub(crate) fn validate_locations(z: &[f64]) -> Result<()> {
    if z.is_empty() {
        return Err(DgpError::InvalidInput("a layer needs at least one inducing location".into()));
    }
    if let Some(v) = z.iter().find(|v| !v.is_finite()) {
        return Err(DgpError::InvalidInput(format!("non-finite inducing location {v}")));
    }
    let mut sorted = z.to_vec();
    sorted.sort_by(f64::total_cmp);
    if sorted.windows(2).any(|w| w[1] - w[0] < INDUCING_SEPARATION) {
        return Err(DgpError::InvalidInput("inducing locations must be pairwise distinct".into()));
    }
    Ok(())
}

/// Layer stack plus Gaussian likelihood noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DgpModelSpec<T = f64> {
    pub layers: Vec<GPLayerSpec<T>>,
    pub noise_variance: T,
}

impl<T: Real> DgpModelSpec<T> {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn values(&self) -> DgpModelSpec<f64> {
        DgpModelSpec {
            layers: self.layers.iter().map(|l| l.values()).collect(),
            noise_variance: self.noise_variance.val(),
        }
    }

    pub fn lift(m: &DgpModelSpec<f64>) -> Self {
        DgpModelSpec {
            layers: m.layers.iter().map(GPLayerSpec::lift).collect(),
            noise_variance: T::cst(m.noise_variance),
        }
    }
}

impl DgpModelSpec<f64> {
    /// Stack with default mean functions and the same inducing locations in every layer.
    pub fn with_defaults(kernels: Vec<KernelSpec>, inducing: Vec<f64>, noise_variance: f64) -> Self {
        let n = kernels.len();
        DgpModelSpec {
            layers: kernels
                .into_iter()
                .enumerate()
                .map(|(i, kernel)| GPLayerSpec {
                    kernel,
                    mean_fn: MeanFnSpec::default_for(i, n),
                    inducing: inducing.clone(),
                })
                .collect(),
            noise_variance,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(DgpError::InvalidInput("model needs at least one layer".into()));
        }
        for l in &self.layers {
            l.validate()?;
        }
        if !(self.noise_variance >= NOISE_FLOOR) || !self.noise_variance.is_finite() {
            return Err(DgpError::InvalidInput(format!(
                "likelihood noise {} is below the floor {NOISE_FLOOR:e}",
                self.noise_variance
            )));
        }
        Ok(())
    }
}

/// Cholesky of `k(Z, Z)` together with what is needed to condition on values at `Z`.
#[derive(Clone, Debug)]
pub(crate) struct Conditioner<T> {
    pub kernel: KernelSpec<T>,
    pub mean_fn: MeanFnSpec,
    pub locations: Vec<T>,
    pub chol: Cholesky<T>,
    /// `μ(Z)`.
    pub prior_mean: Vec<T>,
}

/// Projection of one query input onto the inducing set.
pub(crate) struct Projection<T> {
    pub prior_mean: T,
    pub kxx: T,
    /// `L⁻¹ k(Z, x)`.
    pub v: Vec<T>,
    /// `k(Z, Z)⁻¹ k(Z, x)`.
    pub alpha: Vec<T>,
}

impl<T: Real> Projection<T> {
    /// `μ(x) + αᵀ(u − μ(Z))` given centred values `u − μ(Z)`.
    #[inline]
    pub fn mean_given(&self, centred: &[T]) -> T {
        self.prior_mean + dot(&self.alpha, centred)
    }

    /// `k(x,x) − αᵀ k(Z,Z) α`.
    #[inline]
    pub fn residual_variance(&self) -> T {
        self.kxx - norm_sq(&self.v)
    }
}

impl<T: Real> Conditioner<T> {
    pub fn new(kernel: &KernelSpec<T>, mean_fn: MeanFnSpec, locations: &[T], schedule: &JitterSchedule) -> Result<Self> {
        let gram = kernel.gram(locations);
        let chol = chol_with_schedule(&gram, schedule)?;
        Ok(Conditioner {
            kernel: kernel.clone(),
            mean_fn,
            locations: locations.to_vec(),
            chol,
            prior_mean: locations.iter().map(|&z| mean_fn.apply(z)).collect(),
        })
    }

    pub fn for_layer(layer: &GPLayerSpec<T>) -> Result<Self> {
        Self::new(&layer.kernel, layer.mean_fn, &layer.inducing, &JitterSchedule::default())
    }

    pub fn size(&self) -> usize {
        self.locations.len()
    }

    pub fn project(&self, x: T) -> Projection<T> {
        let kzx: Vec<T> = self.locations.iter().map(|&z| self.kernel.eval(z, x)).collect();
        let v = self.chol.solve_lower(&kzx);
        let alpha = self.chol.solve_upper(&v);
        Projection {
            prior_mean: self.mean_fn.apply(x),
            kxx: self.kernel.diag(),
            v,
            alpha,
        }
    }

    /// `u − μ(Z)`.
    pub fn centre(&self, u: &[T]) -> Vec<T> {
        u.iter().zip(&self.prior_mean).map(|(&a, &b)| a - b).collect()
    }
}

fn check_inputs(inputs: &[f64]) -> Result<()> {
    if let Some(v) = inputs.iter().find(|v| !v.is_finite()) {
        return Err(DgpError::InvalidInput(format!("non-finite layer input {v}")));
    }
    Ok(())
}

/// Full-covariance helper: returns `(α, V = L⁻¹ k(Z, X))`.
pub(crate) fn projections(cond: &Conditioner<f64>, inputs: &[f64]) -> (Mat, Mat) {
    let kzx = cond.kernel.matrix(&cond.locations, inputs);
    let v = cond.chol.solve_lower_mat(&kzx);
    let mut alpha = Mat::zeros(v.rows(), v.cols());
    for j in 0..v.cols() {
        let a = cond.chol.solve_upper(&v.column(j));
        for (i, x) in a.into_iter().enumerate() {
            alpha[(i, j)] = x;
        }
    }
    (alpha, v)
}

/// `α = k(Z,Z)⁻¹ k(Z, inputs)`, an `M × N` matrix.
pub fn alpha(layer: &GPLayerSpec, inputs: &[f64]) -> Result<Mat> {
    check_inputs(inputs)?;
    layer.validate()?;
    let cond = Conditioner::for_layer(layer)?;
    Ok(projections(&cond, inputs).0)
}

/// GP posterior at `inputs` given inducing values `u` at the layer's locations.
pub fn conditional_given_u(layer: &GPLayerSpec, inputs: &[f64], u: &[f64]) -> Result<MvnMoments> {
    marginal_conditional(layer, inputs, u, &Mat::zeros(u.len(), u.len()))
}

/// Moments of `f(inputs)` with `u ~ N(m, S)` integrated out.
pub fn marginal_conditional(layer: &GPLayerSpec, inputs: &[f64], m: &[f64], s: &Mat) -> Result<MvnMoments> {
    check_inputs(inputs)?;
    layer.validate()?;
    let big_m = layer.num_inducing();
    if m.len() != big_m {
        return Err(DgpError::DimensionMismatch {
            what: "inducing mean length",
            expected: big_m,
            got: m.len(),
        });
    }
    if s.rows() != big_m || s.cols() != big_m {
        return Err(DgpError::DimensionMismatch {
            what: "inducing covariance order",
            expected: big_m,
            got: s.rows(),
        });
    }
    if !s.is_symmetric(1e-9) {
        return Err(DgpError::InvalidInput("inducing covariance is not symmetric".into()));
    }
    let cond = Conditioner::for_layer(layer)?;
    Ok(moments_with_projection(&cond, inputs, m, s))
}

pub(crate) fn moments_with_projection(cond: &Conditioner<f64>, inputs: &[f64], m: &[f64], s: &Mat) -> MvnMoments {
    let (alpha, v) = projections(cond, inputs);
    let centred = cond.centre(m);
    let mean: Vec<f64> = inputs
        .iter()
        .enumerate()
        .map(|(j, &x)| cond.mean_fn.apply(x) + dot(&alpha.column(j), &centred))
        .collect();
    let kxx = cond.kernel.gram(inputs);
    let vtv = v.transpose().matmul(&v);
    let sa = s.matmul(&alpha);
    let ats_a = alpha.transpose().matmul(&sa);
    let mut cov = kxx.sub(&vtv).add(&ats_a);
    symmetrise(&mut cov);
    MvnMoments { mean, covariance: cov }
}

pub(crate) fn symmetrise(m: &mut Mat) {
    for i in 0..m.rows() {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_layer(z: Vec<f64>, mean_fn: MeanFnSpec) -> GPLayerSpec {
        GPLayerSpec {
            kernel: KernelSpec::squared_exponential(1.0, 1.0),
            mean_fn,
            inducing: z,
        }
    }

    #[test]
    fn alpha_at_inducing_locations_is_identity() {
        let z = vec![-1.0, 0.0, 0.7];
        let layer = unit_layer(z.clone(), MeanFnSpec::Zero);
        let a = alpha(&layer, &z).unwrap();
        assert!(a.max_abs_diff(&Mat::identity(3)) < 1e-6);
    }

    #[test]
    fn alpha_single_point_hand_value() {
        let layer = unit_layer(vec![0.0], MeanFnSpec::Zero);
        let a = alpha(&layer, &[1.0]).unwrap();
        assert!((a[(0, 0)] - (-0.5f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn alpha_decays_far_away() {
        let layer = unit_layer(vec![-0.5, 0.0, 0.5], MeanFnSpec::Zero);
        let a = alpha(&layer, &[100.0]).unwrap();
        for i in 0..3 {
            assert!(a[(i, 0)].abs() < 1e-10);
        }
    }

    #[test]
    fn conditional_interpolates_inducing_values() {
        let z = vec![-1.0, 0.0, 0.7];
        let u = vec![0.3, -0.2, 1.1];
        let layer = unit_layer(z.clone(), MeanFnSpec::Identity);
        let c = conditional_given_u(&layer, &z, &u).unwrap();
        for i in 0..3 {
            assert!((c.mean[i] - u[i]).abs() < 1e-6);
        }
        assert!(c.covariance.max_abs_diff(&Mat::zeros(3, 3)) < 1e-6);
    }

    #[test]
    fn conditional_single_point_hand_value() {
        let layer = unit_layer(vec![0.0], MeanFnSpec::Zero);
        let c = conditional_given_u(&layer, &[1.0], &[1.0]).unwrap();
        assert!((c.mean[0] - 0.60653).abs() < 1e-5);
        assert!((c.covariance[(0, 0)] - (1.0 - (-1.0f64).exp())).abs() < 1e-9);
    }

    #[test]
    fn conditional_far_from_inducing_recovers_prior() {
        let layer = GPLayerSpec {
            kernel: KernelSpec::squared_exponential(2.5, 0.3),
            mean_fn: MeanFnSpec::Zero,
            inducing: vec![0.0, 0.2],
        };
        let c = conditional_given_u(&layer, &[50.0], &[1.0, -1.0]).unwrap();
        assert!(c.mean[0].abs() < 1e-10);
        assert!((c.covariance[(0, 0)] - 2.5).abs() < 1e-10);
    }

    #[test]
    fn marginal_conditional_limits() {
        let z = vec![-0.6, 0.1, 0.9];
        let layer = unit_layer(z.clone(), MeanFnSpec::Identity);
        let x = vec![-0.2, 0.4, 1.5];
        let kzz = layer.kernel.gram(&z);
        let prior = marginal_conditional(&layer, &x, &z, &kzz).unwrap();
        let kxx = layer.kernel.gram(&x);
        assert!(prior.covariance.max_abs_diff(&kxx) < 1e-8);

        let m = vec![0.2, -0.4, 0.3];
        let a = marginal_conditional(&layer, &x, &m, &Mat::zeros(3, 3)).unwrap();
        let b = conditional_given_u(&layer, &x, &m).unwrap();
        assert!(a.covariance.max_abs_diff(&b.covariance) < 1e-14);

        let tiny = Mat::identity(3).scale(1e-12);
        let c = marginal_conditional(&layer, &x, &m, &tiny).unwrap();
        assert!(c.covariance.max_abs_diff(&b.covariance) < 1e-8);
    }

    #[test]
    fn marginal_conditional_single_point_hand_value() {
        let layer = unit_layer(vec![0.0], MeanFnSpec::Zero);
        let s = Mat::from_row_slice(1, 1, &[0.25]);
        let c = marginal_conditional(&layer, &[1.0], &[1.0], &s).unwrap();
        assert!((c.mean[0] - 0.60653).abs() < 1e-5);
        let expected = 1.0 - (-1.0f64).exp() * 0.75;
        assert!((c.covariance[(0, 0)] - expected).abs() < 1e-9);
        assert!((expected - 0.72412).abs() < 1e-4);
    }

    #[test]
    fn identity_mean_passes_inputs_through_at_inducing_locations() {
        let z = vec![-1.0, -0.3, 0.4, 1.2];
        let layer = unit_layer(z.clone(), MeanFnSpec::Identity);
        let c = marginal_conditional(&layer, &z, &z, &Mat::zeros(4, 4)).unwrap();
        for i in 0..4 {
            assert_eq!(c.mean[i], z[i]);
        }
    }

    #[test]
    fn shape_errors() {
        let layer = unit_layer(vec![0.0, 1.0], MeanFnSpec::Zero);
        assert!(matches!(
            conditional_given_u(&layer, &[0.5], &[1.0]),
            Err(DgpError::DimensionMismatch { .. })
        ));
        let dup = unit_layer(vec![0.0, 0.0], MeanFnSpec::Zero);
        assert!(matches!(alpha(&dup, &[0.5]), Err(DgpError::InvalidInput(_))));
    }
}
