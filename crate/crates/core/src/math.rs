//! Kernels, multivariate-normal helpers and the random-number contract.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::error::{DgpError, Result};
use crate::linalg::{chol_with_schedule, norm_sq, Cholesky, JitterSchedule, Mat};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    SquaredExponential,
    Periodic,
}

/// Stationary covariance function.
///
/// `period` is only read by [`KernelFamily::Periodic`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec<T = f64> {
    pub family: KernelFamily,
    pub variance: T,
    pub lengthscale: T,
    pub period: Option<T>,
}

impl KernelSpec<f64> {
    pub fn squared_exponential(variance: f64, lengthscale: f64) -> Self {
        KernelSpec {
            family: KernelFamily::SquaredExponential,
            variance,
            lengthscale,
            period: None,
        }
    }

    pub fn periodic(variance: f64, lengthscale: f64, period: f64) -> Self {
        KernelSpec {
            family: KernelFamily::Periodic,
            variance,
            lengthscale,
            period: Some(period),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(DgpError::InvalidInput(format!("kernel {name} must be positive and finite, got {v}")))
            }
        };
        positive("variance", self.variance)?;
        positive("lengthscale", self.lengthscale)?;
        if self.family == KernelFamily::Periodic {
            match self.period {
                Some(p) => positive("period", p)?,
                None => return Err(DgpError::InvalidInput("periodic kernel requires a period".into())),
            }
        }
        Ok(())
    }
}

impl<T: Real> KernelSpec<T> {
    #[inline]
    pub fn eval(&self, x: T, y: T) -> T {
        match self.family {
            KernelFamily::SquaredExponential => {
                let d = x - y;
                self.variance * (-(d.square()) / (self.lengthscale.square() * 2.0)).exp()
            }
            KernelFamily::Periodic => {
                let p = self.period.unwrap_or_else(|| T::cst(1.0));
                let s = ((x - y) * std::f64::consts::PI / p).sin();
                self.variance * (-(s.square() * 2.0) / self.lengthscale.square()).exp()
            }
        }
    }

    /// `k(x, x)` for a stationary kernel.
    #[inline]
    pub fn diag(&self) -> T {
        self.variance
    }

    pub fn matrix(&self, xs: &[T], ys: &[T]) -> Mat<T> {
        Mat::from_fn(xs.len(), ys.len(), |i, j| self.eval(xs[i], ys[j]))
    }

    /// Symmetric `k(X, X)` built from the lower triangle.
    pub fn gram(&self, xs: &[T]) -> Mat<T> {
        let n = xs.len();
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = self.diag();
            for j in 0..i {
                let v = self.eval(xs[i], xs[j]);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        m
    }

    pub fn values(&self) -> KernelSpec<f64> {
        KernelSpec {
            family: self.family,
            variance: self.variance.val(),
            lengthscale: self.lengthscale.val(),
            period: self.period.map(|p| p.val()),
        }
    }

    pub fn lift(k: &KernelSpec<f64>) -> Self {
        KernelSpec {
            family: k.family,
            variance: T::cst(k.variance),
            lengthscale: T::cst(k.lengthscale),
            period: k.period.map(T::cst),
        }
    }
}

/// Mean vector and covariance matrix of a multivariate normal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MvnMoments {
    pub mean: Vec<f64>,
    pub covariance: Mat<f64>,
}

impl MvnMoments {
    pub fn new(mean: Vec<f64>, covariance: Mat<f64>) -> Result<Self> {
        if !covariance.is_square() || covariance.rows() != mean.len() {
            return Err(DgpError::DimensionMismatch {
                what: "covariance order vs mean length",
                expected: mean.len(),
                got: covariance.rows(),
            });
        }
        if !covariance.is_symmetric(1e-9) {
            return Err(DgpError::InvalidInput("covariance is not symmetric".into()));
        }
        Ok(MvnMoments { mean, covariance })
    }

    pub fn standard(n: usize) -> Self {
        MvnMoments {
            mean: vec![0.0; n],
            covariance: Mat::identity(n),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn variances(&self) -> Vec<f64> {
        self.covariance.diagonal()
    }
}

/// Seed plus stream id. Identical handles reproduce identical draws.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngHandle {
    pub seed: u64,
    pub stream: u64,
}

impl RngHandle {
    pub fn new(seed: u64) -> Self {
        RngHandle { seed, stream: 0 }
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        RngHandle { seed, stream }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }

    /// Independent child handle, e.g. one per replicate or per purpose.
    pub fn derive(&self, tag: u64) -> RngHandle {
        RngHandle {
            seed: splitmix64(self.seed ^ splitmix64(tag.wrapping_add(0x9e37_79b9_7f4a_7c15))),
            stream: self.stream,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn standard_normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn check_finite(what: &str, xs: &[f64]) -> Result<()> {
    if xs.is_empty() {
        return Err(DgpError::InvalidInput(format!("{what} must be non-empty")));
    }
    if let Some(v) = xs.iter().find(|v| !v.is_finite()) {
        return Err(DgpError::InvalidInput(format!("{what} contains non-finite value {v}")));
    }
    Ok(())
}

/// `K[i, j] = k(xs[i], ys[j])`.
pub fn eval_kernel_matrix(kernel: &KernelSpec, xs: &[f64], ys: &[f64]) -> Result<Mat> {
    kernel.validate()?;
    check_finite("X", xs)?;
    check_finite("Y", ys)?;
    Ok(kernel.matrix(xs, ys))
}

/// Jittered Cholesky of a symmetric matrix.
pub fn chol_psd(a: &Mat, schedule: &JitterSchedule) -> Result<Cholesky> {
    if !a.is_finite() {
        return Err(DgpError::InvalidInput("matrix has non-finite entries".into()));
    }
    if !a.is_symmetric(1e-9) {
        return Err(DgpError::InvalidInput("matrix is not symmetric".into()));
    }
    let c = chol_with_schedule(a, schedule)?;
    if c.jitter() > 0.0 {
        log::trace!("cholesky of order {} used jitter {:e}", a.rows(), c.jitter());
    }
    Ok(c)
}

/// `n_samples × dim` matrix of draws `mean + L ε`.
pub fn sample_mvn(m: &MvnMoments, n_samples: usize, rng: RngHandle) -> Result<Mat> {
    let chol = chol_psd(&m.covariance, &JitterSchedule::default())?;
    let d = m.dim();
    let mut r = rng.rng();
    let mut out = Mat::zeros(n_samples, d);
    for s in 0..n_samples {
        let eps = standard_normals(&mut r, d);
        let x = chol.mul_lower(&eps);
        for j in 0..d {
            out[(s, j)] = m.mean[j] + x[j];
        }
    }
    Ok(out)
}

/// `KL(N(mq, Lq Lqᵀ) ‖ N(mp, chol_p))` with `q` given by its lower factor.
pub(crate) fn kl_from_factors<T: Real>(mq: &[T], lq: &Mat<T>, mp: &[T], chol_p: &Cholesky<T>) -> T {
    let k = mq.len();
    // tr(Σp⁻¹ Σq) = ‖Lp⁻¹ Lq‖²_F
    let mut trace = T::zero();
    for j in 0..k {
        let col: Vec<T> = (0..k).map(|i| lq[(i, j)]).collect();
        trace += norm_sq(&chol_p.solve_lower(&col));
    }
    let diff: Vec<T> = mp.iter().zip(mq).map(|(&a, &b)| a - b).collect();
    let maha = norm_sq(&chol_p.solve_lower(&diff));
    let mut log_det_q = T::zero();
    for i in 0..k {
        log_det_q += lq[(i, i)].ln();
    }
    (trace + maha - k as f64 + chol_p.log_det() - log_det_q * 2.0) * 0.5
}

/// Closed-form `KL(q ‖ p)` between two Gaussians.
pub fn gauss_kl(q: &MvnMoments, p: &MvnMoments) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(DgpError::DimensionMismatch {
            what: "gauss_kl dimensions",
            expected: p.dim(),
            got: q.dim(),
        });
    }
    let schedule = JitterSchedule::default();
    let chol_q = chol_psd(&q.covariance, &schedule)?;
    let chol_p = chol_psd(&p.covariance, &schedule)?;
    let kl = kl_from_factors(&q.mean, chol_q.factor(), &p.mean, &chol_p);
    if !kl.is_finite() {
        return Err(DgpError::NotPsd { jitter: chol_p.jitter() });
    }
    Ok(kl.max(0.0))
}
