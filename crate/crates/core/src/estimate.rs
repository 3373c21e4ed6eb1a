//! Types shared by the ELBO estimators: data, frozen noise, estimates, sample sets.

use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::error::{DgpError, Result};
use crate::linalg::Mat;
use crate::math::{standard_normals, RngHandle};

/// One-dimensional regression data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl Dataset {
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        let d = Dataset { x, y };
        d.validate()?;
        Ok(d)
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.x.len() != self.y.len() {
            return Err(DgpError::DimensionMismatch {
                what: "x and y lengths",
                expected: self.x.len(),
                got: self.y.len(),
            });
        }
        if self.x.iter().chain(&self.y).any(|v| !v.is_finite()) {
            return Err(DgpError::InvalidInput("data contains non-finite values".into()));
        }
        Ok(())
    }
}

/// Standard-normal draws frozen ahead of an estimator call, one row per
/// Monte-Carlo sample. Re-using the same rows across parameter values gives
/// common random numbers.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseNoise {
    n_samples: usize,
    width: usize,
    data: Vec<f64>,
}

impl BaseNoise {
    /// Draws `n_samples × width` standard normals. With `moment_match`, every
    /// column is shifted and scaled to zero sample mean and unit sample second
    /// moment.
    pub fn draw(n_samples: usize, width: usize, rng: RngHandle, moment_match: bool) -> Self {
        let mut r = rng.rng();
        let data = standard_normals(&mut r, n_samples * width);
        let mut noise = BaseNoise { n_samples, width, data };
        if moment_match && n_samples >= 2 {
            noise.moment_match();
        }
        noise
    }

    pub fn from_rows(n_samples: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_samples * width {
            return Err(DgpError::DimensionMismatch {
                what: "noise buffer length",
                expected: n_samples * width,
                got: data.len(),
            });
        }
        Ok(BaseNoise { n_samples, width, data })
    }

    fn moment_match(&mut self) {
        let n = self.n_samples as f64;
        for c in 0..self.width {
            let mean = (0..self.n_samples).map(|s| self.data[s * self.width + c]).sum::<f64>() / n;
            let ss = (0..self.n_samples)
                .map(|s| (self.data[s * self.width + c] - mean).powi(2))
                .sum::<f64>()
                / n;
            let scale = if ss > 0.0 { ss.sqrt().recip() } else { 1.0 };
            for s in 0..self.n_samples {
                let v = &mut self.data[s * self.width + c];
                *v = (*v - mean) * scale;
            }
        }
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.data[s * self.width..(s + 1) * self.width]
    }

    pub(crate) fn require_width(&self, width: usize) -> Result<()> {
        if self.width != width {
            return Err(DgpError::DimensionMismatch {
                what: "base noise width",
                expected: width,
                got: self.width,
            });
        }
        if self.n_samples == 0 {
            return Err(DgpError::InvalidInput("at least one Monte-Carlo sample is required".into()));
        }
        Ok(())
    }
}

/// Work counters, used to check the cost model of the estimators.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounts {
    /// Cholesky factorisations of `M × M` matrices.
    pub factorisations: usize,
    /// Univariate conditional draws (one per data point, layer and sample).
    pub scalar_conditionals: usize,
    /// Joint draws rejected because their conditioning matrix needed too much jitter.
    pub resamples: usize,
}

/// Monte-Carlo ELBO with its breakdown.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboEstimate {
    pub value: f64,
    pub expected_log_lik: f64,
    pub kl: f64,
    pub kl_per_layer: Vec<f64>,
    /// Standard error of the expected log-likelihood term.
    pub std_error: f64,
    pub n_samples: usize,
    /// Inner sample count of the nested estimator, when there is one.
    pub n_inner: Option<usize>,
    pub counts: OpCounts,
}

/// Generic estimator output before reduction to [`ElboEstimate`].
pub(crate) struct ElboParts<T> {
    pub ell_per_sample: Vec<T>,
    pub kl_per_layer: Vec<T>,
    pub n_inner: Option<usize>,
    pub counts: OpCounts,
}

impl<T: Real> ElboParts<T> {
    pub fn value(&self) -> T {
        let n = self.ell_per_sample.len() as f64;
        let mut ell = T::zero();
        for &v in &self.ell_per_sample {
            ell += v;
        }
        let mut value = ell / n;
        for &k in &self.kl_per_layer {
            value -= k;
        }
        value
    }

    pub fn estimate(&self) -> ElboEstimate {
        let ell: Vec<f64> = self.ell_per_sample.iter().map(|v| v.val()).collect();
        let n = ell.len() as f64;
        let mean = ell.iter().sum::<f64>() / n;
        let std_error = if ell.len() > 1 {
            let var = ell.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        } else {
            f64::NAN
        };
        let kl_per_layer: Vec<f64> = self.kl_per_layer.iter().map(|v| v.val()).collect();
        let kl = kl_per_layer.iter().sum::<f64>();
        ElboEstimate {
            value: mean - kl,
            expected_log_lik: mean,
            kl,
            kl_per_layer,
            std_error,
            n_samples: ell.len(),
            n_inner: self.n_inner,
            counts: self.counts,
        }
    }
}

#[inline]
pub(crate) fn gaussian_log_density<T: Real>(y: f64, f: T, noise_variance: T) -> T {
    let r = f - y;
    -(noise_variance * (2.0 * std::f64::consts::PI)).ln() * 0.5 - r.square() / (noise_variance * 2.0)
}

/// Variance floor applied before taking square roots of predictive variances.
pub(crate) const VARIANCE_FLOOR: f64 = 1e-15;

#[inline]
pub(crate) fn floored<T: Real>(var: T) -> T {
    if var.val() < VARIANCE_FLOOR {
        T::cst(VARIANCE_FLOOR)
    } else {
        var
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeKind {
    MeanField,
    JointGaussian,
    Chained,
}

impl SchemeKind {
    pub fn name(self) -> &'static str {
        match self {
            SchemeKind::MeanField => "mean_field",
            SchemeKind::JointGaussian => "joint_gaussian",
            SchemeKind::Chained => "chained",
        }
    }

    pub fn all() -> [SchemeKind; 3] {
        [SchemeKind::MeanField, SchemeKind::JointGaussian, SchemeKind::Chained]
    }
}

impl std::fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for SchemeKind {
    type Err = DgpError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean_field" | "meanfield" | "dsvi" => Ok(SchemeKind::MeanField),
            "joint_gaussian" | "joint" => Ok(SchemeKind::JointGaussian),
            "chained" | "chained_inducing" => Ok(SchemeKind::Chained),
            other => Err(DgpError::Config(format!("unknown scheme '{other}'"))),
        }
    }
}

/// Per-layer function draws over a set of query inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    pub scheme: SchemeKind,
    pub rng: RngHandle,
    pub inputs: Vec<f64>,
    /// `layers[l]` is `n_samples × inputs.len()`.
    pub layers: Vec<Mat>,
}

impl SampleSet {
    pub fn n_samples(&self) -> usize {
        self.layers.first().map_or(0, |m| m.rows())
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer_mean(&self, layer: usize) -> Vec<f64> {
        let m = &self.layers[layer];
        let n = m.rows() as f64;
        (0..m.cols()).map(|j| (0..m.rows()).map(|s| m[(s, j)]).sum::<f64>() / n).collect()
    }

    /// Unbiased per-input sample variance.
    pub fn layer_variance(&self, layer: usize) -> Vec<f64> {
        let m = &self.layers[layer];
        let n = m.rows() as f64;
        self.layer_mean(layer)
            .iter()
            .enumerate()
            .map(|(j, mu)| (0..m.rows()).map(|s| (m[(s, j)] - mu).powi(2)).sum::<f64>() / (n - 1.0))
            .collect()
    }
}
