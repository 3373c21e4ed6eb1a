//! Joint Gaussian over all layers' inducing outputs with a Markov chain
//! structure across layers.
//!
//! The chain is parametrised as `u_1 = m_1 + C_11 ε_1` and
//! `u_l = A_l u_{l-1} + b_l + C_l ε_l`, which keeps the joint covariance PSD
//! and its precision block-tridiagonal.
//!
//! With the inducing outputs integrated out, `f_1, …, f_L` at one input follow
//! a linear-Gaussian state-space model whose hidden state is `u_l`. The
//! analytic estimator runs the corresponding filter: after drawing `f_{l-1}`
//! the belief over `u_{l-1}` is updated, then pushed through the chain to give
//! the predictive `N(ū_l, P̄_l)` from which `f_l` is drawn. For two layers this
//! is exactly the classical two-step marginalisation of `u_1` and `u_2`.

use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::error::{DgpError, Result};
use crate::estimate::{floored, gaussian_log_density, BaseNoise, Dataset, ElboEstimate, ElboParts, OpCounts, SampleSet, SchemeKind};
use crate::layers::{moments_with_projection, projections, symmetrise, Conditioner, DgpModelSpec};
use crate::linalg::{chol_with_schedule, dot, lower_mul, norm_sq, Cholesky, JitterSchedule, Mat};
use crate::math::{kl_from_factors, sample_mvn, MvnMoments, RngHandle};
use crate::meanfield::{conditioners, InducingFactor, MeanFieldState};

/// `u_l | u_{l-1} ~ N(A u_{l-1} + b, C Cᵀ)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainLink<T = f64> {
    pub transition: Mat<T>,
    pub offset: Vec<T>,
    /// Lower triangular with a positive diagonal.
    pub chol: Mat<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainGaussianState<T = f64> {
    /// `q(u_1)`.
    pub first: InducingFactor<T>,
    /// One link per layer after the first.
    pub links: Vec<ChainLink<T>>,
}

/// Marginal means and the first two block diagonals of the joint covariance.
#[derive(Clone, Debug, PartialEq)]
pub struct JointBlocks<T = f64> {
    pub means: Vec<Vec<T>>,
    /// `S_ll`.
    pub diagonal: Vec<Mat<T>>,
    /// `lower[k] = S_{k+1,k}` (zero-based layers).
    pub lower: Vec<Mat<T>>,
}

impl ChainGaussianState<f64> {
    /// Mean-field initialisation with zero transitions.
    pub fn init(model: &DgpModelSpec) -> Result<Self> {
        Ok(Self::from_mean_field(&MeanFieldState::init(model)?))
    }

    /// The independent-layers state with the same marginals as `mf`.
    pub fn from_mean_field(mf: &MeanFieldState) -> Self {
        let mut layers = mf.layers.iter();
        let first = layers.next().cloned().expect("at least one layer");
        let links = layers
            .map(|q| ChainLink {
                transition: Mat::zeros(q.mean.len(), q.mean.len()),
                offset: q.mean.clone(),
                chol: q.chol.clone(),
            })
            .collect();
        ChainGaussianState { first, links }
    }

    /// Chain parameters reproducing given marginal means, diagonal blocks and
    /// first off-diagonal blocks.
    pub fn from_blocks(means: &[Vec<f64>], diagonal: &[Mat], lower: &[Mat]) -> Result<Self> {
        if means.is_empty() || diagonal.len() != means.len() || lower.len() + 1 != means.len() {
            return Err(DgpError::InvalidInput("inconsistent block counts".into()));
        }
        let first = InducingFactor::from_moments(means[0].clone(), &diagonal[0])?;
        let mut links = Vec::with_capacity(lower.len());
        for l in 1..means.len() {
            let prev = chol_with_schedule(&diagonal[l - 1], &JitterSchedule::default())?;
            // A = S_{l,l-1} S_{l-1,l-1}⁻¹
            let transition = prev.solve_mat(&lower[l - 1].transpose()).transpose();
            let offset: Vec<f64> = means[l]
                .iter()
                .zip(transition.matvec(&means[l - 1]))
                .map(|(m, am)| m - am)
                .collect();
            let mut innov = diagonal[l].sub(&transition.matmul(&lower[l - 1].transpose()));
            symmetrise(&mut innov);
            let chol = chol_with_schedule(&innov, &JitterSchedule::default())?.into_factor();
            links.push(ChainLink { transition, offset, chol });
        }
        Ok(ChainGaussianState { first, links })
    }

    pub fn num_layers(&self) -> usize {
        self.links.len() + 1
    }

    pub fn validate(&self, model: &DgpModelSpec) -> Result<()> {
        if self.num_layers() != model.num_layers() {
            return Err(DgpError::DimensionMismatch {
                what: "joint state layer count",
                expected: model.num_layers(),
                got: self.num_layers(),
            });
        }
        self.first.validate(model.layers[0].num_inducing(), "first-layer factor")?;
        for (l, link) in self.links.iter().enumerate() {
            let m = model.layers[l + 1].num_inducing();
            let m_prev = model.layers[l].num_inducing();
            if link.transition.rows() != m || link.transition.cols() != m_prev {
                return Err(DgpError::DimensionMismatch {
                    what: "transition shape",
                    expected: m * m_prev,
                    got: link.transition.rows() * link.transition.cols(),
                });
            }
            InducingFactor { mean: link.offset.clone(), chol: link.chol.clone() }.validate(m, "chain link")?;
            if !link.transition.is_finite() {
                return Err(DgpError::InvalidInput("transition has non-finite entries".into()));
            }
        }
        Ok(())
    }

    /// Dense joint moments over `(u_1, …, u_L)`, materialising every block.
    pub fn joint_moments(&self) -> MvnMoments {
        let b = assemble_blocks(self);
        let sizes: Vec<usize> = b.means.iter().map(Vec::len).collect();
        let offsets: Vec<usize> = sizes.iter().scan(0, |acc, &s| Some(std::mem::replace(acc, *acc + s))).collect();
        let total: usize = sizes.iter().sum();
        let mut cov = Mat::zeros(total, total);
        for l in 0..sizes.len() {
            for k in 0..=l {
                // S_{l,k} = A_l ⋯ A_{k+1} S_kk
                let mut s = b.diagonal[k].clone();
                for j in (k + 1)..=l {
                    s = self.links[j - 1].transition.matmul(&s);
                }
                for i in 0..sizes[l] {
                    for j in 0..sizes[k] {
                        cov[(offsets[l] + i, offsets[k] + j)] = s[(i, j)];
                        cov[(offsets[k] + j, offsets[l] + i)] = s[(i, j)];
                    }
                }
            }
        }
        MvnMoments { mean: b.means.concat(), covariance: cov }
    }
}

pub(crate) fn assemble_blocks<T: Real>(state: &ChainGaussianState<T>) -> JointBlocks<T> {
    let mut means = vec![state.first.mean.clone()];
    let mut diagonal = vec![state.first.chol.outer_self()];
    let mut lower = Vec::with_capacity(state.links.len());
    for link in &state.links {
        let prev_mean = means.last().expect("non-empty");
        let prev_cov = diagonal.last().expect("non-empty");
        let mean: Vec<T> = link
            .transition
            .matvec(prev_mean)
            .into_iter()
            .zip(&link.offset)
            .map(|(a, &b)| a + b)
            .collect();
        let cross = link.transition.matmul(prev_cov);
        let cov = cross.matmul(&link.transition.transpose()).add(&link.chol.outer_self());
        means.push(mean);
        diagonal.push(cov);
        lower.push(cross);
    }
    JointBlocks { means, diagonal, lower }
}

/// Marginal means with `S_ll` and `S_{l,l-1}`; further blocks stay implicit.
pub fn assemble_joint_blocks(state: &ChainGaussianState) -> JointBlocks {
    let mut b = assemble_blocks(state);
    for s in &mut b.diagonal {
        symmetrise(s);
    }
    b
}

/// Ancestral draws through the chain; row `s` is `(u_1, …, u_L)` concatenated.
pub fn sample_u_joint(state: &ChainGaussianState, n_samples: usize, rng: RngHandle) -> Result<Mat> {
    let sizes: Vec<usize> = std::iter::once(state.first.mean.len()).chain(state.links.iter().map(|l| l.offset.len())).collect();
    let width: usize = sizes.iter().sum();
    let noise = BaseNoise::draw(n_samples, width, rng, false);
    let mut out = Mat::zeros(n_samples, width);
    for s in 0..n_samples {
        let u = draw_chain(state, noise.row(s));
        for (j, v) in u.concat().into_iter().enumerate() {
            out[(s, j)] = v;
        }
    }
    Ok(out)
}

fn draw_chain<T: Real>(state: &ChainGaussianState<T>, eps: &[f64]) -> Vec<Vec<T>> {
    let m1 = state.first.mean.len();
    let e: Vec<T> = eps[..m1].iter().map(|&v| T::cst(v)).collect();
    let mut u = vec![add(&state.first.mean, &lower_mul(&state.first.chol, &e))];
    let mut offset = m1;
    for link in &state.links {
        let m = link.offset.len();
        let e: Vec<T> = eps[offset..offset + m].iter().map(|&v| T::cst(v)).collect();
        offset += m;
        let mean = add(&link.transition.matvec(u.last().expect("non-empty")), &link.offset);
        u.push(add(&mean, &lower_mul(&link.chol, &e)));
    }
    u
}

fn add<T: Real>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| x + y).collect()
}

/// `KL(q(u_1..u_L) ‖ Π_l p(u_l))`, one term per layer, without forming the
/// joint covariance.
pub(crate) fn kl_joint<T: Real>(conds: &[Conditioner<T>], state: &ChainGaussianState<T>, blocks: &JointBlocks<T>) -> Vec<T> {
    let mut out = vec![kl_from_factors(&state.first.mean, &state.first.chol, &conds[0].prior_mean, &conds[0].chol)];
    for (k, link) in state.links.iter().enumerate() {
        let l = k + 1;
        let cond = &conds[l];
        let m = cond.size();
        let trace = cond.chol.solve_mat(&blocks.diagonal[l]).trace();
        let diff = cond.centre(&blocks.means[l]);
        let maha = norm_sq(&cond.chol.solve_lower(&diff));
        let mut log_det_c = T::zero();
        for i in 0..m {
            log_det_c += link.chol[(i, i)].ln();
        }
        out.push((trace + maha - m as f64 + cond.chol.log_det()) * 0.5 - log_det_c);
    }
    out
}

/// Per-point filter through the layers; writes each layer's draw to `out`.
fn filter_point<T: Real>(
    conds: &[Conditioner<T>],
    state: &ChainGaussianState<T>,
    blocks: &JointBlocks<T>,
    x: f64,
    eps: impl Fn(usize) -> f64,
    out: &mut [T],
) -> Result<()> {
    let n_layers = conds.len();
    let mut f = T::cst(x);
    let mut filtered: Vec<T> = Vec::new();
    // Rank-one downdates r with P̄_l = S_ll − Σ r rᵀ.
    let mut downdates: Vec<Vec<T>> = Vec::new();
    for (l, cond) in conds.iter().enumerate() {
        let predicted = if l == 0 {
            state.first.mean.clone()
        } else {
            let link = &state.links[l - 1];
            for r in downdates.iter_mut() {
                *r = link.transition.matvec(r);
            }
            add(&link.transition.matvec(&filtered), &link.offset)
        };
        let p = cond.project(f);
        let mut w = blocks.diagonal[l].matvec(&p.alpha);
        for r in &downdates {
            let c = dot(r, &p.alpha);
            for (wi, &ri) in w.iter_mut().zip(r) {
                *wi -= ri * c;
            }
        }
        let var = p.residual_variance() + dot(&p.alpha, &w);
        let mean = p.mean_given(&cond.centre(&predicted));
        if !mean.val().is_finite() || !var.val().is_finite() {
            return Err(DgpError::NonFinite {
                layer: l + 1,
                detail: format!("marginalised moments degenerated at input {x}"),
            });
        }
        let sd = floored(var).sqrt();
        let e = eps(l);
        f = mean + sd * e;
        out[l] = f;
        if l + 1 < n_layers {
            let gain = T::cst(e) / sd;
            filtered = predicted.iter().zip(&w).map(|(&u, &wi)| u + wi * gain).collect();
            downdates.push(w.iter().map(|&wi| wi / sd).collect());
        }
    }
    Ok(())
}

pub(crate) fn noise_width_analytic(n_layers: usize, n_points: usize) -> usize {
    n_layers * n_points
}

pub(crate) fn noise_width_sampled(model: &DgpModelSpec, n_points: usize, n_inner: usize) -> usize {
    let total_m: usize = model.layers.iter().map(|l| l.num_inducing()).sum();
    total_m + n_inner * model.num_layers() * n_points
}

pub(crate) fn elbo_parts_jg_analytic<T: Real>(
    model: &DgpModelSpec<T>,
    state: &ChainGaussianState<T>,
    data: &Dataset,
    noise: &BaseNoise,
) -> Result<ElboParts<T>> {
    let n_layers = model.num_layers();
    let n = data.len();
    noise.require_width(noise_width_analytic(n_layers, n))?;
    let conds = conditioners(model)?;
    let blocks = assemble_blocks(state);
    let mut out = vec![T::zero(); n_layers];
    let mut ell_per_sample = Vec::with_capacity(noise.n_samples());
    for s in 0..noise.n_samples() {
        let row = noise.row(s);
        let mut ell = T::zero();
        for (j, (&x, &y)) in data.x.iter().zip(&data.y).enumerate() {
            filter_point(&conds, state, &blocks, x, |l| row[l * n + j], &mut out)?;
            ell += gaussian_log_density(y, out[n_layers - 1], model.noise_variance);
        }
        ell_per_sample.push(ell);
    }
    Ok(ElboParts {
        ell_per_sample,
        kl_per_layer: kl_joint(&conds, state, &blocks),
        n_inner: None,
        counts: OpCounts {
            factorisations: n_layers,
            scalar_conditionals: n_layers * n * noise.n_samples(),
            resamples: 0,
        },
    })
}

pub(crate) fn elbo_parts_jg_sampled<T: Real>(
    model: &DgpModelSpec<T>,
    state: &ChainGaussianState<T>,
    data: &Dataset,
    noise: &BaseNoise,
    n_inner: usize,
) -> Result<ElboParts<T>> {
    let n_layers = model.num_layers();
    let n = data.len();
    if n_inner == 0 {
        return Err(DgpError::InvalidInput("n_inner must be positive".into()));
    }
    noise.require_width(noise_width_sampled(&model.values(), n, n_inner))?;
    let conds = conditioners(model)?;
    let blocks = assemble_blocks(state);
    let total_m: usize = conds.iter().map(Conditioner::size).sum();
    let mut ell_per_sample = Vec::with_capacity(noise.n_samples());
    for s in 0..noise.n_samples() {
        let row = noise.row(s);
        let u = draw_chain(state, &row[..total_m]);
        let centred: Vec<Vec<T>> = conds.iter().zip(&u).map(|(c, u)| c.centre(u)).collect();
        let inner = &row[total_m..];
        let mut ell = T::zero();
        for i in 0..n_inner {
            let eps = &inner[i * n_layers * n..(i + 1) * n_layers * n];
            for (j, (&x, &y)) in data.x.iter().zip(&data.y).enumerate() {
                let mut f = T::cst(x);
                for (l, cond) in conds.iter().enumerate() {
                    let p = cond.project(f);
                    let mean = p.mean_given(&centred[l]);
                    let var = p.residual_variance();
                    if !mean.val().is_finite() || !var.val().is_finite() {
                        return Err(DgpError::NonFinite {
                            layer: l + 1,
                            detail: format!("conditional moments degenerated at input {x}"),
                        });
                    }
                    f = mean + floored(var).sqrt() * eps[l * n + j];
                }
                ell += gaussian_log_density(y, f, model.noise_variance);
            }
        }
        ell_per_sample.push(ell / n_inner as f64);
    }
    Ok(ElboParts {
        ell_per_sample,
        kl_per_layer: kl_joint(&conds, state, &blocks),
        n_inner: Some(n_inner),
        counts: OpCounts {
            factorisations: n_layers,
            scalar_conditionals: n_layers * n * n_inner * noise.n_samples(),
            resamples: 0,
        },
    })
}

fn finish(parts: ElboParts<f64>) -> Result<ElboEstimate> {
    let est = parts.estimate();
    if !est.value.is_finite() {
        let layer = parts.kl_per_layer.iter().position(|k| !k.is_finite()).map_or(0, |l| l + 1);
        return Err(DgpError::NonFinite { layer, detail: "ELBO is not finite".into() });
    }
    Ok(est)
}

fn check(model: &DgpModelSpec, state: &ChainGaussianState, data: &Dataset) -> Result<()> {
    model.validate()?;
    state.validate(model)?;
    data.validate()
}

/// Nested estimator: `n_outer` joint draws of the inducing outputs, each
/// followed by `n_inner` passes through the conditionals.
pub fn elbo_jg_sampled(
    model: &DgpModelSpec,
    state: &ChainGaussianState,
    data: &Dataset,
    n_outer: usize,
    n_inner: usize,
    rng: RngHandle,
) -> Result<ElboEstimate> {
    check(model, state, data)?;
    let noise = BaseNoise::draw(n_outer, noise_width_sampled(model, data.len(), n_inner), rng, false);
    finish(elbo_parts_jg_sampled(model, state, data, &noise, n_inner)?)
}

/// Estimator with the inducing outputs integrated out analytically.
pub fn elbo_jg_analytic(
    model: &DgpModelSpec,
    state: &ChainGaussianState,
    data: &Dataset,
    n_samples: usize,
    rng: RngHandle,
) -> Result<ElboEstimate> {
    let noise = BaseNoise::draw(n_samples, noise_width_analytic(model.num_layers(), data.len()), rng, false);
    elbo_jg_analytic_with_noise(model, state, data, &noise)
}

pub fn elbo_jg_analytic_with_noise(model: &DgpModelSpec, state: &ChainGaussianState, data: &Dataset, noise: &BaseNoise) -> Result<ElboEstimate> {
    check(model, state, data)?;
    finish(elbo_parts_jg_analytic(model, state, data, noise)?)
}

/// Per-point draws of every layer with the inducing outputs integrated out.
pub fn sample_layers_jg(
    model: &DgpModelSpec,
    state: &ChainGaussianState,
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
    let noise = BaseNoise::draw(n_samples, noise_width_analytic(n_layers, n), rng, false);
    let conds = conditioners(model)?;
    let blocks = assemble_blocks(state);
    let mut layers = vec![Mat::zeros(n_samples, n); n_layers];
    let mut out = vec![0.0; n_layers];
    for s in 0..n_samples {
        let row = noise.row(s);
        for (j, &x) in query.iter().enumerate() {
            filter_point(&conds, state, &blocks, x, |l| row[l * n + j], &mut out)?;
            for l in 0..n_layers {
                layers[l][(s, j)] = out[l];
            }
        }
    }
    Ok(SampleSet { scheme: SchemeKind::JointGaussian, rng, inputs: query.to_vec(), layers })
}

/// Full-covariance moments of one layer given the realised previous layers,
/// plus the cached quantities the next layer needs.
#[derive(Clone, Debug)]
pub struct ChainStep {
    /// Zero-based layer index.
    pub layer: usize,
    pub inputs: Vec<f64>,
    pub moments: MvnMoments,
    chol: Cholesky,
    predicted_mean: Vec<f64>,
    predicted_cov: Mat,
    alpha: Mat,
}

impl ChainStep {
    /// Predictive moments of the layer's inducing outputs given earlier layers.
    pub fn inducing_moments(&self) -> (&[f64], &Mat) {
        (&self.predicted_mean, &self.predicted_cov)
    }
}

/// `q(f_l | f_{l-1}, …, f_1)` at `inputs = f_{l-1}` (or `x` for the first
/// layer). `previous` is the step computed for layer `l-1`, whose draw is
/// `inputs`; its Cholesky of `Σ̃_{l-1}` is reused.
pub fn marginalised_conditional_chain(
    model: &DgpModelSpec,
    state: &ChainGaussianState,
    layer: usize,
    inputs: &[f64],
    previous: Option<&ChainStep>,
) -> Result<ChainStep> {
    model.validate()?;
    state.validate(model)?;
    if layer >= model.num_layers() {
        return Err(DgpError::InvalidInput(format!("layer {layer} out of range")));
    }
    if inputs.iter().any(|v| !v.is_finite()) {
        return Err(DgpError::InvalidInput("layer inputs must be finite".into()));
    }
    let (predicted_mean, predicted_cov) = match (layer, previous) {
        (0, None) => (state.first.mean.clone(), state.first.covariance()),
        (0, Some(_)) => return Err(DgpError::InvalidInput("the first layer takes no previous step".into())),
        (_, None) => return Err(DgpError::InvalidInput(format!("layer {layer} needs the previous step"))),
        (_, Some(prev)) => {
            if prev.layer + 1 != layer {
                return Err(DgpError::InvalidInput(format!("previous step is for layer {}, expected {}", prev.layer, layer - 1)));
            }
            if prev.inputs.len() != inputs.len() {
                return Err(DgpError::DimensionMismatch {
                    what: "chain inputs",
                    expected: prev.inputs.len(),
                    got: inputs.len(),
                });
            }
            let innovation: Vec<f64> = inputs.iter().zip(&prev.moments.mean).map(|(f, m)| f - m).collect();
            // G = P̄ α, the covariance between u_{l-1} and f_{l-1}.
            let g = prev.predicted_cov.matmul(&prev.alpha);
            let filtered_mean = add(&prev.predicted_mean, &g.matvec(&prev.chol.solve(&innovation)));
            let gain = prev.chol.solve_mat(&g.transpose());
            let mut filtered_cov = prev.predicted_cov.sub(&g.matmul(&gain));
            symmetrise(&mut filtered_cov);
            let link = &state.links[layer - 1];
            let mean = add(&link.transition.matvec(&filtered_mean), &link.offset);
            let mut cov = link
                .transition
                .matmul(&filtered_cov)
                .matmul(&link.transition.transpose())
                .add(&link.chol.outer_self());
            symmetrise(&mut cov);
            (mean, cov)
        }
    };
    let cond = Conditioner::for_layer(&model.layers[layer])?;
    let moments = moments_with_projection(&cond, inputs, &predicted_mean, &predicted_cov);
    let chol = chol_with_schedule(&moments.covariance, &JitterSchedule::default())?;
    let alpha = projections(&cond, inputs).0;
    Ok(ChainStep {
        layer,
        inputs: inputs.to_vec(),
        moments,
        chol,
        predicted_mean,
        predicted_cov,
        alpha,
    })
}

/// Draws that are jointly Gaussian across the query points within each layer.
pub fn sample_layers_jg_full(
    model: &DgpModelSpec,
    state: &ChainGaussianState,
    query: &[f64],
    n_samples: usize,
    rng: RngHandle,
) -> Result<SampleSet> {
    let n_layers = model.num_layers();
    let n = query.len();
    let mut layers = vec![Mat::zeros(n_samples, n); n_layers];
    for s in 0..n_samples {
        let mut inputs = query.to_vec();
        let mut prev: Option<ChainStep> = None;
        for l in 0..n_layers {
            let step = marginalised_conditional_chain(model, state, l, &inputs, prev.as_ref())?;
            let draw = sample_mvn(&step.moments, 1, rng.derive(s as u64).derive(l as u64))?;
            inputs = draw.row(0).to_vec();
            for j in 0..n {
                layers[l][(s, j)] = inputs[j];
            }
            prev = Some(step);
        }
    }
    Ok(SampleSet { scheme: SchemeKind::JointGaussian, rng, inputs: query.to_vec(), layers })
}

/// Two-layer marginalisation written directly in terms of the joint blocks
/// `(m_1, m_2, S_11, S_21, S_22)`. Returns `q(f_1 | x)` and `q(f_2 | f_1)`.
#[allow(clippy::too_many_arguments)]
pub fn two_layer_marginals(
    model: &DgpModelSpec,
    m1: &[f64],
    m2: &[f64],
    s11: &Mat,
    s21: &Mat,
    s22: &Mat,
    x: &[f64],
    f1: &[f64],
) -> Result<(MvnMoments, MvnMoments)> {
    model.validate()?;
    if model.num_layers() != 2 {
        return Err(DgpError::InvalidInput("two_layer_marginals needs exactly two layers".into()));
    }
    let c1 = Conditioner::for_layer(&model.layers[0])?;
    let c2 = Conditioner::for_layer(&model.layers[1])?;
    let q1 = moments_with_projection(&c1, x, m1, s11);
    let chol1 = chol_with_schedule(&q1.covariance, &JitterSchedule::default())?;
    let a1 = projections(&c1, x).0;
    let innovation: Vec<f64> = f1.iter().zip(&q1.mean).map(|(f, m)| f - m).collect();
    // S21 α1 Σ̃1⁻¹
    let s21a1 = s21.matmul(&a1);
    let mean_u2 = add(m2, &s21a1.matvec(&chol1.solve(&innovation)));
    let mut cov_u2 = s22.sub(&s21a1.matmul(&chol1.solve_mat(&s21a1.transpose())));
    symmetrise(&mut cov_u2);
    let q2 = moments_with_projection(&c2, f1, &mean_u2, &cov_u2);
    Ok((q1, q2))
}
