//! Gaussian-process regression with a squared-exponential ARD kernel.
//!
//! Hyperparameters are selected by exhaustive log-grid search over marginal
//! likelihood: one shared length-scale multiplier on standardized inputs
//! (which yields per-dimension raw-space length scales), a signal variance
//! and a noise variance, seven grid values each. Derivative-free and
//! deterministic, which is all the sub-models here need at their few dozen
//! observations.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

/// Observation noise can never drop below this; duplicated inputs with
/// conflicting targets therefore stay factorizable.
pub const JITTER_FLOOR: f64 = 1e-9;

const GRID: usize = 7;

#[derive(Debug, Error)]
pub enum GpError {
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("non-finite value in training data")]
    NonFinite,
    #[error("input dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("covariance not positive definite even after jitter escalation")]
    NotPositiveDefinite,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GpHyperparams {
    /// Raw-space length scale per input dimension.
    pub length_scales: Vec<f64>,
    pub signal_variance: f64,
    pub noise_variance: f64,
}

/// Fitted posterior. Immutable; `predict`/`sample_joint` are safe to call
/// concurrently with independent rng streams.
#[derive(Debug, Clone)]
pub struct GpPosterior {
    xs: Vec<Vec<f64>>,
    hyper: GpHyperparams,
    prior_mean: f64,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
}

fn sq_dist(a: &[f64], b: &[f64], length_scales: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .zip(length_scales)
        .map(|((x, y), ls)| {
            let d = (x - y) / ls;
            d * d
        })
        .sum()
}

fn kernel(hyper: &GpHyperparams, a: &[f64], b: &[f64]) -> f64 {
    hyper.signal_variance * (-0.5 * sq_dist(a, b, &hyper.length_scales)).exp()
}

fn check_inputs(xs: &[Vec<f64>], ys: &[f64]) -> Result<usize, GpError> {
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(GpError::EmptyTrainingSet);
    }
    let dim = xs[0].len();
    for x in xs {
        if x.len() != dim {
            return Err(GpError::DimensionMismatch {
                expected: dim,
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(GpError::NonFinite);
        }
    }
    if ys.iter().any(|v| !v.is_finite()) {
        return Err(GpError::NonFinite);
    }
    Ok(dim)
}

fn geomspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| lo * (hi / lo).powf(i as f64 / (n - 1) as f64))
        .collect()
}

/// Fits a GP, selecting hyperparameters by log marginal likelihood over the
/// fixed grid. The prior mean is pinned at the target mean.
pub fn fit(xs: &[Vec<f64>], ys: &[f64]) -> Result<GpPosterior, GpError> {
    let dim = check_inputs(xs, ys)?;
    let n = xs.len();

    let mut x_std = vec![0.0; dim];
    let mut x_mean = vec![0.0; dim];
    for d in 0..dim {
        let mean = xs.iter().map(|x| x[d]).sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x[d] - mean).powi(2)).sum::<f64>() / n as f64;
        x_mean[d] = mean;
        x_std[d] = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
    }
    let y_mean = ys.iter().sum::<f64>() / n as f64;
    let y_var = (ys.iter().map(|y| (y - y_mean).powi(2)).sum::<f64>() / n as f64).max(1e-12);
    let y_centered = DVector::from_iterator(n, ys.iter().map(|y| y - y_mean));

    // Squared distances in standardized space, shared across the grid.
    let std_xs: Vec<Vec<f64>> = xs
        .iter()
        .map(|x| {
            x.iter()
                .zip(&x_mean)
                .zip(&x_std)
                .map(|((v, m), s)| (v - m) / s)
                .collect()
        })
        .collect();
    let ones = vec![1.0; dim];
    let base = DMatrix::from_fn(n, n, |i, j| sq_dist(&std_xs[i], &std_xs[j], &ones));

    let ls_grid = geomspace(0.1, 10.0, GRID);
    let signal_grid: Vec<f64> = geomspace(0.1, 10.0, GRID)
        .iter()
        .map(|g| g * y_var)
        .collect();
    let noise_grid: Vec<f64> = geomspace(1e-8, 1.0, GRID)
        .iter()
        .map(|g| (g * y_var).max(JITTER_FLOOR))
        .collect();

    let mut best: Option<(f64, f64, f64, f64)> = None; // (lml, ls, signal, noise)
    for &ls in &ls_grid {
        let corr = base.map(|d2| (-0.5 * d2 / (ls * ls)).exp());
        for &signal in &signal_grid {
            for &noise in &noise_grid {
                let mut k = &corr * signal;
                for i in 0..n {
                    k[(i, i)] += noise;
                }
                let Some(chol) = Cholesky::new(k) else {
                    continue;
                };
                let alpha = chol.solve(&y_centered);
                let logdet: f64 = (0..n).map(|i| chol.l_dirty()[(i, i)].ln()).sum::<f64>() * 2.0;
                let lml = -0.5 * y_centered.dot(&alpha)
                    - 0.5 * logdet
                    - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
                if best.is_none_or(|(b, ..)| lml > b) {
                    best = Some((lml, ls, signal, noise));
                }
            }
        }
    }
    let (_, ls, signal, noise) = best.ok_or(GpError::NotPositiveDefinite)?;

    let hyper = GpHyperparams {
        length_scales: x_std.iter().map(|s| ls * s).collect(),
        signal_variance: signal,
        noise_variance: noise,
    };
    fit_with(xs, ys, hyper, None)
}

/// Fits with fixed hyperparameters; `prior_mean` defaults to the target mean.
pub fn fit_with(
    xs: &[Vec<f64>],
    ys: &[f64],
    hyper: GpHyperparams,
    prior_mean: Option<f64>,
) -> Result<GpPosterior, GpError> {
    let dim = check_inputs(xs, ys)?;
    if hyper.length_scales.len() != dim {
        return Err(GpError::DimensionMismatch {
            expected: dim,
            got: hyper.length_scales.len(),
        });
    }
    let n = xs.len();
    let prior_mean = prior_mean.unwrap_or_else(|| ys.iter().sum::<f64>() / n as f64);
    let y_centered = DVector::from_iterator(n, ys.iter().map(|y| y - prior_mean));
    let noise = hyper.noise_variance.max(JITTER_FLOOR);

    let base = DMatrix::from_fn(n, n, |i, j| kernel(&hyper, &xs[i], &xs[j]));
    let scale = hyper.signal_variance.max(1e-12);
    for extra in [0.0, 1e-9, 1e-7, 1e-5, 1e-3] {
        let mut k = base.clone();
        for i in 0..n {
            k[(i, i)] += noise + extra * scale;
        }
        if let Some(chol) = Cholesky::new(k) {
            let alpha = chol.solve(&y_centered);
            return Ok(GpPosterior {
                xs: xs.to_vec(),
                hyper,
                prior_mean,
                chol,
                alpha,
            });
        }
    }
    Err(GpError::NotPositiveDefinite)
}

impl GpPosterior {
    pub fn hyperparams(&self) -> &GpHyperparams {
        &self.hyper
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.xs[0].len()
    }

    pub fn prior_mean(&self) -> f64 {
        self.prior_mean
    }

    fn check_query(&self, x: &[f64]) -> Result<(), GpError> {
        if x.len() != self.dim() {
            return Err(GpError::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Posterior mean and (latent) variance at `x`.
    pub fn predict(&self, x: &[f64]) -> Result<(f64, f64), GpError> {
        self.check_query(x)?;
        let n = self.xs.len();
        let k_star = DVector::from_iterator(n, self.xs.iter().map(|xi| kernel(&self.hyper, xi, x)));
        let mean = self.prior_mean + k_star.dot(&self.alpha);
        let w = self.chol.solve(&k_star);
        let var = (self.hyper.signal_variance - k_star.dot(&w)).max(0.0);
        Ok((mean, var))
    }

    /// One draw from the joint predictive distribution at `points`. A
    /// non-positive-definite predictive covariance is repaired by jitter
    /// escalation up to `1e-4` (relative to the signal variance).
    pub fn sample_joint<R: Rng + ?Sized>(
        &self,
        points: &[Vec<f64>],
        rng: &mut R,
    ) -> Result<Vec<f64>, GpError> {
        Ok(self.joint_sampler(points)?.draw(rng))
    }

    /// Precomputes the joint predictive mean and covariance factor at
    /// `points` so repeated draws cost only a matrix-vector product.
    pub fn joint_sampler(&self, points: &[Vec<f64>]) -> Result<JointSampler, GpError> {
        if points.is_empty() {
            return Err(GpError::EmptyTrainingSet);
        }
        for p in points {
            self.check_query(p)?;
        }
        let n = self.xs.len();
        let m = points.len();
        let k_star = DMatrix::from_fn(n, m, |i, j| kernel(&self.hyper, &self.xs[i], &points[j]));
        let w = self.chol.solve(&k_star);
        let cross = k_star.transpose() * w;
        let prior = DMatrix::from_fn(m, m, |i, j| kernel(&self.hyper, &points[i], &points[j]));
        let mut cov = prior - cross;
        // Symmetrize against round-off before factorizing.
        for i in 0..m {
            for j in 0..i {
                let v = 0.5 * (cov[(i, j)] + cov[(j, i)]);
                cov[(i, j)] = v;
                cov[(j, i)] = v;
            }
        }
        let mean = DVector::from_iterator(
            m,
            (0..m).map(|j| self.prior_mean + k_star.column(j).dot(&self.alpha)),
        );

        let scale = self.hyper.signal_variance.max(1e-12);
        for extra in [0.0, 1e-10, 1e-8, 1e-6, 1e-4] {
            let mut c = cov.clone();
            for i in 0..m {
                c[(i, i)] = (c[(i, i)] + extra * scale).max(extra * scale);
            }
            if let Some(chol) = Cholesky::new(c) {
                return Ok(JointSampler {
                    mean,
                    factor: chol.l(),
                });
            }
        }
        Err(GpError::NotPositiveDefinite)
    }
}

/// Cached joint predictive distribution at a fixed set of points.
#[derive(Debug, Clone)]
pub struct JointSampler {
    mean: DVector<f64>,
    factor: DMatrix<f64>,
}

impl JointSampler {
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let m = self.mean.len();
        let z = DVector::from_iterator(m, (0..m).map(|_| rng.sample(StandardNormal)));
        let draw = &self.factor * z;
        (0..m).map(|i| self.mean[i] + draw[i]).collect()
    }

    pub fn means(&self) -> Vec<f64> {
        self.mean.iter().copied().collect()
    }
}
