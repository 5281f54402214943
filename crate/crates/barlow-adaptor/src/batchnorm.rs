//! Batch normalization: the whitening step applied to projections before the
//! cross-domain correlation is computed.
//!
//! Forward uses biased per-batch variance (divide by B) and a small epsilon
//! stabilizer. The functions here are pure: the cache needed for the backward
//! pass and for running-statistics updates is a returned value, never shared
//! state. Running statistics themselves live in [`BatchNormState`] and are
//! only touched by the explicit [`BatchNormState::update_running`] call.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{Matrix, Scalar};

pub const DEFAULT_EPS: f64 = 1e-5;
/// Weight of the current batch statistic in the running-average update.
pub const DEFAULT_MOMENTUM: f64 = 0.1;

/// Learnable scale/shift plus running statistics for evaluation mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormState<T: Scalar> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub eps: T,
    /// Batch-statistic weight for running updates: `running = (1-m)*running + m*batch`.
    pub momentum: T,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

impl<T: Scalar> BatchNormState<T> {
    /// Fresh state: gamma 1, beta 0, running mean 0, running var 1.
    pub fn new(dim: usize) -> Self {
        BatchNormState {
            gamma: vec![T::one(); dim],
            beta: vec![T::zero(); dim],
            eps: T::from_f64(DEFAULT_EPS),
            momentum: T::from_f64(DEFAULT_MOMENTUM),
            running_mean: vec![T::zero(); dim],
            running_var: vec![T::one(); dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    /// Fold the batch statistics of a forward cache into the running averages.
    pub fn update_running(&mut self, cache: &BatchNormCache<T>) {
        let m = self.momentum;
        let keep = T::one() - m;
        for j in 0..self.dim() {
            self.running_mean[j] = keep * self.running_mean[j] + m * cache.mean[j];
            self.running_var[j] = keep * self.running_var[j] + m * cache.var[j];
        }
    }
}

/// Values retained by the forward pass for the exact backward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache<T: Scalar> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    /// Per-column 1/sqrt(var + eps).
    pub inv_std: Vec<T>,
    /// Normalized values before gamma/beta.
    pub normalized: Matrix<T>,
    pub gamma: Vec<T>,
}

/// Gradients produced by [`batch_normalize_backward`].
#[derive(Debug, Clone)]
pub struct BatchNormGrads<T: Scalar> {
    pub grad_x: Matrix<T>,
    pub grad_gamma: Vec<T>,
    pub grad_beta: Vec<T>,
}

/// Whiten each column of `x` over the batch: `y = gamma * (x - mean)/sqrt(var + eps) + beta`.
///
/// Variance is biased (divided by B). Requires B >= 2; a single row has no
/// batch variance to whiten with.
pub fn batch_normalize<T: Scalar>(
    x: &Matrix<T>,
    state: &BatchNormState<T>,
) -> Result<(Matrix<T>, BatchNormCache<T>)> {
    let (b, p) = x.shape();
    if b < 2 {
        return Err(Error::BatchTooSmall {
            what: "batch_normalize",
            got: b,
        });
    }
    if state.dim() != p {
        return Err(Error::DimensionMismatch {
            op: "batch_normalize",
            left_rows: b,
            left_cols: p,
            right_rows: 1,
            right_cols: state.dim(),
        });
    }

    let n = T::from_f64(b as f64);
    let mean = x.col_means();
    let mut var = vec![T::zero(); p];
    for i in 0..b {
        for (j, v) in var.iter_mut().enumerate() {
            let d = x.get(i, j) - mean[j];
            *v += d * d;
        }
    }
    for v in var.iter_mut() {
        *v /= n;
    }

    let inv_std: Vec<T> = var.iter().map(|&v| (v + state.eps).sqrt().recip()).collect();
    let normalized = Matrix::from_fn(b, p, |i, j| (x.get(i, j) - mean[j]) * inv_std[j]);
    let y = Matrix::from_fn(b, p, |i, j| {
        state.gamma[j] * normalized.get(i, j) + state.beta[j]
    });

    let cache = BatchNormCache {
        mean,
        var,
        inv_std,
        normalized,
        gamma: state.gamma.clone(),
    };
    Ok((y, cache))
}

/// Normalize with frozen running statistics; no cache, usable concurrently.
pub fn batch_normalize_eval<T: Scalar>(x: &Matrix<T>, state: &BatchNormState<T>) -> Matrix<T> {
    let (b, p) = x.shape();
    assert_eq!(state.dim(), p, "batch-norm dim mismatch");
    Matrix::from_fn(b, p, |i, j| {
        let inv = (state.running_var[j] + state.eps).sqrt().recip();
        state.gamma[j] * (x.get(i, j) - state.running_mean[j]) * inv + state.beta[j]
    })
}

/// Exact analytic gradient of [`batch_normalize`] w.r.t. its input, gamma and
/// beta, given the upstream gradient on the output.
pub fn batch_normalize_backward<T: Scalar>(
    grad_y: &Matrix<T>,
    cache: &BatchNormCache<T>,
) -> Result<BatchNormGrads<T>> {
    let (b, p) = cache.normalized.shape();
    if grad_y.shape() != (b, p) {
        return Err(Error::DimensionMismatch {
            op: "batch_normalize_backward",
            left_rows: grad_y.rows(),
            left_cols: grad_y.cols(),
            right_rows: b,
            right_cols: p,
        });
    }

    let n = T::from_f64(b as f64);
    let mut grad_gamma = vec![T::zero(); p];
    let mut grad_beta = vec![T::zero(); p];
    for i in 0..b {
        for j in 0..p {
            grad_gamma[j] += grad_y.get(i, j) * cache.normalized.get(i, j);
            grad_beta[j] += grad_y.get(i, j);
        }
    }

    // grad through xhat: per column,
    //   dx = (inv_std / B) * (B*dxhat - sum(dxhat) - xhat * sum(dxhat*xhat))
    let mut sum_dxhat = vec![T::zero(); p];
    let mut sum_dxhat_xhat = vec![T::zero(); p];
    for i in 0..b {
        for j in 0..p {
            let dxhat = grad_y.get(i, j) * cache.gamma[j];
            sum_dxhat[j] += dxhat;
            sum_dxhat_xhat[j] += dxhat * cache.normalized.get(i, j);
        }
    }
    let grad_x = Matrix::from_fn(b, p, |i, j| {
        let dxhat = grad_y.get(i, j) * cache.gamma[j];
        cache.inv_std[j] / n
            * (n * dxhat - sum_dxhat[j] - cache.normalized.get(i, j) * sum_dxhat_xhat[j])
    });

    Ok(BatchNormGrads {
        grad_x,
        grad_gamma,
        grad_beta,
    })
}
