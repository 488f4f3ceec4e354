//! Discrepancies between a particle measure and a target: the kernelized
//! Stein discrepancy (V- and U-statistics), the bounded-Lipschitz distance
//! between discrete measures, and KL estimators.

mod bl;

pub use bl::{bl_distance, WeightedPoints, MAX_BL_SUPPORT};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{KernelFamily, KernelSpec};
use crate::points::{compensated_sum, dot, Points};
use crate::svgd::{scores, ParticleEnsemble};
use crate::targets::{GaussianTarget, Target};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Estimator {
    VStat,
    UStat,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancyReport {
    /// KSD value. Non-negative for the V-statistic; the U-statistic reports
    /// the signed square root of its (possibly negative) estimate.
    pub value: f64,
    pub estimator: Estimator,
    pub n_points: usize,
}

fn check_dim(target: &dyn Target, dim: usize) -> Result<()> {
    if target.dim() != dim {
        return Err(Error::Dimension {
            expected: target.dim(),
            found: dim,
        });
    }
    Ok(())
}

#[inline]
fn stein_kernel_raw(
    spec: &KernelSpec,
    x: &[f64],
    sx: &[f64],
    y: &[f64],
    sy: &[f64],
    gx: &mut [f64],
    gy: &mut [f64],
) -> f64 {
    let (k, trace) = spec.pair(x, y, gx, gy);
    dot(sx, sy) * k + dot(sx, gy) + dot(sy, gx) + trace
}

/// Stein kernel
/// `kappa_p(x, y) = s(x).s(y) k + s(x).grad_y k + s(y).grad_x k + tr(grad_x grad_y k)`
/// with `s = grad log p`.
pub fn stein_kernel(target: &dyn Target, spec: &KernelSpec, x: &[f64], y: &[f64]) -> Result<f64> {
    check_dim(target, x.len())?;
    check_dim(target, y.len())?;
    let sx = target.score(x);
    let sy = target.score(y);
    let d = x.len();
    let (mut gx, mut gy) = (vec![0.0; d], vec![0.0; d]);
    Ok(stein_kernel_raw(spec, x, &sx, y, &sy, &mut gx, &mut gy))
}

/// `(sum_i kappa(x_i, x_i), sum_{i != j} kappa(x_i, x_j))`, summed in
/// canonical point order.
fn stein_sums(target: &dyn Target, spec: &KernelSpec, points: &Points) -> Result<(f64, f64)> {
    check_dim(target, points.dim())?;
    let sorted = points.gather(&points.canonical_order());
    let s = scores(target, &sorted);
    let n = sorted.len();
    let d = sorted.dim();
    let rows: Vec<(f64, f64)> = (0..n)
        .into_par_iter()
        .map(|r| {
            let (mut gx, mut gy) = (vec![0.0; d], vec![0.0; d]);
            let (x, sx) = (sorted.row(r), s.row(r));
            let diag = stein_kernel_raw(spec, x, sx, x, sx, &mut gx, &mut gy);
            let mut off = 0.0;
            if spec.family == KernelFamily::Rbf {
                // kappa = k [s_x.s_y + (s_x - s_y).(x - y) / h^2 + d / h^2 - |x - y|^2 / h^4]
                let inv_h2 = 1.0 / (spec.bandwidth * spec.bandwidth);
                let d_h2 = d as f64 * inv_h2;
                for c in r + 1..n {
                    let (y, sy) = (sorted.row(c), s.row(c));
                    let (mut u, mut ss, mut sr) = (0.0, 0.0, 0.0);
                    for a in 0..d {
                        let diff = x[a] - y[a];
                        u += diff * diff;
                        ss += sx[a] * sy[a];
                        sr += (sx[a] - sy[a]) * diff;
                    }
                    let k = (-0.5 * u * inv_h2).exp();
                    off += k * (ss + sr * inv_h2 + d_h2 - u * inv_h2 * inv_h2);
                }
            } else {
                for c in r + 1..n {
                    off += stein_kernel_raw(spec, x, sx, sorted.row(c), s.row(c), &mut gx, &mut gy);
                }
            }
            (diag, off)
        })
        .collect();
    let diag = compensated_sum(rows.iter().map(|r| r.0));
    let off = compensated_sum(rows.iter().map(|r| r.1));
    Ok((diag, 2.0 * off))
}

/// Squared V-statistic KSD, `(1/n^2) sum_{i,j} kappa(x_i, x_j)`.
pub fn ksd_vstat_squared(target: &dyn Target, spec: &KernelSpec, points: &Points) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::Empty("KSD point set"));
    }
    let (diag, off) = stein_sums(target, spec, points)?;
    let n = points.len() as f64;
    Ok((diag + off) / (n * n))
}

/// KSD of the empirical measure of `points`; this is exactly `S(mu_hat || p)`.
pub fn ksd_vstat(target: &dyn Target, spec: &KernelSpec, points: &Points) -> Result<DiscrepancyReport> {
    let sq = ksd_vstat_squared(target, spec, points)?;
    Ok(DiscrepancyReport {
        value: sq.max(0.0).sqrt(),
        estimator: Estimator::VStat,
        n_points: points.len(),
    })
}

/// Unbiased off-diagonal estimator, reported as a signed square root.
pub fn ksd_ustat(target: &dyn Target, spec: &KernelSpec, points: &Points) -> Result<DiscrepancyReport> {
    if points.len() < 2 {
        return Err(Error::Contract(format!(
            "U-statistic needs at least 2 points, got {}",
            points.len()
        )));
    }
    let (_, off) = stein_sums(target, spec, points)?;
    let n = points.len() as f64;
    let sq = off / (n * (n - 1.0));
    Ok(DiscrepancyReport {
        value: sq.signum() * sq.abs().sqrt(),
        estimator: Estimator::UStat,
        n_points: points.len(),
    })
}

/// `||phi*||^2_{H^d}` computed from the expansion
/// `phi*(.) = (1/n) sum_j [s(x_j) k(x_j, .) + grad_{x_j} k(x_j, .)]`
/// as a quadratic form in the Gram matrix of the kernel sections and their
/// derivative sections, one coordinate at a time.
///
/// Independent of the Stein-kernel double sum; the two agree to rounding.
pub fn phi_star_rkhs_norm_sq(target: &dyn Target, spec: &KernelSpec, points: &Points) -> Result<f64> {
    check_dim(target, points.dim())?;
    let n = points.len();
    if n == 0 {
        return Err(Error::Empty("point set"));
    }
    let d = points.dim();
    let s = scores(target, points);
    let mut total = 0.0;
    let mut gx = vec![0.0; d];
    let mut gy = vec![0.0; d];
    let mut mixed = vec![0.0; d * d];
    for a in 0..d {
        let mut gram = DMatrix::<f64>::zeros(2 * n, 2 * n);
        for j in 0..n {
            for l in 0..n {
                let (xj, xl) = (points.row(j), points.row(l));
                gram[(j, l)] = spec.value(xj, xl);
                // <k(x_j, .), d_a k(x_l, .)> = d/dx_a k(x_l, x_j)
                spec.pair(xl, xj, &mut gx, &mut gy);
                gram[(j, n + l)] = gx[a];
                spec.pair(xj, xl, &mut gx, &mut gy);
                gram[(n + j, l)] = gx[a];
                spec.mixed_into(xj, xl, &mut mixed);
                gram[(n + j, n + l)] = mixed[a + a * d];
            }
        }
        let coeffs = DVector::from_fn(2 * n, |i, _| {
            if i < n {
                s.row(i)[a] / n as f64
            } else {
                1.0 / n as f64
            }
        });
        total += coeffs.dot(&(&gram * &coeffs));
    }
    Ok(total)
}

/// `KL(N(mean0, cov0) || N(mean1, cov1))`; covariances are dense row-major.
pub fn kl_gaussian(mean0: &[f64], cov0: &[f64], mean1: &[f64], cov1: &[f64]) -> Result<f64> {
    if mean0.len() != mean1.len() {
        return Err(Error::Dimension {
            expected: mean0.len(),
            found: mean1.len(),
        });
    }
    let q = GaussianTarget::from_row_major(mean0.to_vec(), cov0)?;
    let p = GaussianTarget::from_row_major(mean1.to_vec(), cov1)?;
    Ok(kl_between(&q, &p))
}

/// `KL(q || p)` for two Gaussian targets of equal dimension.
pub fn kl_between(q: &GaussianTarget, p: &GaussianTarget) -> f64 {
    let d = q.dim() as f64;
    let prec1 = p.precision();
    let trace = (prec1 * q.cov()).trace();
    let diff = p.mean() - q.mean();
    let maha = diff.dot(&(prec1 * &diff));
    (0.5 * (trace + maha - d + p.log_det_cov() - q.log_det_cov())).max(0.0)
}

/// Particle estimate of `KL(mu || p)` from tracked log densities.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct KlEstimate {
    pub value: f64,
    /// Monte Carlo standard error of the particle average.
    pub std_error: f64,
    /// `true` when the target has no known normaliser and `value` is KL up
    /// to an additive constant.
    pub relative: bool,
}

/// Per-particle `log q(x_i) - log p(x_i)` with `p` normalised when possible.
pub(crate) fn log_ratios(ensemble: &ParticleEnsemble, target: &dyn Target) -> Result<Vec<f64>> {
    let logq = ensemble.tracked_log_q().ok_or(Error::NotTracking)?;
    check_dim(target, ensemble.dim())?;
    let offset = target.log_normalizer().unwrap_or(0.0);
    Ok(ensemble
        .positions()
        .rows()
        .zip(logq)
        .map(|(x, lq)| lq - target.log_density(x) + offset)
        .collect())
}

pub fn kl_tracked(ensemble: &ParticleEnsemble, target: &dyn Target) -> Result<KlEstimate> {
    let ratios = log_ratios(ensemble, target)?;
    let n = ratios.len() as f64;
    let mean = compensated_sum(ratios.iter().copied()) / n;
    let var = if ratios.len() > 1 {
        ratios.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Ok(KlEstimate {
        value: mean,
        std_error: (var / n).sqrt(),
        relative: target.log_normalizer().is_none(),
    })
}
