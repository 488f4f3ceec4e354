//! Target distributions exposed through their (possibly unnormalised)
//! log-density and score, plus the Stein operator applied to explicit
//! vector fields.
//!
//! Nothing in the sampler uses a normalising constant. Built-in families
//! report theirs through [`Target::log_normalizer`] so that diagnostics can
//! turn relative KL values into absolute ones.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng;

/// A differentiable target density `p` on `R^d`.
///
/// The "distantly dissipative" tail condition under which KSD controls weak
/// convergence is assumed for user-supplied targets, never checked.
pub trait Target: Send + Sync {
    fn dim(&self) -> usize;

    /// `log p(x)` up to an additive constant.
    fn log_density(&self, x: &[f64]) -> f64;

    /// Writes `grad_x log p(x)` into `out`.
    fn score_into(&self, x: &[f64], out: &mut [f64]);

    fn score(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        self.score_into(x, &mut out);
        out
    }

    /// `log Z` such that `log_density(x) - log Z` is the normalised log density.
    fn log_normalizer(&self) -> Option<f64> {
        None
    }

    /// Lipschitz constant of the score, when known exactly.
    fn score_lipschitz(&self) -> Option<f64> {
        None
    }

    /// One exact draw, for families that have a sampler.
    fn sample(&self, _rng: &mut dyn RngCore) -> Option<Vec<f64>> {
        None
    }
}

/// Multivariate normal `N(mean, cov)`.
#[derive(Clone, Debug)]
pub struct GaussianTarget {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    precision: DMatrix<f64>,
    log_det: f64,
}

impl GaussianTarget {
    pub fn new(mean: Vec<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return Err(Error::Contract("gaussian target needs dimension >= 1".into()));
        }
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::Dimension {
                expected: d,
                found: cov.nrows(),
            });
        }
        if (&cov - cov.transpose()).amax() > 1e-12 * cov.amax().max(1.0) {
            return Err(Error::NotSpd("covariance is not symmetric".into()));
        }
        if cov.iter().any(|v| !v.is_finite()) {
            return Err(Error::NotSpd("covariance has non-finite entries".into()));
        }
        let chol = Cholesky::new(cov.clone())
            .ok_or_else(|| Error::NotSpd("Cholesky factorisation failed".into()))?;
        let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let precision = chol.inverse();
        Ok(Self {
            mean: DVector::from_vec(mean),
            cov,
            chol,
            precision,
            log_det,
        })
    }

    /// `N(mean, cov)` from a dense row-major covariance buffer.
    pub fn from_row_major(mean: Vec<f64>, cov: &[f64]) -> Result<Self> {
        let d = mean.len();
        if cov.len() != d * d {
            return Err(Error::Dimension {
                expected: d * d,
                found: cov.len(),
            });
        }
        Self::new(mean, DMatrix::from_row_slice(d, d, cov))
    }

    pub fn standard(dim: usize) -> Self {
        Self::new(vec![0.0; dim], DMatrix::identity(dim, dim)).expect("identity is SPD")
    }

    /// One-dimensional `N(mean, variance)`.
    pub fn scalar(mean: f64, variance: f64) -> Result<Self> {
        Self::new(vec![mean], DMatrix::from_element(1, 1, variance))
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    pub fn log_det_cov(&self) -> f64 {
        self.log_det
    }

    fn quad_form(&self, x: &[f64]) -> f64 {
        let d = self.mean.len();
        let mut q = 0.0;
        for a in 0..d {
            let ra = x[a] - self.mean[a];
            for b in 0..d {
                q += ra * self.precision[(a, b)] * (x[b] - self.mean[b]);
            }
        }
        q
    }

    /// Normalised log density.
    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        self.log_density(x) - self.log_normalizer().unwrap_or(0.0)
    }
}

impl Target for GaussianTarget {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        -0.5 * self.quad_form(x)
    }

    fn score_into(&self, x: &[f64], out: &mut [f64]) {
        let d = self.mean.len();
        for a in 0..d {
            let mut s = 0.0;
            for b in 0..d {
                s -= self.precision[(a, b)] * (x[b] - self.mean[b]);
            }
            out[a] = s;
        }
    }

    fn log_normalizer(&self) -> Option<f64> {
        Some(0.5 * (self.dim() as f64 * (2.0 * PI).ln() + self.log_det))
    }

    fn score_lipschitz(&self) -> Option<f64> {
        // spectral norm of the precision
        let eig = self.precision.clone().symmetric_eigenvalues();
        Some(eig.iter().fold(0.0f64, |m, v| m.max(v.abs())))
    }

    fn sample(&self, rng: &mut dyn RngCore) -> Option<Vec<f64>> {
        let d = self.dim();
        let z = DVector::from_iterator(d, (0..d).map(|_| StandardNormal.sample(&mut *rng)));
        let x = &self.mean + self.chol.l_dirty().lower_triangle() * z;
        Some(x.iter().copied().collect())
    }
}

/// Finite mixture of Gaussians with simplex weights.
#[derive(Clone, Debug)]
pub struct MixtureTarget {
    weights: Vec<f64>,
    components: Vec<GaussianTarget>,
    // log w_k - log Z_k + log Z_shared, so that log_density is a logsumexp of
    // component log densities up to the shared (2 pi)^{d/2} factor.
    log_coeffs: Vec<f64>,
}

impl MixtureTarget {
    pub fn new(weights: Vec<f64>, components: Vec<GaussianTarget>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::Empty("mixture components"));
        }
        if weights.len() != components.len() {
            return Err(Error::Dimension {
                expected: components.len(),
                found: weights.len(),
            });
        }
        if weights.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::Contract("mixture weights must be positive".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Contract(format!("mixture weights sum to {total}, not 1")));
        }
        let d = components[0].dim();
        if let Some(c) = components.iter().find(|c| c.dim() != d) {
            return Err(Error::Dimension {
                expected: d,
                found: c.dim(),
            });
        }
        let log_coeffs = weights
            .iter()
            .zip(&components)
            .map(|(w, c)| w.ln() - 0.5 * c.log_det_cov())
            .collect();
        Ok(Self {
            weights,
            components,
            log_coeffs,
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &[GaussianTarget] {
        &self.components
    }

    fn component_logits(&self, x: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .zip(&self.log_coeffs)
            .map(|(c, lc)| lc + c.log_density(x))
            .collect()
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl Target for MixtureTarget {
    fn dim(&self) -> usize {
        self.components[0].dim()
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        log_sum_exp(&self.component_logits(x))
    }

    fn score_into(&self, x: &[f64], out: &mut [f64]) {
        let logits = self.component_logits(x);
        let lse = log_sum_exp(&logits);
        out.iter_mut().for_each(|v| *v = 0.0);
        let mut buf = vec![0.0; x.len()];
        for (c, l) in self.components.iter().zip(&logits) {
            let r = (l - lse).exp();
            if r == 0.0 {
                continue;
            }
            c.score_into(x, &mut buf);
            for (o, s) in out.iter_mut().zip(&buf) {
                *o += r * s;
            }
        }
    }

    fn log_normalizer(&self) -> Option<f64> {
        Some(0.5 * self.dim() as f64 * (2.0 * PI).ln())
    }

    fn sample(&self, rng: &mut dyn RngCore) -> Option<Vec<f64>> {
        let u: f64 = rand::Rng::random(&mut *rng);
        let mut acc = 0.0;
        let mut chosen = self.components.len() - 1;
        for (k, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                chosen = k;
                break;
            }
        }
        self.components[chosen].sample(rng)
    }
}

/// Built-in target families, as constructed from configuration.
#[derive(Clone, Debug)]
pub enum TargetModel {
    Gaussian(GaussianTarget),
    Mixture(MixtureTarget),
}

impl TargetModel {
    fn inner(&self) -> &dyn Target {
        match self {
            TargetModel::Gaussian(g) => g,
            TargetModel::Mixture(m) => m,
        }
    }
}

impl Target for TargetModel {
    fn dim(&self) -> usize {
        self.inner().dim()
    }
    fn log_density(&self, x: &[f64]) -> f64 {
        self.inner().log_density(x)
    }
    fn score_into(&self, x: &[f64], out: &mut [f64]) {
        self.inner().score_into(x, out)
    }
    fn log_normalizer(&self) -> Option<f64> {
        self.inner().log_normalizer()
    }
    fn score_lipschitz(&self) -> Option<f64> {
        self.inner().score_lipschitz()
    }
    fn sample(&self, rng: &mut dyn RngCore) -> Option<Vec<f64>> {
        self.inner().sample(rng)
    }
}

/// `(S_p phi)(x) = grad log p(x) . phi(x) + div phi(x)`.
pub fn stein_operator_apply<F, D>(target: &dyn Target, phi: F, div_phi: D, x: &[f64]) -> Result<f64>
where
    F: Fn(&[f64]) -> Vec<f64>,
    D: Fn(&[f64]) -> f64,
{
    if x.len() != target.dim() {
        return Err(Error::Dimension {
            expected: target.dim(),
            found: x.len(),
        });
    }
    let field = phi(x);
    if field.len() != x.len() {
        return Err(Error::Dimension {
            expected: x.len(),
            found: field.len(),
        });
    }
    let score = target.score(x);
    let drift: f64 = score.iter().zip(&field).map(|(s, f)| s * f).sum();
    Ok(drift + div_phi(x))
}

/// Monte Carlo mean of `S_p phi` over `n_samples` draws from `sampler`.
///
/// Under exact draws from `p` this is a zero-mean estimate with standard
/// error `O(1 / sqrt(n_samples))`.
pub fn stein_identity_residual<F, D, S>(
    target: &dyn Target,
    phi: F,
    div_phi: D,
    mut sampler: S,
    n_samples: usize,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&[f64]) -> Vec<f64>,
    D: Fn(&[f64]) -> f64,
    S: FnMut(&mut rng::Stream) -> Vec<f64>,
{
    if n_samples == 0 {
        return Err(Error::Empty("stein identity sample"));
    }
    let mut stream = rng::stream(seed, "stein-identity");
    let mut total = 0.0;
    for _ in 0..n_samples {
        let x = sampler(&mut stream);
        total += stein_operator_apply(target, &phi, &div_phi, &x)?;
    }
    Ok(total / n_samples as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fd_score(t: &dyn Target, x: &[f64], step: f64) -> Vec<f64> {
        (0..x.len())
            .map(|a| {
                let mut xp = x.to_vec();
                let mut xm = x.to_vec();
                xp[a] += step;
                xm[a] -= step;
                (t.log_density(&xp) - t.log_density(&xm)) / (2.0 * step)
            })
            .collect()
    }

    fn correlated_gaussian() -> GaussianTarget {
        GaussianTarget::from_row_major(vec![0.5, -1.0], &[2.0, 0.6, 0.6, 1.0]).unwrap()
    }

    #[test]
    fn gaussian_score_is_analytic_and_matches_fd() {
        let g = correlated_gaussian();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let x = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let s = g.score(&x);
            let r = DVector::from_row_slice(&[x[0] - 0.5, x[1] + 1.0]);
            let expected = -(g.precision() * r);
            for a in 0..2 {
                assert_relative_eq!(s[a], expected[a], epsilon = 1e-14);
            }
            let fd = fd_score(&g, &x, 1e-5);
            for a in 0..2 {
                assert!((fd[a] - s[a]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn gaussian_normaliser_matches_closed_form() {
        let g = GaussianTarget::scalar(1.0, 4.0).unwrap();
        let x = [2.5];
        let expected = -0.5 * (2.0 * PI * 4.0).ln() - (1.5f64 * 1.5) / 8.0;
        assert_relative_eq!(g.log_pdf(&x), expected, epsilon = 1e-14);
        assert_eq!(g.score_lipschitz(), Some(0.25));
    }

    #[test]
    fn singular_covariance_rejected() {
        let err = GaussianTarget::from_row_major(vec![0.0, 0.0], &[1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(err, Err(Error::NotSpd(_))));
        let err = GaussianTarget::from_row_major(vec![0.0], &[-1.0]);
        assert!(matches!(err, Err(Error::NotSpd(_))));
    }

    #[test]
    fn mixture_score_matches_finite_differences() {
        let m = MixtureTarget::new(
            vec![0.3, 0.7],
            vec![
                GaussianTarget::from_row_major(vec![-2.0, 0.0], &[1.0, 0.2, 0.2, 0.5]).unwrap(),
                GaussianTarget::from_row_major(vec![2.0, 1.0], &[0.7, 0.0, 0.0, 1.5]).unwrap(),
            ],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let x = [rng.random_range(-4.0..4.0), rng.random_range(-3.0..3.0)];
            let s = m.score(&x);
            let fd = fd_score(&m, &x, 1e-5);
            for a in 0..2 {
                assert!((fd[a] - s[a]).abs() < 1e-5, "{:?} vs {:?}", fd, s);
            }
        }
    }

    #[test]
    fn mixture_score_deep_in_a_basin_is_the_component_score() {
        let a = GaussianTarget::scalar(-10.0, 1.0).unwrap();
        let b = GaussianTarget::scalar(10.0, 1.0).unwrap();
        let m = MixtureTarget::new(vec![0.5, 0.5], vec![a.clone(), b]).unwrap();
        for x in [-11.0, -10.0, -8.5, -4.0] {
            assert!((m.score(&[x])[0] - a.score(&[x])[0]).abs() < 1e-6);
        }
    }

    #[test]
    fn mixture_weights_validated() {
        let c = || GaussianTarget::standard(1);
        assert!(MixtureTarget::new(vec![0.5, 0.6], vec![c(), c()]).is_err());
        assert!(MixtureTarget::new(vec![1.5, -0.5], vec![c(), c()]).is_err());
        assert!(MixtureTarget::new(vec![1.0], vec![c(), c()]).is_err());
    }

    #[test]
    fn mixture_density_is_normalised() {
        let m = MixtureTarget::new(
            vec![0.25, 0.75],
            vec![
                GaussianTarget::scalar(-1.0, 0.5).unwrap(),
                GaussianTarget::scalar(2.0, 2.0).unwrap(),
            ],
        )
        .unwrap();
        let lz = m.log_normalizer().unwrap();
        let h = 1e-3;
        let total: f64 = (-12_000..12_000)
            .map(|i| (m.log_density(&[i as f64 * h]) - lz).exp() * h)
            .sum();
        assert_relative_eq!(total, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn stein_operator_examples() {
        let p = GaussianTarget::standard(2);
        let phi = |x: &[f64]| x.to_vec();
        let div = |x: &[f64]| x.len() as f64;
        assert_eq!(stein_operator_apply(&p, phi, div, &[0.0, 0.0]).unwrap(), 2.0);
        assert_eq!(stein_operator_apply(&p, phi, div, &[1.0, 1.0]).unwrap(), 0.0);
        let zero = |x: &[f64]| vec![0.0; x.len()];
        assert_eq!(stein_operator_apply(&p, zero, |_| 0.0, &[0.3, -4.0]).unwrap(), 0.0);
        assert!(stein_operator_apply(&p, phi, div, &[1.0]).is_err());
    }

    #[test]
    fn stein_identity_residual_examples() {
        let p = GaussianTarget::standard(2);
        let phi = |x: &[f64]| x.to_vec();
        let div = |x: &[f64]| x.len() as f64;
        let exact = |r: &mut rng::Stream| p.sample(r).unwrap();
        let res = stein_identity_residual(&p, phi, div, exact, 100_000, 11).unwrap();
        assert!(res.abs() < 0.05, "residual {res}");

        let origin = |_: &mut rng::Stream| vec![0.0, 0.0];
        assert_eq!(stein_identity_residual(&p, phi, div, origin, 1, 0).unwrap(), 2.0);

        let zero = |x: &[f64]| vec![0.0; x.len()];
        let res = stein_identity_residual(&p, zero, |_| 0.0, exact, 100, 3).unwrap();
        assert_eq!(res, 0.0);
    }

    #[test]
    fn stein_identity_residual_shrinks_like_inverse_root_n() {
        let p = GaussianTarget::standard(1);
        let phi = |x: &[f64]| x.to_vec();
        let div = |_: &[f64]| 1.0;
        let spread = |n: usize| {
            let vals: Vec<f64> = (0..50u64)
                .map(|seed| {
                    stein_identity_residual(&p, phi, div, |r| p.sample(r).unwrap(), n, seed).unwrap()
                })
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64).sqrt()
        };
        let ratio = spread(500) / spread(2000);
        assert!(ratio > 2.0 / 1.5 && ratio < 2.0 * 1.5, "std ratio {ratio}");
    }
}
