//! Positive-definite kernels with the closed-form derivatives used by the
//! SVGD drift and by the Stein kernel.
//!
//! With `r = x - y` and `u = |r|^2`:
//!
//! | family | `k(x, y)`                   |
//! |--------|-----------------------------|
//! | RBF    | `exp(-u / (2 h^2))`         |
//! | IMQ    | `(c + u / h^2)^beta`        |
//! | Linear | `x . y + 1`                 |
//!
//! Derivatives are analytic for every family; finite differences only appear
//! in the tests.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::points::{dot, sq_dist, Points};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    Rbf,
    Imq,
    Linear,
}

impl KernelFamily {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "rbf" => Some(Self::Rbf),
            "imq" => Some(Self::Imq),
            "linear" => Some(Self::Linear),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Rbf => "rbf",
            Self::Imq => "imq",
            Self::Linear => "linear",
        }
    }
}

pub const DEFAULT_IMQ_OFFSET: f64 = 1.0;
pub const DEFAULT_IMQ_EXPONENT: f64 = -0.5;

/// A fully resolved kernel: family plus a concrete bandwidth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    /// Length-scale `h`, in the units of the particle coordinates.
    pub bandwidth: f64,
    /// `beta` in `(-1, 0)`; IMQ only.
    pub imq_exponent: f64,
    /// `c > 0`; IMQ only.
    pub imq_offset: f64,
}

impl KernelSpec {
    pub fn rbf(bandwidth: f64) -> Result<Self> {
        Self {
            family: KernelFamily::Rbf,
            bandwidth,
            imq_exponent: DEFAULT_IMQ_EXPONENT,
            imq_offset: DEFAULT_IMQ_OFFSET,
        }
        .validated()
    }

    pub fn imq(bandwidth: f64, offset: f64, exponent: f64) -> Result<Self> {
        Self {
            family: KernelFamily::Imq,
            bandwidth,
            imq_exponent: exponent,
            imq_offset: offset,
        }
        .validated()
    }

    pub fn linear() -> Self {
        Self {
            family: KernelFamily::Linear,
            bandwidth: 1.0,
            imq_exponent: DEFAULT_IMQ_EXPONENT,
            imq_offset: DEFAULT_IMQ_OFFSET,
        }
    }

    pub fn validated(self) -> Result<Self> {
        if !(self.bandwidth > 0.0 && self.bandwidth.is_finite()) {
            return Err(Error::config(
                "kernel.bandwidth",
                format!("bandwidth must be a positive finite number, got {}", self.bandwidth),
            ));
        }
        if self.family == KernelFamily::Imq {
            if !(self.imq_exponent > -1.0 && self.imq_exponent < 0.0) {
                return Err(Error::config(
                    "kernel.imq_exponent",
                    format!("exponent must lie in (-1, 0), got {}", self.imq_exponent),
                ));
            }
            if !(self.imq_offset > 0.0 && self.imq_offset.is_finite()) {
                return Err(Error::config(
                    "kernel.imq_offset",
                    format!("offset must be positive, got {}", self.imq_offset),
                ));
            }
        }
        Ok(self)
    }

    pub fn with_bandwidth(self, bandwidth: f64) -> Result<Self> {
        Self { bandwidth, ..self }.validated()
    }

    /// Whether `k(x, y)` depends on `x - y` only.
    pub fn is_translation_invariant(&self) -> bool {
        self.family != KernelFamily::Linear
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        check_dims(x, y)?;
        Ok(self.value(x, y))
    }

    /// `grad_x k(x, y)`.
    pub fn grad_x(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        check_dims(x, y)?;
        let mut gx = vec![0.0; x.len()];
        let mut gy = vec![0.0; x.len()];
        self.pair(x, y, &mut gx, &mut gy);
        Ok(gx)
    }

    /// `grad_y k(x, y)`.
    pub fn grad_y(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        check_dims(x, y)?;
        let mut gx = vec![0.0; x.len()];
        let mut gy = vec![0.0; x.len()];
        self.pair(x, y, &mut gx, &mut gy);
        Ok(gy)
    }

    /// `sum_i d/dx_i d/dy_i k(x, y)`.
    pub fn trace_grad_xy(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        check_dims(x, y)?;
        let mut gx = vec![0.0; x.len()];
        let mut gy = vec![0.0; x.len()];
        Ok(self.pair(x, y, &mut gx, &mut gy).1)
    }

    /// Matrix `M[a][b] = d/dx_a d/dy_b k(x, y)`.
    pub fn mixed_grad(&self, x: &[f64], y: &[f64]) -> Result<DMatrix<f64>> {
        check_dims(x, y)?;
        let d = x.len();
        let mut out = DMatrix::zeros(d, d);
        self.mixed_into(x, y, out.as_mut_slice());
        Ok(out)
    }

    /// `sup_x k(x, x)`; `None` when unbounded.
    pub fn self_value_sup(&self) -> Option<f64> {
        match self.family {
            KernelFamily::Rbf => Some(1.0),
            KernelFamily::Imq => Some(self.imq_offset.powf(self.imq_exponent)),
            KernelFamily::Linear => None,
        }
    }

    /// `sup_x sum_i d/dx_i d/dx'_i k(x, x')|_{x = x'}` in dimension `dim`.
    pub fn self_trace_sup(&self, dim: usize) -> Option<f64> {
        let d = dim as f64;
        let h2 = self.bandwidth * self.bandwidth;
        match self.family {
            KernelFamily::Rbf => Some(d / h2),
            KernelFamily::Imq => Some(
                -2.0 * self.imq_exponent * d * self.imq_offset.powf(self.imq_exponent - 1.0) / h2,
            ),
            KernelFamily::Linear => Some(d),
        }
    }

    pub(crate) fn value(&self, x: &[f64], y: &[f64]) -> f64 {
        let h2 = self.bandwidth * self.bandwidth;
        match self.family {
            KernelFamily::Rbf => (-sq_dist(x, y) / (2.0 * h2)).exp(),
            KernelFamily::Imq => (self.imq_offset + sq_dist(x, y) / h2).powf(self.imq_exponent),
            KernelFamily::Linear => dot(x, y) + 1.0,
        }
    }

    /// Fills `grad_x k(x, y)` and `grad_y k(x, y)`; returns `(k, trace of the
    /// mixed second derivative)`. No dimension checks.
    #[inline]
    pub(crate) fn pair(&self, x: &[f64], y: &[f64], gx: &mut [f64], gy: &mut [f64]) -> (f64, f64) {
        let d = x.len() as f64;
        let h2 = self.bandwidth * self.bandwidth;
        match self.family {
            KernelFamily::Rbf => {
                let u = sq_dist(x, y);
                let k = (-u / (2.0 * h2)).exp();
                let c = k / h2;
                for a in 0..x.len() {
                    let r = x[a] - y[a];
                    gx[a] = -c * r;
                    gy[a] = c * r;
                }
                (k, (d / h2 - u / (h2 * h2)) * k)
            }
            KernelFamily::Imq => {
                let u = sq_dist(x, y) / h2;
                let beta = self.imq_exponent;
                let base = self.imq_offset + u;
                let pm1 = base.powf(beta - 1.0);
                let k = pm1 * base;
                let c = 2.0 * beta * pm1 / h2;
                for a in 0..x.len() {
                    let r = x[a] - y[a];
                    gx[a] = c * r;
                    gy[a] = -c * r;
                }
                let trace = -2.0 * beta / h2 * (d * pm1 + 2.0 * (beta - 1.0) * u * pm1 / base);
                (k, trace)
            }
            KernelFamily::Linear => {
                gx.copy_from_slice(y);
                gy.copy_from_slice(x);
                (dot(x, y) + 1.0, d)
            }
        }
    }

    /// Fills `grad_y k(x, y)` and the column-major mixed second derivative
    /// in one kernel evaluation.
    #[inline]
    pub(crate) fn grad_y_and_mixed(&self, x: &[f64], y: &[f64], gy: &mut [f64], mixed: &mut [f64]) {
        let d = x.len();
        let h2 = self.bandwidth * self.bandwidth;
        match self.family {
            KernelFamily::Rbf => {
                let k = (-sq_dist(x, y) / (2.0 * h2)).exp();
                let c = k / h2;
                for b in 0..d {
                    let rb = x[b] - y[b];
                    gy[b] = c * rb;
                    for a in 0..d {
                        let delta = if a == b { c } else { 0.0 };
                        mixed[a + b * d] = delta - (x[a] - y[a]) * rb * c / h2;
                    }
                }
            }
            KernelFamily::Imq | KernelFamily::Linear => {
                let mut gx = vec![0.0; d];
                self.pair(x, y, &mut gx, gy);
                self.mixed_into(x, y, mixed);
            }
        }
    }

    /// Column-major `d x d` buffer of `d/dx_a d/dy_b k(x, y)`.
    pub(crate) fn mixed_into(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        let d = x.len();
        let h2 = self.bandwidth * self.bandwidth;
        match self.family {
            KernelFamily::Rbf => {
                let k = (-sq_dist(x, y) / (2.0 * h2)).exp();
                for b in 0..d {
                    for a in 0..d {
                        let delta = if a == b { 1.0 / h2 } else { 0.0 };
                        out[a + b * d] = (delta - (x[a] - y[a]) * (x[b] - y[b]) / (h2 * h2)) * k;
                    }
                }
            }
            KernelFamily::Imq => {
                let base = self.imq_offset + sq_dist(x, y) / h2;
                let beta = self.imq_exponent;
                let pm1 = base.powf(beta - 1.0);
                let pm2 = pm1 / base;
                for b in 0..d {
                    for a in 0..d {
                        let delta = if a == b { pm1 } else { 0.0 };
                        let cross = 2.0 * (beta - 1.0) * (x[a] - y[a]) * (x[b] - y[b]) / h2 * pm2;
                        out[a + b * d] = -2.0 * beta / h2 * (delta + cross);
                    }
                }
            }
            KernelFamily::Linear => {
                for b in 0..d {
                    for a in 0..d {
                        out[a + b * d] = if a == b { 1.0 } else { 0.0 };
                    }
                }
            }
        }
    }
}

fn check_dims(x: &[f64], y: &[f64]) -> Result<()> {
    if x.is_empty() {
        return Err(Error::Contract("points must have dimension >= 1".into()));
    }
    if x.len() != y.len() {
        return Err(Error::Dimension {
            expected: x.len(),
            found: y.len(),
        });
    }
    Ok(())
}

/// Bandwidth rule: a fixed length-scale or the median heuristic recomputed
/// on every call to [`KernelConfig::resolve`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Bandwidth {
    Fixed(f64),
    Median,
}

/// Kernel family and bandwidth rule, as read from configuration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub family: KernelFamily,
    pub bandwidth: Bandwidth,
    pub imq_offset: f64,
    pub imq_exponent: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            family: KernelFamily::Rbf,
            bandwidth: Bandwidth::Median,
            imq_offset: DEFAULT_IMQ_OFFSET,
            imq_exponent: DEFAULT_IMQ_EXPONENT,
        }
    }
}

impl KernelConfig {
    pub fn fixed(spec: KernelSpec) -> Self {
        Self {
            family: spec.family,
            bandwidth: Bandwidth::Fixed(spec.bandwidth),
            imq_offset: spec.imq_offset,
            imq_exponent: spec.imq_exponent,
        }
    }

    pub fn median(family: KernelFamily) -> Self {
        Self {
            family,
            ..Self::default()
        }
    }

    /// Concrete kernel for the given particle positions.
    pub fn resolve(&self, positions: &Points) -> Result<KernelSpec> {
        let bandwidth = match (self.family, self.bandwidth) {
            (KernelFamily::Linear, _) => 1.0,
            (_, Bandwidth::Fixed(h)) => h,
            (_, Bandwidth::Median) => median_bandwidth(positions)?,
        };
        KernelSpec {
            family: self.family,
            bandwidth,
            imq_exponent: self.imq_exponent,
            imq_offset: self.imq_offset,
        }
        .validated()
    }
}

/// Median pairwise Euclidean distance divided by `sqrt(2 ln(n + 1))`.
pub fn median_bandwidth(points: &Points) -> Result<f64> {
    let n = points.len();
    if n < 2 {
        return Err(Error::Degenerate(
            "median bandwidth needs at least two points".into(),
        ));
    }
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            dists.push(sq_dist(points.row(i), points.row(j)).sqrt());
        }
    }
    let m = dists.len();
    let mid = m / 2;
    let (_, upper, _) = dists.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *upper;
    let median = if m % 2 == 1 {
        upper
    } else {
        let lower = dists[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    };
    if !(median > 0.0) {
        return Err(Error::Degenerate(
            "median pairwise distance is zero (points coincide)".into(),
        ));
    }
    Ok(median / (2.0 * ((n + 1) as f64).ln()).sqrt())
}
