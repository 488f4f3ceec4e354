//! Discrete-time SVGD: the optimal drift `phi*`, its Jacobian, the spectral
//! step-size cap, and the particle update with exact log-density tracking.
//!
//! All particles are moved simultaneously against a snapshot of the pre-step
//! ensemble. Pairwise sums run in canonical (sorted) particle order with a
//! fixed block decomposition, so results are bitwise independent of both the
//! caller's indexing and the number of worker threads.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::discrepancy::{kl_tracked, ksd_vstat};
use crate::error::{Error, Result};
use crate::kernels::{KernelConfig, KernelFamily, KernelSpec};
use crate::points::Points;
use crate::targets::{GaussianTarget, Target};

/// Particle positions plus, optionally, the log density of the current
/// pushforward measure evaluated at each particle.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleEnsemble {
    positions: Points,
    tracked_log_q: Option<Vec<f64>>,
    iteration: usize,
}

impl ParticleEnsemble {
    pub fn new(positions: Points) -> Self {
        Self {
            positions,
            tracked_log_q: None,
            iteration: 0,
        }
    }

    /// Ensemble whose particles carry `log q0(x_i)` for a known initial density.
    pub fn with_tracking(positions: Points, log_q: Vec<f64>) -> Result<Self> {
        if log_q.len() != positions.len() {
            return Err(Error::Dimension {
                expected: positions.len(),
                found: log_q.len(),
            });
        }
        Ok(Self {
            positions,
            tracked_log_q: Some(log_q),
            iteration: 0,
        })
    }

    /// `n` i.i.d. draws from `init`; with `track`, each particle starts with
    /// its exact normalised log density under `init`.
    pub fn sample_gaussian(init: &GaussianTarget, n: usize, rng: &mut dyn RngCore, track: bool) -> Self {
        let d = init.dim();
        let mut data = Vec::with_capacity(n * d);
        let mut logq = Vec::with_capacity(n);
        for _ in 0..n {
            let x = init.sample(rng).expect("gaussian has a sampler");
            logq.push(init.log_pdf(&x));
            data.extend_from_slice(&x);
        }
        Self {
            positions: Points::new(d, data).expect("consistent dimension"),
            tracked_log_q: track.then_some(logq),
            iteration: 0,
        }
    }

    /// Deterministic initialisation on a regular grid over the box
    /// `[lo, hi]`: `m = ceil(n^(1/d))` nodes per axis, first `n` nodes in
    /// lexicographic order.
    pub fn grid(lo: &[f64], hi: &[f64], n: usize) -> Result<Self> {
        let d = lo.len();
        if d == 0 || hi.len() != d {
            return Err(Error::Dimension {
                expected: d,
                found: hi.len(),
            });
        }
        if n == 0 {
            return Err(Error::Empty("grid"));
        }
        let mut m = (n as f64).powf(1.0 / d as f64).ceil() as usize;
        while m.pow(d as u32) < n {
            m += 1;
        }
        let node = |a: usize, k: usize| {
            if m == 1 {
                0.5 * (lo[a] + hi[a])
            } else {
                lo[a] + (hi[a] - lo[a]) * k as f64 / (m - 1) as f64
            }
        };
        let mut data = Vec::with_capacity(n * d);
        for idx in 0..n {
            let mut rem = idx;
            let mut coords = vec![0.0; d];
            for a in (0..d).rev() {
                coords[a] = node(a, rem % m);
                rem /= m;
            }
            data.extend_from_slice(&coords);
        }
        Ok(Self::new(Points::new(d, data)?))
    }

    pub fn positions(&self) -> &Points {
        &self.positions
    }

    pub fn tracked_log_q(&self) -> Option<&[f64]> {
        self.tracked_log_q.as_deref()
    }

    pub fn is_tracking(&self) -> bool {
        self.tracked_log_q.is_some()
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.positions.dim()
    }

    pub(crate) fn from_parts(positions: Points, tracked_log_q: Option<Vec<f64>>, iteration: usize) -> Self {
        Self {
            positions,
            tracked_log_q,
            iteration,
        }
    }
}

/// Scores of every point, in point order.
pub(crate) fn scores(target: &dyn Target, points: &Points) -> Points {
    let d = points.dim();
    let mut out = Points::zeros(points.len(), d);
    out.as_mut_slice()
        .par_chunks_exact_mut(d)
        .zip(points.as_slice().par_chunks_exact(d))
        .for_each(|(s, x)| target.score_into(x, s));
    out
}

fn check_target_dim(target: &dyn Target, dim: usize) -> Result<()> {
    if target.dim() != dim {
        return Err(Error::Dimension {
            expected: target.dim(),
            found: dim,
        });
    }
    Ok(())
}

/// `phi*` evaluated at every particle, with its divergence.
#[derive(Clone, Debug, PartialEq)]
pub struct Drift {
    pub phi: Points,
    pub divergence: Vec<f64>,
}

const BLOCK_ROWS: usize = 32;
const BLOCKS_PER_WAVE: usize = 16;

/// `phi*(x_i)` and `div phi*(x_i)` for every particle of the ensemble.
///
/// Uses the symmetry of `k` so that each unordered pair is visited once.
pub fn ensemble_drift(target: &dyn Target, spec: &KernelSpec, positions: &Points) -> Result<Drift> {
    check_target_dim(target, positions.dim())?;
    let n = positions.len();
    if n == 0 {
        return Err(Error::Empty("ensemble"));
    }
    let d = positions.dim();
    let order = positions.canonical_order();
    let x = positions.gather(&order);
    let s = scores(target, &x);
    let width = d + 1;

    let n_blocks = n.div_ceil(BLOCK_ROWS);
    let mut total = vec![0.0; n * width];
    let block_ids: Vec<usize> = (0..n_blocks).collect();
    for wave in block_ids.chunks(BLOCKS_PER_WAVE) {
        let buffers: Vec<(usize, Vec<f64>)> = wave
            .par_iter()
            .map(|&b| {
                let start = b * BLOCK_ROWS;
                let end = (start + BLOCK_ROWS).min(n);
                let mut acc = vec![0.0; (n - start) * width];
                accumulate_block(spec, &x, &s, start, end, &mut acc);
                (start, acc)
            })
            .collect();
        for (start, acc) in buffers {
            for (t, v) in total[start * width..].iter_mut().zip(&acc) {
                *t += v;
            }
        }
    }

    let inv_n = 1.0 / n as f64;
    let mut phi = Points::zeros(n, d);
    let mut divergence = vec![0.0; n];
    for (r, &orig) in order.iter().enumerate() {
        let row = &total[r * width..(r + 1) * width];
        for (p, v) in phi.row_mut(orig).iter_mut().zip(&row[..d]) {
            *p = v * inv_n;
        }
        divergence[orig] = row[d] * inv_n;
    }
    Ok(Drift { phi, divergence })
}

/// Adds the contributions of rows `start..end` paired with every row `c >= r`
/// into `acc`, whose row `i` holds `(phi, div)` for sorted particle
/// `start + i`.
fn accumulate_block(spec: &KernelSpec, x: &Points, s: &Points, start: usize, end: usize, acc: &mut [f64]) {
    let n = x.len();
    let d = x.dim();
    let width = d + 1;
    if spec.family == KernelFamily::Rbf {
        let inv_h2 = 1.0 / (spec.bandwidth * spec.bandwidth);
        let inv_2h2 = 0.5 * inv_h2;
        let inv_h4 = inv_h2 * inv_h2;
        let d_h2 = d as f64 * inv_h2;
        if d == 1 {
            let (xs, ss) = (x.as_slice(), s.as_slice());
            for r in start..end {
                let (xr, sr) = (xs[r], ss[r]);
                let mut phi_r = sr;
                let mut div_r = d_h2;
                for c in r + 1..n {
                    let dx = xs[c] - xr;
                    let u = dx * dx;
                    let k = (-u * inv_2h2).exp();
                    let ck = k * inv_h2;
                    let tr = (d_h2 - u * inv_h4) * k;
                    let sc = ss[c];
                    phi_r += sc * k - ck * dx;
                    div_r += ck * sc * dx + tr;
                    let o = (c - start) * 2;
                    acc[o] += sr * k + ck * dx;
                    acc[o + 1] += tr - ck * sr * dx;
                }
                let o = (r - start) * 2;
                acc[o] += phi_r;
                acc[o + 1] += div_r;
            }
            return;
        }
        let mut phi_r = vec![0.0; d];
        let mut diff = vec![0.0; d];
        for r in start..end {
            let (xr, sr) = (x.row(r), s.row(r));
            phi_r.copy_from_slice(sr);
            let mut div_r = d_h2;
            for c in r + 1..n {
                let (xc, sc) = (x.row(c), s.row(c));
                let mut u = 0.0;
                for a in 0..d {
                    diff[a] = xc[a] - xr[a];
                    u += diff[a] * diff[a];
                }
                let k = (-u * inv_2h2).exp();
                let ck = k * inv_h2;
                let tr = (d_h2 - u * inv_h4) * k;
                let o = (c - start) * width;
                let (mut sc_diff, mut sr_diff) = (0.0, 0.0);
                for a in 0..d {
                    phi_r[a] += sc[a] * k - ck * diff[a];
                    acc[o + a] += sr[a] * k + ck * diff[a];
                    sc_diff += sc[a] * diff[a];
                    sr_diff += sr[a] * diff[a];
                }
                div_r += ck * sc_diff + tr;
                acc[o + d] += tr - ck * sr_diff;
            }
            let o = (r - start) * width;
            for a in 0..d {
                acc[o + a] += phi_r[a];
            }
            acc[o + d] += div_r;
        }
        return;
    }
    let (mut g1, mut g2) = (vec![0.0; d], vec![0.0; d]);
    for r in start..end {
        let (xr, sr) = (x.row(r), s.row(r));
        for c in r..n {
            let (xc, sc) = (x.row(c), s.row(c));
            // pair evaluated as k(x_c, x_r): g1 = grad wrt x_c, g2 = grad wrt x_r
            let (k, tr) = spec.pair(xc, xr, &mut g1, &mut g2);
            let row_r = (r - start) * width;
            let mut div_r = tr;
            for a in 0..d {
                acc[row_r + a] += sc[a] * k + g1[a];
                div_r += sc[a] * g2[a];
            }
            acc[row_r + d] += div_r;
            if c != r {
                let row_c = (c - start) * width;
                let mut div_c = tr;
                for a in 0..d {
                    acc[row_c + a] += sr[a] * k + g2[a];
                    div_c += sr[a] * g1[a];
                }
                acc[row_c + d] += div_c;
            }
        }
    }
}

/// `phi*(q) = (1/n) sum_j [s(x_j) k(x_j, q) + grad_{x_j} k(x_j, q)]`.
pub fn phi_star(target: &dyn Target, spec: &KernelSpec, ensemble: &ParticleEnsemble, query: &[f64]) -> Result<Vec<f64>> {
    let pts = ensemble.positions();
    check_target_dim(target, pts.dim())?;
    check_target_dim(target, query.len())?;
    if pts.is_empty() {
        return Err(Error::Empty("ensemble"));
    }
    let d = pts.dim();
    let (mut g1, mut g2) = (vec![0.0; d], vec![0.0; d]);
    let mut s = vec![0.0; d];
    let mut out = vec![0.0; d];
    for j in pts.canonical_order() {
        let xj = pts.row(j);
        target.score_into(xj, &mut s);
        let (k, _) = spec.pair(xj, query, &mut g1, &mut g2);
        for a in 0..d {
            out[a] += s[a] * k + g1[a];
        }
    }
    let inv_n = 1.0 / pts.len() as f64;
    out.iter_mut().for_each(|v| *v *= inv_n);
    Ok(out)
}

/// Query Jacobians `J[a][b] = d phi*_a / d q_b` for sorted sources `x`, `s`.
fn jacobian_sorted(spec: &KernelSpec, x: &Points, s: &Points, query: &[f64]) -> DMatrix<f64> {
    let d = x.dim();
    let mut gy = vec![0.0; d];
    let mut mixed = vec![0.0; d * d];
    let mut acc = vec![0.0; d * d];
    for (xj, sj) in x.rows().zip(s.rows()) {
        spec.grad_y_and_mixed(xj, query, &mut gy, &mut mixed);
        for b in 0..d {
            for a in 0..d {
                acc[a + b * d] += sj[a] * gy[b] + mixed[a + b * d];
            }
        }
    }
    let inv_n = 1.0 / x.len() as f64;
    DMatrix::from_iterator(d, d, acc.into_iter().map(|v| v * inv_n))
}

/// `grad_q phi*(q) = (1/n) sum_j [s(x_j) grad_q k(x_j, q)^T + grad_q grad_{x_j} k(x_j, q)]`.
pub fn phi_star_jacobian(
    target: &dyn Target,
    spec: &KernelSpec,
    ensemble: &ParticleEnsemble,
    query: &[f64],
) -> Result<DMatrix<f64>> {
    let pts = ensemble.positions();
    check_target_dim(target, pts.dim())?;
    check_target_dim(target, query.len())?;
    if pts.is_empty() {
        return Err(Error::Empty("ensemble"));
    }
    let x = pts.gather(&pts.canonical_order());
    let s = scores(target, &x);
    Ok(jacobian_sorted(spec, &x, &s, query))
}

/// Jacobians of `phi*` at every particle, in particle order.
pub fn ensemble_jacobians(target: &dyn Target, spec: &KernelSpec, positions: &Points) -> Result<Vec<DMatrix<f64>>> {
    check_target_dim(target, positions.dim())?;
    if positions.is_empty() {
        return Err(Error::Empty("ensemble"));
    }
    let x = positions.gather(&positions.canonical_order());
    let s = scores(target, &x);
    Ok(positions
        .as_slice()
        .par_chunks_exact(positions.dim())
        .map(|q| jacobian_sorted(spec, &x, &s, q))
        .collect())
}

/// `rho(J + J^T)` for a square `J`.
pub(crate) fn symmetric_spectral_radius(j: &DMatrix<f64>) -> f64 {
    if j.nrows() == 1 {
        return (2.0 * j[(0, 0)]).abs();
    }
    let sym = j + j.transpose();
    SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()))
}

/// `log |det(I + eps J)|`, or `None` when `|det| < 1e-12`.
pub(crate) fn log_abs_det_update(j: &DMatrix<f64>, eps: f64) -> Option<f64> {
    let det = if j.nrows() == 1 {
        1.0 + eps * j[(0, 0)]
    } else {
        let m = DMatrix::identity(j.nrows(), j.ncols()) + j * eps;
        m.lu().determinant()
    };
    (det.abs() >= 1e-12).then(|| det.abs().ln())
}

/// Step-size caps for one iteration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepCap {
    /// `(2 max_i rho(J_i + J_i^T))^-1` over the particle positions; `+inf`
    /// when every Jacobian vanishes.
    pub spectral: f64,
    /// `(4 sup_x sqrt(tr grad_x grad_x' k(x, x)) S)^-1`, a lower bound on the
    /// cap over all of space (not just the particles); scales as `1/S`.
    pub fallback: f64,
}

impl StepCap {
    /// The cap used by the capped schedule.
    pub fn epsilon_star(&self) -> f64 {
        self.spectral
    }

    /// `min(spectral, fallback)`.
    pub fn conservative(&self) -> f64 {
        self.spectral.min(self.fallback)
    }
}

/// `(2 max_i rho(J_i + J_i^T))^-1`, or `+inf` when every Jacobian vanishes.
pub(crate) fn spectral_cap(jacobians: &[DMatrix<f64>]) -> f64 {
    let rho = jacobians.iter().map(symmetric_spectral_radius).fold(0.0f64, f64::max);
    if rho > 0.0 {
        1.0 / (2.0 * rho)
    } else {
        f64::INFINITY
    }
}

pub fn step_size_cap(target: &dyn Target, spec: &KernelSpec, ensemble: &ParticleEnsemble) -> Result<StepCap> {
    let pts = ensemble.positions();
    let jacs = ensemble_jacobians(target, spec, pts)?;
    let spectral = spectral_cap(&jacs);

    let ksd = ksd_vstat(target, spec, pts)?.value;
    let trace_sup = match spec.self_trace_sup(pts.dim()) {
        Some(t) => t,
        None => pts
            .rows()
            .map(|x| spec.trace_grad_xy(x, x))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .fold(0.0, f64::max),
    };
    let bound = 4.0 * trace_sup.sqrt() * ksd;
    let fallback = if bound > 0.0 { 1.0 / bound } else { f64::INFINITY };
    Ok(StepCap { spectral, fallback })
}

/// One simultaneous SVGD update `x_i <- x_i + eps phi*(x_i)`.
///
/// With `track_density`, each particle's log density is updated by the
/// change-of-variables term `-log |det(I + eps grad phi*(x_i))|`.
pub fn svgd_step(
    target: &dyn Target,
    spec: &KernelSpec,
    ensemble: &ParticleEnsemble,
    epsilon: f64,
    track_density: bool,
) -> Result<ParticleEnsemble> {
    step_with_jacobians(target, spec, ensemble, epsilon, track_density, None)
}

/// [`svgd_step`] reusing Jacobians already computed at the current positions.
pub(crate) fn step_with_jacobians(
    target: &dyn Target,
    spec: &KernelSpec,
    ensemble: &ParticleEnsemble,
    epsilon: f64,
    track_density: bool,
    jacobians: Option<Vec<DMatrix<f64>>>,
) -> Result<ParticleEnsemble> {
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::Contract(format!("step size must be finite and >= 0, got {epsilon}")));
    }
    if track_density && !ensemble.is_tracking() {
        return Err(Error::NotTracking);
    }
    let pts = ensemble.positions();
    let drift = ensemble_drift(target, spec, pts)?;
    let mut next = pts.clone();
    for (x, v) in next.as_mut_slice().iter_mut().zip(drift.phi.as_slice()) {
        *x += epsilon * v;
    }
    if let Some(index) = next.first_non_finite() {
        return Err(Error::Diverged { index });
    }

    let tracked = if track_density {
        let jacs = match jacobians {
            Some(j) => j,
            None => ensemble_jacobians(target, spec, pts)?,
        };
        let mut logq = ensemble.tracked_log_q.clone().expect("checked above");
        for (i, (lq, j)) in logq.iter_mut().zip(&jacs).enumerate() {
            let det_term = log_abs_det_update(j, epsilon).ok_or_else(|| Error::StepTooLarge {
                index: i,
                det: {
                    let m = DMatrix::identity(j.nrows(), j.ncols()) + j * epsilon;
                    m.determinant()
                },
            })?;
            *lq -= det_term;
        }
        Some(logq)
    } else {
        None
    };

    Ok(ParticleEnsemble {
        positions: next,
        tracked_log_q: tracked,
        iteration: ensemble.iteration + 1,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepMode {
    Constant,
    CappedBySpectral,
    KsdProportional,
}

impl StepMode {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "constant" => Some(Self::Constant),
            "capped" => Some(Self::CappedBySpectral),
            "ksd_proportional" => Some(Self::KsdProportional),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Constant => "constant",
            Self::CappedBySpectral => "capped",
            Self::KsdProportional => "ksd_proportional",
        }
    }
}

/// Rule producing the step size of each iteration.
///
/// * `Constant`: `eps = base`.
/// * `CappedBySpectral`: `eps = min(base, safety * eps*)`.
/// * `KsdProportional`: `eps = base * S^beta`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub mode: StepMode,
    pub base: f64,
    pub beta: f64,
    pub safety: f64,
}

impl StepSchedule {
    pub fn constant(base: f64) -> Self {
        Self {
            mode: StepMode::Constant,
            base,
            beta: 1.0,
            safety: 1.0,
        }
    }

    pub fn capped(base: f64, safety: f64) -> Self {
        Self {
            mode: StepMode::CappedBySpectral,
            base,
            beta: 1.0,
            safety,
        }
    }

    pub fn ksd_proportional(base: f64, beta: f64) -> Self {
        Self {
            mode: StepMode::KsdProportional,
            base,
            beta,
            safety: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base > 0.0 && self.base.is_finite()) {
            return Err(Error::config("schedule.base", "must be a positive number"));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::config("schedule.beta", "must be a positive number"));
        }
        if !(self.safety > 0.0 && self.safety <= 1.0) {
            return Err(Error::config("schedule.safety", "must lie in (0, 1]"));
        }
        Ok(())
    }

    /// Step size for the current ensemble; `ksd` is `S(mu || p)` under `spec`.
    pub fn epsilon(&self, target: &dyn Target, spec: &KernelSpec, ensemble: &ParticleEnsemble, ksd: f64) -> Result<f64> {
        Ok(match self.mode {
            StepMode::Constant => self.base,
            StepMode::CappedBySpectral => {
                let cap = step_size_cap(target, spec, ensemble)?;
                self.base.min(self.safety * cap.epsilon_star())
            }
            StepMode::KsdProportional => self.base * ksd.powf(self.beta),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    Iteration,
    Time,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRow {
    pub iteration: usize,
    /// Continuous time; equals the iteration count for discrete runs.
    pub time: f64,
    pub epsilon: f64,
    pub ksd: f64,
    pub kl: Option<f64>,
    pub snapshot: Option<Points>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRecord {
    pub axis: Axis,
    pub rows: Vec<TrajectoryRow>,
}

/// Options for [`run`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunConfig {
    pub schedule: StepSchedule,
    pub max_iter: usize,
    pub record_every: usize,
    /// Keep a position snapshot every this many iterations (on recorded rows).
    pub snapshot_every: Option<usize>,
    pub track_density: bool,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub record: TrajectoryRecord,
    pub final_ensemble: ParticleEnsemble,
}

fn record_row(
    target: &dyn Target,
    spec: &KernelSpec,
    ensemble: &ParticleEnsemble,
    epsilon: f64,
    ksd: Option<f64>,
    track: bool,
    snapshot: bool,
) -> Result<TrajectoryRow> {
    let ksd = match ksd {
        Some(v) => v,
        None => ksd_vstat(target, spec, ensemble.positions())?.value,
    };
    let kl = if track { Some(kl_tracked(ensemble, target)?.value) } else { None };
    Ok(TrajectoryRow {
        iteration: ensemble.iteration(),
        time: ensemble.iteration() as f64,
        epsilon,
        ksd,
        kl,
        snapshot: snapshot.then(|| ensemble.positions().clone()),
    })
}

/// Runs `max_iter` SVGD iterations from `initial`.
///
/// Rows are recorded at iteration 0, every `record_every` iterations, and at
/// the end. The `epsilon` column holds the step that produced the row's state
/// (0 for the initial row). The bandwidth is re-resolved from the kernel
/// configuration before every step.
pub fn run(target: &dyn Target, kernel: &KernelConfig, initial: ParticleEnsemble, cfg: &RunConfig) -> Result<RunOutcome> {
    if cfg.max_iter == 0 {
        return Err(Error::config("run.max_iter", "must be >= 1"));
    }
    if cfg.record_every == 0 {
        return Err(Error::config("run.record_every", "must be >= 1"));
    }
    cfg.schedule.validate()?;
    if cfg.track_density && !initial.is_tracking() {
        return Err(Error::NotTracking);
    }
    let wants_snapshot = |it: usize| matches!(cfg.snapshot_every, Some(k) if k > 0 && it % k == 0);

    let mut ensemble = initial;
    if !cfg.track_density {
        ensemble.tracked_log_q = None;
    }
    let mut rows = Vec::new();
    let mut last_eps = 0.0;
    for step in 0..cfg.max_iter {
        let it = ensemble.iteration();
        let spec = kernel.resolve(ensemble.positions()).map_err(|e| e.at_iteration(it))?;
        let recording = step % cfg.record_every == 0;
        let ksd = if recording || cfg.schedule.mode == StepMode::KsdProportional {
            Some(ksd_vstat(target, &spec, ensemble.positions()).map_err(|e| e.at_iteration(it))?.value)
        } else {
            None
        };
        if recording {
            rows.push(
                record_row(target, &spec, &ensemble, last_eps, ksd, cfg.track_density, wants_snapshot(step))
                    .map_err(|e| e.at_iteration(it))?,
            );
        }
        let jacs = if cfg.track_density || cfg.schedule.mode == StepMode::CappedBySpectral {
            Some(ensemble_jacobians(target, &spec, ensemble.positions()).map_err(|e| e.at_iteration(it))?)
        } else {
            None
        };
        let eps = match (&jacs, cfg.schedule.mode) {
            (Some(j), StepMode::CappedBySpectral) => cfg.schedule.base.min(cfg.schedule.safety * spectral_cap(j)),
            _ => cfg
                .schedule
                .epsilon(target, &spec, &ensemble, ksd.unwrap_or(0.0))
                .map_err(|e| e.at_iteration(it))?,
        };
        ensemble = step_with_jacobians(target, &spec, &ensemble, eps, cfg.track_density, jacs)
            .map_err(|e| e.at_iteration(it))?;
        last_eps = eps;
    }
    let it = ensemble.iteration();
    let spec = kernel.resolve(ensemble.positions()).map_err(|e| e.at_iteration(it))?;
    rows.push(
        record_row(target, &spec, &ensemble, last_eps, None, cfg.track_density, wants_snapshot(cfg.max_iter))
            .map_err(|e| e.at_iteration(it))?,
    );
    Ok(RunOutcome {
        record: TrajectoryRecord {
            axis: Axis::Iteration,
            rows,
        },
        final_ensemble: ensemble,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discrepancy::kl_gaussian;
    use crate::kernels::{Bandwidth, KernelFamily};
    use crate::rng;
    use approx::assert_relative_eq;
    use rand::{seq::SliceRandom, Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn std_normal() -> GaussianTarget {
        GaussianTarget::standard(1)
    }

    fn rbf1() -> KernelSpec {
        KernelSpec::rbf(1.0).unwrap()
    }

    fn single(x: f64) -> ParticleEnsemble {
        ParticleEnsemble::new(Points::from_scalars(&[x]))
    }

    /// Score-free target: `log p` constant.
    struct Flat(usize);
    impl Target for Flat {
        fn dim(&self) -> usize {
            self.0
        }
        fn log_density(&self, _: &[f64]) -> f64 {
            0.0
        }
        fn score_into(&self, _: &[f64], out: &mut [f64]) {
            out.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    fn random_ensemble(rng: &mut ChaCha8Rng, n: usize, d: usize) -> ParticleEnsemble {
        let data = (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect();
        ParticleEnsemble::new(Points::new(d, data).unwrap())
    }

    #[test]
    fn phi_star_single_particle_is_score() {
        let p = std_normal();
        assert_eq!(phi_star(&p, &rbf1(), &single(2.0), &[2.0]).unwrap(), vec![-2.0]);
        assert_eq!(phi_star(&p, &rbf1(), &single(0.0), &[0.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn phi_star_is_odd_for_symmetric_pairs() {
        let p = std_normal();
        let ens = ParticleEnsemble::new(Points::from_scalars(&[1.0, -1.0]));
        let plus = phi_star(&p, &rbf1(), &ens, &[1.0]).unwrap()[0];
        let minus = phi_star(&p, &rbf1(), &ens, &[-1.0]).unwrap()[0];
        assert_relative_eq!(plus, -minus, epsilon = 1e-15);
        // j = 1 contributes the score -1; j = -1 contributes k + 2k with k = e^-2
        let k = (-2.0f64).exp();
        let direct = 0.5 * (-1.0 + 3.0 * k);
        assert_relative_eq!(plus, direct, epsilon = 1e-15);
    }

    #[test]
    fn ensemble_drift_matches_pointwise_phi_star() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for d in 1..=3 {
            let p = GaussianTarget::new(vec![0.3; d], DMatrix::identity(d, d) * 1.5).unwrap();
            let ens = random_ensemble(&mut rng, 70, d);
            for spec in [KernelSpec::rbf(0.8).unwrap(), KernelSpec::imq(1.0, 1.0, -0.5).unwrap(), KernelSpec::linear()] {
                let drift = ensemble_drift(&p, &spec, ens.positions()).unwrap();
                for (i, x) in ens.positions().rows().enumerate() {
                    let direct = phi_star(&p, &spec, &ens, x).unwrap();
                    for a in 0..d {
                        assert!((direct[a] - drift.phi.row(i)[a]).abs() < 1e-12);
                    }
                    let jac = phi_star_jacobian(&p, &spec, &ens, x).unwrap();
                    assert!((jac.trace() - drift.divergence[i]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn jacobian_example_and_finite_differences() {
        let p = std_normal();
        let j = phi_star_jacobian(&p, &rbf1(), &single(2.0), &[2.0]).unwrap();
        assert_eq!(j[(0, 0)], 1.0);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = 1e-5;
        for d in 1..=3 {
            let target = GaussianTarget::new(vec![-0.2; d], DMatrix::identity(d, d) * 0.7).unwrap();
            let ens = random_ensemble(&mut rng, 12, d);
            for spec in [KernelSpec::rbf(1.1).unwrap(), KernelSpec::imq(0.9, 1.0, -0.5).unwrap()] {
                let q: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
                let jac = phi_star_jacobian(&target, &spec, &ens, &q).unwrap();
                for b in 0..d {
                    let mut qp = q.clone();
                    let mut qm = q.clone();
                    qp[b] += h;
                    qm[b] -= h;
                    let fp = phi_star(&target, &spec, &ens, &qp).unwrap();
                    let fm = phi_star(&target, &spec, &ens, &qm).unwrap();
                    for a in 0..d {
                        let fd = (fp[a] - fm[a]) / (2.0 * h);
                        assert!((fd - jac[(a, b)]).abs() < 1e-5, "J[{a},{b}] {} vs fd {fd}", jac[(a, b)]);
                    }
                }
            }
        }
    }

    #[test]
    fn jacobian_finite_when_drift_vanishes() {
        let p = std_normal();
        let ens = ParticleEnsemble::new(Points::from_scalars(&[0.0]));
        let j = phi_star_jacobian(&p, &rbf1(), &ens, &[0.0]).unwrap();
        assert!(j.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn step_cap_examples() {
        let p = std_normal();
        let cap = step_size_cap(&p, &rbf1(), &single(2.0)).unwrap();
        assert_eq!(cap.epsilon_star(), 0.25);
        // S = sqrt(kappa(2, 2)) = sqrt(5)
        assert_relative_eq!(cap.fallback, 1.0 / (4.0 * 5f64.sqrt()), epsilon = 1e-15);

        // no score: J = d/dx d/dy k(x, x) = 1, and S^2 = tr = 1
        let cap = step_size_cap(&Flat(1), &rbf1(), &single(0.0)).unwrap();
        assert_eq!(cap.spectral, 0.25);
        assert_eq!(cap.fallback, 0.25);
        assert_eq!(cap.conservative(), 0.25);
    }

    #[test]
    fn fallback_cap_scales_inversely_with_ksd() {
        let p = std_normal();
        let mut prev_cap = 0.0;
        let mut prev_ksd = f64::INFINITY;
        for shift in [4.0, 3.0, 2.0, 1.0] {
            let ens = ParticleEnsemble::new(Points::from_scalars(&[shift - 0.5, shift, shift + 0.5]));
            let cap = step_size_cap(&p, &rbf1(), &ens).unwrap();
            let ksd = ksd_vstat(&p, &rbf1(), ens.positions()).unwrap().value;
            assert!(ksd < prev_ksd && cap.fallback > prev_cap);
            assert_relative_eq!(cap.fallback * ksd, 0.25, epsilon = 1e-12);
            prev_cap = cap.fallback;
            prev_ksd = ksd;
        }
    }

    #[test]
    fn svgd_step_examples() {
        let p = std_normal();
        let next = svgd_step(&p, &rbf1(), &single(2.0), 0.1, false).unwrap();
        assert_relative_eq!(next.positions().row(0)[0], 1.8, epsilon = 1e-15);
        assert_eq!(next.iteration(), 1);

        let tracked = ParticleEnsemble::with_tracking(Points::from_scalars(&[2.0]), vec![-1.0]).unwrap();
        let same = svgd_step(&p, &rbf1(), &tracked, 0.0, true).unwrap();
        assert_eq!(same.positions(), tracked.positions());
        assert_eq!(same.tracked_log_q(), tracked.tracked_log_q());

        let next = svgd_step(&p, &rbf1(), &tracked, 0.1, true).unwrap();
        assert_relative_eq!(next.tracked_log_q().unwrap()[0], -1.0 - 1.1f64.ln(), epsilon = 1e-15);
        assert_relative_eq!(1.1f64.ln(), 0.09531, epsilon = 1e-5);
    }

    #[test]
    fn svgd_step_errors() {
        let p = std_normal();
        assert!(matches!(svgd_step(&p, &rbf1(), &single(2.0), 0.1, true), Err(Error::NotTracking)));
        assert!(svgd_step(&p, &rbf1(), &single(2.0), -0.1, false).is_err());
        // J = 1 at the particle, so eps = -1 would be singular; use a target whose
        // drift Jacobian is -1 instead: linear kernel, n = 1, x = sqrt(2) gives
        // J = 1 + s x = 1 - x^2 = -1, so I + eps J = 0 at eps = 1.
        let tracked = ParticleEnsemble::with_tracking(Points::from_scalars(&[2f64.sqrt()]), vec![0.0]).unwrap();
        let lin = KernelSpec::linear();
        let j = phi_star_jacobian(&p, &lin, &tracked, &[2f64.sqrt()]).unwrap()[(0, 0)];
        let r = svgd_step(&p, &lin, &tracked, -1.0 / j, true);
        assert!(matches!(r, Err(Error::StepTooLarge { index: 0, .. })), "{r:?}");
        let r = svgd_step(&p, &rbf1(), &single(2.0), f64::MAX, false);
        assert!(matches!(r, Err(Error::Diverged { index: 0 }) | Err(Error::Contract(_))), "{r:?}");
    }

    #[test]
    fn step_is_simultaneous_and_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = GaussianTarget::standard(2);
        let ens = random_ensemble(&mut rng, 50, 2);
        let base = svgd_step(&p, &rbf1(), &ens, 0.05, false).unwrap();
        for _ in 0..3 {
            let mut perm: Vec<usize> = (0..50).collect();
            perm.shuffle(&mut rng);
            let permuted = ParticleEnsemble::new(ens.positions().gather(&perm));
            let moved = svgd_step(&p, &rbf1(), &permuted, 0.05, false).unwrap();
            for (r, &orig) in perm.iter().enumerate() {
                for (a, b) in moved.positions().row(r).iter().zip(base.positions().row(orig)) {
                    assert_eq!(a.to_bits(), b.to_bits());
                }
            }
        }
        // Jacobi, not Gauss-Seidel: every particle sees the pre-step snapshot
        for i in 0..50 {
            let phi = phi_star(&p, &rbf1(), &ens, ens.positions().row(i)).unwrap();
            for a in 0..2 {
                let expected = ens.positions().row(i)[a] + 0.05 * phi[a];
                assert!((base.positions().row(i)[a] - expected).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn single_particle_reduces_to_gradient_ascent() {
        let p = GaussianTarget::from_row_major(vec![1.0, -1.0], &[2.0, 0.3, 0.3, 0.5]).unwrap();
        let mut ens = ParticleEnsemble::new(Points::from_rows(&[[3.0, 2.0]]).unwrap());
        let mut x = vec![3.0, 2.0];
        for _ in 0..100 {
            ens = svgd_step(&p, &rbf1(), &ens, 0.05, false).unwrap();
            let s = p.score(&x);
            x.iter_mut().zip(&s).for_each(|(xi, si)| *xi += 0.05 * si);
            for (a, b) in ens.positions().row(0).iter().zip(&x) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tracked_density_matches_affine_pushforward() {
        // With the linear kernel in 1-D the drift is affine in the query,
        // phi*(q) = A q + b, so the pushforward of a Gaussian stays Gaussian
        // and the tracked log density must equal its log pdf at each particle.
        let p = std_normal();
        let lin = KernelSpec::linear();
        let init = GaussianTarget::scalar(0.3, 0.8).unwrap();
        let mut s = rng::stream(4, "affine");
        for n in [1usize, 50] {
            let mut ens = ParticleEnsemble::sample_gaussian(&init, n, &mut s, true);
            let (mut m, mut v) = (0.3, 0.8);
            for _ in 0..20 {
                let eps = 0.05;
                let xs = ens.positions().as_slice();
                let nn = xs.len() as f64;
                let a = 1.0 - xs.iter().map(|x| x * x).sum::<f64>() / nn;
                let b = -xs.iter().sum::<f64>() / nn;
                ens = svgd_step(&p, &lin, &ens, eps, true).unwrap();
                m += eps * (a * m + b);
                v *= (1.0 + eps * a).powi(2);
                let pushed = GaussianTarget::scalar(m, v).unwrap();
                for (x, lq) in ens.positions().as_slice().iter().zip(ens.tracked_log_q().unwrap()) {
                    assert!((pushed.log_pdf(&[*x]) - lq).abs() < 1e-10);
                }
                // the tracked KL equals the particle average of the exact log ratio
                let est = kl_tracked(&ens, &p).unwrap().value;
                let exact_avg = ens
                    .positions()
                    .as_slice()
                    .iter()
                    .map(|x| pushed.log_pdf(&[*x]) - p.log_pdf(&[*x]))
                    .sum::<f64>()
                    / nn;
                assert!((est - exact_avg).abs() < 1e-10);
            }
            assert!(kl_gaussian(&[m], &[v], &[0.0], &[1.0]).unwrap().is_finite());
        }
    }

    #[test]
    fn tracked_kl_matches_pushforward_kl_for_many_particles() {
        let p = std_normal();
        let lin = KernelSpec::linear();
        let init = GaussianTarget::scalar(1.0, 0.5).unwrap();
        let mut s = rng::stream(5, "affine-kl");
        let mut ens = ParticleEnsemble::sample_gaussian(&init, 4000, &mut s, true);
        let (mut m, mut v) = (1.0, 0.5);
        for _ in 0..10 {
            let eps = 0.05;
            let xs = ens.positions().as_slice();
            let nn = xs.len() as f64;
            let a = 1.0 - xs.iter().map(|x| x * x).sum::<f64>() / nn;
            let b = -xs.iter().sum::<f64>() / nn;
            ens = svgd_step(&p, &lin, &ens, eps, true).unwrap();
            m += eps * (a * m + b);
            v *= (1.0 + eps * a).powi(2);
            let est = kl_tracked(&ens, &p).unwrap();
            let exact = kl_gaussian(&[m], &[v], &[0.0], &[1.0]).unwrap();
            assert!((est.value - exact).abs() < 3.0 * est.std_error + 1e-3, "{est:?} vs {exact}");
        }
    }

    #[test]
    fn run_single_particle_contracts_geometrically() {
        let p = std_normal();
        let cfg = RunConfig {
            schedule: StepSchedule::constant(0.1),
            max_iter: 100,
            record_every: 10,
            snapshot_every: None,
            track_density: false,
        };
        let out = run(&p, &KernelConfig::fixed(rbf1()), single(2.0), &cfg).unwrap();
        let x = out.final_ensemble.positions().row(0)[0];
        assert!(x.abs() < 1e-4);
        assert_relative_eq!(x, 2.0 * 0.9f64.powi(100), max_relative = 1e-10);
        assert_eq!(out.record.rows.len(), 11);
        assert!(out.record.rows.windows(2).all(|w| w[0].iteration < w[1].iteration));
    }

    #[test]
    fn run_records_initial_and_final_rows() {
        let p = std_normal();
        let cfg = RunConfig {
            schedule: StepSchedule::constant(0.1),
            max_iter: 7,
            record_every: 7,
            snapshot_every: Some(7),
            track_density: false,
        };
        let ens = ParticleEnsemble::new(Points::from_scalars(&[1.0, 2.0, 3.0]));
        let out = run(&p, &KernelConfig::median(KernelFamily::Rbf), ens, &cfg).unwrap();
        assert_eq!(out.record.rows.len(), 2);
        assert_eq!(out.record.rows[0].iteration, 0);
        assert_eq!(out.record.rows[1].iteration, 7);
        assert!(out.record.rows.iter().all(|r| r.snapshot.is_some()));
        assert_eq!(out.record.rows[0].epsilon, 0.0);
        assert_eq!(out.record.rows[1].epsilon, 0.1);
    }

    #[test]
    fn capped_schedule_respects_cap() {
        let p = std_normal();
        let mut s = rng::stream(6, "cap");
        let ens = ParticleEnsemble::sample_gaussian(&GaussianTarget::scalar(5.0, 1.0).unwrap(), 60, &mut s, false);
        let sched = StepSchedule::capped(10.0, 0.5);
        let spec = KernelConfig::median(KernelFamily::Rbf).resolve(ens.positions()).unwrap();
        let eps = sched.epsilon(&p, &spec, &ens, 0.0).unwrap();
        let cap = step_size_cap(&p, &spec, &ens).unwrap();
        assert!(eps > 0.0 && eps <= 0.5 * cap.epsilon_star());
        let ksd_sched = StepSchedule::ksd_proportional(0.1, 2.0);
        assert_relative_eq!(ksd_sched.epsilon(&p, &spec, &ens, 3.0).unwrap(), 0.9, epsilon = 1e-15);
    }

    #[test]
    fn run_requires_tracking_when_asked() {
        let p = std_normal();
        let cfg = RunConfig {
            schedule: StepSchedule::constant(0.1),
            max_iter: 3,
            record_every: 1,
            snapshot_every: None,
            track_density: true,
        };
        assert!(matches!(
            run(&p, &KernelConfig::fixed(rbf1()), single(1.0), &cfg),
            Err(Error::NotTracking)
        ));
        let bad = RunConfig { max_iter: 0, track_density: false, ..cfg };
        assert!(run(&p, &KernelConfig::fixed(rbf1()), single(1.0), &bad).is_err());
    }

    #[test]
    fn tracked_kl_is_non_increasing_under_capped_steps() {
        let p = std_normal();
        let mut s = rng::stream(7, "descent");
        let ens = ParticleEnsemble::sample_gaussian(&GaussianTarget::scalar(2.0, 1.0).unwrap(), 600, &mut s, true);
        let kernel = KernelConfig {
            bandwidth: Bandwidth::Fixed(1.0),
            ..KernelConfig::default()
        };
        let cfg = RunConfig {
            schedule: StepSchedule::capped(0.5, 0.5),
            max_iter: 30,
            record_every: 1,
            snapshot_every: None,
            track_density: true,
        };
        let out = run(&p, &kernel, ens, &cfg).unwrap();
        let kl: Vec<f64> = out.record.rows.iter().map(|r| r.kl.unwrap()).collect();
        for w in kl.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn grid_initialisation() {
        let g = ParticleEnsemble::grid(&[-1.0], &[1.0], 5).unwrap();
        assert_eq!(g.positions().as_slice(), &[-1.0, -0.5, 0.0, 0.5, 1.0]);
        let g = ParticleEnsemble::grid(&[0.0, 0.0], &[1.0, 2.0], 4).unwrap();
        assert_eq!(g.positions().as_slice(), &[0.0, 0.0, 0.0, 2.0, 1.0, 0.0, 1.0, 2.0]);
        assert!(!g.is_tracking());
    }
}
