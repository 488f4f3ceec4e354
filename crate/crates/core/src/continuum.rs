//! Continuous-time dynamics: the mean-field particle ODE whose Euler
//! discretisation is SVGD, the path-integral KL formula, and the Langevin /
//! Ornstein-Uhlenbeck baseline.

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::discrepancy::{kl_tracked, ksd_vstat};
use crate::error::{Error, Result};
use crate::kernels::{KernelConfig, KernelSpec};
use crate::points::Points;
use crate::rng;
use crate::svgd::{ensemble_drift, Axis, ParticleEnsemble, TrajectoryRecord, TrajectoryRow};
use crate::targets::Target;

/// `phi*(x_i)` for every particle against the whole ensemble.
pub fn vlasov_rhs(target: &dyn Target, spec: &KernelSpec, positions: &Points) -> Result<Points> {
    Ok(ensemble_drift(target, spec, positions)?.phi)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Integrator {
    Euler,
    #[default]
    Rk4,
}

impl Integrator {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "euler" => Some(Self::Euler),
            "rk4" => Some(Self::Rk4),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Euler => "euler",
            Self::Rk4 => "rk4",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OdeConfig {
    pub integrator: Integrator,
    pub dt: f64,
    pub t_end: f64,
    /// Record a trajectory row every this many steps.
    pub record_every: usize,
}

impl OdeConfig {
    pub fn new(integrator: Integrator, dt: f64, t_end: f64) -> Self {
        Self {
            integrator,
            dt,
            t_end,
            record_every: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::config("flow.dt", "must be a positive number"));
        }
        if !(self.t_end >= 0.0 && self.t_end.is_finite()) {
            return Err(Error::config("flow.t_end", "must be a non-negative number"));
        }
        if self.t_end > 0.0 && self.dt > self.t_end {
            return Err(Error::config("flow.dt", "must not exceed flow.t_end"));
        }
        if self.record_every == 0 {
            return Err(Error::config("flow.record_every", "must be >= 1"));
        }
        Ok(())
    }

    /// `round(t_end / dt)`.
    pub fn steps(&self) -> usize {
        (self.t_end / self.dt).round() as usize
    }
}

/// Stepper for the particle ODE on the augmented state `(x_i, log q(x_i))`,
/// with `d log q / dt = -div phi*`.
pub struct VlasovFlow<'a> {
    target: &'a dyn Target,
    kernel: &'a KernelConfig,
    integrator: Integrator,
    dt: f64,
    positions: Points,
    log_q: Option<Vec<f64>>,
    steps: usize,
}

impl<'a> VlasovFlow<'a> {
    pub fn new(
        target: &'a dyn Target,
        kernel: &'a KernelConfig,
        initial: ParticleEnsemble,
        integrator: Integrator,
        dt: f64,
    ) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::config("flow.dt", "must be a positive number"));
        }
        if target.dim() != initial.dim() {
            return Err(Error::Dimension {
                expected: target.dim(),
                found: initial.dim(),
            });
        }
        Ok(Self {
            target,
            kernel,
            integrator,
            dt,
            log_q: initial.tracked_log_q().map(<[f64]>::to_vec),
            positions: initial.positions().clone(),
            steps: 0,
        })
    }

    pub fn time(&self) -> f64 {
        self.steps as f64 * self.dt
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn positions(&self) -> &Points {
        &self.positions
    }

    pub fn ensemble(&self) -> ParticleEnsemble {
        ParticleEnsemble::from_parts(self.positions.clone(), self.log_q.clone(), self.steps)
    }

    /// Kernel resolved at the current state.
    pub fn current_kernel(&self) -> Result<KernelSpec> {
        self.kernel.resolve(&self.positions)
    }

    fn rhs(&self, x: &Points) -> Result<(Points, Vec<f64>)> {
        let spec = self.kernel.resolve(x)?;
        let drift = ensemble_drift(self.target, &spec, x)?;
        Ok((drift.phi, drift.divergence))
    }

    fn shifted(&self, base: &Points, slope: &Points, h: f64) -> Points {
        let mut out = base.clone();
        for (x, v) in out.as_mut_slice().iter_mut().zip(slope.as_slice()) {
            *x += h * v;
        }
        out
    }

    /// Advances one step of size `dt`.
    pub fn step(&mut self) -> Result<()> {
        let dt = self.dt;
        let (next, dlogq) = match self.integrator {
            Integrator::Euler => {
                let (phi, div) = self.rhs(&self.positions)?;
                let next = self.shifted(&self.positions, &phi, dt);
                (next, div.iter().map(|v| dt * v).collect::<Vec<_>>())
            }
            Integrator::Rk4 => {
                let x0 = &self.positions;
                let (k1, d1) = self.rhs(x0)?;
                let (k2, d2) = self.rhs(&self.shifted(x0, &k1, 0.5 * dt))?;
                let (k3, d3) = self.rhs(&self.shifted(x0, &k2, 0.5 * dt))?;
                let (k4, d4) = self.rhs(&self.shifted(x0, &k3, dt))?;
                let mut next = x0.clone();
                let slopes = (k1.as_slice(), k2.as_slice(), k3.as_slice(), k4.as_slice());
                for (i, x) in next.as_mut_slice().iter_mut().enumerate() {
                    *x += dt / 6.0 * (slopes.0[i] + 2.0 * slopes.1[i] + 2.0 * slopes.2[i] + slopes.3[i]);
                }
                let dl = (0..d1.len())
                    .map(|i| dt / 6.0 * (d1[i] + 2.0 * d2[i] + 2.0 * d3[i] + d4[i]))
                    .collect();
                (next, dl)
            }
        };
        if next.first_non_finite().is_some() {
            return Err(Error::DivergedAt {
                time: (self.steps + 1) as f64 * dt,
            });
        }
        if let Some(lq) = self.log_q.as_mut() {
            lq.iter_mut().zip(&dlogq).for_each(|(l, d)| *l -= d);
        }
        self.positions = next;
        self.steps += 1;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct FlowOutcome {
    pub record: TrajectoryRecord,
    pub final_ensemble: ParticleEnsemble,
}

fn flow_row(target: &dyn Target, kernel: &KernelConfig, ens: &ParticleEnsemble, time: f64, dt: f64, track: bool) -> Result<TrajectoryRow> {
    let spec = kernel.resolve(ens.positions())?;
    Ok(TrajectoryRow {
        iteration: ens.iteration(),
        time,
        epsilon: dt,
        ksd: ksd_vstat(target, &spec, ens.positions())?.value,
        kl: if track { Some(kl_tracked(ens, target)?.value) } else { None },
        snapshot: None,
    })
}

/// Integrates the particle ODE to `t_end`, recording KSD (and the tracked KL
/// when `track`) every `record_every` steps and at the end.
pub fn integrate_vlasov(
    target: &dyn Target,
    kernel: &KernelConfig,
    initial: ParticleEnsemble,
    cfg: &OdeConfig,
    track: bool,
) -> Result<FlowOutcome> {
    cfg.validate()?;
    if track && !initial.is_tracking() {
        return Err(Error::NotTracking);
    }
    let initial = if track {
        initial
    } else {
        ParticleEnsemble::from_parts(initial.positions().clone(), None, initial.iteration())
    };
    let steps = cfg.steps();
    let mut flow = VlasovFlow::new(target, kernel, initial, cfg.integrator, cfg.dt)?;
    let mut rows = vec![flow_row(target, kernel, &flow.ensemble(), 0.0, 0.0, track)?];
    for k in 1..=steps {
        flow.step()?;
        if k % cfg.record_every == 0 || k == steps {
            rows.push(flow_row(target, kernel, &flow.ensemble(), flow.time(), cfg.dt, track)?);
        }
    }
    Ok(FlowOutcome {
        record: TrajectoryRecord { axis: Axis::Time, rows },
        final_ensemble: flow.ensemble(),
    })
}

/// `int_0^inf S(t)^2 dt` estimated from a recorded trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PathIntegral {
    /// Trapezoidal integral over the recorded time span.
    pub truncated: f64,
    /// Exponential-tail extrapolation past the last record (heuristic; 0
    /// when the last two values do not decay).
    pub tail: f64,
    pub total: f64,
}

pub fn path_integral_kl(record: &TrajectoryRecord) -> Result<PathIntegral> {
    let rows = &record.rows;
    if rows.len() < 2 {
        return Err(Error::Contract("path integral needs at least two recorded times".into()));
    }
    let mut truncated = 0.0;
    for w in rows.windows(2) {
        truncated += 0.5 * (w[1].time - w[0].time) * (w[0].ksd.powi(2) + w[1].ksd.powi(2));
    }
    let (a, b) = (&rows[rows.len() - 2], &rows[rows.len() - 1]);
    let (sa, sb) = (a.ksd.powi(2), b.ksd.powi(2));
    let rate = if sa > 0.0 && sb > 0.0 && b.time > a.time {
        (sa / sb).ln() / (b.time - a.time)
    } else {
        0.0
    };
    let tail = if rate > 0.0 { sb / rate } else { 0.0 };
    Ok(PathIntegral {
        truncated,
        tail,
        total: truncated + tail,
    })
}

/// Scale of the Langevin noise term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum NoiseConvention {
    /// `sqrt(2 eps) xi`, the Euler-Maruyama discretisation of
    /// `dx = grad log p dt + sqrt(2) dW`.
    #[default]
    Sde,
    /// `2 sqrt(eps) xi`.
    PaperLiteral,
}

impl NoiseConvention {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "sde" => Some(Self::Sde),
            "paper_literal" => Some(Self::PaperLiteral),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Sde => "sde",
            Self::PaperLiteral => "paper_literal",
        }
    }

    pub fn scale(self, epsilon: f64) -> f64 {
        match self {
            Self::Sde => (2.0 * epsilon).sqrt(),
            Self::PaperLiteral => 2.0 * epsilon.sqrt(),
        }
    }
}

/// `x + eps grad log p(x) + noise * xi`, `xi ~ N(0, I)` drawn from `rng`.
pub fn langevin_step(
    target: &dyn Target,
    x: &[f64],
    epsilon: f64,
    convention: NoiseConvention,
    rng: &mut dyn RngCore,
) -> Result<Vec<f64>> {
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::Contract(format!("step size must be finite and >= 0, got {epsilon}")));
    }
    if x.len() != target.dim() {
        return Err(Error::Dimension {
            expected: target.dim(),
            found: x.len(),
        });
    }
    let mut out = vec![0.0; x.len()];
    target.score_into(x, &mut out);
    let scale = convention.scale(epsilon);
    for (o, xi) in out.iter_mut().zip(x) {
        let z: f64 = StandardNormal.sample(&mut *rng);
        *o = xi + epsilon * *o + scale * z;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LangevinConfig {
    pub step: f64,
    pub n_steps: usize,
    pub noise: NoiseConvention,
    pub record_every: usize,
}

/// Runs one independent Langevin chain per particle. Chain `i` draws from
/// the stream keyed `langevin/chain/{i}` under `seed`. Rows record the KSD
/// of the chain ensemble; `kl` is left empty.
pub fn run_langevin(
    target: &dyn Target,
    kernel: &KernelConfig,
    initial: &Points,
    cfg: &LangevinConfig,
    seed: u64,
) -> Result<FlowOutcome> {
    if !(cfg.step > 0.0 && cfg.step.is_finite()) {
        return Err(Error::config("langevin.step", "must be a positive number"));
    }
    if cfg.record_every == 0 {
        return Err(Error::config("langevin.record_every", "must be >= 1"));
    }
    if initial.dim() != target.dim() {
        return Err(Error::Dimension {
            expected: target.dim(),
            found: initial.dim(),
        });
    }
    let d = initial.dim();
    let mut streams: Vec<rng::Stream> = (0..initial.len())
        .map(|i| rng::stream(seed, &format!("langevin/chain/{i}")))
        .collect();
    let mut x = initial.clone();
    let row = |x: &Points, k: usize| -> Result<TrajectoryRow> {
        let spec = kernel.resolve(x)?;
        Ok(TrajectoryRow {
            iteration: k,
            time: k as f64 * cfg.step,
            epsilon: if k == 0 { 0.0 } else { cfg.step },
            ksd: ksd_vstat(target, &spec, x)?.value,
            kl: None,
            snapshot: None,
        })
    };
    let mut rows = vec![row(&x, 0)?];
    for k in 1..=cfg.n_steps {
        x.as_mut_slice()
            .par_chunks_exact_mut(d)
            .zip(streams.par_iter_mut())
            .try_for_each(|(xi, s)| -> Result<()> {
                let next = langevin_step(target, xi, cfg.step, cfg.noise, s)?;
                xi.copy_from_slice(&next);
                Ok(())
            })?;
        if x.first_non_finite().is_some() {
            return Err(Error::DivergedAt {
                time: k as f64 * cfg.step,
            });
        }
        if k % cfg.record_every == 0 || k == cfg.n_steps {
            rows.push(row(&x, k)?);
        }
    }
    Ok(FlowOutcome {
        record: TrajectoryRecord { axis: Axis::Time, rows },
        final_ensemble: ParticleEnsemble::from_parts(x, None, cfg.n_steps),
    })
}

/// One-dimensional Gaussian law of the Ornstein-Uhlenbeck process targeting
/// `N(0, 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct OuState {
    pub mean: f64,
    pub variance: f64,
    pub time: f64,
}

/// Law after a further time `t`: mean `m e^-t`, variance `1 + (v - 1) e^-2t`.
pub fn ou_closed_form(initial: OuState, t: f64) -> Result<OuState> {
    if !(t >= 0.0) {
        return Err(Error::Contract(format!("time must be >= 0, got {t}")));
    }
    if !(initial.variance > 0.0) {
        return Err(Error::Contract("variance must be positive".into()));
    }
    let decay = (-t).exp();
    Ok(OuState {
        mean: initial.mean * decay,
        variance: 1.0 + (initial.variance - 1.0) * decay * decay,
        time: initial.time + t,
    })
}

/// `E_q |d/dx log(q/p)|^2` for `q = N(a, v)`, `p = N(b, w)`:
/// `v (1/w - 1/v)^2 + (a - b)^2 / w^2`.
pub fn fisher_divergence_gaussian(q_mean: f64, q_var: f64, p_mean: f64, p_var: f64) -> Result<f64> {
    if !(q_var > 0.0 && p_var > 0.0) {
        return Err(Error::Contract("variances must be positive".into()));
    }
    let slope = 1.0 / p_var - 1.0 / q_var;
    let offset = (q_mean - p_mean) / p_var;
    Ok(q_var * slope * slope + offset * offset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discrepancy::kl_gaussian;
    use crate::svgd::svgd_step;
    use crate::targets::GaussianTarget;
    use approx::assert_relative_eq;

    struct Flat;
    impl Target for Flat {
        fn dim(&self) -> usize {
            1
        }
        fn log_density(&self, _: &[f64]) -> f64 {
            0.0
        }
        fn score_into(&self, _: &[f64], out: &mut [f64]) {
            out[0] = 0.0;
        }
    }

    fn rbf1() -> KernelConfig {
        KernelConfig::fixed(KernelSpec::rbf(1.0).unwrap())
    }

    fn single(x: f64) -> ParticleEnsemble {
        ParticleEnsemble::new(Points::from_scalars(&[x]))
    }

    #[test]
    fn rhs_examples() {
        let p = GaussianTarget::standard(1);
        let spec = KernelSpec::rbf(1.0).unwrap();
        assert_eq!(vlasov_rhs(&p, &spec, &Points::from_scalars(&[2.0])).unwrap().as_slice(), &[-2.0]);
        assert_eq!(vlasov_rhs(&Flat, &spec, &Points::from_scalars(&[0.7])).unwrap().as_slice(), &[0.0]);
    }

    fn scalar_error(dt: f64) -> f64 {
        let p = GaussianTarget::standard(1);
        let kernel = rbf1();
        let out = integrate_vlasov(&p, &kernel, single(2.0), &OdeConfig::new(Integrator::Rk4, dt, 1.0), false).unwrap();
        (out.final_ensemble.positions().row(0)[0] - 2.0 * (-1.0f64).exp()).abs()
    }

    #[test]
    fn rk4_scalar_linear_ode() {
        assert!(scalar_error(0.01) < 1e-6);
        let ratio = scalar_error(0.1) / scalar_error(0.05);
        assert!((12.0..20.0).contains(&ratio), "{ratio}");
    }

    #[test]
    fn zero_horizon_returns_initial_state() {
        let p = GaussianTarget::standard(1);
        let ens = ParticleEnsemble::with_tracking(Points::from_scalars(&[1.0, 2.0]), vec![-1.0, -2.0]).unwrap();
        let out = integrate_vlasov(&p, &rbf1(), ens.clone(), &OdeConfig::new(Integrator::Rk4, 0.1, 0.0), true).unwrap();
        assert_eq!(out.final_ensemble.positions(), ens.positions());
        assert_eq!(out.final_ensemble.tracked_log_q(), ens.tracked_log_q());
        assert_eq!(out.record.rows.len(), 1);
    }

    #[test]
    fn euler_step_equals_svgd_step_bitwise() {
        let p = GaussianTarget::standard(2);
        let mut s = rng::stream(1, "euler");
        let init = GaussianTarget::from_row_major(vec![1.0, -1.0], &[1.0, 0.2, 0.2, 0.5]).unwrap();
        let ens = ParticleEnsemble::sample_gaussian(&init, 40, &mut s, false);
        let kernel = rbf1();
        let eps = 0.07;
        let mut flow = VlasovFlow::new(&p, &kernel, ens.clone(), Integrator::Euler, eps).unwrap();
        flow.step().unwrap();
        let svgd = svgd_step(&p, &KernelSpec::rbf(1.0).unwrap(), &ens, eps, false).unwrap();
        let a: Vec<u64> = flow.positions().as_slice().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = svgd.positions().as_slice().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn steps_round_to_nearest() {
        assert_eq!(OdeConfig::new(Integrator::Rk4, 0.1, 1.0).steps(), 10);
        assert_eq!(OdeConfig::new(Integrator::Rk4, 0.3, 1.0).steps(), 3);
        assert!(OdeConfig::new(Integrator::Rk4, 2.0, 1.0).validate().is_err());
        assert!(OdeConfig::new(Integrator::Rk4, -0.1, 1.0).validate().is_err());
    }

    #[test]
    fn path_integral_of_known_decay() {
        // S^2 = e^{-t} on a fine grid: integral to infinity is 1
        let rows = (0..=200)
            .map(|k| {
                let t = k as f64 * 0.05;
                TrajectoryRow {
                    iteration: k,
                    time: t,
                    epsilon: 0.05,
                    ksd: (-t / 2.0).exp(),
                    kl: None,
                    snapshot: None,
                }
            })
            .collect();
        let pi = path_integral_kl(&TrajectoryRecord { axis: Axis::Time, rows }).unwrap();
        assert_relative_eq!(pi.total, 1.0, max_relative = 1e-3);
        assert_relative_eq!(pi.tail, (-10.0f64).exp(), max_relative = 1e-9);
        assert!(path_integral_kl(&TrajectoryRecord { axis: Axis::Time, rows: vec![] }).is_err());
    }

    #[test]
    fn langevin_examples() {
        let p = GaussianTarget::standard(1);
        let mut s = rng::stream(2, "lv");
        assert_eq!(langevin_step(&p, &[1.5], 0.0, NoiseConvention::Sde, &mut s).unwrap(), vec![1.5]);
        let run = |seed| {
            let mut s = rng::stream(seed, "lv");
            let mut x = vec![0.3];
            for _ in 0..100 {
                x = langevin_step(&p, &x, 0.01, NoiseConvention::Sde, &mut s).unwrap();
            }
            x[0].to_bits()
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
        assert_eq!(NoiseConvention::PaperLiteral.scale(0.04), 0.4);
        assert_relative_eq!(NoiseConvention::Sde.scale(0.02), 0.2, epsilon = 1e-15);
    }

    #[test]
    fn langevin_long_chain_variance() {
        let p = GaussianTarget::standard(1);
        let mut s = rng::stream(5, "lv-long");
        let mut x = vec![0.0];
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        let n = 1_000_000;
        for _ in 0..n {
            x = langevin_step(&p, &x, 0.01, NoiseConvention::Sde, &mut s).unwrap();
            sum += x[0];
            sum_sq += x[0] * x[0];
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        assert!((var - 1.0).abs() < 0.05, "{var}");
    }

    #[test]
    fn langevin_ensemble_is_thread_independent() {
        let p = GaussianTarget::standard(1);
        let init = Points::from_scalars(&[3.0; 16]);
        let cfg = LangevinConfig {
            step: 0.05,
            n_steps: 40,
            noise: NoiseConvention::Sde,
            record_every: 10,
        };
        let a = run_langevin(&p, &rbf1(), &init, &cfg, 9).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| run_langevin(&p, &rbf1(), &init, &cfg, 9).unwrap());
        assert_eq!(a.final_ensemble.positions(), b.final_ensemble.positions());
        assert_eq!(a.record.rows.len(), 5);
    }

    #[test]
    fn ou_examples() {
        let s0 = OuState { mean: 2.0, variance: 1.0, time: 0.0 };
        assert_eq!(ou_closed_form(s0, 0.0).unwrap(), s0);
        let s = ou_closed_form(s0, 2f64.ln()).unwrap();
        assert_relative_eq!(s.mean, 1.0, epsilon = 1e-15);
        assert_relative_eq!(s.variance, 1.0, epsilon = 1e-15);
        let s = ou_closed_form(OuState { mean: 2.0, variance: 4.0, time: 0.0 }, 30.0).unwrap();
        assert!(s.mean.abs() < 1e-12 && (s.variance - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fisher_examples() {
        assert_eq!(fisher_divergence_gaussian(0.4, 1.3, 0.4, 1.3).unwrap(), 0.0);
        assert_eq!(fisher_divergence_gaussian(2.0, 1.0, 0.0, 1.0).unwrap(), 4.0);
        assert_relative_eq!(fisher_divergence_gaussian(0.0, 2.0, 0.0, 1.0).unwrap(), 0.5, epsilon = 1e-15);
        assert!(fisher_divergence_gaussian(0.0, 0.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn langevin_kl_rate_equals_minus_fisher() {
        let s0 = OuState { mean: 2.0, variance: 4.0, time: 0.0 };
        let kl = |t: f64| {
            let s = ou_closed_form(s0, t).unwrap();
            kl_gaussian(&[s.mean], &[s.variance], &[0.0], &[1.0]).unwrap()
        };
        let h = 1e-4;
        for t in [0.1, 0.5, 1.0] {
            let fd = (kl(t + h) - kl(t - h)) / (2.0 * h);
            let s = ou_closed_form(s0, t).unwrap();
            let f = fisher_divergence_gaussian(s.mean, s.variance, 0.0, 1.0).unwrap();
            assert!(((fd + f) / f).abs() < 1e-4, "t={t}: {fd} vs {}", -f);
        }
    }
}
