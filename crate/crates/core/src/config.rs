//! Experiment configuration: flat dotted-key TOML.
//!
//! ```toml
//! seed = 7
//! n_particles = 100
//! target.family = "gaussian"
//! target.mean = [0.0]
//! target.cov = 1.0
//! kernel.family = "rbf"
//! kernel.bandwidth = "median"
//! init.mean = [10.0]
//! schedule.mode = "capped"
//! schedule.base = 0.5
//! run.max_iter = 500
//! ```
//!
//! Parsing reports every problem at once, keyed by dotted path; unknown keys
//! are rejected.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use toml::Value;

use crate::continuum::{Integrator, LangevinConfig, NoiseConvention, OdeConfig};
use crate::error::{Error, Result};
use crate::kernels::{Bandwidth, KernelConfig, KernelFamily, KernelSpec};
use crate::svgd::{ParticleEnsemble, RunConfig, StepMode, StepSchedule};
use crate::targets::{GaussianTarget, MixtureTarget, TargetModel};
use crate::verify::{StepRule, VerifyConfig};

/// Gaussian component as written in the config: mean and covariance
/// (scalar variance, diagonal, or row-major full matrix).
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSpec {
    pub mean: Vec<f64>,
    pub cov: Vec<f64>,
}

impl GaussianSpec {
    fn build(&self, key: &str) -> Result<GaussianTarget> {
        let d = self.mean.len();
        let cov = expand_cov(&self.cov, d).ok_or_else(|| {
            Error::config(format!("{key}.cov"), format!("expected 1, {d} or {} entries", d * d))
        })?;
        GaussianTarget::new(self.mean.clone(), cov).map_err(|e| Error::config(format!("{key}.cov"), e.to_string()))
    }
}

fn expand_cov(cov: &[f64], d: usize) -> Option<DMatrix<f64>> {
    match cov.len() {
        1 => Some(DMatrix::identity(d, d) * cov[0]),
        n if n == d => Some(DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(cov))),
        n if n == d * d => Some(DMatrix::from_row_slice(d, d, cov)),
        _ => None,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TargetSpec {
    Gaussian(GaussianSpec),
    Mixture { weights: Vec<f64>, components: Vec<GaussianSpec> },
}

#[derive(Clone, Debug, PartialEq)]
pub enum InitSpec {
    Gaussian(GaussianSpec),
    Grid { lo: Vec<f64>, hi: Vec<f64> },
}

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub n_particles: usize,
    pub target: TargetSpec,
    pub kernel: KernelConfig,
    pub init: InitSpec,
    pub schedule: StepSchedule,
    pub run: RunConfig,
    pub flow: OdeConfig,
    pub langevin: LangevinConfig,
    pub verify: VerifyConfig,
    pub svg: bool,
    target_model: TargetModel,
}

impl PartialEq for ExperimentConfig {
    /// The target model is derived from `target`, so it is not compared.
    fn eq(&self, other: &Self) -> bool {
        self.seed == other.seed
            && self.n_particles == other.n_particles
            && self.target == other.target
            && self.kernel == other.kernel
            && self.init == other.init
            && self.schedule == other.schedule
            && self.run == other.run
            && self.flow == other.flow
            && self.langevin == other.langevin
            && self.verify == other.verify
            && self.svg == other.svg
    }
}

impl ExperimentConfig {
    pub fn target(&self) -> &TargetModel {
        &self.target_model
    }

    pub fn dim(&self) -> usize {
        use crate::targets::Target;
        self.target_model.dim()
    }

    /// Initial ensemble, drawn from the `init` stream of the master seed.
    /// Gaussian initialisations carry exact log densities.
    pub fn initial_ensemble(&self) -> Result<ParticleEnsemble> {
        match &self.init {
            InitSpec::Gaussian(g) => {
                let q0 = g.build("init")?;
                let mut stream = crate::rng::stream(self.seed, "init");
                Ok(ParticleEnsemble::sample_gaussian(&q0, self.n_particles, &mut stream, true))
            }
            InitSpec::Grid { lo, hi } => ParticleEnsemble::grid(lo, hi, self.n_particles),
        }
    }

    /// Canonical text form; parsing it yields an identical configuration.
    pub fn to_config_text(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        put("seed", self.seed.to_string());
        put("n_particles", self.n_particles.to_string());
        match &self.target {
            TargetSpec::Gaussian(g) => {
                put("target.family", quoted("gaussian"));
                put("target.mean", floats(&g.mean));
                put("target.cov", floats(&g.cov));
            }
            TargetSpec::Mixture { weights, components } => {
                put("target.family", quoted("mixture"));
                put("target.weights", floats(weights));
                let comps: Vec<String> = components
                    .iter()
                    .map(|c| format!("{{ mean = {}, cov = {} }}", floats(&c.mean), floats(&c.cov)))
                    .collect();
                put("target.components", format!("[{}]", comps.join(", ")));
            }
        }
        put("kernel.family", quoted(self.kernel.family.name()));
        put(
            "kernel.bandwidth",
            match self.kernel.bandwidth {
                Bandwidth::Median => quoted("median"),
                Bandwidth::Fixed(h) => float(h),
            },
        );
        put("kernel.imq_offset", float(self.kernel.imq_offset));
        put("kernel.imq_exponent", float(self.kernel.imq_exponent));
        match &self.init {
            InitSpec::Gaussian(g) => {
                put("init.family", quoted("gaussian"));
                put("init.mean", floats(&g.mean));
                put("init.cov", floats(&g.cov));
            }
            InitSpec::Grid { lo, hi } => {
                put("init.family", quoted("grid"));
                put("init.lo", floats(lo));
                put("init.hi", floats(hi));
            }
        }
        put("schedule.mode", quoted(self.schedule.mode.name()));
        put("schedule.base", float(self.schedule.base));
        put("schedule.beta", float(self.schedule.beta));
        put("schedule.safety", float(self.schedule.safety));
        put("run.max_iter", self.run.max_iter.to_string());
        put("run.record_every", self.run.record_every.to_string());
        put("run.snapshot_every", self.run.snapshot_every.unwrap_or(0).to_string());
        put("run.track_density", self.run.track_density.to_string());
        put("flow.integrator", quoted(self.flow.integrator.name()));
        put("flow.dt", float(self.flow.dt));
        put("flow.t_end", float(self.flow.t_end));
        put("flow.record_every", self.flow.record_every.to_string());
        put("langevin.step", float(self.langevin.step));
        put("langevin.n_steps", self.langevin.n_steps.to_string());
        put("langevin.noise_convention", quoted(self.langevin.noise.name()));
        put("langevin.record_every", self.langevin.record_every.to_string());
        let v = &self.verify;
        put("verify.bandwidth", float(v.bandwidth));
        put("verify.init_mean", float(v.init_mean));
        put("verify.init_var", float(v.init_var));
        put("verify.descent_n", v.descent_n.to_string());
        put("verify.descent_steps", v.descent_steps.to_string());
        match v.descent_rule {
            StepRule::Fixed(e) => put("verify.descent_step", float(e)),
            StepRule::CapFraction(f) => put("verify.descent_cap_fraction", float(f)),
        }
        put("verify.rate_n", v.rate_n.to_string());
        put("verify.rate_dt", float(v.rate_dt));
        put("verify.rate_times", floats(&v.rate_times));
        put("verify.rate_tolerance", float(v.rate_tolerance));
        put("verify.logdet_trials", v.logdet_trials.to_string());
        put("verify.bl_pairs", v.bl_pairs.to_string());
        put("verify.bl_max_points", v.bl_max_points.to_string());
        put("verify.bl_epsilon", float(v.bl_epsilon));
        put("verify.fixed_point_n", v.fixed_point_n.to_string());
        put("verify.fixed_point_shift", float(v.fixed_point_shift));
        put("verify.norm_trials", v.norm_trials.to_string());
        put("verify.norm_max_n", v.norm_max_n.to_string());
        put("verify.norm_max_d", v.norm_max_d.to_string());
        put("output.svg", self.svg.to_string());
        out
    }
}

fn quoted(s: &str) -> String {
    format!("{s:?}")
}

fn float(v: f64) -> String {
    format!("{v:?}")
}

fn floats(v: &[f64]) -> String {
    let items: Vec<String> = v.iter().map(|x| float(*x)).collect();
    format!("[{}]", items.join(", "))
}

const KNOWN_KEYS: &[&str] = &[
    "seed",
    "n_particles",
    "target.family",
    "target.mean",
    "target.cov",
    "target.weights",
    "target.components",
    "kernel.family",
    "kernel.bandwidth",
    "kernel.imq_offset",
    "kernel.imq_exponent",
    "init.family",
    "init.mean",
    "init.cov",
    "init.lo",
    "init.hi",
    "schedule.mode",
    "schedule.base",
    "schedule.beta",
    "schedule.safety",
    "run.max_iter",
    "run.record_every",
    "run.snapshot_every",
    "run.track_density",
    "flow.integrator",
    "flow.dt",
    "flow.t_end",
    "flow.record_every",
    "langevin.step",
    "langevin.n_steps",
    "langevin.noise_convention",
    "langevin.record_every",
    "verify.seed",
    "verify.bandwidth",
    "verify.init_mean",
    "verify.init_var",
    "verify.descent_n",
    "verify.descent_steps",
    "verify.descent_step",
    "verify.descent_cap_fraction",
    "verify.rate_n",
    "verify.rate_dt",
    "verify.rate_times",
    "verify.rate_tolerance",
    "verify.logdet_trials",
    "verify.bl_pairs",
    "verify.bl_max_points",
    "verify.bl_epsilon",
    "verify.fixed_point_n",
    "verify.fixed_point_shift",
    "verify.norm_trials",
    "verify.norm_max_n",
    "verify.norm_max_d",
    "output.svg",
];

fn flatten(prefix: &str, table: &toml::Table, out: &mut BTreeMap<String, Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            other => {
                out.insert(key, other.clone());
            }
        }
    }
}

/// Typed access to the flattened keys, collecting errors instead of
/// stopping at the first.
struct Reader {
    values: BTreeMap<String, Value>,
    errors: Vec<Error>,
}

impl Reader {
    fn bad(&mut self, key: &str, msg: impl Into<String>) {
        self.errors.push(Error::config(key, msg));
    }

    fn has(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    fn float(&mut self, key: &str, default: f64) -> f64 {
        match self.values.get(key) {
            None => default,
            Some(v) => match as_f64(v) {
                Some(x) => x,
                None => {
                    self.bad(key, "expected a number");
                    default
                }
            },
        }
    }

    fn count(&mut self, key: &str, default: usize) -> usize {
        match self.values.get(key) {
            None => default,
            Some(Value::Integer(i)) if *i >= 0 => *i as usize,
            Some(_) => {
                self.bad(key, "expected a non-negative integer");
                default
            }
        }
    }

    fn boolean(&mut self, key: &str, default: bool) -> bool {
        match self.values.get(key) {
            None => default,
            Some(Value::Boolean(b)) => *b,
            Some(_) => {
                self.bad(key, "expected true or false");
                default
            }
        }
    }

    fn string(&mut self, key: &str, default: &str) -> String {
        match self.values.get(key) {
            None => default.to_string(),
            Some(Value::String(s)) => s.clone(),
            Some(_) => {
                self.bad(key, "expected a string");
                default.to_string()
            }
        }
    }

    fn floats_opt(&mut self, key: &str) -> Option<Vec<f64>> {
        let v = self.values.get(key)?.clone();
        let parsed = floats_of(&v);
        if parsed.is_none() {
            self.bad(key, "expected a number or an array of numbers");
        }
        parsed
    }

    fn floats(&mut self, key: &str, default: &[f64]) -> Vec<f64> {
        self.floats_opt(key).unwrap_or_else(|| default.to_vec())
    }

    fn positive(&mut self, key: &str, default: f64) -> f64 {
        let v = self.float(key, default);
        if !(v > 0.0 && v.is_finite()) {
            self.bad(key, "must be a positive number");
        }
        v
    }
}

fn as_f64(v: &Value) -> Option<f64> {
    match v {
        Value::Float(f) => Some(*f),
        Value::Integer(i) => Some(*i as f64),
        _ => None,
    }
}

fn floats_of(v: &Value) -> Option<Vec<f64>> {
    match v {
        Value::Array(items) => items.iter().map(as_f64).collect(),
        other => as_f64(other).map(|x| vec![x]),
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Parses and validates a configuration, returning every error found.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| {
        let line = e.span().map_or(0, |s| line_of(text, s.start));
        Error::config(format!("line {line}"), format!("syntax error: {}", e.message()))
    })?;
    let mut values = BTreeMap::new();
    flatten("", &table, &mut values);
    let mut r = Reader {
        values,
        errors: Vec::new(),
    };
    let unknown: Vec<String> = r.values.keys().filter(|k| !KNOWN_KEYS.contains(&k.as_str())).cloned().collect();
    for k in unknown {
        r.bad(&k, "unknown key");
    }

    let seed = match r.values.get("seed") {
        None => 0,
        Some(Value::Integer(i)) if *i >= 0 => *i as u64,
        Some(_) => {
            r.bad("seed", "expected a non-negative integer");
            0
        }
    };
    let n_particles = r.count("n_particles", 100);
    if n_particles == 0 {
        r.bad("n_particles", "must be >= 1");
    }

    // target
    let family = r.string("target.family", "gaussian");
    let (target, target_model) = match family.as_str() {
        "gaussian" => {
            let spec = GaussianSpec {
                mean: r.floats("target.mean", &[0.0]),
                cov: r.floats("target.cov", &[1.0]),
            };
            let model = match spec.build("target") {
                Ok(g) => TargetModel::Gaussian(g),
                Err(e) => {
                    r.errors.push(e);
                    TargetModel::Gaussian(GaussianTarget::standard(spec.mean.len().max(1)))
                }
            };
            (TargetSpec::Gaussian(spec), model)
        }
        "mixture" => {
            let weights = r.floats("target.weights", &[]);
            let mut components = Vec::new();
            match r.values.get("target.components").cloned() {
                Some(Value::Array(items)) => {
                    for (i, item) in items.iter().enumerate() {
                        let key = format!("target.components[{i}]");
                        let t = match item {
                            Value::Table(t) => t,
                            _ => {
                                r.bad(&key, "expected a table { mean = [...], cov = ... }");
                                continue;
                            }
                        };
                        let mean = t.get("mean").and_then(floats_of);
                        let cov = t.get("cov").and_then(floats_of);
                        if t.keys().any(|k| k != "mean" && k != "cov") {
                            r.bad(&key, "only `mean` and `cov` are allowed");
                        }
                        match (mean, cov) {
                            (Some(mean), Some(cov)) => components.push(GaussianSpec { mean, cov }),
                            _ => r.bad(&key, "needs numeric `mean` and `cov`"),
                        }
                    }
                }
                _ => r.bad("target.components", "expected an array of tables"),
            }
            let mut built = Vec::new();
            for (i, c) in components.iter().enumerate() {
                match c.build(&format!("target.components[{i}]")) {
                    Ok(g) => built.push(g),
                    Err(e) => r.errors.push(e),
                }
            }
            let model = if built.len() == components.len() && !built.is_empty() {
                match MixtureTarget::new(weights.clone(), built) {
                    Ok(m) => TargetModel::Mixture(m),
                    Err(e) => {
                        r.bad("target.weights", e.to_string());
                        TargetModel::Gaussian(GaussianTarget::standard(1))
                    }
                }
            } else {
                TargetModel::Gaussian(GaussianTarget::standard(1))
            };
            (TargetSpec::Mixture { weights, components }, model)
        }
        other => {
            r.bad("target.family", format!("unknown family {other:?} (gaussian, mixture)"));
            (
                TargetSpec::Gaussian(GaussianSpec {
                    mean: vec![0.0],
                    cov: vec![1.0],
                }),
                TargetModel::Gaussian(GaussianTarget::standard(1)),
            )
        }
    };
    let dim = {
        use crate::targets::Target;
        target_model.dim()
    };

    // kernel
    let kfam = r.string("kernel.family", "rbf");
    let family = KernelFamily::parse(&kfam).unwrap_or_else(|| {
        r.bad("kernel.family", format!("unknown family {kfam:?} (rbf, imq, linear)"));
        KernelFamily::Rbf
    });
    let bandwidth = match r.values.get("kernel.bandwidth").cloned() {
        None => Bandwidth::Median,
        Some(Value::String(s)) if s == "median" => Bandwidth::Median,
        Some(v) => match as_f64(&v) {
            Some(h) => Bandwidth::Fixed(h),
            None => {
                r.bad("kernel.bandwidth", "expected \"median\" or a positive number");
                Bandwidth::Median
            }
        },
    };
    let kernel = KernelConfig {
        family,
        bandwidth,
        imq_offset: r.float("kernel.imq_offset", 1.0),
        imq_exponent: r.float("kernel.imq_exponent", -0.5),
    };
    let probe = KernelSpec {
        family,
        bandwidth: match bandwidth {
            Bandwidth::Fixed(h) => h,
            Bandwidth::Median => 1.0,
        },
        imq_exponent: kernel.imq_exponent,
        imq_offset: kernel.imq_offset,
    };
    if let Err(e) = probe.validated() {
        r.errors.push(e);
    }

    // initialisation
    let ifam = r.string("init.family", "gaussian");
    let init = match ifam.as_str() {
        "gaussian" => {
            let spec = GaussianSpec {
                mean: r.floats("init.mean", &vec![0.0; dim]),
                cov: r.floats("init.cov", &[1.0]),
            };
            if spec.mean.len() != dim {
                r.bad("init.mean", format!("expected {dim} entries to match the target"));
            } else if let Err(e) = spec.build("init") {
                r.errors.push(e);
            }
            InitSpec::Gaussian(spec)
        }
        "grid" => {
            let lo = r.floats("init.lo", &vec![-1.0; dim]);
            let hi = r.floats("init.hi", &vec![1.0; dim]);
            if lo.len() != dim || hi.len() != dim {
                r.bad("init.lo", format!("init.lo and init.hi need {dim} entries"));
            } else if lo.iter().zip(&hi).any(|(a, b)| !(a <= b)) {
                r.bad("init.hi", "must be >= init.lo in every coordinate");
            }
            InitSpec::Grid { lo, hi }
        }
        other => {
            r.bad("init.family", format!("unknown family {other:?} (gaussian, grid)"));
            InitSpec::Grid {
                lo: vec![-1.0; dim],
                hi: vec![1.0; dim],
            }
        }
    };

    // schedule and run
    let mode_name = r.string("schedule.mode", "constant");
    let mode = StepMode::parse(&mode_name).unwrap_or_else(|| {
        r.bad("schedule.mode", format!("unknown mode {mode_name:?} (constant, capped, ksd_proportional)"));
        StepMode::Constant
    });
    let schedule = StepSchedule {
        mode,
        base: r.positive("schedule.base", 0.05),
        beta: r.positive("schedule.beta", 1.0),
        safety: r.float("schedule.safety", 0.5),
    };
    if !(schedule.safety > 0.0 && schedule.safety <= 1.0) {
        r.bad("schedule.safety", "must lie in (0, 1]");
    }
    let max_iter = r.count("run.max_iter", 200);
    let record_every = r.count("run.record_every", 1);
    let snapshot_every = r.count("run.snapshot_every", 0);
    let track_density = r.boolean("run.track_density", false);
    if max_iter == 0 {
        r.bad("run.max_iter", "must be >= 1");
    }
    if record_every == 0 {
        r.bad("run.record_every", "must be >= 1");
    }
    if track_density && !matches!(init, InitSpec::Gaussian(_)) {
        r.bad("run.track_density", "needs a gaussian initialisation with a known density");
    }
    let run = RunConfig {
        schedule,
        max_iter,
        record_every,
        snapshot_every: (snapshot_every > 0).then_some(snapshot_every),
        track_density,
    };

    // flow
    let integ = r.string("flow.integrator", "rk4");
    let integrator = Integrator::parse(&integ).unwrap_or_else(|| {
        r.bad("flow.integrator", format!("unknown integrator {integ:?} (euler, rk4)"));
        Integrator::Rk4
    });
    let flow = OdeConfig {
        integrator,
        dt: r.positive("flow.dt", 0.01),
        t_end: r.float("flow.t_end", 1.0),
        record_every: r.count("flow.record_every", 10),
    };
    if let Err(e) = flow.validate() {
        r.errors.push(e);
    }

    // langevin
    let noise_name = r.string("langevin.noise_convention", "sde");
    let noise = NoiseConvention::parse(&noise_name).unwrap_or_else(|| {
        r.bad("langevin.noise_convention", format!("unknown convention {noise_name:?} (sde, paper_literal)"));
        NoiseConvention::Sde
    });
    let langevin = LangevinConfig {
        step: r.positive("langevin.step", 0.01),
        n_steps: r.count("langevin.n_steps", 1000),
        noise,
        record_every: r.count("langevin.record_every", 10),
    };
    if langevin.record_every == 0 {
        r.bad("langevin.record_every", "must be >= 1");
    }

    // verify
    let dv = VerifyConfig::default();
    let descent_rule = match (r.has("verify.descent_step"), r.has("verify.descent_cap_fraction")) {
        (true, true) => {
            r.bad("verify.descent_step", "set at most one of descent_step and descent_cap_fraction");
            dv.descent_rule
        }
        (true, false) => {
            let e = r.float("verify.descent_step", 0.01);
            if !(e >= 0.0 && e.is_finite()) {
                r.bad("verify.descent_step", "must be a non-negative number");
            }
            StepRule::Fixed(e)
        }
        (false, true) => StepRule::CapFraction(r.positive("verify.descent_cap_fraction", 0.5)),
        (false, false) => dv.descent_rule,
    };
    let verify_seed = match r.values.get("verify.seed") {
        None => seed,
        Some(Value::Integer(i)) if *i >= 0 => *i as u64,
        Some(_) => {
            r.bad("verify.seed", "expected a non-negative integer");
            seed
        }
    };
    let verify = VerifyConfig {
        seed: verify_seed,
        bandwidth: r.positive("verify.bandwidth", dv.bandwidth),
        init_mean: r.float("verify.init_mean", dv.init_mean),
        init_var: r.positive("verify.init_var", dv.init_var),
        descent_n: r.count("verify.descent_n", dv.descent_n),
        descent_steps: r.count("verify.descent_steps", dv.descent_steps),
        descent_rule,
        rate_n: r.count("verify.rate_n", dv.rate_n),
        rate_dt: r.positive("verify.rate_dt", dv.rate_dt),
        rate_times: r.floats("verify.rate_times", &dv.rate_times),
        rate_tolerance: r.positive("verify.rate_tolerance", dv.rate_tolerance),
        logdet_trials: r.count("verify.logdet_trials", dv.logdet_trials),
        bl_pairs: r.count("verify.bl_pairs", dv.bl_pairs),
        bl_max_points: r.count("verify.bl_max_points", dv.bl_max_points),
        bl_epsilon: r.float("verify.bl_epsilon", dv.bl_epsilon),
        fixed_point_n: r.count("verify.fixed_point_n", dv.fixed_point_n),
        fixed_point_shift: r.float("verify.fixed_point_shift", dv.fixed_point_shift),
        norm_trials: r.count("verify.norm_trials", dv.norm_trials),
        norm_max_n: r.count("verify.norm_max_n", dv.norm_max_n),
        norm_max_d: r.count("verify.norm_max_d", dv.norm_max_d),
    };
    let svg = r.boolean("output.svg", false);

    if !r.errors.is_empty() {
        return Err(Error::ConfigErrors(r.errors));
    }
    Ok(ExperimentConfig {
        seed,
        n_particles,
        target,
        kernel,
        init,
        schedule,
        run,
        flow,
        langevin,
        verify,
        svg,
        target_model,
    })
}
