//! Hamiltonian Monte Carlo with full velocity refresh and collocation-solved
//! Hamiltonian flow, in a generic mode and a GLM fast path.

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::basis::{shared_uniform_template, CollocationBasis, GammaPolicy};
use crate::collocation::{
    chain_solve_end, segment_count, KthOrderProblem, NormKind, SolverOptions,
};
use crate::densities::{glm_step_plan, iteration_count_formula, Density, GlmDensity, GlmStepPlan};
use crate::error::{Error, Result};
use crate::linalg::{norm2, norm_inf};
use crate::scalar::{lit, Scalar};

/// `m₂^{1/4} / (2 M₂^{3/4})`, the largest admissible step.
pub fn step_size_cap<T: Scalar>(m2: T, big_m2: T) -> T {
    m2.powf(lit(0.25)) / (lit::<T>(2.0) * big_m2.powf(lit(0.75)))
}

/// `m₂^{1/4} / (16000 M₂^{3/4})`.
pub fn default_step_size<T: Scalar>(m2: T, big_m2: T) -> T {
    m2.powf(lit(0.25)) / (lit::<T>(16000.0) * big_m2.powf(lit(0.75)))
}

/// Largest piece count a single step may request.
pub const MAX_PIECES: usize = 1 << 20;

/// Relative slack allowed above the cap for round-off.
const CAP_ROUNDOFF: f64 = 1e-12;

/// Which flow the sampler integrates.
#[derive(Debug, Clone, PartialEq)]
pub enum SamplerMode<T> {
    /// `x″ = -∇f(x)` on piecewise quadratic solutions.
    Generic,
    /// `s″ = -AAᵀφ′(s) - m₂ s` on one high-degree piece per segment.
    Glm(GlmStepPlan<T>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct HmcConfig<T> {
    pub h: T,
    pub n_iters: usize,
    pub eps: T,
    /// `m₂ h² / 8`
    pub theta: T,
    /// Per-step `ℓ₂` accuracy `ε̄`.
    pub ode_accuracy: T,
    pub seed: u64,
    pub mode: SamplerMode<T>,
    pub gamma_policy: GammaPolicy,
    /// Keep every iterate instead of only the final one.
    pub record_trajectory: bool,
    /// Keep one [`IterationRecord`] per iteration.
    pub record_diagnostics: bool,
    /// Set when the step size bypassed the cap check.
    pub forced_step: bool,
}

impl<T: Scalar> HmcConfig<T> {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_iterations(mut self, n: usize) -> Self {
        self.n_iters = n.max(1);
        self
    }

    pub fn with_gamma_policy(mut self, policy: GammaPolicy) -> Self {
        self.gamma_policy = policy;
        self
    }

    pub fn with_ode_accuracy(mut self, eps_bar: T) -> Self {
        self.ode_accuracy = eps_bar;
        self
    }

    pub fn with_trajectory(mut self, on: bool) -> Self {
        self.record_trajectory = on;
        self
    }

    pub fn with_diagnostics(mut self, on: bool) -> Self {
        self.record_diagnostics = on;
        self
    }

    /// Check the fields a run depends on.
    pub fn validate(&self) -> Result<()> {
        let pos = |v: T, name: &str| {
            if v.is_finite() && v > T::zero() {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")))
            }
        };
        pos(self.h, "step size")?;
        pos(self.eps, "eps")?;
        pos(self.ode_accuracy, "ODE accuracy")?;
        if self.n_iters == 0 {
            return Err(Error::InvalidArgument("iteration count must be positive".into()));
        }
        Ok(())
    }
}

/// Piece layout of one step's basis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PiecePlan {
    pub pieces: usize,
    /// Degree of the solution polynomial on each piece.
    pub degree: usize,
}

impl PiecePlan {
    /// `k` pieces with quadratic solutions.
    pub fn generic(pieces: usize) -> Self {
        Self {
            pieces: pieces.max(1),
            degree: 2,
        }
    }

    /// One piece with a degree-`D` solution.
    pub fn glm(degree: usize) -> Self {
        Self {
            pieces: 1,
            degree: degree.max(2),
        }
    }

    /// Degree of the collocated second derivative.
    pub fn basis_degree(&self) -> usize {
        self.degree - 2
    }
}

/// `k = ⌈2 M₂ h³ (‖v‖ + ‖∇f‖ h) / ε_ode⌉`, at least one.
pub fn piece_count_generic<T: Scalar>(big_m2: T, h: T, v_norm: T, grad_norm: T, eps_ode: T) -> usize {
    let k = lit::<T>(2.0) * big_m2 * h * h * h * (v_norm + grad_norm * h) / eps_ode;
    let k = k.ceil().to_f64_lossy();
    if k.is_finite() && k >= 1.0 {
        k.min(usize::MAX as f64) as usize
    } else {
        1
    }
}

fn check_eps<T: Scalar>(eps: T, d: usize) -> Result<()> {
    let hi = T::from_usize_lossy(d).sqrt();
    if !(eps > T::zero() && eps < hi) {
        return Err(Error::OutOfRange {
            value: eps.to_f64_lossy(),
            lo: 0.0,
            hi: hi.to_f64_lossy(),
        });
    }
    Ok(())
}

fn build_generic_config<T: Scalar, D: Density<T> + ?Sized>(
    density: &D,
    x0: &[T],
    eps: T,
    h: T,
    forced: bool,
) -> Result<HmcConfig<T>> {
    let d = density.dim();
    if x0.len() != d {
        return Err(Error::Dimension {
            expected: d,
            got: x0.len(),
        });
    }
    check_eps(eps, d)?;
    let m2 = density.m2();
    let big_m2 = density.big_m2();
    if !(h.is_finite() && h > T::zero()) {
        return Err(Error::InvalidArgument(format!("step size must be positive, got {h}")));
    }
    let cap = step_size_cap(m2, big_m2);
    if !forced && h > cap * lit(1.0 + CAP_ROUNDOFF) {
        return Err(Error::Precondition {
            condition: "step-size cap h ≤ m₂^{1/4}/(2·M₂^{3/4})".into(),
            value: h.to_f64_lossy(),
            bound: cap.to_f64_lossy(),
        });
    }
    let theta = m2 * h * h / lit(8.0);
    let grad_norm = norm2(&density.gradient_vec(x0));
    let n_iters = iteration_count_formula(theta, eps, grad_norm, m2, d);
    Ok(HmcConfig {
        h,
        n_iters,
        eps,
        theta,
        ode_accuracy: theta * eps / (lit::<T>(2.0) * m2.sqrt()),
        seed: 0,
        mode: SamplerMode::Generic,
        gamma_policy: GammaPolicy::Certified,
        record_trajectory: false,
        record_diagnostics: true,
        forced_step: forced,
    })
}

/// Generic-mode defaults: `h = m₂^{1/4}/(16000 M₂^{3/4})`, `θ = m₂h²/8`,
/// `N = ⌈(1/θ) log(4/ε² (‖∇f(x⁰)‖²/m₂ + d))⌉`, `ε̄ = θε/(2√m₂)`.
pub fn default_config<T: Scalar, D: Density<T> + ?Sized>(
    density: &D,
    x0: &[T],
    eps: T,
) -> Result<HmcConfig<T>> {
    let h = default_step_size(density.m2(), density.big_m2());
    build_generic_config(density, x0, eps, h, false)
}

/// Generic-mode configuration with a user step size, rejected above the cap.
pub fn config_with_step<T: Scalar, D: Density<T> + ?Sized>(
    density: &D,
    x0: &[T],
    eps: T,
    h: T,
) -> Result<HmcConfig<T>> {
    build_generic_config(density, x0, eps, h, false)
}

/// Like [`config_with_step`] without the cap check. Used for negative controls.
pub fn config_with_forced_step<T: Scalar, D: Density<T> + ?Sized>(
    density: &D,
    x0: &[T],
    eps: T,
    h: T,
) -> Result<HmcConfig<T>> {
    build_generic_config(density, x0, eps, h, true)
}

/// GLM fast-path configuration from [`glm_step_plan`].
pub fn glm_config<T: Scalar>(
    density: &GlmDensity<T>,
    x0: &[T],
    eps: T,
    eta: T,
) -> Result<HmcConfig<T>> {
    let plan = glm_step_plan(density, x0, eps, eta)?;
    glm_config_from_plan(density, x0, plan)
}

/// GLM configuration around an existing plan; the plan's step must respect the cap.
pub fn glm_config_from_plan<T: Scalar>(
    density: &GlmDensity<T>,
    x0: &[T],
    plan: GlmStepPlan<T>,
) -> Result<HmcConfig<T>> {
    let mut cfg = build_generic_config(density, x0, plan.eps, plan.h, false)?;
    cfg.n_iters = plan.n_iters;
    cfg.mode = SamplerMode::Glm(plan);
    Ok(cfg)
}

/// Result of one step of the flow.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome<T> {
    pub x: Vec<T>,
    pub v: Vec<T>,
    /// Largest final fixed-point displacement over segments.
    pub residual: T,
    pub solver_iterations: usize,
    pub segments: usize,
    pub pieces: usize,
}

/// Templates on `[0, 1]` keyed by `(pieces, basis degree)`.
#[derive(Debug, Default)]
pub struct BasisCache<T> {
    templates: HashMap<(usize, usize), Arc<CollocationBasis<T>>>,
}

/// Cached templates kept before the cache is cleared.
const BASIS_CACHE_LIMIT: usize = 256;

impl<T: Scalar> BasisCache<T> {
    pub fn new() -> Self {
        Self {
            templates: HashMap::new(),
        }
    }

    pub fn template(&mut self, pieces: usize, degree: usize) -> Result<Arc<CollocationBasis<T>>> {
        if let Some(b) = self.templates.get(&(pieces, degree)) {
            return Ok(b.clone());
        }
        if self.templates.len() >= BASIS_CACHE_LIMIT {
            self.templates.clear();
        }
        let b = shared_uniform_template(pieces, degree)?;
        self.templates.insert((pieces, degree), b.clone());
        Ok(b)
    }
}

/// Smallest segment count with each segment passing the order-2 step-size check,
/// and the per-segment template.
fn plan_segments<T: Scalar>(
    cache: &mut BasisCache<T>,
    plan: &PiecePlan,
    lipschitz: T,
    h: T,
    policy: GammaPolicy,
) -> Result<(usize, Arc<CollocationBasis<T>>)> {
    let mut segs = 1usize;
    loop {
        let per = plan.pieces.div_ceil(segs);
        let template = cache.template(per, plan.basis_degree())?;
        let g = template.gamma(policy).to_f64_lossy();
        let need = segment_count(lipschitz.to_f64_lossy(), h.to_f64_lossy(), g, 2);
        if need <= segs {
            return Ok((segs, template));
        }
        segs = need;
    }
}

/// Solve `y″ = F(y)`, `y(0) = y0`, `y′(0) = v0` to time `h` by chained
/// collocation with the requested end accuracy.
#[allow(clippy::too_many_arguments)]
fn flow<'a, T: Scalar>(
    rhs: impl Fn(&[T], T, &mut [T]) + Send + Sync + 'a,
    y0: &[T],
    v0: &[T],
    h: T,
    l2: T,
    norm: NormKind,
    plan: &PiecePlan,
    accuracy: T,
    options: &SolverOptions,
    cache: &mut BasisCache<T>,
) -> Result<StepOutcome<T>> {
    let problem = KthOrderProblem::new(rhs, vec![y0.to_vec(), v0.to_vec()], h, vec![T::zero(), l2])?
        .with_norm(norm);
    let (segs, template) = plan_segments(cache, plan, l2.sqrt(), h, options.gamma_policy)?;
    let gamma = template.gamma(options.gamma_policy);
    // 20 γ (1 + 2k) amplification of the collocation guarantee at order k = 2
    let solver_eps = accuracy / (lit::<T>(100.0) * gamma);
    let sol = chain_solve_end(&problem, h, segs, &template, solver_eps, options)?;
    let mut end = sol.derivatives;
    let v = end.pop().expect("two derivatives");
    let x = end.pop().expect("two derivatives");
    if x.iter().chain(&v).any(|c| !c.is_finite()) {
        return Err(Error::NonFinite {
            iteration: sol.total_iterations,
            what: "flow endpoint".into(),
        });
    }
    Ok(StepOutcome {
        x,
        v,
        residual: sol.max_residual,
        solver_iterations: sol.total_iterations,
        segments: segs,
        pieces: plan.pieces,
    })
}

/// Approximate `x(h)` for `x″ = -∇f(x)`, `x(0) = x`, `x′(0) = v` with `ℓ₂`
/// error at most `eps_bar` under the piecewise-quadratic approximation.
pub fn hmc_step<T: Scalar, D: Density<T> + ?Sized>(
    density: &D,
    x: &[T],
    v: &[T],
    h: T,
    plan: &PiecePlan,
    eps_bar: T,
    options: &SolverOptions,
) -> Result<StepOutcome<T>> {
    hmc_step_cached(density, x, v, h, plan, eps_bar, options, &mut BasisCache::new())
}

/// [`hmc_step`] reusing basis templates across calls.
#[allow(clippy::too_many_arguments)]
pub fn hmc_step_cached<T: Scalar, D: Density<T> + ?Sized>(
    density: &D,
    x: &[T],
    v: &[T],
    h: T,
    plan: &PiecePlan,
    eps_bar: T,
    options: &SolverOptions,
    cache: &mut BasisCache<T>,
) -> Result<StepOutcome<T>> {
    let d = density.dim();
    if x.len() != d || v.len() != d {
        return Err(Error::Dimension {
            expected: d,
            got: if x.len() != d { x.len() } else { v.len() },
        });
    }
    if plan.pieces > MAX_PIECES {
        return Err(Error::InvalidArgument(format!(
            "step needs {} pieces, more than {MAX_PIECES}; raise the ODE accuracy or shorten h",
            plan.pieces
        )));
    }
    if !(eps_bar.is_finite() && eps_bar > T::zero()) {
        return Err(Error::InvalidArgument(format!(
            "step accuracy must be positive, got {eps_bar}"
        )));
    }
    let rhs = move |y: &[T], _t: T, out: &mut [T]| {
        density.gradient(&y[d..], out);
        out.iter_mut().for_each(|o| *o = -*o);
    };
    flow(
        rhs,
        x,
        v,
        h,
        density.big_m2(),
        NormKind::L2,
        plan,
        eps_bar,
        options,
        cache,
    )
}

/// One GLM step: integrate the s-dynamics from `(Ax, Av)` and map back.
#[derive(Debug, Clone, PartialEq)]
pub struct GlmStepOutcome<T> {
    pub x: Vec<T>,
    pub s_end: Vec<T>,
    pub residual: T,
    pub solver_iterations: usize,
    pub segments: usize,
}

/// s-space flow over `[0, h]` with a single degree-`D` piece per segment in `ℓ∞`.
pub fn glm_step<T: Scalar>(
    density: &GlmDensity<T>,
    x: &[T],
    v: &[T],
    plan: &GlmStepPlan<T>,
    options: &SolverOptions,
    cache: &mut BasisCache<T>,
) -> Result<GlmStepOutcome<T>> {
    let d = density.dim();
    if x.len() != d || v.len() != d {
        return Err(Error::Dimension {
            expected: d,
            got: if x.len() != d { x.len() } else { v.len() },
        });
    }
    let a = density.matrix();
    let n = density.n();
    let s0 = a.matvec(x);
    let sv = a.matvec(v);
    let rhs = move |y: &[T], _t: T, out: &mut [T]| density.s_force(&y[n..], out);
    let accuracy = plan.delta * density.cauchy_r();
    let out = flow(
        rhs,
        &s0,
        &sv,
        plan.h,
        density.s_lipschitz(),
        NormKind::LInf,
        &PiecePlan::glm(plan.degree),
        accuracy,
        options,
        cache,
    )?;
    let x_new = density.recover_x(&out.x)?;
    Ok(GlmStepOutcome {
        x: x_new,
        s_end: out.x,
        residual: out.residual,
        solver_iterations: out.solver_iterations,
        segments: out.segments,
    })
}

/// Per-iteration diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord<T> {
    pub iteration: usize,
    pub velocity_norm: T,
    /// `‖∇f‖₂` at the iterate the step started from.
    pub gradient_norm: T,
    pub residual: T,
    pub solver_iterations: usize,
    pub pieces: usize,
    /// `‖s^{(j)} - s^{(0)}‖∞` in GLM mode.
    pub drift: Option<T>,
}

/// Aggregates kept even when per-iteration records are off.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunSummary<T> {
    pub max_residual: T,
    pub max_drift: Option<T>,
    /// `(1/N) Σ ‖∇f(x^{(k)})‖²` over the iterates each step started from.
    pub mean_gradient_sq: T,
    pub total_solver_iterations: usize,
    pub max_pieces: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HmcRun<T> {
    /// The final iterate, or every iterate `x^{(1)}, …, x^{(N)}` when the
    /// trajectory is recorded.
    pub samples: Vec<Vec<T>>,
    pub diagnostics: Vec<IterationRecord<T>>,
    pub summary: RunSummary<T>,
    pub config: HmcConfig<T>,
    pub x0: Vec<T>,
}

impl<T: Scalar> HmcRun<T> {
    pub fn final_sample(&self) -> &[T] {
        self.samples.last().expect("nonempty run")
    }

    /// Iterates after discarding the first `N/2` (trajectory runs), or the final sample.
    pub fn post_burn_in(&self) -> &[Vec<T>] {
        if self.config.record_trajectory {
            &self.samples[self.samples.len() / 2..]
        } else {
            &self.samples
        }
    }
}

fn draw_velocity<T: Scalar, R: Rng + ?Sized>(rng: &mut R, d: usize) -> Vec<T> {
    (0..d)
        .map(|_| T::lit(rng.sample::<f64, _>(StandardNormal)))
        .collect()
}

struct Recorder<T> {
    samples: Vec<Vec<T>>,
    diagnostics: Vec<IterationRecord<T>>,
    grad_sq: T,
    max_residual: T,
    max_drift: Option<T>,
    iterations: usize,
    max_pieces: usize,
}

impl<T: Scalar> Recorder<T> {
    fn new(config: &HmcConfig<T>) -> Self {
        Self {
            samples: Vec::with_capacity(if config.record_trajectory { config.n_iters } else { 1 }),
            diagnostics: Vec::with_capacity(if config.record_diagnostics { config.n_iters } else { 0 }),
            grad_sq: T::zero(),
            max_residual: T::zero(),
            max_drift: None,
            iterations: 0,
            max_pieces: 0,
        }
    }

    fn push(&mut self, config: &HmcConfig<T>, rec: IterationRecord<T>, x: &[T]) -> Result<()> {
        let values = [rec.velocity_norm, rec.gradient_norm, rec.residual];
        if values.iter().any(|v| !v.is_finite()) || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                iteration: rec.iteration,
                what: "sampler iterate".into(),
            });
        }
        self.grad_sq += rec.gradient_norm * rec.gradient_norm;
        self.max_residual = self.max_residual.max(rec.residual);
        if let Some(dr) = rec.drift {
            self.max_drift = Some(self.max_drift.map_or(dr, |m: T| m.max(dr)));
        }
        self.iterations += rec.solver_iterations;
        self.max_pieces = self.max_pieces.max(rec.pieces);
        if config.record_trajectory {
            self.samples.push(x.to_vec());
        }
        if config.record_diagnostics {
            self.diagnostics.push(rec);
        }
        Ok(())
    }

    fn finish(mut self, config: &HmcConfig<T>, x0: &[T], last: Vec<T>) -> HmcRun<T> {
        if !config.record_trajectory {
            self.samples.push(last);
        }
        HmcRun {
            samples: self.samples,
            diagnostics: self.diagnostics,
            summary: RunSummary {
                max_residual: self.max_residual,
                max_drift: self.max_drift,
                mean_gradient_sq: self.grad_sq / T::from_usize_lossy(config.n_iters),
                total_solver_iterations: self.iterations,
                max_pieces: self.max_pieces,
            },
            config: config.clone(),
            x0: x0.to_vec(),
        }
    }
}

fn solver_options<T>(config: &HmcConfig<T>) -> SolverOptions {
    SolverOptions {
        gamma_policy: config.gamma_policy,
        adaptive_stop: true,
        ..SolverOptions::default()
    }
}

/// Generic-mode sampler: `N` rounds of velocity refresh and an inexact flow step.
pub fn sample<T: Scalar, D: Density<T> + ?Sized, R: Rng + ?Sized>(
    density: &D,
    x0: &[T],
    config: &HmcConfig<T>,
    rng: &mut R,
) -> Result<HmcRun<T>> {
    config.validate()?;
    let d = density.dim();
    if x0.len() != d {
        return Err(Error::Dimension {
            expected: d,
            got: x0.len(),
        });
    }
    let options = solver_options(config);
    let mut cache = BasisCache::new();
    let mut rec = Recorder::new(config);
    let mut x = x0.to_vec();
    let mut grad = vec![T::zero(); d];
    for it in 1..=config.n_iters {
        let v: Vec<T> = draw_velocity(rng, d);
        density.gradient(&x, &mut grad);
        let (vn, gn) = (norm2(&v), norm2(&grad));
        let pieces = piece_count_generic(density.big_m2(), config.h, vn, gn, config.ode_accuracy);
        let plan = PiecePlan::generic(pieces);
        let out = hmc_step_cached(density, &x, &v, config.h, &plan, config.ode_accuracy, &options, &mut cache)?;
        x = out.x;
        rec.push(
            config,
            IterationRecord {
                iteration: it,
                velocity_norm: vn,
                gradient_norm: gn,
                residual: out.residual,
                solver_iterations: out.solver_iterations,
                pieces,
                drift: None,
            },
            &x,
        )?;
    }
    Ok(rec.finish(config, x0, x))
}

/// GLM sampler. Falls back to the generic flow when `A = 0`, where the target
/// is `N(0, I/m₂)`.
pub fn sample_glm<T: Scalar, R: Rng + ?Sized>(
    density: &GlmDensity<T>,
    x0: &[T],
    config: &HmcConfig<T>,
    rng: &mut R,
) -> Result<HmcRun<T>> {
    config.validate()?;
    let plan = match &config.mode {
        SamplerMode::Glm(p) => p.clone(),
        SamplerMode::Generic => {
            return Err(Error::InvalidArgument(
                "sample_glm needs a configuration in GLM mode".into(),
            ))
        }
    };
    if density.matrix().is_zero() {
        let generic = HmcConfig {
            mode: SamplerMode::Generic,
            ..config.clone()
        };
        let mut run = sample(density, x0, &generic, rng)?;
        run.config = config.clone();
        run.summary.max_drift = Some(T::zero());
        for r in &mut run.diagnostics {
            r.drift = Some(T::zero());
        }
        return Ok(run);
    }
    let d = density.dim();
    if x0.len() != d {
        return Err(Error::Dimension {
            expected: d,
            got: x0.len(),
        });
    }
    let plan = GlmStepPlan {
        h: config.h,
        n_iters: config.n_iters,
        ..plan
    };
    let options = solver_options(config);
    let mut cache = BasisCache::new();
    let mut rec = Recorder::new(config);
    let s_start = density.matrix().matvec(x0);
    let mut x = x0.to_vec();
    let mut grad = vec![T::zero(); d];
    let mut diff = vec![T::zero(); density.n()];
    for it in 1..=config.n_iters {
        let v: Vec<T> = draw_velocity(rng, d);
        density.gradient(&x, &mut grad);
        let (vn, gn) = (norm2(&v), norm2(&grad));
        let out = glm_step(density, &x, &v, &plan, &options, &mut cache)?;
        for ((o, a), b) in diff.iter_mut().zip(&out.s_end).zip(&s_start) {
            *o = *a - *b;
        }
        x = out.x;
        rec.push(
            config,
            IterationRecord {
                iteration: it,
                velocity_norm: vn,
                gradient_norm: gn,
                residual: out.residual,
                solver_iterations: out.solver_iterations,
                pieces: out.segments,
                drift: Some(norm_inf(&diff)),
            },
            &x,
        )?;
    }
    Ok(rec.finish(config, x0, x))
}

/// RNG for chain `chain` of a run seeded with `seed`.
pub fn chain_rng(seed: u64, chain: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain);
    rng
}

/// Independent chains in parallel, chain `i` on stream `i` of `config.seed`.
pub fn sample_chains<T: Scalar, D: Density<T> + ?Sized>(
    density: &D,
    x0: &[T],
    config: &HmcConfig<T>,
    chains: usize,
) -> Result<Vec<HmcRun<T>>> {
    (0..chains)
        .into_par_iter()
        .map(|c| sample(density, x0, config, &mut chain_rng(config.seed, c as u64)))
        .collect()
}

/// [`sample_chains`] for the GLM sampler.
pub fn sample_glm_chains<T: Scalar>(
    density: &GlmDensity<T>,
    x0: &[T],
    config: &HmcConfig<T>,
    chains: usize,
) -> Result<Vec<HmcRun<T>>> {
    (0..chains)
        .into_par_iter()
        .map(|c| sample_glm(density, x0, config, &mut chain_rng(config.seed, c as u64)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::densities::{glm_step_plan_with, logistic_family, GlmPlanConstants, QuadraticDensity};
    use crate::linalg::DenseMatrix;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn default_config_standard_gaussian() {
        let g = QuadraticDensity::<f64>::standard(2).unwrap();
        let c = default_config(&g, &[0.0, 0.0], 0.1).unwrap();
        assert_relative_eq!(c.h, 1.0 / 16000.0, epsilon = 1e-20);
        assert_relative_eq!(c.theta, c.h * c.h / 8.0, epsilon = 1e-24);
        let want = ((4.0 * 2.0 / 0.01f64).ln() / c.theta).ceil() as usize;
        assert_eq!(c.n_iters, want);
        assert_relative_eq!(c.ode_accuracy, c.theta * 0.1 / 2.0, epsilon = 1e-24);
    }

    #[test]
    fn default_step_scales_with_condition_number() {
        let a = QuadraticDensity::<f64>::standard(2).unwrap();
        let b = QuadraticDensity::new(vec![1.0, 16.0], vec![0.0; 2]).unwrap();
        let ha = default_config(&a, &[0.0; 2], 0.1).unwrap().h;
        let hb = default_config(&b, &[0.0; 2], 0.1).unwrap().h;
        assert_relative_eq!(hb / ha, 0.125, epsilon = 1e-14);
    }

    #[test]
    fn eps_range_is_enforced() {
        let g = QuadraticDensity::<f64>::standard(4).unwrap();
        assert!(default_config(&g, &[0.0; 4], 0.0).is_err());
        assert!(default_config(&g, &[0.0; 4], 2.0).is_err());
        assert!(default_config(&g, &[0.0; 4], 1.99).is_ok());
    }

    #[test]
    fn step_override_validation() {
        let g = QuadraticDensity::new(vec![1.0, 4.0], vec![0.0; 2]).unwrap();
        let cap = step_size_cap(1.0, 4.0);
        assert!(config_with_step(&g, &[0.0; 2], 0.1, cap).is_ok());
        let err = config_with_step(&g, &[0.0; 2], 0.1, 2.0 * cap).unwrap_err();
        assert!(err.is_precondition());
        assert!(err.to_string().contains("m₂^{1/4}/(2·M₂^{3/4})"));
        let forced = config_with_forced_step(&g, &[0.0; 2], 0.1, 2.0 * cap).unwrap();
        assert!(forced.forced_step);
    }

    #[test]
    fn piece_count_examples() {
        assert_eq!(piece_count_generic(1.0, 0.1, 0.0, 0.0, 1e-6), 1);
        assert_eq!(piece_count_generic(1.0f64, 1.0 / 16.0, 1.0, 0.0, 2f64.powi(-15)), 16);
        let a = piece_count_generic(2.0, 0.3, 1.7, 0.4, 1e-4);
        let b = piece_count_generic(2.0, 0.3, 1.7, 0.4, 2e-4);
        assert!(b == a.div_ceil(2) || b == a / 2);
    }

    #[test]
    fn quadratic_step_matches_closed_form() {
        let g = QuadraticDensity::<f64>::standard(2).unwrap();
        let h = 0.5;
        let x = [0.3, -1.0];
        let v = [1.2, 0.4];
        let eps_bar = 1e-4;
        let k = piece_count_generic(1.0, h, norm2(&v), norm2(&x), eps_bar);
        let out = hmc_step(&g, &x, &v, h, &PiecePlan::generic(k), eps_bar, &SolverOptions::measured())
            .unwrap();
        let exact: Vec<f64> = x.iter().zip(&v).map(|(x, v)| x * h.cos() + v * h.sin()).collect();
        let err = norm2(&[out.x[0] - exact[0], out.x[1] - exact[1]]);
        assert!(err <= eps_bar, "{err}");
        assert!(out.segments >= 4);
    }

    #[test]
    fn equilibrium_stays_put() {
        let g = QuadraticDensity::<f64>::standard(3).unwrap();
        let out = hmc_step(&g, &[0.0; 3], &[0.0; 3], 1e-4, &PiecePlan::generic(1), 1e-6, &SolverOptions::default())
            .unwrap();
        assert_eq!(out.x, vec![0.0; 3]);
    }

    #[test]
    fn certified_step_limit() {
        let g = QuadraticDensity::<f64>::standard(1).unwrap();
        let h = 1.0f64 / 16000.0;
        let out = hmc_step(&g, &[1.0], &[0.5], h, &PiecePlan::generic(2), 1e-10, &SolverOptions::default())
            .unwrap();
        assert_eq!(out.segments, 1);
        assert!((out.x[0] - (h.cos() + 0.5 * h.sin())).abs() < 1e-10);
    }

    #[test]
    fn sample_is_reproducible_and_finite() {
        let g = QuadraticDensity::<f64>::standard(2).unwrap();
        let cfg = config_with_step(&g, &[1.0, 1.0], 0.5, 0.4)
            .unwrap()
            .with_gamma_policy(GammaPolicy::Measured)
            .with_iterations(20)
            .with_trajectory(true);
        let a = sample(&g, &[1.0, 1.0], &cfg, &mut chain_rng(7, 0)).unwrap();
        let b = sample(&g, &[1.0, 1.0], &cfg, &mut chain_rng(7, 0)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.samples.len(), 20);
        assert_eq!(a.diagnostics.len(), 20);
        assert_eq!(a.post_burn_in().len(), 10);
        let c = sample(&g, &[1.0, 1.0], &cfg, &mut chain_rng(7, 1)).unwrap();
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn chains_run_in_parallel_deterministically() {
        let g = QuadraticDensity::<f64>::standard(1).unwrap();
        let cfg = config_with_step(&g, &[0.0], 0.5, 0.5)
            .unwrap()
            .with_gamma_policy(GammaPolicy::Measured)
            .with_iterations(5)
            .with_seed(3);
        let a = sample_chains(&g, &[0.0], &cfg, 4).unwrap();
        let b = sample_chains(&g, &[0.0], &cfg, 4).unwrap();
        assert_eq!(a, b);
        let serial = sample(&g, &[0.0], &cfg, &mut chain_rng(3, 2)).unwrap();
        assert_eq!(a[2], serial);
    }

    #[test]
    fn glm_step_matches_x_space_flow() {
        let a = DenseMatrix::from_rows(&[vec![1.0]]).unwrap();
        let g = GlmDensity::new(a, logistic_family(), 1.0).unwrap();
        let plan = GlmStepPlan {
            h: 0.3,
            n_iters: 1,
            delta: 1e-9,
            degree: 12,
            theta: 0.3 * 0.3 / 8.0,
            log_term: 1.0,
            eps: 0.1,
            eta: 0.1,
            kappa: 2.0,
        };
        let opts = SolverOptions::measured();
        let s = glm_step(&g, &[0.4f64], &[-0.7], &plan, &opts, &mut BasisCache::new()).unwrap();
        let x = hmc_step(&g, &[0.4f64], &[-0.7], 0.3, &PiecePlan { pieces: 1, degree: 12 }, 1e-9, &opts)
            .unwrap();
        assert!((s.x[0] - x.x[0]).abs() < 1e-8, "{} {}", s.x[0], x.x[0]);
    }

    #[test]
    fn glm_zero_matrix_falls_back() {
        let a = DenseMatrix::<f64>::zeros(2, 2);
        let g = GlmDensity::new(a, logistic_family(), 1.0).unwrap();
        let constants = GlmPlanConstants {
            h_override: Some(0.3),
            ..GlmPlanConstants::default()
        };
        let plan = glm_step_plan_with(&g, &[0.0, 0.0], 0.5, 0.1, &constants).unwrap();
        let cfg = glm_config_from_plan(&g, &[0.0, 0.0], plan)
            .unwrap()
            .with_iterations(3)
            .with_gamma_policy(GammaPolicy::Measured);
        let run = sample_glm(&g, &[0.0, 0.0], &cfg, &mut chain_rng(1, 0)).unwrap();
        assert_eq!(run.summary.max_drift, Some(0.0));
        assert!(run.final_sample().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn glm_sampler_records_drift() {
        let a = DenseMatrix::from_rows(&[vec![0.3, 0.1], vec![-0.2, 0.4], vec![0.1, 0.1]]).unwrap();
        let g = GlmDensity::new(a, logistic_family(), 1.0).unwrap();
        let constants = GlmPlanConstants {
            h_override: Some(step_size_cap(g.m2(), g.big_m2())),
            ..GlmPlanConstants::default()
        };
        let plan = glm_step_plan_with(&g, &[0.0, 0.0], 0.5, 0.1, &constants).unwrap();
        let cfg = glm_config_from_plan(&g, &[0.0, 0.0], plan)
            .unwrap()
            .with_iterations(4)
            .with_gamma_policy(GammaPolicy::Measured);
        let run = sample_glm(&g, &[0.0, 0.0], &cfg, &mut chain_rng(5, 0)).unwrap();
        assert_eq!(run.diagnostics.len(), 4);
        assert!(run.diagnostics.iter().all(|r| r.drift.is_some()));
        assert!(run.summary.max_drift.unwrap() > 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn prop_energy_conserved_on_quadratic(
            x in prop::collection::vec(-2.0f64..2.0, 2),
            v in prop::collection::vec(-2.0f64..2.0, 2),
        ) {
            let g = QuadraticDensity::new(vec![1.0, 4.0], vec![0.0; 2]).unwrap();
            let h = step_size_cap(1.0, 4.0);
            let eps_bar = 1e-4;
            let k = piece_count_generic(4.0, h, norm2(&v), norm2(&g.gradient_vec(&x)), eps_bar);
            let out = hmc_step(&g, &x, &v, h, &PiecePlan::generic(k), eps_bar, &SolverOptions::measured()).unwrap();
            let energy = |x: &[f64], v: &[f64]| g.value(x).unwrap() + 0.5 * norm2(v).powi(2);
            let drift = (energy(&out.x, &out.v) - energy(&x, &v)).abs();
            let xn = norm2(&x);
            prop_assert!(drift <= 3.0 * eps_bar * (norm2(&v) + 4.0 * xn) + 1e-12);
        }

        #[test]
        fn prop_reversed_velocity_returns(
            x in prop::collection::vec(-2.0f64..2.0, 2),
            v in prop::collection::vec(-2.0f64..2.0, 2),
        ) {
            let g = QuadraticDensity::new(vec![1.0, 4.0], vec![0.0; 2]).unwrap();
            let h = 0.3;
            let eps_bar = 1e-3;
            let opts = SolverOptions::measured();
            let k = piece_count_generic(4.0, h, norm2(&v), norm2(&g.gradient_vec(&x)), eps_bar);
            let fwd = hmc_step(&g, &x, &v, h, &PiecePlan::generic(k), eps_bar, &opts).unwrap();
            let back_v: Vec<f64> = fwd.v.iter().map(|c| -c).collect();
            let k2 = piece_count_generic(4.0, h, norm2(&back_v), norm2(&g.gradient_vec(&fwd.x)), eps_bar);
            let back = hmc_step(&g, &fwd.x, &back_v, h, &PiecePlan::generic(k2), eps_bar, &opts).unwrap();
            let err = norm2(&[back.x[0] - x[0], back.x[1] - x[1]]);
            prop_assert!(err <= 2.0 * eps_bar + 1e-12, "{}", err);
        }
    }
}
