//! Collocation fixed-point solver for first-order ODEs and the order
//! reduction used for `k`-th order systems.
//!
//! A first-order solve iterates `X ← v 1ᵀ + F(X, c) A_φ` on the node matrix,
//! then returns `x(t) = v + ∫ Σ_j F(X_j, c_j) φ_j`.

use std::sync::Arc;

use rayon::prelude::*;

use crate::basis::{CollocationBasis, GammaPolicy, CERTIFIED_GAMMA};
use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};

/// Hard cap on fixed-point sweeps.
pub const MAX_ITERS_CAP: usize = 64;

/// Reduced states up to this length are unscaled on the stack.
const STACK_STATE: usize = 16;

/// Relative round-off allowance in step-size checks.
const CHECK_ROUNDOFF: f64 = 1e-9;

/// Right-hand side oracle: `(state, time, out)`.
pub type Rhs<'a, T> = Arc<dyn Fn(&[T], T, &mut [T]) + Send + Sync + 'a>;

/// Vector norm used for Lipschitz constants and displacement tracking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NormKind {
    #[default]
    LInf,
    L2,
}

impl NormKind {
    pub fn norm<T: Scalar>(self, v: &[T]) -> T {
        match self {
            NormKind::LInf => crate::linalg::norm_inf(v),
            NormKind::L2 => crate::linalg::norm2(v),
        }
    }

    /// Sum of the norms of consecutive blocks of length `block`.
    pub fn block_norm<T: Scalar>(self, v: &[T], block: usize) -> T {
        if block == 0 || block >= v.len() {
            return self.norm(v);
        }
        v.chunks(block).map(|c| self.norm(c)).sum()
    }
}

/// `x' = F(x, t)`, `x(t_0) = v` on `[t_0, t_0 + T]`.
#[derive(Clone)]
pub struct OdeProblem<'a, T> {
    rhs: Rhs<'a, T>,
    initial: Vec<T>,
    start_time: T,
    horizon: T,
    lipschitz: T,
    norm: NormKind,
    block: usize,
}

impl<T: std::fmt::Debug> std::fmt::Debug for OdeProblem<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OdeProblem")
            .field("dim", &self.initial.len())
            .field("start_time", &self.start_time)
            .field("horizon", &self.horizon)
            .field("lipschitz", &self.lipschitz)
            .field("norm", &self.norm)
            .finish()
    }
}

impl<'a, T: Scalar> OdeProblem<'a, T> {
    pub fn new<F>(rhs: F, initial: Vec<T>, horizon: T, lipschitz: T) -> Result<Self>
    where
        F: Fn(&[T], T, &mut [T]) + Send + Sync + 'a,
    {
        Self::from_arc(Arc::new(rhs), initial, horizon, lipschitz)
    }

    pub fn from_arc(rhs: Rhs<'a, T>, initial: Vec<T>, horizon: T, lipschitz: T) -> Result<Self> {
        if !(horizon.is_finite() && horizon > T::zero()) {
            return Err(Error::InvalidArgument(format!(
                "horizon must be positive, got {horizon}"
            )));
        }
        if !(lipschitz.is_finite() && lipschitz >= T::zero()) {
            return Err(Error::InvalidArgument(format!(
                "Lipschitz constant must be finite and nonnegative, got {lipschitz}"
            )));
        }
        if initial.is_empty() || initial.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "initial value must be nonempty and finite".into(),
            ));
        }
        Ok(Self {
            rhs,
            block: initial.len(),
            initial,
            start_time: T::zero(),
            horizon,
            lipschitz,
            norm: NormKind::default(),
        })
    }

    pub fn with_norm(mut self, norm: NormKind) -> Self {
        self.norm = norm;
        self
    }

    pub fn with_start_time(mut self, t0: T) -> Self {
        self.start_time = t0;
        self
    }

    /// Measure states as a sum of norms over blocks of this length.
    pub fn with_block_norm(mut self, block: usize) -> Self {
        self.block = block;
        self
    }

    pub fn dim(&self) -> usize {
        self.initial.len()
    }

    pub fn initial(&self) -> &[T] {
        &self.initial
    }

    pub fn horizon(&self) -> T {
        self.horizon
    }

    pub fn start_time(&self) -> T {
        self.start_time
    }

    pub fn lipschitz(&self) -> T {
        self.lipschitz
    }

    pub fn norm_kind(&self) -> NormKind {
        self.norm
    }

    fn state_norm(&self, v: &[T]) -> T {
        self.norm.block_norm(v, self.block)
    }

    pub fn eval_rhs(&self, x: &[T], t: T, out: &mut [T]) {
        (self.rhs)(x, t, out)
    }
}

/// Solver knobs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub gamma_policy: GammaPolicy,
    /// Upper bound on sweeps; the formula's count and [`MAX_ITERS_CAP`] still apply.
    pub max_iters: Option<usize>,
    /// Evaluate the right-hand side at the nodes concurrently.
    pub parallel: bool,
    /// Stop once `ρ²/(1-ρ)·δ ≤ ε`, where `ρ = γLT` and `δ` is the last node
    /// displacement. This bounds the distance of the returned iterate to the
    /// fixed point by `ε`.
    pub adaptive_stop: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            gamma_policy: GammaPolicy::Certified,
            max_iters: None,
            parallel: false,
            adaptive_stop: false,
        }
    }
}

impl SolverOptions {
    pub fn measured() -> Self {
        Self {
            gamma_policy: GammaPolicy::Measured,
            ..Self::default()
        }
    }
}

/// Outcome of a step-size check.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSizeReport {
    pub ok: bool,
    /// Human-readable form of the binding condition.
    pub condition: String,
    pub value: f64,
    pub bound: f64,
    /// `bound - value`; negative when violated.
    pub margin: f64,
}

impl StepSizeReport {
    pub fn into_result(self) -> Result<Self> {
        if self.ok {
            Ok(self)
        } else {
            Err(Error::Precondition {
                condition: self.condition,
                value: self.value,
                bound: self.bound,
            })
        }
    }
}

/// Step-size condition for an order-`k` solve on a γ-bounded basis.
///
/// Order one needs `γ L T ≤ 1/2`. Higher orders need `γ L T ≤ 1/8` with
/// `L = Σ L_i^{1/i}`; at the certified γ = 2000 this is `L T ≤ 1/16000`.
/// Only round-off (relative 1e-12) is tolerated past the bound.
pub fn check_step_size(l: f64, t: f64, gamma: f64, k: usize) -> StepSizeReport {
    let value = gamma * l * t;
    let (condition, bound) = if k <= 1 {
        ("γ·L·T".to_string(), 0.5)
    } else if gamma == CERTIFIED_GAMMA {
        ("γ·L·T (L·T ≤ 1/16000)".to_string(), 0.125)
    } else {
        ("γ·L·T".to_string(), 0.125)
    };
    let ok = value.is_finite() && value <= bound * (1.0 + CHECK_ROUNDOFF);
    StepSizeReport {
        ok,
        condition,
        value,
        bound,
        margin: bound - value,
    }
}

/// Largest horizon passing [`check_step_size`]; infinite when `L = 0`.
pub fn max_step(l: f64, gamma: f64, k: usize) -> f64 {
    let bound = if k <= 1 { 0.5 } else { 0.125 };
    if l <= 0.0 {
        f64::INFINITY
    } else {
        bound / (gamma * l)
    }
}

/// Iteration count `⌈log₂((T/ε) max_j ‖F(v, c_j)‖)⌉`, at least one.
pub fn iteration_count(horizon: f64, eps: f64, max_rhs_norm: f64) -> usize {
    let arg = horizon / eps * max_rhs_norm;
    if !(arg > 1.0) {
        return 1;
    }
    let n = arg.log2().ceil();
    if n.is_finite() {
        (n as usize).max(1)
    } else {
        usize::MAX
    }
}

/// Result of a first-order collocation solve.
#[derive(Debug, Clone)]
pub struct CollocationSolution<T> {
    basis: CollocationBasis<T>,
    dim: usize,
    initial: Vec<T>,
    /// Node-major `D_total × d` samples `F(X_j, c_j)`.
    node_derivs: Vec<T>,
    /// Node-major `D_total × d` final iterate `X`.
    node_states: Vec<T>,
    pub iterations_used: usize,
    pub iteration_budget: usize,
    /// `‖X^{(j)} - X^{(j-1)}‖` for each sweep.
    pub displacements: Vec<T>,
    /// Last displacement.
    pub residual: T,
    /// γ used in the step-size check.
    pub gamma: T,
}

impl<T: Scalar> CollocationSolution<T> {
    pub fn basis(&self) -> &CollocationBasis<T> {
        &self.basis
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn initial(&self) -> &[T] {
        &self.initial
    }

    pub fn node_derivs(&self) -> &[T] {
        &self.node_derivs
    }

    pub fn node_states(&self) -> &[T] {
        &self.node_states
    }

    /// `x(t) = v + ∫_{t_0}^t Σ_j F_j φ_j`.
    pub fn eval(&self, t: T) -> Result<Vec<T>> {
        let mut out = vec![T::zero(); self.dim];
        self.basis.combine(&self.node_derivs, self.dim, t, 1, &mut out)?;
        for (o, v) in out.iter_mut().zip(&self.initial) {
            *o += *v;
        }
        Ok(out)
    }

    /// `x'(t) = Σ_j F_j φ_j(t)`.
    pub fn derivative(&self, t: T) -> Result<Vec<T>> {
        let mut out = vec![T::zero(); self.dim];
        self.basis.combine(&self.node_derivs, self.dim, t, 0, &mut out)?;
        Ok(out)
    }

    pub fn end_value(&self) -> Result<Vec<T>> {
        self.eval(self.basis.end())
    }
}

fn check_basis<T: Scalar>(basis: &CollocationBasis<T>, t0: T, horizon: T) -> Result<()> {
    let tol = horizon * lit(1e-10);
    if (basis.start() - t0).abs() > tol || (basis.horizon() - horizon).abs() > tol {
        return Err(Error::InvalidArgument(format!(
            "basis covers [{}, {}] but the problem needs [{}, {}]",
            basis.start(),
            basis.end(),
            t0,
            t0 + horizon
        )));
    }
    Ok(())
}

fn eval_nodes<T: Scalar>(
    problem: &OdeProblem<'_, T>,
    nodes: &[T],
    states: &[T],
    out: &mut [T],
    parallel: bool,
) {
    let d = problem.dim();
    if parallel {
        out.par_chunks_mut(d)
            .zip(states.par_chunks(d))
            .zip(nodes.par_iter())
            .for_each(|((o, x), &c)| problem.eval_rhs(x, c, o));
    } else {
        for ((o, x), &c) in out.chunks_mut(d).zip(states.chunks(d)).zip(nodes) {
            problem.eval_rhs(x, c, o);
        }
    }
}

fn first_non_finite<T: Scalar>(v: &[T]) -> Option<usize> {
    v.iter().position(|x| !x.is_finite())
}

/// Collocation solve of a first-order problem.
///
/// Checks `γ L T ≤ 1/2` with the γ selected by `options.gamma_policy`.
pub fn solve_first_order<T: Scalar>(
    problem: &OdeProblem<'_, T>,
    basis: &CollocationBasis<T>,
    eps: T,
    options: &SolverOptions,
) -> Result<CollocationSolution<T>> {
    let gamma = basis.gamma(options.gamma_policy);
    check_step_size(
        problem.lipschitz.to_f64_lossy(),
        problem.horizon.to_f64_lossy(),
        gamma.to_f64_lossy(),
        1,
    )
    .into_result()?;
    run_collocation(problem, basis, eps, options, gamma)
}

/// Scratch buffers for the fixed-point sweeps, reusable across solves.
#[derive(Debug, Clone, Default)]
struct Workspace<T> {
    states: Vec<T>,
    derivs: Vec<T>,
    next: Vec<T>,
    diff: Vec<T>,
    displacements: Vec<T>,
}

/// Sweep outcome; the iterate and node derivatives stay in the workspace.
struct SweepStats {
    used: usize,
    budget: usize,
}

fn run_collocation<T: Scalar>(
    problem: &OdeProblem<'_, T>,
    basis: &CollocationBasis<T>,
    eps: T,
    options: &SolverOptions,
    gamma: T,
) -> Result<CollocationSolution<T>> {
    let mut ws = Workspace::default();
    let stats = sweep(problem, basis, eps, options, gamma, &mut ws)?;
    let residual = ws.displacements.last().copied().unwrap_or_else(T::zero);
    Ok(CollocationSolution {
        basis: basis.clone(),
        dim: problem.dim(),
        initial: problem.initial.clone(),
        node_derivs: ws.derivs,
        node_states: ws.states,
        iterations_used: stats.used,
        iteration_budget: stats.budget,
        displacements: ws.displacements,
        residual,
        gamma,
    })
}

fn sweep<T: Scalar>(
    problem: &OdeProblem<'_, T>,
    basis: &CollocationBasis<T>,
    eps: T,
    options: &SolverOptions,
    gamma: T,
    ws: &mut Workspace<T>,
) -> Result<SweepStats> {
    if !(eps.is_finite() && eps > T::zero()) {
        return Err(Error::InvalidArgument(format!(
            "accuracy must be positive, got {eps}"
        )));
    }
    check_basis(basis, problem.start_time, problem.horizon)?;
    let d = problem.dim();
    let dim = basis.dim();
    let nodes = basis.nodes();

    ws.states.clear();
    for _ in 0..dim {
        ws.states.extend_from_slice(&problem.initial);
    }
    ws.derivs.clear();
    ws.derivs.resize(dim * d, T::zero());
    ws.next.clear();
    ws.next.resize(dim * d, T::zero());
    ws.diff.clear();
    ws.diff.resize(d, T::zero());
    ws.displacements.clear();
    let Workspace {
        states,
        derivs,
        next,
        diff,
        displacements,
    } = ws;

    eval_nodes(problem, nodes, states, derivs, options.parallel);
    if let Some(pos) = first_non_finite(derivs) {
        return Err(Error::NonFinite {
            iteration: 0,
            what: format!("right-hand side at node {}", pos / d),
        });
    }
    let max_f = derivs
        .chunks(d)
        .map(|f| problem.state_norm(f))
        .fold(T::zero(), T::max);
    let formula = iteration_count(
        problem.horizon.to_f64_lossy(),
        eps.to_f64_lossy(),
        max_f.to_f64_lossy(),
    );
    let budget = formula
        .min(options.max_iters.unwrap_or(MAX_ITERS_CAP))
        .min(MAX_ITERS_CAP)
        .max(1);

    let rho = if options.adaptive_stop {
        gamma * problem.lipschitz * problem.horizon
    } else {
        T::infinity()
    };
    let mut used = 0;
    for it in 1..=budget {
        basis.apply_integral(derivs, d, next);
        let mut disp = T::zero();
        let mut scale = T::zero();
        let mut finite = true;
        for (a, b) in next.chunks_mut(d).zip(states.chunks(d)) {
            for (((x, v), o), y) in a.iter_mut().zip(&problem.initial).zip(diff.iter_mut()).zip(b) {
                *x += *v;
                *o = *x - *y;
                finite &= x.is_finite();
            }
            disp = disp.max(problem.state_norm(diff));
            scale = scale.max(problem.state_norm(a));
        }
        if !finite {
            let pos = first_non_finite(next).unwrap_or(0);
            return Err(Error::NonFinite {
                iteration: it,
                what: format!("state at node {}", pos / d),
            });
        }
        std::mem::swap(states, next);
        eval_nodes(problem, nodes, states, derivs, options.parallel);
        if let Some(pos) = first_non_finite(derivs) {
            return Err(Error::NonFinite {
                iteration: it,
                what: format!("right-hand side at node {}", pos / d),
            });
        }
        displacements.push(disp);
        used = it;

        let floor = T::epsilon() * lit(16.0) * scale.max(T::one());
        let n = displacements.len();
        if n >= 3
            && disp > floor
            && displacements[n - 1] > displacements[n - 2]
            && displacements[n - 2] > displacements[n - 3]
        {
            return Err(Error::Divergence {
                iteration: it,
                displacement: disp.to_f64_lossy(),
            });
        }
        if disp <= floor || (rho < T::one() && rho * rho / (T::one() - rho) * disp <= eps) {
            break;
        }
    }
    Ok(SweepStats { used, budget })
}

/// `x^{(k)} = F(x^{(k-1)}, …, x, t)` with `x^{(i)}(t_0) = v_i`.
///
/// The oracle receives the derivative stack highest order first:
/// `y = (x^{(k-1)}, …, x′, x)`.
#[derive(Clone)]
pub struct KthOrderProblem<'a, T> {
    rhs: Rhs<'a, T>,
    order: usize,
    dim: usize,
    /// `initial[i]` is `x^{(i)}(t_0)`.
    initial: Vec<Vec<T>>,
    start_time: T,
    horizon: T,
    /// `L_i` pairs with the block `y_i = x^{(k-i)}`.
    lipschitz: Vec<T>,
    norm: NormKind,
}

impl<T: std::fmt::Debug> std::fmt::Debug for KthOrderProblem<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KthOrderProblem")
            .field("order", &self.order)
            .field("dim", &self.dim)
            .field("start_time", &self.start_time)
            .field("horizon", &self.horizon)
            .field("lipschitz", &self.lipschitz)
            .finish()
    }
}

impl<'a, T: Scalar> KthOrderProblem<'a, T> {
    pub fn new<F>(rhs: F, initial: Vec<Vec<T>>, horizon: T, lipschitz: Vec<T>) -> Result<Self>
    where
        F: Fn(&[T], T, &mut [T]) + Send + Sync + 'a,
    {
        Self::from_arc(Arc::new(rhs), initial, horizon, lipschitz)
    }

    pub fn from_arc(
        rhs: Rhs<'a, T>,
        initial: Vec<Vec<T>>,
        horizon: T,
        lipschitz: Vec<T>,
    ) -> Result<Self> {
        let order = initial.len();
        if order == 0 {
            return Err(Error::InvalidArgument("order must be at least 1".into()));
        }
        if lipschitz.len() != order {
            return Err(Error::Dimension {
                expected: order,
                got: lipschitz.len(),
            });
        }
        let dim = initial[0].len();
        if dim == 0 {
            return Err(Error::InvalidArgument("dimension must be positive".into()));
        }
        for v in &initial {
            if v.len() != dim {
                return Err(Error::Dimension {
                    expected: dim,
                    got: v.len(),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidArgument("initial values must be finite".into()));
            }
        }
        if lipschitz.iter().any(|l| !(l.is_finite() && *l >= T::zero())) {
            return Err(Error::InvalidArgument(
                "Lipschitz constants must be finite and nonnegative".into(),
            ));
        }
        if !(horizon.is_finite() && horizon > T::zero()) {
            return Err(Error::InvalidArgument(format!(
                "horizon must be positive, got {horizon}"
            )));
        }
        Ok(Self {
            rhs,
            order,
            dim,
            initial,
            start_time: T::zero(),
            horizon,
            lipschitz,
            norm: NormKind::default(),
        })
    }

    pub fn with_norm(mut self, norm: NormKind) -> Self {
        self.norm = norm;
        self
    }

    pub fn with_start_time(mut self, t0: T) -> Self {
        self.start_time = t0;
        self
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn initial(&self) -> &[Vec<T>] {
        &self.initial
    }

    pub fn horizon(&self) -> T {
        self.horizon
    }

    pub fn start_time(&self) -> T {
        self.start_time
    }

    pub fn lipschitz_constants(&self) -> &[T] {
        &self.lipschitz
    }

    pub fn norm_kind(&self) -> NormKind {
        self.norm
    }

    pub fn rhs(&self) -> &Rhs<'a, T> {
        &self.rhs
    }

    /// `L = Σ L_i^{1/i}`.
    pub fn combined_lipschitz(&self) -> T {
        self.lipschitz
            .iter()
            .enumerate()
            .map(|(i, l)| l.powf(T::one() / T::from_usize_lossy(i + 1)))
            .sum()
    }

    /// The same system restarted at `t0` with new initial derivatives and horizon.
    pub fn restarted(&self, t0: T, initial: Vec<Vec<T>>, horizon: T) -> Result<Self> {
        Ok(Self::from_arc(self.rhs.clone(), initial, horizon, self.lipschitz.clone())?
            .with_norm(self.norm)
            .with_start_time(t0))
    }
}

/// `c_1 = 1`, `c_i = Σ_{j=i}^k L_j^{(i-1)/j} + T̄^{-(i-1)}`.
pub fn scaling_constants<T: Scalar>(lipschitz: &[T], tbar: T) -> Vec<T> {
    let k = lipschitz.len();
    let mut c = Vec::with_capacity(k);
    for i in 1..=k {
        if i == 1 {
            c.push(T::one());
            continue;
        }
        let e = T::from_usize_lossy(i - 1);
        let mut s = T::one() / tbar.powf(e);
        for j in i..=k {
            s += lipschitz[j - 1].powf(e / T::from_usize_lossy(j));
        }
        c.push(s);
    }
    c
}

/// A `k`-th order problem recast as a first-order system on `ℝ^{kd}`.
#[derive(Debug, Clone)]
pub struct ReducedProblem<'a, T> {
    pub ode: OdeProblem<'a, T>,
    pub scaling: Vec<T>,
    /// `T̄ = 4 γ T`.
    pub tbar: T,
    /// `Σ c_i / T̄^{k-i}`, the factor turning ε into the reduced accuracy.
    pub eps_factor: T,
}

/// Stacked state `x̄ = (c_1 x^{(k-1)}, …, c_k x)` with
/// `F̄ = (c_1 F(c_1⁻¹x̄_1, …), c_2 c_1⁻¹ x̄_1, …, c_k c_{k-1}⁻¹ x̄_{k-1})`.
///
/// Lipschitz constant `L̄ = Σ L_j^{1/j} + 1/T̄` in the sum-of-block-norms; for
/// `k = 1` the reduction is the identity and `L̄ = L_1`.
pub fn reduce_order<'a, T: Scalar>(
    problem: &KthOrderProblem<'a, T>,
    gamma: T,
) -> Result<ReducedProblem<'a, T>> {
    let k = problem.order;
    let d = problem.dim;
    let tbar = lit::<T>(4.0) * gamma * problem.horizon;
    if k == 1 {
        let ode = OdeProblem::from_arc(
            problem.rhs.clone(),
            problem.initial[0].clone(),
            problem.horizon,
            problem.lipschitz[0],
        )?
        .with_norm(problem.norm)
        .with_start_time(problem.start_time);
        return Ok(ReducedProblem {
            ode,
            scaling: vec![T::one()],
            tbar,
            eps_factor: T::one(),
        });
    }
    let c = scaling_constants(&problem.lipschitz, tbar);
    if c.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            iteration: 0,
            what: "scaling constants".into(),
        });
    }
    let eps_factor = c
        .iter()
        .enumerate()
        .map(|(i, &ci)| ci / tbar.powi((k - 1 - i) as i32))
        .sum();
    let mut init = Vec::with_capacity(k * d);
    for (b, ci) in c.iter().enumerate() {
        init.extend(problem.initial[k - 1 - b].iter().map(|v| *v * *ci));
    }
    let lbar = problem.combined_lipschitz() + T::one() / tbar;
    let inner = problem.rhs.clone();
    let inv: Vec<T> = c
        .iter()
        .flat_map(|ci| std::iter::repeat(T::one() / *ci).take(d))
        .collect();
    let ratio: Vec<T> = c
        .windows(2)
        .flat_map(|w| std::iter::repeat(w[1] / w[0]).take(d))
        .collect();
    let rhs = move |xbar: &[T], t: T, out: &mut [T]| {
        let mut stack = [T::zero(); STACK_STATE];
        let mut heap = Vec::new();
        let y = if xbar.len() <= STACK_STATE {
            &mut stack[..xbar.len()]
        } else {
            heap.resize(xbar.len(), T::zero());
            &mut heap[..]
        };
        for ((o, x), s) in y.iter_mut().zip(xbar).zip(&inv) {
            *o = *x * *s;
        }
        let (top, rest) = out.split_at_mut(d);
        inner(y, t, top);
        for ((o, x), r) in rest.iter_mut().zip(xbar).zip(&ratio) {
            *o = *r * *x;
        }
    };
    let ode = OdeProblem::new(rhs, init, problem.horizon, lbar)?
        .with_norm(problem.norm)
        .with_start_time(problem.start_time)
        .with_block_norm(d);
    Ok(ReducedProblem {
        ode,
        scaling: c,
        tbar,
        eps_factor,
    })
}

/// Result of a `k`-th order solve.
#[derive(Debug, Clone)]
pub struct KthOrderSolution<T> {
    inner: CollocationSolution<T>,
    order: usize,
    dim: usize,
    scaling: Vec<T>,
    initial: Vec<Vec<T>>,
    /// Node-major samples of the collocated `x^{(k)}`.
    top_derivs: Vec<T>,
}

impl<T: Scalar> KthOrderSolution<T> {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn reduced(&self) -> &CollocationSolution<T> {
        &self.inner
    }

    pub fn scaling(&self) -> &[T] {
        &self.scaling
    }

    pub fn start(&self) -> T {
        self.inner.basis.start()
    }

    pub fn end(&self) -> T {
        self.inner.basis.end()
    }

    /// `x^{(i)}(t)` from the `(k - i)`-fold integral of the collocated `x^{(k)}`;
    /// `i = k` evaluates the collocated `x^{(k)}` itself.
    pub fn derivative(&self, i: usize, t: T) -> Result<Vec<T>> {
        if i > self.order {
            return Err(Error::InvalidArgument(format!(
                "derivative order {i} above the ODE order {}",
                self.order
            )));
        }
        let d = self.dim;
        let mut out = vec![T::zero(); d];
        self.inner
            .basis
            .combine(&self.top_derivs, d, t, self.order - i, &mut out)?;
        let dt = t - self.start();
        let mut coef = T::one();
        for m in 0..(self.order - i) {
            if m > 0 {
                coef = coef * dt / T::from_usize_lossy(m);
            }
            for (o, v) in out.iter_mut().zip(&self.initial[i + m]) {
                *o += coef * *v;
            }
        }
        Ok(out)
    }

    /// `x^{(i)}(t)` read from the `c_{k-i}⁻¹`-scaled block of the reduced solution.
    pub fn individual(&self, i: usize, t: T) -> Result<Vec<T>> {
        if i >= self.order {
            return Err(Error::InvalidArgument(format!(
                "derivative order {i} not below the ODE order {}",
                self.order
            )));
        }
        let d = self.dim;
        let b = self.order - 1 - i;
        let full = self.inner.eval(t)?;
        Ok(full[b * d..(b + 1) * d]
            .iter()
            .map(|v| *v / self.scaling[b])
            .collect())
    }

    /// All derivatives `x, x′, …, x^{(k-1)}` at the end of the interval.
    pub fn end_derivatives(&self) -> Result<Vec<Vec<T>>> {
        let mut integrals = Vec::new();
        Ok(end_values(
            &self.inner.basis,
            &self.top_derivs,
            &self.initial,
            self.dim,
            &mut integrals,
        ))
    }
}

/// Solve a `k`-th order problem through [`reduce_order`].
///
/// Checks the order-`k` step-size condition on the original `L` and `T`.
pub fn solve_kth_order<T: Scalar>(
    problem: &KthOrderProblem<'_, T>,
    basis: &CollocationBasis<T>,
    eps: T,
    options: &SolverOptions,
) -> Result<KthOrderSolution<T>> {
    let (gamma, reduced) = prepare_kth_order(problem, basis, options)?;
    let eps_bar = eps * reduced.eps_factor;
    let inner = solve_first_order(&reduced.ode, basis, eps_bar, options)?;
    debug_assert_eq!(inner.gamma, gamma);
    let mut top_derivs = Vec::new();
    top_block(&inner.node_derivs, problem, reduced.scaling[0], &mut top_derivs);
    Ok(KthOrderSolution {
        inner,
        order: problem.order,
        dim: problem.dim,
        scaling: reduced.scaling,
        initial: problem.initial.clone(),
        top_derivs,
    })
}

fn prepare_kth_order<'a, T: Scalar>(
    problem: &KthOrderProblem<'a, T>,
    basis: &CollocationBasis<T>,
    options: &SolverOptions,
) -> Result<(T, ReducedProblem<'a, T>)> {
    check_basis(basis, problem.start_time, problem.horizon)?;
    let gamma = basis.gamma(options.gamma_policy);
    check_step_size(
        problem.combined_lipschitz().to_f64_lossy(),
        problem.horizon.to_f64_lossy(),
        gamma.to_f64_lossy(),
        problem.order,
    )
    .into_result()?;
    Ok((gamma, reduce_order(problem, gamma)?))
}

/// `x^{(k)}` samples `c_1⁻¹ x̄_1` from the reduced node derivatives.
fn top_block<T: Scalar>(node_derivs: &[T], problem: &KthOrderProblem<'_, T>, c1: T, out: &mut Vec<T>) {
    let d = problem.dim;
    out.clear();
    out.extend(
        node_derivs
            .chunks(d * problem.order)
            .flat_map(|row| row[..d].iter().map(move |v| *v / c1)),
    );
}

/// `x^{(i)}(T_end)` for `i < k` from the integrals of `x^{(k)}` and the
/// initial derivatives.
fn end_values<T: Scalar>(
    basis: &CollocationBasis<T>,
    top_derivs: &[T],
    initial: &[Vec<T>],
    d: usize,
    integrals: &mut Vec<T>,
) -> Vec<Vec<T>> {
    let k = initial.len();
    integrals.clear();
    integrals.resize(k * d, T::zero());
    basis.end_integrals(top_derivs, d, k, integrals);
    let dt = basis.horizon();
    (0..k)
        .map(|i| {
            let m = k - i;
            let mut out = integrals[(m - 1) * d..m * d].to_vec();
            let mut coef = T::one();
            for j in 0..m {
                if j > 0 {
                    coef = coef * dt / T::from_usize_lossy(j);
                }
                for (o, v) in out.iter_mut().zip(&initial[i + j]) {
                    *o += coef * *v;
                }
            }
            out
        })
        .collect()
}

/// Piecewise trajectory from restarting [`solve_kth_order`] on short segments.
#[derive(Debug, Clone)]
pub struct ChainedSolution<T> {
    segments: Vec<KthOrderSolution<T>>,
}

impl<T: Scalar> ChainedSolution<T> {
    pub fn segments(&self) -> &[KthOrderSolution<T>] {
        &self.segments
    }

    pub fn start(&self) -> T {
        self.segments[0].start()
    }

    pub fn end(&self) -> T {
        self.segments.last().expect("nonempty").end()
    }

    fn segment_at(&self, t: T) -> &KthOrderSolution<T> {
        let idx = self.segments.partition_point(|s| s.end() < t);
        &self.segments[idx.min(self.segments.len() - 1)]
    }

    pub fn derivative(&self, i: usize, t: T) -> Result<Vec<T>> {
        self.segment_at(t).derivative(i, t)
    }

    pub fn end_derivatives(&self) -> Result<Vec<Vec<T>>> {
        self.segments.last().expect("nonempty").end_derivatives()
    }

    pub fn total_iterations(&self) -> usize {
        self.segments.iter().map(|s| s.inner.iterations_used).sum()
    }

    pub fn max_residual(&self) -> T {
        self.segments
            .iter()
            .map(|s| s.inner.residual)
            .fold(T::zero(), T::max)
    }
}

/// Number of equal segments needed so each passes the order-`k` step-size check.
pub fn segment_count(l: f64, total: f64, gamma: f64, k: usize) -> usize {
    let dt = max_step(l, gamma, k);
    if !dt.is_finite() {
        return 1;
    }
    ((total / dt).ceil() as usize).max(1)
}

/// Solve on `[t_0, t_0 + total]` by restarting on equal segments, each a copy
/// of `template` rescaled to the segment. Each segment gets `eps / segments`.
pub fn chain_solve<T: Scalar>(
    problem: &KthOrderProblem<'_, T>,
    total: T,
    template: &CollocationBasis<T>,
    eps: T,
    options: &SolverOptions,
) -> Result<ChainedSolution<T>> {
    if !(total.is_finite() && total > T::zero()) {
        return Err(Error::InvalidArgument(format!(
            "total horizon must be positive, got {total}"
        )));
    }
    let gamma = template.gamma(options.gamma_policy).to_f64_lossy();
    let segments = segment_count(
        problem.combined_lipschitz().to_f64_lossy(),
        total.to_f64_lossy(),
        gamma,
        problem.order,
    );
    chain_solve_segments(problem, total, segments, template, eps, options)
}

/// [`chain_solve`] with an explicit segment count.
pub fn chain_solve_segments<T: Scalar>(
    problem: &KthOrderProblem<'_, T>,
    total: T,
    segments: usize,
    template: &CollocationBasis<T>,
    eps: T,
    options: &SolverOptions,
) -> Result<ChainedSolution<T>> {
    if segments == 0 {
        return Err(Error::InvalidArgument("segment count must be positive".into()));
    }
    let t0 = problem.start_time;
    let n = T::from_usize_lossy(segments);
    let dt = total / n;
    let seg_eps = eps / n;
    let mut out = Vec::with_capacity(segments);
    let mut init = problem.initial.clone();
    for s in 0..segments {
        let a = t0 + dt * T::from_usize_lossy(s);
        let b = if s + 1 == segments {
            t0 + total
        } else {
            t0 + dt * T::from_usize_lossy(s + 1)
        };
        let basis = template.rescaled(a, b)?;
        let seg = problem.restarted(a, init, b - a)?;
        let sol = solve_kth_order(&seg, &basis, seg_eps, options)?;
        init = sol.end_derivatives()?;
        out.push(sol);
    }
    Ok(ChainedSolution { segments: out })
}

/// End state of a chained solve; segment solutions are not kept.
#[derive(Debug, Clone)]
pub struct ChainEnd<T> {
    /// `x, x′, …, x^{(k-1)}` at the end of the horizon.
    pub derivatives: Vec<Vec<T>>,
    pub total_iterations: usize,
    pub max_residual: T,
}

/// [`chain_solve_segments`] returning only the end derivatives.
///
/// Every segment reuses one basis translated along the horizon and one set of
/// sweep buffers.
pub fn chain_solve_end<T: Scalar>(
    problem: &KthOrderProblem<'_, T>,
    total: T,
    segments: usize,
    template: &CollocationBasis<T>,
    eps: T,
    options: &SolverOptions,
) -> Result<ChainEnd<T>> {
    if segments == 0 {
        return Err(Error::InvalidArgument("segment count must be positive".into()));
    }
    if !(total.is_finite() && total > T::zero()) {
        return Err(Error::InvalidArgument(format!(
            "total horizon must be positive, got {total}"
        )));
    }
    let t0 = problem.start_time;
    let n = T::from_usize_lossy(segments);
    let dt = total / n;
    let seg_eps = eps / n;
    let d = problem.dim;
    let mut basis = template.rescaled(t0, t0 + dt)?;
    let mut ws = Workspace::default();
    let mut top = Vec::new();
    let mut integrals = Vec::new();
    let mut init = problem.initial.clone();
    let mut total_iterations = 0;
    let mut max_residual = T::zero();
    for s in 0..segments {
        basis.translate_to(t0 + dt * T::from_usize_lossy(s))?;
        let seg = problem.restarted(basis.start(), init, basis.horizon())?;
        let (gamma, reduced) = prepare_kth_order(&seg, &basis, options)?;
        check_step_size(
            reduced.ode.lipschitz.to_f64_lossy(),
            reduced.ode.horizon.to_f64_lossy(),
            gamma.to_f64_lossy(),
            1,
        )
        .into_result()?;
        let stats = sweep(
            &reduced.ode,
            &basis,
            seg_eps * reduced.eps_factor,
            options,
            gamma,
            &mut ws,
        )?;
        total_iterations += stats.used;
        if let Some(r) = ws.displacements.last() {
            max_residual = max_residual.max(*r);
        }
        top_block(&ws.derivs, &seg, reduced.scaling[0], &mut top);
        init = end_values(&basis, &top, &seg.initial, d, &mut integrals);
    }
    Ok(ChainEnd {
        derivatives: init,
        total_iterations,
        max_residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::CollocationBasis;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn exp_problem<'a>(t: f64) -> OdeProblem<'a, f64> {
        OdeProblem::new(|x: &[f64], _t, out: &mut [f64]| out[0] = x[0], vec![1.0], t, 1.0).unwrap()
    }

    #[test]
    fn zero_rhs_gives_constant() {
        let p = OdeProblem::new(|_x: &[f64], _t, out: &mut [f64]| out[0] = 0.0, vec![3.0], 1.0, 0.0)
            .unwrap();
        let b = CollocationBasis::single(0.0, 1.0, 4).unwrap();
        let s = solve_first_order(&p, &b, 1e-6, &SolverOptions::default()).unwrap();
        for t in [0.0, 0.3, 1.0] {
            assert_eq!(s.eval(t).unwrap(), vec![3.0]);
        }
        assert_eq!(s.iterations_used, 1);
    }

    #[test]
    fn certified_check_rejects_quarter_horizon_exponential() {
        let p = exp_problem(0.25);
        let b = CollocationBasis::single(0.0, 0.25, 8).unwrap();
        let err = solve_first_order(&p, &b, 1e-6, &SolverOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Precondition { .. }));
        assert!(err.to_string().contains("γ·L·T"));
    }

    #[test]
    fn exponential_measured_gamma_single_solve() {
        let p = exp_problem(0.25);
        let b = CollocationBasis::single(0.0, 0.25, 8).unwrap();
        let s = solve_first_order(&p, &b, 1e-6, &SolverOptions::measured()).unwrap();
        let err = (s.end_value().unwrap()[0] - 0.25f64.exp()).abs();
        assert!(err <= 20.0 * b.measured_gamma() * 1e-6, "err = {err}");
        assert_eq!(s.eval(0.0).unwrap(), vec![1.0]);
    }

    #[test]
    fn linear_forced_problem_matches_closed_form() {
        let p = OdeProblem::new(
            |x: &[f64], t, out: &mut [f64]| out[0] = -x[0] + t,
            vec![0.0],
            0.3,
            1.0,
        )
        .unwrap();
        let b = CollocationBasis::single(0.0, 0.3, 8).unwrap();
        let s = solve_first_order(&p, &b, 1e-10, &SolverOptions::measured()).unwrap();
        for t in [0.05, 0.17, 0.3] {
            let exact = t - 1.0 + (-t as f64).exp();
            assert!((s.eval(t).unwrap()[0] - exact).abs() < 1e-9);
        }
    }

    #[test]
    fn check_step_size_examples() {
        assert!(check_step_size(0.0, 1e9, 2000.0, 1).ok);
        assert!(check_step_size(0.0, 1e9, 2000.0, 3).ok);
        let r = check_step_size(1.0, 1.0 / 4001.0, 2000.0, 1);
        assert!(r.ok);
        assert_relative_eq!(r.value, 2000.0 / 4001.0, epsilon = 1e-15);
        assert!(check_step_size(1.0, 1.0 / 16000.0, 2000.0, 2).ok);
        let r = check_step_size(1.0, 1.0 / 15999.0, 2000.0, 2);
        assert!(!r.ok);
        assert!(r.condition.contains("1/16000"));
    }

    #[test]
    fn scaling_constants_example() {
        let c = scaling_constants(&[0.0, 1.0], 1.0);
        assert_eq!(c, vec![1.0, 2.0]);
    }

    #[test]
    fn reduce_order_identity_for_first_order() {
        let p = KthOrderProblem::new(
            |y: &[f64], _t, out: &mut [f64]| out[0] = 2.0 * y[0],
            vec![vec![1.5]],
            0.1,
            vec![2.0],
        )
        .unwrap();
        let r = reduce_order(&p, 2000.0).unwrap();
        assert_eq!(r.scaling, vec![1.0]);
        assert_eq!(r.ode.lipschitz(), 2.0);
        assert_eq!(r.ode.initial(), &[1.5]);
    }

    #[test]
    fn reduced_rhs_matches_definition() {
        // x'' = -x with L_1 = 0, L_2 = 1
        let p = KthOrderProblem::new(
            |y: &[f64], _t, out: &mut [f64]| out[0] = -y[1],
            vec![vec![1.0], vec![0.5]],
            0.25,
            vec![0.0, 1.0],
        )
        .unwrap();
        let r = reduce_order(&p, 1.0).unwrap();
        let c2 = 1.0 + 1.0 / r.tbar;
        assert_relative_eq!(r.scaling[1], c2, epsilon = 1e-15);
        assert_eq!(r.ode.initial(), &[0.5, c2 * 1.0]);
        let mut out = [0.0; 2];
        r.ode.eval_rhs(&[0.3, 0.7], 0.0, &mut out);
        assert_relative_eq!(out[0], -0.7 / c2, epsilon = 1e-15);
        assert_relative_eq!(out[1], c2 * 0.3, epsilon = 1e-15);
        assert_relative_eq!(r.ode.lipschitz(), 1.0 + 1.0 / r.tbar, epsilon = 1e-15);
    }

    #[test]
    fn linear_second_order_is_exact() {
        let t = 0.01;
        let p = KthOrderProblem::new(
            |_y: &[f64], _t, out: &mut [f64]| out[0] = 0.0,
            vec![vec![1.0], vec![2.0]],
            t,
            vec![0.0, 0.0],
        )
        .unwrap();
        let b = CollocationBasis::single(0.0, t, 2).unwrap();
        let s = solve_kth_order(&p, &b, 1e-8, &SolverOptions::default()).unwrap();
        for tt in [0.0, 0.004, 0.01] {
            assert_relative_eq!(s.derivative(0, tt).unwrap()[0], 1.0 + 2.0 * tt, epsilon = 1e-14);
            assert_relative_eq!(s.derivative(1, tt).unwrap()[0], 2.0, epsilon = 1e-14);
            assert_relative_eq!(s.individual(0, tt).unwrap()[0], 1.0 + 2.0 * tt, epsilon = 1e-13);
        }
        assert_eq!(s.derivative(0, 0.0).unwrap(), vec![1.0]);
    }

    fn oscillator<'a>(x0: f64, v0: f64, t: f64) -> KthOrderProblem<'a, f64> {
        KthOrderProblem::new(
            |y: &[f64], _t, out: &mut [f64]| out[0] = -y[1],
            vec![vec![x0], vec![v0]],
            t,
            vec![0.0, 1.0],
        )
        .unwrap()
    }

    #[test]
    fn oscillator_single_certified_step() {
        let t = 1.0 / 16000.0;
        let p = oscillator(0.4, -1.3, t);
        let b = CollocationBasis::single(0.0, t, 6).unwrap();
        let s = solve_kth_order(&p, &b, 1e-12, &SolverOptions::default()).unwrap();
        let exact = 0.4 * t.cos() - 1.3 * t.sin();
        assert!((s.derivative(0, t).unwrap()[0] - exact).abs() < 1e-14);
    }

    #[test]
    fn oscillator_rejects_long_certified_step() {
        let t = 2.0 / 16000.0;
        let p = oscillator(1.0, 0.0, t);
        let b = CollocationBasis::single(0.0, t, 6).unwrap();
        let err = solve_kth_order(&p, &b, 1e-8, &SolverOptions::default()).unwrap_err();
        assert!(err.is_precondition());
    }

    #[test]
    fn reduction_agrees_with_first_order_path() {
        let t = 0.05;
        let p = oscillator(1.0, 0.0, t);
        let b = CollocationBasis::single(0.0, t, 8).unwrap();
        let opts = SolverOptions::measured();
        let s = solve_kth_order(&p, &b, 1e-12, &opts).unwrap();
        let r = reduce_order(&p, b.measured_gamma()).unwrap();
        let f = solve_first_order(&r.ode, &b, 1e-12 * r.eps_factor, &opts).unwrap();
        let end = f.end_value().unwrap();
        assert!((end[1] / r.scaling[1] - s.individual(0, t).unwrap()[0]).abs() < 1e-10);
        assert!((s.derivative(0, t).unwrap()[0] - t.cos()).abs() < 1e-10);
        assert!((s.derivative(1, t).unwrap()[0] + t.sin()).abs() < 1e-10);
        assert!((s.derivative(2, t).unwrap()[0] + t.cos()).abs() < 1e-8);
        assert!(s.derivative(3, t).is_err());
    }

    #[test]
    fn chain_solve_oscillator_to_one() {
        let p = oscillator(1.0, 0.0, 1.0);
        let template = CollocationBasis::single(0.0, 1.0, 8).unwrap();
        let s = chain_solve(&p, 1.0, &template, 1e-9, &SolverOptions::measured()).unwrap();
        assert!(s.segments().len() > 1);
        assert!((s.derivative(0, 1.0).unwrap()[0] - 1f64.cos()).abs() < 1e-9);
        assert!((s.derivative(1, 1.0).unwrap()[0] + 1f64.sin()).abs() < 1e-9);
        let mid = s.derivative(0, 0.37).unwrap()[0];
        assert!((mid - 0.37f64.cos()).abs() < 1e-9);
    }

    #[test]
    fn chain_end_matches_kept_segments() {
        let p = oscillator(0.3, -0.4, 1.0).with_start_time(0.5);
        let p = p.restarted(0.5, p.initial().to_vec(), 1.0).unwrap();
        let template = CollocationBasis::uniform(0.0, 1.0, 3, 2).unwrap();
        let opts = SolverOptions::measured();
        let kept = chain_solve_segments(&p, 1.0, 9, &template, 1e-10, &opts).unwrap();
        let lean = chain_solve_end(&p, 1.0, 9, &template, 1e-10, &opts).unwrap();
        let expected = kept.end_derivatives().unwrap();
        for (a, b) in lean.derivatives.iter().zip(&expected) {
            assert_relative_eq!(a[0], b[0], epsilon = 1e-12);
        }
        assert_eq!(lean.total_iterations, kept.total_iterations());
        assert_eq!(lean.max_residual, kept.max_residual());
        assert!(chain_solve_end(&p, 1.0, 0, &template, 1e-10, &opts).is_err());
    }

    #[test]
    fn chain_solve_exponential_first_order() {
        let p = KthOrderProblem::new(
            |y: &[f64], _t, out: &mut [f64]| out[0] = y[0],
            vec![vec![1.0]],
            1.0,
            vec![1.0],
        )
        .unwrap();
        let template = CollocationBasis::single(0.0, 1.0, 8).unwrap();
        let s = chain_solve(&p, 1.0, &template, 1e-9, &SolverOptions::measured()).unwrap();
        assert!((s.derivative(0, 1.0).unwrap()[0] - std::f64::consts::E).abs() < 1e-8);
    }

    #[test]
    fn one_segment_chain_equals_single_solve() {
        let t = 1.0 / 20000.0;
        let p = oscillator(0.2, 0.9, t);
        let b = CollocationBasis::single(0.0, t, 4).unwrap();
        let single = solve_kth_order(&p, &b, 1e-10, &SolverOptions::default()).unwrap();
        let chained = chain_solve(&p, t, &b, 1e-10, &SolverOptions::default()).unwrap();
        assert_eq!(chained.segments().len(), 1);
        assert_eq!(
            chained.derivative(0, t).unwrap(),
            single.derivative(0, t).unwrap()
        );
    }

    #[test]
    fn non_finite_rhs_reports_iteration() {
        let p = OdeProblem::new(
            |x: &[f64], _t, out: &mut [f64]| out[0] = if x[0] > 1.0 { f64::NAN } else { 1.0 },
            vec![0.0],
            1e-4,
            0.0,
        )
        .unwrap();
        let b = CollocationBasis::single(0.0, 1e-4, 2).unwrap();
        let mut opts = SolverOptions::default();
        opts.max_iters = Some(3);
        // x stays below 1 here, so solve succeeds
        assert!(solve_first_order(&p, &b, 1e-12, &opts).is_ok());
        let p2 = OdeProblem::new(
            |_x: &[f64], _t, out: &mut [f64]| out[0] = f64::INFINITY,
            vec![0.0],
            1e-4,
            0.0,
        )
        .unwrap();
        let err = solve_first_order(&p2, &b, 1e-12, &opts).unwrap_err();
        assert!(matches!(err, Error::NonFinite { iteration: 0, .. }));
    }

    #[test]
    fn wrong_lipschitz_constant_is_detected_as_divergence() {
        // declared L = 0 but the true constant is huge
        let p = OdeProblem::new(
            |x: &[f64], _t, out: &mut [f64]| out[0] = 400.0 * x[0],
            vec![1.0],
            1.0,
            0.0,
        )
        .unwrap();
        let b = CollocationBasis::single(0.0, 1.0, 4).unwrap();
        let err = solve_first_order(&p, &b, 1e-6, &SolverOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. } | Error::NonFinite { .. }));
    }

    #[test]
    fn basis_mismatch_rejected() {
        let p = exp_problem(1e-4);
        let b = CollocationBasis::single(0.0, 2e-4, 4).unwrap();
        let err = solve_first_order(&p, &b, 1e-6, &SolverOptions::default()).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn parallel_matches_serial() {
        let t = 0.05;
        let p = oscillator(1.0, 0.5, t);
        let b = CollocationBasis::uniform(0.0, t, 3, 6).unwrap();
        let serial = solve_kth_order(&p, &b, 1e-12, &SolverOptions::measured()).unwrap();
        let par_opts = SolverOptions {
            parallel: true,
            ..SolverOptions::measured()
        };
        let par = solve_kth_order(&p, &b, 1e-12, &par_opts).unwrap();
        assert_eq!(serial.derivative(0, t).unwrap(), par.derivative(0, t).unwrap());
    }

    #[test]
    fn works_in_single_precision() {
        let t = 0.1f32;
        let p = OdeProblem::new(|x: &[f32], _t, out: &mut [f32]| out[0] = -x[0], vec![1.0f32], t, 1.0)
            .unwrap();
        let b = CollocationBasis::single(0.0f32, t, 6).unwrap();
        let s = solve_first_order(&p, &b, 1e-5, &SolverOptions::measured()).unwrap();
        assert!((s.end_value().unwrap()[0] - (-t).exp()).abs() < 1e-5);
    }

    proptest! {
        #[test]
        fn prop_geometric_contraction(lambda in 0.1f64..20.0, deg in 2usize..10, pieces in 1usize..4) {
            let b0 = CollocationBasis::uniform(0.0, 1.0, pieces, deg).unwrap();
            let gamma = b0.measured_gamma();
            let t = 0.5 / (gamma * lambda);
            let b = b0.rescaled(0.0, t).unwrap();
            let p = OdeProblem::new(
                move |x: &[f64], _t, out: &mut [f64]| out[0] = -lambda * x[0],
                vec![1.0],
                t,
                lambda,
            )
            .unwrap();
            let s = solve_first_order(&p, &b, 1e-14, &SolverOptions::measured()).unwrap();
            let rate = gamma * lambda * t;
            for w in s.displacements.windows(2) {
                if w[0] > 1e-13 {
                    prop_assert!(w[1] <= (rate + 1e-9) * w[0], "{:?}", s.displacements);
                }
            }
        }

        #[test]
        fn prop_polynomial_rhs_is_exact(a in -2.0f64..2.0, b in -2.0f64..2.0, c in -2.0f64..2.0) {
            // x' = a + b t + c t², independent of x
            let t = 0.7;
            let p = OdeProblem::new(
                move |_x: &[f64], s, out: &mut [f64]| out[0] = a + b * s + c * s * s,
                vec![0.5],
                t,
                0.0,
            )
            .unwrap();
            let basis = CollocationBasis::single(0.0, t, 3).unwrap();
            let s = solve_first_order(&p, &basis, 1e-8, &SolverOptions::default()).unwrap();
            let exact = 0.5 + a * t + b * t * t / 2.0 + c * t * t * t / 3.0;
            prop_assert!((s.end_value().unwrap()[0] - exact).abs() <= 1e-8);
        }

        #[test]
        fn prop_extra_iterations_do_not_hurt(lambda in 0.5f64..3.0) {
            let t = 0.1;
            let basis = CollocationBasis::single(0.0, t, 8).unwrap();
            let p = OdeProblem::new(
                move |x: &[f64], _t, out: &mut [f64]| out[0] = -lambda * x[0],
                vec![1.0],
                t,
                lambda,
            )
            .unwrap();
            let opts = SolverOptions::measured();
            let s1 = solve_first_order(&p, &basis, 1e-6, &opts).unwrap();
            let s2 = solve_first_order(&p, &basis, 1e-12, &opts).unwrap();
            prop_assert!(s2.iteration_budget >= s1.iteration_budget);
            let exact = (-lambda * t).exp();
            let e1 = (s1.end_value().unwrap()[0] - exact).abs();
            let e2 = (s2.end_value().unwrap()[0] - exact).abs();
            prop_assert!(e2 <= e1 + 1e-10);
        }
    }
}
