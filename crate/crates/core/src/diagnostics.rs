//! Desk-scale checks: a Dormand–Prince reference integrator, HMC contraction
//! experiments, exact majorant-series bounds, 1-d Wasserstein and
//! Kolmogorov–Smirnov distances, a quadrature CDF oracle, moment z-tests and
//! the GLM drift and amortized-gradient monitors.

use std::fmt;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{Signed, ToPrimitive, Zero};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::basis::gauss_legendre;
use crate::collocation::{KthOrderProblem, OdeProblem, SolverOptions};
use crate::densities::{Density, GlmDensity};
use crate::error::{Error, Result};
use crate::hmc::{hmc_step, piece_count_generic, step_size_cap, HmcRun, PiecePlan};
use crate::linalg::norm2;
use crate::scalar::{lit, Scalar};

/// Default relative tolerance of [`reference_solve`].
pub const REFERENCE_RTOL: f64 = 1e-10;

/// Largest Taylor depth accepted by [`derivative_bound_check`].
pub const MAX_BOUND_DEPTH: usize = 12;

/// Fewest samples accepted by [`w2_distance_1d`].
pub const MIN_W2_SAMPLES: usize = 100;

/// Default multiplier for the drift and amortized-gradient monitors.
pub const DEFAULT_MONITOR_MULTIPLIER: f64 = 10.0;

/// Dense output of the reference integrator on a requested grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceTrajectory<T> {
    pub times: Vec<T>,
    /// One state per grid time; for `k`-th order problems `(x, x′, …, x^{(k-1)})` stacked.
    pub states: Vec<Vec<T>>,
    pub method: &'static str,
    /// Relative tolerance the steps were accepted at.
    pub tolerance: T,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
}

impl<T: Scalar> ReferenceTrajectory<T> {
    pub fn end_state(&self) -> &[T] {
        self.states.last().expect("nonempty grid")
    }
}

// Dormand–Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// Adaptive Dormand–Prince 5(4) from `(t0, y0)` through every time of `grid`.
///
/// Steps land exactly on grid times. Mixed error control with absolute
/// tolerance `rtol` and relative tolerance `rtol`.
pub fn dopri5<T, F>(rhs: F, t0: T, y0: &[T], grid: &[T], rtol: T) -> Result<ReferenceTrajectory<T>>
where
    T: Scalar,
    F: Fn(&[T], T, &mut [T]),
{
    if y0.is_empty() || y0.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(
            "initial state must be nonempty and finite".into(),
        ));
    }
    if grid.is_empty() {
        return Err(Error::InvalidArgument("output grid is empty".into()));
    }
    if grid.iter().any(|t| !t.is_finite() || *t < t0) || grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidArgument(
            "grid must be finite, ascending and start at or after t0".into(),
        ));
    }
    let rtol = rtol.max(T::epsilon() * lit(100.0));
    if !(rtol > T::zero() && rtol.is_finite()) {
        return Err(Error::InvalidArgument(format!("tolerance must be positive, got {rtol}")));
    }
    let n = y0.len();
    let mut k = vec![vec![T::zero(); n]; 7];
    let mut stage = vec![T::zero(); n];
    let mut y5 = vec![T::zero(); n];
    let mut y = y0.to_vec();
    let mut t = t0;
    let span = grid[grid.len() - 1] - t0;
    let mut h = if span > T::zero() {
        span * lit(1e-3)
    } else {
        T::one()
    };
    let mut states = Vec::with_capacity(grid.len());
    let (mut accepted, mut rejected) = (0usize, 0usize);
    rhs(&y, t, &mut k[0]);
    for &target in grid {
        while t < target {
            let mut step = h.min(target - t);
            let last = step >= target - t;
            for s in 1..6 {
                for i in 0..n {
                    let mut acc = y[i];
                    for (j, kj) in k.iter().enumerate().take(s) {
                        let a = A[s][j];
                        if a != 0.0 {
                            acc += step * lit::<T>(a) * kj[i];
                        }
                    }
                    stage[i] = acc;
                }
                let tail = &mut k[s];
                rhs(&stage, t + step * lit(C[s]), tail);
            }
            // last stage sits at the 5th-order solution and is reused next step
            for i in 0..n {
                let mut acc = y[i];
                for (j, kj) in k.iter().enumerate().take(6) {
                    acc += step * lit::<T>(B5[j]) * kj[i];
                }
                y5[i] = acc;
            }
            rhs(&y5, t + step, &mut k[6]);
            let mut err = T::zero();
            for i in 0..n {
                let mut e = T::zero();
                for (j, kj) in k.iter().enumerate() {
                    e += lit::<T>(B5[j] - B4[j]) * kj[i];
                }
                e *= step;
                let sc = rtol + rtol * y[i].abs().max(y5[i].abs());
                err += (e / sc) * (e / sc);
            }
            let err = (err / T::from_usize_lossy(n)).sqrt();
            if !err.is_finite() {
                return Err(Error::NonFinite {
                    iteration: accepted,
                    what: format!("reference step at t = {t}"),
                });
            }
            if err <= T::one() {
                t = if last { target } else { t + step };
                y.copy_from_slice(&y5);
                let (first, rest) = k.split_at_mut(1);
                first[0].copy_from_slice(&rest[5]);
                accepted += 1;
            } else {
                rejected += 1;
            }
            let factor = if err == T::zero() {
                lit(5.0)
            } else {
                (lit::<T>(0.9) * err.powf(lit(-0.2))).max(lit(0.2)).min(lit(5.0))
            };
            step = step * factor;
            if step <= T::epsilon() * lit::<T>(16.0) * t.abs().max(T::one()) {
                return Err(Error::StepUnderflow(t.to_f64_lossy()));
            }
            if !last || err > T::one() {
                h = step;
            } else {
                h = h.max(step);
            }
        }
        states.push(y.clone());
    }
    Ok(ReferenceTrajectory {
        times: grid.to_vec(),
        states,
        method: "dormand-prince-5(4)",
        tolerance: rtol,
        accepted_steps: accepted,
        rejected_steps: rejected,
    })
}

/// Reference solution of a first-order problem at [`REFERENCE_RTOL`].
pub fn reference_solve<T: Scalar>(
    problem: &OdeProblem<'_, T>,
    grid: &[T],
) -> Result<ReferenceTrajectory<T>> {
    reference_solve_with_tolerance(problem, grid, lit(REFERENCE_RTOL))
}

pub fn reference_solve_with_tolerance<T: Scalar>(
    problem: &OdeProblem<'_, T>,
    grid: &[T],
    rtol: T,
) -> Result<ReferenceTrajectory<T>> {
    dopri5(
        |x, t, out| problem.eval_rhs(x, t, out),
        problem.start_time(),
        problem.initial(),
        grid,
        rtol,
    )
}

/// Reference solution of a `k`-th order problem; states are `(x, x′, …, x^{(k-1)})`.
pub fn reference_solve_kth<T: Scalar>(
    problem: &KthOrderProblem<'_, T>,
    grid: &[T],
) -> Result<ReferenceTrajectory<T>> {
    reference_solve_kth_with_tolerance(problem, grid, lit(REFERENCE_RTOL))
}

pub fn reference_solve_kth_with_tolerance<T: Scalar>(
    problem: &KthOrderProblem<'_, T>,
    grid: &[T],
    rtol: T,
) -> Result<ReferenceTrajectory<T>> {
    let (k, d) = (problem.order(), problem.dim());
    let rhs = problem.rhs().clone();
    // F takes (x^{(k-1)}, …, x); the stacked state is (x, …, x^{(k-1)})
    let system = move |y: &[T], t: T, out: &mut [T]| {
        let mut rev = Vec::with_capacity(k * d);
        for b in (0..k).rev() {
            rev.extend_from_slice(&y[b * d..(b + 1) * d]);
        }
        out[..(k - 1) * d].copy_from_slice(&y[d..]);
        rhs(&rev, t, &mut out[(k - 1) * d..]);
    };
    let y0: Vec<T> = problem.initial().iter().flatten().copied().collect();
    dopri5(system, problem.start_time(), &y0, grid, rtol)
}

/// Outcome of [`contraction_experiment`].
#[derive(Debug, Clone, PartialEq)]
pub struct ContractionReport<T> {
    pub h: T,
    /// `‖x(h) − y(h)‖² / ‖x(0) − y(0)‖²` per trial; 0 when the starts coincide.
    pub ratios: Vec<T>,
    /// `1 − m₂h²/4`.
    pub ceiling: T,
    /// Allowance added to the ceiling per trial for the ODE error.
    pub slack: Vec<T>,
    pub violations: usize,
    pub eps_bar: T,
}

impl<T: Scalar> ContractionReport<T> {
    /// Fraction of trials within `ceiling + slack`.
    pub fn within_fraction(&self) -> f64 {
        if self.ratios.is_empty() {
            return 1.0;
        }
        1.0 - self.violations as f64 / self.ratios.len() as f64
    }

    pub fn max_ratio(&self) -> T {
        self.ratios.iter().copied().fold(T::zero(), T::max)
    }
}

impl<T: Scalar> fmt::Display for ContractionReport<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "check=contraction")?;
        writeln!(f, "h={}", self.h)?;
        writeln!(f, "trials={}", self.ratios.len())?;
        writeln!(f, "ceiling={}", self.ceiling)?;
        writeln!(f, "max_ratio={}", self.max_ratio())?;
        writeln!(f, "violations={}", self.violations)?;
        write!(f, "within_fraction={}", self.within_fraction())
    }
}

/// Knobs for [`contraction_experiment`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContractionOptions<T> {
    /// Per-step ODE accuracy.
    pub eps_bar: T,
    /// Slack is `slack_multiplier · ε̄ / ‖x(0) − y(0)‖`.
    pub slack_multiplier: T,
    pub solver: SolverOptions,
}

impl<T: Scalar> Default for ContractionOptions<T> {
    fn default() -> Self {
        Self {
            eps_bar: lit(1e-6),
            slack_multiplier: lit(10.0),
            solver: SolverOptions {
                adaptive_stop: true,
                ..SolverOptions::default()
            },
        }
    }
}

/// Coupled HMC steps from independent starts with a shared velocity.
///
/// Starts and velocities are drawn sequentially from `rng`; the trials then run
/// in parallel.
pub fn contraction_experiment<T, D, R>(
    density: &D,
    h: T,
    trials: usize,
    options: &ContractionOptions<T>,
    rng: &mut R,
) -> Result<ContractionReport<T>>
where
    T: Scalar,
    D: Density<T> + ?Sized,
    R: Rng + ?Sized,
{
    let (m2, big_m2) = (density.m2(), density.big_m2());
    let cap = step_size_cap(m2, big_m2);
    if !(h > T::zero()) || h > cap * lit(1.0 + 1e-12) {
        return Err(Error::Precondition {
            condition: "step-size cap h ≤ m₂^{1/4}/(2·M₂^{3/4})".into(),
            value: h.to_f64_lossy(),
            bound: cap.to_f64_lossy(),
        });
    }
    let eps_bar = options.eps_bar;
    if !(eps_bar > T::zero() && eps_bar.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "step accuracy must be positive, got {eps_bar}"
        )));
    }
    let d = density.dim();
    let draw = |rng: &mut R| -> Vec<T> {
        (0..d)
            .map(|_| T::lit(rng.sample::<f64, _>(StandardNormal)))
            .collect()
    };
    let inputs: Vec<(Vec<T>, Vec<T>, Vec<T>)> = (0..trials)
        .map(|_| (draw(rng), draw(rng), draw(rng)))
        .collect();
    let results: Vec<Result<(T, T)>> = inputs
        .par_iter()
        .map(|(x0, y0, v)| {
            let dist0 = distance(x0, y0);
            if dist0 == T::zero() {
                return Ok((T::zero(), T::zero()));
            }
            let x1 = coupled_step(density, x0, v, h, eps_bar, &options.solver)?;
            let y1 = coupled_step(density, y0, v, h, eps_bar, &options.solver)?;
            let dist1 = distance(&x1, &y1);
            Ok((
                dist1 * dist1 / (dist0 * dist0),
                options.slack_multiplier * eps_bar / dist0,
            ))
        })
        .collect();
    let ceiling = T::one() - m2 * h * h / lit(4.0);
    let mut ratios = Vec::with_capacity(trials);
    let mut slack = Vec::with_capacity(trials);
    let mut violations = 0;
    for r in results {
        let (ratio, s) = r?;
        if ratio > ceiling + s {
            violations += 1;
        }
        ratios.push(ratio);
        slack.push(s);
    }
    Ok(ContractionReport {
        h,
        ratios,
        ceiling,
        slack,
        violations,
        eps_bar,
    })
}

fn coupled_step<T: Scalar, D: Density<T> + ?Sized>(
    density: &D,
    x: &[T],
    v: &[T],
    h: T,
    eps_bar: T,
    options: &SolverOptions,
) -> Result<Vec<T>> {
    let g = density.gradient_vec(x);
    let k = piece_count_generic(density.big_m2(), h, norm2(v), norm2(&g), eps_bar);
    Ok(hmc_step(density, x, v, h, &PiecePlan::generic(k), eps_bar, options)?.x)
}

fn distance<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .map(|(x, y)| (*x - *y) * (*x - *y))
        .sum::<T>()
        .sqrt()
}

/// One row of a [`DerivativeBoundReport`].
#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeBoundEntry {
    pub k: usize,
    /// `ψ^{(k)}(0)`, exact.
    pub derivative: BigRational,
    /// `k! α^k / c`, rounded.
    pub bound: f64,
    /// Exact comparison against `k! α^k / c`.
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeBoundReport {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    /// `α = max(√(4ac/3), 2bc)`.
    pub alpha: f64,
    pub entries: Vec<DerivativeBoundEntry>,
}

impl DerivativeBoundReport {
    pub fn all_hold(&self) -> bool {
        self.entries.iter().all(|e| e.holds)
    }
}

impl fmt::Display for DerivativeBoundReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "check=derivative_bound a={} b={} c={} alpha={}", self.a, self.b, self.c, self.alpha)?;
        for e in &self.entries {
            writeln!(
                f,
                "k={} derivative={} bound={} holds={}",
                e.k,
                e.derivative.to_f64().unwrap_or(f64::NAN),
                e.bound,
                e.holds
            )?;
        }
        write!(f, "all_hold={}", self.all_hold())
    }
}

/// Taylor coefficients `p_k = ψ^{(k)}(0)/k!` of `ψ″ = a/(1 − cψ)`, `ψ(0) = 0`,
/// `ψ′(0) = b`, for `k ≤ depth`, by exact power-series recursion on
/// `(1 − cψ) ψ″ = a`.
pub fn majorant_taylor_coefficients(a: &BigRational, b: &BigRational, c: &BigRational, depth: usize) -> Vec<BigRational> {
    let mut p = vec![BigRational::zero(); depth + 1];
    if depth >= 1 {
        p[1] = b.clone();
    }
    // q_j = (j + 2)(j + 1) p_{j+2} are the coefficients of ψ″
    let mut q: Vec<BigRational> = Vec::with_capacity(depth.saturating_sub(1));
    for j in 0..depth.saturating_sub(1) {
        let qj = if j == 0 {
            a.clone()
        } else {
            let mut s = BigRational::zero();
            for i in 1..=j {
                s += &p[i] * &q[j - i];
            }
            c * s
        };
        let denom = BigRational::from_integer(BigInt::from((j + 2) * (j + 1)));
        p[j + 2] = &qj / denom;
        q.push(qj);
    }
    p
}

/// Exact check of `ψ^{(k)}(0) ≤ k! α^k / c` for `1 ≤ k ≤ depth`.
pub fn derivative_bound_check(a: f64, b: f64, c: f64, depth: usize) -> Result<DerivativeBoundReport> {
    if depth > MAX_BOUND_DEPTH || depth == 0 {
        return Err(Error::OutOfRange {
            value: depth as f64,
            lo: 1.0,
            hi: MAX_BOUND_DEPTH as f64,
        });
    }
    if !(a > 0.0 && c > 0.0 && b >= 0.0 && a.is_finite() && b.is_finite() && c.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "need a, c > 0 and b ≥ 0, got a={a}, b={b}, c={c}"
        )));
    }
    let exact = |v: f64| BigRational::from_float(v).expect("finite");
    let (ar, br, cr) = (exact(a), exact(b), exact(c));
    let four = BigRational::from_integer(BigInt::from(4));
    let three = BigRational::from_integer(BigInt::from(3));
    // α² = max(4ac/3, 4b²c²), exact
    let alpha_sq_1 = &four * &ar * &cr / &three;
    let alpha_sq_2 = &four * &br * &br * &cr * &cr;
    let alpha_sq = if alpha_sq_1 >= alpha_sq_2 {
        alpha_sq_1
    } else {
        alpha_sq_2
    };
    let alpha = alpha_sq.to_f64().unwrap_or(f64::NAN).sqrt();
    let p = majorant_taylor_coefficients(&ar, &br, &cr, depth);
    let mut entries = Vec::with_capacity(depth);
    let mut fact = BigRational::from_integer(BigInt::from(1));
    for (k, pk) in p.iter().enumerate().skip(1) {
        fact *= BigRational::from_integer(BigInt::from(k));
        let derivative = &fact * pk;
        // p_k ≤ α^k / c ⇔ p_k ≤ 0 or (c p_k)² ≤ (α²)^k
        let cp = &cr * pk;
        let holds = !cp.is_positive() || &cp * &cp <= num_traits::pow(alpha_sq.clone(), k);
        let fact_f = fact.to_f64().unwrap_or(f64::INFINITY);
        entries.push(DerivativeBoundEntry {
            k,
            derivative,
            bound: fact_f * alpha.powi(k as i32) / c,
            holds,
        });
    }
    Ok(DerivativeBoundReport {
        a,
        b,
        c,
        alpha,
        entries,
    })
}

fn sorted_finite<T: Scalar>(samples: &[T]) -> Result<Vec<f64>> {
    let mut xs: Vec<f64> = samples.iter().map(|v| v.to_f64_lossy()).collect();
    if xs.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("samples must be finite".into()));
    }
    xs.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    Ok(xs)
}

/// Empirical `W₂` of `samples` against a target given by its quantile function,
/// pairing the `i`-th order statistic with the quantile at `(i − ½)/n`.
pub fn w2_distance_1d<T: Scalar>(samples: &[T], quantile: impl Fn(f64) -> f64) -> Result<f64> {
    if samples.len() < MIN_W2_SAMPLES {
        return Err(Error::InsufficientData(format!(
            "W₂ needs at least {MIN_W2_SAMPLES} samples, got {}",
            samples.len()
        )));
    }
    let xs = sorted_finite(samples)?;
    let n = xs.len() as f64;
    let sum: f64 = xs
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let q = quantile((i as f64 + 0.5) / n);
            (x - q) * (x - q)
        })
        .sum();
    Ok((sum / n).sqrt())
}

/// Exact `W₂` between two empirical distributions on the line,
/// `(∫₀¹ (F⁻¹(u) − G⁻¹(u))² du)^{1/2}`.
pub fn w2_empirical<T: Scalar>(a: &[T], b: &[T]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InsufficientData("empty sample".into()));
    }
    let xs = sorted_finite(a)?;
    let ys = sorted_finite(b)?;
    let (n, m) = (xs.len(), ys.len());
    let (mut i, mut j) = (0usize, 0usize);
    let mut u = 0.0f64;
    let mut total = 0.0f64;
    while i < n && j < m {
        // next breakpoint of either quantile function, kept as exact fractions
        let ui = (i + 1) as f64 / n as f64;
        let uj = (j + 1) as f64 / m as f64;
        let next = ui.min(uj);
        let diff = xs[i] - ys[j];
        total += (next - u) * diff * diff;
        u = next;
        // compare (i+1)·m with (j+1)·n to avoid rounding ties
        let (li, lj) = ((i + 1) * m, (j + 1) * n);
        if li <= lj {
            i += 1;
        }
        if lj <= li {
            j += 1;
        }
    }
    Ok(total.max(0.0).sqrt())
}

/// `sup_x |F_n(x) − F(x)|` against a continuous CDF.
pub fn ks_distance<T: Scalar>(samples: &[T], cdf: impl Fn(f64) -> f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InsufficientData("empty sample".into()));
    }
    let xs = sorted_finite(samples)?;
    let n = xs.len() as f64;
    Ok(xs
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (((i + 1) as f64 / n) - f).max(f - i as f64 / n)
        })
        .fold(0.0, f64::max))
}

/// Normalised 1-d density `∝ exp(−f(x))` tabulated by Gauss–Legendre panels.
#[derive(Clone)]
pub struct QuadratureOracle {
    lo: f64,
    hi: f64,
    width: f64,
    /// `cumulative[p]` = mass left of panel `p`, normalised.
    cumulative: Vec<f64>,
    shift: f64,
    log_z: f64,
    nodes: Vec<f64>,
    weights: Vec<f64>,
    mean: f64,
    variance: f64,
    neg_log: std::sync::Arc<dyn Fn(f64) -> f64 + Send + Sync>,
}

impl fmt::Debug for QuadratureOracle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("QuadratureOracle")
            .field("support", &(self.lo, self.hi))
            .field("panels", &(self.cumulative.len() - 1))
            .field("mean", &self.mean)
            .field("variance", &self.variance)
            .finish()
    }
}

/// Gauss–Legendre points per oracle panel.
const ORACLE_POINTS: usize = 16;

impl QuadratureOracle {
    /// Tabulate `exp(−f)` on `[lo, hi]` with `panels` equal panels. The
    /// interval must hold all but a negligible part of the mass.
    pub fn new<F>(neg_log_density: F, lo: f64, hi: f64, panels: usize) -> Result<Self>
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        if !(lo.is_finite() && hi.is_finite() && hi > lo) || panels == 0 {
            return Err(Error::InvalidArgument(format!(
                "need a finite interval and panels > 0, got [{lo}, {hi}] with {panels}"
            )));
        }
        let (nodes, weights) = gauss_legendre(ORACLE_POINTS);
        let width = (hi - lo) / panels as f64;
        let mut shift = f64::INFINITY;
        for p in 0..=panels {
            let v = neg_log_density(lo + width * p as f64);
            if v.is_finite() {
                shift = shift.min(v);
            }
        }
        for p in 0..panels {
            for &x in &nodes {
                let v = neg_log_density(lo + width * (p as f64 + 0.5 * (x + 1.0)));
                if v.is_finite() {
                    shift = shift.min(v);
                }
            }
        }
        if !shift.is_finite() {
            return Err(Error::NonFinite {
                iteration: 0,
                what: "density has no finite values on the interval".into(),
            });
        }
        let mut oracle = Self {
            lo,
            hi,
            width,
            cumulative: vec![0.0; panels + 1],
            shift,
            log_z: 0.0,
            nodes,
            weights,
            mean: 0.0,
            variance: 0.0,
            neg_log: std::sync::Arc::new(neg_log_density),
        };
        let (mut m0, mut m1, mut m2) = (0.0, 0.0, 0.0);
        for p in 0..panels {
            let a = lo + width * p as f64;
            let (i0, i1, i2) = oracle.panel_moments(a, a + width);
            m0 += i0;
            m1 += i1;
            m2 += i2;
            oracle.cumulative[p + 1] = m0;
        }
        if !(m0 > 0.0 && m0.is_finite()) {
            return Err(Error::NonFinite {
                iteration: 0,
                what: "normalising constant".into(),
            });
        }
        oracle.cumulative.iter_mut().for_each(|c| *c /= m0);
        oracle.log_z = m0.ln() - shift;
        oracle.mean = m1 / m0;
        oracle.variance = m2 / m0 - oracle.mean * oracle.mean;
        Ok(oracle)
    }

    /// Posterior of a one-column GLM, `f(x) = Σ φ_i(a_i x) + m₂x²/2`, on
    /// `mode ± width_sd` standard deviations of the Laplace approximation.
    pub fn for_glm_1d(density: &GlmDensity<f64>, width_sd: f64, panels: usize) -> Result<Self> {
        if density.dim() != 1 {
            return Err(Error::Dimension {
                expected: 1,
                got: density.dim(),
            });
        }
        let owned = density.clone();
        let f = move |x: f64| owned.value(&[x]).unwrap_or(f64::INFINITY);
        // Newton on the strongly convex objective for the mode
        let mut x = 0.0f64;
        for _ in 0..100 {
            let g = density.gradient_vec(&[x])[0];
            let hess = glm_curvature(density, x);
            let step = g / hess;
            x -= step;
            if step.abs() <= 1e-14 * x.abs().max(1.0) {
                break;
            }
        }
        let sd = 1.0 / glm_curvature(density, x).sqrt();
        Self::new(f, x - width_sd * sd, x + width_sd * sd, panels)
    }

    fn panel_moments(&self, a: f64, b: f64) -> (f64, f64, f64) {
        let half = 0.5 * (b - a);
        let (mut i0, mut i1, mut i2) = (0.0, 0.0, 0.0);
        for (x, w) in self.nodes.iter().zip(&self.weights) {
            let t = a + half * (x + 1.0);
            let v = (self.neg_log)(t);
            let dens = if v.is_finite() { (self.shift - v).exp() } else { 0.0 };
            let wd = w * half * dens;
            i0 += wd;
            i1 += wd * t;
            i2 += wd * t * t;
        }
        (i0, i1, i2)
    }

    pub fn support(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    /// `log ∫ exp(−f)` over the tabulated interval.
    pub fn log_normaliser(&self) -> f64 {
        self.log_z
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    /// Normalised density at `x`.
    pub fn pdf(&self, x: f64) -> f64 {
        if x < self.lo || x > self.hi {
            return 0.0;
        }
        let v = (self.neg_log)(x);
        if v.is_finite() {
            (-v - self.log_z).exp()
        } else {
            0.0
        }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        if x <= self.lo {
            return 0.0;
        }
        if x >= self.hi {
            return 1.0;
        }
        let panels = self.cumulative.len() - 1;
        let p = (((x - self.lo) / self.width) as usize).min(panels - 1);
        let a = self.lo + self.width * p as f64;
        let total = self.cumulative[panels];
        let z = (self.log_z + self.shift).exp();
        let (part, _, _) = self.panel_moments(a, x);
        (self.cumulative[p] + part / z / total).clamp(0.0, 1.0)
    }

    /// Inverse CDF by bisection.
    pub fn quantile(&self, u: f64) -> f64 {
        if u <= 0.0 {
            return self.lo;
        }
        if u >= 1.0 {
            return self.hi;
        }
        let (mut a, mut b) = (self.lo, self.hi);
        for _ in 0..200 {
            let m = 0.5 * (a + b);
            if self.cdf(m) < u {
                a = m;
            } else {
                b = m;
            }
            if b - a <= 1e-13 * (1.0 + m.abs()) {
                break;
            }
        }
        0.5 * (a + b)
    }
}

fn glm_curvature(density: &GlmDensity<f64>, x: f64) -> f64 {
    let a = density.matrix();
    let mut h = density.m2();
    for i in 0..density.n() {
        let ai = a.row(i)[0];
        h += ai * ai * density.losses()[if density.losses().len() == 1 { 0 } else { i }].phi_second(ai * x);
    }
    h
}

/// Pass/fail state of a moment check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MomentStatus {
    Pass,
    Fail,
    InsufficientData,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentReport {
    pub status: MomentStatus,
    pub samples: usize,
    /// `(x̄_i − μ_i) / (σ̂_i/√n)`.
    pub mean_z: Vec<f64>,
    /// Row-major upper triangle incl. diagonal: `(Ĉ_ij − Σ_ij) / se_ij`.
    pub cov_z: Vec<f64>,
    pub threshold: f64,
}

impl MomentReport {
    pub fn max_abs_z(&self) -> f64 {
        self.mean_z
            .iter()
            .chain(&self.cov_z)
            .map(|z| z.abs())
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.status == MomentStatus::Pass
    }
}

impl fmt::Display for MomentReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = match self.status {
            MomentStatus::Pass => "pass",
            MomentStatus::Fail => "fail",
            MomentStatus::InsufficientData => "insufficient_data",
        };
        writeln!(f, "check=moments")?;
        writeln!(f, "status={status}")?;
        writeln!(f, "samples={}", self.samples)?;
        writeln!(f, "threshold={}", self.threshold)?;
        write!(f, "max_abs_z={}", self.max_abs_z())
    }
}

/// Default `|z|` threshold of [`moment_check`].
pub const MOMENT_Z_THRESHOLD: f64 = 5.0;

/// z-scores of the sample mean and covariance against targets, with
/// empirical standard errors; passes iff every `|z| ≤ 5`.
pub fn moment_check<T: Scalar>(samples: &[Vec<T>], target_mean: &[f64], target_cov: &[Vec<f64>]) -> Result<MomentReport> {
    moment_check_with_threshold(samples, target_mean, target_cov, MOMENT_Z_THRESHOLD)
}

pub fn moment_check_with_threshold<T: Scalar>(
    samples: &[Vec<T>],
    target_mean: &[f64],
    target_cov: &[Vec<f64>],
    threshold: f64,
) -> Result<MomentReport> {
    let d = target_mean.len();
    if target_cov.len() != d || target_cov.iter().any(|r| r.len() != d) {
        return Err(Error::Dimension {
            expected: d,
            got: target_cov.len(),
        });
    }
    if let Some(bad) = samples.iter().find(|s| s.len() != d) {
        return Err(Error::Dimension {
            expected: d,
            got: bad.len(),
        });
    }
    let n = samples.len();
    if n < 2 {
        return Ok(MomentReport {
            status: MomentStatus::InsufficientData,
            samples: n,
            mean_z: Vec::new(),
            cov_z: Vec::new(),
            threshold,
        });
    }
    let nf = n as f64;
    let xs: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| s.iter().map(|v| v.to_f64_lossy()).collect())
        .collect();
    let mean: Vec<f64> = (0..d)
        .map(|i| xs.iter().map(|x| x[i]).sum::<f64>() / nf)
        .collect();
    let mut mean_z = Vec::with_capacity(d);
    for i in 0..d {
        let var = xs.iter().map(|x| (x[i] - mean[i]).powi(2)).sum::<f64>() / (nf - 1.0);
        mean_z.push(z_score(mean[i] - target_mean[i], (var / nf).sqrt()));
    }
    let mut cov_z = Vec::with_capacity(d * (d + 1) / 2);
    for i in 0..d {
        for j in i..d {
            let prods: Vec<f64> = xs
                .iter()
                .map(|x| (x[i] - mean[i]) * (x[j] - mean[j]))
                .collect();
            let c = prods.iter().sum::<f64>() / (nf - 1.0);
            let pm = prods.iter().sum::<f64>() / nf;
            let pv = prods.iter().map(|p| (p - pm).powi(2)).sum::<f64>() / (nf - 1.0);
            cov_z.push(z_score(c - target_cov[i][j], (pv / nf).sqrt()));
        }
    }
    let ok = mean_z.iter().chain(&cov_z).all(|z| z.abs() <= threshold);
    Ok(MomentReport {
        status: if ok { MomentStatus::Pass } else { MomentStatus::Fail },
        samples: n,
        mean_z,
        cov_z,
        threshold,
    })
}

fn z_score(diff: f64, se: f64) -> f64 {
    if se > 0.0 {
        diff / se
    } else if diff == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

/// [`moment_check`] on the final sample of every run.
pub fn moment_check_runs<T: Scalar>(runs: &[HmcRun<T>], target_mean: &[f64], target_cov: &[Vec<f64>]) -> Result<MomentReport> {
    let finals: Vec<Vec<T>> = runs.iter().map(|r| r.final_sample().to_vec()).collect();
    moment_check(&finals, target_mean, target_cov)
}

/// Ratio of an observed quantity to a monitored bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonitorReport {
    pub observed: f64,
    pub bound: f64,
    /// `observed / bound`; 0 when both vanish.
    pub ratio: f64,
    pub multiplier: f64,
}

impl MonitorReport {
    fn new(observed: f64, bound: f64, multiplier: f64) -> Self {
        let ratio = if observed == 0.0 {
            0.0
        } else if bound > 0.0 {
            observed / bound
        } else {
            f64::INFINITY
        };
        Self {
            observed,
            bound,
            ratio,
            multiplier,
        }
    }

    pub fn within(&self) -> bool {
        self.ratio <= 1.0
    }
}

impl fmt::Display for MonitorReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "observed={} bound={} ratio={} multiplier={}",
            self.observed, self.bound, self.ratio, self.multiplier
        )
    }
}

/// Parameters of the `ℓ∞` drift bound `c (√(τ/m₂) + τM/m₂) log(dN/η)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriftParameters {
    pub tau: f64,
    pub m2: f64,
    pub cauchy_m: f64,
    pub dim: usize,
    pub iterations: usize,
    pub eta: f64,
    pub multiplier: f64,
}

impl DriftParameters {
    pub fn for_density<T: Scalar>(density: &GlmDensity<T>, iterations: usize, eta: f64) -> Self {
        Self {
            tau: density.tau().to_f64_lossy(),
            m2: density.m2().to_f64_lossy(),
            cauchy_m: density.cauchy_m().to_f64_lossy(),
            dim: density.dim(),
            iterations,
            eta,
            multiplier: DEFAULT_MONITOR_MULTIPLIER,
        }
    }

    pub fn bound(&self) -> f64 {
        let log = (self.dim as f64 * self.iterations as f64 / self.eta).ln().max(0.0);
        self.multiplier * ((self.tau / self.m2).sqrt() + self.tau * self.cauchy_m / self.m2) * log
    }
}

/// Largest recorded `‖s^{(j)} − s^{(0)}‖∞` of a GLM run against the drift bound.
pub fn linf_drift_monitor<T: Scalar>(run: &HmcRun<T>, params: &DriftParameters) -> Result<MonitorReport> {
    let drift = run.summary.max_drift.ok_or_else(|| {
        Error::InvalidArgument("run has no drift record; sample in GLM mode".into())
    })?;
    Ok(MonitorReport::new(drift.to_f64_lossy(), params.bound(), params.multiplier))
}

/// `(1/N) Σ ‖∇f(x^{(k)})‖²` against
/// `c (f(x⁰) − f*)/(h²N) + c M₂ d + c ε̄²/h⁴`.
pub fn amortized_gradient_monitor<T: Scalar>(run: &HmcRun<T>, f_gap: f64, big_m2: f64, multiplier: f64) -> MonitorReport {
    let cfg = &run.config;
    let h = cfg.h.to_f64_lossy();
    let n = cfg.n_iters as f64;
    let eps_bar = cfg.ode_accuracy.to_f64_lossy();
    let d = run.x0.len() as f64;
    let bound = multiplier * (f_gap.max(0.0) / (h * h * n) + big_m2 * d + eps_bar * eps_bar / h.powi(4));
    MonitorReport::new(run.summary.mean_gradient_sq.to_f64_lossy(), bound, multiplier)
}
