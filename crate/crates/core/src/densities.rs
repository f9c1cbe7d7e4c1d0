//! Target densities `e^{-f}`: the generic strongly convex interface, simple
//! quadratics, and the GLM family `f(x) = Σ φ_i(a_iᵀx) + (m₂/2)‖x‖²`.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg::{dot, norm2, symmetric_eigenvalues, Cholesky, DenseMatrix};
use crate::scalar::{lit, Scalar};

/// A strongly log-concave target `e^{-f}` with `m₂ I ⪯ ∇²f ⪯ M₂ I`.
pub trait Density<T: Scalar>: Send + Sync {
    fn dim(&self) -> usize;

    /// `∇f(x)` written into `out`.
    fn gradient(&self, x: &[T], out: &mut [T]);

    /// `f(x)` when available.
    fn value(&self, _x: &[T]) -> Option<T> {
        None
    }

    /// Strong convexity constant `m₂`.
    fn m2(&self) -> T;

    /// Gradient Lipschitz constant `M₂`.
    fn big_m2(&self) -> T;

    fn kappa(&self) -> T {
        self.big_m2() / self.m2()
    }

    fn gradient_vec(&self, x: &[T]) -> Vec<T> {
        let mut g = vec![T::zero(); self.dim()];
        self.gradient(x, &mut g);
        g
    }
}

fn check_constants<T: Scalar>(m2: T, big_m2: T) -> Result<()> {
    if !(m2.is_finite() && big_m2.is_finite() && m2 > T::zero() && big_m2 >= m2) {
        return Err(Error::InvalidArgument(format!(
            "need 0 < m2 <= M2, got m2 = {m2}, M2 = {big_m2}"
        )));
    }
    Ok(())
}

type GradFn<'a, T> = Arc<dyn Fn(&[T], &mut [T]) + Send + Sync + 'a>;
type ValueFn<'a, T> = Arc<dyn Fn(&[T]) -> T + Send + Sync + 'a>;

/// Density given by a gradient oracle and its constants.
#[derive(Clone)]
pub struct StronglyConvexDensity<'a, T> {
    dim: usize,
    m2: T,
    big_m2: T,
    grad: GradFn<'a, T>,
    value: Option<ValueFn<'a, T>>,
}

impl<'a, T: Scalar> StronglyConvexDensity<'a, T> {
    pub fn new<G>(dim: usize, m2: T, big_m2: T, grad: G) -> Result<Self>
    where
        G: Fn(&[T], &mut [T]) + Send + Sync + 'a,
    {
        check_constants(m2, big_m2)?;
        if dim == 0 {
            return Err(Error::InvalidArgument("dimension must be positive".into()));
        }
        Ok(Self {
            dim,
            m2,
            big_m2,
            grad: Arc::new(grad),
            value: None,
        })
    }

    pub fn with_value<V>(mut self, value: V) -> Self
    where
        V: Fn(&[T]) -> T + Send + Sync + 'a,
    {
        self.value = Some(Arc::new(value));
        self
    }
}

impl<T: Scalar> std::fmt::Debug for StronglyConvexDensity<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StronglyConvexDensity")
            .field("dim", &self.dim)
            .field("m2", &self.m2)
            .field("M2", &self.big_m2)
            .finish()
    }
}

impl<T: Scalar> Density<T> for StronglyConvexDensity<'_, T> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn gradient(&self, x: &[T], out: &mut [T]) {
        (self.grad)(x, out)
    }

    fn value(&self, x: &[T]) -> Option<T> {
        self.value.as_ref().map(|v| v(x))
    }

    fn m2(&self) -> T {
        self.m2
    }

    fn big_m2(&self) -> T {
        self.big_m2
    }
}

/// `f(x) = ½ Σ λ_i (x_i - μ_i)²`, a Gaussian with mean `μ` and covariance `diag(1/λ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticDensity<T> {
    precision: Vec<T>,
    mean: Vec<T>,
}

impl<T: Scalar> QuadraticDensity<T> {
    pub fn new(precision: Vec<T>, mean: Vec<T>) -> Result<Self> {
        if precision.is_empty() {
            return Err(Error::InvalidArgument("dimension must be positive".into()));
        }
        if precision.len() != mean.len() {
            return Err(Error::Dimension {
                expected: precision.len(),
                got: mean.len(),
            });
        }
        if precision.iter().any(|p| !(p.is_finite() && *p > T::zero())) {
            return Err(Error::InvalidArgument("precisions must be positive".into()));
        }
        Ok(Self { precision, mean })
    }

    /// Standard Gaussian in `d` dimensions.
    pub fn standard(d: usize) -> Result<Self> {
        Self::new(vec![T::one(); d], vec![T::zero(); d])
    }

    pub fn precision(&self) -> &[T] {
        &self.precision
    }

    pub fn mean(&self) -> &[T] {
        &self.mean
    }

    /// Diagonal of the covariance `1/λ_i`.
    pub fn variances(&self) -> Vec<T> {
        self.precision.iter().map(|p| T::one() / *p).collect()
    }
}

impl<T: Scalar> Density<T> for QuadraticDensity<T> {
    fn dim(&self) -> usize {
        self.precision.len()
    }

    fn gradient(&self, x: &[T], out: &mut [T]) {
        for i in 0..x.len() {
            out[i] = self.precision[i] * (x[i] - self.mean[i]);
        }
    }

    fn value(&self, x: &[T]) -> Option<T> {
        Some(
            x.iter()
                .zip(&self.mean)
                .zip(&self.precision)
                .map(|((x, m), p)| *p * (*x - *m) * (*x - *m))
                .sum::<T>()
                * lit(0.5),
        )
    }

    fn m2(&self) -> T {
        self.precision.iter().copied().fold(T::infinity(), T::min)
    }

    fn big_m2(&self) -> T {
        self.precision.iter().copied().fold(T::zero(), T::max)
    }
}

/// Which scalar loss a [`LossFamily`] evaluates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind<T> {
    /// `log(1 + e^{-t})`
    Logistic,
    /// `√(t² + δ²) - δ`
    PseudoHuber { delta: T },
}

/// Scalar loss with its Cauchy estimate `|φ^{(l+1)}| ≤ M l! r^{-l}`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossFamily<T> {
    pub kind: LossKind<T>,
    pub name: &'static str,
    pub cauchy_m: T,
    pub cauchy_r: T,
    /// Lipschitz constant of `φ′` used in step-size formulas (`M / r`).
    pub lipschitz_phi_prime: T,
    /// Sharper analytic value, informational only.
    pub sharp_lipschitz_phi_prime: T,
    /// `sup |φ′|`
    pub sup_phi_prime: T,
}

pub fn logistic_family<T: Scalar>() -> LossFamily<T> {
    LossFamily {
        kind: LossKind::Logistic,
        name: "logistic",
        cauchy_m: T::one(),
        cauchy_r: T::one(),
        lipschitz_phi_prime: T::one(),
        sharp_lipschitz_phi_prime: lit(0.25),
        sup_phi_prime: T::one(),
    }
}

pub fn pseudo_huber_family<T: Scalar>(delta: T) -> Result<LossFamily<T>> {
    if !(delta.is_finite() && delta > T::zero()) {
        return Err(Error::InvalidArgument(format!(
            "pseudo-Huber delta must be positive, got {delta}"
        )));
    }
    let r = delta * lit(0.5);
    Ok(LossFamily {
        kind: LossKind::PseudoHuber { delta },
        name: "pseudo-huber",
        cauchy_m: T::one(),
        cauchy_r: r,
        lipschitz_phi_prime: T::one() / r,
        sharp_lipschitz_phi_prime: T::one() / delta,
        sup_phi_prime: T::one(),
    })
}

impl<T: Scalar> LossFamily<T> {
    pub fn phi(&self, t: T) -> T {
        match self.kind {
            LossKind::Logistic => {
                if t >= T::zero() {
                    (-t).exp().ln_1p()
                } else {
                    -t + t.exp().ln_1p()
                }
            }
            LossKind::PseudoHuber { delta } => (t * t + delta * delta).sqrt() - delta,
        }
    }

    pub fn phi_prime(&self, t: T) -> T {
        match self.kind {
            LossKind::Logistic => {
                if t >= T::zero() {
                    let e = (-t).exp();
                    -e / (T::one() + e)
                } else {
                    -T::one() / (T::one() + t.exp())
                }
            }
            LossKind::PseudoHuber { delta } => t / (t * t + delta * delta).sqrt(),
        }
    }

    pub fn phi_second(&self, t: T) -> T {
        match self.kind {
            LossKind::Logistic => {
                let e = (-t.abs()).exp();
                e / ((T::one() + e) * (T::one() + e))
            }
            LossKind::PseudoHuber { delta } => {
                let q = t * t + delta * delta;
                delta * delta / (q * q.sqrt())
            }
        }
    }
}

/// `λ_min(AᵀA)` with a singularity flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaMin<T> {
    pub value: T,
    pub singular: bool,
}

/// Dimension up to which the smallest eigenvalue is computed exactly.
const EXACT_EIGEN_DIM: usize = 64;

/// Smallest eigenvalue of `AᵀA`; exact Jacobi for `d ≤ 64`, inverse power
/// iteration above. Flagged singular below `1e-10 · max(1, λ_max)`.
pub fn lambda_min_estimate<T: Scalar>(a: &DenseMatrix<T>) -> LambdaMin<T> {
    let gram = a.gram();
    let d = gram.rows();
    if d == 0 {
        return LambdaMin {
            value: T::zero(),
            singular: true,
        };
    }
    let trace: T = (0..d).map(|i| gram[(i, i)]).sum();
    let tol = lit::<T>(1e-10) * trace.max(T::one());
    let value = if d <= EXACT_EIGEN_DIM {
        symmetric_eigenvalues(&gram)[0].max(T::zero())
    } else {
        match Cholesky::factor(&gram) {
            Err(_) => T::zero(),
            Ok(ch) => {
                let inv_top = crate::linalg::power_iteration(
                    d,
                    |x, y| y.copy_from_slice(&ch.solve(x)),
                    5000,
                    lit(1e-4),
                );
                // the estimate converges from below for λ_max(M⁻¹); shrink by the tolerance
                T::one() / (inv_top * lit(1.01))
            }
        }
    };
    LambdaMin {
        value,
        singular: value <= tol,
    }
}

/// `‖AAᵀ‖_{∞→∞}`: the largest absolute row sum of `AAᵀ`, from `a_i · a_j`.
pub fn tau<T: Scalar>(a: &DenseMatrix<T>) -> T {
    let n = a.rows();
    let mut best = T::zero();
    for i in 0..n {
        let ri = a.row(i);
        let s: T = (0..n).map(|j| dot(ri, a.row(j)).abs()).sum();
        best = best.max(s);
    }
    best
}

/// Largest number of nonzeros in a row of `AAᵀ`.
pub fn max_row_nnz_outer<T: Scalar>(a: &DenseMatrix<T>) -> usize {
    let n = a.rows();
    (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| dot(a.row(i), a.row(j)) != T::zero())
                .count()
        })
        .max()
        .unwrap_or(0)
}

/// Least-squares `x = (AᵀA)⁻¹ Aᵀ s`.
pub fn recover_x<T: Scalar>(a: &DenseMatrix<T>, s: &[T]) -> Result<Vec<T>> {
    if s.len() != a.rows() {
        return Err(Error::Dimension {
            expected: a.rows(),
            got: s.len(),
        });
    }
    let lm = lambda_min_estimate(a);
    if lm.singular {
        return Err(Error::Singular(lm.value.to_f64_lossy()));
    }
    let ch = Cholesky::factor(&a.gram())?;
    Ok(ch.solve(&a.matvec_t(s)))
}

/// Scratch length kept on the stack by [`GlmDensity::s_force`].
const S_FORCE_STACK: usize = 128;

/// `f(x) = Σ φ_i(a_iᵀx) + (m₂/2)‖x‖²`.
#[derive(Debug, Clone)]
pub struct GlmDensity<T> {
    a: DenseMatrix<T>,
    losses: Vec<LossFamily<T>>,
    m2: T,
    tau: T,
    big_m2: T,
    lambda_min: LambdaMin<T>,
    gram_chol: Option<Cholesky<T>>,
}

impl<T: Scalar> GlmDensity<T> {
    /// One loss shared by every row.
    pub fn new(a: DenseMatrix<T>, loss: LossFamily<T>, m2: T) -> Result<Self> {
        Self::with_losses(a, vec![loss], m2)
    }

    /// Per-row losses (`losses.len() == n`) or a single shared loss.
    pub fn with_losses(a: DenseMatrix<T>, losses: Vec<LossFamily<T>>, m2: T) -> Result<Self> {
        if a.cols() == 0 {
            return Err(Error::InvalidArgument("matrix has no columns".into()));
        }
        if !a.is_finite() {
            return Err(Error::InvalidArgument("matrix entries must be finite".into()));
        }
        if !(m2.is_finite() && m2 > T::zero()) {
            return Err(Error::InvalidArgument(format!(
                "m2 must be positive, got {m2}"
            )));
        }
        if losses.len() != 1 && losses.len() != a.rows() {
            return Err(Error::Dimension {
                expected: a.rows(),
                got: losses.len(),
            });
        }
        let tau = tau(&a);
        let lphi = losses
            .iter()
            .map(|l| l.lipschitz_phi_prime)
            .fold(T::zero(), T::max);
        let big_m2 = m2 + tau * lphi;
        let lambda_min = lambda_min_estimate(&a);
        let gram_chol = if lambda_min.singular {
            None
        } else {
            Cholesky::factor(&a.gram()).ok()
        };
        Ok(Self {
            a,
            losses,
            m2,
            tau,
            big_m2,
            lambda_min,
            gram_chol,
        })
    }

    pub fn matrix(&self) -> &DenseMatrix<T> {
        &self.a
    }

    pub fn n(&self) -> usize {
        self.a.rows()
    }

    pub fn tau(&self) -> T {
        self.tau
    }

    pub fn lambda_min(&self) -> LambdaMin<T> {
        self.lambda_min
    }

    #[inline]
    fn loss(&self, i: usize) -> &LossFamily<T> {
        if self.losses.len() == 1 {
            &self.losses[0]
        } else {
            &self.losses[i]
        }
    }

    pub fn losses(&self) -> &[LossFamily<T>] {
        &self.losses
    }

    /// Largest Cauchy `M` over rows.
    pub fn cauchy_m(&self) -> T {
        self.losses.iter().map(|l| l.cauchy_m).fold(T::zero(), T::max)
    }

    /// Smallest Cauchy radius over rows.
    pub fn cauchy_r(&self) -> T {
        self.losses
            .iter()
            .map(|l| l.cauchy_r)
            .fold(T::infinity(), T::min)
    }

    pub fn lipschitz_phi_prime(&self) -> T {
        self.losses
            .iter()
            .map(|l| l.lipschitz_phi_prime)
            .fold(T::zero(), T::max)
    }

    /// `ℓ∞` Lipschitz constant of the s-space force: `τ L_{φ′} + m₂`.
    pub fn s_lipschitz(&self) -> T {
        self.tau * self.lipschitz_phi_prime() + self.m2
    }

    /// `φ′` applied row-wise to `s`.
    pub fn phi_prime_vec(&self, s: &[T], out: &mut [T]) {
        for (i, (o, &si)) in out.iter_mut().zip(s).enumerate() {
            *o = self.loss(i).phi_prime(si);
        }
    }

    /// `F(s) = -AAᵀ φ′(s) - m₂ s`.
    pub fn s_force(&self, s: &[T], out: &mut [T]) {
        let (n, d) = (self.n(), self.a.cols());
        let mut stack = [T::zero(); S_FORCE_STACK];
        let mut heap = Vec::new();
        let buf = if n + d <= S_FORCE_STACK {
            &mut stack[..n + d]
        } else {
            heap.resize(n + d, T::zero());
            &mut heap[..]
        };
        let (u, w) = buf.split_at_mut(n);
        self.phi_prime_vec(s, u);
        self.a.matvec_t_into(u, w);
        self.a.matvec_into(w, out);
        for (o, &si) in out.iter_mut().zip(s) {
            *o = -*o - self.m2 * si;
        }
    }

    /// The s-space dynamics as an oracle `(s, out)`.
    pub fn s_dynamics(&self) -> impl Fn(&[T], &mut [T]) + Send + Sync + '_ {
        move |s, out| self.s_force(s, out)
    }

    /// Least squares recovery of `x` from `s = Ax`, using the cached factor.
    pub fn recover_x(&self, s: &[T]) -> Result<Vec<T>> {
        if s.len() != self.n() {
            return Err(Error::Dimension {
                expected: self.n(),
                got: s.len(),
            });
        }
        match &self.gram_chol {
            Some(ch) => Ok(ch.solve(&self.a.matvec_t(s))),
            None => Err(Error::Singular(self.lambda_min.value.to_f64_lossy())),
        }
    }
}

impl<T: Scalar> Density<T> for GlmDensity<T> {
    fn dim(&self) -> usize {
        self.a.cols()
    }

    /// `Aᵀφ′(Ax) + m₂x`
    fn gradient(&self, x: &[T], out: &mut [T]) {
        let mut s = self.a.matvec(x);
        for (i, si) in s.iter_mut().enumerate() {
            *si = self.loss(i).phi_prime(*si);
        }
        self.a.matvec_t_into(&s, out);
        for (o, &xi) in out.iter_mut().zip(x) {
            *o += self.m2 * xi;
        }
    }

    fn value(&self, x: &[T]) -> Option<T> {
        let s = self.a.matvec(x);
        let loss: T = s.iter().enumerate().map(|(i, &si)| self.loss(i).phi(si)).sum();
        Some(loss + self.m2 * lit(0.5) * dot(x, x))
    }

    fn m2(&self) -> T {
        self.m2
    }

    fn big_m2(&self) -> T {
        self.big_m2
    }
}

/// Glm fast-path parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GlmStepPlan<T> {
    pub h: T,
    pub n_iters: usize,
    /// Per-step s-space accuracy parameter `δ` (target error `δ r` in `ℓ∞`).
    pub delta: T,
    /// Degree of the solution polynomial.
    pub degree: usize,
    pub theta: T,
    /// `log(dN/η)` at the final fixed-point round.
    pub log_term: T,
    pub eps: T,
    pub eta: T,
    pub kappa: T,
}

/// Tunable constants of [`glm_step_plan_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlmPlanConstants<T> {
    pub c_h: T,
    pub c_delta: T,
    /// Replace the formula step size (validated by the caller against the cap).
    pub h_override: Option<T>,
}

impl<T: Scalar> Default for GlmPlanConstants<T> {
    fn default() -> Self {
        Self {
            c_h: lit(1.0 / 16000.0),
            c_delta: T::one(),
            h_override: None,
        }
    }
}

/// Rounds of substituting `N` back into `log(dN/η)`.
const PLAN_FIXED_POINT_ROUNDS: usize = 3;

/// `N = ⌈(1/θ) log(4/ε² (‖∇f(x⁰)‖²/m₂ + d))⌉`
pub fn iteration_count_formula<T: Scalar>(theta: T, eps: T, grad_norm: T, m2: T, d: usize) -> usize {
    let arg = lit::<T>(4.0) / (eps * eps) * (grad_norm * grad_norm / m2 + T::from_usize_lossy(d));
    let n = (arg.ln() / theta).ceil().to_f64_lossy();
    if n.is_finite() && n >= 1.0 {
        n as usize
    } else {
        1
    }
}

/// Largest solution degree a plan may request.
pub const MAX_GLM_DEGREE: usize = 96;

/// Solution degree `2⌈4 + log₂(1/δ)⌉` with `δ` clamped to at most one,
/// capped at [`MAX_GLM_DEGREE`].
pub fn degree_for_accuracy<T: Scalar>(delta: T) -> usize {
    let d = delta.min(T::one());
    let l = (T::one() / d).log2().max(T::zero());
    let half = (lit::<T>(4.0) + l).ceil().to_f64_lossy();
    if half.is_finite() && half <= (MAX_GLM_DEGREE / 2) as f64 {
        2 * half as usize
    } else {
        MAX_GLM_DEGREE
    }
}

pub fn glm_step_plan<T: Scalar>(
    density: &GlmDensity<T>,
    x0: &[T],
    eps: T,
    eta: T,
) -> Result<GlmStepPlan<T>> {
    glm_step_plan_with(density, x0, eps, eta, &GlmPlanConstants::default())
}

pub fn glm_step_plan_with<T: Scalar>(
    density: &GlmDensity<T>,
    x0: &[T],
    eps: T,
    eta: T,
    constants: &GlmPlanConstants<T>,
) -> Result<GlmStepPlan<T>> {
    let d = density.dim();
    if x0.len() != d {
        return Err(Error::Dimension {
            expected: d,
            got: x0.len(),
        });
    }
    if !(eps > T::zero() && eps.is_finite()) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    if !(eta > T::zero() && eta < T::one()) {
        return Err(Error::InvalidArgument(format!(
            "failure probability must lie in (0, 1), got {eta}"
        )));
    }
    let m2 = density.m2();
    let big_m2 = density.big_m2();
    let tau = density.tau();
    let m = density.cauchy_m();
    let r = density.cauchy_r();
    let kappa = big_m2 / m2;
    let grad_norm = norm2(&density.gradient_vec(x0));
    let df = T::from_usize_lossy(d);

    let mut n_iters = kappa.powf(lit(1.5)).ceil().max(T::one()).to_f64_lossy() as usize;
    let mut h = T::zero();
    let mut theta = T::zero();
    let mut log_term = T::zero();
    for _ in 0..PLAN_FIXED_POINT_ROUNDS {
        log_term = (df * T::from_usize_lossy(n_iters) / eta).ln();
        h = match constants.h_override {
            Some(h) => h,
            None => {
                let denom = (m * tau / r).sqrt() * log_term.sqrt()
                    + tau.sqrt() / r * log_term
                    + big_m2.powf(lit(0.75)) / m2.powf(lit(0.25));
                constants.c_h / denom
            }
        };
        theta = m2 * h * h / lit(8.0);
        n_iters = iteration_count_formula(theta, eps, grad_norm, m2, d);
    }
    let lm = density.lambda_min().value;
    let n = T::from_usize_lossy(density.n());
    let delta = constants.c_delta / r * (lm / (n * m2)).sqrt() * eps * theta;
    let values = [h, theta, delta, log_term];
    if values.iter().any(|v| !v.is_finite()) || !(h > T::zero()) {
        return Err(Error::NonFinite {
            iteration: 0,
            what: "GLM step plan constants".into(),
        });
    }
    Ok(GlmStepPlan {
        h,
        n_iters,
        delta,
        degree: degree_for_accuracy(delta),
        theta,
        log_term,
        eps,
        eta,
        kappa,
    })
}

/// Parse a matrix: first line `n d`, then `n` rows of `d` reals separated by
/// whitespace or commas. Blank lines and lines starting with `#` are skipped.
pub fn parse_matrix<T: Scalar>(text: &str) -> Result<DenseMatrix<T>> {
    let mut lines = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'));
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("empty matrix file".into()))?;
    let dims: Vec<usize> = header
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<usize>()
                .map_err(|e| Error::Parse(format!("bad header {header:?}: {e}")))
        })
        .collect::<Result<_>>()?;
    if dims.len() != 2 {
        return Err(Error::Parse(format!("header must be \"n d\", got {header:?}")));
    }
    let (n, d) = (dims[0], dims[1]);
    let mut data = Vec::with_capacity(n * d);
    for (row, line) in lines.enumerate() {
        if row >= n {
            return Err(Error::Parse(format!("more than {n} data rows")));
        }
        let vals: Vec<T> = line
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<f64>()
                    .map(T::lit)
                    .map_err(|e| Error::Parse(format!("row {}: {s:?}: {e}", row + 1)))
            })
            .collect::<Result<_>>()?;
        if vals.len() != d {
            return Err(Error::Parse(format!(
                "row {} has {} entries, expected {d}",
                row + 1,
                vals.len()
            )));
        }
        data.extend(vals);
    }
    if data.len() != n * d {
        return Err(Error::Parse(format!(
            "expected {n} rows, found {}",
            data.len() / d.max(1)
        )));
    }
    DenseMatrix::from_row_major(n, d, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn mat(rows: &[Vec<f64>]) -> DenseMatrix<f64> {
        DenseMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn logistic_values() {
        let l = logistic_family::<f64>();
        assert_relative_eq!(l.phi_prime(0.0), -0.5, epsilon = 1e-16);
        assert_relative_eq!(l.phi(0.0), std::f64::consts::LN_2, epsilon = 1e-16);
        assert_relative_eq!(l.phi(-800.0), 800.0, epsilon = 1e-12);
        assert!(l.phi(800.0) >= 0.0 && l.phi(800.0) < 1e-300);
        for i in 0..=1000 {
            let t = -50.0 + 0.1 * i as f64;
            assert!(l.phi_prime(t).abs() <= l.sup_phi_prime);
        }
        assert_eq!(l.lipschitz_phi_prime, 1.0);
        assert_eq!(l.sharp_lipschitz_phi_prime, 0.25);
    }

    #[test]
    fn pseudo_huber_values() {
        let l = pseudo_huber_family(1.0f64).unwrap();
        assert_eq!(l.phi(0.0), 0.0);
        assert_eq!(l.phi_prime(0.0), 0.0);
        assert_relative_eq!(l.phi(1.0), 2f64.sqrt() - 1.0, epsilon = 1e-15);
        assert_eq!(l.cauchy_r, 0.5);
        assert_eq!(l.lipschitz_phi_prime, 2.0);
        for i in 0..=1000 {
            let t = -50.0 + 0.1 * i as f64;
            assert!(l.phi_prime(t).abs() <= 1.0);
        }
        assert!(pseudo_huber_family(0.0f64).is_err());
    }

    #[test]
    fn second_derivative_within_cauchy_bound() {
        for l in [logistic_family::<f64>(), pseudo_huber_family(0.3).unwrap()] {
            let h = 1e-5;
            for i in 0..=400 {
                let t = -20.0 + 0.1 * i as f64;
                let fd = (l.phi_prime(t + h) - l.phi_prime(t - h)) / (2.0 * h);
                assert!((fd - l.phi_second(t)).abs() < 1e-6);
                assert!(fd.abs() <= l.cauchy_m / l.cauchy_r + 1e-6);
            }
        }
    }

    #[test]
    fn glm_gradient_examples() {
        let g = GlmDensity::new(mat(&[vec![1.0]]), logistic_family(), 1.0).unwrap();
        assert_relative_eq!(g.gradient_vec(&[0.0])[0], -0.5, epsilon = 1e-16);
        let far = g.gradient_vec(&[30.0])[0];
        let want = 30.0 - (-30f64).exp() / (1.0 + (-30f64).exp());
        assert_relative_eq!(far, want, epsilon = 1e-12);
        let z = GlmDensity::new(mat(&[vec![0.0, 0.0]]), logistic_family(), 2.0).unwrap();
        assert_eq!(z.gradient_vec(&[1.5, -0.5]), vec![3.0, -1.0]);
    }

    #[test]
    fn s_force_examples() {
        let a = mat(&[vec![1.0, 0.5], vec![-0.3, 2.0], vec![0.0, 1.0]]);
        let g = GlmDensity::new(a.clone(), logistic_family(), 1.0).unwrap();
        let mut out = vec![0.0; 3];
        g.s_force(&[0.0; 3], &mut out);
        let aat = a.outer_gram();
        let want = aat.matvec(&[0.5; 3]);
        for (o, w) in out.iter().zip(want) {
            assert_relative_eq!(*o, w, epsilon = 1e-14);
        }
        let z = GlmDensity::new(mat(&[vec![0.0], vec![0.0]]), logistic_family(), 3.0).unwrap();
        let mut out = vec![0.0; 2];
        z.s_force(&[1.0, -2.0], &mut out);
        assert_eq!(out, vec![-3.0, 6.0]);
    }

    #[test]
    fn tau_examples() {
        assert_eq!(tau(&DenseMatrix::<f64>::identity(3)), 1.0);
        assert_eq!(tau(&mat(&[vec![1.0, 0.0], vec![1.0, 0.0]])), 2.0);
    }

    #[test]
    fn recover_x_examples() {
        let a = mat(&[vec![1.0], vec![1.0]]);
        assert_relative_eq!(recover_x(&a, &[1.0, 3.0]).unwrap()[0], 2.0, epsilon = 1e-15);
        let id = DenseMatrix::<f64>::identity(2);
        assert_eq!(recover_x(&id, &[0.3, -4.0]).unwrap(), vec![0.3, -4.0]);
        let a = mat(&[vec![1.0, 2.0], vec![0.5, -1.0], vec![3.0, 0.1]]);
        let x0 = [0.7, -1.2];
        let s = a.matvec(&x0);
        let x = recover_x(&a, &s).unwrap();
        assert_relative_eq!(x[0], x0[0], epsilon = 1e-12);
        assert_relative_eq!(x[1], x0[1], epsilon = 1e-12);
        let rank1 = mat(&[vec![1.0, 2.0], vec![2.0, 4.0]]);
        assert!(matches!(recover_x(&rank1, &[1.0, 2.0]), Err(Error::Singular(_))));
    }

    #[test]
    fn lambda_min_examples() {
        assert_relative_eq!(
            lambda_min_estimate(&DenseMatrix::<f64>::identity(4)).value,
            1.0,
            epsilon = 1e-14
        );
        let a = mat(&[vec![2.0, 0.0], vec![0.0, 3.0]]);
        assert_relative_eq!(lambda_min_estimate(&a).value, 4.0, epsilon = 1e-12);
        let r = lambda_min_estimate(&mat(&[vec![1.0, 1.0], vec![1.0, 1.0]]));
        assert!(r.singular);
    }

    #[test]
    fn lambda_min_large_dimension_path() {
        let d = 70;
        let mut a = DenseMatrix::<f64>::zeros(d, d);
        for i in 0..d {
            a[(i, i)] = 1.0 + i as f64 * 0.1;
        }
        let lm = lambda_min_estimate(&a);
        assert!(!lm.singular);
        assert!(lm.value <= 1.0 && lm.value >= 0.98, "{}", lm.value);
    }

    #[test]
    fn step_plan_degenerate_matrix() {
        let z = GlmDensity::new(mat(&[vec![0.0]]), logistic_family(), 1.0).unwrap();
        let p = glm_step_plan(&z, &[0.0], 0.1, 0.01).unwrap();
        assert_relative_eq!(p.h, 1.0 / 16000.0, epsilon = 1e-18);
    }

    #[test]
    fn step_plan_logistic_terms() {
        let a = mat(&[vec![0.5, 0.1], vec![0.2, -0.4], vec![0.1, 0.3]]);
        let g = GlmDensity::new(a, logistic_family(), 1.0).unwrap();
        let p = glm_step_plan(&g, &[0.0, 0.0], 0.1, 0.01).unwrap();
        let t = g.tau();
        let l = p.log_term;
        let want = (1.0 / 16000.0)
            / (t.sqrt() * l.sqrt() + t.sqrt() * l + g.big_m2().powf(0.75) / 1.0);
        assert_relative_eq!(p.h, want, epsilon = 1e-18);
        assert!(p.theta <= 1.0 / 32.0);
        assert_relative_eq!(p.theta, p.h * p.h / 8.0, epsilon = 1e-20);
        assert_eq!(p.degree % 2, 0);
    }

    #[test]
    fn degree_formula() {
        assert_eq!(degree_for_accuracy(1.0), 8);
        assert_eq!(degree_for_accuracy(0.25), 12);
        assert_eq!(degree_for_accuracy(0.3), 12);
        assert_eq!(degree_for_accuracy(5.0), 8);
        assert_eq!(degree_for_accuracy(0.0), MAX_GLM_DEGREE);
    }

    #[test]
    fn iteration_count_at_minimum() {
        let theta = 0.01;
        let n = iteration_count_formula(theta, 0.1, 0.0, 1.0, 3);
        assert_eq!(n, ((4.0 * 3.0 / 0.01f64).ln() / theta).ceil() as usize);
    }

    #[test]
    fn parse_matrix_formats() {
        let m: DenseMatrix<f64> = parse_matrix("2 3\n1 2 3\n# comment\n4,5,6\n").unwrap();
        assert_eq!(m.rows(), 2);
        assert_eq!(m[(1, 2)], 6.0);
        assert!(parse_matrix::<f64>("2 2\n1 2\n").is_err());
        assert!(parse_matrix::<f64>("1 2\n1 x\n").is_err());
        assert!(parse_matrix::<f64>("").is_err());
        assert!(parse_matrix::<f64>("1 1\n1\n2\n").is_err());
    }

    fn small_matrix() -> impl Strategy<Value = DenseMatrix<f64>> {
        (1usize..6, 1usize..4).prop_flat_map(|(n, d)| {
            prop::collection::vec(-2.0f64..2.0, n * d)
                .prop_map(move |v| DenseMatrix::from_row_major(n, d, v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn prop_gradient_matches_finite_differences(
            a in small_matrix(),
            seed in prop::collection::vec(-3.0f64..3.0, 4),
            huber in any::<bool>(),
        ) {
            let loss = if huber { pseudo_huber_family(0.7).unwrap() } else { logistic_family() };
            let g = GlmDensity::new(a, loss, 0.8).unwrap();
            let d = g.dim();
            let x: Vec<f64> = seed.iter().take(d).copied().collect();
            let grad = g.gradient_vec(&x);
            let h = 1e-6;
            for i in 0..d {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += h;
                xm[i] -= h;
                let fd = (g.value(&xp).unwrap() - g.value(&xm).unwrap()) / (2.0 * h);
                prop_assert!((fd - grad[i]).abs() <= 1e-5 * grad[i].abs().max(1.0));
            }
        }

        #[test]
        fn prop_s_force_lipschitz(
            a in small_matrix(),
            pts in prop::collection::vec(-5.0f64..5.0, 12),
        ) {
            let g = GlmDensity::new(a, logistic_family(), 1.0).unwrap();
            let n = g.n();
            let s1 = &pts[..n];
            let s2 = &pts[6..6 + n];
            let mut f1 = vec![0.0; n];
            let mut f2 = vec![0.0; n];
            g.s_force(s1, &mut f1);
            g.s_force(s2, &mut f2);
            let df = f1.iter().zip(&f2).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            let ds = s1.iter().zip(s2).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            prop_assert!(df <= g.s_lipschitz() * ds * (1.0 + 1e-12) + 1e-12);
        }

        #[test]
        fn prop_convexity_window(a in small_matrix(), x in prop::collection::vec(-3.0f64..3.0, 3), u in prop::collection::vec(-1.0f64..1.0, 3)) {
            let g = GlmDensity::new(a.clone(), logistic_family(), 0.5).unwrap();
            let d = g.dim();
            let x = &x[..d];
            let u: Vec<f64> = u[..d].to_vec();
            let nu: f64 = u.iter().map(|v| v * v).sum();
            prop_assume!(nu > 1e-6);
            // uᵀ ∇²f u = m₂‖u‖² + Σ φ″(a_iᵀx)(a_iᵀu)²
            let s = a.matvec(x);
            let au = a.matvec(&u);
            let l = logistic_family::<f64>();
            let quad: f64 = 0.5 * nu + s.iter().zip(&au).map(|(si, ai)| l.phi_second(*si) * ai * ai).sum::<f64>();
            let lmax = *symmetric_eigenvalues(&a.gram()).last().unwrap();
            let rq = quad / nu;
            prop_assert!(rq >= 0.5 - 1e-12);
            prop_assert!(rq <= 0.5 + lmax * 0.25 + 1e-12);
        }

        #[test]
        fn prop_tau_sandwich(a in small_matrix()) {
            let t = tau(&a);
            let lmax = *symmetric_eigenvalues(&a.outer_gram()).last().unwrap();
            let s = max_row_nnz_outer(&a) as f64;
            prop_assert!(lmax <= t * (1.0 + 1e-12) + 1e-12);
            prop_assert!(t <= s.sqrt() * lmax * (1.0 + 1e-12) + 1e-12);
        }
    }
}
