//! Piecewise Chebyshev–Lagrange collocation bases.
//!
//! Every piece `[a, b]` of degree `D` carries `D + 1` Chebyshev nodes and the
//! Lagrange polynomials through them. Pieces of equal degree share one
//! reference element on `[-1, 1]`; integrals over a physical piece are the
//! reference integrals scaled by `(b - a) / 2`.

use std::any::{Any, TypeId};
use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::scalar::{lit, Scalar};

/// The proven boundedness constant of piecewise Chebyshev–Lagrange bases.
pub const CERTIFIED_GAMMA: f64 = 2000.0;

/// Highest degree evaluated with the plain product form; barycentric above.
pub const PRODUCT_FORM_MAX_DEGREE: usize = 8;

/// Grid resolution used by [`CollocationBasis::measured_gamma`].
pub const DEFAULT_GAMMA_GRID: usize = 1024;

/// Which boundedness constant step-size checks use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GammaPolicy {
    /// The proven constant 2000.
    #[default]
    Certified,
    /// The value measured on a dense grid for the actual basis. Opt-in only.
    Measured,
}

/// Ordered interpolation nodes strictly inside an interval.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeSet<T> {
    start: T,
    end: T,
    nodes: Vec<T>,
}

impl<T: Scalar> NodeSet<T> {
    pub fn new(start: T, end: T, nodes: Vec<T>) -> Result<Self> {
        if !(start.is_finite() && end.is_finite() && end > start) {
            return Err(Error::InvalidArgument(format!(
                "degenerate interval [{start}, {end}]"
            )));
        }
        if nodes.is_empty() {
            return Err(Error::InvalidArgument("node set is empty".into()));
        }
        if nodes.iter().any(|&c| !(c > start && c < end)) {
            return Err(Error::InvalidArgument(
                "nodes must lie strictly inside the interval".into(),
            ));
        }
        if nodes.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidArgument(
                "nodes must be strictly increasing".into(),
            ));
        }
        Ok(Self { start, end, nodes })
    }

    pub fn start(&self) -> T {
        self.start
    }

    pub fn end(&self) -> T {
        self.end
    }

    pub fn nodes(&self) -> &[T] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Chebyshev points of the first kind on `[-1, 1]`, ascending.
///
/// Computed as `sin((n + 1 - 2j)π / 2n)`, which equals `cos((2j - 1)π / 2n)`
/// but keeps the set exactly symmetric and the middle node exactly zero.
fn reference_chebyshev<T: Scalar>(count: usize) -> Vec<T> {
    let n = count as f64;
    let mut xs: Vec<T> = (1..=count)
        .map(|j| {
            let k = (count as f64) + 1.0 - 2.0 * j as f64;
            lit(((k * std::f64::consts::PI) / (2.0 * n)).sin())
        })
        .collect();
    xs.reverse();
    xs
}

/// `count` Chebyshev nodes mapped affinely onto `[a, b]`, sorted ascending.
pub fn chebyshev_nodes<T: Scalar>(count: usize, a: T, b: T) -> Result<NodeSet<T>> {
    if count == 0 {
        return Err(Error::InvalidArgument("node count must be positive".into()));
    }
    if !(a.is_finite() && b.is_finite() && b > a) {
        return Err(Error::InvalidArgument(format!(
            "degenerate interval [{a}, {b}]"
        )));
    }
    let half = (b - a) * lit(0.5);
    let nodes = reference_chebyshev::<T>(count)
        .into_iter()
        .map(|x| a + half * (x + T::one()))
        .collect();
    NodeSet::new(a, b, nodes)
}

/// Barycentric weights normalised so the largest has magnitude one.
fn barycentric_weights<T: Scalar>(nodes: &[T]) -> Vec<T> {
    let n = nodes.len();
    let mut logs = vec![0.0f64; n];
    let mut signs = vec![1.0f64; n];
    for j in 0..n {
        for i in 0..n {
            if i != j {
                let diff = (nodes[j] - nodes[i]).to_f64_lossy();
                logs[j] -= diff.abs().ln();
                if diff < 0.0 {
                    signs[j] = -signs[j];
                }
            }
        }
    }
    let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    logs.iter()
        .zip(&signs)
        .map(|(l, s)| lit(s * (l - top).exp()))
        .collect()
}

/// All Lagrange basis values at `t`.
fn lagrange_all<T: Scalar>(nodes: &[T], bary: &[T], t: T, out: &mut [T]) {
    let n = nodes.len();
    if n == 1 {
        out[0] = T::one();
        return;
    }
    if let Some(k) = nodes.iter().position(|&c| c == t) {
        out.iter_mut().for_each(|o| *o = T::zero());
        out[k] = T::one();
        return;
    }
    if n <= PRODUCT_FORM_MAX_DEGREE + 1 {
        for (j, o) in out.iter_mut().enumerate() {
            *o = lagrange_product(nodes, j, t);
        }
    } else {
        let mut denom = T::zero();
        for j in 0..n {
            let q = bary[j] / (t - nodes[j]);
            out[j] = q;
            denom += q;
        }
        out.iter_mut().for_each(|o| *o /= denom);
    }
}

fn lagrange_product<T: Scalar>(nodes: &[T], j: usize, t: T) -> T {
    let cj = nodes[j];
    nodes
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != j)
        .fold(T::one(), |acc, (_, &ci)| acc * (t - ci) / (cj - ci))
}

/// Value of the `j`-th (zero-based) Lagrange polynomial through `nodes` at `t`.
///
/// # Panics
/// If `j` is not a valid node index.
pub fn lagrange_eval<T: Scalar>(nodes: &NodeSet<T>, j: usize, t: T) -> T {
    let c = nodes.nodes();
    assert!(j < c.len(), "node index {j} out of range");
    if c.len() <= PRODUCT_FORM_MAX_DEGREE + 1 {
        lagrange_product(c, j, t)
    } else {
        let bary = barycentric_weights(c);
        let mut out = vec![T::zero(); c.len()];
        lagrange_all(c, &bary, t, &mut out);
        out[j]
    }
}

/// Gauss–Legendre rule with `n` points on `[-1, 1]`: `(abscissae, weights)`, ascending.
///
/// Exact for polynomials of degree `2n - 1`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "Gauss–Legendre rule needs at least one point");
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    let nf = n as f64;
    for i in 0..m {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = 1.0;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                p1 = ((2.0 * j as f64 + 1.0) * z * p2 - j as f64 * p3) / (j as f64 + 1.0);
            }
            pp = nf * (z * p1 - p2) / (z * z - 1.0);
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 {
                break;
            }
        }
        if n % 2 == 1 && i == m - 1 {
            z = 0.0;
            // recompute derivative at the exact centre
            let mut p1 = 1.0;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                p1 = ((2.0 * j as f64 + 1.0) * z * p2 - j as f64 * p3) / (j as f64 + 1.0);
            }
            pp = nf * (z * p1 - p2) / (z * z - 1.0);
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        let wi = 2.0 / ((1.0 - z * z) * pp * pp);
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    (x, w)
}

thread_local! {
    static GL_CACHE: std::cell::RefCell<Vec<Option<Arc<(Vec<f64>, Vec<f64>)>>>> =
        const { std::cell::RefCell::new(Vec::new()) };
}

fn cached_gauss_legendre(n: usize) -> Arc<(Vec<f64>, Vec<f64>)> {
    GL_CACHE.with(|c| {
        let mut c = c.borrow_mut();
        if c.len() <= n {
            c.resize(n + 1, None);
        }
        c[n].get_or_insert_with(|| Arc::new(gauss_legendre(n))).clone()
    })
}

/// Lagrange basis on reference Chebyshev nodes over `[-1, 1]`.
#[derive(Debug)]
struct RefElement<T> {
    nodes: Vec<T>,
    bary: Vec<T>,
    /// `local[i * n + j] = ∫_{-1}^{ξ_j} φ_i`
    local: Vec<T>,
    /// `local_t[j * n + i] = local[i * n + j]`
    local_t: Vec<T>,
    /// `∫_{-1}^{1} φ_i`
    full: Vec<T>,
    abs_full_sum: T,
    /// `moments[r][i] = ∫_{-1}^{1} (1 - ξ)^r φ_i`
    moments: Vec<Vec<T>>,
}

/// Highest `r` kept in [`RefElement::moments`].
const MAX_MOMENT: usize = 8;

/// Basis values at a quadrature point are kept on the stack up to this size.
const STACK_NODES: usize = 32;

/// Pieces with at least this many nodes use the blocked matrix product.
const GEMM_MIN_NODES: usize = 6;

impl<T: Scalar> RefElement<T> {
    fn new(degree: usize) -> Self {
        let n = degree + 1;
        let nodes = reference_chebyshev::<T>(n);
        let bary = barycentric_weights(&nodes);
        let mut el = Self {
            nodes,
            bary,
            local: vec![T::zero(); n * n],
            local_t: vec![T::zero(); n * n],
            full: vec![T::zero(); n],
            abs_full_sum: T::zero(),
            moments: Vec::new(),
        };
        let mut col = vec![T::zero(); n];
        for j in 0..n {
            el.integrals_to(el.nodes[j], &mut col);
            for i in 0..n {
                el.local[i * n + j] = col[i];
                el.local_t[j * n + i] = col[i];
            }
        }
        el.integrals_to(T::one(), &mut col);
        el.full.copy_from_slice(&col);
        el.abs_full_sum = col.iter().map(|v| v.abs()).sum();
        el.moments = (0..=MAX_MOMENT)
            .map(|r| {
                el.weighted_integrals(T::one(), r, T::one(), T::one(), &mut col);
                col.clone()
            })
            .collect();
        el
    }

    fn len(&self) -> usize {
        self.nodes.len()
    }

    fn eval_all(&self, xi: T, out: &mut [T]) {
        lagrange_all(&self.nodes, &self.bary, xi, out);
    }

    /// `out[i] = ∫_{-1}^{xi} φ_i`
    fn integrals_to(&self, xi: T, out: &mut [T]) {
        self.weighted_integrals(xi, 0, T::zero(), T::one(), out);
    }

    /// `out[i] = ∫_{-1}^{xi} (s0 - scale·ξ)^p φ_i(ξ) dξ`, exact by Gauss–Legendre.
    ///
    /// With `p = 0` the weight is one.
    fn weighted_integrals(&self, xi: T, p: usize, s0: T, scale: T, out: &mut [T]) {
        let n = self.len();
        out.iter_mut().for_each(|o| *o = T::zero());
        if xi <= -T::one() {
            return;
        }
        let q = (n + p).div_ceil(2).max(1);
        let rule = cached_gauss_legendre(q);
        let (gx, gw) = (&rule.0, &rule.1);
        let half = (xi + T::one()) * lit(0.5);
        let mut stack = [T::zero(); STACK_NODES];
        let mut heap = Vec::new();
        let phi = if n <= STACK_NODES {
            &mut stack[..n]
        } else {
            heap.resize(n, T::zero());
            &mut heap[..]
        };
        for (&x, &w) in gx.iter().zip(gw.iter()) {
            let s = -T::one() + half * (lit::<T>(x) + T::one());
            self.eval_all(s, phi);
            let mut wt = half * lit(w);
            if p > 0 {
                wt *= (s0 - scale * s).powi(p as i32);
            }
            for (o, &v) in out.iter_mut().zip(phi.iter()) {
                *o += wt * v;
            }
        }
    }
}

/// Breakpoints `T_0 < … < T_n` and a polynomial degree per piece.
#[derive(Debug, Clone, PartialEq)]
pub struct PieceSpec<T> {
    breakpoints: Vec<T>,
    degrees: Vec<usize>,
}

impl<T: Scalar> PieceSpec<T> {
    pub fn new(breakpoints: Vec<T>, degrees: Vec<usize>) -> Result<Self> {
        if breakpoints.len() < 2 {
            return Err(Error::InvalidArgument(
                "need at least two breakpoints".into(),
            ));
        }
        if breakpoints.iter().any(|b| !b.is_finite())
            || breakpoints.windows(2).any(|w| !(w[1] > w[0]))
        {
            return Err(Error::InvalidArgument(
                "breakpoints must be finite and strictly increasing".into(),
            ));
        }
        if degrees.len() != breakpoints.len() - 1 {
            return Err(Error::Dimension {
                expected: breakpoints.len() - 1,
                got: degrees.len(),
            });
        }
        Ok(Self {
            breakpoints,
            degrees,
        })
    }

    /// `pieces` equal pieces of the same degree covering `[start, end]`.
    pub fn uniform(start: T, end: T, pieces: usize, degree: usize) -> Result<Self> {
        if pieces == 0 {
            return Err(Error::InvalidArgument("piece count must be positive".into()));
        }
        let h = (end - start) / T::from_usize_lossy(pieces);
        let mut bp: Vec<T> = (0..pieces)
            .map(|i| start + h * T::from_usize_lossy(i))
            .collect();
        bp.push(end);
        Self::new(bp, vec![degree; pieces])
    }

    pub fn breakpoints(&self) -> &[T] {
        &self.breakpoints
    }

    pub fn degrees(&self) -> &[usize] {
        &self.degrees
    }

    pub fn piece_count(&self) -> usize {
        self.degrees.len()
    }

    pub fn start(&self) -> T {
        self.breakpoints[0]
    }

    pub fn end(&self) -> T {
        *self.breakpoints.last().expect("nonempty")
    }
}

/// A γ-bounded piecewise polynomial basis with its node set.
///
/// Cheap to clone: reference elements and the measured constant are shared.
#[derive(Debug, Clone)]
pub struct CollocationBasis<T> {
    pieces: PieceSpec<T>,
    elements: Vec<Arc<RefElement<T>>>,
    offsets: Vec<usize>,
    nodes: Vec<T>,
    piece_of: Vec<usize>,
    measured: Arc<OnceLock<T>>,
    /// `(pieces, degree)` for equal pieces of one degree.
    uniform_key: Option<(usize, usize)>,
}

type SharedRegistry = Mutex<HashMap<(TypeId, usize, usize), Arc<dyn Any + Send + Sync>>>;

fn shared_entry<V: Any + Send + Sync + Clone>(
    registry: &'static OnceLock<SharedRegistry>,
    key: (TypeId, usize, usize),
    make: impl FnOnce() -> V,
) -> V {
    let reg = registry.get_or_init(Default::default);
    let mut map = reg.lock().unwrap_or_else(|e| e.into_inner());
    map.entry(key)
        .or_insert_with(|| Arc::new(make()))
        .downcast_ref::<V>()
        .expect("registry entries are keyed by type")
        .clone()
}

static ELEMENTS: OnceLock<SharedRegistry> = OnceLock::new();
static UNIFORM_GAMMA: OnceLock<SharedRegistry> = OnceLock::new();

fn shared_element<T: Scalar>(degree: usize) -> Arc<RefElement<T>> {
    shared_entry(&ELEMENTS, (TypeId::of::<T>(), degree, 0), || {
        Arc::new(RefElement::new(degree))
    })
}

/// Measured γ of equal-piece bases depends only on `(pieces, degree)`; one
/// cell per key, filled from the basis on `[0, 1]`.
fn uniform_gamma_cell<T: Scalar>(pieces: usize, degree: usize) -> Arc<OnceLock<T>> {
    shared_entry(&UNIFORM_GAMMA, (TypeId::of::<T>(), pieces, degree), || {
        Arc::new(OnceLock::new())
    })
}

static UNIFORM_TEMPLATES: OnceLock<SharedRegistry> = OnceLock::new();

/// Largest piece count kept in the process-wide template registry.
pub const SHARED_TEMPLATE_MAX_PIECES: usize = 4096;

/// Process-wide equal-piece basis on `[0, 1]`. Piece counts above
/// [`SHARED_TEMPLATE_MAX_PIECES`] are built fresh and not retained.
pub fn shared_uniform_template<T: Scalar>(
    pieces: usize,
    degree: usize,
) -> Result<Arc<CollocationBasis<T>>> {
    if pieces > SHARED_TEMPLATE_MAX_PIECES {
        return Ok(Arc::new(CollocationBasis::uniform(T::zero(), T::one(), pieces, degree)?));
    }
    // validate before touching the registry so errors are not cached
    PieceSpec::<T>::uniform(T::zero(), T::one(), pieces, degree)?;
    Ok(shared_entry(
        &UNIFORM_TEMPLATES,
        (TypeId::of::<T>(), pieces, degree),
        || {
            Arc::new(
                CollocationBasis::uniform(T::zero(), T::one(), pieces, degree)
                    .expect("validated piece spec"),
            )
        },
    ))
}

/// Chebyshev–Lagrange basis of degree `D_i` on each piece.
pub fn build_piecewise_basis<T: Scalar>(pieces: PieceSpec<T>) -> CollocationBasis<T> {
    let mut cache: Vec<(usize, Arc<RefElement<T>>)> = Vec::new();
    let elements = pieces
        .degrees
        .iter()
        .map(|&d| match cache.iter().find(|(k, _)| *k == d) {
            Some((_, e)) => e.clone(),
            None => {
                let e = shared_element(d);
                cache.push((d, e.clone()));
                e
            }
        })
        .collect();
    CollocationBasis::assemble(pieces, elements, Arc::new(OnceLock::new()), None)
}

impl<T: Scalar> CollocationBasis<T> {
    fn assemble(
        pieces: PieceSpec<T>,
        elements: Vec<Arc<RefElement<T>>>,
        measured: Arc<OnceLock<T>>,
        uniform_key: Option<(usize, usize)>,
    ) -> Self {
        let mut offsets = Vec::with_capacity(elements.len() + 1);
        let mut nodes = Vec::new();
        let mut piece_of = Vec::new();
        offsets.push(0);
        for (p, el) in elements.iter().enumerate() {
            let (a, b) = (pieces.breakpoints[p], pieces.breakpoints[p + 1]);
            let half = (b - a) * lit(0.5);
            for &x in &el.nodes {
                nodes.push(a + half * (x + T::one()));
                piece_of.push(p);
            }
            offsets.push(nodes.len());
        }
        Self {
            pieces,
            elements,
            offsets,
            nodes,
            piece_of,
            measured,
            uniform_key,
        }
    }

    /// Single piece of the given degree on `[start, end]`.
    pub fn single(start: T, end: T, degree: usize) -> Result<Self> {
        Ok(build_piecewise_basis(PieceSpec::new(
            vec![start, end],
            vec![degree],
        )?))
    }

    /// `pieces` equal pieces of one degree on `[start, end]`.
    pub fn uniform(start: T, end: T, pieces: usize, degree: usize) -> Result<Self> {
        let mut b = build_piecewise_basis(PieceSpec::uniform(start, end, pieces, degree)?);
        b.measured = uniform_gamma_cell(pieces, degree);
        b.uniform_key = Some((pieces, degree));
        Ok(b)
    }

    /// The same basis mapped affinely onto `[start, end]`.
    ///
    /// The measured boundedness constant is scale invariant and carried over.
    pub fn rescaled(&self, start: T, end: T) -> Result<Self> {
        if !(start.is_finite() && end.is_finite() && end > start) {
            return Err(Error::InvalidArgument(format!(
                "degenerate interval [{start}, {end}]"
            )));
        }
        let (t0, t1) = (self.start(), self.end());
        let ratio = (end - start) / (t1 - t0);
        let n = self.pieces.breakpoints.len();
        let bp: Vec<T> = self
            .pieces
            .breakpoints
            .iter()
            .enumerate()
            .map(|(i, &b)| {
                if i == 0 {
                    start
                } else if i == n - 1 {
                    end
                } else {
                    start + (b - t0) * ratio
                }
            })
            .collect();
        let spec = PieceSpec::new(bp, self.pieces.degrees.clone())?;
        Ok(Self::assemble(
            spec,
            self.elements.clone(),
            self.measured.clone(),
            self.uniform_key,
        ))
    }

    /// Shift the basis in place so it starts at `start`, keeping its length.
    pub fn translate_to(&mut self, start: T) -> Result<()> {
        if !start.is_finite() {
            return Err(Error::InvalidArgument(format!("non-finite start {start}")));
        }
        let shift = start - self.start();
        for b in self.pieces.breakpoints.iter_mut().skip(1) {
            *b += shift;
        }
        self.pieces.breakpoints[0] = start;
        for c in self.nodes.iter_mut() {
            *c += shift;
        }
        Ok(())
    }

    pub fn pieces(&self) -> &PieceSpec<T> {
        &self.pieces
    }

    /// All nodes, ascending.
    pub fn nodes(&self) -> &[T] {
        &self.nodes
    }

    /// Total number of basis functions `Σ(1 + D_i)`.
    pub fn dim(&self) -> usize {
        self.nodes.len()
    }

    pub fn start(&self) -> T {
        self.pieces.start()
    }

    pub fn end(&self) -> T {
        self.pieces.end()
    }

    pub fn horizon(&self) -> T {
        self.end() - self.start()
    }

    /// Piece index owning basis function `j`.
    pub fn piece_of(&self, j: usize) -> usize {
        self.piece_of[j]
    }

    /// Node indices belonging to piece `p`.
    pub fn piece_range(&self, p: usize) -> std::ops::Range<usize> {
        self.offsets[p]..self.offsets[p + 1]
    }

    pub fn max_degree(&self) -> usize {
        self.pieces.degrees.iter().copied().max().unwrap_or(0)
    }

    /// The node set of piece `p`.
    pub fn node_set(&self, p: usize) -> NodeSet<T> {
        NodeSet {
            start: self.pieces.breakpoints[p],
            end: self.pieces.breakpoints[p + 1],
            nodes: self.nodes[self.piece_range(p)].to_vec(),
        }
    }

    /// The certified constant, always 2000.
    pub fn gamma_certified(&self) -> T {
        lit(CERTIFIED_GAMMA)
    }

    /// Boundedness constant measured on the default grid; computed once and cached.
    pub fn measured_gamma(&self) -> T {
        *self.measured.get_or_init(|| {
            let canonical = self.uniform_key.map(|(p, d)| {
                build_piecewise_basis(PieceSpec::uniform(T::zero(), T::one(), p, d).expect("valid key"))
            });
            measure_gamma(canonical.as_ref().unwrap_or(self), DEFAULT_GAMMA_GRID)
                .expect("grid resolution ≥ 2")
        })
    }

    /// The constant a step-size check should use under `policy`.
    pub fn gamma(&self, policy: GammaPolicy) -> T {
        match policy {
            GammaPolicy::Certified => self.gamma_certified(),
            GammaPolicy::Measured => self.measured_gamma(),
        }
    }

    fn piece_len(&self, p: usize) -> T {
        self.pieces.breakpoints[p + 1] - self.pieces.breakpoints[p]
    }

    /// Piece containing `t`, the last piece owning the right endpoint.
    pub fn locate(&self, t: T) -> usize {
        let bp = &self.pieces.breakpoints;
        let n = self.pieces.piece_count();
        // first breakpoint strictly greater than t
        let idx = bp.partition_point(|&b| b <= t);
        idx.saturating_sub(1).min(n - 1)
    }

    fn check_time(&self, t: T) -> Result<T> {
        let (a, b) = (self.start(), self.end());
        let slack = (b - a) * lit(1e-12);
        if !(t >= a - slack && t <= b + slack) {
            return Err(Error::OutOfRange {
                value: t.to_f64_lossy(),
                lo: a.to_f64_lossy(),
                hi: b.to_f64_lossy(),
            });
        }
        Ok(t.max(a).min(b))
    }

    fn to_reference(&self, p: usize, t: T) -> T {
        let a = self.pieces.breakpoints[p];
        let xi = (t - a) / self.piece_len(p) * lit(2.0) - T::one();
        xi.max(-T::one()).min(T::one())
    }

    /// `φ_j(t)`; zero outside the owning piece.
    pub fn eval(&self, j: usize, t: T) -> T {
        let p = self.piece_of[j];
        let (a, b) = (self.pieces.breakpoints[p], self.pieces.breakpoints[p + 1]);
        if t < a || t > b {
            return T::zero();
        }
        let el = &self.elements[p];
        let mut out = vec![T::zero(); el.len()];
        el.eval_all(self.to_reference(p, t), &mut out);
        out[j - self.offsets[p]]
    }

    /// `∫_{T_0}^t φ_j`.
    pub fn basis_integral(&self, j: usize, t: T) -> Result<T> {
        let t = self.check_time(t)?;
        let p = self.piece_of[j];
        let (a, b) = (self.pieces.breakpoints[p], self.pieces.breakpoints[p + 1]);
        let el = &self.elements[p];
        let half = self.piece_len(p) * lit(0.5);
        let local = j - self.offsets[p];
        if t <= a {
            return Ok(T::zero());
        }
        if t >= b {
            return Ok(el.full[local] * half);
        }
        let mut out = vec![T::zero(); el.len()];
        el.integrals_to(self.to_reference(p, t), &mut out);
        Ok(out[local] * half)
    }

    /// Dense `A_φ` with `(A_φ)_{i,j} = ∫_{T_0}^{c_j} φ_i`.
    pub fn integral_matrix(&self) -> DenseMatrix<T> {
        build_collocation_matrix(self)
    }

    /// `out_j = Σ_i f_i (A_φ)_{i,j}` for node-major rows of width `d`.
    ///
    /// Uses the block structure: `O(Σ(1 + D_i)² d)`.
    pub fn apply_integral(&self, f: &[T], d: usize, out: &mut [T]) {
        let dim = self.dim();
        debug_assert_eq!(f.len(), dim * d);
        debug_assert_eq!(out.len(), dim * d);
        let mut stack = [T::zero(); STACK_NODES];
        let mut heap = Vec::new();
        let carry = if d <= STACK_NODES {
            &mut stack[..d]
        } else {
            heap.resize(d, T::zero());
            &mut heap[..]
        };
        let bp = &self.pieces.breakpoints;
        for (p, el) in self.elements.iter().enumerate() {
            let n = el.len();
            let off = self.offsets[p];
            let half = (bp[p + 1] - bp[p]) * lit(0.5);
            if n == 1 {
                let (wl, wf) = (el.local[0] * half, el.full[0] * half);
                let fi = &f[off * d..(off + 1) * d];
                let row = &mut out[off * d..(off + 1) * d];
                for ((r, c), &v) in row.iter_mut().zip(carry.iter_mut()).zip(fi) {
                    *r = *c + wl * v;
                    *c += wf * v;
                }
                continue;
            }
            let fp = &f[off * d..(off + n) * d];
            let op = &mut out[off * d..(off + n) * d];
            for row in op.chunks_exact_mut(d) {
                row.copy_from_slice(carry);
            }
            if n >= GEMM_MIN_NODES {
                T::gemm(n, n, d, half, &el.local_t, fp, T::one(), op);
            } else {
                for (row, weights) in op.chunks_exact_mut(d).zip(el.local_t.chunks_exact(n)) {
                    for (fi, &w) in fp.chunks_exact(d).zip(weights) {
                        let w = w * half;
                        for (r, &v) in row.iter_mut().zip(fi) {
                            *r += w * v;
                        }
                    }
                }
            }
            for (fi, &w) in fp.chunks_exact(d).zip(&el.full) {
                let w = w * half;
                for (c, &v) in carry.iter_mut().zip(fi) {
                    *c += w * v;
                }
            }
        }
    }

    /// `out = Σ_j f_j · (I^m φ_j)(t)` where `I^m` is the `m`-fold integral from `T_0`
    /// and `I^0 φ_j = φ_j`. Rows of `f` are node-major with width `d`.
    pub fn combine(&self, f: &[T], d: usize, t: T, m: usize, out: &mut [T]) -> Result<()> {
        let t = self.check_time(t)?;
        debug_assert_eq!(out.len(), d);
        out.iter_mut().for_each(|o| *o = T::zero());
        let last = self.locate(t);
        let mut buf = Vec::new();
        let mut fact = T::one();
        for i in 1..m {
            fact *= T::from_usize_lossy(i);
        }
        for p in 0..=last {
            let el = &self.elements[p];
            let n = el.len();
            buf.resize(n, T::zero());
            let a = self.pieces.breakpoints[p];
            let len = self.piece_len(p);
            let half = len * lit(0.5);
            let xi_end = if p < last {
                T::one()
            } else {
                self.to_reference(p, t)
            };
            if m == 0 {
                if p < last {
                    continue;
                }
                el.eval_all(xi_end, &mut buf);
            } else if m == 1 {
                if p < last {
                    buf.copy_from_slice(&el.full);
                } else {
                    el.integrals_to(xi_end, &mut buf);
                }
                buf.iter_mut().for_each(|v| *v *= half);
            } else if p < last && m - 1 <= MAX_MOMENT {
                // (t - s)^{m-1} = Σ_r C(m-1, r) (t - b)^{m-1-r} (half (1 - ξ))^r
                let gap = t - (a + len);
                buf.iter_mut().for_each(|v| *v = T::zero());
                let mut binom = T::one();
                for r in 0..m {
                    let coef = binom * gap.powi((m - 1 - r) as i32) * half.powi(r as i32 + 1) / fact;
                    for (b, &mu) in buf.iter_mut().zip(&el.moments[r]) {
                        *b += coef * mu;
                    }
                    binom = binom * T::from_usize_lossy(m - 1 - r) / T::from_usize_lossy(r + 1);
                }
            } else {
                // (t - s)^{m-1} with s = a + half (ξ + 1)
                let s0 = t - a - half;
                el.weighted_integrals(xi_end, m - 1, s0, half, &mut buf);
                let scale = half / fact;
                buf.iter_mut().for_each(|v| *v *= scale);
            }
            let off = self.offsets[p];
            for (il, &w) in buf.iter().enumerate() {
                if w == T::zero() {
                    continue;
                }
                let fi = &f[(off + il) * d..(off + il + 1) * d];
                for (o, &v) in out.iter_mut().zip(fi) {
                    *o += w * v;
                }
            }
        }
        Ok(())
    }

    /// `out[r-1] = Σ_j f_j · (I^r φ_j)(T_end)` for `r = 1..=m`, in one pass over
    /// the pieces. Falls back to [`Self::combine`] when `m - 1` exceeds the stored
    /// moments.
    pub fn end_integrals(&self, f: &[T], d: usize, m: usize, out: &mut [T]) {
        debug_assert_eq!(out.len(), m * d);
        if m == 0 {
            return;
        }
        if m - 1 > MAX_MOMENT {
            let end = self.end();
            for r in 1..=m {
                self.combine(f, d, end, r, &mut out[(r - 1) * d..r * d])
                    .expect("end of basis is in range");
            }
            return;
        }
        out.iter_mut().for_each(|o| *o = T::zero());
        let mut inv_fact = vec![T::one(); m + 1];
        for j in 1..=m {
            inv_fact[j] = inv_fact[j - 1] / T::from_usize_lossy(j);
        }
        let mut prev = vec![T::zero(); m * d];
        for (p, el) in self.elements.iter().enumerate() {
            let len = self.piece_len(p);
            let half = len * lit(0.5);
            prev.copy_from_slice(out);
            // I_r(b + ℓ) = Σ_{j<r} ℓ^j/j! I_{r-j}(b) + ∫ (b + ℓ - s)^{r-1}/(r-1)! q(s) ds
            for r in 2..=m {
                let mut pow = T::one();
                for j in 1..r {
                    pow *= len;
                    let c = pow * inv_fact[j];
                    let src = &prev[(r - j - 1) * d..(r - j) * d];
                    for (o, &v) in out[(r - 1) * d..r * d].iter_mut().zip(src) {
                        *o += c * v;
                    }
                }
            }
            let off = self.offsets[p];
            let mut hp = half;
            for r in 1..=m {
                let scale = hp * inv_fact[r - 1];
                let row = &mut out[(r - 1) * d..r * d];
                for (il, &mu) in el.moments[r - 1].iter().enumerate() {
                    let w = scale * mu;
                    let fi = &f[(off + il) * d..(off + il + 1) * d];
                    for (o, &v) in row.iter_mut().zip(fi) {
                        *o += w * v;
                    }
                }
                hp *= half;
            }
        }
    }

    /// `Σ_j |∫_{T_0}^t φ_j|`
    pub fn abs_integral_sum(&self, t: T) -> Result<T> {
        let t = self.check_time(t)?;
        let last = self.locate(t);
        let mut total = T::zero();
        for p in 0..last {
            total += self.elements[p].abs_full_sum * self.piece_len(p) * lit(0.5);
        }
        let el = &self.elements[last];
        let mut buf = vec![T::zero(); el.len()];
        el.integrals_to(self.to_reference(last, t), &mut buf);
        let half = self.piece_len(last) * lit(0.5);
        total += buf.iter().map(|v| v.abs()).sum::<T>() * half;
        Ok(total)
    }
}

/// Dense integral matrix, block lower-triangular across pieces.
pub fn build_collocation_matrix<T: Scalar>(basis: &CollocationBasis<T>) -> DenseMatrix<T> {
    let dim = basis.dim();
    let mut m = DenseMatrix::zeros(dim, dim);
    for (p, el) in basis.elements.iter().enumerate() {
        let n = el.len();
        let off = basis.offsets[p];
        let half = basis.piece_len(p) * lit(0.5);
        for il in 0..n {
            let i = off + il;
            for jl in 0..n {
                m[(i, off + jl)] = el.local[il * n + jl] * half;
            }
            let full = el.full[il] * half;
            for j in basis.offsets[p + 1]..dim {
                m[(i, j)] = full;
            }
        }
    }
    m
}

/// Largest `Σ_j |∫_{T_0}^t φ_j| / (T_n - T_0)` over a uniform grid of
/// `grid_resolution` points, augmented with every node and breakpoint.
pub fn measure_gamma<T: Scalar>(basis: &CollocationBasis<T>, grid_resolution: usize) -> Result<T> {
    if grid_resolution < 2 {
        return Err(Error::InvalidArgument(
            "grid resolution must be at least 2".into(),
        ));
    }
    let (a, b) = (basis.start(), basis.end());
    let span = b - a;
    let step = span / T::from_usize_lossy(grid_resolution - 1);
    let grid = (0..grid_resolution)
        .map(|i| a + step * T::from_usize_lossy(i))
        .chain(basis.nodes.iter().copied())
        .chain(basis.pieces.breakpoints.iter().copied());
    let pieces = basis.pieces.piece_count();
    let mut prefix = Vec::with_capacity(pieces + 1);
    prefix.push(T::zero());
    for p in 0..pieces {
        let full = basis.elements[p].abs_full_sum * basis.piece_len(p) * lit(0.5);
        prefix.push(prefix[p] + full);
    }
    let mut buf = Vec::new();
    let mut best = T::zero();
    for t in grid {
        let t = basis.check_time(t.min(b))?;
        let p = basis.locate(t);
        let el = &basis.elements[p];
        buf.resize(el.len(), T::zero());
        el.integrals_to(basis.to_reference(p, t), &mut buf);
        let partial = buf.iter().map(|v| v.abs()).sum::<T>() * basis.piece_len(p) * lit(0.5);
        best = best.max(prefix[p] + partial);
    }
    Ok(best / span)
}
