//! Parametric symmetric-definite pencils over the plane and closed loops
//! through parameter space.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{gen_eig_ordered, LinalgError, SymMatrix};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PencilError {
    #[error(
        "dispersion δ = {delta} is out of range: need 0 < δ < sqrt((n+1)/(n+5)) = {bound} for n = {n}"
    )]
    DispersionOutOfRange { n: usize, delta: f64, bound: f64 },
    #[error("bandwidth b = {b} is out of range: need 1 <= b <= n-1 = {max} for n = {n}")]
    BandwidthOutOfRange { n: usize, b: usize, max: usize },
    #[error("dimension n = {0} is too small")]
    DimensionTooSmall(usize),
    #[error("outer spectrum overlaps the inner pencil: {0}")]
    SpectrumOverlap(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Declared regularity of a pencil in its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Smoothness {
    Analytic,
    Ck(u32),
}

/// A pair `(A(x, y), B(x, y))`, `A` symmetric and `B` symmetric positive
/// definite at every point. Evaluation must be deterministic.
pub trait ParametricPencil: Send + Sync {
    fn dim(&self) -> usize;

    fn eval(&self, x: f64, y: f64) -> (SymMatrix, SymMatrix);

    fn smoothness(&self) -> Smoothness {
        Smoothness::Analytic
    }
}

impl<P: ParametricPencil + ?Sized> ParametricPencil for Arc<P> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn eval(&self, x: f64, y: f64) -> (SymMatrix, SymMatrix) {
        (**self).eval(x, y)
    }
    fn smoothness(&self) -> Smoothness {
        (**self).smoothness()
    }
}

impl<P: ParametricPencil + ?Sized> ParametricPencil for &P {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn eval(&self, x: f64, y: f64) -> (SymMatrix, SymMatrix) {
        (**self).eval(x, y)
    }
    fn smoothness(&self) -> Smoothness {
        (**self).smoothness()
    }
}

/// Axis-aligned rectangle `[x_lo, x_hi] × [y_lo, y_hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x_lo: f64,
    pub x_hi: f64,
    pub y_lo: f64,
    pub y_hi: f64,
}

impl Rect {
    pub fn new(x_lo: f64, x_hi: f64, y_lo: f64, y_hi: f64) -> Self {
        Rect {
            x_lo,
            x_hi,
            y_lo,
            y_hi,
        }
    }

    pub fn width(&self) -> f64 {
        self.x_hi - self.x_lo
    }

    pub fn height(&self) -> f64 {
        self.y_hi - self.y_lo
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x_lo + self.x_hi), 0.5 * (self.y_lo + self.y_hi))
    }

    pub fn half_diagonal(&self) -> f64 {
        0.5 * self.width().hypot(self.height())
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_lo && x <= self.x_hi && y >= self.y_lo && y <= self.y_hi
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Rect {
        Rect::new(
            self.x_lo + dx,
            self.x_hi + dx,
            self.y_lo + dy,
            self.y_hi + dy,
        )
    }
}

// ---------------------------------------------------------------------------
// SG+ ensemble

/// Upper bound (exclusive) on the dispersion for dimension `n`.
pub fn dispersion_bound(n: usize) -> f64 {
    ((n as f64 + 1.0) / (n as f64 + 5.0)).sqrt()
}

/// Scale of the Gaussian factor entries, `δ / √(n+1)`.
pub fn sigma_n(n: usize, delta: f64) -> f64 {
    delta / (n as f64 + 1.0).sqrt()
}

/// Gamma shape for diagonal position `i` (1-based): `(n+1)/(2δ²) + (1−i)/2`.
pub fn gamma_shape(n: usize, delta: f64, i: usize) -> f64 {
    (n as f64 + 1.0) / (2.0 * delta * delta) + (1.0 - i as f64) / 2.0
}

/// Marsaglia–Tsang squeeze sampler for `Gamma(shape, rate = 1)`.
pub fn sample_gamma<R: Rng + ?Sized>(rng: &mut R, shape: f64) -> f64 {
    assert!(shape > 0.0, "gamma shape must be positive");
    if shape < 1.0 {
        let boosted = sample_gamma(rng, shape + 1.0);
        let u: f64 = rng.random();
        return boosted * u.powf(1.0 / shape);
    }
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x: f64 = rng.sample(StandardNormal);
        let v = 1.0 + c * x;
        if v <= 0.0 {
            continue;
        }
        let v = v * v * v;
        let u: f64 = rng.random();
        let x2 = x * x;
        if u < 1.0 - 0.0331 * x2 * x2 {
            return d * v;
        }
        if u.ln() < 0.5 * x2 + d * (1.0 - v + v.ln()) {
            return d * v;
        }
    }
}

/// The four numbers that regenerate an SG⁺ realization bit for bit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RealizationDescriptor {
    pub n: usize,
    pub b: usize,
    pub delta: f64,
    pub seed: u64,
}

impl RealizationDescriptor {
    pub fn generate(&self) -> Result<SgPlusRealization, PencilError> {
        sgplus_generate(self.n, self.b, self.delta, self.seed)
    }
}

/// One draw from the banded SG⁺ pencil ensemble.
///
/// `A(x, y) = L_A L_Aᵀ` and `B(x, y) = L_B L_Bᵀ` where
/// `L(x, y) = cos x L₁ + sin x L₂ + cos y L₃ + sin y L₄ + D`.
#[derive(Debug, Clone, PartialEq)]
pub struct SgPlusRealization {
    pub n: usize,
    pub b: usize,
    pub delta: f64,
    pub seed: u64,
    pub l_a: [DMatrix<f64>; 4],
    pub l_b: [DMatrix<f64>; 4],
    pub d_a: DVector<f64>,
    pub d_b: DVector<f64>,
}

/// Draws a realization. Draw order is fixed: the band entries of
/// `L_A1..L_A4` then `L_B1..L_B4`, each row-major over `0 < i − j ≤ b`,
/// then the diagonal of `D_A`, then that of `D_B`.
pub fn sgplus_generate(
    n: usize,
    b: usize,
    delta: f64,
    seed: u64,
) -> Result<SgPlusRealization, PencilError> {
    if n < 2 {
        return Err(PencilError::DimensionTooSmall(n));
    }
    if b < 1 || b > n - 1 {
        return Err(PencilError::BandwidthOutOfRange { n, b, max: n - 1 });
    }
    let bound = dispersion_bound(n);
    if !(delta > 0.0 && delta < bound) {
        return Err(PencilError::DispersionOutOfRange { n, delta, bound });
    }

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let sigma = sigma_n(n, delta);
    let band_factor = |rng: &mut ChaCha20Rng| {
        let mut l = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            for j in i.saturating_sub(b)..i {
                let u: f64 = rng.sample(StandardNormal);
                l[(i, j)] = sigma * u;
            }
        }
        l
    };
    let l_a = std::array::from_fn(|_| band_factor(&mut rng));
    let l_b = std::array::from_fn(|_| band_factor(&mut rng));
    let diagonal = |rng: &mut ChaCha20Rng| {
        DVector::from_iterator(
            n,
            (1..=n).map(|i| sigma * (2.0 * sample_gamma(rng, gamma_shape(n, delta, i))).sqrt()),
        )
    };
    let d_a = diagonal(&mut rng);
    let d_b = diagonal(&mut rng);
    Ok(SgPlusRealization {
        n,
        b,
        delta,
        seed,
        l_a,
        l_b,
        d_a,
        d_b,
    })
}

impl SgPlusRealization {
    pub fn descriptor(&self) -> RealizationDescriptor {
        RealizationDescriptor {
            n: self.n,
            b: self.b,
            delta: self.delta,
            seed: self.seed,
        }
    }

    fn factor(l: &[DMatrix<f64>; 4], d: &DVector<f64>, x: f64, y: f64) -> DMatrix<f64> {
        let (sx, cx) = x.sin_cos();
        let (sy, cy) = y.sin_cos();
        let mut m = &l[0] * cx + &l[1] * sx + &l[2] * cy + &l[3] * sy;
        for i in 0..d.len() {
            m[(i, i)] += d[i];
        }
        m
    }

    /// `L_A(x, y)`.
    pub fn factor_a(&self, x: f64, y: f64) -> DMatrix<f64> {
        Self::factor(&self.l_a, &self.d_a, x, y)
    }

    /// `L_B(x, y)`.
    pub fn factor_b(&self, x: f64, y: f64) -> DMatrix<f64> {
        Self::factor(&self.l_b, &self.d_b, x, y)
    }
}

impl ParametricPencil for SgPlusRealization {
    fn dim(&self) -> usize {
        self.n
    }

    fn eval(&self, x: f64, y: f64) -> (SymMatrix, SymMatrix) {
        let la = self.factor_a(x, y);
        let lb = self.factor_b(x, y);
        let a = SymMatrix::new(&la * la.transpose());
        let b = SymMatrix::new(&lb * lb.transpose());
        debug_assert!(
            crate::linalg::cholesky(&b).is_ok(),
            "SG+ B lost definiteness at ({x}, {y})"
        );
        (a, b)
    }
}

/// Wraps a realization as a pencil. The realization already is one; this
/// exists for symmetry with the other constructors.
pub fn sgplus_pencil(r: SgPlusRealization) -> Arc<dyn ParametricPencil> {
    Arc::new(r)
}

// ---------------------------------------------------------------------------
// analytic fixtures

/// `A = [[4x+3y, 5y], [5y, −4x+3y]] + ε[[1, 1], [1, −1]]`, `B = [[5, 3], [3, 5]]`.
///
/// For ε = 0 the eigenvalues are `±√(x² + y²)` with a conical intersection
/// at the origin; otherwise the intersection moves to `(−ε/4, −5ε/16)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalyticCiPencil {
    pub epsilon: f64,
}

impl AnalyticCiPencil {
    pub fn intersection(&self) -> (f64, f64) {
        (-self.epsilon / 4.0, -5.0 * self.epsilon / 16.0)
    }
}

pub fn analytic_ci_pencil(epsilon: f64) -> AnalyticCiPencil {
    AnalyticCiPencil { epsilon }
}

impl ParametricPencil for AnalyticCiPencil {
    fn dim(&self) -> usize {
        2
    }

    fn eval(&self, x: f64, y: f64) -> (SymMatrix, SymMatrix) {
        let e = self.epsilon;
        let a = SymMatrix::from_rows(
            2,
            &[
                4.0 * x + 3.0 * y + e,
                5.0 * y + e,
                5.0 * y + e,
                -4.0 * x + 3.0 * y - e,
            ],
        );
        let b = SymMatrix::from_rows(2, &[5.0, 3.0, 3.0, 5.0]);
        (a, b)
    }
}

/// Block-diagonal test fixture: a 2×2 pencil placed at rows/columns
/// `(j, j+1)` (1-based) of an `n×n` pencil whose other diagonal entries are
/// the fixed `outer` eigenvalues with unit `B`.
#[derive(Clone)]
pub struct EmbeddedPencil {
    inner: Arc<dyn ParametricPencil>,
    n: usize,
    j: usize,
    outer: Vec<f64>,
}

impl fmt::Debug for EmbeddedPencil {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EmbeddedPencil")
            .field("n", &self.n)
            .field("j", &self.j)
            .field("outer", &self.outer)
            .finish()
    }
}

/// Embeds a 2×2 pencil at pair index `j` (1-based).
///
/// `outer` holds the `n − 2` remaining eigenvalues in decreasing order; the
/// first `j − 1` must lie above, the rest below, every eigenvalue the inner
/// pencil takes on a 17×17 sample of `domain`.
pub fn embed_2x2(
    inner: Arc<dyn ParametricPencil>,
    n: usize,
    j: usize,
    outer: &[f64],
    domain: Rect,
) -> Result<EmbeddedPencil, PencilError> {
    if n < 2 {
        return Err(PencilError::DimensionTooSmall(n));
    }
    if inner.dim() != 2 {
        return Err(PencilError::SpectrumOverlap(format!(
            "inner pencil must be 2x2, got {}",
            inner.dim()
        )));
    }
    if j < 1 || j > n - 1 {
        return Err(PencilError::SpectrumOverlap(format!(
            "pair index {j} outside 1..={}",
            n - 1
        )));
    }
    if outer.len() != n - 2 {
        return Err(PencilError::SpectrumOverlap(format!(
            "expected {} outer eigenvalues, got {}",
            n - 2,
            outer.len()
        )));
    }
    if outer.windows(2).any(|w| !(w[0] > w[1])) {
        return Err(PencilError::SpectrumOverlap(
            "outer eigenvalues must be strictly decreasing".into(),
        ));
    }
    const SAMPLES: usize = 17;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for r in 0..SAMPLES {
        for c in 0..SAMPLES {
            let x = domain.x_lo + domain.width() * c as f64 / (SAMPLES - 1) as f64;
            let y = domain.y_lo + domain.height() * r as f64 / (SAMPLES - 1) as f64;
            let (a, b) = inner.eval(x, y);
            let e = gen_eig_ordered(&a, &b)?;
            hi = hi.max(e.values[0]);
            lo = lo.min(e.values[1]);
        }
    }
    let (above, below) = outer.split_at(j - 1);
    if let Some(&v) = above.last() {
        if !(v > hi) {
            return Err(PencilError::SpectrumOverlap(format!(
                "outer eigenvalue {v} not above inner maximum {hi}"
            )));
        }
    }
    if let Some(&v) = below.first() {
        if !(v < lo) {
            return Err(PencilError::SpectrumOverlap(format!(
                "outer eigenvalue {v} not below inner minimum {lo}"
            )));
        }
    }
    Ok(EmbeddedPencil {
        inner,
        n,
        j,
        outer: outer.to_vec(),
    })
}

impl EmbeddedPencil {
    pub fn pair_index(&self) -> usize {
        self.j
    }
}

impl ParametricPencil for EmbeddedPencil {
    fn dim(&self) -> usize {
        self.n
    }

    fn eval(&self, x: f64, y: f64) -> (SymMatrix, SymMatrix) {
        let (ia, ib) = self.inner.eval(x, y);
        let n = self.n;
        let p = self.j - 1;
        let mut a = DMatrix::<f64>::zeros(n, n);
        let mut b = DMatrix::<f64>::identity(n, n);
        let mut outer = self.outer.iter();
        for k in 0..n {
            if k == p || k == p + 1 {
                continue;
            }
            a[(k, k)] = *outer.next().expect("outer length checked at construction");
        }
        for r in 0..2 {
            for c in 0..2 {
                a[(p + r, p + c)] = ia[(r, c)];
                b[(p + r, p + c)] = ib[(r, c)];
            }
        }
        (SymMatrix::new(a), SymMatrix::new(b))
    }

    fn smoothness(&self) -> Smoothness {
        self.inner.smoothness()
    }
}

/// Serializable pencil description used by configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PencilSpec {
    Sgplus {
        n: usize,
        b: usize,
        delta: f64,
        seed: u64,
    },
    AnalyticCi {
        #[serde(default)]
        epsilon: f64,
    },
    Embedded {
        n: usize,
        j: usize,
        outer: Vec<f64>,
        #[serde(default)]
        epsilon: f64,
        /// Region over which the outer spectrum is checked for separation.
        domain: Rect,
    },
}

impl PencilSpec {
    pub fn build(&self) -> Result<Arc<dyn ParametricPencil>, PencilError> {
        Ok(match self {
            PencilSpec::Sgplus { n, b, delta, seed } => {
                Arc::new(sgplus_generate(*n, *b, *delta, *seed)?)
            }
            PencilSpec::AnalyticCi { epsilon } => Arc::new(analytic_ci_pencil(*epsilon)),
            PencilSpec::Embedded {
                n,
                j,
                outer,
                epsilon,
                domain,
            } => Arc::new(embed_2x2(
                Arc::new(analytic_ci_pencil(*epsilon)),
                *n,
                *j,
                outer,
                *domain,
            )?),
        })
    }
}

// ---------------------------------------------------------------------------
// loops

/// A closed, 1-periodic curve `t ↦ (x(t), y(t))`.
#[derive(Clone)]
pub enum LoopPath {
    /// Counterclockwise rectangle perimeter; corners at `t = 0, ¼, ½, ¾`.
    BoxPerimeter(Rect),
    Circle {
        cx: f64,
        cy: f64,
        r: f64,
    },
    Ellipse {
        cx: f64,
        cy: f64,
        rx: f64,
        ry: f64,
    },
    /// The inner loop traversed `k` times.
    Repeat(Box<LoopPath>, u32),
    Custom(Arc<dyn Fn(f64) -> (f64, f64) + Send + Sync>),
}

impl fmt::Debug for LoopPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LoopPath::BoxPerimeter(r) => f.debug_tuple("BoxPerimeter").field(r).finish(),
            LoopPath::Circle { cx, cy, r } => f
                .debug_struct("Circle")
                .field("cx", cx)
                .field("cy", cy)
                .field("r", r)
                .finish(),
            LoopPath::Ellipse { cx, cy, rx, ry } => f
                .debug_struct("Ellipse")
                .field("cx", cx)
                .field("cy", cy)
                .field("rx", rx)
                .field("ry", ry)
                .finish(),
            LoopPath::Repeat(inner, k) => f.debug_tuple("Repeat").field(inner).field(k).finish(),
            LoopPath::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

/// Counterclockwise perimeter of the box with lower-left corner `(x0, y0)`.
pub fn box_perimeter(x0: f64, y0: f64, side_x: f64, side_y: f64) -> LoopPath {
    assert!(side_x > 0.0 && side_y > 0.0, "box sides must be positive");
    LoopPath::BoxPerimeter(Rect::new(x0, x0 + side_x, y0, y0 + side_y))
}

impl LoopPath {
    pub fn circle(cx: f64, cy: f64, r: f64) -> Self {
        LoopPath::Circle { cx, cy, r }
    }

    pub fn repeated(self, times: u32) -> Self {
        LoopPath::Repeat(Box::new(self), times)
    }

    pub fn point(&self, t: f64) -> (f64, f64) {
        let s = t.rem_euclid(1.0);
        match self {
            LoopPath::BoxPerimeter(r) => {
                let q = 4.0 * s;
                let edge = (q.floor() as usize).min(3);
                let f = q - edge as f64;
                match edge {
                    0 => (r.x_lo + f * (r.x_hi - r.x_lo), r.y_lo),
                    1 => (r.x_hi, r.y_lo + f * (r.y_hi - r.y_lo)),
                    2 => (r.x_hi + f * (r.x_lo - r.x_hi), r.y_hi),
                    _ => (r.x_lo, r.y_hi + f * (r.y_lo - r.y_hi)),
                }
            }
            LoopPath::Circle { cx, cy, r } => {
                let (sn, cs) = (2.0 * PI * s).sin_cos();
                (cx + r * cs, cy + r * sn)
            }
            LoopPath::Ellipse { cx, cy, rx, ry } => {
                let (sn, cs) = (2.0 * PI * s).sin_cos();
                (cx + rx * cs, cy + ry * sn)
            }
            LoopPath::Repeat(inner, k) => inner.point(s * *k as f64),
            LoopPath::Custom(f) => f(s),
        }
    }
}

/// Serializable loop description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LoopSpec {
    Box {
        x0: f64,
        y0: f64,
        side_x: f64,
        side_y: f64,
    },
    Circle {
        center: [f64; 2],
        radius: f64,
    },
    Ellipse {
        center: [f64; 2],
        rx: f64,
        ry: f64,
    },
}

impl LoopSpec {
    pub fn build(&self) -> LoopPath {
        match *self {
            LoopSpec::Box {
                x0,
                y0,
                side_x,
                side_y,
            } => box_perimeter(x0, y0, side_x, side_y),
            LoopSpec::Circle { center, radius } => LoopPath::circle(center[0], center[1], radius),
            LoopSpec::Ellipse { center, rx, ry } => LoopPath::Ellipse {
                cx: center[0],
                cy: center[1],
                rx,
                ry,
            },
        }
    }
}
