//! Dense kernels for symmetric and symmetric-definite problems.
//!
//! Everything here is a pure function of its inputs. Matrices are stored as
//! full [`nalgebra::DMatrix`] values; [`SymMatrix`] guarantees exact symmetry
//! of the stored entries.

use nalgebra::{DMatrix, DVector, Matrix2, SymmetricEigen};
use thiserror::Error;

/// A pivot at or below `PIVOT_FLOOR_FACTOR * eps * max(diag)` rejects the
/// matrix as not positive definite.
pub const PIVOT_FLOOR_FACTOR: f64 = 1e3;

/// Relative spacing below which two consecutive eigenvalues are reported as tied.
pub const TIE_FACTOR: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("matrix is not positive definite (pivot {pivot:e} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },
    #[error("square-root series diverged: {0}")]
    SeriesDiverged(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
}

/// Square matrix whose stored entries satisfy `m[(i, j)] == m[(j, i)]` bitwise.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    /// Symmetrizes `m` as `(m + mᵀ) / 2`.
    ///
    /// Panics if `m` is not square.
    pub fn new(m: DMatrix<f64>) -> Self {
        assert!(m.is_square(), "SymMatrix requires a square matrix");
        let n = m.nrows();
        let mut out = m;
        for j in 0..n {
            for i in (j + 1)..n {
                let avg = 0.5 * (out[(i, j)] + out[(j, i)]);
                out[(i, j)] = avg;
                out[(j, i)] = avg;
            }
        }
        SymMatrix(out)
    }

    pub fn from_fn(n: usize, f: impl FnMut(usize, usize) -> f64) -> Self {
        Self::new(DMatrix::from_fn(n, n, f))
    }

    pub fn identity(n: usize) -> Self {
        SymMatrix(DMatrix::identity(n, n))
    }

    pub fn zeros(n: usize) -> Self {
        SymMatrix(DMatrix::zeros(n, n))
    }

    pub fn from_diagonal(d: &[f64]) -> Self {
        SymMatrix(DMatrix::from_diagonal(&DVector::from_column_slice(d)))
    }

    /// Row-major dense constructor, mostly for tests and small fixtures.
    pub fn from_rows(n: usize, entries: &[f64]) -> Self {
        assert_eq!(entries.len(), n * n);
        Self::new(DMatrix::from_row_slice(n, n, entries))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    /// Largest `|i - j|` with a nonzero entry.
    pub fn bandwidth(&self) -> usize {
        band_of(&self.0)
    }

    pub fn scale(&self, s: f64) -> SymMatrix {
        SymMatrix(&self.0 * s)
    }
}

impl std::ops::Index<(usize, usize)> for SymMatrix {
    type Output = f64;
    fn index(&self, idx: (usize, usize)) -> &f64 {
        &self.0[idx]
    }
}

fn band_of(m: &DMatrix<f64>) -> usize {
    let mut band = 0;
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            if m[(i, j)] != 0.0 {
                band = band.max(i.abs_diff(j));
            }
        }
    }
    band
}

/// Lower-triangular factor `L` with `L Lᵀ = B` and positive diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyFactor {
    l: DMatrix<f64>,
    bandwidth: usize,
}

impl CholeskyFactor {
    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    pub fn bandwidth(&self) -> usize {
        self.bandwidth
    }

    /// `L⁻¹ M L⁻ᵀ`, symmetrized.
    pub fn congruence_inverse(&self, m: &SymMatrix) -> SymMatrix {
        let x = self
            .l
            .solve_lower_triangular(m.as_matrix())
            .expect("Cholesky factor has a nonzero diagonal");
        let y = self
            .l
            .solve_lower_triangular(&x.transpose())
            .expect("Cholesky factor has a nonzero diagonal");
        SymMatrix::new(y)
    }

    /// Solves `Lᵀ X = W`.
    pub fn solve_upper(&self, w: &DMatrix<f64>) -> DMatrix<f64> {
        self.l
            .tr_solve_lower_triangular(w)
            .expect("Cholesky factor has a nonzero diagonal")
    }
}

/// Band-aware Cholesky factorization `B = L Lᵀ`.
///
/// The factor keeps the bandwidth of `B`; entries outside the band are never
/// touched and stay exactly zero.
pub fn cholesky(b: &SymMatrix) -> Result<CholeskyFactor, LinalgError> {
    let n = b.dim();
    let bw = b.bandwidth();
    let m = b.as_matrix();
    let max_diag = (0..n).map(|i| m[(i, i)].abs()).fold(0.0_f64, f64::max);
    let floor = PIVOT_FLOOR_FACTOR * f64::EPSILON * max_diag;

    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let lo = j.saturating_sub(bw);
        let mut pivot = m[(j, j)];
        for k in lo..j {
            pivot -= l[(j, k)] * l[(j, k)];
        }
        if !(pivot > floor) {
            return Err(LinalgError::NotPositiveDefinite { index: j, pivot });
        }
        let ljj = pivot.sqrt();
        l[(j, j)] = ljj;
        let hi = (j + bw).min(n - 1);
        for i in (j + 1)..=hi {
            let lo_i = i.saturating_sub(bw).max(lo);
            let mut s = m[(i, j)];
            for k in lo_i..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok(CholeskyFactor { l, bandwidth: bw })
}

fn sym_eigen(m: &SymMatrix) -> SymmetricEigen<f64, nalgebra::Dyn> {
    SymmetricEigen::new(m.as_matrix().clone())
}

fn check_spd_spectrum(values: &DVector<f64>) -> Result<(), LinalgError> {
    let max = values.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    let floor = PIVOT_FLOOR_FACTOR * f64::EPSILON * max;
    for (index, &v) in values.iter().enumerate() {
        if !(v > floor) {
            return Err(LinalgError::NotPositiveDefinite { index, pivot: v });
        }
    }
    Ok(())
}

/// Rebuilds `Q diag(f(s)) Qᵀ`.
fn spectral_map(eig: &SymmetricEigen<f64, nalgebra::Dyn>, f: impl Fn(f64) -> f64) -> SymMatrix {
    let q = &eig.eigenvectors;
    let mut scaled = q.clone();
    for (j, &s) in eig.eigenvalues.iter().enumerate() {
        let fs = f(s);
        scaled.column_mut(j).scale_mut(fs);
    }
    SymMatrix::new(scaled * q.transpose())
}

/// Unique SPD square root via the spectral decomposition.
pub fn spd_sqrt(b: &SymMatrix) -> Result<SymMatrix, LinalgError> {
    let eig = sym_eigen(b);
    check_spd_spectrum(&eig.eigenvalues)?;
    Ok(spectral_map(&eig, f64::sqrt))
}

/// SPD square root by the binomial series of `(I + Y)^{1/2}` with
/// `Y = B/γ − I`, rescaled by `√γ`.
///
/// Requires `‖B‖_F < γ`, which keeps the spectrum of `Y` inside `(−1, 0)`.
/// This route is slow and exists as an independent cross-check of
/// [`spd_sqrt`].
pub fn spd_sqrt_series(b: &SymMatrix, gamma: f64) -> Result<SymMatrix, LinalgError> {
    const MAX_TERMS: usize = 200_000;
    let n = b.dim();
    let norm_b = b.as_matrix().norm();
    if !(gamma > norm_b) {
        return Err(LinalgError::SeriesDiverged(format!(
            "scaling γ = {gamma} must exceed ‖B‖ = {norm_b}"
        )));
    }
    let y = b.as_matrix() / gamma - DMatrix::<f64>::identity(n, n);

    let mut sum = DMatrix::<f64>::identity(n, n);
    let mut power = DMatrix::<f64>::identity(n, n);
    let mut coef = 1.0_f64;
    let mut prev_norm = f64::INFINITY;
    for k in 1..=MAX_TERMS {
        // binomial(1/2, k) from binomial(1/2, k-1)
        coef *= (0.5 - (k as f64 - 1.0)) / k as f64;
        power = &power * &y;
        let term = &power * coef;
        let term_norm = term.norm();
        sum += &term;
        if term_norm == 0.0 {
            break;
        }
        if k > 3 {
            if term_norm > prev_norm {
                return Err(LinalgError::SeriesDiverged(format!(
                    "term {k} grew from {prev_norm:e} to {term_norm:e}"
                )));
            }
            let q = term_norm / prev_norm;
            if term_norm <= 1e-17 * sum.norm() * (1.0 - q) {
                return Ok(SymMatrix::new(sum * gamma.sqrt()));
            }
        }
        prev_norm = term_norm;
    }
    if prev_norm.is_finite() && prev_norm > 1e-12 * sum.norm() {
        return Err(LinalgError::SeriesDiverged(format!(
            "no convergence after {MAX_TERMS} terms"
        )));
    }
    Ok(SymMatrix::new(sum * gamma.sqrt()))
}

/// Solves the Lyapunov equation `X S + S X = dB` for symmetric `X`.
///
/// In the eigenbasis of `S` the solution is entrywise
/// `X̃_ij = dB̃_ij / (s_i + s_j)`.
pub fn sqrt_derivative(s: &SymMatrix, db: &SymMatrix) -> Result<SymMatrix, LinalgError> {
    if s.dim() != db.dim() {
        return Err(LinalgError::DimensionMismatch {
            expected: s.dim(),
            found: db.dim(),
        });
    }
    let eig = sym_eigen(s);
    check_spd_spectrum(&eig.eigenvalues)?;
    let q = &eig.eigenvectors;
    let mut rotated = q.transpose() * db.as_matrix() * q;
    let sv = &eig.eigenvalues;
    for j in 0..s.dim() {
        for i in 0..s.dim() {
            rotated[(i, j)] /= sv[i] + sv[j];
        }
    }
    Ok(SymMatrix::new(q * rotated * q.transpose()))
}

/// Ordered generalized eigendecomposition `A V = B V Λ` with `Vᵀ B V = I`.
#[derive(Debug, Clone)]
pub struct EigenPair {
    /// Eigenvalues, non-increasing.
    pub values: DVector<f64>,
    /// B-orthonormal eigenvectors, one per column, in the order of `values`.
    pub vectors: DMatrix<f64>,
    /// Set when two consecutive eigenvalues are numerically tied.
    pub degenerate: bool,
}

impl EigenPair {
    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Reduces `(A, B)` to `L⁻¹ A L⁻ᵀ` through the Cholesky factor of `B`,
/// solves the standard symmetric problem and maps back with `V = L⁻ᵀ W`.
pub fn gen_eig_ordered(a: &SymMatrix, b: &SymMatrix) -> Result<EigenPair, LinalgError> {
    if a.dim() != b.dim() {
        return Err(LinalgError::DimensionMismatch {
            expected: a.dim(),
            found: b.dim(),
        });
    }
    let chol = cholesky(b)?;
    let reduced = chol.congruence_inverse(a);
    let eig = sym_eigen(&reduced);

    let n = a.dim();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let w = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    let vectors = chol.solve_upper(&w);

    let degenerate = (0..n.saturating_sub(1)).any(|i| {
        let scale = values[i].abs().max(values[i + 1].abs());
        values[i] - values[i + 1] <= TIE_FACTOR * f64::EPSILON * scale
    });
    Ok(EigenPair {
        values,
        vectors,
        degenerate,
    })
}

/// Closed-form spectrum of the 2×2 pencil `[[a, b], [b, c]] − λ [[α, β], [β, γ]]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Eig2x2 {
    /// Roots of the trace-free reduced problem, `mu[0] >= mu[1]`.
    pub mu: [f64; 2],
    /// Pencil eigenvalues, `lambda[0] >= lambda[1]`.
    pub lambda: [f64; 2],
}

/// Entries of a symmetric 2×2 pencil.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pencil2x2 {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Pencil2x2 {
    pub fn from_matrices(a: &Matrix2<f64>, b: &Matrix2<f64>) -> Self {
        Pencil2x2 {
            a: a[(0, 0)],
            b: 0.5 * (a[(0, 1)] + a[(1, 0)]),
            c: a[(1, 1)],
            alpha: b[(0, 0)],
            beta: 0.5 * (b[(0, 1)] + b[(1, 0)]),
            gamma: b[(1, 1)],
        }
    }

    pub fn from_sym(a: &SymMatrix, b: &SymMatrix) -> Self {
        assert!(a.dim() == 2 && b.dim() == 2);
        Pencil2x2 {
            a: a[(0, 0)],
            b: a[(0, 1)],
            c: a[(1, 1)],
            alpha: b[(0, 0)],
            beta: b[(0, 1)],
            gamma: b[(1, 1)],
        }
    }

    fn check_spd(&self) -> Result<(), LinalgError> {
        if !(self.alpha > 0.0) {
            return Err(LinalgError::NotPositiveDefinite {
                index: 0,
                pivot: self.alpha,
            });
        }
        let det = self.alpha * self.gamma - self.beta * self.beta;
        if !(det > 0.0) {
            return Err(LinalgError::NotPositiveDefinite {
                index: 1,
                pivot: det / self.alpha,
            });
        }
        Ok(())
    }

    fn b_inner(&self, u: [f64; 2], v: [f64; 2]) -> f64 {
        u[0] * (self.alpha * v[0] + self.beta * v[1])
            + u[1] * (self.beta * v[0] + self.gamma * v[1])
    }

    /// B-orthonormal eigenvectors as columns, matching the order of
    /// [`eig2x2_pencil`]'s `lambda`.
    pub fn eigenvectors(&self) -> Result<(Eig2x2, Matrix2<f64>), LinalgError> {
        let eig = eig2x2_pencil(self)?;
        let lam = eig.lambda[0];
        let r1 = [self.a - lam * self.alpha, self.b - lam * self.beta];
        let r2 = [self.b - lam * self.beta, self.c - lam * self.gamma];
        let n1 = r1[0].hypot(r1[1]);
        let n2 = r2[0].hypot(r2[1]);
        let mut v1 = if n1 == 0.0 && n2 == 0.0 {
            [1.0, 0.0]
        } else if n1 >= n2 {
            [-r1[1], r1[0]]
        } else {
            [-r2[1], r2[0]]
        };
        let s1 = self.b_inner(v1, v1).sqrt();
        v1 = [v1[0] / s1, v1[1] / s1];
        // B-orthogonal complement of v1
        let bv1 = [
            self.alpha * v1[0] + self.beta * v1[1],
            self.beta * v1[0] + self.gamma * v1[1],
        ];
        let mut v2 = [-bv1[1], bv1[0]];
        let s2 = self.b_inner(v2, v2).sqrt();
        v2 = [v2[0] / s2, v2[1] / s2];
        Ok((eig, Matrix2::new(v1[0], v2[0], v1[1], v2[1])))
    }
}

/// Eigenvalues of a 2×2 symmetric definite pencil in closed form.
///
/// With `ã = a/α`, `c̃ = c/γ`, `b̃ = b/√(αγ)`, `d̃ = β/√(αγ)` the problem is
/// shifted by `(ã + c̃)/2` to a trace-free one whose roots are
/// `μ = (−b̂d̃ ± √(b̂² + (1 − d̃²)â²)) / (1 − d̃²)` with `â = (ã − c̃)/2` and
/// `b̂ = b̃ − d̃(ã + c̃)/2`. The root prone to cancellation is recovered from
/// the product `μ₁μ₂ = −(â² + b̂²)/(1 − d̃²)`.
pub fn eig2x2_pencil(p: &Pencil2x2) -> Result<Eig2x2, LinalgError> {
    p.check_spd()?;
    let root = (p.alpha * p.gamma).sqrt();
    let at = p.a / p.alpha;
    let ct = p.c / p.gamma;
    let bt = p.b / root;
    let dt = p.beta / root;
    let shift = 0.5 * (at + ct);
    let ah = 0.5 * (at - ct);
    let bh = bt - shift * dt;
    let den = 1.0 - dt * dt;
    let disc = (bh * bh + den * ah * ah).sqrt();
    let bd = bh * dt;
    let sq = ah * ah + bh * bh;
    let (mu_hi, mu_lo) = if bd >= 0.0 {
        let big = bd + disc;
        let lo = -big / den;
        let hi = if big == 0.0 { 0.0 } else { sq / big };
        (hi, lo)
    } else {
        let big = disc - bd;
        let hi = big / den;
        let lo = if big == 0.0 { 0.0 } else { -sq / big };
        (hi, lo)
    };
    Ok(Eig2x2 {
        mu: [mu_hi, mu_lo],
        lambda: [mu_hi + shift, mu_lo + shift],
    })
}

/// `(aγ − αc, bγ − βc)`; both components vanish exactly when the 2×2 pencil
/// has a double eigenvalue.
pub fn coalescence_residual(p: &Pencil2x2) -> (f64, f64) {
    (p.a * p.gamma - p.alpha * p.c, p.b * p.gamma - p.beta * p.c)
}
