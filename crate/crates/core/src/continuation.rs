//! Smooth ordered generalized eigendecomposition along a one-parameter path.
//!
//! The tracer advances `A(t) V(t) = B(t) V(t) Λ(t)`, `Vᵀ B V = I`, from
//! `t = 0` to `t = 1` with a predictor-corrector step. Each step takes a
//! fresh ordered decomposition at the new point and fixes the column signs
//! against a first-order prediction of `V`. Prediction errors in the
//! eigenvalues and the eigenvectors drive the stepsize.
//!
//! When two consecutive eigenvalues become numerically indistinguishable the
//! individual eigenvectors are no longer resolvable, and the tracer switches
//! to following the two-dimensional invariant subspace of the pair (see
//! [`veering_traverse`]).

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::{DMatrix, DVector, Matrix2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{gen_eig_ordered, EigenPair, LinalgError, Pencil2x2, SymMatrix};
use crate::pencil::{LoopPath, ParametricPencil};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ContinuationError {
    #[error("eigenvalues tie at the starting point t = {t}")]
    DegenerateStart { t: f64 },
    #[error("eigenvalues {index} and {} are too close to predict (gap {gap:e})", index + 1)]
    GapTooSmall { index: usize, gap: f64 },
    #[error("sign of column {column} is ambiguous (overlap {overlap:.3e})")]
    AmbiguousSign { column: usize, overlap: f64 },
    #[error("step underflow at t = {t} (h = {h:e}): eigenvalues coalesce on or near the path")]
    StepUnderflow { t: f64, h: f64 },
    #[error("nongeneric near-degeneracy at t = {t} involving pairs {pairs:?}")]
    TripleDegeneracy { t: f64, pairs: Vec<usize> },
    #[error("step budget of {steps} exhausted at t = {t}")]
    TooManySteps { t: f64, steps: usize },
    #[error("loop signature is not a sign matrix: {0}")]
    SignatureMismatch(String),
    #[error("loop unresolvable: {0}")]
    LoopUnresolvable(Box<ContinuationError>),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Step-control and mode-switch parameters. All lengths are in units of the
/// path parameter `t ∈ [0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContinuationConfig {
    pub h0: f64,
    pub h_max: f64,
    pub h_min: f64,
    pub tolstep: f64,
    /// Steps with `ρ` above this are rejected.
    pub accept_ratio: f64,
    /// `h` grows by at most this factor per accepted step.
    pub growth_cap: f64,
    /// Relative gap below which a pair is treated as veering.
    pub toldist: f64,
    /// Veering mode ends once the pair's relative gap reaches `exit_factor * toldist`.
    pub exit_factor: f64,
    /// Minimum `|diag(V_rawᵀ B V_pred)|` for a trustworthy sign decision.
    pub sign_threshold: f64,
    pub max_steps: usize,
    /// Keep every accepted [`EigenPoint`] and [`StepRecord`].
    pub keep_points: bool,
}

impl Default for ContinuationConfig {
    fn default() -> Self {
        ContinuationConfig {
            h0: 1.0 / 64.0,
            h_max: 1.0 / 16.0,
            h_min: 1e-14,
            tolstep: 1e-2,
            accept_ratio: 1.5,
            growth_cap: 2.0,
            toldist: 1e6 * f64::EPSILON,
            exit_factor: 10.0,
            sign_threshold: 0.1,
            max_steps: 1_000_000,
            keep_points: true,
        }
    }
}

/// A one-parameter pencil `t ↦ (A(t), B(t))`.
pub trait PathPencil {
    fn dim(&self) -> usize;
    fn eval(&self, t: f64) -> (SymMatrix, SymMatrix);
}

/// A planar pencil restricted to a loop.
pub struct OnLoop<'a, P: ?Sized> {
    pub pencil: &'a P,
    pub path: &'a LoopPath,
}

impl<P: ParametricPencil + ?Sized> PathPencil for OnLoop<'_, P> {
    fn dim(&self) -> usize {
        self.pencil.dim()
    }
    fn eval(&self, t: f64) -> (SymMatrix, SymMatrix) {
        let (x, y) = self.path.point(t);
        self.pencil.eval(x, y)
    }
}

/// A path pencil given by a closure.
pub struct FnPath<F> {
    n: usize,
    f: F,
}

impl<F: Fn(f64) -> (SymMatrix, SymMatrix)> FnPath<F> {
    pub fn new(n: usize, f: F) -> Self {
        FnPath { n, f }
    }
}

impl<F: Fn(f64) -> (SymMatrix, SymMatrix)> PathPencil for FnPath<F> {
    fn dim(&self) -> usize {
        self.n
    }
    fn eval(&self, t: f64) -> (SymMatrix, SymMatrix) {
        (self.f)(t)
    }
}

/// One sample of the smooth decomposition.
#[derive(Debug, Clone)]
pub struct EigenPoint {
    pub t: f64,
    /// B-orthonormal eigenvectors, columns ordered like `lambda`.
    pub v: DMatrix<f64>,
    /// Eigenvalues, decreasing.
    pub lambda: DVector<f64>,
    /// Stepsize suggested for the next step.
    pub h_next: f64,
}

/// Diagnostics for one accepted step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: f64,
    pub h: f64,
    pub lambda: Vec<f64>,
    pub rho_lambda: f64,
    pub rho_v: f64,
    pub veering: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepStats {
    pub accepted: usize,
    pub rejected: usize,
    pub h_min: f64,
    pub h_max: f64,
}

impl StepStats {
    fn new() -> Self {
        StepStats {
            accepted: 0,
            rejected: 0,
            h_min: f64::INFINITY,
            h_max: 0.0,
        }
    }

    fn accept(&mut self, h: f64) {
        self.accepted += 1;
        self.h_min = self.h_min.min(h);
        self.h_max = self.h_max.max(h);
    }

    fn total(&self) -> usize {
        self.accepted + self.rejected
    }
}

/// A stretch of the path traversed in subspace mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VeeringEvent {
    pub t_start: f64,
    pub t_end: f64,
    /// 1-based index `i` of the pair `(λ_i, λ_{i+1})`.
    pub pair: usize,
}

#[derive(Debug, Clone)]
pub struct PathTrace {
    pub start: EigenPoint,
    pub end: EigenPoint,
    /// Every accepted point including both ends, when `keep_points` is set.
    pub points: Vec<EigenPoint>,
    pub records: Vec<StepRecord>,
    pub stats: StepStats,
    pub veering_events: Vec<VeeringEvent>,
}

/// Outcome of a closed-loop trace.
#[derive(Debug, Clone)]
pub struct TraceResult {
    pub trace: PathTrace,
    /// Diagonal of `D` with `V(1) = V(0) D`.
    pub d: Vec<i8>,
    /// `diag(V(0)ᵀ B(0) V(1))` before rounding.
    pub d_raw: Vec<f64>,
}

// ---------------------------------------------------------------------------
// building blocks

fn canonicalize_signs(v: &mut DMatrix<f64>) {
    for mut col in v.column_iter_mut() {
        let mut best = 0.0_f64;
        for &x in col.iter() {
            if x.abs() > best.abs() {
                best = x;
            }
        }
        if best < 0.0 {
            col.neg_mut();
        }
    }
}

fn relative_gap(lambda: &DVector<f64>, i: usize) -> f64 {
    (lambda[i] - lambda[i + 1]).abs() / (lambda[i].abs() + 1.0)
}

/// 0-based indices `i` of pairs `(λ_i, λ_{i+1})` closer than `toldist`.
fn close_pairs(lambda: &DVector<f64>, toldist: f64) -> Vec<usize> {
    (0..lambda.len().saturating_sub(1))
        .filter(|&i| relative_gap(lambda, i) < toldist)
        .collect()
}

/// `(tr(Xᵀ B X))^{1/2}`.
fn b_norm(x: &DMatrix<f64>, b: &SymMatrix) -> f64 {
    let bx = b.as_matrix() * x;
    x.component_mul(&bx).sum().max(0.0).sqrt()
}

/// Ordered decomposition at `t` with deterministic column signs.
pub fn init_decomposition<P: PathPencil + ?Sized>(
    pencil: &P,
    t: f64,
    cfg: &ContinuationConfig,
) -> Result<EigenPoint, ContinuationError> {
    let (a, b) = pencil.eval(t);
    let eig = gen_eig_ordered(&a, &b)?;
    if eig.degenerate || !close_pairs(&eig.values, cfg.toldist).is_empty() {
        return Err(ContinuationError::DegenerateStart { t });
    }
    let mut v = eig.vectors;
    canonicalize_signs(&mut v);
    Ok(EigenPoint {
        t,
        v,
        lambda: eig.values,
        h_next: cfg.h0,
    })
}

/// First-order predictions at the next point.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub lambda: DVector<f64>,
    pub v: DMatrix<f64>,
    /// The skew-symmetric part of the correction, `V_pred = V (I + P + H)`.
    pub h: DMatrix<f64>,
    pub p: DMatrix<f64>,
}

/// Euler prediction from a B-orthonormal `v` with diagonal values `d`, with
/// the derivatives replaced by differences to `(a_next, b_next)`.
/// Couplings inside `skip_pair` are left at zero.
fn predict_raw(
    v: &DMatrix<f64>,
    d: &DVector<f64>,
    a_next: &SymMatrix,
    b_next: &SymMatrix,
    skip_pair: Option<usize>,
) -> Prediction {
    let n = d.len();
    let a_v = v.transpose() * a_next.as_matrix() * v;
    let b_v = v.transpose() * b_next.as_matrix() * v;
    let lambda = DVector::from_fn(n, |i, _| a_v[(i, i)] - d[i] * (b_v[(i, i)] - 1.0));
    let mut p = DMatrix::<f64>::identity(n, n) - &b_v;
    p.scale_mut(0.5);
    let mut h = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for k in (i + 1)..n {
            if skip_pair == Some(i) && k == i + 1 {
                continue;
            }
            let bv = 0.5 * (b_v[(i, k)] + b_v[(k, i)]);
            let av = 0.5 * (a_v[(i, k)] + a_v[(k, i)]);
            let hik = (0.5 * (d[i] + d[k]) * bv - av) / (d[i] - d[k]);
            h[(i, k)] = hik;
            h[(k, i)] = -hik;
        }
    }
    let v_pred = v * (DMatrix::<f64>::identity(n, n) + &p + &h);
    Prediction {
        lambda,
        v: v_pred,
        h,
        p,
    }
}

/// Euler predictor for `Λ` and `V` at the point where `(A, B) = (a_next, b_next)`.
pub fn predict(
    state: &EigenPoint,
    a_next: &SymMatrix,
    b_next: &SymMatrix,
) -> Result<Prediction, ContinuationError> {
    let lam = &state.lambda;
    let scale = lam.iter().fold(0.0_f64, |m, x| m.max(x.abs())) + 1.0;
    for i in 0..lam.len().saturating_sub(1) {
        let gap = lam[i] - lam[i + 1];
        if !(gap > 10.0 * f64::EPSILON * scale) {
            return Err(ContinuationError::GapTooSmall { index: i, gap });
        }
    }
    Ok(predict_raw(&state.v, lam, a_next, b_next, None))
}

#[derive(Debug, Clone)]
pub struct SignCorrection {
    pub v: DMatrix<f64>,
    pub signs: Vec<f64>,
    /// `diag(V_rawᵀ B V_pred)` before correction.
    pub overlaps: Vec<f64>,
}

/// Picks the sign matrix `S` minimizing `‖S V_rawᵀ B V_pred − I‖_F`, which
/// is `sign(diag(V_rawᵀ B V_pred))`.
pub fn sign_correct(
    v_raw: &DMatrix<f64>,
    b_next: &SymMatrix,
    v_pred: &DMatrix<f64>,
    threshold: f64,
) -> Result<SignCorrection, ContinuationError> {
    let bp = b_next.as_matrix() * v_pred;
    let mut v = v_raw.clone();
    let mut signs = Vec::with_capacity(v.ncols());
    let mut overlaps = Vec::with_capacity(v.ncols());
    for k in 0..v.ncols() {
        let o = v_raw.column(k).dot(&bp.column(k));
        if o.abs() < threshold {
            return Err(ContinuationError::AmbiguousSign {
                column: k,
                overlap: o,
            });
        }
        let s = if o < 0.0 {
            -1.0
        } else {
            if o == 0.0 {
                log::warn!("column {k} exactly orthogonal to its prediction; keeping sign");
            }
            1.0
        };
        if s < 0.0 {
            v.column_mut(k).neg_mut();
        }
        signs.push(s);
        overlaps.push(o);
    }
    Ok(SignCorrection { v, signs, overlaps })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepDecision {
    pub rho_lambda: f64,
    pub rho_v: f64,
    pub rho: f64,
    pub h_new: f64,
    pub accept: bool,
}

/// `ρ = max(ρ_λ, ρ_V) / tolstep`, `h_new = h / max(ρ, 1/growth_cap)` capped
/// at `h_max`, accepted when `ρ ≤ accept_ratio`.
pub fn step_decision(
    rho_lambda: f64,
    rho_v: f64,
    h: f64,
    cfg: &ContinuationConfig,
) -> Result<StepDecision, ContinuationError> {
    let rho = rho_lambda.max(rho_v) / cfg.tolstep;
    let rho = if rho.is_nan() { f64::INFINITY } else { rho };
    let h_new = (h / rho.max(1.0 / cfg.growth_cap)).min(cfg.h_max);
    let accept = rho <= cfg.accept_ratio;
    if !accept && h_new < cfg.h_min {
        return Err(ContinuationError::StepUnderflow {
            t: f64::NAN,
            h: h_new,
        });
    }
    Ok(StepDecision {
        rho_lambda,
        rho_v,
        rho,
        h_new,
        accept,
    })
}

/// Measures the eigenvalue and eigenvector prediction errors and decides
/// the step.
pub fn step_control(
    lambda_new: &DVector<f64>,
    lambda_pred: &DVector<f64>,
    v_new: &DMatrix<f64>,
    v_pred: &DMatrix<f64>,
    b_new: &SymMatrix,
    h: f64,
    cfg: &ContinuationConfig,
) -> Result<StepDecision, ContinuationError> {
    let rho_lambda = lambda_new
        .iter()
        .zip(lambda_pred.iter())
        .map(|(l, p)| (l - p).abs() / (l.abs() + 1.0))
        .fold(0.0_f64, f64::max);
    let rho_v = b_norm(&(v_new - v_pred), b_new) / (v_new.ncols() as f64).sqrt();
    step_decision(rho_lambda, rho_v, h, cfg)
}

/// Shrinks `h` when a secant extrapolation of the eigenvalues over the next
/// step would break their ordering.
///
/// The reduced step is 0.9 times the earliest predicted crossing time.
pub fn secant_guard(
    lambda_prev: &DVector<f64>,
    lambda_curr: &DVector<f64>,
    t_prev: f64,
    t_curr: f64,
    h: f64,
) -> f64 {
    let dt = t_curr - t_prev;
    if !(dt > 0.0) {
        return h;
    }
    let n = lambda_curr.len();
    let slope: Vec<f64> = (0..n)
        .map(|i| (lambda_curr[i] - lambda_prev[i]) / dt)
        .collect();
    let mut crossing = f64::INFINITY;
    for i in 0..n.saturating_sub(1) {
        let s_i = lambda_curr[i] + h * slope[i];
        let s_next = lambda_curr[i + 1] + h * slope[i + 1];
        if s_i < s_next {
            let t_cross = (lambda_curr[i] - lambda_curr[i + 1]) / (slope[i + 1] - slope[i]);
            crossing = crossing.min(t_cross);
        }
    }
    if crossing.is_finite() {
        0.9 * crossing
    } else {
        h
    }
}

// ---------------------------------------------------------------------------
// subspace mode

/// Planar rotation whose columns are the unit eigenvectors of a trace-free
/// 2×2 block at half-angle `phi`.
fn rotation(phi: f64) -> Matrix2<f64> {
    let (s, c) = phi.sin_cos();
    Matrix2::new(c, -s, s, c)
}

fn signed_angle(u: [f64; 2], v: [f64; 2]) -> f64 {
    let cross = u[0] * v[1] - u[1] * v[0];
    let dot = u[0] * v[0] + u[1] * v[1];
    cross.atan2(dot)
}

/// Distance from the origin to the segment `[u, v]`.
fn segment_distance(u: [f64; 2], v: [f64; 2]) -> f64 {
    let d = [v[0] - u[0], v[1] - u[1]];
    let len2 = d[0] * d[0] + d[1] * d[1];
    if len2 == 0.0 {
        return u[0].hypot(u[1]);
    }
    let s = (-(u[0] * d[0] + u[1] * d[1]) / len2).clamp(0.0, 1.0);
    (u[0] + s * d[0]).hypot(u[1] + s * d[1])
}

/// Total turning of the trace-free block `z(t)` over one step, from samples
/// at the start, midpoint and end. `None` when the samples cannot decide on
/// which side of the origin the curve passed.
fn resolve_turn(z0: [f64; 2], zm: [f64; 2], z1: [f64; 2], noise: f64) -> Option<f64> {
    if segment_distance(z0, zm) <= noise || segment_distance(zm, z1) <= noise {
        return None;
    }
    let d1 = signed_angle(z0, zm);
    let d2 = signed_angle(zm, z1);
    let chord = signed_angle(z0, z1);
    if (chord - (d1 + d2)).abs() > 0.5 * PI {
        return None;
    }
    Some(d1 + d2)
}

fn trace_free(m: &Matrix2<f64>) -> [f64; 2] {
    [0.5 * (m[(0, 0)] - m[(1, 1)]), 0.5 * (m[(0, 1)] + m[(1, 0)])]
}

fn pair_block(w: &DMatrix<f64>, m: &SymMatrix, p: usize) -> Matrix2<f64> {
    let f = w.columns(p, 2);
    let prod = f.transpose() * m.as_matrix() * f;
    Matrix2::new(prod[(0, 0)], prod[(0, 1)], prod[(1, 0)], prod[(1, 1)])
}

/// Signs the separated columns of `eig.vectors` against `v_pred` and
/// replaces the pair columns by the basis of their span closest to the
/// predicted one (polar factor of the 2×2 overlap).
fn align_frame(
    eig: &EigenPair,
    b: &SymMatrix,
    v_pred: &DMatrix<f64>,
    p: usize,
    threshold: f64,
) -> Option<DMatrix<f64>> {
    let n = eig.dim();
    let bp = b.as_matrix() * v_pred;
    let mut w = eig.vectors.clone();
    for k in (0..n).filter(|&k| k != p && k != p + 1) {
        let o = eig.vectors.column(k).dot(&bp.column(k));
        if o.abs() < threshold {
            return None;
        }
        if o < 0.0 {
            w.column_mut(k).neg_mut();
        }
    }
    let u = eig.vectors.columns(p, 2);
    let m = u.transpose() * bp.columns(p, 2);
    let m2 = Matrix2::new(m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)]);
    let svd = m2.svd(true, true);
    if svd.singular_values.min() < threshold {
        return None;
    }
    let q = svd.u? * svd.v_t?;
    let f = u * q;
    w.columns_mut(p, 2).copy_from(&f);
    Some(w)
}

struct Sink<'a> {
    cfg: &'a ContinuationConfig,
    points: Vec<EigenPoint>,
    records: Vec<StepRecord>,
    stats: StepStats,
    veering_events: Vec<VeeringEvent>,
}

impl Sink<'_> {
    fn push(&mut self, point: &EigenPoint, record: StepRecord) {
        self.stats.accept(record.h);
        if self.cfg.keep_points {
            self.points.push(point.clone());
            self.records.push(record);
        }
    }

    fn budget(&self, t: f64) -> Result<(), ContinuationError> {
        if self.stats.total() >= self.cfg.max_steps {
            return Err(ContinuationError::TooManySteps {
                t,
                steps: self.cfg.max_steps,
            });
        }
        Ok(())
    }
}

fn next_t(t: f64, h: f64) -> f64 {
    let t_new = t + h;
    if t_new >= 1.0 - 1e-13 {
        1.0
    } else {
        t_new
    }
}

fn other_close_pairs(
    lambda: &DVector<f64>,
    pair: usize,
    cfg: &ContinuationConfig,
    t: f64,
) -> Result<(), ContinuationError> {
    let close = close_pairs(lambda, cfg.toldist);
    if close.iter().any(|&i| i != pair) {
        let mut pairs: Vec<usize> = close.iter().map(|i| i + 1).collect();
        if !close.contains(&pair) {
            pairs.push(pair + 1);
            pairs.sort_unstable();
        }
        return Err(ContinuationError::TripleDegeneracy { t, pairs });
    }
    Ok(())
}

/// Crosses a veering zone of the pair `(λ_{pair+1}, λ_{pair+2})` (0-based
/// `pair`), starting from the well-separated `state` with trial step `h`.
///
/// The separated eigenvectors are continued as usual. The pair is carried
/// as a smooth B-orthonormal basis `F` of its invariant subspace: each new
/// basis is the one closest to the predicted basis. The eigenvectors inside
/// the subspace are `F R(φ)` where `2φ` is the continuously tracked angle of
/// the trace-free part of `Fᵀ A F`. Once the pair separates by
/// `exit_factor * toldist` the pair is re-solved from the projected 2×2
/// pencil in closed form, with signs taken from `F R(φ)`.
pub fn veering_traverse<P: PathPencil + ?Sized>(
    state: &EigenPoint,
    pencil: &P,
    pair: usize,
    h: f64,
    cfg: &ContinuationConfig,
) -> Result<(EigenPoint, PathTrace), ContinuationError> {
    let mut sink = Sink {
        cfg,
        points: Vec::new(),
        records: Vec::new(),
        stats: StepStats::new(),
        veering_events: Vec::new(),
    };
    let end = veer(state, pencil, pair, h, cfg, &mut sink)?;
    let trace = PathTrace {
        start: state.clone(),
        end: end.clone(),
        points: sink.points,
        records: sink.records,
        stats: sink.stats,
        veering_events: sink.veering_events,
    };
    Ok((end, trace))
}

fn veer<P: PathPencil + ?Sized>(
    state: &EigenPoint,
    pencil: &P,
    pair: usize,
    h: f64,
    cfg: &ContinuationConfig,
    sink: &mut Sink<'_>,
) -> Result<EigenPoint, ContinuationError> {
    let n = pencil.dim();
    let p = pair;
    let q = pair + 1;
    let mut frame = state.v.clone();
    let mut diag = state.lambda.clone();
    let mut phi = 0.0_f64;
    let mut z = [0.5 * (state.lambda[p] - state.lambda[q]), 0.0];
    let mut t = state.t;
    let mut h = h;
    let t_start = t;

    loop {
        sink.budget(t)?;
        if h < cfg.h_min {
            return Err(ContinuationError::StepUnderflow { t, h });
        }
        let t_new = next_t(t, h);
        let h_eff = t_new - t;
        let (a, b) = pencil.eval(t_new);
        let eig = gen_eig_ordered(&a, &b)?;
        other_close_pairs(&eig.values, pair, cfg, t_new)?;
        let pred = predict_raw(&frame, &diag, &a, &b, Some(pair));
        let Some(w) = align_frame(&eig, &b, &pred.v, p, cfg.sign_threshold) else {
            sink.stats.rejected += 1;
            h *= 0.5;
            continue;
        };
        let m_new = pair_block(&w, &a, p);
        let z_new = trace_free(&m_new);

        let t_mid = t + 0.5 * h_eff;
        let (am, bm) = pencil.eval(t_mid);
        let eig_m = gen_eig_ordered(&am, &bm)?;
        let pred_m = predict_raw(&frame, &diag, &am, &bm, Some(pair));
        let Some(w_m) = align_frame(&eig_m, &bm, &pred_m.v, p, cfg.sign_threshold) else {
            sink.stats.rejected += 1;
            h *= 0.5;
            continue;
        };
        let z_mid = trace_free(&pair_block(&w_m, &am, p));

        let noise = 100.0 * f64::EPSILON * (eig.values[p].abs() + eig.values[q].abs() + 1.0);
        let Some(turn) = resolve_turn(z, z_mid, z_new, noise) else {
            sink.stats.rejected += 1;
            h *= 0.5;
            continue;
        };

        let mut rho_lambda = 0.0_f64;
        for k in (0..n).filter(|&k| k != p && k != q) {
            let l = eig.values[k];
            rho_lambda = rho_lambda.max((l - pred.lambda[k]).abs() / (l.abs() + 1.0));
        }
        let mean_new = 0.5 * (m_new[(0, 0)] + m_new[(1, 1)]);
        let mean_pred = 0.5 * (pred.lambda[p] + pred.lambda[q]);
        rho_lambda = rho_lambda.max((mean_new - mean_pred).abs() / (mean_new.abs() + 1.0));
        let rho_v = b_norm(&(&w - &pred.v), &b) / (n as f64).sqrt();
        let decision = match step_decision(rho_lambda, rho_v, h_eff, cfg) {
            Ok(d) => d,
            Err(_) => return Err(ContinuationError::StepUnderflow { t, h: h_eff }),
        };
        if !decision.accept {
            sink.stats.rejected += 1;
            h = decision.h_new;
            continue;
        }

        phi += 0.5 * turn;
        z = z_new;
        frame = w;
        diag = eig.values.clone();
        diag[p] = m_new[(0, 0)];
        diag[q] = m_new[(1, 1)];
        t = t_new;
        h = decision.h_new;

        let separated = relative_gap(&eig.values, p) >= cfg.exit_factor * cfg.toldist;
        if separated || t >= 1.0 {
            let point = resolve_pair(&frame, &eig, &a, &b, p, phi, t, h)?;
            sink.veering_events.push(VeeringEvent {
                t_start,
                t_end: t,
                pair: pair + 1,
            });
            sink.push(
                &point,
                StepRecord {
                    t,
                    h: h_eff,
                    lambda: point.lambda.iter().copied().collect(),
                    rho_lambda,
                    rho_v,
                    veering: true,
                },
            );
            return Ok(point);
        }

        let mut v = frame.clone();
        let inner = frame.columns(p, 2) * rotation(phi);
        v.columns_mut(p, 2).copy_from(&inner);
        let point = EigenPoint {
            t,
            v,
            lambda: eig.values.clone(),
            h_next: h,
        };
        sink.push(
            &point,
            StepRecord {
                t,
                h: h_eff,
                lambda: eig.values.iter().copied().collect(),
                rho_lambda,
                rho_v,
                veering: true,
            },
        );
    }
}

/// Full decomposition from the subspace frame: the pair is re-solved from
/// the projected 2×2 pencil and signed to agree with `F R(φ)`.
#[allow(clippy::too_many_arguments)]
fn resolve_pair(
    frame: &DMatrix<f64>,
    eig: &EigenPair,
    a: &SymMatrix,
    b: &SymMatrix,
    p: usize,
    phi: f64,
    t: f64,
    h_next: f64,
) -> Result<EigenPoint, ContinuationError> {
    let ahat = pair_block(frame, a, p);
    let bhat = pair_block(frame, b, p);
    let pencil2 = Pencil2x2::from_matrices(&ahat, &bhat);
    let (e2, mut w2) = pencil2.eigenvectors()?;
    let r = rotation(phi);
    for k in 0..2 {
        if w2.column(k).dot(&(bhat * r.column(k))) < 0.0 {
            w2.column_mut(k).neg_mut();
        }
    }
    let mut v = frame.clone();
    let inner = frame.columns(p, 2) * w2;
    v.columns_mut(p, 2).copy_from(&inner);
    let mut lambda = eig.values.clone();
    lambda[p] = e2.lambda[0];
    lambda[p + 1] = e2.lambda[1];
    Ok(EigenPoint {
        t,
        v,
        lambda,
        h_next,
    })
}

// ---------------------------------------------------------------------------
// drivers

/// Continues the smooth decomposition from `t = 0` to `t = 1`.
pub fn trace_path<P: PathPencil + ?Sized>(
    pencil: &P,
    cfg: &ContinuationConfig,
) -> Result<PathTrace, ContinuationError> {
    let start = init_decomposition(pencil, 0.0, cfg)?;
    trace_from(pencil, start, cfg)
}

/// Continues from an existing point up to `t = 1`.
pub fn trace_from<P: PathPencil + ?Sized>(
    pencil: &P,
    start: EigenPoint,
    cfg: &ContinuationConfig,
) -> Result<PathTrace, ContinuationError> {
    let mut sink = Sink {
        cfg,
        points: Vec::new(),
        records: Vec::new(),
        stats: StepStats::new(),
        veering_events: Vec::new(),
    };
    if cfg.keep_points {
        sink.points.push(start.clone());
    }
    let mut state = start.clone();
    let mut h = start.h_next.min(cfg.h_max);

    while state.t < 1.0 {
        sink.budget(state.t)?;
        let t_new = next_t(state.t, h);
        let h_eff = t_new - state.t;
        let (a, b) = pencil.eval(t_new);
        let eig = gen_eig_ordered(&a, &b)?;

        let close = close_pairs(&eig.values, cfg.toldist);
        if !close.is_empty() {
            if close.len() > 1 {
                return Err(ContinuationError::TripleDegeneracy {
                    t: t_new,
                    pairs: close.iter().map(|i| i + 1).collect(),
                });
            }
            let t0 = state.t;
            let lambda0 = state.lambda.clone();
            state = veer(&state, pencil, close[0], h_eff, cfg, &mut sink)?;
            h = secant_guard(&lambda0, &state.lambda, t0, state.t, state.h_next).min(cfg.h_max);
            continue;
        }

        let pred = predict(&state, &a, &b)?;
        let corrected = match sign_correct(&eig.vectors, &b, &pred.v, cfg.sign_threshold) {
            Ok(c) => c,
            Err(_) => {
                sink.stats.rejected += 1;
                h = 0.5 * h_eff;
                if h < cfg.h_min {
                    return Err(ContinuationError::StepUnderflow { t: state.t, h });
                }
                continue;
            }
        };
        let decision = step_control(
            &eig.values,
            &pred.lambda,
            &corrected.v,
            &pred.v,
            &b,
            h_eff,
            cfg,
        )
        .map_err(|e| match e {
            ContinuationError::StepUnderflow { h, .. } => {
                ContinuationError::StepUnderflow { t: state.t, h }
            }
            other => other,
        })?;
        if !decision.accept {
            sink.stats.rejected += 1;
            h = decision.h_new;
            continue;
        }
        let h_next =
            secant_guard(&state.lambda, &eig.values, state.t, t_new, decision.h_new).min(cfg.h_max);
        let point = EigenPoint {
            t: t_new,
            v: corrected.v,
            lambda: eig.values,
            h_next,
        };
        sink.push(
            &point,
            StepRecord {
                t: t_new,
                h: h_eff,
                lambda: point.lambda.iter().copied().collect(),
                rho_lambda: decision.rho_lambda,
                rho_v: decision.rho_v,
                veering: false,
            },
        );
        state = point;
        h = h_next;
    }

    Ok(PathTrace {
        start,
        end: state,
        points: sink.points,
        records: sink.records,
        stats: sink.stats,
        veering_events: sink.veering_events,
    })
}

/// Maximum allowed distance of `V(0)ᵀ B V(1)` from a sign matrix.
pub const SIGNATURE_TOL: f64 = 1e-6;

fn unresolvable(e: ContinuationError) -> ContinuationError {
    match e {
        ContinuationError::Linalg(_) | ContinuationError::LoopUnresolvable(_) => e,
        other => ContinuationError::LoopUnresolvable(Box::new(other)),
    }
}

/// Traces a closed loop and extracts the sign matrix `D` with
/// `V(1) = V(0) D`.
pub fn trace_loop<P: ParametricPencil + ?Sized>(
    pencil: &P,
    path: &LoopPath,
    cfg: &ContinuationConfig,
) -> Result<TraceResult, ContinuationError> {
    let on = OnLoop { pencil, path };
    let trace = trace_path(&on, cfg).map_err(unresolvable)?;
    let (_, b0) = on.eval(0.0);
    let overlap = trace.start.v.transpose() * b0.as_matrix() * &trace.end.v;
    let n = overlap.nrows();
    let mut d = Vec::with_capacity(n);
    let mut d_raw = Vec::with_capacity(n);
    for i in 0..n {
        for j in 0..n {
            let x = overlap[(i, j)];
            let off = if i == j {
                (x.abs() - 1.0).abs()
            } else {
                x.abs()
            };
            if off > SIGNATURE_TOL {
                return Err(unresolvable(ContinuationError::SignatureMismatch(format!(
                    "entry ({i}, {j}) = {x:e}"
                ))));
            }
        }
        let x = overlap[(i, i)];
        d_raw.push(x);
        d.push(if x < 0.0 { -1 } else { 1 });
    }
    if d.iter().filter(|&&s| s < 0).count() % 2 == 1 {
        return Err(unresolvable(ContinuationError::SignatureMismatch(
            "odd number of sign changes".into(),
        )));
    }
    Ok(TraceResult { trace, d, d_raw })
}

/// Writes one CSV row per accepted step:
/// `t,h,lambda_1..lambda_n,rho_lambda,rho_v,veer`.
pub fn write_trace_csv<W: Write>(
    records: &[StepRecord],
    n: usize,
    mut out: W,
) -> std::io::Result<()> {
    write!(out, "t,h")?;
    for i in 1..=n {
        write!(out, ",lambda_{i}")?;
    }
    writeln!(out, ",rho_lambda,rho_v,veer")?;
    for r in records {
        write!(out, "{:.16e},{:.16e}", r.t, r.h)?;
        for l in &r.lambda {
            write!(out, ",{l:.16e}")?;
        }
        writeln!(
            out,
            ",{:.16e},{:.16e},{}",
            r.rho_lambda,
            r.rho_v,
            u8::from(r.veering)
        )?;
    }
    Ok(())
}
