//! Loop signatures, box sweeps and recursive localization of conical
//! intersections.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::continuation::{trace_loop, ContinuationConfig, ContinuationError};
use crate::pencil::{LoopPath, ParametricPencil, Rect};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DetectError {
    #[error("signature has an odd number ({count}) of -1 entries")]
    OddSignCount { count: usize },
    #[error("signature entry {index} is {value}, expected +1 or -1")]
    NotASign { index: usize, value: i8 },
    #[error(
        "child boxes of {rect:?} do not reproduce the parent's flags after {attempts} attempts"
    )]
    RefinementInconsistent { rect: Rect, attempts: u32 },
    #[error("pencil dimension {0} is too small; need at least 2")]
    DimensionTooSmall(usize),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error(transparent)]
    Continuation(#[from] ContinuationError),
}

/// Sign pattern of a loop together with the pairs it implicates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoopSignature {
    pub d: Vec<i8>,
    /// `pair_flags[i]` refers to the pair `(λ_{i+1}, λ_{i+2})`.
    pub pair_flags: Vec<bool>,
}

impl LoopSignature {
    pub fn from_d(d: Vec<i8>) -> Result<Self, DetectError> {
        let pair_flags = decode_signature(&d)?;
        Ok(LoopSignature { d, pair_flags })
    }

    /// 1-based indices `i` of flagged pairs `(λ_i, λ_{i+1})`.
    pub fn flagged_pairs(&self) -> Vec<usize> {
        self.pair_flags
            .iter()
            .enumerate()
            .filter(|(_, &f)| f)
            .map(|(i, _)| i + 1)
            .collect()
    }

    pub fn is_trivial(&self) -> bool {
        !self.pair_flags.iter().any(|&f| f)
    }
}

/// Pairs up the positions of the `-1` entries in order and flags every pair
/// index from the first member of each couple up to, not including, the
/// second.
pub fn decode_signature(d: &[i8]) -> Result<Vec<bool>, DetectError> {
    let mut negatives = Vec::new();
    for (i, &s) in d.iter().enumerate() {
        match s {
            1 => {}
            -1 => negatives.push(i),
            value => return Err(DetectError::NotASign { index: i, value }),
        }
    }
    if negatives.len() % 2 == 1 {
        return Err(DetectError::OddSignCount {
            count: negatives.len(),
        });
    }
    let mut flags = vec![false; d.len().saturating_sub(1)];
    for couple in negatives.chunks(2) {
        for f in &mut flags[couple[0]..couple[1]] {
            *f = true;
        }
    }
    Ok(flags)
}

/// Signature produced by `counts[i]` coalescings of the pair `(λ_{i+1}, λ_{i+2})`.
pub fn signature_from_counts(counts: &[u32]) -> Vec<i8> {
    let n = counts.len() + 1;
    let parity = |i: usize| -> u32 {
        let left = if i > 0 { counts[i - 1] } else { 0 };
        let right = if i < n - 1 { counts[i] } else { 0 };
        (left + right) % 2
    };
    (0..n)
        .map(|i| if parity(i) == 1 { -1 } else { 1 })
        .collect()
}

/// Uniform box grid. `rows` subdivides the first parameter, `cols` the second.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub domain: Rect,
    pub rows: usize,
    pub cols: usize,
}

impl GridSpec {
    pub fn new(domain: Rect, rows: usize, cols: usize) -> Self {
        GridSpec { domain, rows, cols }
    }

    pub fn validate(&self) -> Result<(), DetectError> {
        if self.rows == 0 || self.cols == 0 {
            return Err(DetectError::InvalidGrid(format!(
                "{}x{} has no boxes",
                self.rows, self.cols
            )));
        }
        if !(self.domain.width() > 0.0 && self.domain.height() > 0.0) {
            return Err(DetectError::InvalidGrid("empty domain".into()));
        }
        Ok(())
    }

    pub fn box_width(&self) -> f64 {
        self.domain.width() / self.rows as f64
    }

    pub fn box_height(&self) -> f64 {
        self.domain.height() / self.cols as f64
    }

    /// Box `(row, col)` of the grid translated by `offset`. Edges are computed
    /// from the same expression on both sides so neighbours share them exactly.
    pub fn cell(&self, row: usize, col: usize, offset: (f64, f64)) -> Rect {
        let d = &self.domain;
        let xs = |i: usize| {
            if i == self.rows {
                d.x_hi + offset.0
            } else {
                d.x_lo + offset.0 + i as f64 * self.box_width()
            }
        };
        let ys = |j: usize| {
            if j == self.cols {
                d.y_hi + offset.1
            } else {
                d.y_lo + offset.1 + j as f64 * self.box_height()
            }
        };
        Rect::new(xs(row), xs(row + 1), ys(col), ys(col + 1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_retries: u32,
    /// Shift amplitude as a fraction of the box side.
    pub shift_fraction: f64,
    pub seed: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 3,
            shift_fraction: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum BoxOutcome {
    Resolved {
        signature: LoopSignature,
        steps: usize,
    },
    Failed {
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxResult {
    pub row: usize,
    pub col: usize,
    pub rect: Rect,
    pub outcome: BoxOutcome,
}

impl BoxResult {
    pub fn signature(&self) -> Option<&LoopSignature> {
        match &self.outcome {
            BoxOutcome::Resolved { signature, .. } => Some(signature),
            BoxOutcome::Failed { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CiLocation {
    pub row: usize,
    pub col: usize,
    pub x: f64,
    pub y: f64,
    /// 1-based index `i` of the pair `(λ_i, λ_{i+1})`.
    pub pair: usize,
    /// Half the box diagonal.
    pub uncertainty: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxGrid {
    pub spec: GridSpec,
    pub dim: usize,
    /// Translation of the grid actually used.
    pub offset: (f64, f64),
    /// Number of sweeps run, including the first.
    pub attempts: u32,
    /// Boxes in row-major `(row, col)` order.
    pub boxes: Vec<BoxResult>,
}

impl BoxGrid {
    pub fn failed(&self) -> impl Iterator<Item = &BoxResult> {
        self.boxes
            .iter()
            .filter(|b| matches!(b.outcome, BoxOutcome::Failed { .. }))
    }

    pub fn failure_count(&self) -> usize {
        self.failed().count()
    }

    /// Flag totals per pair over the resolved boxes.
    pub fn pair_totals(&self) -> Vec<usize> {
        let mut totals = vec![0; self.dim.saturating_sub(1)];
        for sig in self.boxes.iter().filter_map(BoxResult::signature) {
            for (t, &f) in totals.iter_mut().zip(&sig.pair_flags) {
                *t += usize::from(f);
            }
        }
        totals
    }

    pub fn total(&self) -> usize {
        self.pair_totals().iter().sum()
    }

    pub fn ci_locations(&self) -> Vec<CiLocation> {
        let mut out = Vec::new();
        for b in &self.boxes {
            if let Some(sig) = b.signature() {
                let (x, y) = b.rect.center();
                for pair in sig.flagged_pairs() {
                    out.push(CiLocation {
                        row: b.row,
                        col: b.col,
                        x,
                        y,
                        pair,
                        uncertainty: b.rect.half_diagonal(),
                    });
                }
            }
        }
        out
    }

    pub fn summary(&self) -> SweepSummary {
        SweepSummary {
            domain: self.spec.domain,
            rows: self.spec.rows,
            cols: self.spec.cols,
            dim: self.dim,
            offset: [self.offset.0, self.offset.1],
            attempts: self.attempts,
            pair_totals: self.pair_totals(),
            total: self.total(),
            failures: self
                .boxes
                .iter()
                .filter_map(|b| match &b.outcome {
                    BoxOutcome::Failed { reason } => Some(BoxFailure {
                        row: b.row,
                        col: b.col,
                        reason: reason.clone(),
                    }),
                    BoxOutcome::Resolved { .. } => None,
                })
                .collect(),
        }
    }

    /// `box_row,box_col,center_x,center_y,pair_index`, one row per flagged pair.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "box_row,box_col,center_x,center_y,pair_index")?;
        for c in self.ci_locations() {
            writeln!(
                out,
                "{},{},{:.16e},{:.16e},{}",
                c.row, c.col, c.x, c.y, c.pair
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxFailure {
    pub row: usize,
    pub col: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub domain: Rect,
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
    pub offset: [f64; 2],
    pub attempts: u32,
    pub pair_totals: Vec<usize>,
    pub total: usize,
    pub failures: Vec<BoxFailure>,
}

/// Sign pattern of the counterclockwise perimeter of `rect`.
pub fn box_signature<P: ParametricPencil + ?Sized>(
    pencil: &P,
    rect: &Rect,
    cfg: &ContinuationConfig,
) -> Result<(LoopSignature, usize), DetectError> {
    let path = LoopPath::BoxPerimeter(*rect);
    let r = trace_loop(pencil, &path, cfg)?;
    let steps = r.trace.stats.accepted + r.trace.stats.rejected;
    Ok((LoopSignature::from_d(r.d)?, steps))
}

fn sweep_once<P: ParametricPencil + ?Sized>(
    pencil: &P,
    grid: &GridSpec,
    offset: (f64, f64),
    cfg: &ContinuationConfig,
) -> Vec<BoxResult> {
    (0..grid.rows * grid.cols)
        .into_par_iter()
        .map(|k| {
            let (row, col) = (k / grid.cols, k % grid.cols);
            let rect = grid.cell(row, col, offset);
            let outcome = match box_signature(pencil, &rect, cfg) {
                Ok((signature, steps)) => BoxOutcome::Resolved { signature, steps },
                Err(e) => BoxOutcome::Failed {
                    reason: e.to_string(),
                },
            };
            BoxResult {
                row,
                col,
                rect,
                outcome,
            }
        })
        .collect()
}

/// Traces every box perimeter of the grid.
///
/// A box whose perimeter cannot be traced usually has an intersection on or
/// next to its boundary. Since that point lies on the boundary of a
/// neighbour as well, the whole grid is shifted by a small random offset and
/// swept again, up to `max_retries` times. Boxes still failing afterwards are
/// reported and left out of the counts.
pub fn sweep_grid<P: ParametricPencil + ?Sized>(
    pencil: &P,
    grid: &GridSpec,
    cfg: &ContinuationConfig,
    retry: &RetryPolicy,
) -> Result<BoxGrid, DetectError> {
    grid.validate()?;
    let n = pencil.dim();
    if n < 2 {
        return Err(DetectError::DimensionTooSmall(n));
    }
    let cfg = ContinuationConfig {
        keep_points: false,
        ..*cfg
    };
    let mut rng = ChaCha20Rng::seed_from_u64(retry.seed);
    let amp = (
        retry.shift_fraction * grid.box_width(),
        retry.shift_fraction * grid.box_height(),
    );

    let mut offset = (0.0, 0.0);
    let mut best: Option<BoxGrid> = None;
    for attempt in 0..=retry.max_retries {
        if attempt > 0 {
            offset = (
                amp.0 * rng.random_range(-1.0..=1.0),
                amp.1 * rng.random_range(-1.0..=1.0),
            );
        }
        let boxes = sweep_once(pencil, grid, offset, &cfg);
        let result = BoxGrid {
            spec: *grid,
            dim: n,
            offset,
            attempts: attempt + 1,
            boxes,
        };
        let failures = result.failure_count();
        if failures > 0 {
            log::info!(
                "sweep attempt {}: {failures} box(es) failed, offset ({:e}, {:e})",
                attempt + 1,
                offset.0,
                offset.1
            );
        }
        let better = best.as_ref().is_none_or(|b| failures < b.failure_count());
        if better {
            best = Some(result);
        } else if let Some(b) = best.as_mut() {
            b.attempts = attempt + 1;
        }
        if failures == 0 {
            break;
        }
    }
    let mut best = best.expect("at least one attempt");
    best.attempts = best.attempts.max(1);
    for f in best.failed() {
        if let BoxOutcome::Failed { reason } = &f.outcome {
            log::warn!("box ({}, {}) excluded: {reason}", f.row, f.col);
        }
    }
    Ok(best)
}

/// A localized intersection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CiEstimate {
    pub x: f64,
    pub y: f64,
    /// 1-based pair index.
    pub pair: usize,
    /// Half the diagonal of the smallest flagged box.
    pub uncertainty: f64,
    pub depth: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineOptions {
    pub depth_max: u32,
    /// Stop once the longer side of a box is below this.
    pub min_side: f64,
    pub retry: RetryPolicy,
}

impl Default for RefineOptions {
    fn default() -> Self {
        RefineOptions {
            depth_max: 10,
            min_side: 0.0,
            retry: RetryPolicy::default(),
        }
    }
}

/// Localizes the intersections inside `rect` by recursive 2×2 subdivision.
///
/// Every split must conserve each pair's flag modulo 2. When a child cannot
/// be traced or the parities disagree, the split point is moved by a small
/// random amount and the split repeated. Returns an empty list when the
/// perimeter of `rect` flags nothing.
pub fn refine_box<P: ParametricPencil + ?Sized>(
    pencil: &P,
    rect: &Rect,
    cfg: &ContinuationConfig,
    opts: &RefineOptions,
) -> Result<Vec<CiEstimate>, DetectError> {
    let cfg = ContinuationConfig {
        keep_points: false,
        ..*cfg
    };
    let (sig, _) = box_signature(pencil, rect, &cfg)?;
    if sig.is_trivial() {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha20Rng::seed_from_u64(opts.retry.seed);
    let mut out = Vec::new();
    refine_rec(
        pencil,
        rect,
        &sig.pair_flags,
        0,
        &cfg,
        opts,
        &mut rng,
        &mut out,
    )?;
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn refine_rec<P: ParametricPencil + ?Sized>(
    pencil: &P,
    rect: &Rect,
    flags: &[bool],
    depth: u32,
    cfg: &ContinuationConfig,
    opts: &RefineOptions,
    rng: &mut ChaCha20Rng,
    out: &mut Vec<CiEstimate>,
) -> Result<(), DetectError> {
    if depth >= opts.depth_max || rect.width().max(rect.height()) < opts.min_side {
        let (x, y) = rect.center();
        for (i, _) in flags.iter().enumerate().filter(|(_, &f)| f) {
            out.push(CiEstimate {
                x,
                y,
                pair: i + 1,
                uncertainty: rect.half_diagonal(),
                depth,
            });
        }
        return Ok(());
    }

    let (cx, cy) = rect.center();
    let amp = opts.retry.shift_fraction;
    for attempt in 0..=opts.retry.max_retries {
        let (sx, sy) = if attempt == 0 {
            (cx, cy)
        } else {
            (
                cx + amp * rect.width() * rng.random_range(-1.0..=1.0),
                cy + amp * rect.height() * rng.random_range(-1.0..=1.0),
            )
        };
        let children = [
            Rect::new(rect.x_lo, sx, rect.y_lo, sy),
            Rect::new(sx, rect.x_hi, rect.y_lo, sy),
            Rect::new(rect.x_lo, sx, sy, rect.y_hi),
            Rect::new(sx, rect.x_hi, sy, rect.y_hi),
        ];
        let sigs: Result<Vec<_>, _> = children
            .par_iter()
            .map(|c| box_signature(pencil, c, cfg).map(|(s, _)| s))
            .collect();
        let Ok(sigs) = sigs else {
            log::debug!("refinement split {attempt} of {rect:?} failed to trace");
            continue;
        };
        let consistent = (0..flags.len())
            .all(|i| sigs.iter().filter(|s| s.pair_flags[i]).count() % 2 == usize::from(flags[i]));
        if !consistent {
            log::debug!("refinement split {attempt} of {rect:?} lost parity");
            continue;
        }
        for (child, sig) in children.iter().zip(&sigs) {
            if !sig.is_trivial() {
                refine_rec(
                    pencil,
                    child,
                    &sig.pair_flags,
                    depth + 1,
                    cfg,
                    opts,
                    rng,
                    out,
                )?;
            }
        }
        return Ok(());
    }
    Err(DetectError::RefinementInconsistent {
        rect: *rect,
        attempts: opts.retry.max_retries + 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pencil::analytic_ci_pencil;

    #[test]
    fn decode_examples() {
        assert_eq!(
            decode_signature(&[1, -1, -1, 1]).unwrap(),
            vec![false, true, false]
        );
        assert_eq!(decode_signature(&[1, 1, 1]).unwrap(), vec![false, false]);
        assert_eq!(
            decode_signature(&[-1, 1, 1, -1]).unwrap(),
            vec![true, true, true]
        );
        assert_eq!(
            decode_signature(&[1, -1, 1]),
            Err(DetectError::OddSignCount { count: 1 })
        );
        assert!(matches!(
            decode_signature(&[1, 0]),
            Err(DetectError::NotASign { index: 1, value: 0 })
        ));
    }

    #[test]
    fn encode_examples() {
        assert_eq!(signature_from_counts(&[1, 0, 0]), vec![-1, -1, 1, 1]);
        assert_eq!(signature_from_counts(&[0, 0, 0]), vec![1, 1, 1, 1]);
        let d = signature_from_counts(&[1, 1, 0]);
        assert_eq!(d, vec![-1, 1, -1, 1]);
        assert_eq!(decode_signature(&d).unwrap(), vec![true, true, false]);
    }

    #[test]
    fn grid_cells_tile_exactly() {
        let g = GridSpec::new(Rect::new(0.0, std::f64::consts::PI, 0.0, 1.0), 7, 3);
        let off = (1e-4, -2e-4);
        for r in 0..7 {
            for c in 0..3 {
                let b = g.cell(r, c, off);
                if r + 1 < 7 {
                    assert_eq!(b.x_hi, g.cell(r + 1, c, off).x_lo);
                }
                if c + 1 < 3 {
                    assert_eq!(b.y_hi, g.cell(r, c + 1, off).y_lo);
                }
            }
        }
        assert_eq!(g.cell(6, 0, (0.0, 0.0)).x_hi, std::f64::consts::PI);
    }

    #[test]
    fn invalid_grid_rejected() {
        let g = GridSpec::new(Rect::new(0.0, 1.0, 0.0, 1.0), 0, 3);
        assert!(matches!(
            sweep_grid(
                &analytic_ci_pencil(0.0),
                &g,
                &Default::default(),
                &Default::default()
            ),
            Err(DetectError::InvalidGrid(_))
        ));
    }

    #[test]
    fn sweep_analytic_flags_origin_box_only() {
        let g = GridSpec::new(Rect::new(-1.0, 1.0, -1.0, 1.0), 8, 8);
        let grid = sweep_grid(
            &analytic_ci_pencil(0.0),
            &g,
            &ContinuationConfig::default(),
            &RetryPolicy::default(),
        )
        .unwrap();
        assert_eq!(grid.failure_count(), 0);
        assert!(grid.attempts > 1, "origin sits on a grid vertex");
        let locs = grid.ci_locations();
        assert_eq!(locs.len(), 1);
        let b = &grid.boxes[locs[0].row * 8 + locs[0].col];
        assert!(b.rect.contains(0.0, 0.0));
        assert_eq!(locs[0].pair, 1);
    }

    #[test]
    fn refine_trivial_box_is_noop() {
        let est = refine_box(
            &analytic_ci_pencil(0.0),
            &Rect::new(0.5, 1.0, 0.5, 1.0),
            &ContinuationConfig::default(),
            &RefineOptions::default(),
        )
        .unwrap();
        assert!(est.is_empty());
    }

    #[test]
    fn refine_perturbed_intersection() {
        let p = analytic_ci_pencil(0.1);
        let est = refine_box(
            &p,
            &Rect::new(-0.25, 0.0, -0.25, 0.0),
            &ContinuationConfig::default(),
            &RefineOptions {
                depth_max: 8,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(est.len(), 1);
        let (x, y) = p.intersection();
        assert!((est[0].x - x).abs() <= est[0].uncertainty);
        assert!((est[0].y - y).abs() <= est[0].uncertainty);
    }

    #[test]
    fn csv_and_summary() {
        let g = GridSpec::new(Rect::new(-0.6, 0.4, -0.7, 0.3), 1, 1);
        let grid = sweep_grid(
            &analytic_ci_pencil(0.0),
            &g,
            &ContinuationConfig::default(),
            &RetryPolicy::default(),
        )
        .unwrap();
        let mut buf = Vec::new();
        grid.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.lines().nth(1).unwrap().starts_with("0,0,"));
        let s = grid.summary();
        assert_eq!(s.pair_totals, vec![1]);
        let json = serde_json::to_string(&s).unwrap();
        let back: SweepSummary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
    }
}
