//! Ensemble experiments: many realizations swept over a parameter grid,
//! intersection counts aggregated per cell, and power-law fits of count
//! against dimension.
//!
//! Every realization is an independent job whose seed is derived from the
//! master seed and the job coordinates. Finished jobs are persisted as one
//! JSON file each under `<out>/jobs/`, so an interrupted run picks up where it
//! stopped and produces the same report as an uninterrupted one.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::continuation::ContinuationConfig;
use crate::detect::{sweep_grid, DetectError, GridSpec, RetryPolicy};
use crate::pencil::{analytic_ci_pencil, dispersion_bound, sgplus_generate, PencilError, Rect};

#[derive(Debug, Error)]
pub enum CensusError {
    #[error("invalid experiment: {0}")]
    InvalidSpec(String),
    #[error("count {count} at n = {n} is not positive")]
    NonPositiveCount { n: f64, count: f64 },
    #[error("need at least 2 points for a fit, got {0}")]
    TooFewPoints(usize),
    #[error("malformed data: {0}")]
    Parse(String),
    #[error(transparent)]
    Pencil(#[from] PencilError),
    #[error(transparent)]
    Detect(#[from] DetectError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Band half-width of the random factors; `Full` means `n − 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Bandwidth {
    Band(usize),
    Full,
}

impl Bandwidth {
    pub fn resolve(self, n: usize) -> usize {
        match self {
            Bandwidth::Band(b) => b,
            Bandwidth::Full => n.saturating_sub(1),
        }
    }

    fn seed_code(self) -> u64 {
        match self {
            Bandwidth::Band(b) => b as u64,
            Bandwidth::Full => u64::MAX,
        }
    }
}

impl fmt::Display for Bandwidth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Bandwidth::Band(b) => write!(f, "{b}"),
            Bandwidth::Full => f.write_str("full"),
        }
    }
}

impl std::str::FromStr for Bandwidth {
    type Err = CensusError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("full") {
            return Ok(Bandwidth::Full);
        }
        s.parse::<usize>().map(Bandwidth::Band).map_err(|_| {
            CensusError::Parse(format!(
                "bandwidth {s:?} is neither an integer nor \"full\""
            ))
        })
    }
}

impl Serialize for Bandwidth {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Bandwidth::Band(b) => s.serialize_u64(*b as u64),
            Bandwidth::Full => s.serialize_str("full"),
        }
    }
}

impl<'de> Deserialize<'de> for Bandwidth {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(usize),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(b) => Ok(Bandwidth::Band(b)),
            Raw::Str(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Which pencil each job sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PencilKind {
    #[default]
    Sgplus,
    /// The fixed 2×2 analytic pencil; `n`, `b` and `δ` only label the job.
    AnalyticCi {
        #[serde(default)]
        epsilon: f64,
    },
}

fn default_domain() -> Rect {
    Rect::new(0.0, std::f64::consts::PI, 0.0, 2.0 * std::f64::consts::PI)
}

fn default_grid() -> [usize; 2] {
    [64, 128]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub n_list: Vec<usize>,
    pub b_list: Vec<Bandwidth>,
    pub delta_list: Vec<f64>,
    pub realizations: usize,
    /// `[rows, cols]`.
    #[serde(default = "default_grid")]
    pub grid: [usize; 2],
    #[serde(default = "default_domain")]
    pub domain: Rect,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub pencil: PencilKind,
    #[serde(default)]
    pub continuation: ContinuationConfig,
    #[serde(default)]
    pub retry: RetryPolicy,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<(), CensusError> {
        let [rows, cols] = self.grid;
        if rows == 0 || cols == 0 {
            return Err(CensusError::InvalidSpec(
                "grid must have at least one box".into(),
            ));
        }
        if let PencilKind::Sgplus = self.pencil {
            for &n in &self.n_list {
                if n < 2 {
                    return Err(CensusError::InvalidSpec(format!("n = {n} is below 2")));
                }
                for &delta in &self.delta_list {
                    let bound = dispersion_bound(n);
                    if !(delta > 0.0 && delta < bound) {
                        return Err(CensusError::InvalidSpec(format!(
                            "delta = {delta} outside (0, sqrt((n+1)/(n+5))) = (0, {bound}) for n = {n}"
                        )));
                    }
                }
                for &b in &self.b_list {
                    let bw = b.resolve(n);
                    if bw == 0 || bw > n - 1 {
                        return Err(CensusError::InvalidSpec(format!(
                            "bandwidth {b} invalid for n = {n}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    fn grid_spec(&self) -> GridSpec {
        GridSpec::new(self.domain, self.grid[0], self.grid[1])
    }

    /// All jobs in canonical order: bandwidth, δ, n, realization.
    pub fn jobs(&self) -> Vec<JobKey> {
        let mut out = Vec::new();
        for &b in &self.b_list {
            for (di, &delta) in self.delta_list.iter().enumerate() {
                for &n in &self.n_list {
                    for r in 0..self.realizations {
                        out.push(JobKey {
                            bandwidth: b,
                            delta,
                            delta_index: di,
                            n,
                            realization: r,
                        });
                    }
                }
            }
        }
        out
    }
}

/// Per-realization seed: the first 8 bytes (little endian) of SHA-256 over
/// the little-endian encoding of `(seed0, b, δ-index, n, realization)`, with
/// full bandwidth encoded as `u64::MAX`.
pub fn derive_seed(
    seed0: u64,
    b: Bandwidth,
    delta_index: usize,
    n: usize,
    realization: usize,
) -> u64 {
    let mut h = Sha256::new();
    for v in [
        seed0,
        b.seed_code(),
        delta_index as u64,
        n as u64,
        realization as u64,
    ] {
        h.update(v.to_le_bytes());
    }
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JobKey {
    pub bandwidth: Bandwidth,
    pub delta: f64,
    pub delta_index: usize,
    pub n: usize,
    pub realization: usize,
}

impl JobKey {
    fn file_name(&self) -> String {
        format!(
            "b{}_d{}_n{}_r{}.json",
            self.bandwidth, self.delta_index, self.n, self.realization
        )
    }
}

/// Persisted outcome of one realization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub key: JobKey,
    pub seed: u64,
    pub grid: [usize; 2],
    pub domain: Rect,
    pub pair_totals: Vec<usize>,
    pub count: usize,
    pub failed_boxes: usize,
    pub attempts: u32,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RunOptions {
    /// Compute at most this many new jobs, then return an incomplete report.
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub p: f64,
    pub c: f64,
    pub rmsd: f64,
}

impl PowerLawFit {
    pub fn eval(&self, n: f64) -> f64 {
        self.c * n.powf(self.p)
    }
}

/// Least squares line through `(ln n, ln count)`: slope `p`, intercept `ln c`.
pub fn fit_power_law(points: &[(f64, f64)]) -> Result<PowerLawFit, CensusError> {
    if points.len() < 2 {
        return Err(CensusError::TooFewPoints(points.len()));
    }
    let mut xs = Vec::with_capacity(points.len());
    let mut ys = Vec::with_capacity(points.len());
    for &(n, count) in points {
        if !(count > 0.0) || !(n > 0.0) {
            return Err(CensusError::NonPositiveCount { n, count });
        }
        xs.push(n.ln());
        ys.push(count.ln());
    }
    let m = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / m;
    let my = ys.iter().sum::<f64>() / m;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(CensusError::TooFewPoints(1));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let p = sxy / sxx;
    let ln_c = my - p * mx;
    let ss: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - ln_c - p * x).powi(2))
        .sum();
    Ok(PowerLawFit {
        p,
        c: ln_c.exp(),
        rmsd: (ss / m).sqrt(),
    })
}

/// Exponents of the Gaussian orthogonal ensemble for comparison, per bandwidth.
pub fn goe_reference(b: Bandwidth) -> Option<f64> {
    match b {
        Bandwidth::Full => Some(2.00),
        Bandwidth::Band(5) => Some(2.55),
        Bandwidth::Band(4) => Some(2.66),
        Bandwidth::Band(3) => Some(2.73),
        Bandwidth::Band(_) => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub bandwidth: Bandwidth,
    pub delta: f64,
    pub n: usize,
    pub counts: Vec<usize>,
    pub mean: f64,
    pub failed_boxes: Vec<usize>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRow {
    pub bandwidth: Bandwidth,
    pub delta: f64,
    pub fit: Option<PowerLawFit>,
    /// Dimensions left out because their mean count was zero.
    pub excluded: Vec<usize>,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExponentRow {
    pub bandwidth: Bandwidth,
    pub mean_p: f64,
    pub fits: usize,
    pub goe: Option<f64>,
}

/// Mean exponent over δ for each bandwidth, in order of first appearance.
pub fn summarize_exponents(fits: &[FitRow]) -> Vec<ExponentRow> {
    let mut order: Vec<Bandwidth> = Vec::new();
    let mut acc: BTreeMap<Bandwidth, (f64, usize)> = BTreeMap::new();
    for row in fits {
        if let Some(f) = &row.fit {
            if !order.contains(&row.bandwidth) {
                order.push(row.bandwidth);
            }
            let e = acc.entry(row.bandwidth).or_insert((0.0, 0));
            e.0 += f.p;
            e.1 += 1;
        }
    }
    order
        .into_iter()
        .map(|b| {
            let (sum, k) = acc[&b];
            ExponentRow {
                bandwidth: b,
                mean_p: sum / k as f64,
                fits: k,
                goe: goe_reference(b),
            }
        })
        .collect()
}

/// Fits every `(bandwidth, δ)` group of cells, dropping zero means.
pub fn fit_cells(cells: &[CellSummary]) -> Vec<FitRow> {
    let mut groups: Vec<((Bandwidth, u64), Vec<&CellSummary>)> = Vec::new();
    for c in cells {
        let key = (c.bandwidth, c.delta.to_bits());
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(c),
            None => groups.push((key, vec![c])),
        }
    }
    groups
        .into_iter()
        .map(|((bandwidth, dbits), cs)| {
            let delta = f64::from_bits(dbits);
            let mut excluded = Vec::new();
            let mut pts = Vec::new();
            for c in cs {
                if c.mean > 0.0 {
                    pts.push((c.n as f64, c.mean));
                } else {
                    log::warn!(
                        "b = {bandwidth}, delta = {delta}, n = {}: zero count left out of the fit",
                        c.n
                    );
                    excluded.push(c.n);
                }
            }
            let fit = match fit_power_law(&pts) {
                Ok(f) => Some(f),
                Err(e) => {
                    log::warn!("b = {bandwidth}, delta = {delta}: no fit ({e})");
                    None
                }
            };
            FitRow {
                bandwidth,
                delta,
                fit,
                excluded,
                points: pts.len(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CensusReport {
    pub spec: ExperimentSpec,
    /// False when the run stopped early; the aggregate files are then not written.
    pub complete: bool,
    pub jobs_done: usize,
    pub jobs_total: usize,
    pub cells: Vec<CellSummary>,
    pub fits: Vec<FitRow>,
    pub exponents: Vec<ExponentRow>,
}

fn run_job(spec: &ExperimentSpec, key: &JobKey) -> Result<JobRecord, CensusError> {
    let seed = derive_seed(
        spec.seed,
        key.bandwidth,
        key.delta_index,
        key.n,
        key.realization,
    );
    let retry = RetryPolicy {
        seed: seed ^ 0x9E37_79B9_7F4A_7C15,
        ..spec.retry
    };
    let grid = spec.grid_spec();
    let start = Instant::now();
    let swept = match spec.pencil {
        PencilKind::Sgplus => {
            let r = sgplus_generate(key.n, key.bandwidth.resolve(key.n), key.delta, seed)?;
            sweep_grid(&r, &grid, &spec.continuation, &retry)?
        }
        PencilKind::AnalyticCi { epsilon } => sweep_grid(
            &analytic_ci_pencil(epsilon),
            &grid,
            &spec.continuation,
            &retry,
        )?,
    };
    Ok(JobRecord {
        key: *key,
        seed,
        grid: spec.grid,
        domain: spec.domain,
        pair_totals: swept.pair_totals(),
        count: swept.total(),
        failed_boxes: swept.failure_count(),
        attempts: swept.attempts,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

fn load_job(path: &Path, spec: &ExperimentSpec, key: &JobKey) -> Option<JobRecord> {
    let text = fs::read_to_string(path).ok()?;
    let rec: JobRecord = serde_json::from_str(&text).ok()?;
    let seed = derive_seed(
        spec.seed,
        key.bandwidth,
        key.delta_index,
        key.n,
        key.realization,
    );
    let fresh = rec.seed == seed
        && rec.grid == spec.grid
        && rec.domain == spec.domain
        && rec.key.n == key.n
        && rec.key.delta.to_bits() == key.delta.to_bits();
    fresh.then_some(rec)
}

fn store_job(dir: &Path, rec: &JobRecord) -> Result<(), CensusError> {
    let path = dir.join(rec.key.file_name());
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, serde_json::to_vec_pretty(rec)?)?;
    fs::rename(&tmp, &path)?;
    Ok(())
}

/// Runs (or resumes) the experiment, persisting jobs under `out/jobs` and,
/// once every job is done, writing the aggregate reports to `out`.
pub fn run_census(
    spec: &ExperimentSpec,
    out: &Path,
    opts: &RunOptions,
) -> Result<CensusReport, CensusError> {
    spec.validate()?;
    let jobs_dir = out.join("jobs");
    fs::create_dir_all(&jobs_dir)?;
    let keys = spec.jobs();

    let mut done: Vec<Option<JobRecord>> = keys
        .iter()
        .map(|k| load_job(&jobs_dir.join(k.file_name()), spec, k))
        .collect();
    let mut pending: Vec<usize> = (0..keys.len()).filter(|&i| done[i].is_none()).collect();
    log::info!(
        "{} of {} jobs already done",
        keys.len() - pending.len(),
        keys.len()
    );
    if let Some(k) = opts.stop_after {
        pending.truncate(k);
    }

    let fresh: Vec<(usize, Result<JobRecord, CensusError>)> = pending
        .par_iter()
        .map(|&i| {
            let rec = run_job(spec, &keys[i]).and_then(|r| {
                store_job(&jobs_dir, &r)?;
                Ok(r)
            });
            (i, rec)
        })
        .collect();
    for (i, rec) in fresh {
        let rec = rec?;
        log::info!(
            "b = {}, delta = {}, n = {}, realization {}: {} intersections",
            rec.key.bandwidth,
            rec.key.delta,
            rec.key.n,
            rec.key.realization,
            rec.count
        );
        done[i] = Some(rec);
    }

    let jobs_done = done.iter().filter(|d| d.is_some()).count();
    let complete = jobs_done == keys.len();
    let cells = aggregate(spec, &done);
    let fits = fit_cells(&cells);
    let exponents = summarize_exponents(&fits);
    let report = CensusReport {
        spec: spec.clone(),
        complete,
        jobs_done,
        jobs_total: keys.len(),
        cells,
        fits,
        exponents,
    };
    if complete {
        write_report(&report, out)?;
    }
    Ok(report)
}

fn aggregate(spec: &ExperimentSpec, done: &[Option<JobRecord>]) -> Vec<CellSummary> {
    let mut cells = Vec::new();
    let r = spec.realizations.max(1);
    for chunk in done.chunks(r) {
        let recs: Vec<&JobRecord> = chunk.iter().flatten().collect();
        if recs.len() != chunk.len() || recs.is_empty() {
            continue;
        }
        let key = recs[0].key;
        let counts: Vec<usize> = recs.iter().map(|j| j.count).collect();
        cells.push(CellSummary {
            bandwidth: key.bandwidth,
            delta: key.delta,
            n: key.n,
            mean: counts.iter().sum::<usize>() as f64 / counts.len() as f64,
            counts,
            failed_boxes: recs.iter().map(|j| j.failed_boxes).collect(),
            wall_time_s: recs.iter().map(|j| j.wall_time_s).sum(),
        });
    }
    cells
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(";")
}

/// Writes `aggregated.csv`, `fits.csv`, `exponents.csv`, `loglog.dat` and
/// `report.json`. Only `report.json` carries wall times.
pub fn write_report(report: &CensusReport, out: &Path) -> Result<(), CensusError> {
    fs::create_dir_all(out)?;
    let mut agg = Vec::new();
    writeln!(agg, "bandwidth,delta,n,mean_count,counts,failed_boxes")?;
    for c in &report.cells {
        writeln!(
            agg,
            "{},{:.16e},{},{:.16e},{},{}",
            c.bandwidth,
            c.delta,
            c.n,
            c.mean,
            join(&c.counts),
            join(&c.failed_boxes)
        )?;
    }
    fs::write(out.join("aggregated.csv"), agg)?;

    let mut fits = Vec::new();
    writeln!(fits, "bandwidth,delta,p,c,rmsd,points,excluded")?;
    for f in &report.fits {
        match &f.fit {
            Some(fit) => writeln!(
                fits,
                "{},{:.16e},{:.16e},{:.16e},{:.16e},{},{}",
                f.bandwidth,
                f.delta,
                fit.p,
                fit.c,
                fit.rmsd,
                f.points,
                join(&f.excluded)
            )?,
            None => writeln!(
                fits,
                "{},{:.16e},,,,{},{}",
                f.bandwidth,
                f.delta,
                f.points,
                join(&f.excluded)
            )?,
        }
    }
    fs::write(out.join("fits.csv"), fits)?;

    let mut ex = Vec::new();
    writeln!(ex, "bandwidth,mean_p,fits,goe_p")?;
    for e in &report.exponents {
        let goe = e.goe.map(|g| format!("{g:.2}")).unwrap_or_default();
        writeln!(ex, "{},{:.16e},{},{}", e.bandwidth, e.mean_p, e.fits, goe)?;
    }
    fs::write(out.join("exponents.csv"), ex)?;

    let mut ll = Vec::new();
    writeln!(ll, "# log_n log_count bandwidth delta")?;
    for c in report.cells.iter().filter(|c| c.mean > 0.0) {
        writeln!(
            ll,
            "{:.16e} {:.16e} {} {:.16e}",
            (c.n as f64).ln(),
            c.mean.ln(),
            c.bandwidth,
            c.delta
        )?;
    }
    fs::write(out.join("loglog.dat"), ll)?;

    fs::write(out.join("report.json"), serde_json::to_vec_pretty(report)?)?;
    Ok(())
}

/// One row of a count table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CountRow {
    pub bandwidth: Bandwidth,
    pub delta: Option<f64>,
    pub n: f64,
    pub count: f64,
}

/// Reads a headed CSV with columns `bandwidth`, `n` and `count` (or
/// `mean_count`), and optionally `delta`. Blank lines and `#` comments are
/// skipped.
pub fn read_count_table<R: BufRead>(input: R) -> Result<Vec<CountRow>, CensusError> {
    let mut lines = input
        .lines()
        .map(|l| l.map(|s| s.trim().to_string()))
        .filter(|l| {
            l.as_ref()
                .map_or(true, |s| !s.is_empty() && !s.starts_with('#'))
        });
    let header = match lines.next() {
        Some(h) => h?,
        None => return Err(CensusError::Parse("empty data file".into())),
    };
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let find = |names: &[&str]| cols.iter().position(|c| names.contains(c));
    let ib = find(&["bandwidth", "b"])
        .ok_or_else(|| CensusError::Parse("missing bandwidth column".into()))?;
    let in_ =
        find(&["n", "dimension"]).ok_or_else(|| CensusError::Parse("missing n column".into()))?;
    let ic = find(&["count", "mean_count"])
        .ok_or_else(|| CensusError::Parse("missing count column".into()))?;
    let id = find(&["delta"]);
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        let get = |i: usize| {
            f.get(i)
                .copied()
                .ok_or_else(|| CensusError::Parse(format!("row {} is short", lineno + 2)))
        };
        let num = |i: usize| -> Result<f64, CensusError> {
            let s = get(i)?;
            s.parse().map_err(|_| {
                CensusError::Parse(format!("row {}: {s:?} is not a number", lineno + 2))
            })
        };
        rows.push(CountRow {
            bandwidth: get(ib)?.parse()?,
            delta: id.map(num).transpose()?,
            n: num(in_)?,
            count: num(ic)?,
        });
    }
    if rows.is_empty() {
        return Err(CensusError::Parse("no data rows".into()));
    }
    Ok(rows)
}

/// Fits each `(bandwidth, δ)` group of a count table.
pub fn fit_table(
    rows: &[CountRow],
) -> Vec<(Bandwidth, Option<f64>, Result<PowerLawFit, CensusError>)> {
    type Group = ((Bandwidth, Option<u64>), Vec<(f64, f64)>);
    let mut groups: Vec<Group> = Vec::new();
    for r in rows {
        let key = (r.bandwidth, r.delta.map(f64::to_bits));
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push((r.n, r.count)),
            None => groups.push((key, vec![(r.n, r.count)])),
        }
    }
    groups
        .into_iter()
        .map(|((b, d), pts)| (b, d.map(f64::from_bits), fit_power_law(&pts)))
        .collect()
}

/// Path of the persisted record for `key` under `out`.
pub fn job_path(out: &Path, key: &JobKey) -> PathBuf {
    out.join("jobs").join(key.file_name())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_recovers_itself() {
        let pts: Vec<(f64, f64)> = (5..=12)
            .map(|k| {
                let n = 10.0 * k as f64;
                (n, 0.13 * n.powf(2.59))
            })
            .collect();
        let f = fit_power_law(&pts).unwrap();
        assert!((f.p - 2.59).abs() < 1e-12);
        assert!((f.c - 0.13).abs() < 1e-12);
        assert!(f.rmsd <= 1e-12);
    }

    #[test]
    fn fit_rejects_bad_input() {
        assert!(matches!(
            fit_power_law(&[(10.0, 1.0)]),
            Err(CensusError::TooFewPoints(1))
        ));
        assert!(matches!(
            fit_power_law(&[(10.0, 1.0), (20.0, 0.0)]),
            Err(CensusError::NonPositiveCount { .. })
        ));
    }

    #[test]
    fn bandwidth_serde() {
        let b: Vec<Bandwidth> = serde_json::from_str(r#"[3, "full", 5]"#).unwrap();
        assert_eq!(
            b,
            vec![Bandwidth::Band(3), Bandwidth::Full, Bandwidth::Band(5)]
        );
        assert_eq!(serde_json::to_string(&b).unwrap(), r#"[3,"full",5]"#);
        assert!(serde_json::from_str::<Bandwidth>(r#""wide""#).is_err());
        assert_eq!(Bandwidth::Full.resolve(10), 9);
    }

    #[test]
    fn seeds_are_stable_and_distinct() {
        let a = derive_seed(7, Bandwidth::Full, 0, 10, 0);
        assert_eq!(a, derive_seed(7, Bandwidth::Full, 0, 10, 0));
        let others = [
            derive_seed(8, Bandwidth::Full, 0, 10, 0),
            derive_seed(7, Bandwidth::Band(3), 0, 10, 0),
            derive_seed(7, Bandwidth::Full, 1, 10, 0),
            derive_seed(7, Bandwidth::Full, 0, 11, 0),
            derive_seed(7, Bandwidth::Full, 0, 10, 1),
        ];
        assert!(others.iter().all(|&s| s != a));
    }

    #[test]
    fn summarize_single_and_mean() {
        let row = |b, delta, p| FitRow {
            bandwidth: b,
            delta,
            fit: Some(PowerLawFit {
                p,
                c: 1.0,
                rmsd: 0.0,
            }),
            excluded: vec![],
            points: 3,
        };
        let s = summarize_exponents(&[row(Bandwidth::Band(3), 0.45, 2.59)]);
        assert_eq!(s[0].mean_p, 2.59);
        assert_eq!(s[0].goe, Some(2.73));
        let s = summarize_exponents(&[
            row(Bandwidth::Full, 0.05, 2.51),
            row(Bandwidth::Full, 0.25, 2.49),
        ]);
        assert!((s[0].mean_p - 2.5).abs() < 1e-15);
    }

    #[test]
    fn spec_validation() {
        let mut spec: ExperimentSpec = serde_json::from_str(
            r#"{"n_list":[10],"b_list":["full"],"delta_list":[0.45],"realizations":1}"#,
        )
        .unwrap();
        assert_eq!(spec.grid, [64, 128]);
        spec.validate().unwrap();
        spec.delta_list = vec![0.95];
        assert!(matches!(spec.validate(), Err(CensusError::InvalidSpec(_))));
        spec.delta_list = vec![0.45];
        spec.b_list = vec![Bandwidth::Band(10)];
        assert!(matches!(spec.validate(), Err(CensusError::InvalidSpec(_))));
    }

    #[test]
    fn empty_dimension_list_gives_empty_report() {
        let dir = tempfile::tempdir().unwrap();
        let spec: ExperimentSpec = serde_json::from_str(
            r#"{"n_list":[],"b_list":["full"],"delta_list":[0.45],"realizations":3}"#,
        )
        .unwrap();
        let r = run_census(&spec, dir.path(), &RunOptions::default()).unwrap();
        assert!(r.complete);
        assert!(r.cells.is_empty());
        assert!(r.fits.is_empty());
    }

    #[test]
    fn analytic_override_counts_one() {
        let dir = tempfile::tempdir().unwrap();
        let spec: ExperimentSpec = serde_json::from_str(
            r#"{"n_list":[2],"b_list":[1],"delta_list":[0.1],"realizations":1,
                "grid":[8,8],"domain":{"x_lo":-1,"x_hi":1,"y_lo":-1,"y_hi":1},
                "pencil":{"kind":"analytic_ci"}}"#,
        )
        .unwrap();
        let r = run_census(&spec, dir.path(), &RunOptions::default()).unwrap();
        assert_eq!(r.cells.len(), 1);
        assert_eq!(r.cells[0].counts, vec![1]);
        assert!(dir.path().join("aggregated.csv").exists());
    }

    #[test]
    fn count_table_parsing() {
        let text =
            "# comment\nbandwidth,n,count\n3,50,3340\nfull,50,1916\n3,60,5318\nfull,60,2827\n";
        let rows = read_count_table(text.as_bytes()).unwrap();
        assert_eq!(rows.len(), 4);
        let fits = fit_table(&rows);
        assert_eq!(fits.len(), 2);
        assert_eq!(fits[1].0, Bandwidth::Full);
        assert!(read_count_table("".as_bytes()).is_err());
        assert!(read_count_table("bandwidth,n,count\n".as_bytes()).is_err());
        assert!(read_count_table("bandwidth,n,count\n3,x,1\n".as_bytes()).is_err());
    }
}
