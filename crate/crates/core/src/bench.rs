//! Wall-time and allocation sweeps over the number of positions `N`.
//!
//! Space is measured with the allocation ledger, not the OS: every record
//! carries the exact peak number of matrix floats alive during the call,
//! which must match [`predict_peak_floats`].

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::{forward, Variant};
use crate::error::{invalid, Error, Result};
use crate::gradients::backward;
use crate::ledger;
use crate::projections::{init_projections, FeatureMap};
use crate::rng::{Rng, RNG_ALGORITHM};
use crate::tensor::Matrix;

/// Logical float budget used for the feasibility frontier when none is set.
pub const DEFAULT_FLOAT_BUDGET: u64 = 1 << 26;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    pub const ALL: [Direction; 2] = [Direction::Forward, Direction::Backward];

    pub fn name(self) -> &'static str {
        match self {
            Direction::Forward => "forward",
            Direction::Backward => "backward",
        }
    }
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forward" => Ok(Direction::Forward),
            "backward" => Ok(Direction::Backward),
            _ => Err(invalid(format!("unknown direction {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub n_values: Vec<usize>,
    pub c: usize,
    pub r: usize,
    pub reps: usize,
    pub warmup: usize,
    pub seed: u64,
    pub variants: Vec<Variant>,
    pub directions: Vec<Direction>,
    /// Configurations whose predicted peak exceeds this many floats are
    /// recorded as infeasible instead of being run.
    pub float_budget: Option<u64>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            n_values: vec![512, 1024, 2048, 4096],
            c: 64,
            r: 8,
            reps: 5,
            warmup: 1,
            seed: 42,
            variants: vec![Variant::VanillaSoftmax, Variant::LinearLinearOrder],
            directions: Direction::ALL.to_vec(),
            float_budget: None,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_values.is_empty() {
            return Err(invalid("n_values must not be empty"));
        }
        if self.n_values.contains(&0) {
            return Err(invalid("every N must be at least 1"));
        }
        if self.n_values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("n_values must be strictly ascending"));
        }
        if self.c == 0 || self.r == 0 || !self.c.is_multiple_of(self.r) {
            return Err(invalid(format!(
                "c = {} must be a multiple of r = {}",
                self.c, self.r
            )));
        }
        if self.reps < 5 {
            return Err(invalid(format!(
                "reps must be at least 5, got {}",
                self.reps
            )));
        }
        if self.warmup < 1 {
            return Err(invalid("warmup must be at least 1"));
        }
        if self.variants.is_empty() || self.directions.is_empty() {
            return Err(invalid(
                "at least one variant and one direction are required",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub variant: Variant,
    pub direction: Direction,
    pub n_positions: usize,
    pub n_channels: usize,
    pub reduction: usize,
    pub reps: usize,
    /// Median wall time of one call; `None` for infeasible configurations.
    pub wall_seconds: Option<f64>,
    /// Observed ledger peak, or the predicted peak when infeasible.
    pub peak_floats: u64,
    pub seed: u64,
    pub feasible: bool,
}

/// Exact peak float count of one call, term by term (`k = C/r`):
///
/// | variant / direction        | terms                                                        |
/// |----------------------------|--------------------------------------------------------------|
/// | linear, forward            | `z Nk + y Nk + phi NC + B kC + out NC`                        |
/// | vanilla / quadratic, fwd   | `z Nk + y Nk + phi NC + map N² + out NC`                      |
/// | linear, backward           | `z, y, dz, dy: 4Nk; phi, dphi, dx: 3NC; B, dB, dWz, dWy: 4kC; dWphi C²` |
/// | vanilla / quadratic, bwd   | `z, y, dz, dy: 4Nk; phi, dphi, dx: 3NC; map, dmap: 2N²; dWz, dWy: 2kC; dWphi C²` |
///
/// Softmax and the `1/N` scaling run in place and add nothing.
pub fn predict_peak_floats(
    variant: Variant,
    n: usize,
    c: usize,
    r: usize,
    direction: Direction,
) -> u64 {
    let (n, c) = (n as u64, c as u64);
    let k = c / r as u64;
    let quadratic = variant.is_quadratic();
    match (direction, quadratic) {
        (Direction::Forward, false) => 2 * n * k + 2 * n * c + k * c,
        (Direction::Forward, true) => 2 * n * k + 2 * n * c + n * n,
        (Direction::Backward, false) => 4 * n * k + 3 * n * c + 4 * k * c + c * c,
        (Direction::Backward, true) => 4 * n * k + 3 * n * c + 2 * n * n + 2 * k * c + c * c,
    }
}

/// Largest `N` whose predicted peak fits in `budget` floats.
pub fn largest_feasible_n(
    variant: Variant,
    direction: Direction,
    c: usize,
    r: usize,
    budget: u64,
) -> Option<usize> {
    let fits = |n: usize| predict_peak_floats(variant, n, c, r, direction) <= budget;
    if !fits(1) {
        return None;
    }
    // peak >= N, so N = budget + 1 never fits
    let (mut lo, mut hi) = (
        1usize,
        budget.saturating_add(1).min(usize::MAX as u64) as usize,
    );
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if fits(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(lo)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let m = values.len() / 2;
    if values.len() % 2 == 1 {
        values[m]
    } else {
        (values[m - 1] + values[m]) / 2.0
    }
}

struct Instance {
    x: FeatureMap,
    p: crate::projections::ProjectionSet,
    upstream: Matrix,
}

fn instance(n: usize, c: usize, r: usize, seed: u64) -> Result<Instance> {
    let mut rng = Rng::new(seed);
    let p = init_projections(c, r, &mut rng)?;
    let x = FeatureMap::random(n, c, &mut rng);
    let upstream = Matrix::random_uniform(n, c, 1.0, &mut rng);
    Ok(Instance { x, p, upstream })
}

/// One untimed-or-timed call; returns the ledger peak.
fn call(variant: Variant, direction: Direction, inst: &Instance) -> Result<(f64, u64)> {
    let start = Instant::now();
    let (result, led) = ledger::track(|| -> Result<()> {
        match direction {
            Direction::Forward => forward(variant, &inst.x, &inst.p).map(|_| ()),
            Direction::Backward => backward(variant, &inst.x, &inst.p, &inst.upstream).map(|_| ()),
        }
    });
    let elapsed = start.elapsed().as_secs_f64();
    result?;
    Ok((elapsed, led.peak_floats))
}

/// Runs every `(variant, N, direction)` in `config`, calling `on_record`
/// after each record is complete.
pub fn run_sweep_with(
    config: &BenchConfig,
    mut on_record: impl FnMut(&BenchRecord),
) -> Result<Vec<BenchRecord>> {
    config.validate()?;
    let mut records = Vec::new();
    for &variant in &config.variants {
        for &n in &config.n_values {
            for &direction in &config.directions {
                let predicted = predict_peak_floats(variant, n, config.c, config.r, direction);
                let mut record = BenchRecord {
                    variant,
                    direction,
                    n_positions: n,
                    n_channels: config.c,
                    reduction: config.r,
                    reps: 0,
                    wall_seconds: None,
                    peak_floats: predicted,
                    seed: config.seed,
                    feasible: false,
                };
                if config.float_budget.is_none_or(|b| predicted <= b) {
                    let inst = instance(n, config.c, config.r, config.seed)?;
                    for _ in 0..config.warmup {
                        call(variant, direction, &inst)?;
                    }
                    let mut times = Vec::with_capacity(config.reps);
                    let mut peak = 0;
                    for _ in 0..config.reps {
                        let (t, p) = call(variant, direction, &inst)?;
                        times.push(t.max(f64::MIN_POSITIVE));
                        peak = peak.max(p);
                    }
                    record.reps = config.reps;
                    record.wall_seconds = Some(median(&mut times));
                    record.peak_floats = peak;
                    record.feasible = true;
                }
                on_record(&record);
                records.push(record);
            }
        }
    }
    Ok(records)
}

pub fn run_sweep(config: &BenchConfig) -> Result<Vec<BenchRecord>> {
    run_sweep_with(config, |_| {})
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub variant: Variant,
    pub direction: Direction,
    /// Slope of `ln(time)` against `ln(N)`.
    pub exponent: f64,
    pub r_squared: f64,
    pub n_range: (usize, usize),
    pub points: usize,
}

/// Ordinary least squares of `ln y` on `ln x`; returns `(slope, R²)`.
pub fn fit_power_law(points: &[(f64, f64)]) -> Result<(f64, f64)> {
    let mut xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    if xs.len() < 4 || xs[xs.len() - 1] < 16.0 * xs[0] {
        return Err(Error::TooFewPoints(format!(
            "{} distinct N over a {:.1}x span",
            xs.len(),
            xs.last().unwrap_or(&0.0) / xs.first().unwrap_or(&1.0)
        )));
    }
    if points.iter().any(|&(x, y)| x <= 0.0 || y.is_nan() || y <= 0.0) {
        return Err(invalid("power-law fit needs positive N and times"));
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let m = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / m;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / m;
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = logs.iter().map(|p| (p.1 - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r_squared = if syy == 0.0 {
        1.0
    } else {
        (sxy * sxy / (sxx * syy)).clamp(0.0, 1.0)
    };
    Ok((slope, r_squared))
}

fn timed_points(
    records: &[BenchRecord],
    variant: Variant,
    direction: Direction,
) -> Vec<(usize, f64)> {
    records
        .iter()
        .filter(|r| r.variant == variant && r.direction == direction)
        .filter_map(|r| Some((r.n_positions, r.wall_seconds?)))
        .collect()
}

pub fn fit_group(
    records: &[BenchRecord],
    variant: Variant,
    direction: Direction,
) -> Result<ScalingFit> {
    let pts = timed_points(records, variant, direction);
    let (exponent, r_squared) =
        fit_power_law(&pts.iter().map(|&(n, t)| (n as f64, t)).collect::<Vec<_>>())?;
    Ok(ScalingFit {
        variant,
        direction,
        exponent,
        r_squared,
        n_range: (
            pts.iter().map(|p| p.0).min().unwrap_or(0),
            pts.iter().map(|p| p.0).max().unwrap_or(0),
        ),
        points: pts.len(),
    })
}

fn groups(records: &[BenchRecord]) -> Vec<(Variant, Direction)> {
    let mut out: Vec<(Variant, Direction)> = Vec::new();
    for r in records {
        if !out.contains(&(r.variant, r.direction)) {
            out.push((r.variant, r.direction));
        }
    }
    out
}

/// One fit per `(variant, direction)` present in `records`; refuses if any
/// group has fewer than four timed `N` spanning 16x.
pub fn fit_scaling(records: &[BenchRecord]) -> Result<Vec<ScalingFit>> {
    groups(records)
        .into_iter()
        .map(|(v, d)| fit_group(records, v, d))
        .collect()
}

/// Smallest measured `N` from which the linear-order variant is strictly
/// faster than vanilla at that and every larger measured `N`.
pub fn find_crossover(records: &[BenchRecord], direction: Direction) -> Option<usize> {
    let vanilla = timed_points(records, Variant::VanillaSoftmax, direction);
    let linear = timed_points(records, Variant::LinearLinearOrder, direction);
    let mut paired: Vec<(usize, f64, f64)> = vanilla
        .iter()
        .filter_map(|&(n, tv)| linear.iter().find(|p| p.0 == n).map(|&(_, tl)| (n, tv, tl)))
        .collect();
    paired.sort_by_key(|p| p.0);
    let mut crossover = None;
    for &(n, tv, tl) in paired.iter().rev() {
        if tl < tv {
            crossover = Some(n);
        } else {
            break;
        }
    }
    crossover
}

/// Median time is non-decreasing in `N`, except that the two smallest `N`
/// may be inverted once (timer noise).
pub fn is_monotone(records: &[BenchRecord], variant: Variant, direction: Direction) -> bool {
    let mut pts = timed_points(records, variant, direction);
    pts.sort_by_key(|p| p.0);
    pts.windows(2)
        .enumerate()
        .all(|(i, w)| w[1].1 >= w[0].1 || i == 0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontierEntry {
    pub variant: Variant,
    pub direction: Direction,
    pub largest_n: Option<usize>,
}

/// Largest `N` each variant can run within a fixed float budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityFrontier {
    pub budget_floats: u64,
    pub c: usize,
    pub r: usize,
    pub entries: Vec<FrontierEntry>,
}

impl FeasibilityFrontier {
    pub fn compute(
        budget: u64,
        c: usize,
        r: usize,
        variants: &[Variant],
        directions: &[Direction],
    ) -> Self {
        let entries = variants
            .iter()
            .flat_map(|&v| {
                directions.iter().map(move |&d| FrontierEntry {
                    variant: v,
                    direction: d,
                    largest_n: largest_feasible_n(v, d, c, r, budget),
                })
            })
            .collect();
        Self {
            budget_floats: budget,
            c,
            r,
            entries,
        }
    }

    pub fn largest_n(&self, variant: Variant, direction: Direction) -> Option<usize> {
        self.entries
            .iter()
            .find(|e| e.variant == variant && e.direction == direction)
            .and_then(|e| e.largest_n)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub rng_algorithm: String,
    pub records: Vec<BenchRecord>,
    pub fits: Vec<ScalingFit>,
    /// Groups that could not be fitted, with the reason.
    pub fit_errors: Vec<String>,
    pub crossover_forward: Option<usize>,
    pub crossover_backward: Option<usize>,
    pub frontier: FeasibilityFrontier,
}

impl BenchReport {
    pub fn build(config: &BenchConfig, records: Vec<BenchRecord>) -> Self {
        let mut fits = Vec::new();
        let mut fit_errors = Vec::new();
        for (v, d) in groups(&records) {
            match fit_group(&records, v, d) {
                Ok(f) => fits.push(f),
                Err(e) => fit_errors.push(format!("{v}/{d}: {e}")),
            }
        }
        let frontier = FeasibilityFrontier::compute(
            config.float_budget.unwrap_or(DEFAULT_FLOAT_BUDGET),
            config.c,
            config.r,
            &config.variants,
            &config.directions,
        );
        Self {
            config: config.clone(),
            rng_algorithm: RNG_ALGORITHM.to_string(),
            crossover_forward: find_crossover(&records, Direction::Forward),
            crossover_backward: find_crossover(&records, Direction::Backward),
            records,
            fits,
            fit_errors,
            frontier,
        }
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "bench: C={} r={} reps={} seed={} ({} records)",
            self.config.c,
            self.config.r,
            self.config.reps,
            self.config.seed,
            self.records.len()
        );
        let _ = writeln!(
            s,
            "{:<17} {:<9} {:>7} {:>14} {:>14}",
            "variant", "direction", "N", "median_s", "peak_floats"
        );
        for r in &self.records {
            let t = r
                .wall_seconds
                .map_or_else(|| "infeasible".to_string(), |t| format!("{t:.6}"));
            let _ = writeln!(
                s,
                "{:<17} {:<9} {:>7} {:>14} {:>14}",
                r.variant.name(),
                r.direction.name(),
                r.n_positions,
                t,
                r.peak_floats
            );
        }
        for f in &self.fits {
            let _ = writeln!(
                s,
                "fit {}/{}: exponent {:.3} (R² {:.4}) over N {}..{}",
                f.variant, f.direction, f.exponent, f.r_squared, f.n_range.0, f.n_range.1
            );
        }
        for e in &self.fit_errors {
            let _ = writeln!(s, "fit skipped: {e}");
        }
        let show = |c: Option<usize>| c.map_or_else(|| "none".to_string(), |n| n.to_string());
        let _ = writeln!(
            s,
            "crossover N*: forward {}, backward {}",
            show(self.crossover_forward),
            show(self.crossover_backward)
        );
        let _ = writeln!(s, "feasibility at {} floats:", self.frontier.budget_floats);
        for e in &self.frontier.entries {
            let _ = writeln!(
                s,
                "  {}/{}: largest N {}",
                e.variant,
                e.direction,
                show(e.largest_n)
            );
        }
        s
    }
}

/// Output file staged next to its destination and renamed into place on
/// [`commit`](AtomicFile::commit).
pub struct AtomicFile {
    target: PathBuf,
    temp: PathBuf,
    file: Option<File>,
}

impl AtomicFile {
    /// Creates the staging file immediately, so an unwritable destination
    /// fails before any work is done.
    pub fn create(target: impl AsRef<Path>) -> Result<Self> {
        let target = target.as_ref().to_path_buf();
        let name = target
            .file_name()
            .ok_or_else(|| invalid(format!("{} is not a file path", target.display())))?;
        let mut temp_name = std::ffi::OsString::from(".");
        temp_name.push(name);
        temp_name.push(format!(".{}.tmp", std::process::id()));
        let temp = target.with_file_name(temp_name);
        let file = File::create(&temp)?;
        Ok(Self {
            target,
            temp,
            file: Some(file),
        })
    }

    pub fn commit(mut self, contents: &[u8]) -> Result<()> {
        let file = self.file.take().expect("uncommitted file");
        let mut w = BufWriter::new(file);
        w.write_all(contents)?;
        w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        fs::rename(&self.temp, &self.target)?;
        Ok(())
    }
}

impl Drop for AtomicFile {
    fn drop(&mut self) {
        if self.file.is_some() {
            let _ = fs::remove_file(&self.temp);
        }
    }
}

pub const CSV_HEADER: [&str; 9] = [
    "variant",
    "direction",
    "n",
    "c",
    "r",
    "reps",
    "wall_seconds_median",
    "peak_floats",
    "seed",
];

/// One row per record; infeasible records leave `wall_seconds_median` empty.
pub fn records_to_csv(records: &[BenchRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER)?;
    for r in records {
        w.write_record([
            r.variant.name().to_string(),
            r.direction.name().to_string(),
            r.n_positions.to_string(),
            r.n_channels.to_string(),
            r.reduction.to_string(),
            r.reps.to_string(),
            r.wall_seconds
                .map_or_else(String::new, |t| format!("{t:e}")),
            r.peak_floats.to_string(),
            r.seed.to_string(),
        ])?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn report_to_json(report: &BenchReport) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(report)?;
    out.push(b'\n');
    Ok(out)
}

pub fn read_report(path: impl AsRef<Path>) -> Result<BenchReport> {
    let text = fs::read(path)?;
    Ok(serde_json::from_slice(&text)?)
}
