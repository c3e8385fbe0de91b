//! Per-state joint attribute distributions by iterative proportional fitting.
//!
//! Tables are dense, row-major (last axis fastest). The generic routines work
//! on any number of axes; the taxonomy helpers fix the five-attribute layout.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::taxonomy::{age_band_to_group, joint_dims, Attribute, Category, Tags};

pub const DEFAULT_TOL: f64 = 1e-4;
pub const DEFAULT_MAX_ITER: usize = 1000;
pub const DEFAULT_GAP_THRESHOLD: f64 = 0.05;
/// Pseudo-count added to every cell of a pool-derived seed.
pub const SEED_SMOOTHING: f64 = 0.1;

/// Target masses per category for each axis of one state's table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalSet {
    pub state: String,
    pub axis_names: Vec<String>,
    pub category_labels: Vec<Vec<String>>,
    pub targets: Vec<Vec<f64>>,
}

impl MarginalSet {
    /// Generic marginals with numbered axes and categories.
    pub fn new(state: impl Into<String>, targets: Vec<Vec<f64>>) -> Self {
        MarginalSet {
            state: state.into(),
            axis_names: (0..targets.len()).map(|i| format!("axis{i}")).collect(),
            category_labels: targets
                .iter()
                .map(|t| (0..t.len()).map(|c| c.to_string()).collect())
                .collect(),
            targets,
        }
    }

    /// Marginals over the five taxonomy attributes, in sweep order.
    pub fn for_taxonomy(state: impl Into<String>, targets: Vec<Vec<f64>>) -> Self {
        MarginalSet {
            state: state.into(),
            axis_names: Attribute::ALL.iter().map(|a| a.name().to_string()).collect(),
            category_labels: Attribute::ALL
                .iter()
                .map(|a| a.labels().into_iter().map(String::from).collect())
                .collect(),
            targets,
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        self.targets.iter().map(Vec::len).collect()
    }

    pub fn total(&self) -> f64 {
        self.targets.first().map(|t| t.iter().sum()).unwrap_or(0.0)
    }

    /// Rescales every axis to the first axis's total mass.
    ///
    /// Sources report on different scales (counts vs. proportions).
    pub fn normalized(&self) -> MarginalSet {
        let total = self.total();
        let mut out = self.clone();
        for t in &mut out.targets {
            let s: f64 = t.iter().sum();
            if s > 0.0 {
                for v in t.iter_mut() {
                    *v *= total / s;
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointTable {
    pub state: String,
    pub dims: Vec<usize>,
    pub cells: Vec<f64>,
    #[serde(default)]
    pub iterations: usize,
    #[serde(default)]
    pub converged: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gaps: Option<GapReport>,
}

impl JointTable {
    pub fn new(state: impl Into<String>, dims: Vec<usize>, cells: Vec<f64>) -> Self {
        assert_eq!(dims.iter().product::<usize>(), cells.len(), "cell count must match dims");
        JointTable { state: state.into(), dims, cells, iterations: 0, converged: false, gaps: None }
    }

    pub fn uniform(state: impl Into<String>, dims: Vec<usize>) -> Self {
        let n = dims.iter().product();
        JointTable::new(state, dims, vec![1.0; n])
    }

    pub fn total(&self) -> f64 {
        self.cells.iter().sum()
    }

    fn strides(&self) -> Vec<usize> {
        strides(&self.dims)
    }

    pub fn flat_index(&self, coords: &[usize]) -> usize {
        coords.iter().zip(self.strides()).map(|(c, s)| c * s).sum()
    }

    pub fn coords(&self, mut flat: usize) -> Vec<usize> {
        let mut out = vec![0; self.dims.len()];
        for (axis, s) in self.strides().iter().enumerate() {
            out[axis] = flat / s;
            flat %= s;
        }
        out
    }

    pub fn get(&self, coords: &[usize]) -> f64 {
        self.cells[self.flat_index(coords)]
    }

    /// Sum of cells per category along one axis.
    pub fn marginal(&self, axis: usize) -> Vec<f64> {
        let stride = self.strides()[axis];
        let n = self.dims[axis];
        let mut out = vec![0.0; n];
        for (i, v) in self.cells.iter().enumerate() {
            out[(i / stride) % n] += v;
        }
        out
    }

    /// Cells normalized to sum to one.
    pub fn probabilities(&self) -> Vec<f64> {
        let t = self.total();
        if t > 0.0 {
            self.cells.iter().map(|c| c / t).collect()
        } else {
            vec![0.0; self.cells.len()]
        }
    }

    fn scale_axis(&mut self, axis: usize, factors: &[f64]) {
        let stride = self.strides()[axis];
        let n = self.dims[axis];
        for (i, v) in self.cells.iter_mut().enumerate() {
            *v *= factors[(i / stride) % n];
        }
    }
}

fn strides(dims: &[usize]) -> Vec<usize> {
    let mut s = vec![1; dims.len()];
    for i in (0..dims.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * dims[i + 1];
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IpfOptions {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for IpfOptions {
    fn default() -> Self {
        IpfOptions { max_iter: DEFAULT_MAX_ITER, tol: DEFAULT_TOL }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum IpfError {
    #[error("seed dims {seed:?} do not match marginal dims {marginals:?}")]
    ShapeMismatch { seed: Vec<usize>, marginals: Vec<usize> },
    #[error("{what} contains a negative or non-finite value at index {index}")]
    InvalidValue { what: &'static str, index: usize },
    #[error("axis {axis} total {total} differs from common total {expected}")]
    InconsistentTotals { axis: usize, total: f64, expected: f64 },
    #[error("marginal totals are zero")]
    ZeroMass,
    #[error("no seed support for positive targets: {0:?}")]
    UnsupportedTargets(Vec<UnsupportedCell>),
}

/// A (axis, category) slice with positive target mass but an all-zero seed slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnsupportedCell {
    pub axis: String,
    pub category: String,
    pub target: f64,
}

/// Relative tolerance for the agreement of per-axis target totals.
const TOTAL_TOLERANCE: f64 = 1e-6;

/// Fits `seed` to the marginals by cyclic proportional scaling, one axis at a
/// time in axis order.
///
/// Stops when the largest relative marginal gap is below `tol`, when the gap
/// changes by less than `tol / 10` over a sweep, or after `max_iter` sweeps.
/// The last iterate is returned in every case, with `converged` set accordingly.
pub fn ipf_fit(seed: &JointTable, marginals: &MarginalSet, opts: IpfOptions) -> Result<JointTable, IpfError> {
    let dims = marginals.dims();
    if seed.dims != dims {
        return Err(IpfError::ShapeMismatch { seed: seed.dims.clone(), marginals: dims });
    }
    if let Some(index) = seed.cells.iter().position(|v| !v.is_finite() || *v < 0.0) {
        return Err(IpfError::InvalidValue { what: "seed", index });
    }
    let flat: Vec<f64> = marginals.targets.iter().flatten().copied().collect();
    if let Some(index) = flat.iter().position(|v| !v.is_finite() || *v < 0.0) {
        return Err(IpfError::InvalidValue { what: "marginals", index });
    }
    let expected = marginals.total();
    if expected <= 0.0 {
        return Err(IpfError::ZeroMass);
    }
    for (axis, t) in marginals.targets.iter().enumerate() {
        let total: f64 = t.iter().sum();
        if ((total - expected) / expected).abs() > TOTAL_TOLERANCE {
            return Err(IpfError::InconsistentTotals { axis, total, expected });
        }
    }
    // common total exactly, so every sweep conserves mass
    let targets = marginals.normalized().targets;

    let mut unsupported = Vec::new();
    for (axis, t) in targets.iter().enumerate() {
        let support = seed.marginal(axis);
        for (c, (&target, &have)) in t.iter().zip(&support).enumerate() {
            if target > 0.0 && have <= 0.0 {
                unsupported.push(UnsupportedCell {
                    axis: marginals.axis_names[axis].clone(),
                    category: marginals.category_labels[axis][c].clone(),
                    target,
                });
            }
        }
    }
    if !unsupported.is_empty() {
        return Err(IpfError::UnsupportedTargets(unsupported));
    }

    let mut table = JointTable { state: marginals.state.clone(), gaps: None, ..seed.clone() };
    table.converged = false;
    let mut prev_gap: Option<f64> = None;
    let mut sweeps = 0;
    while sweeps < opts.max_iter {
        sweeps += 1;
        for (axis, t) in targets.iter().enumerate() {
            let current = table.marginal(axis);
            let factors: Vec<f64> = t
                .iter()
                .zip(&current)
                .map(|(&target, &have)| if have > 0.0 { target / have } else { 1.0 })
                .collect();
            table.scale_axis(axis, &factors);
        }
        let gap = max_relative_gap(&table, &targets);
        if gap < opts.tol {
            table.converged = true;
            break;
        }
        if prev_gap.is_some_and(|p| (p - gap).abs() < opts.tol / 10.0) {
            break;
        }
        prev_gap = Some(gap);
    }
    table.iterations = sweeps;
    table.gaps = Some(gap_report(&table, marginals, DEFAULT_GAP_THRESHOLD));
    Ok(table)
}

fn relative_gap(estimate: f64, target: f64) -> Gap {
    if target > 0.0 {
        Gap::Relative((estimate - target).abs() / target)
    } else if estimate > 0.0 {
        Gap::Unbounded
    } else {
        Gap::Relative(0.0)
    }
}

fn max_relative_gap(table: &JointTable, targets: &[Vec<f64>]) -> f64 {
    let mut worst: f64 = 0.0;
    for (axis, t) in targets.iter().enumerate() {
        for (&est, &target) in table.marginal(axis).iter().zip(t) {
            worst = worst.max(match relative_gap(est, target) {
                Gap::Relative(g) => g,
                Gap::Unbounded => f64::INFINITY,
            });
        }
    }
    worst
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gap {
    Relative(f64),
    /// Target mass is zero but the estimate is positive.
    Unbounded,
}

impl Gap {
    pub fn within(&self, threshold: f64) -> bool {
        matches!(self, Gap::Relative(g) if *g < threshold)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapEntry {
    pub state: String,
    pub attribute: String,
    pub category: String,
    pub target: f64,
    pub estimate: f64,
    pub gap: Gap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub threshold: f64,
    pub entries: Vec<GapEntry>,
    pub within_threshold: usize,
    pub total: usize,
}

impl GapReport {
    pub fn over_threshold(&self) -> impl Iterator<Item = &GapEntry> {
        self.entries.iter().filter(move |e| !e.gap.within(self.threshold))
    }

    /// Merges per-state reports, e.g. for a national count.
    pub fn combine<'a>(reports: impl IntoIterator<Item = &'a GapReport>, threshold: f64) -> GapReport {
        let entries: Vec<GapEntry> = reports.into_iter().flat_map(|r| r.entries.clone()).collect();
        let within_threshold = entries.iter().filter(|e| e.gap.within(threshold)).count();
        GapReport { threshold, total: entries.len(), within_threshold, entries }
    }
}

/// Relative gap of every estimated marginal against its (normalized) target.
pub fn gap_report(fitted: &JointTable, marginals: &MarginalSet, threshold: f64) -> GapReport {
    let norm = marginals.normalized();
    let mut entries = Vec::new();
    for (axis, t) in norm.targets.iter().enumerate() {
        let est = fitted.marginal(axis);
        for (c, (&target, &estimate)) in t.iter().zip(&est).enumerate() {
            entries.push(GapEntry {
                state: marginals.state.clone(),
                attribute: marginals.axis_names[axis].clone(),
                category: marginals.category_labels[axis][c].clone(),
                target,
                estimate,
                gap: relative_gap(estimate, target),
            });
        }
    }
    let within_threshold = entries.iter().filter(|e| e.gap.within(threshold)).count();
    GapReport { threshold, total: entries.len(), within_threshold, entries }
}

/// How the IPF starting table is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeedKind {
    #[default]
    Pool,
    Uniform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedTable {
    pub table: JointTable,
    pub warning: Option<String>,
}

/// Empirical joint counts of fully tagged users plus a pseudo-count of
/// `epsilon` in every cell. Incomplete tags are skipped.
pub fn seed_from_pool<'a>(tags: impl IntoIterator<Item = &'a Tags>, state: &str, epsilon: f64) -> SeedTable {
    let mut table = JointTable::new(state, joint_dims(), vec![0.0; joint_dims().iter().product()]);
    let mut n = 0usize;
    for t in tags {
        if let Some(cell) = t.cell() {
            let i = table.flat_index(&cell);
            table.cells[i] += 1.0;
            n += 1;
        }
    }
    if n == 0 {
        return SeedTable {
            table: JointTable::uniform(state, joint_dims()),
            warning: Some(format!("{state}: no fully tagged users in pool, using uniform seed")),
        };
    }
    for c in &mut table.cells {
        *c += epsilon;
    }
    SeedTable { table, warning: None }
}

#[derive(Debug, Error)]
pub enum MarginalLoadError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Row { path: String, line: usize, message: String },
    #[error("state {state:?} is missing marginals for {attribute}")]
    MissingAttribute { state: String, attribute: Attribute },
}

#[derive(Debug, Deserialize)]
struct MarginalRow {
    state: String,
    attribute: String,
    category: String,
    mass: f64,
}

/// Reads every `*.csv` in `dir` (columns `state,attribute,category,mass`) into
/// per-state taxonomy marginals. Census age bands fold into the three age groups.
pub fn load_marginals_dir(dir: &Path) -> Result<BTreeMap<String, MarginalSet>, MarginalLoadError> {
    let io = |path: &Path, source| MarginalLoadError::Io { path: path.display().to_string(), source };
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| io(dir, e))?
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();

    let mut masses: BTreeMap<String, BTreeMap<Attribute, Vec<f64>>> = BTreeMap::new();
    let mut seen: BTreeSet<(String, Attribute, String)> = BTreeSet::new();
    for path in files {
        let p = path.display().to_string();
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(&path).map_err(|e| {
            MarginalLoadError::Row { path: p.clone(), line: 0, message: e.to_string() }
        })?;
        for (i, row) in reader.deserialize::<MarginalRow>().enumerate() {
            let line = i + 2;
            let bad = |message: String| MarginalLoadError::Row { path: p.clone(), line, message };
            let row = row.map_err(|e| bad(e.to_string()))?;
            let attr = Attribute::parse(&row.attribute)
                .ok_or_else(|| bad(format!("unknown attribute {:?}", row.attribute)))?;
            let idx = match attr {
                Attribute::Age => age_band_to_group(&row.category).map(|g| g.index()),
                _ => attr.category_index(&row.category),
            }
            .ok_or_else(|| bad(format!("unknown {attr} category {:?}", row.category)))?;
            if !row.mass.is_finite() || row.mass < 0.0 {
                return Err(bad(format!("invalid mass {}", row.mass)));
            }
            let key = (row.state.clone(), attr, row.category.to_ascii_lowercase());
            if !seen.insert(key) {
                return Err(bad(format!("duplicate row for {} {attr} {:?}", row.state, row.category)));
            }
            masses
                .entry(row.state)
                .or_default()
                .entry(attr)
                .or_insert_with(|| vec![0.0; attr.cardinality()])[idx] += row.mass;
        }
    }

    let mut out = BTreeMap::new();
    for (state, by_attr) in masses {
        let mut targets = Vec::with_capacity(5);
        for attr in Attribute::ALL {
            let v = by_attr
                .get(&attr)
                .cloned()
                .ok_or_else(|| MarginalLoadError::MissingAttribute { state: state.clone(), attribute: attr })?;
            targets.push(v);
        }
        let set = MarginalSet::for_taxonomy(state.clone(), targets).normalized();
        out.insert(state, set);
    }
    Ok(out)
}

/// Outcome of fitting one state.
#[derive(Debug)]
pub struct StateFit {
    pub state: String,
    pub result: Result<JointTable, IpfError>,
    pub warning: Option<String>,
}

/// Fits every state independently (in parallel); output is ordered by state.
pub fn fit_states(
    marginals: &BTreeMap<String, MarginalSet>,
    pool_tags: &[Tags],
    seed_kind: SeedKind,
    opts: IpfOptions,
) -> Vec<StateFit> {
    marginals
        .par_iter()
        .map(|(state, m)| {
            let seed = match seed_kind {
                SeedKind::Pool => seed_from_pool(pool_tags, state, SEED_SMOOTHING),
                SeedKind::Uniform => SeedTable { table: JointTable::uniform(state.as_str(), joint_dims()), warning: None },
            };
            StateFit { state: state.clone(), result: ipf_fit(&seed.table, m, opts), warning: seed.warning }
        })
        .collect()
}
