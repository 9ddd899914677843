//! Distances between network nodes, k-nearest-neighbor voting and the
//! cross-validated grid search over neighbor counts and regularization.
//!
//! All distances here live on the columns of a [`Dataset`], so for
//! classification the dataset must hold samples as columns. The sample
//! network is built once over every sample (train and test alike, labels
//! never enter it) and its distance matrix is reused for every fold and
//! every neighbor count.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, FoldAssignment, RawTable, StandardizeOptions, Orientation};
use crate::error::{PcnError, Result};
use crate::partialcorr::{partialcorr_column, residual_scales, NetworkForm, ScaleVectors, SignConvention};
use crate::regpinv::{compute_svd, RegularizationSpec, SvdFactors};
use crate::resolution::ResolutionOperator;

pub const DEFAULT_K_GRID: [usize; 7] = [1, 3, 5, 7, 9, 15, 21];
pub const DEFAULT_FOLD_SEED: u64 = 17;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    StandardEuclidean,
    Resolution,
    PcnExact,
    PcnApprox,
}

impl Metric {
    pub fn needs_reg(self) -> bool {
        !matches!(self, Self::StandardEuclidean)
    }

    pub fn is_pcn(self) -> bool {
        matches!(self, Self::PcnExact | Self::PcnApprox)
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::StandardEuclidean => "standard-euclidean",
            Self::Resolution => "resolution",
            Self::PcnExact => "pcn-exact",
            Self::PcnApprox => "pcn-approx",
        })
    }
}

impl FromStr for Metric {
    type Err = PcnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard-euclidean" | "euclidean" => Ok(Self::StandardEuclidean),
            "resolution" => Ok(Self::Resolution),
            "pcn-exact" | "pcn" => Ok(Self::PcnExact),
            "pcn-approx" => Ok(Self::PcnApprox),
            _ => Err(PcnError::InvalidRegularization(format!("unknown metric {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PcnMode {
    /// `‖pᵢ − pⱼ‖` on the network columns, diagonal zeroed.
    Exact,
    /// Drops the basis-vector corrections: columns of `D_d R D_c`,
    /// `c = s/d`, with the diagonal kept.
    Approx,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceSpec {
    pub metric: Metric,
    /// Required for every metric except `StandardEuclidean`, which ignores it.
    pub reg: Option<RegularizationSpec>,
    pub form: NetworkForm,
    pub sign_convention: SignConvention,
}

impl DistanceSpec {
    pub fn standard() -> Self {
        Self {
            metric: Metric::StandardEuclidean,
            reg: None,
            form: NetworkForm::default(),
            sign_convention: SignConvention::default(),
        }
    }

    pub fn resolution(reg: RegularizationSpec) -> Self {
        Self {
            metric: Metric::Resolution,
            reg: Some(reg),
            ..Self::standard()
        }
    }

    pub fn pcn(reg: RegularizationSpec, form: NetworkForm, mode: PcnMode) -> Self {
        Self {
            metric: match mode {
                PcnMode::Exact => Metric::PcnExact,
                PcnMode::Approx => Metric::PcnApprox,
            },
            reg: Some(reg),
            form,
            sign_convention: SignConvention::default(),
        }
    }

    fn required_reg(&self) -> Result<RegularizationSpec> {
        self.reg.ok_or_else(|| {
            PcnError::InvalidRegularization(format!("metric {} requires a regularization", self.metric))
        })
    }
}

enum ContextKind {
    Euclidean(DMatrix<f64>),
    Resolution(ResolutionOperator),
    Pcn {
        op: ResolutionOperator,
        scales: ScaleVectors,
        mode: PcnMode,
    },
}

/// Everything needed to evaluate one distance between any two nodes.
/// Immutable once built.
pub struct DistanceContext {
    spec: DistanceSpec,
    kind: ContextKind,
}

impl DistanceContext {
    /// `svd`, when given, must be the factorization of `data`; sharing one
    /// across a grid avoids refactoring. It is computed here otherwise.
    pub fn new(data: &Dataset, svd: Option<&Arc<SvdFactors>>, spec: DistanceSpec) -> Result<Self> {
        let kind = match spec.metric {
            Metric::StandardEuclidean => ContextKind::Euclidean(data.columns.clone()),
            metric => {
                let svd = match svd {
                    Some(s) => Arc::clone(s),
                    None => Arc::new(compute_svd(data)?),
                };
                if svd.n() != data.n() {
                    return Err(PcnError::DimensionMismatch {
                        expected: data.n(),
                        found: svd.n(),
                    });
                }
                let op = ResolutionOperator::new(svd, spec.required_reg()?)?;
                if metric == Metric::Resolution {
                    ContextKind::Resolution(op)
                } else {
                    let scales = residual_scales(&op)?;
                    let mode = if metric == Metric::PcnExact {
                        PcnMode::Exact
                    } else {
                        PcnMode::Approx
                    };
                    // Surface VanishingResidual at build time rather than per pair.
                    if spec.form == NetworkForm::Asymmetric {
                        if let Some(i) = (0..op.n()).find(|&i| !scales.degenerate[i] && !(scales.d[i] > 0.0)) {
                            return Err(PcnError::VanishingResidual { index: i, d: scales.d[i] });
                        }
                    }
                    ContextKind::Pcn { op, scales, mode }
                }
            }
        };
        Ok(Self { spec, kind })
    }

    pub fn build(data: &Dataset, spec: DistanceSpec) -> Result<Self> {
        Self::new(data, None, spec)
    }

    pub fn spec(&self) -> &DistanceSpec {
        &self.spec
    }

    pub fn n(&self) -> usize {
        match &self.kind {
            ContextKind::Euclidean(a) => a.ncols(),
            ContextKind::Resolution(op) | ContextKind::Pcn { op, .. } => op.n(),
        }
    }

    fn check(&self, i: usize) -> Result<()> {
        if i >= self.n() {
            return Err(PcnError::IndexOutOfRange { index: i, len: self.n() });
        }
        Ok(())
    }

    pub fn distance(&self, i: usize, j: usize) -> Result<f64> {
        self.check(i)?;
        self.check(j)?;
        match &self.kind {
            ContextKind::Euclidean(a) => Ok(column_distance(a.column(i).as_slice(), a.column(j).as_slice())),
            ContextKind::Resolution(op) => op.distance(i, j),
            ContextKind::Pcn { .. } => {
                let pi = self.embedded_column(i)?;
                let pj = self.embedded_column(j)?;
                Ok(column_distance(pi.as_slice(), pj.as_slice()))
            }
        }
    }

    /// The column whose differences define the pcn distance.
    fn embedded_column(&self, i: usize) -> Result<DVector<f64>> {
        let ContextKind::Pcn { op, scales, mode } = &self.kind else {
            unreachable!("embedded_column on a non-pcn context")
        };
        match mode {
            PcnMode::Exact => partialcorr_column(op, scales, i, self.spec.form, self.spec.sign_convention),
            PcnMode::Approx => Ok(approx_column(op, scales, i, self.spec.form)),
        }
    }

    /// Full `n × n` distance matrix; entries are bitwise equal to
    /// [`DistanceContext::distance`].
    pub fn distance_matrix(&self, n_limit: usize) -> Result<DMatrix<f64>> {
        let n = self.n();
        if n > n_limit {
            return Err(PcnError::MaterializationLimit { n, limit: n_limit });
        }
        let mut out = DMatrix::zeros(n, n);
        match &self.kind {
            ContextKind::Euclidean(a) => fill_pairwise(&mut out, |i, j| {
                column_distance(a.column(i).as_slice(), a.column(j).as_slice())
            }),
            ContextKind::Resolution(op) => {
                for j in 0..n {
                    for i in 0..j {
                        let d = op.distance(i, j)?;
                        out[(i, j)] = d;
                        out[(j, i)] = d;
                    }
                }
            }
            ContextKind::Pcn { .. } => {
                let mut cols = DMatrix::zeros(n, n);
                for i in 0..n {
                    cols.set_column(i, &self.embedded_column(i)?);
                }
                fill_pairwise(&mut out, |i, j| {
                    column_distance(cols.column(i).as_slice(), cols.column(j).as_slice())
                });
            }
        }
        Ok(out)
    }
}

fn fill_pairwise(out: &mut DMatrix<f64>, f: impl Fn(usize, usize) -> f64) {
    let n = out.ncols();
    for j in 0..n {
        for i in 0..j {
            let d = f(i, j);
            out[(i, j)] = d;
            out[(j, i)] = d;
        }
    }
}

fn column_distance(x: &[f64], y: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(a, b)| {
            let t = a - b;
            t * t
        })
        .sum::<f64>()
        .sqrt()
}

fn approx_column(op: &ResolutionOperator, scales: &ScaleVectors, i: usize, form: NetworkForm) -> DVector<f64> {
    let n = op.n();
    let mut p = DVector::zeros(n);
    if scales.degenerate[i] {
        return p;
    }
    match form {
        NetworkForm::Asymmetric => {
            let c = scales.s[i] / scales.d[i];
            for j in 0..n {
                if !scales.degenerate[j] {
                    p[j] = (scales.d[j] * op.entry_unchecked(j, i)) * c;
                }
            }
        }
        NetworkForm::Geometric => {
            let ri = scales.s[i].abs().sqrt();
            for j in 0..n {
                if !scales.degenerate[j] {
                    p[j] = op.entry_unchecked(j, i) * (ri * scales.s[j].abs().sqrt());
                }
            }
        }
    }
    p
}

/// Distance between network columns `i` and `j` in the given mode, computed
/// on the fly from two O(nq) columns.
pub fn pcn_distance(
    op: &ResolutionOperator,
    scales: &ScaleVectors,
    i: usize,
    j: usize,
    form: NetworkForm,
    mode: PcnMode,
) -> Result<f64> {
    op.check_index(i)?;
    op.check_index(j)?;
    let col = |k: usize| match mode {
        PcnMode::Exact => partialcorr_column(op, scales, k, form, SignConvention::default()),
        PcnMode::Approx => {
            if form == NetworkForm::Asymmetric && !scales.degenerate[k] && !(scales.d[k] > 0.0) {
                return Err(PcnError::VanishingResidual { index: k, d: scales.d[k] });
            }
            Ok(approx_column(op, scales, k, form))
        }
    };
    Ok(column_distance(col(i)?.as_slice(), col(j)?.as_slice()))
}

/// Training candidates sorted by `(distance, index)`.
fn ranked(train: &[usize], dist: impl Fn(usize) -> f64) -> Vec<(f64, usize)> {
    let mut r: Vec<(f64, usize)> = train.iter().map(|&t| (dist(t), t)).collect();
    r.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    r
}

/// Majority vote among the first `k` ranked neighbors; ties go to the class
/// of the nearest neighbor among the tied classes.
fn vote(ranked: &[(f64, usize)], class_of: &[usize], k: usize) -> usize {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &(_, t) in &ranked[..k] {
        *counts.entry(class_of[t]).or_default() += 1;
    }
    let top = counts.values().copied().max().unwrap_or(0);
    ranked[..k]
        .iter()
        .map(|&(_, t)| class_of[t])
        .find(|c| counts[c] == top)
        .expect("k >= 1")
}

/// Predicts the class of `query` from the `k` nearest of `train`.
/// `class_of` is indexed by node and only read at training indices.
pub fn knn_classify(
    ctx: &DistanceContext,
    train: &[usize],
    class_of: &[usize],
    query: usize,
    k: usize,
) -> Result<usize> {
    if train.is_empty() {
        return Err(PcnError::EmptyTrainingSet);
    }
    if k == 0 || k > train.len() {
        return Err(PcnError::TooManyNeighbors {
            k,
            available: train.len(),
        });
    }
    let mut dists = Vec::with_capacity(train.len());
    for &t in train {
        dists.push(ctx.distance(query, t)?);
    }
    let lookup: BTreeMap<usize, f64> = train.iter().copied().zip(dists).collect();
    let r = ranked(train, |t| lookup[&t]);
    Ok(vote(&r, class_of, k))
}

/// Maps string labels to dense class ids in sorted label order.
pub fn encode_labels(labels: &[String]) -> (Vec<usize>, Vec<String>) {
    let mut classes: Vec<String> = labels.to_vec();
    classes.sort();
    classes.dedup();
    let ids = labels
        .iter()
        .map(|l| classes.binary_search(l).expect("label present"))
        .collect();
    (ids, classes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvCell {
    pub metric: Metric,
    /// Only meaningful for pcn metrics.
    pub form: Option<NetworkForm>,
    pub k: usize,
    pub reg: Option<RegularizationSpec>,
    pub fold_accuracies: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation over folds.
    pub std: f64,
}

impl CvCell {
    fn strength(&self) -> f64 {
        self.reg.map_or(f64::NEG_INFINITY, |r| r.strength())
    }

    /// Better cell first: higher mean, then smaller k, then stronger
    /// regularization; earlier grid position wins what remains.
    fn rank_cmp(&self, other: &Self) -> Ordering {
        other
            .mean
            .total_cmp(&self.mean)
            .then(self.k.cmp(&other.k))
            .then(other.strength().total_cmp(&self.strength()))
    }
}

/// A grid setting that could not be evaluated, e.g. a truncation that
/// leaves some node perfectly resolved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedSetting {
    pub spec: DistanceSpec,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub dataset: String,
    pub k_folds: usize,
    pub seed: u64,
    pub sign_convention: SignConvention,
    pub cells: Vec<CvCell>,
    pub best: CvCell,
    pub skipped: Vec<SkippedSetting>,
}

impl CvReport {
    /// Best cell among those matching `pred`, same ordering as `best`.
    pub fn best_where(&self, pred: impl Fn(&CvCell) -> bool) -> Option<&CvCell> {
        let mut best: Option<&CvCell> = None;
        for c in self.cells.iter().filter(|c| pred(c)) {
            if best.is_none_or(|b| c.rank_cmp(b) == Ordering::Less) {
                best = Some(c);
            }
        }
        best
    }

    pub fn best_standard(&self) -> Option<&CvCell> {
        self.best_where(|c| c.metric == Metric::StandardEuclidean)
    }

    pub fn best_pcn(&self) -> Option<&CvCell> {
        self.best_where(|c| c.metric.is_pcn())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvGrid {
    pub k_grid: Vec<usize>,
    pub settings: Vec<DistanceSpec>,
}

/// Ridge `10^-3 … 10^3` and ranks `2, 4, 8, …` strictly below the
/// numerical rank (at full rank some node is perfectly resolved).
pub fn default_reg_grid(numerical_rank: usize) -> Vec<RegularizationSpec> {
    let mut grid: Vec<RegularizationSpec> = (-3..=3).map(|e| RegularizationSpec::Ridge(10f64.powi(e))).collect();
    let mut r = 2;
    while r < numerical_rank {
        grid.push(RegularizationSpec::SvdRank(r));
        r *= 2;
    }
    grid
}

/// Cross-validates every `(setting, k)` cell. Settings whose context cannot
/// be built are recorded in `skipped`; at least one cell must survive.
pub fn cross_validate(
    name: &str,
    data: &Dataset,
    folds: &FoldAssignment,
    grid: &CvGrid,
    n_limit: usize,
) -> Result<CvReport> {
    let labels = data.labels.as_ref().ok_or(PcnError::MissingLabels)?;
    if grid.k_grid.is_empty() || grid.settings.is_empty() {
        return Err(PcnError::EmptyGrid);
    }
    if folds.fold_of.len() != data.n() || labels.len() != data.n() {
        return Err(PcnError::DimensionMismatch {
            expected: data.n(),
            found: folds.fold_of.len().min(labels.len()),
        });
    }
    let (class_of, _) = encode_labels(labels);
    let splits: Vec<(Vec<usize>, Vec<usize>)> = (0..folds.k_folds)
        .map(|f| (folds.train_indices(f), folds.test_indices(f)))
        .collect();
    for (train, _) in &splits {
        if train.is_empty() {
            return Err(PcnError::EmptyTrainingSet);
        }
        if let Some(&k) = grid.k_grid.iter().find(|&&k| k == 0 || k > train.len()) {
            return Err(PcnError::TooManyNeighbors {
                k,
                available: train.len(),
            });
        }
    }

    let svd = if grid.settings.iter().any(|s| s.metric.needs_reg()) {
        Some(Arc::new(compute_svd(data)?))
    } else {
        None
    };
    let mut cells = Vec::new();
    let mut skipped = Vec::new();
    for spec in &grid.settings {
        let ctx = DistanceContext::new(data, svd.as_ref(), *spec);
        let dist = match ctx.and_then(|c| c.distance_matrix(n_limit)) {
            Ok(d) => d,
            Err(e @ (PcnError::PerfectResolution { .. }
            | PcnError::VanishingResidual { .. }
            | PcnError::ZeroSingularValueKept { .. }
            | PcnError::InvalidRegularization(_))) => {
                skipped.push(SkippedSetting {
                    spec: *spec,
                    reason: e.to_string(),
                });
                continue;
            }
            Err(e) => return Err(e),
        };
        let mut acc = vec![vec![0.0; splits.len()]; grid.k_grid.len()];
        for (f, (train, test)) in splits.iter().enumerate() {
            let mut correct = vec![0usize; grid.k_grid.len()];
            for &q in test {
                let r = ranked(train, |t| dist[(q, t)]);
                for (ki, &k) in grid.k_grid.iter().enumerate() {
                    if vote(&r, &class_of, k) == class_of[q] {
                        correct[ki] += 1;
                    }
                }
            }
            for ki in 0..grid.k_grid.len() {
                acc[ki][f] = correct[ki] as f64 / test.len().max(1) as f64;
            }
        }
        for (ki, &k) in grid.k_grid.iter().enumerate() {
            let fa = acc[ki].clone();
            let mean = fa.iter().sum::<f64>() / fa.len() as f64;
            let var = fa.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / fa.len() as f64;
            cells.push(CvCell {
                metric: spec.metric,
                form: spec.metric.is_pcn().then_some(spec.form),
                k,
                reg: spec.reg.filter(|_| spec.metric.needs_reg()),
                fold_accuracies: fa,
                mean,
                std: var.sqrt(),
            });
        }
    }
    let mut best: Option<&CvCell> = None;
    for c in &cells {
        if best.is_none_or(|b| c.rank_cmp(b) == Ordering::Less) {
            best = Some(c);
        }
    }
    let best = best.ok_or(PcnError::EmptyGrid)?.clone();
    Ok(CvReport {
        dataset: name.to_string(),
        k_folds: folds.k_folds,
        seed: folds.seed,
        sign_convention: grid.settings[0].sign_convention,
        cells,
        best,
        skipped,
    })
}

/// Settings for the sample-graph classification experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub k_folds: usize,
    pub seed: u64,
    pub k_grid: Vec<usize>,
    /// `None` selects [`default_reg_grid`] for the data's numerical rank.
    pub reg_grid: Option<Vec<RegularizationSpec>>,
    pub forms: Vec<NetworkForm>,
    pub mode: PcnMode,
    pub sign_convention: SignConvention,
    pub standardize: StandardizeOptions,
    pub n_limit: usize,
}

impl Default for ExperimentConfig {
    /// Features are z-scored, samples become columns and are left unscaled;
    /// both network forms are searched.
    fn default() -> Self {
        Self {
            k_folds: 5,
            seed: DEFAULT_FOLD_SEED,
            k_grid: DEFAULT_K_GRID.to_vec(),
            reg_grid: None,
            forms: vec![NetworkForm::Asymmetric, NetworkForm::Geometric],
            mode: PcnMode::Exact,
            sign_convention: SignConvention::default(),
            standardize: StandardizeOptions {
                orientation: Orientation::SamplesAsColumns,
                prestandardize_features: true,
                standardize_columns: false,
            },
            n_limit: crate::DEFAULT_N_LIMIT,
        }
    }
}

/// One line of the accuracy summary, accuracies in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table1Row {
    pub dataset: String,
    pub samples: usize,
    pub features: usize,
    pub acc_knn: f64,
    pub acc_kpcn: f64,
}

impl Table1Row {
    pub const CSV_HEADER: &'static str = "dataset,samples,features,acc_knn,acc_kpcn";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{:.1},{:.1}",
            self.dataset, self.samples, self.features, self.acc_knn, self.acc_kpcn
        )
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub report: CvReport,
    pub row: Table1Row,
}

/// Feature columns that are not constant; constant ones carry no
/// information and vanish under standardization.
fn informative_features(table: &RawTable) -> usize {
    table
        .values
        .column_iter()
        .filter(|c| c.iter().any(|&x| x != c[0]))
        .count()
}

/// Standard k-NN against k-PCN on one labeled table.
pub fn run_experiment(name: &str, table: &RawTable, cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    if table.labels.is_none() {
        return Err(PcnError::MissingLabels);
    }
    let mut opts = cfg.standardize;
    opts.orientation = Orientation::SamplesAsColumns;
    let data = crate::dataset::standardize(table, opts)?;
    let folds = crate::dataset::split_folds(data.n(), cfg.k_folds, cfg.seed)?;
    let regs = match &cfg.reg_grid {
        Some(g) => g.clone(),
        None => default_reg_grid(compute_svd(&data)?.numerical_rank),
    };
    let mut settings = vec![DistanceSpec {
        sign_convention: cfg.sign_convention,
        ..DistanceSpec::standard()
    }];
    for &form in &cfg.forms {
        for &reg in &regs {
            settings.push(DistanceSpec {
                sign_convention: cfg.sign_convention,
                ..DistanceSpec::pcn(reg, form, cfg.mode)
            });
        }
    }
    let grid = CvGrid {
        k_grid: cfg.k_grid.clone(),
        settings,
    };
    let report = cross_validate(name, &data, &folds, &grid, cfg.n_limit)?;
    let acc = |c: Option<&CvCell>| c.map_or(f64::NAN, |c| 100.0 * c.mean);
    let row = Table1Row {
        dataset: name.to_string(),
        samples: table.n_records(),
        features: informative_features(table),
        acc_knn: acc(report.best_standard()),
        acc_kpcn: acc(report.best_pcn()),
    };
    Ok(ExperimentOutcome { report, row })
}
