//! Tabular ingestion, column standardization and cross-validation folds.
//!
//! A [`Dataset`] always stores the matrix the network engine consumes: each
//! column is one graph node. For variable networks the nodes are the CSV
//! columns; for the sample-graph k-NN experiment the table is transposed so
//! that every sample becomes a column.

use std::collections::BTreeSet;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{PcnError, Result};

/// A parsed CSV table before any scaling. Rows are records.
#[derive(Debug, Clone)]
pub struct RawTable {
    pub values: DMatrix<f64>,
    pub column_names: Vec<String>,
    /// One label per record, when a label column was requested.
    pub labels: Option<Vec<String>>,
    pub label_source: Option<String>,
}

impl RawTable {
    pub fn n_records(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.values.ncols()
    }
}

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    pub label_column: Option<String>,
    /// Skip records containing `?` or empty cells instead of failing.
    pub drop_incomplete_rows: bool,
    /// One-hot encode feature columns holding non-numeric strings.
    pub one_hot: bool,
}

pub fn load_csv(path: impl AsRef<Path>, label_column: Option<&str>) -> Result<RawTable> {
    let opts = LoadOptions {
        label_column: label_column.map(str::to_owned),
        ..LoadOptions::default()
    };
    load_csv_with(path, &opts)
}

pub fn load_csv_with(path: impl AsRef<Path>, opts: &LoadOptions) -> Result<RawTable> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| PcnError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_csv(&text, opts)
}

fn is_missing(cell: &str) -> bool {
    cell.is_empty() || cell == "?"
}

/// Parses CSV text with a header row. See [`load_csv_with`].
pub fn parse_csv(text: &str, opts: &LoadOptions) -> Result<RawTable> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());

    let header: Vec<String> = reader
        .headers()
        .map_err(|e| PcnError::Csv(e.to_string()))?
        .iter()
        .map(str::to_owned)
        .collect();
    if header.is_empty() {
        return Err(PcnError::EmptyTable);
    }
    let label_idx = match &opts.label_column {
        Some(name) => Some(
            header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| PcnError::LabelColumnNotFound(name.clone()))?,
        ),
        None => None,
    };

    let mut records: Vec<Vec<String>> = Vec::new();
    for (r, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| PcnError::Csv(e.to_string()))?;
        let row = r + 1;
        if rec.len() != header.len() {
            return Err(PcnError::RaggedRow {
                row,
                found: rec.len(),
                expected: header.len(),
            });
        }
        let cells: Vec<String> = rec.iter().map(str::to_owned).collect();
        if let Some(c) = cells.iter().position(|c| is_missing(c)) {
            if opts.drop_incomplete_rows {
                continue;
            }
            return Err(PcnError::MissingValue {
                row,
                column: header[c].clone(),
            });
        }
        records.push(cells);
    }
    if records.is_empty() {
        return Err(PcnError::EmptyTable);
    }

    // Each feature column expands to one numeric column, or to one column
    // per category when one-hot encoding is enabled.
    let mut columns: Vec<Vec<f64>> = Vec::new();
    let mut names: Vec<String> = Vec::new();
    for (c, name) in header.iter().enumerate() {
        if Some(c) == label_idx {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, usize> = records
            .iter()
            .enumerate()
            .map(|(r, rec)| rec[c].parse::<f64>().map_err(|_| r))
            .collect();
        match parsed {
            Ok(col) => {
                columns.push(col);
                names.push(name.clone());
            }
            Err(_) if opts.one_hot => {
                let cats: BTreeSet<&str> = records.iter().map(|rec| rec[c].as_str()).collect();
                for cat in cats {
                    columns.push(
                        records
                            .iter()
                            .map(|rec| if rec[c] == cat { 1.0 } else { 0.0 })
                            .collect(),
                    );
                    names.push(format!("{name}={cat}"));
                }
            }
            Err(r) => {
                return Err(PcnError::NonNumeric {
                    row: r + 1,
                    column: name.clone(),
                    value: records[r][c].clone(),
                })
            }
        }
    }
    if columns.is_empty() {
        return Err(PcnError::EmptyTable);
    }

    let m = records.len();
    let values = DMatrix::from_fn(m, columns.len(), |i, j| columns[j][i]);
    let labels = label_idx.map(|l| records.iter().map(|rec| rec[l].clone()).collect());
    Ok(RawTable {
        values,
        column_names: names,
        labels,
        label_source: label_idx.map(|l| header[l].clone()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Orientation {
    /// Records are samples; CSV columns become the graph nodes.
    #[default]
    SamplesAsRows,
    /// Records become the graph nodes (sample graph), features are the rows.
    SamplesAsColumns,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct StandardizeOptions {
    pub orientation: Orientation,
    /// Only used with `SamplesAsColumns`: z-score each feature across
    /// samples before transposing.
    pub prestandardize_features: bool,
    /// Center and scale every node column of the engine matrix.
    pub standardize_columns: bool,
}

impl Default for StandardizeOptions {
    fn default() -> Self {
        Self {
            orientation: Orientation::SamplesAsRows,
            prestandardize_features: true,
            standardize_columns: true,
        }
    }
}

impl StandardizeOptions {
    pub fn with_orientation(orientation: Orientation) -> Self {
        Self {
            orientation,
            ..Self::default()
        }
    }
}

/// Engine input: `m` samples per column, `n` columns (graph nodes).
#[derive(Debug, Clone)]
pub struct Dataset {
    pub columns: DMatrix<f64>,
    /// One label per column (node), present for sample graphs.
    pub labels: Option<Vec<String>>,
    pub degenerate: Vec<bool>,
    pub names: Vec<String>,
}

impl Dataset {
    pub fn m(&self) -> usize {
        self.columns.nrows()
    }

    pub fn n(&self) -> usize {
        self.columns.ncols()
    }

    /// Wraps a matrix that is already in engine orientation, without scaling.
    pub fn from_matrix(columns: DMatrix<f64>) -> Self {
        let n = columns.ncols();
        let degenerate = columns.column_iter().map(|c| c.iter().all(|&x| x == 0.0)).collect();
        Self {
            columns,
            labels: None,
            degenerate,
            names: (0..n).map(|j| format!("v{j}")).collect(),
        }
    }

    pub fn n_degenerate(&self) -> usize {
        self.degenerate.iter().filter(|&&d| d).count()
    }
}

/// Centers each column and scales it to squared norm `m` (population std).
/// Constant columns become zero and are flagged in the returned mask.
pub fn standardize_columns_in_place(a: &mut DMatrix<f64>) -> Vec<bool> {
    let m = a.nrows() as f64;
    let mut degenerate = Vec::with_capacity(a.ncols());
    for mut col in a.column_iter_mut() {
        let first = col[0];
        if col.iter().all(|&x| x == first) {
            col.fill(0.0);
            degenerate.push(true);
            continue;
        }
        let mean = col.sum() / m;
        col.add_scalar_mut(-mean);
        let norm = col.norm();
        if norm == 0.0 {
            degenerate.push(true);
            continue;
        }
        col *= m.sqrt() / norm;
        degenerate.push(false);
    }
    degenerate
}

pub fn standardize(table: &RawTable, opts: StandardizeOptions) -> Result<Dataset> {
    if table.values.nrows() == 0 || table.values.ncols() == 0 {
        return Err(PcnError::EmptyTable);
    }
    match opts.orientation {
        Orientation::SamplesAsRows => {
            let mut columns = table.values.clone();
            let degenerate = if opts.standardize_columns {
                standardize_columns_in_place(&mut columns)
            } else {
                columns.column_iter().map(|c| c.iter().all(|&x| x == 0.0)).collect()
            };
            Ok(Dataset {
                columns,
                labels: None,
                degenerate,
                names: table.column_names.clone(),
            })
        }
        Orientation::SamplesAsColumns => {
            let mut features = table.values.clone();
            if opts.prestandardize_features {
                standardize_columns_in_place(&mut features);
            }
            let mut columns = features.transpose();
            let degenerate = if opts.standardize_columns {
                standardize_columns_in_place(&mut columns)
            } else {
                columns.column_iter().map(|c| c.iter().all(|&x| x == 0.0)).collect()
            };
            let n = columns.ncols();
            Ok(Dataset {
                columns,
                labels: table.labels.clone(),
                degenerate,
                names: (0..n).map(|j| format!("s{j}")).collect(),
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct FoldAssignment {
    pub fold_of: Vec<usize>,
    pub k_folds: usize,
    pub seed: u64,
}

impl FoldAssignment {
    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] == fold).collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] != fold).collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k_folds];
        for &f in &self.fold_of {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Shuffles `0..n` with a seeded ChaCha stream and deals the permutation
/// round-robin into `k_folds` folds.
pub fn split_folds(n: usize, k_folds: usize, seed: u64) -> Result<FoldAssignment> {
    if k_folds < 2 || k_folds > n {
        return Err(PcnError::FoldsOutOfRange { n, k_folds });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold_of = vec![0; n];
    for (pos, &idx) in order.iter().enumerate() {
        fold_of[idx] = pos % k_folds;
    }
    Ok(FoldAssignment {
        fold_of,
        k_folds,
        seed,
    })
}
