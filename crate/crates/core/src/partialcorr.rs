//! Neighborhood-regression coefficients and partial correlation networks
//! read off the resolution operator.
//!
//! For node `i`, the ridge regression of `aᵢ` on all other columns has
//! coefficients `βᵢ = sᵢ r₋ᵢ` with `sᵢ = 1/(1 − Rᵢᵢ)` and `r₋ᵢ` the `i`-th
//! column of `R` with its own entry zeroed. Stacking them gives
//! `B = R₋d D_s`, and the two network forms are
//!
//! * asymmetric: `P = D_d R₋d D_s D_d⁻¹`, `dᵢ` the residual norm of node `i`;
//! * geometric: `Pᵢⱼ = sign(Bᵢⱼ) √(Bᵢⱼ Bⱼᵢ)`, zero when the two
//!   coefficients disagree in sign.
//!
//! Materialized networks are built column by column through
//! [`partialcorr_column`], so both paths share one arithmetic sequence.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{PcnError, Result};
use crate::regpinv::RegularizationSpec;
use crate::resolution::ResolutionOperator;

/// Smallest admissible `1 − Rᵢᵢ`.
pub const PERFECT_RESOLUTION_TOL: f64 = 1e-8;

/// Columns with `‖aᵢ‖` below this fraction of the largest column norm are
/// treated as degenerate (constant before standardization).
const DEGENERATE_REL_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NetworkForm {
    #[default]
    Asymmetric,
    Geometric,
}

/// Sign applied to network entries. `AsWritten` uses the matrix forms
/// literally; its geometric form equals `−Θᵢⱼ/√(ΘᵢᵢΘⱼⱼ)` for the precision
/// matrix `Θ`. `Negated` flips every entry, for readings that put a minus
/// between coefficients and partial correlations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SignConvention {
    #[default]
    AsWritten,
    Negated,
}

impl SignConvention {
    fn factor(self) -> f64 {
        match self {
            Self::AsWritten => 1.0,
            Self::Negated => -1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleVectors {
    /// Residual norms `dᵢ = ‖A βᵢ − aᵢ‖`.
    pub d: DVector<f64>,
    /// `sᵢ = 1/(1 − Rᵢᵢ)`.
    pub s: DVector<f64>,
    /// Zero data columns; their edges are reported as zero.
    pub degenerate: Vec<bool>,
}

fn perfect_resolution_check(op: &ResolutionOperator, i: usize) -> Result<()> {
    let gap = op.one_minus_diagonal()[i];
    if gap < PERFECT_RESOLUTION_TOL {
        return Err(PcnError::PerfectResolution {
            index: i,
            r_ii: op.diagonal()[i],
        });
    }
    Ok(())
}

/// `βᵢ = r₋ᵢ / (1 − Rᵢᵢ)`, the ridge (or truncated) neighborhood regression
/// coefficients of node `i`.
pub fn beta_from_resolution(op: &ResolutionOperator, i: usize) -> Result<DVector<f64>> {
    op.check_index(i)?;
    perfect_resolution_check(op, i)?;
    let s = 1.0 / op.one_minus_diagonal()[i];
    let mut beta = op.column_unchecked(i) * s;
    beta[i] = 0.0;
    Ok(beta)
}

/// Dense direct solver for the per-node ridge problem
/// `min ‖A₋ᵢ β − aᵢ‖² + λ‖β‖²`, used as an independent check of
/// [`beta_from_resolution`]. Works in whichever of the n×n or m×m Gram
/// forms is smaller; O(min(m,n)³) per node.
pub struct NeighborhoodOracle<'a> {
    a: &'a DMatrix<f64>,
    lambda: f64,
    gram: DMatrix<f64>,
    wide: bool,
}

impl<'a> NeighborhoodOracle<'a> {
    pub fn new(data: &'a Dataset, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(PcnError::InvalidRegularization(format!("ridge parameter {lambda}")));
        }
        let a = &data.columns;
        let wide = a.nrows() < a.ncols();
        let gram = if wide { a * a.transpose() } else { a.tr_mul(a) };
        Ok(Self { a, lambda, gram, wide })
    }

    pub fn solve(&self, i: usize) -> Result<DVector<f64>> {
        let n = self.a.ncols();
        if i >= n {
            return Err(PcnError::IndexOutOfRange { index: i, len: n });
        }
        let ai = self.a.column(i);
        if self.wide {
            // β = A₋ᵢᵀ (A₋ᵢ A₋ᵢᵀ + λI)⁻¹ aᵢ
            let m = self.a.nrows();
            let mut k = self.gram.clone();
            k -= &ai * ai.transpose();
            for d in 0..m {
                k[(d, d)] += self.lambda;
            }
            let y = checked_cholesky(k, i)?.solve(&ai.into_owned());
            let mut beta = self.a.tr_mul(&y);
            beta[i] = 0.0;
            Ok(beta)
        } else {
            // (A₋ᵢᵀ A₋ᵢ + λI) β = A₋ᵢᵀ aᵢ, with row/column i decoupled.
            let mut h = self.gram.clone();
            let mut rhs = self.gram.column(i).into_owned();
            h.row_mut(i).fill(0.0);
            h.column_mut(i).fill(0.0);
            rhs[i] = 0.0;
            for d in 0..n {
                h[(d, d)] += self.lambda;
            }
            h[(i, i)] = 1.0;
            let beta = checked_cholesky(h, i)?.solve(&rhs);
            Ok(beta)
        }
    }
}

/// Cholesky that also rejects numerically singular systems, where rounding
/// leaves a tiny positive pivot instead of failing outright.
fn checked_cholesky(k: DMatrix<f64>, i: usize) -> Result<Cholesky<f64, Dyn>> {
    let scale = k.diagonal().amax();
    let tol = k.nrows() as f64 * f64::EPSILON * scale;
    let chol = k.cholesky().ok_or(PcnError::SingularSystem(i))?;
    if chol.l_dirty().diagonal().iter().any(|&p| p * p <= tol) {
        return Err(PcnError::SingularSystem(i));
    }
    Ok(chol)
}

pub fn neighborhood_oracle(data: &Dataset, lambda: f64, i: usize) -> Result<DVector<f64>> {
    NeighborhoodOracle::new(data, lambda)?.solve(i)
}

/// `sᵢ = 1/(1 − Rᵢᵢ)` and `dᵢ = |sᵢ| ‖A(A†aᵢ − eᵢ)‖`, the latter evaluated
/// in the spectral basis as `|sᵢ| ‖diag(σₖ(1 − fₖ)) v⁽ⁱ⁾‖`.
pub fn residual_scales(op: &ResolutionOperator) -> Result<ScaleVectors> {
    let svd = op.svd();
    let (n, q) = (op.n(), svd.q());
    let comp = op.complements();

    let col_norms: Vec<f64> = (0..n)
        .map(|i| {
            (0..q)
                .map(|k| {
                    let t = svd.sigma[k] * svd.v[(i, k)];
                    t * t
                })
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let max_norm = col_norms.iter().cloned().fold(0.0, f64::max);
    let degenerate: Vec<bool> = col_norms.iter().map(|&c| c <= DEGENERATE_REL_TOL * max_norm).collect();

    let mut d = DVector::zeros(n);
    let mut s = DVector::zeros(n);
    for i in 0..n {
        perfect_resolution_check(op, i)?;
        s[i] = 1.0 / op.one_minus_diagonal()[i];
        if degenerate[i] {
            continue;
        }
        let res: f64 = (0..q)
            .map(|k| {
                let t = svd.sigma[k] * comp[k] * svd.v[(i, k)];
                t * t
            })
            .sum::<f64>()
            .sqrt();
        d[i] = s[i].abs() * res;
    }
    Ok(ScaleVectors { d, s, degenerate })
}

/// Column `i` of the network, O(nq) and without any n×n storage.
pub fn partialcorr_column(
    op: &ResolutionOperator,
    scales: &ScaleVectors,
    i: usize,
    form: NetworkForm,
    convention: SignConvention,
) -> Result<DVector<f64>> {
    op.check_index(i)?;
    if scales.d.len() != op.n() {
        return Err(PcnError::DimensionMismatch {
            expected: op.n(),
            found: scales.d.len(),
        });
    }
    let n = op.n();
    let mut p = DVector::zeros(n);
    if scales.degenerate[i] {
        return Ok(p);
    }
    let sign = convention.factor();
    match form {
        NetworkForm::Asymmetric => {
            let di = scales.d[i];
            if !(di > 0.0) {
                return Err(PcnError::VanishingResidual { index: i, d: di });
            }
            // pᵢ = sᵢ/dᵢ · D_d r₋ᵢ
            let c = scales.s[i] / di;
            for j in 0..n {
                if j != i && !scales.degenerate[j] {
                    p[j] = sign * ((scales.d[j] * op.entry_unchecked(j, i)) * c);
                }
            }
        }
        NetworkForm::Geometric => {
            let si = scales.s[i];
            for j in 0..n {
                if j == i || scales.degenerate[j] {
                    continue;
                }
                let sj = scales.s[j];
                if (si > 0.0) != (sj > 0.0) {
                    continue;
                }
                let mag = op.entry_unchecked(j, i) * (si * sj).sqrt();
                p[j] = sign * if si > 0.0 { mag } else { -mag };
            }
        }
    }
    Ok(p)
}

#[derive(Debug, Clone)]
pub struct PartialCorrNetwork {
    pub form: NetworkForm,
    pub sign_convention: SignConvention,
    pub reg: RegularizationSpec,
    pub scales: ScaleVectors,
    /// Column `i` holds `pᵢ`.
    pub weights: DMatrix<f64>,
}

fn materialize_network(
    op: &ResolutionOperator,
    scales: ScaleVectors,
    form: NetworkForm,
    convention: SignConvention,
    n_limit: usize,
) -> Result<PartialCorrNetwork> {
    let n = op.n();
    if n > n_limit {
        return Err(PcnError::MaterializationLimit { n, limit: n_limit });
    }
    let mut weights = DMatrix::zeros(n, n);
    for i in 0..n {
        weights.set_column(i, &partialcorr_column(op, &scales, i, form, convention)?);
    }
    Ok(PartialCorrNetwork {
        form,
        sign_convention: convention,
        reg: op.reg(),
        scales,
        weights,
    })
}

/// `P = D_d R₋d D_s D_d⁻¹`.
pub fn network_asymmetric(
    op: &ResolutionOperator,
    scales: ScaleVectors,
    convention: SignConvention,
    n_limit: usize,
) -> Result<PartialCorrNetwork> {
    materialize_network(op, scales, NetworkForm::Asymmetric, convention, n_limit)
}

/// `P = sign(1sᵀ) ⊙ (ssᵀ)^{∘½} ⊙ R₋d` with the sign test applied.
pub fn network_geometric(
    op: &ResolutionOperator,
    scales: ScaleVectors,
    convention: SignConvention,
    n_limit: usize,
) -> Result<PartialCorrNetwork> {
    materialize_network(op, scales, NetworkForm::Geometric, convention, n_limit)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    pub weight: f64,
}

impl PartialCorrNetwork {
    pub fn n(&self) -> usize {
        self.weights.nrows()
    }

    /// Edges with `|Pᵢⱼ| ≥ threshold` (zeros included at threshold 0),
    /// column by column. The geometric form lists each pair once (`i < j`);
    /// the asymmetric form lists every ordered pair.
    pub fn edges(&self, threshold: f64) -> Vec<Edge> {
        let mut out = Vec::new();
        for j in 0..self.n() {
            push_column_edges(&mut out, self.weights.column(j).as_slice(), j, self.form, threshold);
        }
        out
    }
}

fn push_column_edges(out: &mut Vec<Edge>, col: &[f64], j: usize, form: NetworkForm, threshold: f64) {
    let end = match form {
        NetworkForm::Geometric => j,
        NetworkForm::Asymmetric => col.len(),
    };
    for (i, &w) in col.iter().enumerate().take(end) {
        if i != j && w.abs() >= threshold {
            out.push(Edge { i, j, weight: w });
        }
    }
}

/// Same edges as [`PartialCorrNetwork::edges`] without materializing the
/// network: `sink` receives each column's edges in order.
pub fn stream_edges(
    op: &ResolutionOperator,
    scales: &ScaleVectors,
    form: NetworkForm,
    convention: SignConvention,
    threshold: f64,
    mut sink: impl FnMut(&[Edge]) -> Result<()>,
) -> Result<()> {
    let mut buf = Vec::new();
    for j in 0..op.n() {
        let col = partialcorr_column(op, scales, j, form, convention)?;
        buf.clear();
        push_column_edges(&mut buf, col.as_slice(), j, form, threshold);
        sink(&buf)?;
    }
    Ok(())
}
