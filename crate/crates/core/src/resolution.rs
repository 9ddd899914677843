//! The (regularized) resolution matrix `R = A_reg† A = V diag(f) Vᵀ` as a
//! factored operator.
//!
//! Entries are always evaluated as `Rᵢⱼ = Σₖ wᵢₖ wⱼₖ` with `W = V diag(√f)`
//! summed in increasing `k`, so columns computed on the fly, the cached
//! diagonal and the materialized matrix agree bit for bit, and the
//! materialized matrix is exactly symmetric.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::dataset::Dataset;
use crate::error::{PcnError, Result};
use crate::regpinv::{check_truncation, filter_factors, RegularizationSpec, SvdFactors};

#[derive(Debug, Clone)]
pub struct ResolutionOperator {
    svd: Arc<SvdFactors>,
    reg: RegularizationSpec,
    filters: Vec<f64>,
    /// `1 − fₖ`, evaluated without cancellation for ridge.
    complements: Vec<f64>,
    /// Wᵀ (q×n): column `i` is row `i` of `V diag(√f)`.
    wt: DMatrix<f64>,
    diag: DVector<f64>,
    one_minus_diag: DVector<f64>,
}

pub fn build_resolution(svd: Arc<SvdFactors>, reg: RegularizationSpec) -> Result<ResolutionOperator> {
    ResolutionOperator::new(svd, reg)
}

impl ResolutionOperator {
    pub fn new(svd: Arc<SvdFactors>, reg: RegularizationSpec) -> Result<Self> {
        let filters = filter_factors(&svd, &reg)?;
        check_truncation(&svd, &reg)?;
        let complements: Vec<f64> = svd
            .sigma
            .iter()
            .zip(&filters)
            .map(|(&s, &f)| match reg {
                RegularizationSpec::Ridge(l) if f > 0.0 => l / (s * s + l),
                _ => 1.0 - f,
            })
            .collect();

        let (n, q) = (svd.n(), svd.q());
        let roots: Vec<f64> = filters.iter().map(|f| f.sqrt()).collect();
        let mut wt = DMatrix::zeros(q, n);
        for i in 0..n {
            for k in 0..q {
                wt[(k, i)] = svd.v[(i, k)] * roots[k];
            }
        }

        let mut diag = DVector::zeros(n);
        let mut one_minus_diag = DVector::zeros(n);
        for i in 0..n {
            let w = wt.column(i);
            diag[i] = dot_in_order(w.as_slice(), w.as_slice());
            // 1 − Rᵢᵢ = (1 − ‖v⁽ⁱ⁾‖²) + Σₖ (1 − fₖ) Vᵢₖ²
            let mut row_norm2 = 0.0;
            let mut shrunk = 0.0;
            for k in 0..q {
                let vik = svd.v[(i, k)];
                row_norm2 += vik * vik;
                shrunk += complements[k] * vik * vik;
            }
            one_minus_diag[i] = (1.0 - row_norm2).max(0.0) + shrunk;
        }

        Ok(Self {
            svd,
            reg,
            filters,
            complements,
            wt,
            diag,
            one_minus_diag,
        })
    }

    pub fn n(&self) -> usize {
        self.svd.n()
    }

    pub fn svd(&self) -> &SvdFactors {
        &self.svd
    }

    pub fn shared_svd(&self) -> Arc<SvdFactors> {
        Arc::clone(&self.svd)
    }

    pub fn reg(&self) -> RegularizationSpec {
        self.reg
    }

    pub fn filters(&self) -> &[f64] {
        &self.filters
    }

    pub(crate) fn complements(&self) -> &[f64] {
        &self.complements
    }

    /// Cached `Rᵢᵢ = Σₖ fₖ Vᵢₖ²`.
    pub fn diagonal(&self) -> &DVector<f64> {
        &self.diag
    }

    /// `1 − Rᵢᵢ`, accumulated from the attenuated part of the spectrum.
    pub fn one_minus_diagonal(&self) -> &DVector<f64> {
        &self.one_minus_diag
    }

    pub fn trace(&self) -> f64 {
        self.diag.sum()
    }

    pub(crate) fn check_index(&self, i: usize) -> Result<()> {
        if i >= self.n() {
            return Err(PcnError::IndexOutOfRange { index: i, len: self.n() });
        }
        Ok(())
    }

    #[inline]
    pub(crate) fn entry_unchecked(&self, i: usize, j: usize) -> f64 {
        dot_in_order(self.wt.column(i).as_slice(), self.wt.column(j).as_slice())
    }

    pub(crate) fn column_unchecked(&self, i: usize) -> DVector<f64> {
        let wi = self.wt.column(i);
        DVector::from_iterator(
            self.n(),
            (0..self.n()).map(|j| dot_in_order(self.wt.column(j).as_slice(), wi.as_slice())),
        )
    }

    /// `rᵢ = V diag(f) Vᵀ eᵢ`, O(nq).
    pub fn column(&self, i: usize) -> Result<DVector<f64>> {
        self.check_index(i)?;
        Ok(self.column_unchecked(i))
    }

    pub fn materialize(&self, n_limit: usize) -> Result<DMatrix<f64>> {
        let n = self.n();
        if n > n_limit {
            return Err(PcnError::MaterializationLimit { n, limit: n_limit });
        }
        let mut r = DMatrix::zeros(n, n);
        for i in 0..n {
            r.set_column(i, &self.column_unchecked(i));
        }
        Ok(r)
    }

    /// `‖rᵢ − rⱼ‖ = ‖diag(f) Vᵀ(eᵢ − eⱼ)‖`; V has orthonormal columns.
    pub fn distance(&self, i: usize, j: usize) -> Result<f64> {
        self.check_index(i)?;
        self.check_index(j)?;
        let v = &self.svd.v;
        Ok(self
            .filters
            .iter()
            .enumerate()
            .map(|(k, f)| {
                let t = f * (v[(i, k)] - v[(j, k)]);
                t * t
            })
            .sum::<f64>()
            .sqrt())
    }

    /// Rows `I_r v⁽ⁱ⁾` of the kept right singular vectors. Euclidean
    /// distances between rows equal [`Self::distance`].
    pub fn spectral_embedding(&self) -> Result<DMatrix<f64>> {
        if !self.reg.is_truncation() {
            return Err(PcnError::EmbeddingNeedsTruncation(self.reg.to_string()));
        }
        let kept: Vec<usize> = (0..self.filters.len()).filter(|&k| self.filters[k] == 1.0).collect();
        Ok(DMatrix::from_fn(self.n(), kept.len(), |i, c| self.svd.v[(i, kept[c])]))
    }

    /// Rows of `V diag(√f)` for any regularization: a factor of R itself
    /// (row inner products are `Rᵢⱼ`). Coincides with
    /// [`Self::spectral_embedding`] (up to the dropped zero columns) under
    /// truncation.
    pub fn filtered_embedding(&self) -> DMatrix<f64> {
        self.wt.transpose()
    }
}

#[inline]
fn dot_in_order(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Max-abs deviation between `R` from the data SVD and `C_reg† C` built by
/// dense linear algebra on the covariance `C = AᵀA/m`. Only the truncation
/// case is expected to agree; ridge parameters act on σ² in one and on
/// σ²/m in the other.
pub fn covariance_resolution_check(data: &Dataset, reg: RegularizationSpec, n_limit: usize) -> Result<f64> {
    let n = data.n();
    if n > n_limit {
        return Err(PcnError::MaterializationLimit { n, limit: n_limit });
    }
    let a = &data.columns;
    let svd = Arc::new(crate::regpinv::compute_svd(data)?);
    let r = ResolutionOperator::new(svd, reg)?.materialize(n_limit)?;

    let c = a.tr_mul(a) / data.m() as f64;
    let rc = match reg {
        RegularizationSpec::Ridge(l) => {
            let ctc = c.tr_mul(&c);
            let lhs = &ctc + DMatrix::identity(n, n) * l;
            lhs.lu().solve(&ctc).ok_or(PcnError::SingularSystem(0))?
        }
        _ => {
            // C is symmetric PSD: its eigenvalues are σ(A)²/m, so truncate
            // the eigendecomposition instead of taking a second SVD.
            let eig = c.clone().symmetric_eigen();
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&x, &y| eig.eigenvalues[y].total_cmp(&eig.eigenvalues[x]));
            let keep = match reg {
                RegularizationSpec::SvdRank(rk) => rk,
                RegularizationSpec::SvdThreshold(t) => {
                    let tc = t * t / data.m() as f64;
                    order.iter().filter(|&&k| eig.eigenvalues[k] > tc).count()
                }
                RegularizationSpec::Ridge(_) => unreachable!(),
            };
            let mut pinv = DMatrix::zeros(n, n);
            for &k in order.iter().take(keep) {
                let w = eig.eigenvectors.column(k);
                pinv += w * w.transpose() / eig.eigenvalues[k];
            }
            pinv * &c
        }
    };
    Ok((rc - r).amax())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regpinv::compute_svd_matrix;
    use crate::synthetic::{gaussian_matrix, low_rank_matrix, orthonormal_columns};
    use proptest::prelude::*;

    fn op(a: &DMatrix<f64>, reg: RegularizationSpec) -> ResolutionOperator {
        ResolutionOperator::new(Arc::new(compute_svd_matrix(a).unwrap()), reg).unwrap()
    }

    /// Dense oracle without any SVD: with `W_r` the top-r eigenvectors of
    /// `AᵀA` and `B = A W_r`, `A_r = B W_rᵀ` and `A_r† A = W_r (BᵀB)⁻¹ Bᵀ A`.
    fn dense_truncated_resolution(a: &DMatrix<f64>, r: usize) -> DMatrix<f64> {
        let eig = a.tr_mul(a).symmetric_eigen();
        let mut order: Vec<usize> = (0..a.ncols()).collect();
        order.sort_by(|&x, &y| eig.eigenvalues[y].total_cmp(&eig.eigenvalues[x]));
        let w = DMatrix::from_columns(&order[..r].iter().map(|&k| eig.eigenvectors.column(k)).collect::<Vec<_>>());
        let b = a * &w;
        let btb_inv_bt = b.tr_mul(&b).cholesky().unwrap().solve(&b.transpose());
        w * btb_inv_bt * a
    }

    #[test]
    fn orthonormal_columns_identity_and_half() {
        let a = orthonormal_columns(10, 4, 1);
        let r0 = op(&a, RegularizationSpec::Ridge(0.0));
        assert!((r0.materialize(100).unwrap() - DMatrix::<f64>::identity(4, 4)).amax() < 1e-12);
        assert!(r0.diagonal().iter().all(|d| (d - 1.0).abs() < 1e-12));
        let mut e2 = DVector::zeros(4);
        e2[2] = 1.0;
        assert!((r0.column(2).unwrap() - e2).amax() < 1e-12);
        let r1 = op(&a, RegularizationSpec::Ridge(1.0));
        assert!((r1.materialize(100).unwrap() - DMatrix::<f64>::identity(4, 4) * 0.5).amax() < 1e-12);
    }

    #[test]
    fn trace_equals_filter_sum() {
        let a = gaussian_matrix(10, 30, 7);
        let r = op(&a, RegularizationSpec::SvdRank(10));
        assert!((r.trace() - 10.0).abs() < 1e-8);
        let r = op(&a, RegularizationSpec::Ridge(3.0));
        assert!((r.trace() - r.filters().iter().sum::<f64>()).abs() < 1e-8);
    }

    #[test]
    fn duplicated_columns_projector() {
        let col = DVector::from_vec(vec![1.0, -2.0, 0.5, 0.5]);
        let a = DMatrix::from_columns(&[col.clone(), col]);
        let r = op(&a, RegularizationSpec::Ridge(0.0)).materialize(10).unwrap();
        assert!((r - DMatrix::from_element(2, 2, 0.5)).amax() < 1e-12);
        let o = op(&a, RegularizationSpec::Ridge(0.0));
        assert!(o.distance(0, 1).unwrap() < 1e-12);
    }

    #[test]
    fn columns_diag_and_materialization_agree() {
        let a = gaussian_matrix(12, 20, 5);
        let o = op(&a, RegularizationSpec::Ridge(0.7));
        let r = o.materialize(100).unwrap();
        assert_eq!(r, r.transpose());
        for i in 0..20 {
            let c = o.column(i).unwrap();
            assert_eq!(c, r.column(i).into_owned());
            assert_eq!(c[i], o.diagonal()[i]);
            assert!((o.one_minus_diagonal()[i] - (1.0 - o.diagonal()[i])).abs() < 1e-12);
        }
        // Against the plain product V diag(f) Vᵀ.
        let svd = o.svd();
        let dense = &svd.v * DMatrix::from_diagonal(&DVector::from_vec(o.filters().to_vec())) * svd.v.transpose();
        assert!((dense - &r).amax() < 1e-12);
        assert!(matches!(o.column(20), Err(PcnError::IndexOutOfRange { .. })));
        assert!(matches!(o.materialize(19), Err(PcnError::MaterializationLimit { .. })));
    }

    #[test]
    fn truncated_resolution_matches_dense_oracle() {
        let a = gaussian_matrix(15, 9, 3);
        for r in [2, 5, 9] {
            let o = op(&a, RegularizationSpec::SvdRank(r));
            let got = o.materialize(100).unwrap();
            let err = (&got - dense_truncated_resolution(&a, r)).amax();
            assert!(err < 1e-10, "rank {r}: {err:e}");
            assert!((&got * &got - &got).amax() < 1e-8);
        }
    }

    #[test]
    fn diagonal_vanishes_for_huge_ridge() {
        let a = gaussian_matrix(8, 5, 2);
        let o = op(&a, RegularizationSpec::Ridge(1e12));
        assert!(o.diagonal().amax() < 1e-9);
    }

    #[test]
    fn distances_match_materialized_columns() {
        let a = gaussian_matrix(7, 16, 8);
        let o = op(&a, RegularizationSpec::Ridge(0.3));
        let r = o.materialize(100).unwrap();
        for i in 0..16 {
            assert_eq!(o.distance(i, i).unwrap(), 0.0);
            for j in 0..16 {
                let want = (r.column(i) - r.column(j)).norm();
                assert!((o.distance(i, j).unwrap() - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn embedding_rows_reproduce_distances_and_diagonal() {
        let a = gaussian_matrix(10, 25, 4);
        let o = op(&a, RegularizationSpec::SvdRank(4));
        let emb = o.spectral_embedding().unwrap();
        assert_eq!(emb.shape(), (25, 4));
        for i in 0..25 {
            assert!((emb.row(i).norm_squared() - o.diagonal()[i]).abs() < 1e-12);
            for j in 0..25 {
                let d = (emb.row(i) - emb.row(j)).norm();
                assert!((d - o.distance(i, j).unwrap()).abs() < 1e-12);
            }
        }
        let ridge = op(&a, RegularizationSpec::Ridge(1.0));
        assert!(matches!(ridge.spectral_embedding(), Err(PcnError::EmbeddingNeedsTruncation(_))));
        let w = ridge.filtered_embedding();
        let r = ridge.materialize(100).unwrap();
        assert!((&w * w.transpose() - r).amax() < 1e-12);
    }

    #[test]
    fn covariance_check() {
        let ds = Dataset::from_matrix(orthonormal_columns(9, 4, 3));
        assert!(covariance_resolution_check(&ds, RegularizationSpec::Ridge(0.0), 100).unwrap() < 1e-12);
        let ds = Dataset::from_matrix(low_rank_matrix(12, 10, 4, 6));
        assert!(covariance_resolution_check(&ds, RegularizationSpec::SvdRank(4), 100).unwrap() < 1e-8);
        // Reported only: parameterizations differ.
        assert!(covariance_resolution_check(&ds, RegularizationSpec::Ridge(1.0), 100).unwrap().is_finite());
        assert!(covariance_resolution_check(&ds, RegularizationSpec::SvdRank(4), 5).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn diag_bounded_and_monotone_in_ridge(m in 2usize..15, n in 2usize..15, seed in any::<u64>(), l in 0.0f64..10.0) {
            let svd = Arc::new(compute_svd_matrix(&gaussian_matrix(m, n, seed)).unwrap());
            let lo = ResolutionOperator::new(svd.clone(), RegularizationSpec::Ridge(l)).unwrap();
            let hi = ResolutionOperator::new(svd, RegularizationSpec::Ridge(l * 2.0 + 0.1)).unwrap();
            for i in 0..n {
                let d = lo.diagonal()[i];
                prop_assert!((-1e-15..=1.0 + 1e-12).contains(&d));
                prop_assert!(hi.diagonal()[i] <= d + 1e-15);
            }
            prop_assert!((lo.trace() - lo.filters().iter().sum::<f64>()).abs() < 1e-8);
        }
    }
}
