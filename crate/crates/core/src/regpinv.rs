//! Thin SVD of the data matrix and regularized pseudoinverses kept in
//! factored form.
//!
//! Nothing here ever forms an n×n or m×m inverse: every operator is applied
//! as `V diag(g) Uᵀ x` (pseudoinverse) or `U diag(σ) Vᵀ y` (forward map).

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{PcnError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SvdFactors {
    /// m×q, orthonormal columns.
    pub u: DMatrix<f64>,
    /// q values, nonincreasing.
    pub sigma: DVector<f64>,
    /// n×q, orthonormal columns.
    pub v: DMatrix<f64>,
    pub numerical_rank: usize,
}

impl SvdFactors {
    pub fn m(&self) -> usize {
        self.u.nrows()
    }

    pub fn n(&self) -> usize {
        self.v.nrows()
    }

    pub fn q(&self) -> usize {
        self.sigma.len()
    }

    /// Singular values at or below `q·ε·σ₁` are treated as zero.
    pub fn rank_tolerance(&self) -> f64 {
        let s1 = if self.q() > 0 { self.sigma[0] } else { 0.0 };
        self.q() as f64 * f64::EPSILON * s1
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        let mut us = self.u.clone();
        for (k, mut col) in us.column_iter_mut().enumerate() {
            col *= self.sigma[k];
        }
        us * self.v.transpose()
    }

    fn from_parts(u: DMatrix<f64>, sigma: DVector<f64>, v: DMatrix<f64>) -> Self {
        let mut f = Self {
            u,
            sigma,
            v,
            numerical_rank: 0,
        };
        let tol = f.rank_tolerance();
        f.numerical_rank = f.sigma.iter().filter(|&&s| s > tol).count();
        f
    }
}

pub fn compute_svd(data: &Dataset) -> Result<SvdFactors> {
    compute_svd_matrix(&data.columns)
}

/// Thin SVD with singular values sorted nonincreasing and each right vector
/// signed so that its largest-magnitude entry is positive.
pub fn compute_svd_matrix(a: &DMatrix<f64>) -> Result<SvdFactors> {
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return Err(PcnError::EmptyTable);
    }
    // faer's divide-and-conquer SVD; nalgebra's Golub–Kahan iteration can
    // return inaccurate factors for exactly rank-deficient input, which every
    // centered wide dataset is.
    let fa = faer::Mat::<f64>::from_fn(m, n, |i, j| a[(i, j)]);
    let svd = fa.thin_svd().map_err(|_| PcnError::SvdNonConvergence)?;
    let q = m.min(n);
    let (fu, fv, fs) = (svd.U(), svd.V(), svd.S().column_vector());
    let u_raw = DMatrix::from_fn(m, q, |i, k| fu[(i, k)]);
    let v_raw = DMatrix::from_fn(n, q, |j, k| fv[(j, k)]);
    let s_raw = DVector::from_fn(q, |k, _| fs[k]);

    let mut order: Vec<usize> = (0..q).collect();
    order.sort_by(|&x, &y| {
        s_raw[y]
            .partial_cmp(&s_raw[x])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(x.cmp(&y))
    });

    let mut u = DMatrix::zeros(m, q);
    let mut v = DMatrix::zeros(n, q);
    let mut sigma = DVector::zeros(q);
    for (k, &src) in order.iter().enumerate() {
        let vk = v_raw.column(src).into_owned();
        let mut pivot = 0;
        for i in 1..n {
            if vk[i].abs() > vk[pivot].abs() {
                pivot = i;
            }
        }
        let sign = if vk[pivot] < 0.0 { -1.0 } else { 1.0 };
        v.set_column(k, &(vk * sign));
        u.set_column(k, &(u_raw.column(src) * sign));
        sigma[k] = s_raw[src].max(0.0);
    }
    Ok(SvdFactors::from_parts(u, sigma, v))
}

/// How the spectrum of the data matrix is attenuated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "kebab-case")]
pub enum RegularizationSpec {
    Ridge(f64),
    SvdRank(usize),
    SvdThreshold(f64),
}

impl RegularizationSpec {
    pub fn validate(&self, q: usize) -> Result<()> {
        match *self {
            Self::Ridge(l) if !(l >= 0.0 && l.is_finite()) => Err(PcnError::InvalidRegularization(
                format!("ridge parameter must be finite and >= 0, got {l}"),
            )),
            Self::SvdRank(r) if r == 0 || r > q => Err(PcnError::InvalidRegularization(format!(
                "rank must satisfy 1 <= r <= {q}, got {r}"
            ))),
            Self::SvdThreshold(t) if !(t > 0.0 && t.is_finite()) => Err(
                PcnError::InvalidRegularization(format!("threshold must be > 0, got {t}")),
            ),
            _ => Ok(()),
        }
    }

    pub fn is_truncation(&self) -> bool {
        !matches!(self, Self::Ridge(_))
    }

    /// Larger means more shrinkage; used for tie-breaking in grid search.
    pub(crate) fn strength(&self) -> f64 {
        match *self {
            Self::Ridge(l) => l,
            Self::SvdRank(r) => -(r as f64),
            Self::SvdThreshold(t) => t,
        }
    }

    fn kept(&self, k: usize, sigma: f64) -> bool {
        match *self {
            Self::SvdRank(r) => k < r,
            Self::SvdThreshold(t) => sigma > t,
            Self::Ridge(_) => true,
        }
    }
}

impl fmt::Display for RegularizationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Ridge(l) => write!(f, "ridge:{l}"),
            Self::SvdRank(r) => write!(f, "rank:{r}"),
            Self::SvdThreshold(t) => write!(f, "threshold:{t}"),
        }
    }
}

impl FromStr for RegularizationSpec {
    type Err = PcnError;

    /// Parses `ridge:0.1`, `rank:8` or `threshold:1e-3`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || PcnError::InvalidRegularization(format!("cannot parse {s:?}"));
        let (kind, value) = s.split_once(':').ok_or_else(bad)?;
        match kind.trim() {
            "ridge" => value.trim().parse().map(Self::Ridge).map_err(|_| bad()),
            "rank" => value.trim().parse().map(Self::SvdRank).map_err(|_| bad()),
            "threshold" => value.trim().parse().map(Self::SvdThreshold).map_err(|_| bad()),
            _ => Err(bad()),
        }
    }
}

/// Truncation may not keep a numerically-zero singular value.
pub(crate) fn check_truncation(svd: &SvdFactors, reg: &RegularizationSpec) -> Result<()> {
    if !reg.is_truncation() {
        return Ok(());
    }
    let tol = svd.rank_tolerance();
    for (k, &s) in svd.sigma.iter().enumerate() {
        if reg.kept(k, s) && s <= tol {
            return Err(PcnError::ZeroSingularValueKept { index: k, value: s });
        }
    }
    Ok(())
}

/// Resolution filter factors fₖ ∈ [0, 1]: σ²/(σ²+λ) for ridge, 0/1 for
/// truncation. With λ = 0, numerically-zero singular values get fₖ = 0.
pub fn filter_factors(svd: &SvdFactors, reg: &RegularizationSpec) -> Result<Vec<f64>> {
    reg.validate(svd.q())?;
    let tol = svd.rank_tolerance();
    Ok(svd
        .sigma
        .iter()
        .enumerate()
        .map(|(k, &s)| match *reg {
            RegularizationSpec::Ridge(l) => {
                if s <= tol && l == 0.0 {
                    0.0
                } else {
                    let s2 = s * s;
                    s2 / (s2 + l)
                }
            }
            _ => {
                if reg.kept(k, s) {
                    1.0
                } else {
                    0.0
                }
            }
        })
        .collect())
}

/// Pseudoinverse gains gₖ: σ/(σ²+λ) for ridge, 1/σ on kept components.
pub fn pinv_gains(svd: &SvdFactors, reg: &RegularizationSpec) -> Result<Vec<f64>> {
    reg.validate(svd.q())?;
    check_truncation(svd, reg)?;
    let tol = svd.rank_tolerance();
    Ok(svd
        .sigma
        .iter()
        .enumerate()
        .map(|(k, &s)| match *reg {
            RegularizationSpec::Ridge(l) => {
                if s <= tol && l == 0.0 {
                    0.0
                } else {
                    s / (s * s + l)
                }
            }
            _ => {
                if reg.kept(k, s) {
                    1.0 / s
                } else {
                    0.0
                }
            }
        })
        .collect())
}

/// `A_reg† x = V diag(g) Uᵀ x`.
pub fn apply_pinv(svd: &SvdFactors, reg: &RegularizationSpec, x: &DVector<f64>) -> Result<DVector<f64>> {
    if x.len() != svd.m() {
        return Err(PcnError::DimensionMismatch {
            expected: svd.m(),
            found: x.len(),
        });
    }
    let gains = pinv_gains(svd, reg)?;
    let mut coeffs = svd.u.tr_mul(x);
    for (c, g) in coeffs.iter_mut().zip(&gains) {
        *c *= g;
    }
    Ok(&svd.v * coeffs)
}

/// Forward map `A y = U diag(σ) Vᵀ y`, used to evaluate `A(A†aᵢ) − aᵢ`
/// without the dense data matrix.
pub fn apply_forward(svd: &SvdFactors, y: &DVector<f64>) -> Result<DVector<f64>> {
    if y.len() != svd.n() {
        return Err(PcnError::DimensionMismatch {
            expected: svd.n(),
            found: y.len(),
        });
    }
    let mut coeffs = svd.v.tr_mul(y);
    for (c, s) in coeffs.iter_mut().zip(svd.sigma.iter()) {
        *c *= s;
    }
    Ok(&svd.u * coeffs)
}

const SVD_MAGIC: &[u8; 8] = b"PCNSVD\0\0";
const FILTER_MAGIC: &[u8; 8] = b"PCNFILT\0";
const CACHE_VERSION: u32 = 1;

fn write_block(w: &mut impl Write, values: impl Iterator<Item = f64>) -> std::io::Result<()> {
    for x in values {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn row_major(m: &DMatrix<f64>) -> impl Iterator<Item = f64> + '_ {
    (0..m.nrows()).flat_map(move |i| (0..m.ncols()).map(move |j| m[(i, j)]))
}

/// Binary cache: magic, version (u32), m, n, q (u64), then row-major
/// little-endian binary64 blocks for U (m×q), σ (q) and V (n×q). An optional
/// filter-factor block (magic + q values) follows for factored operators.
pub fn write_svd_cache(w: &mut impl Write, svd: &SvdFactors, filters: Option<&[f64]>) -> std::io::Result<()> {
    w.write_all(SVD_MAGIC)?;
    w.write_all(&CACHE_VERSION.to_le_bytes())?;
    for d in [svd.m(), svd.n(), svd.q()] {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    write_block(w, row_major(&svd.u))?;
    write_block(w, svd.sigma.iter().copied())?;
    write_block(w, row_major(&svd.v))?;
    if let Some(f) = filters {
        w.write_all(FILTER_MAGIC)?;
        write_block(w, f.iter().copied())?;
    }
    Ok(())
}

pub fn read_svd_cache(r: &mut impl Read) -> Result<(SvdFactors, Option<Vec<f64>>)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| PcnError::BadCache(e.to_string()))?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(8)? != SVD_MAGIC {
        return Err(PcnError::BadCache("bad magic".into()));
    }
    let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
    if version != CACHE_VERSION {
        return Err(PcnError::BadCache(format!("unsupported version {version}")));
    }
    let m = cur.u64()? as usize;
    let n = cur.u64()? as usize;
    let q = cur.u64()? as usize;
    if q != m.min(n) {
        return Err(PcnError::BadCache(format!("q = {q} inconsistent with {m}x{n}")));
    }
    let u = DMatrix::from_row_slice(m, q, &cur.f64s(m * q)?);
    let sigma = DVector::from_vec(cur.f64s(q)?);
    let v = DMatrix::from_row_slice(n, q, &cur.f64s(n * q)?);
    let filters = if cur.remaining() == 0 {
        None
    } else {
        if cur.take(8)? != FILTER_MAGIC {
            return Err(PcnError::BadCache("bad filter block".into()));
        }
        Some(cur.f64s(q)?)
    };
    if cur.remaining() != 0 {
        return Err(PcnError::BadCache("trailing bytes".into()));
    }
    Ok((SvdFactors::from_parts(u, sigma, v), filters))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        if self.remaining() < len {
            return Err(PcnError::BadCache("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, count: usize) -> Result<Vec<f64>> {
        let raw = self.take(count.checked_mul(8).ok_or_else(|| PcnError::BadCache("size overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{gaussian_matrix, low_rank_matrix};
    use proptest::prelude::*;

    #[test]
    fn identity_and_diagonal_spectra() {
        let svd = compute_svd_matrix(&DMatrix::identity(2, 2)).unwrap();
        assert_eq!(svd.sigma.as_slice(), [1.0, 1.0]);
        let svd = compute_svd_matrix(&DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 3.0]))).unwrap();
        assert!((svd.sigma[0] - 3.0).abs() < 1e-15 && (svd.sigma[1] - 1.0).abs() < 1e-15);
        assert_eq!(svd.numerical_rank, 2);
    }

    #[test]
    fn random_wide_reconstruction() {
        let a = gaussian_matrix(20, 50, 3);
        let svd = compute_svd_matrix(&a).unwrap();
        assert_eq!(svd.q(), 20);
        assert!((svd.reconstruct() - &a).norm() <= 1e-8 * a.norm());
        let eye = DMatrix::<f64>::identity(20, 20);
        assert!((svd.u.tr_mul(&svd.u) - &eye).amax() < 1e-8);
        assert!((svd.v.tr_mul(&svd.v) - &eye).amax() < 1e-8);
        assert!(svd.sigma.iter().zip(svd.sigma.iter().skip(1)).all(|(a, b)| a >= b));
        for col in svd.v.column_iter() {
            let pivot = col.iamax();
            assert!(col[pivot] > 0.0);
        }
    }

    #[test]
    fn rank_deficient_numerical_rank() {
        let a = low_rank_matrix(30, 12, 5, 4);
        let svd = compute_svd_matrix(&a).unwrap();
        assert_eq!(svd.numerical_rank, 5);
    }

    #[test]
    fn filter_factor_examples() {
        let svd = compute_svd_matrix(&DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 1.0, 0.0]))).unwrap();
        let f = filter_factors(&svd, &RegularizationSpec::Ridge(1.0)).unwrap();
        assert!((f[0] - 0.9).abs() < 1e-15);
        assert!((f[1] - 0.5).abs() < 1e-15);
        assert_eq!(f[2], 0.0);
        let f = filter_factors(&svd, &RegularizationSpec::SvdRank(1)).unwrap();
        assert_eq!(f, [1.0, 0.0, 0.0]);
        let f = filter_factors(&svd, &RegularizationSpec::SvdThreshold(0.5)).unwrap();
        assert_eq!(f, [1.0, 1.0, 0.0]);
        assert!(filter_factors(&svd, &RegularizationSpec::SvdRank(4)).is_err());
        assert!(filter_factors(&svd, &RegularizationSpec::Ridge(-1.0)).is_err());
    }

    #[test]
    fn pinv_examples() {
        // Orthonormal columns: A†A = I.
        let a = crate::synthetic::orthonormal_columns(8, 3, 5);
        let svd = compute_svd_matrix(&a).unwrap();
        let x = apply_pinv(&svd, &RegularizationSpec::Ridge(0.0), &a.column(1).into_owned()).unwrap();
        let mut e1 = DVector::zeros(3);
        e1[1] = 1.0;
        assert!((x - e1).amax() < 1e-12);

        let svd = compute_svd_matrix(&DMatrix::identity(3, 3)).unwrap();
        let mut e0 = DVector::zeros(3);
        e0[0] = 1.0;
        let y = apply_pinv(&svd, &RegularizationSpec::Ridge(1.0), &e0).unwrap();
        assert!((y - &e0 * 0.5).amax() < 1e-15);
        let z = apply_forward(&svd, &e0).unwrap();
        assert!((z - &e0).amax() < 1e-15);
        assert_eq!(apply_forward(&svd, &DVector::zeros(3)).unwrap(), DVector::zeros(3));
        assert!(apply_pinv(&svd, &RegularizationSpec::Ridge(1.0), &DVector::zeros(4)).is_err());
    }

    #[test]
    fn truncation_of_zero_singular_value_is_an_error() {
        let a = low_rank_matrix(10, 6, 2, 1);
        let svd = compute_svd_matrix(&a).unwrap();
        let x = DVector::from_element(10, 1.0);
        assert!(matches!(
            apply_pinv(&svd, &RegularizationSpec::SvdRank(3), &x),
            Err(PcnError::ZeroSingularValueKept { index: 2, .. })
        ));
        assert!(apply_pinv(&svd, &RegularizationSpec::SvdRank(2), &x).is_ok());
    }

    /// Dense oracle: solve (AAᵀ+λI) y = x, then Aᵀy.
    fn dense_pinv_underdetermined(a: &DMatrix<f64>, lambda: f64, x: &DVector<f64>) -> DVector<f64> {
        let m = a.nrows();
        let g = a * a.transpose() + DMatrix::identity(m, m) * lambda;
        a.tr_mul(&g.lu().solve(x).unwrap())
    }

    /// Dense oracle: (AᵀA+λI)⁻¹ Aᵀ x.
    fn dense_pinv_overdetermined(a: &DMatrix<f64>, lambda: f64, x: &DVector<f64>) -> DVector<f64> {
        let n = a.ncols();
        let g = a.tr_mul(a) + DMatrix::identity(n, n) * lambda;
        g.lu().solve(&a.tr_mul(x)).unwrap()
    }

    #[test]
    fn factored_pinv_matches_dense_solve() {
        let a = gaussian_matrix(6, 10, 11);
        let svd = compute_svd_matrix(&a).unwrap();
        let x = gaussian_matrix(6, 1, 12).column(0).into_owned();
        let got = apply_pinv(&svd, &RegularizationSpec::Ridge(0.5), &x).unwrap();
        assert!((got - dense_pinv_underdetermined(&a, 0.5, &x)).amax() < 1e-10);
        let y = gaussian_matrix(10, 1, 13).column(0).into_owned();
        assert!((apply_forward(&svd, &y).unwrap() - &a * &y).amax() < 1e-10);
    }

    #[test]
    fn truncation_at_rank_matches_unregularized_pinv() {
        // A = G H with G full column rank and H full row rank, so
        // A† = Hᵀ(HHᵀ)⁻¹ (GᵀG)⁻¹Gᵀ.
        let a = low_rank_matrix(9, 14, 4, 21);
        let g = gaussian_matrix(9, 4, 21);
        let h = gaussian_matrix(4, 14, 21u64.wrapping_add(0x9e37_79b9));
        assert!((&g * &h - &a).amax() == 0.0);
        let g_pinv = g.tr_mul(&g).cholesky().unwrap().solve(&g.transpose());
        let h_pinv = h.transpose() * (&h * h.transpose()).cholesky().unwrap().inverse();
        let pinv = h_pinv * g_pinv;
        let svd = compute_svd_matrix(&a).unwrap();
        let x = gaussian_matrix(9, 1, 22).column(0).into_owned();
        let got = apply_pinv(&svd, &RegularizationSpec::SvdRank(svd.numerical_rank), &x).unwrap();
        assert!((got - &pinv * &x).amax() < 1e-9);
        let got = apply_pinv(&svd, &RegularizationSpec::Ridge(0.0), &x).unwrap();
        assert!((got - pinv * x).amax() < 1e-9);
    }

    #[test]
    fn cache_roundtrip_and_corruption() {
        let svd = compute_svd_matrix(&gaussian_matrix(5, 7, 2)).unwrap();
        let mut buf = Vec::new();
        write_svd_cache(&mut buf, &svd, Some(&[0.5; 5])).unwrap();
        assert_eq!(buf.len(), 8 + 4 + 24 + 8 * (25 + 5 + 35) + 8 + 40);
        let (back, filters) = read_svd_cache(&mut buf.as_slice()).unwrap();
        assert_eq!(back, svd);
        assert_eq!(filters.unwrap(), [0.5; 5]);
        assert!(read_svd_cache(&mut &buf[..buf.len() - 3]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_svd_cache(&mut bad.as_slice()).is_err());
    }

    #[test]
    fn parse_and_display_regularization() {
        for s in ["ridge:0.25", "rank:4", "threshold:0.001"] {
            let r: RegularizationSpec = s.parse().unwrap();
            assert_eq!(r.to_string(), s);
        }
        assert!("lasso:1".parse::<RegularizationSpec>().is_err());
        assert!("ridge".parse::<RegularizationSpec>().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn ridge_forms_agree(m in 2usize..12, n in 2usize..12, seed in any::<u64>(), log_l in -3.0f64..3.0) {
            let a = gaussian_matrix(m, n, seed);
            let lambda = 10f64.powf(log_l);
            let x = gaussian_matrix(m, 1, seed ^ 0x55).column(0).into_owned();
            let over = dense_pinv_overdetermined(&a, lambda, &x);
            let under = dense_pinv_underdetermined(&a, lambda, &x);
            prop_assert!((&over - &under).amax() < 1e-9 * (1.0 + over.amax()));
            let svd = compute_svd_matrix(&a).unwrap();
            let fact = apply_pinv(&svd, &RegularizationSpec::Ridge(lambda), &x).unwrap();
            prop_assert!((fact - over).amax() < 1e-9 * (1.0 + under.amax()));
        }

        #[test]
        fn filters_bounded_and_monotone(sigma in 0.0f64..100.0, l1 in 0.0f64..50.0, dl in 0.0f64..50.0) {
            let svd = compute_svd_matrix(&DMatrix::from_diagonal(&DVector::from_vec(vec![100.0, sigma]))).unwrap();
            let f1 = filter_factors(&svd, &RegularizationSpec::Ridge(l1)).unwrap();
            let f2 = filter_factors(&svd, &RegularizationSpec::Ridge(l1 + dl)).unwrap();
            for (a, b) in f1.iter().zip(&f2) {
                prop_assert!((0.0..=1.0).contains(a));
                prop_assert!(b <= a);
            }
        }
    }
}
