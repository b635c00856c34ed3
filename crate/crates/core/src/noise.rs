//! Fractional-noise covariance and the lower-triangular whitening basis.
//!
//! The increments `xi_n = B^H(n+1) - B^H(n)` of a fractional Brownian motion
//! form a stationary Gaussian sequence. Writing `xi = B eta` with `B` lower
//! triangular turns them into independent standard normals `eta = A xi`,
//! `A = B^{-1}`, such that `eta_n` only depends on `xi_0..=xi_n`. The mixed
//! coefficients `c(n,k)` express the predictable part
//! `E[xi_n | F_n] = sum_{k<n} c(n,k) xi_k`.
//!
//! All indices are 0-based.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pivots at or below this value are treated as a loss of positive definiteness.
pub const PIVOT_TOLERANCE: f64 = 1e-12;

const SYMMETRY_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct HurstParameter(f64);

impl HurstParameter {
    pub fn new(h: f64) -> Result<Self> {
        if h > 0.0 && h < 1.0 {
            Ok(Self(h))
        } else {
            Err(Error::InvalidHurst(h))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// `H = 1/2`, where the increments are white noise.
    pub fn is_white(self) -> bool {
        self.0 == 0.5
    }
}

impl TryFrom<f64> for HurstParameter {
    type Error = Error;

    fn try_from(h: f64) -> Result<Self> {
        Self::new(h)
    }
}

impl From<HurstParameter> for f64 {
    fn from(h: HurstParameter) -> f64 {
        h.0
    }
}

/// Covariance of unit-step fBm increments at the given lag:
/// `1/2 (|k+1|^{2H} + |k-1|^{2H} - 2|k|^{2H})`.
pub fn fgn_autocovariance(h: HurstParameter, lag: usize) -> f64 {
    let two_h = 2.0 * h.value();
    let k = lag as f64;
    let pow = |x: f64| if x == 0.0 { 0.0 } else { x.abs().powf(two_h) };
    0.5 * (pow(k + 1.0) + pow(k - 1.0) - 2.0 * pow(k))
}

/// Validated covariance matrix of the driving noise `(xi_0, ..., xi_{M-1})`.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceSpec {
    sigma: DMatrix<f64>,
}

impl CovarianceSpec {
    pub fn size(&self) -> usize {
        self.sigma.nrows()
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn rho(&self, i: usize, j: usize) -> f64 {
        self.sigma[(i, j)]
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.sigma
    }
}

/// Covariance of the first `m` fractional Gaussian noise increments.
pub fn fgn_covariance(h: HurstParameter, m: usize) -> Result<CovarianceSpec> {
    if m == 0 {
        return Err(Error::EmptyCovariance);
    }
    let sigma = DMatrix::from_fn(m, m, |i, j| fgn_autocovariance(h, i.abs_diff(j)));
    Ok(CovarianceSpec { sigma })
}

/// Accepts an arbitrary stationary Gaussian covariance (AR, MA, ...), provided
/// it is symmetric and strictly positive definite.
pub fn custom_covariance(entries: DMatrix<f64>) -> Result<CovarianceSpec> {
    let (rows, cols) = entries.shape();
    if rows != cols {
        return Err(Error::NotSquare { rows, cols });
    }
    if rows == 0 {
        return Err(Error::EmptyCovariance);
    }
    for i in 0..rows {
        for j in (i + 1)..rows {
            let (x, y) = (entries[(i, j)], entries[(j, i)]);
            let diff = (x - y).abs();
            let scale = 1.0_f64.max(x.abs()).max(y.abs());
            if !(diff <= SYMMETRY_TOLERANCE * scale) {
                return Err(Error::NotSymmetric { row: i, col: j, diff });
            }
        }
    }
    let spec = CovarianceSpec { sigma: entries };
    lower_factor(&spec.sigma)?;
    Ok(spec)
}

/// Convenience wrapper for row-major nested vectors.
pub fn custom_covariance_from_rows(rows: &[Vec<f64>]) -> Result<CovarianceSpec> {
    let n = rows.len();
    if let Some(bad) = rows.iter().find(|r| r.len() != n) {
        return Err(Error::NotSquare { rows: n, cols: bad.len() });
    }
    custom_covariance(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

/// Stationary AR(1) autocovariance `phi^{|i-j|} / (1 - phi^2)`.
pub fn ar1_covariance(phi: f64, m: usize) -> Result<CovarianceSpec> {
    let var = 1.0 / (1.0 - phi * phi);
    custom_covariance(DMatrix::from_fn(m, m, |i, j| {
        phi.powi(i.abs_diff(j) as i32) * var
    }))
}

/// The matrices `b(n,k)`, `a(n,k) = (b^{-1})(n,k)` and `c(n,k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WhiteningBasis {
    b: DMatrix<f64>,
    a: DMatrix<f64>,
    c: DMatrix<f64>,
}

impl WhiteningBasis {
    /// Basis of white noise: `a = b = I`, `c = 0`.
    pub fn identity(m: usize) -> Self {
        Self {
            b: DMatrix::identity(m, m),
            a: DMatrix::identity(m, m),
            c: DMatrix::zeros(m, m),
        }
    }

    pub fn size(&self) -> usize {
        self.b.nrows()
    }

    pub fn b(&self, n: usize, k: usize) -> f64 {
        self.b[(n, k)]
    }

    pub fn a(&self, n: usize, k: usize) -> f64 {
        self.a[(n, k)]
    }

    pub fn c(&self, n: usize, k: usize) -> f64 {
        self.c[(n, k)]
    }

    pub fn b_mat(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn a_mat(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn c_mat(&self) -> &DMatrix<f64> {
        &self.c
    }

    /// `max |b b^T - sigma|`.
    pub fn reconstruction_error(&self, cov: &CovarianceSpec) -> f64 {
        (&self.b * self.b.transpose() - cov.sigma()).amax()
    }

    /// `max |a b - I|`.
    pub fn inverse_error(&self) -> f64 {
        let m = self.size();
        (&self.a * &self.b - DMatrix::<f64>::identity(m, m)).amax()
    }
}

/// Lower-triangular factor through the column recursion
/// `b(n,m) = (rho(n,m) - sum_{k<m} b(n,k) b(m,k)) / b(m,m)`, with the
/// diagonal taken as the positive square-root pivot.
fn lower_factor(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let size = sigma.nrows();
    let mut b = DMatrix::<f64>::zeros(size, size);
    for m in 0..size {
        let pivot = sigma[(m, m)] - (0..m).map(|k| b[(m, k)] * b[(m, k)]).sum::<f64>();
        if !(pivot > PIVOT_TOLERANCE) {
            return Err(Error::NotPositiveDefinite { index: m, pivot });
        }
        let diag = pivot.sqrt();
        b[(m, m)] = diag;
        for n in (m + 1)..size {
            let acc = (0..m).map(|k| b[(n, k)] * b[(m, k)]).sum::<f64>();
            b[(n, m)] = (sigma[(n, m)] - acc) / diag;
        }
    }
    Ok(b)
}

/// Inverse of a lower-triangular matrix by forward substitution, column by column.
fn invert_lower(b: &DMatrix<f64>) -> DMatrix<f64> {
    let size = b.nrows();
    let mut a = DMatrix::<f64>::zeros(size, size);
    for col in 0..size {
        a[(col, col)] = 1.0 / b[(col, col)];
        for row in (col + 1)..size {
            let acc = (col..row).map(|l| b[(row, l)] * a[(l, col)]).sum::<f64>();
            a[(row, col)] = -acc / b[(row, row)];
        }
    }
    a
}

pub fn whiten(cov: &CovarianceSpec) -> Result<WhiteningBasis> {
    let b = lower_factor(cov.sigma())?;
    let a = invert_lower(&b);
    let size = b.nrows();
    let mut c = DMatrix::<f64>::zeros(size, size);
    for n in 0..size {
        for k in 0..n {
            c[(n, k)] = (0..n).map(|l| b[(n, l)] * a[(l, k)]).sum();
        }
    }
    Ok(WhiteningBasis { b, a, c })
}

/// Whitening basis of `m` fractional Gaussian noise increments.
pub fn fgn_basis(h: HurstParameter, m: usize) -> Result<WhiteningBasis> {
    whiten(&fgn_covariance(h, m)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn hurst(h: f64) -> HurstParameter {
        HurstParameter::new(h).unwrap()
    }

    #[test]
    fn hurst_bounds() {
        assert!(HurstParameter::new(0.0).is_err());
        assert!(HurstParameter::new(1.0).is_err());
        assert!(HurstParameter::new(f64::NAN).is_err());
        assert!(HurstParameter::new(0.5).unwrap().is_white());
    }

    #[test]
    fn fgn_unit_diagonal() {
        let cov = fgn_covariance(hurst(0.3), 4).unwrap();
        for n in 0..4 {
            assert_eq!(cov.rho(n, n), 1.0);
        }
    }

    #[test]
    fn fgn_white_is_identity() {
        let cov = fgn_covariance(hurst(0.5), 4).unwrap();
        assert_eq!(cov.sigma(), &DMatrix::<f64>::identity(4, 4));
    }

    #[test]
    fn fgn_lag_one_from_fbm_covariance() {
        // Expand E[(B(1)-B(0))(B(2)-B(1))] with R(t,s) = (t^2H + s^2H - |t-s|^2H)/2.
        let h = 0.7;
        let r = |t: f64, s: f64| 0.5 * (t.powf(2.0 * h) + s.powf(2.0 * h) - (t - s).abs().powf(2.0 * h));
        let direct = r(1.0, 2.0) - r(1.0, 1.0) - r(0.0, 2.0) + r(0.0, 1.0);
        let cov = fgn_covariance(hurst(h), 2).unwrap();
        assert_abs_diff_eq!(cov.rho(0, 1), 0.5 * (2f64.powf(1.4) - 2.0), epsilon = 1e-15);
        assert_abs_diff_eq!(cov.rho(0, 1), direct, epsilon = 1e-15);
    }

    #[test]
    fn identity_covariance_whitens_to_identity() {
        let cov = custom_covariance(DMatrix::identity(5, 5)).unwrap();
        let basis = whiten(&cov).unwrap();
        assert_eq!(basis, WhiteningBasis::identity(5));
    }

    #[test]
    fn first_pivot_is_sqrt_of_variance() {
        let cov = ar1_covariance(0.5, 3).unwrap();
        let basis = whiten(&cov).unwrap();
        assert_abs_diff_eq!(basis.b(0, 0), cov.rho(0, 0).sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn fgn_round_trip_by_multiplication() {
        let cov = fgn_covariance(hurst(0.7), 4).unwrap();
        let basis = whiten(&cov).unwrap();
        let mut worst = 0.0f64;
        for i in 0..4 {
            for j in 0..4 {
                let s: f64 = (0..4).map(|k| basis.b(i, k) * basis.b(j, k)).sum();
                worst = worst.max((s - cov.rho(i, j)).abs());
            }
        }
        assert!(worst <= 1e-10, "{worst}");
    }

    #[test]
    fn ar1_accepted_and_round_trips() {
        let cov = ar1_covariance(0.5, 3).unwrap();
        assert_abs_diff_eq!(cov.rho(0, 2), 0.25 / 0.75, epsilon = 1e-15);
        let basis = whiten(&cov).unwrap();
        assert!(basis.reconstruction_error(&cov) <= 1e-12);
        assert!(basis.inverse_error() <= 1e-12);
    }

    #[test]
    fn rejects_non_symmetric() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.3, 1.0]);
        assert!(matches!(custom_covariance(m), Err(Error::NotSymmetric { row: 0, col: 1, .. })));
    }

    #[test]
    fn rejects_singular_and_indefinite() {
        let singular = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(
            custom_covariance(singular),
            Err(Error::NotPositiveDefinite { index: 1, .. })
        ));
        let indefinite = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            custom_covariance(indefinite),
            Err(Error::NotPositiveDefinite { .. })
        ));
        assert!(matches!(
            custom_covariance(DMatrix::zeros(2, 3)),
            Err(Error::NotSquare { .. })
        ));
    }

    #[test]
    fn white_noise_basis_exact() {
        let basis = fgn_basis(hurst(0.5), 16).unwrap();
        assert!((basis.b_mat() - DMatrix::<f64>::identity(16, 16)).amax() <= 1e-12);
        assert!((basis.a_mat() - DMatrix::<f64>::identity(16, 16)).amax() <= 1e-12);
        assert!(basis.c_mat().amax() <= 1e-12);
    }

    #[test]
    fn c_matches_predictable_part_of_xi() {
        // E[xi_n | F_n] = sum_{l<n} b(n,l) eta_l = sum_{k<n} c(n,k) xi_k for any xi.
        let basis = fgn_basis(hurst(0.3), 5).unwrap();
        let xi = [0.4, -1.1, 0.7, 2.0, -0.3];
        for n in 0..5 {
            let eta: Vec<f64> = (0..n)
                .map(|l| (0..=l).map(|k| basis.a(l, k) * xi[k]).sum())
                .collect();
            let via_eta: f64 = (0..n).map(|l| basis.b(n, l) * eta[l]).sum();
            let via_c: f64 = (0..n).map(|k| basis.c(n, k) * xi[k]).sum();
            assert_abs_diff_eq!(via_eta, via_c, epsilon = 1e-12);
        }
    }

    proptest! {
        #[test]
        fn whitening_invariants(h in prop::sample::select(vec![0.1, 0.3, 0.5, 0.7, 0.9]), m in 1usize..=64) {
            let cov = fgn_covariance(hurst(h), m).unwrap();
            let basis = whiten(&cov).unwrap();
            prop_assert!(basis.reconstruction_error(&cov) <= 1e-10);
            prop_assert!(basis.inverse_error() <= 1e-10);
            for n in 0..m {
                prop_assert!(basis.b(n, n) > 0.0);
                prop_assert_eq!(cov.rho(n, n), 1.0);
                for k in n..m {
                    prop_assert_eq!(basis.c(n, k), 0.0);
                    if k > n {
                        prop_assert_eq!(basis.b(n, k), 0.0);
                        prop_assert_eq!(basis.a(n, k), 0.0);
                        prop_assert_eq!(cov.rho(n, k), cov.rho(k, n));
                    }
                }
            }
        }

        #[test]
        fn random_hurst_whitens(h in 0.05f64..0.95, m in 1usize..=32) {
            let cov = fgn_covariance(hurst(h), m).unwrap();
            let basis = whiten(&cov).unwrap();
            prop_assert!(basis.reconstruction_error(&cov) <= 1e-10);
            prop_assert!(basis.inverse_error() <= 1e-10);
        }
    }
}
