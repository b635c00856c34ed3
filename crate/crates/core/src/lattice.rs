//! Gauss–Hermite quadrature tree over the independent Gaussians `eta_n`.
//!
//! A node at level `n` is a prefix `(i_0, ..., i_{n-1})` of quadrature indices,
//! encoded most-significant-first in base `q`. A random variable measurable
//! with respect to `F_n` is stored as an [`AdaptedValue`] holding one value
//! per level-`n` node, so measurability holds by construction and conditional
//! expectations are weighted averages over children.

use std::ops::{Add, Mul, Neg, Sub};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::noise::WhiteningBasis;

pub const MAX_ORDER: usize = 16;

/// Upper bound on the number of full paths of a lattice.
pub const MAX_PATHS: u128 = 10_000_000;

/// Nodes and weights for integrating against the standard normal density.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn moment(&self, power: i32) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(x, w)| w * x.powi(power))
            .sum()
    }
}

/// Probabilists' Hermite polynomials `He_q(x)` and `He_{q-1}(x)`.
fn hermite_pair(q: usize, x: f64) -> (f64, f64) {
    let (mut prev, mut cur) = (0.0, 1.0);
    for k in 0..q {
        let next = x * cur - k as f64 * prev;
        prev = cur;
        cur = next;
    }
    (cur, prev)
}

/// Gauss–Hermite rule of order `q` normalized for `N(0,1)`.
///
/// Golub–Welsch eigenvalues seed a Newton polish on `He_q`; weights follow
/// from `w_i = q! / (q^2 He_{q-1}(x_i)^2)` and are symmetrized.
pub fn gauss_hermite(q: usize) -> Result<QuadratureRule> {
    if !(1..=MAX_ORDER).contains(&q) {
        return Err(Error::UnsupportedOrder(q));
    }
    let jacobi = DMatrix::from_fn(q, q, |i, j| {
        if i.abs_diff(j) == 1 {
            (i.max(j) as f64).sqrt()
        } else {
            0.0
        }
    });
    let mut nodes: Vec<f64> = SymmetricEigen::new(jacobi).eigenvalues.iter().copied().collect();
    nodes.sort_by(|a, b| a.total_cmp(b));

    for x in nodes.iter_mut() {
        for _ in 0..8 {
            let (p, dp_scaled) = hermite_pair(q, *x);
            let dp = q as f64 * dp_scaled;
            if dp == 0.0 {
                break;
            }
            let step = p / dp;
            *x -= step;
            if step.abs() <= 1e-16 * x.abs().max(1.0) {
                break;
            }
        }
    }
    for i in 0..q / 2 {
        let j = q - 1 - i;
        let r = 0.5 * (nodes[j] - nodes[i]);
        nodes[i] = -r;
        nodes[j] = r;
    }
    if q % 2 == 1 {
        nodes[q / 2] = 0.0;
    }

    let factorial: f64 = (1..=q).map(|k| k as f64).product();
    let mut weights: Vec<f64> = nodes
        .iter()
        .map(|&x| {
            let (_, prev) = hermite_pair(q, x);
            factorial / ((q * q) as f64 * prev * prev)
        })
        .collect();
    for i in 0..q / 2 {
        let j = q - 1 - i;
        let w = 0.5 * (weights[i] + weights[j]);
        weights[i] = w;
        weights[j] = w;
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);

    Ok(QuadratureRule { nodes, weights })
}

/// An `F_level`-measurable random variable on a lattice of the given arity.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedValue {
    arity: usize,
    level: usize,
    values: Vec<f64>,
}

impl AdaptedValue {
    pub fn constant(arity: usize, level: usize, c: f64) -> Self {
        Self {
            arity,
            level,
            values: vec![c; arity.pow(level as u32)],
        }
    }

    pub fn zeros(arity: usize, level: usize) -> Self {
        Self::constant(arity, level, 0.0)
    }

    pub fn from_values(arity: usize, level: usize, values: Vec<f64>) -> Result<Self> {
        let expected = arity.pow(level as u32);
        if values.len() != expected {
            return Err(Error::IndexOutOfRange {
                index: values.len(),
                limit: expected,
            });
        }
        Ok(Self { arity, level, values })
    }

    pub fn from_fn(arity: usize, level: usize, f: impl FnMut(usize) -> f64) -> Self {
        Self {
            arity,
            level,
            values: (0..arity.pow(level as u32)).map(f).collect(),
        }
    }

    pub fn arity(&self) -> usize {
        self.arity
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, node: usize) -> f64 {
        self.values[node]
    }

    /// Value on the ancestor of `node`, where `node` lives at `level`.
    pub fn at_descendant(&self, level: usize, node: usize) -> f64 {
        debug_assert!(level >= self.level);
        self.values[node / self.arity.pow((level - self.level) as u32)]
    }

    /// The same random variable viewed at a finer level.
    pub fn lift(&self, level: usize) -> Self {
        assert!(
            level >= self.level,
            "cannot lift level {} down to {}",
            self.level,
            level
        );
        if level == self.level {
            return self.clone();
        }
        let block = self.arity.pow((level - self.level) as u32);
        let mut values = Vec::with_capacity(self.values.len() * block);
        for &v in &self.values {
            values.extend(std::iter::repeat_n(v, block));
        }
        Self {
            arity: self.arity,
            level,
            values,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            arity: self.arity,
            level: self.level,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Nodewise combination at the finer of the two levels.
    pub fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.arity, other.arity, "arity mismatch");
        let level = self.level.max(other.level);
        let values = (0..self.arity.pow(level as u32))
            .map(|i| f(self.at_descendant(level, i), other.at_descendant(level, i)))
            .collect();
        Self {
            arity: self.arity,
            level,
            values,
        }
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| s * v)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.zip_with(other, |a, b| a - b).max_abs()
    }

    /// First node holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.values.iter().position(|v| !v.is_finite())
    }
}

macro_rules! adapted_binop {
    ($trait:ident, $method:ident, $op:tt) => {
        impl $trait<&AdaptedValue> for &AdaptedValue {
            type Output = AdaptedValue;
            fn $method(self, rhs: &AdaptedValue) -> AdaptedValue {
                self.zip_with(rhs, |a, b| a $op b)
            }
        }
        impl $trait<AdaptedValue> for AdaptedValue {
            type Output = AdaptedValue;
            fn $method(self, rhs: AdaptedValue) -> AdaptedValue {
                (&self).$method(&rhs)
            }
        }
        impl $trait<&AdaptedValue> for AdaptedValue {
            type Output = AdaptedValue;
            fn $method(self, rhs: &AdaptedValue) -> AdaptedValue {
                (&self).$method(rhs)
            }
        }
        impl $trait<f64> for &AdaptedValue {
            type Output = AdaptedValue;
            fn $method(self, rhs: f64) -> AdaptedValue {
                self.map(|a| a $op rhs)
            }
        }
        impl $trait<f64> for AdaptedValue {
            type Output = AdaptedValue;
            fn $method(self, rhs: f64) -> AdaptedValue {
                self.map(|a| a $op rhs)
            }
        }
    };
}

adapted_binop!(Add, add, +);
adapted_binop!(Sub, sub, -);
adapted_binop!(Mul, mul, *);

impl Neg for &AdaptedValue {
    type Output = AdaptedValue;
    fn neg(self) -> AdaptedValue {
        self.map(|a| -a)
    }
}

impl Neg for AdaptedValue {
    type Output = AdaptedValue;
    fn neg(self) -> AdaptedValue {
        self.map(|a| -a)
    }
}

impl Mul<&AdaptedValue> for f64 {
    type Output = AdaptedValue;
    fn mul(self, rhs: &AdaptedValue) -> AdaptedValue {
        rhs.scale(self)
    }
}

/// The filtration generated by `eta_0, ..., eta_{depth-1}` on a quadrature tree.
#[derive(Debug, Clone)]
pub struct NoiseLattice {
    rule: QuadratureRule,
    depth: usize,
    basis: WhiteningBasis,
    eta: Vec<AdaptedValue>,
    xi: Vec<AdaptedValue>,
}

impl NoiseLattice {
    pub fn new(rule: QuadratureRule, depth: usize, basis: WhiteningBasis) -> Result<Self> {
        if depth == 0 {
            return Err(Error::DepthMismatch("lattice depth must be at least 1".into()));
        }
        if basis.size() < depth {
            return Err(Error::DepthMismatch(format!(
                "whitening basis of size {} cannot drive a lattice of depth {depth}",
                basis.size()
            )));
        }
        let paths = (rule.order() as u128).pow(depth as u32);
        if paths > MAX_PATHS {
            return Err(Error::LatticeTooLarge {
                paths,
                cap: MAX_PATHS,
            });
        }
        let q = rule.order();
        let eta: Vec<AdaptedValue> = (0..depth)
            .map(|n| AdaptedValue::from_fn(q, n + 1, |i| rule.nodes[i % q]))
            .collect();
        let xi = (0..depth)
            .map(|n| {
                AdaptedValue::from_fn(q, n + 1, |i| {
                    (0..=n)
                        .map(|k| basis.b(n, k) * rule.nodes[digit(q, n + 1, i, k)])
                        .sum()
                })
            })
            .collect();
        Ok(Self {
            rule,
            depth,
            basis,
            eta,
            xi,
        })
    }

    pub fn rule(&self) -> &QuadratureRule {
        &self.rule
    }

    pub fn arity(&self) -> usize {
        self.rule.order()
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn basis(&self) -> &WhiteningBasis {
        &self.basis
    }

    pub fn node_count(&self, level: usize) -> usize {
        self.arity().pow(level as u32)
    }

    /// Quadrature index chosen at stage `stage` on the path through `node`.
    pub fn digit(&self, level: usize, node: usize, stage: usize) -> usize {
        digit(self.arity(), level, node, stage)
    }

    pub fn constant(&self, level: usize, c: f64) -> AdaptedValue {
        AdaptedValue::constant(self.arity(), level, c)
    }

    pub fn zeros(&self, level: usize) -> AdaptedValue {
        self.constant(level, 0.0)
    }

    /// `eta_n`, an `F_{n+1}`-measurable standard normal independent of `F_n`.
    pub fn white_value(&self, n: usize) -> Result<AdaptedValue> {
        self.eta.get(n).cloned().ok_or(Error::IndexOutOfRange {
            index: n,
            limit: self.depth,
        })
    }

    /// `xi_n = sum_{k<=n} b(n,k) eta_k`.
    pub fn noise_value(&self, n: usize) -> Result<AdaptedValue> {
        self.xi.get(n).cloned().ok_or(Error::IndexOutOfRange {
            index: n,
            limit: self.depth,
        })
    }

    pub(crate) fn eta_ref(&self, n: usize) -> &AdaptedValue {
        &self.eta[n]
    }

    pub(crate) fn xi_ref(&self, n: usize) -> &AdaptedValue {
        &self.xi[n]
    }

    /// Probability of every node at `level`.
    pub fn probabilities(&self, level: usize) -> Vec<f64> {
        let q = self.arity();
        let mut probs = vec![1.0];
        for _ in 0..level {
            probs = probs
                .iter()
                .flat_map(|&p| self.rule.weights.iter().map(move |w| p * w))
                .collect();
        }
        debug_assert_eq!(probs.len(), q.pow(level as u32));
        probs
    }

    /// `E[v | F_n]`.
    pub fn condexp(&self, v: &AdaptedValue, n: usize) -> Result<AdaptedValue> {
        if n > v.level || v.level > self.depth || v.arity != self.arity() {
            return Err(Error::LevelMismatch {
                from: v.level,
                to: n,
            });
        }
        let q = self.arity();
        let weights = &self.rule.weights;
        let mut values = v.values.clone();
        for _ in n..v.level {
            values = values
                .chunks_exact(q)
                .map(|children| {
                    // centred on the first child so constants pass through exactly
                    let base = children[0];
                    base + children
                        .iter()
                        .zip(weights)
                        .map(|(x, w)| w * (x - base))
                        .sum::<f64>()
                })
                .collect();
        }
        Ok(AdaptedValue {
            arity: q,
            level: n,
            values,
        })
    }

    pub fn expectation(&self, v: &AdaptedValue) -> Result<f64> {
        Ok(self.condexp(v, 0)?.values[0])
    }

    /// Predictable part `sum_{k<n} c(n,k) xi_k`, an `F_n`-measurable value.
    pub fn predictable_noise(&self, n: usize) -> Result<AdaptedValue> {
        if n >= self.basis.size() {
            return Err(Error::IndexOutOfRange {
                index: n,
                limit: self.basis.size(),
            });
        }
        let mut acc = self.zeros(n);
        for k in 0..n {
            acc = &acc + &self.xi[k].scale(self.basis.c(n, k));
        }
        Ok(acc)
    }
}

fn digit(q: usize, level: usize, node: usize, stage: usize) -> usize {
    debug_assert!(stage < level);
    (node / q.pow((level - 1 - stage) as u32)) % q
}

/// Monte Carlo draws of `eta` and the corresponding `xi = b eta`.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePaths {
    pub eta: DMatrix<f64>,
    pub xi: DMatrix<f64>,
}

impl SamplePaths {
    pub fn count(&self) -> usize {
        self.eta.nrows()
    }

    pub fn horizon(&self) -> usize {
        self.eta.ncols()
    }

    pub fn eta_covariance(&self) -> DMatrix<f64> {
        sample_covariance(&self.eta)
    }

    pub fn xi_covariance(&self) -> DMatrix<f64> {
        sample_covariance(&self.xi)
    }
}

fn sample_covariance(draws: &DMatrix<f64>) -> DMatrix<f64> {
    let (p, m) = draws.shape();
    let means: Vec<f64> = (0..m).map(|j| draws.column(j).sum() / p as f64).collect();
    let denom = (p.max(2) - 1) as f64;
    DMatrix::from_fn(m, m, |i, j| {
        let mut acc = 0.0;
        for r in 0..p {
            acc += (draws[(r, i)] - means[i]) * (draws[(r, j)] - means[j]);
        }
        acc / denom
    })
}

/// Draws `count` independent paths of length `horizon`. Path `p` uses its own
/// ChaCha stream keyed by `(seed, p)`, so output does not depend on threading.
pub fn sample_paths(
    basis: &WhiteningBasis,
    horizon: usize,
    count: usize,
    seed: u64,
) -> Result<SamplePaths> {
    if horizon > basis.size() {
        return Err(Error::DepthMismatch(format!(
            "horizon {horizon} exceeds basis size {}",
            basis.size()
        )));
    }
    let rows: Vec<Vec<f64>> = (0..count)
        .into_par_iter()
        .map(|path| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(path as u64);
            (0..horizon).map(|_| StandardNormal.sample(&mut rng)).collect()
        })
        .collect();
    let eta = DMatrix::from_fn(count, horizon, |r, c| rows[r][c]);
    let xi = DMatrix::from_fn(count, horizon, |r, n| {
        (0..=n).map(|k| basis.b(n, k) * eta[(r, k)]).sum()
    });
    Ok(SamplePaths { eta, xi })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::{fgn_basis, fgn_covariance, HurstParameter};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn lattice(h: f64, q: usize, depth: usize) -> NoiseLattice {
        let basis = fgn_basis(HurstParameter::new(h).unwrap(), depth).unwrap();
        NoiseLattice::new(gauss_hermite(q).unwrap(), depth, basis).unwrap()
    }

    /// Moments of N(0,1): 0 for odd powers, (k-1)!! for even.
    fn normal_moment(k: i32) -> f64 {
        if k % 2 == 1 {
            0.0
        } else {
            (1..k).step_by(2).map(|j| j as f64).product()
        }
    }

    #[test]
    fn order_one_is_the_mean() {
        let rule = gauss_hermite(1).unwrap();
        assert_eq!(rule.nodes(), &[0.0]);
        assert_eq!(rule.weights(), &[1.0]);
    }

    #[test]
    fn order_two_matches_moment_matching() {
        let rule = gauss_hermite(2).unwrap();
        assert_abs_diff_eq!(rule.nodes()[0], -1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(rule.nodes()[1], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(rule.weights()[0], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn order_three_matches_moment_matching() {
        let rule = gauss_hermite(3).unwrap();
        let s3 = 3f64.sqrt();
        assert_abs_diff_eq!(rule.nodes()[0], -s3, epsilon = 1e-15);
        assert_eq!(rule.nodes()[1], 0.0);
        assert_abs_diff_eq!(rule.nodes()[2], s3, epsilon = 1e-15);
        assert_abs_diff_eq!(rule.weights()[0], 1.0 / 6.0, epsilon = 1e-15);
        assert_abs_diff_eq!(rule.weights()[1], 2.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn every_order_integrates_polynomials_exactly() {
        for q in 1..=MAX_ORDER {
            let rule = gauss_hermite(q).unwrap();
            for k in 0..(2 * q as i32) {
                let expected = normal_moment(k);
                let magnitude: f64 = rule
                    .nodes()
                    .iter()
                    .zip(rule.weights())
                    .map(|(x, w)| w * x.abs().powi(k))
                    .sum();
                let tol = 1e-13 * magnitude.max(1.0);
                assert!(
                    (rule.moment(k) - expected).abs() <= tol,
                    "q={q} k={k}: {} vs {expected}",
                    rule.moment(k)
                );
            }
            assert!(rule.weights().iter().all(|&w| w > 0.0));
        }
    }

    #[test]
    fn unsupported_orders() {
        assert_eq!(gauss_hermite(0), Err(Error::UnsupportedOrder(0)));
        assert_eq!(gauss_hermite(17), Err(Error::UnsupportedOrder(17)));
    }

    #[test]
    fn probabilities_sum_to_one() {
        for q in 1..=8 {
            for depth in 1..=6 {
                let lat = lattice(0.7, q, depth);
                let total: f64 = lat.probabilities(depth).iter().sum();
                assert!((total - 1.0).abs() <= 1e-12, "q={q} depth={depth}");
            }
        }
    }

    #[test]
    fn cap_on_lattice_size() {
        let basis = WhiteningBasis::identity(8);
        let rule = gauss_hermite(8).unwrap();
        assert!(matches!(
            NoiseLattice::new(rule, 8, basis),
            Err(Error::LatticeTooLarge { .. })
        ));
        let small = WhiteningBasis::identity(2);
        assert!(matches!(
            NoiseLattice::new(gauss_hermite(3).unwrap(), 3, small),
            Err(Error::DepthMismatch(_))
        ));
    }

    #[test]
    fn white_value_moments() {
        let lat = lattice(0.7, 3, 3);
        for n in 0..3 {
            let eta = lat.white_value(n).unwrap();
            assert_eq!(eta.level(), n + 1);
            assert_abs_diff_eq!(lat.expectation(&eta).unwrap(), 0.0, epsilon = 1e-15);
            let sq = lat.condexp(&(&eta * &eta), n).unwrap();
            assert!(sq.values().iter().all(|v| (v - 1.0).abs() <= 1e-14));
            let mean = lat.condexp(&eta, n).unwrap();
            assert!(mean.max_abs() <= 1e-15);
        }
        assert!(matches!(
            lat.white_value(3),
            Err(Error::IndexOutOfRange { index: 3, limit: 3 })
        ));
    }

    #[test]
    fn noise_value_reproduces_covariance() {
        let h = HurstParameter::new(0.7).unwrap();
        let lat = lattice(0.7, 3, 4);
        let cov = fgn_covariance(h, 4).unwrap();
        let probs = lat.probabilities(4);
        for n in 0..4 {
            for m in 0..4 {
                let a = lat.noise_value(n).unwrap().lift(4);
                let b = lat.noise_value(m).unwrap().lift(4);
                // explicit weighted sum over every path
                let brute: f64 = (0..probs.len())
                    .map(|i| probs[i] * a.get(i) * b.get(i))
                    .sum();
                assert_abs_diff_eq!(brute, cov.rho(n, m), epsilon = 1e-12);
            }
            assert_abs_diff_eq!(
                lat.expectation(&lat.noise_value(n).unwrap()).unwrap(),
                0.0,
                epsilon = 1e-14
            );
        }
    }

    #[test]
    fn identity_basis_noise_is_white() {
        let lat = NoiseLattice::new(gauss_hermite(3).unwrap(), 3, WhiteningBasis::identity(3))
            .unwrap();
        for n in 0..3 {
            assert_eq!(lat.noise_value(n).unwrap(), lat.white_value(n).unwrap());
        }
    }

    #[test]
    fn condexp_of_second_noise() {
        let lat = lattice(0.7, 3, 3);
        let xi1 = lat.noise_value(1).unwrap();
        let got = lat.condexp(&xi1, 1).unwrap();
        let expected = lat.white_value(0).unwrap().scale(lat.basis().b(1, 0));
        assert!(got.max_abs_diff(&expected) <= 1e-14);
        assert!(lat.predictable_noise(1).unwrap().max_abs_diff(&expected) <= 1e-14);
    }

    #[test]
    fn condexp_level_errors() {
        let lat = lattice(0.7, 3, 2);
        let v = lat.white_value(0).unwrap();
        assert!(matches!(lat.condexp(&v, 2), Err(Error::LevelMismatch { .. })));
        let c = lat.constant(2, 4.5);
        assert_eq!(lat.condexp(&c, 0).unwrap().get(0), 4.5);
    }

    #[test]
    fn eta_xi_cross_moment_is_diagonal_pivot() {
        let lat = lattice(0.3, 3, 4);
        for n in 0..4 {
            let prod = lat.white_value(n).unwrap() * lat.noise_value(n).unwrap();
            let got = lat.condexp(&prod, n).unwrap();
            let b = lat.basis().b(n, n);
            assert!(got.values().iter().all(|v| (v - b).abs() <= 1e-12));
        }
    }

    fn random_value(lat: &NoiseLattice, level: usize, coeffs: &[f64]) -> AdaptedValue {
        // polynomial in the eta's up to degree 2
        let mut v = lat.constant(level, coeffs[0]);
        for k in 0..level {
            let eta = lat.white_value(k).unwrap();
            v = &v + &eta.scale(coeffs[1 + k % (coeffs.len() - 1)]);
            v = &v + &(&eta * &eta).scale(coeffs[(2 + k) % coeffs.len()]);
        }
        v
    }

    proptest! {
        #[test]
        fn tower_property(coeffs in prop::collection::vec(-3.0f64..3.0, 4..8), h in 0.1f64..0.9) {
            let lat = lattice(h, 3, 4);
            let v = random_value(&lat, 4, &coeffs) * lat.noise_value(3).unwrap();
            for n in 0..=4 {
                for k in n..=4 {
                    let direct = lat.condexp(&v, n).unwrap();
                    let nested = lat.condexp(&lat.condexp(&v, k).unwrap(), n).unwrap();
                    prop_assert!(direct.max_abs_diff(&nested) <= 1e-12);
                }
            }
        }

        #[test]
        fn linearity_and_known_factors(
            a in prop::collection::vec(-2.0f64..2.0, 4..6),
            b in prop::collection::vec(-2.0f64..2.0, 4..6),
            alpha in -3.0f64..3.0,
            beta in -3.0f64..3.0,
        ) {
            let lat = lattice(0.7, 3, 4);
            let u = random_value(&lat, 4, &a);
            let v = random_value(&lat, 3, &b);
            let w = random_value(&lat, 2, &a);
            for n in 0..=3 {
                let lhs = lat.condexp(&(&u.scale(alpha) + &v.scale(beta)), n).unwrap();
                let rhs = &lat.condexp(&u, n).unwrap().scale(alpha) + &lat.condexp(&v, n).unwrap().scale(beta);
                prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-11);
            }
            for n in 2..=4 {
                let lhs = lat.condexp(&(&w * &u), n).unwrap();
                let rhs = &w * &lat.condexp(&u, n).unwrap();
                prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-11);
            }
        }
    }

    #[test]
    fn monte_carlo_covariance() {
        let h = HurstParameter::new(0.7).unwrap();
        let basis = fgn_basis(h, 4).unwrap();
        let cov = fgn_covariance(h, 4).unwrap();
        let paths = sample_paths(&basis, 4, 200_000, 7).unwrap();
        assert!((paths.xi_covariance() - cov.sigma()).amax() <= 0.01);
        assert!((paths.eta_covariance() - DMatrix::<f64>::identity(4, 4)).amax() <= 0.01);
    }

    #[test]
    fn sampling_is_deterministic_and_identity_passes_through() {
        let basis = WhiteningBasis::identity(3);
        let a = sample_paths(&basis, 3, 64, 11).unwrap();
        let b = sample_paths(&basis, 3, 64, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.eta, a.xi);
        let c = sample_paths(&basis, 3, 64, 12).unwrap();
        assert_ne!(a.eta, c.eta);
    }
}
