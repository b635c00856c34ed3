//! Backward stochastic difference equations driven by fractional and white noise:
//!
//! ```text
//! Y_n + Z_n eta_n = Y_{n+1} + f(n+1, Y_{n+1}, Z_{n+1}) + g(n+1, Y_{n+1}, Z_{n+1}) xi_{n+1},
//! Y_N = y,  Z_N = 0.
//! ```
//!
//! The pair is defined by projection: `Y_n = E[RHS_n | F_n]` and
//! `Z_n = E[eta_n RHS_n | F_n]`. On a discrete Gaussian filtration the equation
//! need not hold pointwise, so the remainder `R_n = RHS_n - Y_n - Z_n eta_n` is
//! kept; it satisfies `E[R_n | F_n] = E[eta_n R_n | F_n] = 0`.

use std::fmt;
use std::sync::Arc;

use crate::dynamics::{ControlProcess, ModelSpec, StateProcess};
use crate::error::{Error, Result};
use crate::lattice::{AdaptedValue, NoiseLattice};

/// Driver coefficient `(stage n, node index at level n, y, z) -> value`.
pub type CoefficientFn = Arc<dyn Fn(usize, usize, f64, f64) -> f64 + Send + Sync>;

#[derive(Clone)]
pub struct DriverSpec {
    horizon: usize,
    terminal: AdaptedValue,
    f: CoefficientFn,
    g: CoefficientFn,
    terminal_noise_free: bool,
}

impl fmt::Debug for DriverSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DriverSpec")
            .field("horizon", &self.horizon)
            .field("terminal_level", &self.terminal.level())
            .field("terminal_noise_free", &self.terminal_noise_free)
            .finish_non_exhaustive()
    }
}

impl DriverSpec {
    /// `terminal_noise_free` asserts `g(N, ., .) = 0`, so that the equation at
    /// stage `N-1` never touches `xi_N`.
    pub fn new(
        horizon: usize,
        terminal: AdaptedValue,
        f: CoefficientFn,
        g: CoefficientFn,
        terminal_noise_free: bool,
    ) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::InvalidDriver("horizon must be at least 1".into()));
        }
        if terminal.level() > horizon {
            return Err(Error::InvalidDriver(format!(
                "terminal value at level {} is not F_{horizon}-measurable",
                terminal.level()
            )));
        }
        Ok(Self {
            horizon,
            terminal,
            f,
            g,
            terminal_noise_free,
        })
    }

    /// `f(n,y,z) = f[n-1] . (y, z, 1)` and likewise for `g`, for `n` in `1..=N`.
    pub fn linear(
        horizon: usize,
        terminal: AdaptedValue,
        f: Vec<[f64; 3]>,
        g: Vec<[f64; 3]>,
    ) -> Result<Self> {
        if f.len() != horizon || g.len() != horizon {
            return Err(Error::InvalidDriver(format!(
                "linear driver needs {horizon} coefficient rows for f and g"
            )));
        }
        let noise_free = g[horizon - 1] == [0.0; 3];
        let eval = |c: Vec<[f64; 3]>| -> CoefficientFn {
            Arc::new(move |n, _, y, z| {
                let [a, b, k] = c[n - 1];
                a * y + b * z + k
            })
        };
        Self::new(horizon, terminal, eval(f), eval(g), noise_free)
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn terminal(&self) -> &AdaptedValue {
        &self.terminal
    }

    pub fn terminal_noise_free(&self) -> bool {
        self.terminal_noise_free
    }

    pub fn f(&self, n: usize, node: usize, y: f64, z: f64) -> f64 {
        (self.f)(n, node, y, z)
    }

    pub fn g(&self, n: usize, node: usize, y: f64, z: f64) -> f64 {
        (self.g)(n, node, y, z)
    }

    /// Lattice depth the solver needs.
    pub fn required_depth(&self) -> usize {
        if self.terminal_noise_free {
            self.horizon
        } else {
            self.horizon + 1
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BsdeSolution {
    y: Vec<AdaptedValue>,
    z: Vec<AdaptedValue>,
    residual: Vec<AdaptedValue>,
}

/// Conditional moments of the remainder at one stage; both vanish in exact arithmetic.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthogonalityCheck {
    pub mean: AdaptedValue,
    pub eta: AdaptedValue,
}

impl BsdeSolution {
    pub fn horizon(&self) -> usize {
        self.y.len() - 1
    }

    pub fn y(&self, n: usize) -> &AdaptedValue {
        &self.y[n]
    }

    /// `Z_n`; `Z_N` is identically zero.
    pub fn z(&self, n: usize) -> &AdaptedValue {
        &self.z[n]
    }

    /// `R_n`, measurable at the level of the stage's right-hand side.
    pub fn residual(&self, n: usize) -> &AdaptedValue {
        &self.residual[n]
    }

    pub fn orthogonality(&self, lat: &NoiseLattice) -> Result<Vec<OrthogonalityCheck>> {
        self.residual
            .iter()
            .enumerate()
            .map(|(n, r)| {
                let eta_r = r * lat.eta_ref(n);
                Ok(OrthogonalityCheck {
                    mean: lat.condexp(r, n)?,
                    eta: lat.condexp(&eta_r, n)?,
                })
            })
            .collect()
    }

    /// Largest nodewise `|E[R_n|F_n]|` or `|E[eta_n R_n|F_n]|`.
    pub fn max_orthogonality_error(&self, lat: &NoiseLattice) -> Result<f64> {
        Ok(self
            .orthogonality(lat)?
            .iter()
            .map(|c| c.mean.max_abs().max(c.eta.max_abs()))
            .fold(0.0, f64::max))
    }
}

fn ensure_finite(v: &AdaptedValue, stage: usize) -> Result<()> {
    match v.first_non_finite() {
        Some(node) => Err(Error::NonFiniteValue { stage, node }),
        None => Ok(()),
    }
}

/// Backward recursion by conditional projection.
pub fn solve_bsde(driver: &DriverSpec, lat: &NoiseLattice) -> Result<BsdeSolution> {
    let horizon = driver.horizon;
    if lat.depth() < driver.required_depth() {
        return Err(Error::DepthMismatch(format!(
            "driver needs lattice depth {}, lattice has {}",
            driver.required_depth(),
            lat.depth()
        )));
    }
    if driver.terminal.arity() != lat.arity() {
        return Err(Error::DepthMismatch("terminal value lives on another lattice".into()));
    }
    let terminal = driver.terminal.lift(horizon);
    ensure_finite(&terminal, horizon)?;

    let mut y = vec![lat.zeros(0); horizon + 1];
    let mut z = vec![lat.zeros(0); horizon + 1];
    let mut residual = vec![lat.zeros(0); horizon];
    y[horizon] = terminal;
    z[horizon] = lat.zeros(horizon);

    for n in (0..horizon).rev() {
        let next = n + 1;
        let (y1, z1) = (&y[next], &z[next]);
        let f_val = AdaptedValue::from_fn(lat.arity(), next, |i| {
            driver.f(next, i, y1.get(i), z1.get(i))
        });
        let g_val = AdaptedValue::from_fn(lat.arity(), next, |i| {
            driver.g(next, i, y1.get(i), z1.get(i))
        });
        let base = y1 + &f_val;
        let rhs = if next < horizon || !driver.terminal_noise_free {
            &base + &(&g_val * lat.xi_ref(next))
        } else {
            if let Some(node) = g_val.values().iter().position(|&v| v != 0.0) {
                return Err(Error::InvalidDriver(format!(
                    "driver declared noise-free at the terminal stage but g = {} at node {node}",
                    g_val.get(node)
                )));
            }
            base
        };
        ensure_finite(&rhs, n)?;
        let eta = lat.eta_ref(n);
        let yn = lat.condexp(&rhs, n)?;
        let zn = lat.condexp(&(&rhs * eta), n)?;
        let rn = &(&rhs - &yn) - &(&zn * eta);
        y[n] = yn;
        z[n] = zn;
        residual[n] = rn;
    }
    Ok(BsdeSolution { y, z, residual })
}

/// Coefficient tables of the adjoint equation along `(u*, X*)`, stages `1..=N`.
#[derive(Debug)]
struct AdjointTables {
    drift_x: Vec<AdaptedValue>,
    diffusion_x: Vec<AdaptedValue>,
    cost_x: Vec<AdaptedValue>,
    pivot: Vec<f64>,
}

/// Driver of the adjoint equation
///
/// ```text
/// p_n + q_n eta_n = p_{n+1} + b_x(n+1) p_{n+1} + b(n+1,n+1) sigma_x(n+1) q_{n+1}
///                   + l_x(n+1) + sigma_x(n+1) p_{n+1} xi_{n+1},
/// p_N = Phi_x(X*_N),  q_N = 0,
/// ```
///
/// with coefficients evaluated along `(X*, u*)`.
pub fn adjoint_driver(
    model: &ModelSpec,
    u_star: &ControlProcess,
    x_star: &StateProcess,
    lat: &NoiseLattice,
) -> Result<DriverSpec> {
    let horizon = model.horizon();
    if u_star.horizon() != horizon || x_star.horizon() != horizon {
        return Err(Error::DepthMismatch(
            "control and state must match the model horizon".into(),
        ));
    }
    if lat.depth() < horizon {
        return Err(Error::DepthMismatch(format!(
            "lattice depth {} is shorter than the horizon {horizon}",
            lat.depth()
        )));
    }

    let terminal_stage = model.stage_coefficients(horizon, x_star.terminal(), None);
    for (name, field) in [
        ("drift", &terminal_stage.drift),
        ("diffusion", &terminal_stage.diffusion),
        ("running cost", &terminal_stage.running_cost),
    ] {
        if field.value.max_abs() != 0.0 || field.dx.max_abs() != 0.0 {
            return Err(Error::TerminalConditionViolated(format!(
                "{name} does not vanish at stage {horizon} along the optimal state"
            )));
        }
    }

    let basis = lat.basis();
    let mut tables = AdjointTables {
        drift_x: vec![lat.zeros(0)],
        diffusion_x: vec![lat.zeros(0)],
        cost_x: vec![lat.zeros(0)],
        pivot: vec![0.0],
    };
    for k in 1..=horizon {
        let coeffs = if k < horizon {
            model.stage_coefficients(k, x_star.stage(k), Some(u_star.stage(k)))
        } else {
            terminal_stage.clone()
        };
        tables.drift_x.push(coeffs.drift.dx.lift(k));
        tables.diffusion_x.push(coeffs.diffusion.dx.lift(k));
        tables.cost_x.push(coeffs.running_cost.dx.lift(k));
        // b(N,N) only exists for a basis of size N+1; sigma_x(N) = 0 either way.
        tables.pivot.push(if k < basis.size() { basis.b(k, k) } else { 0.0 });
    }
    let tables = Arc::new(tables);

    let (_, terminal) = model.terminal_coefficients(x_star.terminal());
    let tf = Arc::clone(&tables);
    let f: CoefficientFn = Arc::new(move |k, i, p, q| {
        tf.drift_x[k].get(i) * p + tf.pivot[k] * tf.diffusion_x[k].get(i) * q + tf.cost_x[k].get(i)
    });
    let tg = Arc::clone(&tables);
    let g: CoefficientFn = Arc::new(move |k, i, p, _q| tg.diffusion_x[k].get(i) * p);
    DriverSpec::new(horizon, terminal, f, g, true)
}

/// Solves the adjoint equation for `(p, q)` along `(u*, X*)`.
pub fn solve_adjoint(
    model: &ModelSpec,
    u_star: &ControlProcess,
    x_star: &StateProcess,
    lat: &NoiseLattice,
) -> Result<BsdeSolution> {
    solve_bsde(&adjoint_driver(model, u_star, x_star, lat)?, lat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{forward, ControlSet, ControlledSystem, Jet};
    use crate::lattice::gauss_hermite;
    use crate::noise::{fgn_basis, HurstParameter, WhiteningBasis};
    use proptest::prelude::*;

    fn lattice(h: f64, depth: usize) -> NoiseLattice {
        let basis = fgn_basis(HurstParameter::new(h).unwrap(), depth + 1).unwrap();
        NoiseLattice::new(gauss_hermite(3).unwrap(), depth, basis).unwrap()
    }

    fn zero_driver(horizon: usize, terminal: AdaptedValue) -> DriverSpec {
        DriverSpec::linear(horizon, terminal, vec![[0.0; 3]; horizon], vec![[0.0; 3]; horizon])
            .unwrap()
    }

    #[test]
    fn constant_terminal_is_a_constant_martingale() {
        let lat = lattice(0.7, 3);
        let sol = solve_bsde(&zero_driver(3, lat.constant(3, 2.5)), &lat).unwrap();
        for n in 0..=3 {
            assert!(sol.y(n).values().iter().all(|&v| v == 2.5));
            assert_eq!(sol.z(n).max_abs(), 0.0);
        }
        for n in 0..3 {
            assert_eq!(sol.residual(n).max_abs(), 0.0);
        }
    }

    #[test]
    fn single_factor_representation() {
        let lat = lattice(0.3, 3);
        let sol = solve_bsde(&zero_driver(3, lat.white_value(2).unwrap()), &lat).unwrap();
        assert!(sol.y(2).max_abs() <= 1e-15);
        assert!(sol.z(2).values().iter().all(|v| (v - 1.0).abs() <= 1e-14));
        for n in 0..2 {
            assert!(sol.y(n).max_abs() <= 1e-15);
            assert!(sol.z(n).max_abs() <= 1e-15);
        }
        for n in 0..3 {
            assert!(sol.residual(n).max_abs() <= 1e-14);
        }
    }

    #[test]
    fn second_noise_projects_stagewise() {
        let lat = lattice(0.7, 2);
        let b = lat.basis().clone();
        let sol = solve_bsde(&zero_driver(2, lat.noise_value(1).unwrap()), &lat).unwrap();
        let expected_y1 = lat.white_value(0).unwrap().scale(b.b(1, 0));
        assert!(sol.y(1).max_abs_diff(&expected_y1) <= 1e-14);
        assert!(sol.z(1).values().iter().all(|v| (v - b.b(1, 1)).abs() <= 1e-14));
        assert!(sol.y(0).max_abs() <= 1e-15);
        assert!((sol.z(0).get(0) - b.b(1, 0)).abs() <= 1e-14);
    }

    #[test]
    fn depth_requirements() {
        let lat = lattice(0.7, 2);
        let mut g = vec![[0.0; 3]; 2];
        g[1] = [1.0, 0.0, 0.0];
        let driver = DriverSpec::linear(2, lat.constant(2, 1.0), vec![[0.0; 3]; 2], g).unwrap();
        assert!(!driver.terminal_noise_free());
        assert!(matches!(solve_bsde(&driver, &lat), Err(Error::DepthMismatch(_))));
        let deeper = lattice(0.7, 3);
        let driver = DriverSpec::linear(
            2,
            deeper.constant(2, 1.0),
            vec![[0.0; 3]; 2],
            vec![[0.0; 3], [1.0, 0.0, 0.0]],
        )
        .unwrap();
        let sol = solve_bsde(&driver, &deeper).unwrap();
        assert_eq!(sol.residual(1).level(), 3);
        assert!(sol.max_orthogonality_error(&deeper).unwrap() <= 1e-12);
        // y + y xi_2 with y = 1: the xi_2 term only contributes its predictable part
        let pred = deeper.predictable_noise(2).unwrap();
        let expected = &pred + 1.0;
        assert!(sol.y(1).max_abs_diff(&deeper.condexp(&expected, 1).unwrap()) <= 1e-13);
    }

    #[test]
    fn undeclared_terminal_noise_is_rejected() {
        let lat = lattice(0.7, 2);
        let g: CoefficientFn = Arc::new(|_, _, _, _| 1.0);
        let f: CoefficientFn = Arc::new(|_, _, _, _| 0.0);
        let driver = DriverSpec::new(2, lat.constant(2, 0.0), f, g, true).unwrap();
        assert!(matches!(solve_bsde(&driver, &lat), Err(Error::InvalidDriver(_))));
    }

    fn random_terminal(lat: &NoiseLattice, level: usize, coeffs: &[f64]) -> AdaptedValue {
        let mut v = lat.constant(level, coeffs[0]);
        for k in 0..level {
            let eta = lat.white_value(k).unwrap();
            v = &v + &eta.scale(coeffs[(1 + k) % coeffs.len()]);
            v = &v + &(&eta * &v).scale(coeffs[(2 + k) % coeffs.len()] * 0.3);
        }
        v
    }

    proptest! {
        #[test]
        fn remainder_is_orthogonal(
            coeffs in prop::collection::vec(-1.5f64..1.5, 6..10),
            h in 0.1f64..0.9,
            noisy_terminal in any::<bool>(),
        ) {
            let depth = if noisy_terminal { 4 } else { 3 };
            let lat = lattice(h, depth);
            let row = |i: usize| [coeffs[i % coeffs.len()], coeffs[(i + 1) % coeffs.len()], coeffs[(i + 2) % coeffs.len()]];
            let f: Vec<[f64; 3]> = (0..3).map(row).collect();
            let mut g: Vec<[f64; 3]> = (3..6).map(row).collect();
            if !noisy_terminal {
                g[2] = [0.0; 3];
            }
            let driver = DriverSpec::linear(3, random_terminal(&lat, 3, &coeffs), f, g).unwrap();
            let sol = solve_bsde(&driver, &lat).unwrap();
            prop_assert!(sol.max_orthogonality_error(&lat).unwrap() <= 1e-10);
            for n in 0..=3 {
                prop_assert_eq!(sol.y(n).level(), n);
                prop_assert_eq!(sol.z(n).level(), n);
            }
        }

        #[test]
        fn linear_in_terminal_data(
            a in prop::collection::vec(-1.0f64..1.0, 6..8),
            b in prop::collection::vec(-1.0f64..1.0, 6..8),
            alpha in -2.0f64..2.0,
            beta in -2.0f64..2.0,
        ) {
            let lat = lattice(0.7, 3);
            let f = vec![[0.4, -0.3, 0.0], [0.1, 0.2, 0.0], [-0.5, 0.0, 0.0]];
            let g = vec![[0.2, 0.1, 0.0], [-0.3, 0.4, 0.0], [0.0; 3]];
            let solve = |t: AdaptedValue| {
                solve_bsde(&DriverSpec::linear(3, t, f.clone(), g.clone()).unwrap(), &lat).unwrap()
            };
            let ya = random_terminal(&lat, 3, &a);
            let yb = random_terminal(&lat, 3, &b);
            let sa = solve(ya.clone());
            let sb = solve(yb.clone());
            let sc = solve(&ya.scale(alpha) + &yb.scale(beta));
            for n in 0..=3 {
                let ey = &sa.y(n).scale(alpha) + &sb.y(n).scale(beta);
                let ez = &sa.z(n).scale(alpha) + &sb.z(n).scale(beta);
                prop_assert!(sc.y(n).max_abs_diff(&ey) <= 1e-11);
                prop_assert!(sc.z(n).max_abs_diff(&ez) <= 1e-11);
            }
        }
    }

    #[test]
    fn solution_is_reproducible() {
        let lat = lattice(0.3, 3);
        let t = random_terminal(&lat, 3, &[0.5, -1.0, 0.7, 0.2]);
        let f = vec![[0.1, 0.2, 0.3]; 3];
        let g = vec![[0.3, -0.1, 0.2], [0.1, 0.1, 0.1], [0.0; 3]];
        let d1 = DriverSpec::linear(3, t.clone(), f.clone(), g.clone()).unwrap();
        let d2 = DriverSpec::linear(3, t, f, g).unwrap();
        assert_eq!(solve_bsde(&d1, &lat).unwrap(), solve_bsde(&d2, &lat).unwrap());
    }

    /// `b = u`, `sigma = u`, `l = 0`, `Phi = x`: no state feedback.
    #[derive(Debug)]
    struct NoFeedback {
        horizon: usize,
    }

    impl ControlledSystem for NoFeedback {
        fn drift(&self, n: usize, _x: f64, u: f64) -> Jet {
            if n >= self.horizon {
                Jet::ZERO
            } else {
                Jet::new(u, 0.0, 1.0)
            }
        }
        fn diffusion(&self, n: usize, _x: f64, u: f64) -> Jet {
            if n >= self.horizon {
                Jet::ZERO
            } else {
                Jet::new(u, 0.0, 1.0)
            }
        }
        fn running_cost(&self, _n: usize, _x: f64, _u: f64) -> Jet {
            Jet::ZERO
        }
        fn terminal_cost(&self, x: f64) -> Jet {
            Jet::new(x, 1.0, 0.0)
        }
    }

    #[test]
    fn adjoint_without_state_feedback() {
        let lat = lattice(0.7, 3);
        let model = ModelSpec::new(
            3,
            0.2,
            ControlSet::Unconstrained,
            Arc::new(NoFeedback { horizon: 3 }),
        )
        .unwrap();
        let u = ControlProcess::constant(&lat, 3, 0.4);
        let x = forward(&model, &u, &lat).unwrap();
        let adj = solve_adjoint(&model, &u, &x, &lat).unwrap();
        for n in 0..=3 {
            assert!(adj.y(n).values().iter().all(|v| (v - 1.0).abs() <= 1e-15));
            assert!(adj.z(n).max_abs() <= 1e-15);
        }
    }

    #[test]
    fn adjoint_rejects_mismatched_shapes() {
        let lat = NoiseLattice::new(gauss_hermite(2).unwrap(), 2, WhiteningBasis::identity(2)).unwrap();
        let model = ModelSpec::new(
            2,
            0.0,
            ControlSet::Unconstrained,
            Arc::new(NoFeedback { horizon: 2 }),
        )
        .unwrap();
        let u = ControlProcess::zeros(&lat, 2);
        let x = forward(&model, &u, &lat).unwrap();
        let short = ControlProcess::zeros(&lat, 1);
        assert!(matches!(
            adjoint_driver(&model, &short, &x, &lat),
            Err(Error::DepthMismatch(_))
        ));
    }
}
