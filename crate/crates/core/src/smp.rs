//! Maximum-principle quantities built from the adjoint pair `(p, q)`.
//!
//! For a control `u*` with state `X*` and adjoint `(p, q)`, the directional
//! derivative of the cost along `v` is `E sum_n rho_n v_n`, where
//!
//! ```text
//! rho_n = b_u(n) p_n + sigma_u(n) p_n sum_{k<n} c(n,k) xi_k + b(n,n) sigma_u(n) q_n + l_u(n)
//! ```
//!
//! is `F_n`-measurable. Stationarity of `u*` over a convex control set is the
//! variational inequality `rho_n (u_n - u*_n) >= 0`.

use serde::Serialize;

use crate::bsde::{solve_adjoint, BsdeSolution};
use crate::dynamics::{
    cost, evaluate_cost, forward, variation, ControlProcess, ControlSet, ModelSpec, StateProcess,
};
use crate::error::{Error, Result};
use crate::lattice::{AdaptedValue, NoiseLattice};

/// Default stationarity tolerance.
pub const STATIONARITY_TOL: f64 = 1e-8;

/// Relative agreement required between the two routes to the directional derivative.
pub const DUALITY_TOL: f64 = 1e-9;

/// Distance to a bound under which a control counts as sitting on it.
pub const BOUNDARY_TOL: f64 = 1e-9;

/// `rho_n` for every stage, at level `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct SmpResidual {
    stages: Vec<AdaptedValue>,
}

impl SmpResidual {
    pub fn new(stages: Vec<AdaptedValue>) -> Self {
        Self { stages }
    }

    pub fn stage(&self, n: usize) -> &AdaptedValue {
        &self.stages[n]
    }

    pub fn stages(&self) -> &[AdaptedValue] {
        &self.stages
    }

    pub fn horizon(&self) -> usize {
        self.stages.len()
    }

    pub fn as_control(&self) -> ControlProcess {
        ControlProcess::new(self.stages.clone()).expect("residual stages are adapted")
    }
}

pub fn smp_residual(
    model: &ModelSpec,
    u_star: &ControlProcess,
    x_star: &StateProcess,
    adjoint: &BsdeSolution,
    lat: &NoiseLattice,
) -> Result<SmpResidual> {
    let horizon = model.horizon();
    if adjoint.horizon() != horizon || u_star.horizon() != horizon || x_star.horizon() != horizon {
        return Err(Error::DepthMismatch(
            "control, state and adjoint must share the model horizon".into(),
        ));
    }
    let basis = lat.basis();
    let mut stages = Vec::with_capacity(horizon);
    for n in 0..horizon {
        let c = model.stage_coefficients(n, x_star.stage(n), Some(u_star.stage(n)));
        let (p, q) = (adjoint.y(n), adjoint.z(n));
        let predictable = lat.predictable_noise(n)?;
        let rho = &(&(&c.drift.du * p) + &(&(&c.diffusion.du * p) * &predictable))
            + &(&(&c.diffusion.du * q).scale(basis.b(n, n)) + &c.running_cost.du);
        stages.push(rho.lift(n));
    }
    Ok(SmpResidual { stages })
}

/// Everything the first-order analysis of a control needs.
#[derive(Debug, Clone)]
pub struct FirstOrder {
    pub state: StateProcess,
    pub cost: f64,
    pub adjoint: BsdeSolution,
    pub residual: SmpResidual,
}

/// Forward pass, cost, adjoint and maximum-principle residual at `u`.
pub fn first_order(model: &ModelSpec, u: &ControlProcess, lat: &NoiseLattice) -> Result<FirstOrder> {
    let state = forward(model, u, lat)?;
    let j = cost(model, u, &state, lat)?;
    let adjoint = solve_adjoint(model, u, &state, lat)?;
    let residual = smp_residual(model, u, &state, &adjoint, lat)?;
    Ok(FirstOrder {
        state,
        cost: j,
        adjoint,
        residual,
    })
}

/// The two sides of the duality between the variation and the adjoint:
/// `E[Phi_x(X_N) V_N]` against
/// `-E sum l_x V + E sum b_u p v + E sum sigma_u p v xi + E sum sigma_u q v eta xi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DualitySides {
    pub terminal: f64,
    pub adjoint: f64,
}

/// The directional derivative by the state route and by the adjoint route.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DirectionalDerivative {
    /// `E[sum (l_x V + l_u v) + Phi_x(X_N) V_N]`.
    pub state_route: f64,
    /// `E sum [b_u p + sigma_u p xi + sigma_u q eta xi + l_u] v`.
    pub adjoint_route: f64,
    pub duality: DualitySides,
}

impl DirectionalDerivative {
    pub fn value(&self) -> f64 {
        self.state_route
    }
}

fn agree(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * 1.0_f64.max(a.abs()).max(b.abs())
}

/// Derivative of `eps -> J(u* + eps v)` at zero, computed twice; the two
/// routes must agree or the result is rejected with `DualityMismatch`.
pub fn directional_derivative(
    model: &ModelSpec,
    u_star: &ControlProcess,
    v: &ControlProcess,
    lat: &NoiseLattice,
) -> Result<DirectionalDerivative> {
    let horizon = model.horizon();
    let x_star = forward(model, u_star, lat)?;
    let var = variation(model, u_star, &x_star, v, lat)?;
    let adj = solve_adjoint(model, u_star, &x_star, lat)?;
    let (_, phi_x) = model.terminal_coefficients(x_star.terminal());
    let terminal = lat.expectation(&(&phi_x * var.terminal()))?;

    let mut running_state = 0.0;
    let mut running_x = 0.0;
    let mut adjoint_side = 0.0;
    let mut adjoint_route = 0.0;
    for n in 0..horizon {
        let c = model.stage_coefficients(n, x_star.stage(n), Some(u_star.stage(n)));
        let vn = v.stage(n);
        let (p, q) = (adj.y(n), adj.z(n));
        let xi = lat.xi_ref(n);
        let eta_xi = lat.eta_ref(n) * xi;

        let lx_v = lat.expectation(&(&c.running_cost.dx * var.stage(n)))?;
        let lu_v = lat.expectation(&(&c.running_cost.du * vn))?;
        running_x += lx_v;
        running_state += lx_v + lu_v;

        let bu_p = lat.expectation(&(&(&c.drift.du * p) * vn))?;
        let su_p_xi = lat.expectation(&(&(&(&c.diffusion.du * p) * vn) * xi))?;
        let su_q_eta_xi = lat.expectation(&(&(&(&c.diffusion.du * q) * vn) * &eta_xi))?;
        adjoint_side += bu_p + su_p_xi + su_q_eta_xi;
        adjoint_route += bu_p + su_p_xi + su_q_eta_xi + lu_v;
    }
    let state_route = running_state + terminal;
    let duality = DualitySides {
        terminal,
        adjoint: adjoint_side - running_x,
    };
    if !agree(state_route, adjoint_route, DUALITY_TOL) || !agree(duality.terminal, duality.adjoint, DUALITY_TOL) {
        return Err(Error::DualityMismatch {
            state_route,
            adjoint_route,
        });
    }
    Ok(DirectionalDerivative {
        state_route,
        adjoint_route,
        duality,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeSide {
    Interior,
    Lower,
    Upper,
}

/// Classification of one node of the variational inequality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NodeStatus {
    pub stage: usize,
    pub node: usize,
    pub rho: f64,
    pub control: f64,
    pub side: NodeSide,
    pub violation: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StationarityReport {
    pub passed: bool,
    pub tolerance: f64,
    pub worst_violation: f64,
    pub worst_stage: usize,
    pub worst_node: usize,
    #[serde(skip)]
    pub nodes: Vec<NodeStatus>,
}

/// Checks `rho_n (u - u*_n) >= 0` for every admissible `u` nodewise: on a
/// lower bound `rho >= -tol`, on an upper bound `rho <= tol`, otherwise `|rho| <= tol`.
pub fn check_stationarity(
    residual: &SmpResidual,
    u_star: &ControlProcess,
    control_set: ControlSet,
    tol: f64,
) -> StationarityReport {
    let mut nodes = Vec::new();
    for (n, rho) in residual.stages.iter().enumerate() {
        let u = u_star.stage(n);
        for i in 0..rho.len() {
            let (r, x) = (rho.get(i), u.get(i));
            let side = match control_set {
                ControlSet::Box { lo, .. } if x - lo <= BOUNDARY_TOL => NodeSide::Lower,
                ControlSet::Box { hi, .. } if hi - x <= BOUNDARY_TOL => NodeSide::Upper,
                _ => NodeSide::Interior,
            };
            let violation = match side {
                NodeSide::Interior => r.abs(),
                NodeSide::Lower => (-r).max(0.0),
                NodeSide::Upper => r.max(0.0),
            };
            nodes.push(NodeStatus {
                stage: n,
                node: i,
                rho: r,
                control: x,
                side,
                violation,
                passed: violation <= tol,
            });
        }
    }
    let worst = nodes
        .iter()
        .copied()
        .fold(None::<NodeStatus>, |acc, s| match acc {
            Some(a) if a.violation >= s.violation => Some(a),
            _ => Some(s),
        });
    let (worst_violation, worst_stage, worst_node) =
        worst.map_or((0.0, 0, 0), |s| (s.violation, s.stage, s.node));
    StationarityReport {
        passed: nodes.iter().all(|s| s.passed),
        tolerance: tol,
        worst_violation,
        worst_stage,
        worst_node,
        nodes,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRule {
    pub initial_step: f64,
    pub armijo: f64,
    pub max_halvings: usize,
}

impl Default for StepRule {
    fn default() -> Self {
        Self {
            initial_step: 1.0,
            armijo: 1e-4,
            max_halvings: 40,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizeOptions {
    pub step: StepRule,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for OptimizeOptions {
    fn default() -> Self {
        Self {
            step: StepRule::default(),
            tol: STATIONARITY_TOL,
            max_iter: 5000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRow {
    pub iter: usize,
    pub cost: f64,
    pub step: f64,
    pub worst_residual: f64,
}

#[derive(Debug, Clone)]
pub struct OptimizeResult {
    pub control: ControlProcess,
    pub iterations: usize,
    pub cost: f64,
    pub report: StationarityReport,
    pub trace: Vec<TraceRow>,
}

/// Projected gradient descent on the lattice with Armijo backtracking.
///
/// The gradient at each node is `rho_n` for the current control. Returns once
/// the stationarity check passes at `tol` or after `max_iter` iterations, in
/// which case the report says so.
pub fn optimize(
    model: &ModelSpec,
    u_init: &ControlProcess,
    lat: &NoiseLattice,
    options: &OptimizeOptions,
) -> Result<OptimizeResult> {
    model.check_control(u_init)?;
    let set = model.control_set();
    let mut u = u_init.clone();
    let mut step = options.step.initial_step;
    let mut last_step = 0.0;
    let mut trace = Vec::new();
    let mut iteration = 0;
    loop {
        let fo = first_order(model, &u, lat)?;
        let report = check_stationarity(&fo.residual, &u, set, options.tol);
        trace.push(TraceRow {
            iter: iteration,
            cost: fo.cost,
            step: last_step,
            worst_residual: report.worst_violation,
        });
        if report.passed || iteration >= options.max_iter {
            return Ok(OptimizeResult {
                control: u,
                iterations: iteration,
                cost: fo.cost,
                report,
                trace,
            });
        }
        let gradient = fo.residual.as_control();
        // below this decrease, cost differences are dominated by rounding
        let slack = 4.0 * f64::EPSILON * fo.cost.abs().max(1.0);
        let mut accepted = None;
        for halving in 0..=options.step.max_halvings {
            let candidate = u
                .add_scaled(&gradient, -step)
                .map_stages(|_, s| s.map(|x| set.project(x)));
            let j = evaluate_cost(model, &candidate, lat)?;
            let predicted = gradient.inner(&u.add_scaled(&candidate, -1.0), lat)?;
            if j <= fo.cost - options.step.armijo * predicted + slack {
                accepted = Some((candidate, j, halving, predicted));
                break;
            }
            step *= 0.5;
        }
        let Some((candidate, j, halvings, predicted)) = accepted else {
            return Err(Error::NoDescent {
                iteration,
                halvings: options.step.max_halvings,
            });
        };
        last_step = step;
        if halvings == 0 && fo.cost - j > 1e3 * slack && predicted > 1e3 * slack {
            step *= 2.0;
        }
        u = candidate;
        iteration += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::SinDrift;
    use crate::lattice::gauss_hermite;
    use crate::noise::{fgn_basis, HurstParameter};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn lattice(h: f64, depth: usize) -> NoiseLattice {
        let basis = fgn_basis(HurstParameter::new(h).unwrap(), depth + 1).unwrap();
        NoiseLattice::new(gauss_hermite(3).unwrap(), depth, basis).unwrap()
    }

    fn random_control(lat: &NoiseLattice, horizon: usize, seed: u64) -> ControlProcess {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ControlProcess::new(
            (0..horizon)
                .map(|n| AdaptedValue::from_fn(lat.arity(), n, |_| rng.gen_range(-1.0..1.0)))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn zero_direction_has_zero_derivative() {
        let lat = lattice(0.7, 3);
        let model = SinDrift::model(3, 0.5, 0.4, ControlSet::Unconstrained).unwrap();
        let u = random_control(&lat, 3, 1);
        let d = directional_derivative(&model, &u, &ControlProcess::zeros(&lat, 3), &lat).unwrap();
        assert_eq!(d.value(), 0.0);
        assert_eq!(d.adjoint_route, 0.0);
    }

    #[test]
    fn derivative_matches_finite_difference_and_residual() {
        for h in [0.3, 0.7] {
            let lat = lattice(h, 3);
            let model = SinDrift::model(3, 0.5, 0.4, ControlSet::Unconstrained).unwrap();
            let u = random_control(&lat, 3, 2);
            let v = random_control(&lat, 3, 3);
            let d = directional_derivative(&model, &u, &v, &lat).unwrap();
            let eps = 1e-4;
            let fd = (evaluate_cost(&model, &u.add_scaled(&v, eps), &lat).unwrap()
                - evaluate_cost(&model, &u.add_scaled(&v, -eps), &lat).unwrap())
                / (2.0 * eps);
            assert!((d.value() - fd).abs() <= 1e-6, "{} vs {fd}", d.value());
            let fo = first_order(&model, &u, &lat).unwrap();
            let via_rho = fo.residual.as_control().inner(&v, &lat).unwrap();
            assert!((via_rho - d.value()).abs() <= 1e-12);
            assert!((d.duality.terminal - d.duality.adjoint).abs() <= 1e-12);
        }
    }

    #[test]
    fn stagewise_reductions() {
        let lat = lattice(0.3, 3);
        let model = SinDrift::model(3, 0.8, -0.2, ControlSet::Unconstrained).unwrap();
        let u = random_control(&lat, 3, 4);
        let fo = first_order(&model, &u, &lat).unwrap();
        for n in 0..3 {
            let c = model.stage_coefficients(n, fo.state.stage(n), Some(u.stage(n)));
            let (p, q) = (fo.adjoint.y(n), fo.adjoint.z(n));
            let su_q = &c.diffusion.du * q;
            let lhs = lat
                .expectation(&(&(&su_q * lat.eta_ref(n)) * lat.xi_ref(n)))
                .unwrap();
            let rhs = lat.basis().b(n, n) * lat.expectation(&su_q).unwrap();
            assert!((lhs - rhs).abs() <= 1e-10);
            let su_p = &c.diffusion.du * p;
            let lhs = lat.expectation(&(&su_p * lat.xi_ref(n))).unwrap();
            let rhs = lat
                .expectation(&(&su_p * &lat.predictable_noise(n).unwrap()))
                .unwrap();
            assert!((lhs - rhs).abs() <= 1e-10);
        }
    }

    #[test]
    fn white_noise_residual_drops_memory_terms() {
        let lat = lattice(0.5, 3);
        let model = SinDrift::model(3, 0.5, 0.3, ControlSet::Unconstrained).unwrap();
        let u = random_control(&lat, 3, 5);
        let fo = first_order(&model, &u, &lat).unwrap();
        for n in 0..3 {
            // b_u = 1, sigma_u = c, l_u = u
            let expected = &(fo.adjoint.y(n) + &fo.adjoint.z(n).scale(0.5)) + u.stage(n);
            assert!(fo.residual.stage(n).max_abs_diff(&expected) <= 1e-12);
        }
    }

    #[test]
    fn stationarity_classification() {
        let lat = lattice(0.5, 2);
        let zero = SmpResidual::new(vec![lat.zeros(0), lat.zeros(1)]);
        let u = ControlProcess::zeros(&lat, 2);
        assert!(check_stationarity(&zero, &u, ControlSet::Unconstrained, 1e-8).passed);

        let bx = ControlSet::new_box(-1.0, 1.0).unwrap();
        let at_lower = ControlProcess::constant(&lat, 2, -1.0);
        let push_in = SmpResidual::new(vec![lat.constant(0, 0.3), lat.constant(1, 0.3)]);
        assert!(check_stationarity(&push_in, &at_lower, bx, 1e-8).passed);
        let push_out = SmpResidual::new(vec![lat.constant(0, -0.3), lat.constant(1, -0.3)]);
        let report = check_stationarity(&push_out, &at_lower, bx, 1e-8);
        assert!(!report.passed);
        assert!((report.worst_violation - 0.3).abs() < 1e-15);

        let at_upper = ControlProcess::constant(&lat, 2, 1.0);
        assert!(check_stationarity(&push_out, &at_upper, bx, 1e-8).passed);
        assert!(!check_stationarity(&push_in, &u, bx, 1e-8).passed);
    }

    #[test]
    fn stationary_input_returns_immediately() {
        // b = sin x + u with x0 = 0 and u = 0 keeps X = 0, so p = 0 and rho = 0.
        let lat = lattice(0.7, 2);
        let model = SinDrift::model(2, 0.5, 0.0, ControlSet::Unconstrained).unwrap();
        let res = optimize(&model, &ControlProcess::zeros(&lat, 2), &lat, &OptimizeOptions::default())
            .unwrap();
        assert_eq!(res.iterations, 0);
        assert!(res.report.passed);
    }

    #[test]
    fn sin_drift_descends_to_stationarity() {
        let lat = lattice(0.7, 3);
        let model = SinDrift::model(3, 0.5, 1.0, ControlSet::Unconstrained).unwrap();
        let u0 = ControlProcess::zeros(&lat, 3);
        let j0 = evaluate_cost(&model, &u0, &lat).unwrap();
        let opts = OptimizeOptions {
            tol: 1e-6,
            ..OptimizeOptions::default()
        };
        let res = optimize(&model, &u0, &lat, &opts).unwrap();
        assert!(res.report.passed, "{:?}", res.report.worst_violation);
        assert!(res.cost < j0);
        for w in res.trace.windows(2) {
            assert!(w[1].cost <= w[0].cost + 1e-12);
        }
    }

    #[test]
    fn box_constraints_are_respected() {
        let lat = lattice(0.7, 2);
        let bx = ControlSet::new_box(-0.1, 0.1).unwrap();
        let model = SinDrift::model(2, 0.5, 2.0, bx).unwrap();
        let res = optimize(&model, &ControlProcess::zeros(&lat, 2), &lat, &OptimizeOptions::default())
            .unwrap();
        assert!(res.report.passed);
        assert!(res
            .control
            .stages()
            .iter()
            .all(|s| s.values().iter().all(|&x| (-0.1..=0.1).contains(&x))));
        assert!(res.report.nodes.iter().any(|s| s.side == NodeSide::Lower));
        assert!(matches!(
            optimize(&model, &ControlProcess::constant(&lat, 2, 1.0), &lat, &OptimizeOptions::default()),
            Err(Error::OutOfControlSet { .. })
        ));
    }

    #[test]
    fn stationary_box_output_has_no_descent_direction() {
        let lat = lattice(0.3, 3);
        let bx = ControlSet::new_box(-0.2, 0.2).unwrap();
        let model = SinDrift::model(3, 0.5, 1.5, bx).unwrap();
        let res = optimize(&model, &ControlProcess::zeros(&lat, 3), &lat, &OptimizeOptions::default()).unwrap();
        assert!(res.report.passed);
        for k in 0..20 {
            // admissible directions point from u* to another admissible control
            let target = ControlProcess::random(&lat, 3, -0.2, 0.2, 17, k);
            let v = target.add_scaled(&res.control, -1.0);
            let d = directional_derivative(&model, &res.control, &v, &lat).unwrap();
            assert!(d.value() >= -1e-7, "direction {k}: {}", d.value());
        }
    }
}
