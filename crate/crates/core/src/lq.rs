//! Scalar linear-quadratic problem
//!
//! ```text
//! X_{n+1} = X_n + A_n X_n + B_n u_n + (C_n X_n + D_n u_n) xi_n
//! J(u)    = 1/2 E[ sum_n (Q_n X_n^2 + R_n u_n^2) + G X_N^2 ]
//! ```
//!
//! solved by damped fixed-point iteration on the explicit control law
//! `u_n = -R_n^{-1} [B_n p_n + D_n p_n sum_{k<n} c(n,k) xi_k + b(n,n) D_n q_n]`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::bsde::{solve_adjoint, BsdeSolution};
use crate::dynamics::{
    cost, evaluate_cost, forward, ControlProcess, ControlSet, ControlledSystem, Jet, ModelSpec,
    StateProcess,
};
use crate::error::{Error, Result};
use crate::lattice::NoiseLattice;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LqSpec {
    pub horizon: usize,
    #[serde(rename = "A")]
    pub a: Vec<f64>,
    #[serde(rename = "B")]
    pub b: Vec<f64>,
    #[serde(rename = "C")]
    pub c: Vec<f64>,
    #[serde(rename = "D")]
    pub d: Vec<f64>,
    #[serde(rename = "Q")]
    pub q: Vec<f64>,
    #[serde(rename = "R")]
    pub r: Vec<f64>,
    #[serde(rename = "G")]
    pub g: f64,
    pub x: f64,
}

impl LqSpec {
    pub fn validate(&self) -> Result<()> {
        let n = self.horizon;
        if n == 0 {
            return Err(Error::InvalidSpec("horizon must be positive".into()));
        }
        for (name, v) in [
            ("A", &self.a),
            ("B", &self.b),
            ("C", &self.c),
            ("D", &self.d),
            ("Q", &self.q),
            ("R", &self.r),
        ] {
            if v.len() != n {
                return Err(Error::InvalidSpec(format!(
                    "{name} has {} entries, horizon is {n}",
                    v.len()
                )));
            }
            if let Some(i) = v.iter().position(|x| !x.is_finite()) {
                return Err(Error::InvalidSpec(format!("{name}[{i}] is not finite")));
            }
        }
        if let Some(i) = self.q.iter().position(|&x| x < 0.0) {
            return Err(Error::InvalidSpec(format!("Q[{i}] is negative")));
        }
        if let Some(i) = self.r.iter().position(|&x| x <= 0.0) {
            return Err(Error::InvalidSpec(format!("R[{i}] is not positive")));
        }
        if !(self.g.is_finite() && self.g >= 0.0) {
            return Err(Error::InvalidSpec("G must be finite and non-negative".into()));
        }
        if !self.x.is_finite() {
            return Err(Error::InvalidSpec("x is not finite".into()));
        }
        Ok(())
    }

    pub fn min_r(&self) -> f64 {
        self.r.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn model(&self) -> Result<ModelSpec> {
        self.model_with(ControlSet::Unconstrained)
    }

    pub fn model_with(&self, control_set: ControlSet) -> Result<ModelSpec> {
        self.validate()?;
        ModelSpec::new(
            self.horizon,
            self.x,
            control_set,
            Arc::new(LqSystem { spec: self.clone() }),
        )
    }
}

/// The LQ coefficients as a [`ControlledSystem`]; every coefficient vanishes from stage `N` on.
#[derive(Debug, Clone)]
pub struct LqSystem {
    spec: LqSpec,
}

impl ControlledSystem for LqSystem {
    fn drift(&self, n: usize, x: f64, u: f64) -> Jet {
        let s = &self.spec;
        if n >= s.horizon {
            return Jet::ZERO;
        }
        Jet::new(s.a[n] * x + s.b[n] * u, s.a[n], s.b[n])
    }

    fn diffusion(&self, n: usize, x: f64, u: f64) -> Jet {
        let s = &self.spec;
        if n >= s.horizon {
            return Jet::ZERO;
        }
        Jet::new(s.c[n] * x + s.d[n] * u, s.c[n], s.d[n])
    }

    fn running_cost(&self, n: usize, x: f64, u: f64) -> Jet {
        let s = &self.spec;
        if n >= s.horizon {
            return Jet::ZERO;
        }
        Jet::new(
            0.5 * (s.q[n] * x * x + s.r[n] * u * u),
            s.q[n] * x,
            s.r[n] * u,
        )
    }

    fn terminal_cost(&self, x: f64) -> Jet {
        Jet::new(0.5 * self.spec.g * x * x, self.spec.g * x, 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedPointOptions {
    pub damping: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for FixedPointOptions {
    fn default() -> Self {
        Self {
            damping: 0.5,
            tol: 1e-10,
            max_iter: 500,
        }
    }
}

/// The optimal system: control, state, adjoint pair and cost.
#[derive(Debug, Clone)]
pub struct LqSolution {
    pub control: ControlProcess,
    pub state: StateProcess,
    pub adjoint: BsdeSolution,
    pub cost: f64,
    pub iterations: usize,
    /// `max |u - u~|` at the returned control.
    pub residual: f64,
    /// Damping in effect when the iteration stopped.
    pub damping: f64,
    pub trace: Vec<FixedPointStep>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FixedPointStep {
    pub iter: usize,
    pub cost: f64,
    pub residual: f64,
    pub damping: f64,
}

/// The right-hand side of the explicit control law given the adjoint at `u`.
pub fn control_law(
    spec: &LqSpec,
    adjoint: &BsdeSolution,
    lat: &NoiseLattice,
) -> Result<ControlProcess> {
    let basis = lat.basis();
    let mut stages = Vec::with_capacity(spec.horizon);
    for n in 0..spec.horizon {
        let (p, q) = (adjoint.y(n), adjoint.z(n));
        let predictable = lat.predictable_noise(n)?;
        let bracket = &(&p.scale(spec.b[n]) + &(&p.scale(spec.d[n]) * &predictable))
            + &q.scale(basis.b(n, n) * spec.d[n]);
        stages.push(bracket.scale(-1.0 / spec.r[n]).lift(n));
    }
    ControlProcess::new(stages)
}

pub fn lq_fixed_point(spec: &LqSpec, lat: &NoiseLattice, options: &FixedPointOptions) -> Result<LqSolution> {
    spec.validate()?;
    lq_fixed_point_from(spec, &ControlProcess::zeros(lat, spec.horizon), lat, options)
}

/// Fixed-point iteration from a given start.
///
/// The damped map `u <- u - d (u - u~)` contracts in the `E sum R_n (.)^2` norm
/// exactly when `d (1 + lambda_max(R^{-1} K)) < 2`, with `K` the state part of
/// the Hessian. When that norm of `u - u~` grows, the damping is halved.
pub fn lq_fixed_point_from(
    spec: &LqSpec,
    start: &ControlProcess,
    lat: &NoiseLattice,
    options: &FixedPointOptions,
) -> Result<LqSolution> {
    if !(options.damping > 0.0 && options.damping <= 1.0) {
        return Err(Error::InvalidSpec(format!(
            "damping {} is outside (0, 1]",
            options.damping
        )));
    }
    let model = spec.model()?;
    if start.horizon() != spec.horizon {
        return Err(Error::DepthMismatch("start control has the wrong horizon".into()));
    }
    let weights = ControlProcess::new(
        spec.r.iter().enumerate().map(|(n, &r)| lat.constant(n, r)).collect(),
    )?;
    let mut u = start.clone();
    let mut damping = options.damping;
    let mut previous_norm = f64::INFINITY;
    let mut iterations = 0;
    let mut trace = Vec::new();
    loop {
        let state = forward(&model, &u, lat)?;
        let j = cost(&model, &u, &state, lat)?;
        let adjoint = solve_adjoint(&model, &u, &state, lat)?;
        let target = control_law(spec, &adjoint, lat)?;
        let gap = u.add_scaled(&target, -1.0);
        let residual = gap
            .stages()
            .iter()
            .map(|s| s.max_abs())
            .fold(0.0, f64::max);
        if !residual.is_finite() {
            return Err(Error::NotConverged { iterations, residual });
        }
        trace.push(FixedPointStep {
            iter: iterations,
            cost: j,
            residual,
            damping,
        });
        if residual <= options.tol {
            return Ok(LqSolution {
                control: u,
                state,
                adjoint,
                cost: j,
                iterations,
                residual,
                damping,
                trace,
            });
        }
        if iterations >= options.max_iter {
            return Err(Error::NotConverged { iterations, residual });
        }
        let weighted = gap.map_stages(|n, s| s * weights.stage(n));
        let norm = weighted.inner(&gap, lat)?.sqrt();
        if norm > previous_norm {
            damping *= 0.5;
        }
        previous_norm = norm;
        u = u.add_scaled(&gap, -damping);
        iterations += 1;
    }
}

/// `-G[(1+A_0)B_0 + C_0 D_0] x / (R_0 + G(B_0^2 + D_0^2))` for a one-stage problem.
pub fn one_step_closed_form(spec: &LqSpec) -> Result<f64> {
    if spec.horizon != 1 {
        return Err(Error::WrongHorizon(spec.horizon));
    }
    spec.validate()?;
    let (a, b, c, d, r, g) = (spec.a[0], spec.b[0], spec.c[0], spec.d[0], spec.r[0], spec.g);
    Ok(-g * ((1.0 + a) * b + c * d) * spec.x / (r + g * (b * b + d * d)))
}

pub const SUFFICIENCY_EPSILONS: [f64; 3] = [1.0, 0.1, 0.01];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SufficiencyReport {
    pub trials: usize,
    pub evaluations: usize,
    pub optimal_cost: f64,
    /// Smallest `J(u) - J(u*)` seen.
    pub min_cost_gap: f64,
    /// Smallest `J(u) - J(u*) - 1/2 E sum R (du)^2` seen.
    pub min_quadratic_gap: f64,
    pub passed: bool,
}

/// Random perturbations `u* + eps v` never beat `u*`, and each gains at least
/// the control-penalty curvature.
pub fn verify_sufficiency(
    spec: &LqSpec,
    u_star: &ControlProcess,
    lat: &NoiseLattice,
    trials: usize,
    seed: u64,
) -> Result<SufficiencyReport> {
    let model = spec.model()?;
    let j_star = evaluate_cost(&model, u_star, lat)?;
    let mut min_cost_gap = f64::INFINITY;
    let mut min_quadratic_gap = f64::INFINITY;
    let mut evaluations = 0;
    for t in 0..trials {
        let v = ControlProcess::random(lat, spec.horizon, -1.0, 1.0, seed, t as u64);
        let curvature = weighted_square(spec, &v, lat)?;
        for eps in SUFFICIENCY_EPSILONS {
            let j = evaluate_cost(&model, &u_star.add_scaled(&v, eps), lat)?;
            min_cost_gap = min_cost_gap.min(j - j_star);
            min_quadratic_gap = min_quadratic_gap.min(j - j_star - 0.5 * eps * eps * curvature);
            evaluations += 1;
        }
    }
    if trials == 0 {
        min_cost_gap = 0.0;
        min_quadratic_gap = 0.0;
    }
    Ok(SufficiencyReport {
        trials,
        evaluations,
        optimal_cost: j_star,
        min_cost_gap,
        min_quadratic_gap,
        passed: min_cost_gap >= -1e-10 && min_quadratic_gap >= -1e-9,
    })
}

/// `E sum_n R_n v_n^2`.
fn weighted_square(spec: &LqSpec, v: &ControlProcess, lat: &NoiseLattice) -> Result<f64> {
    let mut acc = 0.0;
    for (n, s) in v.stages().iter().enumerate() {
        acc += spec.r[n] * lat.expectation(&(s * s))?;
    }
    Ok(acc)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UniquenessReport {
    pub starts: usize,
    pub iterations: Vec<usize>,
    /// Largest nodewise distance between any run and the first one.
    pub max_disagreement: f64,
    pub parallelogram_pairs: usize,
    /// Smallest `J(u1) + J(u2) - 2 J(mid) - theta/4 E sum (u1 - u2)^2`.
    pub min_parallelogram_gap: f64,
    pub theta: f64,
    pub passed: bool,
}

/// Runs the fixed point from `starts` different initial controls (zero, one,
/// then random) and checks the strong-convexity inequality on random pairs.
pub fn verify_uniqueness(
    spec: &LqSpec,
    lat: &NoiseLattice,
    starts: usize,
    seed: u64,
    options: &FixedPointOptions,
) -> Result<UniquenessReport> {
    let model = spec.model()?;
    let horizon = spec.horizon;
    let mut runs = Vec::with_capacity(starts);
    for s in 0..starts {
        let start = match s {
            0 => ControlProcess::zeros(lat, horizon),
            1 => ControlProcess::constant(lat, horizon, 1.0),
            _ => ControlProcess::random(lat, horizon, -2.0, 2.0, seed, s as u64),
        };
        runs.push(lq_fixed_point_from(spec, &start, lat, options)?);
    }
    let max_disagreement = runs
        .iter()
        .skip(1)
        .map(|r| r.control.max_abs_diff(&runs[0].control))
        .fold(0.0, f64::max);

    let theta = spec.min_r();
    let mut min_gap = f64::INFINITY;
    let pairs = starts.max(2);
    for k in 0..pairs {
        let stream = 1_000_000 + 2 * k as u64;
        let u1 = ControlProcess::random(lat, horizon, -2.0, 2.0, seed, stream);
        let u2 = ControlProcess::random(lat, horizon, -2.0, 2.0, seed, stream + 1);
        let mid = u1.add_scaled(&u2, 1.0).map_stages(|_, s| s.scale(0.5));
        let diff = u1.add_scaled(&u2, -1.0);
        let lhs = evaluate_cost(&model, &u1, lat)? + evaluate_cost(&model, &u2, lat)?;
        let rhs = 2.0 * evaluate_cost(&model, &mid, lat)? + 0.25 * theta * diff.inner(&diff, lat)?;
        min_gap = min_gap.min(lhs - rhs);
    }
    Ok(UniquenessReport {
        starts,
        iterations: runs.iter().map(|r| r.iterations).collect(),
        max_disagreement,
        parallelogram_pairs: pairs,
        min_parallelogram_gap: min_gap,
        theta,
        passed: starts >= 2 && max_disagreement <= 1e-6 && min_gap >= -1e-9,
    })
}
