//! Controlled state equation `X_{n+1} = X_n + b(n,X_n,u_n) + sigma(n,X_n,u_n) xi_n`,
//! its cost functional and the first-order variation process.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::lattice::{AdaptedValue, NoiseLattice};

/// A scalar function value together with its partial derivatives in `x` and `u`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Jet {
    pub value: f64,
    pub dx: f64,
    pub du: f64,
}

impl Jet {
    pub const ZERO: Jet = Jet {
        value: 0.0,
        dx: 0.0,
        du: 0.0,
    };

    pub fn new(value: f64, dx: f64, du: f64) -> Self {
        Self { value, dx, du }
    }
}

/// Coefficients of a controlled system. Implementations must return zero for
/// every stage `n >= horizon` of the model they are used in, and must be pure.
pub trait ControlledSystem: Send + Sync + fmt::Debug {
    fn drift(&self, n: usize, x: f64, u: f64) -> Jet;
    fn diffusion(&self, n: usize, x: f64, u: f64) -> Jet;
    fn running_cost(&self, n: usize, x: f64, u: f64) -> Jet;
    /// `Phi(x)` and `Phi_x(x)`; the `du` slot is ignored.
    fn terminal_cost(&self, x: f64) -> Jet;
}

/// Closed convex set of admissible control values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ControlSet {
    Unconstrained,
    Box { lo: f64, hi: f64 },
}

impl ControlSet {
    pub fn new_box(lo: f64, hi: f64) -> Result<Self> {
        if lo.is_finite() && hi.is_finite() && lo < hi {
            Ok(Self::Box { lo, hi })
        } else {
            Err(Error::InvalidModel(format!("empty or unbounded box [{lo}, {hi}]")))
        }
    }

    pub fn contains(&self, u: f64) -> bool {
        match *self {
            Self::Unconstrained => u.is_finite(),
            Self::Box { lo, hi } => u >= lo && u <= hi,
        }
    }

    pub fn project(&self, u: f64) -> f64 {
        match *self {
            Self::Unconstrained => u,
            Self::Box { lo, hi } => u.clamp(lo, hi),
        }
    }
}

const SPOT_CHECKS: usize = 16;
const SPOT_SEED: u64 = 0x5eed_0fc0_ffee;
const DERIVATIVE_RTOL: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct ModelSpec {
    horizon: usize,
    initial_state: f64,
    control_set: ControlSet,
    system: Arc<dyn ControlledSystem>,
}

impl ModelSpec {
    /// Validates the terminal-zero condition and the supplied derivatives
    /// against central finite differences at random points.
    pub fn new(
        horizon: usize,
        initial_state: f64,
        control_set: ControlSet,
        system: Arc<dyn ControlledSystem>,
    ) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::InvalidModel("horizon must be at least 1".into()));
        }
        if !initial_state.is_finite() {
            return Err(Error::InvalidModel("initial state must be finite".into()));
        }
        let spec = Self {
            horizon,
            initial_state,
            control_set,
            system,
        };
        spec.check_terminal_zero()?;
        spec.check_derivatives()?;
        Ok(spec)
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn initial_state(&self) -> f64 {
        self.initial_state
    }

    pub fn control_set(&self) -> ControlSet {
        self.control_set
    }

    pub fn system(&self) -> &dyn ControlledSystem {
        self.system.as_ref()
    }

    fn spot_points(&self) -> Vec<(f64, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(SPOT_SEED);
        (0..SPOT_CHECKS)
            .map(|_| {
                let x = rng.gen_range(-3.0..3.0);
                let u = match self.control_set {
                    ControlSet::Unconstrained => rng.gen_range(-3.0..3.0),
                    ControlSet::Box { lo, hi } => rng.gen_range(lo..=hi),
                };
                (x, u)
            })
            .collect()
    }

    fn check_terminal_zero(&self) -> Result<()> {
        let n = self.horizon;
        for (x, u) in self.spot_points() {
            let jets = [
                ("drift", self.system.drift(n, x, u)),
                ("diffusion", self.system.diffusion(n, x, u)),
                ("running cost", self.system.running_cost(n, x, u)),
            ];
            for (name, jet) in jets {
                if jet != Jet::ZERO {
                    return Err(Error::TerminalConditionViolated(format!(
                        "{name} at stage {n} is {jet:?} at (x={x}, u={u})"
                    )));
                }
            }
        }
        Ok(())
    }

    fn check_derivatives(&self) -> Result<()> {
        let sys = &self.system;
        let points = self.spot_points();
        for n in 0..self.horizon {
            let fields: [(&str, &dyn Fn(f64, f64) -> Jet); 3] = [
                ("drift", &|x, u| sys.drift(n, x, u)),
                ("diffusion", &|x, u| sys.diffusion(n, x, u)),
                ("running cost", &|x, u| sys.running_cost(n, x, u)),
            ];
            for (name, f) in fields {
                for &(x, u) in &points {
                    check_partials(name, n, f, x, u, true)?;
                }
            }
        }
        for &(x, _) in &points {
            check_partials("terminal cost", self.horizon, &|x, _| sys.terminal_cost(x), x, 0.0, false)?;
        }
        Ok(())
    }

    /// Fails with `OutOfControlSet` if any node leaves the control set.
    pub fn check_control(&self, u: &ControlProcess) -> Result<()> {
        for (stage, un) in u.stages.iter().enumerate() {
            if let Some(node) = un.values().iter().position(|&v| !self.control_set.contains(v)) {
                return Err(Error::OutOfControlSet {
                    stage,
                    node,
                    value: un.get(node),
                });
            }
        }
        Ok(())
    }

    /// Nodewise jets of `b`, `sigma` and `l` at stage `n`. For `n == horizon`
    /// the control argument may be `None`.
    pub fn stage_coefficients(
        &self,
        n: usize,
        x: &AdaptedValue,
        u: Option<&AdaptedValue>,
    ) -> StageCoefficients {
        let zero_u;
        let u = match u {
            Some(u) => u,
            None => {
                zero_u = AdaptedValue::zeros(x.arity(), x.level());
                &zero_u
            }
        };
        let level = x.level().max(u.level());
        let count = x.arity().pow(level as u32);
        let mut drift = JetField::with_capacity(count);
        let mut diffusion = JetField::with_capacity(count);
        let mut cost = JetField::with_capacity(count);
        for i in 0..count {
            let xi = x.at_descendant(level, i);
            let ui = u.at_descendant(level, i);
            drift.push(self.system.drift(n, xi, ui));
            diffusion.push(self.system.diffusion(n, xi, ui));
            cost.push(self.system.running_cost(n, xi, ui));
        }
        let arity = x.arity();
        StageCoefficients {
            drift: drift.finish(arity, level),
            diffusion: diffusion.finish(arity, level),
            running_cost: cost.finish(arity, level),
        }
    }

    /// `Phi(X_N)` and `Phi_x(X_N)` nodewise.
    pub fn terminal_coefficients(&self, x: &AdaptedValue) -> (AdaptedValue, AdaptedValue) {
        let jets: Vec<Jet> = x.values().iter().map(|&v| self.system.terminal_cost(v)).collect();
        let value = AdaptedValue::from_fn(x.arity(), x.level(), |i| jets[i].value);
        let grad = AdaptedValue::from_fn(x.arity(), x.level(), |i| jets[i].dx);
        (value, grad)
    }

    fn require_lattice(&self, lat: &NoiseLattice) -> Result<()> {
        if lat.depth() < self.horizon {
            return Err(Error::DepthMismatch(format!(
                "lattice depth {} is shorter than the horizon {}",
                lat.depth(),
                self.horizon
            )));
        }
        Ok(())
    }

    fn require_process(&self, stages: &[AdaptedValue], lat: &NoiseLattice, what: &str) -> Result<()> {
        if stages.len() != self.horizon {
            return Err(Error::DepthMismatch(format!(
                "{what} has {} stages, horizon is {}",
                stages.len(),
                self.horizon
            )));
        }
        for (n, s) in stages.iter().enumerate() {
            if s.level() > n || s.arity() != lat.arity() {
                return Err(Error::DepthMismatch(format!(
                    "{what} stage {n} is not F_{n}-measurable on this lattice"
                )));
            }
        }
        Ok(())
    }
}

fn check_partials(
    name: &str,
    n: usize,
    f: &dyn Fn(f64, f64) -> Jet,
    x: f64,
    u: f64,
    with_u: bool,
) -> Result<()> {
    let jet = f(x, u);
    let hx = 1e-6 * x.abs().max(1.0);
    let fd_x = (f(x + hx, u).value - f(x - hx, u).value) / (2.0 * hx);
    let mut checks = vec![("x", jet.dx, fd_x)];
    if with_u {
        let hu = 1e-6 * u.abs().max(1.0);
        let fd_u = (f(x, u + hu).value - f(x, u - hu).value) / (2.0 * hu);
        checks.push(("u", jet.du, fd_u));
    }
    for (var, analytic, fd) in checks {
        if !((analytic - fd).abs() <= DERIVATIVE_RTOL * analytic.abs().max(1.0)) {
            return Err(Error::InvalidModel(format!(
                "{name} derivative in {var} at stage {n}, (x={x}, u={u}): analytic {analytic}, finite difference {fd}"
            )));
        }
    }
    Ok(())
}

/// Value and partials of one coefficient at every node of a level.
#[derive(Debug, Clone, PartialEq)]
pub struct JetField {
    pub value: AdaptedValue,
    pub dx: AdaptedValue,
    pub du: AdaptedValue,
}

struct JetFieldBuilder {
    value: Vec<f64>,
    dx: Vec<f64>,
    du: Vec<f64>,
}

impl JetField {
    fn with_capacity(n: usize) -> JetFieldBuilder {
        JetFieldBuilder {
            value: Vec::with_capacity(n),
            dx: Vec::with_capacity(n),
            du: Vec::with_capacity(n),
        }
    }
}

impl JetFieldBuilder {
    fn push(&mut self, jet: Jet) {
        self.value.push(jet.value);
        self.dx.push(jet.dx);
        self.du.push(jet.du);
    }

    fn finish(self, arity: usize, level: usize) -> JetField {
        let mk = |v| AdaptedValue::from_values(arity, level, v).expect("sized by construction");
        JetField {
            value: mk(self.value),
            dx: mk(self.dx),
            du: mk(self.du),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageCoefficients {
    pub drift: JetField,
    pub diffusion: JetField,
    pub running_cost: JetField,
}

/// `(u_0, ..., u_{N-1})`, with `u_n` stored at level `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlProcess {
    stages: Vec<AdaptedValue>,
}

impl ControlProcess {
    pub fn new(stages: Vec<AdaptedValue>) -> Result<Self> {
        for (n, s) in stages.iter().enumerate() {
            if s.level() > n {
                return Err(Error::DepthMismatch(format!(
                    "control stage {n} sits at level {}",
                    s.level()
                )));
            }
        }
        Ok(Self {
            stages: stages
                .into_iter()
                .enumerate()
                .map(|(n, s)| s.lift(n))
                .collect(),
        })
    }

    pub fn constant(lat: &NoiseLattice, horizon: usize, c: f64) -> Self {
        Self {
            stages: (0..horizon).map(|n| lat.constant(n, c)).collect(),
        }
    }

    pub fn zeros(lat: &NoiseLattice, horizon: usize) -> Self {
        Self::constant(lat, horizon, 0.0)
    }

    /// Independent uniform draws on `[lo, hi)` at every node, from the ChaCha
    /// stream `stream` of `seed`.
    pub fn random(lat: &NoiseLattice, horizon: usize, lo: f64, hi: f64, seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self {
            stages: (0..horizon)
                .map(|n| AdaptedValue::from_fn(lat.arity(), n, |_| rng.gen_range(lo..hi)))
                .collect(),
        }
    }

    pub fn horizon(&self) -> usize {
        self.stages.len()
    }

    pub fn stage(&self, n: usize) -> &AdaptedValue {
        &self.stages[n]
    }

    pub fn stages(&self) -> &[AdaptedValue] {
        &self.stages
    }

    pub fn map_stages(&self, f: impl Fn(usize, &AdaptedValue) -> AdaptedValue) -> Self {
        Self {
            stages: self.stages.iter().enumerate().map(|(n, s)| f(n, s).lift(n)).collect(),
        }
    }

    /// `self + s * other`.
    pub fn add_scaled(&self, other: &Self, s: f64) -> Self {
        assert_eq!(self.horizon(), other.horizon());
        self.map_stages(|n, u| u + &other.stages[n].scale(s))
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.stages
            .iter()
            .zip(&other.stages)
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }

    /// `E sum_n u_n v_n`, the probability-weighted inner product.
    pub fn inner(&self, other: &Self, lat: &NoiseLattice) -> Result<f64> {
        let mut acc = 0.0;
        for (a, b) in self.stages.iter().zip(&other.stages) {
            acc += lat.expectation(&(a * b))?;
        }
        Ok(acc)
    }
}

/// `(X_0, ..., X_N)`, with `X_n` stored at level `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateProcess {
    stages: Vec<AdaptedValue>,
}

impl StateProcess {
    pub fn horizon(&self) -> usize {
        self.stages.len() - 1
    }

    pub fn stage(&self, n: usize) -> &AdaptedValue {
        &self.stages[n]
    }

    pub fn stages(&self) -> &[AdaptedValue] {
        &self.stages
    }

    pub fn terminal(&self) -> &AdaptedValue {
        self.stages.last().expect("state has at least X_0")
    }
}

/// First-order sensitivity `V` of the state to a control direction.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationProcess {
    stages: Vec<AdaptedValue>,
}

impl VariationProcess {
    pub fn stage(&self, n: usize) -> &AdaptedValue {
        &self.stages[n]
    }

    pub fn stages(&self) -> &[AdaptedValue] {
        &self.stages
    }

    pub fn terminal(&self) -> &AdaptedValue {
        self.stages.last().expect("variation has at least V_0")
    }
}

fn ensure_finite(v: &AdaptedValue, stage: usize) -> Result<()> {
    match v.first_non_finite() {
        Some(node) => Err(Error::NonFiniteValue { stage, node }),
        None => Ok(()),
    }
}

/// Runs the state equation forward on the lattice.
pub fn forward(model: &ModelSpec, u: &ControlProcess, lat: &NoiseLattice) -> Result<StateProcess> {
    model.require_lattice(lat)?;
    model.require_process(u.stages(), lat, "control")?;
    let mut stages = Vec::with_capacity(model.horizon + 1);
    stages.push(lat.constant(0, model.initial_state));
    for n in 0..model.horizon {
        let coeffs = model.stage_coefficients(n, &stages[n], Some(u.stage(n)));
        let next = &(&stages[n] + &coeffs.drift.value) + &(&coeffs.diffusion.value * lat.xi_ref(n));
        ensure_finite(&next, n + 1)?;
        stages.push(next);
    }
    Ok(StateProcess { stages })
}

/// `J(u) = E[sum_n l(n, X_n, u_n) + Phi(X_N)]`.
pub fn cost(
    model: &ModelSpec,
    u: &ControlProcess,
    x: &StateProcess,
    lat: &NoiseLattice,
) -> Result<f64> {
    model.require_process(u.stages(), lat, "control")?;
    if x.stages.len() != model.horizon + 1 {
        return Err(Error::DepthMismatch("state process does not match the horizon".into()));
    }
    let mut total = 0.0;
    for n in 0..model.horizon {
        let l = model.stage_coefficients(n, x.stage(n), Some(u.stage(n))).running_cost.value;
        ensure_finite(&l, n)?;
        total += lat.expectation(&l)?;
    }
    let (phi, _) = model.terminal_coefficients(x.terminal());
    ensure_finite(&phi, model.horizon)?;
    total += lat.expectation(&phi)?;
    if !total.is_finite() {
        return Err(Error::NonFiniteValue {
            stage: model.horizon,
            node: 0,
        });
    }
    Ok(total)
}

/// Forward pass followed by [`cost`].
pub fn evaluate_cost(model: &ModelSpec, u: &ControlProcess, lat: &NoiseLattice) -> Result<f64> {
    let x = forward(model, u, lat)?;
    cost(model, u, &x, lat)
}

/// `V_{n+1} = V_n + b_x V_n + b_u v_n + (sigma_x V_n + sigma_u v_n) xi_n`, `V_0 = 0`.
pub fn variation(
    model: &ModelSpec,
    u_star: &ControlProcess,
    x_star: &StateProcess,
    v: &ControlProcess,
    lat: &NoiseLattice,
) -> Result<VariationProcess> {
    model.require_lattice(lat)?;
    model.require_process(u_star.stages(), lat, "control")?;
    model.require_process(v.stages(), lat, "direction")?;
    let mut stages = Vec::with_capacity(model.horizon + 1);
    stages.push(lat.zeros(0));
    for n in 0..model.horizon {
        let c = model.stage_coefficients(n, x_star.stage(n), Some(u_star.stage(n)));
        let vn = v.stage(n);
        let vv = &stages[n];
        let drift = &(vv + &(&c.drift.dx * vv)) + &(&c.drift.du * vn);
        let diffusion = &(&c.diffusion.dx * vv) + &(&c.diffusion.du * vn);
        let next = &drift + &(&diffusion * lat.xi_ref(n));
        ensure_finite(&next, n + 1)?;
        stages.push(next);
    }
    Ok(VariationProcess { stages })
}

/// Convex perturbation `u* + eps v`.
pub fn perturb(
    u_star: &ControlProcess,
    v: &ControlProcess,
    eps: f64,
    control_set: ControlSet,
) -> Result<ControlProcess> {
    let out = u_star.add_scaled(v, eps);
    for (stage, s) in out.stages.iter().enumerate() {
        if let Some(node) = s.values().iter().position(|&x| !control_set.contains(x)) {
            return Err(Error::OutOfControlSet {
                stage,
                node,
                value: s.get(node),
            });
        }
    }
    Ok(out)
}

/// `sum_{n=0}^N E|X^eps_n - X*_n|^2`.
pub fn state_gap(
    model: &ModelSpec,
    u_star: &ControlProcess,
    v: &ControlProcess,
    eps: f64,
    lat: &NoiseLattice,
) -> Result<f64> {
    let x_star = forward(model, u_star, lat)?;
    let x_eps = forward(model, &perturb(u_star, v, eps, model.control_set)?, lat)?;
    let mut acc = 0.0;
    for (a, b) in x_eps.stages.iter().zip(&x_star.stages) {
        let d = a - b;
        acc += lat.expectation(&(&d * &d))?;
    }
    Ok(acc)
}

/// `sum_{n=0}^N E|(X^eps_n - X*_n)/eps - V_n|^2`.
pub fn variation_error(
    model: &ModelSpec,
    u_star: &ControlProcess,
    v: &ControlProcess,
    eps: f64,
    lat: &NoiseLattice,
) -> Result<f64> {
    let x_star = forward(model, u_star, lat)?;
    let x_eps = forward(model, &perturb(u_star, v, eps, model.control_set)?, lat)?;
    let var = variation(model, u_star, &x_star, v, lat)?;
    let mut acc = 0.0;
    for n in 0..=model.horizon {
        let d = &(&x_eps.stages[n] - &x_star.stages[n]).scale(1.0 / eps) - var.stage(n);
        acc += lat.expectation(&(&d * &d))?;
    }
    Ok(acc)
}

/// `b = sin x + u`, `sigma = c u`, `l = u^2/2`, `Phi = x^2/2` on stages `n < horizon`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinDrift {
    pub horizon: usize,
    pub c: f64,
}

impl ControlledSystem for SinDrift {
    fn drift(&self, n: usize, x: f64, u: f64) -> Jet {
        if n >= self.horizon {
            return Jet::ZERO;
        }
        Jet::new(x.sin() + u, x.cos(), 1.0)
    }

    fn diffusion(&self, n: usize, _x: f64, u: f64) -> Jet {
        if n >= self.horizon {
            return Jet::ZERO;
        }
        Jet::new(self.c * u, 0.0, self.c)
    }

    fn running_cost(&self, n: usize, _x: f64, u: f64) -> Jet {
        if n >= self.horizon {
            return Jet::ZERO;
        }
        Jet::new(0.5 * u * u, 0.0, u)
    }

    fn terminal_cost(&self, x: f64) -> Jet {
        Jet::new(0.5 * x * x, x, 0.0)
    }
}

impl SinDrift {
    pub fn model(horizon: usize, c: f64, initial_state: f64, control_set: ControlSet) -> Result<ModelSpec> {
        ModelSpec::new(
            horizon,
            initial_state,
            control_set,
            Arc::new(SinDrift { horizon, c }),
        )
    }
}
