//! Brute-force reference computations over explicitly enumerated paths.
//!
//! Every process is stored as one value per full path; conditional
//! expectations are weighted sums over the paths sharing a prefix. Nothing
//! here goes through the lattice reductions or the hand-written whitening.

use nalgebra::DMatrix;

use crate::dynamics::{ControlProcess, ControlledSystem, Jet};
use crate::lattice::{AdaptedValue, QuadratureRule};

pub type PathValue = Vec<f64>;

/// Increment covariance written out directly from the fGn formula.
pub fn fgn_sigma(h: f64, m: usize) -> DMatrix<f64> {
    let gamma = |k: f64| 0.5 * ((k + 1.0).powf(2.0 * h) + (k - 1.0).abs().powf(2.0 * h) - 2.0 * k.powf(2.0 * h));
    DMatrix::from_fn(m, m, |i, j| gamma((i as f64 - j as f64).abs()))
}

pub struct PathSpace {
    q: usize,
    depth: usize,
    prob: Vec<f64>,
    eta: Vec<PathValue>,
    xi: Vec<PathValue>,
    factor: DMatrix<f64>,
}

impl PathSpace {
    /// All `q^depth` paths of the rule, with `xi = L eta` where `L` is
    /// nalgebra's Cholesky factor of `sigma`.
    pub fn new(rule: &QuadratureRule, depth: usize, sigma: &DMatrix<f64>) -> Self {
        let q = rule.order();
        let count = q.pow(depth as u32);
        let factor = sigma
            .clone()
            .cholesky()
            .expect("oracle covariance must be positive definite")
            .l();
        let digit = |path: usize, k: usize| (path / q.pow((depth - 1 - k) as u32)) % q;
        let prob = (0..count)
            .map(|p| (0..depth).map(|k| rule.weights()[digit(p, k)]).product())
            .collect();
        let eta: Vec<PathValue> = (0..depth)
            .map(|k| (0..count).map(|p| rule.nodes()[digit(p, k)]).collect())
            .collect();
        let xi = (0..depth)
            .map(|k| {
                (0..count)
                    .map(|p| (0..=k).map(|j| factor[(k, j)] * eta[j][p]).sum())
                    .collect()
            })
            .collect();
        Self {
            q,
            depth,
            prob,
            eta,
            xi,
            factor,
        }
    }

    pub fn count(&self) -> usize {
        self.prob.len()
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn eta(&self, k: usize) -> &PathValue {
        &self.eta[k]
    }

    pub fn xi(&self, k: usize) -> &PathValue {
        &self.xi[k]
    }

    pub fn factor(&self, n: usize, k: usize) -> f64 {
        self.factor[(n, k)]
    }

    /// Index of the level-`n` node that `path` passes through.
    pub fn prefix(&self, path: usize, n: usize) -> usize {
        path / self.q.pow((self.depth - n) as u32)
    }

    pub fn constant(&self, c: f64) -> PathValue {
        vec![c; self.count()]
    }

    pub fn from_adapted(&self, v: &AdaptedValue) -> PathValue {
        (0..self.count()).map(|p| v.get(self.prefix(p, v.level()))).collect()
    }

    pub fn condexp(&self, v: &[f64], n: usize) -> PathValue {
        let groups = self.q.pow(n as u32);
        let mut num = vec![0.0; groups];
        let mut den = vec![0.0; groups];
        for p in 0..self.count() {
            let g = self.prefix(p, n);
            num[g] += self.prob[p] * v[p];
            den[g] += self.prob[p];
        }
        (0..self.count())
            .map(|p| {
                let g = self.prefix(p, n);
                num[g] / den[g]
            })
            .collect()
    }

    pub fn mean(&self, v: &[f64]) -> f64 {
        v.iter().zip(&self.prob).map(|(x, p)| x * p).sum()
    }

    /// Largest gap between a path value and a lattice value, compared path by path.
    pub fn max_gap(&self, a: &[f64], b: &AdaptedValue) -> f64 {
        a.iter()
            .zip(self.from_adapted(b))
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }
}

pub fn mul(a: &[f64], b: &[f64]) -> PathValue {
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

pub struct OracleBsde {
    pub y: Vec<PathValue>,
    pub z: Vec<PathValue>,
    /// `(E[R_n|F_n], E[eta_n R_n|F_n])` for each `n < N`.
    pub orthogonality: Vec<(PathValue, PathValue)>,
}

/// Backward projections with driver coefficients evaluated per path:
/// `f(k, path, y, z)`, `g(k, path, y, z)` for `k` in `1..=N`.
pub fn solve_bsde(
    space: &PathSpace,
    horizon: usize,
    terminal: PathValue,
    f: impl Fn(usize, usize, f64, f64) -> f64,
    g: impl Fn(usize, usize, f64, f64) -> f64,
) -> OracleBsde {
    let mut y = vec![Vec::new(); horizon + 1];
    let mut z = vec![Vec::new(); horizon + 1];
    let mut orthogonality = vec![(Vec::new(), Vec::new()); horizon];
    y[horizon] = terminal;
    z[horizon] = space.constant(0.0);
    for n in (0..horizon).rev() {
        let k = n + 1;
        let rhs: PathValue = (0..space.count())
            .map(|p| {
                let (yk, zk) = (y[k][p], z[k][p]);
                let gv = g(k, p, yk, zk);
                let noise = if gv == 0.0 { 0.0 } else { gv * space.xi(k)[p] };
                yk + f(k, p, yk, zk) + noise
            })
            .collect();
        y[n] = space.condexp(&rhs, n);
        z[n] = space.condexp(&mul(space.eta(n), &rhs), n);
        let r: PathValue = (0..space.count())
            .map(|p| rhs[p] - y[n][p] - z[n][p] * space.eta(n)[p])
            .collect();
        orthogonality[n] = (space.condexp(&r, n), space.condexp(&mul(space.eta(n), &r), n));
    }
    OracleBsde { y, z, orthogonality }
}

/// Coefficient jets at every path for one stage.
fn jets(
    space: &PathSpace,
    n: usize,
    x: &[f64],
    u: Option<&[f64]>,
    eval: impl Fn(usize, f64, f64) -> Jet,
) -> Vec<Jet> {
    (0..space.count())
        .map(|p| eval(n, x[p], u.map_or(0.0, |u| u[p])))
        .collect()
}

pub struct Trajectory {
    pub u: Vec<PathValue>,
    pub x: Vec<PathValue>,
}

pub fn forward(
    space: &PathSpace,
    system: &dyn ControlledSystem,
    horizon: usize,
    x0: f64,
    u: &ControlProcess,
) -> Trajectory {
    let us: Vec<PathValue> = u.stages().iter().map(|s| space.from_adapted(s)).collect();
    let mut x = vec![space.constant(x0)];
    for n in 0..horizon {
        let next = (0..space.count())
            .map(|p| {
                let (xn, un) = (x[n][p], us[n][p]);
                xn + system.drift(n, xn, un).value + system.diffusion(n, xn, un).value * space.xi(n)[p]
            })
            .collect();
        x.push(next);
    }
    Trajectory { u: us, x }
}

pub fn cost(space: &PathSpace, system: &dyn ControlledSystem, traj: &Trajectory) -> f64 {
    let horizon = traj.u.len();
    let mut total = space.constant(0.0);
    for n in 0..horizon {
        for p in 0..space.count() {
            total[p] += system.running_cost(n, traj.x[n][p], traj.u[n][p]).value;
        }
    }
    for (p, t) in total.iter_mut().enumerate() {
        *t += system.terminal_cost(traj.x[horizon][p]).value;
    }
    space.mean(&total)
}

pub fn variation(
    space: &PathSpace,
    system: &dyn ControlledSystem,
    traj: &Trajectory,
    v: &ControlProcess,
) -> Vec<PathValue> {
    let horizon = traj.u.len();
    let vs: Vec<PathValue> = v.stages().iter().map(|s| space.from_adapted(s)).collect();
    let mut out = vec![space.constant(0.0)];
    for n in 0..horizon {
        let next = (0..space.count())
            .map(|p| {
                let (x, u) = (traj.x[n][p], traj.u[n][p]);
                let (b, s) = (system.drift(n, x, u), system.diffusion(n, x, u));
                let vn = out[n][p];
                vn + b.dx * vn + b.du * vs[n][p] + (s.dx * vn + s.du * vs[n][p]) * space.xi(n)[p]
            })
            .collect();
        out.push(next);
    }
    out
}

/// Adjoint pair for the general noise, plus `rho_n` written with the
/// predictable part `E[xi_n | F_n]` taken by brute force rather than through `c(n,k)`.
pub fn adjoint_and_residual(
    space: &PathSpace,
    system: &dyn ControlledSystem,
    traj: &Trajectory,
) -> (OracleBsde, Vec<PathValue>) {
    let horizon = traj.u.len();
    let terminal = (0..space.count())
        .map(|p| system.terminal_cost(traj.x[horizon][p]).dx)
        .collect();
    let stage_jets = |k: usize| {
        if k >= horizon {
            return (vec![Jet::ZERO; space.count()], vec![Jet::ZERO; space.count()], vec![Jet::ZERO; space.count()]);
        }
        let u = Some(traj.u[k].as_slice());
        (
            jets(space, k, &traj.x[k], u, |n, x, u| system.drift(n, x, u)),
            jets(space, k, &traj.x[k], u, |n, x, u| system.diffusion(n, x, u)),
            jets(space, k, &traj.x[k], u, |n, x, u| system.running_cost(n, x, u)),
        )
    };
    let tables: Vec<_> = (0..=horizon).map(stage_jets).collect();
    let diag = |k: usize| if k < space.depth() { space.factor(k, k) } else { 0.0 };
    let adj = solve_bsde(
        space,
        horizon,
        terminal,
        |k, p, y, z| {
            let (b, s, l) = (&tables[k].0[p], &tables[k].1[p], &tables[k].2[p]);
            b.dx * y + diag(k) * s.dx * z + l.dx
        },
        |k, p, y, _| tables[k].1[p].dx * y,
    );
    let rho = (0..horizon)
        .map(|n| {
            let predictable = space.condexp(space.xi(n), n);
            (0..space.count())
                .map(|p| {
                    let (b, s, l) = (&tables[n].0[p], &tables[n].1[p], &tables[n].2[p]);
                    let (pp, qq) = (adj.y[n][p], adj.z[n][p]);
                    b.du * pp + s.du * pp * predictable[p] + space.factor(n, n) * s.du * qq + l.du
                })
                .collect()
        })
        .collect();
    (adj, rho)
}

/// White-noise adjoint written from scratch: `xi = eta`, unit diagonal, no memory term.
pub fn white_noise_adjoint(
    space: &PathSpace,
    system: &dyn ControlledSystem,
    traj: &Trajectory,
) -> (Vec<PathValue>, Vec<PathValue>, Vec<PathValue>) {
    let horizon = traj.u.len();
    let mut p = vec![Vec::new(); horizon + 1];
    let mut q = vec![Vec::new(); horizon + 1];
    p[horizon] = (0..space.count())
        .map(|i| system.terminal_cost(traj.x[horizon][i]).dx)
        .collect();
    q[horizon] = space.constant(0.0);
    for n in (0..horizon).rev() {
        let k = n + 1;
        let rhs: PathValue = (0..space.count())
            .map(|i| {
                let (pk, qk) = (p[k][i], q[k][i]);
                if k == horizon {
                    return pk;
                }
                let (x, u) = (traj.x[k][i], traj.u[k][i]);
                let (b, s, l) = (system.drift(k, x, u), system.diffusion(k, x, u), system.running_cost(k, x, u));
                pk + b.dx * pk + s.dx * qk + l.dx + s.dx * pk * space.eta(k)[i]
            })
            .collect();
        p[n] = space.condexp(&rhs, n);
        q[n] = space.condexp(&mul(space.eta(n), &rhs), n);
    }
    let rho = (0..horizon)
        .map(|n| {
            (0..space.count())
                .map(|i| {
                    let (x, u) = (traj.x[n][i], traj.u[n][i]);
                    system.drift(n, x, u).du * p[n][i]
                        + system.diffusion(n, x, u).du * q[n][i]
                        + system.running_cost(n, x, u).du
                })
                .collect()
        })
        .collect();
    (p, q, rho)
}

/// Both sides of the duality identity on explicit paths.
pub fn duality_sides(
    space: &PathSpace,
    system: &dyn ControlledSystem,
    traj: &Trajectory,
    v: &ControlProcess,
) -> (f64, f64) {
    let horizon = traj.u.len();
    let var = variation(space, system, traj, v);
    let (adj, _) = adjoint_and_residual(space, system, traj);
    let vs: Vec<PathValue> = v.stages().iter().map(|s| space.from_adapted(s)).collect();
    let terminal: PathValue = (0..space.count())
        .map(|p| system.terminal_cost(traj.x[horizon][p]).dx * var[horizon][p])
        .collect();
    let mut rhs = 0.0;
    for n in 0..horizon {
        let integrand: PathValue = (0..space.count())
            .map(|p| {
                let (x, u) = (traj.x[n][p], traj.u[n][p]);
                let (b, s, l) = (system.drift(n, x, u), system.diffusion(n, x, u), system.running_cost(n, x, u));
                let (pp, qq, vv) = (adj.y[n][p], adj.z[n][p], vs[n][p]);
                let xi = space.xi(n)[p];
                -l.dx * var[n][p] + b.du * pp * vv + s.du * pp * vv * xi + s.du * qq * vv * space.eta(n)[p] * xi
            })
            .collect();
        rhs += space.mean(&integrand);
    }
    (space.mean(&terminal), rhs)
}
