use std::fs::File;
use std::path::{Path, PathBuf};

use serde::Serialize;

use fsmp_core::acceptance::{self, SuiteConfig};
use fsmp_core::bsde::{solve_bsde, DriverSpec};
use fsmp_core::dynamics::{ControlProcess, ModelSpec, StateProcess};
use fsmp_core::lattice::{gauss_hermite, sample_paths, AdaptedValue, NoiseLattice};
use fsmp_core::lq::{lq_fixed_point, verify_sufficiency, verify_uniqueness, FixedPointOptions};
use fsmp_core::noise::{custom_covariance_from_rows, fgn_basis, fgn_covariance, whiten, HurstParameter};
use fsmp_core::smp::{check_stationarity, first_order, optimize, NodeSide, StationarityReport, STATIONARITY_TOL};

use crate::config::{load, BsdeConfig, LqConfig, ModelConfig, TerminalConfig};
use crate::error::{CliError, CliResult};
use crate::output::{matrix_rows, num, OutDir};

pub const DEFAULT_SEED: u64 = 20240601;
pub const DEFAULT_ORDER: usize = 3;
const CHECK_TOL: f64 = 1e-10;

/// Options shared by every subcommand.
#[derive(Debug, Clone)]
pub struct Globals {
    pub seed: u64,
    pub quadrature_order: Option<usize>,
    pub out: Option<PathBuf>,
}

impl Globals {
    fn out_dir(&self) -> CliResult<OutDir> {
        match &self.out {
            Some(p) => OutDir::create(p),
            None => Err(CliError::Config("--out <dir> is required".into())),
        }
    }

    /// The flag wins over the config file.
    fn order(&self, from_config: Option<usize>) -> usize {
        self.quadrature_order.or(from_config).unwrap_or(DEFAULT_ORDER)
    }
}

fn hurst(h: f64) -> CliResult<HurstParameter> {
    Ok(HurstParameter::new(h)?)
}

/// Lattice of `depth` stages over a basis of size `depth + 1`.
fn lattice(h: f64, depth: usize, order: usize) -> CliResult<NoiseLattice> {
    let basis = fgn_basis(hurst(h)?, depth + 1)?;
    Ok(NoiseLattice::new(gauss_hermite(order)?, depth, basis)?)
}

fn adapted_rows<'a>(
    lat: &'a NoiseLattice,
    stages: impl IntoIterator<Item = (usize, Vec<&'a AdaptedValue>)> + 'a,
) -> impl Iterator<Item = Vec<String>> + 'a {
    stages.into_iter().flat_map(move |(n, values)| {
        let probs = lat.probabilities(n);
        (0..probs.len())
            .map(|i| {
                let mut row = vec![n.to_string(), i.to_string()];
                row.extend(values.iter().map(|v| num(v.get(i))));
                row.push(num(probs[i]));
                row
            })
            .collect::<Vec<_>>()
    })
}

fn write_control(out: &OutDir, name: &str, lat: &NoiseLattice, u: &ControlProcess) -> CliResult<()> {
    let stages = u.stages().iter().enumerate().map(|(n, s)| (n, vec![s]));
    out.csv(name, &["stage", "node_index", "value", "probability"], adapted_rows(lat, stages))
}

fn write_state(out: &OutDir, lat: &NoiseLattice, x: &StateProcess) -> CliResult<()> {
    let stages = x.stages().iter().enumerate().map(|(n, s)| (n, vec![s]));
    out.csv("state.csv", &["stage", "node_index", "value", "probability"], adapted_rows(lat, stages))
}

/// Reads a control from CSV with columns `stage,node_index,value`
/// (extra columns such as `probability` are ignored). Every node of every
/// stage must appear exactly once.
pub fn read_control(path: &Path, lat: &NoiseLattice, horizon: usize) -> CliResult<ControlProcess> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let bad = |m: String| CliError::Config(format!("{}: {m}", path.display()));
    let headers = reader.headers().map_err(|e| bad(e.to_string()))?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| bad(format!("missing column {name}")))
    };
    let (cs, ci, cv) = (column("stage")?, column("node_index")?, column("value")?);
    let mut values: Vec<Vec<Option<f64>>> = (0..horizon).map(|n| vec![None; lat.node_count(n)]).collect();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| bad(e.to_string()))?;
        let field = |c: usize| record.get(c).unwrap_or("").trim().to_string();
        let at = |what: &str| format!("row {}: bad {what}", line + 2);
        let n: usize = field(cs).parse().map_err(|_| bad(at("stage")))?;
        let i: usize = field(ci).parse().map_err(|_| bad(at("node_index")))?;
        let v: f64 = field(cv).parse().map_err(|_| bad(at("value")))?;
        let slot = values
            .get_mut(n)
            .and_then(|s| s.get_mut(i))
            .ok_or_else(|| bad(format!("row {}: node ({n}, {i}) is outside the lattice", line + 2)))?;
        if slot.replace(v).is_some() {
            return Err(bad(format!("node ({n}, {i}) appears twice")));
        }
    }
    let stages = values
        .into_iter()
        .enumerate()
        .map(|(n, vals)| {
            let vals: Option<Vec<f64>> = vals.into_iter().collect();
            let vals = vals.ok_or_else(|| bad(format!("stage {n} is missing nodes")))?;
            Ok(AdaptedValue::from_values(lat.arity(), n, vals)?)
        })
        .collect::<CliResult<Vec<_>>>()?;
    Ok(ControlProcess::new(stages)?)
}

fn require(passed: bool, what: &str) -> CliResult<()> {
    if passed {
        Ok(())
    } else {
        Err(CliError::CheckFailed(format!("{what}; see report.json")))
    }
}

// ---------------------------------------------------------------- whiten

#[derive(Debug, Clone, Default)]
pub struct WhitenArgs {
    pub hurst: Option<f64>,
    pub steps: Option<usize>,
    pub cov_file: Option<PathBuf>,
    pub sample_paths: Option<usize>,
}

#[derive(Serialize)]
struct WhitenChecks {
    size: usize,
    hurst: Option<f64>,
    reconstruction_error: f64,
    inverse_error: f64,
    tolerance: f64,
    passed: bool,
}

fn read_rows(path: &Path) -> CliResult<Vec<Vec<f64>>> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(false).from_reader(file);
    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let row = record
            .iter()
            .map(|s| s.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| CliError::Config(format!("{}: line {}: {e}", path.display(), line + 1)))?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn whiten_cmd(g: &Globals, args: &WhitenArgs) -> CliResult<String> {
    let cov = match (args.hurst, &args.cov_file) {
        (Some(h), None) => {
            let steps = args
                .steps
                .ok_or_else(|| CliError::Config("--hurst needs --steps".into()))?;
            fgn_covariance(hurst(h)?, steps)?
        }
        (None, Some(path)) => custom_covariance_from_rows(&read_rows(path)?)?,
        _ => return Err(CliError::Config("give exactly one of --hurst or --cov-file".into())),
    };
    let out = g.out_dir()?;
    let basis = whiten(&cov)?;
    out.csv("sigma.csv", &["n", "k", "value"], matrix_rows(cov.sigma()))?;
    out.csv("b.csv", &["n", "k", "value"], matrix_rows(basis.b_mat()))?;
    out.csv("a.csv", &["n", "k", "value"], matrix_rows(basis.a_mat()))?;
    out.csv("c.csv", &["n", "k", "value"], matrix_rows(basis.c_mat()))?;
    let checks = WhitenChecks {
        size: basis.size(),
        hurst: args.hurst,
        reconstruction_error: basis.reconstruction_error(&cov),
        inverse_error: basis.inverse_error(),
        tolerance: CHECK_TOL,
        passed: false,
    };
    let checks = WhitenChecks {
        passed: checks.reconstruction_error <= CHECK_TOL && checks.inverse_error <= CHECK_TOL,
        ..checks
    };
    out.json("checks.json", &checks)?;
    if let Some(count) = args.sample_paths {
        let m = basis.size();
        let paths = sample_paths(&basis, m, count, g.seed)?;
        let prob = num(1.0 / count as f64);
        let rows = (0..count).flat_map(|p| {
            let prob = prob.clone();
            let paths = &paths;
            (0..m).map(move |n| {
                vec![
                    p.to_string(),
                    n.to_string(),
                    num(paths.eta[(p, n)]),
                    num(paths.xi[(p, n)]),
                    prob.clone(),
                ]
            })
        });
        out.csv("paths.csv", &["path_index", "stage", "eta", "xi", "probability"], rows)?;
    }
    require(checks.passed, "whitening round-trip exceeds 1e-10")?;
    Ok(format!(
        "whitened {} steps: max|bb'-S| = {:.3e}, max|ab-I| = {:.3e}",
        checks.size, checks.reconstruction_error, checks.inverse_error
    ))
}

// ---------------------------------------------------------------- solve-bsde

#[derive(Serialize)]
struct BsdeReport {
    horizon: usize,
    lattice_depth: usize,
    hurst: f64,
    quadrature_order: usize,
    terminal_noise_free: bool,
    y0: f64,
    max_orthogonality_error: f64,
    tolerance: f64,
    passed: bool,
}

fn terminal_value(t: &TerminalConfig, lat: &NoiseLattice, horizon: usize) -> CliResult<AdaptedValue> {
    let check_stage = |k: usize| {
        if k < horizon {
            Ok(())
        } else {
            Err(CliError::Config(format!(
                "terminal stage {k} is not known at horizon {horizon}"
            )))
        }
    };
    Ok(match *t {
        TerminalConfig::Constant { value } => lat.constant(horizon, value),
        TerminalConfig::Xi { stage } => {
            check_stage(stage)?;
            lat.noise_value(stage)?.lift(horizon)
        }
        TerminalConfig::Eta { stage } => {
            check_stage(stage)?;
            lat.white_value(stage)?.lift(horizon)
        }
        TerminalConfig::XiSumSquared => {
            let mut sum = lat.zeros(horizon);
            for k in 0..horizon {
                sum = &sum + &lat.noise_value(k)?;
            }
            &sum * &sum
        }
    })
}

pub fn solve_bsde_cmd(g: &Globals, config: &Path) -> CliResult<String> {
    let cfg: BsdeConfig = load(config)?;
    let n = cfg.horizon;
    if n == 0 || cfg.f.len() != n || cfg.g.len() != n {
        return Err(CliError::Config(format!(
            "horizon {n} needs {n} rows in f and in g"
        )));
    }
    let noise_free = cfg.g[n - 1] == [0.0; 3];
    let depth = if noise_free { n } else { n + 1 };
    let order = g.order(cfg.quadrature_order);
    let lat = lattice(cfg.hurst, depth, order)?;
    let terminal = terminal_value(&cfg.terminal, &lat, n)?;
    let driver = DriverSpec::linear(n, terminal, cfg.f.clone(), cfg.g.clone())?;
    let sol = solve_bsde(&driver, &lat)?;
    let checks = sol.orthogonality(&lat)?;
    let out = g.out_dir()?;
    let zero = |k: usize| lat.zeros(k);
    let zeros: Vec<_> = (0..=n).map(zero).collect();
    let stages = (0..=n).map(|k| {
        let (m, e) = match checks.get(k) {
            Some(c) => (&c.mean, &c.eta),
            None => (&zeros[k], &zeros[k]),
        };
        (k, vec![sol.y(k), sol.z(k), m, e])
    });
    let rows = adapted_rows(&lat, stages).map(|mut r| {
        r.pop();
        r
    });
    out.csv(
        "solution.csv",
        &["stage", "node_index", "Y", "Z", "R_mean_check", "R_eta_check"],
        rows,
    )?;
    let worst = sol.max_orthogonality_error(&lat)?;
    let report = BsdeReport {
        horizon: n,
        lattice_depth: depth,
        hurst: cfg.hurst,
        quadrature_order: order,
        terminal_noise_free: noise_free,
        y0: sol.y(0).get(0),
        max_orthogonality_error: worst,
        tolerance: CHECK_TOL,
        passed: worst <= CHECK_TOL,
    };
    out.json("report.json", &report)?;
    require(report.passed, "residual orthogonality exceeds 1e-10")?;
    Ok(format!("solved BSDE: Y_0 = {:.12}, orthogonality {worst:.3e}", report.y0))
}

// ---------------------------------------------------------------- lq

#[derive(Serialize)]
struct LqReport {
    cost: f64,
    iterations: usize,
    fixed_point_residual: f64,
    final_damping: f64,
    stationarity: StationarityReport,
    sufficiency: fsmp_core::lq::SufficiencyReport,
    uniqueness: fsmp_core::lq::UniquenessReport,
    passed: bool,
}

pub fn lq_cmd(g: &Globals, config: &Path, damping: Option<f64>) -> CliResult<String> {
    let cfg: LqConfig = load(config)?;
    let spec = cfg.spec();
    spec.validate()?;
    let defaults = FixedPointOptions::default();
    let options = FixedPointOptions {
        damping: damping.or(cfg.damping).unwrap_or(defaults.damping),
        tol: cfg.tol.unwrap_or(defaults.tol),
        max_iter: cfg.max_iter.unwrap_or(defaults.max_iter),
    };
    let lat = lattice(cfg.hurst, spec.horizon, g.order(cfg.quadrature_order))?;
    let out = g.out_dir()?;
    let sol = lq_fixed_point(&spec, &lat, &options)?;
    let model = spec.model()?;
    let fo = first_order(&model, &sol.control, &lat)?;
    let stationarity = check_stationarity(&fo.residual, &sol.control, model.control_set(), STATIONARITY_TOL);
    let sufficiency = verify_sufficiency(&spec, &sol.control, &lat, cfg.sufficiency_trials.unwrap_or(50), g.seed)?;
    let uniqueness = verify_uniqueness(&spec, &lat, cfg.uniqueness_starts.unwrap_or(2), g.seed, &options)?;

    write_control(&out, "u_star.csv", &lat, &sol.control)?;
    write_state(&out, &lat, &sol.state)?;
    let adjoint = (0..=spec.horizon).map(|k| (k, vec![sol.adjoint.y(k), sol.adjoint.z(k)]));
    out.csv("adjoint.csv", &["stage", "node_index", "p", "q", "probability"], adapted_rows(&lat, adjoint))?;
    out.csv(
        "iterations.csv",
        &["iter", "J", "residual", "damping"],
        sol.trace
            .iter()
            .map(|s| vec![s.iter.to_string(), num(s.cost), num(s.residual), num(s.damping)]),
    )?;
    let passed = stationarity.passed && sufficiency.passed && uniqueness.passed;
    let report = LqReport {
        cost: sol.cost,
        iterations: sol.iterations,
        fixed_point_residual: sol.residual,
        final_damping: sol.damping,
        stationarity,
        sufficiency,
        uniqueness,
        passed,
    };
    out.json("report.json", &report)?;
    require(passed, "LQ certificate failed")?;
    Ok(format!(
        "LQ solved in {} iterations: J = {:.12}, worst residual {:.3e}",
        report.iterations, report.cost, report.stationarity.worst_violation
    ))
}

// ---------------------------------------------------------------- smp-check / optimize

fn model_setup(g: &Globals, config: &Path) -> CliResult<(ModelConfig, ModelSpec, NoiseLattice)> {
    let cfg: ModelConfig = load(config)?;
    let model = cfg.build()?;
    let lat = lattice(cfg.hurst, cfg.horizon, g.order(cfg.quadrature_order))?;
    Ok((cfg, model, lat))
}

fn residual_rows(report: &StationarityReport) -> impl Iterator<Item = Vec<String>> + '_ {
    report.nodes.iter().map(|s| {
        vec![
            s.stage.to_string(),
            s.node.to_string(),
            num(s.rho),
            num(s.control),
            if s.passed { "pass" } else { "fail" }.to_string(),
            num(s.violation),
        ]
    })
}

#[derive(Serialize)]
struct SmpReport {
    cost: f64,
    active_nodes: usize,
    stationarity: StationarityReport,
}

pub fn smp_check_cmd(g: &Globals, config: &Path, control: &Path) -> CliResult<String> {
    let (cfg, model, lat) = model_setup(g, config)?;
    let u = read_control(control, &lat, cfg.horizon)?;
    model.check_control(&u)?;
    let fo = first_order(&model, &u, &lat)?;
    let tol = cfg.optimize_options()?.tol;
    let report = check_stationarity(&fo.residual, &u, model.control_set(), tol);
    let out = g.out_dir()?;
    out.csv(
        "residual.csv",
        &["stage", "node_index", "rho", "u_star", "classification", "violation"],
        residual_rows(&report),
    )?;
    let summary = SmpReport {
        cost: fo.cost,
        active_nodes: report.nodes.iter().filter(|s| s.side != NodeSide::Interior).count(),
        stationarity: report,
    };
    out.json("report.json", &summary)?;
    let s = &summary.stationarity;
    require(s.passed, "control is not stationary")?;
    Ok(format!("stationary at tol {:.1e}: worst violation {:.3e}", s.tolerance, s.worst_violation))
}

#[derive(Serialize)]
struct OptimizeReport {
    cost: f64,
    initial_cost: f64,
    iterations: usize,
    stationarity: StationarityReport,
}

pub fn optimize_cmd(g: &Globals, config: &Path, control: Option<&Path>) -> CliResult<String> {
    let (cfg, model, lat) = model_setup(g, config)?;
    let set = model.control_set();
    let start = match control {
        Some(p) => read_control(p, &lat, cfg.horizon)?,
        None => ControlProcess::zeros(&lat, cfg.horizon).map_stages(|_, s| s.map(|x| set.project(x))),
    };
    let options = cfg.optimize_options()?;
    let res = optimize(&model, &start, &lat, &options)?;
    let out = g.out_dir()?;
    write_control(&out, "control.csv", &lat, &res.control)?;
    let state = fsmp_core::dynamics::forward(&model, &res.control, &lat)?;
    write_state(&out, &lat, &state)?;
    out.csv(
        "trace.csv",
        &["iter", "J", "step", "worst_residual"],
        res.trace
            .iter()
            .map(|t| vec![t.iter.to_string(), num(t.cost), num(t.step), num(t.worst_residual)]),
    )?;
    let report = OptimizeReport {
        cost: res.cost,
        initial_cost: res.trace.first().map_or(res.cost, |t| t.cost),
        iterations: res.iterations,
        stationarity: res.report,
    };
    out.json("report.json", &report)?;
    if !report.stationarity.passed {
        return Err(CliError::NotConverged(format!(
            "no stationary point after {} iterations (worst residual {:.3e})",
            report.iterations, report.stationarity.worst_violation
        )));
    }
    Ok(format!(
        "stationary after {} iterations: J = {:.12} (from {:.12})",
        report.iterations, report.cost, report.initial_cost
    ))
}

// ---------------------------------------------------------------- selftest

pub fn selftest_cmd(g: &Globals) -> CliResult<String> {
    let config = SuiteConfig {
        seed: g.seed,
        quadrature_order: g.order(None),
    };
    gauss_hermite(config.quadrature_order)?;
    let report = acceptance::run(config);
    let text = report.render();
    print!("{text}");
    if g.out.is_some() {
        let out = g.out_dir()?;
        out.text("selftest.txt", &text)?;
        out.json("selftest.json", &report)?;
    }
    require(report.passed(), "acceptance suite")?;
    Ok("all acceptance criteria passed".into())
}
