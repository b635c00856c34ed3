//! JSON run configurations. Unknown keys are rejected everywhere.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Deserialize;

use fsmp_core::dynamics::{ControlSet, ModelSpec, SinDrift};
use fsmp_core::lq::LqSpec;
use fsmp_core::smp::OptimizeOptions;

use crate::error::{CliError, CliResult};

pub fn load<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    // serde_json reports "at line L column C"
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlSetConfig {
    Unconstrained,
    Box([f64; 2]),
}

impl ControlSetConfig {
    pub fn build(self) -> CliResult<ControlSet> {
        match self {
            ControlSetConfig::Unconstrained => Ok(ControlSet::Unconstrained),
            ControlSetConfig::Box([lo, hi]) => Ok(ControlSet::new_box(lo, hi)?),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelKind {
    Lq {
        #[serde(rename = "A")]
        a: Vec<f64>,
        #[serde(rename = "B")]
        b: Vec<f64>,
        #[serde(rename = "C")]
        c: Vec<f64>,
        #[serde(rename = "D")]
        d: Vec<f64>,
        #[serde(rename = "Q")]
        q: Vec<f64>,
        #[serde(rename = "R")]
        r: Vec<f64>,
        #[serde(rename = "G")]
        g: f64,
    },
    SinDrift {
        c: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub tol: Option<f64>,
    pub max_iter: Option<usize>,
    pub initial_step: Option<f64>,
}

/// Model configuration used by `smp-check` and `optimize`.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub horizon: usize,
    pub initial_state: f64,
    pub model: ModelKind,
    #[serde(default = "unconstrained")]
    pub control_set: ControlSetConfig,
    pub hurst: f64,
    pub quadrature_order: Option<usize>,
    pub optimizer: Option<OptimizerConfig>,
}

fn unconstrained() -> ControlSetConfig {
    ControlSetConfig::Unconstrained
}

impl ModelConfig {
    pub fn lq_spec(&self) -> Option<LqSpec> {
        match &self.model {
            ModelKind::Lq { a, b, c, d, q, r, g } => Some(LqSpec {
                horizon: self.horizon,
                a: a.clone(),
                b: b.clone(),
                c: c.clone(),
                d: d.clone(),
                q: q.clone(),
                r: r.clone(),
                g: *g,
                x: self.initial_state,
            }),
            ModelKind::SinDrift { .. } => None,
        }
    }

    pub fn build(&self) -> CliResult<ModelSpec> {
        let set = self.control_set.build()?;
        match &self.model {
            ModelKind::Lq { .. } => Ok(self.lq_spec().expect("lq model").model_with(set)?),
            ModelKind::SinDrift { c } => Ok(SinDrift::model(self.horizon, *c, self.initial_state, set)?),
        }
    }

    pub fn optimize_options(&self) -> CliResult<OptimizeOptions> {
        let mut opts = OptimizeOptions::default();
        if let Some(o) = self.optimizer {
            if let Some(tol) = o.tol {
                opts.tol = tol;
            }
            if let Some(m) = o.max_iter {
                opts.max_iter = m;
            }
            if let Some(s) = o.initial_step {
                opts.step.initial_step = s;
            }
        }
        if !(opts.tol > 0.0 && opts.step.initial_step > 0.0) {
            return Err(CliError::Config("optimizer tol and initial_step must be positive".into()));
        }
        Ok(opts)
    }
}

/// `lq` configuration: the LQ coefficients plus lattice and solver settings.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LqConfig {
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
    pub hurst: f64,
    pub quadrature_order: Option<usize>,
    pub damping: Option<f64>,
    pub tol: Option<f64>,
    pub max_iter: Option<usize>,
    pub sufficiency_trials: Option<usize>,
    pub uniqueness_starts: Option<usize>,
}

impl LqConfig {
    pub fn spec(&self) -> LqSpec {
        LqSpec {
            horizon: self.horizon,
            a: self.a.clone(),
            b: self.b.clone(),
            c: self.c.clone(),
            d: self.d.clone(),
            q: self.q.clone(),
            r: self.r.clone(),
            g: self.g,
            x: self.x,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum TerminalConfig {
    Constant { value: f64 },
    /// `xi_stage`, which must be known at the horizon.
    Xi { stage: usize },
    Eta { stage: usize },
    /// `(sum_{k<N} xi_k)^2`.
    XiSumSquared,
}

/// Linear BSDE: `f(n, y, z) = f[n-1][0] y + f[n-1][1] z + f[n-1][2]`, likewise `g`.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BsdeConfig {
    pub horizon: usize,
    pub hurst: f64,
    pub quadrature_order: Option<usize>,
    pub terminal: TerminalConfig,
    pub f: Vec<[f64; 3]>,
    pub g: Vec<[f64; 3]>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_config_variants() {
        let c: ModelConfig = serde_json::from_str(
            r#"{"horizon":3,"initial_state":1.0,"model":{"type":"sin_drift","c":0.5},
                "control_set":{"box":[-1,1]},"hurst":0.7,"quadrature_order":3}"#,
        )
        .unwrap();
        assert_eq!(c.control_set, ControlSetConfig::Box([-1.0, 1.0]));
        assert!(c.build().is_ok());
        let c: ModelConfig = serde_json::from_str(
            r#"{"horizon":1,"initial_state":1.0,"model":{"type":"lq","A":[0],"B":[1],"C":[0],"D":[1],"Q":[0],"R":[1],"G":1},
                "control_set":"unconstrained","hurst":0.5}"#,
        )
        .unwrap();
        assert_eq!(c.lq_spec().unwrap().x, 1.0);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for bad in [
            r#"{"horizon":3,"initial_state":1.0,"model":{"type":"sin_drift","c":0.5},"hurst":0.7,"extra":1}"#,
            r#"{"horizon":3,"initial_state":1.0,"model":{"type":"sin_drift","c":0.5,"k":2},"hurst":0.7}"#,
            r#"{"horizon":3,"initial_state":1.0,"model":{"type":"cubic"},"hurst":0.7}"#,
        ] {
            assert!(serde_json::from_str::<ModelConfig>(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn bsde_terminals() {
        let c: BsdeConfig = serde_json::from_str(
            r#"{"horizon":2,"hurst":0.7,"terminal":{"type":"xi","stage":1},"f":[[0,0,0],[0,0,0]],"g":[[0,0,0],[0,0,0]]}"#,
        )
        .unwrap();
        assert_eq!(c.terminal, TerminalConfig::Xi { stage: 1 });
        let c: BsdeConfig = serde_json::from_str(
            r#"{"horizon":2,"hurst":0.7,"terminal":{"type":"xi_sum_squared"},"f":[[0,0,0],[0,0,0]],"g":[[0,0,0],[0,0,0]]}"#,
        )
        .unwrap();
        assert_eq!(c.terminal, TerminalConfig::XiSumSquared);
    }
}
