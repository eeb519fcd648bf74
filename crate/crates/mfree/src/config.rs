//! Run configuration: TOML ingestion with per-benchmark defaults, strict
//! unknown-key rejection, and a lossless echo for run metadata.
//!
//! Internally everything is SI. Dimensional inputs may be given in
//! millimetres by setting `units = "mm"`; they are converted on ingestion
//! and the echoed configuration is always SI. Reference surface-stress CSVs
//! are defined in mm/MPa (the format of the external comparison data) and
//! are converted by their reader, independent of this switch.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adapt::{AdaptivityParams, SOLVE_ORDERS};
use crate::system::SolverConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    /// Malformed TOML, an unknown key, or a type mismatch; the message names
    /// the offending key.
    #[error("config parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("unknown problem '{got}'; expected peak, fretting, or boussinesq")]
    UnknownProblem { got: String },
    #[error("config constraint: {what}")]
    Constraint { what: String },
}

fn constraint(what: impl Into<String>) -> ConfigError {
    ConfigError::Constraint { what: what.into() }
}

/// The three built-in benchmarks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Problem {
    Peak,
    Fretting,
    Boussinesq,
}

impl Problem {
    pub const ALL: [Problem; 3] = [Problem::Peak, Problem::Fretting, Problem::Boussinesq];

    pub fn name(self) -> &'static str {
        match self {
            Problem::Peak => "peak",
            Problem::Fretting => "fretting",
            Problem::Boussinesq => "boussinesq",
        }
    }
}

impl fmt::Display for Problem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Problem {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "peak" => Ok(Problem::Peak),
            "fretting" => Ok(Problem::Fretting),
            "boussinesq" => Ok(Problem::Boussinesq),
            other => Err(ConfigError::UnknownProblem {
                got: other.to_string(),
            }),
        }
    }
}

/// Grid for the unrefined convergence study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyGrid {
    /// Spacings to solve at.
    pub h: Vec<f64>,
    /// Orders to solve at.
    pub m: Vec<u32>,
    /// Repetitions with distinct seeds per (h, m) cell.
    pub seeds: u64,
}

/// Fully resolved run configuration. Serializing and re-parsing is the
/// identity; defaults depend on the chosen problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: Problem,
    pub alpha_h: f64,
    pub beta_h: f64,
    pub lambda_h: f64,
    pub theta_h: f64,
    pub alpha_p: f64,
    pub beta_p: f64,
    pub lambda_p: f64,
    pub theta_p: f64,
    /// Coarsest node spacing (m).
    pub h_max: f64,
    pub n_max: usize,
    pub n_iter: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    pub tolerance: f64,
    pub max_iterations: usize,
    pub drop_tolerance: f64,
    pub fill_factor: f64,
    pub phs_exponent: u32,
    /// Orders the initial field and study grids may use; a subset of the
    /// solver's supported set.
    pub allowed_orders: Vec<u32>,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<String>,
    /// Reference surface-stress CSV (`x,sigma_xx` in mm/MPa).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub study: Option<StudyGrid>,
}

/// Raw key-value form: every key optional, unknown keys rejected by serde.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    problem: Option<Problem>,
    /// "si" (default) or "mm"; converts dimensional keys on ingestion.
    units: Option<String>,
    alpha_h: Option<f64>,
    beta_h: Option<f64>,
    lambda_h: Option<f64>,
    theta_h: Option<f64>,
    alpha_p: Option<f64>,
    beta_p: Option<f64>,
    lambda_p: Option<f64>,
    theta_p: Option<f64>,
    h_max: Option<f64>,
    n_max: Option<usize>,
    n_iter: Option<usize>,
    gamma: Option<f64>,
    tolerance: Option<f64>,
    max_iterations: Option<usize>,
    drop_tolerance: Option<f64>,
    fill_factor: Option<f64>,
    phs_exponent: Option<u32>,
    allowed_orders: Option<Vec<u32>>,
    seed: Option<u64>,
    out: Option<String>,
    reference: Option<String>,
    study: Option<StudyGrid>,
}

impl RunConfig {
    /// The per-benchmark default parameter tables.
    pub fn defaults(problem: Problem) -> RunConfig {
        let solver = SolverConfig::default();
        let mut cfg = RunConfig {
            problem,
            alpha_h: 0.0,
            beta_h: 0.0,
            lambda_h: 1.0,
            theta_h: 1.0,
            alpha_p: 0.0,
            beta_p: 0.0,
            lambda_p: 1.0,
            theta_p: 1.0,
            h_max: 0.0,
            n_max: 0,
            n_iter: 0,
            gamma: None,
            tolerance: solver.tolerance,
            max_iterations: solver.max_iterations,
            drop_tolerance: solver.drop_tolerance,
            fill_factor: solver.fill_factor,
            phs_exponent: crate::approx::DEFAULT_PHS_EXPONENT,
            allowed_orders: SOLVE_ORDERS.to_vec(),
            seed: 0,
            out: None,
            reference: None,
            study: None,
        };
        match problem {
            Problem::Peak => {
                cfg.alpha_h = 0.225;
                cfg.beta_h = 0.175;
                cfg.lambda_h = 2.625;
                cfg.theta_h = 1.01;
                cfg.alpha_p = 0.05;
                cfg.beta_p = 1e-4;
                cfg.lambda_p = 5.0;
                cfg.theta_p = 1.258;
                cfg.h_max = 0.1;
                cfg.n_max = 250_000;
                cfg.n_iter = 70;
            }
            Problem::Fretting => {
                cfg.alpha_h = 1e-4;
                cfg.beta_h = 5e-5;
                cfg.lambda_h = 5.0;
                cfg.theta_h = 1.05;
                cfg.alpha_p = 0.1;
                cfg.beta_p = 1e-3;
                cfg.lambda_p = 4.0;
                cfg.theta_p = 1.05;
                cfg.h_max = 2.5e-4;
                cfg.n_max = 500_000;
                cfg.n_iter = 19;
            }
            Problem::Boussinesq => {
                cfg.alpha_h = 1e-3;
                cfg.beta_h = 1e-3;
                cfg.lambda_h = 3.75;
                cfg.theta_h = 1.01;
                cfg.alpha_p = 1e-2;
                cfg.beta_p = 1e-4;
                cfg.lambda_p = 3.0;
                cfg.theta_p = 1.5;
                cfg.h_max = 0.04;
                cfg.n_max = 70_000;
                cfg.n_iter = 20;
            }
        }
        cfg
    }

    /// The adaptivity slice of the configuration.
    pub fn adaptivity(&self) -> AdaptivityParams {
        AdaptivityParams {
            alpha_h: self.alpha_h,
            beta_h: self.beta_h,
            lambda_h: self.lambda_h,
            theta_h: self.theta_h,
            alpha_p: self.alpha_p,
            beta_p: self.beta_p,
            lambda_p: self.lambda_p,
            theta_p: self.theta_p,
            h_max: self.h_max,
            n_max: self.n_max,
            n_iter: self.n_iter,
            gamma: self.gamma,
        }
    }

    /// The linear-solver slice of the configuration.
    pub fn solver(&self) -> SolverConfig {
        SolverConfig {
            tolerance: self.tolerance,
            max_iterations: self.max_iterations,
            drop_tolerance: self.drop_tolerance,
            fill_factor: self.fill_factor,
        }
    }

    /// Checks every cross-key constraint; errors name the offending keys.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.adaptivity()
            .validate()
            .map_err(|e| constraint(e.to_string()))?;
        if self.allowed_orders.is_empty() {
            return Err(constraint("allowed_orders must not be empty"));
        }
        for &m in &self.allowed_orders {
            if !SOLVE_ORDERS.contains(&m) {
                return Err(constraint(format!(
                    "allowed_orders contains {m}; supported orders are {SOLVE_ORDERS:?}"
                )));
            }
        }
        if !self.allowed_orders.windows(2).all(|w| w[0] < w[1]) {
            return Err(constraint(
                "allowed_orders must be strictly ascending with no duplicates",
            ));
        }
        if self.phs_exponent == 0 {
            return Err(constraint("phs_exponent must be at least 1"));
        }
        if !(self.tolerance > 0.0) {
            return Err(constraint(format!(
                "tolerance must be positive, got {}",
                self.tolerance
            )));
        }
        if self.max_iterations == 0 {
            return Err(constraint("max_iterations must be at least 1"));
        }
        if !(self.drop_tolerance > 0.0) || !(self.fill_factor > 0.0) {
            return Err(constraint(
                "drop_tolerance and fill_factor must be positive",
            ));
        }
        if let Some(g) = self.gamma {
            if !(g > 0.0) {
                return Err(constraint(format!("gamma must be positive, got {g}")));
            }
        }
        if let Some(study) = &self.study {
            if study.h.is_empty() || study.h.iter().any(|&h| !(h > 0.0)) {
                return Err(constraint("study.h must be non-empty and positive"));
            }
            if study.m.is_empty() {
                return Err(constraint("study.m must not be empty"));
            }
            for &m in &study.m {
                if !self.allowed_orders.contains(&m) {
                    return Err(constraint(format!(
                        "study.m contains {m}, which is outside allowed_orders"
                    )));
                }
            }
            if study.seeds == 0 {
                return Err(constraint("study.seeds must be at least 1"));
            }
        }
        Ok(())
    }

    /// Lossless TOML echo; `parse_config` maps it back to an equal value.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration serializes")
    }
}

/// Parses key-value text, resolving missing keys from the problem's default
/// table. The `problem` key is required (there is no default benchmark);
/// `problem_override` takes precedence when set, which is how command-line
/// flags beat the file.
pub fn load_config(text: &str, problem_override: Option<Problem>) -> Result<RunConfig, ConfigError> {
    let raw: RawConfig = toml::from_str(text)?;
    let problem = problem_override
        .or(raw.problem)
        .ok_or_else(|| constraint("problem must be set (peak, fretting, or boussinesq)"))?;
    let mut cfg = RunConfig::defaults(problem);

    let scale = match raw.units.as_deref() {
        None | Some("si") => 1.0,
        Some("mm") => 1e-3,
        Some(other) => {
            return Err(constraint(format!(
                "units must be \"si\" or \"mm\", got \"{other}\""
            )))
        }
    };

    macro_rules! overlay {
        ($($field:ident),* $(,)?) => {
            $(if let Some(v) = raw.$field { cfg.$field = v; })*
        };
    }
    overlay!(
        alpha_h, beta_h, lambda_h, theta_h, alpha_p, beta_p, lambda_p, theta_p, n_max, n_iter,
        tolerance, max_iterations, drop_tolerance, fill_factor, phs_exponent, allowed_orders,
        seed,
    );
    if let Some(study) = raw.study {
        cfg.study = Some(study);
    }
    if let Some(h) = raw.h_max {
        cfg.h_max = h * scale;
    }
    if let Some(g) = raw.gamma {
        cfg.gamma = Some(g);
    }
    if let Some(out) = raw.out {
        cfg.out = Some(out);
    }
    if let Some(reference) = raw.reference {
        cfg.reference = Some(reference);
    }
    if let Some(study) = &mut cfg.study {
        for h in &mut study.h {
            *h *= scale;
        }
    }

    cfg.validate()?;
    Ok(cfg)
}

/// [`load_config`] without an external problem override.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    load_config(text, None)
}
