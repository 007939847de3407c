//! `key = value` run configuration with command-line overrides.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::deflation::DeflationSettings;
use crate::error::{Error, Result};
use crate::objective::PenaltyParams;
use crate::optimizer::{DesignProblem, OptimizerSettings};
use crate::topderiv::PenaltyTdVariant;

/// Every accepted key, in echo order.
pub const KEYS: [&str; 19] = [
    "mesh_n",
    "alpha_L",
    "alpha_U",
    "u_t",
    "dt",
    "V_L",
    "V_U",
    "gamma",
    "delta",
    "eps_theta",
    "max_iterations",
    "kappa_initial",
    "kappa_min",
    "deflation_rounds",
    "penalty_td_variant",
    "r_min",
    "exponent_min",
    "exponent_max",
    "output_dir",
];

/// Line number reported for values given on the command line.
pub const COMMAND_LINE: usize = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mesh_n: usize,
    pub alpha_l: f64,
    pub alpha_u: f64,
    pub u_t: f64,
    pub dt: f64,
    pub volume_lower: f64,
    pub volume_upper: f64,
    pub gamma: f64,
    pub delta: f64,
    pub eps_theta: f64,
    pub max_iterations: usize,
    pub kappa_initial: f64,
    pub kappa_min: f64,
    pub deflation_rounds: usize,
    pub penalty_td_variant: PenaltyTdVariant,
    pub r_min: f64,
    pub exponent_min: f64,
    pub exponent_max: f64,
    pub output_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let problem = DesignProblem::default();
        let opt = OptimizerSettings::default();
        let pen = PenaltyParams::default();
        RunConfig {
            mesh_n: 70,
            alpha_l: problem.alpha_lower,
            alpha_u: problem.alpha_upper,
            u_t: problem.u_t,
            dt: 1e-3,
            volume_lower: opt.volume_lower,
            volume_upper: opt.volume_upper,
            gamma: pen.gamma,
            delta: pen.delta,
            eps_theta: opt.eps_theta,
            max_iterations: opt.max_iterations,
            kappa_initial: opt.kappa_initial,
            kappa_min: opt.kappa_min,
            deflation_rounds: 2,
            penalty_td_variant: PenaltyTdVariant::Paper,
            r_min: pen.r_min,
            exponent_min: pen.exponent_min,
            exponent_max: pen.exponent_max,
            output_dir: "out".into(),
        }
    }
}

fn parse_f64(value: &str) -> std::result::Result<f64, String> {
    let v: f64 = value
        .parse()
        .map_err(|_| format!("expected a number, got `{value}`"))?;
    if !v.is_finite() {
        return Err(format!("expected a finite number, got `{value}`"));
    }
    Ok(v)
}

fn parse_usize(value: &str) -> std::result::Result<usize, String> {
    value
        .parse()
        .map_err(|_| format!("expected a nonnegative integer, got `{value}`"))
}

/// Lossless decimal form used in every text output.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

impl RunConfig {
    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        match key {
            "mesh_n" => self.mesh_n = parse_usize(value)?,
            "alpha_L" => self.alpha_l = parse_f64(value)?,
            "alpha_U" => self.alpha_u = parse_f64(value)?,
            "u_t" => self.u_t = parse_f64(value)?,
            "dt" => self.dt = parse_f64(value)?,
            "V_L" => self.volume_lower = parse_f64(value)?,
            "V_U" => self.volume_upper = parse_f64(value)?,
            "gamma" => self.gamma = parse_f64(value)?,
            "delta" => self.delta = parse_f64(value)?,
            "eps_theta" => self.eps_theta = parse_f64(value)?,
            "max_iterations" => self.max_iterations = parse_usize(value)?,
            "kappa_initial" => self.kappa_initial = parse_f64(value)?,
            "kappa_min" => self.kappa_min = parse_f64(value)?,
            "deflation_rounds" => self.deflation_rounds = parse_usize(value)?,
            "penalty_td_variant" => self.penalty_td_variant = value.parse()?,
            "r_min" => self.r_min = parse_f64(value)?,
            "exponent_min" => self.exponent_min = parse_f64(value)?,
            "exponent_max" => self.exponent_max = parse_f64(value)?,
            "output_dir" => {
                if value.is_empty() {
                    return Err("expected a directory path".into());
                }
                self.output_dir = value.to_string()
            }
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// First violated invariant as `(key, message)`.
    fn violation(&self) -> Option<(&'static str, String)> {
        let positive =
            |k: &'static str, v: f64| (v <= 0.0).then(|| (k, format!("must be positive, got {v}")));
        if self.mesh_n == 0 {
            return Some(("mesh_n", "must be positive".into()));
        }
        positive("alpha_L", self.alpha_l)
            .or_else(|| positive("alpha_U", self.alpha_u))
            .or_else(|| {
                (self.alpha_u <= self.alpha_l)
                    .then(|| ("alpha_U", format!("must exceed alpha_L = {}", self.alpha_l)))
            })
            .or_else(|| positive("u_t", self.u_t))
            .or_else(|| positive("dt", self.dt))
            .or_else(|| positive("V_L", self.volume_lower))
            .or_else(|| {
                (self.volume_upper < self.volume_lower || self.volume_upper > 1.0).then(|| {
                    (
                        "V_U",
                        format!("must lie in [V_L, 1], got {}", self.volume_upper),
                    )
                })
            })
            .or_else(|| positive("gamma", self.gamma))
            .or_else(|| positive("delta", self.delta))
            .or_else(|| {
                (self.eps_theta <= 0.0 || self.eps_theta > std::f64::consts::PI).then(|| {
                    (
                        "eps_theta",
                        format!("must lie in (0, pi], got {}", self.eps_theta),
                    )
                })
            })
            .or_else(|| {
                (self.max_iterations == 0).then(|| ("max_iterations", "must be positive".into()))
            })
            .or_else(|| {
                (self.kappa_initial <= 0.0 || self.kappa_initial > 1.0).then(|| {
                    (
                        "kappa_initial",
                        format!("must lie in (0, 1], got {}", self.kappa_initial),
                    )
                })
            })
            .or_else(|| {
                (self.kappa_min <= 0.0 || self.kappa_min > self.kappa_initial).then(|| {
                    (
                        "kappa_min",
                        format!("must lie in (0, kappa_initial], got {}", self.kappa_min),
                    )
                })
            })
            .or_else(|| positive("r_min", self.r_min))
            .or_else(|| {
                (self.exponent_max <= self.exponent_min).then(|| {
                    (
                        "exponent_max",
                        format!("must exceed exponent_min = {}", self.exponent_min),
                    )
                })
            })
    }

    /// Checks every invariant; errors carry line 0.
    pub fn validate(&self) -> Result<()> {
        match self.violation() {
            Some((key, message)) => Err(Error::Config {
                key: key.into(),
                line: COMMAND_LINE,
                message,
            }),
            None => Ok(()),
        }
    }

    pub fn optimizer_settings(&self) -> OptimizerSettings {
        OptimizerSettings {
            eps_theta: self.eps_theta,
            max_iterations: self.max_iterations,
            kappa_initial: self.kappa_initial,
            kappa_min: self.kappa_min,
            volume_lower: self.volume_lower,
            volume_upper: self.volume_upper,
        }
    }

    pub fn design_problem(&self) -> DesignProblem {
        DesignProblem {
            alpha_lower: self.alpha_l,
            alpha_upper: self.alpha_u,
            u_t: self.u_t,
        }
    }

    pub fn penalty_params(&self) -> PenaltyParams {
        PenaltyParams {
            gamma: self.gamma,
            delta: self.delta,
            r_min: self.r_min,
            exponent_min: self.exponent_min,
            exponent_max: self.exponent_max,
        }
    }

    pub fn deflation_settings(&self) -> DeflationSettings {
        DeflationSettings {
            rounds: self.deflation_rounds,
            penalty: self.penalty_params(),
            variant: self.penalty_td_variant,
        }
    }

    /// Values as they appear in the echoed config.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let f = format_f64;
        vec![
            ("mesh_n", self.mesh_n.to_string()),
            ("alpha_L", f(self.alpha_l)),
            ("alpha_U", f(self.alpha_u)),
            ("u_t", f(self.u_t)),
            ("dt", f(self.dt)),
            ("V_L", f(self.volume_lower)),
            ("V_U", f(self.volume_upper)),
            ("gamma", f(self.gamma)),
            ("delta", f(self.delta)),
            ("eps_theta", f(self.eps_theta)),
            ("max_iterations", self.max_iterations.to_string()),
            ("kappa_initial", f(self.kappa_initial)),
            ("kappa_min", f(self.kappa_min)),
            ("deflation_rounds", self.deflation_rounds.to_string()),
            ("penalty_td_variant", self.penalty_td_variant.to_string()),
            ("r_min", f(self.r_min)),
            ("exponent_min", f(self.exponent_min)),
            ("exponent_max", f(self.exponent_max)),
            ("output_dir", self.output_dir.clone()),
        ]
    }

    /// Config file text that parses back to `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# resolved configuration\n");
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

/// Parses config text, then applies `overrides` in order. Missing keys keep
/// their defaults. Errors name the key and the line (0 for overrides).
pub fn parse_config(text: &str, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut origin: HashMap<String, usize> = HashMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(Error::Config {
                key: content.to_string(),
                line,
                message: "expected `key = value`".into(),
            });
        };
        let (key, value) = (key.trim(), value.trim());
        if let Some(prev) = origin.get(key) {
            return Err(Error::Config {
                key: key.into(),
                line,
                message: format!("already set on line {prev}"),
            });
        }
        cfg.set(key, value).map_err(|message| Error::Config {
            key: key.into(),
            line,
            message,
        })?;
        origin.insert(key.to_string(), line);
    }
    for (key, value) in overrides {
        cfg.set(key, value.trim())
            .map_err(|message| Error::Config {
                key: key.clone(),
                line: COMMAND_LINE,
                message,
            })?;
        origin.insert(key.clone(), COMMAND_LINE);
    }
    if let Some((key, message)) = cfg.violation() {
        return Err(Error::Config {
            key: key.into(),
            line: origin.get(key).copied().unwrap_or(COMMAND_LINE),
            message,
        });
    }
    Ok(cfg)
}
