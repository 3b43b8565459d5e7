//! Run configuration: a sectioned TOML file with a fixed key set.
//!
//! ```toml
//! seed = 7
//!
//! [grid]
//! q = { min = -11.0, max = 11.0, points = 128 }
//! x = { min = -5.0, max = 5.0, points = 256 }
//!
//! [physics]
//! hbar = 1.0
//! m_q = 1.0
//!
//! [experiment]
//! dt = 0.0025
//!
//! [output]
//! path = "run.csv"
//! ```
//!
//! Every section and key is optional in the file; each subcommand checks
//! for the keys it needs and names the missing one.

use std::path::{Path, PathBuf};

use hybrid_ensemble::HybridGrid;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub physics: PhysicsSection,
    #[serde(default)]
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    pub min: f64,
    pub max: f64,
    pub points: usize,
}

impl Axis {
    pub fn new(min: f64, max: f64, points: usize) -> Self {
        Axis { min, max, points }
    }

    fn tuple(&self) -> (f64, f64, usize) {
        (self.min, self.max, self.points)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    /// Finite quantum sector with this many levels. Excludes `q`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub levels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<Axis>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x: Option<Axis>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhysicsSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hbar: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m_q: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m_c: Option<f64>,
    /// Quantum oscillator frequency.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega: Option<f64>,
    /// Classical oscillator frequency.
    #[serde(default, rename = "Omega", skip_serializing_if = "Option::is_none")]
    pub big_omega: Option<f64>,
    /// Bilinear coupling K q x.
    #[serde(default, rename = "K", skip_serializing_if = "Option::is_none")]
    pub coupling: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    // shared
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,

    // brackets
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ensembles: Option<usize>,

    // ehrenfest
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_q: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_x: Option<f64>,
    /// Run length in periods of the slow normal mode. Excludes `t_final`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub periods: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_final: Option<f64>,
    /// "logpolar" (default) or "rk4".
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scheme: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degree: Option<usize>,

    // measure
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub operator: Option<String>,
    /// Comma-separated complex amplitudes, e.g. "0.6, 0.8i".
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state: Option<String>,
    #[serde(default, rename = "K", skip_serializing_if = "Option::is_none")]
    pub pointer_k: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pointer_width: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration: Option<f64>,
    /// Pointer reading, or "none".
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub collapse_at: Option<String>,

    // thermal
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hamiltonian: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_avg: Option<f64>,
    /// "auto" (default), "importance" or "metropolis".
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampler: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observables: Option<Vec<String>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Verification report; defaults to `<path stem>.report.json` next to `path`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<PathBuf>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self, CliError> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Checks every key that is present; missing keys are left to the subcommands.
    pub fn validate(&self) -> Result<(), CliError> {
        let p = &self.physics;
        let e = &self.experiment;
        for (key, v) in [
            ("physics.hbar", p.hbar),
            ("physics.m_q", p.m_q),
            ("physics.m_c", p.m_c),
            ("physics.omega", p.omega),
            ("physics.Omega", p.big_omega),
            ("experiment.dt", e.dt),
            ("experiment.sigma_q", e.sigma_q),
            ("experiment.sigma_x", e.sigma_x),
            ("experiment.periods", e.periods),
            ("experiment.t_final", e.t_final),
            ("experiment.pointer_width", e.pointer_width),
            ("experiment.duration", e.duration),
            ("experiment.beta", e.beta),
            ("experiment.t_avg", e.t_avg),
        ] {
            if let Some(v) = v {
                positive(key, v)?;
            }
        }
        for (key, v) in [("physics.K", p.coupling), ("experiment.K", e.pointer_k), ("experiment.q0", e.q0), ("experiment.x0", e.x0)] {
            if let Some(v) = v {
                if !v.is_finite() {
                    return Err(CliError::Config(format!("`{key}` must be finite, got {v}")));
                }
            }
        }
        if e.periods.is_some() && e.t_final.is_some() {
            return Err(CliError::Config("give at most one of `experiment.periods` and `experiment.t_final`".into()));
        }
        if self.grid.levels.is_some() && self.grid.q.is_some() {
            return Err(CliError::Config("give at most one of `grid.levels` and `grid.q`".into()));
        }
        if let Some(s) = &e.scheme {
            parse_scheme_name(s)?;
        }
        if let Some(s) = &e.sampler {
            parse_sampler_name(s)?;
        }
        for (key, n) in [("experiment.samples", e.samples), ("experiment.ensembles", e.ensembles), ("grid.levels", self.grid.levels)] {
            if n == Some(0) {
                return Err(CliError::Config(format!("`{key}` must be at least 1")));
            }
        }
        Ok(())
    }

    /// Grid from the `[grid]` section, filling unset axes from `default`.
    pub fn grid_or(&self, default: &GridSection) -> Result<HybridGrid, CliError> {
        let x = self.grid.x.or(default.x).ok_or_else(|| CliError::Config("missing key `grid.x`".into()))?;
        let g = if let Some(d) = self.grid.levels.or(if self.grid.q.is_none() { default.levels } else { None }) {
            HybridGrid::discrete(d, x.min, x.max, x.points)
        } else {
            let q = self.grid.q.or(default.q).ok_or_else(|| CliError::Config("missing key `grid.q` or `grid.levels`".into()))?;
            HybridGrid::continuous(q.tuple(), x.tuple())
        };
        g.map_err(|e| CliError::Config(format!("grid: {e}")))
    }
}

fn positive(key: &str, v: f64) -> Result<(), CliError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(CliError::Config(format!("`{key}` must be positive and finite, got {v}")))
    }
}

pub fn parse_scheme_name(s: &str) -> Result<&'static str, CliError> {
    match s {
        "logpolar" | "log_polar" => Ok("logpolar"),
        "rk4" => Ok("rk4"),
        other => Err(CliError::Config(format!("`experiment.scheme` must be `logpolar` or `rk4`, got `{other}`"))),
    }
}

pub fn parse_sampler_name(s: &str) -> Result<&'static str, CliError> {
    match s {
        "auto" => Ok("auto"),
        "importance" | "importance_gaussian" => Ok("importance"),
        "metropolis" | "metropolis_rw" => Ok("metropolis"),
        other => Err(CliError::Config(format!("`experiment.sampler` must be `auto`, `importance` or `metropolis`, got `{other}`"))),
    }
}

/// Take the flag value if given, else the config value.
pub fn pick<T: Clone>(flag: Option<T>, cfg: &Option<T>) -> Option<T> {
    flag.or_else(|| cfg.clone())
}

pub fn require<T>(v: Option<T>, key: &str, flag: &str) -> Result<T, CliError> {
    v.ok_or_else(|| CliError::Config(format!("missing key `{key}` (set it in the config or pass {flag})")))
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
seed = 3
[grid]
q = { min = -11.0, max = 11.0, points = 128 }
x = { min = -5.0, max = 5.0, points = 256 }
[physics]
hbar = 1.0
K = 0.25
Omega = 1.0
[experiment]
dt = 0.0025
periods = 2.0
observables = ["x2", "k2"]
[output]
path = "out.csv"
"#;

    #[test]
    fn round_trips_through_toml() {
        let cfg = RunConfig::parse(SAMPLE).unwrap();
        let back = RunConfig::parse(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(back.physics.coupling, Some(0.25));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::parse("[physics]\nhbar = 1.0\nmass = 2.0\n").unwrap_err();
        assert!(err.to_string().contains("mass"), "{err}");
        assert!(RunConfig::parse("[nonsense]\n").is_err());
    }

    #[test]
    fn non_positive_parameters_are_rejected() {
        let err = RunConfig::parse("[experiment]\nbeta = -1.0\n").unwrap_err();
        assert!(err.to_string().contains("experiment.beta"));
        assert!(RunConfig::parse("[physics]\nm_c = 0.0\n").is_err());
        assert!(RunConfig::parse("[experiment]\nperiods = 1.0\nt_final = 2.0\n").is_err());
    }
}
