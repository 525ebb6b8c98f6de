use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dynamics::{StepController, StopCriteria};
use crate::error::{Error, Result};
use crate::geometry::Potential;
use crate::npg::{GeometrySpec, Objective};

/// Stop criteria as read from a config file; the reference value is filled
/// in from the oracle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StopSettings {
    pub max_iters: usize,
    pub gap_tol: f64,
    pub grad_tol: f64,
}

impl Default for StopSettings {
    fn default() -> Self {
        let d = StopCriteria::default();
        StopSettings {
            max_iters: d.max_iters,
            gap_tol: d.gap_tol,
            grad_tol: d.grad_tol,
        }
    }
}

impl StopSettings {
    pub fn with_reference(self, reference: Option<f64>) -> StopCriteria {
        StopCriteria {
            max_iters: self.max_iters,
            gap_tol: self.gap_tol,
            grad_tol: self.grad_tol,
            reference,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Relative paths are resolved against the directory of the config file.
    pub mdp_path: PathBuf,
    /// Geometry names such as `kakade` or `sigma:1.5`.
    pub methods: Vec<String>,
    #[serde(default)]
    pub lambda: f64,
    /// Potential name, required when `lambda > 0`.
    #[serde(default)]
    pub regularizer: Option<String>,
    pub n_inits: usize,
    pub seed: u64,
    #[serde(default)]
    pub controller: StepController,
    #[serde(default)]
    pub stop: StopSettings,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Reads a config and resolves its relative paths against its directory.
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg = Self::from_toml_str(&std::fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if cfg.mdp_path.is_relative() {
            cfg.mdp_path = base.join(&cfg.mdp_path);
        }
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::Config("methods must not be empty".into()));
        }
        if self.n_inits == 0 {
            return Err(Error::Config("n_inits must be at least 1".into()));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be finite and non-negative, got {}", self.lambda)));
        }
        if self.lambda > 0.0 && self.regularizer.is_none() {
            return Err(Error::Config("lambda > 0 needs a regularizer".into()));
        }
        self.controller.validate()?;
        Ok(())
    }

    pub fn geometries(&self, n_states: usize, n_actions: usize) -> Result<Vec<GeometrySpec>> {
        self.methods
            .iter()
            .map(|m| GeometrySpec::parse(m, n_states, n_actions))
            .collect()
    }

    pub fn objective(&self, n_states: usize, n_actions: usize) -> Result<Objective> {
        match (&self.regularizer, self.lambda > 0.0) {
            (Some(name), true) => Ok(Objective::regularized(self.lambda, Potential::parse(name, n_states, n_actions)?)),
            _ => Ok(Objective::unregularized()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
mdp_path = "mdp.json"
methods = ["kakade", "sigma:1.5"]
n_inits = 30
seed = 7
output_dir = "out"
"#;

    #[test]
    fn defaults_fill_optional_fields() {
        let cfg = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(cfg.lambda, 0.0);
        assert_eq!(cfg.controller, StepController::default());
        assert_eq!(cfg.stop, StopSettings::default());
        cfg.validate().unwrap();
        let names: Vec<String> = cfg.geometries(2, 2).unwrap().iter().map(|g| g.to_string()).collect();
        assert_eq!(names, ["kakade", "sigma:1.5"]);
    }

    #[test]
    fn empty_methods_rejected() {
        let mut cfg = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        cfg.methods.clear();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn regularizer_required_for_positive_lambda() {
        let mut cfg = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        cfg.lambda = 0.1;
        assert!(cfg.validate().is_err());
        cfg.regularizer = Some("conditional_entropy".into());
        cfg.validate().unwrap();
        assert_eq!(cfg.objective(2, 2).unwrap().lambda, 0.1);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::from_toml_str(&format!("{MINIMAL}\nbogus = 1\n")).is_err());
    }
}
