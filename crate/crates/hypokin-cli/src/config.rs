//! TOML configuration schema. Every section and field has a default; unknown
//! keys are rejected.

use std::path::Path;

use hypokin::constants::WeightInputs;
use hypokin::hypocoercivity::FitWindow;
use hypokin::solver::{ConstantsParams, InitialCondition, RunConfig, RunParams, Tolerances};
use hypokin::{GridSpec, ModelSpec};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: ModelSpec,
    pub grid: GridSpec,
    pub run: RunParams,
    pub initial: InitialCondition,
    pub tolerances: Tolerances,
    pub fit: FitWindow,
    pub constants: ConstantsParams,
    pub sweep: Option<SweepSpec>,
    /// Models tabulated by `gap`; defaults to `[model]` alone.
    pub gaps: Vec<ModelSpec>,
    /// Bypasses the measurement in `weights`.
    pub weights_input: Option<WeightInputs>,
}

/// Cartesian parameter grid. Empty lists keep the base value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub kappa: Vec<f64>,
    pub amplitude: Vec<f64>,
    pub n_v: Vec<usize>,
    pub rho: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub kappa: f64,
    pub amplitude: f64,
    pub n_v: usize,
    pub rho: f64,
}

impl Config {
    /// Reads a TOML config, or the `config` echo of a `manifest.json`.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let is_json = path.extension().is_some_and(|e| e == "json");
        let cfg: Config = if is_json {
            #[derive(Deserialize)]
            struct Echo {
                config: Config,
            }
            serde_json::from_str::<Echo>(&text)
                .map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))?
                .config
        } else {
            toml::from_str(&text).map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))?
        };
        Ok(cfg)
    }

    pub fn run_config(&self) -> RunConfig {
        RunConfig {
            model: self.model,
            grid: self.grid,
            run: self.run,
            initial: self.initial,
            tolerances: self.tolerances,
            fit: self.fit,
            constants: self.constants,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.run_config().validate().map_err(CliError::from)
    }

    /// Points of the sweep grid in row-major order (kappa slowest).
    pub fn sweep_points(&self) -> Result<Vec<SweepPoint>, CliError> {
        let s = self
            .sweep
            .as_ref()
            .ok_or_else(|| CliError::Schema("sweep: missing [sweep] section".into()))?;
        if s.kappa.is_empty() && s.amplitude.is_empty() && s.n_v.is_empty() && s.rho.is_empty() {
            return Err(CliError::Schema("sweep: the parameter grid is empty".into()));
        }
        let or = |v: &Vec<f64>, d: f64| if v.is_empty() { vec![d] } else { v.clone() };
        let kappas = or(&s.kappa, self.model.kappa);
        let amps = or(&s.amplitude, self.initial.amplitude);
        let rhos = or(&s.rho, self.model.rho);
        let nvs = if s.n_v.is_empty() { vec![self.grid.n_v] } else { s.n_v.clone() };
        let mut out = Vec::new();
        for &kappa in &kappas {
            for &amplitude in &amps {
                for &n_v in &nvs {
                    for &rho in &rhos {
                        out.push(SweepPoint {
                            kappa,
                            amplitude,
                            n_v,
                            rho,
                        });
                    }
                }
            }
        }
        Ok(out)
    }

    /// The single-run config of one sweep point.
    pub fn at(&self, p: &SweepPoint) -> Config {
        let mut c = self.clone();
        c.model.kappa = p.kappa;
        c.model.rho = p.rho;
        c.initial.amplitude = p.amplitude;
        c.grid.n_v = p.n_v;
        c.sweep = None;
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_unknown_keys() {
        let c: Config = toml::from_str("").unwrap();
        assert_eq!(c, Config::default());
        let c: Config = toml::from_str("[model]\nkind = \"fokker_planck\"\n[run]\ndt = 0.01").unwrap();
        assert_eq!(c.run.dt, 0.01);
        assert!(toml::from_str::<Config>("[run]\nstep = 1").is_err());
        assert!(toml::from_str::<Config>("[bogus]\nx = 1").is_err());
    }

    #[test]
    fn sweep_grid() {
        let c: Config = toml::from_str("[sweep]\nkappa = [0.5, 1.0]\nn_v = [16, 32, 48]").unwrap();
        let pts = c.sweep_points().unwrap();
        assert_eq!(pts.len(), 6);
        assert_eq!(pts[0].kappa, 0.5);
        assert_eq!(pts[2].n_v, 48);
        let empty: Config = toml::from_str("[sweep]").unwrap();
        assert!(matches!(empty.sweep_points(), Err(CliError::Schema(_))));
    }
}
