//! Run configuration files (JSON, schema version 1).
//!
//! ```json
//! {
//!   "spec_version": 1,
//!   "mode": "finite_horizon",
//!   "T": 0.2,
//!   "mu0": {"kind": "von_mises", "params": {"mean": 0.3, "kappa": 1.5}},
//!   "b0": {"cos": [0.0], "sin": [0.0, 0.3]},
//!   "vext": {"cos": [0.0, 0.5], "sin": []},
//!   "grid": {"cells": 128, "steps": 200}
//! }
//! ```
//!
//! Omitted coefficients are zero. `convex` replaces `kb`, `v1`, `v0` and
//! `grad_pair_sq_coeff` by the convex family built from two cosine kernels.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{make_convex_instance, ConvexAmplitudes, DensitySpec, InteractionField, Mode, ProblemSpec, RunningCost, TerminalCost};
use crate::pathlaw::GirsanovConstant;
use crate::series::TrigSeries;
use crate::solver::SolveOptions;

pub const SPEC_VERSION: u32 = 1;
pub const MIN_CELLS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub cells: usize,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParticleConfig {
    /// Replicas per particle count in the sweeps.
    pub replicas: usize,
    pub girsanov_constant: GirsanovConstant,
}

impl Default for ParticleConfig {
    fn default() -> Self {
        Self { replicas: 200, girsanov_constant: GirsanovConstant::Paper }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub spec_version: u32,
    #[serde(default)]
    pub mode: Mode,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub mu0: DensitySpec,
    #[serde(rename = "muT", default, skip_serializing_if = "Option::is_none")]
    pub mu_t: Option<DensitySpec>,
    #[serde(default)]
    pub b0: TrigSeries,
    #[serde(default)]
    pub kb: TrigSeries,
    #[serde(default)]
    pub vext: TrigSeries,
    #[serde(default)]
    pub v1: TrigSeries,
    #[serde(default)]
    pub v0: TrigSeries,
    #[serde(default)]
    pub grad_pair_sq_coeff: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g: Option<TrigSeries>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub convex: Option<ConvexAmplitudes>,
    pub grid: GridConfig,
    #[serde(default)]
    pub solver: SolveOptions,
    #[serde(default)]
    pub particles: ParticleConfig,
}

/// A loaded config with the hash of its bytes.
#[derive(Clone, Debug)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub spec: ProblemSpec,
    /// Lowercase hex SHA-256 of the file contents.
    pub spec_hash: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: RunConfig = serde_json::from_str(text).map_err(|e| Error::config(&json_field(&e, text), e.to_string()))?;
        config.check()?;
        Ok(config)
    }

    fn check(&self) -> Result<()> {
        if self.spec_version != SPEC_VERSION {
            return Err(Error::config("spec_version", format!("expected {SPEC_VERSION}, got {}", self.spec_version)));
        }
        if self.grid.cells < MIN_CELLS {
            return Err(Error::config("grid.cells", format!("must be at least {MIN_CELLS}, got {}", self.grid.cells)));
        }
        if self.grid.steps == 0 {
            return Err(Error::config("grid.steps", "must be positive"));
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(Error::config("T", format!("must be positive and finite, got {}", self.horizon)));
        }
        for (name, s) in [("b0", &self.b0), ("kb", &self.kb), ("vext", &self.vext), ("v1", &self.v1), ("v0", &self.v0)] {
            if !s.is_finite() {
                return Err(Error::config(name, "coefficients must be finite"));
            }
        }
        if self.g.as_ref().is_some_and(|g| !g.is_finite()) {
            return Err(Error::config("g", "coefficients must be finite"));
        }
        if !self.grad_pair_sq_coeff.is_finite() {
            return Err(Error::config("grad_pair_sq_coeff", "must be finite"));
        }
        if self.convex.is_some() && (!self.kb.is_zero() || !self.v1.is_zero() || !self.v0.is_zero() || self.grad_pair_sq_coeff != 0.0) {
            return Err(Error::config("convex", "cannot be combined with kb, v1, v0 or grad_pair_sq_coeff"));
        }
        match self.mode {
            Mode::FiniteHorizon if self.mu_t.is_some() => Err(Error::config("muT", "only used in schrodinger mode")),
            Mode::Schrodinger if self.mu_t.is_none() => Err(Error::config("muT", "required in schrodinger mode")),
            Mode::Schrodinger if self.g.is_some() => Err(Error::config("g", "schrodinger mode takes no terminal cost")),
            _ => Ok(()),
        }?;
        let s = &self.solver;
        if s.max_iters == 0 || !(s.step > 0.0) || !(s.tol > 0.0) || !(s.terminal_tol > 0.0) {
            return Err(Error::config("solver", "max_iters, step, tol and terminal_tol must be positive"));
        }
        if s.penalty_schedule.is_empty() || s.penalty_schedule.iter().any(|l| !(*l > 0.0)) {
            return Err(Error::config("solver.penalty_schedule", "must be a non-empty list of positive weights"));
        }
        if self.particles.replicas == 0 {
            return Err(Error::config("particles.replicas", "must be positive"));
        }
        Ok(())
    }

    /// Solver options with the grid's time steps filled in.
    pub fn solve_options(&self) -> SolveOptions {
        SolveOptions { steps: self.grid.steps, ..self.solver.clone() }
    }

    pub fn problem(&self) -> Result<ProblemSpec> {
        let cells = self.grid.cells;
        let mu0 = self.mu0.build(cells, "mu0")?;
        let terminal = self.g.clone().map_or(TerminalCost::None, TerminalCost::Linear);
        let spec = if let Some(amps) = &self.convex {
            make_convex_instance(amps, self.b0.clone(), self.vext.clone(), terminal, mu0, self.horizon)
                .map_err(|e| Error::config("convex", e.to_string()))?
        } else {
            let drift = InteractionField::new(self.b0.clone(), self.kb.clone());
            let running = RunningCost {
                external: self.vext.clone(),
                pair: self.v1.clone(),
                grad_pair_sq_coeff: self.grad_pair_sq_coeff,
                grad_pair: self.v0.clone(),
            };
            match self.mode {
                Mode::FiniteHorizon => ProblemSpec::finite_horizon(drift, running, terminal, mu0, self.horizon)?,
                Mode::Schrodinger => {
                    let target = self.mu_t.as_ref().expect("checked").build(cells, "muT")?;
                    ProblemSpec::schrodinger(drift, running, mu0, target, self.horizon)?
                }
            }
        };
        if self.convex.is_some() && self.mode == Mode::Schrodinger {
            let target = self.mu_t.as_ref().expect("checked").build(cells, "muT")?;
            let s = ProblemSpec::schrodinger(spec.drift, spec.running, spec.mu0, target, self.horizon)?;
            return Ok(s);
        }
        Ok(spec)
    }
}

/// Best guess at the config key a JSON error refers to.
fn json_field(e: &serde_json::Error, text: &str) -> String {
    let msg = e.to_string();
    for marker in ["unknown field `", "missing field `"] {
        if let Some(rest) = msg.split(marker).nth(1) {
            if let Some(name) = rest.split('`').next() {
                return name.to_string();
            }
        }
    }
    // fall back to the last key opened before the error position
    let offset: usize = text.lines().take(e.line().saturating_sub(1)).map(|l| l.len() + 1).sum::<usize>() + e.column();
    let head = &text[..offset.min(text.len())];
    head.rsplit('"').nth(1).filter(|k| !k.is_empty()).map_or_else(|| "config".to_string(), str::to_string)
}

/// Reads and validates a config file.
pub fn load(path: &std::path::Path) -> Result<LoadedConfig> {
    let bytes = std::fs::read(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|_| Error::config("config", "file is not UTF-8"))?;
    let config = RunConfig::from_json(text)?;
    let spec = config.problem()?;
    Ok(LoadedConfig { config, spec, spec_hash: sha256_hex(&bytes) })
}
