//! Experiment configuration: one JSON file drives every subcommand.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::f64::consts::PI;
use std::path::Path;

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Model registry spec, e.g. "sqcoupled" or "linear(-1,1,2,-1)".
    pub model: String,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub continuation: ContinuationConfig,
    #[serde(default)]
    pub spectral: SpectralConfig,
    #[serde(default)]
    pub simulation: SimulationConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: String,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default = "default_length")]
    pub length: f64,
    #[serde(default = "default_nodes")]
    pub nodes: usize,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ContinuationConfig {
    #[serde(default = "default_mode_k")]
    pub mode_k: usize,
    #[serde(default = "default_d_range")]
    pub d_range: [f64; 2],
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_arc_ds")]
    pub arc_ds: f64,
    /// Amplitude of the explicit mode state used when the ODE block is
    /// singular and no branch can be continued.
    #[serde(default = "default_fallback_amplitude")]
    pub fallback_amplitude: f64,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SpectralConfig {
    /// Upper end of the fixed-point bracket; null lets the solver choose.
    #[serde(default)]
    pub lambda_max: Option<f64>,
    #[serde(default = "default_dense_cap")]
    pub dense_cap: usize,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    #[serde(default = "default_t_end")]
    pub t_end: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_eps_list")]
    pub eps_list: Vec<f64>,
    #[serde(default = "default_delta")]
    pub delta: f64,
}

fn default_output_dir() -> String {
    "out".into()
}
fn default_length() -> f64 {
    PI
}
fn default_nodes() -> usize {
    401
}
fn default_mode_k() -> usize {
    1
}
fn default_d_range() -> [f64; 2] {
    [0.9, 1.0]
}
fn default_steps() -> usize {
    8
}
fn default_epsilon() -> f64 {
    1e-2
}
fn default_arc_ds() -> f64 {
    0.05
}
fn default_fallback_amplitude() -> f64 {
    1.0
}
fn default_dense_cap() -> usize {
    4000
}
fn default_t_end() -> f64 {
    40.0
}
fn default_dt() -> f64 {
    1e-3
}
fn default_eps_list() -> Vec<f64> {
    vec![1e-3, 1e-4]
}
fn default_delta() -> f64 {
    0.05
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            length: default_length(),
            nodes: default_nodes(),
        }
    }
}

impl Default for ContinuationConfig {
    fn default() -> Self {
        Self {
            mode_k: default_mode_k(),
            d_range: default_d_range(),
            steps: default_steps(),
            epsilon: default_epsilon(),
            arc_ds: default_arc_ds(),
            fallback_amplitude: default_fallback_amplitude(),
        }
    }
}

impl Default for SpectralConfig {
    fn default() -> Self {
        Self {
            lambda_max: None,
            dense_cap: default_dense_cap(),
        }
    }
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            t_end: default_t_end(),
            dt: default_dt(),
            eps_list: default_eps_list(),
            delta: default_delta(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), String> {
        let c = self;
        if c.model.trim().is_empty() {
            return Err("config field 'model' is empty".into());
        }
        if !(c.grid.length.is_finite() && c.grid.length > 0.0) {
            return Err(format!(
                "grid.length must be positive, got {}",
                c.grid.length
            ));
        }
        if c.grid.nodes < 3 {
            return Err(format!(
                "grid.nodes must be at least 3, got {}",
                c.grid.nodes
            ));
        }
        let [lo, hi] = c.continuation.d_range;
        if !(lo.is_finite() && hi.is_finite() && 0.0 < lo && lo < hi) {
            return Err(format!(
                "continuation.d_range must satisfy 0 < lo < hi, got [{lo}, {hi}]"
            ));
        }
        if c.continuation.steps == 0 {
            return Err("continuation.steps must be positive".into());
        }
        for (name, val) in [
            ("continuation.epsilon", c.continuation.epsilon),
            ("continuation.arc_ds", c.continuation.arc_ds),
            (
                "continuation.fallback_amplitude",
                c.continuation.fallback_amplitude,
            ),
            ("simulation.t_end", c.simulation.t_end),
            ("simulation.dt", c.simulation.dt),
            ("simulation.delta", c.simulation.delta),
        ] {
            if !(val.is_finite() && val > 0.0) {
                return Err(format!("{name} must be positive, got {val}"));
            }
        }
        if c.simulation.dt > c.simulation.t_end {
            return Err(format!(
                "simulation.dt ({}) exceeds simulation.t_end ({})",
                c.simulation.dt, c.simulation.t_end
            ));
        }
        if c.simulation.eps_list.is_empty() {
            return Err("simulation.eps_list must not be empty".into());
        }
        for &e in &c.simulation.eps_list {
            if !(e.is_finite() && e > 0.0) {
                return Err(format!(
                    "simulation.eps_list entries must be positive, got {e}"
                ));
            }
        }
        if let Some(lm) = c.spectral.lambda_max {
            if !(lm.is_finite() && lm > 0.0) {
                return Err(format!("spectral.lambda_max must be positive, got {lm}"));
            }
        }
        if c.spectral.dense_cap == 0 {
            return Err("spectral.dense_cap must be positive".into());
        }
        Ok(())
    }
}

/// Read, hash, parse, and validate a config file.  The hash is the SHA-256
/// of the raw file bytes, embedded in every output the run produces.
pub fn load(path: &Path) -> Result<(ExperimentConfig, String), String> {
    let bytes = std::fs::read(path)
        .map_err(|e| format!("cannot read config file {}: {e}", path.display()))?;
    let hash = hex::encode(Sha256::digest(&bytes));
    let cfg: ExperimentConfig = serde_json::from_slice(&bytes)
        .map_err(|e| format!("config file {} is not valid: {e}", path.display()))?;
    cfg.validate()?;
    Ok((cfg, hash))
}
