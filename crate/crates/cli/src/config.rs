//! JSON run configuration: versioned schema, unknown keys rejected, byte-
//! stable hashing of the raw file text for the manifest.

use anyhow::{bail, Context};
use cmf_core::adjoint::CostMeasure;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    #[serde(default = "one")]
    pub sigma0: f64,
    #[serde(default = "one")]
    pub h0: f64,
    #[serde(default = "one")]
    pub c: f64,
    #[serde(default)]
    pub rho: f64,
    #[serde(default)]
    pub zstar: f64,
    #[serde(default = "one")]
    pub kernel_mass: f64,
    #[serde(default = "neg_one")]
    pub u_min: f64,
    #[serde(default = "one")]
    pub u_max: f64,
    #[serde(default = "one")]
    pub x0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub horizon: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    pub scenarios: usize,
    pub particles: usize,
    #[serde(default)]
    pub resample: bool,
    /// Write the per-particle CSV (large) in addition to the scenario file.
    #[serde(default)]
    pub dump_particles: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    #[serde(default = "zero_theta")]
    pub theta: Vec<f64>,
    #[serde(default = "one")]
    pub ewa_rate: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            theta: zero_theta(),
            ewa_rate: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedPointConfig {
    #[serde(default = "one")]
    pub damping: f64,
    #[serde(default = "default_fp_tol")]
    pub tol: f64,
    #[serde(default = "default_fp_iter")]
    pub max_iter: usize,
}

impl Default for FixedPointConfig {
    fn default() -> Self {
        Self {
            damping: 1.0,
            tol: 1e-2,
            max_iter: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "default_step")]
    pub step: f64,
    #[serde(default = "default_fp_tol")]
    pub tol: f64,
    #[serde(default = "default_opt_iter")]
    pub max_iter: usize,
    #[serde(default = "default_basis")]
    pub basis: Vec<String>,
    #[serde(default = "default_armijo")]
    pub armijo_c: f64,
    #[serde(default = "default_halvings")]
    pub max_halvings: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            step: 0.5,
            tol: 1e-2,
            max_iter: 25,
            basis: default_basis(),
            armijo_c: 1e-4,
            max_halvings: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidateConfig {
    /// One of: stability, variational, duality, filter.
    pub suite: String,
    /// Direction policy parameters for the perturbation-based suites.
    #[serde(default = "default_toward")]
    pub toward_theta: Vec<f64>,
    /// Perturbation sizes for the stability scan.
    #[serde(default = "default_deltas")]
    pub deltas: Vec<f64>,
    /// Step sizes for the variational / duality quotients.
    #[serde(default = "default_thetas")]
    pub thetas: Vec<f64>,
}

impl Default for ValidateConfig {
    fn default() -> Self {
        Self {
            suite: "filter".to_string(),
            toward_theta: default_toward(),
            deltas: default_deltas(),
            thetas: default_thetas(),
        }
    }
}

fn one() -> f64 {
    1.0
}
fn neg_one() -> f64 {
    -1.0
}
fn zero_theta() -> Vec<f64> {
    vec![0.0; 4]
}
fn default_fp_tol() -> f64 {
    1e-2
}
fn default_fp_iter() -> usize {
    20
}
fn default_step() -> f64 {
    0.5
}
fn default_opt_iter() -> usize {
    25
}
fn default_armijo() -> f64 {
    1e-4
}
fn default_halvings() -> usize {
    20
}
fn default_basis() -> Vec<String> {
    ["1", "x", "x2", "l", "lx", "u", "y", "a"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}
fn default_toward() -> Vec<f64> {
    vec![0.6, 0.0, 0.0, 0.0]
}
fn default_deltas() -> Vec<f64> {
    vec![0.4, 0.283, 0.2, 0.141, 0.1, 0.0707]
}
fn default_thetas() -> Vec<f64> {
    vec![0.2, 0.1, 0.05, 0.025]
}
fn default_out() -> String {
    "out".to_string()
}
fn default_measure() -> CostMeasure {
    CostMeasure::Q0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Informational default subcommand; the CLI verb takes precedence.
    #[serde(default)]
    pub command: Option<String>,
    pub seed: u64,
    #[serde(default = "default_out")]
    pub output_dir: String,
    #[serde(default = "default_measure")]
    pub cost_measure: CostMeasure,
    pub model: ModelConfig,
    pub grid: GridConfig,
    pub ensemble: EnsembleConfig,
    #[serde(default)]
    pub policy: PolicyConfig,
    #[serde(default)]
    pub fixed_point: FixedPointConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub validate: Option<ValidateConfig>,
}

impl RunConfig {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).context("config parse error")?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn check(&self) -> anyhow::Result<()> {
        if self.schema_version != 1 {
            bail!("unsupported schema_version {}", self.schema_version);
        }
        if !(self.grid.horizon > 0.0 && self.grid.horizon.is_finite()) {
            bail!("grid.horizon must be positive, got {}", self.grid.horizon);
        }
        if !(10..=100_000).contains(&self.grid.steps) {
            bail!("grid.steps must lie in [10, 100000], got {}", self.grid.steps);
        }
        if !(2..=10_000).contains(&self.ensemble.scenarios) {
            bail!(
                "ensemble.scenarios must lie in [2, 10000], got {}",
                self.ensemble.scenarios
            );
        }
        if !(2..=1_000_000).contains(&self.ensemble.particles) {
            bail!(
                "ensemble.particles must lie in [2, 1000000], got {}",
                self.ensemble.particles
            );
        }
        if !(self.model.u_min < self.model.u_max) {
            bail!(
                "control interval [{}, {}] is empty",
                self.model.u_min,
                self.model.u_max
            );
        }
        if let Some(v) = &self.validate {
            let known = ["stability", "variational", "duality", "filter"];
            if !known.contains(&v.suite.as_str()) {
                bail!("unknown validation suite '{}'", v.suite);
            }
        }
        Ok(())
    }
}

/// Hash of the raw config text; stable across platforms for identical bytes.
pub fn config_hash(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
