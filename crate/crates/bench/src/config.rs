//! Scenario configuration: one TOML file per run, unknown keys rejected.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{BenchError, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    pub plant: PlantSection,
    pub mpc: MpcSection,
    pub lqr: LqrSection,
    pub nn: NnSection,
    pub mampc: MampcSection,
    pub sim: SimSection,
    #[serde(default)]
    pub timing: TimingSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lookup: Option<LookupSection>,
    #[serde(default)]
    pub gate: GateSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantSection {
    pub name: String,
    /// Physical parameter overrides, e.g. `mass = 0.2`.
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub substeps: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MpcSection {
    pub horizon: usize,
    /// Diagonal of Q; all ones when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_diag: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_diag: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terminal_radius: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LqrSection {
    pub roa_radius: f64,
    /// Run the sampled region-of-attraction check during `run`.
    #[serde(default)]
    pub validate: bool,
    #[serde(default = "default_roa_samples")]
    pub validate_samples: usize,
    #[serde(default = "default_roa_horizon")]
    pub validate_horizon: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NnSection {
    /// Units per hidden layer.
    pub hidden: usize,
    /// Number of hidden layers.
    pub depth: usize,
    pub sampling_lower: Vec<f64>,
    pub sampling_upper: Vec<f64>,
    pub dataset_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_val_fraction")]
    pub validation_fraction: f64,
    /// Load this policy blob instead of training.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy_path: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MampcSection {
    pub variant: String,
    pub n_lqr: usize,
    #[serde(default = "one")]
    pub i_d: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wp_radius: Option<f64>,
    #[serde(default = "one")]
    pub n_wp: usize,
    #[serde(default)]
    pub erosion_delta: f64,
    #[serde(default)]
    pub parallel: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    pub x0: Vec<f64>,
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimingSection {
    #[serde(default = "default_repeats")]
    pub repeats: usize,
}

impl Default for TimingSection {
    fn default() -> Self {
        Self {
            repeats: default_repeats(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LookupSection {
    pub points_per_dim: usize,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// Thresholds checked by `--gate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateSection {
    /// MAMPC steps may exceed implicit-MPC steps by at most this factor.
    #[serde(default = "default_step_ratio")]
    pub max_step_ratio: f64,
    /// Final over initial training loss.
    #[serde(default = "default_loss_ratio")]
    pub max_loss_ratio: f64,
    #[serde(default)]
    pub require_roa: bool,
}

impl Default for GateSection {
    fn default() -> Self {
        Self {
            max_step_ratio: default_step_ratio(),
            max_loss_ratio: default_loss_ratio(),
            require_roa: false,
        }
    }
}

fn schema_version() -> u32 {
    SCHEMA_VERSION
}
fn default_roa_samples() -> usize {
    2000
}
fn default_roa_horizon() -> usize {
    200
}
fn default_epochs() -> usize {
    300
}
fn default_batch() -> usize {
    256
}
fn default_lr() -> f64 {
    1e-3
}
fn default_val_fraction() -> f64 {
    0.1
}
fn one() -> usize {
    1
}
fn default_max_steps() -> usize {
    2000
}
fn default_tol() -> f64 {
    0.01
}
fn default_repeats() -> usize {
    50
}
fn default_step_ratio() -> f64 {
    10.0
}
fn default_loss_ratio() -> f64 {
    0.1
}

fn parse_error(e: toml::de::Error) -> BenchError {
    let msg = e.message().to_string();
    let key = msg
        .split('`')
        .nth(1)
        .map(str::to_string)
        .unwrap_or_else(|| "<document>".into());
    BenchError::config(key, msg)
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(parse_error)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| BenchError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Layer sizes `[n, hidden × depth, m]`.
    pub fn layer_sizes(&self, n: usize, m: usize) -> Vec<usize> {
        let mut s = vec![n];
        s.extend(std::iter::repeat_n(self.nn.hidden, self.nn.depth));
        s.push(m);
        s
    }

    /// Checks that need no plant; dimension checks happen when the plant is built.
    pub fn validate(&self) -> Result<()> {
        let err = |k: &str, r: &str| Err(BenchError::config(k, r));
        if self.schema_version != SCHEMA_VERSION {
            return err("schema_version", &format!("unsupported version {}", self.schema_version));
        }
        if self.plant.name.trim().is_empty() {
            return err("plant.name", "missing plant name");
        }
        if self.mpc.horizon == 0 {
            return err("mpc.horizon", "must be at least 1");
        }
        if !(self.lqr.roa_radius > 0.0 && self.lqr.roa_radius.is_finite()) {
            return err("lqr.roa_radius", "must be positive");
        }
        if self.nn.hidden == 0 && self.nn.depth > 0 {
            return err("nn.hidden", "must be positive");
        }
        if self.nn.dataset_size == 0 && self.nn.policy_path.is_none() {
            return err("nn.dataset_size", "must be positive");
        }
        if self.nn.sampling_lower.len() != self.nn.sampling_upper.len() {
            return err("nn.sampling_upper", "length differs from nn.sampling_lower");
        }
        if self.nn.batch_size == 0 {
            return err("nn.batch_size", "must be positive");
        }
        if !(self.nn.learning_rate > 0.0) {
            return err("nn.learning_rate", "must be positive");
        }
        if !(0.0..1.0).contains(&self.nn.validation_fraction) {
            return err("nn.validation_fraction", "must lie in [0, 1)");
        }
        let variant = self.mampc.variant.as_str();
        if !matches!(variant, "standard" | "alternating_authority" | "way_point") {
            return err("mampc.variant", "expected standard, alternating_authority or way_point");
        }
        if self.mampc.n_lqr == 0 {
            return err("mampc.n_lqr", "must be at least 1");
        }
        if self.mampc.i_d == 0 {
            return err("mampc.i_d", "must be at least 1");
        }
        if variant == "way_point" {
            match self.mampc.wp_radius {
                Some(r) if r > self.lqr.roa_radius => {}
                Some(_) => return err("mampc.wp_radius", "must exceed lqr.roa_radius"),
                None => return err("mampc.wp_radius", "required by the way_point variant"),
            }
        }
        if !(self.mampc.erosion_delta >= 0.0 && self.mampc.erosion_delta.is_finite()) {
            return err("mampc.erosion_delta", "must be finite and nonnegative");
        }
        if !(self.sim.tol > 0.0) {
            return err("sim.tol", "must be positive");
        }
        if self.sim.x0.iter().any(|v| !v.is_finite()) {
            return err("sim.x0", "must be finite");
        }
        if self.timing.repeats == 0 {
            return err("timing.repeats", "must be at least 1");
        }
        if let Some(l) = &self.lookup {
            if l.points_per_dim < 2 {
                return err("lookup.points_per_dim", "must be at least 2");
            }
            if l.lower.len() != l.upper.len() {
                return err("lookup.upper", "length differs from lookup.lower");
            }
        }
        Ok(())
    }

    /// Sets a dotted key such as `nn.hidden` from its TOML literal text.
    pub fn with_override(&self, key: &str, literal: &str) -> Result<Self> {
        let mut doc = toml::Value::try_from(self).expect("config converts to TOML");
        let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {literal}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .or_else(|| Some(toml::Value::String(literal.to_string())))
            .expect("fallback string");
        let mut node = &mut doc;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = node
                .as_table_mut()
                .ok_or_else(|| BenchError::config(key, "path does not name a table"))?;
            if i + 1 == parts.len() {
                table.insert(part.to_string(), value.clone());
                break;
            }
            node = table
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        }
        let text = toml::to_string(&doc).expect("document serializes");
        Self::from_toml(&text)
    }
}
