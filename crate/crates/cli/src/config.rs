//! Experiment configs. Every block rejects unknown keys and carries a schema version.

use std::path::Path;

use anyhow::{bail, Context};
use excitable::classify::{ChartOptions, SignatureOptions};
use excitable::continuation::DiagramOptions;
use excitable::dynamics::{IntegratorOptions, StimulusProtocol};
use excitable::gspt::DEFAULT_EPSILONS;
use excitable::model::{ModelParams, PhaseState};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

pub trait Versioned {
    fn schema_version(&self) -> u32;

    /// Domain checks beyond what deserialization enforces.
    fn check(&self) -> anyhow::Result<()> {
        Ok(())
    }
}

pub fn load<C: DeserializeOwned + Versioned>(path: &Path) -> anyhow::Result<C> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg: C = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if cfg.schema_version() != SCHEMA_VERSION {
        bail!("unsupported schema_version {} (expected {SCHEMA_VERSION})", cfg.schema_version());
    }
    cfg.check()?;
    Ok(cfg)
}

fn check_params(p: &ModelParams) -> anyhow::Result<()> {
    p.validate().context("invalid model parameters")?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub schema_version: u32,
    pub params: ModelParams,
    /// Defaults to the resting state, or the standard launch when there is none.
    #[serde(default)]
    pub initial: Option<PhaseState>,
    /// When present the protocol's duration replaces `integrator.t_end`.
    #[serde(default)]
    pub protocol: Option<StimulusProtocol>,
    #[serde(default)]
    pub integrator: IntegratorOptions,
}

impl Versioned for SimulateConfig {
    fn schema_version(&self) -> u32 {
        self.schema_version
    }

    fn check(&self) -> anyhow::Result<()> {
        check_params(&self.params)?;
        if let Some(proto) = &self.protocol {
            proto.validate()?;
        }
        self.integrator.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EquilibriaConfig {
    pub schema_version: u32,
    pub params: ModelParams,
}

impl Versioned for EquilibriaConfig {
    fn schema_version(&self) -> u32 {
        self.schema_version
    }

    fn check(&self) -> anyhow::Result<()> {
        check_params(&self.params)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BifdiagConfig {
    pub schema_version: u32,
    pub params: ModelParams,
    pub i_range: (f64, f64),
    #[serde(default)]
    pub options: DiagramOptions,
}

impl Versioned for BifdiagConfig {
    fn schema_version(&self) -> u32 {
        self.schema_version
    }

    fn check(&self) -> anyhow::Result<()> {
        check_params(&self.params)?;
        let (a, b) = self.i_range;
        if !(a.is_finite() && b.is_finite() && a < b) {
            bail!("i_range must be an increasing pair of finite currents");
        }
        if self.options.branch_resolution < 2 {
            bail!("branch_resolution must be at least 2");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChartConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub options: ChartOptions,
}

impl Versioned for ChartConfig {
    fn schema_version(&self) -> u32 {
        self.schema_version
    }

    fn check(&self) -> anyhow::Result<()> {
        let o = &self.options;
        if o.grid.0 == 0 || o.grid.1 == 0 {
            bail!("chart grid must be non-empty");
        }
        if !(o.v0_range.0 < o.v0_range.1 && o.n0_range.0 < o.n0_range.1) {
            bail!("chart ranges must be increasing");
        }
        if !(o.epsilon > 0.0 && o.epsilon.is_finite()) {
            bail!("epsilon must be positive");
        }
        Ok(())
    }
}

fn default_epsilon() -> f64 {
    0.02
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifyConfig {
    pub schema_version: u32,
    pub v0: f64,
    pub n0: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

impl Versioned for ClassifyConfig {
    fn schema_version(&self) -> u32 {
        self.schema_version
    }

    fn check(&self) -> anyhow::Result<()> {
        check_params(&ModelParams { epsilon: self.epsilon, i_app: 0.0, v0: self.v0, n0: self.n0 })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignaturesConfig {
    pub schema_version: u32,
    pub params: ModelParams,
    #[serde(default)]
    pub options: SignatureOptions,
}

impl Versioned for SignaturesConfig {
    fn schema_version(&self) -> u32 {
        self.schema_version
    }

    fn check(&self) -> anyhow::Result<()> {
        check_params(&self.params)
    }
}

fn default_epsilons() -> Vec<f64> {
    DEFAULT_EPSILONS.to_vec()
}

fn default_samples() -> usize {
    9
}

fn default_deltas() -> Vec<f64> {
    vec![1e-4, 1e-3, 1e-2, 1e-1]
}

/// Shared by all gspt studies; each study reads the fields it needs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GsptConfig {
    pub schema_version: u32,
    pub v0: f64,
    pub n0: f64,
    /// Strictly decreasing.
    #[serde(default = "default_epsilons")]
    pub epsilons: Vec<f64>,
    /// Current grid for the bistability study: (start, stop, step).
    #[serde(default)]
    pub i_grid: Option<(f64, f64, f64)>,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_deltas")]
    pub deltas: Vec<f64>,
}

impl Versioned for GsptConfig {
    fn schema_version(&self) -> u32 {
        self.schema_version
    }

    fn check(&self) -> anyhow::Result<()> {
        for &e in &self.epsilons {
            check_params(&ModelParams { epsilon: e, i_app: 0.0, v0: self.v0, n0: self.n0 })?;
        }
        if self.epsilons.is_empty() || self.epsilons.windows(2).any(|w| w[1] >= w[0]) {
            bail!("epsilons must be non-empty and strictly decreasing");
        }
        if let Some((a, b, h)) = self.i_grid {
            if !(a < b && h > 0.0 && (b - a) / h <= 1e5) {
                bail!("i_grid must be (start, stop, step) with start < stop and a positive step");
            }
        }
        if self.deltas.iter().any(|&d| !(d > 0.0 && d.is_finite())) {
            bail!("latency deltas must be positive");
        }
        Ok(())
    }
}

impl GsptConfig {
    pub fn grid(&self) -> Option<Vec<f64>> {
        self.i_grid.map(|(a, b, h)| {
            let n = ((b - a) / h + 1e-9).floor() as usize;
            (0..=n).map(|k| a + h * k as f64).collect()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let text = r#"{"schema_version": 1, "params": {"epsilon": 0.02, "i_app": 0.7, "v0": 0.0, "n0": 0.03}, "bogus": 1}"#;
        assert!(serde_json::from_str::<EquilibriaConfig>(text).is_err());
        let text = r#"{"schema_version": 1, "v0": 0.0, "n0": 0.03, "epsilon": 0.02}"#;
        assert!(serde_json::from_str::<ClassifyConfig>(text).is_ok());
    }

    #[test]
    fn defaults_resolve_and_round_trip() {
        let cfg: GsptConfig = serde_json::from_str(r#"{"schema_version": 1, "v0": -0.3, "n0": -0.1586}"#).unwrap();
        assert_eq!(cfg.epsilons, DEFAULT_EPSILONS.to_vec());
        cfg.check().unwrap();
        let back: GsptConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back.epsilons, cfg.epsilons);
        assert_eq!(back.samples, 9);
    }

    #[test]
    fn grid_includes_both_ends() {
        let cfg = GsptConfig {
            schema_version: 1,
            v0: 0.0,
            n0: 0.0,
            epsilons: default_epsilons(),
            i_grid: Some((0.6, 0.7, 0.01)),
            samples: 9,
            deltas: default_deltas(),
        };
        let g = cfg.grid().unwrap();
        assert_eq!(g.len(), 11);
        assert!((g[10] - 0.7).abs() < 1e-12);
    }
}
