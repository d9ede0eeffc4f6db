//! Use-case configuration file.
//!
//! ```toml
//! name = "usecase2"
//! granularity = "flow"        # or "packet"
//! threshold = 20              # packets per flow before inference
//! seed = 7                    # weights and calibration
//! flows = 1000                # flows per batch on the engines
//! k = 16
//! collab = true
//! offload_threshold = 0.25
//! oracle = true
//! table_depth = 4096          # records must fit feature memory
//!
//! [model]
//! preset = "usecase2"         # or manifest = "model.toml"
//!
//! [capture]
//! kind = "intervals"          # features | packet_copy | intervals | payload
//!
//! [traffic.synthetic]         # or [traffic] pcap = "trace.pcap"
//! flow_count = 1000
//! packets_per_flow = 20
//! ```
//!
//! Relative paths resolve against the config file's directory.

use crate::compiler::ir::{preset, ModelIR};
use crate::compiler::schedule::ScheduleConfig;
use crate::controller::Readout;
use crate::extractor::features::{feature_program, packet_copy_program};
use crate::extractor::{CaptureMode, ExtractorConfig, DEFAULT_TABLE_DEPTH};
use crate::fabric::{period_ps, FEATURE_DEPTH};
use crate::traffic::SyntheticFlowSpec;
use crate::traffic::DEFAULT_TRUNCATION;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Packet,
    Flow,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSource {
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrafficSource {
    #[serde(default)]
    pub pcap: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: Option<SyntheticFlowSpec>,
    #[serde(default = "default_truncation")]
    pub truncation: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Capture {
    /// Accumulated flow statistics, by feature number.
    Features { features: Vec<u8> },
    /// Per-packet meta copy (packet granularity).
    PacketCopy {
        #[serde(default = "default_ring")]
        ring_words: usize,
    },
    Intervals,
    Payload,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Clocks {
    #[serde(default = "default_extractor_hz")]
    pub extractor_hz: f64,
    #[serde(default = "default_compute_hz")]
    pub compute_hz: f64,
}

impl Default for Clocks {
    fn default() -> Self {
        Clocks { extractor_hz: default_extractor_hz(), compute_hz: default_compute_hz() }
    }
}

/// Range of the random int8 vectors used to calibrate activation scales.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Calibration {
    pub count: usize,
    pub lo: i8,
    pub hi: i8,
}

impl Default for Calibration {
    fn default() -> Self {
        Calibration { count: 64, lo: -128, hi: 127 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UseCaseConfig {
    pub name: String,
    pub granularity: Granularity,
    #[serde(default = "one")]
    pub threshold: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one_usize")]
    pub flows: usize,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "yes")]
    pub collab: bool,
    #[serde(default = "default_offload")]
    pub offload_threshold: f64,
    #[serde(default = "yes")]
    pub oracle: bool,
    #[serde(default = "default_depth")]
    pub table_depth: usize,
    #[serde(default)]
    pub clocks: Clocks,
    #[serde(default)]
    pub calibration: Calibration,
    #[serde(default = "default_readout")]
    pub readout: Readout,
    pub model: ModelSource,
    pub capture: Capture,
    pub traffic: TrafficSource,
}

fn one() -> u32 {
    1
}
fn one_usize() -> usize {
    1
}
fn yes() -> bool {
    true
}
fn default_k() -> usize {
    crate::arype::DEFAULT_K
}
fn default_offload() -> f64 {
    0.15
}
fn default_depth() -> usize {
    DEFAULT_TABLE_DEPTH
}
fn default_truncation() -> usize {
    DEFAULT_TRUNCATION
}
fn default_ring() -> usize {
    256
}
fn default_extractor_hz() -> f64 {
    125e6
}
fn default_compute_hz() -> f64 {
    222e6
}
fn default_readout() -> Readout {
    Readout::Direct
}

impl UseCaseConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: UseCaseConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` and makes its relative paths absolute.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.into(), source })?;
        let mut cfg = Self::parse(&text)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        if let Some(p) = cfg.model.manifest.as_mut() {
            fix(p);
        }
        if let Some(p) = cfg.traffic.pcap.as_mut() {
            fix(p);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.model.preset.is_some() == self.model.manifest.is_some() {
            return bad("model needs exactly one of `preset` and `manifest`".into());
        }
        if self.traffic.pcap.is_some() == self.traffic.synthetic.is_some() {
            return bad("traffic needs exactly one of `pcap` and `synthetic`".into());
        }
        if self.threshold == 0 {
            return bad("threshold must be at least 1".into());
        }
        match (self.granularity, &self.capture) {
            (Granularity::Packet, Capture::PacketCopy { .. }) if self.threshold == 1 => {}
            (Granularity::Packet, _) => return bad("packet granularity takes packet_copy capture and threshold 1".into()),
            (Granularity::Flow, Capture::PacketCopy { .. }) => return bad("packet_copy capture needs packet granularity".into()),
            (Granularity::Flow, _) => {}
        }
        if self.flows == 0 || self.k == 0 {
            return bad("flows and k must be positive".into());
        }
        if !(self.offload_threshold >= 0.0 && self.offload_threshold <= 1.0) {
            return bad(format!("offload_threshold {} outside [0, 1]", self.offload_threshold));
        }
        for hz in [self.clocks.extractor_hz, self.clocks.compute_hz] {
            if !(hz.is_finite() && hz >= 1e6) {
                return bad(format!("clock {hz} Hz"));
            }
        }
        if self.calibration.count == 0 || self.calibration.lo > self.calibration.hi {
            return bad("calibration needs a positive count and lo <= hi".into());
        }
        if let Some(s) = &self.traffic.synthetic {
            s.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        self.extractor_config()?;
        Ok(())
    }

    pub fn model_ir(&self) -> Result<ModelIR, ConfigError> {
        let ir = match (&self.model.preset, &self.model.manifest) {
            (Some(name), _) => preset(name, self.seed).ok_or_else(|| format!("unknown preset `{name}`")),
            (_, Some(path)) => ModelIR::load(path).map_err(|e| e.to_string()),
            _ => unreachable!("validated"),
        };
        ir.map_err(|e| ConfigError::Invalid(format!("model: {e}")))
    }

    pub fn schedule_config(&self) -> ScheduleConfig {
        ScheduleConfig { k: self.k, flows: self.flows, collab: self.collab, offload_threshold: self.offload_threshold }
    }

    pub fn extractor_config(&self) -> Result<ExtractorConfig, ConfigError> {
        let mode = match &self.capture {
            Capture::Features { features } => CaptureMode::Accumulate {
                program: feature_program(features).map_err(|e| ConfigError::Invalid(e.to_string()))?.program,
                threshold: self.threshold,
            },
            Capture::PacketCopy { ring_words } => CaptureMode::Packet { program: packet_copy_program(), ring_words: *ring_words },
            Capture::Intervals => CaptureMode::Intervals { packets: self.threshold },
            Capture::Payload => CaptureMode::Payload { packets: self.threshold },
        };
        let cfg = ExtractorConfig {
            table_depth: self.table_depth,
            period_ps: period_ps(self.clocks.extractor_hz),
            ..ExtractorConfig::new(mode)
        };
        cfg.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if cfg.record_area_words() > FEATURE_DEPTH {
            return Err(ConfigError::Invalid(format!(
                "{} records of {} words exceed the {FEATURE_DEPTH}-word feature memory",
                cfg.records(),
                cfg.mode.words_per_record()
            )));
        }
        Ok(cfg)
    }

    /// SHA-256 of the config's canonical TOML form.
    pub fn hash(&self) -> String {
        let text = toml::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MIN: &str = r#"
        name = "t"
        granularity = "flow"
        threshold = 20
        [model]
        preset = "usecase2"
        [capture]
        kind = "features"
        features = [6, 36]
        [traffic.synthetic]
        flow_count = 10
        packets_per_flow = 20
    "#;

    #[test]
    fn defaults_and_hash() {
        let c = UseCaseConfig::parse(MIN).unwrap();
        assert_eq!((c.k, c.flows, c.table_depth), (16, 1, DEFAULT_TABLE_DEPTH));
        assert_eq!(c.clocks, Clocks::default());
        assert_eq!(c.hash(), UseCaseConfig::parse(MIN).unwrap().hash());
        let mut d = c.clone();
        d.collab = false;
        assert_ne!(c.hash(), d.hash());
        // canonical form parses back to the same config
        assert_eq!(UseCaseConfig::parse(&toml::to_string(&c).unwrap()).unwrap(), c);
    }

    #[test]
    fn rejects_inconsistent_configs() {
        assert!(UseCaseConfig::parse(&MIN.replace("threshold = 20", "threshold = 0")).is_err());
        assert!(UseCaseConfig::parse(&MIN.replace("\"flow\"", "\"packet\"")).is_err());
        assert!(UseCaseConfig::parse(&MIN.replace("kind = \"features\"\n        features = [6, 36]", "kind = \"packet_copy\"")).is_err());
        assert!(UseCaseConfig::parse(&format!("{MIN}\nbogus = 1")).is_err());
        assert!(UseCaseConfig::parse(&MIN.replace("preset = \"usecase2\"", "")).is_err());
        // two-word interval records at the default depth overflow feature memory
        assert!(UseCaseConfig::parse(&MIN.replace("kind = \"features\"\n        features = [6, 36]", "kind = \"intervals\"")).is_err());
    }
}
