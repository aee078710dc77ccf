use std::path::PathBuf;

use crowdkit::advection::AdvectionParams;
use crowdkit::foreground::{GmmParams, MaskParams};
use crowdkit::groups::GroupParams;
use crowdkit::motion::HsParams;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Everything a run needs, read from one TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    /// Run seed; the simulator keeps the scenario's own seed when unset.
    pub seed: Option<u64>,
    pub hs: HsParams,
    pub gmm: GmmParams,
    pub masks: MaskParams,
    pub segment: SegmentConfig,
    pub flows: FlowsConfig,
    pub groups: GroupParams,
    pub simulate: SimulateConfig,
    pub validate: ValidateConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            input: None,
            output: None,
            seed: None,
            hs: HsParams::default(),
            gmm: GmmParams::default(),
            masks: MaskParams::default(),
            segment: SegmentConfig::default(),
            flows: FlowsConfig::default(),
            groups: GroupParams::default(),
            simulate: SimulateConfig::default(),
            validate: ValidateConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmentConfig {
    /// Clusters before blob absorption.
    pub k: usize,
    /// Blob absorption threshold in pixels; half a percent of the frame when unset.
    pub min_area: Option<usize>,
    pub sample_count: usize,
    /// Skips the blob size estimate when set.
    pub a_prime: Option<f64>,
    /// Blobs larger than this multiple of A' are not counted.
    pub max_blob_factor: f64,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self {
            k: 4,
            min_area: None,
            sample_count: 5,
            a_prime: None,
            max_blob_factor: 12.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowsConfig {
    /// Flow slower than this (px/frame) is zeroed before advection.
    pub flow_floor: f64,
    pub advection: AdvectionParams,
}

impl Default for FlowsConfig {
    fn default() -> Self {
        Self {
            flow_floor: 0.0,
            advection: AdvectionParams::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    /// Scenario TOML; the built-in spiral when unset.
    pub scenario: Option<PathBuf>,
}

/// Analysis settings for the closed-loop check. They differ from the
/// `flows` defaults: simulated agents are few, large and slow, so the flow
/// needs stronger smoothing and the whole run is one advection segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValidateConfig {
    pub scenario: Option<PathBuf>,
    pub hs: HsParams,
    pub flow_floor: f64,
    pub advection: AdvectionParams,
    /// A cluster is dominant when it holds at least this share of all tracks
    /// (and at least `advection.min_members`).
    pub dominant_share: f64,
    pub min_winding_deg: f64,
}

impl Default for ValidateConfig {
    fn default() -> Self {
        Self {
            scenario: None,
            hs: HsParams {
                alpha: 50.0,
                iterations: 100,
                presmooth_sigma: 3.0,
                tolerance: 1e-4,
            },
            flow_floor: 2.0,
            advection: AdvectionParams {
                k: 120,
                lcss_eps: 16.0,
                lcss_delta: 100_000,
                sim_threshold: 0.5,
                poly_order: 6,
                substeps: 8,
                ..AdvectionParams::default()
            },
            dominant_share: 0.2,
            min_winding_deg: 270.0,
        }
    }
}

/// Flags given on the command line; each one wins over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub seed: Option<u64>,
}

pub const DEFAULT_SEED: u64 = 7;

impl PipelineConfig {
    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(DEFAULT_SEED)
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&std::path::Path>, overrides: &Overrides) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                Self::from_toml(&text)?
            }
            None => Self::default(),
        };
        if let Some(i) = &overrides.input {
            cfg.input = Some(i.clone());
        }
        if let Some(o) = &overrides.output {
            cfg.output = Some(o.clone());
        }
        if let Some(s) = overrides.seed {
            cfg.seed = Some(s);
        }
        Ok(cfg)
    }

    /// Range checks for every parameter; the error names section and key.
    pub fn validate(&self) -> Result<(), CliError> {
        fn at(section: &'static str) -> impl Fn(crowdkit::Error) -> CliError {
            move |e| CliError::Config(format!("{section}: {}", strip(e)))
        }
        self.hs.validate().map_err(at("hs"))?;
        self.gmm.validate().map_err(at("gmm"))?;
        self.flows.advection.validate().map_err(at("flows.advection"))?;
        self.validate.hs.validate().map_err(at("validate.hs"))?;
        self.validate.advection.validate().map_err(at("validate.advection"))?;
        let bad = |key: &str, why: &str| Err(CliError::Config(format!("{key} {why}")));
        let m = &self.masks;
        if !(m.tau_mag >= 0.0) {
            return bad("masks.tau_mag", "must be >= 0");
        }
        if !(m.smooth_sigma > 0.0) {
            return bad("masks.smooth_sigma", "must be > 0");
        }
        let s = &self.segment;
        if s.k < 1 {
            return bad("segment.k", "must be >= 1");
        }
        if !(4..=5).contains(&s.sample_count) {
            return bad("segment.sample_count", "must be 4 or 5");
        }
        if s.a_prime.is_some_and(|a| !(a > 0.0)) {
            return bad("segment.a_prime", "must be > 0");
        }
        if !(s.max_blob_factor > 0.0) {
            return bad("segment.max_blob_factor", "must be > 0");
        }
        if !(self.flows.flow_floor >= 0.0) {
            return bad("flows.flow_floor", "must be >= 0");
        }
        let g = &self.groups;
        if !(g.sigma > 0.0 && g.sigma.is_finite()) {
            return bad("groups.sigma", "must be > 0");
        }
        if !(g.kl_threshold >= 0.0) {
            return bad("groups.kl_threshold", "must be >= 0");
        }
        if !(g.smoothing > 0.0) {
            return bad("groups.smoothing", "must be > 0");
        }
        let v = &self.validate;
        if !(v.flow_floor >= 0.0) {
            return bad("validate.flow_floor", "must be >= 0");
        }
        if !(v.dominant_share >= 0.0 && v.dominant_share <= 1.0) {
            return bad("validate.dominant_share", "must lie in [0, 1]");
        }
        if !(v.min_winding_deg >= 0.0) {
            return bad("validate.min_winding_deg", "must be >= 0");
        }
        Ok(())
    }
}

fn strip(e: crowdkit::Error) -> String {
    match e {
        crowdkit::Error::Param(m) => m,
        other => other.to_string(),
    }
}

/// Per-module seed derived from the run seed. The simulator takes the run
/// seed unchanged so a scenario's own seed and `--seed` mean the same thing.
pub fn module_seed(seed: u64, module: &str) -> u64 {
    let tag = module
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3));
    splitmix64(seed ^ tag)
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
