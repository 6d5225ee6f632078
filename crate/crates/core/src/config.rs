//! Flat `key = value` configuration for registration, meshing and the
//! rehearsal alarm. Blank lines and `#` comments are ignored; later keys
//! override earlier ones, and callers apply command-line overrides through
//! [`PipelineConfig::set`].

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::deform::RegConfig;
use crate::error::{Error, Result};
use crate::fusion::{FusionPolicy, MergePrecedence};
use crate::mesh::SmoothParams;
use crate::sim::SessionConfig;
use crate::structure::StructureId;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub registration: RegConfig,
    pub smoothing: SmoothParams,
    pub session: SessionConfig,
    pub fusion: FusionPolicy,
    pub precedence: MergePrecedence,
}

pub const KEYS: [&str; 11] = [
    "reg.iterations",
    "reg.lambda",
    "reg.stride",
    "reg.eps_r",
    "reg.patch_sigma",
    "mesh.smooth_iterations",
    "mesh.smooth_step",
    "sim.warn_mm",
    "sim.danger_mm",
    "sim.protected",
    "fusion.secondary_only",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("bad value for {key}: {value:?}")))
}

fn parse_structures(key: &str, value: &str) -> Result<std::collections::BTreeSet<StructureId>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| Error::InvalidArgument(format!("bad structure in {key}: {s:?}"))))
        .collect()
}

impl PipelineConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "reg.iterations" => self.registration.iterations = parse(key, v)?,
            "reg.lambda" => self.registration.lambda = parse(key, v)?,
            "reg.stride" => self.registration.stride = parse(key, v)?,
            "reg.eps_r" => self.registration.eps_r = parse(key, v)?,
            "reg.patch_sigma" => self.registration.mind.patch_sigma = parse(key, v)?,
            "mesh.smooth_iterations" => self.smoothing.iterations = parse(key, v)?,
            "mesh.smooth_step" => self.smoothing.step = parse(key, v)?,
            "sim.warn_mm" => self.session.warn_mm = parse(key, v)?,
            "sim.danger_mm" => self.session.danger_mm = parse(key, v)?,
            "sim.protected" => self.session.protected = parse_structures(key, v)?,
            "fusion.secondary_only" => self.fusion.secondary_only_labels = parse_structures(key, v)?,
            other => return Err(Error::InvalidArgument(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        cfg.apply(text)?;
        Ok(cfg)
    }

    pub fn apply(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("line {}: expected key = value", n + 1)))?;
            self.set(k, v.trim().trim_matches('"'))?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.registration.validate()?;
        if !(self.session.danger_mm >= 0.0 && self.session.warn_mm >= self.session.danger_mm) {
            return Err(Error::InvalidArgument("alarm thresholds must satisfy 0 <= danger <= warn".into()));
        }
        if !(self.smoothing.step >= 0.0 && self.smoothing.step <= 1.0) {
            return Err(Error::InvalidArgument("smoothing step must be in [0, 1]".into()));
        }
        Ok(())
    }
}
