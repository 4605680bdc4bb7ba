//! The run configuration: one JSON document with sections mirroring the
//! module configs, strict about unknown keys, with dotted-path overrides and
//! a canonical echo for provenance.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{IntensityNoiseConfig, SpatialAugmentConfig};
use crate::dataset::PhantomDatasetConfig;
use crate::error::{Error, Result};
use crate::network::NetworkConfig;
use crate::training::finetune::FinetuneConfig;
use crate::training::pretrain::PretrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset directory (images/ plus optional labels/); `None` selects
    /// phantom mode.
    pub dir: Option<String>,
    pub phantom: PhantomDatasetConfig,
    pub normalize_lo_pct: f64,
    pub normalize_hi_pct: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: None,
            phantom: PhantomDatasetConfig::default(),
            normalize_lo_pct: 0.5,
            normalize_hi_pct: 99.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub spatial: SpatialAugmentConfig,
    pub intensity: IntensityNoiseConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Output directory; usually supplied by `--out`.
    pub dir: Option<String>,
    /// Write mid-slice PNG figures where commands support them.
    pub figures: bool,
}

/// The complete run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub augment: AugmentConfig,
    pub network: NetworkConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub output: OutputConfig,
}

impl RunConfig {
    /// Parse a JSON document, rejecting unknown keys with the offending
    /// dotted path in the error.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            Error::config(e.path().to_string(), e.inner().to_string())
        })?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Apply dotted-path overrides like `pretrain.lambda=0.7` on the JSON
    /// representation, then re-deserialize strictly.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut value = serde_json::to_value(self)
            .map_err(|e| Error::config("<config>", e.to_string()))?;
        for entry in overrides {
            let (path, raw) = entry.split_once('=').ok_or_else(|| {
                Error::config(entry.clone(), "override must look like key.path=value")
            })?;
            let parsed: serde_json::Value = serde_json::from_str(raw)
                .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            let parts: Vec<&str> = path.split('.').collect();
            fn descend<'a>(
                cursor: &'a mut serde_json::Value,
                parts: &[&str],
                parsed: &serde_json::Value,
                full_path: &str,
            ) -> Result<()> {
                let obj = cursor.as_object_mut().ok_or_else(|| {
                    Error::config(full_path.to_string(), "path traverses a non-object")
                })?;
                if parts.len() == 1 {
                    obj.insert(parts[0].to_string(), parsed.clone());
                    Ok(())
                } else {
                    let next = obj
                        .entry(parts[0].to_string())
                        .or_insert_with(|| serde_json::Value::Object(Default::default()));
                    descend(next, &parts[1..], parsed, full_path)
                }
            }
            descend(&mut value, &parts, &parsed, path)?;
        }
        let text = serde_json::to_string(&value)
            .map_err(|e| Error::config("<config>", e.to_string()))?;
        Self::from_json(&text)
    }

    /// Range and consistency validation with dotted key names.
    pub fn validate(&self) -> Result<()> {
        self.pretrain.validate()?;
        self.finetune.validate()?;
        self.network
            .validate()
            .map_err(|e| Error::config("network", e.to_string()))?;
        if !(0.0..=100.0).contains(&self.data.normalize_lo_pct)
            || !(0.0..=100.0).contains(&self.data.normalize_hi_pct)
            || self.data.normalize_lo_pct >= self.data.normalize_hi_pct
        {
            return Err(Error::config(
                "data.normalize_lo_pct",
                "need 0 <= lo < hi <= 100",
            ));
        }
        self.augment
            .intensity
            .validate()
            .map_err(|e| Error::config("augment.intensity", e.to_string()))?;
        if !(0.0..=1.0).contains(&self.augment.spatial.flip_prob)
            || !(0.0..=1.0).contains(&self.augment.spatial.rot90_prob)
        {
            return Err(Error::config(
                "augment.spatial.flip_prob",
                "probabilities must be in [0,1]",
            ));
        }
        let stride = self.network.total_stride();
        for &e in &self.pretrain.crop_extents {
            if e % stride != 0 {
                return Err(Error::config(
                    "pretrain.crop_extents",
                    format!("extents must be divisible by the network stride {stride}"),
                ));
            }
        }
        for &e in &self.finetune.crop_extents {
            if e % stride != 0 {
                return Err(Error::config(
                    "finetune.crop_extents",
                    format!("extents must be divisible by the network stride {stride}"),
                ));
            }
        }
        Ok(())
    }

    /// Canonical pretty-printed form; field order is the struct order, so
    /// identical configs render identically.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical form.
    pub fn hash(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        hasher.update(self.canonical_json().as_bytes());
        hasher.finalize().into()
    }
}

/// Fractions mirroring the evaluation protocol; others require an explicit
/// opt-in at the command line.
pub const STANDARD_LABEL_FRACTIONS: [f64; 4] = [0.1, 0.25, 0.5, 1.0];

pub fn is_standard_fraction(f: f64) -> bool {
    STANDARD_LABEL_FRACTIONS.iter().any(|&s| (s - f).abs() < 1e-12)
}
