//! Bundled calibration tables, runtime profiles, presets and reference data.
//!
//! Every table is TOML text embedded at build time; the same format can be
//! read from disk to override the defaults.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bench::ReferencePoint;
use crate::comm::CommModel;
use crate::cost::{ApiLatencyModel, HostCostModel, KernelCostModel};
use crate::pipeline::SystemSpec;
use crate::runtime::RuntimeProfiles;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{file}: {source}")]
    Parse { file: String, source: toml::de::Error },
    #[error("{file}: {reason}")]
    Invalid { file: String, reason: String },
    #[error("{0}: {1}")]
    Io(String, std::io::Error),
    #[error("unknown preset '{0}'")]
    UnknownPreset(String),
}

/// Cost models used by a simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub kernels: KernelCostModel,
    pub api: ApiLatencyModel,
    pub host: HostCostModel,
    pub comm: CommModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Presets {
    pub presets: BTreeMap<String, SystemSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct References {
    pub points: Vec<ReferencePoint>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub cal: Calibration,
    pub runtime: RuntimeProfiles,
    pub presets: Presets,
    pub references: References,
}

pub const KERNELS_TOML: &str = include_str!("../data/kernels.toml");
pub const API_TOML: &str = include_str!("../data/api.toml");
pub const HOST_TOML: &str = include_str!("../data/host.toml");
pub const LINKS_TOML: &str = include_str!("../data/links.toml");
pub const RUNTIME_TOML: &str = include_str!("../data/runtime.toml");
pub const PRESETS_TOML: &str = include_str!("../data/presets.toml");
pub const REFERENCE_TOML: &str = include_str!("../data/reference.toml");

fn parse<T: for<'de> Deserialize<'de>>(file: &str, text: &str) -> Result<T, ConfigError> {
    toml::from_str(text).map_err(|source| ConfigError::Parse { file: file.into(), source })
}

fn invalid(file: &str, e: impl ToString) -> ConfigError {
    ConfigError::Invalid {
        file: file.into(),
        reason: e.to_string(),
    }
}

impl Bundle {
    /// Parses and validates the seven tables.
    pub fn from_texts(kernels: &str, api: &str, host: &str, links: &str, runtime: &str, presets: &str, reference: &str) -> Result<Bundle, ConfigError> {
        let kernels: KernelCostModel = parse("kernels.toml", kernels)?;
        kernels.validate().map_err(|e| invalid("kernels.toml", e))?;
        let api: ApiLatencyModel = parse("api.toml", api)?;
        api.validate().map_err(|e| invalid("api.toml", e))?;
        let host: HostCostModel = parse("host.toml", host)?;
        let comm: CommModel = parse("links.toml", links)?;
        comm.validate().map_err(|e| invalid("links.toml", e))?;
        let runtime: RuntimeProfiles = parse("runtime.toml", runtime)?;
        for cfg in runtime.profiles.values() {
            cfg.validate().map_err(|e| invalid("runtime.toml", e))?;
        }
        let presets: Presets = parse("presets.toml", presets)?;
        for p in presets.presets.values() {
            p.validate().map_err(|e| invalid("presets.toml", e))?;
        }
        let references: References = parse("reference.toml", reference)?;
        Ok(Bundle {
            cal: Calibration { kernels, api, host, comm },
            runtime,
            presets,
            references,
        })
    }

    /// Reads the tables from `dir`, falling back to the bundled text for
    /// files that are absent.
    pub fn from_dir(dir: &Path) -> Result<Bundle, ConfigError> {
        let read = |name: &str, fallback: &'static str| -> Result<String, ConfigError> {
            let p = dir.join(name);
            if p.exists() {
                std::fs::read_to_string(&p).map_err(|e| ConfigError::Io(p.display().to_string(), e))
            } else {
                Ok(fallback.to_string())
            }
        };
        Bundle::from_texts(
            &read("kernels.toml", KERNELS_TOML)?,
            &read("api.toml", API_TOML)?,
            &read("host.toml", HOST_TOML)?,
            &read("links.toml", LINKS_TOML)?,
            &read("runtime.toml", RUNTIME_TOML)?,
            &read("presets.toml", PRESETS_TOML)?,
            &read("reference.toml", REFERENCE_TOML)?,
        )
    }

    pub fn preset(&self, id: &str) -> Result<SystemSpec, ConfigError> {
        self.presets.presets.get(id).cloned().ok_or_else(|| ConfigError::UnknownPreset(id.into()))
    }
}

/// The bundled defaults, parsed once.
pub fn bundled() -> &'static Bundle {
    static B: OnceLock<Bundle> = OnceLock::new();
    B.get_or_init(|| {
        Bundle::from_texts(KERNELS_TOML, API_TOML, HOST_TOML, LINKS_TOML, RUNTIME_TOML, PRESETS_TOML, REFERENCE_TOML).expect("bundled configuration is valid")
    })
}

pub fn to_toml<T: Serialize>(value: &T) -> String {
    toml::to_string(value).expect("configuration types serialize to TOML")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::{ApiKind, KernelKind};

    #[test]
    fn bundled_tables_parse() {
        let b = bundled();
        assert_eq!(b.cal.kernels.kernels.len(), KernelKind::ALL.len());
        assert_eq!(b.cal.api.calls.len(), ApiKind::ALL.len());
        for p in ["0.9.4", "23.10", "23.10-instant", "hip-native"] {
            b.runtime.get(p).unwrap();
        }
        for id in ["grappa-pme-12k", "grappa-pme-192k", "grappa-rf-46m", "stmv", "adh-cubic", "adh-dodec", "rnase-cubic", "rnase-dodec"] {
            b.preset(id).unwrap();
        }
    }

    #[test]
    fn every_entry_has_provenance() {
        let b = bundled();
        assert!(b.cal.kernels.kernels.values().all(|k| !k.provenance.is_empty()));
        assert!(b.cal.api.calls.values().all(|k| !k.provenance.is_empty()));
        assert!(b.cal.comm.links.values().all(|k| !k.provenance.is_empty()));
        assert!(b.presets.presets.values().all(|k| !k.provenance.is_empty()));
        assert!(b.references.points.iter().all(|k| !k.provenance.is_empty()));
    }

    #[test]
    fn round_trip_through_text() {
        let b = bundled();
        let k: KernelCostModel = toml::from_str(&to_toml(&b.cal.kernels)).unwrap();
        assert_eq!(k, b.cal.kernels);
        let r: RuntimeProfiles = toml::from_str(&to_toml(&b.runtime)).unwrap();
        assert_eq!(r, b.runtime);
    }

    #[test]
    fn api_defaults_match_reported_values() {
        let api = &bundled().cal.api;
        let ev = api.entry(ApiKind::EventRecord).unwrap();
        assert_eq!((ev.mean_us, ev.tail_us), (2.0, 30.0));
        assert_eq!(api.entry(ApiKind::StreamWaitEvent).unwrap().tail_us, 50.0);
        assert!(api.calls.values().all(|l| l.tail_prob == 0.02));
    }

    #[test]
    fn preset_atom_counts() {
        let b = bundled();
        assert_eq!(b.preset("stmv").unwrap().atoms, 1_066_628);
        assert_eq!(b.preset("adh-cubic").unwrap().atoms, 134_177);
        assert_eq!(b.preset("adh-dodec").unwrap().atoms, 95_561);
        assert_eq!(b.preset("rnase-cubic").unwrap().atoms, 24_024);
        assert_eq!(b.preset("rnase-dodec").unwrap().atoms, 16_816);
    }

    #[test]
    fn missing_files_fall_back() {
        let dir = std::env::temp_dir().join(format!("mdsim-config-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        std::fs::write(dir.join("host.toml"), "step_overhead_us = 1.0\nper_task_us = 0.0\nsearch_us_per_atom = 0.0\nprovenance = \"test\"\n").unwrap();
        let b = Bundle::from_dir(&dir).unwrap();
        assert_eq!(b.cal.host.step_overhead_us, 1.0);
        assert_eq!(b.cal.kernels, bundled().cal.kernels);
        std::fs::write(dir.join("api.toml"), "[calls.event_record]\nmean_us = 5.0\ntail_us = 1.0\ntail_prob = 0.1\nprovenance = \"bad\"\n").unwrap();
        assert!(Bundle::from_dir(&dir).is_err());
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
