//! Layered run configuration: defaults < preset < TOML file < environment
//! (`RESPSED_SECTION__KEY=value`) < explicit overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::detector::DetectorConfig;
use crate::error::{Error, Result};
use crate::events::CollarConfig;
use crate::features::FeatureConfig;
use crate::model::EdgeMode;
use crate::refiner::HeadMode;
use crate::trainer::TrainConfig;

pub const ENV_PREFIX: &str = "RESPSED_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub features: FeatureConfig,
    pub detector: DetectorConfig,
    pub train: TrainConfig,
    pub collar: CollarConfig,
    /// Condition node embeddings on position/gender metadata.
    pub use_meta: bool,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.features.validate()?;
        self.detector.validate()?;
        self.train.validate()?;
        if self.features.n_bands != self.detector.model.bands {
            return Err(Error::Config(format!(
                "features.n_bands = {} but detector.model.bands = {}",
                self.features.n_bands, self.detector.model.bands
            )));
        }
        if self.features.channels.len() != self.detector.model.in_channels {
            return Err(Error::Config("detector.model.in_channels must match the feature channel count".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Toml(e.to_string()))
    }
}

/// One architecture row: head layout x edge-attribute mode x offset range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Preset {
    pub head_mode: HeadMode,
    pub edge_mode: EdgeMode,
    pub offset_range: f64,
}

impl Preset {
    /// Names look like `integrated-c-1.0` or `separate-s-20.0`.
    pub fn name(&self) -> String {
        let head = match self.head_mode {
            HeadMode::Integrated => "integrated",
            HeadMode::Separate => "separate",
        };
        let edge = match self.edge_mode {
            EdgeMode::Compressed => "c",
            EdgeMode::Sequential => "s",
        };
        format!("{head}-{edge}-{:.1}", self.offset_range)
    }

    fn layer(&self) -> Table {
        let head = match self.head_mode {
            HeadMode::Integrated => "integrated",
            HeadMode::Separate => "separate",
        };
        let edge = match self.edge_mode {
            EdgeMode::Compressed => "compressed",
            EdgeMode::Sequential => "sequential",
        };
        let text = format!(
            "[detector.refiner]\nhead_mode = \"{head}\"\noffset_range = {:?}\n[detector.model]\nedge_mode = \"{edge}\"\n",
            self.offset_range
        );
        text.parse().expect("preset layer is valid TOML")
    }
}

/// Every shipped preset.
pub fn presets() -> Vec<Preset> {
    use EdgeMode::{Compressed as C, Sequential as S};
    use HeadMode::{Integrated as I, Separate as P};
    let rows: &[(HeadMode, EdgeMode, &[f64])] = &[
        (I, C, &[0.5, 1.0, 1.5, 20.0]),
        (I, S, &[0.5, 1.0, 1.5, 20.0]),
        (P, C, &[0.2, 0.5, 1.0, 1.5, 10.0, 20.0]),
        (P, S, &[0.5, 1.0, 1.5, 20.0]),
    ];
    rows.iter()
        .flat_map(|&(head_mode, edge_mode, ranges)| {
            ranges.iter().map(move |&offset_range| Preset { head_mode, edge_mode, offset_range })
        })
        .collect()
}

pub fn preset(name: &str) -> Result<Preset> {
    presets().into_iter().find(|p| p.name() == name).ok_or_else(|| {
        let known: Vec<String> = presets().iter().map(Preset::name).collect();
        Error::Config(format!("unknown preset `{name}`; known: {}", known.join(", ")))
    })
}

/// Recursively overlays `top` onto `base`.
pub fn merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses `RESPSED_TRAIN__EPOCHS=5`-style variables into a table. Values are
/// read as TOML literals, falling back to plain strings.
pub fn env_layer<I: IntoIterator<Item = (String, String)>>(vars: I) -> Result<Table> {
    let mut out = Table::new();
    for (key, raw) in vars {
        let Some(path) = key.strip_prefix(ENV_PREFIX) else { continue };
        let parts: Vec<String> = path.split("__").map(str::to_lowercase).collect();
        if parts.iter().any(String::is_empty) {
            return Err(Error::Config(format!("malformed override variable `{key}`")));
        }
        let value = format!("v = {raw}")
            .parse::<Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or(Value::String(raw));
        let mut node = &mut out;
        for p in &parts[..parts.len() - 1] {
            node = match node.entry(p.clone()).or_insert_with(|| Value::Table(Table::new())) {
                Value::Table(t) => t,
                _ => return Err(Error::Config(format!("conflicting override for `{key}`"))),
            };
        }
        node.insert(parts[parts.len() - 1].clone(), value);
    }
    Ok(out)
}

#[derive(Debug, Default)]
pub struct ConfigLayers<'a> {
    pub preset: Option<&'a str>,
    pub file: Option<&'a Path>,
    pub env: Vec<(String, String)>,
    pub overrides: Option<Table>,
}

/// Resolves and validates the layered configuration.
pub fn resolve(layers: &ConfigLayers<'_>) -> Result<RunConfig> {
    let mut table: Table = Table::try_from(RunConfig::default()).map_err(|e| Error::Toml(e.to_string()))?;
    if let Some(name) = layers.preset {
        merge(&mut table, preset(name)?.layer());
    }
    if let Some(path) = layers.file {
        let text = std::fs::read_to_string(path).map_err(|e| Error::path(path, e))?;
        let t: Table = text.parse().map_err(|e: toml::de::Error| Error::Toml(format!("{}: {e}", path.display())))?;
        merge(&mut table, t);
    }
    merge(&mut table, env_layer(layers.env.iter().cloned())?);
    if let Some(o) = &layers.overrides {
        merge(&mut table, o.clone());
    }
    let cfg: RunConfig = Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Toml(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = resolve(&ConfigLayers::default()).unwrap();
        assert_eq!(cfg, RunConfig::default());
        let back: RunConfig = toml::from_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn eighteen_distinct_presets() {
        let names: std::collections::BTreeSet<String> = presets().iter().map(Preset::name).collect();
        assert_eq!(names.len(), 18);
        assert!(names.contains("integrated-c-20.0") && names.contains("separate-c-0.2"));
    }

    #[test]
    fn layers_apply_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.toml");
        std::fs::write(&file, "[train]\nepochs = 7\nseed = 3\n[detector.refiner]\noffset_range = 2.5\n").unwrap();
        let env = vec![
            ("RESPSED_TRAIN__SEED".to_string(), "11".to_string()),
            ("OTHER_THING".to_string(), "x".to_string()),
        ];
        let mut overrides = Table::new();
        overrides.insert("use_meta".into(), Value::Boolean(true));
        let cfg = resolve(&ConfigLayers {
            preset: Some("separate-s-20.0"),
            file: Some(&file),
            env,
            overrides: Some(overrides),
        })
        .unwrap();
        assert_eq!(cfg.detector.refiner.head_mode, HeadMode::Separate);
        assert_eq!(cfg.detector.model.edge_mode, EdgeMode::Sequential);
        assert_eq!(cfg.detector.refiner.offset_range, 2.5);
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.train.seed, 11);
        assert!(cfg.use_meta);
    }

    #[test]
    fn unknown_keys_and_presets_fail() {
        assert!(preset("integrated-x-1.0").is_err());
        let env = vec![("RESPSED_BOGUS".to_string(), "1".to_string())];
        assert!(resolve(&ConfigLayers { env, ..Default::default() }).is_err());
    }

    #[test]
    fn env_values_parse_as_toml_or_string() {
        let t = env_layer(vec![
            ("RESPSED_A__B".to_string(), "[1, 2]".to_string()),
            ("RESPSED_C".to_string(), "plain words".to_string()),
        ])
        .unwrap();
        assert_eq!(t["a"]["b"], Value::Array(vec![Value::Integer(1), Value::Integer(2)]));
        assert_eq!(t["c"], Value::String("plain words".into()));
    }
}
