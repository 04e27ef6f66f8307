//! Run configuration: defaults, TOML file and flags, merged in that order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use cpcmil::cpc::CpcConfig;
use cpcmil::dataset::{SegmentConfig, SyntheticSpec};
use cpcmil::train::TrainConfig;
use cpcmil::{Error, Profile, Result};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub profile: String,
    /// Worker cap for fold-level parallelism.
    pub threads: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractSection {
    /// Instance patch overlap fraction when tiling an image into a bag.
    pub overlap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSection {
    pub folds: usize,
    pub val_fraction: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub budgets: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub synthetic: SyntheticSpec,
    pub segment: SegmentConfig,
    pub extract: ExtractSection,
    pub cpc: CpcConfig,
    pub mil: TrainConfig,
    pub splits: SplitSection,
    pub sweep: SweepSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run: RunSection {
                profile: "desk".into(),
                threads: 1,
            },
            synthetic: SyntheticSpec::default(),
            segment: SegmentConfig::default(),
            extract: ExtractSection { overlap: 0.0 },
            cpc: CpcConfig::default(),
            mil: TrainConfig::default(),
            splits: SplitSection {
                folds: 5,
                val_fraction: 0.25,
                seed: 0,
            },
            sweep: SweepSection {
                budgets: vec!["1".into(), "4".into(), "16".into(), "max".into()],
            },
        }
    }
}

impl RunConfig {
    pub fn profile(&self) -> Result<Profile> {
        let p = Profile::by_name(&self.run.profile)?;
        p.validate()?;
        Ok(p)
    }
}

/// A setting that differs from its default, with where it came from.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Override {
    pub key: String,
    pub value: serde_json::Value,
    pub source: &'static str,
}

/// A flag-supplied value for a dotted key such as `mil.loss`.
pub type FlagValue = (&'static str, Value);

fn cfg_err(msg: impl std::fmt::Display) -> Error {
    Error::Config(msg.to_string())
}

fn set_dotted(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let (section, field) = key
        .split_once('.')
        .ok_or_else(|| cfg_err(format!("setting '{key}' needs a section")))?;
    let sec = table
        .entry(section.to_string())
        .or_insert_with(|| Value::Table(Table::new()));
    match sec {
        Value::Table(t) => {
            t.insert(field.to_string(), value);
            Ok(())
        }
        _ => Err(cfg_err(format!("'{section}' is not a section"))),
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

/// Merge defaults, the optional file and the flags; later sources win.
pub fn resolve(file: Option<&Path>, flags: &[FlagValue]) -> Result<(RunConfig, Vec<Override>)> {
    let defaults = Value::try_from(RunConfig::default()).map_err(cfg_err)?;
    let Value::Table(mut table) = defaults.clone() else {
        unreachable!("a struct serializes to a table")
    };
    let mut source: BTreeMap<String, &'static str> = BTreeMap::new();
    if let Some(path) = file {
        let text = fs::read_to_string(path)
            .map_err(|e| cfg_err(format!("cannot read config {}: {e}", path.display())))?;
        let parsed: Table = text
            .parse()
            .map_err(|e| cfg_err(format!("{}: {e}", path.display())))?;
        for (section, body) in parsed {
            let Value::Table(fields) = body else {
                return Err(cfg_err(format!("top-level key '{section}' must be a [section]")));
            };
            for (k, v) in fields {
                let key = format!("{section}.{k}");
                set_dotted(&mut table, &key, v)?;
                source.insert(key, "file");
            }
        }
    }
    for (key, v) in flags {
        set_dotted(&mut table, key, v.clone())?;
        source.insert(key.to_string(), "flag");
    }
    let cfg: RunConfig = Value::Table(table.clone()).try_into().map_err(cfg_err)?;

    let mut before = BTreeMap::new();
    flatten("", &defaults, &mut before);
    let mut after = BTreeMap::new();
    flatten("", &Value::try_from(&cfg).map_err(cfg_err)?, &mut after);
    let overrides = after
        .iter()
        .filter(|(k, v)| before.get(*k) != Some(*v))
        .map(|(k, v)| Override {
            key: k.clone(),
            value: serde_json::to_value(v).unwrap_or(serde_json::Value::Null),
            source: source.get(k).copied().unwrap_or("file"),
        })
        .collect();
    Ok((cfg, overrides))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let (cfg, over) = resolve(None, &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert!(over.is_empty());
    }

    #[test]
    fn flags_beat_file_beat_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "[mil]\nloss = \"ce\"\npatience = 7\n[cpc]\nepochs = 3\n").unwrap();
        let flags = vec![("mil.patience", Value::Integer(9))];
        let (cfg, over) = resolve(Some(&path), &flags).unwrap();
        assert_eq!(cfg.mil.loss, "ce");
        assert_eq!(cfg.mil.patience, 9);
        assert_eq!(cfg.cpc.epochs, 3);
        let keys: Vec<(&str, &str)> = over.iter().map(|o| (o.key.as_str(), o.source)).collect();
        assert_eq!(keys, vec![("cpc.epochs", "file"), ("mil.loss", "file"), ("mil.patience", "flag")]);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        fs::write(&path, "[mil]\nlearning_rat = 0.1\n").unwrap();
        assert!(matches!(resolve(Some(&path), &[]), Err(Error::Config(_))));
        fs::write(&path, "[nope]\nx = 1\n").unwrap();
        assert!(matches!(resolve(Some(&path), &[]), Err(Error::Config(_))));
    }

    #[test]
    fn optional_learning_rate_can_be_set() {
        let flags = vec![("mil.learning_rate", Value::Float(0.01))];
        let (cfg, over) = resolve(None, &flags).unwrap();
        assert_eq!(cfg.mil.learning_rate, Some(0.01));
        assert_eq!(over.len(), 1);
    }
}
