//! Flat `key = value` run configuration.
//!
//! Every model and training hyperparameter is a top-level key, plus a few
//! run-level keys (`preset`, `arch`, `data`, `out`, `validation_volumes`).
//! Arrays are written as comma-separated values. Lines starting with `#`
//! are comments. Command-line overrides (`--key value`) are applied after
//! the file, in order.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use convcaps::model::{Arch, ModelConfig};
use convcaps::pipeline::TrainConfig;
use serde_json::{Map, Value};

use crate::CliError;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// `default` or `tiny`: the model hyperparameters other keys start from.
    pub preset: String,
    pub arch: Arch,
    /// Data manifest written by `gen-data`.
    pub data: PathBuf,
    /// Directory receiving the checkpoint, log and echoed config.
    pub out: PathBuf,
    /// Trailing manifest volumes held out for validation.
    pub validation_volumes: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn preset(name: &str) -> Result<ModelConfig, CliError> {
    match name {
        "default" => Ok(ModelConfig::default()),
        "tiny" => Ok(ModelConfig::tiny()),
        _ => Err(CliError::Usage(format!("unknown preset `{name}` (expected default or tiny)"))),
    }
}

fn object<T: serde::Serialize>(value: &T) -> Map<String, Value> {
    match serde_json::to_value(value) {
        Ok(Value::Object(map)) => map,
        _ => unreachable!("configs serialize to objects"),
    }
}

/// Parses `raw` into the JSON type of `template`.
fn typed(key: &str, raw: &str, template: &Value) -> Result<Value, CliError> {
    let bad = || CliError::Usage(format!("invalid value `{raw}` for `{key}`"));
    let raw = raw.trim();
    Ok(match template {
        Value::Number(n) if n.is_u64() => Value::from(raw.parse::<u64>().map_err(|_| bad())?),
        Value::Number(_) => {
            let x: f64 = raw.parse().map_err(|_| bad())?;
            Value::from(serde_json::Number::from_f64(x).ok_or_else(bad)?)
        }
        Value::Bool(_) => Value::from(raw.parse::<bool>().map_err(|_| bad())?),
        Value::Array(items) => {
            let parts: Vec<&str> = raw.split(',').collect();
            if parts.len() != items.len() {
                return Err(CliError::Usage(format!(
                    "`{key}` takes {} comma-separated values, got `{raw}`",
                    items.len()
                )));
            }
            Value::Array(
                parts
                    .iter()
                    .zip(items)
                    .map(|(p, t)| typed(key, p, t))
                    .collect::<Result<_, _>>()?,
            )
        }
        _ => Value::from(raw),
    })
}

fn render(value: &Value) -> String {
    match value {
        Value::Array(items) => items.iter().map(render).collect::<Vec<_>>().join(","),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Splits `key = value` lines, skipping blanks and comments.
pub fn parse_lines(text: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("line {}: expected key = value, got `{line}`", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Turns `--key value` / `--key=value` arguments into pairs.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let key = arg
            .strip_prefix("--")
            .ok_or_else(|| CliError::Usage(format!("expected --key value, got `{arg}`")))?;
        let (key, value) = match key.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| CliError::Usage(format!("missing value for --{key}")))?;
                (key.to_string(), v.clone())
            }
        };
        out.push((key.replace('-', "_"), value));
    }
    Ok(out)
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            preset: "default".into(),
            arch: Arch::ConvCaps,
            data: PathBuf::from("data/manifest.json"),
            out: PathBuf::from("run"),
            validation_volumes: 1,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    /// Defaults, then `file` (if any), then `overrides`.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, CliError> {
        let mut pairs = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
                parse_lines(&text)?
            }
            None => Vec::new(),
        };
        pairs.extend(overrides.iter().cloned());
        Self::from_pairs(&pairs)
    }

    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self, CliError> {
        let mut cfg = RunConfig::default();
        if let Some((_, name)) = pairs.iter().rev().find(|(k, _)| k == "preset") {
            cfg.preset = name.clone();
        }
        let mut model = object(&preset(&cfg.preset)?);
        let mut train = object(&TrainConfig::default());
        for (key, raw) in pairs {
            match key.as_str() {
                "preset" => {}
                "arch" => cfg.arch = Arch::from_tag(raw).map_err(|e| CliError::Usage(e.to_string()))?,
                "data" => cfg.data = PathBuf::from(raw),
                "out" => cfg.out = PathBuf::from(raw),
                "validation_volumes" => {
                    cfg.validation_volumes = raw
                        .parse()
                        .map_err(|_| CliError::Usage(format!("invalid value `{raw}` for `{key}`")))?
                }
                k => {
                    let map = if model.contains_key(k) {
                        &mut model
                    } else if train.contains_key(k) {
                        &mut train
                    } else {
                        return Err(CliError::Usage(format!("unknown configuration key `{k}`")));
                    };
                    let v = typed(k, raw, &map[k])?;
                    map.insert(k.to_string(), v);
                }
            }
        }
        let invalid = |e: serde_json::Error| CliError::Usage(e.to_string());
        cfg.model = serde_json::from_value(Value::Object(model)).map_err(invalid)?;
        cfg.train = serde_json::from_value(Value::Object(train)).map_err(invalid)?;
        cfg.model.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        cfg.train.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }

    /// Every key, sorted, one `key = value` per line.
    pub fn canonical(&self) -> String {
        let mut all: BTreeMap<String, String> = BTreeMap::new();
        all.insert("preset".into(), self.preset.clone());
        all.insert("arch".into(), self.arch.tag().into());
        all.insert("data".into(), self.data.display().to_string());
        all.insert("out".into(), self.out.display().to_string());
        all.insert("validation_volumes".into(), self.validation_volumes.to_string());
        for (k, v) in object(&self.model).iter().chain(object(&self.train).iter()) {
            all.insert(k.clone(), render(v));
        }
        let mut text = String::new();
        for (k, v) in &all {
            let _ = writeln!(text, "{k} = {v}");
        }
        text
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(items: &[(&str, &str)]) -> Vec<(String, String)> {
        items.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn canonical_text_round_trips() {
        let cfg = RunConfig::from_pairs(&pairs(&[
            ("preset", "tiny"),
            ("arch", "baseline"),
            ("patch_size", "16,16,24"),
            ("learning_rate", "0.00025"),
            ("max_iterations", "7"),
        ]))
        .unwrap();
        assert_eq!(cfg.arch, Arch::ConvBaseline);
        assert_eq!(cfg.train.patch_size, [16, 16, 24]);
        assert_eq!(cfg.model, ModelConfig::tiny());
        let text = cfg.canonical();
        assert!(text.contains("patch_size = 16,16,24\n"));
        let back = RunConfig::from_pairs(&parse_lines(&text).unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.canonical(), text);
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        assert!(RunConfig::from_pairs(&pairs(&[("learning_rat", "1")])).is_err());
        assert!(RunConfig::from_pairs(&pairs(&[("max_iterations", "1.5")])).is_err());
        assert!(RunConfig::from_pairs(&pairs(&[("patch_size", "32,32")])).is_err());
        assert!(RunConfig::from_pairs(&pairs(&[("patch_size", "30,32,32")])).is_err());
        assert!(RunConfig::from_pairs(&pairs(&[("preset", "huge")])).is_err());
    }

    #[test]
    fn overrides_accept_both_spellings() {
        let args: Vec<String> = ["--max-iterations", "5", "--seed=3"].iter().map(|s| s.to_string()).collect();
        let got = parse_overrides(&args).unwrap();
        assert_eq!(got, pairs(&[("max_iterations", "5"), ("seed", "3")]));
        assert!(parse_overrides(&["seed".to_string()]).is_err());
        assert!(parse_overrides(&["--seed".to_string()]).is_err());
    }

    #[test]
    fn later_entries_win() {
        let cfg = RunConfig::from_pairs(&pairs(&[("seed", "1"), ("seed", "2")])).unwrap();
        assert_eq!(cfg.train.seed, 2);
    }
}
