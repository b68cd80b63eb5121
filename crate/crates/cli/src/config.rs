//! Run configuration: a flat `key = value` view over nested settings.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use typespan::datasets::{CorpusFormat, DescriptionMode};
use typespan::decoder::{DecodeConfig, Strategy};
use typespan::encoder::EncoderConfig;
use typespan::head::HeadConfig;
use typespan::model::ModelConfig;
use typespan::trainer::TrainConfig;

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Type definitions; derived from training labels when absent.
    pub types: Option<PathBuf>,
    pub format: CorpusFormat,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: None,
            dev: None,
            test: None,
            types: None,
            format: CorpusFormat::JsonSpans,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub train: TrainConfig,
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
    pub description_mode: DescriptionMode,
    pub strategy: Strategy,
    pub flat: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            train: TrainConfig::default(),
            encoder: EncoderConfig::default(),
            head: HeadConfig::default(),
            description_mode: DescriptionMode::Guideline,
            strategy: Strategy::SpanOnly,
            flat: false,
        }
    }
}

/// Keys filled in from other settings and therefore not settable.
const DERIVED_KEYS: [&str; 3] = ["encoder.dropout", "head.d_model", "head.width_rows"];

impl RunConfig {
    pub fn model_config(&self) -> ModelConfig {
        let base = ModelConfig {
            encoder: self.encoder.clone(),
            head: self.head.clone(),
            description_mode: self.description_mode,
            max_seq_len: self.train.max_seq_len,
            stride: self.train.stride,
            decode: DecodeConfig {
                strategy: self.strategy,
                flat: self.flat,
                ..DecodeConfig::default()
            },
        };
        self.train.apply_to(&base)
    }

    /// Every settable key with its current value.
    pub fn flat(&self) -> BTreeMap<String, Value> {
        let mut out = BTreeMap::new();
        flatten(&serde_json::to_value(self).expect("config serializes"), "", &mut out);
        for k in DERIVED_KEYS {
            out.remove(k);
        }
        out
    }

    pub fn valid_keys() -> Vec<String> {
        Self::default().flat().into_keys().collect()
    }

    /// Applies `overrides` in order on top of the defaults.
    pub fn resolve(overrides: &[(String, Value)]) -> Result<Self, CliError> {
        let valid = Self::valid_keys();
        let mut tree = serde_json::to_value(Self::default()).expect("config serializes");
        for (key, value) in overrides {
            if !valid.contains(key) {
                return Err(CliError::Usage(format!(
                    "unknown config key `{key}`; valid keys:\n  {}",
                    valid.join("\n  ")
                )));
            }
            set_path(&mut tree, key, leaf_to_tree(key, value.clone()));
        }
        let config: Self =
            serde_json::from_value(tree).map_err(|e| CliError::Usage(format!("invalid config value: {e}")))?;
        config
            .train
            .validate()
            .and_then(|_| config.model_config().validate())
            .map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(config)
    }

    /// `key = value` lines, one per settable key.
    pub fn render(&self) -> String {
        self.flat()
            .iter()
            .map(|(k, v)| format!("{k} = {}\n", render_value(v)))
            .collect()
    }
}

fn render_value(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Objects tagged with `kind` (threshold modes) stay single keys.
fn flatten(v: &Value, prefix: &str, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(m) if !m.contains_key("kind") && !m.is_empty() => {
            for (k, child) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(child, &key, out);
            }
        }
        Value::Object(m) if m.contains_key("kind") && m.get("values").is_none_or(|v| v.as_array().is_some_and(Vec::is_empty)) => {
            out.insert(prefix.to_string(), m["kind"].clone());
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

/// A bare threshold-mode name becomes its tagged form.
fn leaf_to_tree(key: &str, value: Value) -> Value {
    match value {
        Value::String(s) if key.ends_with("threshold_mode") => {
            let mut m = Map::new();
            if s == "dev_tuned" {
                m.insert("values".into(), Value::Array(Vec::new()));
            }
            m.insert("kind".into(), Value::String(s));
            Value::Object(m)
        }
        other => other,
    }
}

fn set_path(tree: &mut Value, key: &str, value: Value) {
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        if !node.get(*part).is_some_and(Value::is_object) {
            node[*part] = Value::Object(Map::new());
        }
        node = node.get_mut(*part).expect("just inserted");
    }
    node[parts[parts.len() - 1]] = value;
}

/// A command-line or file value: JSON if it parses, a string otherwise.
pub fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()))
}

/// `key=value` pair from the command line.
pub fn parse_override(s: &str) -> Result<(String, Value), CliError> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("expected key=value, got `{s}`")))?;
    Ok((k.trim().to_string(), parse_value(v)))
}

/// Reads a config file: a JSON object (nested or with dotted keys) or
/// `key = value` lines with `#` comments.
pub fn read_config_file(path: &Path) -> Result<Vec<(String, Value)>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    if text.trim_start().starts_with('{') {
        let v: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config {} is not valid JSON: {e}", path.display())))?;
        let mut flat = BTreeMap::new();
        flatten(&v, "", &mut flat);
        return Ok(flat.into_iter().collect());
    }
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let pair = parse_override(line)
            .map_err(|_| CliError::Usage(format!("{}:{}: expected key = value", path.display(), n + 1)))?;
        out.push(pair);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use typespan::decoder::ThresholdMode;

    #[test]
    fn defaults_round_trip_through_flat_keys() {
        let d = RunConfig::default();
        let pairs: Vec<(String, Value)> = d.flat().into_iter().collect();
        assert_eq!(RunConfig::resolve(&pairs).unwrap(), d);
    }

    #[test]
    fn training_defaults_are_materialized() {
        let text = RunConfig::default().render();
        for line in [
            "train.learning_rate = 0.00003",
            "train.epochs = 20",
            "train.batch_size = 8",
            "train.max_span_len = 30",
            "train.eval_every_steps = 50",
            "train.patience = 10",
            "train.weights.alpha = 0.2",
            "train.weights.lambda = 0.6",
            "train.threshold_mode = dynamic",
        ] {
            assert!(text.lines().any(|l| l == line), "missing `{line}` in\n{text}");
        }
    }

    #[test]
    fn overrides_apply_and_parse_types() {
        let c = RunConfig::resolve(&[
            parse_override("train.learning_rate=0.001").unwrap(),
            parse_override("train.threshold_mode=learned_global").unwrap(),
            parse_override("data.train=corpus.jsonl").unwrap(),
            parse_override("strategy=joint_position_span").unwrap(),
            parse_override("train.max_steps=12").unwrap(),
        ])
        .unwrap();
        assert_eq!(c.train.learning_rate, 1e-3);
        assert_eq!(c.train.threshold_mode, ThresholdMode::LearnedGlobal);
        assert_eq!(c.data.train.as_deref(), Some(Path::new("corpus.jsonl")));
        assert_eq!(c.strategy, Strategy::JointPositionSpan);
        assert_eq!(c.train.max_steps, Some(12));
        let tuned = RunConfig::resolve(&[parse_override("train.threshold_mode=dev_tuned").unwrap()]).unwrap();
        assert_eq!(tuned.train.threshold_mode, ThresholdMode::DevTuned(Vec::new()));
    }

    #[test]
    fn unknown_key_lists_valid_keys() {
        let Err(CliError::Usage(msg)) = RunConfig::resolve(&[parse_override("train.lr=1").unwrap()]) else {
            panic!("expected a usage error");
        };
        assert!(msg.contains("train.lr"));
        assert!(msg.contains("train.learning_rate"));
        assert!(RunConfig::resolve(&[parse_override("head.width_rows=3").unwrap()]).is_err());
    }

    #[test]
    fn bad_values_are_usage_errors() {
        assert!(matches!(
            RunConfig::resolve(&[parse_override("train.epochs=many").unwrap()]),
            Err(CliError::Usage(_))
        ));
        assert!(matches!(
            RunConfig::resolve(&[parse_override("train.batch_size=0").unwrap()]),
            Err(CliError::Usage(_))
        ));
    }

    #[test]
    fn reads_both_file_forms() {
        let dir = tempfile::tempdir().unwrap();
        let kv = dir.path().join("run.conf");
        std::fs::write(&kv, "# toy\ntrain.epochs = 3\nencoder.d_model = 32 # small\n").unwrap();
        let json = dir.path().join("run.json");
        std::fs::write(&json, r#"{"train": {"epochs": 3}, "encoder.d_model": 32}"#).unwrap();
        for path in [kv, json] {
            let c = RunConfig::resolve(&read_config_file(&path).unwrap()).unwrap();
            assert_eq!(c.train.epochs, 3);
            assert_eq!(c.encoder.d_model, 32);
            assert_eq!(c.model_config().head.d_model, 32);
        }
    }
}
