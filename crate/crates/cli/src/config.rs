//! Training run configuration: a JSON document, optionally overridden key by
//! key from the command line, checked against a fixed table of keys.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use duatm::extractor::{ExtractorKind, RecurrentCell};
use duatm::matcher::DistanceMode;
use duatm::trainer::TrainConfig;
use serde::Deserialize;
use serde_json::{json, Map, Value};

use crate::UsageError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Path,
    Count,
    Number,
    Flag,
    Choice(&'static [&'static str]),
    Counts,
}

struct Key {
    name: &'static str,
    kind: Kind,
    provenance: &'static str,
    about: &'static str,
}

const PUBLISHED: &str = "published setting";

const KEYS: &[Key] = &[
    Key { name: "manifest", kind: Kind::Path, provenance: "required", about: "training manifest (JSON)" },
    Key { name: "checkpoint", kind: Kind::Path, provenance: "convention", about: "where the trained model is written" },
    Key { name: "log", kind: Kind::Path, provenance: "convention", about: "per-step loss log (CSV)" },
    Key { name: "model.mode", kind: Kind::Choice(&["avepool", "intra", "inter", "duatm"]), provenance: "full model", about: "distance used for mining, training and evaluation" },
    Key { name: "model.extractor.kind", kind: Kind::Choice(&["passthrough", "embedding", "spatial", "temporal"]), provenance: "scaled down", about: "feature extractor; embedding suits stored sequences" },
    Key { name: "model.extractor.input_channels", kind: Kind::Count, provenance: "from data", about: "input vector size or image channels; inferred for sequence data" },
    Key { name: "model.extractor.dim", kind: Kind::Count, provenance: "scaled down from 256", about: "feature dimension D" },
    Key { name: "model.extractor.conv_channels", kind: Kind::Counts, provenance: "scaled down", about: "output channels per convolution stage (image and video input)" },
    Key { name: "model.extractor.cell", kind: Kind::Choice(&["tanh"]), provenance: "scaled down", about: "recurrent cell of the video extractor" },
    Key { name: "train.epochs", kind: Kind::Count, provenance: "scaled-down budget", about: "number of epochs" },
    Key { name: "train.steps_per_epoch", kind: Kind::Count, provenance: "scaled-down budget", about: "SGD steps per epoch" },
    Key { name: "train.lr_initial", kind: Kind::Number, provenance: "scaled-down budget", about: "learning rate before the drop" },
    Key { name: "train.lr_final", kind: Kind::Number, provenance: "scaled-down budget", about: "learning rate from the drop epoch on" },
    Key { name: "train.lr_drop_epoch", kind: Kind::Count, provenance: "implementation choice", about: "first epoch at lr_final" },
    Key { name: "train.seed", kind: Kind::Count, provenance: "convention", about: "run seed; --seed, then this key, then DUATM_SEED" },
    Key { name: "train.freeze_extractor", kind: Kind::Flag, provenance: "convention", about: "keep extractor weights fixed" },
    Key { name: "train.loss.gamma", kind: Kind::Number, provenance: PUBLISHED, about: "triplet margin" },
    Key { name: "train.loss.lambda1", kind: Kind::Number, provenance: PUBLISHED, about: "weight of the de-correlation loss" },
    Key { name: "train.loss.lambda2", kind: Kind::Number, provenance: PUBLISHED, about: "weight of the identity loss" },
    Key { name: "train.loss.p", kind: Kind::Number, provenance: PUBLISHED, about: "probability of zeroing a pooling weight" },
    Key { name: "train.batch.P", kind: Kind::Count, provenance: PUBLISHED, about: "identities per batch" },
    Key { name: "train.batch.V", kind: Kind::Count, provenance: PUBLISHED, about: "instances per identity" },
];

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub manifest: PathBuf,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub model: ModelSection,
    pub train: TrainConfig,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub mode: DistanceMode,
    pub extractor: ExtractorSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractorSection {
    pub kind: ExtractorKind,
    pub input_channels: Option<usize>,
    pub dim: usize,
    pub conv_channels: Vec<usize>,
    pub cell: RecurrentCell,
}

fn defaults() -> Value {
    json!({
        "checkpoint": "duatm.ckpt",
        "log": "train_log.csv",
        "model": {
            "mode": "duatm",
            "extractor": {
                "kind": "embedding",
                "input_channels": null,
                "dim": 16,
                "conv_channels": duatm::extractor::default_conv_channels(),
                "cell": "tanh",
            },
        },
        "train": serde_json::to_value(TrainConfig::default()).expect("defaults serialise"),
    })
}

fn flatten(prefix: &str, value: &Value, out: &mut BTreeMap<String, Value>) {
    match value {
        Value::Object(map) if !map.is_empty() || prefix.is_empty() => {
            for (k, v) in map {
                let name = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&name, v, out);
            }
        }
        _ => {
            out.insert(prefix.to_string(), value.clone());
        }
    }
}

fn insert(root: &mut Value, dotted: &str, value: Value) {
    let mut node = root;
    let parts: Vec<&str> = dotted.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        let map = node.as_object_mut().expect("objects on the path");
        node = map.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    node.as_object_mut().expect("objects on the path").insert(parts[parts.len() - 1].to_string(), value);
}

fn describe(v: &Value) -> String {
    match v {
        Value::Null => "auto".into(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn type_problem(key: &Key, v: &Value) -> Option<String> {
    let ok = match key.kind {
        Kind::Path => v.is_string(),
        Kind::Count => v.is_u64(),
        Kind::Number => v.is_number(),
        Kind::Flag => v.is_boolean(),
        Kind::Choice(options) => v.as_str().is_some_and(|s| options.contains(&s)),
        Kind::Counts => v.as_array().is_some_and(|a| a.iter().all(Value::is_u64)),
    };
    if ok {
        return None;
    }
    let expected = match key.kind {
        Kind::Path => "a path string".to_string(),
        Kind::Count => "a non-negative integer".to_string(),
        Kind::Number => "a number".to_string(),
        Kind::Flag => "true or false".to_string(),
        Kind::Choice(options) => format!("one of {}", options.join(", ")),
        Kind::Counts => "a list of non-negative integers".to_string(),
    };
    Some(format!("{}: expected {expected}, got {v}", key.name))
}

/// The key table shown under `--help`.
pub fn help_table() -> String {
    let mut defaults_flat = BTreeMap::new();
    flatten("", &defaults(), &mut defaults_flat);
    let mut out = String::from("Config keys (JSON file for `train`, each overridable with --set KEY=VALUE; flags win):\n");
    for key in KEYS {
        let default = defaults_flat.get(key.name).map_or_else(|| "(none)".to_string(), describe);
        writeln!(out, "  {:<32} default {:<14} [{}] {}", key.name, default, key.provenance, key.about).expect("string write");
    }
    out.push_str("\nThe seed comes from --seed, else train.seed, else the DUATM_SEED environment variable, else 0.");
    out
}

/// Parses `KEY=VALUE`; the value is read as JSON when possible and as a
/// bare string otherwise.
fn parse_override(raw: &str) -> std::result::Result<(String, Value), String> {
    let (key, value) = raw.split_once('=').ok_or_else(|| format!("--set {raw}: expected KEY=VALUE"))?;
    let value = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
    Ok((key.trim().to_string(), value))
}

/// Builds the run configuration from an optional file, `--set` overrides
/// and the seed sources. Every schema problem is reported in one error.
pub fn load(file: Option<&Path>, overrides: &[String], seed_flag: Option<u64>, seed_env: Option<u64>) -> Result<RunConfig> {
    let mut problems = Vec::new();
    let mut doc = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            match serde_json::from_str::<Value>(&text) {
                Ok(v @ Value::Object(_)) => v,
                Ok(_) => {
                    problems.push(format!("{}: top level must be a JSON object", path.display()));
                    json!({})
                }
                Err(e) => return Err(UsageError(format!("{}: {e}", path.display())).into()),
            }
        }
        None => json!({}),
    };

    let mut flat = BTreeMap::new();
    flatten("", &doc, &mut flat);
    if !flat.contains_key("train.seed") {
        if let Some(seed) = seed_env {
            flat.insert("train.seed".into(), json!(seed));
        }
    }
    for raw in overrides {
        match parse_override(raw) {
            Ok((k, v)) => {
                flat.insert(k, v);
            }
            Err(e) => problems.push(e),
        }
    }
    if let Some(seed) = seed_flag {
        flat.insert("train.seed".into(), json!(seed));
    }

    let mut rejected = Vec::new();
    for (name, value) in &flat {
        let problem = match KEYS.iter().find(|k| k.name == name) {
            None => Some(format!("unknown key {name}")),
            Some(key) if key.name == "model.extractor.input_channels" && value.is_null() => None,
            Some(key) => type_problem(key, value),
        };
        if let Some(p) = problem {
            problems.push(p);
            rejected.push(name.clone());
        }
    }
    for name in rejected {
        flat.remove(&name);
    }
    if !flat.contains_key("manifest") {
        problems.push("missing required key manifest".into());
        flat.insert("manifest".into(), json!(""));
    }

    // Range checks run on whatever survived the type checks, so one pass
    // reports both kinds of problem.
    doc = defaults();
    for (name, value) in flat {
        insert(&mut doc, &name, value);
    }
    let config: RunConfig = match serde_json::from_value(doc) {
        Ok(c) => c,
        Err(e) => {
            problems.push(e.to_string());
            return Err(schema_error(problems));
        }
    };
    problems.extend(config.train.problems().into_iter().map(|p| format!("train: {p}")));
    let ex = &config.model.extractor;
    if ex.dim == 0 || ex.input_channels == Some(0) || ex.conv_channels.contains(&0) {
        problems.push("model.extractor: extents must be positive".into());
    }
    if ex.kind == ExtractorKind::Passthrough && ex.input_channels.is_some_and(|c| c != ex.dim) {
        problems.push("model.extractor: passthrough needs input_channels == dim".into());
    }
    if !problems.is_empty() {
        return Err(schema_error(problems));
    }
    Ok(config)
}

fn schema_error(problems: Vec<String>) -> anyhow::Error {
    let mut msg = format!("invalid configuration ({} problem{}):", problems.len(), if problems.len() == 1 { "" } else { "s" });
    for p in problems {
        msg.push_str("\n  - ");
        msg.push_str(&p);
    }
    UsageError(msg).into()
}
