//! Experiment configuration files.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::eval::sweep::SWEEP_FRACTIONS;
use crate::transfer::{Strategy, TrainConfig, DEFAULT_BATCH_SIZE, DEFAULT_LEARNING_RATE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Dataset directory (`manifest.jsonl`, `atlas.json`, arrays).
    pub data: PathBuf,
    pub labels: Option<PathBuf>,
    /// Atlas override; the dataset's own `atlas.json` otherwise.
    pub atlas: Option<PathBuf>,
    pub output: PathBuf,
    /// Phantom spec the dataset was generated from, if any.
    pub phantom: Option<PathBuf>,
    pub split_seed: u64,
    pub seeds: Vec<u64>,
    pub strategies: Vec<Strategy>,
    pub fractions: Vec<f64>,
    pub train: TrainConfig,
    /// Fields that were absent and took their default value.
    #[serde(skip)]
    pub defaults_applied: Vec<String>,
}

const TOP_KEYS: [&str; 10] = [
    "data",
    "labels",
    "atlas",
    "output",
    "phantom",
    "split_seed",
    "seeds",
    "strategies",
    "fractions",
    "train",
];

const TRAIN_KEYS: [&str; 14] = [
    "strategy",
    "lambda_mc",
    "epochs",
    "pretrain_epochs",
    "seed",
    "data_fraction",
    "batch_size",
    "learning_rate",
    "encoder",
    "input",
    "mc_pool",
    "freeze_aux",
    "zero_aux",
    "init_from",
];

fn path_field(obj: &Map<String, Value>, key: &str, errors: &mut Vec<String>) -> Option<PathBuf> {
    match obj.get(key) {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(PathBuf::from(s)),
        Some(other) => {
            errors.push(format!("{key}: expected a path string, got {other}"));
            None
        }
    }
}

fn require_exists(key: &str, path: &Option<PathBuf>, errors: &mut Vec<String>) {
    if let Some(p) = path {
        if !p.exists() {
            errors.push(format!("{key}: {} does not exist", p.display()));
        }
    }
}

/// Parses and checks a config from JSON text, reporting every failing field.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let root: Value = serde_json::from_str(text)?;
    let obj = root
        .as_object()
        .ok_or_else(|| Error::Config(vec!["config: expected a JSON object".into()]))?;
    let mut errors = Vec::new();
    let mut defaults_applied = Vec::new();

    for k in obj.keys().filter(|k| !TOP_KEYS.contains(&k.as_str())) {
        errors.push(format!("{k}: unknown field"));
    }

    let data = path_field(obj, "data", &mut errors);
    if data.is_none() {
        errors.push("data: missing dataset path".into());
    }
    let labels = path_field(obj, "labels", &mut errors);
    let atlas = path_field(obj, "atlas", &mut errors);
    let phantom = path_field(obj, "phantom", &mut errors);
    require_exists("data", &data, &mut errors);
    require_exists("labels", &labels, &mut errors);
    require_exists("atlas", &atlas, &mut errors);
    require_exists("phantom", &phantom, &mut errors);
    let output = path_field(obj, "output", &mut errors).unwrap_or_else(|| {
        defaults_applied.push("output = runs".into());
        PathBuf::from("runs")
    });

    let split_seed = match obj.get("split_seed") {
        None => 0,
        Some(v) => v.as_u64().unwrap_or_else(|| {
            errors.push(format!(
                "split_seed: expected a non-negative integer, got {v}"
            ));
            0
        }),
    };

    let seeds: Vec<u64> = match obj.get("seeds") {
        None => {
            errors.push("seeds: missing".into());
            vec![]
        }
        Some(v) => match serde_json::from_value::<Vec<u64>>(v.clone()) {
            Ok(s) if s.is_empty() => {
                errors.push("seeds: must not be empty".into());
                s
            }
            Ok(s) => s,
            Err(e) => {
                errors.push(format!("seeds: {e}"));
                vec![]
            }
        },
    };

    let strategies: Vec<Strategy> = match obj.get("strategies") {
        None => {
            defaults_applied.push("strategies = all".into());
            Strategy::ALL
                .into_iter()
                .filter(|s| *s != Strategy::BaselinePretrained)
                .collect()
        }
        Some(Value::Array(items)) => items
            .iter()
            .filter_map(|v| match v.as_str().map(str::parse::<Strategy>) {
                Some(Ok(s)) => Some(s),
                _ => {
                    errors.push(format!("strategies: unknown strategy {v}"));
                    None
                }
            })
            .collect(),
        Some(v) => {
            errors.push(format!("strategies: expected a list, got {v}"));
            vec![]
        }
    };

    let fractions: Vec<f64> = match obj.get("fractions") {
        None => vec![1.0],
        Some(v) => match serde_json::from_value::<Vec<f64>>(v.clone()) {
            Ok(f) => {
                for x in f.iter().filter(|x| !SWEEP_FRACTIONS.contains(x)) {
                    errors.push(format!("fractions: {x} is not one of 0.25, 0.5, 0.75, 1.0"));
                }
                f
            }
            Err(e) => {
                errors.push(format!("fractions: {e}"));
                vec![]
            }
        },
    };

    let train_obj = match obj.get("train") {
        None => Map::new(),
        Some(Value::Object(m)) => m.clone(),
        Some(v) => {
            errors.push(format!("train: expected an object, got {v}"));
            Map::new()
        }
    };
    for k in train_obj
        .keys()
        .filter(|k| !TRAIN_KEYS.contains(&k.as_str()))
    {
        errors.push(format!("train.{k}: unknown field"));
    }
    if !train_obj.contains_key("batch_size") {
        defaults_applied.push(format!("batch_size = {DEFAULT_BATCH_SIZE}"));
    }
    if !train_obj.contains_key("learning_rate") {
        defaults_applied.push(format!("learning_rate = {DEFAULT_LEARNING_RATE:e}"));
    }
    let train = match serde_json::from_value::<TrainConfig>(Value::Object(train_obj)) {
        Ok(t) => {
            errors.extend(t.problems());
            t
        }
        Err(e) => {
            errors.push(format!("train: {e}"));
            TrainConfig::default()
        }
    };

    if !errors.is_empty() {
        return Err(Error::Config(errors));
    }
    for d in &defaults_applied {
        info!("config default: {d}");
    }
    Ok(ExperimentConfig {
        data: data.expect("checked above"),
        labels,
        atlas,
        output,
        phantom,
        split_seed,
        seeds,
        strategies,
        fractions,
        train,
        defaults_applied,
    })
}

/// Reads and validates a config file before any compute happens.
pub fn validate_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}
