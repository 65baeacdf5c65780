//! TOML run configuration.
//!
//! A file holds up to six tables — `[corpus]`, `[teacher]`, `[student]`,
//! `[train]`, `[distill]`, `[lens]` — each overlaying the built-in defaults
//! key by key. Unknown tables and keys are rejected with the nearest valid
//! name.

use std::path::Path;

use distillens::distill::{DistillConfig, InterLoss, TaskLoss, TrainConfig};
use distillens::lens::LensConfig;
use distillens::model::ModelConfig;
use distillens::synth::CorpusSpec;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillKnobs {
    pub task_loss: TaskLoss,
    pub inter_loss: InterLoss,
    pub lambda: f64,
    pub k: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mapping: Option<Vec<(usize, usize)>>,
}

impl Default for DistillKnobs {
    fn default() -> Self {
        let d = DistillConfig::default();
        Self {
            task_loss: d.task_loss,
            inter_loss: d.inter_loss,
            lambda: d.lambda,
            k: d.k,
            mapping: d.mapping,
        }
    }
}

/// Keys that are valid but absent from the serialized defaults.
const OPTIONAL_KEYS: &[(&str, &str)] = &[("distill", "mapping")];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: CorpusSpec,
    pub teacher: ModelConfig,
    pub student: ModelConfig,
    pub train: TrainConfig,
    pub distill: DistillKnobs,
    pub lens: LensConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusSpec::default(),
            teacher: ModelConfig::teacher_default(),
            student: ModelConfig::student_default(),
            train: TrainConfig::default(),
            distill: DistillKnobs::default(),
            lens: LensConfig::default(),
        }
    }
}

fn nearest<'a>(key: &str, candidates: impl IntoIterator<Item = &'a str>) -> Option<&'a str> {
    candidates.into_iter().min_by_key(|c| strsim::levenshtein(key, c))
}

fn unknown(what: &str, key: &str, suggestion: Option<&str>) -> CliError {
    match suggestion {
        Some(s) => CliError::Config(format!("unknown {what} `{key}`; nearest valid key is `{s}`")),
        None => CliError::Config(format!("unknown {what} `{key}`")),
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, CliError> {
        let file: Table = text
            .parse()
            .map_err(|e: toml::de::Error| CliError::Config(format!("config is not valid TOML: {e}")))?;
        let Value::Table(mut merged) = Value::try_from(Self::default()).expect("defaults serialize") else {
            unreachable!("config serializes to a table")
        };
        for (section, value) in file {
            let Some(Value::Table(target)) = merged.get_mut(&section) else {
                let names: Vec<String> = Self::default_tables().keys().cloned().collect();
                return Err(unknown(
                    "table",
                    &section,
                    nearest(&section, names.iter().map(String::as_str)),
                ));
            };
            let Value::Table(entries) = value else {
                return Err(CliError::Config(format!("`{section}` must be a table")));
            };
            let mut valid: Vec<String> = target.keys().cloned().collect();
            valid.extend(
                OPTIONAL_KEYS
                    .iter()
                    .filter(|(s, _)| *s == section)
                    .map(|(_, k)| k.to_string()),
            );
            for (key, v) in entries {
                if !valid.contains(&key) {
                    let near = nearest(&key, valid.iter().map(String::as_str)).map(|k| format!("{section}.{k}"));
                    return Err(unknown("key", &format!("{section}.{key}"), near.as_deref()));
                }
                target.insert(key, v);
            }
        }
        Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(format!("invalid config value: {e}")))
    }

    fn default_tables() -> Table {
        match Value::try_from(Self::default()).expect("defaults serialize") {
            Value::Table(t) => t,
            _ => unreachable!("config serializes to a table"),
        }
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Io(format!("reading config {}: {e}", p.display())))?;
                Self::from_toml_str(&text)
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn distill_config(&self) -> DistillConfig {
        DistillConfig {
            student: self.student.clone(),
            task_loss: self.distill.task_loss,
            inter_loss: self.distill.inter_loss,
            lambda: self.distill.lambda,
            k: self.distill.k,
            mapping: self.distill.mapping.clone(),
            lens: self.lens,
            train: self.train.clone(),
        }
    }
}
