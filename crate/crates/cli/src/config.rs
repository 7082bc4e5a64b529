use crate::error::CliError;
use iidlab::losses::LossWeights;
use iidlab::signet::train::TrainConfig;
use iidlab::signet::ModelConfig;
use iidlab::synth::SynthConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self { data_dir: "data".into(), out_dir: "runs".into() }
    }
}

/// Everything a command needs; every field has a default.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub paths: Paths,
}

fn bad(detail: impl Into<String>) -> CliError {
    CliError::input("CONFIG", detail)
}

/// Parses the right-hand side of `--set`: JSON when it parses, else a bare
/// string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Applies `a.b.c=value` to a JSON document. Missing intermediate objects
/// are created so unknown keys surface as schema errors later.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (key, raw) =
        assignment.split_once('=').ok_or_else(|| bad(format!("--set expects key=value, got `{assignment}`")))?;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(bad(format!("malformed key `{key}`")));
    }
    let mut node = doc;
    for part in &parts[..parts.len() - 1] {
        let obj = node.as_object_mut().ok_or_else(|| bad(format!("`{key}` descends into a non-object")))?;
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    let obj = node.as_object_mut().ok_or_else(|| bad(format!("`{key}` descends into a non-object")))?;
    obj.insert(parts[parts.len() - 1].to_string(), parse_value(raw));
    Ok(())
}

impl RunConfig {
    /// Loads `path` (or the defaults), applies overrides in order and
    /// validates the result.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::input("CONFIG", format!("cannot read {}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| bad(format!("{}: {e}", p.display())))?
            }
            None => serde_json::to_value(RunConfig::default()).expect("defaults serialize"),
        };
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: RunConfig = serde_json::from_value(doc).map_err(|e| bad(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.synth.validate().map_err(|e| bad(e.to_string()))?;
        self.model.validate().map_err(|e| bad(e.to_string()))?;
        self.train.validate().map_err(|e| bad(e.to_string()))?;
        self.loss.validate().map_err(|e| bad(format!("invalid loss weights: {e}")))?;
        if self.synth.size != self.model.input_size {
            return Err(bad(format!(
                "synth.size ({}) must equal model.input_size ({})",
                self.synth.size, self.model.input_size
            )));
        }
        Ok(())
    }
}
