//! Training configuration resolution: profile defaults, then a flat JSON
//! file, then command-line flags.

use std::path::Path;

use eatr_core::{Profile, TrainConfig};
use serde_json::{Map, Value};

use crate::CliError;

/// Leaf fields of a serialized config, keyed by name, with their JSON
/// pointer.
fn leaf_pointers(value: &Value, prefix: &str, out: &mut Vec<(String, String)>) {
    if let Value::Object(map) = value {
        for (key, child) in map {
            let pointer = format!("{prefix}/{key}");
            match child {
                Value::Object(_) => leaf_pointers(child, &pointer, out),
                _ => out.push((key.clone(), pointer)),
            }
        }
    }
}

/// Applies flat `key: value` overrides to `config`. Keys name leaf fields at
/// any nesting depth (`lr`, `hidden`, `lambda_l1`, ...).
pub fn apply_flat(config: &TrainConfig, flat: &Map<String, Value>) -> Result<TrainConfig, CliError> {
    let mut tree = serde_json::to_value(config).map_err(|e| CliError::Config(e.to_string()))?;
    let mut leaves = Vec::new();
    leaf_pointers(&tree, "", &mut leaves);
    for (key, value) in flat {
        let pointer = leaves
            .iter()
            .find(|(name, _)| name == key)
            .map(|(_, p)| p.clone())
            .ok_or_else(|| CliError::Config(format!("unknown config key `{key}`")))?;
        *tree.pointer_mut(&pointer).expect("pointer from the same tree") = value.clone();
    }
    serde_json::from_value(tree).map_err(|e| CliError::Config(format!("config file: {e}")))
}

/// Reads a flat JSON object from `path`.
pub fn read_flat(path: &Path) -> Result<Map<String, Value>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|_| CliError::Missing(path.to_path_buf()))?;
    match serde_json::from_str(&text) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err(CliError::Config(format!("{}: expected a JSON object", path.display()))),
        Err(e) => Err(CliError::Config(format!("{}: {e}", path.display()))),
    }
}

/// Profile defaults merged with an optional config file.
pub fn resolve(profile: Profile, file: Option<&Path>) -> Result<(TrainConfig, Map<String, Value>), CliError> {
    let base = TrainConfig::for_profile(profile);
    match file {
        Some(path) => {
            let flat = read_flat(path)?;
            Ok((apply_flat(&base, &flat)?, flat))
        }
        None => Ok((base, Map::new())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn flat(v: Value) -> Map<String, Value> {
        v.as_object().unwrap().clone()
    }

    #[test]
    fn nested_and_top_level_keys() {
        let base = TrainConfig::for_profile(Profile::Desk);
        let c = apply_flat(
            &base,
            &flat(json!({"lr": 3e-4, "hidden": 32, "lambda_l1": 5.0, "gated_fusion": false})),
        )
        .unwrap();
        assert_eq!(c.lr, 3e-4);
        assert_eq!(c.model.hidden, 32);
        assert_eq!(c.loss.cost.lambda_l1, 5.0);
        assert!(!c.model.gated_fusion);
        assert_eq!(c.epochs, base.epochs);
    }

    #[test]
    fn unknown_key_and_bad_type_are_config_errors() {
        let base = TrainConfig::default();
        let err = apply_flat(&base, &flat(json!({"learning_rate": 1.0}))).unwrap_err();
        assert!(err.to_string().contains("learning_rate"));
        assert!(matches!(
            apply_flat(&base, &flat(json!({"epochs": "many"}))),
            Err(CliError::Config(_))
        ));
    }
}
