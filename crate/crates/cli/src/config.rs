//! JSON config files merged with command-line overrides.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

/// Parses a `key=value` override. The value is read as JSON when possible
/// and as a bare string otherwise.
pub fn parse_set(s: &str) -> Result<(String, Value), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected key=value, got {s:?}"))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

fn apply(target: &mut Map<String, Value>, source: &Map<String, Value>, origin: &str) -> Result<()> {
    for (k, v) in source {
        if !target.contains_key(k) {
            let mut known: Vec<&str> = target.keys().map(String::as_str).collect();
            known.sort_unstable();
            bail!("unknown config key {k:?} in {origin}; known keys: {}", known.join(", "));
        }
        target.insert(k.clone(), v.clone());
    }
    Ok(())
}

/// Starts from `T::default()`, then applies the file's keys, then
/// `overrides` in order. Unknown keys are rejected.
pub fn merge<T>(file: Option<&Path>, overrides: &[(String, Value)]) -> Result<T>
where
    T: Serialize + DeserializeOwned + Default,
{
    let Value::Object(mut obj) = serde_json::to_value(T::default())? else {
        unreachable!("config types serialize to objects")
    };
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let v: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let Value::Object(src) = v else {
            bail!("config {} must be a JSON object", path.display());
        };
        apply(&mut obj, &src, &path.display().to_string())?;
    }
    let flags: Map<String, Value> = overrides.iter().cloned().collect();
    apply(&mut obj, &flags, "command-line overrides")?;
    serde_json::from_value(Value::Object(obj)).context("invalid configuration value")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ecam_train::trainer::{Ablation, TrainConfig};

    #[test]
    fn overrides_apply_in_order() {
        let cfg: TrainConfig = merge(
            None,
            &[
                parse_set("lr=0.01").unwrap(),
                ("ablation".into(), Value::String("baseline".into())),
                parse_set("tau=0.2").unwrap(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.lr, 0.01);
        assert_eq!(cfg.ablation, Ablation::Baseline);
        assert_eq!(cfg.nce.tau, 0.2);
    }

    #[test]
    fn unknown_key_rejected() {
        let err = merge::<TrainConfig>(None, &[parse_set("learning_rate=1").unwrap()]).unwrap_err();
        assert!(err.to_string().contains("learning_rate"));
    }
}
