//! TOML configuration files with `key=value` command-line overrides.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use toml::{Table, Value};

use crate::error::{Error, Result};

/// Parse an override value as a TOML literal, falling back to a bare string
/// (so `variant=ours` works without quotes).
fn parse_value(raw: &str) -> Value {
    let doc = format!("v = {raw}");
    match doc.parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.into())),
        Err(_) => Value::String(raw.into()),
    }
}

/// Set a dotted `key` (e.g. `weights.delta`) inside `table`.
pub fn set_key(table: &mut Table, key: &str, raw: &str) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty()).ok_or_else(|| Error::config(format!("empty key in `{key}`")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("`{p}` in `{key}` is not a table")))?;
    }
    cur.insert(last.to_string(), parse_value(raw));
    Ok(())
}

/// Split `key=value` override strings.
pub fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>> {
    raw.iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::config(format!("override `{s}` is not key=value")))
        })
        .collect()
}

/// Read `path` (if any), apply `overrides` in order and deserialize.
pub fn load_config<T: DeserializeOwned>(path: Option<&Path>, overrides: &[(String, String)]) -> Result<T> {
    let mut table = match path {
        Some(p) => {
            let text = fs::read_to_string(p)?;
            text.parse::<Table>()
                .map_err(|e| Error::config(format!("{}: {e}", p.display())))?
        }
        None => Table::new(),
    };
    for (k, v) in overrides {
        set_key(&mut table, k, v)?;
    }
    Value::Table(table)
        .try_into()
        .map_err(|e| Error::config(format!("invalid configuration: {e}")))
}

pub fn to_toml<T: Serialize>(value: &T) -> Result<String> {
    toml::to_string_pretty(value).map_err(|e| Error::config(format!("cannot encode configuration: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::TrainConfig;
    use crate::vae::Variant;

    #[test]
    fn overrides_beat_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(&path, "epochs = 7\nvariant = \"beta_vae\"\n[weights]\nalpha = 1.0\nbeta1 = 1.0\nbeta2 = 1.0\ndelta = 1.0\ngamma = 1.0\n").unwrap();
        let ov = parse_overrides(&["variant=ours".into(), "weights.delta=0.25".into(), "seed=9".into()]).unwrap();
        let c: TrainConfig = load_config(Some(&path), &ov).unwrap();
        assert_eq!(c.epochs, 7);
        assert_eq!(c.variant, Variant::Ours);
        assert_eq!(c.weights.unwrap().delta, 0.25);
        assert_eq!(c.seed, 9);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let ov = parse_overrides(&["epoch=3".into()]).unwrap();
        let err = load_config::<TrainConfig>(None, &ov).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(parse_overrides(&["novalue".into()]).is_err());
    }

    #[test]
    fn train_config_round_trips_through_toml() {
        let c = TrainConfig {
            weights: Some(crate::losses::LossWeights::shapes3d()),
            concepts: Some(4),
            ..TrainConfig::default()
        };
        let text = to_toml(&c).unwrap();
        let back: TrainConfig = text.parse::<Table>().unwrap().try_into().unwrap();
        assert_eq!(back, c);
    }
}
