//! Settings files and `--set` overrides.
//!
//! A settings file is flat TOML: top-level scalar keys only, each naming a
//! field of the model or training configuration.

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use loopvla::{Error, Result};

fn flat_table(text: &str, origin: &str) -> Result<Vec<(String, Value)>> {
    let table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{origin}: {e}")))?;
    table
        .into_iter()
        .map(|(k, v)| {
            if v.is_table() || v.is_array() {
                return Err(Error::Config(format!("{origin}: '{k}' must be a scalar")));
            }
            Ok((k, serde_json::to_value(v)?))
        })
        .collect()
}

pub fn parse_file(text: &str, origin: &str) -> Result<Vec<(String, Value)>> {
    flat_table(text, origin)
}

/// `KEY=VALUE` with a TOML scalar value; an unquoted word is taken as a string.
pub fn parse_override(item: &str) -> Result<(String, Value)> {
    let (k, v) = item
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{item}'")))?;
    let (k, v) = (k.trim(), v.trim());
    if k.is_empty() {
        return Err(Error::Config(format!("--set '{item}' has an empty key")));
    }
    let value = match flat_table(&format!("{k} = {v}"), "--set") {
        Ok(mut pairs) if pairs.len() == 1 => pairs.remove(0).1,
        _ => Value::String(v.to_string()),
    };
    Ok((k.to_string(), value))
}

/// Overlays `pairs` on the serialized `base`; unknown keys are errors.
pub fn apply<T: Serialize + DeserializeOwned>(base: &T, pairs: &[(String, Value)]) -> Result<T> {
    let mut map = match serde_json::to_value(base)? {
        Value::Object(m) => m,
        _ => Map::new(),
    };
    for (k, v) in pairs {
        if !map.contains_key(k) {
            return Err(Error::Config(format!("unknown key '{k}'")));
        }
        map.insert(k.clone(), v.clone());
    }
    serde_json::from_value(Value::Object(map)).map_err(|e| Error::Config(format!("invalid value: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Demo {
        rate: f64,
        steps: u64,
        name: String,
        flag: bool,
    }

    fn demo() -> Demo {
        Demo {
            rate: 0.5,
            steps: 10,
            name: "a".into(),
            flag: false,
        }
    }

    #[test]
    fn file_then_overrides() {
        let mut pairs = parse_file("# header\nrate = 0.25\nname = \"easy run\" # trailing\n\nflag=true\n", "t").unwrap();
        pairs.push(parse_override("steps=12").unwrap());
        pairs.push(parse_override("name = bare").unwrap());
        let d = apply(&demo(), &pairs).unwrap();
        assert_eq!(
            d,
            Demo {
                rate: 0.25,
                steps: 12,
                name: "bare".into(),
                flag: true
            }
        );
    }

    #[test]
    fn errors_are_reported() {
        assert!(parse_file("novalue\n", "t").is_err());
        assert!(parse_file("a = 1\na = 2\n", "t").is_err());
        assert!(parse_file("[section]\na = 1\n", "t").is_err());
        assert!(parse_override("novalue").is_err());
        let unknown = parse_file("bogus = 1", "t").unwrap();
        assert!(matches!(apply(&demo(), &unknown), Err(Error::Config(_))));
        let bad = parse_file("steps = -3", "t").unwrap();
        assert!(apply(&demo(), &bad).is_err());
    }
}
