use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::failure::Failure;

/// The config file's object with every flag that was given written over it.
/// Flags are serialised with absent options skipped, so only explicit ones win.
pub fn merged<F: Serialize>(config: Option<&Path>, flags: &F) -> Result<Map<String, Value>, Failure> {
    let mut base = match config {
        None => Map::new(),
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::Config(format!("cannot read config {}: {e}", path.display())))?;
            match serde_json::from_str(&text) {
                Ok(Value::Object(map)) => map,
                Ok(_) => return Err(Failure::Config(format!("{} must hold a JSON object", path.display()))),
                Err(e) => return Err(Failure::Config(format!("{}: {e}", path.display()))),
            }
        }
    };
    if let Value::Object(over) = serde_json::to_value(flags)? {
        for (k, v) in over {
            if !v.is_null() {
                base.insert(k, v);
            }
        }
    }
    Ok(base)
}

pub fn decode<T: DeserializeOwned>(map: Map<String, Value>) -> Result<T, Failure> {
    serde_json::from_value(Value::Object(map)).map_err(|e| Failure::Config(e.to_string()))
}

pub fn resolve<F: Serialize, T: DeserializeOwned>(config: Option<&Path>, flags: &F) -> Result<T, Failure> {
    decode(merged(config, flags)?)
}
