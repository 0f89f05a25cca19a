//! Run reports and deterministic JSON encoding.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Rebuilds every object with lexicographically sorted keys, whatever the
/// map backend of `serde_json`.
pub fn sort_keys(v: &Value) -> Value {
    match v {
        Value::Object(m) => {
            let mut keys: Vec<&String> = m.keys().collect();
            keys.sort();
            let mut out = Map::new();
            for k in keys {
                out.insert(k.clone(), sort_keys(&m[k]));
            }
            Value::Object(out)
        }
        Value::Array(a) => Value::Array(a.iter().map(sort_keys).collect()),
        other => other.clone(),
    }
}

/// Pretty-printed JSON with sorted keys and a trailing newline.
pub fn canonical_json(v: &Value) -> serde_json::Result<String> {
    let mut s = serde_json::to_string_pretty(&sort_keys(v))?;
    s.push('\n');
    Ok(s)
}

/// Compact sorted-key encoding, used where bytes are hashed or embedded.
pub fn canonical_compact(v: &Value) -> serde_json::Result<String> {
    serde_json::to_string(&sort_keys(v))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// Fails unless `v.schema_version` equals [`SCHEMA_VERSION`].
pub fn check_schema_version(v: &Value) -> Result<()> {
    let found = v
        .get("schema_version")
        .and_then(Value::as_u64)
        .ok_or_else(|| Error::Format("document has no schema_version".into()))?;
    if found != SCHEMA_VERSION as u64 {
        return Err(Error::SchemaVersion {
            expected: SCHEMA_VERSION,
            found: found.min(u32::MAX as u64) as u32,
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: Option<u64>,
    /// Seconds since the Unix epoch; absent unless explicitly requested so
    /// that repeated runs stay byte-identical.
    pub timestamp: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub command: String,
    pub config_digest: String,
    pub metrics: Value,
    pub provenance: Provenance,
}

impl RunReport {
    pub fn new(command: &str, config_digest: String, metrics: Value, seed: Option<u64>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            command: command.to_string(),
            config_digest,
            metrics: sort_keys(&metrics),
            provenance: Provenance { seed, timestamp: None },
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(canonical_json(&serde_json::to_value(self)?)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(s)?;
        check_schema_version(&v)?;
        let mut r: RunReport = serde_json::from_value(v)?;
        r.metrics = sort_keys(&r.metrics);
        Ok(r)
    }
}
