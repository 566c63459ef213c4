use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Record of one command invocation, written next to its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    /// SHA-256 of the resolved configuration in canonical form.
    pub config_hash: String,
    pub seed: u64,
    /// Output files relative to the output directory, manifest excluded.
    pub artifact_paths: Vec<String>,
    /// Seconds.
    pub wall_time: f64,
    /// The resolved configuration that was hashed.
    pub config: Value,
    /// SHA-256 of every input file, keyed by the path given on the command line.
    pub inputs: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Hash of `config` with object keys sorted and floats at 17 significant
/// digits, so it does not depend on key order in the source file.
pub fn config_hash(config: &Value) -> String {
    sha256_hex(elastoreg_core::io::to_json_line(config).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_ignores_key_order() {
        let a: Value =
            serde_json::from_str(r#"{"w": 1000.0, "seed": 3, "arch": {"b": [1, 2], "a": 0.5}}"#)
                .unwrap();
        let b: Value =
            serde_json::from_str(r#"{"arch": {"a": 0.5, "b": [1, 2]}, "seed": 3, "w": 1e3}"#)
                .unwrap();
        assert_eq!(config_hash(&a), config_hash(&b));
        let c: Value =
            serde_json::from_str(r#"{"arch": {"a": 0.5, "b": [2, 1]}, "seed": 3, "w": 1e3}"#)
                .unwrap();
        assert_ne!(config_hash(&a), config_hash(&c));
    }

    #[test]
    fn sha256_of_empty_input() {
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }
}
