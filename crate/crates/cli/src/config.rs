//! Config manifests: TOML with one table per command, layered under the
//! command-line flags.

use std::path::Path;

use aslab::{Error, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

pub struct ConfigFile {
    root: toml::Table,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config {
            key: format!("{}", path.display()),
            message: e.message().to_string(),
        })?;
        Ok(ConfigFile { root })
    }

    #[cfg(test)]
    pub fn from_table(root: toml::Table) -> Self {
        ConfigFile { root }
    }

    /// Rejects top-level tables that no command reads.
    pub fn check_sections(&self, known: &[&[&str]]) -> Result<()> {
        check_tree(&self.root, &[], known)
    }

    fn section(&self, path: &[&str]) -> Result<Option<&toml::Table>> {
        let mut table = &self.root;
        for (i, part) in path.iter().enumerate() {
            match table.get(*part) {
                None => return Ok(None),
                Some(toml::Value::Table(t)) => table = t,
                Some(_) => {
                    return Err(Error::Config {
                        key: path[..=i].join("."),
                        message: "expected a table".into(),
                    })
                }
            }
        }
        Ok(Some(table))
    }
}

fn check_tree(table: &toml::Table, prefix: &[&str], known: &[&[&str]]) -> Result<()> {
    for (key, value) in table {
        let mut path: Vec<&str> = prefix.to_vec();
        path.push(key);
        if known.iter().any(|k| *k == path.as_slice()) {
            continue;
        }
        let is_parent = known.iter().any(|k| k.len() > path.len() && k[..path.len()] == path[..]);
        match value {
            toml::Value::Table(t) if is_parent => check_tree(t, &path, known)?,
            _ => {
                return Err(Error::Config {
                    key: path.join("."),
                    message: "unknown section".into(),
                })
            }
        }
    }
    Ok(())
}

/// Overlays the flags that were given onto the file section `path` and
/// deserializes the result back into the flag struct. Unknown keys and
/// type errors name the offending key path.
pub fn layered<A: Default + Serialize + DeserializeOwned>(file: Option<&ConfigFile>, path: &[&str], args: &A) -> Result<A> {
    let Value::Object(flags) = serde_json::to_value(args).expect("flag structs serialize") else {
        unreachable!("flag structs are objects")
    };
    let dotted = |key: &str| {
        let mut p: Vec<&str> = path.to_vec();
        if !key.is_empty() {
            p.push(key);
        }
        p.join(".")
    };
    let mut merged = Map::new();
    if let Some(section) = file.map(|f| f.section(path)).transpose()?.flatten() {
        for (key, value) in section {
            if !flags.contains_key(key) {
                return Err(Error::Config {
                    key: dotted(key),
                    message: "unknown key".into(),
                });
            }
            let value = serde_json::to_value(value).map_err(|e| Error::Config {
                key: dotted(key),
                message: e.to_string(),
            })?;
            merged.insert(key.clone(), value);
        }
    }
    for (key, value) in flags {
        if !(value.is_null() || value == Value::Bool(false)) || !merged.contains_key(&key) {
            merged.insert(key, value);
        }
    }
    let err = match serde_path_to_error::deserialize(Value::Object(merged.clone())) {
        Ok(a) => return Ok(a),
        Err(e) => e,
    };
    let inner = err.path().to_string();
    if inner != "." {
        return Err(Error::Config {
            key: dotted(&inner),
            message: err.into_inner().to_string(),
        });
    }
    // Flattened fields lose their path; retry one key at a time on top of
    // the defaults to find the offending one.
    let Value::Object(blank) = serde_json::to_value(A::default()).expect("flag structs serialize") else {
        unreachable!("flag structs are objects")
    };
    for (key, value) in merged {
        let mut probe = blank.clone();
        probe.insert(key.clone(), value);
        if let Err(e) = serde_json::from_value::<A>(Value::Object(probe)) {
            return Err(Error::Config {
                key: dotted(&key),
                message: e.to_string(),
            });
        }
    }
    Err(Error::Config {
        key: dotted(""),
        message: err.into_inner().to_string(),
    })
}

/// A value that must come from either a flag or the config file.
pub fn need<T>(value: Option<T>, path: &[&str], key: &str) -> Result<T> {
    value.ok_or_else(|| Error::Config {
        key: path.iter().copied().chain([key]).collect::<Vec<_>>().join("."),
        message: format!("required; pass --{} or set it in the config file", key.replace('_', "-")),
    })
}
