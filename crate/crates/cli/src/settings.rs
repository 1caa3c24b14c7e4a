//! Flag / config-file resolution. Flags win over the config section of the
//! running command, which wins over built-in defaults.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde_json::{Map, Value};

use crate::error::CliError;

pub struct Settings {
    command: &'static str,
    section: toml::Table,
    /// Every resolved value, recorded for the run manifest.
    pub resolved: Map<String, Value>,
}

impl Settings {
    /// Loads the `[command]` table of `path`, rejecting keys outside `known`.
    pub fn load(command: &'static str, path: Option<&Path>, known: &[&str]) -> Result<Self, CliError> {
        let section = match path {
            None => toml::Table::new(),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::runtime(format!("cannot read config {}: {e}", p.display())))?;
                let mut root: toml::Table = text
                    .parse()
                    .map_err(|e| CliError::validation(format!("config {}: {e}", p.display())))?;
                match root.remove(command) {
                    None => toml::Table::new(),
                    Some(toml::Value::Table(t)) => t,
                    Some(_) => {
                        return Err(CliError::validation(format!(
                            "config {}: [{command}] must be a table",
                            p.display()
                        )))
                    }
                }
            }
        };
        if let Some(k) = section.keys().find(|k| !known.contains(&k.as_str())) {
            return Err(CliError::validation(format!("config [{command}]: unknown key {k}")));
        }
        Ok(Self {
            command,
            section,
            resolved: Map::new(),
        })
    }

    fn from_config<T: DeserializeOwned>(&self, key: &str) -> Result<Option<T>, CliError> {
        self.section
            .get(key)
            .map(|v| {
                v.clone()
                    .try_into()
                    .map_err(|e| CliError::validation(format!("config [{}] {key}: {e}", self.command)))
            })
            .transpose()
    }

    fn record<T: serde::Serialize>(&mut self, key: &str, value: &T) {
        self.resolved
            .insert(key.to_string(), serde_json::to_value(value).expect("setting serializes"));
    }

    pub fn opt<T: DeserializeOwned + serde::Serialize>(
        &mut self,
        key: &str,
        flag: Option<T>,
    ) -> Result<Option<T>, CliError> {
        let v = match flag {
            Some(v) => Some(v),
            None => self.from_config(key)?,
        };
        self.record(key, &v);
        Ok(v)
    }

    pub fn or<T: DeserializeOwned + serde::Serialize>(
        &mut self,
        key: &str,
        flag: Option<T>,
        default: T,
    ) -> Result<T, CliError> {
        let v = match flag {
            Some(v) => v,
            None => self.from_config(key)?.unwrap_or(default),
        };
        self.record(key, &v);
        Ok(v)
    }

    /// Missing required values are usage errors.
    pub fn req<T: DeserializeOwned + serde::Serialize>(&mut self, key: &str, flag: Option<T>) -> Result<T, CliError> {
        self.opt(key, flag)?
            .ok_or_else(|| CliError::usage(format!("{}: missing required --{key}", self.command)))
    }

    pub fn flag(&mut self, key: &str, given: bool) -> Result<bool, CliError> {
        let v = given || self.from_config(key)?.unwrap_or(false);
        self.record(key, &v);
        Ok(v)
    }

    pub fn list<T: DeserializeOwned + serde::Serialize>(
        &mut self,
        key: &str,
        flag: Vec<T>,
    ) -> Result<Vec<T>, CliError> {
        let v = if flag.is_empty() {
            self.from_config(key)?.unwrap_or_default()
        } else {
            flag
        };
        self.record(key, &v);
        Ok(v)
    }
}
