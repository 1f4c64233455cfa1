use std::collections::HashMap;
use std::path::PathBuf;

use dragedit_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// `[service]` table of the config file. Every key can be overridden by a
/// `DRAGEDIT_<KEY>` environment variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub bind: String,
    pub port: u16,
    pub storage_dir: PathBuf,
    /// Built-in profile name or path to a backend TOML file.
    pub backend_profile: String,
    pub workers: usize,
    /// Inversion steps when a bank request does not say.
    pub steps: usize,
    /// Largest accepted request body.
    pub max_body_bytes: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            bind: "127.0.0.1".into(),
            port: 8080,
            storage_dir: PathBuf::from("dragedit-data"),
            backend_profile: "toy".into(),
            workers: 1,
            steps: 50,
            max_body_bytes: 32 << 20,
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct File {
    #[serde(default)]
    service: ServiceConfig,
}

impl ServiceConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let file: File = toml::from_str(text).map_err(|e| Error::contract("config", e.to_string()))?;
        Ok(file.service)
    }

    /// Applies `DRAGEDIT_*` overrides from `vars`.
    pub fn with_env(mut self, vars: &HashMap<String, String>) -> Result<Self> {
        fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::contract(key, format!("cannot parse `{v}`")))
        }
        for (key, v) in vars {
            match key.as_str() {
                "DRAGEDIT_BIND" => self.bind = v.clone(),
                "DRAGEDIT_PORT" => self.port = parse(key, v)?,
                "DRAGEDIT_STORAGE_DIR" => self.storage_dir = PathBuf::from(v),
                "DRAGEDIT_BACKEND_PROFILE" => self.backend_profile = v.clone(),
                "DRAGEDIT_WORKERS" => self.workers = parse(key, v)?,
                "DRAGEDIT_STEPS" => self.steps = parse(key, v)?,
                "DRAGEDIT_MAX_BODY_BYTES" => self.max_body_bytes = parse(key, v)?,
                _ => {}
            }
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::contract("workers", "must be at least 1"));
        }
        if self.steps == 0 {
            return Err(Error::contract("steps", "must be at least 1"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn env_overrides_file() {
        let cfg = ServiceConfig::from_toml("[service]\nport = 9000\nworkers = 2\n").unwrap();
        assert_eq!((cfg.port, cfg.workers), (9000, 2));
        let env = HashMap::from([
            ("DRAGEDIT_PORT".to_string(), "9100".to_string()),
            ("DRAGEDIT_STORAGE_DIR".to_string(), "/tmp/x".to_string()),
            ("HOME".to_string(), "/root".to_string()),
        ]);
        let cfg = cfg.with_env(&env).unwrap();
        assert_eq!(cfg.port, 9100);
        assert_eq!(cfg.storage_dir, PathBuf::from("/tmp/x"));
        let bad = HashMap::from([("DRAGEDIT_WORKERS".to_string(), "0".to_string())]);
        assert_eq!(ServiceConfig::default().with_env(&bad).unwrap_err().field(), Some("workers"));
        assert!(ServiceConfig::from_toml("[service]\nthreads = 3\n").is_err());
    }
}
