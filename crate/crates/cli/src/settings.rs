//! Config file, environment and command-line values, in rising precedence.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nrccr_core::config::{parse_bool, parse_list, parse_value, read_assignments};
use nrccr_core::{Error, ExperimentConfig, Result};

/// Keys that name command flags rather than world or training settings.
const FLAG_KEYS: [&str; 12] = [
    "corpus",
    "checkpoint",
    "out",
    "rhos",
    "seeds",
    "compound",
    "basic",
    "beta",
    "group_by_length",
    "t2t",
    "sample",
    "workers",
];

pub struct Settings {
    pub exp: ExperimentConfig,
    flags: BTreeMap<String, String>,
}

pub fn missing(key: &str) -> Error {
    Error::Config { key: key.into(), message: "is required (flag or config file)".into() }
}

impl Settings {
    pub fn load(config: Option<&Path>) -> Result<Self> {
        let mut exp = ExperimentConfig::default();
        if let Ok(seed) = std::env::var("NRCCR_SEED") {
            exp.set("seed", &seed)?;
        }
        let mut flags = BTreeMap::new();
        if let Some(path) = config {
            for a in read_assignments(path)? {
                if FLAG_KEYS.contains(&a.key.as_str()) {
                    flags.insert(a.key, a.value);
                } else {
                    exp.set(&a.key, &a.value).map_err(|e| match e {
                        Error::Config { key, message } => Error::Config {
                            key,
                            message: format!("{message} ({}:{})", path.display(), a.line),
                        },
                        e => e,
                    })?;
                }
            }
        }
        Ok(Settings { exp, flags })
    }

    pub fn value<T: FromStr>(&self, cli: Option<T>, key: &str) -> Result<Option<T>> {
        match (cli, self.flags.get(key)) {
            (Some(v), _) => Ok(Some(v)),
            (None, Some(s)) => parse_value(key, s).map(Some),
            (None, None) => Ok(None),
        }
    }

    pub fn path(&self, cli: Option<PathBuf>, key: &str) -> Result<PathBuf> {
        self.value(cli, key)?.ok_or_else(|| missing(key))
    }

    /// A switch set on the command line wins; otherwise the file decides.
    pub fn switch(&self, cli: bool, key: &str) -> Result<bool> {
        match (cli, self.flags.get(key)) {
            (true, _) => Ok(true),
            (false, Some(s)) => parse_bool(key, s),
            (false, None) => Ok(false),
        }
    }

    pub fn list<T: FromStr>(&self, cli: Option<String>, key: &str) -> Result<Vec<T>> {
        let text = cli.or_else(|| self.flags.get(key).cloned()).ok_or_else(|| missing(key))?;
        let v = parse_list(key, &text)?;
        if v.is_empty() {
            return Err(Error::Config { key: key.into(), message: "is empty".into() });
        }
        Ok(v)
    }
}
