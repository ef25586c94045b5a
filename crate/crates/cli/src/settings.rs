//! Flat JSON config files merged under command-line flags.

use std::fmt;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde_json::{Map, Value};

/// Keys a config file may set. Each mirrors the long flag of the same name,
/// with dashes replaced by underscores.
const KEYS: &[&str] = &[
    "threads",
    "paper_scale",
    "oracle",
    "out",
    "seed",
    "system",
    "data",
    "checkpoint",
    "epochs",
    "batch_size",
    "lr",
    "restarts",
    "folds",
    "x0",
    "u",
    "t_end",
    "dt",
    "sigma",
    "record_every",
    "starts",
    "lo",
    "hi",
    "points",
    "n_scan",
    "k",
    "eta",
    "targets",
    "trials",
    "period",
];

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Core(stablenode::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use stablenode::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Core(E::InvalidConfig(_) | E::DimensionMismatch { .. } | E::Io(_) | E::Json(_) | E::Csv(_)) => 2,
            CliError::Core(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "config error: {msg}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<stablenode::Error> for CliError {
    fn from(e: stablenode::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Default)]
pub struct Settings {
    file: Map<String, Value>,
}

impl Settings {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{} is not valid JSON: {e}", path.display())))?;
        let Value::Object(file) = value else {
            return Err(CliError::Config("config file must hold a JSON object".into()));
        };
        if let Some(bad) = file.keys().find(|k| !KEYS.contains(&k.as_str())) {
            return Err(CliError::Config(format!("unknown config key {bad:?}")));
        }
        Ok(Self { file })
    }

    /// The flag value if given, else the file value, else `None`.
    pub fn pick<T: DeserializeOwned>(&self, flag: Option<T>, key: &str) -> CliResult<Option<T>> {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.file.get(key) {
            None => Ok(None),
            Some(v) => serde_json::from_value(v.clone())
                .map(Some)
                .map_err(|e| CliError::Config(format!("bad value for {key:?}: {e}"))),
        }
    }

    pub fn pick_or<T: DeserializeOwned>(&self, flag: Option<T>, key: &str, default: T) -> CliResult<T> {
        Ok(self.pick(flag, key)?.unwrap_or(default))
    }

    /// Boolean switch: on when the flag is present or the file sets it.
    pub fn switch(&self, flag: bool, key: &str) -> CliResult<bool> {
        Ok(flag || self.pick::<bool>(None, key)?.unwrap_or(false))
    }
}
