//! JSON config loading with flag overrides, error categories and run
//! manifests.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Map, Value};

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_CONFIG: u8 = 3;
pub const EXIT_IO: u8 = 4;
pub const EXIT_FORMAT: u8 = 5;
pub const EXIT_RUNTIME: u8 = 6;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Config(String),
    Io(String),
    Format(String),
    Runtime(String),
}

impl CliError {
    pub fn category(&self) -> &'static str {
        match self {
            Self::Usage(_) => "usage",
            Self::Config(_) => "config",
            Self::Io(_) => "io",
            Self::Format(_) => "format",
            Self::Runtime(_) => "runtime",
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Usage(_) => EXIT_USAGE,
            Self::Config(_) => EXIT_CONFIG,
            Self::Io(_) => EXIT_IO,
            Self::Format(_) => EXIT_FORMAT,
            Self::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Usage(m) | Self::Config(m) | Self::Io(m) | Self::Format(m) | Self::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<sliderquant::Error> for CliError {
    fn from(e: sliderquant::Error) -> Self {
        use sliderquant::quantizer::QuantError;
        use sliderquant::Error as E;
        let msg = e.to_string();
        match e {
            E::Schedule(_) | E::Quant(QuantError::InvalidSpec(_)) => Self::Config(msg),
            E::Format(_) => Self::Format(msg),
            E::Io(_) => Self::Io(msg),
            _ => Self::Runtime(msg),
        }
    }
}

impl From<sliderquant::schedule::ScheduleError> for CliError {
    fn from(e: sliderquant::schedule::ScheduleError) -> Self {
        Self::Config(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

/// Input files must exist before any work starts; a missing one is a usage
/// error rather than a runtime failure.
pub fn require_file(path: &Path, what: &str) -> CliResult<()> {
    if !path.is_file() {
        return Err(CliError::Usage(format!("{what} {} does not exist", path.display())));
    }
    Ok(())
}

/// Reads `path` (if any) as a JSON object, applies `overrides` (dotted key
/// paths) and deserializes. A run manifest is accepted in place of a config
/// file. Unknown keys are rejected by the target type.
pub fn load<T: DeserializeOwned>(path: Option<&Path>, overrides: &[(&str, Option<Value>)]) -> CliResult<T> {
    let mut root = match path {
        Some(p) => {
            require_file(p, "config file")?;
            let text = std::fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            serde_json::from_str::<Value>(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => Value::Object(Map::new()),
    };
    if !root.is_object() {
        return Err(CliError::Config("config root must be a JSON object".into()));
    }
    // a run.json manifest carries the resolved config under "config"
    if root.get("command").is_some() && root.get("config").is_some_and(Value::is_object) {
        root = root["config"].take();
    }
    for (key, value) in overrides {
        if let Some(v) = value {
            set_path(&mut root, key, v.clone())?;
        }
    }
    serde_json::from_value(root).map_err(|e| CliError::Config(e.to_string()))
}

fn set_path(root: &mut Value, key: &str, value: Value) -> CliResult<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| CliError::Config(format!("cannot set {key}: parent is not an object")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    Ok(())
}

pub fn opt<T: Serialize>(v: &Option<T>) -> Option<Value> {
    v.as_ref().map(|x| serde_json::to_value(x).expect("flag value serializes"))
}

/// `run.json` next to `out` unless an explicit manifest path is given.
pub fn manifest_path(out: &Path, explicit: &Option<PathBuf>) -> PathBuf {
    explicit.clone().unwrap_or_else(|| {
        out.parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."))
            .join("run.json")
    })
}

/// Writes the resolved configuration and everything else needed to repeat
/// the run.
pub fn write_manifest(path: &Path, command: &str, config: &impl Serialize, extra: Value) -> CliResult<()> {
    let manifest = json!({
        "command": command,
        "config": config,
        "versions": {
            "sliderquant": env!("CARGO_PKG_VERSION"),
            "checkpoint_format": sliderquant::packio::CHECKPOINT_VERSION,
        },
        "outputs": extra,
    });
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

pub fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| io_err(path, e))
}
