//! Run records, shared file helpers and exit codes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::RunCommand;

pub const TOOL: &str = "layerforge";

/// What a subcommand needs to know about how it was invoked.
pub struct Context {
    pub deterministic: bool,
    pub command: RunCommand,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub tool: String,
    pub version: String,
    pub deterministic: bool,
    pub command: RunCommand,
    /// Configuration after presets and defaults were applied.
    pub resolved: serde_json::Value,
}

pub fn config_error(msg: impl Into<String>) -> layerforge::Error {
    layerforge::Error::Config(msg.into())
}

/// Pretty JSON with a trailing newline.
pub fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| layerforge::Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    Ok(())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| layerforge::Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    serde_json::from_str(&text).map_err(|e| layerforge::Error::Format(format!("{}: {e}", path.display())).into())
}

pub fn create_dir(path: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(path)
        .map_err(|e| layerforge::Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    Ok(())
}

/// Writes the run record to `path`.
pub fn write(path: &Path, ctx: &Context, resolved: &impl Serialize) -> anyhow::Result<()> {
    let record = RunRecord {
        tool: TOOL.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        deterministic: ctx.deterministic,
        command: ctx.command.clone(),
        resolved: serde_json::to_value(resolved)?,
    };
    write_json(path, &record)
}

pub fn read(path: &Path) -> anyhow::Result<RunRecord> {
    let record: RunRecord = read_json(path)?;
    if record.tool != TOOL {
        return Err(config_error(format!("{} was not written by {TOOL}", path.display())).into());
    }
    if record.version != env!("CARGO_PKG_VERSION") {
        log::warn!("{} was written by version {}, replaying with {}", path.display(), record.version, env!("CARGO_PKG_VERSION"));
    }
    Ok(record)
}

/// 2 for configuration errors, 3 for numeric failures, 4 for I/O and file
/// format errors.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<layerforge::Error>() {
            use layerforge::Error::*;
            return match e {
                Numeric(_) => 3,
                Io(_) | Format(_) | Json(_) => 4,
                Shape(_) | Config(_) | Empty(_) => 2,
            };
        }
        if cause.is::<std::io::Error>() || cause.is::<csv::Error>() {
            return 4;
        }
    }
    2
}
