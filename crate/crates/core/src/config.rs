//! TOML helpers shared by scene, rig, perturbation, pipeline and report files.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{CalibError, Result};

/// Parses `text`; errors carry `path` and the 1-based line of the fault.
pub fn parse_toml<C: DeserializeOwned>(text: &str, path: &Path) -> Result<C> {
    toml::from_str(text).map_err(|e| {
        let line = e.span().map_or(0, |s| text[..s.start.min(text.len())].matches('\n').count() + 1);
        CalibError::Parse { path: path.to_path_buf(), line, message: e.message().to_string() }
    })
}

pub fn load_toml<C: DeserializeOwned>(path: &Path) -> Result<C> {
    let text = read_text(path)?;
    parse_toml(&text, path)
}

pub fn to_toml<C: Serialize>(value: &C) -> Result<String> {
    toml::to_string(value).map_err(|e| CalibError::invalid(format!("cannot serialize: {e}")))
}

pub fn save_toml<C: Serialize>(value: &C, path: &Path) -> Result<()> {
    write_text(path, &to_toml(value)?)
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| CalibError::Io { path: path.to_path_buf(), source })
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| CalibError::Io { path: path.to_path_buf(), source })
}
