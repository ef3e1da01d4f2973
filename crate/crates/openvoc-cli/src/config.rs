//! `key = value` configuration files.
//!
//! Keys are the long option names of the subcommand being run (without the
//! leading dashes). The file supplies defaults only: an option given on the
//! command line always wins. Keys the subcommand does not understand are
//! rejected rather than ignored, so a typo cannot silently fall back to a
//! built-in default.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use openvoc::{Error, Result};

pub struct ConfigFile {
    entries: BTreeMap<String, String>,
    path: String,
}

impl ConfigFile {
    pub fn empty() -> Self {
        ConfigFile {
            entries: BTreeMap::new(),
            path: String::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let display = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: display.clone(),
            source: e,
        })?;
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "{display} line {}: expected `key = value`",
                    lineno + 1
                )));
            };
            entries.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(ConfigFile { entries, path: display })
    }

    /// Fills `slot` from the file when the command line left it empty.
    /// Either way the key counts as consumed.
    pub fn merge<T: FromStr>(&mut self, slot: &mut Option<T>, key: &str) -> Result<()> {
        let raw = self.entries.remove(key);
        if slot.is_some() {
            return Ok(());
        }
        if let Some(raw) = raw {
            let parsed = raw.parse::<T>().map_err(|_| {
                Error::Config(format!("{}: bad value {raw:?} for key {key}", self.path))
            })?;
            *slot = Some(parsed);
        }
        Ok(())
    }

    /// Errors on the first key nothing consumed — unknown to this command.
    pub fn finish(self) -> Result<()> {
        if let Some((key, _)) = self.entries.into_iter().next() {
            return Err(Error::Config(format!(
                "{}: unknown key {key:?} for this command",
                self.path
            )));
        }
        Ok(())
    }
}
