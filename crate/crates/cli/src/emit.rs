//! Output helpers: full-precision float formatting and file writing.

use std::path::Path;

use crate::CliError;

/// 17 significant digits round-trip every f64 exactly, which is what makes
/// saved instantons reproduce the in-process pipeline bit for bit.
pub fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents)
        .map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))
}
