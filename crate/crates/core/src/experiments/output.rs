//! File plumbing shared by the commands: number formatting, CSV rows and JSON manifests.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::Result;

/// Seventeen significant digits, enough to round-trip any `f64`.
pub fn fmt17(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        format!("{x}")
    }
}

pub fn csv_row<I: IntoIterator<Item = f64>>(values: I) -> String {
    values.into_iter().map(fmt17).collect::<Vec<_>>().join(",")
}

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

/// Version of this library, recorded in every manifest.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Serialize)]
struct Envelope<'a, C: Serialize, R: Serialize> {
    command: &'a str,
    version: &'a str,
    config: &'a C,
    outputs: &'a [PathBuf],
    result: &'a R,
}

/// Writes `{command, version, config, outputs, result}` as pretty JSON.
pub fn write_manifest<C: Serialize, R: Serialize>(
    path: &Path,
    command: &str,
    config: &C,
    outputs: &[PathBuf],
    result: &R,
) -> Result<()> {
    let mut w = create(path)?;
    let env = Envelope {
        command,
        version: VERSION,
        config,
        outputs,
        result,
    };
    serde_json::to_writer_pretty(&mut w, &env)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}
