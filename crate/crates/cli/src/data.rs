//! Reading and writing directories of OGS files.

use std::path::{Path, PathBuf};

use ogm_core::grid::{decode_ogs, encode_ogs};
use ogm_core::{Error, GridSequence, Result};

/// Every `*.ogs` file directly inside `dir`, sorted by name.
pub fn ogs_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "ogs"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Input(format!("no .ogs files in {}", dir.display())));
    }
    Ok(files)
}

pub fn read_ogs(path: &Path) -> Result<GridSequence> {
    let bytes = std::fs::read(path)?;
    decode_ogs(&bytes).map_err(|e| match e {
        Error::Format { offset, detail } => Error::Format {
            offset,
            detail: format!("{}: {detail}", path.display()),
        },
        other => other,
    })
}

pub fn write_ogs(path: &Path, seq: &GridSequence) -> Result<()> {
    std::fs::write(path, encode_ogs(seq)?)?;
    Ok(())
}

pub fn load_dir(dir: &Path) -> Result<Vec<GridSequence>> {
    ogs_files(dir)?.iter().map(|p| read_ogs(p)).collect()
}
