use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::HarnessError;

/// `<path>.partial`, where outputs live until they are complete.
pub fn partial_path(path: &Path) -> PathBuf {
    let mut name: OsString = path.file_name().map(OsString::from).unwrap_or_default();
    name.push(".partial");
    path.with_file_name(name)
}

/// Fails if any target already exists and `force` is not set.
pub fn check_writable(paths: &[PathBuf], force: bool) -> Result<(), HarnessError> {
    if force {
        return Ok(());
    }
    match paths.iter().find(|p| p.exists()) {
        Some(p) => Err(HarnessError::WouldOverwrite(p.display().to_string())),
        None => Ok(()),
    }
}

/// Writes through `<path>.partial` and renames on success. A failed writer
/// leaves the `.partial` file behind.
pub fn write_atomic<F>(path: &Path, f: F) -> Result<(), HarnessError>
where
    F: FnOnce(&mut BufWriter<File>) -> Result<(), HarnessError>,
{
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = partial_path(path);
    let mut w = BufWriter::new(File::create(&tmp)?);
    f(&mut w)?;
    w.flush()?;
    drop(w);
    fs::rename(&tmp, path)?;
    Ok(())
}
