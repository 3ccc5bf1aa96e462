use std::fs::File;
use std::path::Path;

use crate::error::{Error, Result};

/// Writes `path` through a sibling temp file that is renamed into place, so
/// readers never observe a partial file.
pub(crate) fn write_atomic<F>(path: &Path, write: F) -> Result<()>
where
    F: FnOnce(&mut File) -> std::io::Result<()>,
{
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    write(tmp.as_file_mut()).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub(crate) fn write_string_atomic(path: &Path, contents: &str) -> Result<()> {
    write_atomic(path, |f| std::io::Write::write_all(f, contents.as_bytes()))
}
