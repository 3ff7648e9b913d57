use std::io::Write;
use std::path::Path;

use flatmin::Result;
use serde::Serialize;

/// Write `bytes` to a temporary file next to `path`, then rename it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// `{"config": ..., "result": ...}` so any output can be re-run from itself.
pub fn with_config<C: Serialize, R: Serialize>(config: &C, result: &R) -> Result<String> {
    let doc = serde_json::json!({ "config": config, "result": result });
    let mut s = serde_json::to_string_pretty(&doc)?;
    s.push('\n');
    Ok(s)
}
