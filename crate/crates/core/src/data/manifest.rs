//! Corpus manifest: one shape per line, `shape_id path [category]`,
//! whitespace-separated. Paths are relative to the manifest's directory.
//! Blank lines and `#` comments are ignored.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub shape_id: String,
    pub path: PathBuf,
    pub category: Option<String>,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if !(2..=3).contains(&f.len()) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: "expected `shape_id path [category]`".into(),
            });
        }
        out.push(ManifestEntry {
            shape_id: f[0].to_string(),
            path: PathBuf::from(f[1]),
            category: f.get(2).map(|s| s.to_string()),
        });
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut s = String::from("# shape_id path category\n");
    for e in entries {
        let _ = write!(s, "{} {}", e.shape_id, e.path.display());
        if let Some(c) = &e.category {
            let _ = write!(s, " {c}");
        }
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}
