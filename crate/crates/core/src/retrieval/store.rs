//! Binary index file and external embedding tables.
//!
//! Index layout (little-endian):
//!
//! ```text
//! magic      8 bytes   "RACIDX\0\0"
//! version    u32       1
//! embedder   32 bytes  UTF-8, zero padded
//! dim        u32
//! count      u32
//! records    count × { shape_id: 64 bytes, category: 32 bytes,
//!                      path: 256 bytes (all UTF-8, zero padded),
//!                      embedding: dim × f64 }
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{EmbeddingRecord, RetrievalIndex};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"RACIDX\0\0";
const VERSION: u32 = 1;
const EMBEDDER_LEN: usize = 32;
const ID_LEN: usize = 64;
const CATEGORY_LEN: usize = 32;
const PATH_LEN: usize = 256;

fn put_str(out: &mut Vec<u8>, s: &str, width: usize, what: &str) -> Result<()> {
    let b = s.as_bytes();
    if b.len() > width || b.contains(&0) {
        return Err(Error::contract(format!("{what} {s:?} does not fit in {width} bytes")));
    }
    out.extend_from_slice(b);
    out.extend(std::iter::repeat_n(0u8, width - b.len()));
    Ok(())
}

pub fn index_to_bytes(index: &RetrievalIndex) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_str(&mut out, &index.embedder, EMBEDDER_LEN, "embedder id")?;
    out.extend_from_slice(&(index.dim as u32).to_le_bytes());
    out.extend_from_slice(&(index.records.len() as u32).to_le_bytes());
    for r in &index.records {
        put_str(&mut out, &r.shape_id, ID_LEN, "shape id")?;
        put_str(&mut out, r.category.as_deref().unwrap_or(""), CATEGORY_LEN, "category")?;
        let path = r.path.to_str().ok_or_else(|| Error::contract("non UTF-8 path"))?;
        put_str(&mut out, path, PATH_LEN, "path")?;
        for x in &r.embedding {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn index_from_bytes(bytes: &[u8], path: &Path) -> Result<RetrievalIndex> {
    let bad = |msg: &str| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        msg: msg.to_string(),
    };
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated index file"))?;
        pos += n;
        Ok(s)
    };
    if take(8)? != MAGIC {
        return Err(bad("not an index file (bad magic)"));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Unsupported(format!("index version {version}")));
    }
    let get_str = |b: &[u8]| -> Result<String> {
        let end = b.iter().position(|&c| c == 0).unwrap_or(b.len());
        String::from_utf8(b[..end].to_vec()).map_err(|_| bad("invalid UTF-8 field"))
    };
    let embedder = get_str(take(EMBEDDER_LEN)?)?;
    let dim = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let mut index = RetrievalIndex::new(embedder, dim);
    for _ in 0..count {
        let shape_id = get_str(take(ID_LEN)?)?;
        let category = get_str(take(CATEGORY_LEN)?)?;
        let rpath = get_str(take(PATH_LEN)?)?;
        let embedding = take(dim * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        index.records.push(EmbeddingRecord {
            shape_id,
            embedding,
            path: PathBuf::from(rpath),
            category: (!category.is_empty()).then_some(category),
        });
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes after records"));
    }
    Ok(index)
}

pub fn write_index(path: &Path, index: &RetrievalIndex) -> Result<()> {
    fs::write(path, index_to_bytes(index)?).map_err(|e| Error::io(path, e))
}

pub fn read_index(path: &Path) -> Result<RetrievalIndex> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    index_from_bytes(&bytes, path)
}

/// Externally computed embeddings: one `shape_id v_1 ... v_D` line per shape.
/// `#` comments and blank lines are ignored; every row needs the same D.
pub fn read_embedding_table(path: &Path) -> Result<Vec<(String, Vec<f64>)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows: Vec<(String, Vec<f64>)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let mut f = line.split_whitespace();
        let id = f.next().unwrap().to_string();
        let v = f
            .map(|s| s.parse::<f64>().map_err(|_| err(format!("bad number {s:?}"))))
            .collect::<Result<Vec<_>>>()?;
        if v.is_empty() {
            return Err(err("row has no values".into()));
        }
        if let Some((_, first)) = rows.first() {
            if first.len() != v.len() {
                return Err(err(format!("expected {} values, found {}", first.len(), v.len())));
            }
        }
        rows.push((id, v));
    }
    Ok(rows)
}

/// Writes rows in the format read by [`read_embedding_table`].
pub fn write_embedding_table(path: &Path, rows: &[(String, Vec<f64>)]) -> Result<()> {
    let mut s = String::new();
    for (id, v) in rows {
        let _ = write!(s, "{id}");
        for x in v {
            let _ = write!(s, " {x:?}");
        }
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}
