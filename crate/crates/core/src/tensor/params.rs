use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    lookup: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.lookup.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.values.len());
        self.lookup.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Overwrites values from named tensors; every stored name must be present
    /// with a matching shape.
    pub fn load_named(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        let by_name: HashMap<&str, &Tensor> =
            tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for (i, name) in self.names.iter().enumerate() {
            let t = by_name
                .get(name.as_str())
                .ok_or_else(|| Error::Incompatible(format!("missing parameter {name}")))?;
            if t.shape() != self.values[i].shape() {
                return Err(Error::Incompatible(format!(
                    "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                    t.shape(),
                    self.values[i].shape()
                )));
            }
            self.values[i] = (*t).clone();
        }
        Ok(())
    }

    pub fn named(&self) -> Vec<(String, Tensor)> {
        self.names.iter().cloned().zip(self.values.iter().cloned()).collect()
    }
}

const MAGIC: &[u8; 8] = b"RACKPT01";

/// Named-tensor container with free-form key/value metadata.
///
/// Layout (all integers little-endian):
///
/// ```text
/// magic        8 bytes  "RACKPT01"
/// header_len   u64
/// header       header_len bytes of UTF-8, one entry per line:
///                meta <key> <value>
///                tensor <name> <offset> <rank> <dim_0> ... <dim_{rank-1}>
/// payload      f64 little-endian values; `offset` counts f64 elements from
///              the start of the payload
/// ```
///
/// Names and keys contain no whitespace; meta values run to end of line.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = String::new();
        for (k, v) in &self.meta {
            header.push_str(&format!("meta {k} {}\n", v.replace('\n', " ")));
        }
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            header.push_str(&format!("tensor {name} {offset} {}", t.rank()));
            for d in t.shape() {
                header.push_str(&format!(" {d}"));
            }
            header.push('\n');
            offset += t.len();
        }
        let mut out = Vec::with_capacity(16 + header.len() + offset * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for (_, t) in &self.tensors {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |line: usize, msg: &str| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg: msg.to_string(),
        };
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad(0, "not a checkpoint (bad magic)"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header = bytes
            .get(16..16 + hlen)
            .ok_or_else(|| bad(0, "truncated header"))?;
        let header = std::str::from_utf8(header).map_err(|_| bad(0, "header is not UTF-8"))?;
        let payload = &bytes[16 + hlen..];
        let mut ck = Checkpoint::default();
        for (ln, line) in header.lines().enumerate() {
            let ln = ln + 1;
            let mut parts = line.splitn(3, ' ');
            match parts.next() {
                Some("meta") => {
                    let k = parts.next().ok_or_else(|| bad(ln, "meta without key"))?;
                    let v = parts.next().unwrap_or("");
                    ck.meta.push((k.to_string(), v.to_string()));
                }
                Some("tensor") => {
                    let fields: Vec<&str> = line.split_whitespace().collect();
                    if fields.len() < 4 {
                        return Err(bad(ln, "short tensor entry"));
                    }
                    let num = |s: &str| s.parse::<usize>().map_err(|_| bad(ln, "bad integer"));
                    let offset = num(fields[2])?;
                    let rank = num(fields[3])?;
                    if fields.len() != 4 + rank {
                        return Err(bad(ln, "rank does not match dims"));
                    }
                    let shape = fields[4..].iter().map(|s| num(s)).collect::<Result<Vec<_>>>()?;
                    let n: usize = shape.iter().product();
                    let raw = payload
                        .get(offset * 8..(offset + n) * 8)
                        .ok_or_else(|| bad(ln, "payload too short"))?;
                    let data = raw
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    ck.tensors.push((fields[1].to_string(), Tensor::new(shape, data)?));
                }
                Some("") | None => {}
                Some(other) => return Err(bad(ln, &format!("unknown header entry {other}"))),
            }
        }
        Ok(ck)
    }
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    fs::write(path, ck.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)
}
