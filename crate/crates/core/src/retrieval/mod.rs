//! Embedding index over a shape corpus with exact top-k cosine queries.
//!
//! Shapes are embedded by a deterministic geometric descriptor
//! ([`GeometricEmbedder`]); embeddings computed elsewhere can be imported
//! from a text table instead.

mod descriptor;
mod store;

pub use descriptor::{embed_geometric, GeometricEmbedder, DESCRIPTOR_DIM};
pub use store::{
    index_from_bytes, index_to_bytes, read_embedding_table, read_index, write_embedding_table,
    write_index,
};

use std::cmp::Ordering;
use std::path::{Path, PathBuf};

use crate::data::{read_cloud, read_manifest};
use crate::error::{Error, Result};
use crate::geometry::{fps, PointCloud};

/// Something that maps a point cloud to a fixed-length vector.
pub trait Embedder {
    fn id(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed(&self, cloud: &PointCloud) -> Result<Vec<f64>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRecord {
    pub shape_id: String,
    pub embedding: Vec<f64>,
    pub path: PathBuf,
    pub category: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalIndex {
    pub embedder: String,
    pub dim: usize,
    pub records: Vec<EmbeddingRecord>,
}

/// Warnings collected while building an index.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BuildReport {
    pub warnings: Vec<String>,
}

pub(crate) fn normalize(v: &mut [f64]) -> Result<()> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::contract("cannot normalize a zero or non-finite embedding"));
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(())
}

impl RetrievalIndex {
    pub fn new(embedder: impl Into<String>, dim: usize) -> Self {
        RetrievalIndex {
            embedder: embedder.into(),
            dim,
            records: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Adds a record, normalizing its embedding to unit length.
    pub fn insert(&mut self, mut record: EmbeddingRecord) -> Result<()> {
        if record.embedding.len() != self.dim {
            return Err(Error::contract(format!(
                "embedding for {} has dimension {}, index expects {}",
                record.shape_id,
                record.embedding.len(),
                self.dim
            )));
        }
        if self.records.iter().any(|r| r.shape_id == record.shape_id) {
            return Err(Error::contract(format!("duplicate shape id {}", record.shape_id)));
        }
        normalize(&mut record.embedding)?;
        self.records.push(record);
        Ok(())
    }

    pub fn get(&self, shape_id: &str) -> Option<&EmbeddingRecord> {
        self.records.iter().find(|r| r.shape_id == shape_id)
    }

    /// Exact top-k by cosine similarity among records accepted by `keep`,
    /// descending; equal scores are ordered by shape id.
    pub fn query_filtered(
        &self,
        q: &[f64],
        k: usize,
        keep: impl Fn(&EmbeddingRecord) -> bool,
    ) -> Result<Vec<(String, f64)>> {
        if q.len() != self.dim {
            return Err(Error::contract(format!(
                "query dimension {} does not match index dimension {}",
                q.len(),
                self.dim
            )));
        }
        let qn = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(qn > 0.0) {
            return Err(Error::contract("query vector has zero norm"));
        }
        let mut scored: Vec<(&str, f64)> = self
            .records
            .iter()
            .filter(|r| keep(r))
            .map(|r| {
                let dot: f64 = r.embedding.iter().zip(q).map(|(a, b)| a * b).sum();
                (r.shape_id.as_str(), dot / qn)
            })
            .collect();
        if k > scored.len() {
            return Err(Error::contract(format!(
                "k = {k} exceeds {} candidate records",
                scored.len()
            )));
        }
        scored.sort_by(|a, b| match b.1.total_cmp(&a.1) {
            Ordering::Equal => a.0.cmp(b.0),
            o => o,
        });
        Ok(scored
            .into_iter()
            .take(k)
            .map(|(id, s)| (id.to_string(), s))
            .collect())
    }

    pub fn query_topk(&self, q: &[f64], k: usize) -> Result<Vec<(String, f64)>> {
        self.query_filtered(q, k, |_| true)
    }

    /// Loads a record's shape and resamples it to `points` by farthest-point
    /// sampling from index 0.
    pub fn load_shape(&self, shape_id: &str, points: usize) -> Result<PointCloud> {
        let rec = self
            .get(shape_id)
            .ok_or_else(|| Error::contract(format!("no record {shape_id}")))?;
        let cloud = read_cloud(&rec.path).map_err(|e| match e {
            Error::Io { source, .. } => Error::Io {
                path: PathBuf::from(format!("{} (shape {shape_id})", rec.path.display())),
                source,
            },
            other => other,
        })?;
        if cloud.len() < points {
            return Err(Error::contract(format!(
                "shape {shape_id} has {} points, reference needs {points}",
                cloud.len()
            )));
        }
        if cloud.len() == points {
            return Ok(cloud);
        }
        Ok(cloud.select(&fps(&cloud, points, 0)?))
    }
}

/// Embeds every shape listed in a manifest. Unreadable shapes are skipped and
/// reported; an index with no records is an error.
pub fn build_index(
    manifest: &Path,
    embedder: &dyn Embedder,
) -> Result<(RetrievalIndex, BuildReport)> {
    let entries = read_manifest(manifest)?;
    let base = manifest.parent().unwrap_or(Path::new(""));
    let mut index = RetrievalIndex::new(embedder.id(), embedder.dim());
    let mut report = BuildReport::default();
    for e in entries {
        let path = base.join(&e.path);
        let cloud = match read_cloud(&path) {
            Ok(c) if !c.is_empty() => c,
            Ok(_) => {
                report.warnings.push(format!("{}: empty shape file {}", e.shape_id, path.display()));
                continue;
            }
            Err(err) => {
                report.warnings.push(format!("{}: {err}", e.shape_id));
                continue;
            }
        };
        index.insert(EmbeddingRecord {
            shape_id: e.shape_id,
            embedding: embedder.embed(&cloud)?,
            path,
            category: e.category,
        })?;
    }
    for w in &report.warnings {
        log::warn!("{w}");
    }
    if index.is_empty() {
        return Err(Error::contract(format!(
            "corpus {} produced no readable shapes",
            manifest.display()
        )));
    }
    Ok((index, report))
}

/// Builds an index from externally computed embeddings. Shape paths are
/// taken from `manifest` when it lists the id; other records get an empty
/// path and can be queried but not loaded.
pub fn import_embeddings(
    embedder_id: &str,
    rows: Vec<(String, Vec<f64>)>,
    manifest: Option<&Path>,
) -> Result<RetrievalIndex> {
    let entries = match manifest {
        Some(m) => {
            let base = m.parent().unwrap_or(Path::new("")).to_path_buf();
            read_manifest(m)?
                .into_iter()
                .map(|e| (e.shape_id.clone(), (base.join(&e.path), e.category)))
                .collect()
        }
        None => std::collections::HashMap::new(),
    };
    let dim = rows
        .first()
        .map(|(_, v)| v.len())
        .ok_or_else(|| Error::contract("embedding table is empty"))?;
    let mut index = RetrievalIndex::new(embedder_id, dim);
    for (shape_id, embedding) in rows {
        let (path, category) = entries.get(&shape_id).cloned().unwrap_or_default();
        index.insert(EmbeddingRecord {
            shape_id,
            embedding,
            path,
            category,
        })?;
    }
    Ok(index)
}

/// Top-`k` reference shapes for a partial cloud, each resampled to
/// `points`. Shapes whose id equals `exclude` are skipped.
pub fn retrieve_reference(
    index: &RetrievalIndex,
    embedder: &dyn Embedder,
    partial: &PointCloud,
    k: usize,
    points: usize,
    exclude: Option<&str>,
) -> Result<Vec<(String, PointCloud)>> {
    if index.is_empty() {
        return Err(Error::contract("retrieval index is empty"));
    }
    let q = embedder.embed(partial)?;
    let hits = index.query_filtered(&q, k, |r| Some(r.shape_id.as_str()) != exclude)?;
    hits.into_iter()
        .map(|(id, _)| {
            let cloud = index.load_shape(&id, points)?;
            Ok((id, cloud))
        })
        .collect()
}
