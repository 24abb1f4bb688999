//! End-to-end commands over a corpus directory: index, train, complete, eval.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use super::config::RunConfig;
use super::corpus::{load_split, read_split, split_path};
use super::eval::{evaluate, EvalReport};
use super::train::{prepare_samples, resume, train_loop, EpochLog, RunPaths, TrainState};
use super::{choose_references, ReferenceMode};
use crate::data::{read_cloud, read_raster, write_cloud};
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::model::{Completion, Network, SampleInput};
use crate::retrieval::{
    build_index, import_embeddings, read_embedding_table, read_index, retrieve_reference, write_index,
    BuildReport, GeometricEmbedder, RetrievalIndex,
};
use crate::tensor::read_checkpoint;

/// Builds the retrieval index from a shape manifest (by default the corpus's
/// train-shape manifest), or from an external embedding table, and writes it
/// to `cfg.index`.
pub fn cmd_index_build(
    cfg: &RunConfig,
    manifest: Option<&Path>,
    embeddings: Option<&Path>,
) -> Result<(RetrievalIndex, BuildReport)> {
    let manifest = manifest.map_or_else(|| cfg.corpus.join("index_manifest.txt"), Path::to_path_buf);
    let (index, report) = match embeddings {
        Some(table) => (
            import_embeddings("external", read_embedding_table(table)?, Some(&manifest))?,
            BuildReport::default(),
        ),
        None => build_index(&manifest, &GeometricEmbedder)?,
    };
    if let Some(dir) = cfg.index.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_index(&cfg.index, &index)?;
    Ok((index, report))
}

/// Opens `cfg.index`, turning a missing file into an error that says how to
/// build it.
pub fn open_index(cfg: &RunConfig) -> Result<RetrievalIndex> {
    if !cfg.index.exists() {
        return Err(Error::contract(format!(
            "index file {} not found; build it with `racomp index build`",
            cfg.index.display()
        )));
    }
    read_index(&cfg.index)
}

pub fn cmd_index_query(cfg: &RunConfig, cloud: &Path, k: usize) -> Result<Vec<(String, f64)>> {
    let index = open_index(cfg)?;
    if index.embedder != "geometric-v1" {
        return Err(Error::Unsupported(format!(
            "querying an index built from {} embeddings needs that embedder",
            index.embedder
        )));
    }
    let q = crate::retrieval::embed_geometric(&read_cloud(cloud)?)?;
    index.query_topk(&q, k)
}

/// Trains on the corpus train split, validating on the val split.
pub fn cmd_train(
    cfg: &RunConfig,
    resume_from: Option<&Path>,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    let index = open_index(cfg)?;
    let res = cfg.model.image_res;
    let train = load_split(&cfg.corpus, "train", res, cfg.train_limit)?;
    let val = load_split(&cfg.corpus, "val", res, cfg.val_limit)?;
    let mut state = match resume_from {
        Some(p) => resume(p, cfg)?,
        None => TrainState::new(cfg)?,
    };
    let refs = |s| -> Result<Vec<Option<PointCloud>>> {
        Ok(choose_references(cfg, &index, s, ReferenceMode::Retrieved)?
            .into_iter()
            .map(|(_, c)| c)
            .collect())
    };
    let train_p = prepare_samples(&state.net, &train, &refs(&train)?)?;
    let val_p = prepare_samples(&state.net, &val, &refs(&val)?)?;
    let paths = RunPaths {
        dir: cfg.checkpoints.clone(),
    };
    train_loop(cfg, &mut state, &train_p, &val_p, Some(&paths), on_epoch)
}

/// Loads a checkpoint; when `expected` is set its model config must match.
pub fn load_network(checkpoint: &Path, expected: Option<&RunConfig>) -> Result<Network> {
    let ck = read_checkpoint(checkpoint)?;
    let params: Vec<_> = ck.tensors.iter().filter(|(n, _)| !n.starts_with("adam.")).cloned().collect();
    Network::from_checkpoint(
        &crate::tensor::Checkpoint {
            meta: ck.meta.clone(),
            tensors: params,
        },
        expected.map(|c| &c.model),
    )
}

pub struct CompleteRequest<'a> {
    pub partial: &'a Path,
    pub image: Option<&'a Path>,
    /// Renders the stand-in depth image from the partial at this viewpoint.
    pub viewpoint: Option<usize>,
    pub reference: Option<&'a Path>,
    pub out: &'a Path,
    pub seeds_out: Option<&'a Path>,
}

/// Completes one partial cloud. An explicit reference wins over retrieval;
/// otherwise the top-1 shape of the configured index is used.
pub fn cmd_complete(cfg: &RunConfig, net: &Network, req: &CompleteRequest<'_>) -> Result<(Completion, Option<String>)> {
    let partial = read_cloud(req.partial)?;
    let image = match (req.image, req.viewpoint) {
        (Some(p), _) => Some(read_raster(p)?),
        (None, Some(vp)) => {
            let r = net.config.image_res;
            Some(crate::data::depth_raster(&partial, vp, r, r)?)
        }
        (None, None) => None,
    };
    let (ref_id, reference) = match req.reference {
        Some(p) => (Some(p.display().to_string()), Some(read_cloud(p)?)),
        None if net.config.use_reference => {
            let index = open_index(cfg)?;
            let mut hits = retrieve_reference(&index, &GeometricEmbedder, &partial, 1, cfg.ref_points, None)?;
            let (id, c) = hits.remove(0);
            (Some(id), Some(c))
        }
        None => (None, None),
    };
    let prep = net.prepare(SampleInput {
        partial: &partial,
        image: image.as_ref(),
        reference: reference.as_ref(),
    })?;
    let out = net.complete(&prep)?;
    write_cloud(&out.dense, req.out)?;
    let seeds_path = req
        .seeds_out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| with_suffix(req.out, "_seeds"));
    write_cloud(&out.seeds, &seeds_path)?;
    Ok((out, ref_id))
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let ext = p.extension().map(|e| format!(".{}", e.to_string_lossy())).unwrap_or_default();
    p.with_file_name(format!("{stem}{suffix}{ext}"))
}

/// Evaluates a checkpoint (or the ground truth itself when `net` is `None`)
/// on a split. References and MMD candidates come from the index, which
/// must not contain any shape of the evaluated split.
pub fn cmd_eval(cfg: &RunConfig, net: Option<&Network>, split: &str, mode: ReferenceMode) -> Result<EvalReport> {
    let index = open_index(cfg)?;
    let recs = read_split(&split_path(&cfg.corpus, split))?;
    let split_shapes: HashSet<&str> = recs.iter().map(|r| r.shape_id.as_str()).collect();
    if split != "train" {
        if let Some(leak) = index.records.iter().find(|r| split_shapes.contains(r.shape_id.as_str())) {
            return Err(Error::contract(format!(
                "index contains {} from the {split} split",
                leak.shape_id
            )));
        }
    }
    let res = net.map_or(cfg.model.image_res, |n| n.config.image_res);
    let samples = load_split(&cfg.corpus, split, res, 0)?;
    let run_cfg = match net {
        Some(n) => RunConfig {
            model: n.config.clone(),
            ..cfg.clone()
        },
        None => cfg.clone(),
    };
    let refs = match net {
        Some(_) => choose_references(&run_cfg, &index, &samples, mode)?,
        None => vec![(None, None); samples.len()],
    };
    let pool: Vec<PointCloud> = super::par_map(&index.records, |r| read_cloud(&r.path))
        .into_iter()
        .collect::<Result<_>>()?;
    let records = evaluate(net, &samples, &refs, &pool)?;
    Ok(EvalReport::from_records(
        split,
        if net.is_some() { "model" } else { "oracle" },
        if net.is_some() { mode.as_str() } else { "none" },
        &run_cfg.hash(),
        records,
    ))
}
