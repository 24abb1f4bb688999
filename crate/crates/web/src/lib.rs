//! Browser bindings for the demo page in `www/`.
//!
//! Clouds cross the boundary as flat `Float64Array`s (`x0 y0 z0 x1 ...`);
//! structured results come back as JSON strings.

use racomp::data::{occlude, sample_shape, Family, ShapeSpec, NUM_VIEWPOINTS};
use racomp::geometry::{ball_query, chamfer_l1, chamfer_l2, f_score, fps, PointCloud, SpatialIndex};
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn cloud(flat: &[f64]) -> Result<PointCloud, JsError> {
    if flat.len() % 3 != 0 {
        return Err(err(format!("{} coordinates is not a multiple of 3", flat.len())));
    }
    Ok(PointCloud::new(flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()))
}

fn flat(c: &PointCloud) -> Vec<f64> {
    c.points.iter().flatten().copied().collect()
}

#[derive(Serialize)]
struct Synth {
    complete: Vec<f64>,
    partial: Vec<f64>,
}

/// Family names accepted by [`synth_partial`].
#[wasm_bindgen]
pub fn families() -> Vec<String> {
    Family::ALL.iter().map(|f| f.as_str().to_string()).collect()
}

#[wasm_bindgen]
pub fn viewpoint_count() -> usize {
    NUM_VIEWPOINTS
}

/// Samples a procedural shape and occludes it from one of the 24 viewpoints.
#[wasm_bindgen]
pub fn synth_partial(family: &str, seed: u32, viewpoint: usize, points: usize) -> Result<String, JsError> {
    let family: Family = family.parse().map_err(err)?;
    let spec = ShapeSpec::random(family, seed as u64);
    let complete = sample_shape(&spec, 2 * points).map_err(err)?;
    let partial = occlude(&complete, viewpoint, points).map_err(err)?;
    let out = Synth {
        complete: flat(&complete),
        partial: flat(&partial),
    };
    serde_json::to_string(&out).map_err(err)
}

#[derive(Serialize)]
struct Proxies {
    centers: Vec<usize>,
    groups: Vec<Vec<usize>>,
}

/// Farthest-point centers and their ball-query neighborhoods, as point
/// indices into `points`.
#[wasm_bindgen]
pub fn proxies(points: &[f64], m: usize, radius: f64, max_k: usize) -> Result<String, JsError> {
    let c = cloud(points)?;
    let centers = fps(&c, m.min(c.len()), 0).map_err(err)?;
    let index = SpatialIndex::build(&c.points);
    let groups = centers
        .iter()
        .map(|&i| ball_query(&index, &c.points[i], radius, max_k))
        .collect::<racomp::Result<Vec<_>>>()
        .map_err(err)?;
    serde_json::to_string(&Proxies { centers, groups }).map_err(err)
}

#[derive(Serialize)]
struct Scores {
    cd_l2_x1000: f64,
    cd_l1_x1000: f64,
    f_score: f64,
}

/// Chamfer distances (×1000) and F-score at threshold `tau`.
#[wasm_bindgen]
pub fn compare(pred: &[f64], gt: &[f64], tau: f64) -> Result<String, JsError> {
    let (p, g) = (cloud(pred)?, cloud(gt)?);
    let s = Scores {
        cd_l2_x1000: chamfer_l2(&p, &g).map_err(err)? * 1000.0,
        cd_l1_x1000: chamfer_l1(&p, &g).map_err(err)? * 1000.0,
        f_score: f_score(&p, &g, tau).map_err(err)?,
    };
    serde_json::to_string(&s).map_err(err)
}
