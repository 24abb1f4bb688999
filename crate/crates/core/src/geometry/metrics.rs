use super::{PointCloud, SpatialIndex};
use crate::error::{Error, Result};

/// Sum after sorting, so the result does not depend on point order.
fn ordered_mean(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.into_iter().sum::<f64>() / n
}

/// Squared distance from every point of `a` to its nearest neighbor in `b`.
pub fn nearest_sq_distances(a: &PointCloud, b: &SpatialIndex) -> Vec<f64> {
    a.points
        .iter()
        .map(|p| b.nearest(p).map_or(f64::INFINITY, |(_, d)| d))
        .collect()
}

/// Mean squared nearest-neighbor distance from `a` to `b`.
pub fn directional_sq(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    a.require_nonempty("chamfer")?;
    b.require_nonempty("chamfer")?;
    let tree = SpatialIndex::build(&b.points);
    Ok(ordered_mean(nearest_sq_distances(a, &tree)))
}

/// Symmetric Chamfer distance with squared Euclidean terms.
pub fn chamfer_l2(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    Ok(directional_sq(a, b)? + directional_sq(b, a)?)
}

/// Chamfer distance with un-squared terms: half the sum of the two
/// directional mean distances.
pub fn chamfer_l1(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    a.require_nonempty("chamfer_l1")?;
    b.require_nonempty("chamfer_l1")?;
    let ta = SpatialIndex::build(&a.points);
    let tb = SpatialIndex::build(&b.points);
    let ab = ordered_mean(nearest_sq_distances(a, &tb).into_iter().map(f64::sqrt).collect());
    let ba = ordered_mean(nearest_sq_distances(b, &ta).into_iter().map(f64::sqrt).collect());
    Ok(0.5 * (ab + ba))
}

/// Harmonic mean of precision (fraction of `pred` closer than `tau` to
/// `gt`) and recall (fraction of `gt` closer than `tau` to `pred`).
pub fn f_score(pred: &PointCloud, gt: &PointCloud, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::contract(format!("f_score: tau {tau} must be > 0")));
    }
    pred.require_nonempty("f_score")?;
    gt.require_nonempty("f_score")?;
    let t2 = tau * tau;
    let frac = |a: &PointCloud, b: &PointCloud| {
        let tree = SpatialIndex::build(&b.points);
        let hits = nearest_sq_distances(a, &tree).iter().filter(|&&d| d < t2).count();
        hits as f64 / a.len() as f64
    };
    let p = frac(pred, gt);
    let r = frac(gt, pred);
    Ok(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) })
}

/// Mean squared distance from each input point to the nearest output point.
pub fn fidelity(input: &PointCloud, output: &PointCloud) -> Result<f64> {
    directional_sq(input, output)
}

/// Smallest Chamfer distance from `output` to any candidate.
pub fn mmd(output: &PointCloud, candidates: &[PointCloud]) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::contract("mmd: empty candidate list"));
    }
    output.require_nonempty("mmd")?;
    let out_tree = SpatialIndex::build(&output.points);
    let mut best = f64::INFINITY;
    for c in candidates {
        c.require_nonempty("mmd")?;
        let ab = ordered_mean(nearest_sq_distances(output, &SpatialIndex::build(&c.points)));
        let ba = ordered_mean(nearest_sq_distances(c, &out_tree));
        best = best.min(ab + ba);
    }
    Ok(best)
}
