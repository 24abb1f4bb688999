//! Training losses: Chamfer terms for seeds and dense output, the GRAM
//! feature-transfer term, and their sum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{fps, Point3, PointCloud, SpatialIndex};
use crate::tensor::{Graph, Tensor, Var};

/// Converts a `[N × 3]` value into a cloud.
pub fn cloud_of(t: &Tensor) -> PointCloud {
    PointCloud::new(t.data().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
}

fn nearest_all(from: &[Point3], to: &[Point3]) -> Vec<usize> {
    let tree = SpatialIndex::build(to);
    from.iter().map(|p| tree.nearest(p).expect("non-empty").0).collect()
}

/// Differentiable symmetric Chamfer distance with squared terms between the
/// `[N × 3]` variable `pred` and a fixed cloud. Correspondences are found on
/// the current values and held fixed for the gradient.
pub fn chamfer_loss(g: &mut Graph, pred: Var, gt: &PointCloud) -> Result<Var> {
    gt.require_nonempty("chamfer_loss")?;
    let p = cloud_of(g.value(pred));
    p.require_nonempty("chamfer_loss")?;
    let (n, m) = (p.len() as f64, gt.len() as f64);
    let gt_t = g.input(Tensor::new(vec![gt.len(), 3], gt.points.iter().flatten().copied().collect())?);

    let to_gt = nearest_all(&p.points, &gt.points);
    let matched = g.gather(gt_t, &to_gt)?;
    let d1 = g.sub(pred, matched)?;
    let d1 = g.mul(d1, d1)?;
    let s1 = g.sum(d1);
    let s1 = g.scale(s1, 1.0 / n);

    let to_pred = nearest_all(&gt.points, &p.points);
    let matched = g.gather(pred, &to_pred)?;
    let d2 = g.sub(matched, gt_t)?;
    let d2 = g.mul(d2, d2)?;
    let s2 = g.sum(d2);
    let s2 = g.scale(s2, 1.0 / m);
    g.add(s1, s2)
}

/// Downsampled target for the seed term: FPS of `gt` from index 0.
pub fn seed_target(gt: &PointCloud, seeds: usize) -> Result<PointCloud> {
    gt.require_nonempty("seed_loss")?;
    let m = seeds.min(gt.len());
    Ok(gt.select(&fps(gt, m, 0)?))
}

pub fn seed_loss(g: &mut Graph, seeds: Var, gt: &PointCloud) -> Result<Var> {
    let target = seed_target(gt, g.shape(seeds)[0])?;
    chamfer_loss(g, seeds, &target)
}

pub fn output_loss(g: &mut Graph, dense: Var, gt: &PointCloud) -> Result<Var> {
    chamfer_loss(g, dense, gt)
}

/// `Fᵀ F`, `[D × D]`.
pub fn gram(g: &mut Graph, features: Var) -> Result<Var> {
    let t = g.transpose(features)?;
    g.matmul(t, features)
}

/// `Σ(G(f_in) − G(f_out))² / (T_in · D)`, plus the mean squared difference
/// of the features when both have the same shape.
pub fn ft_loss(g: &mut Graph, f_in: Var, f_out: Var) -> Result<Var> {
    let (ti, di) = g.value(f_in).dims2()?;
    let (to, dout) = g.value(f_out).dims2()?;
    if di != dout {
        return Err(Error::contract(format!(
            "ft_loss: feature widths {di} and {dout} differ"
        )));
    }
    let gi = gram(g, f_in)?;
    let go = gram(g, f_out)?;
    let dg = g.sub(gi, go)?;
    let sq = g.mul(dg, dg)?;
    let s = g.sum(sq);
    let term = g.scale(s, 1.0 / (ti * di) as f64);
    if ti != to {
        return Ok(term);
    }
    let d = g.sub(f_in, f_out)?;
    let d = g.mul(d, d)?;
    let mse = g.mean(d);
    g.add(term, mse)
}

/// Per-term weights; all 1 by default.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub seed: f64,
    pub output: f64,
    pub ft: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            seed: 1.0,
            output: 1.0,
            ft: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub seed: f64,
    pub output: f64,
    pub ft: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Sums the parts as `seed + output + ft`, in that order.
    pub fn from_parts(seed: f64, output: f64, ft: f64) -> Result<Self> {
        for (name, v) in [("seed", seed), ("output", output), ("ft", ft)] {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    term: name.to_string(),
                    batch: 0,
                });
            }
        }
        Ok(LossBreakdown {
            seed,
            output,
            ft,
            total: seed + output + ft,
        })
    }

    /// Element-wise sum, each field accumulated in call order.
    pub fn accumulate(&mut self, other: &LossBreakdown) {
        self.seed += other.seed;
        self.output += other.output;
        self.ft += other.ft;
        self.total += other.total;
    }

    pub fn scaled(&self, s: f64) -> LossBreakdown {
        LossBreakdown {
            seed: self.seed * s,
            output: self.output * s,
            ft: self.ft * s,
            total: self.total * s,
        }
    }
}

/// Weighted total of the three terms and its breakdown (weighted values).
pub fn total_loss(
    g: &mut Graph,
    seed: Var,
    output: Var,
    ft: Var,
    weights: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let s = g.scale(seed, weights.seed);
    let o = g.scale(output, weights.output);
    let f = g.scale(ft, weights.ft);
    let breakdown = LossBreakdown::from_parts(g.value(s).item(), g.value(o).item(), g.value(f).item())?;
    let so = g.add(s, o)?;
    let total = g.add(so, f)?;
    Ok((total, breakdown))
}
