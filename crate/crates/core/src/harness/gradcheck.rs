//! Central finite-difference check of every parameter block of a tiny
//! network on one synthetic sample.

use std::fmt::Write as _;

use serde::Serialize;

use crate::data::{depth_raster, occlude, sample_shape, sample_shape_stream, Family, ShapeSpec};
use crate::error::Result;
use crate::geometry::PointCloud;
use crate::model::{ModelConfig, Network, Prepared, SampleInput};
use crate::tensor::{Graph, OpKind};

pub const EPSILON: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;
/// Lower bound of the error denominator, so blocks with vanishing gradients
/// are compared in absolute terms.
pub const SCALE_FLOOR: f64 = 1e-6;

/// The tiny configuration the check runs on.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        d_global: 8,
        blocks: 1,
        heads: 2,
        input_proxies: 4,
        ref_proxies: 4,
        radius: 0.4,
        max_k: 6,
        seeds: 8,
        group: 2,
        rounds: 1,
        k_geo: 2,
        k_sem: 2,
        gate_neighbors: 4,
        image_res: 8,
        patch: 4,
        ..ModelConfig::default()
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BlockResult {
    pub name: String,
    pub size: usize,
    pub max_abs_err: f64,
    pub rel_err: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub blocks: Vec<BlockResult>,
    pub loss: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.pass)
    }

    pub fn worst(&self) -> f64 {
        self.blocks.iter().map(|b| b.rel_err).fold(0.0, f64::max)
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<32} {:>6} {:>12} {:>12}  status", "block", "size", "max |a-n|", "rel err");
        for b in &self.blocks {
            let _ = writeln!(
                s,
                "{:<32} {:>6} {:>12.3e} {:>12.3e}  {}",
                b.name,
                b.size,
                b.max_abs_err,
                b.rel_err,
                if b.pass { "ok" } else { "FAIL" }
            );
        }
        let _ = writeln!(
            s,
            "{} blocks, worst rel err {:.3e}, tolerance {:.0e}: {}",
            self.blocks.len(),
            self.worst(),
            TOLERANCE,
            if self.passed() { "PASS" } else { "FAIL" }
        );
        s
    }
}

/// The fixed sample: a partial chair with image, a second chair as
/// reference, and a 32-point ground truth.
pub fn tiny_sample(net: &Network, seed: u64) -> Result<(Prepared, PointCloud)> {
    let spec = ShapeSpec::random(Family::Chair, seed);
    let dense = sample_shape_stream(&spec, 160, 1)?;
    let partial = occlude(&dense, 3, 40)?;
    let reference = sample_shape(&ShapeSpec::random(Family::Chair, seed + 1), 40)?;
    let gt = sample_shape(&spec, 32)?;
    let res = net.config.image_res;
    let image = depth_raster(&partial, 3, res, res)?;
    let prep = net.prepare(SampleInput {
        partial: &partial,
        image: Some(&image),
        reference: Some(&reference),
    })?;
    Ok((prep, gt))
}

fn loss_value(net: &Network, prep: &Prepared, gt: &PointCloud) -> Result<f64> {
    let mut g = Graph::new();
    let fwd = net.forward(&mut g, prep)?;
    let (loss, _) = net.loss(&mut g, &fwd, gt)?;
    Ok(g.value(loss).item())
}

/// Compares analytic and numeric gradients of the total loss for every
/// parameter block. `fault` corrupts one gradient rule in the analytic pass.
pub fn gradcheck(config: ModelConfig, seed: u64, fault: Option<OpKind>) -> Result<GradcheckReport> {
    let mut net = Network::new(config, seed)?;
    let (prep, gt) = tiny_sample(&net, seed)?;

    let mut g = match fault {
        Some(kind) => Graph::new().with_fault(kind),
        None => Graph::new(),
    };
    let fwd = net.forward(&mut g, &prep)?;
    let (loss, _) = net.loss(&mut g, &fwd, &gt)?;
    let loss_at = g.value(loss).item();
    g.backward(loss)?;
    let analytic = g.param_grads();

    let ids: Vec<_> = net.store.ids().collect();
    let mut blocks = Vec::with_capacity(ids.len());
    for id in ids {
        let size = net.store.get(id).len();
        let a: Vec<f64> = analytic
            .iter()
            .find(|(pid, _)| *pid == id)
            .map(|(_, t)| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; size]);
        let mut n = vec![0.0; size];
        for (j, nj) in n.iter_mut().enumerate() {
            let orig = net.store.get(id).data()[j];
            net.store.get_mut(id).data_mut()[j] = orig + EPSILON;
            let up = loss_value(&net, &prep, &gt)?;
            net.store.get_mut(id).data_mut()[j] = orig - EPSILON;
            let down = loss_value(&net, &prep, &gt)?;
            net.store.get_mut(id).data_mut()[j] = orig;
            *nj = (up - down) / (2.0 * EPSILON);
        }
        let max_abs_err = a.iter().zip(&n).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        let inf = |v: &[f64]| v.iter().map(|x| x.abs()).fold(0.0, f64::max);
        let rel_err = max_abs_err / inf(&a).max(inf(&n)).max(SCALE_FLOOR);
        blocks.push(BlockResult {
            name: net.store.name(id).to_string(),
            size,
            max_abs_err,
            rel_err,
            pass: rel_err < TOLERANCE,
        });
    }
    Ok(GradcheckReport {
        blocks,
        loss: loss_at,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_graph_passes_every_block() {
        let report = gradcheck(tiny_config(), 0, None).unwrap();
        let net = Network::new(tiny_config(), 0).unwrap();
        assert_eq!(report.blocks.len(), net.store.len());
        assert!(report.passed(), "{}", report.table());
    }

    #[test]
    fn corrupted_rules_are_detected() {
        for kind in [OpKind::MatMul, OpKind::Softmax, OpKind::LayerNorm, OpKind::SegmentMax, OpKind::Gather] {
            let report = gradcheck(tiny_config(), 0, Some(kind)).unwrap();
            assert!(!report.passed(), "fault in {kind:?} went unnoticed");
        }
    }
}
