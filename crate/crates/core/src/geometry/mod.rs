//! Point sets, spatial indexing, sampling and evaluation metrics.

mod kdtree;
mod metrics;
mod sampling;

pub use kdtree::SpatialIndex;
pub use metrics::{
    chamfer_l1, chamfer_l2, directional_sq, f_score, fidelity, mmd, nearest_sq_distances,
};
pub use sampling::{ball_query, fps, knn};

use crate::error::{Error, Result};

pub type Point3 = [f64; 3];

#[inline]
pub fn dist2(a: &Point3, b: &Point3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[inline]
pub fn sub(a: &Point3, b: &Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn dot3(a: &Point3, b: &Point3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Ordered list of 3D coordinates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Self {
        PointCloud { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.points.iter().flatten().all(|x| x.is_finite())
    }

    pub(crate) fn require_nonempty(&self, what: &str) -> Result<()> {
        if self.points.is_empty() {
            Err(Error::contract(format!("{what}: empty point cloud")))
        } else {
            Ok(())
        }
    }

    pub fn select(&self, idx: &[usize]) -> PointCloud {
        PointCloud::new(idx.iter().map(|&i| self.points[i]).collect())
    }

    pub fn centroid(&self) -> Point3 {
        let n = self.points.len().max(1) as f64;
        let mut c = [0.0; 3];
        for p in &self.points {
            for a in 0..3 {
                c[a] += p[a];
            }
        }
        c.map(|v| v / n)
    }

    pub fn translated(&self, t: Point3) -> PointCloud {
        PointCloud::new(
            self.points
                .iter()
                .map(|p| [p[0] + t[0], p[1] + t[1], p[2] + t[2]])
                .collect(),
        )
    }

    pub fn scaled(&self, s: f64) -> PointCloud {
        PointCloud::new(self.points.iter().map(|p| p.map(|v| v * s)).collect())
    }

    /// Axis-aligned bounds `(min, max)`.
    pub fn bounds(&self) -> (Point3, Point3) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        (lo, hi)
    }

    /// Centers at the centroid and scales so the farthest point has norm 1.
    pub fn unit_normalized(&self) -> PointCloud {
        let c = self.centroid();
        let centered: Vec<Point3> = self.points.iter().map(|p| sub(p, &c)).collect();
        let r = centered
            .iter()
            .map(|p| dot3(p, p).sqrt())
            .fold(0.0, f64::max);
        let s = if r > 0.0 { 1.0 / r } else { 1.0 };
        PointCloud::new(centered.into_iter().map(|p| p.map(|v| v * s)).collect())
    }

    pub fn concat(&self, other: &PointCloud) -> PointCloud {
        let mut points = self.points.clone();
        points.extend_from_slice(&other.points);
        PointCloud::new(points)
    }
}
