//! Synthetic corpus: procedural shapes, viewpoint occlusion, depth rasters,
//! sparse/noisy degradation and point-cloud file I/O.

mod io;
mod manifest;
mod shapes;

pub use io::{parse_ply, parse_xyz, read_cloud, read_raster, write_cloud, write_raster};
pub use manifest::{read_manifest, write_manifest, ManifestEntry};
pub use shapes::{sample_shape, sample_shape_stream, Family, ShapeSpec};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::{dot3, fps, Point3, PointCloud};

pub const NUM_VIEWPOINTS: usize = 24;

/// Unit view directions. Entries `i` and `i + 12` are antipodal; the first
/// six come from icosahedron vertices, the next six from cuboctahedron
/// vertices.
pub fn viewpoint_direction(viewpoint: usize) -> Result<Point3> {
    if viewpoint >= NUM_VIEWPOINTS {
        return Err(Error::contract(format!(
            "viewpoint {viewpoint} outside 0..{NUM_VIEWPOINTS}"
        )));
    }
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    let reps: [Point3; 12] = [
        [0.0, 1.0, phi],
        [0.0, 1.0, -phi],
        [1.0, phi, 0.0],
        [1.0, -phi, 0.0],
        [phi, 0.0, 1.0],
        [-phi, 0.0, 1.0],
        [1.0, 1.0, 0.0],
        [1.0, -1.0, 0.0],
        [1.0, 0.0, 1.0],
        [1.0, 0.0, -1.0],
        [0.0, 1.0, 1.0],
        [0.0, 1.0, -1.0],
    ];
    let v = reps[viewpoint % 12];
    let n = dot3(&v, &v).sqrt();
    let s = if viewpoint < 12 { 1.0 } else { -1.0 };
    Ok(v.map(|x| s * x / n))
}

/// Which points survive occlusion from `viewpoint`: those on the viewer's
/// side of a plane orthogonal to the view direction, with the plane at the
/// median projection so half the points are kept.
pub fn occlusion_mask(cloud: &PointCloud, viewpoint: usize) -> Result<Vec<bool>> {
    cloud.require_nonempty("occlude")?;
    let dir = viewpoint_direction(viewpoint)?;
    let proj: Vec<f64> = cloud.points.iter().map(|p| dot3(p, &dir)).collect();
    let mut sorted = proj.clone();
    sorted.sort_by(f64::total_cmp);
    let offset = sorted[sorted.len() / 2];
    Ok(proj.iter().map(|&d| d >= offset).collect())
}

/// Removes the half of `dense` hidden from `viewpoint`, then resamples the
/// visible part to exactly `n_out` points by farthest-point sampling.
pub fn occlude(dense: &PointCloud, viewpoint: usize, n_out: usize) -> Result<PointCloud> {
    let mask = occlusion_mask(dense, viewpoint)?;
    let kept = PointCloud::new(
        dense
            .points
            .iter()
            .zip(&mask)
            .filter(|(_, &m)| m)
            .map(|(p, _)| *p)
            .collect(),
    );
    if kept.len() < n_out {
        return Err(Error::contract(format!(
            "occlude: only {} visible points for {n_out} requested",
            kept.len()
        )));
    }
    Ok(kept.select(&fps(&kept, n_out, 0)?))
}

/// Farthest-point downsampling to `n_sparse` followed by per-axis Gaussian
/// jitter with standard deviation `sigma`.
pub fn degrade(partial: &PointCloud, n_sparse: usize, sigma: f64, seed: u64) -> Result<PointCloud> {
    if n_sparse > partial.len() {
        return Err(Error::contract(format!(
            "degrade: n_sparse = {n_sparse} exceeds {} points",
            partial.len()
        )));
    }
    if !(sigma >= 0.0) {
        return Err(Error::contract(format!("degrade: sigma {sigma} must be >= 0")));
    }
    let mut out = if n_sparse == partial.len() {
        partial.clone()
    } else {
        partial.select(&fps(partial, n_sparse, 0)?)
    };
    if sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, sigma).expect("finite sigma");
        for p in &mut out.points {
            for v in p.iter_mut() {
                *v += normal.sample(&mut rng);
            }
        }
    }
    Ok(out)
}

/// Single- or multi-channel raster, row-major `height × width × channels`.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Raster {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Raster {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn at(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[(row * self.width + col) * self.channels + ch]
    }
}

/// Distance from the projection plane to the camera; keeps depths of
/// unit-ball clouds strictly positive.
pub const CAMERA_DISTANCE: f64 = 2.0;

/// Orthonormal image-plane axes `(right, up)` for a view direction.
pub fn view_basis(dir: &Point3) -> (Point3, Point3) {
    let helper = if dir[1].abs() < 0.9 { [0.0, 1.0, 0.0] } else { [1.0, 0.0, 0.0] };
    let cross = |a: &Point3, b: &Point3| {
        [
            a[1] * b[2] - a[2] * b[1],
            a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0],
        ]
    };
    let u = cross(&helper, dir);
    let n = dot3(&u, &u).sqrt();
    let u = u.map(|x| x / n);
    let v = cross(dir, &u);
    (u, v)
}

/// Orthographic depth image seen from `viewpoint`. Each pixel holds the
/// smallest camera distance among the points projecting into it; empty
/// pixels are 0. The image plane spans `[-1, 1]²`.
pub fn depth_raster(cloud: &PointCloud, viewpoint: usize, height: usize, width: usize) -> Result<Raster> {
    if height == 0 || width == 0 {
        return Err(Error::contract("depth_raster: resolution must be positive"));
    }
    let dir = viewpoint_direction(viewpoint)?;
    let (u, v) = view_basis(&dir);
    let mut img = Raster::zeros(height, width, 1);
    for p in &cloud.points {
        let x = (dot3(p, &u) + 1.0) * 0.5 * width as f64;
        let y = (1.0 - dot3(p, &v)) * 0.5 * height as f64;
        if !(x >= 0.0 && y >= 0.0) || x >= width as f64 || y >= height as f64 {
            continue;
        }
        let (col, row) = (x as usize, y as usize);
        let depth = CAMERA_DISTANCE - dot3(p, &dir);
        let cell = &mut img.data[row * width + col];
        if *cell == 0.0 || depth < *cell {
            *cell = depth;
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere(n: usize) -> PointCloud {
        sample_shape(
            &ShapeSpec {
                family: Family::SphereUnion,
                params: vec![0.5, 0.2, 0.0, 0.2, 0.0, 0.15],
                seed: 1,
            },
            n,
        )
        .unwrap()
    }

    #[test]
    fn opposite_directions() {
        for i in 0..12 {
            let a = viewpoint_direction(i).unwrap();
            let b = viewpoint_direction(i + 12).unwrap();
            assert!((dot3(&a, &b) + 1.0).abs() < 1e-12);
        }
        assert!(viewpoint_direction(24).is_err());
    }

    #[test]
    fn opposite_viewpoints_keep_different_halves() {
        let c = sphere(4000);
        let a = occlusion_mask(&c, 0).unwrap();
        let b = occlusion_mask(&c, 12).unwrap();
        let na = a.iter().filter(|&&x| x).count();
        let nb = b.iter().filter(|&&x| x).count();
        let both = a.iter().zip(&b).filter(|(x, y)| **x && **y).count();
        assert!((both as f64) < 0.8 * na.min(nb) as f64);
        let frac = na as f64 / c.len() as f64;
        assert!((0.4..=0.6).contains(&frac));
    }

    #[test]
    fn occlude_count_and_visible_side() {
        let c = sphere(4000);
        let out = occlude(&c, 5, 1000).unwrap();
        assert_eq!(out.len(), 1000);
        let dir = viewpoint_direction(5).unwrap();
        let mask = occlusion_mask(&c, 5).unwrap();
        let min_kept = c
            .points
            .iter()
            .zip(&mask)
            .filter(|(_, &m)| m)
            .map(|(p, _)| dot3(p, &dir))
            .fold(f64::INFINITY, f64::min);
        assert!(out.points.iter().all(|p| dot3(p, &dir) >= min_kept));
        assert!(occlude(&c, 5, 3000).is_err());
    }

    #[test]
    fn degrade_identity_and_count() {
        let c = sphere(300);
        assert_eq!(degrade(&c, 300, 0.0, 1).unwrap(), c);
        assert_eq!(degrade(&c, 64, 0.01, 1).unwrap().len(), 64);
        assert!(degrade(&c, 301, 0.0, 1).is_err());
    }

    #[test]
    fn single_point_raster() {
        let c = PointCloud::new(vec![[0.1, 0.2, 0.3]]);
        let img = depth_raster(&c, 3, 16, 16).unwrap();
        assert_eq!(img.data.iter().filter(|&&d| d != 0.0).count(), 1);
    }
}
