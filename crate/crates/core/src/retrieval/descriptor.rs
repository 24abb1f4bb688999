use super::{normalize, Embedder};
use crate::error::Result;
use crate::geometry::{dist2, dot3, sub, Point3, PointCloud};

const GRID: usize = 4;
const FPS_POINTS: usize = 16;
pub const DESCRIPTOR_DIM: usize = GRID * GRID * GRID + FPS_POINTS;

/// Deterministic shape descriptor: a 4×4×4 occupancy histogram of the
/// centered, unit-scaled cloud followed by the sorted centroid distances of a
/// 16-point farthest-point sample. Each part is normalized separately before
/// the whole vector is normalized, so neither dominates the cosine.
///
/// The sample starts from the point farthest from the centroid and breaks
/// ties by coordinates rather than storage order, which keeps the descriptor
/// invariant to point permutation.
pub fn embed_geometric(cloud: &PointCloud) -> Result<Vec<f64>> {
    cloud.require_nonempty("embed_geometric")?;
    let c = cloud.centroid();
    let centered: Vec<Point3> = cloud.points.iter().map(|p| sub(p, &c)).collect();
    let radius = centered.iter().map(|p| dot3(p, p)).fold(0.0, f64::max).sqrt();
    let s = if radius > 0.0 { 1.0 / radius } else { 1.0 };
    let pts: Vec<Point3> = centered.iter().map(|p| p.map(|v| v * s)).collect();

    let mut hist = vec![0.0; GRID * GRID * GRID];
    let cell = |v: f64| (((v + 1.0) * 0.5 * GRID as f64) as usize).min(GRID - 1);
    for p in &pts {
        hist[(cell(p[0]) * GRID + cell(p[1])) * GRID + cell(p[2])] += 1.0;
    }
    hist.iter_mut().for_each(|h| *h /= pts.len() as f64);

    let mut dists: Vec<f64> = canonical_fps(&pts, FPS_POINTS)
        .into_iter()
        .map(|i| dot3(&pts[i], &pts[i]).sqrt())
        .collect();
    dists.sort_by(f64::total_cmp);
    dists.resize(FPS_POINTS, 0.0);

    normalize(&mut hist)?;
    if dists.iter().any(|&d| d > 0.0) {
        normalize(&mut dists)?;
    }
    let mut out = hist;
    out.extend(dists);
    normalize(&mut out)?;
    Ok(out)
}

fn lex_greater(a: &Point3, b: &Point3) -> bool {
    a.partial_cmp(b) == Some(std::cmp::Ordering::Greater)
}

/// Farthest-point sample (centered cloud) with order-independent tie-breaks.
fn canonical_fps(pts: &[Point3], m: usize) -> Vec<usize> {
    let m = m.min(pts.len());
    let pick = |score: &dyn Fn(usize) -> f64| {
        let mut best = 0;
        for i in 1..pts.len() {
            let (si, sb) = (score(i), score(best));
            if si > sb || (si == sb && lex_greater(&pts[i], &pts[best])) {
                best = i;
            }
        }
        best
    };
    let mut chosen = vec![pick(&|i| dot3(&pts[i], &pts[i]))];
    let mut mind: Vec<f64> = pts.iter().map(|p| dist2(p, &pts[chosen[0]])).collect();
    while chosen.len() < m {
        let next = pick(&|i| mind[i]);
        chosen.push(next);
        for (i, p) in pts.iter().enumerate() {
            mind[i] = mind[i].min(dist2(p, &pts[next]));
        }
    }
    chosen
}

/// The built-in geometric embedder.
#[derive(Clone, Copy, Debug, Default)]
pub struct GeometricEmbedder;

impl Embedder for GeometricEmbedder {
    fn id(&self) -> &str {
        "geometric-v1"
    }

    fn dim(&self) -> usize {
        DESCRIPTOR_DIM
    }

    fn embed(&self, cloud: &PointCloud) -> Result<Vec<f64>> {
        embed_geometric(cloud)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn sphere(n: usize) -> PointCloud {
        // Fibonacci lattice: evenly spread, no randomness needed.
        let golden = PI * (3.0 - 5f64.sqrt());
        PointCloud::new(
            (0..n)
                .map(|i| {
                    let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                    let r = (1.0 - z * z).sqrt();
                    let t = golden * i as f64;
                    [r * t.cos(), r * t.sin(), z]
                })
                .collect(),
        )
    }

    fn line(n: usize) -> PointCloud {
        PointCloud::new((0..n).map(|i| [i as f64 / (n - 1) as f64 * 2.0 - 1.0, 0.0, 0.0]).collect())
    }

    #[test]
    fn unit_norm_and_dimension() {
        for c in [sphere(256), line(256), PointCloud::new(vec![[1.0, 2.0, 3.0]])] {
            let e = embed_geometric(&c).unwrap();
            assert_eq!(e.len(), DESCRIPTOR_DIM);
            let n: f64 = e.iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn sphere_and_line_are_far_apart() {
        let a = embed_geometric(&sphere(256)).unwrap();
        let b = embed_geometric(&line(256)).unwrap();
        let cos: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!(cos < 0.9, "cosine {cos}");
    }

    #[test]
    fn fps_start_ignores_storage_order() {
        let pts = vec![[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, -1.0, 0.0]];
        let mut rev = pts.clone();
        rev.reverse();
        let pick = |p: &[Point3]| canonical_fps(p, 2).into_iter().map(|i| p[i]).collect::<Vec<_>>();
        assert_eq!(pick(&pts), pick(&rev));
    }
}
