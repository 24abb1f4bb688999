//! Brute-force reference implementations shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use racomp::geometry::{Point3, PointCloud};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_cloud(rng: &mut impl Rng, n: usize) -> PointCloud {
    PointCloud::new(
        (0..n)
            .map(|_| {
                [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ]
            })
            .collect(),
    )
}

/// Clouds snapped to a coarse grid, so distance ties are frequent.
pub fn gridded_cloud(rng: &mut impl Rng, n: usize) -> PointCloud {
    PointCloud::new(
        (0..n)
            .map(|_| {
                [
                    rng.random_range(-4i32..=4) as f64 * 0.25,
                    rng.random_range(-4i32..=4) as f64 * 0.25,
                    rng.random_range(-4i32..=4) as f64 * 0.25,
                ]
            })
            .collect(),
    )
}

pub fn d2(a: &Point3, b: &Point3) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// All indices sorted by (squared distance, index).
pub fn ranked(points: &[Point3], q: &Point3) -> Vec<(usize, f64)> {
    let mut v: Vec<(usize, f64)> = points.iter().enumerate().map(|(i, p)| (i, d2(p, q))).collect();
    v.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    v
}

pub fn brute_knn(points: &[Point3], q: &Point3, k: usize) -> Vec<usize> {
    ranked(points, q).into_iter().take(k).map(|(i, _)| i).collect()
}

pub fn brute_ball(points: &[Point3], q: &Point3, r: f64, max_k: usize) -> Vec<usize> {
    let inside: Vec<usize> = ranked(points, q)
        .into_iter()
        .filter(|&(_, d)| d < r * r)
        .map(|(i, _)| i)
        .take(max_k.max(1))
        .collect();
    if inside.is_empty() {
        brute_knn(points, q, 1)
    } else {
        inside
    }
}

fn nn_sq(a: &PointCloud, b: &PointCloud) -> Vec<f64> {
    a.points
        .iter()
        .map(|p| b.points.iter().map(|q| d2(p, q)).fold(f64::INFINITY, f64::min))
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn brute_chamfer_l2(a: &PointCloud, b: &PointCloud) -> f64 {
    mean(&nn_sq(a, b)) + mean(&nn_sq(b, a))
}

pub fn brute_chamfer_l1(a: &PointCloud, b: &PointCloud) -> f64 {
    let s = |v: Vec<f64>| v.into_iter().map(f64::sqrt).collect::<Vec<_>>();
    0.5 * (mean(&s(nn_sq(a, b))) + mean(&s(nn_sq(b, a))))
}

pub fn brute_f_score(pred: &PointCloud, gt: &PointCloud, tau: f64) -> f64 {
    let frac = |a, b| nn_sq(a, b).iter().filter(|&&d| d < tau * tau).count() as f64 / a.len() as f64;
    let (p, r) = (frac(pred, gt), frac(gt, pred));
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}
