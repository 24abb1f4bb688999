use super::{dist2, Point3, PointCloud, SpatialIndex};
use crate::error::{Error, Result};

/// The `k` nearest point indices to `query`, nearest first.
pub fn knn(index: &SpatialIndex, query: &Point3, k: usize) -> Result<Vec<usize>> {
    if k > index.len() {
        return Err(Error::contract(format!(
            "knn: k = {k} exceeds point count {}",
            index.len()
        )));
    }
    Ok(index.knn(query, k).into_iter().map(|(i, _)| i).collect())
}

/// Up to `max_k` points strictly inside `radius`, nearest first. An empty
/// neighborhood falls back to the single nearest point.
pub fn ball_query(
    index: &SpatialIndex,
    center: &Point3,
    radius: f64,
    max_k: usize,
) -> Result<Vec<usize>> {
    if !(radius > 0.0) {
        return Err(Error::contract(format!("ball_query: radius {radius} must be > 0")));
    }
    if index.is_empty() {
        return Err(Error::contract("ball_query: empty point cloud"));
    }
    let mut hits: Vec<usize> = index
        .within(center, radius * radius)
        .into_iter()
        .map(|(i, _)| i)
        .collect();
    if hits.is_empty() {
        let (i, _) = index.nearest(center).expect("non-empty");
        hits.push(i);
    }
    hits.truncate(max_k.max(1));
    Ok(hits)
}

/// Greedy farthest-point sampling starting from `start`. Each next index
/// maximizes the distance to the already chosen set; ties go to the lowest
/// index.
pub fn fps(cloud: &PointCloud, m: usize, start: usize) -> Result<Vec<usize>> {
    let n = cloud.len();
    if m > n {
        return Err(Error::contract(format!("fps: m = {m} exceeds point count {n}")));
    }
    if m == 0 {
        return Ok(Vec::new());
    }
    if start >= n {
        return Err(Error::Index { value: start, bound: n });
    }
    let pts = &cloud.points;
    let mut mind = vec![f64::INFINITY; n];
    let mut chosen = Vec::with_capacity(m);
    let mut cur = start;
    for _ in 0..m {
        chosen.push(cur);
        let c = pts[cur];
        let mut best = 0usize;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in pts.iter().enumerate() {
            let d = dist2(p, &c);
            if d < mind[i] {
                mind[i] = d;
            }
            if mind[i] > best_d {
                best_d = mind[i];
                best = i;
            }
        }
        cur = best;
    }
    Ok(chosen)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(xs: &[f64]) -> PointCloud {
        PointCloud::new(xs.iter().map(|&x| [x, 0.0, 0.0]).collect())
    }

    #[test]
    fn knn_on_axis() {
        let c = line(&[0.0, 1.0, 2.0, 5.0]);
        let idx = SpatialIndex::build(&c.points);
        assert_eq!(knn(&idx, &[1.9, 0.0, 0.0], 2).unwrap(), vec![2, 1]);
        assert_eq!(knn(&idx, &[5.0, 0.0, 0.0], 1).unwrap(), vec![3]);
        assert!(knn(&idx, &[0.0; 3], 5).is_err());
    }

    #[test]
    fn ball_query_cases() {
        let c = PointCloud::new(vec![[0.0; 3], [0.5, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        let idx = SpatialIndex::build(&c.points);
        assert_eq!(ball_query(&idx, &[0.0; 3], 1.0, 16).unwrap(), vec![0, 1]);
        assert_eq!(ball_query(&idx, &[10.0, 0.0, 0.0], 1.0, 16).unwrap(), vec![2]);
        assert!(ball_query(&idx, &[0.0; 3], 0.0, 16).is_err());
    }

    #[test]
    fn fps_cases() {
        let c = line(&[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(fps(&c, 2, 0).unwrap(), vec![0, 3]);
        let mut all = fps(&c, 4, 0).unwrap();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3]);
        assert!(fps(&c, 5, 0).is_err());
    }
}
