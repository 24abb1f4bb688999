mod common;

use common::*;
use proptest::prelude::*;
use racomp::geometry::{
    ball_query, chamfer_l1, chamfer_l2, f_score, fidelity, fps, knn, mmd, PointCloud, SpatialIndex,
};

#[test]
fn kdtree_matches_brute_force_on_clustered_and_gridded_clouds() {
    let mut r = rng(11);
    for case in 0..60 {
        let n = 33 + case * 7;
        let cloud = if case % 2 == 0 {
            random_cloud(&mut r, n)
        } else {
            gridded_cloud(&mut r, n)
        };
        let tree = SpatialIndex::build(&cloud.points);
        assert!(!tree.is_exhaustive());
        for q in random_cloud(&mut r, 8).points {
            for k in [1, 5, 17] {
                assert_eq!(knn(&tree, &q, k).unwrap(), brute_knn(&cloud.points, &q, k));
            }
            assert_eq!(
                ball_query(&tree, &q, 0.3, 12).unwrap(),
                brute_ball(&cloud.points, &q, 0.3, 12)
            );
        }
    }
}

#[test]
fn knn_rejects_oversized_k() {
    let c = random_cloud(&mut rng(0), 10);
    let tree = SpatialIndex::build(&c.points);
    assert!(knn(&tree, &[0.0; 3], 11).is_err());
    assert_eq!(knn(&tree, &[0.0; 3], 10).unwrap().len(), 10);
}

#[test]
fn ball_query_falls_back_to_nearest_point() {
    let c = PointCloud::new(vec![[5.0, 0.0, 0.0], [3.0, 0.0, 0.0], [4.0, 0.0, 0.0]]);
    let tree = SpatialIndex::build(&c.points);
    assert_eq!(ball_query(&tree, &[0.0; 3], 0.5, 4).unwrap(), vec![1]);
    assert!(ball_query(&tree, &[0.0; 3], 0.0, 4).is_err());
}

#[test]
fn fps_spreads_points_on_a_line() {
    let c = PointCloud::new((0..11).map(|i| [i as f64, 0.0, 0.0]).collect());
    assert_eq!(fps(&c, 3, 0).unwrap(), vec![0, 10, 5]);
    assert!(fps(&c, 12, 0).is_err());
}

#[test]
fn chamfer_hand_values() {
    let a = PointCloud::new(vec![[0.0, 0.0, 0.0]]);
    let b = PointCloud::new(vec![[3.0, 4.0, 0.0], [0.0, 0.0, 1.0]]);
    // a->b: 1; b->a: (25 + 1) / 2
    assert_eq!(chamfer_l2(&a, &b).unwrap(), 14.0);
    assert_eq!(chamfer_l1(&a, &b).unwrap(), 0.5 * (1.0 + 3.0));
    assert!(chamfer_l2(&a, &PointCloud::new(vec![])).is_err());
}

#[test]
fn metric_fixed_points() {
    let mut r = rng(5);
    let p = random_cloud(&mut r, 300);
    let q = random_cloud(&mut r, 50);
    assert_eq!(chamfer_l2(&p, &p).unwrap(), 0.0);
    assert_eq!(chamfer_l1(&p, &p).unwrap(), 0.0);
    assert_eq!(f_score(&p, &p, 1e-3).unwrap(), 1.0);
    assert_eq!(fidelity(&p, &p.concat(&q)).unwrap(), 0.0);
    assert_eq!(mmd(&p, &[q.clone(), p.clone()]).unwrap(), 0.0);
    assert!(mmd(&p, &[]).is_err());
    assert!(f_score(&p, &q, 0.0).is_err());
}

fn cloud_strategy(max: usize) -> impl Strategy<Value = PointCloud> {
    prop::collection::vec(prop::array::uniform3(-2.0f64..2.0), 1..max).prop_map(PointCloud::new)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn chamfer_matches_oracle(a in cloud_strategy(120), b in cloud_strategy(120)) {
        prop_assert!(rel_close(chamfer_l2(&a, &b).unwrap(), brute_chamfer_l2(&a, &b), 1e-9));
        prop_assert!(rel_close(chamfer_l1(&a, &b).unwrap(), brute_chamfer_l1(&a, &b), 1e-9));
    }

    #[test]
    fn chamfer_is_symmetric_and_order_free(a in cloud_strategy(80), b in cloud_strategy(80), shift in 0usize..80) {
        let ab = chamfer_l2(&a, &b).unwrap();
        prop_assert_eq!(ab, chamfer_l2(&b, &a).unwrap());
        let mut rotated = a.points.clone();
        let len = rotated.len();
        rotated.rotate_left(shift % len);
        prop_assert_eq!(ab, chamfer_l2(&PointCloud::new(rotated), &b).unwrap());
    }

    #[test]
    fn f_score_matches_oracle(a in cloud_strategy(80), b in cloud_strategy(80), tau in 0.05f64..1.0) {
        prop_assert_eq!(f_score(&a, &b, tau).unwrap(), brute_f_score(&a, &b, tau));
    }

    #[test]
    fn fps_is_a_set_of_distinct_indices(c in cloud_strategy(100), m in 1usize..30) {
        let m = m.min(c.len());
        let idx = fps(&c, m, 0).unwrap();
        let mut s = idx.clone();
        s.sort_unstable();
        s.dedup();
        prop_assert_eq!(s.len(), m);
        prop_assert_eq!(idx[0], 0);
    }
}
