use approx::assert_relative_eq;
use dcrl::cluster::{soft_assign, target_distribution};
use dcrl::geometry::{knn_points, pairwise_dist, ranks};
use dcrl::metrics;
use dcrl::Matrix;
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-10.0..10.0f64, rows * cols).prop_map(move |v| Matrix::from_vec(rows, cols, v).unwrap())
}

/// Paired input and embedding with the same number of rows.
fn paired() -> impl Strategy<Value = (Matrix, Matrix)> {
    (8usize..20).prop_flat_map(|n| (matrix(n, 4), matrix(n, 2)))
}

fn labelings() -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
    (4usize..30).prop_flat_map(|n| (prop::collection::vec(0usize..4, n), prop::collection::vec(0usize..4, n)))
}

fn permute_rows(m: &Matrix, perm: &[usize]) -> Matrix {
    m.select_rows(perm)
}

/// A permutation of `0..n` from a seed vector of sort keys.
fn permutation(keys: &[u32]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..keys.len()).collect();
    idx.sort_by_key(|&i| (keys[i], i));
    idx
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn trust_and_cont_lie_in_unit_interval((x, z) in paired()) {
        let n = x.rows();
        let k2 = (2 * n - 2) / 3;
        let t = metrics::trust(&x, &z, 1, k2).unwrap();
        let c = metrics::cont(&x, &z, 1, k2).unwrap();
        prop_assert!((0.0..=1.0).contains(&t), "trust {t}");
        prop_assert!((0.0..=1.0).contains(&c), "cont {c}");
        prop_assert!(metrics::rre(&x, &z, 1, k2).unwrap() >= 0.0);
    }

    #[test]
    fn cont_is_trust_with_spaces_swapped((x, z) in paired()) {
        let k2 = (2 * x.rows() - 2) / 3;
        assert_relative_eq!(metrics::cont(&x, &z, 1, k2).unwrap(), metrics::trust(&z, &x, 1, k2).unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn rank_metrics_ignore_point_order((x, z) in paired(), keys in prop::collection::vec(any::<u32>(), 20)) {
        let perm = permutation(&keys[..x.rows()]);
        let (xp, zp) = (permute_rows(&x, &perm), permute_rows(&z, &perm));
        let k2 = (2 * x.rows() - 2) / 3;
        assert_relative_eq!(metrics::rre(&x, &z, 1, k2).unwrap(), metrics::rre(&xp, &zp, 1, k2).unwrap(), epsilon = 1e-12);
        assert_relative_eq!(metrics::trust(&x, &z, 1, k2).unwrap(), metrics::trust(&xp, &zp, 1, k2).unwrap(), epsilon = 1e-12);
        assert_relative_eq!(metrics::cont(&x, &z, 1, k2).unwrap(), metrics::cont(&xp, &zp, 1, k2).unwrap(), epsilon = 1e-12);
        assert_relative_eq!(metrics::d_rmse(&x, &z).unwrap(), metrics::d_rmse(&xp, &zp).unwrap(), epsilon = 1e-9);
    }

    #[test]
    fn rigid_motion_is_perfect(x in matrix(12, 2), angle in 0.0..std::f64::consts::TAU, shift in -5.0..5.0f64) {
        let (c, s) = (angle.cos(), angle.sin());
        let rows: Vec<[f64; 2]> = (0..x.rows())
            .map(|i| {
                let (a, b) = (x.get(i, 0), x.get(i, 1));
                [c * a - s * b + shift, s * a + c * b - shift]
            })
            .collect();
        let z = Matrix::from_rows(&rows);
        // Rotation perturbs distances in the last bits, which can reorder
        // exact ties; random inputs have none.
        prop_assert_eq!(ranks(&pairwise_dist(&x)), ranks(&pairwise_dist(&z)));
        prop_assert_eq!(metrics::rre(&x, &z, 1, 7).unwrap(), 0.0);
        prop_assert_eq!(metrics::trust(&x, &z, 1, 7).unwrap(), 1.0);
        prop_assert!(metrics::d_rmse(&x, &z).unwrap() < 1e-9);
    }

    #[test]
    fn acc_and_nmi_ignore_label_names((truth, pred) in labelings(), keys in prop::collection::vec(any::<u32>(), 4)) {
        let rename = permutation(&keys);
        let renamed: Vec<usize> = pred.iter().map(|&p| rename[p]).collect();
        assert_relative_eq!(metrics::acc(&truth, &pred).unwrap(), metrics::acc(&truth, &renamed).unwrap(), epsilon = 1e-12);
        assert_relative_eq!(metrics::nmi(&truth, &pred).unwrap(), metrics::nmi(&truth, &renamed).unwrap(), epsilon = 1e-12);
        assert_relative_eq!(metrics::nmi(&truth, &pred).unwrap(), metrics::nmi(&pred, &truth).unwrap(), epsilon = 1e-12);
        let acc = metrics::acc(&truth, &pred).unwrap();
        prop_assert!((0.0..=1.0).contains(&acc));
    }

    #[test]
    fn soft_and_target_rows_are_distributions(z in matrix(15, 3), mu in matrix(4, 3)) {
        let q = soft_assign(&z, &mu).unwrap();
        let p = target_distribution(&q);
        for i in 0..z.rows() {
            assert_relative_eq!(q.row(i).iter().sum::<f64>(), 1.0, epsilon = 1e-12);
            assert_relative_eq!(p.row(i).iter().sum::<f64>(), 1.0, epsilon = 1e-12);
            prop_assert!(q.row(i).iter().chain(p.row(i)).all(|&v| v > 0.0));
        }
    }

    #[test]
    fn knn_agrees_with_ranks(x in matrix(10, 3), k in 1usize..9) {
        let r = ranks(&pairwise_dist(&x));
        let g = knn_points(&x, k).unwrap();
        for i in 0..x.rows() {
            let mut expected: Vec<usize> = (0..x.rows()).filter(|&j| j != i && r.get(i, j) <= k).collect();
            expected.sort_by_key(|&j| r.get(i, j));
            prop_assert_eq!(g.neighbors(i), &expected[..]);
        }
    }
}
