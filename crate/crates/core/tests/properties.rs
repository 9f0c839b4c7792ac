use ccl::eval::knn_recall;
use ccl::losses::multiclass_nce;
use ccl::matrix::{cosine_similarity_matrix, row_softmax};
use ccl::Matrix;
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix<f64>> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |v| Matrix::from_vec(rows, cols, v).unwrap())
}

fn shape() -> impl Strategy<Value = (usize, usize)> {
    (2usize..7, 2usize..6)
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(m in shape().prop_flat_map(|(r, c)| matrix(r, c)), tau in 0.05f64..2.0) {
        let p = row_softmax(&m, tau).unwrap();
        for row in p.row_iter() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn softmax_ignores_row_shifts(m in shape().prop_flat_map(|(r, c)| matrix(r, c)), shift in -50.0f64..50.0) {
        let a = row_softmax(&m, 0.5).unwrap();
        let b = row_softmax(&m.map(|v| v + shift), 0.5).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_is_symmetric_and_bounded((a, b) in shape().prop_flat_map(|(r, c)| (matrix(r, c), matrix(r + 1, c)))) {
        let ab = cosine_similarity_matrix(&a, &b).unwrap();
        let ba = cosine_similarity_matrix(&b, &a).unwrap();
        prop_assert_eq!(ab.clone(), ba.transpose());
        prop_assert!(ab.data().iter().all(|v| v.abs() <= 1.0 + 1e-12));
    }

    #[test]
    fn nce_is_invariant_to_joint_row_permutation(
        (a, c, labels, perm) in (2usize..7, 2usize..5).prop_flat_map(|(b, d)| (
            matrix(b, d),
            matrix(b, d),
            prop::collection::vec(0usize..3, b),
            Just((0..b).collect::<Vec<_>>()).prop_shuffle(),
        )),
        tau in 0.1f64..1.0,
    ) {
        let before = multiclass_nce(&a, &c, &labels, tau).unwrap();
        let pl: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        let after = multiclass_nce(&a.select_rows(&perm), &c.select_rows(&perm), &pl, tau).unwrap();
        prop_assert!((before - after).abs() < 1e-12);
    }

    #[test]
    fn retrieval_ignores_feature_scale(
        (q, t, ql, tl) in (1usize..8, 1usize..12, 2usize..5).prop_flat_map(|(nq, nt, d)| (
            matrix(nq, d),
            matrix(nt, d),
            prop::collection::vec(0usize..3, nq),
            prop::collection::vec(0usize..3, nt),
        )),
        scale in prop::sample::select(vec![0.25f64, 2.0, 8.0]),
    ) {
        let ks = [1, 3, 5];
        let base = knn_recall(&q, &ql, &t, &tl, &ks).unwrap();
        let scaled = knn_recall(&q.scale(scale), &ql, &t.scale(scale), &tl, &ks).unwrap();
        prop_assert_eq!(&base.recall_at, &scaled.recall_at);
        let r: Vec<f64> = base.recall_at.values().copied().collect();
        prop_assert!(r.windows(2).all(|w| w[0] <= w[1]));
    }
}
