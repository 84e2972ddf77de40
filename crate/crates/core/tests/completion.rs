use mnn::complete::{impute_all_path, impute_als, AlsOptions, ClusteredMatrix, PathOptions};
use ndarray::Array2;
use proptest::prelude::*;

/// Rank-one matrix with entries in [0.5, 5] plus a reveal mask whose bipartite graph is connected: a
/// random spanning tree is forced in, the remaining cells are revealed at random.
fn connected_rank_one() -> impl Strategy<Value = (Array2<f64>, Array2<bool>)> {
    (1usize..=12, 1usize..=12).prop_flat_map(|(r, c)| {
        let nodes: Vec<(bool, usize)> = (1..r).map(|i| (true, i)).chain((1..c).map(|j| (false, j))).collect();
        (
            prop::collection::vec(0.5f64.sqrt()..5.0f64.sqrt(), r),
            prop::collection::vec(0.5f64.sqrt()..5.0f64.sqrt(), c),
            prop::collection::vec(any::<bool>(), r * c),
            Just(nodes).prop_shuffle(),
            prop::collection::vec(any::<u32>(), r + c),
        )
            .prop_map(move |(a, b, coin, nodes, picks)| {
                let truth = Array2::from_shape_fn((r, c), |(i, j)| a[i] * b[j]);
                let mut mask = Array2::from_shape_fn((r, c), |(i, j)| coin[i * c + j]);
                // Nodes join in shuffled order, each attached to one already in the tree.
                mask[[0, 0]] = true;
                let (mut rows, mut cols) = (vec![0], vec![0]);
                for ((is_row, k), pick) in nodes.into_iter().zip(picks) {
                    let pick = pick as usize;
                    if is_row {
                        mask[[k, cols[pick % cols.len()]]] = true;
                        rows.push(k);
                    } else {
                        mask[[rows[pick % rows.len()], k]] = true;
                        cols.push(k);
                    }
                }
                (truth, mask)
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]
    #[test]
    fn path_products_recover_rank_one((truth, mask) in connected_rank_one()) {
        let h = ClusteredMatrix::from_parts(truth.clone(), mask).unwrap();
        let imputed = impute_all_path(&h, PathOptions::default()).unwrap();
        let worst = (&imputed - &truth).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        prop_assert!(worst < 1e-9, "{}", worst);
    }
}

#[test]
fn als_and_path_agree_on_a_larger_rank_one_matrix() {
    let (r, c) = (9, 11);
    let truth = Array2::from_shape_fn((r, c), |(i, j)| (1.0 + 0.3 * i as f64) * (0.7 + 0.2 * j as f64));
    let mask = Array2::from_shape_fn((r, c), |(i, j)| (i * 7 + j * 3) % 4 != 0);
    let h = ClusteredMatrix::from_parts(truth.clone(), mask).unwrap();
    let path = impute_all_path(&h, PathOptions::default()).unwrap();
    let als = impute_als(
        &h,
        AlsOptions {
            rank: 1,
            lambda: 1e-8,
            max_iters: 2000,
            tol: 1e-14,
            seed: 3,
        },
    )
    .unwrap();
    for ((p, a), t) in path.iter().zip(als.imputed.iter()).zip(truth.iter()) {
        assert!((p - t).abs() < 1e-9);
        assert!((a - t).abs() < 1e-3, "{a} vs {t}");
    }
}
