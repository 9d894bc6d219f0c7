use fedka::federation::{aggregation_weights, fedavg_aggregate, vote_from_predictions, ClientUpdate};
use fedka::losses::{kernel_bank_from, lambda_at, mk_mmd_sq, KernelBank};
use fedka::nn::{Mode, Model, ModelArch};
use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

fn arch() -> ModelArch {
    ModelArch { input_dim: 3, encoder_hidden: 4, feature_dim: 3, classifier_hidden: 4, classes: 3 }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mmd_is_symmetric_and_non_negative(a in matrix(5, 3), b in matrix(4, 3)) {
        let bank = kernel_bank_from(a.view(), b.view()).unwrap();
        let (ab, _) = mk_mmd_sq(a.view(), b.view(), &bank).unwrap();
        let (ba, _) = mk_mmd_sq(b.view(), a.view(), &bank).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-12);
        let (aa, g) = mk_mmd_sq(a.view(), a.view(), &bank).unwrap();
        prop_assert!(aa <= 1e-12);
        prop_assert!(g.iter().all(|v| v.abs() <= 1e-12));
    }

    #[test]
    fn bank_doubles(a in matrix(4, 2), b in matrix(3, 2)) {
        let bank = kernel_bank_from(a.view(), b.view()).unwrap();
        let s = bank.bandwidths();
        prop_assert!(s.iter().all(|&x| x > 0.0));
        prop_assert!(s.windows(2).all(|w| w[1] == 2.0 * w[0]));
        prop_assert_eq!(s[2], bank.center());
    }

    #[test]
    fn lambda_stays_in_unit_interval(p in 0.0f64..=1.0, q in 0.0f64..=1.0) {
        let (lo, hi) = if p <= q { (p, q) } else { (q, p) };
        let (a, b) = (lambda_at(lo, 5.0), lambda_at(hi, 5.0));
        prop_assert!((0.0..1.0).contains(&a));
        prop_assert!(a <= b);
    }

    #[test]
    fn weights_sum_to_one(samples in prop::collection::vec(1usize..5000, 1..8)) {
        let g = Model::init(&arch(), 0, 0).unwrap();
        let updates: Vec<ClientUpdate> = samples
            .iter()
            .enumerate()
            .map(|(k, &n)| ClientUpdate { client: k, delta: g.zeros_like_model(), samples: n })
            .collect();
        let w = aggregation_weights(&updates).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn aggregation_ignores_update_order(seeds in prop::collection::vec(0u64..1000, 2..6), rot in 0usize..6) {
        let g = Model::init(&arch(), 1, 2).unwrap();
        let mut updates: Vec<ClientUpdate> = seeds
            .iter()
            .enumerate()
            .map(|(k, &s)| ClientUpdate {
                client: k,
                delta: Model::init(&arch(), s, s + 1).unwrap().delta(&g).unwrap(),
                samples: 100 + 37 * k,
            })
            .collect();
        let a = fedavg_aggregate(&g, &updates).unwrap();
        let n = updates.len();
        updates.rotate_left(rot % n);
        updates.reverse();
        prop_assert_eq!(fedavg_aggregate(&g, &updates).unwrap(), a);
    }

    #[test]
    fn zero_deltas_are_a_fixed_point(counts in prop::collection::vec(1usize..1000, 1..6)) {
        let g = Model::init(&arch(), 3, 4).unwrap();
        let updates: Vec<ClientUpdate> = counts
            .iter()
            .enumerate()
            .map(|(k, &n)| ClientUpdate { client: k, delta: g.zeros_like_model(), samples: n })
            .collect();
        prop_assert_eq!(fedavg_aggregate(&g, &updates).unwrap(), g);
    }

    #[test]
    fn unanimous_votes_win(labels in prop::collection::vec(0usize..4, 1..30), k in 1usize..6, seed in 0u64..100) {
        let preds = vec![labels.clone(); k];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = vote_from_predictions(&preds, 4, &mut rng).unwrap();
        prop_assert_eq!(out.labels, labels);
        prop_assert_eq!(out.ties, 0);
    }

    #[test]
    fn log_softmax_rows_normalize(x in matrix(6, 3), seed in 0u64..50) {
        let m = Model::init(&arch(), seed, seed + 7).unwrap();
        for mode in [Mode::Train, Mode::Eval] {
            let lp = m.log_probs(x.view(), mode).unwrap();
            for row in lp.rows() {
                prop_assert!((row.iter().map(|v| v.exp()).sum::<f64>() - 1.0).abs() <= 1e-6);
            }
        }
    }
}

#[test]
fn fixed_bank_is_used_as_given() {
    let a = Array2::from_shape_vec((2, 1), vec![0.0, 1.0]).unwrap();
    let b = Array2::from_shape_vec((1, 1), vec![3.0]).unwrap();
    let bank = KernelBank::centered(1.0);
    let (v1, _) = mk_mmd_sq(a.view(), b.view(), &bank).unwrap();
    let (v2, _) = mk_mmd_sq(a.view(), b.view(), &KernelBank::centered(2.0)).unwrap();
    assert!(v1 != v2);
}
