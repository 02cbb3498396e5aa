//! Property tests for the invariants of each module.

use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mscib::eval::{ari, clustering_accuracy, kmeans, nmi, KMeansConfig};
use mscib::losses::{total_loss, LossConfig};
use mscib::model::{ModelSpec, MscibModel, SemanticSource};
use mscib::mvdata::{normalize_views, MultiViewDataset, Normalization};
use mscib::network::tape::softmax_rows;
use mscib::network::{Activation, AdamConfig, AdamState, MlpParams, Update};

fn matrix(rows: std::ops::RangeInclusive<usize>, cols: std::ops::RangeInclusive<usize>, scale: f64)
    -> impl Strategy<Value = Array2<f64>>
{
    (rows, cols).prop_flat_map(move |(r, c)| {
        prop::collection::vec(-scale..scale, r * c)
            .prop_map(move |v| Array2::from_shape_vec((r, c), v).unwrap())
    })
}

fn tiny_model(seed: u64, k: usize) -> MscibModel {
    let mut spec = ModelSpec::new(vec![4, 6], 12, k);
    spec.latent_dim = 3;
    spec.consistent_dim = 3;
    spec.encoder_hidden = vec![5];
    spec.head_hidden = vec![4];
    MscibModel::init(spec, seed).unwrap()
}

fn labels(n: usize, k: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(0..k, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn softmax_rows_are_distributions(x in matrix(1..=6, 1..=6, 50.0)) {
        let s = softmax_rows(&x);
        for row in s.rows() {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.sum() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn mlp_forward_is_deterministic(seed: u64, x in matrix(1..=5, 3..=3, 2.0)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mlp = MlpParams::init(&[3, 7, 2], Activation::Relu, Activation::Identity, &mut rng);
        prop_assert_eq!(mlp.forward(&x).unwrap(), mlp.forward(&x).unwrap());
    }

    #[test]
    fn adam_with_zero_lr_changes_nothing(p in matrix(1..=4, 1..=4, 3.0), seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = p.mapv(|_| rand::Rng::random_range(&mut rng, -1.0..1.0));
        let mut state = AdamState::new(AdamConfig::with_lr(0.0), [p.dim()]);
        let mut q = p.clone();
        for _ in 0..3 {
            state.step(&mut [&mut q], std::slice::from_ref(&g), &[Update::Dense]).unwrap();
        }
        prop_assert_eq!(q, p);
    }

    #[test]
    fn reparameterization_and_sigma_bounds(seed: u64, x in matrix(1..=6, 4..=4, 100.0)) {
        let mut model = tiny_model(seed, 3);
        // large logvar weights push the clamp from both sides
        for t in model.views[0].encoder.logvar_net.tensors_mut() {
            t.mapv_inplace(|w| w * 50.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = model.encode_view(0, &x, Some(&mut rng)).unwrap();
        prop_assert_eq!(&enc.z, &(&enc.mu + &(&enc.sigma * &enc.epsilon)));
        let (lo, hi) = ((-5.0f64).exp(), 5.0f64.exp());
        prop_assert!(enc.sigma.iter().all(|&s| s >= lo && s <= hi));
        let mean = model.encode_view(0, &x, None::<&mut ChaCha8Rng>).unwrap();
        prop_assert_eq!(&mean.z, &mean.mu);
        prop_assert_eq!(&mean.mu, &enc.mu);
    }

    #[test]
    fn semantic_outputs_are_row_stochastic(seed: u64, z in matrix(1..=8, 3..=3, 20.0), k in 2usize..6) {
        let model = tiny_model(seed, k);
        for q in [
            model.semantic_labels(SemanticSource::View(1, &z)).unwrap(),
            model.semantic_labels(SemanticSource::Consistent(&z)).unwrap(),
        ] {
            prop_assert_eq!(q.ncols(), k);
            for row in q.rows() {
                prop_assert!(row.iter().all(|&p| p >= 0.0));
                prop_assert!((row.sum() - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn total_loss_decomposes(
        seed: u64,
        l1 in 0.0f64..3.0,
        l2 in 0.0f64..3.0,
        tau in 0.2f64..2.0,
        rows in prop::sample::subsequence((0..12).collect::<Vec<usize>>(), 2..=12),
    ) {
        let model = tiny_model(seed, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let views: Vec<Array2<f64>> = [4, 6]
            .iter()
            .map(|&d| Array2::from_shape_fn((rows.len(), d), |_| rand::Rng::random_range(&mut rng, 0.0..1.0)))
            .collect();
        let config = LossConfig { lambda1: l1, lambda2: l2, tau, ..LossConfig::default() };
        let b = total_loss(&model, &views, &rows, &config, &mut rng).unwrap();
        prop_assert!((b.total - (b.rec + l1 * b.ib + l2 * b.sem)).abs() <= 1e-12 * (1.0 + b.total.abs()));
    }

    #[test]
    fn min_max_is_idempotent(x in matrix(2..=8, 1..=4, 10.0)) {
        let ds = MultiViewDataset::new(vec![x.clone(), x], None).unwrap();
        let once = normalize_views(&ds, Normalization::MinMax);
        let twice = normalize_views(&once, Normalization::MinMax);
        prop_assert_eq!(once.views(), twice.views());
    }

    #[test]
    fn metrics_ignore_relabeling(
        (truth, pred) in (1usize..30).prop_flat_map(|n| (labels(n, 4), labels(n, 4))),
        perm in Just(vec![0usize, 1, 2, 3]).prop_shuffle(),
    ) {
        let relabeled: Vec<usize> = pred.iter().map(|&p| perm[p]).collect();
        let truth_relabeled: Vec<usize> = truth.iter().map(|&t| perm[t]).collect();
        for (t, p) in [(&truth, &relabeled), (&truth_relabeled, &pred)] {
            prop_assert!((clustering_accuracy(t, p).unwrap() - clustering_accuracy(&truth, &pred).unwrap()).abs() < 1e-12);
            prop_assert!((nmi(t, p).unwrap() - nmi(&truth, &pred).unwrap()).abs() < 1e-12);
            prop_assert!((ari(t, p).unwrap() - ari(&truth, &pred).unwrap()).abs() < 1e-12);
        }
        let a = ari(&truth, &pred).unwrap();
        let n = nmi(&truth, &pred).unwrap();
        prop_assert!((-1.0..=1.0).contains(&a) && (0.0..=1.0).contains(&n));
    }

    #[test]
    fn balanced_predictions_reach_one_over_k(
        k in 1usize..5,
        per in 1usize..6,
        truth_seed: u64,
    ) {
        let n = k * per;
        let pred: Vec<usize> = (0..n).map(|i| i % k).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(truth_seed);
        let truth: Vec<usize> = (0..n).map(|_| rand::Rng::random_range(&mut rng, 0..k)).collect();
        prop_assert!(clustering_accuracy(&truth, &pred).unwrap() >= 1.0 / k as f64 - 1e-12);
    }

    #[test]
    fn kmeans_keeps_the_best_restart(x in matrix(6..=20, 1..=3, 5.0), k in 1usize..4, seed: u64) {
        let r = kmeans(&x, k, &KMeansConfig { restarts: 5, ..KMeansConfig::default() }, seed).unwrap();
        prop_assert_eq!(r.restart_inertias.len(), 5);
        prop_assert!(r.restart_inertias.iter().all(|&i| r.inertia <= i));
        prop_assert!(r.labels.iter().all(|&l| l < k));
    }
}
