//! Acceptance suite. Each test prints one `criterion N ...: PASS|FAIL` line
//! (written straight to stdout so it survives output capture) and then
//! asserts the outcome.

use std::io::Write;
use std::path::Path;
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

use ndarray::{Array2, Axis};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mscib::cli::{cmd_train, load_inputs, read_metrics, DataSource, ExperimentConfig, TrainOutput};
use mscib::eval::{ari, clustering_accuracy, evaluate_representation, nmi};
use mscib::losses::{
    build_total_loss, consistent_contrastive, consistent_contrastive_on, entropy_regularizer,
    entropy_regularizer_on, gaussian_kl, pair_contrastive, pair_contrastive_on, LossConfig, NoiseDraw,
};
use mscib::model::{ModelSpec, MscibModel};
use mscib::network::tape::softmax_rows;
use mscib::network::{check_gradients, GradCheckOptions, Tape, Var};

const SYNTHETIC_CONF: &str = include_str!("../../../configs/synthetic.conf");

/// The long end-to-end runs share one core; run them one at a time so
/// their wall-clock budgets are measured alone.
static HEAVY: Mutex<()> = Mutex::new(());

fn verdict(n: u32, name: &str, pass: bool, detail: &str) {
    let line = format!(
        "criterion {n} [{name}]: {} ({detail})\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    assert!(pass, "criterion {n} failed: {detail}");
}

fn heavy_lock() -> std::sync::MutexGuard<'static, ()> {
    HEAVY.lock().unwrap_or_else(|e| e.into_inner())
}

// ---------------------------------------------------------------- criterion 1

fn tiny_model(seed: u64) -> (MscibModel, Vec<Array2<f64>>, Vec<usize>) {
    let mut spec = ModelSpec::new(vec![5, 7], 10, 3);
    spec.latent_dim = 4;
    spec.consistent_dim = 4;
    spec.encoder_hidden = vec![6];
    spec.head_hidden = vec![5];
    let mut model = MscibModel::init(spec, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    // move Z away from its tiny initialization so every term is well scaled
    model.z.mapv_inplace(|_| rng.random_range(-1.0..1.0));
    let views = [5, 7]
        .iter()
        .map(|&d| Array2::from_shape_fn((6, d), |_| rng.random_range(0.0..1.0)))
        .collect();
    (model, views, vec![7, 2, 9, 0, 4, 5])
}

#[derive(Clone, Copy, Debug)]
enum Term {
    Reconstruction,
    FusedPrediction,
    Compression,
    PairContrast,
    ConsistentContrast,
    EntropyRegularizer,
    Total,
}

const TERMS: [Term; 7] = [
    Term::Reconstruction,
    Term::FusedPrediction,
    Term::Compression,
    Term::PairContrast,
    Term::ConsistentContrast,
    Term::EntropyRegularizer,
    Term::Total,
];

#[test]
fn criterion_1_gradient_correctness() {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    let (mut checked, mut excluded) = (0, 0);
    let config = LossConfig::default();
    for seed in 0..3u64 {
        let (model, views, idx) = tiny_model(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 7);
        let noise = NoiseDraw::sample(&model, idx.len(), config.gamma_scale, &mut rng);
        let params: Vec<Array2<f64>> = model.tensors().into_iter().cloned().collect();
        let names = model.tensor_names();
        for term in TERMS {
            let objective = |tape: &mut Tape, leaves: &[Var]| {
                let vars = model.vars_from(leaves);
                let g = build_total_loss(tape, &model, &vars, &views, &idx, &config, &noise)?;
                Ok(match term {
                    Term::Reconstruction => g.rec,
                    Term::FusedPrediction => g.fused,
                    Term::Compression => g.kl,
                    Term::PairContrast => pair_contrastive_on(tape, g.q_views[0], g.q_views[1], config.tau)?,
                    Term::ConsistentContrast => {
                        consistent_contrastive_on(tape, g.q_views[1], g.q_consistent, config.tau)?
                    }
                    Term::EntropyRegularizer => entropy_regularizer_on(tape, &g.q_views)?,
                    Term::Total => g.total,
                })
            };
            let options = GradCheckOptions {
                seed,
                ..GradCheckOptions::default()
            };
            let report = check_gradients(objective, &names, &params, options).unwrap();
            worst = worst.max(report.max_rel_error());
            checked += report.checked();
            excluded += report.excluded();
            if !report.passed() {
                failures.push(format!("{term:?} (model seed {seed})"));
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = failures.is_empty() && worst <= 1e-4 && elapsed < Duration::from_secs(30);
    verdict(
        1,
        "gradient correctness",
        pass,
        &format!(
            "max rel err {worst:.2e} over {checked} coordinates, {excluded} kink-excluded, \
             failing terms {failures:?}, {:.1}s",
            elapsed.as_secs_f64()
        ),
    );
}

// ---------------------------------------------------------------- criterion 2

fn matrix_pair() -> impl Strategy<Value = (Array2<f64>, Array2<f64>)> {
    (2..=8usize, 2..=5usize).prop_flat_map(|(b, k)| {
        let one = move || {
            prop::collection::vec(-4.0f64..4.0, b * k)
                .prop_map(move |v| softmax_rows(&Array2::from_shape_vec((b, k), v).unwrap()))
        };
        (one(), one())
    })
}

fn run_property<S, F>(strategy: S, test: F) -> Result<(), String>
where
    S: Strategy,
    F: Fn(S::Value) -> Result<(), TestCaseError>,
{
    let mut runner = TestRunner::new_with_rng(
        Config {
            cases: 1000,
            failure_persistence: None,
            ..Config::default()
        },
        proptest::test_runner::TestRng::deterministic_rng(proptest::test_runner::RngAlgorithm::ChaCha),
    );
    runner.run(&strategy, test).map_err(|e| e.to_string())
}

#[test]
fn criterion_2_loss_invariants() {
    let start = Instant::now();
    let mut outcomes: Vec<(&str, Result<(), String>)> = Vec::new();

    outcomes.push((
        "pair contrast >= 0",
        run_property((matrix_pair(), 0.1f64..2.0), |((a, b), tau)| {
            let v = pair_contrastive(&a, &b, tau).unwrap();
            prop_assert!(v >= -1e-12, "pair contrast {v}");
            Ok(())
        }),
    ));

    outcomes.push((
        "column-scale invariance",
        run_property(
            (matrix_pair(), prop::collection::vec(0.01f64..100.0, 5), 0.1f64..2.0),
            |((a, b), scales, tau)| {
                let mut a2 = a.clone();
                for (j, mut col) in a2.columns_mut().into_iter().enumerate() {
                    col *= scales[j];
                }
                for (before, after) in [
                    (pair_contrastive(&a, &b, tau).unwrap(), pair_contrastive(&a2, &b, tau).unwrap()),
                    (pair_contrastive(&b, &a, tau).unwrap(), pair_contrastive(&b, &a2, tau).unwrap()),
                    (
                        consistent_contrastive(&a, &b, tau).unwrap(),
                        consistent_contrastive(&a2, &b, tau).unwrap(),
                    ),
                    (
                        consistent_contrastive(&b, &a, tau).unwrap(),
                        consistent_contrastive(&b, &a2, tau).unwrap(),
                    ),
                ] {
                    // the consistent term is undefined (NaN) when its denominator is not
                    // positive; invariance then means undefined at both points
                    let same = if before.is_finite() || after.is_finite() {
                        (before - after).abs() <= 1e-9 * (1.0 + before.abs())
                    } else {
                        before.is_nan() == after.is_nan()
                    };
                    prop_assert!(same, "{before} vs {after}");
                }
                Ok(())
            },
        ),
    ));

    outcomes.push((
        "entropy regularizer in [-M log K, 0]",
        run_property(
            (2..=8usize, 2..=5usize, 1..=4usize).prop_flat_map(|(b, k, m)| {
                prop::collection::vec(semantic_matrix_fixed(b, k), m)
            }),
            |qs| {
                let m = qs.len() as f64;
                let k = qs[0].ncols() as f64;
                let v = entropy_regularizer(&qs).unwrap();
                prop_assert!(v <= 1e-12 && v >= -m * k.ln() - 1e-12, "{v}");
                Ok(())
            },
        ),
    ));

    outcomes.push((
        "entropy regularizer endpoints",
        run_property((2..=8usize, 2..=5usize, 1..=4usize, 0..5usize), |(b, k, m, hot)| {
            let uniform = vec![Array2::from_elem((b, k), 1.0 / k as f64); m];
            let low = entropy_regularizer(&uniform).unwrap();
            prop_assert!((low + m as f64 * (k as f64).ln()).abs() < 1e-12);
            let mut one_hot = Array2::zeros((b, k));
            one_hot.column_mut(hot % k).fill(1.0);
            let high = entropy_regularizer(&vec![one_hot; m]).unwrap();
            prop_assert!(high == 0.0);
            Ok(())
        }),
    ));

    outcomes.push((
        "Gaussian KL >= 0, zero at (0, 1)",
        run_property(
            (1..=6usize, 1..=6usize).prop_flat_map(|(b, d)| {
                (
                    prop::collection::vec(-5.0f64..5.0, b * d),
                    prop::collection::vec(1e-3f64..5.0, b * d),
                )
                    .prop_map(move |(mu, s)| {
                        (
                            Array2::from_shape_vec((b, d), mu).unwrap(),
                            Array2::from_shape_vec((b, d), s).unwrap(),
                        )
                    })
            }),
            |(mu, sigma)| {
                let v = gaussian_kl(&mu, &sigma).unwrap();
                prop_assert!(v >= -1e-12, "{v}");
                let zero = gaussian_kl(&Array2::zeros(mu.dim()), &Array2::ones(mu.dim())).unwrap();
                prop_assert!(zero == 0.0);
                Ok(())
            },
        ),
    ));

    let elapsed = start.elapsed();
    let failed: Vec<String> = outcomes
        .iter()
        .filter_map(|(n, r)| r.as_ref().err().map(|e| format!("{n}: {e}")))
        .collect();
    let pass = failed.is_empty() && elapsed < Duration::from_secs(10);
    verdict(
        2,
        "loss-term invariants",
        pass,
        &format!(
            "{} properties x 1000 cases, failures {failed:?}, {:.1}s",
            outcomes.len(),
            elapsed.as_secs_f64()
        ),
    );
}

fn semantic_matrix_fixed(b: usize, k: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-6.0f64..6.0, b * k)
        .prop_map(move |v| softmax_rows(&Array2::from_shape_vec((b, k), v).unwrap()))
}

// ---------------------------------------------------------------- criterion 3

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

/// Best agreement over all relabelings of the predicted alphabet {0,1,2}.
fn acc_oracle(truth: &[usize], pred: &[usize], perms: &[Vec<usize>]) -> f64 {
    let best = perms
        .iter()
        .map(|p| truth.iter().zip(pred).filter(|(t, q)| p[**q] == **t).count())
        .max()
        .unwrap();
    best as f64 / truth.len() as f64
}

/// Mutual information and entropies from the 3x3 joint distribution.
fn nmi_oracle(truth: &[usize], pred: &[usize]) -> f64 {
    let n = truth.len() as f64;
    let mut joint = [[0.0f64; 3]; 3];
    for (&t, &p) in truth.iter().zip(pred) {
        joint[t][p] += 1.0 / n;
    }
    let pu: Vec<f64> = (0..3).map(|i| joint[i].iter().sum()).collect();
    let pv: Vec<f64> = (0..3).map(|j| (0..3).map(|i| joint[i][j]).sum()).collect();
    let h = |p: &[f64]| -> f64 { p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum() };
    let (hu, hv) = (h(&pu), h(&pv));
    if hu == 0.0 && hv == 0.0 {
        return 1.0;
    }
    let mut mi = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            if joint[i][j] > 0.0 {
                mi += joint[i][j] * (joint[i][j] / (pu[i] * pv[j])).ln();
            }
        }
    }
    (mi / ((hu + hv) / 2.0)).clamp(0.0, 1.0)
}

/// Adjusted Rand index from the 2x2 pair-agreement table.
fn ari_oracle(truth: &[usize], pred: &[usize]) -> f64 {
    let (mut tp, mut fp, mut fn_, mut tn) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..truth.len() {
        for j in i + 1..truth.len() {
            match (truth[i] == truth[j], pred[i] == pred[j]) {
                (true, true) => tp += 1.0,
                (false, true) => fp += 1.0,
                (true, false) => fn_ += 1.0,
                (false, false) => tn += 1.0,
            }
        }
    }
    let denom: f64 = (tp + fn_) * (fn_ + tn) + (tp + fp) * (fp + tn);
    if denom == 0.0 {
        return 1.0;
    }
    2.0 * (tp * tn - fn_ * fp) / denom
}

fn labelings(n: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..3usize.pow(n as u32)).map(move |mut code| {
        (0..n)
            .map(|_| {
                let d = code % 3;
                code /= 3;
                d
            })
            .collect()
    })
}

#[test]
fn criterion_3_metric_oracles() {
    let start = Instant::now();
    let perms = permutations(3);
    let mut worst = 0.0f64;
    let mut count = 0usize;
    let mut compare = |t: &[usize], p: &[usize]| {
        let errs = [
            (clustering_accuracy(t, p).unwrap() - acc_oracle(t, p, &perms)).abs(),
            (nmi(t, p).unwrap() - nmi_oracle(t, p)).abs(),
            (ari(t, p).unwrap() - ari_oracle(t, p)).abs(),
        ];
        worst = errs.iter().fold(worst, |w, &e| w.max(e));
        count += 1;
    };
    // every pair of labelings over {0,1,2} for N <= 5
    for n in 1..=5 {
        let all: Vec<Vec<usize>> = labelings(n).collect();
        for t in &all {
            for p in &all {
                compare(t, p);
            }
        }
    }
    // sampled pairs for 6 <= N <= 12, with 1 to 3 labels on each side
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for n in 6..=12 {
        for _ in 0..20_000 {
            let (kt, kp) = (rng.random_range(1..=3), rng.random_range(1..=3));
            let t: Vec<usize> = (0..n).map(|_| rng.random_range(0..kt)).collect();
            let p: Vec<usize> = (0..n).map(|_| rng.random_range(0..kp)).collect();
            compare(&t, &p);
        }
    }
    let elapsed = start.elapsed();
    let pass = worst <= 1e-12 && elapsed < Duration::from_secs(10);
    verdict(
        3,
        "metric oracle equivalence",
        pass,
        &format!(
            "{count} instances, max abs err {worst:.1e}, {:.1}s",
            elapsed.as_secs_f64()
        ),
    );
}

// ------------------------------------------------------- criteria 4, 6 and 8

struct Run {
    output: TrainOutput,
    elapsed: Duration,
    metrics_bytes: Vec<u8>,
    _dir: tempfile::TempDir,
}

fn synthetic_config() -> ExperimentConfig {
    ExperimentConfig::parse(SYNTHETIC_CONF, "synthetic.conf", Path::new(".")).unwrap()
}

fn train_run(cfg: &ExperimentConfig) -> Run {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let output = cmd_train(cfg, dir.path(), None, &mut std::io::sink()).unwrap();
    let elapsed = start.elapsed();
    let metrics_bytes = std::fs::read(output.metrics.as_ref().unwrap()).unwrap();
    Run {
        output,
        elapsed,
        metrics_bytes,
        _dir: dir,
    }
}

fn reference_run() -> &'static Run {
    static RUN: OnceLock<Run> = OnceLock::new();
    RUN.get_or_init(|| {
        let _guard = heavy_lock();
        train_run(&synthetic_config())
    })
}

fn metric(metrics: &serde_json::Map<String, serde_json::Value>, key: &str, field: &str) -> f64 {
    metrics[key][field].as_f64().unwrap()
}

#[test]
fn criterion_4_synthetic_recovery() {
    let run = reference_run();
    let m = read_metrics(run.output.metrics.as_ref().unwrap()).unwrap();
    let acc_z = metric(&m, "Z", "acc");
    let best_raw = ["X^(1)", "X^(2)"]
        .iter()
        .map(|k| metric(&m, k, "acc"))
        .fold(0.0, f64::max);
    let pass = acc_z >= 0.95 && acc_z >= best_raw && run.elapsed < Duration::from_secs(180);
    verdict(
        4,
        "end-to-end synthetic recovery",
        pass,
        &format!(
            "ACC(Z) {acc_z:.4}, NMI(Z) {:.4}, ARI(Z) {:.4}, max ACC(X^(m)) {best_raw:.4}, {:.1}s",
            metric(&m, "Z", "nmi"),
            metric(&m, "Z", "ari"),
            run.elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_6_convergence_shape() {
    let run = reference_run();
    let epochs = &run.output.history.epochs;
    let ratio = if epochs.len() >= 50 {
        epochs[49].loss.total / epochs[0].loss.total
    } else {
        f64::NAN
    };
    let accs: Vec<(usize, f64)> = epochs
        .iter()
        .filter(|e| e.epoch >= 5)
        .filter_map(|e| e.report.as_ref().map(|r| (e.epoch, r.acc)))
        .collect();
    let monotone = accs.windows(2).all(|w| w[1].1 >= w[0].1 - 0.02);
    let first = accs.first().copied();
    let last = accs.last().copied();
    let pass = ratio < 0.5 && first.is_some_and(|(e, _)| e == 5) && accs.len() >= 2 && monotone;
    verdict(
        6,
        "convergence shape",
        pass,
        &format!(
            "loss(50)/loss(1) = {ratio:.3}, ACC(Z) at epoch 5 {first:?} -> final {last:?}, \
             {} checkpoints, non-decreasing within 0.02: {monotone}",
            accs.len()
        ),
    );
}

#[test]
fn criterion_8_determinism() {
    let first = reference_run();
    let second = {
        let _guard = heavy_lock();
        train_run(&synthetic_config())
    };
    let same = first.metrics_bytes == second.metrics_bytes;
    let same_ck = std::fs::read(&first.output.checkpoint).unwrap()
        == std::fs::read(&second.output.checkpoint).unwrap();
    verdict(
        8,
        "determinism",
        same,
        &format!(
            "metrics files byte-identical: {same} ({} bytes), checkpoints identical: {same_ck}",
            first.metrics_bytes.len()
        ),
    );
}

// ---------------------------------------------------------------- criterion 5

#[test]
fn criterion_5_noisy_view_robustness() {
    let _guard = heavy_lock();
    let start = Instant::now();
    let mut rows = Vec::new();
    for seed in 0..3u64 {
        let mut cfg = synthetic_config();
        cfg.override_seed(seed);
        cfg.train.eval_every = 0;
        match cfg.data.as_mut() {
            Some(DataSource::Synthetic(spec)) => spec.noise_sigmas = vec![0.1, 3.0],
            other => panic!("synthetic.conf must describe a synthetic dataset, got {other:?}"),
        }
        let data = load_inputs(&cfg).unwrap();
        let labels = data.labels().unwrap();
        let concat = evaluate_representation(&data.concatenated(), labels, 3, &cfg.train.eval).unwrap();
        let run = train_run(&cfg);
        let m = read_metrics(run.output.metrics.as_ref().unwrap()).unwrap();
        rows.push((metric(&m, "Z", "acc"), concat.acc));
    }
    let elapsed = start.elapsed();
    let mean_z = rows.iter().map(|r| r.0).sum::<f64>() / 3.0;
    let mean_cat = rows.iter().map(|r| r.1).sum::<f64>() / 3.0;
    let pass = mean_z >= mean_cat + 0.05 && elapsed < Duration::from_secs(600);
    verdict(
        5,
        "noisy-view robustness",
        pass,
        &format!(
            "mean ACC(Z) {mean_z:.4} vs concatenated inputs {mean_cat:.4} (margin {:+.4}); \
             per seed (Z, concat) {rows:.4?}; {:.1}s",
            mean_z - mean_cat,
            elapsed.as_secs_f64()
        ),
    );
}

// ---------------------------------------------------------------- criterion 7

/// Optional: set `MSCIB_MNIST_USPS_CONFIG` to a config whose manifest
/// points at pre-extracted MNIST-USPS features. Informational only.
#[test]
fn criterion_7_paper_scale_optional() {
    let line = match std::env::var_os("MSCIB_MNIST_USPS_CONFIG") {
        None => "criterion 7 [paper-scale MNIST-USPS, optional]: SKIP \
                 (set MSCIB_MNIST_USPS_CONFIG to run; not required)\n"
            .to_string(),
        Some(path) => {
            let _guard = heavy_lock();
            let outcome = ExperimentConfig::load(Path::new(&path))
                .map_err(|e| e.to_string())
                .and_then(|cfg| {
                    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
                    let out = cmd_train(&cfg, dir.path(), None, &mut std::io::sink())
                        .map_err(|e| e.to_string())?;
                    let m = read_metrics(out.metrics.as_ref().ok_or("dataset has no labels")?)
                        .map_err(|e| e.to_string())?;
                    Ok(metric(&m, "Z", "acc"))
                });
            match outcome {
                Ok(acc) => format!(
                    "criterion 7 [paper-scale MNIST-USPS, optional]: {} (ACC(Z) {acc:.4}, target 0.95; informational)\n",
                    if acc >= 0.95 { "PASS" } else { "FAIL" }
                ),
                Err(e) => format!(
                    "criterion 7 [paper-scale MNIST-USPS, optional]: FAIL (could not run: {e}; informational)\n"
                ),
            }
        }
    };
    let _ = std::io::stdout().lock().write_all(line.as_bytes());
}

#[test]
fn synthetic_config_is_the_documented_dataset() {
    let cfg = synthetic_config();
    let data = load_inputs(&cfg).unwrap();
    assert_eq!(data.n_samples(), 300);
    assert_eq!(data.n_views(), 2);
    assert_eq!(data.n_classes(), Some(3));
    let counts = data
        .labels()
        .unwrap()
        .iter()
        .fold([0usize; 3], |mut c, &l| {
            c[l] += 1;
            c
        });
    assert_eq!(counts, [100, 100, 100]);
    assert!(data.view(0).mean_axis(Axis(0)).is_some());
}
