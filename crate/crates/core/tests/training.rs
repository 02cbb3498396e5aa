use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mscib::error::CheckpointError;
use mscib::losses::{build_total_loss, reconstruction_loss, LossConfig, NoiseDraw};
use mscib::model::{ModelSpec, MscibModel, ParamGroup};
use mscib::mvdata::{generate_synthetic, MultiViewDataset, SyntheticSpec};
use mscib::network::{Checkpoint, Tape};
use mscib::train::{fit, TrainConfig, Trainer};
use mscib::Error;

fn setup(seed: u64) -> (MscibModel, MultiViewDataset) {
    let data = generate_synthetic(&SyntheticSpec {
        n_samples: 30,
        n_clusters: 3,
        latent_dim: 3,
        view_dims: vec![6, 9],
        cluster_separation: 6.0,
        noise_sigmas: vec![0.1, 0.3],
        seed,
        identity_projection: false,
    })
    .unwrap();
    let mut spec = ModelSpec::new(data.dims(), 30, 3);
    spec.latent_dim = 4;
    spec.consistent_dim = 5;
    spec.encoder_hidden = vec![10];
    spec.head_hidden = vec![6];
    (MscibModel::init(spec, seed).unwrap(), data)
}

fn config(pre: usize, train: usize) -> TrainConfig {
    TrainConfig {
        pretrain_epochs: pre,
        train_epochs: train,
        batch_size: 8,
        eval_every: 4,
        convergence_window: 0,
        seed: 11,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_weights_leave_heads_fusion_and_z_without_gradient() {
    let (model, data) = setup(1);
    let loss = LossConfig {
        lambda1: 0.0,
        lambda2: 0.0,
        ..LossConfig::default()
    };
    let idx: Vec<usize> = (0..12).collect();
    let views = data.batch(&idx);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let noise = NoiseDraw::sample(&model, idx.len(), loss.gamma_scale, &mut rng);
    let mut tape = Tape::new();
    let leaves: Vec<_> = model.tensors().into_iter().map(|t| tape.leaf(t.clone())).collect();
    let vars = model.vars_from(&leaves);
    let g = build_total_loss(&mut tape, &model, &vars, &views, &idx, &loss, &noise).unwrap();
    assert_eq!(tape.scalar(g.total), tape.scalar(g.rec));
    let mut grads = tape.backward(g.total);
    let mut autoencoder_signal = 0.0;
    for ((name, group), &leaf) in model.tensor_layout().into_iter().zip(&leaves) {
        let shape = tape.shape(leaf);
        let grad: Array2<f64> = grads.take_or_zeros(leaf, shape);
        if group == ParamGroup::Autoencoder {
            autoencoder_signal += grad.iter().map(|x| x.abs()).sum::<f64>();
        } else {
            assert!(grad.iter().all(|&x| x == 0.0), "{name} received gradient");
        }
    }
    assert!(autoencoder_signal > 0.0);
}

#[test]
fn every_z_row_moves_each_epoch() {
    let (model, data) = setup(2);
    let mut t = Trainer::new(model, config(0, 3)).unwrap();
    for _ in 0..3 {
        let before = t.model.z.clone();
        t.train_epoch(&data).unwrap();
        for (r, (a, b)) in before.rows().into_iter().zip(t.model.z.rows()).enumerate() {
            assert!(a != b, "row {r} of Z was not updated");
        }
    }
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    let (model, data) = setup(3);
    let cfg = config(4, 20);

    let (full_model, full_history) = fit(model.clone(), &data, cfg, &mut std::io::sink()).unwrap();

    let mut first = Trainer::new(model, cfg).unwrap();
    first.run_until(&data, 10, &mut std::io::sink()).unwrap();
    assert_eq!(first.train_epochs_done(), 10);
    first.save_checkpoint(&path).unwrap();
    drop(first);

    let mut resumed = Trainer::load_checkpoint(&path, cfg).unwrap();
    assert_eq!(resumed.pretrain_epochs_done(), 4);
    resumed.run(&data, &mut std::io::sink()).unwrap();
    let (model, history) = resumed.into_parts();
    assert_eq!(model, full_model);
    assert_eq!(history, full_history);
}

#[test]
fn runs_are_deterministic_and_seed_sensitive() {
    let (model, data) = setup(4);
    let mut log_a = Vec::new();
    let mut log_b = Vec::new();
    let a = fit(model.clone(), &data, config(2, 5), &mut log_a).unwrap();
    let b = fit(model.clone(), &data, config(2, 5), &mut log_b).unwrap();
    assert_eq!(a, b);
    assert_eq!(log_a, log_b);
    let c = fit(model, &data, TrainConfig { seed: 12, ..config(2, 5) }, &mut std::io::sink()).unwrap();
    assert_ne!(a.0, c.0);
}

#[test]
fn log_lines_follow_the_history() {
    let (model, data) = setup(5);
    let mut log = Vec::new();
    let (_, history) = fit(model, &data, config(1, 6), &mut log).unwrap();
    let text = String::from_utf8(log).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 6);
    for (line, rec) in lines.iter().zip(&history.epochs) {
        let fields: Vec<&str> = line.split(',').collect();
        let expected = if rec.report.is_some() { 8 } else { 5 };
        assert_eq!(fields.len(), expected, "{line}");
        assert_eq!(fields[0].parse::<usize>().unwrap(), rec.epoch);
        let total: f64 = fields[4].parse().unwrap();
        assert_eq!(total, rec.loss.total);
    }
    // epochs 4 and 6 (the last) are evaluated
    let evaluated: Vec<usize> = history
        .epochs
        .iter()
        .filter(|r| r.report.is_some())
        .map(|r| r.epoch)
        .collect();
    assert_eq!(evaluated, vec![4, 6]);
}

#[test]
fn total_is_weighted_sum_of_terms() {
    let (model, data) = setup(6);
    let cfg = TrainConfig {
        loss: LossConfig {
            lambda1: 0.7,
            lambda2: 1.3,
            ..LossConfig::default()
        },
        ..config(0, 2)
    };
    let (_, history) = fit(model, &data, cfg, &mut std::io::sink()).unwrap();
    for r in &history.epochs {
        let l = &r.loss;
        let expect = l.rec + 0.7 * l.ib + 1.3 * l.sem;
        assert!((l.total - expect).abs() < 1e-9 * (1.0 + expect.abs()), "{l}");
    }
}

#[test]
fn mismatched_dataset_is_a_shape_error() {
    let (model, _) = setup(7);
    let (_, other) = {
        let d = generate_synthetic(&SyntheticSpec {
            n_samples: 30,
            n_clusters: 3,
            latent_dim: 3,
            view_dims: vec![6, 7],
            cluster_separation: 6.0,
            noise_sigmas: vec![0.1, 0.3],
            seed: 0,
            identity_projection: false,
        })
        .unwrap();
        ((), d)
    };
    let mut t = Trainer::new(model, config(1, 1)).unwrap();
    assert!(matches!(t.pretrain_epoch(&other), Err(Error::Shape { .. })));
}

#[test]
fn invalid_configs_are_rejected() {
    let (model, _) = setup(8);
    for bad in [
        TrainConfig { batch_size: 0, ..config(1, 1) },
        TrainConfig { lr: f64::NAN, ..config(1, 1) },
        TrainConfig {
            loss: LossConfig { tau: 0.0, ..LossConfig::default() },
            ..config(1, 1)
        },
    ] {
        assert!(matches!(
            Trainer::new(model.clone(), bad),
            Err(Error::InvalidArgument(_))
        ));
    }
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    let (model, _) = setup(9);
    Trainer::new(model, config(1, 1)).unwrap().save_checkpoint(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    let mut wrong = bytes.clone();
    wrong[0] ^= 0xff;
    assert!(matches!(
        Checkpoint::from_bytes(&wrong),
        Err(CheckpointError::BadMagic)
    ));
    assert!(matches!(
        Checkpoint::from_bytes(&bytes[..bytes.len() / 2]),
        Err(CheckpointError::Truncated { .. })
    ));
    std::fs::write(&path, &wrong).unwrap();
    assert!(matches!(
        Trainer::load_checkpoint(&path, config(1, 1)),
        Err(Error::Checkpoint(CheckpointError::BadMagic))
    ));
}

#[test]
fn full_batch_linear_pretraining_does_not_increase_reconstruction() {
    let (_, data) = setup(10);
    let mut spec = ModelSpec::new(data.dims(), 30, 3);
    spec.latent_dim = 4;
    spec.consistent_dim = 4;
    spec.encoder_hidden = vec![];
    spec.head_hidden = vec![];
    let model = MscibModel::init(spec, 10).unwrap();
    let cfg = TrainConfig {
        batch_size: 30,
        pretrain_lr: 1e-4,
        ..config(40, 0)
    };
    // reconstruction through the posterior mean, free of sampling noise
    let mean_rec = |m: &MscibModel| -> f64 {
        let mus = m.view_embeddings(data.views()).unwrap();
        let recons: Vec<Array2<f64>> = mus
            .iter()
            .enumerate()
            .map(|(v, mu)| m.decode_view(v, mu).unwrap())
            .collect();
        reconstruction_loss(data.views(), &recons).unwrap()
    };
    let mut t = Trainer::new(model, cfg).unwrap();
    let mut prev = mean_rec(&t.model);
    for epoch in 1..=40 {
        t.pretrain_epoch(&data).unwrap();
        let now = mean_rec(&t.model);
        assert!(now <= prev, "epoch {epoch}: {prev} -> {now}");
        prev = now;
    }
}
