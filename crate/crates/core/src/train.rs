//! Two-phase optimization: reconstruction pretraining of the autoencoders,
//! then joint training of every network and `Z`.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CheckpointError, Error, Result};
use crate::eval::{evaluate_representation, ClusterReport, EvalConfig};
use crate::losses::{build_reconstruction, build_total_loss, LossBreakdown, LossConfig, NoiseDraw};
use crate::model::{MscibModel, ParamGroup};
use crate::mvdata::{minibatch_indices, MultiViewDataset};
use crate::network::{AdamConfig, AdamState, Checkpoint, RngState, Tape, Update, Var};

/// Batch-order streams of the main phase start here so they never
/// coincide with pretraining epochs.
const TRAIN_STREAM_OFFSET: u64 = 1 << 32;
const NOISE_SALT: u64 = 0x6e6f_6973_655f_7267;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub pretrain_epochs: usize,
    pub train_epochs: usize,
    /// Clamped to `N`; `batch_size >= N` is full-batch training.
    pub batch_size: usize,
    pub pretrain_lr: f64,
    pub lr: f64,
    pub seed: u64,
    pub loss: LossConfig,
    /// Evaluate `Z` every this many main epochs (and after the last); 0 disables.
    pub eval_every: usize,
    pub eval: EvalConfig,
    /// Number of consecutive epochs whose relative change must stay below
    /// `convergence_threshold` to stop early; 0 disables the check.
    pub convergence_window: usize,
    pub convergence_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            pretrain_epochs: 200,
            train_epochs: 300,
            batch_size: 64,
            pretrain_lr: 3e-4,
            lr: 1e-3,
            seed: 0,
            loss: LossConfig::default(),
            eval_every: 0,
            eval: EvalConfig::default(),
            convergence_window: 10,
            convergence_threshold: 1e-5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
        }
        for (name, lr) in [("pretrain_lr", self.pretrain_lr), ("lr", self.lr)] {
            if !(lr.is_finite() && lr >= 0.0) {
                return Err(Error::InvalidArgument(format!("{name} must be finite and >= 0")));
            }
        }
        if !(self.convergence_threshold.is_finite() && self.convergence_threshold >= 0.0) {
            return Err(Error::InvalidArgument("convergence threshold must be >= 0".into()));
        }
        self.loss.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based epoch of the main phase.
    pub epoch: usize,
    /// Sample-weighted mean over the epoch's batches.
    pub loss: LossBreakdown,
    pub report: Option<ClusterReport>,
}

impl EpochRecord {
    /// `epoch,rec,ib,sem,total[,acc,nmi,ari]`
    pub fn log_line(&self) -> String {
        let l = &self.loss;
        let mut s = format!("{},{},{},{},{}", self.epoch, l.rec, l.ib, l.sem, l.total);
        if let Some(r) = &self.report {
            s.push_str(&format!(",{},{},{}", r.acc, r.nmi, r.ari));
        }
        s
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    /// Epoch-mean reconstruction loss of each pretraining epoch.
    pub pretrain: Vec<f64>,
    pub epochs: Vec<EpochRecord>,
}

/// Resumable state of a run: model, both optimizers, noise stream and
/// progress counters.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: MscibModel,
    pretrain_adam: AdamState,
    adam: AdamState,
    rng: ChaCha8Rng,
    pretrain_done: usize,
    train_done: usize,
    converged: bool,
    history: TrainHistory,
}

fn autoencoder_mask(model: &MscibModel) -> Vec<bool> {
    model
        .tensor_layout()
        .into_iter()
        .map(|(_, g)| g == ParamGroup::Autoencoder)
        .collect()
}

impl Trainer {
    pub fn new(model: MscibModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mask = autoencoder_mask(&model);
        let shapes: Vec<(usize, usize)> = model.tensors().iter().map(|t| t.dim()).collect();
        let pretrain_shapes = shapes
            .iter()
            .zip(&mask)
            .filter(|(_, &ae)| ae)
            .map(|(s, _)| *s);
        Ok(Self {
            pretrain_adam: AdamState::new(AdamConfig::with_lr(config.pretrain_lr), pretrain_shapes),
            adam: AdamState::new(AdamConfig::with_lr(config.lr), shapes.iter().copied()),
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ NOISE_SALT),
            config,
            model,
            pretrain_done: 0,
            train_done: 0,
            converged: false,
            history: TrainHistory::default(),
        })
    }

    pub fn history(&self) -> &TrainHistory {
        &self.history
    }

    pub fn pretrain_epochs_done(&self) -> usize {
        self.pretrain_done
    }

    pub fn train_epochs_done(&self) -> usize {
        self.train_done
    }

    pub fn converged(&self) -> bool {
        self.converged
    }

    pub fn is_finished(&self) -> bool {
        self.pretrain_done >= self.config.pretrain_epochs
            && (self.converged || self.train_done >= self.config.train_epochs)
    }

    pub fn into_parts(self) -> (MscibModel, TrainHistory) {
        (self.model, self.history)
    }

    fn batches(&self, n: usize, stream: u64) -> Result<Vec<Vec<usize>>> {
        minibatch_indices(n, self.config.batch_size.min(n), self.config.seed, stream)
    }

    fn check_dataset(&self, data: &MultiViewDataset) -> Result<()> {
        self.model.check_views(data.views())?;
        if data.n_samples() != self.model.z.nrows() {
            return Err(Error::shape("samples in dataset", self.model.z.nrows(), data.n_samples()));
        }
        Ok(())
    }

    /// Tape leaves for every model tensor, in layout order.
    fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.model
            .tensors()
            .into_iter()
            .map(|t| tape.leaf(t.clone()))
            .collect()
    }

    /// One pretraining epoch; returns its mean reconstruction loss.
    pub fn pretrain_epoch(&mut self, data: &MultiViewDataset) -> Result<f64> {
        self.check_dataset(data)?;
        let n = data.n_samples();
        let epoch = self.pretrain_done + 1;
        let mask = autoencoder_mask(&self.model);
        let mut mean = 0.0;
        for idx in self.batches(n, self.pretrain_done as u64)? {
            let views = data.batch(&idx);
            let d = self.model.spec().latent_dim;
            let eps: Vec<Array2<f64>> = (0..views.len())
                .map(|_| crate::model::standard_normal((idx.len(), d), &mut self.rng))
                .collect();
            let mut tape = Tape::new();
            let leaves = self.bind(&mut tape);
            let vars = self.model.vars_from(&leaves);
            let rec = build_reconstruction(&mut tape, &self.model, &vars, &views, &eps)?;
            let value = tape.scalar(rec);
            if !value.is_finite() {
                return Err(Error::Diverged {
                    phase: "pretraining",
                    epoch,
                    term: "rec".into(),
                    breakdown: LossBreakdown {
                        rec: value,
                        total: value,
                        ..Default::default()
                    },
                });
            }
            mean += value * idx.len() as f64 / n as f64;
            let mut grads = tape.backward(rec);
            let g: Vec<Array2<f64>> = leaves
                .iter()
                .zip(&mask)
                .filter(|(_, &ae)| ae)
                .map(|(&v, _)| {
                    let shape = tape.shape(v);
                    grads.take_or_zeros(v, shape)
                })
                .collect();
            let mut params: Vec<&mut Array2<f64>> = self
                .model
                .tensors_mut()
                .into_iter()
                .zip(&mask)
                .filter(|(_, &ae)| ae)
                .map(|(t, _)| t)
                .collect();
            let updates = vec![Update::Dense; params.len()];
            self.pretrain_adam.step(&mut params, &g, &updates)?;
        }
        self.pretrain_done += 1;
        self.history.pretrain.push(mean);
        Ok(mean)
    }

    /// One main-phase epoch over shuffled minibatches.
    pub fn train_epoch(&mut self, data: &MultiViewDataset) -> Result<&EpochRecord> {
        self.check_dataset(data)?;
        let n = data.n_samples();
        let epoch = self.train_done + 1;
        let z_index = self.model.tensors().len() - 1;
        let mut mean = LossBreakdown::default();
        for idx in self.batches(n, TRAIN_STREAM_OFFSET + self.train_done as u64)? {
            let views = data.batch(&idx);
            let noise = NoiseDraw::sample(&self.model, idx.len(), self.config.loss.gamma_scale, &mut self.rng);
            let mut tape = Tape::new();
            let leaves = self.bind(&mut tape);
            let vars = self.model.vars_from(&leaves);
            let graph = build_total_loss(
                &mut tape,
                &self.model,
                &vars,
                &views,
                &idx,
                &self.config.loss,
                &noise,
            )?;
            let b = graph.breakdown(&tape);
            if let Some(term) = b.first_non_finite() {
                return Err(Error::Diverged {
                    phase: "training",
                    epoch,
                    term: term.into(),
                    breakdown: b,
                });
            }
            mean.accumulate(&b, idx.len() as f64 / n as f64);
            let mut grads = tape.backward(graph.total);
            let g: Vec<Array2<f64>> = leaves
                .iter()
                .map(|&v| {
                    let shape = tape.shape(v);
                    grads.take_or_zeros(v, shape)
                })
                .collect();
            let mut updates = vec![Update::Dense; g.len()];
            updates[z_index] = Update::Rows(&idx);
            let mut params = self.model.tensors_mut();
            self.adam.step(&mut params, &g, &updates)?;
        }
        self.train_done += 1;
        let converged = self.window_converged_with(mean.total);

        let report = match data.labels() {
            Some(labels) if self.should_eval(epoch) || (converged && self.config.eval_every > 0) => {
                let mut r = evaluate_representation(
                    &self.model.z,
                    labels,
                    self.model.n_clusters(),
                    &self.config.eval,
                )?;
                // the history keeps metrics only
                r.labels = Vec::new();
                Some(r)
            }
            _ => None,
        };
        self.history.epochs.push(EpochRecord {
            epoch,
            loss: mean,
            report,
        });
        self.converged = converged;
        Ok(self.history.epochs.last().expect("just pushed"))
    }

    fn should_eval(&self, epoch: usize) -> bool {
        let every = self.config.eval_every;
        every > 0 && (epoch % every == 0 || epoch == self.config.train_epochs)
    }

    /// Whether the last `window` relative changes, ending with `latest`, all
    /// fall below the threshold.
    fn window_converged_with(&self, latest: f64) -> bool {
        let w = self.config.convergence_window;
        let e = &self.history.epochs;
        if w == 0 || e.len() < w {
            return false;
        }
        let totals: Vec<f64> = e[e.len() - w..]
            .iter()
            .map(|r| r.loss.total)
            .chain(std::iter::once(latest))
            .collect();
        totals.windows(2).all(|p| {
            let (a, b) = (p[0], p[1]);
            (b - a).abs() / a.abs().max(f64::MIN_POSITIVE) < self.config.convergence_threshold
        })
    }

    /// Runs whatever remains of both phases, writing one progress line per
    /// main epoch to `log`.
    pub fn run(&mut self, data: &MultiViewDataset, log: &mut dyn Write) -> Result<()> {
        while self.pretrain_done < self.config.pretrain_epochs {
            self.pretrain_epoch(data)?;
        }
        while !self.converged && self.train_done < self.config.train_epochs {
            let line = self.train_epoch(data)?.log_line();
            writeln!(log, "{line}")?;
        }
        Ok(())
    }

    /// Like [`run`](Self::run) but stops after `epochs` main epochs in total.
    pub fn run_until(&mut self, data: &MultiViewDataset, epochs: usize, log: &mut dyn Write) -> Result<()> {
        while self.pretrain_done < self.config.pretrain_epochs {
            self.pretrain_epoch(data)?;
        }
        while !self.converged && self.train_done < self.config.train_epochs.min(epochs) {
            let line = self.train_epoch(data)?.log_line();
            writeln!(log, "{line}")?;
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = self.model.to_checkpoint();
        ck.meta.extend([
            ("train.pretrain_done".to_string(), self.pretrain_done.to_string()),
            ("train.train_done".to_string(), self.train_done.to_string()),
            ("train.converged".to_string(), self.converged.to_string()),
            ("adam.step".to_string(), self.adam.step.to_string()),
            ("pretrain_adam.step".to_string(), self.pretrain_adam.step.to_string()),
        ]);
        let names = self.model.tensor_names();
        let mask = autoencoder_mask(&self.model);
        for (i, name) in names.iter().enumerate() {
            ck.tensors.push((format!("adam.m.{name}"), self.adam.first[i].clone()));
            ck.tensors.push((format!("adam.v.{name}"), self.adam.second[i].clone()));
        }
        let ae_names = names.iter().zip(&mask).filter(|(_, &ae)| ae).map(|(n, _)| n);
        for (i, name) in ae_names.enumerate() {
            ck.tensors.push((format!("pretrain_adam.m.{name}"), self.pretrain_adam.first[i].clone()));
            ck.tensors.push((format!("pretrain_adam.v.{name}"), self.pretrain_adam.second[i].clone()));
        }
        ck.tensors.push(("history.pretrain".into(), column(&self.history.pretrain)));
        ck.tensors.push(("history.loss".into(), history_losses(&self.history)));
        ck.tensors.push(("history.eval".into(), history_reports(&self.history)));
        ck.rng = Some(RngState::capture(&self.rng));
        ck
    }

    /// Restores a run saved by [`to_checkpoint`](Self::to_checkpoint).
    /// Per-epoch cluster labels are not stored and come back empty.
    pub fn from_checkpoint(ck: &Checkpoint, config: TrainConfig) -> Result<Self> {
        let model = MscibModel::from_checkpoint(ck)?;
        let mut t = Self::new(model, config)?;
        t.pretrain_done = parse_meta(ck, "train.pretrain_done")?;
        t.train_done = parse_meta(ck, "train.train_done")?;
        t.converged = parse_meta(ck, "train.converged")?;
        t.adam.step = parse_meta(ck, "adam.step")?;
        t.pretrain_adam.step = parse_meta(ck, "pretrain_adam.step")?;
        let names = t.model.tensor_names();
        let mask = autoencoder_mask(&t.model);
        for (i, name) in names.iter().enumerate() {
            t.adam.first[i] = tensor(ck, &format!("adam.m.{name}"), t.adam.first[i].dim())?;
            t.adam.second[i] = tensor(ck, &format!("adam.v.{name}"), t.adam.second[i].dim())?;
        }
        let ae_names = names.iter().zip(&mask).filter(|(_, &ae)| ae).map(|(n, _)| n);
        for (i, name) in ae_names.enumerate() {
            let shape = t.pretrain_adam.first[i].dim();
            t.pretrain_adam.first[i] = tensor(ck, &format!("pretrain_adam.m.{name}"), shape)?;
            t.pretrain_adam.second[i] = tensor(ck, &format!("pretrain_adam.v.{name}"), shape)?;
        }
        t.history = restore_history(ck)?;
        if t.history.pretrain.len() != t.pretrain_done || t.history.epochs.len() != t.train_done {
            return Err(CheckpointError::Tensor {
                name: "history".into(),
                message: "history length disagrees with epoch counters".into(),
            }
            .into());
        }
        t.rng = ck
            .rng
            .ok_or_else(|| CheckpointError::Tensor {
                name: "rng".into(),
                message: "missing noise generator state".into(),
            })?
            .restore();
        Ok(t)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load_checkpoint(path: &Path, config: TrainConfig) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, config)
    }
}

fn parse_meta<T: std::str::FromStr>(ck: &Checkpoint, key: &str) -> Result<T> {
    ck.require_meta(key)?.parse().map_err(|_| {
        CheckpointError::Tensor {
            name: key.into(),
            message: "unparsable metadata value".into(),
        }
        .into()
    })
}

fn tensor(ck: &Checkpoint, name: &str, shape: (usize, usize)) -> Result<Array2<f64>> {
    let t = ck.tensor(name).ok_or_else(|| CheckpointError::Tensor {
        name: name.into(),
        message: "missing".into(),
    })?;
    if t.dim() != shape {
        return Err(CheckpointError::Tensor {
            name: name.into(),
            message: format!("shape {:?}, expected {:?}", t.dim(), shape),
        }
        .into());
    }
    Ok(t.clone())
}

fn column(values: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((values.len(), 1), values.to_vec()).expect("column shape")
}

fn history_losses(h: &TrainHistory) -> Array2<f64> {
    let mut out = Array2::zeros((h.epochs.len(), 5));
    for (i, e) in h.epochs.iter().enumerate() {
        let l = &e.loss;
        out.row_mut(i)
            .assign(&ndarray::arr1(&[l.rec, l.ib, l.sem, l.reg, l.total]));
    }
    out
}

/// Rows `[has_report, acc, nmi, ari, inertia, runs]`.
fn history_reports(h: &TrainHistory) -> Array2<f64> {
    let mut out = Array2::zeros((h.epochs.len(), 6));
    for (i, e) in h.epochs.iter().enumerate() {
        if let Some(r) = &e.report {
            out.row_mut(i)
                .assign(&ndarray::arr1(&[1.0, r.acc, r.nmi, r.ari, r.inertia, r.runs as f64]));
        }
    }
    out
}

fn restore_history(ck: &Checkpoint) -> Result<TrainHistory> {
    let get = |name: &str| {
        ck.tensor(name).ok_or_else(|| CheckpointError::Tensor {
            name: name.into(),
            message: "missing".into(),
        })
    };
    let pre = get("history.pretrain")?;
    let loss = get("history.loss")?;
    let eval = get("history.eval")?;
    if loss.ncols() != 5 || eval.ncols() != 6 || eval.nrows() != loss.nrows() || pre.ncols() != 1 {
        return Err(CheckpointError::Tensor {
            name: "history".into(),
            message: "unexpected history layout".into(),
        }
        .into());
    }
    let epochs = loss
        .outer_iter()
        .zip(eval.outer_iter())
        .enumerate()
        .map(|(i, (l, r))| EpochRecord {
            epoch: i + 1,
            loss: LossBreakdown {
                rec: l[0],
                ib: l[1],
                sem: l[2],
                reg: l[3],
                total: l[4],
            },
            report: (r[0] == 1.0).then(|| ClusterReport {
                labels: Vec::new(),
                acc: r[1],
                nmi: r[2],
                ari: r[3],
                inertia: r[4],
                runs: r[5] as usize,
            }),
        })
        .collect();
    Ok(TrainHistory {
        pretrain: pre.column(0).to_vec(),
        epochs,
    })
}

/// Pretraining followed by the main phase, from a fresh model.
pub fn fit(
    model: MscibModel,
    data: &MultiViewDataset,
    config: TrainConfig,
    log: &mut dyn Write,
) -> Result<(MscibModel, TrainHistory)> {
    let mut t = Trainer::new(model, config)?;
    t.run(data, log)?;
    Ok(t.into_parts())
}

/// Reconstruction-only phase.
pub fn pretrain(model: MscibModel, data: &MultiViewDataset, config: TrainConfig) -> Result<MscibModel> {
    let cfg = TrainConfig {
        train_epochs: 0,
        ..config
    };
    let mut t = Trainer::new(model, cfg)?;
    t.run(data, &mut std::io::sink())?;
    Ok(t.model)
}

/// Main phase only, on an already pretrained (or deliberately cold) model.
pub fn train(
    model: MscibModel,
    data: &MultiViewDataset,
    config: TrainConfig,
    log: &mut dyn Write,
) -> Result<(MscibModel, TrainHistory)> {
    let cfg = TrainConfig {
        pretrain_epochs: 0,
        ..config
    };
    fit(model, data, cfg, log)
}
