//! Loss terms of the objective and their composition.
//!
//! Every term is built on a [`Tape`] so that one graph yields both the
//! value and its gradients; the plain-matrix functions are thin wrappers
//! over the same builders.
//!
//! The contrastive terms work on *columns* of the semantic matrices: for a
//! batch of `B` samples and `K` clusters, `q_{·j}` is the length-`B` vector
//! of memberships in cluster `j`.

use std::fmt;

use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{standard_normal, MscibModel, ModelVars};
use crate::network::{Tape, Var};

/// Norm floor for cosine similarity.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of the information-bottleneck term.
    pub lambda1: f64,
    /// Weight of the semantic-consistency term.
    pub lambda2: f64,
    /// Weight of the KL compression term inside the bottleneck.
    pub beta: f64,
    /// Contrastive temperature.
    pub tau: f64,
    /// Scale of the Gaussian noise added before the fusion network.
    pub gamma_scale: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            beta: 1e-3,
            tau: 1.0,
            gamma_scale: 0.1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.lambda1, self.lambda2, self.beta, self.tau, self.gamma_scale]
            .iter()
            .all(|x| x.is_finite() && *x >= 0.0)
            && self.tau > 0.0;
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "loss weights must be finite and non-negative with tau > 0: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Values of each term for one step. `sem` already contains `reg`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub rec: f64,
    pub ib: f64,
    pub sem: f64,
    pub reg: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Name of the first non-finite term, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("rec", self.rec),
            ("ib", self.ib),
            ("sem", self.sem),
            ("reg", self.reg),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }

    /// Sample-weighted accumulation, used for epoch means.
    pub fn accumulate(&mut self, other: &LossBreakdown, weight: f64) {
        self.rec += weight * other.rec;
        self.ib += weight * other.ib;
        self.sem += weight * other.sem;
        self.reg += weight * other.reg;
        self.total += weight * other.total;
    }
}

impl fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "rec={} ib={} sem={} reg={} total={}",
            self.rec, self.ib, self.sem, self.reg, self.total
        )
    }
}

fn sum_all(tape: &mut Tape, terms: &[Var]) -> Var {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t);
    }
    acc
}

/// `Σ_m (1/B) Σ_i ‖x_i − x̂_i‖²`
pub fn reconstruction_on(tape: &mut Tape, xs: &[Var], recons: &[Var]) -> Result<Var> {
    if xs.is_empty() || xs.len() != recons.len() {
        return Err(Error::shape("reconstruction views", xs.len(), recons.len()));
    }
    let mut terms = Vec::with_capacity(xs.len());
    for (m, (&x, &r)) in xs.iter().zip(recons).enumerate() {
        let (xs_, rs_) = (tape.shape(x), tape.shape(r));
        if xs_ != rs_ {
            return Err(Error::shape(
                format!("reconstruction of view {}", m + 1),
                xs_.0 * xs_.1,
                rs_.0 * rs_.1,
            ));
        }
        let rows = batch_rows(xs_.0)?;
        let diff = tape.sub(x, r);
        let sq = tape.square(diff);
        let s = tape.sum(sq);
        terms.push(tape.scale(s, 1.0 / rows));
    }
    Ok(sum_all(tape, &terms))
}

/// Batch mean of `KL(N(μ, σ²I) ‖ N(0, I)) = ½ Σ_j (μ_j² + σ_j² − 1 − 2 ln σ_j)`.
pub fn gaussian_kl_on(tape: &mut Tape, mu: Var, sigma: Var) -> Result<Var> {
    let (b, d) = tape.shape(mu);
    if tape.shape(sigma) != (b, d) {
        return Err(Error::shape("kl sigma", b * d, tape.value(sigma).len()));
    }
    let rows = batch_rows(b)?;
    let mu2 = tape.square(mu);
    let s2 = tape.square(sigma);
    let log_s = tape.log(sigma);
    let neg_2log = tape.scale(log_s, -2.0);
    let a = tape.add(mu2, s2);
    let inner = tape.add(a, neg_2log);
    let total = tape.sum(inner);
    let shifted = tape.add_scalar(total, -((b * d) as f64));
    Ok(tape.scale(shifted, 0.5 / rows))
}

/// `(1/B) Σ_m Σ_i ½‖Z_i − ẑ_i^(m)‖²`
pub fn fused_error_on(tape: &mut Tape, z_rows: Var, predictions: &[Var]) -> Result<Var> {
    let shape = tape.shape(z_rows);
    let rows = batch_rows(shape.0)?;
    let mut terms = Vec::with_capacity(predictions.len());
    for &p in predictions {
        if tape.shape(p) != shape {
            return Err(Error::shape("fused prediction width", shape.1, tape.shape(p).1));
        }
        let diff = tape.sub(z_rows, p);
        let sq = tape.square(diff);
        let s = tape.sum(sq);
        terms.push(tape.scale(s, 0.5 / rows));
    }
    Ok(sum_all(tape, &terms))
}

/// `K×K` matrix of cosine similarities between the columns of `a` and `b`.
pub fn column_cosine_on(tape: &mut Tape, a: Var, b: Var) -> Var {
    let an = tape.col_normalize(a, NORM_FLOOR);
    let bn = if a == b {
        an
    } else {
        tape.col_normalize(b, NORM_FLOOR)
    };
    tape.matmul_tn(an, bn)
}

fn check_semantic_pair(tape: &Tape, a: Var, b: Var) -> Result<usize> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if sa != sb {
        return Err(Error::shape("semantic matrix shape", sa.0 * sa.1, sb.0 * sb.1));
    }
    if sa.1 < 2 {
        return Err(Error::InvalidArgument(format!(
            "contrastive loss needs at least 2 clusters, got {}",
            sa.1
        )));
    }
    Ok(sa.1)
}

/// `(1/K) Σ_j [ln(den_j) − num_j]` from a `K×1` numerator-logit column and
/// a `K×1` denominator column.
fn contrastive_mean(tape: &mut Tape, num_logits: Var, den: Var, k: usize) -> Var {
    let log_den = tape.log(den);
    let diff = tape.sub(log_den, num_logits);
    let s = tape.sum(diff);
    tape.scale(s, 1.0 / k as f64)
}

/// Cluster-level contrast between two views:
/// `−(1/K) Σ_j ln[ e^{d(q^m_j, q^n_j)/τ} / (Σ_k Σ_{v∈{m,n}} e^{d(q^m_j, q^v_k)/τ} − e^{1/τ}) ]`.
pub fn pair_contrastive_on(tape: &mut Tape, qm: Var, qn: Var, tau: f64) -> Result<Var> {
    let k = check_semantic_pair(tape, qm, qn)?;
    let s_mm = column_cosine_on(tape, qm, qm);
    let s_mn = column_cosine_on(tape, qm, qn);
    let inv_tau = 1.0 / tau;
    let pos = tape.diag(s_mn);
    let num_logits = tape.scale(pos, inv_tau);
    let l_mm = tape.scale(s_mm, inv_tau);
    let e_mm = tape.exp(l_mm);
    let l_mn = tape.scale(s_mn, inv_tau);
    let e_mn = tape.exp(l_mn);
    let r_mm = tape.row_sum(e_mm);
    let r_mn = tape.row_sum(e_mn);
    let both = tape.add(r_mm, r_mn);
    let den = tape.add_scalar(both, -inv_tau.exp());
    Ok(contrastive_mean(tape, num_logits, den, k))
}

/// Contrast of a view against the consistent semantics:
/// `−(1/K) Σ_j ln[ e^{d(q^m_j, q^c_j)/τ} / (Σ_k e^{d(q^c_j, q^m_k)/τ} − e^{1/τ}) ]`.
///
/// The denominator omits the view-to-view block, so the value can be
/// negative and, for `K = 2` with nearly orthogonal columns, the
/// denominator can reach zero.
pub fn consistent_contrastive_on(tape: &mut Tape, qm: Var, qc: Var, tau: f64) -> Result<Var> {
    let k = check_semantic_pair(tape, qm, qc)?;
    let s_cm = column_cosine_on(tape, qc, qm);
    let inv_tau = 1.0 / tau;
    let pos = tape.diag(s_cm);
    let num_logits = tape.scale(pos, inv_tau);
    let l = tape.scale(s_cm, inv_tau);
    let e = tape.exp(l);
    let r = tape.row_sum(e);
    let den = tape.add_scalar(r, -inv_tau.exp());
    Ok(contrastive_mean(tape, num_logits, den, k))
}

/// `Σ_m Σ_j p̄_j ln p̄_j` with `p̄_j` the batch mean of column `j` of view `m`.
pub fn entropy_regularizer_on(tape: &mut Tape, qs: &[Var]) -> Result<Var> {
    if qs.is_empty() {
        return Err(Error::InvalidArgument("entropy regularizer needs a view".into()));
    }
    let mut terms = Vec::with_capacity(qs.len());
    for &q in qs {
        batch_rows(tape.shape(q).0)?;
        let p = tape.col_mean(q);
        let e = tape.xlogx(p);
        terms.push(tape.sum(e));
    }
    Ok(sum_all(tape, &terms))
}

/// Returns `(sem, reg)` where
/// `sem = ½ Σ_m (Σ_{n≠m} pair(Q_m, Q_n) + consistent(Q_m, Q_c)) + reg`.
pub fn semantic_loss_on(tape: &mut Tape, qs: &[Var], qc: Var, tau: f64) -> Result<(Var, Var)> {
    let mut terms = Vec::new();
    for (m, &qm) in qs.iter().enumerate() {
        for (n, &qn) in qs.iter().enumerate() {
            if n != m {
                terms.push(pair_contrastive_on(tape, qm, qn, tau)?);
            }
        }
        terms.push(consistent_contrastive_on(tape, qm, qc, tau)?);
    }
    let contrast = sum_all(tape, &terms);
    let half = tape.scale(contrast, 0.5);
    let reg = entropy_regularizer_on(tape, qs)?;
    Ok((tape.add(half, reg), reg))
}

fn batch_rows(rows: usize) -> Result<f64> {
    if rows == 0 {
        return Err(Error::InvalidArgument("loss over an empty batch".into()));
    }
    Ok(rows as f64)
}

fn eval_scalar(build: impl FnOnce(&mut Tape) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let out = build(&mut tape)?;
    Ok(tape.scalar(out))
}

pub fn reconstruction_loss(xs: &[Array2<f64>], recons: &[Array2<f64>]) -> Result<f64> {
    eval_scalar(|t| {
        let x: Vec<Var> = xs.iter().map(|a| t.constant(a.clone())).collect();
        let r: Vec<Var> = recons.iter().map(|a| t.constant(a.clone())).collect();
        reconstruction_on(t, &x, &r)
    })
}

pub fn gaussian_kl(mu: &Array2<f64>, sigma: &Array2<f64>) -> Result<f64> {
    if !sigma.iter().all(|&s| s > 0.0) {
        return Err(Error::InvalidArgument("sigma must be positive".into()));
    }
    eval_scalar(|t| {
        let m = t.constant(mu.clone());
        let s = t.constant(sigma.clone());
        gaussian_kl_on(t, m, s)
    })
}

/// `a·b / (‖a‖‖b‖)` with both norms floored at [`NORM_FLOOR`].
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_FLOOR);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_FLOOR);
    debug_assert!(
        na > NORM_FLOOR && nb > NORM_FLOOR,
        "cosine similarity of a zero vector"
    );
    dot / (na * nb)
}

pub fn pair_contrastive(qm: &Array2<f64>, qn: &Array2<f64>, tau: f64) -> Result<f64> {
    eval_scalar(|t| {
        let a = t.constant(qm.clone());
        let b = t.constant(qn.clone());
        pair_contrastive_on(t, a, b, tau)
    })
}

pub fn consistent_contrastive(qm: &Array2<f64>, qc: &Array2<f64>, tau: f64) -> Result<f64> {
    eval_scalar(|t| {
        let a = t.constant(qm.clone());
        let c = t.constant(qc.clone());
        consistent_contrastive_on(t, a, c, tau)
    })
}

pub fn entropy_regularizer(qs: &[Array2<f64>]) -> Result<f64> {
    eval_scalar(|t| {
        let v: Vec<Var> = qs.iter().map(|q| t.constant(q.clone())).collect();
        entropy_regularizer_on(t, &v)
    })
}

pub fn semantic_loss(qs: &[Array2<f64>], qc: &Array2<f64>, tau: f64) -> Result<f64> {
    eval_scalar(|t| {
        let v: Vec<Var> = qs.iter().map(|q| t.constant(q.clone())).collect();
        let c = t.constant(qc.clone());
        semantic_loss_on(t, &v, c, tau).map(|(sem, _)| sem)
    })
}

/// Monte-Carlo draws for one step: `ε` per view and pre-scaled `γ` per view.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraw {
    pub epsilon: Vec<Array2<f64>>,
    pub gamma: Option<Vec<Array2<f64>>>,
}

impl NoiseDraw {
    pub fn sample<R: Rng + ?Sized>(
        model: &MscibModel,
        batch: usize,
        gamma_scale: f64,
        rng: &mut R,
    ) -> Self {
        let d = model.spec().latent_dim;
        let epsilon = (0..model.n_views())
            .map(|_| standard_normal((batch, d), rng))
            .collect();
        let gamma = (gamma_scale > 0.0).then(|| {
            (0..model.n_views())
                .map(|_| standard_normal((batch, d), rng) * gamma_scale)
                .collect()
        });
        Self { epsilon, gamma }
    }

    /// All-zero draw: posterior means and the noiseless fusion.
    pub fn zeros(model: &MscibModel, batch: usize) -> Self {
        let d = model.spec().latent_dim;
        Self {
            epsilon: vec![Array2::zeros((batch, d)); model.n_views()],
            gamma: None,
        }
    }
}

/// Tape nodes of one objective evaluation.
#[derive(Clone, Debug)]
pub struct LossGraph {
    pub rec: Var,
    pub fused: Var,
    pub kl: Var,
    pub ib: Var,
    pub sem: Var,
    pub reg: Var,
    pub total: Var,
    /// Semantic matrices of the views and of `Z`.
    pub q_views: Vec<Var>,
    pub q_consistent: Var,
}

impl LossGraph {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        LossBreakdown {
            rec: tape.scalar(self.rec),
            ib: tape.scalar(self.ib),
            sem: tape.scalar(self.sem),
            reg: tape.scalar(self.reg),
            total: tape.scalar(self.total),
        }
    }
}

fn check_batch(model: &MscibModel, views: &[Array2<f64>], indices: &[usize]) -> Result<()> {
    model.check_views(views)?;
    let n = model.z.nrows();
    if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
        return Err(Error::InvalidArgument(format!(
            "sample index {bad} out of range for Z with {n} rows"
        )));
    }
    for v in views {
        if v.nrows() != indices.len() {
            return Err(Error::shape("batch rows", indices.len(), v.nrows()));
        }
    }
    Ok(())
}

/// Reconstruction objective alone (pretraining).
pub fn build_reconstruction(
    tape: &mut Tape,
    model: &MscibModel,
    vars: &ModelVars,
    views: &[Array2<f64>],
    epsilon: &[Array2<f64>],
) -> Result<Var> {
    model.check_views(views)?;
    let mut xs = Vec::with_capacity(views.len());
    let mut recons = Vec::with_capacity(views.len());
    for (m, x) in views.iter().enumerate() {
        let xv = tape.constant(x.clone());
        let enc = model.encode_on(tape, vars, m, xv, Some(&epsilon[m]))?;
        recons.push(model.decode_on(tape, vars, m, enc.z)?);
        xs.push(xv);
    }
    reconstruction_on(tape, &xs, &recons)
}

/// Full objective `rec + λ₁·ib + λ₂·sem` for a batch whose rows are the
/// global samples `indices`, all terms sharing one forward pass.
pub fn build_total_loss(
    tape: &mut Tape,
    model: &MscibModel,
    vars: &ModelVars,
    views: &[Array2<f64>],
    indices: &[usize],
    config: &LossConfig,
    noise: &NoiseDraw,
) -> Result<LossGraph> {
    config.validate()?;
    check_batch(model, views, indices)?;
    let mut xs = Vec::new();
    let mut recons = Vec::new();
    let mut preds = Vec::new();
    let mut kls = Vec::new();
    let mut q_views = Vec::new();
    for (m, x) in views.iter().enumerate() {
        let xv = tape.constant(x.clone());
        let enc = model.encode_on(tape, vars, m, xv, Some(&noise.epsilon[m]))?;
        recons.push(model.decode_on(tape, vars, m, enc.z)?);
        xs.push(xv);
        let gamma = noise.gamma.as_ref().map(|g| &g[m]);
        preds.push(model.fuse_on(tape, vars, enc.z, gamma)?);
        kls.push(gaussian_kl_on(tape, enc.mu, enc.sigma)?);
        q_views.push(model.semantic_on(tape, vars, m, enc.z)?);
    }
    let rec = reconstruction_on(tape, &xs, &recons)?;

    let z_rows = tape.gather_rows(vars.z, indices);
    let fused = fused_error_on(tape, z_rows, &preds)?;
    let kl = sum_all(tape, &kls);
    let beta_kl = tape.scale(kl, config.beta);
    let ib = tape.add(fused, beta_kl);

    let q_consistent = model.consistent_semantic_on(tape, vars, z_rows)?;
    let (sem, reg) = semantic_loss_on(tape, &q_views, q_consistent, config.tau)?;

    let w_ib = tape.scale(ib, config.lambda1);
    let w_sem = tape.scale(sem, config.lambda2);
    let partial = tape.add(rec, w_ib);
    let total = tape.add(partial, w_sem);
    Ok(LossGraph {
        rec,
        fused,
        kl,
        ib,
        sem,
        reg,
        total,
        q_views,
        q_consistent,
    })
}

/// Information-bottleneck term for a batch with fresh noise from `rng`.
pub fn ib_loss<R: Rng + ?Sized>(
    model: &MscibModel,
    views: &[Array2<f64>],
    indices: &[usize],
    config: &LossConfig,
    rng: &mut R,
) -> Result<f64> {
    total_loss(model, views, indices, config, rng).map(|b| b.ib)
}

/// All terms for a batch with fresh noise from `rng`.
pub fn total_loss<R: Rng + ?Sized>(
    model: &MscibModel,
    views: &[Array2<f64>],
    indices: &[usize],
    config: &LossConfig,
    rng: &mut R,
) -> Result<LossBreakdown> {
    let noise = NoiseDraw::sample(model, indices.len(), config.gamma_scale, rng);
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let graph = build_total_loss(&mut tape, model, &vars, views, indices, config, &noise)?;
    let b = graph.breakdown(&tape);
    if let Some(term) = b.first_non_finite() {
        return Err(Error::NonFinite { term: term.into() });
    }
    Ok(b)
}
