//! The multi-view model: per-view variational encoders, decoders and
//! semantic heads, a shared fusion network, a consistent semantic head and
//! the free consistent representation matrix `Z`.

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{CheckpointError, Error, Result};
use crate::network::{Activation, Checkpoint, MlpParams, MlpVars, Tape, Var};

/// Log-variance outputs are clamped to `[-LOGVAR_LIMIT, LOGVAR_LIMIT]`.
pub const LOGVAR_LIMIT: f64 = 10.0;

/// Scale of the standard-normal initialization of `Z`.
pub const Z_INIT_SCALE: f64 = 0.01;

/// Architecture of a [`MscibModel`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    pub view_dims: Vec<usize>,
    pub n_samples: usize,
    /// Width `d` of the per-view latent codes.
    pub latent_dim: usize,
    /// Width `d_c` of the consistent representation.
    pub consistent_dim: usize,
    pub n_clusters: usize,
    pub encoder_hidden: Vec<usize>,
    pub head_hidden: Vec<usize>,
}

impl ModelSpec {
    pub fn new(view_dims: Vec<usize>, n_samples: usize, n_clusters: usize) -> Self {
        Self {
            view_dims,
            n_samples,
            latent_dim: 64,
            consistent_dim: 64,
            n_clusters,
            encoder_hidden: vec![256, 256],
            head_hidden: vec![64],
        }
    }

    fn validate(&self) -> Result<()> {
        let positive = self.latent_dim >= 1
            && self.consistent_dim >= 1
            && self.n_clusters >= 1
            && self.n_samples >= 1
            && self.view_dims.iter().all(|&d| d >= 1)
            && self.encoder_hidden.iter().all(|&d| d >= 1)
            && self.head_hidden.iter().all(|&d| d >= 1);
        if !positive || self.view_dims.is_empty() {
            return Err(Error::InvalidArgument(format!("invalid model spec {self:?}")));
        }
        Ok(())
    }

    pub fn to_meta(&self) -> Vec<(String, String)> {
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        vec![
            ("model.view_dims".into(), list(&self.view_dims)),
            ("model.n_samples".into(), self.n_samples.to_string()),
            ("model.latent_dim".into(), self.latent_dim.to_string()),
            ("model.consistent_dim".into(), self.consistent_dim.to_string()),
            ("model.n_clusters".into(), self.n_clusters.to_string()),
            ("model.encoder_hidden".into(), list(&self.encoder_hidden)),
            ("model.head_hidden".into(), list(&self.head_hidden)),
        ]
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, CheckpointError> {
        let bad = |key: &str| CheckpointError::Tensor {
            name: key.to_string(),
            message: "unparsable metadata".into(),
        };
        let num = |key: &str| -> Result<usize, CheckpointError> {
            ck.require_meta(key)?.parse().map_err(|_| bad(key))
        };
        let list = |key: &str| -> Result<Vec<usize>, CheckpointError> {
            let v = ck.require_meta(key)?;
            if v.is_empty() {
                return Ok(Vec::new());
            }
            v.split(',')
                .map(|s| s.trim().parse().map_err(|_| bad(key)))
                .collect()
        };
        Ok(Self {
            view_dims: list("model.view_dims")?,
            n_samples: num("model.n_samples")?,
            latent_dim: num("model.latent_dim")?,
            consistent_dim: num("model.consistent_dim")?,
            n_clusters: num("model.n_clusters")?,
            encoder_hidden: list("model.encoder_hidden")?,
            head_hidden: list("model.head_hidden")?,
        })
    }
}

/// Mean and log-variance heads of one view.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewEncoder {
    pub mu_net: MlpParams,
    pub logvar_net: MlpParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewBranch {
    pub encoder: ViewEncoder,
    pub decoder: MlpParams,
    pub semantic_head: MlpParams,
}

/// Which optimizer phase a tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    /// Encoders and decoders; the only tensors touched by pretraining.
    Autoencoder,
    SemanticHead,
    ConsistentHead,
    Fusion,
    Consistent,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MscibModel {
    spec: ModelSpec,
    pub views: Vec<ViewBranch>,
    pub consistent_head: MlpParams,
    pub fusion_net: MlpParams,
    /// Consistent representation, one row per sample.
    pub z: Array2<f64>,
}

/// One reparameterized draw for a batch of a view.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewEncoding {
    pub mu: Array2<f64>,
    pub sigma: Array2<f64>,
    pub z: Array2<f64>,
    pub epsilon: Array2<f64>,
}

/// Input of a semantic head.
#[derive(Clone, Copy, Debug)]
pub enum SemanticSource<'a> {
    /// Latent codes of view `m` (0-based).
    View(usize, &'a Array2<f64>),
    /// Rows of `Z`.
    Consistent(&'a Array2<f64>),
}

/// Tape handles mirroring [`MscibModel`].
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub views: Vec<ViewVars>,
    pub consistent_head: MlpVars,
    pub fusion_net: MlpVars,
    pub z: Var,
}

#[derive(Clone, Debug)]
pub struct ViewVars {
    pub mu_net: MlpVars,
    pub logvar_net: MlpVars,
    pub decoder: MlpVars,
    pub semantic_head: MlpVars,
}

/// Tape nodes of one reparameterized encoding.
#[derive(Clone, Copy, Debug)]
pub struct EncodingVars {
    pub mu: Var,
    pub sigma: Var,
    pub z: Var,
}

impl MscibModel {
    /// Fresh model; every tensor is a deterministic function of `seed`.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, dc, k) = (spec.latent_dim, spec.consistent_dim, spec.n_clusters);
        let chain = |first: usize, hidden: &[usize], last: usize| {
            let mut w = Vec::with_capacity(hidden.len() + 2);
            w.push(first);
            w.extend_from_slice(hidden);
            w.push(last);
            w
        };
        let reversed: Vec<usize> = spec.encoder_hidden.iter().rev().copied().collect();

        let mut views = Vec::with_capacity(spec.view_dims.len());
        for &dm in &spec.view_dims {
            let enc = chain(dm, &spec.encoder_hidden, d);
            let mu_net = MlpParams::init(&enc, Activation::Relu, Activation::Identity, &mut rng);
            let logvar_net = MlpParams::init(&enc, Activation::Relu, Activation::Identity, &mut rng);
            let decoder = MlpParams::init(
                &chain(d, &reversed, dm),
                Activation::Relu,
                Activation::Identity,
                &mut rng,
            );
            let semantic_head = MlpParams::init(
                &chain(d, &spec.head_hidden, k),
                Activation::Relu,
                Activation::SoftmaxRows,
                &mut rng,
            );
            views.push(ViewBranch {
                encoder: ViewEncoder { mu_net, logvar_net },
                decoder,
                semantic_head,
            });
        }
        let consistent_head = MlpParams::init(
            &chain(dc, &spec.head_hidden, k),
            Activation::Relu,
            Activation::SoftmaxRows,
            &mut rng,
        );
        let fusion_net = MlpParams::init(
            &chain(d, &spec.head_hidden, dc),
            Activation::Relu,
            Activation::Identity,
            &mut rng,
        );
        let z = Array2::from_shape_simple_fn((spec.n_samples, dc), || {
            Z_INIT_SCALE * rng.sample::<f64, _>(StandardNormal)
        });
        Ok(Self {
            spec,
            views,
            consistent_head,
            fusion_net,
            z,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn n_views(&self) -> usize {
        self.views.len()
    }

    pub fn n_clusters(&self) -> usize {
        self.spec.n_clusters
    }

    /// Every tensor with its name and group, in a fixed order shared by
    /// [`tensors`](Self::tensors), [`tensors_mut`](Self::tensors_mut) and [`bind`](Self::bind).
    pub fn tensor_layout(&self) -> Vec<(String, ParamGroup)> {
        let mut out = Vec::new();
        let mut net = |prefix: String, mlp: &MlpParams, group: ParamGroup| {
            for i in 0..mlp.layers().len() {
                out.push((format!("{prefix}.{i}.weight"), group));
                out.push((format!("{prefix}.{i}.bias"), group));
            }
        };
        for (m, v) in self.views.iter().enumerate() {
            let p = format!("view{}", m + 1);
            net(format!("{p}.mu"), &v.encoder.mu_net, ParamGroup::Autoencoder);
            net(format!("{p}.logvar"), &v.encoder.logvar_net, ParamGroup::Autoencoder);
            net(format!("{p}.decoder"), &v.decoder, ParamGroup::Autoencoder);
            net(format!("{p}.semantic"), &v.semantic_head, ParamGroup::SemanticHead);
        }
        net("consistent".into(), &self.consistent_head, ParamGroup::ConsistentHead);
        net("fusion".into(), &self.fusion_net, ParamGroup::Fusion);
        out.push(("Z".into(), ParamGroup::Consistent));
        out
    }

    pub fn tensor_names(&self) -> Vec<String> {
        self.tensor_layout().into_iter().map(|(n, _)| n).collect()
    }

    pub fn tensors(&self) -> Vec<&Array2<f64>> {
        let mut out = Vec::new();
        for v in &self.views {
            out.extend(v.encoder.mu_net.tensors());
            out.extend(v.encoder.logvar_net.tensors());
            out.extend(v.decoder.tensors());
            out.extend(v.semantic_head.tensors());
        }
        out.extend(self.consistent_head.tensors());
        out.extend(self.fusion_net.tensors());
        out.push(&self.z);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out = Vec::new();
        for v in &mut self.views {
            out.extend(v.encoder.mu_net.tensors_mut());
            out.extend(v.encoder.logvar_net.tensors_mut());
            out.extend(v.decoder.tensors_mut());
            out.extend(v.semantic_head.tensors_mut());
        }
        out.extend(self.consistent_head.tensors_mut());
        out.extend(self.fusion_net.tensors_mut());
        out.push(&mut self.z);
        out
    }

    /// Registers every tensor as a tape leaf.
    pub fn bind(&self, tape: &mut Tape) -> ModelVars {
        let leaves: Vec<Var> = self.tensors().into_iter().map(|t| tape.leaf(t.clone())).collect();
        self.vars_from(&leaves)
    }

    /// Rebuilds handles from a flat slice in [`tensors`](Self::tensors) order.
    pub fn vars_from(&self, vars: &[Var]) -> ModelVars {
        let mut rest = vars;
        let mut take = |mlp: &MlpParams| {
            let (head, tail) = rest.split_at(mlp.tensor_count());
            rest = tail;
            mlp.vars_from(head)
        };
        let views = self
            .views
            .iter()
            .map(|v| ViewVars {
                mu_net: take(&v.encoder.mu_net),
                logvar_net: take(&v.encoder.logvar_net),
                decoder: take(&v.decoder),
                semantic_head: take(&v.semantic_head),
            })
            .collect();
        let consistent_head = take(&self.consistent_head);
        let fusion_net = take(&self.fusion_net);
        debug_assert_eq!(rest.len(), 1);
        ModelVars {
            views,
            consistent_head,
            fusion_net,
            z: rest[0],
        }
    }

    fn branch(&self, m: usize) -> Result<&ViewBranch> {
        self.views
            .get(m)
            .ok_or_else(|| Error::InvalidArgument(format!("view index {m} out of range")))
    }

    /// Reparameterized encoding of a batch of view `m`. With `rng = None`
    /// the draw is `ε = 0`, so `z` equals the posterior mean.
    pub fn encode_view<R: Rng + ?Sized>(
        &self,
        m: usize,
        x: &Array2<f64>,
        rng: Option<&mut R>,
    ) -> Result<ViewEncoding> {
        let enc = &self.branch(m)?.encoder;
        let mu = enc.mu_net.forward(x)?;
        let logvar = enc.logvar_net.forward(x)?;
        let sigma = logvar.mapv(|l| (0.5 * l.clamp(-LOGVAR_LIMIT, LOGVAR_LIMIT)).exp());
        let epsilon = match rng {
            Some(rng) => standard_normal(mu.dim(), rng),
            None => Array2::zeros(mu.dim()),
        };
        let z = &mu + &(&sigma * &epsilon);
        Ok(ViewEncoding {
            mu,
            sigma,
            z,
            epsilon,
        })
    }

    pub fn decode_view(&self, m: usize, z: &Array2<f64>) -> Result<Array2<f64>> {
        self.branch(m)?.decoder.forward(z)
    }

    pub fn semantic_labels(&self, source: SemanticSource<'_>) -> Result<Array2<f64>> {
        match source {
            SemanticSource::View(m, z) => self.branch(m)?.semantic_head.forward(z),
            SemanticSource::Consistent(z) => self.consistent_head.forward(z),
        }
    }

    /// `f_con(z_m + gamma_scale·γ)` with a single draw `γ ~ N(0, I)`.
    pub fn fuse_predict<R: Rng + ?Sized>(
        &self,
        z_m: &Array2<f64>,
        gamma_scale: f64,
        rng: &mut R,
    ) -> Result<Array2<f64>> {
        if gamma_scale == 0.0 {
            return self.fusion_net.forward(z_m);
        }
        let gamma = standard_normal(z_m.dim(), rng);
        self.fusion_net.forward(&(z_m + &(gamma * gamma_scale)))
    }

    /// Posterior means of every view for the full data.
    pub fn view_embeddings(&self, views: &[Array2<f64>]) -> Result<Vec<Array2<f64>>> {
        self.check_views(views)?;
        views
            .iter()
            .enumerate()
            .map(|(m, x)| self.branch(m)?.encoder.mu_net.forward(x))
            .collect()
    }

    /// Fails with the offending view and expected/actual widths.
    pub fn check_views(&self, views: &[Array2<f64>]) -> Result<()> {
        if views.len() != self.n_views() {
            return Err(Error::shape("number of views", self.n_views(), views.len()));
        }
        for (m, (x, &dm)) in views.iter().zip(&self.spec.view_dims).enumerate() {
            if x.ncols() != dm {
                return Err(Error::shape(format!("width of view {}", m + 1), dm, x.ncols()));
            }
        }
        Ok(())
    }

    /// Tape version of [`encode_view`](Self::encode_view) with a fixed `epsilon`.
    pub fn encode_on(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        m: usize,
        x: Var,
        epsilon: Option<&Array2<f64>>,
    ) -> Result<EncodingVars> {
        let enc = &self.branch(m)?.encoder;
        let mu = enc.mu_net.forward_on(tape, &vars.views[m].mu_net, x)?;
        let logvar = enc.logvar_net.forward_on(tape, &vars.views[m].logvar_net, x)?;
        let clamped = tape.clamp(logvar, -LOGVAR_LIMIT, LOGVAR_LIMIT);
        let half = tape.scale(clamped, 0.5);
        let sigma = tape.exp(half);
        let z = match epsilon {
            Some(eps) => {
                let e = tape.constant(eps.clone());
                let noise = tape.mul(sigma, e);
                tape.add(mu, noise)
            }
            None => mu,
        };
        Ok(EncodingVars { mu, sigma, z })
    }

    pub fn decode_on(&self, tape: &mut Tape, vars: &ModelVars, m: usize, z: Var) -> Result<Var> {
        self.branch(m)?
            .decoder
            .forward_on(tape, &vars.views[m].decoder, z)
    }

    pub fn semantic_on(&self, tape: &mut Tape, vars: &ModelVars, m: usize, z: Var) -> Result<Var> {
        self.branch(m)?
            .semantic_head
            .forward_on(tape, &vars.views[m].semantic_head, z)
    }

    pub fn consistent_semantic_on(&self, tape: &mut Tape, vars: &ModelVars, z_rows: Var) -> Result<Var> {
        self.consistent_head
            .forward_on(tape, &vars.consistent_head, z_rows)
    }

    /// Tape version of [`fuse_predict`](Self::fuse_predict); `gamma` is the
    /// already-scaled noise, or `None` for the noiseless prediction.
    pub fn fuse_on(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        z_m: Var,
        gamma: Option<&Array2<f64>>,
    ) -> Result<Var> {
        let input = match gamma {
            Some(g) => {
                let g = tape.constant(g.clone());
                tape.add(z_m, g)
            }
            None => z_m,
        };
        self.fusion_net.forward_on(tape, &vars.fusion_net, input)
    }

    /// All tensors plus the architecture as checkpoint entries.
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            meta: self.spec.to_meta(),
            tensors: self
                .tensor_names()
                .into_iter()
                .zip(self.tensors().into_iter().cloned())
                .collect(),
            rng: None,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let spec = ModelSpec::from_checkpoint(ck)?;
        let mut model = Self::init(spec, 0)?;
        let names = model.tensor_names();
        for (name, slot) in names.iter().zip(model.tensors_mut()) {
            let t = ck.tensor(name).ok_or_else(|| CheckpointError::Tensor {
                name: name.clone(),
                message: "missing".into(),
            })?;
            if t.dim() != slot.dim() {
                return Err(CheckpointError::Tensor {
                    name: name.clone(),
                    message: format!("shape {:?}, expected {:?}", t.dim(), slot.dim()),
                }
                .into());
            }
            slot.assign(t);
        }
        Ok(model)
    }
}

pub(crate) fn standard_normal<R: Rng + ?Sized>(shape: (usize, usize), rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || rng.sample::<f64, _>(StandardNormal))
}

/// Rows of `z` selected by global sample index.
pub fn z_rows(z: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    z.select(Axis(0), rows)
}
