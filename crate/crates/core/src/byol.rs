//! Online/target network pair trained with a stop-gradient alignment loss
//! and an exponential-moving-average target.
//!
//! The online branch is encoder → projector → predictor (parameters θ); the
//! target branch is encoder → projector with no predictor (parameters ξ).
//! Only θ receives gradients. After every optimizer step the target follows
//! `ξ ← δ·ξ + (1−δ)·θ`.

use crate::autodiff::{Activation, Graph, Var};
use crate::encoder::{Encoder, EncoderConfig, SentenceVector};
use crate::error::{Error, Result};
use crate::losses::byol_loss;
use crate::nn::{rng_for, Mlp};
use crate::optim::Sgd;
use crate::pairing::PairBatch;
use crate::scalar::Scalar;
use crate::tensor::{ParamId, ParamStore, Tensor};

pub const ONLINE: &str = "online";
pub const TARGET: &str = "target";

const STREAM_PROJECTOR: u64 = 11;
const STREAM_PREDICTOR: u64 = 12;

/// Which activation is handed downstream by [`NetworkPair::represent`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RepresentationTap {
    /// Online projector output, before the predictor.
    #[default]
    Projector,
    /// Online encoder output.
    Encoder,
}

impl RepresentationTap {
    pub fn name(self) -> &'static str {
        match self {
            RepresentationTap::Projector => "projector",
            RepresentationTap::Encoder => "encoder",
        }
    }
}

impl std::str::FromStr for RepresentationTap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "projector" => Ok(Self::Projector),
            "encoder" => Ok(Self::Encoder),
            other => Err(Error::Config(format!("unknown representation tap {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ByolConfig {
    pub projector_hidden: usize,
    pub projector_out: usize,
    pub predictor_hidden: usize,
    /// EMA momentum δ.
    pub delta: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub activation: Activation,
    pub tap: RepresentationTap,
    /// Ablation switch: when false the target side is computed by the online
    /// projector with gradients flowing through it.
    pub stop_gradient: bool,
    /// Ablation switch: when false the online branch has no predictor.
    pub use_predictor: bool,
}

impl Default for ByolConfig {
    fn default() -> Self {
        Self {
            projector_hidden: 64,
            projector_out: 32,
            predictor_hidden: 64,
            delta: 0.99,
            learning_rate: 1.0,
            epochs: 15,
            activation: Activation::Relu,
            tap: RepresentationTap::Projector,
            stop_gradient: true,
            use_predictor: true,
        }
    }
}

impl ByolConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(Error::Config(format!("delta must be in [0, 1], got {}", self.delta)));
        }
        if self.projector_hidden == 0 || self.projector_out == 0 || self.predictor_hidden == 0 {
            return Err(Error::Config("projector/predictor dimensions must be positive".into()));
        }
        Ok(())
    }

    /// The collapse-prone variant: no stop-gradient, no predictor, δ = 0.
    pub fn ablated(self) -> Self {
        Self {
            stop_gradient: false,
            use_predictor: false,
            delta: 0.0,
            ..self
        }
    }
}

/// Parameter layout of both branches; the values live in the stores of
/// [`NetworkPair`].
#[derive(Debug, Clone, PartialEq)]
pub struct PairLayout {
    pub online_encoder: Encoder,
    pub online_projector: Mlp,
    pub predictor: Option<Mlp>,
    pub target_encoder: Encoder,
    pub target_projector: Mlp,
    pub stop_gradient: bool,
}

impl PairLayout {
    fn bind<T: Scalar>(
        online: &ParamStore<T>,
        target: &ParamStore<T>,
        vocab_size: usize,
        enc: EncoderConfig,
        cfg: &ByolConfig,
    ) -> Result<Self> {
        let proj_dims = (enc.output_dim(), cfg.projector_hidden, cfg.projector_out);
        let pred_dims = (cfg.projector_out, cfg.predictor_hidden, cfg.projector_out);
        let predictor = if cfg.use_predictor {
            Some(Mlp::bind(online, &format!("{ONLINE}.predictor"), pred_dims, cfg.activation)?)
        } else {
            None
        };
        Ok(Self {
            online_encoder: Encoder::bind(online, &format!("{ONLINE}.encoder"), vocab_size, enc)?,
            online_projector: Mlp::bind(online, &format!("{ONLINE}.projector"), proj_dims, cfg.activation)?,
            predictor,
            target_encoder: Encoder::bind(target, &format!("{TARGET}.encoder"), vocab_size, enc)?,
            target_projector: Mlp::bind(target, &format!("{TARGET}.projector"), proj_dims, cfg.activation)?,
            stop_gradient: cfg.stop_gradient,
        })
    }

    /// `g_θ(f_θ(x))`, differentiable in θ.
    pub fn online_projection<T: Scalar>(&self, g: &mut Graph<T>, online: &ParamStore<T>, batch: &[Vec<usize>]) -> Result<Var> {
        let f = self.online_encoder.forward(g, online, batch)?;
        self.online_projector.forward(g, online, f)
    }

    /// `p_θ(g_θ(f_θ(x)))`, or the projection when there is no predictor.
    pub fn online_prediction<T: Scalar>(&self, g: &mut Graph<T>, online: &ParamStore<T>, batch: &[Vec<usize>]) -> Result<Var> {
        let z = self.online_projection(g, online, batch)?;
        match &self.predictor {
            Some(p) => p.forward(g, online, z),
            None => Ok(z),
        }
    }

    /// The online activation selected by `tap`, differentiable in θ.
    pub fn online_representation<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        online: &ParamStore<T>,
        batch: &[Vec<usize>],
        tap: RepresentationTap,
    ) -> Result<Var> {
        match tap {
            RepresentationTap::Projector => self.online_projection(g, online, batch),
            RepresentationTap::Encoder => self.online_encoder.forward(g, online, batch),
        }
    }

    /// `g_ξ(f_ξ(x))` as a constant (stop-gradient), or the online projection
    /// with gradient when stop-gradient is disabled.
    pub fn target_projection<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        online: &ParamStore<T>,
        target: &ParamStore<T>,
        batch: &[Vec<usize>],
    ) -> Result<Var> {
        if !self.stop_gradient {
            return self.online_projection(g, online, batch);
        }
        let f = self.target_encoder.forward_detached(g, target, batch)?;
        self.target_projector.forward_detached(g, target, f)
    }

    /// Mean over pairs of `½·D(z₁, h₂) + ½·D(z̃₂, h̃₁)`.
    pub fn loss<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        online: &ParamStore<T>,
        target: &ParamStore<T>,
        batch_a: &[Vec<usize>],
        batch_b: &[Vec<usize>],
    ) -> Result<Var> {
        if batch_a.len() != batch_b.len() {
            return Err(Error::Dimension {
                op: "byol pair batch",
                left: vec![batch_a.len()],
                right: vec![batch_b.len()],
            });
        }
        let z1 = self.online_prediction(g, online, batch_a)?;
        let z2 = self.online_prediction(g, online, batch_b)?;
        let h1 = self.target_projection(g, online, target, batch_a)?;
        let h2 = self.target_projection(g, online, target, batch_b)?;
        let per_pair = byol_loss(g, z1, h2, z2, h1)?;
        Ok(g.mean(per_pair))
    }
}

/// Online (θ) and target (ξ) parameters together with their layout.
#[derive(Debug, Clone)]
pub struct NetworkPair<T> {
    pub online: ParamStore<T>,
    pub target: ParamStore<T>,
    pub layout: PairLayout,
    pub config: ByolConfig,
    pub encoder_config: EncoderConfig,
    pub vocab_size: usize,
    /// `(target id, online id)` for every target parameter.
    correspondence: Vec<(ParamId, ParamId)>,
}

impl<T: Scalar> NetworkPair<T> {
    /// Builds the pair around an encoder stored under the `encoder.` prefix.
    ///
    /// The encoder's frozen flags are inherited. Projector and predictor are
    /// freshly initialized from `seed`; the target starts as an exact copy of
    /// the online encoder and projector.
    pub fn init(
        encoder_store: &ParamStore<T>,
        vocab_size: usize,
        encoder_config: EncoderConfig,
        config: ByolConfig,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        Encoder::bind(encoder_store, "encoder", vocab_size, encoder_config)?;
        let mut online = encoder_store.rename_prefix("encoder.", &format!("{ONLINE}.encoder."))?;
        let proj_dims = (encoder_config.output_dim(), config.projector_hidden, config.projector_out);
        Mlp::init(
            &mut online,
            &format!("{ONLINE}.projector"),
            proj_dims,
            config.activation,
            &mut rng_for(seed, STREAM_PROJECTOR),
        )?;
        let target = online.rename_prefix(&format!("{ONLINE}."), &format!("{TARGET}."))?;
        let mut target = target;
        target.iter_mut().for_each(|p| p.frozen = false);
        if config.use_predictor {
            let pred_dims = (config.projector_out, config.predictor_hidden, config.projector_out);
            Mlp::init(
                &mut online,
                &format!("{ONLINE}.predictor"),
                pred_dims,
                config.activation,
                &mut rng_for(seed, STREAM_PREDICTOR),
            )?;
        }
        Self::from_stores(online, target, vocab_size, encoder_config, config)
    }

    /// Reassembles a pair from its two stores (for example after loading a
    /// checkpoint).
    pub fn from_stores(
        online: ParamStore<T>,
        target: ParamStore<T>,
        vocab_size: usize,
        encoder_config: EncoderConfig,
        config: ByolConfig,
    ) -> Result<Self> {
        config.validate()?;
        let layout = PairLayout::bind(&online, &target, vocab_size, encoder_config, &config)?;
        let mut correspondence = Vec::with_capacity(target.len());
        for tid in target.ids() {
            let tp = target.get(tid);
            let suffix = tp
                .name
                .strip_prefix(&format!("{TARGET}."))
                .ok_or_else(|| Error::contract(format!("target parameter {:?} lacks the target prefix", tp.name)))?;
            let online_name = format!("{ONLINE}.{suffix}");
            let oid = online
                .require(&online_name, tp.tensor.shape())
                .map_err(|_| Error::contract(format!("no online counterpart {online_name:?} with matching shape")))?;
            correspondence.push((tid, oid));
        }
        if target.iter().any(|p| p.name.contains(".predictor.")) {
            return Err(Error::contract("the target network must not have a predictor"));
        }
        Ok(Self {
            online,
            target,
            layout,
            config,
            encoder_config,
            vocab_size,
            correspondence,
        })
    }

    /// Splits a merged checkpoint store by the `online.` / `target.` prefixes.
    pub fn from_checkpoint(
        store: &ParamStore<T>,
        vocab_size: usize,
        encoder_config: EncoderConfig,
        config: ByolConfig,
    ) -> Result<Self> {
        let online = store.filter_prefix(&format!("{ONLINE}."))?;
        let target = store.filter_prefix(&format!("{TARGET}."))?;
        Self::from_stores(online, target, vocab_size, encoder_config, config)
    }

    pub fn to_checkpoint(&self) -> Result<ParamStore<T>> {
        ParamStore::merged([&self.online, &self.target])
    }

    pub fn delta(&self) -> T {
        T::lit(self.config.delta)
    }

    /// `ξ ← δ·ξ + (1−δ)·θ` elementwise; θ is untouched. Equal values stay
    /// exactly equal.
    pub fn ema_update(&mut self) {
        let delta = self.delta();
        for &(tid, oid) in &self.correspondence {
            let theta = self.online.get(oid).tensor.data();
            let xi = self.target.get_mut(tid).tensor.data_mut();
            ema_in_place(xi, theta, delta);
        }
    }

    /// One optimization step on a batch of positive pairs.
    ///
    /// Computes the mean pair loss, backpropagates into θ only, applies one
    /// optimizer step and then the EMA update. Returns the pre-step loss. A
    /// degenerate representation aborts the step before any parameter moves.
    pub fn train_step_tokens(&mut self, batch_a: &[Vec<usize>], batch_b: &[Vec<usize>], opt: &mut Sgd<T>) -> Result<T> {
        let mut g = Graph::new();
        let loss = self.layout.loss(&mut g, &self.online, &self.target, batch_a, batch_b)?;
        let value = g.scalar(loss);
        g.backward(loss, &mut self.online)?;
        debug_assert!(self.target.all_grads_zero());
        opt.step(&mut self.online)?;
        self.ema_update();
        Ok(value)
    }

    /// [`NetworkPair::train_step_tokens`] over a [`PairBatch`] of indices into
    /// the pre-tokenized samples.
    pub fn train_step(&mut self, batch: &PairBatch, tokens: &[Vec<usize>], opt: &mut Sgd<T>) -> Result<T> {
        let a: Vec<Vec<usize>> = batch.batch_a.iter().map(|&i| tokens[i].clone()).collect();
        let b: Vec<Vec<usize>> = batch.batch_b.iter().map(|&i| tokens[i].clone()).collect();
        self.train_step_tokens(&a, &b, opt)
    }

    /// Mean pair loss without touching any parameter.
    pub fn evaluate_loss(&self, batch_a: &[Vec<usize>], batch_b: &[Vec<usize>]) -> Result<T> {
        let mut g = Graph::new();
        let loss = self.layout.loss(&mut g, &self.online, &self.target, batch_a, batch_b)?;
        Ok(g.scalar(loss))
    }

    /// Representation handed to the downstream classifier, `[n × dim]`.
    pub fn represent_batch(&self, batch: &[Vec<usize>]) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let f = self.layout.online_encoder.forward_detached(&mut g, &self.online, batch)?;
        let out = match self.config.tap {
            RepresentationTap::Encoder => f,
            RepresentationTap::Projector => self.layout.online_projector.forward_detached(&mut g, &self.online, f)?,
        };
        Ok(g.value(out).clone())
    }

    pub fn represent(&self, tokens: &[usize]) -> Result<SentenceVector<T>> {
        let t = self.represent_batch(&[tokens.to_vec()])?;
        Ok(SentenceVector {
            values: Tensor::vector(t.into_data()),
        })
    }

    pub fn representation_dim(&self) -> usize {
        match self.config.tap {
            RepresentationTap::Projector => self.config.projector_out,
            RepresentationTap::Encoder => self.encoder_config.output_dim(),
        }
    }

    pub fn freeze_all(&mut self) {
        self.online.freeze_all();
        self.target.freeze_all();
    }
}

/// `xi ← δ·xi + (1−δ)·theta`, keeping already-equal entries bit-identical.
pub fn ema_in_place<T: Scalar>(xi: &mut [T], theta: &[T], delta: T) {
    let keep = T::one() - delta;
    for (x, &t) in xi.iter_mut().zip(theta) {
        if *x != t {
            *x = delta * *x + keep * t;
        }
    }
}
