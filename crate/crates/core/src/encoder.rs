//! Toy sentence encoder: hashed tokens, an embedding table, a stack of
//! per-token nonlinear layers and a pooling step.
//!
//! The layers act on each token independently, so with mean pooling the
//! output does not depend on token order.

use rand::Rng;

use crate::autodiff::{Activation, Graph, Pooling, Var};
use crate::error::{Error, Result};
use crate::nn::{uniform_tensor, Linear};
use crate::scalar::Scalar;
use crate::tensor::{ParamId, ParamStore, Tensor};

/// Embedding rows are drawn uniformly from `±EMBED_INIT`.
pub const EMBED_INIT: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenizerConfig {
    /// Number of hash buckets.
    pub vocab_size: usize,
    pub lowercase: bool,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            vocab_size: 4096,
            lowercase: true,
        }
    }
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::Config(format!("vocab_size must be >= 2, got {}", self.vocab_size)));
        }
        Ok(())
    }
}

/// 64-bit FNV-1a; stable across platforms and releases.
fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Whitespace split, optional lowercasing, then `fnv1a(token) mod vocab_size`.
pub fn tokenize(text: &str, cfg: &TokenizerConfig) -> Vec<usize> {
    let buckets = cfg.vocab_size.max(1) as u64;
    text.split_whitespace()
        .map(|tok| {
            let h = if cfg.lowercase {
                fnv1a(tok.to_lowercase().as_bytes())
            } else {
                fnv1a(tok.as_bytes())
            };
            (h % buckets) as usize
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    /// Nonlinear layers after the embedding lookup.
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub pooling: Pooling,
    pub activation: Activation,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            num_layers: 3,
            hidden_dim: 64,
            pooling: Pooling::Mean,
            activation: Activation::Tanh,
        }
    }
}

impl EncoderConfig {
    pub fn output_dim(&self) -> usize {
        if self.num_layers == 0 {
            self.embed_dim
        } else {
            self.hidden_dim
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        Ok(())
    }

    fn layer_dims(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.num_layers).map(|i| {
            let d_in = if i == 0 { self.embed_dim } else { self.hidden_dim };
            (d_in, self.hidden_dim)
        })
    }
}

/// Pooled representation of one sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceVector<T> {
    pub values: Tensor<T>,
}

impl<T: Scalar> SentenceVector<T> {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[T] {
        self.values.data()
    }
}

/// Parameter layout of an encoder inside some [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub vocab_size: usize,
    pub embedding: ParamId,
    pub layers: Vec<Linear>,
}

impl Encoder {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        vocab_size: usize,
        config: EncoderConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let embedding = store.add(
            format!("{prefix}.embedding"),
            uniform_tensor(rng, vec![vocab_size, config.embed_dim], EMBED_INIT),
            false,
        )?;
        let layers = config
            .layer_dims()
            .enumerate()
            .map(|(i, (d_in, d_out))| Linear::init(store, &format!("{prefix}.layer{}", i + 1), d_in, d_out, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            config,
            vocab_size,
            embedding,
            layers,
        })
    }

    /// Recovers the layout of an encoder already present in `store`.
    pub fn bind<T: Scalar>(store: &ParamStore<T>, prefix: &str, vocab_size: usize, config: EncoderConfig) -> Result<Self> {
        let embedding = store.require(&format!("{prefix}.embedding"), &[vocab_size, config.embed_dim])?;
        let layers = config
            .layer_dims()
            .enumerate()
            .map(|(i, (d_in, d_out))| Linear::bind(store, &format!("{prefix}.layer{}", i + 1), d_in, d_out))
            .collect::<Result<_>>()?;
        Ok(Self {
            config,
            vocab_size,
            embedding,
            layers,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        std::iter::once(self.embedding)
            .chain(self.layers.iter().flat_map(Linear::params))
            .collect()
    }

    /// Encodes a batch of token lists into a `[batch × output_dim]` node.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, batch: &[Vec<usize>]) -> Result<Var> {
        self.forward_impl(g, store, batch, false)
    }

    /// As [`Encoder::forward`] with every parameter entering as a constant.
    pub fn forward_detached<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        batch: &[Vec<usize>],
    ) -> Result<Var> {
        self.forward_impl(g, store, batch, true)
    }

    fn forward_impl<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        batch: &[Vec<usize>],
        detached: bool,
    ) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::EmptyInput("encoder batch"));
        }
        let mut ids = Vec::with_capacity(batch.iter().map(Vec::len).sum());
        let mut segments = Vec::with_capacity(batch.len());
        for tokens in batch {
            if tokens.is_empty() {
                return Err(Error::EmptyInput("sentence has no tokens"));
            }
            segments.push((ids.len(), tokens.len()));
            ids.extend_from_slice(tokens);
        }
        let table = if detached {
            g.constant(store.get(self.embedding).tensor.clone())
        } else {
            g.param(store, self.embedding)
        };
        let mut h = g.gather_rows(table, &ids)?;
        for layer in &self.layers {
            h = if detached {
                layer.forward_detached(g, store, h)?
            } else {
                layer.forward(g, store, h)?
            };
            h = g.activation(h, self.config.activation);
        }
        g.segment_pool(h, &segments, self.config.pooling)
    }

    pub fn encode<T: Scalar>(&self, store: &ParamStore<T>, tokens: &[usize]) -> Result<SentenceVector<T>> {
        let values = self.encode_batch(store, &[tokens.to_vec()])?;
        Ok(SentenceVector {
            values: Tensor::vector(values.into_data()),
        })
    }

    /// Inference-only batch encoding: `[batch × output_dim]`.
    pub fn encode_batch<T: Scalar>(&self, store: &ParamStore<T>, batch: &[Vec<usize>]) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let out = self.forward_detached(&mut g, store, batch)?;
        Ok(g.value(out).clone())
    }

    /// Freezes the embedding and all layers except the final one, which is
    /// left trainable.
    pub fn freeze_all_but_last<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let Some((last, below)) = self.layers.split_last() else {
            return Err(Error::contract("freeze_all_but_last needs an encoder with at least one layer"));
        };
        store.set_frozen(self.embedding, true);
        for id in below.iter().flat_map(Linear::params) {
            store.set_frozen(id, true);
        }
        for id in last.params() {
            store.set_frozen(id, false);
        }
        Ok(())
    }

    pub fn freeze_all<T: Scalar>(&self, store: &mut ParamStore<T>) {
        for id in self.param_ids() {
            store.set_frozen(id, true);
        }
    }
}
