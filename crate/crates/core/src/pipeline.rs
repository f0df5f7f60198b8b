//! The three training stages, their on-disk artifacts, and the single-phase
//! joint baseline.
//!
//! Stage 1 fine-tunes the last encoder layer under a nonlinear head. Stage 2
//! freezes that encoder and trains an online/target pair on same-label
//! sentence pairs. Stage 3 freezes the pair and fits a linear classifier to
//! its representations.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::RngCore;

use crate::autodiff::{Activation, Graph, Pooling, Var, NORM_EPS};
use crate::byol::{ByolConfig, NetworkPair, RepresentationTap};
use crate::checkpoint;
use crate::data::{self, DatasetSplit, LabelTable, LabeledSentence};
use crate::encoder::{tokenize, Encoder, EncoderConfig, TokenizerConfig};
use crate::error::{Error, Result};
use crate::losses::{cross_entropy_graph, total_loss_graph};
use crate::metrics::{self, ConfusionMatrix, EvalReport};
use crate::nn::{rng_for, Linear};
use crate::optim::Sgd;
use crate::pairing::PairSampler;
use crate::scalar::Scalar;
use crate::tensor::{ParamStore, Tensor};

/// At most this many training samples feed the per-epoch diagnostics.
pub const DIAGNOSTIC_SAMPLES: usize = 512;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const HISTORY_FILE: &str = "history.csv";
pub const SNAPSHOT_FILE: &str = "config.txt";
pub const REPORT_FILE: &str = "report.tsv";
pub const LABELS_FILE: &str = "labels.txt";

const HEAD: &str = "head";
const CLASSIFIER: &str = "classifier";

// Independent random streams derived from the run seed.
const SEED_STAGE1: u64 = 1;
const SEED_STAGE2: u64 = 2;
const SEED_STAGE3: u64 = 3;
const SEED_PAIRS: u64 = 4;
const SEED_DIAGNOSTICS: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Staged,
    Joint,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Staged => "staged",
            Mode::Joint => "joint",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "staged" => Ok(Self::Staged),
            "joint" => Ok(Self::Joint),
            other => Err(Error::Config(format!("unknown mode {other:?} (expected staged or joint)"))),
        }
    }
}

/// Everything that determines a training run apart from the data.
///
/// Stage-2 epochs, learning rate and EMA momentum live in `byol`.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub tokenizer: TokenizerConfig,
    pub encoder: EncoderConfig,
    pub byol: ByolConfig,
    pub stage1_epochs: usize,
    pub stage1_lr: f64,
    pub stage3_epochs: usize,
    pub stage3_lr: f64,
    /// Momentum for the stage-1, stage-3 and joint optimizers.
    pub momentum: f64,
    pub batch_size: usize,
    pub lambda: f64,
    pub joint_epochs: usize,
    pub joint_lr: f64,
    pub seed: u64,
    pub mode: Mode,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            tokenizer: TokenizerConfig::default(),
            encoder: EncoderConfig::default(),
            byol: ByolConfig::default(),
            stage1_epochs: 3,
            stage1_lr: 0.001,
            stage3_epochs: 10,
            stage3_lr: 0.5,
            momentum: 0.9,
            batch_size: 64,
            lambda: 1.0,
            joint_epochs: 15,
            joint_lr: 1e-5,
            seed: crate::DEFAULT_SEED,
            mode: Mode::Staged,
        }
    }
}

fn parse_value<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

impl PipelineConfig {
    pub fn stage2_epochs(&self) -> usize {
        self.byol.epochs
    }

    pub fn validate(&self) -> Result<()> {
        self.tokenizer.validate()?;
        self.encoder.validate()?;
        self.byol.validate()?;
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be >= 2, got {}", self.batch_size)));
        }
        if [self.stage1_epochs, self.byol.epochs, self.stage3_epochs, self.joint_epochs].contains(&0) {
            return Err(Error::Config("every epoch count must be >= 1".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        for (key, lr) in [
            ("stage1_lr", self.stage1_lr),
            ("stage2_lr", self.byol.learning_rate),
            ("stage3_lr", self.stage3_lr),
            ("joint_lr", self.joint_lr),
        ] {
            if !(lr >= 0.0) || !lr.is_finite() {
                return Err(Error::Config(format!("{key} must be a finite non-negative number")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        Ok(())
    }

    /// `(key, value)` pairs in a fixed order; [`PipelineConfig::set`] reads
    /// them back.
    pub fn to_kv(&self) -> Vec<(&'static str, String)> {
        let t = &self.tokenizer;
        let e = &self.encoder;
        let b = &self.byol;
        vec![
            ("mode", self.mode.name().to_string()),
            ("seed", self.seed.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("vocab_size", t.vocab_size.to_string()),
            ("lowercase", t.lowercase.to_string()),
            ("embed_dim", e.embed_dim.to_string()),
            ("num_layers", e.num_layers.to_string()),
            ("hidden_dim", e.hidden_dim.to_string()),
            ("pooling", e.pooling.name().to_string()),
            ("activation", e.activation.name().to_string()),
            ("stage1_epochs", self.stage1_epochs.to_string()),
            ("stage1_lr", self.stage1_lr.to_string()),
            ("stage2_epochs", b.epochs.to_string()),
            ("stage2_lr", b.learning_rate.to_string()),
            ("delta", b.delta.to_string()),
            ("projector_hidden", b.projector_hidden.to_string()),
            ("projector_out", b.projector_out.to_string()),
            ("predictor_hidden", b.predictor_hidden.to_string()),
            ("head_activation", b.activation.name().to_string()),
            ("tap", b.tap.name().to_string()),
            ("stop_gradient", b.stop_gradient.to_string()),
            ("use_predictor", b.use_predictor.to_string()),
            ("stage3_epochs", self.stage3_epochs.to_string()),
            ("stage3_lr", self.stage3_lr.to_string()),
            ("momentum", self.momentum.to_string()),
            ("lambda", self.lambda.to_string()),
            ("joint_epochs", self.joint_epochs.to_string()),
            ("joint_lr", self.joint_lr.to_string()),
        ]
    }

    /// Sets one field by key. Returns `Ok(false)` for keys this type does
    /// not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let v = value;
        match key {
            "mode" => self.mode = v.parse()?,
            "seed" => self.seed = parse_value(key, v)?,
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "vocab_size" => self.tokenizer.vocab_size = parse_value(key, v)?,
            "lowercase" => self.tokenizer.lowercase = parse_value(key, v)?,
            "embed_dim" => self.encoder.embed_dim = parse_value(key, v)?,
            "num_layers" => self.encoder.num_layers = parse_value(key, v)?,
            "hidden_dim" => self.encoder.hidden_dim = parse_value(key, v)?,
            "pooling" => self.encoder.pooling = v.parse::<Pooling>()?,
            "activation" => self.encoder.activation = v.parse::<Activation>()?,
            "stage1_epochs" => self.stage1_epochs = parse_value(key, v)?,
            "stage1_lr" => self.stage1_lr = parse_value(key, v)?,
            "stage2_epochs" => self.byol.epochs = parse_value(key, v)?,
            "stage2_lr" => self.byol.learning_rate = parse_value(key, v)?,
            "delta" => self.byol.delta = parse_value(key, v)?,
            "projector_hidden" => self.byol.projector_hidden = parse_value(key, v)?,
            "projector_out" => self.byol.projector_out = parse_value(key, v)?,
            "predictor_hidden" => self.byol.predictor_hidden = parse_value(key, v)?,
            "head_activation" => self.byol.activation = v.parse::<Activation>()?,
            "tap" => self.byol.tap = v.parse::<RepresentationTap>()?,
            "stop_gradient" => self.byol.stop_gradient = parse_value(key, v)?,
            "use_predictor" => self.byol.use_predictor = parse_value(key, v)?,
            "stage3_epochs" => self.stage3_epochs = parse_value(key, v)?,
            "stage3_lr" => self.stage3_lr = parse_value(key, v)?,
            "momentum" => self.momentum = parse_value(key, v)?,
            "lambda" => self.lambda = parse_value(key, v)?,
            "joint_epochs" => self.joint_epochs = parse_value(key, v)?,
            "joint_lr" => self.joint_lr = parse_value(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Reads a snapshot written by [`PipelineConfig::snapshot`] (unknown
    /// keys are ignored).
    pub fn from_snapshot(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Parse {
                    line: i + 1,
                    message: "expected key=value".into(),
                });
            };
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    /// Text identifying a stage's inputs: the config plus the data.
    pub fn snapshot(&self, stage: &str, data_fingerprint: u64) -> String {
        let mut out = format!("stage={stage}\n");
        for (k, v) in self.to_kv() {
            writeln!(out, "{k}={v}").unwrap();
        }
        writeln!(out, "data_fingerprint={data_fingerprint:016x}").unwrap();
        out
    }

    fn derived_seed(&self, tag: u64) -> u64 {
        rng_for(self.seed, tag).next_u64()
    }
}

/// One row of a stage's loss/diagnostics history.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub anisotropy: f64,
    pub effective_rank: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageId {
    FineTune,
    NonContrastive,
    Classify,
    Joint,
}

impl StageId {
    pub fn dir_name(self) -> &'static str {
        match self {
            StageId::FineTune => "stage1",
            StageId::NonContrastive => "stage2",
            StageId::Classify => "stage3",
            StageId::Joint => "joint",
        }
    }
}

#[derive(Debug, Clone)]
pub struct StageArtifacts<T> {
    pub stage: StageId,
    pub checkpoint: ParamStore<T>,
    pub history: Vec<EpochRecord>,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,mean_loss,anisotropy,effective_rank\n");
    for r in history {
        writeln!(out, "{},{},{},{}", r.epoch, r.mean_loss, r.anisotropy, r.effective_rank).unwrap();
    }
    out
}

pub fn parse_history_csv(text: &str) -> Result<Vec<EpochRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some("epoch,mean_loss,anisotropy,effective_rank") {
        return Err(Error::Parse {
            line: 1,
            message: "missing history header".into(),
        });
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let bad = || Error::Parse {
                line: i + 2,
                message: format!("malformed history row {line:?}"),
            };
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 4 {
                return Err(bad());
            }
            let f = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok(EpochRecord {
                epoch: cols[0].parse().map_err(|_| bad())?,
                mean_loss: f(cols[1])?,
                anisotropy: f(cols[2])?,
                effective_rank: f(cols[3])?,
            })
        })
        .collect()
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

impl<T: Scalar> StageArtifacts<T> {
    /// Writes checkpoint, history and config snapshot into `dir`.
    pub fn save(&self, dir: &Path, snapshot: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        checkpoint::save(&dir.join(CHECKPOINT_FILE), &self.checkpoint)?;
        write_file(&dir.join(HISTORY_FILE), history_csv(&self.history))?;
        write_file(&dir.join(SNAPSHOT_FILE), snapshot)
    }

    pub fn load(dir: &Path, stage: StageId) -> Result<Self> {
        Ok(Self {
            stage,
            checkpoint: checkpoint::load(&dir.join(CHECKPOINT_FILE))?,
            history: parse_history_csv(&read_file(&dir.join(HISTORY_FILE))?)?,
        })
    }
}

pub fn tokenize_all(samples: &[LabeledSentence], cfg: &TokenizerConfig) -> Vec<Vec<usize>> {
    samples.iter().map(|s| tokenize(&s.text, cfg)).collect()
}

fn labels_of(samples: &[LabeledSentence]) -> Vec<usize> {
    samples.iter().map(|s| s.predicate).collect()
}

fn check_labels(samples: &[LabeledSentence], k: usize) -> Result<()> {
    match samples.iter().find(|s| s.predicate >= k) {
        Some(s) => Err(Error::Dimension {
            op: "label table",
            left: vec![k],
            right: vec![s.predicate],
        }),
        None => Ok(()),
    }
}

fn pick<C: Clone>(items: &[C], idx: &[usize]) -> Vec<C> {
    idx.iter().map(|&i| items[i].clone()).collect()
}

/// Shuffled minibatches of `0..n` for one epoch.
fn minibatches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, epoch as u64));
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Wraps a degenerate-vector error as a collapse abort carrying the history
/// so far.
fn collapse(stage: StageId, history: &[EpochRecord]) -> impl Fn(Error) -> Error + '_ {
    move |e| {
        if matches!(e, Error::DegenerateVector { .. }) {
            Error::Collapse {
                stage: stage.dir_name().to_string(),
                history_csv: history_csv(history),
                source: Box::new(e),
            }
        } else {
            e
        }
    }
}

fn diagnostics_record<T: Scalar>(epoch: usize, mean_loss: f64, reps: &Tensor<T>, seed: u64) -> Result<EpochRecord> {
    let snap = metrics::diagnose(reps, seed)?;
    Ok(EpochRecord {
        epoch,
        mean_loss,
        anisotropy: snap.anisotropy,
        effective_rank: snap.effective_rank,
    })
}

fn diagnostic_subset(tokens: &[Vec<usize>]) -> &[Vec<usize>] {
    &tokens[..tokens.len().min(DIAGNOSTIC_SAMPLES)]
}

/// Stage 1: encoder plus a nonlinear head (`tanh(x·W + b)` logits),
/// trained with cross-entropy while everything but the last encoder layer
/// stays frozen.
pub fn stage1_finetune<T: Scalar>(data: &DatasetSplit, table: &LabelTable, cfg: &PipelineConfig) -> Result<StageArtifacts<T>> {
    cfg.validate()?;
    check_labels(&data.train, table.len())?;
    let seed = cfg.derived_seed(SEED_STAGE1);
    let vocab = cfg.tokenizer.vocab_size;
    let mut store: ParamStore<T> = ParamStore::new();
    let encoder = Encoder::init(&mut store, "encoder", vocab, cfg.encoder, &mut rng_for(seed, 0))?;
    let head = Linear::init(&mut store, HEAD, encoder.output_dim(), table.len(), &mut rng_for(seed, 1))?;
    encoder.freeze_all_but_last(&mut store)?;

    let tokens = tokenize_all(&data.train, &cfg.tokenizer);
    let labels = labels_of(&data.train);
    let diag_seed = cfg.derived_seed(SEED_DIAGNOSTICS);
    let mut opt = Sgd::with_momentum(T::lit(cfg.stage1_lr), T::lit(cfg.momentum))?;
    let mut history = Vec::with_capacity(cfg.stage1_epochs);
    for epoch in 0..cfg.stage1_epochs {
        let mut total = 0.0;
        let batches = minibatches(tokens.len(), cfg.batch_size, seed, epoch + 2);
        for idx in &batches {
            let mut g = Graph::new();
            let f = encoder.forward(&mut g, &store, &pick(&tokens, idx))?;
            let z = head.forward(&mut g, &store, f)?;
            let logits = g.activation(z, Activation::Tanh);
            let loss = cross_entropy_graph(&mut g, logits, &pick(&labels, idx))?;
            total += g.scalar(loss).to_f64_lossy();
            g.backward(loss, &mut store)?;
            opt.step(&mut store)?;
        }
        let reps = encoder.encode_batch(&store, diagnostic_subset(&tokens))?;
        let record = diagnostics_record(epoch + 1, total / batches.len() as f64, &reps, diag_seed)
            .map_err(collapse(StageId::FineTune, &history))?;
        history.push(record);
    }
    Ok(StageArtifacts {
        stage: StageId::FineTune,
        checkpoint: store,
        history,
    })
}

/// Rebuilds the pair from a stage-2 (or stage-3) checkpoint.
pub fn load_pair<T: Scalar>(store: &ParamStore<T>, cfg: &PipelineConfig) -> Result<NetworkPair<T>> {
    NetworkPair::from_checkpoint(store, cfg.tokenizer.vocab_size, cfg.encoder, cfg.byol)
}

/// Stage 2 with a callback that sees the pair before training (step 0) and
/// after every optimizer step `t = 1, 2, …`.
pub fn stage2_noncontrastive_observed<T: Scalar>(
    stage1: &StageArtifacts<T>,
    data: &DatasetSplit,
    cfg: &PipelineConfig,
    on_step: &mut dyn FnMut(usize, &NetworkPair<T>),
) -> Result<StageArtifacts<T>> {
    cfg.validate()?;
    let mut encoder_store = stage1.checkpoint.filter_prefix("encoder.")?;
    encoder_store.freeze_all();
    let mut pair = NetworkPair::init(
        &encoder_store,
        cfg.tokenizer.vocab_size,
        cfg.encoder,
        cfg.byol,
        cfg.derived_seed(SEED_STAGE2),
    )?;

    let tokens = tokenize_all(&data.train, &cfg.tokenizer);
    let sampler = PairSampler::new(&labels_of(&data.train), cfg.batch_size, cfg.derived_seed(SEED_PAIRS))?;
    let diag_seed = cfg.derived_seed(SEED_DIAGNOSTICS);
    let mut opt = Sgd::new(T::lit(cfg.byol.learning_rate))?;
    let mut history = Vec::with_capacity(cfg.byol.epochs);
    let mut step = 0;
    on_step(step, &pair);
    for epoch in 0..cfg.byol.epochs {
        let batches = sampler.epoch(epoch as u64);
        let mut total = 0.0;
        for batch in &batches {
            let loss = pair
                .train_step(batch, &tokens, &mut opt)
                .map_err(collapse(StageId::NonContrastive, &history))?;
            total += loss.to_f64_lossy();
            step += 1;
            on_step(step, &pair);
        }
        let reps = pair.represent_batch(diagnostic_subset(&tokens))?;
        let record = diagnostics_record(epoch + 1, total / batches.len() as f64, &reps, diag_seed)
            .map_err(collapse(StageId::NonContrastive, &history))?;
        history.push(record);
    }
    Ok(StageArtifacts {
        stage: StageId::NonContrastive,
        checkpoint: pair.to_checkpoint()?,
        history,
    })
}

/// Stage 2: the stage-1 encoder, fully frozen, under an online/target pair
/// trained on same-label pairs from the training split.
pub fn stage2_noncontrastive<T: Scalar>(
    stage1: &StageArtifacts<T>,
    data: &DatasetSplit,
    cfg: &PipelineConfig,
) -> Result<StageArtifacts<T>> {
    stage2_noncontrastive_observed(stage1, data, cfg, &mut |_, _| {})
}

/// Representations of `tokens` in chunks of `chunk` sentences.
pub fn represent_all<T: Scalar>(pair: &NetworkPair<T>, tokens: &[Vec<usize>], chunk: usize) -> Result<Tensor<T>> {
    let dim = pair.representation_dim();
    let mut data = Vec::with_capacity(tokens.len() * dim);
    for part in tokens.chunks(chunk.max(1)) {
        data.extend(pair.represent_batch(part)?.into_data());
    }
    Tensor::new(vec![tokens.len(), dim], data)
}

fn rows_of<T: Scalar>(features: &Tensor<T>, idx: &[usize]) -> Tensor<T> {
    let d = features.shape()[1];
    let mut data = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        data.extend_from_slice(features.row(i));
    }
    Tensor::new(vec![idx.len(), d], data).expect("row gather keeps its shape")
}

/// Per-dimension `(x − mean)·scale`, with statistics from the training
/// features. Composed with the linear head it is still one affine map.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer<T> {
    pub mean: Vec<T>,
    pub scale: Vec<T>,
}

impl<T: Scalar> Standardizer<T> {
    pub fn fit(features: &Tensor<T>) -> Result<Self> {
        let (n, d) = features.dims2()?;
        if n == 0 {
            return Err(Error::EmptyInput("standardizer features"));
        }
        let count = T::lit(n as f64);
        let mut mean = vec![T::zero(); d];
        for row in features.rows() {
            for (m, &x) in mean.iter_mut().zip(row) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m = *m / count);
        let mut var = vec![T::zero(); d];
        for row in features.rows() {
            for ((v, &x), &m) in var.iter_mut().zip(row).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let scale = var
            .into_iter()
            .map(|v| {
                let sd = (v / count).sqrt();
                if sd > T::lit(NORM_EPS) {
                    T::one() / sd
                } else {
                    T::one()
                }
            })
            .collect();
        Ok(Self { mean, scale })
    }

    pub fn apply(&self, features: &Tensor<T>) -> Tensor<T> {
        let d = self.mean.len();
        let mut out = features.without_grad();
        for (i, x) in out.data_mut().iter_mut().enumerate() {
            *x = (*x - self.mean[i % d]) * self.scale[i % d];
        }
        out
    }

    /// Graph form of [`Standardizer::apply`]; the statistics are constants.
    pub fn node(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let d = self.mean.len();
        let mut diag = Tensor::zeros(vec![d, d]);
        for i in 0..d {
            diag.data_mut()[i * d + i] = self.scale[i];
        }
        let shift = self.mean.iter().zip(&self.scale).map(|(&m, &s)| -m * s).collect();
        let diag = g.constant(diag);
        let shift = g.constant(Tensor::vector(shift));
        let scaled = g.matmul(x, diag)?;
        g.add_bias(scaled, shift)
    }

    fn store_into(&self, store: &mut ParamStore<T>) -> Result<()> {
        store.add(format!("{CLASSIFIER}.input_mean"), Tensor::vector(self.mean.clone()), true)?;
        store.add(format!("{CLASSIFIER}.input_scale"), Tensor::vector(self.scale.clone()), true)?;
        Ok(())
    }

    fn from_store(store: &ParamStore<T>, d: usize) -> Result<Option<Self>> {
        let name = format!("{CLASSIFIER}.input_mean");
        if store.by_name(&name).is_none() {
            return Ok(None);
        }
        let mean = store.require(&name, &[d])?;
        let scale = store.require(&format!("{CLASSIFIER}.input_scale"), &[d])?;
        Ok(Some(Self {
            mean: store.get(mean).tensor.data().to_vec(),
            scale: store.get(scale).tensor.data().to_vec(),
        }))
    }
}

/// A trained model: frozen pair plus linear classifier, ready to evaluate.
#[derive(Debug, Clone)]
pub struct Classifier<T> {
    pub pair: NetworkPair<T>,
    pub store: ParamStore<T>,
    pub head: Linear,
    pub standardizer: Option<Standardizer<T>>,
}

impl<T: Scalar> Classifier<T> {
    /// Binds a stage-3 (or joint) checkpoint; `num_classes` must match the
    /// classifier width.
    pub fn from_checkpoint(store: &ParamStore<T>, cfg: &PipelineConfig, num_classes: usize) -> Result<Self> {
        let pair = load_pair(store, cfg)?;
        let classifier = store.filter_prefix(&format!("{CLASSIFIER}."))?;
        let d = pair.representation_dim();
        let head = Linear::bind(&classifier, CLASSIFIER, d, num_classes)?;
        let standardizer = Standardizer::from_store(&classifier, d)?;
        Ok(Self {
            pair,
            store: classifier,
            head,
            standardizer,
        })
    }

    pub fn predict_batch(&self, tokens: &[Vec<usize>]) -> Result<Vec<usize>> {
        let mut features = represent_all(&self.pair, tokens, 256)?;
        if let Some(st) = &self.standardizer {
            features = st.apply(&features);
        }
        let mut g = Graph::new();
        let x = g.constant(features);
        let logits = self.head.forward_detached(&mut g, &self.store, x)?;
        Ok(g.value(logits).rows().map(metrics::predict).collect())
    }

    pub fn evaluate(&self, samples: &[LabeledSentence], table: &LabelTable, tok: &TokenizerConfig) -> Result<EvalReport> {
        if samples.is_empty() {
            return Err(Error::EmptyInput("evaluation set"));
        }
        check_labels(samples, table.len())?;
        let predictions = self.predict_batch(&tokenize_all(samples, tok))?;
        let cm = ConfusionMatrix::from_pairs(table.len(), samples.iter().map(|s| s.predicate).zip(predictions))?;
        Ok(EvalReport::from_confusion(&cm, Some(table)))
    }
}

/// Stage 3: freezes the pair, fits a linear softmax classifier to its
/// representations, and evaluates on the test split.
pub fn stage3_classify<T: Scalar>(
    stage2: &StageArtifacts<T>,
    data: &DatasetSplit,
    table: &LabelTable,
    cfg: &PipelineConfig,
) -> Result<(StageArtifacts<T>, EvalReport)> {
    cfg.validate()?;
    check_labels(&data.train, table.len())?;
    let mut pair = load_pair(&stage2.checkpoint, cfg)?;
    pair.freeze_all();
    let seed = cfg.derived_seed(SEED_STAGE3);
    let mut store: ParamStore<T> = ParamStore::new();
    let head = Linear::init(&mut store, CLASSIFIER, pair.representation_dim(), table.len(), &mut rng_for(seed, 0))?;

    let tokens = tokenize_all(&data.train, &cfg.tokenizer);
    let labels = labels_of(&data.train);
    let raw = represent_all(&pair, &tokens, 256)?;
    let standardizer = Standardizer::fit(&raw)?;
    standardizer.store_into(&mut store)?;
    let features = standardizer.apply(&raw);
    let diag = {
        let reps = rows_of(&raw, &(0..tokens.len().min(DIAGNOSTIC_SAMPLES)).collect::<Vec<_>>());
        metrics::diagnose(&reps, cfg.derived_seed(SEED_DIAGNOSTICS)).map_err(collapse(StageId::Classify, &[]))?
    };
    let mut opt = Sgd::with_momentum(T::lit(cfg.stage3_lr), T::lit(cfg.momentum))?;
    let mut history = Vec::with_capacity(cfg.stage3_epochs);
    for epoch in 0..cfg.stage3_epochs {
        let batches = minibatches(tokens.len(), cfg.batch_size, seed, epoch + 1);
        let mut total = 0.0;
        for idx in &batches {
            let mut g = Graph::new();
            let x = g.constant(rows_of(&features, idx));
            let logits = head.forward(&mut g, &store, x)?;
            let loss = cross_entropy_graph(&mut g, logits, &pick(&labels, idx))?;
            total += g.scalar(loss).to_f64_lossy();
            g.backward(loss, &mut store)?;
            opt.step(&mut store)?;
        }
        history.push(EpochRecord {
            epoch: epoch + 1,
            mean_loss: total / batches.len() as f64,
            anisotropy: diag.anisotropy,
            effective_rank: diag.effective_rank,
        });
    }
    store.freeze_all();
    let checkpoint = ParamStore::merged([&pair.to_checkpoint()?, &store])?;
    let report = Classifier::from_checkpoint(&checkpoint, cfg, table.len())?.evaluate(&data.test, table, &cfg.tokenizer)?;
    Ok((
        StageArtifacts {
            stage: StageId::Classify,
            checkpoint,
            history,
        },
        report,
    ))
}

/// Output of a full run.
#[derive(Debug, Clone)]
pub struct RunOutput<T> {
    pub report: EvalReport,
    pub stages: Vec<StageArtifacts<T>>,
}

pub fn data_fingerprint(data: &DatasetSplit) -> u64 {
    let mut all = data.train.clone();
    all.extend(data.eval.iter().cloned());
    all.extend(data.test.iter().cloned());
    data::fingerprint(&all)
}

/// Labels, splits and the final report at the top of an output directory.
fn write_run_files(out: &Path, data: &DatasetSplit, table: &LabelTable, report: &EvalReport) -> Result<()> {
    let splits = out.join("splits");
    std::fs::create_dir_all(&splits).map_err(|e| Error::io(&splits, e))?;
    write_file(&out.join(LABELS_FILE), table.to_text())?;
    data::write_tsv(&splits.join("train.tsv"), &data.train, table)?;
    data::write_tsv(&splits.join("eval.tsv"), &data.eval, table)?;
    data::write_tsv(&splits.join("test.tsv"), &data.test, table)?;
    metrics::emit_report(report, &out.join(REPORT_FILE))
}

/// Loads a stage from `dir` when its snapshot matches.
fn reusable<T: Scalar>(dir: &Path, stage: StageId, snapshot: &str) -> Option<StageArtifacts<T>> {
    let existing = std::fs::read_to_string(dir.join(SNAPSHOT_FILE)).ok()?;
    if existing != snapshot {
        return None;
    }
    StageArtifacts::load(dir, stage).ok()
}

/// Runs stages 1 → 2 → 3. With an output directory, each stage is written to
/// `out/stage{1,2,3}/` and a stage whose artifacts were produced from the
/// same config and data is loaded instead of retrained.
pub fn run_pipeline<T: Scalar>(
    data: &DatasetSplit,
    table: &LabelTable,
    cfg: &PipelineConfig,
    out: Option<&Path>,
) -> Result<RunOutput<T>> {
    if cfg.mode != Mode::Staged {
        return Err(Error::Config("run_pipeline needs mode=staged".into()));
    }
    cfg.validate()?;
    let fp = data_fingerprint(data);
    let mut fresh = false;
    let mut run_stage = |stage: StageId,
                         compute: &mut dyn FnMut() -> Result<StageArtifacts<T>>|
     -> Result<StageArtifacts<T>> {
        let Some(out) = out else { return compute() };
        let dir = out.join(stage.dir_name());
        let snapshot = cfg.snapshot(stage.dir_name(), fp);
        if !fresh {
            if let Some(found) = reusable(&dir, stage, &snapshot) {
                return Ok(found);
            }
        }
        fresh = true;
        let artifacts = compute()?;
        artifacts.save(&dir, &snapshot)?;
        Ok(artifacts)
    };

    let s1 = run_stage(StageId::FineTune, &mut || stage1_finetune(data, table, cfg))?;
    let s2 = run_stage(StageId::NonContrastive, &mut || stage2_noncontrastive(&s1, data, cfg))?;
    let s3 = run_stage(StageId::Classify, &mut || Ok(stage3_classify(&s2, data, table, cfg)?.0))?;
    let report = Classifier::from_checkpoint(&s3.checkpoint, cfg, table.len())?.evaluate(&data.test, table, &cfg.tokenizer)?;
    if let Some(out) = out {
        write_run_files(out, data, table, &report)?;
    }
    Ok(RunOutput {
        report,
        stages: vec![s1, s2, s3],
    })
}

/// Parameters of stages 1 and 2 from a finished run, keyed as in the later
/// checkpoints, paired with the stage that must preserve them.
pub fn frozen_handoffs<T: Scalar>(run: &RunOutput<T>) -> Result<Vec<(String, Tensor<T>)>> {
    let mut out = Vec::new();
    for p in run.stages[0].checkpoint.filter_prefix("encoder.")?.iter() {
        out.push((format!("online.{}", p.name), p.tensor.clone()));
    }
    for p in run.stages[1].checkpoint.iter() {
        out.push((p.name.clone(), p.tensor.clone()));
    }
    Ok(out)
}

/// Single-phase baseline: `L_cls + λ·L_cont` over pair batches, with the
/// classifier reading the online projection of `batch_a`.
pub fn run_joint<T: Scalar>(
    data: &DatasetSplit,
    table: &LabelTable,
    cfg: &PipelineConfig,
    out: Option<&Path>,
) -> Result<RunOutput<T>> {
    if cfg.mode != Mode::Joint {
        return Err(Error::Config("run_joint needs mode=joint".into()));
    }
    joint_train(data, table, cfg, true, out)
}

/// The joint loop with the pair loss dropped entirely, for comparison with
/// `λ = 0`.
pub fn run_classification_only<T: Scalar>(
    data: &DatasetSplit,
    table: &LabelTable,
    cfg: &PipelineConfig,
) -> Result<RunOutput<T>> {
    joint_train(data, table, cfg, false, None)
}

fn joint_train<T: Scalar>(
    data: &DatasetSplit,
    table: &LabelTable,
    cfg: &PipelineConfig,
    include_pair_loss: bool,
    out: Option<&Path>,
) -> Result<RunOutput<T>> {
    cfg.validate()?;
    check_labels(&data.train, table.len())?;
    let vocab = cfg.tokenizer.vocab_size;
    let mut encoder_store = ParamStore::new();
    let encoder = Encoder::init(
        &mut encoder_store,
        "encoder",
        vocab,
        cfg.encoder,
        &mut rng_for(cfg.derived_seed(SEED_STAGE1), 0),
    )?;
    encoder.freeze_all_but_last(&mut encoder_store)?;
    let mut pair = NetworkPair::init(&encoder_store, vocab, cfg.encoder, cfg.byol, cfg.derived_seed(SEED_STAGE2))?;
    // The classifier lives in the online store so one backward pass reaches
    // every trainable parameter.
    let rep_dim = pair.representation_dim();
    let head = Linear::init(
        &mut pair.online,
        CLASSIFIER,
        rep_dim,
        table.len(),
        &mut rng_for(cfg.derived_seed(SEED_STAGE3), 0),
    )?;
    let standardizer = Standardizer::fit(&represent_all(&pair, &tokenize_all(&data.train, &cfg.tokenizer), 256)?)?;
    standardizer.store_into(&mut pair.online)?;
    if !include_pair_loss {
        // The predictor only ever receives the pair-loss gradient.
        if let Some(p) = pair.layout.predictor {
            for id in p.params() {
                pair.online.set_frozen(id, true);
            }
        }
    }

    let tokens = tokenize_all(&data.train, &cfg.tokenizer);
    let sampler = PairSampler::new(&labels_of(&data.train), cfg.batch_size, cfg.derived_seed(SEED_PAIRS))?;
    let diag_seed = cfg.derived_seed(SEED_DIAGNOSTICS);
    let lr = T::lit(cfg.joint_lr);
    let mut opt = Sgd::with_momentum(lr, T::lit(cfg.momentum))?;
    let lambda = T::lit(cfg.lambda);
    let mut history = Vec::with_capacity(cfg.joint_epochs);
    let stage = StageId::Joint;
    for epoch in 0..cfg.joint_epochs {
        let batches = sampler.epoch(epoch as u64);
        let mut total = 0.0;
        for batch in &batches {
            let a = pick(&tokens, &batch.batch_a);
            let step = (|| -> Result<T> {
                let mut g = Graph::new();
                let z = pair.layout.online_representation(&mut g, &pair.online, &a, cfg.byol.tap)?;
                let z = standardizer.node(&mut g, z)?;
                let logits = head.forward(&mut g, &pair.online, z)?;
                let cls = cross_entropy_graph(&mut g, logits, &batch.labels)?;
                let loss = if include_pair_loss {
                    let b = pick(&tokens, &batch.batch_b);
                    let cont = pair.layout.loss(&mut g, &pair.online, &pair.target, &a, &b)?;
                    total_loss_graph(&mut g, cls, cont, lambda)?
                } else {
                    cls
                };
                let value = g.scalar(loss);
                g.backward(loss, &mut pair.online)?;
                Ok(value)
            })();
            let value = step.map_err(collapse(stage, &history))?;
            opt.step(&mut pair.online)?;
            pair.ema_update();
            total += value.to_f64_lossy();
        }
        let reps = pair.represent_batch(diagnostic_subset(&tokens))?;
        let record = diagnostics_record(epoch + 1, total / batches.len() as f64, &reps, diag_seed)
            .map_err(collapse(stage, &history))?;
        history.push(record);
    }

    pair.freeze_all();
    let checkpoint = pair.to_checkpoint()?;
    let report = Classifier::from_checkpoint(&checkpoint, cfg, table.len())?.evaluate(&data.test, table, &cfg.tokenizer)?;
    let artifacts = StageArtifacts {
        stage,
        checkpoint,
        history,
    };
    if let Some(out) = out {
        artifacts.save(&out.join(stage.dir_name()), &cfg.snapshot(stage.dir_name(), data_fingerprint(data)))?;
        write_run_files(out, data, table, &report)?;
    }
    Ok(RunOutput {
        report,
        stages: vec![artifacts],
    })
}

/// Directory of a stage inside an output directory.
pub fn stage_dir(out: &Path, stage: StageId) -> PathBuf {
    out.join(stage.dir_name())
}
