//! Checks shared by the acceptance harness and the regular integration tests.
//! Each check returns `Ok(detail)` or `Err(reason)`.

#![allow(dead_code)]
// `!(x < bound)` also fails on NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use ncre::byol::{ema_in_place, NetworkPair};
use ncre::config::RunConfig;
use ncre::encoder::Encoder;
use ncre::gradcheck::finite_difference_check;
use ncre::losses::{byol_loss, cross_entropy_graph, d_loss, neg_cosine, total_loss_graph};
use ncre::metrics::{self, per_class_prf, ConfusionMatrix};
use ncre::nn::{rng_for, uniform_tensor, Linear, Mlp};
use ncre::pairing::{validate_pair_batch, PairSampler};
use ncre::pipeline::{self, PipelineConfig, RunOutput, Standardizer, StageArtifacts};
use ncre::tensor::{ParamStore, Tensor};
use ncre::{
    Activation, ByolConfig, DatasetSplit, EncoderConfig, Graph, LabelTable, Pooling, RepresentationTap, Var,
};

pub type Check = Result<String, String>;

pub fn fixtures_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures")
}

/// Set `NCRE_BLESS=1` to rewrite committed fixtures from the current build.
pub fn blessing() -> bool {
    std::env::var_os("NCRE_BLESS").is_some_and(|v| v == "1")
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

// ---------------------------------------------------------------- gradients

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    uniform_tensor(rng, shape, 1.0)
}

fn random_tokens(rng: &mut ChaCha8Rng, n: usize, vocab: usize) -> Vec<Vec<usize>> {
    (0..n)
        .map(|_| {
            let len = rng.random_range(1..6);
            (0..len).map(|_| rng.random_range(0..vocab)).collect()
        })
        .collect()
}

/// A partner batch whose sentence `i` differs from `a[i]`, as for a
/// positive pair of two distinct samples. With identical sides
/// `D(z, z) = −1` is a stationary point whose zero gradient only rounding
/// noise can resolve.
fn random_partners(rng: &mut ChaCha8Rng, a: &[Vec<usize>], vocab: usize) -> Vec<Vec<usize>> {
    a.iter()
        .map(|s| loop {
            let b = random_tokens(rng, 1, vocab).remove(0);
            if &b != s {
                break b;
            }
        })
        .collect()
}

/// `Σ out ⊙ w` for a fixed random `w`, so every output element matters.
fn weighted_sum(g: &mut Graph<f64>, out: Var, w: &Tensor<f64>) -> ncre::Result<Var> {
    let w = g.constant(w.clone());
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

/// Smallest `|x|` over a node's values.
fn margin(g: &Graph<f64>, v: Var) -> f64 {
    g.value(v).data().iter().fold(f64::INFINITY, |m, x| m.min(x.abs()))
}

/// A ReLU input closer to zero than this could flip sign under a
/// finite-difference step, where the central difference is meaningless.
pub const KINK_MARGIN: f64 = 1e-3;

const TINY_VOCAB: usize = 13;

fn tiny_encoder_config(activation: Activation, pooling: Pooling) -> EncoderConfig {
    EncoderConfig {
        embed_dim: 4,
        num_layers: 2,
        hidden_dim: 5,
        pooling,
        activation,
    }
}

fn tiny_byol_config() -> ByolConfig {
    ByolConfig {
        projector_hidden: 16,
        projector_out: 4,
        predictor_hidden: 16,
        ..ByolConfig::default()
    }
}

/// A small pair whose target differs from the online network.
pub fn tiny_pair(seed: u64, byol: ByolConfig) -> ncre::Result<NetworkPair<f64>> {
    let mut rng = rng_for(seed, 0);
    let enc = tiny_encoder_config(Activation::Tanh, Pooling::Mean);
    let mut store = ParamStore::new();
    Encoder::init(&mut store, "encoder", TINY_VOCAB, enc, &mut rng)?;
    // Larger embeddings than the default init keep the outputs well away
    // from zero for the finite differences.
    for p in store.iter_mut() {
        let fresh = random_tensor(&mut rng, p.tensor.shape().to_vec());
        p.tensor = fresh;
    }
    let mut pair = NetworkPair::init(&store, TINY_VOCAB, enc, byol, seed)?;
    pair.online.iter_mut().for_each(|p| p.frozen = false);
    for p in pair.target.iter_mut() {
        for x in p.tensor.data_mut() {
            *x += rng.random_range(-0.3..0.3);
        }
    }
    Ok(pair)
}

pub const GRADIENT_KINDS: &[&str] = &[
    "linear",
    "linear_unbiased",
    "mlp_relu",
    "mlp_tanh",
    "mlp_identity",
    "encoder_mean_tanh",
    "encoder_mean_relu",
    "encoder_last_token_identity",
    "standardizer",
    "negative_cosine",
    "pair_loss_terms",
    "pair_loss_network",
    "pair_loss_network_ablated",
    "cross_entropy",
    "total_loss",
];

/// Worst relative gradient error of one random instance of `kind`, or
/// `None` when a ReLU input of the instance lies within [`KINK_MARGIN`] of 0.
pub fn gradient_case(kind: &str, seed: u64, step: f64) -> ncre::Result<Option<f64>> {
    let mut rng = rng_for(seed, 99);
    let n = 5;
    let mut store: ParamStore<f64> = ParamStore::new();
    let checked = match kind {
        "linear" | "linear_unbiased" => {
            let lin = if kind == "linear" {
                Linear::init(&mut store, "l", 3, 4, &mut rng)?
            } else {
                Linear::init_unbiased(&mut store, "l", 3, 4, &mut rng)?
            };
            let x = random_tensor(&mut rng, vec![n, 3]);
            let w = random_tensor(&mut rng, vec![n, 4]);
            finite_difference_check(&mut store, step, |g, s| {
                let x = g.constant(x.clone());
                let out = lin.forward(g, s, x)?;
                weighted_sum(g, out, &w)
            })
        }
        "mlp_relu" | "mlp_tanh" | "mlp_identity" => {
            let act: Activation = kind.trim_start_matches("mlp_").parse()?;
            let mlp = Mlp::init(&mut store, "m", (3, 6, 4), act, &mut rng)?;
            let x = random_tensor(&mut rng, vec![n, 3]);
            let w = random_tensor(&mut rng, vec![n, 4]);
            if act == Activation::Relu {
                let mut g = Graph::new();
                let xv = g.constant(x.clone());
                let pre = mlp.hidden.forward(&mut g, &store, xv)?;
                if margin(&g, pre) < KINK_MARGIN {
                    return Ok(None);
                }
            }
            finite_difference_check(&mut store, step, |g, s| {
                let x = g.constant(x.clone());
                let out = mlp.forward(g, s, x)?;
                weighted_sum(g, out, &w)
            })
        }
        "encoder_mean_tanh" | "encoder_mean_relu" | "encoder_last_token_identity" => {
            let (act, pool) = match kind {
                "encoder_mean_tanh" => (Activation::Tanh, Pooling::Mean),
                "encoder_mean_relu" => (Activation::Relu, Pooling::Mean),
                _ => (Activation::Identity, Pooling::LastToken),
            };
            let cfg = tiny_encoder_config(act, pool);
            let enc = Encoder::init(&mut store, "encoder", TINY_VOCAB, cfg, &mut rng)?;
            for p in store.iter_mut() {
                p.tensor = random_tensor(&mut rng, p.tensor.shape().to_vec());
                p.frozen = false;
            }
            let batch = random_tokens(&mut rng, n, TINY_VOCAB);
            let w = random_tensor(&mut rng, vec![n, cfg.output_dim()]);
            if act == Activation::Relu {
                let mut g = Graph::new();
                let ids: Vec<usize> = batch.iter().flatten().copied().collect();
                let table = g.param(&store, enc.embedding);
                let mut h = g.gather_rows(table, &ids)?;
                for layer in &enc.layers {
                    let pre = layer.forward(&mut g, &store, h)?;
                    if margin(&g, pre) < KINK_MARGIN {
                        return Ok(None);
                    }
                    h = g.activation(pre, act);
                }
            }
            finite_difference_check(&mut store, step, |g, s| {
                let out = enc.forward(g, s, &batch)?;
                weighted_sum(g, out, &w)
            })
        }
        "standardizer" => {
            let x0 = random_tensor(&mut rng, vec![n, 4]);
            let st = Standardizer::fit(&x0)?;
            let id = store.add("x", x0, false)?;
            let w = random_tensor(&mut rng, vec![n, 4]);
            finite_difference_check(&mut store, step, |g, s| {
                let x = g.param(s, id);
                let out = st.node(g, x)?;
                weighted_sum(g, out, &w)
            })
        }
        "negative_cosine" => {
            let z = store.add("z", random_tensor(&mut rng, vec![n, 4]), false)?;
            let h = store.add("h", random_tensor(&mut rng, vec![n, 4]), false)?;
            finite_difference_check(&mut store, step, |g, s| {
                let (z, h) = (g.param(s, z), g.param(s, h));
                let per_row = d_loss(g, z, h)?;
                Ok(g.mean(per_row))
            })
        }
        "pair_loss_terms" => {
            let ids: Vec<_> = ["z1", "h2", "z2", "h1"]
                .iter()
                .map(|name| store.add(*name, random_tensor(&mut rng, vec![n, 4]), false))
                .collect::<ncre::Result<_>>()?;
            finite_difference_check(&mut store, step, |g, s| {
                let v: Vec<Var> = ids.iter().map(|&id| g.param(s, id)).collect();
                let per_pair = byol_loss(g, v[0], v[1], v[2], v[3])?;
                Ok(g.mean(per_pair))
            })
        }
        "pair_loss_network" | "pair_loss_network_ablated" => {
            let mut byol = tiny_byol_config();
            if kind.ends_with("ablated") {
                byol = byol.ablated();
            }
            let pair = tiny_pair(seed, byol)?;
            let a = random_tokens(&mut rng, n, TINY_VOCAB);
            let b = random_partners(&mut rng, &a, TINY_VOCAB);
            if pair_relu_margin(&pair, &a, &b)? < KINK_MARGIN {
                return Ok(None);
            }
            let mut online = pair.online.clone();
            finite_difference_check(&mut online, step, |g, s| pair.layout.loss(g, s, &pair.target, &a, &b))
        }
        "cross_entropy" => {
            let k = 4;
            let id = store.add("logits", random_tensor(&mut rng, vec![n, k]).map(|x| 3.0 * x), false)?;
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            finite_difference_check(&mut store, step, |g, s| {
                let logits = g.param(s, id);
                cross_entropy_graph(g, logits, &labels)
            })
        }
        "total_loss" => {
            let k = 4;
            let logits = store.add("logits", random_tensor(&mut rng, vec![n, k]), false)?;
            let z = store.add("z", random_tensor(&mut rng, vec![n, 4]), false)?;
            let h = store.add("h", random_tensor(&mut rng, vec![n, 4]), false)?;
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            let lambda = rng.random_range(0.0..2.0);
            finite_difference_check(&mut store, step, |g, s| {
                let l = g.param(s, logits);
                let cls = cross_entropy_graph(g, l, &labels)?;
                let (z, h) = (g.param(s, z), g.param(s, h));
                let per_row = d_loss(g, z, h)?;
                let cont = g.mean(per_row);
                total_loss_graph(g, cls, cont, lambda)
            })
        }
        other => panic!("unknown gradient case {other}"),
    };
    checked.map(Some)
}

/// Smallest ReLU input in the online projector and predictor.
fn pair_relu_margin(pair: &NetworkPair<f64>, a: &[Vec<usize>], b: &[Vec<usize>]) -> ncre::Result<f64> {
    let layout = &pair.layout;
    let mut g = Graph::new();
    let mut m = f64::INFINITY;
    for batch in [a, b] {
        let f = layout.online_encoder.forward(&mut g, &pair.online, batch)?;
        let pre = layout.online_projector.hidden.forward(&mut g, &pair.online, f)?;
        m = m.min(margin(&g, pre));
        let z = layout.online_projector.forward(&mut g, &pair.online, f)?;
        if let Some(p) = &layout.predictor {
            let pre = p.hidden.forward(&mut g, &pair.online, z)?;
            m = m.min(margin(&g, pre));
        }
    }
    Ok(m)
}

pub fn check_gradients(instances: u64) -> Check {
    let start = Instant::now();
    let step = 1e-5;
    let mut worst: (f64, &str, u64) = (0.0, "", 0);
    let mut rejected = 0;
    for &kind in GRADIENT_KINDS {
        let mut accepted = 0;
        let mut seed = 0;
        while accepted < instances {
            if seed >= 10 * instances {
                return Err(format!("{kind}: only {accepted} usable instances in {seed} draws"));
            }
            let outcome = gradient_case(kind, seed, step).map_err(|x| format!("{kind} #{seed}: {x}"))?;
            seed += 1;
            let Some(err) = outcome else {
                rejected += 1;
                continue;
            };
            accepted += 1;
            if !(err < 1e-4) {
                return Err(format!("{kind} instance {}: relative error {err:.3e} >= 1e-4", seed - 1));
            }
            if err > worst.0 {
                worst = (err, kind, seed - 1);
            }
        }
    }
    let elapsed = start.elapsed();
    if elapsed > Duration::from_secs(30) {
        return Err(format!("took {elapsed:.1?} (limit 30 s)"));
    }
    Ok(format!(
        "{} kinds x {instances} instances, worst {:.2e} ({} #{}), {rejected} draws within {KINK_MARGIN:e} of a ReLU kink skipped, {elapsed:.1?}",
        GRADIENT_KINDS.len(),
        worst.0,
        worst.1,
        worst.2
    ))
}

// ------------------------------------------------------------ pair objectives

fn oracle_cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn random_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn check_negative_cosine(pairs: u64) -> Check {
    let mut rng = rng_for(2024, 1);
    let mut worst_self = 0.0f64;
    let mut worst_scale = 0.0f64;
    for i in 0..pairs {
        let d = rng.random_range(1..12);
        let z = random_vec(&mut rng, d);
        let h = random_vec(&mut rng, d);
        let v = neg_cosine(&z, &h).map_err(e)?;
        if !(-1.0..=1.0).contains(&v) {
            return Err(format!("pair {i}: D = {v} outside [-1, 1]"));
        }
        let graph_v = {
            let mut g = Graph::new();
            let zv = g.constant(Tensor::new(vec![1, d], z.clone()).map_err(e)?);
            let hv = g.constant(Tensor::new(vec![1, d], h.clone()).map_err(e)?);
            let out = d_loss(&mut g, zv, hv).map_err(e)?;
            g.value(out).data()[0]
        };
        if !(-1.0..=1.0).contains(&graph_v) || (graph_v - v).abs() > 1e-12 {
            return Err(format!("pair {i}: graph form {graph_v} vs value form {v}"));
        }
        worst_self = worst_self.max((neg_cosine(&z, &z).map_err(e)? + 1.0).abs());
        let a = 10f64.powf(rng.random_range(-3.0..3.0));
        let b = 10f64.powf(rng.random_range(-3.0..3.0));
        let za: Vec<f64> = z.iter().map(|x| a * x).collect();
        let hb: Vec<f64> = h.iter().map(|x| b * x).collect();
        worst_scale = worst_scale.max((neg_cosine(&za, &hb).map_err(e)? - v).abs());
    }
    if worst_self > 1e-12 {
        return Err(format!("D(z, z) deviates from -1 by {worst_self:.2e}"));
    }
    if worst_scale > 1e-12 {
        return Err(format!("scale invariance off by {worst_scale:.2e}"));
    }
    Ok(format!(
        "{pairs} pairs in [-1,1]; |D(z,z)+1| <= {worst_self:.1e}; scale drift <= {worst_scale:.1e}"
    ))
}

fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    t.rows().map(<[f64]>::to_vec).collect()
}

/// Mean over pairs of `½·D(z₁,h₂) + ½·D(z₂,h₁)`, computed term by term from
/// the branch outputs.
fn pair_loss_oracle(pair: &NetworkPair<f64>, a: &[Vec<usize>], b: &[Vec<usize>]) -> ncre::Result<f64> {
    let mut g = Graph::new();
    let z1 = pair.layout.online_prediction(&mut g, &pair.online, a)?;
    let z2 = pair.layout.online_prediction(&mut g, &pair.online, b)?;
    let h1 = pair.layout.target_projection(&mut g, &pair.online, &pair.target, a)?;
    let h2 = pair.layout.target_projection(&mut g, &pair.online, &pair.target, b)?;
    let (z1, z2, h1, h2) = (rows(g.value(z1)), rows(g.value(z2)), rows(g.value(h1)), rows(g.value(h2)));
    let n = a.len() as f64;
    Ok((0..a.len())
        .map(|i| 0.5 * -oracle_cos(&z1[i], &h2[i]) + 0.5 * -oracle_cos(&z2[i], &h1[i]))
        .sum::<f64>()
        / n)
}

pub fn check_pair_loss_symmetry(instances: u64) -> Check {
    let mut worst_sym = 0.0f64;
    let mut worst_oracle = 0.0f64;
    for seed in 0..instances {
        let pair = tiny_pair(seed, tiny_byol_config()).map_err(e)?;
        let mut rng = rng_for(seed, 7);
        let n = rng.random_range(1..6);
        let a = random_tokens(&mut rng, n, TINY_VOCAB);
        let b = random_partners(&mut rng, &a, TINY_VOCAB);
        let ab = pair.evaluate_loss(&a, &b).map_err(e)?;
        let ba = pair.evaluate_loss(&b, &a).map_err(e)?;
        let oracle = pair_loss_oracle(&pair, &a, &b).map_err(e)?;
        worst_sym = worst_sym.max((ab - ba).abs());
        worst_oracle = worst_oracle.max((ab - oracle).abs());
    }
    if worst_sym > 1e-12 || worst_oracle > 1e-12 {
        return Err(format!("symmetry gap {worst_sym:.2e}, oracle gap {worst_oracle:.2e} (limit 1e-12)"));
    }
    Ok(format!(
        "{instances} instances; symmetry gap {worst_sym:.1e}, oracle gap {worst_oracle:.1e}"
    ))
}

// ---------------------------------------------------------------------- EMA

fn perturb(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, f: impl Fn(&mut ChaCha8Rng) -> f64) {
    for p in store.iter_mut() {
        for x in p.tensor.data_mut() {
            *x = f(rng);
        }
    }
}

fn diff_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `(target, online)` tensors of every corresponding parameter.
fn ema_pairs(pair: &NetworkPair<f64>) -> Vec<(Vec<f64>, Vec<f64>)> {
    pair.target
        .iter()
        .map(|t| {
            let online_name = t.name.replacen("target.", "online.", 1);
            let o = pair.online.by_name(&online_name).expect("online counterpart");
            (t.tensor.data().to_vec(), o.tensor.data().to_vec())
        })
        .collect()
}

pub fn check_ema_contracts() -> Check {
    let mut rng = rng_for(31, 0);
    // δ = 1 keeps ξ, δ = 0 copies θ, both bit for bit.
    for (delta, name) in [(1.0, "fixpoint"), (0.0, "copy")] {
        let mut pair = tiny_pair(5, ByolConfig { delta, ..tiny_byol_config() }).map_err(e)?;
        perturb(&mut pair.online, &mut rng, |r| r.random_range(-2.0..2.0));
        let before = ema_pairs(&pair);
        pair.ema_update();
        for ((xi0, theta), (xi1, theta1)) in before.iter().zip(ema_pairs(&pair)) {
            let expected = if delta == 1.0 { xi0 } else { theta };
            let same = expected.iter().zip(&xi1).all(|(x, y)| x.to_bits() == y.to_bits());
            if !same || theta1 != *theta {
                return Err(format!("delta={delta} {name} is not bit-exact"));
            }
        }
    }

    // With δ = ½ and small integers every iterate is exactly representable,
    // so the geometric decay holds bit for bit per parameter.
    let mut pair = tiny_pair(6, ByolConfig { delta: 0.5, ..tiny_byol_config() }).map_err(e)?;
    perturb(&mut pair.online, &mut rng, |r| r.random_range(-8i32..=8) as f64);
    perturb(&mut pair.target, &mut rng, |r| r.random_range(-8i32..=8) as f64);
    let start: Vec<f64> = ema_pairs(&pair).iter().map(|(xi, th)| diff_norm(xi, th)).collect();
    let steps = 40;
    for t in 1..=steps {
        pair.ema_update();
        for (j, (xi, th)) in ema_pairs(&pair).iter().enumerate() {
            let expected = 0.5f64.powi(t) * start[j];
            if diff_norm(xi, th).to_bits() != expected.to_bits() {
                return Err(format!("dyadic decay: parameter {j} at t={t}: {} vs {expected}", diff_norm(xi, th)));
            }
        }
    }

    // General δ: the same law up to rounding, which grows by at most a few
    // ulps of max(|ξ₀|, |θ|) per step.
    let mut worst = 0.0f64;
    for delta in [0.9, 0.99, 0.3] {
        let mut xi: Vec<f64> = random_vec(&mut rng, 50);
        let theta: Vec<f64> = random_vec(&mut rng, 50);
        let xi0 = xi.clone();
        for t in 1..=60 {
            ema_in_place(&mut xi, &theta, delta);
            for k in 0..xi.len() {
                let expected = delta.powi(t) * (xi0[k] - theta[k]);
                let bound = 4.0 * t as f64 * f64::EPSILON * xi0[k].abs().max(theta[k].abs());
                worst = worst.max(((xi[k] - theta[k]) - expected).abs() / bound);
            }
        }
    }
    if worst > 1.0 {
        return Err(format!("geometric decay exceeds the rounding bound by {worst:.2}x"));
    }
    Ok(format!(
        "delta=1 fixpoint and delta=0 copy bit-exact; delta=1/2 decay bit-exact over {steps} steps; general delta within {:.0}% of the rounding bound",
        worst * 100.0
    ))
}

// ------------------------------------------------------------------ fixture

/// The synthetic fixture trained end to end with default settings.
pub struct FixtureRun {
    pub table: LabelTable,
    pub split: DatasetSplit,
    pub cfg: PipelineConfig,
    pub run: RunOutput<f64>,
    pub elapsed: Duration,
    pub dir: tempfile::TempDir,
}

pub fn fixture_run_config() -> RunConfig {
    RunConfig {
        synth: true,
        ..RunConfig::default()
    }
}

pub fn fixture_data() -> ncre::Result<(LabelTable, DatasetSplit)> {
    fixture_run_config().load_data()
}

impl FixtureRun {
    pub fn train() -> Result<Self, String> {
        let rc = fixture_run_config();
        let dir = tempfile::tempdir().map_err(e)?;
        let start = Instant::now();
        let (table, split) = rc.load_data().map_err(e)?;
        let run = pipeline::run_pipeline::<f64>(&split, &table, &rc.pipeline, Some(dir.path())).map_err(e)?;
        Ok(Self {
            table,
            split,
            cfg: rc.pipeline,
            run,
            elapsed: start.elapsed(),
            dir,
        })
    }

    pub fn stage(&self, i: usize) -> &StageArtifacts<f64> {
        &self.run.stages[i]
    }
}

pub fn check_end_to_end(fx: &FixtureRun) -> Check {
    let report = &fx.run.report;
    let written = std::fs::read_to_string(fx.dir.path().join(pipeline::REPORT_FILE)).map_err(e)?;
    if written != report.to_tsv() {
        return Err("report.tsv differs from the in-memory report".into());
    }
    let fixture = fixtures_dir().join("end_to_end_report.tsv");
    if blessing() {
        std::fs::write(&fixture, &written).map_err(e)?;
    }
    let expected = std::fs::read_to_string(&fixture).map_err(|x| format!("{}: {x}", fixture.display()))?;
    if written != expected {
        return Err(format!("report differs from {}", fixture.display()));
    }
    if !(report.macro_f1 >= 0.95) {
        return Err(format!("macro-F1 {:.4} < 0.95", report.macro_f1));
    }
    if fx.elapsed >= Duration::from_secs(300) {
        return Err(format!("took {:.1?} (limit 5 min)", fx.elapsed));
    }
    Ok(format!(
        "8x200 synthetic, batch 64: macro-F1 {:.4}, {:.1?}, report matches fixture",
        report.macro_f1, fx.elapsed
    ))
}

pub fn check_freeze_cascade(fx: &FixtureRun) -> Check {
    let s1 = &fx.stage(0).checkpoint;
    let s2 = &fx.stage(1).checkpoint;
    let s3 = &fx.stage(2).checkpoint;
    let unchanged = |name: &str, tensor: &Tensor<f64>, stage: &str, store: &ParamStore<f64>, frozen: bool| -> Result<(), String> {
        let p = store.by_name(name).ok_or_else(|| format!("{stage} lacks {name}"))?;
        if !p.tensor.bit_eq(tensor) {
            return Err(format!("{name} changed in {stage}"));
        }
        if frozen && !p.frozen {
            return Err(format!("{name} is not frozen in {stage}"));
        }
        Ok(())
    };
    let stage1: Vec<_> = s1.iter().filter(|p| p.name.starts_with("encoder.")).collect();
    for p in &stage1 {
        let online = format!("online.{}", p.name);
        unchanged(&online, &p.tensor, "stage2", s2, true)?;
        unchanged(&online, &p.tensor, "stage3", s3, true)?;
        // The target encoder starts as the same copy and the EMA of equal
        // values is the identity.
        let target = format!("target.{}", p.name);
        unchanged(&target, &p.tensor, "stage2", s2, false)?;
        unchanged(&target, &p.tensor, "stage3", s3, true)?;
    }
    for p in s2.iter() {
        unchanged(&p.name, &p.tensor, "stage3", s3, true)?;
    }
    // The library's own hand-off list must agree.
    for (name, tensor) in pipeline::frozen_handoffs(&fx.run).map_err(e)? {
        unchanged(&name, &tensor, "stage3", s3, true)?;
    }
    Ok(format!(
        "{} stage-1 tensors bit-identical through stages 2-3; {} stage-2 tensors bit-identical in stage 3",
        stage1.len(),
        s2.len()
    ))
}

pub fn check_ema_replay(fx: &FixtureRun) -> Check {
    let mut replay: Option<ParamStore<f64>> = None;
    let mut steps = 0;
    let mut failure: Option<String> = None;
    let delta = fx.cfg.byol.delta;
    let stage2 = pipeline::stage2_noncontrastive_observed(fx.stage(0), &fx.split, &fx.cfg, &mut |step, pair| {
        if failure.is_some() {
            return;
        }
        if !pair.target.all_grads_zero() {
            failure = Some(format!("target received a gradient at step {step}"));
            return;
        }
        let Some(xi) = replay.as_mut() else {
            replay = Some(pair.target.clone());
            return;
        };
        for p in xi.iter_mut() {
            let online = pair.online.by_name(&p.name.replacen("target.", "online.", 1)).expect("counterpart");
            ema_in_place(p.tensor.data_mut(), online.tensor.data(), delta);
        }
        if !xi.bit_eq(&pair.target) {
            failure = Some(format!("target diverges from the replay at step {step}"));
        }
        steps = step;
    })
    .map_err(e)?;
    if let Some(f) = failure {
        return Err(f);
    }
    if !stage2.checkpoint.bit_eq(&fx.stage(1).checkpoint) {
        return Err("observed stage 2 differs from the pipeline's stage 2".into());
    }
    Ok(format!("target equals the EMA replay of the online trajectory at all {steps} steps"))
}

pub fn check_metrics_oracle(matrices: u64) -> Check {
    let mut rng = rng_for(77, 0);
    for m in 0..matrices {
        let k = rng.random_range(1..8);
        let n = rng.random_range(0..60);
        let pairs: Vec<(usize, usize)> = (0..n).map(|_| (rng.random_range(0..k), rng.random_range(0..k))).collect();
        let cm = ConfusionMatrix::from_pairs(k, pairs.iter().copied()).map_err(e)?;
        for (c, row) in per_class_prf(&cm, None).iter().enumerate() {
            let tp = pairs.iter().filter(|&&(t, p)| t == c && p == c).count() as f64;
            let truth = pairs.iter().filter(|&&(t, _)| t == c).count() as f64;
            let pred = pairs.iter().filter(|&&(_, p)| p == c).count() as f64;
            let p = if pred > 0.0 { tp / pred } else { 0.0 };
            let r = if truth > 0.0 { tp / truth } else { 0.0 };
            let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
            let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;
            if !(close(row.precision, p) && close(row.recall, r) && close(row.f1, f)) {
                return Err(format!("matrix {m} class {c}: got ({}, {}, {}), want ({p}, {r}, {f})", row.precision, row.recall, row.f1));
            }
            if row.support != truth as u64 || row.predicted != pred as u64 {
                return Err(format!("matrix {m} class {c}: support/predicted counts"));
            }
        }
    }
    let mut cells = Vec::new();
    for (name, p, r, printed) in [("treats", 0.75, 1.00, 0.86), ("compared_with", 0.67, 1.00, 0.80)] {
        let f = metrics::f1_score(p, r);
        if (f - printed).abs() > 0.005 {
            return Err(format!("{name}: F1({p}, {r}) = {f:.4}, printed {printed}"));
        }
        cells.push(format!("{name} {f:.3}~{printed}"));
    }
    Ok(format!("{matrices} random matrices match brute force; {}", cells.join(", ")))
}

pub fn check_pairing(epochs: u64) -> Check {
    let (_, split) = fixture_data().map_err(e)?;
    let labels: Vec<usize> = split.train.iter().map(|s| s.predicate).collect();
    let sampler = PairSampler::new(&labels, 64, 9).map_err(e)?;
    let again = PairSampler::new(&labels, 64, 9).map_err(e)?;
    let mut batches = 0;
    for epoch in 0..epochs {
        let bs = sampler.epoch(epoch);
        if bs != again.epoch(epoch) {
            return Err(format!("epoch {epoch} is not deterministic"));
        }
        if epoch > 0 && bs == sampler.epoch(epoch - 1) {
            return Err(format!("epoch {epoch} repeats the previous epoch"));
        }
        let mut anchors = vec![0usize; labels.len()];
        for (i, b) in bs.iter().enumerate() {
            if !validate_pair_batch(b, &labels) {
                return Err(format!("epoch {epoch} batch {i} fails validation"));
            }
            if b.len() > 64 {
                return Err(format!("epoch {epoch} batch {i} has {} pairs", b.len()));
            }
            b.batch_a.iter().for_each(|&a| anchors[a] += 1);
        }
        // Every sample anchors once; a topped-up pair may add one more.
        let extra: usize = anchors.iter().map(|&c| c.saturating_sub(1)).sum();
        if anchors.contains(&0) || extra > 1 {
            return Err(format!("epoch {epoch}: coverage broken"));
        }
        batches += bs.len();
    }
    Ok(format!("{batches} batches over {epochs} epochs valid, covering and deterministic"))
}

/// Per-step diagnostics of a stage-2 run on the training split.
pub struct Stage2Trace {
    pub final_anisotropy: f64,
    pub max_cross_class: f64,
    pub min_rank: f64,
    pub history: Vec<pipeline::EpochRecord>,
}

pub fn trace_stage2(fx: &FixtureRun, byol: ByolConfig) -> ncre::Result<Stage2Trace> {
    let cfg = PipelineConfig { byol, ..fx.cfg.clone() };
    let tokens = pipeline::tokenize_all(&fx.split.train, &cfg.tokenizer);
    let labels: Vec<usize> = fx.split.train.iter().map(|s| s.predicate).collect();
    let seed = 17;
    let mut max_cross = f64::NEG_INFINITY;
    let mut min_rank = f64::INFINITY;
    let mut last = 0.0;
    let mut err = None;
    let out = pipeline::stage2_noncontrastive_observed(fx.stage(0), &fx.split, &cfg, &mut |_, pair| {
        let measured = (|| -> ncre::Result<()> {
            let reps = pipeline::represent_all(pair, &tokens, 256)?;
            max_cross = max_cross.max(metrics::cross_class_anisotropy(&reps, &labels, seed)?.to_owned());
            min_rank = min_rank.min(metrics::effective_rank(&reps)?.value);
            last = metrics::anisotropy(&reps, seed)?;
            Ok(())
        })();
        if let Err(x) = measured {
            err.get_or_insert(x);
        }
    })?;
    if let Some(x) = err {
        return Err(x);
    }
    Ok(Stage2Trace {
        final_anisotropy: last,
        max_cross_class: max_cross,
        min_rank,
        history: out.history,
    })
}

pub fn pilot_text(byol: &[pipeline::EpochRecord], ablated: &[pipeline::EpochRecord]) -> String {
    let mut s = String::from("run\tepoch\tmean_loss\tanisotropy\teffective_rank\n");
    for (name, h) in [("byol", byol), ("ablated", ablated)] {
        for r in h {
            s.push_str(&format!(
                "{name}\t{}\t{:.6}\t{:.6}\t{:.6}\n",
                r.epoch, r.mean_loss, r.anisotropy, r.effective_rank
            ));
        }
    }
    s
}

pub fn check_collapse_contrast(fx: &FixtureRun) -> Check {
    let byol = trace_stage2(fx, fx.cfg.byol).map_err(e)?;
    let ablated = trace_stage2(fx, fx.cfg.byol.ablated()).map_err(e)?;
    if !(byol.min_rank > 2.0) {
        return Err(format!("BYOL effective rank fell to {:.3}", byol.min_rank));
    }
    if !(byol.max_cross_class < 0.99) {
        return Err(format!("BYOL cross-class anisotropy reached {:.4}", byol.max_cross_class));
    }
    if !(ablated.final_anisotropy > 0.99) {
        return Err(format!("ablated run ends at anisotropy {:.4}", ablated.final_anisotropy));
    }
    let pilot = fixtures_dir().join("collapse_pilot.tsv");
    let text = pilot_text(&byol.history, &ablated.history);
    if blessing() {
        std::fs::write(&pilot, &text).map_err(e)?;
    }
    let pilot_note = match std::fs::read_to_string(&pilot) {
        Ok(committed) if committed == text => "pilot reproduced",
        Ok(_) => "pilot history differs on this platform",
        Err(_) => "pilot fixture missing",
    };
    Ok(format!(
        "BYOL: min rank {:.2}, max cross-class anisotropy {:.4}; ablated: anisotropy {:.4}; {pilot_note}",
        byol.min_rank, byol.max_cross_class, ablated.final_anisotropy
    ))
}

pub fn check_batch_sweep(fx: &FixtureRun) -> Check {
    let mut parts = Vec::new();
    for bs in [8, 64, 128, 256] {
        let dir = tempfile::tempdir().map_err(e)?;
        let cfg = PipelineConfig {
            batch_size: bs,
            ..fx.cfg.clone()
        };
        let run = pipeline::run_pipeline::<f64>(&fx.split, &fx.table, &cfg, Some(dir.path()))
            .map_err(|x| format!("batch {bs}: {x}"))?;
        let text = std::fs::read_to_string(dir.path().join(pipeline::REPORT_FILE)).map_err(|x| format!("batch {bs}: {x}"))?;
        let parsed = metrics::EvalReport::parse_tsv(&text).map_err(|x| format!("batch {bs}: {x}"))?;
        if parsed.rows.len() != fx.table.len() {
            return Err(format!("batch {bs}: report has {} rows", parsed.rows.len()));
        }
        parts.push(format!("{bs}: F1 {:.3}", run.report.macro_f1));
    }
    Ok(format!("all four reports written ({})", parts.join(", ")))
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).into_iter().flatten().flatten() {
            let path = entry.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path.strip_prefix(root).expect("under root").to_path_buf());
            }
        }
    }
    out.sort();
    out
}

pub fn check_determinism(bin: &Path) -> Check {
    let tmp = tempfile::tempdir().map_err(e)?;
    let mut dirs = Vec::new();
    for name in ["first", "second"] {
        let out = tmp.path().join(name);
        let status = std::process::Command::new(bin)
            .args(["train", "--synth", "--out"])
            .arg(&out)
            .stdout(std::process::Stdio::null())
            .status()
            .map_err(e)?;
        if !status.success() {
            return Err(format!("train exited with {status}"));
        }
        dirs.push(out);
    }
    // run.txt records the output directory itself.
    let files: Vec<PathBuf> = files_under(&dirs[0])
        .into_iter()
        .filter(|p| p != Path::new("run.txt"))
        .collect();
    if files_under(&dirs[1]).into_iter().filter(|p| p != Path::new("run.txt")).ne(files.iter().cloned()) {
        return Err("the two runs wrote different file sets".into());
    }
    let mut checkpoints = 0;
    for f in &files {
        let a = std::fs::read(dirs[0].join(f)).map_err(e)?;
        let b = std::fs::read(dirs[1].join(f)).map_err(e)?;
        if a != b {
            return Err(format!("{} differs", f.display()));
        }
        checkpoints += usize::from(f.ends_with(pipeline::CHECKPOINT_FILE));
    }
    if checkpoints != 3 || !files.iter().any(|f| f == Path::new(pipeline::REPORT_FILE)) {
        return Err("expected a report and three checkpoints".into());
    }
    Ok(format!("{} files byte-identical, including the report and {checkpoints} checkpoints", files.len()))
}

pub fn representation_tap_default() -> RepresentationTap {
    ByolConfig::default().tap
}
