//! Sentence/predicate corpora: label tables, TSV ingestion, equal
//! three-way splits and a synthetic generator.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::rng_for;

/// Default label set: 28 SemMedDB predicates in report order.
pub const DEFAULT_PREDICATES: [&str; 28] = [
    "complicates",
    "inhibits_than",
    "stimulates",
    "augments",
    "compared_with",
    "higher_than",
    "associated_with",
    "causes",
    "affects",
    "disrupts",
    "occurs_in",
    "neg_affects",
    "produces",
    "manifestation_of",
    "process_of",
    "interacts_with",
    "precedes",
    "method_of",
    "neg_interacts_with",
    "diagnoses",
    "treats",
    "uses",
    "administered_to",
    "prevents",
    "part_of",
    "location_of",
    "isa",
    "coexists_with",
];

/// Ordered predicate names; position is the label id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelTable {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for LabelTable {
    fn default() -> Self {
        Self::new(DEFAULT_PREDICATES.iter().map(|s| s.to_string()).collect()).expect("default table is valid")
    }
}

impl LabelTable {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::LabelTable("label table is empty".into()));
        }
        let mut index = HashMap::with_capacity(names.len());
        for (i, name) in names.iter().enumerate() {
            if name.is_empty() || name.contains(['\t', '\n']) {
                return Err(Error::LabelTable(format!("invalid label name {name:?}")));
            }
            if index.insert(name.clone(), i).is_some() {
                return Err(Error::LabelTable(format!("duplicate label {name:?}")));
            }
        }
        Ok(Self { names, index })
    }

    /// The first `n` default predicates, or `class_0 …` names beyond 28.
    pub fn first_n(n: usize) -> Result<Self> {
        let names = (0..n)
            .map(|i| match DEFAULT_PREDICATES.get(i) {
                Some(name) if n <= DEFAULT_PREDICATES.len() => name.to_string(),
                _ => format!("class_{i}"),
            })
            .collect();
        Self::new(names)
    }

    /// One name per line; blank lines are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        Self::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect(),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        self.names.iter().fold(String::new(), |mut s, n| {
            s.push_str(n);
            s.push('\n');
            s
        })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabeledSentence {
    pub text: String,
    /// Index into the [`LabelTable`].
    pub predicate: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<LabeledSentence>,
    pub eval: Vec<LabeledSentence>,
    pub test: Vec<LabeledSentence>,
}

/// Parses `sentence<TAB>predicate` lines. Unknown predicates are collected
/// and reported together.
pub fn parse_tsv(text: &str, table: &LabelTable) -> Result<Vec<LabeledSentence>> {
    let body = text.strip_suffix('\n').unwrap_or(text);
    if body.is_empty() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    let mut unknown = Vec::new();
    for (i, line) in body.split('\n').enumerate() {
        let lineno = i + 1;
        let mut cols = line.split('\t');
        let (Some(sentence), Some(predicate), None) = (cols.next(), cols.next(), cols.next()) else {
            return Err(Error::Parse {
                line: lineno,
                message: "expected exactly two tab-separated columns".into(),
            });
        };
        if sentence.trim().is_empty() {
            return Err(Error::Parse {
                line: lineno,
                message: "empty sentence".into(),
            });
        }
        match table.id_of(predicate) {
            Some(id) => out.push(LabeledSentence {
                text: sentence.to_string(),
                predicate: id,
            }),
            None => unknown.push((lineno, predicate.to_string())),
        }
    }
    if !unknown.is_empty() {
        return Err(Error::UnknownLabels { offenders: unknown });
    }
    Ok(out)
}

pub fn load_tsv(path: &Path, table: &LabelTable) -> Result<Vec<LabeledSentence>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_tsv(&text, table)
}

/// Inverse of [`parse_tsv`]: LF-terminated lines.
pub fn to_tsv(samples: &[LabeledSentence], table: &LabelTable) -> Result<String> {
    let mut out = String::new();
    for s in samples {
        let name = table
            .name(s.predicate)
            .ok_or_else(|| Error::LabelTable(format!("label id {} outside table of {}", s.predicate, table.len())))?;
        writeln!(out, "{}\t{}", s.text, name).expect("writing to a String cannot fail");
    }
    Ok(out)
}

pub fn write_tsv(path: &Path, samples: &[LabeledSentence], table: &LabelTable) -> Result<()> {
    std::fs::write(path, to_tsv(samples, table)?).map_err(|e| Error::io(path, e))
}

/// Seeded shuffle, then contiguous thirds. A remainder goes to train first,
/// then eval.
pub fn split_equal(data: &[LabeledSentence], seed: u64) -> Result<DatasetSplit> {
    let n = data.len();
    if n < 3 {
        return Err(Error::contract(format!("need at least 3 samples to split, got {n}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_for(seed, 0));
    let (base, rem) = (n / 3, n % 3);
    let n_train = base + usize::from(rem > 0);
    let n_eval = base + usize::from(rem > 1);
    let take = |range: std::ops::Range<usize>| idx[range].iter().map(|&i| data[i].clone()).collect::<Vec<_>>();
    Ok(DatasetSplit {
        train: take(0..n_train),
        eval: take(n_train..n_train + n_eval),
        test: take(n_train + n_eval..n),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub per_class: usize,
    pub vocab_per_class: usize,
    /// Fraction of each class vocabulary drawn from a shared pool.
    pub overlap: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 8,
            per_class: 200,
            vocab_per_class: 12,
            overlap: 0.3,
            seed: crate::DEFAULT_SEED,
        }
    }
}

pub const SYNTH_MIN_LEN: usize = 5;
pub const SYNTH_MAX_LEN: usize = 12;

/// Word `j` private to class `c`.
pub fn class_word(c: usize, j: usize) -> String {
    format!("c{c}w{j}")
}

/// Word `j` of the pool shared between classes.
pub fn shared_word(j: usize) -> String {
    format!("shared{j}")
}

/// Per-class word lists used by [`synth_generate`].
pub fn synth_vocabularies(cfg: &SynthConfig) -> Vec<Vec<String>> {
    let n_shared = ((cfg.overlap.clamp(0.0, 1.0) * cfg.vocab_per_class as f64).round() as usize).min(cfg.vocab_per_class);
    let pool: Vec<String> = (0..cfg.vocab_per_class).map(shared_word).collect();
    let mut rng = rng_for(cfg.seed, 1);
    (0..cfg.num_classes)
        .map(|c| {
            let mut words: Vec<String> = (0..cfg.vocab_per_class - n_shared).map(|j| class_word(c, j)).collect();
            words.extend(pool.choose_multiple(&mut rng, n_shared).cloned());
            words
        })
        .collect()
}

/// Class-balanced synthetic corpus: `per_class` sentences of 5–12 tokens for
/// each of `num_classes` labels, drawn from that class's vocabulary.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Vec<LabeledSentence>> {
    if cfg.num_classes < 2 || cfg.per_class < 2 {
        return Err(Error::Config("synthetic data needs >= 2 classes and >= 2 samples per class".into()));
    }
    if cfg.vocab_per_class == 0 || !(0.0..=1.0).contains(&cfg.overlap) {
        return Err(Error::Config("vocab_per_class must be positive and overlap in [0, 1]".into()));
    }
    let vocabs = synth_vocabularies(cfg);
    let mut rng = rng_for(cfg.seed, 2);
    let mut out = Vec::with_capacity(cfg.num_classes * cfg.per_class);
    for (c, words) in vocabs.iter().enumerate() {
        for _ in 0..cfg.per_class {
            let len = rng.random_range(SYNTH_MIN_LEN..=SYNTH_MAX_LEN);
            let text = (0..len)
                .map(|_| words[rng.random_range(0..words.len())].as_str())
                .collect::<Vec<_>>()
                .join(" ");
            out.push(LabeledSentence { text, predicate: c });
        }
    }
    Ok(out)
}

/// FNV-1a over the samples; identifies a dataset in stage snapshots.
pub fn fingerprint(samples: &[LabeledSentence]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut feed = |bytes: &[u8]| {
        for &b in bytes {
            h = (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    for s in samples {
        feed(s.text.as_bytes());
        feed(&[0]);
        feed(&(s.predicate as u64).to_le_bytes());
    }
    h
}
