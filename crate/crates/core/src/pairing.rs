//! Positive-pair minibatches for supervised non-contrastive training.
//!
//! Position `i` of `batch_a` and `batch_b` holds two distinct samples with
//! the same label. Positions cycle through the classes in a seeded order, so
//! each batch mixes as many labels as it can.

use std::collections::{BTreeMap, VecDeque};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::LabeledSentence;
use crate::error::{Error, Result};
use crate::nn::rng_for;

/// Two aligned minibatches of sample indices plus their shared labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairBatch {
    pub batch_a: Vec<usize>,
    pub batch_b: Vec<usize>,
    pub labels: Vec<usize>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Deterministic generator of per-epoch pair batches.
#[derive(Debug, Clone)]
pub struct PairSampler {
    /// `(label, member indices)` for classes with at least two samples.
    classes: Vec<(usize, Vec<usize>)>,
    batch_size: usize,
    seed: u64,
}

impl PairSampler {
    pub fn new(labels: &[usize], batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size < 2 {
            return Err(Error::Config(format!("pair batch size must be >= 2, got {batch_size}")));
        }
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &l) in labels.iter().enumerate() {
            by_class.entry(l).or_default().push(i);
        }
        let classes: Vec<_> = by_class.into_iter().filter(|(_, m)| m.len() >= 2).collect();
        if classes.is_empty() {
            return Err(Error::EmptyPairing);
        }
        Ok(Self {
            classes,
            batch_size,
            seed,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Samples that belong to a class with at least two members.
    pub fn eligible_samples(&self) -> usize {
        self.classes.iter().map(|(_, m)| m.len()).sum()
    }

    /// Batches for one pass in which every eligible sample is an anchor
    /// (`batch_a` entry) exactly once.
    pub fn epoch(&self, epoch: u64) -> Vec<PairBatch> {
        let mut rng = rng_for(self.seed, epoch);
        let mut order: Vec<usize> = (0..self.classes.len()).collect();
        order.shuffle(&mut rng);

        let mut anchors: Vec<Vec<usize>> = Vec::with_capacity(self.classes.len());
        let mut partners: Vec<VecDeque<usize>> = Vec::with_capacity(self.classes.len());
        for (_, members) in &self.classes {
            let mut a = members.clone();
            a.shuffle(&mut rng);
            anchors.push(a);
            let mut p = members.clone();
            p.shuffle(&mut rng);
            partners.push(p.into());
        }

        let total = self.eligible_samples();
        let mut positions: Vec<(usize, usize, usize)> = Vec::with_capacity(total + 1);
        let mut cursor = 0;
        while positions.len() < total {
            let c = order[cursor % order.len()];
            cursor += 1;
            let Some(anchor) = anchors[c].pop() else { continue };
            let partner = self.draw_partner(c, anchor, &mut partners[c], &mut rng);
            positions.push((anchor, partner, self.classes[c].0));
        }
        // A lone trailing position is topped up with a resampled pair rather
        // than dropped, so every anchor is kept.
        if positions.len() % self.batch_size == 1 {
            let c = order[cursor % order.len()];
            let members = &self.classes[c].1;
            let anchor = members[rng.random_range(0..members.len())];
            let partner = self.resample(c, anchor, &mut rng);
            positions.push((anchor, partner, self.classes[c].0));
        }

        positions
            .chunks(self.batch_size)
            .filter(|chunk| chunk.len() >= 2)
            .map(|chunk| PairBatch {
                batch_a: chunk.iter().map(|p| p.0).collect(),
                batch_b: chunk.iter().map(|p| p.1).collect(),
                labels: chunk.iter().map(|p| p.2).collect(),
            })
            .collect()
    }

    fn draw_partner(&self, class: usize, anchor: usize, queue: &mut VecDeque<usize>, rng: &mut impl Rng) -> usize {
        match queue.iter().position(|&p| p != anchor) {
            Some(pos) => queue.remove(pos).expect("position is in range"),
            None => self.resample(class, anchor, rng),
        }
    }

    /// Uniform draw, with replacement, of a class member other than `anchor`.
    fn resample(&self, class: usize, anchor: usize, rng: &mut impl Rng) -> usize {
        let members = &self.classes[class].1;
        let others: Vec<usize> = members.iter().copied().filter(|&m| m != anchor).collect();
        others[rng.random_range(0..others.len())]
    }
}

/// First-epoch batches for `dataset`.
pub fn build_pair_batches(dataset: &[LabeledSentence], batch_size: usize, seed: u64) -> Result<Vec<PairBatch>> {
    let labels: Vec<usize> = dataset.iter().map(|s| s.predicate).collect();
    Ok(PairSampler::new(&labels, batch_size, seed)?.epoch(0))
}

/// Checks every [`PairBatch`] invariant against the sample labels.
pub fn validate_pair_batch(batch: &PairBatch, labels: &[usize]) -> bool {
    let n = batch.labels.len();
    if batch.batch_a.len() != n || batch.batch_b.len() != n {
        return false;
    }
    let class_size = |l: usize| labels.iter().filter(|&&x| x == l).count();
    batch
        .batch_a
        .iter()
        .zip(&batch.batch_b)
        .zip(&batch.labels)
        .all(|((&a, &b), &l)| {
            a < labels.len()
                && b < labels.len()
                && labels[a] == l
                && labels[b] == l
                && (a != b || class_size(l) < 2)
        })
}
