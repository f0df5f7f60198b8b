//! Classification metrics and representation diagnostics.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;

use crate::autodiff::NORM_EPS;
use crate::data::LabelTable;
use crate::error::{Error, Result};
use crate::nn::rng_for;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Exact pairwise statistics up to this many vectors; sampled beyond.
pub const EXACT_PAIR_LIMIT: usize = 512;
pub const SAMPLED_PAIRS: usize = 10_000;

/// Argmax with ties broken toward the lowest index.
pub fn predict<T: Scalar>(logits: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in logits.iter().enumerate().skip(1) {
        if x > logits[best] {
            best = i;
        }
    }
    best
}

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn from_pairs(k: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut cm = Self::new(k);
        for (t, p) in pairs {
            cm.record(t, p)?;
        }
        Ok(cm)
    }

    pub fn record(&mut self, truth: usize, predicted: usize) -> Result<()> {
        if truth >= self.k || predicted >= self.k {
            return Err(Error::Dimension {
                op: "confusion matrix",
                left: vec![self.k],
                right: vec![truth.max(predicted)],
            });
        }
        self.counts[truth * self.k + predicted] += 1;
        Ok(())
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.k + predicted]
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn support(&self, class: usize) -> u64 {
        (0..self.k).map(|p| self.get(class, p)).sum()
    }

    pub fn predicted(&self, class: usize) -> u64 {
        (0..self.k).map(|t| self.get(t, class)).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    pub name: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    pub predicted: u64,
    /// Set when a zero denominator forced some metric to 0.
    pub undefined: bool,
}

impl ClassMetrics {
    /// The class occurs in the evaluation, as a truth or as a prediction.
    pub fn present(&self) -> bool {
        self.support > 0 || self.predicted > 0
    }
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Per-class precision, recall and F1 in class-index order. Names come from
/// `table` when given, otherwise `class_<k>`.
pub fn per_class_prf(cm: &ConfusionMatrix, table: Option<&LabelTable>) -> Vec<ClassMetrics> {
    (0..cm.num_classes())
        .map(|k| {
            let tp = cm.get(k, k);
            let support = cm.support(k);
            let predicted = cm.predicted(k);
            let p = ratio(tp, predicted);
            let r = ratio(tp, support);
            let precision = p.unwrap_or(0.0);
            let recall = r.unwrap_or(0.0);
            let name = table
                .and_then(|t| t.name(k))
                .map_or_else(|| format!("class_{k}"), str::to_string);
            ClassMetrics {
                name,
                precision,
                recall,
                f1: f1_score(precision, recall),
                support,
                predicted,
                undefined: p.is_none() || r.is_none(),
            }
        })
        .collect()
}

/// Unweighted mean of `(precision, recall, f1)` over the given rows.
pub fn macro_average(rows: &[ClassMetrics]) -> (f64, f64, f64) {
    if rows.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let n = rows.len() as f64;
    let (p, r, f) = rows
        .iter()
        .fold((0.0, 0.0, 0.0), |(p, r, f), m| (p + m.precision, r + m.recall, f + m.f1));
    (p / n, r / n, f / n)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

impl EvalReport {
    /// Macro averages cover the classes present in the evaluation; absent
    /// classes keep their (zero, flagged) rows.
    pub fn from_confusion(cm: &ConfusionMatrix, table: Option<&LabelTable>) -> Self {
        let rows = per_class_prf(cm, table);
        let present: Vec<ClassMetrics> = rows.iter().filter(|r| r.present()).cloned().collect();
        let (macro_precision, macro_recall, macro_f1) = if present.is_empty() {
            macro_average(&rows)
        } else {
            macro_average(&present)
        };
        Self {
            rows,
            macro_precision,
            macro_recall,
            macro_f1,
        }
    }

    pub fn total_support(&self) -> u64 {
        self.rows.iter().map(|r| r.support).sum()
    }

    /// Header, one row per class in label order, then the `average` row.
    /// Values are printed with three decimals.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("predicate\tprecision\trecall\tf1\tsupport\n");
        for r in &self.rows {
            writeln!(out, "{}\t{:.3}\t{:.3}\t{:.3}\t{}", r.name, r.precision, r.recall, r.f1, r.support).unwrap();
        }
        writeln!(
            out,
            "average\t{:.3}\t{:.3}\t{:.3}\t{}",
            self.macro_precision,
            self.macro_recall,
            self.macro_f1,
            self.total_support()
        )
        .unwrap();
        out
    }

    /// Reads a report written by [`EvalReport::to_tsv`]. Values come back
    /// at their printed precision.
    pub fn parse_tsv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, "predicate\tprecision\trecall\tf1\tsupport")) => {}
            _ => {
                return Err(Error::Parse {
                    line: 1,
                    message: "missing report header".into(),
                })
            }
        }
        let mut rows = Vec::new();
        let mut average = None;
        for (i, line) in lines {
            let bad = |message: &str| Error::Parse {
                line: i + 1,
                message: message.to_string(),
            };
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 5 {
                return Err(bad("expected 5 columns"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad("bad number"));
            let support = cols[4].parse::<u64>().map_err(|_| bad("bad support"))?;
            let (p, r, f) = (num(cols[1])?, num(cols[2])?, num(cols[3])?);
            if cols[0] == "average" && average.is_none() && i + 1 == text.lines().count() {
                average = Some((p, r, f));
            } else {
                rows.push(ClassMetrics {
                    name: cols[0].to_string(),
                    precision: p,
                    recall: r,
                    f1: f,
                    support,
                    predicted: 0,
                    undefined: false,
                });
            }
        }
        let (macro_precision, macro_recall, macro_f1) = average.ok_or_else(|| Error::Parse {
            line: text.lines().count(),
            message: "missing average row".into(),
        })?;
        Ok(Self {
            rows,
            macro_precision,
            macro_recall,
            macro_f1,
        })
    }
}

pub fn emit_report(report: &EvalReport, path: &Path) -> Result<()> {
    std::fs::write(path, report.to_tsv()).map_err(|e| Error::io(path, e))
}

fn normalized_rows<T: Scalar>(reps: &Tensor<T>) -> Result<Vec<Vec<T>>> {
    let (n, _) = reps.dims2()?;
    if n < 2 {
        return Err(Error::contract("need at least two representations"));
    }
    reps.rows()
        .map(|row| {
            let norm = row.iter().map(|&x| x * x).sum::<T>().sqrt();
            if !(norm > T::lit(NORM_EPS)) {
                return Err(Error::DegenerateVector {
                    context: "anisotropy",
                    norm: norm.to_f64_lossy(),
                });
            }
            Ok(row.iter().map(|&x| x / norm).collect())
        })
        .collect()
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Mean cosine similarity over the index pairs accepted by `keep`.
fn mean_pair_cosine<T: Scalar>(unit: &[Vec<T>], seed: u64, keep: impl Fn(usize, usize) -> bool) -> Result<T> {
    let n = unit.len();
    let mut total = T::zero();
    let mut count = 0usize;
    if n <= EXACT_PAIR_LIMIT {
        for i in 0..n {
            for j in i + 1..n {
                if keep(i, j) {
                    total += dot(&unit[i], &unit[j]);
                    count += 1;
                }
            }
        }
    } else {
        let mut rng = rng_for(seed, 0);
        let mut attempts = 0usize;
        while count < SAMPLED_PAIRS && attempts < SAMPLED_PAIRS * 100 {
            attempts += 1;
            let i = rng.random_range(0..n);
            let j = rng.random_range(0..n);
            if i != j && keep(i, j) {
                total += dot(&unit[i], &unit[j]);
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::contract("no pairs to average"));
    }
    Ok((total / T::lit(count as f64)).max(-T::one()).min(T::one()))
}

/// Mean pairwise cosine similarity of the rows of `reps` (`[n×d]`, n ≥ 2).
pub fn anisotropy<T: Scalar>(reps: &Tensor<T>, seed: u64) -> Result<T> {
    let unit = normalized_rows(reps)?;
    mean_pair_cosine(&unit, seed, |_, _| true)
}

/// Mean cosine similarity over pairs whose labels differ.
pub fn cross_class_anisotropy<T: Scalar>(reps: &Tensor<T>, labels: &[usize], seed: u64) -> Result<T> {
    let unit = normalized_rows(reps)?;
    if labels.len() != unit.len() {
        return Err(Error::Dimension {
            op: "cross_class_anisotropy",
            left: vec![unit.len()],
            right: vec![labels.len()],
        });
    }
    mean_pair_cosine(&unit, seed, |i, j| labels[i] != labels[j])
}

#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveRank {
    pub value: f64,
    /// Descending singular values of the centered matrix.
    pub singular_values: Vec<f64>,
    /// The centered matrix was numerically zero.
    pub collapsed: bool,
}

/// Entropy effective rank `exp(−Σ pᵢ ln pᵢ)` with `pᵢ = σᵢ / Σσ`, computed on
/// the row-centered matrix.
pub fn effective_rank<T: Scalar>(reps: &Tensor<T>) -> Result<EffectiveRank> {
    let (n, d) = reps.dims2()?;
    if n < 2 {
        return Err(Error::contract("effective rank needs at least two rows"));
    }
    let raw: Vec<f64> = reps.data().iter().map(|x| x.to_f64_lossy()).collect();
    let scale = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut m = DMatrix::from_row_slice(n, d, &raw);
    for c in 0..d {
        let mean = m.column(c).mean();
        m.column_mut(c).add_scalar_mut(-mean);
    }
    let mut sv: Vec<f64> = m.svd(false, false).singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    let sigma_max = sv.first().copied().unwrap_or(0.0);
    let total: f64 = sv.iter().sum();
    if !(total > f64::EPSILON * scale.max(f64::MIN_POSITIVE) * (n.max(d) as f64)) {
        return Ok(EffectiveRank {
            value: 1.0,
            singular_values: sv,
            collapsed: true,
        });
    }
    // Singular values below the usual numerical-rank tolerance count as zero.
    let tol = sigma_max * f64::EPSILON * n.max(d) as f64;
    let kept: f64 = sv.iter().filter(|&&s| s > tol).sum();
    let entropy: f64 = sv
        .iter()
        .filter(|&&s| s > tol)
        .map(|&s| {
            let p = s / kept;
            -p * p.ln()
        })
        .sum();
    Ok(EffectiveRank {
        value: entropy.exp(),
        singular_values: sv,
        collapsed: false,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticsSnapshot {
    pub anisotropy: f64,
    pub effective_rank: f64,
    pub singular_values: Vec<f64>,
    pub collapsed: bool,
}

pub fn diagnose<T: Scalar>(reps: &Tensor<T>, seed: u64) -> Result<DiagnosticsSnapshot> {
    let rank = effective_rank(reps)?;
    Ok(DiagnosticsSnapshot {
        anisotropy: anisotropy(reps, seed)?.to_f64_lossy(),
        effective_rank: rank.value,
        singular_values: rank.singular_values,
        collapsed: rank.collapsed,
    })
}
