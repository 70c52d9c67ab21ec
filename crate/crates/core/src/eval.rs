//! ROUGE-1, ROUGE-2 and ROUGE-L with clipped n-gram counts, no stemming and
//! a single reference per candidate.

use std::collections::HashMap;
use std::fmt;
use std::hash::Hash;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("configuration error: {0}")]
    Config(String),
}

/// Recall, precision and their harmonic mean, each in `[0, 1]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

impl Prf {
    /// Zero denominators give zero scores.
    pub fn from_counts(overlap: usize, candidate_total: usize, reference_total: usize) -> Self {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let recall = ratio(overlap, reference_total);
        let precision = ratio(overlap, candidate_total);
        let f1 = if recall + precision == 0.0 {
            0.0
        } else {
            2.0 * recall * precision / (recall + precision)
        };
        Prf {
            recall,
            precision,
            f1,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub rouge1: Prf,
    pub rouge2: Prf,
    #[serde(rename = "rougeL")]
    pub rouge_l: Prf,
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if n > 0 {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram overlap. `n = 0` scores zero.
pub fn rouge_n<T: Eq + Hash>(candidate: &[T], reference: &[T], n: usize) -> Prf {
    let cand = ngram_counts(candidate, n);
    let refs = ngram_counts(reference, n);
    let overlap = refs
        .iter()
        .map(|(g, &c)| c.min(cand.get(g).copied().unwrap_or(0)))
        .sum();
    Prf::from_counts(overlap, cand.values().sum(), refs.values().sum())
}

/// Length of the longest common subsequence.
pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l<T: Eq>(candidate: &[T], reference: &[T]) -> Prf {
    Prf::from_counts(lcs_len(candidate, reference), candidate.len(), reference.len())
}

pub fn rouge<T: Eq + Hash>(candidate: &[T], reference: &[T]) -> RougeScore {
    RougeScore {
        rouge1: rouge_n(candidate, reference, 1),
        rouge2: rouge_n(candidate, reference, 2),
        rouge_l: rouge_l(candidate, reference),
    }
}

/// Sum of sorted values, so the result does not depend on input order.
fn order_free_mean(mut values: Vec<f64>) -> f64 {
    let n = values.len() as f64;
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / n
}

fn mean_prf(scores: &[Prf]) -> Prf {
    Prf {
        recall: order_free_mean(scores.iter().map(|s| s.recall).collect()),
        precision: order_free_mean(scores.iter().map(|s| s.precision).collect()),
        f1: order_free_mean(scores.iter().map(|s| s.f1).collect()),
    }
}

/// Mean of per-pair scores over `(candidate, reference)` pairs.
pub fn evaluate_corpus<C, R, T>(pairs: &[(C, R)]) -> Result<RougeScore, EvalError>
where
    C: AsRef<[T]>,
    R: AsRef<[T]>,
    T: Eq + Hash,
{
    if pairs.is_empty() {
        return Err(EvalError::Config("cannot evaluate an empty corpus".into()));
    }
    let scores: Vec<RougeScore> = pairs
        .iter()
        .map(|(c, r)| rouge(c.as_ref(), r.as_ref()))
        .collect();
    let pick = |f: fn(&RougeScore) -> Prf| scores.iter().map(f).collect::<Vec<_>>();
    Ok(RougeScore {
        rouge1: mean_prf(&pick(|s| s.rouge1)),
        rouge2: mean_prf(&pick(|s| s.rouge2)),
        rouge_l: mean_prf(&pick(|s| s.rouge_l)),
    })
}

/// Scores scaled by 100 and rounded to two decimals.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RougeReport {
    pub rouge1: ReportEntry,
    pub rouge2: ReportEntry,
    #[serde(rename = "rougeL")]
    pub rouge_l: ReportEntry,
}

fn percent(x: f64) -> f64 {
    (x * 10_000.0).round() / 100.0
}

impl From<&Prf> for ReportEntry {
    fn from(p: &Prf) -> Self {
        ReportEntry {
            recall: percent(p.recall),
            f1: percent(p.f1),
        }
    }
}

impl RougeScore {
    pub fn report(&self) -> RougeReport {
        RougeReport {
            rouge1: (&self.rouge1).into(),
            rouge2: (&self.rouge2).into(),
            rouge_l: (&self.rouge_l).into(),
        }
    }
}

impl fmt::Display for RougeReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<8}{:>8}{:>8}", "metric", "recall", "f1")?;
        for (name, e) in [("rouge1", self.rouge1), ("rouge2", self.rouge2), ("rougeL", self.rouge_l)] {
            writeln!(f, "{name:<8}{:>8.2}{:>8.2}", e.recall, e.f1)?;
        }
        Ok(())
    }
}
