use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::{ModelError, ModelState, SourceInput};
use crate::vocab::{BOS, EOS, PAD};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DecodeStrategy {
    Greedy,
    Beam { width: usize },
}

impl Default for DecodeStrategy {
    fn default() -> Self {
        DecodeStrategy::Beam { width: 4 }
    }
}

/// A decoded sequence without `BOS`/`EOS`.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    /// Sum of token log-probabilities, including the `EOS` step when finished.
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    fn start() -> Self {
        Hypothesis {
            tokens: Vec::new(),
            log_prob: 0.0,
            finished: false,
        }
    }

    /// Length-normalized log-probability: mean over the scored steps.
    pub fn score(&self) -> f64 {
        let steps = self.tokens.len() + usize::from(self.finished);
        self.log_prob / steps.max(1) as f64
    }

    fn extend(&self, token: usize, log_prob: f64) -> Self {
        let mut h = self.clone();
        h.log_prob += log_prob;
        if token == EOS {
            h.finished = true;
        } else {
            h.tokens.push(token);
        }
        h
    }

    fn prefix(&self) -> Vec<usize> {
        let mut p = Vec::with_capacity(self.tokens.len() + 1);
        p.push(BOS);
        p.extend_from_slice(&self.tokens);
        p
    }
}

/// Higher log-probability first; ties go to the lexicographically smaller sequence.
fn by_log_prob(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.log_prob.total_cmp(&a.log_prob).then_with(|| a.tokens.cmp(&b.tokens))
}

/// Log-probabilities with `PAD` and `BOS` ruled out as outputs.
fn step_log_probs(
    state: &ModelState,
    encoded: &super::transformer::EncodedSource,
    h: &Hypothesis,
) -> Result<Vec<f64>, ModelError> {
    let mut lp = state.next_log_probs(encoded, &h.prefix())?;
    lp[PAD] = f64::NEG_INFINITY;
    lp[BOS] = f64::NEG_INFINITY;
    Ok(lp)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Decodes `source` over the full target vocabulary for at most `max_len` steps
/// (fewer if `max_positions` is reached first).
pub fn decode(
    state: &ModelState,
    source: &SourceInput,
    strategy: DecodeStrategy,
    max_len: usize,
) -> Result<Hypothesis, ModelError> {
    if max_len < 1 {
        return Err(ModelError::Config("max_len must be at least 1".into()));
    }
    if let DecodeStrategy::Beam { width: 0 } = strategy {
        return Err(ModelError::Config("beam width must be at least 1".into()));
    }
    let steps = max_len.min(state.config().max_positions);
    let encoded = state.encode_source(source)?;

    let mut greedy = Hypothesis::start();
    for _ in 0..steps {
        let lp = step_log_probs(state, &encoded, &greedy)?;
        let t = argmax(&lp);
        greedy = greedy.extend(t, lp[t]);
        if greedy.finished {
            break;
        }
    }
    let DecodeStrategy::Beam { width } = strategy else {
        return Ok(greedy);
    };

    let mut active = vec![Hypothesis::start()];
    let mut done: Vec<Hypothesis> = Vec::new();
    for _ in 0..steps {
        let mut candidates = Vec::with_capacity(active.len() * width);
        for h in &active {
            let lp = step_log_probs(state, &encoded, h)?;
            let mut order: Vec<usize> = (0..lp.len()).filter(|&t| lp[t].is_finite()).collect();
            order.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]).then(a.cmp(&b)));
            candidates.extend(order.into_iter().take(width).map(|t| h.extend(t, lp[t])));
        }
        candidates.sort_by(by_log_prob);
        candidates.truncate(width);
        active.clear();
        for c in candidates {
            if c.finished {
                done.push(c);
            } else {
                active.push(c);
            }
        }
        if active.is_empty() || done.len() >= width {
            break;
        }
    }
    if done.is_empty() {
        done = active;
    }
    // The greedy path competes too, so beam search never scores below it.
    done.push(greedy);
    let mut best = done.swap_remove(0);
    for h in done {
        if h.score() > best.score() {
            best = h;
        }
    }
    Ok(best)
}
