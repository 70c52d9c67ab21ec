//! Central finite-difference check of the analytic gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::transformer::loss_with_signature;
use super::{Batch, Mode, ModelError, ModelState, OutputVocab};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckConfig {
    /// Finite-difference step `h`.
    pub step: f64,
    /// Denominator floor: the error is `|a − n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    /// Mode of the forward pass; train mode replays one dropout seed on every evaluation.
    pub mode: Mode,
    pub dropout_seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            floor: 1e-6,
            mode: Mode::Eval,
            dropout_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    /// Entries whose `±h` evaluations straddle a ReLU kink.
    pub skipped_kinks: usize,
    pub max_rel_error: f64,
    pub worst_entry: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.params.iter().map(|p| p.checked).sum()
    }

    pub fn skipped_kinks(&self) -> usize {
        self.params.iter().map(|p| p.skipped_kinks).sum()
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error() <= tolerance
    }
}

/// Compares every gradient entry of every parameter with central differences
/// of the mean batch loss.
pub fn check_gradients(
    state: &ModelState,
    batch: &Batch,
    vocab: OutputVocab<'_>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport, ModelError> {
    let rng = || ChaCha8Rng::seed_from_u64(cfg.dropout_seed);
    let (_, grads) = state.loss_and_gradients(batch, cfg.mode, vocab, Some(&mut rng()), 1.0)?;
    let mut probe = state.clone();
    let mut params = Vec::with_capacity(state.params().len());
    for (id, name, value) in state.params().iter() {
        let analytic = grads.get(id);
        let mut check = ParamCheck {
            name: name.to_string(),
            checked: 0,
            skipped_kinks: 0,
            max_rel_error: 0.0,
            worst_entry: 0,
        };
        for k in 0..value.len() {
            let orig = value.data()[k];
            probe.params.get_mut(id).data_mut()[k] = orig + cfg.step;
            let (up, sig_up) = loss_with_signature(&probe, batch, cfg.mode, vocab, Some(&mut rng()))?;
            probe.params.get_mut(id).data_mut()[k] = orig - cfg.step;
            let (down, sig_down) =
                loss_with_signature(&probe, batch, cfg.mode, vocab, Some(&mut rng()))?;
            probe.params.get_mut(id).data_mut()[k] = orig;
            if sig_up != sig_down {
                check.skipped_kinks += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * cfg.step);
            let a = analytic.map_or(0.0, |g| g.data()[k]);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            check.checked += 1;
            if err > check.max_rel_error {
                check.max_rel_error = err;
                check.worst_entry = k;
            }
        }
        params.push(check);
    }
    Ok(GradCheckReport { params })
}
