use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Batch, Mode, ModelError, ModelState, OutputVocab};
use crate::autodiff::{Gradients, ParamId, ParamStore};
use crate::lvt::{BatchVocab, BatchVocabSource, BatchVocabStats};
use crate::tensor::Matrix;
use crate::vocab::PAD;

/// Adam with linear warmup then inverse-square-root decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    /// Multiplier on `d_model^-0.5 · min(step^-0.5, step · warmup^-1.5)`.
    pub learning_rate: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 2.0,
            warmup_steps: 4000,
            beta1: 0.9,
            beta2: 0.98,
            epsilon: 1e-9,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let ok = self.learning_rate >= 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(ModelError::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Learning rate for the 1-based `step`.
pub fn learning_rate(step: u64, d_model: usize, opt: &OptimizerConfig) -> f64 {
    let step = step.max(1) as f64;
    let decay = step.powf(-0.5);
    let schedule = if opt.warmup_steps == 0 {
        decay
    } else {
        decay.min(step * (opt.warmup_steps as f64).powf(-1.5))
    };
    opt.learning_rate * (d_model as f64).powf(-0.5) * schedule
}

/// First and second Adam moments, one tensor per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamMoments {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl AdamMoments {
    pub fn zeros_like(params: &ParamStore) -> Self {
        let zeros: Vec<Matrix> = params
            .iter()
            .map(|(_, _, p)| Matrix::zeros(p.rows(), p.cols()))
            .collect();
        AdamMoments {
            m: zeros.clone(),
            v: zeros,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub loss: f64,
    pub learning_rate: f64,
    /// Batch-vocabulary coverage when training with a restricted vocabulary.
    pub batch_vocab: Option<BatchVocabStats>,
}

/// Entries of a parameter that an update may touch.
enum Touch<'a> {
    All,
    Rows(&'a [usize]),
    Cols(&'a [usize]),
}

struct AdamStep<'a> {
    opt: &'a OptimizerConfig,
    lr: f64,
    correction1: f64,
    correction2: f64,
}

impl AdamStep<'_> {
    fn update(&self, p: &mut Matrix, m: &mut Matrix, v: &mut Matrix, g: &Matrix, k: usize) {
        let (b1, b2) = (self.opt.beta1, self.opt.beta2);
        let gk = g.data()[k];
        let mk = b1 * m.data()[k] + (1.0 - b1) * gk;
        let vk = b2 * v.data()[k] + (1.0 - b2) * gk * gk;
        m.data_mut()[k] = mk;
        v.data_mut()[k] = vk;
        let m_hat = mk / self.correction1;
        let v_hat = vk / self.correction2;
        p.data_mut()[k] -= self.lr * m_hat / (v_hat.sqrt() + self.opt.epsilon);
    }
}

impl ModelState {
    /// One optimizer step on `batch`. Dropout draws from a generator keyed by
    /// the model seed and the step number, so resumed runs replay exactly.
    pub fn train_step(&mut self, batch: &Batch, opt: &OptimizerConfig) -> Result<StepReport, ModelError> {
        opt.validate()?;
        let step = self.step + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(step);

        let bv = if self.config.lvt_enabled {
            Some(self.batch_vocab(batch)?)
        } else {
            None
        };
        let (loss, grads) = match &bv {
            Some(bv) => {
                let restricted = batch.restricted(bv);
                self.loss_and_gradients(&restricted, Mode::Train, OutputVocab::Restricted(bv), Some(&mut rng), 1.0)
            }
            None => self.loss_and_gradients(batch, Mode::Train, OutputVocab::Full, Some(&mut rng), 1.0),
        }
        .map_err(|e| match e {
            ModelError::NonFiniteLoss { .. } => ModelError::NonFiniteLoss { step },
            e => e,
        })?;

        let lr = learning_rate(step, self.config.d_model, opt);
        self.apply_adam(&grads, opt, lr, step, bv.as_ref());
        self.step = step;
        Ok(StepReport {
            step,
            loss,
            learning_rate: lr,
            batch_vocab: bv.map(|b| b.stats()),
        })
    }

    /// Batch vocabulary for an LVT step, drawn from the configured sides of the batch.
    pub fn batch_vocab(&self, batch: &Batch) -> Result<BatchVocab, ModelError> {
        let source = batch.source.iter().flatten();
        let ids: Vec<usize> = match self.config.lvt_source {
            BatchVocabSource::SourceAndTarget => source.chain(batch.target.iter().flatten()).copied().collect(),
            BatchVocabSource::SourceOnly => source.copied().collect(),
        };
        let ids = ids.into_iter().filter(|&t| t != PAD);
        Ok(BatchVocab::from_ids(ids, self.config.target_vocab_size, self.config.lvt_size)?)
    }

    fn apply_adam(
        &mut self,
        grads: &Gradients,
        opt: &OptimizerConfig,
        lr: f64,
        step: u64,
        bv: Option<&BatchVocab>,
    ) {
        let adam = AdamStep {
            opt,
            lr,
            correction1: 1.0 - opt.beta1.powf(step as f64),
            correction2: 1.0 - opt.beta2.powf(step as f64),
        };
        let target_indexed = self.ids.target_indexed();
        let output_bias = self.ids.output_bias;
        for (id, g) in grads.iter() {
            let touch = match bv {
                Some(bv) if id == output_bias => Touch::Cols(bv.local_to_global()),
                Some(bv) if target_indexed.contains(&id) => Touch::Rows(bv.local_to_global()),
                _ => Touch::All,
            };
            self.update_param(&adam, id, g, touch);
        }
    }

    fn update_param(&mut self, adam: &AdamStep<'_>, id: ParamId, g: &Matrix, touch: Touch<'_>) {
        let p = self.params.get_mut(id);
        let m = &mut self.moments.m[id];
        let v = &mut self.moments.v[id];
        let cols = p.cols();
        match touch {
            Touch::All => {
                for k in 0..p.len() {
                    adam.update(p, m, v, g, k);
                }
            }
            Touch::Rows(rows) => {
                for &r in rows {
                    for k in r * cols..(r + 1) * cols {
                        adam.update(p, m, v, g, k);
                    }
                }
            }
            Touch::Cols(cs) => {
                for &k in cs {
                    adam.update(p, m, v, g, k);
                }
            }
        }
    }
}
