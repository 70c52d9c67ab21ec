use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{AttentionIds, FfnIds, LayerNormIds};
use super::{contract, Batch, ModelError, ModelState, SourceInput};
use crate::autodiff::{masked_softmax, AttentionMask, Gradients, Graph, Var};
use crate::features::{feature_matrix, EmbeddingVariant, TokenFeatures};
use crate::lvt::BatchVocab;
use crate::tensor::Matrix;
use crate::vocab::PAD;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Classes scored by the output layer.
#[derive(Clone, Copy, Debug)]
pub enum OutputVocab<'a> {
    Full,
    /// Only the rows of a batch vocabulary; logits are indexed by local id.
    Restricted(&'a BatchVocab),
}

/// Sinusoidal encoding: `PE[p, 2i] = sin(p / 10000^(2i/d))`, `PE[p, 2i+1] = cos(..)`.
pub fn positional_encoding(
    length: usize,
    d_model: usize,
    max_positions: usize,
) -> Result<Matrix, ModelError> {
    if length > max_positions {
        return Err(contract(format!(
            "sequence of length {length} exceeds max_positions {max_positions}"
        )));
    }
    let mut pe = Matrix::zeros(length, d_model);
    for pos in 0..length {
        for i in (0..d_model).step_by(2) {
            let angle = pos as f64 / 10000f64.powf(i as f64 / d_model as f64);
            pe.set(pos, i, angle.sin());
            if i + 1 < d_model {
                pe.set(pos, i + 1, angle.cos());
            }
        }
    }
    Ok(pe)
}

/// `softmax(Q·Kᵀ/√d_k) · V` over allowed keys. Rows with no allowed key are zero.
pub fn scaled_dot_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    mask: Option<&AttentionMask>,
) -> Result<Matrix, ModelError> {
    if q.cols() != k.cols() || k.rows() != v.rows() {
        return Err(contract(format!(
            "attention shapes disagree: Q {:?}, K {:?}, V {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    if let Some(m) = mask {
        if m.shape() != (q.rows(), k.rows()) {
            return Err(contract("attention mask shape mismatch"));
        }
    }
    let scores = q.matmul_t(k).scaled(1.0 / (q.cols() as f64).sqrt());
    Ok(masked_softmax(&scores, mask).matmul(v))
}

/// Mean negative log-likelihood over the positions where `mask` is set.
pub fn cross_entropy_loss(
    logits: &Matrix,
    targets: &[usize],
    mask: &[bool],
) -> Result<f64, ModelError> {
    if targets.len() != logits.rows() || mask.len() != logits.rows() {
        return Err(contract("logits, targets and mask lengths disagree"));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (r, (&t, &keep)) in targets.iter().zip(mask).enumerate() {
        if !keep {
            continue;
        }
        if t >= logits.cols() {
            return Err(contract(format!("target {t} outside {} classes", logits.cols())));
        }
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        total += lse - row[t];
        count += 1;
    }
    if count == 0 {
        return Err(contract("every target position is padding"));
    }
    Ok(total / count as f64)
}

/// Dropout state for one forward pass.
struct Dropout<'r> {
    rate: f64,
    rng: Option<&'r mut ChaCha8Rng>,
}

impl Dropout<'_> {
    fn new(mode: Mode, rate: f64, rng: Option<&mut ChaCha8Rng>) -> Dropout<'_> {
        match mode {
            Mode::Train => Dropout { rate, rng },
            Mode::Eval => Dropout { rate: 0.0, rng: None },
        }
    }

    fn apply(&mut self, g: &mut Graph<'_>, x: Var) -> Var {
        let Some(rng) = self.rng.as_deref_mut() else {
            return x;
        };
        if self.rate == 0.0 {
            return x;
        }
        let keep = 1.0 - self.rate;
        let (rows, cols) = g.value(x).shape();
        let mask = (0..rows * cols)
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        g.mul_const(x, Matrix::from_vec(rows, cols, mask))
    }
}

fn layer_norm(g: &mut Graph<'_>, x: Var, ids: LayerNormIds) -> Var {
    let (gain, bias) = (g.param(ids.gain), g.param(ids.bias));
    g.layer_norm(x, gain, bias)
}

fn multi_head_attention(
    g: &mut Graph<'_>,
    query_in: Var,
    kv_in: Var,
    ids: AttentionIds,
    mask: &AttentionMask,
    heads: usize,
) -> Var {
    let (wq, wk, wv, wo) = (
        g.param(ids.query),
        g.param(ids.key),
        g.param(ids.value),
        g.param(ids.output),
    );
    let q = g.matmul(query_in, wq);
    let k = g.matmul(kv_in, wk);
    let v = g.matmul(kv_in, wv);
    let dk = g.value(q).cols() / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let contexts: Vec<Var> = (0..heads)
        .map(|h| {
            let qh = g.slice_cols(q, h * dk, dk);
            let kh = g.slice_cols(k, h * dk, dk);
            let vh = g.slice_cols(v, h * dk, dk);
            let scores = g.matmul_t(qh, kh);
            let scores = g.scale(scores, scale);
            let p = g.softmax(scores, Some(mask));
            g.matmul(p, vh)
        })
        .collect();
    let ctx = if heads == 1 {
        contexts[0]
    } else {
        g.concat_cols(&contexts)
    };
    g.matmul(ctx, wo)
}

fn feed_forward(g: &mut Graph<'_>, x: Var, ids: FfnIds) -> Var {
    let (w1, b1, w2, b2) = (g.param(ids.w1), g.param(ids.b1), g.param(ids.w2), g.param(ids.b2));
    let h = g.matmul(x, w1);
    let h = g.add_row(h, b1);
    let h = g.relu(h);
    let h = g.matmul(h, w2);
    g.add_row(h, b2)
}

/// `x + dropout(sublayer)`.
fn residual(g: &mut Graph<'_>, x: Var, sub: Var, dropout: &mut Dropout<'_>) -> Var {
    let sub = dropout.apply(g, sub);
    g.add(x, sub)
}

fn check_ids(ids: &[usize], size: usize, side: &str) -> Result<(), ModelError> {
    match ids.iter().find(|&&t| t >= size) {
        Some(t) => Err(contract(format!("{side} id {t} outside vocabulary of size {size}"))),
        None => Ok(()),
    }
}

/// Encoder stack for one (possibly padded) source. Returns `len × d_model`.
fn encode(
    state: &ModelState,
    g: &mut Graph<'_>,
    ids: &[usize],
    features: Option<&[TokenFeatures]>,
    dropout: &mut Dropout<'_>,
) -> Result<Var, ModelError> {
    let c = state.config();
    let p = state.ids();
    check_ids(ids, c.source_vocab_size, "source")?;
    if features.is_some_and(|f| f.len() != ids.len()) {
        return Err(contract("features are not aligned with source tokens"));
    }
    let sqrt_d = (c.d_model as f64).sqrt();
    let word = g.gather_rows(p.encoder_embedding, ids);
    let word = g.scale(word, sqrt_d);
    let x = match (&c.embedding, features) {
        (EmbeddingVariant::SharedBpe | EmbeddingVariant::SeparateWord, None) => word,
        (EmbeddingVariant::FreFitToHidden(layout), Some(f)) => {
            let fm = g.constant(feature_matrix(f, layout)?);
            g.concat_cols(&[word, fm])
        }
        (EmbeddingVariant::FreLinearMapToHidden(layout), Some(f)) => {
            let fm = g.constant(feature_matrix(f, layout)?);
            let concat = g.concat_cols(&[word, fm]);
            let map = g.param(p.fre_map.expect("linear-map models own a projection"));
            g.matmul(concat, map)
        }
        (variant, f) => {
            return Err(contract(format!(
                "embedding variant {variant:?} {} token features",
                if f.is_some() { "does not take" } else { "needs" }
            )))
        }
    };
    let pe = g.constant(positional_encoding(ids.len(), c.d_model, c.max_positions)?);
    let x = g.add(x, pe);
    let mut x = dropout.apply(g, x);
    let keys: Vec<bool> = ids.iter().map(|&t| t != PAD).collect();
    let mask = AttentionMask::keys(ids.len(), &keys);
    for layer in &p.encoder_layers {
        let h = layer_norm(g, x, layer.ln1);
        let a = multi_head_attention(g, h, h, layer.self_attn, &mask, c.num_heads);
        x = residual(g, x, a, dropout);
        let h = layer_norm(g, x, layer.ln2);
        let f = feed_forward(g, h, layer.ffn);
        x = residual(g, x, f, dropout);
    }
    Ok(layer_norm(g, x, p.encoder_final))
}

/// Decoder stack over `ids` attending to `memory`. Returns `len × d_model`.
fn decode_stack(
    state: &ModelState,
    g: &mut Graph<'_>,
    ids: &[usize],
    memory: Var,
    source_keys: &[bool],
    dropout: &mut Dropout<'_>,
) -> Result<Var, ModelError> {
    let c = state.config();
    let p = state.ids();
    check_ids(ids, c.target_vocab_size, "target")?;
    let y = g.gather_rows(p.decoder_embedding, ids);
    let y = g.scale(y, (c.d_model as f64).sqrt());
    let pe = g.constant(positional_encoding(ids.len(), c.d_model, c.max_positions)?);
    let y = g.add(y, pe);
    let mut y = dropout.apply(g, y);
    let keys: Vec<bool> = ids.iter().map(|&t| t != PAD).collect();
    let self_mask = AttentionMask::causal(&keys);
    let cross_mask = AttentionMask::keys(ids.len(), source_keys);
    for layer in &p.decoder_layers {
        let h = layer_norm(g, y, layer.ln1);
        let a = multi_head_attention(g, h, h, layer.self_attn, &self_mask, c.num_heads);
        y = residual(g, y, a, dropout);
        let h = layer_norm(g, y, layer.ln2);
        let a = multi_head_attention(g, h, memory, layer.cross_attn, &cross_mask, c.num_heads);
        y = residual(g, y, a, dropout);
        let h = layer_norm(g, y, layer.ln3);
        let f = feed_forward(g, h, layer.ffn);
        y = residual(g, y, f, dropout);
    }
    Ok(layer_norm(g, y, p.decoder_final))
}

struct OutputLayer {
    weight: Var,
    bias: Var,
}

impl OutputLayer {
    fn new(state: &ModelState, g: &mut Graph<'_>, vocab: OutputVocab<'_>) -> Result<Self, ModelError> {
        let p = state.ids();
        Ok(match vocab {
            OutputVocab::Full => OutputLayer {
                weight: g.param(p.output_weight),
                bias: g.param(p.output_bias),
            },
            OutputVocab::Restricted(bv) => {
                if bv.vocab_size() != state.config().target_vocab_size {
                    return Err(contract(format!(
                        "batch vocabulary indexes {} words, model has {}",
                        bv.vocab_size(),
                        state.config().target_vocab_size
                    )));
                }
                OutputLayer {
                    weight: g.gather_rows(p.output_weight, bv.local_to_global()),
                    bias: g.gather_cols(p.output_bias, bv.local_to_global()),
                }
            }
        })
    }

    fn logits(&self, g: &mut Graph<'_>, h: Var) -> Var {
        let z = g.matmul_t(h, self.weight);
        g.add_row(z, self.bias)
    }
}

fn check_restricted(ids: &[usize], vocab: OutputVocab<'_>) -> Result<(), ModelError> {
    if let OutputVocab::Restricted(bv) = vocab {
        if let Some(t) = ids.iter().find(|&&t| !bv.contains(t)) {
            return Err(contract(format!("decoder id {t} is not in the batch vocabulary")));
        }
    }
    Ok(())
}

/// Per-example logits vars for a whole batch on one tape.
fn batch_logits(
    state: &ModelState,
    g: &mut Graph<'_>,
    batch: &Batch,
    mode: Mode,
    vocab: OutputVocab<'_>,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Vec<Var>, ModelError> {
    let c = state.config();
    if batch.is_empty() {
        return Err(contract("empty batch"));
    }
    let mut dropout = Dropout::new(mode, c.dropout_rate, rng);
    let out = OutputLayer::new(state, g, vocab)?;
    let mut logits = Vec::with_capacity(batch.len());
    for i in 0..batch.len() {
        let features = batch.source_features.as_ref().map(|f| f[i].as_slice());
        let memory = encode(state, g, &batch.source[i], features, &mut dropout)?;
        check_restricted(&batch.decoder_input[i], vocab)?;
        let h = decode_stack(
            state,
            g,
            &batch.decoder_input[i],
            memory,
            &batch.source_mask(i),
            &mut dropout,
        )?;
        logits.push(out.logits(g, h));
    }
    Ok(logits)
}

/// Builds the scaled batch loss on `g`; returns it with the unscaled mean token loss.
fn build_loss(
    state: &ModelState,
    g: &mut Graph<'_>,
    batch: &Batch,
    mode: Mode,
    vocab: OutputVocab<'_>,
    rng: Option<&mut ChaCha8Rng>,
    loss_scale: f64,
) -> Result<(Var, f64), ModelError> {
    let n = batch.num_target_tokens();
    if n == 0 {
        return Err(contract("every target position is padding"));
    }
    let logits = batch_logits(state, g, batch, mode, vocab, rng)?;
    let mut parts = Vec::with_capacity(logits.len());
    for (z, targets) in logits.into_iter().zip(&batch.target) {
        let targets = targets
            .iter()
            .map(|&t| match (t, vocab) {
                (PAD, _) => Ok(None),
                (t, OutputVocab::Full) if t < state.config().target_vocab_size => Ok(Some(t)),
                (t, OutputVocab::Full) => Err(contract(format!("target id {t} out of range"))),
                (t, OutputVocab::Restricted(bv)) => bv
                    .local(t)
                    .map(Some)
                    .ok_or_else(|| contract(format!("target id {t} is not in the batch vocabulary"))),
            })
            .collect::<Result<Vec<_>, _>>()?;
        parts.push(g.cross_entropy_sum(z, &targets, state.config().label_smoothing));
    }
    let total: f64 = parts.iter().map(|&p| g.value(p).get(0, 0)).sum();
    let mean = total / n as f64;
    if !mean.is_finite() {
        return Err(ModelError::NonFiniteLoss {
            step: state.step() + 1,
        });
    }
    Ok((g.sum_scaled(&parts, loss_scale / n as f64), mean))
}

pub(super) fn loss_and_gradients(
    state: &ModelState,
    batch: &Batch,
    mode: Mode,
    vocab: OutputVocab<'_>,
    rng: Option<&mut ChaCha8Rng>,
    loss_scale: f64,
) -> Result<(f64, Gradients), ModelError> {
    let mut g = Graph::new(state.params());
    let (loss, mean) = build_loss(state, &mut g, batch, mode, vocab, rng, loss_scale)?;
    let grads = g.backward(loss);
    for (id, m) in grads.iter() {
        if !m.is_finite() {
            return Err(ModelError::NonFiniteGradient {
                name: state.params().name(id).to_string(),
            });
        }
    }
    Ok((mean, grads))
}

/// Mean token loss and the ReLU sign signature of the forward pass, without a backward pass.
pub(super) fn loss_with_signature(
    state: &ModelState,
    batch: &Batch,
    mode: Mode,
    vocab: OutputVocab<'_>,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, u64), ModelError> {
    let mut g = Graph::new(state.params());
    let (_, mean) = build_loss(state, &mut g, batch, mode, vocab, rng, 1.0)?;
    Ok((mean, g.relu_signature()))
}

/// Cached encoder output for decoding one source.
pub(crate) struct EncodedSource {
    memory: Matrix,
    keys: Vec<bool>,
}

impl ModelState {
    /// Logits for every example of a batch (`target_len × classes`, padded rows included).
    pub fn forward(
        &self,
        batch: &Batch,
        mode: Mode,
        vocab: OutputVocab<'_>,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Vec<Matrix>, ModelError> {
        let mut g = Graph::new(self.params());
        let logits = batch_logits(self, &mut g, batch, mode, vocab, rng)?;
        Ok(logits.into_iter().map(|z| g.value(z).clone()).collect())
    }

    /// Mean token loss of a batch in eval mode over the full vocabulary.
    pub fn evaluate_loss(&self, batch: &Batch) -> Result<f64, ModelError> {
        let logits = self.forward(batch, Mode::Eval, OutputVocab::Full, None)?;
        let mut total = 0.0;
        for (z, t) in logits.iter().zip(&batch.target) {
            let mask: Vec<bool> = t.iter().map(|&x| x != PAD).collect();
            let count = mask.iter().filter(|&&m| m).count();
            if count > 0 {
                total += cross_entropy_loss(z, t, &mask)? * count as f64;
            }
        }
        Ok(total / batch.num_target_tokens() as f64)
    }

    pub(crate) fn encode_source(&self, source: &SourceInput) -> Result<EncodedSource, ModelError> {
        if source.is_empty() {
            return Err(contract("empty source sequence"));
        }
        let mut src = source.clone();
        src.truncate(self.config().max_positions);
        let mut g = Graph::new(self.params());
        let mut dropout = Dropout::new(Mode::Eval, 0.0, None);
        let memory = encode(self, &mut g, &src.ids, src.features.as_deref(), &mut dropout)?;
        Ok(EncodedSource {
            memory: g.value(memory).clone(),
            keys: src.ids.iter().map(|&t| t != PAD).collect(),
        })
    }

    /// Log-probabilities over the full target vocabulary for the token after `prefix`.
    pub(crate) fn next_log_probs(
        &self,
        encoded: &EncodedSource,
        prefix: &[usize],
    ) -> Result<Vec<f64>, ModelError> {
        let mut g = Graph::new(self.params());
        let mut dropout = Dropout::new(Mode::Eval, 0.0, None);
        let memory = g.constant(encoded.memory.clone());
        let h = decode_stack(self, &mut g, prefix, memory, &encoded.keys, &mut dropout)?;
        let out = OutputLayer::new(self, &mut g, OutputVocab::Full)?;
        let z = out.logits(&mut g, h);
        let z = g.value(z);
        let row = z.row(z.rows() - 1);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        Ok(row.iter().map(|x| x - lse).collect())
    }
}
