use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, ModelError};
use crate::autodiff::{ParamId, ParamStore};
use crate::features::EmbeddingVariant;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug)]
enum Init {
    /// Uniform in `±1/√fan_in`.
    Uniform { fan_in: usize },
    Ones,
    Zeros,
}

struct ParamSpec {
    name: String,
    rows: usize,
    cols: usize,
    init: Init,
}

fn spec(name: impl Into<String>, rows: usize, cols: usize, init: Init) -> ParamSpec {
    ParamSpec {
        name: name.into(),
        rows,
        cols,
        init,
    }
}

fn layer_norm(specs: &mut Vec<ParamSpec>, prefix: &str, d: usize) {
    specs.push(spec(format!("{prefix}.gain"), 1, d, Init::Ones));
    specs.push(spec(format!("{prefix}.bias"), 1, d, Init::Zeros));
}

fn attention(specs: &mut Vec<ParamSpec>, prefix: &str, d: usize) {
    for part in ["query", "key", "value", "output"] {
        specs.push(spec(format!("{prefix}.{part}"), d, d, Init::Uniform { fan_in: d }));
    }
}

fn ffn(specs: &mut Vec<ParamSpec>, prefix: &str, d: usize, hidden: usize) {
    specs.push(spec(format!("{prefix}.w1"), d, hidden, Init::Uniform { fan_in: d }));
    specs.push(spec(format!("{prefix}.b1"), 1, hidden, Init::Zeros));
    specs.push(spec(format!("{prefix}.w2"), hidden, d, Init::Uniform { fan_in: hidden }));
    specs.push(spec(format!("{prefix}.b2"), 1, d, Init::Zeros));
}

/// Names, shapes and initializers of every parameter, in creation order.
fn param_specs(c: &ModelConfig) -> Vec<ParamSpec> {
    let d = c.d_model;
    let emb = |name: &str, rows: usize, cols: usize| spec(name, rows, cols, Init::Uniform { fan_in: cols });
    let mut specs = Vec::new();
    match &c.embedding {
        EmbeddingVariant::SharedBpe => {
            specs.push(emb("embedding.shared", c.source_vocab_size, d));
        }
        EmbeddingVariant::SeparateWord => {
            specs.push(emb("encoder.embedding", c.source_vocab_size, d));
            specs.push(emb("decoder.embedding", c.target_vocab_size, d));
        }
        EmbeddingVariant::FreFitToHidden(layout) => {
            specs.push(emb("encoder.embedding", c.source_vocab_size, layout.word_dim));
            specs.push(emb("decoder.embedding", c.target_vocab_size, d));
        }
        EmbeddingVariant::FreLinearMapToHidden(layout) => {
            specs.push(emb("encoder.embedding", c.source_vocab_size, layout.word_dim));
            specs.push(spec(
                "encoder.fre_map",
                layout.concat_dim,
                d,
                Init::Uniform {
                    fan_in: layout.concat_dim,
                },
            ));
            specs.push(emb("decoder.embedding", c.target_vocab_size, d));
        }
    }
    for i in 0..c.num_layers {
        let p = format!("encoder.layer{i}");
        layer_norm(&mut specs, &format!("{p}.ln1"), d);
        attention(&mut specs, &format!("{p}.self_attn"), d);
        layer_norm(&mut specs, &format!("{p}.ln2"), d);
        ffn(&mut specs, &format!("{p}.ffn"), d, c.ffn_dim);
    }
    layer_norm(&mut specs, "encoder.final_ln", d);
    for i in 0..c.num_layers {
        let p = format!("decoder.layer{i}");
        layer_norm(&mut specs, &format!("{p}.ln1"), d);
        attention(&mut specs, &format!("{p}.self_attn"), d);
        layer_norm(&mut specs, &format!("{p}.ln2"), d);
        attention(&mut specs, &format!("{p}.cross_attn"), d);
        layer_norm(&mut specs, &format!("{p}.ln3"), d);
        ffn(&mut specs, &format!("{p}.ffn"), d, c.ffn_dim);
    }
    layer_norm(&mut specs, "decoder.final_ln", d);
    if !c.tie_output_to_embedding {
        specs.push(emb("output.weight", c.target_vocab_size, d));
    }
    specs.push(spec("output.bias", 1, c.target_vocab_size, Init::Zeros));
    specs
}

/// Expected parameter names and shapes for a configuration.
pub fn parameter_shapes(c: &ModelConfig) -> Vec<(String, (usize, usize))> {
    param_specs(c)
        .into_iter()
        .map(|s| (s.name, (s.rows, s.cols)))
        .collect()
}

pub(super) fn init_params(c: &ModelConfig) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let mut store = ParamStore::new();
    for s in param_specs(c) {
        let value = match s.init {
            Init::Ones => Matrix::filled(s.rows, s.cols, 1.0),
            Init::Zeros => Matrix::zeros(s.rows, s.cols),
            Init::Uniform { fan_in } => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                Matrix::from_vec(
                    s.rows,
                    s.cols,
                    (0..s.rows * s.cols)
                        .map(|_| rng.gen_range(-bound..bound))
                        .collect(),
                )
            }
        };
        store.add(s.name, value);
    }
    store
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormIds {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionIds {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub output: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct FfnIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderLayerIds {
    pub ln1: LayerNormIds,
    pub self_attn: AttentionIds,
    pub ln2: LayerNormIds,
    pub ffn: FfnIds,
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderLayerIds {
    pub ln1: LayerNormIds,
    pub self_attn: AttentionIds,
    pub ln2: LayerNormIds,
    pub cross_attn: AttentionIds,
    pub ln3: LayerNormIds,
    pub ffn: FfnIds,
}

/// Parameter ids resolved once per model so the forward pass avoids name lookups.
#[derive(Clone, Debug)]
pub struct ParamIds {
    pub encoder_embedding: ParamId,
    pub decoder_embedding: ParamId,
    pub fre_map: Option<ParamId>,
    pub encoder_layers: Vec<EncoderLayerIds>,
    pub encoder_final: LayerNormIds,
    pub decoder_layers: Vec<DecoderLayerIds>,
    pub decoder_final: LayerNormIds,
    /// The decoder embedding table when the output layer is tied.
    pub output_weight: ParamId,
    pub output_bias: ParamId,
}

impl ParamIds {
    /// Checks that `store` holds exactly the parameters `config` calls for.
    pub fn resolve(config: &ModelConfig, store: &ParamStore) -> Result<Self, ModelError> {
        let expected = parameter_shapes(config);
        if expected.len() != store.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} parameters, found {}",
                expected.len(),
                store.len()
            )));
        }
        for (name, shape) in &expected {
            match store.by_name(name) {
                Some(m) if m.shape() == *shape => {}
                Some(m) => {
                    return Err(ModelError::Checkpoint(format!(
                        "parameter {name} has shape {:?}, expected {shape:?}",
                        m.shape()
                    )))
                }
                None => return Err(ModelError::Checkpoint(format!("missing parameter {name}"))),
            }
        }
        let id = |name: &str| store.id(name).expect("checked above");
        let ln = |p: &str| LayerNormIds {
            gain: id(&format!("{p}.gain")),
            bias: id(&format!("{p}.bias")),
        };
        let attn = |p: &str| AttentionIds {
            query: id(&format!("{p}.query")),
            key: id(&format!("{p}.key")),
            value: id(&format!("{p}.value")),
            output: id(&format!("{p}.output")),
        };
        let ffn = |p: &str| FfnIds {
            w1: id(&format!("{p}.w1")),
            b1: id(&format!("{p}.b1")),
            w2: id(&format!("{p}.w2")),
            b2: id(&format!("{p}.b2")),
        };
        let (encoder_embedding, decoder_embedding) = match config.embedding {
            EmbeddingVariant::SharedBpe => (id("embedding.shared"), id("embedding.shared")),
            _ => (id("encoder.embedding"), id("decoder.embedding")),
        };
        Ok(ParamIds {
            encoder_embedding,
            decoder_embedding,
            fre_map: store.id("encoder.fre_map"),
            encoder_layers: (0..config.num_layers)
                .map(|i| {
                    let p = format!("encoder.layer{i}");
                    EncoderLayerIds {
                        ln1: ln(&format!("{p}.ln1")),
                        self_attn: attn(&format!("{p}.self_attn")),
                        ln2: ln(&format!("{p}.ln2")),
                        ffn: ffn(&format!("{p}.ffn")),
                    }
                })
                .collect(),
            encoder_final: ln("encoder.final_ln"),
            decoder_layers: (0..config.num_layers)
                .map(|i| {
                    let p = format!("decoder.layer{i}");
                    DecoderLayerIds {
                        ln1: ln(&format!("{p}.ln1")),
                        self_attn: attn(&format!("{p}.self_attn")),
                        ln2: ln(&format!("{p}.ln2")),
                        cross_attn: attn(&format!("{p}.cross_attn")),
                        ln3: ln(&format!("{p}.ln3")),
                        ffn: ffn(&format!("{p}.ffn")),
                    }
                })
                .collect(),
            decoder_final: ln("decoder.final_ln"),
            output_weight: if config.tie_output_to_embedding {
                decoder_embedding
            } else {
                id("output.weight")
            },
            output_bias: id("output.bias"),
        })
    }

    /// Parameters whose rows (or, for the bias, columns) index the target vocabulary.
    pub fn target_indexed(&self) -> [ParamId; 3] {
        [self.decoder_embedding, self.output_weight, self.output_bias]
    }
}
