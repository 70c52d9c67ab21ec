//! Desk-scale abstractive summarization: corpus preparation, word and BPE
//! vocabularies, feature-rich encoder embeddings, batch vocabularies, an
//! encoder-decoder Transformer with exact gradients, and ROUGE scoring.

pub mod autodiff;
pub mod corpus;
pub mod eval;
pub mod features;
pub mod lvt;
pub mod model;
pub mod pipeline;
pub mod tensor;
pub mod vocab;
