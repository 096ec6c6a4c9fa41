//! Transcriptomics-guided slide representation learning on pre-extracted
//! patch embeddings: contrastive pretraining of a gated-attention MIL
//! slide encoder against a gene-expression MLP encoder, with few-shot
//! probing, prototype classification, retrieval, rank analysis, and gene
//! attribution on top of the learned embeddings.

pub mod analysis;
pub mod cli;
pub mod dataio;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod numerics;
pub mod objectives;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
