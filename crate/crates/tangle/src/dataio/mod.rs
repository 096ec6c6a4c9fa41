//! Dataset I/O: file formats, expression preprocessing, and the
//! synthetic benchmark generator.

pub mod formats;
pub mod preprocess;
pub mod synth;

pub use formats::{
    load_embeddings, load_expression, save_embeddings, save_expression, ExpressionProfile,
    Manifest, ManifestRecord, PairDataset, PairRecord, PatchEmbeddingSet,
};
pub use preprocess::{log2_fold_change, select_top_genes};
pub use synth::{synth_generate, SynthConfig};
