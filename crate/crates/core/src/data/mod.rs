//! Item embeddings, interaction sequences and the synthetic corpus generator.

mod embeddings;
mod interactions;
pub mod synth;

pub use embeddings::{check_same_items, load_embeddings, EmbeddingTable, Modality};
pub use interactions::{leave_one_out, load_interactions, InteractionLog, Split, UserSequence, MIN_SEQUENCE_LEN};
pub use synth::{synth_dual_modal, SynthConfig, SynthData};
