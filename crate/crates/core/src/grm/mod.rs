//! Generative recommender: vocabulary, task construction, the
//! encoder–decoder model and its training loop.

mod model;
mod tasks;
mod train;
mod vocab;

pub use model::{
    implicit_align_loss, pooled_item_states, positional_encoding, seq2seq_loss, shift_right, teacher_forced_logits,
    GrmConfig, GrmModel, SeqBatch,
};
pub use tasks::{
    build_tasks, history_tokens, index_sequences, read_tasks_jsonl, target_tokens, write_tasks_jsonl, TaskOptions,
    TrainingExample,
};
pub use train::{train_grm, GrmEpochLog, GrmHyper, GrmReport, GrmStepLog, GrmTrainOptions, TaskSampler};
pub use vocab::{Task, Vocab, BOS, EOS, FIRST_ID_TOKEN, PAD};
