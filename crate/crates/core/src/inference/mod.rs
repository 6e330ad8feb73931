//! Trie-constrained generation, dual-modality ensembling and leave-one-out
//! evaluation.

mod eval;
mod metrics;
mod search;
mod trie;

pub use eval::{
    evaluate_modality, evaluate_model, evaluate_popularity, holdout_case, parallel_map, popularity_ranking, spread_users, EvalReport,
    Holdout, InferOptions, Tries, UserRanking,
};
pub use metrics::{evaluate, hit, ndcg, rank_of, TopK};
pub use search::{constrained_beam_search, ensemble_rank, forced_score, forced_scores, EnsembleOutput, RankedList};
pub use trie::{build_trie, IdTrie};
