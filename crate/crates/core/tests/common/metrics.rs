//! Hand-computed leave-one-out metric cases.

use crossmodal_rec::inference::{evaluate, TopK};

/// `(rankings, truth, expected)` worked by hand.
pub fn cases() -> Vec<(Vec<Option<Vec<usize>>>, Vec<usize>, TopK)> {
    let ranked: Vec<usize> = (0..20).collect();
    vec![
        // Both users hit at rank 1.
        (
            vec![Some(vec![3, 1]), Some(vec![0])],
            vec![3, 0],
            TopK { hr1: 1.0, hr5: 1.0, hr10: 1.0, ndcg5: 1.0, ndcg10: 1.0, users: 2 },
        ),
        // Ranks 2 and 11: one hit inside 10, 1/log2(3) for NDCG.
        (
            vec![Some(ranked.clone()), Some(ranked.clone())],
            vec![1, 10],
            TopK {
                hr1: 0.0,
                hr5: 0.5,
                hr10: 0.5,
                ndcg5: 0.5 / 3f64.log2(),
                ndcg10: 0.5 / 3f64.log2(),
                users: 2,
            },
        ),
        // Rank 4, rank 7, and a user without a ranking.
        (
            vec![Some(ranked.clone()), Some(ranked), None],
            vec![3, 6, 0],
            TopK {
                hr1: 0.0,
                hr5: 1.0 / 3.0,
                hr10: 2.0 / 3.0,
                ndcg5: (1.0 / 5f64.log2()) / 3.0,
                ndcg10: (1.0 / 5f64.log2() + 1.0 / 8f64.log2()) / 3.0,
                users: 3,
            },
        ),
    ]
}

pub fn all_exact() -> bool {
    cases().into_iter().all(|(r, t, want)| evaluate(&r, &t) == want)
}
