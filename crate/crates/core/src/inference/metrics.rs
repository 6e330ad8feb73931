use serde::{Deserialize, Serialize};

/// Leave-one-out top-K metrics averaged over users.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TopK {
    #[serde(rename = "HR@1")]
    pub hr1: f64,
    #[serde(rename = "HR@5")]
    pub hr5: f64,
    #[serde(rename = "HR@10")]
    pub hr10: f64,
    #[serde(rename = "NDCG@5")]
    pub ndcg5: f64,
    #[serde(rename = "NDCG@10")]
    pub ndcg10: f64,
    pub users: usize,
}

/// 1-based position of `target` in `ranking`.
pub fn rank_of(ranking: &[usize], target: usize) -> Option<usize> {
    ranking.iter().position(|&i| i == target).map(|p| p + 1)
}

pub fn hit(rank: Option<usize>, k: usize) -> f64 {
    match rank {
        Some(r) if r <= k => 1.0,
        _ => 0.0,
    }
}

/// `1 / log2(rank + 1)` inside the cutoff, else 0.
pub fn ndcg(rank: Option<usize>, k: usize) -> f64 {
    match rank {
        Some(r) if r <= k => 1.0 / ((r + 1) as f64).log2(),
        _ => 0.0,
    }
}

/// Metrics over users. A missing ranking counts as a miss.
pub fn evaluate(rankings: &[Option<Vec<usize>>], truth: &[usize]) -> TopK {
    assert_eq!(rankings.len(), truth.len(), "one ranking slot per user");
    let n = truth.len();
    if n == 0 {
        return TopK::default();
    }
    let missing = rankings.iter().filter(|r| r.is_none()).count();
    if missing > 0 {
        log::warn!("{missing} of {n} users have no ranking; counted as misses");
    }
    let ranks: Vec<Option<usize>> = rankings
        .iter()
        .zip(truth)
        .map(|(r, &t)| r.as_deref().and_then(|r| rank_of(r, t)))
        .collect();
    let mean = |f: &dyn Fn(Option<usize>) -> f64| ranks.iter().map(|&r| f(r)).sum::<f64>() / n as f64;
    TopK {
        hr1: mean(&|r| hit(r, 1)),
        hr5: mean(&|r| hit(r, 5)),
        hr10: mean(&|r| hit(r, 10)),
        ndcg5: mean(&|r| ndcg(r, 5)),
        ndcg10: mean(&|r| ndcg(r, 10)),
        users: n,
    }
}
