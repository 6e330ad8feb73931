use serde::{Deserialize, Serialize};

use super::metrics::{evaluate, TopK};
use super::search::{constrained_beam_search, ensemble_rank};
use super::trie::{build_trie, IdTrie};
use crate::data::{leave_one_out, Modality};
use crate::error::Result;
use crate::grm::{history_tokens, GrmModel, Task, Vocab};
use crate::quantizer::SemanticIds;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Holdout {
    Valid,
    Test,
}

/// `(history, target)`: the train split predicts the validation item, and
/// train plus validation predicts the test item.
pub fn holdout_case(seq: &[usize], h: Holdout) -> Option<(&[usize], usize)> {
    let split = leave_one_out(seq)?;
    Some(match h {
        Holdout::Valid => (split.train, *split.valid),
        Holdout::Test => (&seq[..seq.len() - 1], *split.test),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferOptions {
    pub beam_width: usize,
    pub k: usize,
    /// History window; should match the one used to build training tasks.
    pub window: usize,
    pub threads: usize,
}

impl Default for InferOptions {
    fn default() -> Self {
        InferOptions { beam_width: 20, k: 10, window: 20, threads: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tries {
    pub text: IdTrie,
    pub vision: IdTrie,
}

impl Tries {
    pub fn build(vocab: &Vocab, ids: &SemanticIds) -> Result<Tries> {
        Ok(Tries {
            text: build_trie(vocab, ids, Modality::Text)?,
            vision: build_trie(vocab, ids, Modality::Vision)?,
        })
    }

    pub fn get(&self, m: Modality) -> &IdTrie {
        match m {
            Modality::Text => &self.text,
            Modality::Vision => &self.vision,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserRanking {
    pub user: usize,
    pub target: usize,
    pub text: Vec<usize>,
    pub vision: Vec<usize>,
    pub ensemble: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub text: TopK,
    pub vision: TopK,
    pub ensemble: TopK,
    #[serde(skip)]
    pub rankings: Vec<UserRanking>,
}

/// Order-preserving map over `items`, split into contiguous chunks across
/// `threads` scoped threads.
pub fn parallel_map<T: Sync, R: Send>(
    items: &[T],
    threads: usize,
    f: impl Fn(&T) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    if threads <= 1 || items.len() < 2 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let parts: Vec<Result<Vec<R>>> = std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&f).collect::<Result<Vec<R>>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// `max` users spread evenly over `0..n` (all of them when `max` is 0 or
/// at least `n`).
pub fn spread_users(n: usize, max: usize) -> Vec<usize> {
    if max == 0 || max >= n {
        return (0..n).collect();
    }
    (0..max).map(|i| i * n / max).collect()
}

/// Per-modality and ensemble metrics for `users` (indices into `seqs`).
pub fn evaluate_model(
    model: &GrmModel,
    ids: &SemanticIds,
    tries: &Tries,
    seqs: &[Vec<usize>],
    users: &[usize],
    holdout: Holdout,
    opts: &InferOptions,
) -> Result<EvalReport> {
    let cases: Vec<(usize, &[usize], usize)> = users
        .iter()
        .filter_map(|&u| holdout_case(&seqs[u], holdout).map(|(h, t)| (u, h, t)))
        .collect();
    let rankings = parallel_map(&cases, opts.threads, |&(user, hist, target)| {
        let ht = history_tokens(&model.vocab, ids, Task::RecT, hist, opts.window)?;
        let hv = history_tokens(&model.vocab, ids, Task::RecV, hist, opts.window)?;
        let out = ensemble_rank(model, &ht, &hv, &tries.text, &tries.vision, ids, opts.beam_width, opts.k)?;
        Ok(UserRanking {
            user,
            target,
            text: out.text.items(),
            vision: out.vision.items(),
            ensemble: out.ensemble.items(),
        })
    })?;
    let truth: Vec<usize> = rankings.iter().map(|r| r.target).collect();
    let metric = |f: fn(&UserRanking) -> &Vec<usize>| {
        evaluate(&rankings.iter().map(|r| Some(f(r).clone())).collect::<Vec<_>>(), &truth)
    };
    Ok(EvalReport {
        text: metric(|r| &r.text),
        vision: metric(|r| &r.vision),
        ensemble: metric(|r| &r.ensemble),
        rankings,
    })
}

/// Metrics of single-modality next-item beams.
pub fn evaluate_modality(
    model: &GrmModel,
    ids: &SemanticIds,
    trie: &IdTrie,
    seqs: &[Vec<usize>],
    users: &[usize],
    holdout: Holdout,
    m: Modality,
    opts: &InferOptions,
) -> Result<TopK> {
    let cases: Vec<(&[usize], usize)> = users.iter().filter_map(|&u| holdout_case(&seqs[u], holdout)).collect();
    let ranked = parallel_map(&cases, opts.threads, |&(hist, _)| {
        let x = history_tokens(&model.vocab, ids, Task::rec(m), hist, opts.window)?;
        Ok(Some(constrained_beam_search(model, &x, trie, opts.beam_width, opts.k)?.items()))
    })?;
    let truth: Vec<usize> = cases.iter().map(|c| c.1).collect();
    Ok(evaluate(&ranked, &truth))
}

/// The `k` most frequent items across all train splits, ties to the lower
/// index.
pub fn popularity_ranking(seqs: &[Vec<usize>], n_items: usize, k: usize) -> Vec<usize> {
    let mut counts = vec![0usize; n_items];
    for s in seqs {
        if let Some(split) = leave_one_out(s) {
            split.train.iter().for_each(|&i| counts[i] += 1);
        }
    }
    let mut order: Vec<usize> = (0..n_items).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

pub fn evaluate_popularity(seqs: &[Vec<usize>], users: &[usize], holdout: Holdout, n_items: usize, k: usize) -> TopK {
    let top = popularity_ranking(seqs, n_items, k);
    let truth: Vec<usize> = users.iter().filter_map(|&u| holdout_case(&seqs[u], holdout)).map(|c| c.1).collect();
    evaluate(&vec![Some(top); truth.len()], &truth)
}
