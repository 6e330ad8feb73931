use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::trie::IdTrie;
use crate::data::Modality;
use crate::error::{Error, Result};
use crate::grm::{GrmModel, SeqBatch, BOS};
use crate::quantizer::SemanticIds;
use crate::tensor::kernels::log_softmax_in_place;
use crate::tensor::{Graph, Var};

/// Items in descending score order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub entries: Vec<(usize, f32)>,
}

impl RankedList {
    pub fn items(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.0).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Sorts by score (descending, then item) and keeps `k` entries.
    pub fn from_scores(mut entries: Vec<(usize, f32)>, k: usize) -> RankedList {
        entries.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        entries.truncate(k);
        RankedList { entries }
    }
}

/// Encodes one history and returns `(memory, layout)`.
fn encode_one(g: &mut Graph, model: &GrmModel, history: &[usize]) -> Result<(Var, SeqBatch)> {
    let src = SeqBatch::new(&[history])?;
    let memory = model.encode(g, &src)?;
    Ok((memory, src))
}

/// Decoder logits for `prefixes` (each starting with BOS), all attending to
/// one encoded history.
fn decode_many(g: &mut Graph, model: &GrmModel, memory: Var, src: &SeqBatch, prefixes: &[Vec<usize>]) -> Result<(Var, usize)> {
    let tgt = SeqBatch::new(prefixes)?;
    let logits = model.decode(g, memory, src, &tgt)?;
    Ok((logits, tgt.len))
}

fn log_probs(row: &[f32]) -> Vec<f32> {
    let mut r = row.to_vec();
    log_softmax_in_place(&mut r);
    r
}

#[derive(Clone, Debug)]
struct Beam {
    tokens: Vec<usize>,
    node: usize,
    score: f32,
}

/// Beam search over the decoder where every expansion is restricted to the
/// children of the beam's trie node. Scores are summed token log-probabilities.
pub fn constrained_beam_search(
    model: &GrmModel,
    history: &[usize],
    trie: &IdTrie,
    width: usize,
    k: usize,
) -> Result<RankedList> {
    if trie.is_empty() {
        return Err(Error::InvalidArgument("constrained beam search over an empty trie".into()));
    }
    if width < k || width == 0 {
        return Err(Error::InvalidArgument(format!("beam width {width} must be at least k = {k} and positive")));
    }
    let mut g = Graph::inference();
    let (memory, src) = encode_one(&mut g, model, history)?;
    let mut beams = vec![Beam { tokens: Vec::new(), node: IdTrie::ROOT, score: 0.0 }];
    for step in 0..trie.depth() {
        let prefixes: Vec<Vec<usize>> = beams
            .iter()
            .map(|b| std::iter::once(BOS).chain(b.tokens.iter().copied()).collect())
            .collect();
        let (logits, len) = decode_many(&mut g, model, memory, &src, &prefixes)?;
        let lv = g.value(logits);
        let mut next = Vec::new();
        for (b, beam) in beams.iter().enumerate() {
            let lp = log_probs(lv.row_slice(b * len + step));
            for &(tok, child) in trie.children(beam.node) {
                let mut tokens = beam.tokens.clone();
                tokens.push(tok);
                next.push(Beam { tokens, node: child, score: beam.score + lp[tok] });
            }
        }
        next.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.tokens.cmp(&b.tokens)));
        next.truncate(width);
        beams = next;
    }
    let scored = beams
        .iter()
        .map(|b| {
            let item = trie.item(b.node).expect("full-depth trie path ends at a terminal");
            (item, b.score)
        })
        .collect();
    let out = RankedList::from_scores(scored, k);
    if out.entries.iter().any(|e| !e.1.is_finite()) {
        return Err(Error::Numeric("non-finite beam score".into()));
    }
    Ok(out)
}

/// Teacher-forced sums of token log-probabilities of each candidate ID.
pub fn forced_scores(model: &GrmModel, history: &[usize], candidates: &[Vec<usize>]) -> Result<Vec<f32>> {
    if candidates.is_empty() {
        return Ok(Vec::new());
    }
    let v = model.vocab.size();
    for c in candidates {
        if c.len() != model.vocab.levels {
            return Err(Error::InvalidArgument(format!(
                "candidate has {} tokens, expected {}",
                c.len(),
                model.vocab.levels
            )));
        }
        if let Some(&bad) = c.iter().find(|&&t| t >= v) {
            return Err(Error::InvalidArgument(format!("token {bad} outside vocabulary of {v}")));
        }
    }
    let mut g = Graph::inference();
    let (memory, src) = encode_one(&mut g, model, history)?;
    let prefixes: Vec<Vec<usize>> = candidates
        .iter()
        .map(|c| std::iter::once(BOS).chain(c[..c.len() - 1].iter().copied()).collect())
        .collect();
    let (logits, len) = decode_many(&mut g, model, memory, &src, &prefixes)?;
    let lv = g.value(logits);
    Ok(candidates
        .iter()
        .enumerate()
        .map(|(b, c)| {
            c.iter()
                .enumerate()
                .fold(0.0f32, |acc, (t, &tok)| acc + log_probs(lv.row_slice(b * len + t))[tok])
        })
        .collect())
}

pub fn forced_score(model: &GrmModel, history: &[usize], candidate: &[usize]) -> Result<f32> {
    Ok(forced_scores(model, history, &[candidate.to_vec()])?[0])
}

/// Per-modality beams and the fused ranking for one user.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EnsembleOutput {
    pub text: RankedList,
    pub vision: RankedList,
    pub ensemble: RankedList,
}

/// Runs a beam of `width` per modality, pools the candidates and ranks the
/// union by the mean of both modalities' forced scores.
#[allow(clippy::too_many_arguments)]
pub fn ensemble_rank(
    model: &GrmModel,
    history_t: &[usize],
    history_v: &[usize],
    trie_t: &IdTrie,
    trie_v: &IdTrie,
    ids: &SemanticIds,
    width: usize,
    k: usize,
) -> Result<EnsembleOutput> {
    let beam_t = constrained_beam_search(model, history_t, trie_t, width, width)?;
    let beam_v = constrained_beam_search(model, history_v, trie_v, width, width)?;
    let union: Vec<usize> = beam_t
        .items()
        .into_iter()
        .chain(beam_v.items())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut mean = vec![0.0f32; union.len()];
    for (m, history, beam) in [(Modality::Text, history_t, &beam_t), (Modality::Vision, history_v, &beam_v)] {
        // A beam score is the same teacher-forced sum, so only items the
        // other modality proposed need scoring here.
        let known: HashMap<usize, f32> = beam.entries.iter().copied().collect();
        let missing: Vec<usize> = union.iter().copied().filter(|i| !known.contains_key(i)).collect();
        let cands = missing
            .iter()
            .map(|&i| model.vocab.item_tokens(m, &ids.get(m)[i]))
            .collect::<Result<Vec<_>>>()?;
        let forced: HashMap<usize, f32> = missing.into_iter().zip(forced_scores(model, history, &cands)?).collect();
        for (acc, i) in mean.iter_mut().zip(&union) {
            *acc += 0.5 * known.get(i).or_else(|| forced.get(i)).expect("scored above");
        }
    }
    let fused = RankedList::from_scores(union.into_iter().zip(mean).collect(), k);
    let trim = |mut r: RankedList| {
        r.entries.truncate(k);
        r
    };
    Ok(EnsembleOutput { text: trim(beam_t), vision: trim(beam_v), ensemble: fused })
}
