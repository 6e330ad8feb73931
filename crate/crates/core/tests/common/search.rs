//! A small trained model over L=3, M=4 IDs and exhaustive-scoring oracles.

use crossmodal_rec::data::Modality;
use crossmodal_rec::grm::{seq2seq_loss, target_tokens, GrmConfig, GrmModel, Task, TrainingExample, Vocab};
use crossmodal_rec::inference::{constrained_beam_search, forced_scores, IdTrie, Tries};
use crossmodal_rec::quantizer::SemanticIds;
use crossmodal_rec::tensor::{AdamW, AdamWConfig, Graph};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Toy {
    pub model: GrmModel,
    pub ids: SemanticIds,
    pub tries: Tries,
}

/// `n` items with distinct random IDs per modality and a model fitted for a
/// few steps to arbitrary history → item pairs, so its scores are far from
/// uniform.
pub fn toy(n: usize, seed: u64) -> Toy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all: Vec<Vec<usize>> = (0..64).map(|c| vec![c / 16, (c / 4) % 4, c % 4]).collect();
    let pick = |rng: &mut ChaCha8Rng| {
        let mut v = all.clone();
        v.shuffle(rng);
        v.truncate(n);
        v
    };
    let ids = SemanticIds {
        items: (0..n).map(|i| format!("t{i}")).collect(),
        text: pick(&mut rng),
        vision: pick(&mut rng),
        raw_text: None,
        raw_vision: None,
    };
    let vocab = Vocab::new(3, 4).unwrap();
    let mut model = GrmModel::new(vocab, GrmConfig { d_model: 16, heads: 2, layers: 1, d_ff: 32 }, seed).unwrap();
    let examples: Vec<TrainingExample> = (0..32)
        .map(|_| {
            let task = if rng.gen_bool(0.5) { Task::RecT } else { Task::RecV };
            let m = task.source();
            let mut x = vec![task.tag()];
            for _ in 0..rng.gen_range(1..4) {
                x.extend(vocab.item_tokens(m, &ids.get(m)[rng.gen_range(0..n)]).unwrap());
            }
            let y = target_tokens(&vocab, &ids, task.target(), rng.gen_range(0..n)).unwrap();
            TrainingExample { task, x, y }
        })
        .collect();
    let mut opt = AdamW::new(AdamWConfig { lr: 1e-2, ..AdamWConfig::default() });
    for _ in 0..30 {
        let refs: Vec<&TrainingExample> = examples.iter().collect();
        let mut g = Graph::new();
        let loss = seq2seq_loss(&mut g, &model, &refs).unwrap();
        let grads = g.backward(loss).unwrap();
        opt.step(&mut model.store, &grads).unwrap();
    }
    let tries = Tries::build(&vocab, &ids).unwrap();
    Toy { model, ids, tries }
}

pub fn history(toy: &Toy, m: Modality, items: &[usize]) -> Vec<usize> {
    let task = Task::rec(m);
    let mut x = vec![task.tag()];
    for &i in items {
        x.extend(toy.model.vocab.item_tokens(m, &toy.ids.get(m)[i]).unwrap());
    }
    x
}

/// Every item scored by teacher forcing, sorted by score then index.
pub fn exhaustive(toy: &Toy, m: Modality, history: &[usize]) -> Vec<(usize, f32)> {
    let cands: Vec<Vec<usize>> =
        toy.ids.get(m).iter().map(|c| toy.model.vocab.item_tokens(m, c).unwrap()).collect();
    let scores = forced_scores(&toy.model, history, &cands).unwrap();
    let mut v: Vec<(usize, f32)> = scores.into_iter().enumerate().collect();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    v
}

/// Beam search with `W ≥ N` against exhaustive scoring, for several
/// histories; also checks every returned item resolves through the trie.
pub fn beam_matches_exhaustive(n: usize, seed: u64) -> Result<(), String> {
    let toy = toy(n, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    for m in Modality::BOTH {
        let trie: &IdTrie = toy.tries.get(m);
        for _ in 0..4 {
            let items: Vec<usize> = (0..rng.gen_range(1..4)).map(|_| rng.gen_range(0..n)).collect();
            let h = history(&toy, m, &items);
            let want = exhaustive(&toy, m, &h);
            for width in [n, n + 5] {
                let got = constrained_beam_search(&toy.model, &h, trie, width, n).map_err(|e| e.to_string())?;
                if got.items() != want.iter().map(|w| w.0).collect::<Vec<_>>() {
                    return Err(format!("{m} W={width}: {:?} vs {:?}", got.items(), want));
                }
                for ((_, a), (_, b)) in got.entries.iter().zip(&want) {
                    if (a - b).abs() > 1e-4 {
                        return Err(format!("{m}: beam score {a} vs forced {b}"));
                    }
                }
                for &i in &got.items() {
                    let tokens = toy.model.vocab.item_tokens(m, &toy.ids.get(m)[i]).map_err(|e| e.to_string())?;
                    if i >= n || trie.lookup(&tokens) != Some(i) {
                        return Err(format!("{m}: generated item {i} is not a real item"));
                    }
                }
            }
        }
    }
    Ok(())
}
