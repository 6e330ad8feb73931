//! Trie-constrained beam search and the two-modality ensemble on a toy
//! catalogue, checked against scoring every item by teacher forcing.
//!
//! cargo run --release --example constrained_beam

use crossmodal_rec::data::Modality;
use crossmodal_rec::grm::{history_tokens, seq2seq_loss, target_tokens, GrmConfig, GrmModel, Task, TrainingExample, Vocab};
use crossmodal_rec::inference::{constrained_beam_search, ensemble_rank, forced_scores, RankedList, Tries};
use crossmodal_rec::quantizer::{sid_string, SemanticIds};
use crossmodal_rec::tensor::{AdamW, AdamWConfig, Graph};

fn main() -> crossmodal_rec::Result<()> {
    // 12 items, 3-level IDs over a codebook of 4.
    let n = 12;
    let ids = SemanticIds {
        items: (0..n).map(|i| format!("item-{i}")).collect(),
        text: (0..n).map(|i| vec![i % 4, (i / 4) % 4, (i * 3) % 4]).collect(),
        vision: (0..n).map(|i| vec![(i / 3) % 4, i % 3, (i + 1) % 4]).collect(),
        raw_text: None,
        raw_vision: None,
    };
    let vocab = Vocab::new(3, 4)?;
    let mut model = GrmModel::new(vocab, GrmConfig { d_model: 32, heads: 4, layers: 1, d_ff: 64 }, 0)?;

    // Teach "after item i comes item i+1" in both modalities.
    let mut examples = Vec::new();
    for i in 0..n - 1 {
        for m in Modality::BOTH {
            let task = Task::rec(m);
            examples.push(TrainingExample {
                task,
                x: history_tokens(&vocab, &ids, task, &[i], 20)?,
                y: target_tokens(&vocab, &ids, m, i + 1)?,
            });
        }
    }
    let refs: Vec<&TrainingExample> = examples.iter().collect();
    let mut opt = AdamW::new(AdamWConfig { lr: 1e-2, ..AdamWConfig::default() });
    for _ in 0..150 {
        let mut g = Graph::new();
        let loss = seq2seq_loss(&mut g, &model, &refs)?;
        let grads = g.backward(loss)?;
        opt.step(&mut model.store, &grads)?;
    }

    let tries = Tries::build(&vocab, &ids)?;
    let h_t = history_tokens(&vocab, &ids, Task::RecT, &[4], 20)?;
    let h_v = history_tokens(&vocab, &ids, Task::RecV, &[4], 20)?;
    let beam = constrained_beam_search(&model, &h_t, &tries.text, 5, 5)?;
    println!("text beam after item-4:");
    for (item, score) in &beam.entries {
        println!("  {:<8} {}  log p {:.3}", ids.items[*item], sid_string(&ids.text[*item], Modality::Text), score);
    }

    let cands: Vec<Vec<usize>> = ids.text.iter().map(|c| vocab.item_tokens(Modality::Text, c)).collect::<Result<_, _>>()?;
    let all = forced_scores(&model, &h_t, &cands)?;
    let exhaustive = RankedList::from_scores(all.into_iter().enumerate().collect(), 5);
    // A beam narrower than the catalogue may prune the true top 5; one at
    // least as wide as the catalogue cannot.
    let wide = constrained_beam_search(&model, &h_t, &tries.text, n, 5)?;
    println!("beam width 5 matches exhaustive top 5: {}", exhaustive.items() == beam.items());
    println!("beam width {n} matches exhaustive top 5: {}", exhaustive.items() == wide.items());

    let out = ensemble_rank(&model, &h_t, &h_v, &tries.text, &tries.vision, &ids, 5, 3)?;
    println!("ensemble top 3: {:?}", out.ensemble.items().iter().map(|&i| &ids.items[i]).collect::<Vec<_>>());
    Ok(())
}
