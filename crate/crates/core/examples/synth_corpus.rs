//! Generates a synthetic dual-modal corpus, writes it in the ingest formats
//! and reads it back.
//!
//! cargo run --release --example synth_corpus -- [out_dir]

use std::path::PathBuf;

use crossmodal_rec::data::{leave_one_out, load_embeddings, load_interactions, synth_dual_modal, Modality, SynthConfig};

fn main() -> crossmodal_rec::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("xmrec-synth"));
    std::fs::create_dir_all(&out).expect("output directory");

    let cfg = SynthConfig::default();
    let data = synth_dual_modal(&cfg)?;
    data.text.write_binary(&out.join("text.bin"))?;
    data.vision.write_jsonl(&out.join("vision.jsonl"))?;
    data.log.write_jsonl(&out.join("interactions.jsonl"))?;

    let text = load_embeddings(&out.join("text.bin"), Modality::Text)?;
    let vision = load_embeddings(&out.join("vision.jsonl"), Modality::Vision)?;
    let log = load_interactions(&out.join("interactions.jsonl"))?;
    println!("{} items: text dim {}, vision dim {}", text.len(), text.dim(), vision.dim());
    println!("{} users, mean sequence length {:.2}", log.len(), log.average_len());

    let first = &log.users[0];
    let split = leave_one_out(&first.items).expect("sequences have at least three items");
    println!("user {}: train {:?}, valid {}, test {}", first.user, split.train, split.valid, split.test);
    println!("files in {}", out.display());
    Ok(())
}
