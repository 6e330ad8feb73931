//! Trains the cross-modal quantizer on a synthetic corpus, with and without
//! the cross-modal losses, and compares collision rate and perplexity.
//!
//! cargo run --example quantize_synthetic -- [seed] [epochs]

use crossmodal_rec::data::{synth_dual_modal, Modality, SynthConfig};
use crossmodal_rec::diagnostics::{codebook_perplexity, collision_rate};
use crossmodal_rec::labels::gen_pseudo_labels;
use crossmodal_rec::quantizer::{assign_semantic_ids, train_quantizer, IdHyper, TrainOptions};

fn main() -> crossmodal_rec::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let epochs: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(50);

    let cfg = SynthConfig { seed, ..SynthConfig::default() };
    let data = synth_dual_modal(&cfg)?;
    let (lt, lv) = gen_pseudo_labels(&data.text, &data.vision, cfg.n_clusters, seed)?;

    let full = IdHyper { epochs, ..IdHyper::desk() };
    for (name, hyper) in [("cross-modal", full.clone()), ("independent", full.without_alignment())] {
        let opts = TrainOptions { seed, last_good: None };
        let (params, report) = train_quantizer(&data.text, &data.vision, &lt, &lv, &hyper, &opts)?;
        println!("{name}");
        for e in report.epochs.iter().filter(|e| e.epoch % 10 == 1 || e.epoch == epochs) {
            println!(
                "  epoch {:>3}  total {:8.3}  recon {:7.3}/{:7.3}  collisions {:5.2}%/{:5.2}%",
                e.epoch, e.loss.total, e.loss.recon_t, e.loss.recon_v, e.collision_t, e.collision_v
            );
        }
        let ids = assign_semantic_ids(&params, &data.text, &data.vision)?;
        for m in Modality::BOTH {
            let raw = ids.raw(m).expect("fresh assignment keeps raw codes");
            println!(
                "  {m}: raw collisions {:.2}%, resolved {:.2}%, deepest-level perplexity {:.2}",
                collision_rate(raw),
                collision_rate(ids.get(m)),
                codebook_perplexity(hyper.levels - 1, raw, hyper.codebook_size)?
            );
        }
    }
    Ok(())
}
