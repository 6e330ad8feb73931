//! Collision rates, per-level perplexity and the sorted code histogram of a
//! trained quantizer.
//!
//! cargo run --release --example codebook_diagnostics -- [seed]

use crossmodal_rec::data::{synth_dual_modal, Modality, SynthConfig};
use crossmodal_rec::diagnostics::{code_histogram, diagnose, histogram_csv};
use crossmodal_rec::labels::gen_pseudo_labels;
use crossmodal_rec::quantizer::{assign_semantic_ids, train_quantizer, IdHyper, TrainOptions};

fn main() -> crossmodal_rec::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let cfg = SynthConfig { seed, ..SynthConfig::default() };
    let data = synth_dual_modal(&cfg)?;
    let (lt, lv) = gen_pseudo_labels(&data.text, &data.vision, cfg.n_clusters, seed)?;
    let hyper = IdHyper { epochs: 20, ..IdHyper::desk() };
    let (params, _) = train_quantizer(&data.text, &data.vision, &lt, &lv, &hyper, &TrainOptions { seed, last_good: None })?;
    let ids = assign_semantic_ids(&params, &data.text, &data.vision)?;

    let mut hists = Vec::new();
    for m in Modality::BOTH {
        let raw = ids.raw(m).expect("fresh IDs keep raw codes");
        for row in diagnose(m, raw, ids.get(m), hyper.codebook_size)? {
            println!(
                "{m:<6} level {}  collisions {:5.2}% -> {:.2}%  perplexity {:6.2}  top groups {:?}",
                row.level,
                row.collision_rate,
                row.resolved_collision_rate,
                row.perplexity,
                &row.group_sums[..row.group_sums.len().min(2)]
            );
        }
        for l in 0..hyper.levels {
            hists.push((m, code_histogram(l, raw, hyper.codebook_size)?));
        }
    }
    let csv = histogram_csv(&hists);
    println!("{} histogram rows; first lines:", csv.lines().count() - 1);
    for line in csv.lines().take(4) {
        println!("  {line}");
    }
    Ok(())
}
