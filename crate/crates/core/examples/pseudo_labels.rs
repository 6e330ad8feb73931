//! K-means pseudo-labels per modality on the synthetic corpus, scored
//! against the generating clusters.
//!
//! cargo run --release --example pseudo_labels -- [seed]

use std::collections::HashMap;

use crossmodal_rec::data::{synth_dual_modal, SynthConfig};
use crossmodal_rec::labels::{gen_pseudo_labels, kmeans};

/// Share of items whose label's majority generating cluster is their own.
fn purity(labels: &[usize], truth: &[usize]) -> f64 {
    let mut votes: HashMap<usize, HashMap<usize, usize>> = HashMap::new();
    for (&l, &t) in labels.iter().zip(truth) {
        *votes.entry(l).or_default().entry(t).or_default() += 1;
    }
    let agree: usize = votes.values().map(|v| v.values().max().copied().unwrap_or(0)).sum();
    agree as f64 / labels.len() as f64
}

fn main() -> crossmodal_rec::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let cfg = SynthConfig { seed, ..SynthConfig::default() };
    let data = synth_dual_modal(&cfg)?;

    let single = kmeans(data.text.values(), data.text.dim(), cfg.n_clusters, 50, seed)?;
    println!(
        "single run: {} iterations, inertia {:.1} -> {:.1}",
        single.iterations,
        single.inertia_history[0],
        single.inertia()
    );

    let (t, v) = gen_pseudo_labels(&data.text, &data.vision, cfg.n_clusters, seed)?;
    println!("text purity   {:.3}", purity(&t.labels, &data.text_cluster));
    println!("vision purity {:.3}", purity(&v.labels, &data.vision_cluster));
    let same = t.labels.iter().zip(&v.labels).filter(|(a, b)| a == b).count();
    println!("identical label ids across modalities: {same} (ids are arbitrary per modality)");
    Ok(())
}
