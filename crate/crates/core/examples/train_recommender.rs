//! Desk-scale run of the whole pipeline on a synthetic corpus: semantic IDs,
//! task construction, generative recommender training and test metrics
//! against an untrained model and a popularity baseline.
//!
//! cargo run --release --example train_recommender -- [seed] [epochs]

use std::time::Instant;

use crossmodal_rec::data::{synth_dual_modal, SynthConfig};
use crossmodal_rec::grm::{
    build_tasks, index_sequences, train_grm, GrmHyper, GrmModel, GrmTrainOptions, TaskOptions, Vocab,
};
use crossmodal_rec::inference::{evaluate_model, evaluate_popularity, spread_users, Holdout, Tries};
use crossmodal_rec::labels::gen_pseudo_labels;
use crossmodal_rec::quantizer::{assign_semantic_ids, train_quantizer, IdHyper, TrainOptions};

fn main() -> crossmodal_rec::Result<()> {
    env_logger::init();
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let epochs: Option<usize> = args.next().and_then(|s| s.parse().ok());
    let clock = Instant::now();

    let cfg = SynthConfig { seed, ..SynthConfig::default() };
    let data = synth_dual_modal(&cfg)?;
    let (lt, lv) = gen_pseudo_labels(&data.text, &data.vision, cfg.n_clusters, seed)?;
    let id_hyper = IdHyper::desk();
    let (params, _) = train_quantizer(&data.text, &data.vision, &lt, &lv, &id_hyper, &TrainOptions { seed, last_good: None })?;
    let ids = assign_semantic_ids(&params, &data.text, &data.vision)?;
    println!("semantic IDs ready after {:.1}s", clock.elapsed().as_secs_f64());

    let vocab = Vocab::new(id_hyper.levels, id_hyper.codebook_size)?;
    let seqs = index_sequences(&data.log, &ids)?;
    let mut hyper = GrmHyper::desk();
    if let Some(e) = epochs {
        hyper.epochs = e;
    }
    let examples = build_tasks(&seqs, &ids, &vocab, TaskOptions { window: hyper.infer.window, explicit: true })?;
    println!("{} training examples", examples.len());

    let untrained = GrmModel::new(vocab, hyper.model.clone(), seed)?;
    let (model, report) = train_grm(untrained.clone(), &examples, &ids, &seqs, &hyper, &GrmTrainOptions { seed, last_good: None })?;
    for e in &report.epochs {
        println!(
            "epoch {:>2}  seq2seq {:.4}  implicit {:.4}  valid HR@10 {:.4}",
            e.epoch,
            e.seq2seq,
            e.implicit,
            e.valid_hr10.unwrap_or(f64::NAN)
        );
    }
    println!("trained after {:.1}s (best epoch {})", clock.elapsed().as_secs_f64(), report.best_epoch);

    let tries = Tries::build(&vocab, &ids)?;
    // 1000 evenly spaced test users keep the run to a few minutes.
    let users = spread_users(seqs.len(), 1000);
    let trained = evaluate_model(&model, &ids, &tries, &seqs, &users, Holdout::Test, &hyper.infer)?;
    let fresh = evaluate_model(&untrained, &ids, &tries, &seqs, &users, Holdout::Test, &hyper.infer)?;
    let pop = evaluate_popularity(&seqs, &users, Holdout::Test, ids.items.len(), hyper.infer.k);
    println!("test HR@10  text {:.4}  vision {:.4}  ensemble {:.4}", trained.text.hr10, trained.vision.hr10, trained.ensemble.hr10);
    println!("untrained ensemble HR@10 {:.4}, popularity HR@10 {:.4}", fresh.ensemble.hr10, pop.hr10);
    println!("done after {:.1}s", clock.elapsed().as_secs_f64());
    Ok(())
}
