//! Seeded desk experiments on the synthetic corpus.

use std::path::{Path, PathBuf};
use std::time::Instant;

use crossmodal_rec::data::{synth_dual_modal, Modality, SynthConfig};
use crossmodal_rec::diagnostics::{codebook_perplexity, collision_rate};
use crossmodal_rec::labels::gen_pseudo_labels;
use crossmodal_rec::pipeline::{run_stage, RunConfig, Stage};
use crossmodal_rec::quantizer::{assign_semantic_ids, train_quantizer, IdHyper, TrainOptions};

pub const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

#[derive(Clone, Debug)]
pub struct QuantRun {
    /// Mean over modalities, in percent.
    pub raw_collision: f64,
    pub resolved_collision: f64,
    /// Deepest level, mean over modalities.
    pub perplexity: f64,
}

/// One quantizer training on the default synthetic corpus.
pub fn quantizer_run(seed: u64, hyper: &IdHyper) -> QuantRun {
    let cfg = SynthConfig { seed, ..SynthConfig::default() };
    let data = synth_dual_modal(&cfg).unwrap();
    let (lt, lv) = gen_pseudo_labels(&data.text, &data.vision, cfg.n_clusters, seed).unwrap();
    let (params, _) =
        train_quantizer(&data.text, &data.vision, &lt, &lv, hyper, &TrainOptions { seed, last_good: None }).unwrap();
    let ids = assign_semantic_ids(&params, &data.text, &data.vision).unwrap();
    let mut run = QuantRun { raw_collision: 0.0, resolved_collision: 0.0, perplexity: 0.0 };
    for m in Modality::BOTH {
        let raw = ids.raw(m).unwrap();
        run.raw_collision += collision_rate(raw) / 2.0;
        run.resolved_collision = run.resolved_collision.max(collision_rate(ids.get(m)));
        run.perplexity += codebook_perplexity(hyper.levels - 1, raw, hyper.codebook_size).unwrap() / 2.0;
    }
    run
}

pub fn desk_config() -> RunConfig {
    RunConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/synthetic.toml")).unwrap()
}

/// Overrides that switch off every cross-modal alignment mechanism.
pub fn ablation(cfg: &RunConfig) -> RunConfig {
    let zeros = format!("[{}]", vec!["0.0"; cfg.quantizer.levels].join(", "));
    cfg.with_overrides(&[
        format!("quantizer.lambda_con={zeros}"),
        "quantizer.lambda_align=0.0".into(),
        "grm.lambda_implicit=0.0".into(),
        "tasks.explicit=false".into(),
    ])
    .unwrap()
}

#[derive(Clone, Debug)]
pub struct GrmRun {
    pub seed: u64,
    pub ensemble: f64,
    pub untrained: f64,
    pub popularity: f64,
    pub seconds: f64,
}

/// Every stage except `infer` into `dir`, then the test metrics.
pub fn grm_run(cfg: &RunConfig, seed: u64, dir: PathBuf) -> GrmRun {
    let clock = Instant::now();
    let mut cfg = cfg.clone();
    cfg.paths.run_dir = dir;
    cfg.seeds.labels = seed;
    cfg.seeds.quantizer = seed;
    cfg.seeds.grm = seed;
    cfg.synth.seed = seed;
    cfg.threads = 1;
    for stage in Stage::ALL.into_iter().filter(|s| *s != Stage::Infer) {
        run_stage(stage, &cfg).unwrap();
    }
    let m: serde_json::Value =
        serde_json::from_slice(&std::fs::read(cfg.paths.run_dir.join("metrics.json")).unwrap()).unwrap();
    GrmRun {
        seed,
        ensemble: m["HR@10"].as_f64().unwrap(),
        untrained: m["untrained"]["HR@10"].as_f64().unwrap(),
        popularity: m["popularity"]["HR@10"].as_f64().unwrap(),
        seconds: clock.elapsed().as_secs_f64(),
    }
}
