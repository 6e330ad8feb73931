//! Config-driven stages over a run directory, each recorded in
//! `manifest.json` with its settings and input/output hashes.

mod config;
mod manifest;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::info;
use serde::Serialize;
use serde_json::json;

pub use config::{EvalConfig, LabelConfig, Paths, RunConfig, Seeds};
pub use manifest::{content_hash, file_hash, Manifest, StageRecord};

use crate::data::{load_embeddings, load_interactions, synth_dual_modal, EmbeddingTable, InteractionLog, Modality};
use crate::diagnostics::{code_histogram, diagnose, histogram_csv};
use crate::error::{Error, Result};
use crate::grm::{
    build_tasks, index_sequences, read_tasks_jsonl, train_grm, write_tasks_jsonl, GrmModel, GrmTrainOptions, Vocab,
};
use crate::inference::{evaluate_model, evaluate_popularity, spread_users, Holdout, TopK, Tries};
use crate::labels::{gen_pseudo_labels, read_label_cache, write_label_cache};
use crate::quantizer::{assign_semantic_ids, read_ids_jsonl, train_quantizer, write_ids_jsonl, SemanticIds, TrainOptions};

pub const TEXT_EMBEDDINGS: &str = "text_embeddings.bin";
pub const VISION_EMBEDDINGS: &str = "vision_embeddings.bin";
pub const INTERACTIONS: &str = "interactions.jsonl";
pub const LABELS: &str = "labels.jsonl";
pub const QUANTIZER: &str = "quantizer.ckpt";
pub const QUANTIZER_LOG: &str = "quantizer_log.json";
pub const IDS: &str = "ids.jsonl";
pub const DIAG: &str = "diag.json";
pub const HISTOGRAM: &str = "code_histogram.csv";
pub const TASKS: &str = "tasks.jsonl";
pub const MODEL: &str = "model.ckpt";
pub const TRAIN_LOG: &str = "train_log.json";
pub const RANKINGS: &str = "rankings.jsonl";
pub const METRICS: &str = "metrics.json";
pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Synth,
    Labels,
    Quantize,
    Diagnose,
    BuildTasks,
    Train,
    Infer,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Synth,
        Stage::Labels,
        Stage::Quantize,
        Stage::Diagnose,
        Stage::BuildTasks,
        Stage::Train,
        Stage::Infer,
        Stage::Eval,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Labels => "labels",
            Stage::Quantize => "quantize",
            Stage::Diagnose => "diagnose",
            Stage::BuildTasks => "build-tasks",
            Stage::Train => "train",
            Stage::Infer => "infer",
            Stage::Eval => "eval",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Stage> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown stage `{s}`")))
    }
}

/// Shared state of one invocation.
struct Run<'a> {
    cfg: &'a RunConfig,
    dir: PathBuf,
    manifest: Manifest,
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(v)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

impl<'a> Run<'a> {
    fn open(cfg: &'a RunConfig) -> Result<Run<'a>> {
        let dir = cfg.paths.run_dir.clone();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let manifest = Manifest::load_or_default(&dir.join(MANIFEST))?;
        Ok(Run { cfg, dir, manifest })
    }

    fn out(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// A run-directory artifact produced by `stage`.
    fn artifact(&self, name: &str, stage: Stage) -> Result<PathBuf> {
        let p = self.out(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::MissingArtifact { path: p, stage: stage.as_str() })
        }
    }

    /// A configured input path, or the `synth` output of the same role.
    fn input(&self, configured: &Option<PathBuf>, fallback: &str) -> Result<PathBuf> {
        match configured {
            Some(p) if p.exists() => Ok(p.clone()),
            Some(p) => Err(Error::Data(format!("input {} does not exist", p.display()))),
            None => self.artifact(fallback, Stage::Synth),
        }
    }

    fn embeddings(&self) -> Result<(EmbeddingTable, EmbeddingTable, Vec<PathBuf>)> {
        let tp = self.input(&self.cfg.paths.text_embeddings, TEXT_EMBEDDINGS)?;
        let vp = self.input(&self.cfg.paths.vision_embeddings, VISION_EMBEDDINGS)?;
        Ok((load_embeddings(&tp, Modality::Text)?, load_embeddings(&vp, Modality::Vision)?, vec![tp, vp]))
    }

    fn interactions(&self) -> Result<(InteractionLog, PathBuf)> {
        let p = self.input(&self.cfg.paths.interactions, INTERACTIONS)?;
        Ok((load_interactions(&p)?, p))
    }

    fn ids(&self) -> Result<(SemanticIds, PathBuf)> {
        let p = self.artifact(IDS, Stage::Quantize)?;
        Ok((read_ids_jsonl(&p)?, p))
    }

    fn vocab(&self) -> Result<Vocab> {
        Vocab::new(self.cfg.quantizer.levels, self.cfg.quantizer.codebook_size)
    }

    fn record(
        &mut self,
        stage: Stage,
        seed: Option<u64>,
        settings: serde_json::Value,
        inputs: &[PathBuf],
        outputs: &[&str],
    ) -> Result<()> {
        let mut rec = StageRecord {
            config_hash: self.cfg.hash(),
            seed,
            settings,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        };
        for p in inputs {
            rec.inputs.insert(p.display().to_string(), file_hash(p)?);
        }
        for name in outputs {
            rec.outputs.insert(name.to_string(), file_hash(&self.out(name))?);
        }
        self.manifest.stages.insert(stage.as_str().to_string(), rec);
        self.manifest.save(&self.out(MANIFEST))
    }

    fn synth(&mut self) -> Result<()> {
        let data = synth_dual_modal(&self.cfg.synth)?;
        data.text.write_binary(&self.out(TEXT_EMBEDDINGS))?;
        data.vision.write_binary(&self.out(VISION_EMBEDDINGS))?;
        data.log.write_jsonl(&self.out(INTERACTIONS))?;
        info!("synthesized {} items and {} users", data.text.len(), data.log.len());
        self.record(
            Stage::Synth,
            Some(self.cfg.synth.seed),
            json!({ "synth": self.cfg.synth }),
            &[],
            &[TEXT_EMBEDDINGS, VISION_EMBEDDINGS, INTERACTIONS],
        )
    }

    fn labels(&mut self) -> Result<()> {
        let (text, vision, inputs) = self.embeddings()?;
        let k = self.cfg.labels.k;
        let (lt, lv) = gen_pseudo_labels(&text, &vision, k, self.cfg.seeds.labels)?;
        write_label_cache(&self.out(LABELS), text.ids(), &lt, &lv)?;
        self.record(Stage::Labels, Some(self.cfg.seeds.labels), json!({ "K": k }), &inputs, &[LABELS])
    }

    fn quantize(&mut self) -> Result<()> {
        let (text, vision, mut inputs) = self.embeddings()?;
        let labels = self.artifact(LABELS, Stage::Labels)?;
        let (lt, lv) = read_label_cache(&labels, text.ids(), self.cfg.labels.k)?;
        inputs.push(labels);
        let seed = self.cfg.seeds.quantizer;
        let opts = TrainOptions { seed, last_good: Some(self.out("quantizer.last_good.ckpt")) };
        let (params, report) = train_quantizer(&text, &vision, &lt, &lv, &self.cfg.quantizer, &opts)?;
        params.save(&self.out(QUANTIZER))?;
        write_json(&self.out(QUANTIZER_LOG), &report)?;
        let ids = assign_semantic_ids(&params, &text, &vision)?;
        write_ids_jsonl(&ids, &self.out(IDS))?;
        self.record(Stage::Quantize, Some(seed), self.quantize_settings(), &inputs, &[QUANTIZER, QUANTIZER_LOG, IDS])
    }

    fn quantize_settings(&self) -> serde_json::Value {
        let q = &self.cfg.quantizer;
        json!({
            "K": self.cfg.labels.k,
            "L": q.levels,
            "M": q.codebook_size,
            "tau": q.tau,
            "lambda_align": q.lambda_align,
            "lambda_con": q.lambda_con,
            "quantizer": q,
        })
    }

    fn diagnose(&mut self) -> Result<()> {
        let (ids, p) = self.ids()?;
        let m_size = self.cfg.quantizer.codebook_size;
        let mut rows = Vec::new();
        let mut hists = Vec::new();
        for m in Modality::BOTH {
            let resolved = ids.get(m);
            let raw = ids.raw(m).unwrap_or(resolved);
            rows.extend(diagnose(m, raw, resolved, m_size)?);
            for level in 0..ids.levels() {
                hists.push((m, code_histogram(level, raw, m_size)?));
            }
        }
        write_json(&self.out(DIAG), &json!({ "levels": rows }))?;
        fs::write(self.out(HISTOGRAM), histogram_csv(&hists)).map_err(|e| Error::io(self.out(HISTOGRAM), e))?;
        self.record(Stage::Diagnose, None, json!({ "M": m_size }), &[p], &[DIAG, HISTOGRAM])
    }

    fn build_tasks(&mut self) -> Result<()> {
        let (ids, ip) = self.ids()?;
        let (log, lp) = self.interactions()?;
        let seqs = index_sequences(&log, &ids)?;
        let examples = build_tasks(&seqs, &ids, &self.vocab()?, self.cfg.tasks)?;
        write_tasks_jsonl(&examples, &self.out(TASKS))?;
        info!("{} training examples", examples.len());
        self.record(Stage::BuildTasks, None, json!({ "tasks": self.cfg.tasks }), &[ip, lp], &[TASKS])
    }

    fn train(&mut self) -> Result<()> {
        let (ids, ip) = self.ids()?;
        let (log, lp) = self.interactions()?;
        let tp = self.artifact(TASKS, Stage::BuildTasks)?;
        let examples = read_tasks_jsonl(&tp)?;
        let seqs = index_sequences(&log, &ids)?;
        let seed = self.cfg.seeds.grm;
        let mut hyper = self.cfg.grm.clone();
        hyper.infer.threads = self.cfg.threads;
        let model = GrmModel::new(self.vocab()?, hyper.model.clone(), seed)?;
        let opts = GrmTrainOptions { seed, last_good: Some(self.out("model.last_good.ckpt")) };
        let (model, report) = train_grm(model, &examples, &ids, &seqs, &hyper, &opts)?;
        model.save(&self.out(MODEL))?;
        write_json(&self.out(TRAIN_LOG), &report)?;
        self.record(Stage::Train, Some(seed), json!({ "grm": self.cfg.grm }), &[ip, lp, tp], &[MODEL, TRAIN_LOG])
    }

    fn load_model(&self) -> Result<(GrmModel, PathBuf)> {
        let p = self.artifact(MODEL, Stage::Train)?;
        Ok((GrmModel::load(&p)?, p))
    }

    fn infer(&mut self) -> Result<()> {
        let (ids, ip) = self.ids()?;
        let (log, lp) = self.interactions()?;
        let (model, mp) = self.load_model()?;
        let seqs = index_sequences(&log, &ids)?;
        let tries = Tries::build(&model.vocab, &ids)?;
        let mut opts = self.cfg.grm.infer;
        opts.threads = self.cfg.threads;
        let users: Vec<usize> = (0..seqs.len()).collect();
        let report = evaluate_model(&model, &ids, &tries, &seqs, &users, Holdout::Test, &opts)?;
        self.write_rankings(&report.rankings, &log, &ids)?;
        self.record(Stage::Infer, None, json!({ "infer": self.cfg.grm.infer }), &[ip, lp, mp], &[RANKINGS])
    }

    fn write_rankings(&self, rankings: &[crate::inference::UserRanking], log: &InteractionLog, ids: &SemanticIds) -> Result<()> {
        let path = self.out(RANKINGS);
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        let names = |v: &[usize]| v.iter().map(|&i| ids.items[i].clone()).collect::<Vec<_>>();
        for r in rankings {
            let row = json!({
                "user": log.users[r.user].user,
                "target": ids.items[r.target],
                "text": names(&r.text),
                "vision": names(&r.vision),
                "ensemble": names(&r.ensemble),
            });
            serde_json::to_writer(&mut w, &row)?;
            w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))
    }

    fn eval(&mut self) -> Result<()> {
        let (ids, ip) = self.ids()?;
        let (log, lp) = self.interactions()?;
        let (model, mp) = self.load_model()?;
        let seqs = index_sequences(&log, &ids)?;
        let tries = Tries::build(&model.vocab, &ids)?;
        let mut opts = self.cfg.grm.infer;
        opts.threads = self.cfg.threads;
        let users = spread_users(seqs.len(), self.cfg.eval.max_users);
        let report = evaluate_model(&model, &ids, &tries, &seqs, &users, Holdout::Test, &opts)?;
        let mut outputs = vec![METRICS];
        if self.cfg.eval.dump_rankings {
            self.write_rankings(&report.rankings, &log, &ids)?;
            outputs.push(RANKINGS);
        }
        let untrained: Option<TopK> = if self.cfg.eval.untrained_baseline {
            let fresh = GrmModel::new(model.vocab, model.config.clone(), self.cfg.seeds.grm)?;
            Some(evaluate_model(&fresh, &ids, &tries, &seqs, &users, Holdout::Test, &opts)?.ensemble)
        } else {
            None
        };
        let popularity = self
            .cfg
            .eval
            .popularity_baseline
            .then(|| evaluate_popularity(&seqs, &users, Holdout::Test, ids.items.len(), opts.k));
        let e = report.ensemble;
        let metrics = json!({
            "dataset": self.cfg.dataset,
            "seed": self.cfg.seeds.grm,
            "HR@1": e.hr1,
            "HR@5": e.hr5,
            "HR@10": e.hr10,
            "NDCG@5": e.ndcg5,
            "NDCG@10": e.ndcg10,
            "users": e.users,
            "text": report.text,
            "vision": report.vision,
            "ensemble": report.ensemble,
            "untrained": untrained,
            "popularity": popularity,
        });
        write_json(&self.out(METRICS), &metrics)?;
        info!("ensemble HR@10 {:.4} NDCG@10 {:.4} over {} users", e.hr10, e.ndcg10, e.users);
        self.record(Stage::Eval, Some(self.cfg.seeds.grm), json!({ "eval": self.cfg.eval, "infer": opts }), &[ip, lp, mp], &outputs)
    }
}

/// Runs one stage against the run directory of `cfg`.
pub fn run_stage(stage: Stage, cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let mut run = Run::open(cfg)?;
    info!("stage {stage} in {}", run.dir.display());
    match stage {
        Stage::Synth => run.synth(),
        Stage::Labels => run.labels(),
        Stage::Quantize => run.quantize(),
        Stage::Diagnose => run.diagnose(),
        Stage::BuildTasks => run.build_tasks(),
        Stage::Train => run.train(),
        Stage::Infer => run.infer(),
        Stage::Eval => run.eval(),
    }
}

/// Every stage in order. `synth` runs only when no input paths are
/// configured.
pub fn run_pipeline(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let p = &cfg.paths;
    let external = p.text_embeddings.is_some() || p.vision_embeddings.is_some() || p.interactions.is_some();
    for stage in Stage::ALL {
        if stage == Stage::Synth && external {
            continue;
        }
        run_stage(stage, cfg)?;
    }
    Ok(())
}
