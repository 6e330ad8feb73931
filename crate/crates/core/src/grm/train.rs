use std::path::PathBuf;

use log::{info, warn};
use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::model::{implicit_align_loss, seq2seq_loss, GrmConfig, GrmModel};
use super::tasks::TrainingExample;
use super::vocab::Task;
use crate::data::Modality;
use crate::error::{Error, Result};
use crate::inference::{evaluate_modality, Holdout, InferOptions, Tries};
use crate::quantizer::SemanticIds;
use crate::tensor::{AdamW, AdamWConfig, Graph, SeedStream};

const TRAIN_STREAM: u64 = 0x6772_6d00;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrmHyper {
    pub model: GrmConfig,
    pub batch_size: usize,
    pub lr: f32,
    pub weight_decay: f32,
    pub epochs: usize,
    /// Optimizer steps per epoch; 0 means one pass worth of examples.
    pub steps_per_epoch: usize,
    pub grad_clip: f32,
    pub lambda_implicit: f32,
    pub tau: f32,
    /// Items per implicit-alignment batch.
    pub align_batch: usize,
    /// Sampling weight of each next-item task.
    pub rec_weight: f64,
    /// Sampling weight of each cross-modal task.
    pub align_weight: f64,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    /// Users scored for validation HR@10 each epoch; 0 skips validation.
    pub valid_users: usize,
    pub infer: InferOptions,
}

impl Default for GrmHyper {
    fn default() -> Self {
        GrmHyper {
            model: GrmConfig::full(),
            batch_size: 256,
            lr: 1e-3,
            weight_decay: 0.01,
            epochs: 200,
            steps_per_epoch: 0,
            grad_clip: 1.0,
            lambda_implicit: 0.01,
            tau: 0.1,
            align_batch: 256,
            rec_weight: 1.0,
            align_weight: 0.5,
            patience: 10,
            valid_users: 1000,
            infer: InferOptions::default(),
        }
    }
}

impl GrmHyper {
    pub fn desk() -> Self {
        GrmHyper {
            model: GrmConfig::desk(),
            batch_size: 128,
            lr: 2e-3,
            epochs: 5,
            steps_per_epoch: 250,
            align_batch: 64,
            patience: 3,
            valid_users: 300,
            ..GrmHyper::default()
        }
    }

    pub fn weight(&self, task: Task) -> f64 {
        if task.is_rec() {
            self.rec_weight
        } else {
            self.align_weight
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if let Err(Error::Config(e)) = self.model.validate() {
            errs.extend(e);
        }
        if self.batch_size == 0 {
            errs.push("grm.batch_size must be positive".into());
        }
        if !(self.lr > 0.0) {
            errs.push(format!("grm.lr must be positive, got {}", self.lr));
        }
        if !(self.tau > 0.0) {
            errs.push(format!("grm.tau must be positive, got {}", self.tau));
        }
        if self.lambda_implicit < 0.0 {
            errs.push("grm.lambda_implicit must be non-negative".into());
        }
        if self.rec_weight < 0.0 || self.align_weight < 0.0 || self.rec_weight + self.align_weight <= 0.0 {
            errs.push("task weights must be non-negative and not all zero".into());
        }
        if self.infer.beam_width < self.infer.k || self.infer.k == 0 {
            errs.push(format!(
                "beam width {} must be at least k = {} (k > 0)",
                self.infer.beam_width, self.infer.k
            ));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// Draws a task in proportion to its weight, then an example of that task
/// uniformly. Tasks without examples are never drawn.
#[derive(Clone, Debug)]
pub struct TaskSampler {
    tasks: Vec<Task>,
    weights: Vec<f64>,
    by_task: Vec<Vec<usize>>,
    dist: WeightedIndex<f64>,
}

impl TaskSampler {
    pub fn new(examples: &[TrainingExample], weight: impl Fn(Task) -> f64) -> Result<TaskSampler> {
        let mut tasks = Vec::new();
        let mut by_task = Vec::new();
        let mut weights = Vec::new();
        for t in Task::ALL {
            let idx: Vec<usize> = (0..examples.len()).filter(|&i| examples[i].task == t).collect();
            if !idx.is_empty() && weight(t) > 0.0 {
                tasks.push(t);
                by_task.push(idx);
                weights.push(weight(t));
            }
        }
        let dist = WeightedIndex::new(&weights)
            .map_err(|_| Error::Data("no training examples for any positively weighted task".into()))?;
        Ok(TaskSampler { tasks, weights, by_task, dist })
    }

    /// `(task, probability)` of every drawable task.
    pub fn probabilities(&self) -> Vec<(Task, f64)> {
        let total: f64 = self.weights.iter().sum();
        self.tasks.iter().zip(&self.weights).map(|(&t, w)| (t, w / total)).collect()
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        let t = self.dist.sample(rng);
        let pool = &self.by_task[t];
        pool[rng.gen_range(0..pool.len())]
    }
}

#[derive(Clone, Debug, Default)]
pub struct GrmTrainOptions {
    pub seed: u64,
    /// Where to write the last finite parameters if training diverges.
    pub last_good: Option<PathBuf>,
}

/// Losses of one optimizer step; `total = seq2seq + lambda_implicit * implicit`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrmStepLog {
    pub step: usize,
    pub seq2seq: f32,
    pub implicit: f32,
    pub total: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrmEpochLog {
    pub epoch: usize,
    pub seq2seq: f32,
    pub implicit: f32,
    pub total: f32,
    /// Text next-item HR@10 on the validation subsample.
    pub valid_hr10: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GrmReport {
    pub steps: Vec<GrmStepLog>,
    pub epochs: Vec<GrmEpochLog>,
    /// Epoch whose parameters were returned.
    pub best_epoch: usize,
    pub best_valid_hr10: Option<f64>,
    /// Examples drawn per task over the whole run.
    pub task_draws: Vec<(Task, usize)>,
}

fn step_loss(
    g: &mut Graph,
    model: &GrmModel,
    batch: &[&TrainingExample],
    align_items: &[usize],
    ids: &SemanticIds,
    hyper: &GrmHyper,
) -> Result<(crate::tensor::Var, f32, f32)> {
    let s2s = seq2seq_loss(g, model, batch)?;
    let s2s_v = g.value(s2s).item();
    if hyper.lambda_implicit == 0.0 {
        return Ok((s2s, s2s_v, 0.0));
    }
    let imp = implicit_align_loss(g, model, align_items, ids, hyper.tau)?;
    let imp_v = g.value(imp).item();
    let w = g.scale(imp, hyper.lambda_implicit);
    Ok((g.add(s2s, w)?, s2s_v, imp_v))
}

/// Trains `model` on mixed-task mini-batches plus the weighted implicit
/// alignment loss, keeping the parameters of the best validation epoch.
///
/// `seqs` are full item sequences (rows of `ids`) used for validation.
pub fn train_grm(
    mut model: GrmModel,
    examples: &[TrainingExample],
    ids: &SemanticIds,
    seqs: &[Vec<usize>],
    hyper: &GrmHyper,
    opts: &GrmTrainOptions,
) -> Result<(GrmModel, GrmReport)> {
    hyper.validate()?;
    let sampler = TaskSampler::new(examples, |t| hyper.weight(t))?;
    let n_items = ids.items.len();
    let tries = if hyper.valid_users > 0 { Some(Tries::build(&model.vocab, ids)?) } else { None };
    let mut rng = SeedStream::new(opts.seed ^ TRAIN_STREAM).rng();
    let valid_set: Vec<usize> = {
        let take = hyper.valid_users.min(seqs.len());
        let mut v = sample(&mut rng, seqs.len(), take).into_vec();
        v.sort_unstable();
        v
    };
    let steps_per_epoch = if hyper.steps_per_epoch > 0 {
        hyper.steps_per_epoch
    } else {
        examples.len().div_ceil(hyper.batch_size)
    };
    let mut opt = AdamW::new(AdamWConfig {
        lr: hyper.lr,
        weight_decay: hyper.weight_decay,
        ..AdamWConfig::default()
    });
    let validate = |model: &GrmModel| -> Result<Option<f64>> {
        match &tries {
            Some(t) => Ok(Some(
                evaluate_modality(model, ids, &t.text, seqs, &valid_set, Holdout::Valid, Modality::Text, &hyper.infer)?
                    .hr10,
            )),
            None => Ok(None),
        }
    };

    let mut report = GrmReport::default();
    let mut draws = vec![0usize; Task::ALL.len()];
    let mut best = model.store.clone();
    let mut best_score = validate(&model)?;
    report.best_valid_hr10 = best_score;
    let mut since_best = 0;
    let mut step = 0;
    for epoch in 1..=hyper.epochs {
        let (mut s_sum, mut i_sum, mut t_sum) = (0.0f64, 0.0f64, 0.0f64);
        for _ in 0..steps_per_epoch {
            step += 1;
            let batch: Vec<&TrainingExample> = (0..hyper.batch_size).map(|_| &examples[sampler.sample(&mut rng)]).collect();
            batch.iter().for_each(|e| draws[e.task.index()] += 1);
            let align_items = if hyper.lambda_implicit > 0.0 {
                sample(&mut rng, n_items, hyper.align_batch.min(n_items)).into_vec()
            } else {
                Vec::new()
            };
            let result = (|| {
                let mut g = Graph::new();
                let (loss, s2s, imp) = step_loss(&mut g, &model, &batch, &align_items, ids, hyper)?;
                let total = g.value(loss).item();
                if !total.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite GRM loss at step {step}: seq2seq {s2s}, implicit {imp}"
                    )));
                }
                let mut grads = g.backward(loss)?;
                let norm = grads.global_norm();
                if hyper.grad_clip > 0.0 && norm > hyper.grad_clip {
                    grads.scale(hyper.grad_clip / norm);
                }
                opt.step(&mut model.store, &grads)?;
                Ok::<_, Error>(GrmStepLog { step, seq2seq: s2s, implicit: imp, total })
            })();
            match result {
                Ok(log) => {
                    s_sum += log.seq2seq as f64;
                    i_sum += log.implicit as f64;
                    t_sum += log.total as f64;
                    report.steps.push(log);
                }
                Err(e) => {
                    if let Some(path) = &opts.last_good {
                        let mut snapshot = model.clone();
                        snapshot.store = best.clone();
                        snapshot.save(path)?;
                        warn!("GRM training diverged at step {step}; last good parameters at {}", path.display());
                    }
                    return Err(e);
                }
            }
        }
        let n = steps_per_epoch as f64;
        let valid_hr10 = validate(&model)?;
        info!(
            "epoch {epoch}: seq2seq {:.4} implicit {:.4} valid HR@10 {}",
            s_sum / n,
            i_sum / n,
            valid_hr10.map_or("-".into(), |v| format!("{v:.4}"))
        );
        report.epochs.push(GrmEpochLog {
            epoch,
            seq2seq: (s_sum / n) as f32,
            implicit: (i_sum / n) as f32,
            total: (t_sum / n) as f32,
            valid_hr10,
        });
        let improved = match (valid_hr10, best_score) {
            (Some(v), Some(b)) => v > b,
            _ => true,
        };
        if improved {
            best.clone_from(&model.store);
            best_score = valid_hr10;
            report.best_epoch = epoch;
            report.best_valid_hr10 = valid_hr10;
            since_best = 0;
        } else {
            since_best += 1;
            if hyper.patience > 0 && since_best >= hyper.patience {
                info!("early stop after epoch {epoch}; best epoch {}", report.best_epoch);
                break;
            }
        }
    }
    model.store = best;
    report.task_draws = Task::ALL.iter().map(|&t| (t, draws[t.index()])).collect();
    Ok((model, report))
}
