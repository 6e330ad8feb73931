use std::path::PathBuf;

use log::{info, warn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::ids::quantize_table;
use super::loss::{rqvae_loss, sample_positives, LossBreakdown, QuantBatch};
use super::{init_codebooks, IdHyper, QuantizerArch, QuantizerParams};
use crate::data::{check_same_items, EmbeddingTable};
use crate::diagnostics::collision_rate;
use crate::error::{Error, Result};
use crate::labels::PseudoLabels;
use crate::tensor::{AdamW, AdamWConfig, Graph, SeedStream};

const TRAIN_STREAM: u64 = 0x7472_6169_6e00;

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub seed: u64,
    /// Where to write the last finite parameters if training diverges.
    pub last_good: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Batch-size weighted mean over the epoch.
    pub loss: LossBreakdown,
    /// Distinct codewords used per level after the epoch.
    pub usage_t: Vec<usize>,
    pub usage_v: Vec<usize>,
    /// Pre-resolution collision rate (%) after the epoch.
    pub collision_t: f64,
    pub collision_v: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QuantizerReport {
    pub epochs: Vec<EpochLog>,
    /// Contrastive anchors skipped for lack of an in-batch positive.
    pub skipped_anchors: usize,
    pub total_anchors: usize,
}

/// Fresh encoders/decoders with codebooks initialized by residual k-means on
/// the initial latents.
pub fn initialize(text: &EmbeddingTable, vision: &EmbeddingTable, hyper: &IdHyper, seed: u64) -> Result<QuantizerParams> {
    check_same_items(text, vision)?;
    hyper.validate(text.len())?;
    let mut seeds = SeedStream::new(seed);
    let arch = QuantizerArch::new(text.dim(), vision.dim(), hyper);
    let mut params = QuantizerParams::new(arch, seeds.next_seed());
    for table in [text, vision] {
        let z = params.latents(table)?;
        let books = init_codebooks(z.data(), hyper.latent_dim, hyper.levels, hyper.codebook_size, seeds.next_seed())?;
        params.set_codebooks(table.modality(), books)?;
    }
    Ok(params)
}

fn usage(codes: &[Vec<usize>], levels: usize) -> Vec<usize> {
    (0..levels)
        .map(|l| {
            let mut seen: Vec<usize> = codes.iter().map(|c| c[l]).collect();
            seen.sort_unstable();
            seen.dedup();
            seen.len()
        })
        .collect()
}

/// Trains the quantizer with shuffled mini-batches and AdamW.
///
/// Pseudo-labels are indexed in `text` item order.
pub fn train_quantizer(
    text: &EmbeddingTable,
    vision: &EmbeddingTable,
    labels_t: &PseudoLabels,
    labels_v: &PseudoLabels,
    hyper: &IdHyper,
    opts: &TrainOptions,
) -> Result<(QuantizerParams, QuantizerReport)> {
    let vision = vision.reordered(text.ids())?;
    let n = text.len();
    if labels_t.labels.len() != n || labels_v.labels.len() != n {
        return Err(Error::Data(format!(
            "pseudo-labels cover {}/{} items, tables have {n}",
            labels_t.labels.len(),
            labels_v.labels.len()
        )));
    }
    let mut params = initialize(text, &vision, hyper, opts.seed)?;
    let mut opt = AdamW::new(AdamWConfig {
        lr: hyper.lr,
        weight_decay: hyper.weight_decay,
        ..AdamWConfig::default()
    });
    // Separate stream for shuffling and positive sampling.
    let mut rng = SeedStream::new(opts.seed ^ TRAIN_STREAM).rng();
    let mut report = QuantizerReport::default();
    let mut last_good = params.clone();
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 1..=hyper.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = LossBreakdown::default();
        for chunk in order.chunks(hyper.batch_size) {
            let lt: Vec<usize> = chunk.iter().map(|&i| labels_t.labels[i]).collect();
            let lv: Vec<usize> = chunk.iter().map(|&i| labels_v.labels[i]).collect();
            let batch = QuantBatch {
                x_t: text.gather(chunk),
                x_v: vision.gather(chunk),
                pos_t: sample_positives(&lv, &mut rng),
                pos_v: sample_positives(&lt, &mut rng),
            };
            report.total_anchors += 2 * chunk.len();
            report.skipped_anchors += batch.pos_t.iter().chain(&batch.pos_v).filter(|p| p.is_none()).count();

            let step = (|| {
                let mut g = Graph::new();
                let (loss, breakdown) = rqvae_loss(&mut g, &params, &batch, hyper)?;
                let grads = g.backward(loss)?;
                opt.step(&mut params.store, &grads)?;
                Ok::<_, Error>(breakdown)
            })();
            match step {
                Ok(b) => epoch_loss.add_scaled(&b, chunk.len() as f32 / n as f32),
                Err(e) => {
                    if let Some(path) = &opts.last_good {
                        last_good.save(path)?;
                        warn!("quantizer diverged in epoch {epoch}; last good parameters at {}", path.display());
                    }
                    return Err(e);
                }
            }
        }

        let codes_t: Vec<Vec<usize>> = quantize_table(&params, text)?.into_iter().map(|t| t.codes).collect();
        let codes_v: Vec<Vec<usize>> = quantize_table(&params, &vision)?.into_iter().map(|t| t.codes).collect();
        let log = EpochLog {
            epoch,
            loss: epoch_loss,
            usage_t: usage(&codes_t, hyper.levels),
            usage_v: usage(&codes_v, hyper.levels),
            collision_t: collision_rate(&codes_t),
            collision_v: collision_rate(&codes_v),
        };
        info!(
            "epoch {epoch}: total {:.4} recon {:.4}/{:.4} collisions {:.2}%/{:.2}%",
            log.loss.total, log.loss.recon_t, log.loss.recon_v, log.collision_t, log.collision_v
        );
        report.epochs.push(log);
        last_good.clone_from(&params);
    }
    if report.skipped_anchors > 0 {
        info!(
            "{} of {} contrastive anchors had no in-batch positive",
            report.skipped_anchors, report.total_anchors
        );
    }
    Ok((params, report))
}
