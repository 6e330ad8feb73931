//! Seeded dual-modality corpus generator.
//!
//! Every item has a text cluster drawn from a balanced assignment. Its vision
//! cluster equals a fixed random bijection of the text cluster with
//! probability `cross_modal_corr`, otherwise it is uniform. Embeddings are
//! Gaussian-mixture draws around per-cluster centres in each modality.
//!
//! User sequences walk a Markov chain over text clusters: clusters are
//! arranged on a seeded random cycle and the next cluster is the cycle
//! successor with probability [`SUCCESSOR_PROB`], the same cluster with
//! probability [`STAY_PROB`], and uniform otherwise. Within a cluster, items
//! are drawn with Zipf weights `1 / (rank + 1)^POPULARITY_EXPONENT`.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, WeightedIndex};
use serde::{Deserialize, Serialize};

use super::{EmbeddingTable, InteractionLog, Modality, UserSequence};
use crate::error::{Error, Result};
use crate::tensor::SeedStream;

pub const SUCCESSOR_PROB: f64 = 0.6;
pub const STAY_PROB: f64 = 0.15;
pub const POPULARITY_EXPONENT: f64 = 0.8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_items: usize,
    pub n_clusters: usize,
    pub d_text: usize,
    pub d_vision: usize,
    pub cross_modal_corr: f64,
    pub n_users: usize,
    /// Mean sequence length; lengths are uniform in `[max(3, len-3), len+3]`.
    pub seq_len: usize,
    /// Standard deviation of cluster centres.
    pub center_scale: f32,
    /// Standard deviation of per-item noise around its centre.
    pub item_noise: f32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_items: 2000,
            n_clusters: 64,
            d_text: 64,
            d_vision: 32,
            cross_modal_corr: 0.7,
            n_users: 5000,
            seq_len: 8,
            center_scale: 1.0,
            item_noise: 1.2,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.n_items == 0 {
            errs.push("n_items must be positive".to_string());
        }
        if self.n_clusters == 0 || self.n_clusters > self.n_items {
            errs.push(format!(
                "n_clusters must be in [1, n_items], got {}",
                self.n_clusters
            ));
        }
        if self.d_text == 0 || self.d_vision == 0 {
            errs.push("embedding dimensions must be positive".to_string());
        }
        if !(0.0..=1.0).contains(&self.cross_modal_corr) {
            errs.push(format!(
                "cross_modal_corr must be in [0, 1], got {}",
                self.cross_modal_corr
            ));
        }
        if self.seq_len < 3 {
            errs.push("seq_len must be at least 3".to_string());
        }
        if !(self.center_scale > 0.0) || !(self.item_noise >= 0.0) {
            errs.push("center_scale must be positive and item_noise non-negative".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthData {
    pub text: EmbeddingTable,
    pub vision: EmbeddingTable,
    pub log: InteractionLog,
    /// Generating text cluster per item (the Markov state).
    pub text_cluster: Vec<usize>,
    pub vision_cluster: Vec<usize>,
}

pub fn item_id(i: usize) -> String {
    format!("item-{i:05}")
}

fn gaussian_table(
    modality: Modality,
    clusters: &[usize],
    n_clusters: usize,
    dim: usize,
    cfg: &SynthConfig,
    rng: &mut ChaCha8Rng,
) -> Result<EmbeddingTable> {
    let centers: Vec<f32> = (0..n_clusters * dim)
        .map(|_| {
            let z: f32 = StandardNormal.sample(rng);
            cfg.center_scale * z
        })
        .collect();
    let mut values = Vec::with_capacity(clusters.len() * dim);
    for &c in clusters {
        for k in 0..dim {
            let noise: f32 = StandardNormal.sample(rng);
            values.push(centers[c * dim + k] + cfg.item_noise * noise);
        }
    }
    let ids = (0..clusters.len()).map(item_id).collect();
    EmbeddingTable::new(modality, ids, dim, values)
}

/// Generates embeddings for both modalities and a user interaction log.
pub fn synth_dual_modal(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let k = cfg.n_clusters;
    let mut seeds = SeedStream::new(cfg.seed);

    let mut rng = seeds.rng();
    let mut text_cluster: Vec<usize> = (0..cfg.n_items).map(|i| i % k).collect();
    text_cluster.shuffle(&mut rng);

    let mut bijection: Vec<usize> = (0..k).collect();
    bijection.shuffle(&mut rng);
    let vision_cluster: Vec<usize> = text_cluster
        .iter()
        .map(|&c| {
            if rng.gen_bool(cfg.cross_modal_corr) {
                bijection[c]
            } else {
                rng.gen_range(0..k)
            }
        })
        .collect();

    let text = gaussian_table(Modality::Text, &text_cluster, k, cfg.d_text, cfg, &mut seeds.rng())?;
    let vision = gaussian_table(Modality::Vision, &vision_cluster, k, cfg.d_vision, cfg, &mut seeds.rng())?;

    let mut rng = seeds.rng();
    let mut cycle: Vec<usize> = (0..k).collect();
    cycle.shuffle(&mut rng);
    let mut successor = vec![0; k];
    for (pos, &c) in cycle.iter().enumerate() {
        successor[c] = cycle[(pos + 1) % k];
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &c) in text_cluster.iter().enumerate() {
        members[c].push(i);
    }
    let samplers: Vec<WeightedIndex<f64>> = members
        .iter_mut()
        .map(|m| {
            m.shuffle(&mut rng);
            let w: Vec<f64> = (0..m.len())
                .map(|r| 1.0 / ((r + 1) as f64).powf(POPULARITY_EXPONENT))
                .collect();
            WeightedIndex::new(w).expect("every cluster has at least one item")
        })
        .collect();

    let lo = cfg.seq_len.saturating_sub(3).max(3);
    let hi = cfg.seq_len + 3;
    let mut users = Vec::with_capacity(cfg.n_users);
    for u in 0..cfg.n_users {
        let len = rng.gen_range(lo..=hi);
        let mut c = rng.gen_range(0..k);
        let mut items = Vec::with_capacity(len);
        for step in 0..len {
            if step > 0 {
                let r: f64 = rng.gen();
                c = if r < SUCCESSOR_PROB {
                    successor[c]
                } else if r < SUCCESSOR_PROB + STAY_PROB {
                    c
                } else {
                    rng.gen_range(0..k)
                };
            }
            let item = members[c][samplers[c].sample(&mut rng)];
            items.push(item_id(item));
        }
        users.push(UserSequence {
            user: format!("user-{u:05}"),
            items,
        });
    }

    Ok(SynthData {
        text,
        vision,
        log: InteractionLog::from_sequences(users),
        text_cluster,
        vision_cluster,
    })
}
