//! Codebook health: collision rate, per-level code histograms and perplexity.

use std::collections::HashSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Modality;
use crate::error::{Error, Result};

pub const GROUP_SIZE: usize = 16;

/// `100 · (N − distinct full IDs) / N`.
pub fn collision_rate(ids: &[Vec<usize>]) -> f64 {
    if ids.is_empty() {
        return 0.0;
    }
    let distinct: HashSet<&[usize]> = ids.iter().map(|c| c.as_slice()).collect();
    100.0 * (ids.len() - distinct.len()) as f64 / ids.len() as f64
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeHistogram {
    pub level: usize,
    /// Items per codeword, indexed by codeword.
    pub counts: Vec<usize>,
    pub sorted: Vec<usize>,
    /// Sums of consecutive groups of 16 in `sorted`.
    pub group_sums: Vec<usize>,
}

pub fn code_histogram(level: usize, ids: &[Vec<usize>], codebook_size: usize) -> Result<CodeHistogram> {
    let mut counts = vec![0; codebook_size];
    for code in ids {
        let c = *code.get(level).ok_or_else(|| {
            Error::InvalidArgument(format!("level {level} out of range for IDs of length {}", code.len()))
        })?;
        *counts.get_mut(c).ok_or_else(|| {
            Error::InvalidArgument(format!("codeword {c} outside codebook of size {codebook_size}"))
        })? += 1;
    }
    let mut sorted = counts.clone();
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    let group_sums = sorted.chunks(GROUP_SIZE).map(|g| g.iter().sum()).collect();
    Ok(CodeHistogram { level, counts, sorted, group_sums })
}

/// `exp` of the Shannon entropy (nats) of the codeword distribution.
pub fn perplexity(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 1.0;
    }
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum();
    h.exp()
}

pub fn codebook_perplexity(level: usize, ids: &[Vec<usize>], codebook_size: usize) -> Result<f64> {
    Ok(perplexity(&code_histogram(level, ids, codebook_size)?.counts))
}

/// One row of the diagnostics report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelReport {
    pub modality: Modality,
    pub level: usize,
    /// Pre-resolution collision rate of the full ID, repeated on every level.
    pub collision_rate: f64,
    pub resolved_collision_rate: f64,
    pub perplexity: f64,
    pub group_sums: Vec<usize>,
}

/// Per-modality, per-level rows from raw and resolved IDs.
pub fn diagnose(
    modality: Modality,
    raw: &[Vec<usize>],
    resolved: &[Vec<usize>],
    codebook_size: usize,
) -> Result<Vec<LevelReport>> {
    let levels = raw.first().map_or(0, |c| c.len());
    let collision = collision_rate(raw);
    let resolved_collision = collision_rate(resolved);
    (0..levels)
        .map(|level| {
            let h = code_histogram(level, raw, codebook_size)?;
            Ok(LevelReport {
                modality,
                level,
                collision_rate: collision,
                resolved_collision_rate: resolved_collision,
                perplexity: perplexity(&h.counts),
                group_sums: h.group_sums,
            })
        })
        .collect()
}

/// `modality,level,rank,count` rows of the sorted histograms, for plotting.
pub fn histogram_csv(rows: &[(Modality, CodeHistogram)]) -> String {
    let mut out = String::from("modality,level,rank,count\n");
    for (m, h) in rows {
        for (rank, c) in h.sorted.iter().enumerate() {
            let _ = writeln!(out, "{m},{},{rank},{c}", h.level);
        }
    }
    out
}
