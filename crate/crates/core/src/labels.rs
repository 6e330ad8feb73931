//! K-means pseudo-labels for each modality.
//!
//! Lloyd iterations from greedy k-means++ seeding on raw squared Euclidean distance.
//! Centroids are kept in f64 while iterating so the recorded inertia is
//! monotone up to f64 round-off. An empty cluster is reseeded with the point
//! farthest from its current centroid.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{check_same_items, EmbeddingTable, Modality};
use crate::error::{Error, Result};
use crate::tensor::SeedStream;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub labels: Vec<usize>,
    /// `k × dim`, row-major.
    pub centroids: Vec<f32>,
    pub dim: usize,
    /// Inertia after each assignment step.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
    pub reseeded: usize,
}

impl KMeans {
    pub fn k(&self) -> usize {
        self.centroids.len() / self.dim
    }

    pub fn inertia(&self) -> f64 {
        self.inertia_history.last().copied().unwrap_or(0.0)
    }

    pub fn centroid(&self, c: usize) -> &[f32] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }
}

fn dist2(x: &[f32], c: &[f64]) -> f64 {
    x.iter()
        .zip(c)
        .map(|(a, b)| {
            let d = *a as f64 - b;
            d * d
        })
        .sum()
}

/// Assigns every point to its nearest centroid (ties → smallest index) and
/// returns the inertia.
fn assign(points: &[f32], dim: usize, centroids: &[f64], labels: &mut [usize], dists: &mut [f64]) -> f64 {
    let k = centroids.len() / dim;
    let mut inertia = 0.0;
    for (i, x) in points.chunks_exact(dim).enumerate() {
        let mut best = (0, f64::INFINITY);
        for c in 0..k {
            let d = dist2(x, &centroids[c * dim..(c + 1) * dim]);
            if d < best.1 {
                best = (c, d);
            }
        }
        labels[i] = best.0;
        dists[i] = best.1;
        inertia += best.1;
    }
    inertia
}

fn sample_d2<R: Rng>(nearest: &[f64], total: f64, rng: &mut R) -> usize {
    let mut target = rng.gen::<f64>() * total;
    for (i, &d) in nearest.iter().enumerate() {
        if target < d {
            return i;
        }
        target -= d;
    }
    // Round-off fallthrough: last point not already on a centroid.
    nearest.iter().rposition(|&d| d > 0.0).unwrap_or(nearest.len() - 1)
}

/// Greedy k-means++: each new centre is the best (lowest resulting
/// potential) of `2 + ln k` D²-sampled candidates.
fn plus_plus_init<R: Rng>(points: &[f32], dim: usize, k: usize, rng: &mut R) -> Vec<f64> {
    let n = points.len() / dim;
    let row = |i: usize| &points[i * dim..(i + 1) * dim];
    let trials = 2 + (k as f64).ln().floor() as usize;
    let mut centroids: Vec<f64> = Vec::with_capacity(k * dim);
    let first = rng.gen_range(0..n);
    centroids.extend(row(first).iter().map(|&v| v as f64));
    let mut nearest: Vec<f64> = (0..n).map(|i| dist2(row(i), &centroids[..dim])).collect();
    let mut candidate = vec![0.0; n];
    let mut best_nearest = vec![0.0; n];
    for _ in 1..k {
        let total: f64 = nearest.iter().sum();
        let mut best: Option<(usize, f64)> = None;
        for _ in 0..trials {
            let pick = if total > 0.0 { sample_d2(&nearest, total, rng) } else { rng.gen_range(0..n) };
            let c: Vec<f64> = row(pick).iter().map(|&v| v as f64).collect();
            let mut pot = 0.0;
            for (i, d) in candidate.iter_mut().enumerate() {
                *d = nearest[i].min(dist2(row(i), &c));
                pot += *d;
            }
            if best.map_or(true, |(_, p)| pot < p) {
                best = Some((pick, pot));
                best_nearest.copy_from_slice(&candidate);
            }
        }
        let (pick, _) = best.expect("at least one trial");
        centroids.extend(row(pick).iter().map(|&v| v as f64));
        nearest.copy_from_slice(&best_nearest);
    }
    centroids
}

/// K-means over `points` (`n × dim`, row-major).
pub fn kmeans(points: &[f32], dim: usize, k: usize, max_iters: usize, seed: u64) -> Result<KMeans> {
    if dim == 0 || points.len() % dim != 0 {
        return Err(Error::InvalidArgument(format!(
            "{} values do not form rows of dimension {dim}",
            points.len()
        )));
    }
    let n = points.len() / dim;
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("k-means needs 1 <= K <= N, got K={k}, N={n}")));
    }
    if max_iters == 0 {
        return Err(Error::InvalidArgument("k-means needs max_iters >= 1".into()));
    }
    let mut rng = SeedStream::new(seed).rng();
    let mut centroids = plus_plus_init(points, dim, k, &mut rng);
    let mut labels = vec![usize::MAX; n];
    let mut dists = vec![0.0; n];
    let mut history = Vec::new();
    let mut reseeded = 0;
    let mut iterations = 0;
    let mut prev_labels = Vec::new();
    for _ in 0..max_iters {
        iterations += 1;
        history.push(assign(points, dim, &centroids, &mut labels, &mut dists));
        if labels == prev_labels {
            break;
        }
        prev_labels.clone_from(&labels);

        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (i, x) in points.chunks_exact(dim).enumerate() {
            counts[labels[i]] += 1;
            for (s, v) in sums[labels[i] * dim..(labels[i] + 1) * dim].iter_mut().zip(x) {
                *s += *v as f64;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..dim {
                    centroids[c * dim + j] = sums[c * dim + j] / counts[c] as f64;
                }
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            // Farthest point from its own (updated) centroid, among points
            // whose cluster would not become empty.
            let mut far = None;
            let mut far_d = -1.0;
            for (i, x) in points.chunks_exact(dim).enumerate() {
                let l = labels[i];
                if counts[l] < 2 {
                    continue;
                }
                let d = dist2(x, &centroids[l * dim..(l + 1) * dim]);
                if d > far_d {
                    far_d = d;
                    far = Some(i);
                }
            }
            let Some(p) = far else { break };
            counts[labels[p]] -= 1;
            labels[p] = c;
            counts[c] = 1;
            for j in 0..dim {
                centroids[c * dim + j] = points[p * dim + j] as f64;
            }
            reseeded += 1;
        }
    }
    Ok(KMeans {
        labels,
        centroids: centroids.iter().map(|&v| v as f32).collect(),
        dim,
        inertia_history: history,
        iterations,
        reseeded,
    })
}

/// Cluster assignment of every item for one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabels {
    pub modality: Modality,
    pub k: usize,
    pub labels: Vec<usize>,
    pub centroids: Vec<f32>,
}

pub const DEFAULT_KMEANS_ITERS: usize = 50;
/// Independent k-means++ restarts per modality; the lowest inertia wins.
pub const DEFAULT_RESTARTS: u64 = 5;

/// Best of `restarts` runs with seeds derived from `seed`.
pub fn kmeans_restarts(points: &[f32], dim: usize, k: usize, max_iters: usize, seed: u64, restarts: u64) -> Result<KMeans> {
    let mut best: Option<KMeans> = None;
    for r in 0..restarts.max(1) {
        let km = kmeans(points, dim, k, max_iters, crate::tensor::splitmix64(seed ^ r))?;
        if best.as_ref().map_or(true, |b| km.inertia() < b.inertia()) {
            best = Some(km);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Clusters each modality independently into `k` groups with the same seed.
/// Vision labels follow the text table's item order.
pub fn gen_pseudo_labels(
    text: &EmbeddingTable,
    vision: &EmbeddingTable,
    k: usize,
    seed: u64,
) -> Result<(PseudoLabels, PseudoLabels)> {
    check_same_items(text, vision)?;
    let vision = vision.reordered(text.ids())?;
    let run = |t: &EmbeddingTable| -> Result<PseudoLabels> {
        let km = kmeans_restarts(t.values(), t.dim(), k, DEFAULT_KMEANS_ITERS, seed, DEFAULT_RESTARTS)?;
        Ok(PseudoLabels {
            modality: t.modality(),
            k,
            labels: km.labels,
            centroids: km.centroids,
        })
    };
    Ok((run(text)?, run(&vision)?))
}

#[derive(Serialize, Deserialize)]
struct LabelRow {
    item: String,
    text_label: usize,
    vision_label: usize,
}

/// Writes the optional cache `{"item", "text_label", "vision_label"}` per line.
pub fn write_label_cache(path: &Path, items: &[String], text: &PseudoLabels, vision: &PseudoLabels) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for (i, item) in items.iter().enumerate() {
        let row = LabelRow {
            item: item.clone(),
            text_label: text.labels[i],
            vision_label: vision.labels[i],
        };
        serde_json::to_writer(&mut w, &row)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a label cache, returning labels in `items` order.
pub fn read_label_cache(path: &Path, items: &[String], k: usize) -> Result<(PseudoLabels, PseudoLabels)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut by_item = std::collections::HashMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let row: LabelRow = serde_json::from_str(line)?;
        if row.text_label >= k || row.vision_label >= k {
            return Err(Error::Data(format!("label for `{}` outside [0, {k})", row.item)));
        }
        by_item.insert(row.item, (row.text_label, row.vision_label));
    }
    let mut t = Vec::with_capacity(items.len());
    let mut v = Vec::with_capacity(items.len());
    for id in items {
        let (a, b) = by_item
            .get(id)
            .ok_or_else(|| Error::Data(format!("label cache has no entry for `{id}`")))?;
        t.push(*a);
        v.push(*b);
    }
    let mk = |modality, labels| PseudoLabels { modality, k, labels, centroids: Vec::new() };
    Ok((mk(Modality::Text, t), mk(Modality::Vision, v)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn k_equals_n_gives_zero_inertia() {
        let pts = [0.0, 0.0, 1.0, 0.0, 0.0, 3.0, 5.0, 5.0];
        let km = kmeans(&pts, 2, 4, 10, 1).unwrap();
        assert_eq!(km.inertia(), 0.0);
        let mut l = km.labels.clone();
        l.sort();
        l.dedup();
        assert_eq!(l.len(), 4);
    }

    #[test]
    fn deterministic_for_seed() {
        let pts: Vec<f32> = (0..60).map(|i| ((i * 37) % 11) as f32).collect();
        let a = kmeans(&pts, 3, 4, 20, 5).unwrap();
        let b = kmeans(&pts, 3, 4, 20, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(kmeans(&[1.0, 2.0], 1, 3, 5, 0).is_err());
        assert!(kmeans(&[1.0, 2.0], 1, 1, 0, 0).is_err());
    }

    #[test]
    fn duplicate_points_still_yield_k_centroids() {
        // Five copies of one point plus one distinct point, K = 3: one cluster
        // must come from reseeding or coincident seeds, never vanish.
        let pts = [0.0, 0.0, 0.0, 0.0, 0.0, 9.0];
        let km = kmeans(&pts, 1, 3, 10, 2).unwrap();
        assert_eq!(km.k(), 3);
        assert!(km.labels.iter().all(|&l| l < 3));
    }

    #[test]
    fn identical_tables_give_identical_labels() {
        let ids: Vec<String> = (0..30).map(|i| format!("i{i}")).collect();
        let vals: Vec<f32> = (0..60).map(|i| ((i * 7) % 13) as f32).collect();
        let t = EmbeddingTable::new(Modality::Text, ids.clone(), 2, vals.clone()).unwrap();
        let v = EmbeddingTable::new(Modality::Vision, ids, 2, vals).unwrap();
        let (a, b) = gen_pseudo_labels(&t, &v, 4, 3).unwrap();
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn label_cache_round_trip() {
        let items: Vec<String> = vec!["a".into(), "b".into()];
        let mk = |m, l| PseudoLabels { modality: m, k: 3, labels: l, centroids: vec![] };
        let (t, v) = (mk(Modality::Text, vec![0, 2]), mk(Modality::Vision, vec![1, 1]));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("labels.jsonl");
        write_label_cache(&p, &items, &t, &v).unwrap();
        let (t2, v2) = read_label_cache(&p, &items, 3).unwrap();
        assert_eq!(t2.labels, t.labels);
        assert_eq!(v2.labels, v.labels);
    }
}
