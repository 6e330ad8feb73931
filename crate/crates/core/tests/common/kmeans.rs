//! K-means checks shared by the label tests and the acceptance suite.

use super::stats::{brute_force_two_partition, canonical};
use crossmodal_rec::labels::kmeans;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Inertia history of a random 300-point, 12-cluster instance never rises.
pub fn inertia_monotone(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts: Vec<f32> = (0..300 * 4).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let km = kmeans(&pts, 4, 12, 100, seed).map_err(|e| e.to_string())?;
    if km.iterations < 2 {
        return Err(format!("seed {seed}: only {} iteration", km.iterations));
    }
    match km.inertia_history.windows(2).find(|w| w[1] > w[0] * (1.0 + 1e-12)) {
        Some(w) => Err(format!("seed {seed}: inertia rose {} -> {}", w[0], w[1])),
        None => Ok(()),
    }
}

/// Two well separated blobs come out as the partition an exhaustive search
/// over all two-way splits finds.
pub fn two_blobs_recovered(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut pts = Vec::new();
    let mut truth = Vec::new();
    for i in 0..12 {
        let c = (i % 2) as f32;
        pts.push(vec![c * 10.0 + rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]);
        truth.push(i % 2);
    }
    let oracle = brute_force_two_partition(&pts);
    if canonical(&oracle) != canonical(&truth) {
        return Err("oracle split differs from the generating blobs".into());
    }
    let km = kmeans(&pts.concat(), 2, 2, 50, seed).map_err(|e| e.to_string())?;
    if canonical(&km.labels) != canonical(&oracle) {
        return Err(format!("seed {seed}: {:?}", km.labels));
    }
    Ok(())
}
