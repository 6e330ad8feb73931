//! Independent statistical oracles (contingency tables, partitions).

use std::collections::HashMap;

/// Adjusted Rand index between two labelings (Hubert & Arabie).
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let comb2 = |x: f64| x * (x - 1.0) / 2.0;
    let mut joint: HashMap<(usize, usize), f64> = HashMap::new();
    let mut ra: HashMap<usize, f64> = HashMap::new();
    let mut rb: HashMap<usize, f64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_default() += 1.0;
        *ra.entry(x).or_default() += 1.0;
        *rb.entry(y).or_default() += 1.0;
    }
    let index: f64 = joint.values().map(|&v| comb2(v)).sum();
    let sa: f64 = ra.values().map(|&v| comb2(v)).sum();
    let sb: f64 = rb.values().map(|&v| comb2(v)).sum();
    let expected = sa * sb / comb2(n);
    let max = 0.5 * (sa + sb);
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

/// Pearson χ² statistic of the contingency table of two labelings with
/// `ka` and `kb` categories.
pub fn chi_square(a: &[usize], b: &[usize], ka: usize, kb: usize) -> f64 {
    let n = a.len() as f64;
    let mut table = vec![0.0; ka * kb];
    let mut ra = vec![0.0; ka];
    let mut rb = vec![0.0; kb];
    for (&x, &y) in a.iter().zip(b) {
        table[x * kb + y] += 1.0;
        ra[x] += 1.0;
        rb[y] += 1.0;
    }
    let mut chi = 0.0;
    for i in 0..ka {
        for j in 0..kb {
            let e = ra[i] * rb[j] / n;
            if e > 0.0 {
                chi += (table[i * kb + j] - e).powi(2) / e;
            }
        }
    }
    chi
}

/// 99th percentile of χ² with 9 degrees of freedom (4×4 table).
pub const CHI2_DF9_P01: f64 = 21.666;

/// Best 2-partition of up to ~16 points by exhaustive enumeration of
/// within-cluster sum of squares. Returns labels with point 0 in cluster 0.
pub fn brute_force_two_partition(points: &[Vec<f32>]) -> Vec<usize> {
    let n = points.len();
    assert!(n <= 16);
    let dim = points[0].len();
    let mut best = (f64::INFINITY, 0u32);
    for mask in 0u32..(1 << (n - 1)) {
        // point 0 always in cluster 0; bit i → point i+1 in cluster 1
        let labels: Vec<usize> = (0..n).map(|i| if i == 0 { 0 } else { ((mask >> (i - 1)) & 1) as usize }).collect();
        if labels.iter().all(|&l| l == 0) {
            continue;
        }
        let mut sse = 0.0;
        for c in 0..2 {
            let members: Vec<&Vec<f32>> = points.iter().zip(&labels).filter(|(_, &l)| l == c).map(|(p, _)| p).collect();
            let mean: Vec<f64> = (0..dim)
                .map(|j| members.iter().map(|p| p[j] as f64).sum::<f64>() / members.len() as f64)
                .collect();
            sse += members
                .iter()
                .map(|p| (0..dim).map(|j| (p[j] as f64 - mean[j]).powi(2)).sum::<f64>())
                .sum::<f64>();
        }
        if sse < best.0 {
            best = (sse, mask);
        }
    }
    (0..n).map(|i| if i == 0 { 0 } else { ((best.1 >> (i - 1)) & 1) as usize }).collect()
}

/// Relabels so the first occurrence order defines label ids (permutation-free comparison).
pub fn canonical(labels: &[usize]) -> Vec<usize> {
    let mut map = HashMap::new();
    labels
        .iter()
        .map(|l| {
            let next = map.len();
            *map.entry(*l).or_insert(next)
        })
        .collect()
}
