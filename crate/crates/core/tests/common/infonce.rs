//! Brute-force O(B²) contrastive losses in f64, written from the loss
//! definitions without the graph, and the worst gaps of the library against them.

use crossmodal_rec::data::Modality;
use crossmodal_rec::grm::{implicit_align_loss, GrmConfig, GrmModel, SeqBatch, Vocab};
use crossmodal_rec::quantizer::{layer_contrastive_loss, recon_align_loss, sample_positives, SemanticIds};
use crossmodal_rec::tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Mean over anchors `i` with a target of
/// `−s(a_i, b_t)/τ + log Σ_j exp(s(a_i, b_j)/τ)`; zero when no anchor has one.
pub fn one_way(anchors: &[Vec<f64>], others: &[Vec<f64>], targets: &[Option<usize>], tau: f64) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for (a, t) in anchors.iter().zip(targets) {
        let Some(t) = *t else { continue };
        let logits: Vec<f64> = others.iter().map(|b| dot(a, b) / tau).collect();
        total += logsumexp(&logits) - logits[t];
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

/// Both directions with row `i` of the other side as the positive.
pub fn symmetric(a: &[Vec<f64>], b: &[Vec<f64>], tau: f64) -> f64 {
    let diag: Vec<Option<usize>> = (0..a.len()).map(Some).collect();
    one_way(a, b, &diag, tau) + one_way(b, a, &diag, tau)
}

/// Per-level contrastive term: text residuals against text residuals with
/// positives chosen by vision labels, and the mirror image.
pub fn layer_contrastive(
    r_t: &[Vec<f64>],
    r_v: &[Vec<f64>],
    pos_t: &[Option<usize>],
    pos_v: &[Option<usize>],
    tau: f64,
) -> f64 {
    one_way(r_t, r_t, pos_t, tau) + one_way(r_v, r_v, pos_v, tau)
}

/// Masked mean of token states per row.
pub fn masked_mean(states: &[Vec<f64>], rows: &[Vec<usize>]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|r| {
            let d = states[r[0]].len();
            let mut out = vec![0.0; d];
            for &i in r {
                out.iter_mut().zip(&states[i]).for_each(|(o, s)| *o += s);
            }
            out.iter_mut().for_each(|o| *o /= r.len() as f64);
            out
        })
        .collect()
}

pub const TOL: f64 = 1e-6;
pub const TAU: f32 = 0.1;

fn random_rows(rng: &mut ChaCha8Rng, b: usize, d: usize) -> Vec<Vec<f32>> {
    (0..b).map(|_| (0..d).map(|_| rng.gen_range(-0.3..0.3)).collect()).collect()
}

fn widen(rows: &[Vec<f32>]) -> Vec<Vec<f64>> {
    rows.iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect()
}

/// Worst `|ours − oracle| / max(1, |oracle|)` over B ∈ {2, 4, 16} and five
/// seeds. Losses reach ~80 at τ = 0.1, where one f32 ulp is already ~8e-6,
/// so the gap is measured relative to the loss above 1.
fn worst_gap(f: impl Fn(usize, u64) -> (f64, f64)) -> f64 {
    let mut worst = 0.0f64;
    for b in [2, 4, 16] {
        for seed in 0..5 {
            let (ours, oracle) = f(b, seed);
            worst = worst.max((ours - oracle).abs() / oracle.abs().max(1.0));
        }
    }
    worst
}

pub fn contrastive_gap() -> f64 {
    worst_gap(|b, seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (rt, rv) = (random_rows(&mut rng, b, 8), random_rows(&mut rng, b, 8));
        let lt: Vec<usize> = (0..b).map(|_| rng.gen_range(0..3)).collect();
        let lv: Vec<usize> = (0..b).map(|_| rng.gen_range(0..3)).collect();
        // Text anchors take positives from vision labels and vice versa.
        let pos_t = sample_positives(&lv, &mut rng);
        let pos_v = sample_positives(&lt, &mut rng);
        let mut g = Graph::new();
        let a = g.variable(Tensor::from_rows(&rt).unwrap());
        let c = g.variable(Tensor::from_rows(&rv).unwrap());
        let loss = layer_contrastive_loss(&mut g, a, c, &pos_t, &pos_v, TAU).unwrap();
        let oracle = layer_contrastive(&widen(&rt), &widen(&rv), &pos_t, &pos_v, TAU as f64);
        (g.value(loss).item() as f64, oracle)
    })
}

pub fn recon_align_gap() -> f64 {
    worst_gap(|b, seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let (zt, zv) = (random_rows(&mut rng, b, 8), random_rows(&mut rng, b, 8));
        let mut g = Graph::new();
        let a = g.variable(Tensor::from_rows(&zt).unwrap());
        let c = g.variable(Tensor::from_rows(&zv).unwrap());
        let loss = recon_align_loss(&mut g, a, c, TAU).unwrap();
        (g.value(loss).item() as f64, symmetric(&widen(&zt), &widen(&zv), TAU as f64))
    })
}

pub fn toy_ids(n: usize) -> SemanticIds {
    SemanticIds {
        items: (0..n).map(|i| format!("i{i}")).collect(),
        text: (0..n).map(|i| vec![i % 4, (i / 4) % 4]).collect(),
        vision: (0..n).map(|i| vec![(i * 3) % 4, (i / 4 + 1) % 4]).collect(),
        raw_text: None,
        raw_vision: None,
    }
}

/// Implicit alignment against the oracle applied to the frozen encoder's
/// token states.
pub fn implicit_gap() -> f64 {
    worst_gap(|b, seed| {
        let vocab = Vocab::new(2, 4).unwrap();
        let model = GrmModel::new(vocab, GrmConfig { d_model: 8, heads: 2, layers: 1, d_ff: 16 }, seed).unwrap();
        let ids = toy_ids(16);
        let items: Vec<usize> = (0..b).collect();
        let mut g = Graph::inference();
        let loss = implicit_align_loss(&mut g, &model, &items, &ids, TAU).unwrap();
        let ours = g.value(loss).item() as f64;

        let mut pooled = Vec::new();
        for m in Modality::BOTH {
            let seqs: Vec<Vec<usize>> = items.iter().map(|&i| vocab.item_tokens(m, &ids.get(m)[i]).unwrap()).collect();
            let src = SeqBatch::new(&seqs).unwrap();
            let mut g = Graph::inference();
            let h = model.encode(&mut g, &src).unwrap();
            let states: Vec<Vec<f32>> = (0..g.value(h).rows()).map(|r| g.value(h).row_slice(r).to_vec()).collect();
            let rows: Vec<Vec<usize>> = (0..b).map(|i| (0..src.len).map(|t| i * src.len + t).collect()).collect();
            pooled.push(masked_mean(&widen(&states), &rows));
        }
        (ours, symmetric(&pooled[0], &pooled[1], TAU as f64))
    })
}

