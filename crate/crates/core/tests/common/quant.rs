//! Exhaustive and finite-difference checks of residual quantization and the
//! gradient routing of the semantic-ID objective.

use crossmodal_rec::data::Modality;
use crossmodal_rec::quantizer::{
    residual_quantize, rqvae_loss, IdHyper, LossBreakdown, QuantBatch, QuantizerArch, QuantizerParams,
};
use crossmodal_rec::tensor::{Graph, ParamId, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sq(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum()
}

fn random_book(rng: &mut ChaCha8Rng, m: usize, d: usize) -> Tensor {
    Tensor::matrix(m, d, (0..m * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Residual recursion is bit-exact and every level picks the codeword an
/// exhaustive f64 scan picks, on random L=2, M=4 instances.
pub fn recursion_and_argmin(seed: u64) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = 3;
    let books = [random_book(&mut rng, 4, d), random_book(&mut rng, 4, d)];
    let refs: Vec<&Tensor> = books.iter().collect();
    (0..50).all(|_| {
        let z: Vec<f32> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let t = residual_quantize(&z, &refs);
        let mut ok = t.residuals[0] == z;
        let mut zhat = vec![0.0f32; d];
        for (l, book) in books.iter().enumerate() {
            let r = &t.residuals[l];
            let dists: Vec<f64> = (0..4).map(|k| sq(r, book.row_slice(k))).collect();
            let best = (0..4).min_by(|&a, &b| dists[a].total_cmp(&dists[b])).unwrap();
            ok &= dists[t.codes[l]] == dists[best];
            let e = book.row_slice(t.codes[l]);
            let next: Vec<f32> = r.iter().zip(e).map(|(a, b)| a - b).collect();
            ok &= t.residuals[l + 1] == next;
            zhat.iter_mut().zip(e).for_each(|(s, v)| *s += v);
        }
        ok && t.zhat == zhat
    })
}

pub struct Routing {
    pub params: QuantizerParams,
    pub batch: QuantBatch,
}

impl Routing {
    pub fn new(seed: u64) -> Routing {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hyper = IdHyper { levels: 2, codebook_size: 4, latent_dim: 2, hidden: vec![4], lambda_con: vec![0.0; 2], ..IdHyper::default() };
        let mut params = QuantizerParams::new(QuantizerArch::new(3, 2, &hyper), seed);
        for m in Modality::BOTH {
            let books = vec![random_book(&mut rng, 4, 2), random_book(&mut rng, 4, 2)];
            params.set_codebooks(m, books).unwrap();
        }
        let rows = |rng: &mut ChaCha8Rng, d: usize| {
            Tensor::matrix(3, d, (0..3 * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
        };
        let batch = QuantBatch {
            x_t: rows(&mut rng, 3),
            x_v: rows(&mut rng, 2),
            pos_t: vec![None; 3],
            pos_v: vec![None; 3],
        };
        Routing { params, batch }
    }

    fn hyper(alpha: f32) -> IdHyper {
        IdHyper { alpha, levels: 2, lambda_con: vec![0.0; 2], lambda_align: 0.0, ..IdHyper::default() }
    }

    fn eval(&self, params: &QuantizerParams, alpha: f32) -> LossBreakdown {
        let mut g = Graph::inference();
        rqvae_loss(&mut g, params, &self.batch, &Self::hyper(alpha)).unwrap().1
    }

    fn grad(&self, alpha: f32, id: ParamId) -> Tensor {
        let mut g = Graph::new();
        let (loss, _) = rqvae_loss(&mut g, &self.params, &self.batch, &Self::hyper(alpha)).unwrap();
        g.backward(loss).unwrap().param(id).cloned().unwrap_or_else(|| Tensor::zeros(self.params.store.get(id).shape()))
    }

    fn codes(&self, params: &QuantizerParams) -> Vec<Vec<usize>> {
        let mut g = Graph::inference();
        let x = g.constant(self.batch.x_t.clone());
        let z = params.encode(&mut g, Modality::Text, x).unwrap();
        let z = g.value(z).clone();
        (0..z.rows()).map(|i| residual_quantize(z.row_slice(i), &params.codebooks(Modality::Text)).codes).collect()
    }

    fn perturbed(&self, id: ParamId, k: usize, h: f32) -> QuantizerParams {
        let mut p = self.params.clone();
        p.store.get_mut(id).data_mut()[k] += h;
        p
    }

    /// Text reconstruction with the decoder fed `ẑ + (z(θ') − z(θ))`: the
    /// function whose slope the straight-through estimator reports.
    fn surrogate_recon(&self, moved: &QuantizerParams) -> f64 {
        let mut g = Graph::inference();
        let x = g.constant(self.batch.x_t.clone());
        let z0 = self.params.encode(&mut g, Modality::Text, x).unwrap();
        let z1 = moved.encode(&mut g, Modality::Text, x).unwrap();
        let (z0, z1) = (g.value(z0).clone(), g.value(z1).clone());
        let books = self.params.codebooks(Modality::Text);
        let mut input = Vec::new();
        for i in 0..z0.rows() {
            let t = residual_quantize(z0.row_slice(i), &books);
            input.extend(t.zhat.iter().zip(z0.row_slice(i)).zip(z1.row_slice(i)).map(|((q, a), b)| q + (b - a)));
        }
        let zin = g.constant(Tensor::matrix(z0.rows(), z0.cols(), input).unwrap());
        let xhat = self.params.decode(&mut g, Modality::Text, zin).unwrap();
        sq(self.batch.x_t.data(), g.value(xhat).data()) / z0.rows() as f64
    }
}

pub struct RoutingReport {
    /// Worst `|grad − FD| / max(1, |grad|)` per check.
    pub encoder_straight_through: f64,
    pub codebook_only_codebook_term: f64,
    pub commitment_to_encoder: f64,
    /// Largest distance of the codebook gradient from the FD of the *total*
    /// loss; clearly non-zero because reconstruction is blocked there.
    pub codebook_vs_total: f64,
}

pub fn routing(seed: u64) -> RoutingReport {
    let r = Routing::new(seed);
    let h = 1e-3f32;
    let enc = r.params.store.find("text.enc.0.w").unwrap();
    let last = r.params.codebook_id(Modality::Text, 1);
    let base_codes = r.codes(&r.params);
    let rel = |g: f32, fd: f64| (g as f64 - fd).abs() / (g.abs() as f64).max(1.0);
    let mut rep = RoutingReport {
        encoder_straight_through: 0.0,
        codebook_only_codebook_term: 0.0,
        commitment_to_encoder: 0.0,
        codebook_vs_total: 0.0,
    };

    let g0 = r.grad(0.0, enc);
    let g1 = r.grad(1.0, enc);
    let base = r.eval(&r.params, 0.0);
    let s0 = r.surrogate_recon(&r.params);
    for k in 0..g0.numel() {
        let moved = r.perturbed(enc, k, h);
        assert_eq!(r.codes(&moved), base_codes, "step too large, codes moved");
        let fd = (r.surrogate_recon(&moved) - s0) / h as f64;
        rep.encoder_straight_through = rep.encoder_straight_through.max(rel(g0.data()[k], fd));
        let fd_rq = (r.eval(&moved, 0.0).rq_t - base.rq_t) as f64 / h as f64;
        rep.commitment_to_encoder = rep.commitment_to_encoder.max(rel(g1.data()[k] - g0.data()[k], fd_rq));
    }

    let gb = r.grad(0.25, last);
    let base = r.eval(&r.params, 0.0);
    let mut worst_total = 0.0f64;
    for k in 0..gb.numel() {
        let moved = r.perturbed(last, k, h);
        assert_eq!(r.codes(&moved), base_codes, "step too large, codes moved");
        let after = r.eval(&moved, 0.0);
        let fd_rq = (after.rq_t - base.rq_t) as f64 / h as f64;
        rep.codebook_only_codebook_term = rep.codebook_only_codebook_term.max(rel(gb.data()[k], fd_rq));
        let fd_total = (after.total - base.total) as f64 / h as f64;
        worst_total = worst_total.max(rel(gb.data()[k], fd_total));
    }
    rep.codebook_vs_total = worst_total;
    rep
}
