use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{nearest_codeword, IdHyper, QuantizerParams};
use crate::contrastive::{info_nce, symmetric_info_nce};
use crate::data::Modality;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// One aligned mini-batch. `pos_t[i]` is the in-batch positive for text
/// anchor `i` (same vision pseudo-label), `pos_v[i]` likewise with text labels.
#[derive(Clone, Debug)]
pub struct QuantBatch {
    pub x_t: Tensor,
    pub x_v: Tensor,
    pub pos_t: Vec<Option<usize>>,
    pub pos_v: Vec<Option<usize>>,
}

impl QuantBatch {
    pub fn len(&self) -> usize {
        self.x_t.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// For every anchor, one uniformly drawn other index with the same label.
pub fn sample_positives<R: Rng>(labels: &[usize], rng: &mut R) -> Vec<Option<usize>> {
    let mut pool: Vec<usize> = Vec::new();
    (0..labels.len())
        .map(|i| {
            pool.clear();
            pool.extend((0..labels.len()).filter(|&j| j != i && labels[j] == labels[i]));
            pool.choose(rng).copied()
        })
        .collect()
}

/// Contrastive loss on the level-`l` residuals of both modalities. The
/// softmax denominator runs over the whole batch, self included; anchors
/// without a positive are left out of the mean.
pub fn layer_contrastive_loss(
    g: &mut Graph,
    r_t: Var,
    r_v: Var,
    pos_t: &[Option<usize>],
    pos_v: &[Option<usize>],
    tau: f32,
) -> Result<Var> {
    let v_to_t = info_nce(g, r_t, r_t, pos_t, tau)?;
    let t_to_v = info_nce(g, r_v, r_v, pos_v, tau)?;
    g.add(t_to_v, v_to_t)
}

/// Symmetric InfoNCE between the quantized vectors of the two modalities;
/// the positive is the same row of the other modality.
pub fn recon_align_loss(g: &mut Graph, zhat_t: Var, zhat_v: Var, tau: f32) -> Result<Var> {
    symmetric_info_nce(g, zhat_t, zhat_v, tau)
}

/// Per-component values of one evaluation of the semantic-ID objective.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon_t: f32,
    pub recon_v: f32,
    pub rq_t: f32,
    pub rq_v: f32,
    /// Unweighted contrastive loss per level.
    pub con: Vec<f32>,
    pub align: f32,
    pub total: f32,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.recon_t, self.recon_v, self.rq_t, self.rq_v, self.align, self.total]
            .iter()
            .chain(&self.con)
            .all(|v| v.is_finite())
    }

    pub(crate) fn add_scaled(&mut self, other: &LossBreakdown, w: f32) {
        self.recon_t += w * other.recon_t;
        self.recon_v += w * other.recon_v;
        self.rq_t += w * other.rq_t;
        self.rq_v += w * other.rq_v;
        self.align += w * other.align;
        self.total += w * other.total;
        self.con.resize(other.con.len(), 0.0);
        self.con.iter_mut().zip(&other.con).for_each(|(a, b)| *a += w * b);
    }
}

struct Branch {
    residuals: Vec<Var>,
    zhat_aligned: Var,
    recon: Var,
    rq: Var,
}

fn branch(g: &mut Graph, params: &QuantizerParams, m: Modality, x: &Tensor, alpha: f32) -> Result<Branch> {
    let inv_b = 1.0 / x.rows() as f32;
    let xv = g.constant(x.clone());
    let z = params.encode(g, m, xv)?;
    let mut r = z;
    let mut residuals = Vec::with_capacity(params.arch.levels);
    let mut zhat: Option<Var> = None;
    let mut rq: Option<Var> = None;
    for l in 0..params.arch.levels {
        let cb = params.codebook(m, l);
        let rv = g.value(r);
        let codes: Vec<usize> = (0..rv.rows()).map(|i| nearest_codeword(rv.row_slice(i), cb)).collect();
        let book = g.param(&params.store, params.codebook_id(m, l));
        let e = g.gather_rows(book, &codes)?;

        let r_sg = g.stop_grad(r);
        let e_sg = g.stop_grad(e);
        let d_book = g.sub(r_sg, e)?;
        let d_commit = g.sub(r, e_sg)?;
        let book_term = g.sum_squares(d_book);
        let commit_term = g.sum_squares(d_commit);
        let commit_term = g.scale(commit_term, alpha);
        let level = g.add(book_term, commit_term)?;
        rq = Some(match rq {
            None => level,
            Some(acc) => g.add(acc, level)?,
        });

        residuals.push(r);
        zhat = Some(match zhat {
            None => e,
            Some(acc) => g.add(acc, e)?,
        });
        r = g.sub(r, e)?;
    }
    let zhat = zhat.expect("levels >= 1");
    let rq = rq.expect("levels >= 1");
    let rq = g.scale(rq, inv_b);

    // Straight-through: value of ẑ, gradient of z.
    let gap = g.sub(zhat, z)?;
    let gap = g.stop_grad(gap);
    let z_st = g.add(z, gap)?;
    let xhat = params.decode(g, m, z_st)?;
    let err = g.sub(xv, xhat)?;
    let recon = g.sum_squares(err);
    let recon = g.scale(recon, inv_b);

    // Alignment sees ẑ but also passes gradient to the encoder.
    let z_sg = g.stop_grad(z);
    let enc_path = g.sub(z, z_sg)?;
    let zhat_aligned = g.add(zhat, enc_path)?;

    Ok(Branch { residuals, zhat_aligned, recon, rq })
}

/// Full semantic-ID objective on one batch: reconstruction and codebook
/// terms for both modalities plus weighted contrastive and alignment terms.
pub fn rqvae_loss(
    g: &mut Graph,
    params: &QuantizerParams,
    batch: &QuantBatch,
    hyper: &IdHyper,
) -> Result<(Var, LossBreakdown)> {
    if batch.x_v.rows() != batch.len() || batch.pos_t.len() != batch.len() || batch.pos_v.len() != batch.len() {
        return Err(Error::InvalidArgument("quantizer batch is not aligned across modalities".into()));
    }
    if hyper.lambda_con.len() != params.arch.levels {
        return Err(Error::InvalidArgument(format!(
            "lambda_con has {} entries for {} levels",
            hyper.lambda_con.len(),
            params.arch.levels
        )));
    }
    let t = branch(g, params, Modality::Text, &batch.x_t, hyper.alpha)?;
    let v = branch(g, params, Modality::Vision, &batch.x_v, hyper.alpha)?;

    let mut total = g.add(t.recon, v.recon)?;
    total = g.add(total, t.rq)?;
    total = g.add(total, v.rq)?;
    let mut con = Vec::with_capacity(params.arch.levels);
    for l in 0..params.arch.levels {
        let c = layer_contrastive_loss(g, t.residuals[l], v.residuals[l], &batch.pos_t, &batch.pos_v, hyper.tau)?;
        con.push(g.value(c).item());
        let w = g.scale(c, hyper.lambda_con[l]);
        total = g.add(total, w)?;
    }
    let align = recon_align_loss(g, t.zhat_aligned, v.zhat_aligned, hyper.tau)?;
    let w = g.scale(align, hyper.lambda_align);
    total = g.add(total, w)?;

    let breakdown = LossBreakdown {
        recon_t: g.value(t.recon).item(),
        recon_v: g.value(v.recon).item(),
        rq_t: g.value(t.rq).item(),
        rq_v: g.value(v.rq).item(),
        con,
        align: g.value(align).item(),
        total: g.value(total).item(),
    };
    if !breakdown.is_finite() {
        return Err(Error::Numeric(format!("non-finite semantic-ID loss: {breakdown:?}")));
    }
    Ok((total, breakdown))
}
