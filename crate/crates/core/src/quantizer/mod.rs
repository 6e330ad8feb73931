//! Cross-modal residual quantizer: per-modality MLP encoders/decoders and
//! `L`-level codebooks trained jointly, then turned into unique semantic IDs.

mod ids;
mod loss;
mod train;

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{EmbeddingTable, Modality};
use crate::error::{Error, Result};
use crate::labels::kmeans;
use crate::tensor::kernels::squared_distance;
use crate::tensor::{xavier_uniform, Graph, ParamId, ParamStore, SeedStream, Tensor, Var};

pub use ids::{
    assign_semantic_ids, read_ids_jsonl, resolve_conflicts, sid_string, write_ids_jsonl, SemanticIds,
};
pub use loss::{
    layer_contrastive_loss, recon_align_loss, rqvae_loss, sample_positives, LossBreakdown, QuantBatch,
};
pub use train::{initialize, train_quantizer, EpochLog, QuantizerReport, TrainOptions};

/// Hyperparameters of the semantic-ID stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IdHyper {
    pub tau: f32,
    /// Commitment coefficient on the encoder side of the codebook loss.
    pub alpha: f32,
    /// One weight per level.
    pub lambda_con: Vec<f32>,
    pub lambda_align: f32,
    pub batch_size: usize,
    pub lr: f32,
    pub weight_decay: f32,
    pub epochs: usize,
    pub levels: usize,
    pub codebook_size: usize,
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
}

impl Default for IdHyper {
    fn default() -> Self {
        IdHyper {
            tau: 0.1,
            alpha: 0.25,
            lambda_con: vec![0.0, 0.0, 0.1, 0.1],
            lambda_align: 0.001,
            batch_size: 1024,
            lr: 0.001,
            weight_decay: 0.01,
            epochs: 100,
            levels: 4,
            codebook_size: 256,
            latent_dim: 32,
            hidden: vec![512, 256],
        }
    }
}

impl IdHyper {
    /// Desk-scale settings used for the synthetic experiments.
    pub fn desk() -> Self {
        IdHyper {
            lambda_con: vec![0.0, 0.0, 0.1],
            batch_size: 64,
            epochs: 50,
            levels: 3,
            codebook_size: 32,
            hidden: vec![128, 64],
            ..IdHyper::default()
        }
    }

    /// Same settings with every cross-modal term switched off.
    pub fn without_alignment(&self) -> Self {
        IdHyper {
            lambda_con: vec![0.0; self.lambda_con.len()],
            lambda_align: 0.0,
            ..self.clone()
        }
    }

    pub fn validate(&self, n_items: usize) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.tau > 0.0) {
            errs.push(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.alpha >= 0.0) || !(self.lambda_align >= 0.0) || self.lambda_con.iter().any(|l| !(*l >= 0.0)) {
            errs.push("alpha and lambda weights must be non-negative".to_string());
        }
        if self.lambda_con.len() != self.levels {
            errs.push(format!(
                "lambda_con has {} entries for {} levels",
                self.lambda_con.len(),
                self.levels
            ));
        }
        if self.batch_size == 0 || (n_items > 0 && self.batch_size > n_items) {
            errs.push(format!("batch_size must be in [1, {n_items}], got {}", self.batch_size));
        }
        if !(self.lr >= 0.0) {
            errs.push("lr must be non-negative".to_string());
        }
        if self.levels == 0 || self.levels > 26 {
            errs.push(format!("levels must be in [1, 26], got {}", self.levels));
        }
        if self.codebook_size == 0 || self.latent_dim == 0 || self.hidden.contains(&0) {
            errs.push("codebook_size, latent_dim and hidden sizes must be positive".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// Layer sizes of a quantizer; stored as the checkpoint header.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantizerArch {
    pub d_text: usize,
    pub d_vision: usize,
    pub hidden: Vec<usize>,
    pub latent: usize,
    pub levels: usize,
    pub codebook_size: usize,
}

impl QuantizerArch {
    pub fn new(d_text: usize, d_vision: usize, hyper: &IdHyper) -> Self {
        QuantizerArch {
            d_text,
            d_vision,
            hidden: hyper.hidden.clone(),
            latent: hyper.latent_dim,
            levels: hyper.levels,
            codebook_size: hyper.codebook_size,
        }
    }

    fn input_dim(&self, m: Modality) -> usize {
        match m {
            Modality::Text => self.d_text,
            Modality::Vision => self.d_vision,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Net {
    enc: Vec<(ParamId, ParamId)>,
    dec: Vec<(ParamId, ParamId)>,
    codebooks: Vec<ParamId>,
}

/// Encoders, decoders and codebooks for both modalities.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizerParams {
    pub arch: QuantizerArch,
    pub store: ParamStore,
    text: Net,
    vision: Net,
}

const CKPT_KIND: &str = "quantizer";

#[derive(Serialize, Deserialize)]
struct CkptHeader {
    kind: String,
    arch: QuantizerArch,
}

impl QuantizerParams {
    /// Xavier-initialized MLPs, zero biases and zero codebooks.
    pub fn new(arch: QuantizerArch, seed: u64) -> Self {
        let mut seeds = SeedStream::new(seed);
        let mut store = ParamStore::new();
        let mut text = None;
        let mut vision = None;
        for m in Modality::BOTH {
            let mut dims = vec![arch.input_dim(m)];
            dims.extend(&arch.hidden);
            dims.push(arch.latent);
            let mut layers = |part: &str, dims: &[usize], store: &mut ParamStore| {
                dims.windows(2)
                    .enumerate()
                    .map(|(i, w)| {
                        let wt = xavier_uniform(w[0], w[1], &mut seeds.rng());
                        let w_id = store.add(format!("{m}.{part}.{i}.w"), wt);
                        let b_id = store.add(format!("{m}.{part}.{i}.b"), Tensor::zeros(&[1, w[1]]));
                        (w_id, b_id)
                    })
                    .collect::<Vec<_>>()
            };
            let enc = layers("enc", &dims, &mut store);
            dims.reverse();
            let dec = layers("dec", &dims, &mut store);
            let codebooks = (0..arch.levels)
                .map(|l| store.add(format!("{m}.codebook.{l}"), Tensor::zeros(&[arch.codebook_size, arch.latent])))
                .collect();
            let net = Net { enc, dec, codebooks };
            match m {
                Modality::Text => text = Some(net),
                Modality::Vision => vision = Some(net),
            }
        }
        QuantizerParams {
            arch,
            store,
            text: text.expect("text net"),
            vision: vision.expect("vision net"),
        }
    }

    fn net(&self, m: Modality) -> &Net {
        match m {
            Modality::Text => &self.text,
            Modality::Vision => &self.vision,
        }
    }

    pub fn codebook(&self, m: Modality, level: usize) -> &Tensor {
        self.store.get(self.net(m).codebooks[level])
    }

    pub fn codebooks(&self, m: Modality) -> Vec<&Tensor> {
        self.net(m).codebooks.iter().map(|&id| self.store.get(id)).collect()
    }

    pub fn codebook_id(&self, m: Modality, level: usize) -> ParamId {
        self.net(m).codebooks[level]
    }

    pub fn set_codebooks(&mut self, m: Modality, books: Vec<Tensor>) -> Result<()> {
        let ids = self.net(m).codebooks.clone();
        if books.len() != ids.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} codebooks, got {}",
                ids.len(),
                books.len()
            )));
        }
        for (id, b) in ids.into_iter().zip(books) {
            if b.shape() != self.store.get(id).shape() {
                return Err(Error::InvalidArgument(format!(
                    "codebook shape {:?} does not match {:?}",
                    b.shape(),
                    self.store.get(id).shape()
                )));
            }
            *self.store.get_mut(id) = b;
        }
        Ok(())
    }

    fn mlp(&self, g: &mut Graph, layers: &[(ParamId, ParamId)], x: Var) -> Result<Var> {
        let mut h = x;
        for (i, &(w, b)) in layers.iter().enumerate() {
            let wv = g.param(&self.store, w);
            let bv = g.param(&self.store, b);
            h = g.matmul(h, wv)?;
            h = g.add_row(h, bv)?;
            if i + 1 < layers.len() {
                h = g.relu(h);
            }
        }
        Ok(h)
    }

    pub fn encode(&self, g: &mut Graph, m: Modality, x: Var) -> Result<Var> {
        self.mlp(g, &self.net(m).enc, x)
    }

    pub fn decode(&self, g: &mut Graph, m: Modality, z: Var) -> Result<Var> {
        self.mlp(g, &self.net(m).dec, z)
    }

    /// Latents for every row of `table`, without gradient tracking.
    pub fn latents(&self, table: &EmbeddingTable) -> Result<Tensor> {
        let mut g = Graph::inference();
        let x = g.constant(Tensor::matrix(table.len(), table.dim(), table.values().to_vec())?);
        let z = self.encode(&mut g, table.modality(), x)?;
        Ok(g.value(z).clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::to_string(&CkptHeader {
            kind: CKPT_KIND.to_string(),
            arch: self.arch.clone(),
        })?;
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.store
            .write_to(BufWriter::new(file), &header)
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let (store, header) = ParamStore::read_from(BufReader::new(file))?;
        let header: CkptHeader = serde_json::from_str(&header)?;
        if header.kind != CKPT_KIND {
            return Err(Error::Data(format!(
                "{} holds a `{}` checkpoint, expected `{CKPT_KIND}`",
                path.display(),
                header.kind
            )));
        }
        let mut params = QuantizerParams::new(header.arch, 0);
        params
            .store
            .assign_from(&store)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        Ok(params)
    }
}

/// Index of the codeword nearest to `r` (squared L2), ties to the smallest index.
pub fn nearest_codeword(r: &[f32], codebook: &Tensor) -> usize {
    let mut best = 0;
    let mut best_d = f32::INFINITY;
    for k in 0..codebook.rows() {
        let d = squared_distance(r, codebook.row_slice(k));
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    best
}

/// Codewords of `codebook` ordered by distance to `r`, ties by index.
pub fn codewords_by_distance(r: &[f32], codebook: &Tensor) -> Vec<usize> {
    let d: Vec<f32> = (0..codebook.rows())
        .map(|k| squared_distance(r, codebook.row_slice(k)))
        .collect();
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.sort_by(|&a, &b| d[a].total_cmp(&d[b]).then(a.cmp(&b)));
    order
}

/// Greedy per-level quantization of one latent vector.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizeTrace {
    pub codes: Vec<usize>,
    /// `residuals[l]` is the input to level `l`; `residuals[L]` is what is left.
    pub residuals: Vec<Vec<f32>>,
    pub zhat: Vec<f32>,
}

impl QuantizeTrace {
    pub fn final_residual(&self) -> &[f32] {
        self.residuals.last().expect("at least r_0")
    }
}

pub fn residual_quantize(z: &[f32], codebooks: &[&Tensor]) -> QuantizeTrace {
    let mut residuals = vec![z.to_vec()];
    let mut codes = Vec::with_capacity(codebooks.len());
    let mut zhat = vec![0.0; z.len()];
    for cb in codebooks {
        let r = residuals.last().expect("non-empty");
        let c = nearest_codeword(r, cb);
        let e = cb.row_slice(c);
        let next: Vec<f32> = r.iter().zip(e).map(|(a, b)| a - b).collect();
        zhat.iter_mut().zip(e).for_each(|(s, v)| *s += v);
        codes.push(c);
        residuals.push(next);
    }
    QuantizeTrace { codes, residuals, zhat }
}

/// Level 0 is k-means over the latents; level `l` is k-means over the
/// residuals left by level `l − 1`.
pub fn init_codebooks(latents: &[f32], dim: usize, levels: usize, m: usize, seed: u64) -> Result<Vec<Tensor>> {
    if dim == 0 || latents.len() % dim != 0 {
        return Err(Error::InvalidArgument(format!("{} values do not form rows of dimension {dim}", latents.len())));
    }
    let mut distinct: Vec<&[f32]> = latents.chunks_exact(dim).collect();
    distinct.sort_by(|a, b| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    distinct.dedup();
    if distinct.len() < m {
        return Err(Error::InvalidArgument(format!(
            "codebook init needs at least {m} distinct samples, got {}",
            distinct.len()
        )));
    }
    let mut seeds = SeedStream::new(seed);
    let mut residual = latents.to_vec();
    let mut books = Vec::with_capacity(levels);
    for _ in 0..levels {
        let km = kmeans(&residual, dim, m, crate::labels::DEFAULT_KMEANS_ITERS, seeds.next_seed())?;
        for (row, &c) in residual.chunks_exact_mut(dim).zip(&km.labels) {
            row.iter_mut().zip(km.centroid(c)).for_each(|(r, e)| *r -= e);
        }
        books.push(Tensor::matrix(m, dim, km.centroids)?);
    }
    Ok(books)
}
