use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use log::warn;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::tasks::TrainingExample;
use super::vocab::{Vocab, BOS, PAD};
use crate::contrastive::symmetric_info_nce;
use crate::data::Modality;
use crate::error::{Error, Result};
use crate::quantizer::SemanticIds;
use crate::tensor::{xavier_uniform, Attention, Graph, ParamId, ParamStore, SeedStream, Tensor, Var};

const CKPT_KIND: &str = "grm";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrmConfig {
    pub d_model: usize,
    pub heads: usize,
    /// Layers per side.
    pub layers: usize,
    pub d_ff: usize,
}

impl GrmConfig {
    /// 4 layers per side, 6 heads of width 64.
    pub fn full() -> Self {
        GrmConfig { d_model: 384, heads: 6, layers: 4, d_ff: 1536 }
    }

    pub fn desk() -> Self {
        GrmConfig { d_model: 64, heads: 4, layers: 2, d_ff: 128 }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.heads == 0 || self.d_model % self.heads != 0 {
            errs.push(format!("d_model {} must be a positive multiple of heads {}", self.d_model, self.heads));
        }
        if self.layers == 0 {
            errs.push("layers must be at least 1".into());
        }
        if self.d_ff == 0 {
            errs.push("d_ff must be at least 1".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

impl Default for GrmConfig {
    fn default() -> Self {
        GrmConfig::full()
    }
}

/// Right-padded token batch; `mask[b * len + t]` is false on padding.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqBatch {
    pub tokens: Vec<usize>,
    pub mask: Vec<bool>,
    pub batch: usize,
    pub len: usize,
}

impl SeqBatch {
    pub fn new<S: AsRef<[usize]>>(seqs: &[S]) -> Result<SeqBatch> {
        if seqs.is_empty() || seqs.iter().any(|s| s.as_ref().is_empty()) {
            return Err(Error::InvalidArgument("empty sequence in batch".into()));
        }
        let len = seqs.iter().map(|s| s.as_ref().len()).max().unwrap_or(0);
        let mut tokens = vec![PAD; seqs.len() * len];
        let mut mask = vec![false; seqs.len() * len];
        for (b, s) in seqs.iter().enumerate() {
            let s = s.as_ref();
            tokens[b * len..b * len + s.len()].copy_from_slice(s);
            mask[b * len..b * len + s.len()].iter_mut().for_each(|m| *m = true);
        }
        Ok(SeqBatch { tokens, mask, batch: seqs.len(), len })
    }

    /// Row `b` of the result is row `rows[b]` of `self`.
    pub fn select(&self, rows: &[usize]) -> SeqBatch {
        let mut tokens = Vec::with_capacity(rows.len() * self.len);
        let mut mask = Vec::with_capacity(rows.len() * self.len);
        for &r in rows {
            tokens.extend_from_slice(&self.tokens[r * self.len..(r + 1) * self.len]);
            mask.extend_from_slice(&self.mask[r * self.len..(r + 1) * self.len]);
        }
        SeqBatch { tokens, mask, batch: rows.len(), len: self.len }
    }

    /// Flat row indices of the non-padding positions, per sequence.
    pub fn valid_rows(&self) -> Vec<Vec<usize>> {
        (0..self.batch)
            .map(|b| (b * self.len..(b + 1) * self.len).filter(|&i| self.mask[i]).collect())
            .collect()
    }
}

/// Sinusoidal encodings for positions `0..len`, tiled `batch` times.
pub fn positional_encoding(batch: usize, len: usize, d: usize) -> Tensor {
    let mut one = vec![0.0f32; len * d];
    for pos in 0..len {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10_000f64.powf(2.0 * i as f64 / d as f64);
            one[pos * d + 2 * i] = angle.sin() as f32;
            one[pos * d + 2 * i + 1] = angle.cos() as f32;
        }
    }
    let data = one.repeat(batch);
    Tensor::matrix(batch * len, d, data).expect("sized above")
}

#[derive(Clone, Debug)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Clone, Debug)]
struct Attn {
    q: ParamId,
    k: ParamId,
    v: ParamId,
    o: ParamId,
}

#[derive(Clone, Debug)]
struct Ffn {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug)]
struct EncLayer {
    ln1: Norm,
    attn: Attn,
    ln2: Norm,
    ffn: Ffn,
}

#[derive(Clone, Debug)]
struct DecLayer {
    ln1: Norm,
    self_attn: Attn,
    ln2: Norm,
    cross: Attn,
    ln3: Norm,
    ffn: Ffn,
}

struct Builder {
    store: ParamStore,
    seeds: SeedStream,
    d: usize,
}

impl Builder {
    fn linear(&mut self, name: String, fan_in: usize, fan_out: usize) -> ParamId {
        let w = xavier_uniform(fan_in, fan_out, &mut self.seeds.rng());
        self.store.add(name, w)
    }

    fn zeros(&mut self, name: String, n: usize) -> ParamId {
        self.store.add(name, Tensor::zeros(&[1, n]))
    }

    fn norm(&mut self, name: &str) -> Norm {
        let gamma = self.store.add(format!("{name}.gamma"), Tensor::full(&[1, self.d], 1.0));
        let beta = self.zeros(format!("{name}.beta"), self.d);
        Norm { gamma, beta }
    }

    fn attn(&mut self, name: &str) -> Attn {
        let d = self.d;
        Attn {
            q: self.linear(format!("{name}.q"), d, d),
            k: self.linear(format!("{name}.k"), d, d),
            v: self.linear(format!("{name}.v"), d, d),
            o: self.linear(format!("{name}.o"), d, d),
        }
    }

    fn ffn(&mut self, name: &str, d_ff: usize) -> Ffn {
        let d = self.d;
        Ffn {
            w1: self.linear(format!("{name}.w1"), d, d_ff),
            b1: self.zeros(format!("{name}.b1"), d_ff),
            w2: self.linear(format!("{name}.w2"), d_ff, d),
            b2: self.zeros(format!("{name}.b2"), d),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CkptHeader {
    kind: String,
    vocab: Vocab,
    config: GrmConfig,
}

/// Pre-norm encoder–decoder transformer over semantic-ID tokens.
#[derive(Clone, Debug)]
pub struct GrmModel {
    pub vocab: Vocab,
    pub config: GrmConfig,
    pub store: ParamStore,
    embed: ParamId,
    enc: Vec<EncLayer>,
    enc_norm: Norm,
    dec: Vec<DecLayer>,
    dec_norm: Norm,
    out_w: ParamId,
    out_b: ParamId,
}

impl GrmModel {
    pub fn new(vocab: Vocab, config: GrmConfig, seed: u64) -> Result<GrmModel> {
        config.validate()?;
        let d = config.d_model;
        let mut b = Builder { store: ParamStore::new(), seeds: SeedStream::new(seed), d };
        let mut rng = b.seeds.rng();
        let table: Vec<f32> = (0..vocab.size() * d).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
        let embed = b.store.add("embed", Tensor::matrix(vocab.size(), d, table)?);
        let enc = (0..config.layers)
            .map(|i| EncLayer {
                ln1: b.norm(&format!("enc.{i}.ln1")),
                attn: b.attn(&format!("enc.{i}.attn")),
                ln2: b.norm(&format!("enc.{i}.ln2")),
                ffn: b.ffn(&format!("enc.{i}.ffn"), config.d_ff),
            })
            .collect();
        let enc_norm = b.norm("enc.norm");
        let dec = (0..config.layers)
            .map(|i| DecLayer {
                ln1: b.norm(&format!("dec.{i}.ln1")),
                self_attn: b.attn(&format!("dec.{i}.self")),
                ln2: b.norm(&format!("dec.{i}.ln2")),
                cross: b.attn(&format!("dec.{i}.cross")),
                ln3: b.norm(&format!("dec.{i}.ln3")),
                ffn: b.ffn(&format!("dec.{i}.ffn"), config.d_ff),
            })
            .collect();
        let dec_norm = b.norm("dec.norm");
        let out_w = b.linear("out.w".into(), d, vocab.size());
        let out_b = b.zeros("out.b".into(), vocab.size());
        Ok(GrmModel { vocab, config, store: b.store, embed, enc, enc_norm, dec, dec_norm, out_w, out_b })
    }

    /// Id of the output projection weight `[d_model, vocab]`.
    pub fn output_weight(&self) -> ParamId {
        self.out_w
    }

    pub fn output_bias(&self) -> ParamId {
        self.out_b
    }

    pub fn embedding_table(&self) -> ParamId {
        self.embed
    }

    fn norm(&self, g: &mut Graph, x: Var, n: &Norm) -> Result<Var> {
        let gamma = g.param(&self.store, n.gamma);
        let beta = g.param(&self.store, n.beta);
        g.layer_norm(x, gamma, beta)
    }

    fn attend(&self, g: &mut Graph, a: &Attn, xq: Var, xkv: Var, spec: Attention) -> Result<Var> {
        let (wq, wk, wv, wo) = (
            g.param(&self.store, a.q),
            g.param(&self.store, a.k),
            g.param(&self.store, a.v),
            g.param(&self.store, a.o),
        );
        let q = g.matmul(xq, wq)?;
        let k = g.matmul(xkv, wk)?;
        let v = g.matmul(xkv, wv)?;
        let h = g.attention(q, k, v, spec)?;
        g.matmul(h, wo)
    }

    /// Like `attend`, but keys and values are projected before `replicate`
    /// (if given) tiles them across the batch.
    fn cross_attend(
        &self,
        g: &mut Graph,
        a: &Attn,
        xq: Var,
        memory: Var,
        replicate: Option<&Vec<usize>>,
        spec: Attention,
    ) -> Result<Var> {
        let (wq, wk, wv, wo) = (
            g.param(&self.store, a.q),
            g.param(&self.store, a.k),
            g.param(&self.store, a.v),
            g.param(&self.store, a.o),
        );
        let q = g.matmul(xq, wq)?;
        let mut k = g.matmul(memory, wk)?;
        let mut v = g.matmul(memory, wv)?;
        if let Some(rows) = replicate {
            k = g.gather_rows(k, rows)?;
            v = g.gather_rows(v, rows)?;
        }
        let h = g.attention(q, k, v, spec)?;
        g.matmul(h, wo)
    }

    fn feed_forward(&self, g: &mut Graph, f: &Ffn, x: Var) -> Result<Var> {
        let (w1, b1, w2, b2) = (
            g.param(&self.store, f.w1),
            g.param(&self.store, f.b1),
            g.param(&self.store, f.w2),
            g.param(&self.store, f.b2),
        );
        let h = g.matmul(x, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.relu(h);
        let h = g.matmul(h, w2)?;
        g.add_row(h, b2)
    }

    fn embed(&self, g: &mut Graph, s: &SeqBatch) -> Result<Var> {
        if let Some(&bad) = s.tokens.iter().find(|&&t| t >= self.vocab.size()) {
            return Err(Error::InvalidArgument(format!("token {bad} outside vocabulary of {}", self.vocab.size())));
        }
        let table = g.param(&self.store, self.embed);
        let x = g.embedding(table, &s.tokens)?;
        let pe = g.constant(positional_encoding(s.batch, s.len, self.config.d_model));
        g.add(x, pe)
    }

    /// Encoder states `[batch * len, d_model]`.
    pub fn encode(&self, g: &mut Graph, src: &SeqBatch) -> Result<Var> {
        let mut x = self.embed(g, src)?;
        for layer in &self.enc {
            let h = self.norm(g, x, &layer.ln1)?;
            let spec = Attention {
                batch: src.batch,
                q_len: src.len,
                k_len: src.len,
                heads: self.config.heads,
                causal: false,
                key_mask: Some(src.mask.clone()),
            };
            let a = self.attend(g, &layer.attn, h, h, spec)?;
            x = g.add(x, a)?;
            let h = self.norm(g, x, &layer.ln2)?;
            let f = self.feed_forward(g, &layer.ffn, h)?;
            x = g.add(x, f)?;
        }
        self.norm(g, x, &self.enc_norm)
    }

    /// Next-token logits `[batch * len, vocab]` for decoder inputs `tgt`
    /// attending to `memory` (encoder states laid out as `src`). A single
    /// encoded sequence is shared by every decoder row.
    pub fn decode(&self, g: &mut Graph, memory: Var, src: &SeqBatch, tgt: &SeqBatch) -> Result<Var> {
        if src.batch != tgt.batch && src.batch != 1 {
            return Err(Error::InvalidArgument(format!(
                "decoder batch {} does not match encoder batch {}",
                tgt.batch, src.batch
            )));
        }
        let shared = src.batch != tgt.batch;
        let mem_mask = if shared { src.mask.repeat(tgt.batch) } else { src.mask.clone() };
        let mem_rows: Vec<usize> = if shared { (0..tgt.batch).flat_map(|_| 0..src.len).collect() } else { Vec::new() };
        let mut x = self.embed(g, tgt)?;
        for layer in &self.dec {
            let h = self.norm(g, x, &layer.ln1)?;
            let spec = Attention {
                batch: tgt.batch,
                q_len: tgt.len,
                k_len: tgt.len,
                heads: self.config.heads,
                causal: true,
                key_mask: None,
            };
            let a = self.attend(g, &layer.self_attn, h, h, spec)?;
            x = g.add(x, a)?;
            let h = self.norm(g, x, &layer.ln2)?;
            let spec = Attention {
                batch: tgt.batch,
                q_len: tgt.len,
                k_len: src.len,
                heads: self.config.heads,
                causal: false,
                key_mask: Some(mem_mask.clone()),
            };
            let a = self.cross_attend(g, &layer.cross, h, memory, shared.then_some(&mem_rows), spec)?;
            x = g.add(x, a)?;
            let h = self.norm(g, x, &layer.ln3)?;
            let f = self.feed_forward(g, &layer.ffn, h)?;
            x = g.add(x, f)?;
        }
        let h = self.norm(g, x, &self.dec_norm)?;
        let w = g.param(&self.store, self.out_w);
        let b = g.param(&self.store, self.out_b);
        let logits = g.matmul(h, w)?;
        g.add_row(logits, b)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::to_string(&CkptHeader {
            kind: CKPT_KIND.to_string(),
            vocab: self.vocab,
            config: self.config.clone(),
        })?;
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.store
            .write_to(BufWriter::new(file), &header)
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<GrmModel> {
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
        let mut model = GrmModel::new(header.vocab, header.config, 0)?;
        model
            .store
            .assign_from(&store)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        Ok(model)
    }
}

/// Decoder inputs `[BOS, y_1 … y_{n-1}]` for targets `y`.
pub fn shift_right(y: &[usize]) -> Vec<usize> {
    let mut d = Vec::with_capacity(y.len());
    d.push(BOS);
    d.extend_from_slice(&y[..y.len().saturating_sub(1)]);
    d
}

/// Teacher-forced logits for a batch of examples, with per-row targets
/// (`None` on padding).
pub fn teacher_forced_logits(
    g: &mut Graph,
    model: &GrmModel,
    examples: &[&TrainingExample],
) -> Result<(Var, Vec<Option<usize>>)> {
    if examples.iter().any(|e| e.y.is_empty()) {
        return Err(Error::InvalidArgument("training example with an empty target".into()));
    }
    let src = SeqBatch::new(&examples.iter().map(|e| e.x.as_slice()).collect::<Vec<_>>())?;
    let dec_in: Vec<Vec<usize>> = examples.iter().map(|e| shift_right(&e.y)).collect();
    let tgt = SeqBatch::new(&dec_in)?;
    let mut targets = vec![None; tgt.batch * tgt.len];
    for (b, e) in examples.iter().enumerate() {
        for (t, &y) in e.y.iter().enumerate() {
            targets[b * tgt.len + t] = Some(y);
        }
    }
    let memory = model.encode(g, &src)?;
    let logits = model.decode(g, memory, &src, &tgt)?;
    Ok((logits, targets))
}

/// Mean over target tokens of `−log P(y_t | y_<t, x)`.
pub fn seq2seq_loss(g: &mut Graph, model: &GrmModel, examples: &[&TrainingExample]) -> Result<Var> {
    let (logits, targets) = teacher_forced_logits(g, model, examples)?;
    g.cross_entropy(logits, &targets)
}

/// Masked mean of encoder states over each item's ID tokens, per modality,
/// as `(e_t, e_v)`.
pub fn pooled_item_states(
    g: &mut Graph,
    model: &GrmModel,
    items: &[usize],
    ids: &SemanticIds,
) -> Result<(Var, Var)> {
    let mut pooled = Vec::with_capacity(2);
    for m in Modality::BOTH {
        let codes = ids.get(m);
        let seqs = items
            .iter()
            .map(|&i| {
                let c = codes
                    .get(i)
                    .ok_or_else(|| Error::Data(format!("item index {i} has no semantic ID")))?;
                model.vocab.item_tokens(m, c)
            })
            .collect::<Result<Vec<_>>>()?;
        let src = SeqBatch::new(&seqs)?;
        let h = model.encode(g, &src)?;
        pooled.push(g.mean_pool(h, src.valid_rows())?);
    }
    Ok((pooled[0], pooled[1]))
}

/// Symmetric in-batch InfoNCE between the pooled text-ID and vision-ID
/// encodings of the same items.
pub fn implicit_align_loss(g: &mut Graph, model: &GrmModel, items: &[usize], ids: &SemanticIds, tau: f32) -> Result<Var> {
    if items.len() < 2 {
        warn!("implicit alignment on a batch of {} item(s) has no negatives; using 0", items.len());
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let (e_t, e_v) = pooled_item_states(g, model, items, ids)?;
    symmetric_info_nce(g, e_t, e_v, tau)
}
