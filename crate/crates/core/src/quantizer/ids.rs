use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{codewords_by_distance, residual_quantize, QuantizeTrace, QuantizerParams};
use crate::data::{check_same_items, EmbeddingTable, Modality};
use crate::error::{Error, Result};

/// Quantizes every row of `table` with the current parameters.
pub fn quantize_table(params: &QuantizerParams, table: &EmbeddingTable) -> Result<Vec<QuantizeTrace>> {
    let z = params.latents(table)?;
    let books = params.codebooks(table.modality());
    Ok((0..z.rows()).map(|i| residual_quantize(z.row_slice(i), &books)).collect())
}

/// Final and pre-resolution semantic IDs, indexed like `items`.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticIds {
    pub items: Vec<String>,
    pub text: Vec<Vec<usize>>,
    pub vision: Vec<Vec<usize>>,
    pub raw_text: Option<Vec<Vec<usize>>>,
    pub raw_vision: Option<Vec<Vec<usize>>>,
}

impl SemanticIds {
    pub fn levels(&self) -> usize {
        self.text.first().map_or(0, |c| c.len())
    }

    pub fn get(&self, m: Modality) -> &[Vec<usize>] {
        match m {
            Modality::Text => &self.text,
            Modality::Vision => &self.vision,
        }
    }

    pub fn raw(&self, m: Modality) -> Option<&[Vec<usize>]> {
        match m {
            Modality::Text => self.raw_text.as_deref(),
            Modality::Vision => self.raw_vision.as_deref(),
        }
    }

    pub fn position(&self, item: &str) -> Option<usize> {
        self.items.iter().position(|i| i == item)
    }
}

/// `"<a_3><b_0>…"` for text, `"<A_3><B_0>…"` for vision.
pub fn sid_string(codes: &[usize], m: Modality) -> String {
    let base = match m {
        Modality::Text => b'a',
        Modality::Vision => b'A',
    };
    codes
        .iter()
        .enumerate()
        .map(|(l, c)| format!("<{}_{c}>", (base + l as u8) as char))
        .collect()
}

/// Makes full IDs unique. Within each group of items sharing a raw ID the
/// item with the smallest `closeness` keeps it (ties to the lower index).
/// Every other item, in index order, takes the first last-level codeword in
/// `last_level_order(item)` whose full ID is not yet taken.
pub fn resolve_conflicts(
    raw: &[Vec<usize>],
    closeness: &[f32],
    codebook_size: usize,
    mut last_level_order: impl FnMut(usize) -> Vec<usize>,
) -> Result<Vec<Vec<usize>>> {
    let n = raw.len();
    let levels = raw.first().map_or(0, |c| c.len());
    if levels == 0 {
        return Ok(raw.to_vec());
    }
    let space = (codebook_size as f64).powi(levels as i32);
    if space < n as f64 {
        return Err(Error::InvalidArgument(format!(
            "ID space too small: {codebook_size}^{levels} < {n} items"
        )));
    }
    let mut groups: BTreeMap<&[usize], Vec<usize>> = BTreeMap::new();
    for (i, code) in raw.iter().enumerate() {
        groups.entry(code.as_slice()).or_default().push(i);
    }
    let mut losers = Vec::new();
    for members in groups.values().filter(|m| m.len() > 1) {
        let keeper = *members
            .iter()
            .min_by(|&&a, &&b| closeness[a].total_cmp(&closeness[b]).then(a.cmp(&b)))
            .expect("non-empty group");
        losers.extend(members.iter().copied().filter(|&i| i != keeper));
    }
    losers.sort_unstable();

    let mut taken: HashSet<Vec<usize>> = groups.keys().map(|k| k.to_vec()).collect();
    let mut out = raw.to_vec();
    for i in losers {
        let mut id = raw[i].clone();
        let prefix = &raw[i][..levels - 1];
        let choice = last_level_order(i)
            .into_iter()
            .find(|&k| {
                id[levels - 1] = k;
                !taken.contains(&id)
            })
            .ok_or_else(|| {
                Error::Data(format!(
                    "conflict resolution exhausted all {codebook_size} last-level codewords for prefix {prefix:?}"
                ))
            })?;
        id[levels - 1] = choice;
        taken.insert(id.clone());
        out[i] = id;
    }
    Ok(out)
}

fn assign_one(params: &QuantizerParams, table: &EmbeddingTable) -> Result<(Vec<Vec<usize>>, Vec<Vec<usize>>)> {
    let m = table.modality();
    let z = params.latents(table)?;
    let traces = quantize_table(params, table)?;
    let closeness: Vec<f32> = traces
        .iter()
        .enumerate()
        .map(|(i, t)| {
            z.row_slice(i)
                .iter()
                .zip(&t.zhat)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f32>()
                .sqrt()
        })
        .collect();
    let raw: Vec<Vec<usize>> = traces.iter().map(|t| t.codes.clone()).collect();
    let last = params.arch.levels - 1;
    let book = params.codebook(m, last);
    let resolved = resolve_conflicts(&raw, &closeness, params.arch.codebook_size, |i| {
        codewords_by_distance(&traces[i].residuals[last], book)
    })?;
    Ok((raw, resolved))
}

/// Raw IDs by residual quantization, then conflict resolution per modality.
pub fn assign_semantic_ids(params: &QuantizerParams, text: &EmbeddingTable, vision: &EmbeddingTable) -> Result<SemanticIds> {
    check_same_items(text, vision)?;
    let vision = vision.reordered(text.ids())?;
    let (raw_text, text_ids) = assign_one(params, text)?;
    let (raw_vision, vision_ids) = assign_one(params, &vision)?;
    Ok(SemanticIds {
        items: text.ids().to_vec(),
        text: text_ids,
        vision: vision_ids,
        raw_text: Some(raw_text),
        raw_vision: Some(raw_vision),
    })
}

#[derive(Serialize, Deserialize)]
struct IdRow {
    item: String,
    text_sid: Vec<usize>,
    vision_sid: Vec<usize>,
    text_str: String,
    vision_str: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    raw_text_sid: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    raw_vision_sid: Option<Vec<usize>>,
}

pub fn write_ids_jsonl(ids: &SemanticIds, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for (i, item) in ids.items.iter().enumerate() {
        let row = IdRow {
            item: item.clone(),
            text_sid: ids.text[i].clone(),
            vision_sid: ids.vision[i].clone(),
            text_str: sid_string(&ids.text[i], Modality::Text),
            vision_str: sid_string(&ids.vision[i], Modality::Vision),
            raw_text_sid: ids.raw_text.as_ref().map(|r| r[i].clone()),
            raw_vision_sid: ids.raw_vision.as_ref().map(|r| r[i].clone()),
        };
        serde_json::to_writer(&mut w, &row)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_ids_jsonl(path: &Path) -> Result<SemanticIds> {
    let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut ids = SemanticIds {
        items: Vec::new(),
        text: Vec::new(),
        vision: Vec::new(),
        raw_text: Some(Vec::new()),
        raw_vision: Some(Vec::new()),
    };
    for (lineno, line) in body.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let row: IdRow = serde_json::from_str(line)
            .map_err(|e| Error::Data(format!("{} line {}: {e}", path.display(), lineno + 1)))?;
        if row.text_sid.len() != row.vision_sid.len()
            || ids.text.first().is_some_and(|f| f.len() != row.text_sid.len())
        {
            return Err(Error::Data(format!("{} line {}: inconsistent ID length", path.display(), lineno + 1)));
        }
        ids.items.push(row.item);
        ids.text.push(row.text_sid);
        ids.vision.push(row.vision_sid);
        match row.raw_text_sid {
            Some(r) => ids.raw_text.as_mut().map(|v| v.push(r)),
            None => ids.raw_text.take().map(|_| ()),
        };
        match row.raw_vision_sid {
            Some(r) => ids.raw_vision.as_mut().map(|v| v.push(r)),
            None => ids.raw_vision.take().map(|_| ()),
        };
    }
    if ids.items.is_empty() {
        return Err(Error::Data(format!("{}: zero items", path.display())));
    }
    Ok(ids)
}
