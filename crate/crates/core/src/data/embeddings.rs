use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"EMB1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Vision,
}

impl Modality {
    pub const BOTH: [Modality; 2] = [Modality::Text, Modality::Vision];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Vision => "vision",
        }
    }

    pub fn other(self) -> Modality {
        match self {
            Modality::Text => Modality::Vision,
            Modality::Vision => Modality::Text,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Item embeddings of one modality, stored as a row-major `N × dim` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    modality: Modality,
    ids: Vec<String>,
    dim: usize,
    values: Vec<f32>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct JsonRow {
    item: String,
    vec: Vec<f32>,
}

impl EmbeddingTable {
    /// Validates and builds a table: at least one item, no duplicate ids,
    /// every value finite, `values.len() == ids.len() * dim`.
    pub fn new(modality: Modality, ids: Vec<String>, dim: usize, values: Vec<f32>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Data(format!("{modality} embeddings: zero items")));
        }
        if dim == 0 {
            return Err(Error::Data(format!("{modality} embeddings: zero dimension")));
        }
        if values.len() != ids.len() * dim {
            return Err(Error::Data(format!(
                "{modality} embeddings: row-length mismatch ({} values for {} items of dim {dim})",
                values.len(),
                ids.len()
            )));
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::Data(format!("{modality} embeddings: duplicate item id `{id}`")));
            }
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "{modality} embeddings: non-finite value for item `{}`",
                ids[pos / dim]
            )));
        }
        Ok(EmbeddingTable {
            modality,
            ids,
            dim,
            values,
            index,
        })
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn lookup(&self, id: &str) -> Option<&[f32]> {
        self.position(id).map(|i| self.row(i))
    }

    /// The rows at `idx` as an `[idx.len(), dim]` tensor.
    pub fn gather(&self, idx: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Tensor::new(vec![idx.len(), self.dim], data).expect("gathered rows have table width")
    }

    /// Reorders rows to follow `order` (item ids), which must be a permutation
    /// of this table's ids.
    pub fn reordered(&self, order: &[String]) -> Result<EmbeddingTable> {
        if order.len() != self.len() {
            return Err(Error::Data(format!(
                "{} embeddings cover {} items, expected {}",
                self.modality,
                self.len(),
                order.len()
            )));
        }
        let mut values = Vec::with_capacity(self.values.len());
        for id in order {
            let row = self.lookup(id).ok_or_else(|| {
                Error::Data(format!("item `{id}` missing from {} embeddings", self.modality))
            })?;
            values.extend_from_slice(row);
        }
        EmbeddingTable::new(self.modality, order.to_vec(), self.dim, values)
    }

    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut emit = || -> std::io::Result<()> {
            w.write_all(MAGIC)?;
            w.write_all(&(self.len() as u32).to_le_bytes())?;
            w.write_all(&(self.dim as u32).to_le_bytes())?;
            for (i, id) in self.ids.iter().enumerate() {
                w.write_all(&(id.len() as u32).to_le_bytes())?;
                w.write_all(id.as_bytes())?;
                for v in self.row(i) {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            w.flush()
        };
        emit().map_err(|e| Error::io(path, e))
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for (i, id) in self.ids.iter().enumerate() {
            let row = JsonRow {
                item: id.clone(),
                vec: self.row(i).to_vec(),
            };
            serde_json::to_writer(&mut w, &row)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    fn parse_binary(modality: Modality, bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 4 };
        let n = cur.u32()? as usize;
        let dim = cur.u32()? as usize;
        let mut ids = Vec::with_capacity(n);
        let mut values = Vec::with_capacity(n * dim);
        for _ in 0..n {
            let len = cur.u32()? as usize;
            let id = std::str::from_utf8(cur.take(len)?)
                .map_err(|e| Error::Data(format!("invalid utf-8 item id: {e}")))?
                .to_string();
            for c in cur.take(dim * 4)?.chunks_exact(4) {
                values.push(f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
            }
            ids.push(id);
        }
        if cur.pos != bytes.len() {
            return Err(Error::Data(format!(
                "{} trailing bytes after {n} embedding rows",
                bytes.len() - cur.pos
            )));
        }
        EmbeddingTable::new(modality, ids, dim, values)
    }

    fn parse_jsonl(modality: Modality, bytes: &[u8]) -> Result<Self> {
        let mut ids = Vec::new();
        let mut values = Vec::new();
        let mut dim = None;
        for (lineno, line) in BufReader::new(bytes).lines().enumerate() {
            let line = line.map_err(|e| Error::Data(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let row: JsonRow = serde_json::from_str(&line)
                .map_err(|e| Error::Data(format!("line {}: {e}", lineno + 1)))?;
            match dim {
                None => dim = Some(row.vec.len()),
                Some(d) if d != row.vec.len() => {
                    return Err(Error::Data(format!(
                        "line {}: row-length mismatch ({} vs {d})",
                        lineno + 1,
                        row.vec.len()
                    )))
                }
                _ => {}
            }
            ids.push(row.item);
            values.extend(row.vec);
        }
        EmbeddingTable::new(modality, ids, dim.unwrap_or(0), values)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Data("truncated embedding file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Loads embeddings from the binary format (detected by its `EMB1` magic)
/// or from JSON lines.
pub fn load_embeddings(path: &Path, modality: Modality) -> Result<EmbeddingTable> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.is_empty() {
        return Err(Error::Data(format!("{}: zero items", path.display())));
    }
    if bytes.starts_with(MAGIC) {
        EmbeddingTable::parse_binary(modality, &bytes)
    } else if bytes.first() == Some(&b'{') || bytes.iter().all(|b| b.is_ascii_whitespace()) {
        EmbeddingTable::parse_jsonl(modality, &bytes)
    } else {
        Err(Error::Data(format!("{}: magic mismatch (expected EMB1 or JSON lines)", path.display())))
    }
}

/// Both tables must cover exactly the same item set.
pub fn check_same_items(a: &EmbeddingTable, b: &EmbeddingTable) -> Result<()> {
    if a.len() != b.len() || a.ids().iter().any(|id| b.position(id).is_none()) {
        return Err(Error::Data(format!(
            "{} and {} embeddings cover different item sets",
            a.modality(),
            b.modality()
        )));
    }
    Ok(())
}
