use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::vocab::{Task, Vocab, EOS};
use crate::data::{leave_one_out, InteractionLog, Modality};
use crate::error::{Error, Result};
use crate::quantizer::SemanticIds;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub task: Task,
    pub x: Vec<usize>,
    pub y: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskOptions {
    /// Most recent items kept in a history.
    pub window: usize,
    /// Emit the four cross-modal alignment tasks.
    pub explicit: bool,
}

impl Default for TaskOptions {
    fn default() -> Self {
        TaskOptions { window: 20, explicit: true }
    }
}

/// Item sequences as rows of `ids`.
pub fn index_sequences(log: &InteractionLog, ids: &SemanticIds) -> Result<Vec<Vec<usize>>> {
    let pos: std::collections::HashMap<&str, usize> =
        ids.items.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    log.users
        .iter()
        .map(|u| {
            u.items
                .iter()
                .map(|it| {
                    pos.get(it.as_str())
                        .copied()
                        .ok_or_else(|| Error::Data(format!("item `{it}` (user `{}`) has no semantic ID", u.user)))
                })
                .collect()
        })
        .collect()
}

/// Task tag followed by the source-modality IDs of the last `window` items.
pub fn history_tokens(vocab: &Vocab, ids: &SemanticIds, task: Task, history: &[usize], window: usize) -> Result<Vec<usize>> {
    let start = history.len().saturating_sub(window);
    let codes = ids.get(task.source());
    let mut x = Vec::with_capacity(1 + (history.len() - start) * vocab.levels);
    x.push(task.tag());
    for &item in &history[start..] {
        let c = codes
            .get(item)
            .ok_or_else(|| Error::Data(format!("item index {item} has no semantic ID")))?;
        x.extend(vocab.item_tokens(task.source(), c)?);
    }
    Ok(x)
}

/// An item's ID tokens followed by EOS.
pub fn target_tokens(vocab: &Vocab, ids: &SemanticIds, m: Modality, item: usize) -> Result<Vec<usize>> {
    let c = ids
        .get(m)
        .get(item)
        .ok_or_else(|| Error::Data(format!("item index {item} has no semantic ID")))?;
    let mut y = vocab.item_tokens(m, c)?;
    y.push(EOS);
    Ok(y)
}

/// Training examples from the train split of every sequence: next-item
/// tasks for each prefix, and with `explicit` the sequence-level and
/// item-level cross-modal tasks.
pub fn build_tasks(seqs: &[Vec<usize>], ids: &SemanticIds, vocab: &Vocab, opts: TaskOptions) -> Result<Vec<TrainingExample>> {
    if ids.levels() != vocab.levels || ids.text.len() != ids.vision.len() {
        return Err(Error::Data(format!(
            "semantic IDs ({} levels) do not match the vocabulary ({} levels)",
            ids.levels(),
            vocab.levels
        )));
    }
    let seq_tasks: &[Task] = if opts.explicit {
        &[Task::RecT, Task::RecV, Task::SeqT2V, Task::SeqV2T]
    } else {
        &[Task::RecT, Task::RecV]
    };
    let mut out = Vec::new();
    for seq in seqs {
        let Some(split) = leave_one_out(seq) else { continue };
        let train = split.train;
        for j in 1..train.len() {
            for &task in seq_tasks {
                out.push(TrainingExample {
                    task,
                    x: history_tokens(vocab, ids, task, &train[..j], opts.window)?,
                    y: target_tokens(vocab, ids, task.target(), train[j])?,
                });
            }
        }
    }
    if opts.explicit {
        for item in 0..ids.items.len() {
            for task in [Task::ItemT2V, Task::ItemV2T] {
                out.push(TrainingExample {
                    task,
                    x: history_tokens(vocab, ids, task, &[item], 1)?,
                    y: target_tokens(vocab, ids, task.target(), item)?,
                });
            }
        }
    }
    Ok(out)
}

pub fn write_tasks_jsonl(examples: &[TrainingExample], path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for ex in examples {
        serde_json::to_writer(&mut w, ex)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_tasks_jsonl(path: &Path) -> Result<Vec<TrainingExample>> {
    let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    body.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Data(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}
