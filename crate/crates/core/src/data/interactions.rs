use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use super::EmbeddingTable;
use crate::error::{Error, Result};

/// Shortest sequence for which a leave-one-out split leaves a non-empty
/// training prefix.
pub const MIN_SEQUENCE_LEN: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSequence {
    pub user: String,
    pub items: Vec<String>,
}

/// Leave-one-out view of one time-ordered sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Split<'a, T> {
    pub train: &'a [T],
    pub valid: &'a T,
    pub test: &'a T,
}

/// Last item → test, second-to-last → validation, the rest → train.
pub fn leave_one_out<T>(seq: &[T]) -> Option<Split<'_, T>> {
    if seq.len() < MIN_SEQUENCE_LEN {
        return None;
    }
    let n = seq.len();
    Some(Split {
        train: &seq[..n - 2],
        valid: &seq[n - 2],
        test: &seq[n - 1],
    })
}

/// Per-user, time-ordered interaction sequences.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct InteractionLog {
    pub users: Vec<UserSequence>,
    /// Users dropped at load time for having fewer than three interactions.
    pub skipped_short: usize,
}

impl InteractionLog {
    /// Keeps users with at least [`MIN_SEQUENCE_LEN`] items, counting the rest.
    pub fn from_sequences(seqs: impl IntoIterator<Item = UserSequence>) -> Self {
        let mut log = InteractionLog::default();
        for s in seqs {
            if s.items.len() < MIN_SEQUENCE_LEN {
                log.skipped_short += 1;
            } else {
                log.users.push(s);
            }
        }
        if log.skipped_short > 0 {
            warn!(
                "skipped {} users with fewer than {MIN_SEQUENCE_LEN} interactions",
                log.skipped_short
            );
        }
        log
    }

    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    pub fn average_len(&self) -> f64 {
        if self.users.is_empty() {
            return 0.0;
        }
        self.users.iter().map(|u| u.items.len()).sum::<usize>() as f64 / self.users.len() as f64
    }

    /// Maps every item id to its row in `table`; unknown items are an error.
    pub fn indexed(&self, table: &EmbeddingTable) -> Result<Vec<Vec<usize>>> {
        self.users
            .iter()
            .map(|u| {
                u.items
                    .iter()
                    .map(|id| {
                        table.position(id).ok_or_else(|| {
                            Error::Data(format!(
                                "user `{}` references item `{id}` missing from {} embeddings",
                                u.user,
                                table.modality()
                            ))
                        })
                    })
                    .collect()
            })
            .collect()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for u in &self.users {
            serde_json::to_writer(&mut w, u)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Reads JSON lines `{"user": str, "items": [str, ...]}` in time order.
pub fn load_interactions(path: &Path) -> Result<InteractionLog> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut seqs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let s: UserSequence = serde_json::from_str(line)
            .map_err(|e| Error::Data(format!("{} line {}: {e}", path.display(), lineno + 1)))?;
        seqs.push(s);
    }
    Ok(InteractionLog::from_sequences(seqs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_definition() {
        let s = leave_one_out(&["a", "b", "c", "d"]).unwrap();
        assert_eq!(s.train, &["a", "b"]);
        assert_eq!(*s.valid, "c");
        assert_eq!(*s.test, "d");
        assert!(leave_one_out(&["a", "b"]).is_none());
    }

    #[test]
    fn short_users_are_dropped_and_counted() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("i.jsonl");
        fs::write(
            &p,
            "{\"user\":\"u1\",\"items\":[\"a\",\"b\",\"c\",\"d\"]}\n{\"user\":\"u2\",\"items\":[\"a\",\"b\"]}\n",
        )
        .unwrap();
        let log = load_interactions(&p).unwrap();
        assert_eq!(log.len(), 1);
        assert_eq!(log.skipped_short, 1);
        assert_eq!(log.users[0].user, "u1");
    }

    #[test]
    fn round_trip() {
        let log = InteractionLog::from_sequences(vec![UserSequence {
            user: "u".into(),
            items: vec!["x".into(), "y".into(), "z".into()],
        }]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("i.jsonl");
        log.write_jsonl(&p).unwrap();
        assert_eq!(load_interactions(&p).unwrap(), log);
    }
}
