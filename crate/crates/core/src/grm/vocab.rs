use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Modality;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
const TAG_BASE: usize = 3;
/// First semantic-ID token; everything below is special or a task tag.
pub const FIRST_ID_TOKEN: usize = TAG_BASE + Task::ALL.len();

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "rec-t")]
    RecT,
    #[serde(rename = "rec-v")]
    RecV,
    #[serde(rename = "item-t2v")]
    ItemT2V,
    #[serde(rename = "item-v2t")]
    ItemV2T,
    #[serde(rename = "seq-t2v")]
    SeqT2V,
    #[serde(rename = "seq-v2t")]
    SeqV2T,
}

impl Task {
    pub const ALL: [Task; 6] = [Task::RecT, Task::RecV, Task::ItemT2V, Task::ItemV2T, Task::SeqT2V, Task::SeqV2T];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::RecT => "rec-t",
            Task::RecV => "rec-v",
            Task::ItemT2V => "item-t2v",
            Task::ItemV2T => "item-v2t",
            Task::SeqT2V => "seq-t2v",
            Task::SeqV2T => "seq-v2t",
        }
    }

    pub fn index(self) -> usize {
        Task::ALL.iter().position(|&t| t == self).expect("listed")
    }

    pub fn tag(self) -> usize {
        TAG_BASE + self.index()
    }

    /// Next-item recommendation within one modality.
    pub fn rec(m: Modality) -> Task {
        match m {
            Modality::Text => Task::RecT,
            Modality::Vision => Task::RecV,
        }
    }

    pub fn is_rec(self) -> bool {
        matches!(self, Task::RecT | Task::RecV)
    }

    pub fn source(self) -> Modality {
        match self {
            Task::RecT | Task::ItemT2V | Task::SeqT2V => Modality::Text,
            _ => Modality::Vision,
        }
    }

    pub fn target(self) -> Modality {
        match self {
            Task::RecT | Task::ItemV2T | Task::SeqV2T => Modality::Text,
            _ => Modality::Vision,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Task> {
        Task::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown task `{s}`")))
    }
}

/// Token ids: specials, task tags, then `L·M` text tokens and `L·M` vision
/// tokens, level-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub levels: usize,
    pub codebook_size: usize,
}

impl Vocab {
    pub fn new(levels: usize, codebook_size: usize) -> Result<Vocab> {
        if levels == 0 || levels > 26 || codebook_size == 0 {
            return Err(Error::InvalidArgument(format!(
                "vocabulary needs 1..=26 levels and a non-empty codebook, got L={levels}, M={codebook_size}"
            )));
        }
        Ok(Vocab { levels, codebook_size })
    }

    pub fn size(&self) -> usize {
        FIRST_ID_TOKEN + 2 * self.levels * self.codebook_size
    }

    fn base(&self, m: Modality) -> usize {
        match m {
            Modality::Text => FIRST_ID_TOKEN,
            Modality::Vision => FIRST_ID_TOKEN + self.levels * self.codebook_size,
        }
    }

    pub fn id_token(&self, m: Modality, level: usize, code: usize) -> usize {
        debug_assert!(level < self.levels && code < self.codebook_size);
        self.base(m) + level * self.codebook_size + code
    }

    /// `(modality, level, code)` of a semantic-ID token.
    pub fn id_parts(&self, token: usize) -> Option<(Modality, usize, usize)> {
        if token < FIRST_ID_TOKEN || token >= self.size() {
            return None;
        }
        let off = token - FIRST_ID_TOKEN;
        let per = self.levels * self.codebook_size;
        let m = if off < per { Modality::Text } else { Modality::Vision };
        let off = off % per;
        Some((m, off / self.codebook_size, off % self.codebook_size))
    }

    /// The `L` tokens of one item's ID.
    pub fn item_tokens(&self, m: Modality, codes: &[usize]) -> Result<Vec<usize>> {
        if codes.len() != self.levels {
            return Err(Error::InvalidArgument(format!(
                "semantic ID has {} levels, vocabulary expects {}",
                codes.len(),
                self.levels
            )));
        }
        codes
            .iter()
            .enumerate()
            .map(|(l, &c)| {
                if c < self.codebook_size {
                    Ok(self.id_token(m, l, c))
                } else {
                    Err(Error::InvalidArgument(format!("code {c} outside codebook of size {}", self.codebook_size)))
                }
            })
            .collect()
    }

    pub fn token_str(&self, token: usize) -> Option<String> {
        match token {
            PAD => Some("<pad>".into()),
            BOS => Some("<bos>".into()),
            EOS => Some("<eos>".into()),
            t if t < FIRST_ID_TOKEN => Some(format!("<task:{}>", Task::ALL[t - TAG_BASE])),
            t => self.id_parts(t).map(|(m, l, c)| {
                let base = match m {
                    Modality::Text => b'a',
                    Modality::Vision => b'A',
                };
                format!("<{}_{c}>", (base + l as u8) as char)
            }),
        }
    }

    pub fn token_id(&self, s: &str) -> Option<usize> {
        match s {
            "<pad>" => return Some(PAD),
            "<bos>" => return Some(BOS),
            "<eos>" => return Some(EOS),
            _ => {}
        }
        let inner = s.strip_prefix('<')?.strip_suffix('>')?;
        if let Some(task) = inner.strip_prefix("task:") {
            return task.parse::<Task>().ok().map(Task::tag);
        }
        let (letter, code) = inner.split_once('_')?;
        let mut chars = letter.chars();
        let ch = chars.next()?;
        if chars.next().is_some() || !ch.is_ascii_alphabetic() {
            return None;
        }
        let m = if ch.is_ascii_lowercase() { Modality::Text } else { Modality::Vision };
        let level = (ch.to_ascii_lowercase() as u8 - b'a') as usize;
        let code: usize = code.parse().ok()?;
        (level < self.levels && code < self.codebook_size).then(|| self.id_token(m, level, code))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn surface_forms_round_trip_and_are_unique() {
        let v = Vocab::new(3, 4).unwrap();
        let mut seen = HashSet::new();
        for t in 0..v.size() {
            let s = v.token_str(t).unwrap();
            assert!(seen.insert(s.clone()), "duplicate {s}");
            assert_eq!(v.token_id(&s), Some(t), "{s}");
        }
        assert_eq!(v.token_str(v.size()), None);
        assert_eq!(v.token_id("<d_0>"), None);
        assert_eq!(v.token_id("<a_4>"), None);
    }

    #[test]
    fn modalities_are_disjoint() {
        let v = Vocab::new(2, 8).unwrap();
        let t = v.item_tokens(Modality::Text, &[1, 2]).unwrap();
        let i = v.item_tokens(Modality::Vision, &[1, 2]).unwrap();
        assert!(t.iter().all(|x| !i.contains(x)));
        assert_eq!(v.token_str(t[0]).unwrap(), "<a_1>");
        assert_eq!(v.token_str(i[1]).unwrap(), "<B_2>");
        assert_eq!(v.id_parts(i[1]), Some((Modality::Vision, 1, 2)));
        assert!(v.item_tokens(Modality::Text, &[8, 0]).is_err());
    }

    #[test]
    fn task_names() {
        for t in Task::ALL {
            assert_eq!(t.as_str().parse::<Task>().unwrap(), t);
            assert_eq!(serde_json::to_string(&t).unwrap(), format!("\"{t}\""));
        }
        assert_eq!(Task::SeqT2V.source(), Modality::Text);
        assert_eq!(Task::SeqT2V.target(), Modality::Vision);
    }
}
