use crate::data::Modality;
use crate::error::{Error, Result};
use crate::grm::Vocab;
use crate::quantizer::SemanticIds;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
struct Node {
    /// `(token, child)` sorted by token.
    children: Vec<(usize, usize)>,
    item: Option<usize>,
}

/// Prefix tree over the token sequences of one modality's semantic IDs.
/// Terminals carry the item index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdTrie {
    nodes: Vec<Node>,
    depth: usize,
    items: usize,
}

impl IdTrie {
    pub const ROOT: usize = 0;

    /// Builds the trie from per-item token sequences of equal length.
    pub fn from_sequences(seqs: &[Vec<usize>]) -> Result<IdTrie> {
        let depth = seqs.first().map_or(0, |s| s.len());
        let mut trie = IdTrie { nodes: vec![Node::default()], depth, items: 0 };
        for (item, seq) in seqs.iter().enumerate() {
            if seq.len() != depth || depth == 0 {
                return Err(Error::InvalidArgument(format!(
                    "ID of item {item} has {} tokens, expected {depth}",
                    seq.len()
                )));
            }
            let mut node = Self::ROOT;
            for &tok in seq {
                node = match trie.child(node, tok) {
                    Some(c) => c,
                    None => {
                        let c = trie.nodes.len();
                        trie.nodes.push(Node::default());
                        let kids = &mut trie.nodes[node].children;
                        let at = kids.partition_point(|&(t, _)| t < tok);
                        kids.insert(at, (tok, c));
                        c
                    }
                };
            }
            if let Some(prev) = trie.nodes[node].item {
                return Err(Error::Data(format!("items {prev} and {item} share the same semantic ID")));
            }
            trie.nodes[node].item = Some(item);
            trie.items += 1;
        }
        Ok(trie)
    }

    pub fn child(&self, node: usize, token: usize) -> Option<usize> {
        let kids = &self.nodes[node].children;
        kids.binary_search_by_key(&token, |&(t, _)| t).ok().map(|i| kids[i].1)
    }

    pub fn children(&self, node: usize) -> &[(usize, usize)] {
        &self.nodes[node].children
    }

    pub fn item(&self, node: usize) -> Option<usize> {
        self.nodes[node].item
    }

    /// Item whose ID is exactly `tokens`.
    pub fn lookup(&self, tokens: &[usize]) -> Option<usize> {
        let mut node = Self::ROOT;
        for &t in tokens {
            node = self.child(node, t)?;
        }
        self.item(node)
    }

    /// Number of terminals.
    pub fn len(&self) -> usize {
        self.items
    }

    pub fn is_empty(&self) -> bool {
        self.items == 0
    }

    /// Tokens per ID.
    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }
}

/// Trie over one modality's IDs, with terminals indexed like `ids.items`.
pub fn build_trie(vocab: &Vocab, ids: &SemanticIds, m: Modality) -> Result<IdTrie> {
    let seqs = ids
        .get(m)
        .iter()
        .map(|c| vocab.item_tokens(m, c))
        .collect::<Result<Vec<_>>>()?;
    IdTrie::from_sequences(&seqs)
}
