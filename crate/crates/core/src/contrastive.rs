//! In-batch InfoNCE with dot-product similarity.

use crate::error::Result;
use crate::tensor::{Graph, Var};

/// `−mean_i log softmax(⟨a_i, b_j⟩/τ)_j[target_i]` over anchors with a
/// target. The denominator runs over every row of `others`.
pub fn info_nce(g: &mut Graph, anchors: Var, others: Var, targets: &[Option<usize>], tau: f32) -> Result<Var> {
    let sim = g.matmul_nt(anchors, others)?;
    let logits = g.scale(sim, 1.0 / tau);
    g.cross_entropy(logits, targets)
}

/// `a → b` plus `b → a` InfoNCE where row `i` of one side is the positive
/// for row `i` of the other.
pub fn symmetric_info_nce(g: &mut Graph, a: Var, b: Var, tau: f32) -> Result<Var> {
    let diag: Vec<Option<usize>> = (0..g.value(a).rows()).map(Some).collect();
    let ab = info_nce(g, a, b, &diag, tau)?;
    let ba = info_nce(g, b, a, &diag, tau)?;
    g.add(ab, ba)
}
