//! Training-time attention and loss masks for linearized paragraph trees.
//!
//! The linearization is the prompt followed by the tree's restore order with
//! control tokens kept: node content, `[Fork]` at the end of a node that has
//! children, `[Child]` at the start of every first child. A token sees the
//! prompt, every token of its attention ancestors, and the causal prefix of
//! its own node.

use std::collections::{HashMap, HashSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{AparError, Result};
use crate::token::Token;
use crate::tree::{NodeId, ParagraphTree, SeqId, TokenSource};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinearizedSample {
    pub tokens: Vec<Token>,
    /// Owning node per position; `None` for prompt tokens.
    pub node_of: Vec<Option<NodeId>>,
    pub prompt_len: usize,
}

impl LinearizedSample {
    /// Linearizes any tree whose slices partition the generation, such as a
    /// decoded group (prompt is taken from the root's sequence).
    pub fn from_tree<S: TokenSource + ?Sized>(tree: &ParagraphTree, src: &S) -> Result<Self> {
        let root = tree
            .node(tree.root)
            .ok_or_else(|| AparError::structural(tree.root, "root missing"))?;
        let prompt = src
            .tokens(root.seq)
            .and_then(|t| t.get(..tree.prompt_len))
            .ok_or_else(|| AparError::structural(tree.root, "prompt not available"))?;
        let mut tokens = prompt.to_vec();
        let mut node_of = vec![None; prompt.len()];
        for id in tree.traversal_order()? {
            let slice = tree.slice(src, id)?;
            tokens.extend_from_slice(slice);
            node_of.extend(std::iter::repeat(Some(id)).take(slice.len()));
        }
        Ok(LinearizedSample {
            tokens,
            node_of,
            prompt_len: tree.prompt_len,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// The equivalent single-sequence tree: every node becomes a slice of
    /// sequence 0 at its linearized position.
    pub fn single_sequence_tree(&self, tree: &ParagraphTree) -> Result<ParagraphTree> {
        let mut ranges: HashMap<NodeId, (usize, usize)> = HashMap::new();
        for (i, n) in self.node_of.iter().enumerate() {
            if let Some(n) = n {
                let r = ranges.entry(*n).or_insert((i, i));
                r.1 = i + 1;
            }
        }
        // Empty nodes get a zero-width slice where their traversal turn falls.
        let order = tree.traversal_order()?;
        let mut cursor = self.prompt_len;
        let mut nodes = Vec::with_capacity(tree.nodes.len());
        for id in order {
            let (start, end) = ranges.get(&id).copied().unwrap_or((cursor, cursor));
            cursor = end;
            let src = tree.node(id).expect("traversed node exists");
            nodes.push(crate::tree::ParagraphNode {
                id,
                seq: SeqId(0),
                start,
                end: Some(end),
                first_child: src.first_child,
                next_sibling: src.next_sibling,
            });
        }
        nodes.sort_by_key(|n| n.id);
        Ok(ParagraphTree {
            prompt_len: self.prompt_len,
            root: tree.root,
            nodes,
        })
    }
}

/// Row-major boolean matrix; `allowed[q * n + k]` is true when query `q`
/// may attend to key `k`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    pub n: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn causal(n: usize) -> Self {
        let mut allowed = vec![false; n * n];
        for q in 0..n {
            for k in 0..=q {
                allowed[q * n + k] = true;
            }
        }
        AttentionMask { n, allowed }
    }

    pub fn get(&self, query: usize, key: usize) -> bool {
        self.allowed[query * self.n + key]
    }

    pub fn row(&self, query: usize) -> &[bool] {
        &self.allowed[query * self.n..(query + 1) * self.n]
    }

    pub fn row_support(&self, query: usize) -> usize {
        self.row(query).iter().filter(|&&b| b).count()
    }

    /// Bit-packed row-major bytes, most significant bit first.
    pub fn to_packed_bits(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.allowed.len().div_ceil(8)];
        for (i, &b) in self.allowed.iter().enumerate() {
            if b {
                out[i / 8] |= 0x80 >> (i % 8);
            }
        }
        out
    }

    pub fn from_packed_bits(n: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != (n * n).div_ceil(8) {
            return Err(AparError::invalid(format!(
                "mask of size {n} needs {} bytes, got {}",
                (n * n).div_ceil(8),
                bytes.len()
            )));
        }
        let allowed = (0..n * n).map(|i| bytes[i / 8] & (0x80 >> (i % 8)) != 0).collect();
        Ok(AttentionMask { n, allowed })
    }

    /// JSON header line followed by the packed bits.
    pub fn export<W: Write>(&self, prompt_len: usize, mut w: W) -> std::io::Result<()> {
        let header = MaskHeader { n: self.n, prompt_len };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        w.write_all(&self.to_packed_bits())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskHeader {
    pub n: usize,
    pub prompt_len: usize,
}

/// Checks that `node_of` visits nodes as contiguous runs in traversal order.
fn check_consistency(sample: &LinearizedSample, tree: &ParagraphTree) -> Result<()> {
    if sample.node_of.len() != sample.tokens.len() {
        return Err(AparError::invalid("node_of length differs from token count"));
    }
    if sample.node_of[..sample.prompt_len.min(sample.node_of.len())]
        .iter()
        .any(Option::is_some)
        || sample.node_of[sample.prompt_len.min(sample.node_of.len())..]
            .iter()
            .any(Option::is_none)
    {
        return Err(AparError::invalid("node_of disagrees with prompt length"));
    }
    let mut runs: Vec<NodeId> = Vec::new();
    for n in sample.node_of.iter().flatten() {
        if runs.last() != Some(n) {
            runs.push(*n);
        }
    }
    let present: HashSet<NodeId> = runs.iter().copied().collect();
    if present.len() != runs.len() {
        return Err(AparError::invalid("a node's tokens are not contiguous"));
    }
    let expected: Vec<NodeId> = tree
        .traversal_order()?
        .into_iter()
        .filter(|id| present.contains(id))
        .collect();
    if expected != runs {
        return Err(AparError::invalid("node_of order differs from tree traversal order"));
    }
    Ok(())
}

pub fn build_training_mask(sample: &LinearizedSample, tree: &ParagraphTree) -> Result<AttentionMask> {
    check_consistency(sample, tree)?;
    let n = sample.len();
    let mut ancestors: HashMap<NodeId, HashSet<NodeId>> = HashMap::new();
    for id in sample.node_of.iter().flatten() {
        if !ancestors.contains_key(id) {
            let path = tree.path_to_root(*id)?;
            ancestors.insert(*id, path.into_iter().skip(1).collect());
        }
    }
    let mut allowed = vec![false; n * n];
    for q in 0..n {
        let row = &mut allowed[q * n..(q + 1) * n];
        match sample.node_of[q] {
            None => row[..=q].iter_mut().for_each(|b| *b = true),
            Some(qn) => {
                let anc = &ancestors[&qn];
                for k in 0..=q {
                    row[k] = match sample.node_of[k] {
                        None => true,
                        Some(kn) => kn == qn || anc.contains(&kn),
                    };
                }
            }
        }
    }
    Ok(AttentionMask { n, allowed })
}

/// False on the prompt and on every `[Child]`; true elsewhere.
pub fn build_loss_mask(sample: &LinearizedSample) -> Vec<bool> {
    sample
        .tokens
        .iter()
        .enumerate()
        .map(|(i, t)| i >= sample.prompt_len && !t.is_child())
        .collect()
}

/// Context size when predicting the token at `position` of `seq`.
///
/// Computed from the path to the root: prompt, then every ancestor slice,
/// then the part of the owning node before `position`.
pub fn attended_count<S: TokenSource + ?Sized>(
    tree: &ParagraphTree,
    src: &S,
    seq: SeqId,
    position: usize,
) -> Result<usize> {
    let tokens = src
        .tokens(seq)
        .ok_or_else(|| AparError::invalid(format!("unknown sequence {seq}")))?;
    if position == 0 || position >= tokens.len() {
        return Err(AparError::invalid(format!(
            "position {position} out of range for sequence {seq} of length {}",
            tokens.len()
        )));
    }
    let leaf = tree
        .nodes
        .iter()
        .filter(|n| n.seq == seq && n.is_leaf())
        .max_by_key(|n| n.start)
        .ok_or_else(|| AparError::invalid(format!("sequence {seq} owns no leaf")))?;
    let mut path = tree.path_to_root(leaf.id)?;
    path.reverse();
    let mut seen = tree.prompt_len;
    if position < seen {
        return Ok(position);
    }
    for id in path {
        let slice = tree.slice(src, id)?;
        if tokens.get(seen..seen + slice.len()) != Some(slice) {
            return Err(AparError::structural(id, format!("path content diverges from sequence {seq}")));
        }
        if position < seen + slice.len() {
            let offset = position - seen;
            return Ok(seen + offset);
        }
        seen += slice.len();
    }
    Err(AparError::invalid(format!(
        "position {position} lies beyond the path content of sequence {seq}"
    )))
}

/// AR reference: every preceding token is attended.
pub fn attended_count_linear(position: usize) -> usize {
    position
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::token::toks;
    use crate::tree::tests::fig3_tree;

    #[test]
    fn single_node_is_causal() {
        let mut seqs = std::collections::BTreeMap::new();
        seqs.insert(SeqId(0), toks("Q a b c [EOS]"));
        let tree = ParagraphTree::new(1, SeqId(0));
        let s = LinearizedSample::from_tree(&tree, &seqs).unwrap();
        assert_eq!(build_training_mask(&s, &tree).unwrap(), AttentionMask::causal(5));
    }

    #[test]
    fn fig3_mask_rows() {
        let (tree, seqs) = fig3_tree();
        let s = LinearizedSample::from_tree(&tree, &seqs).unwrap();
        assert_eq!(s.tokens, toks("Q a1 a2 [Fork] [Child] d1 d2 [EOS] b1 [EOS]"));
        let m = build_training_mask(&s, &tree).unwrap();
        let row = |q| (0..10).filter(|&k| m.get(q, k)).collect::<Vec<_>>();
        assert_eq!(row(8), vec![0, 1, 2, 3, 8]);
        assert_eq!(row(5), vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn fig3_loss_mask() {
        let (tree, seqs) = fig3_tree();
        let s = LinearizedSample::from_tree(&tree, &seqs).unwrap();
        let loss = build_loss_mask(&s);
        let off: Vec<usize> = (0..10).filter(|&i| !loss[i]).collect();
        assert_eq!(off, vec![0, 4]);
    }

    #[test]
    fn inconsistent_node_of_is_rejected() {
        let (tree, seqs) = fig3_tree();
        let mut s = LinearizedSample::from_tree(&tree, &seqs).unwrap();
        s.node_of.swap(1, 8);
        assert!(build_training_mask(&s, &tree).is_err());
        s.node_of.pop();
        assert!(build_training_mask(&s, &tree).is_err());
    }

    #[test]
    fn fig3_attended_counts() {
        let (tree, seqs) = fig3_tree();
        // b1 sits at index 4 of the parent, d2 at index 6 of the child.
        assert_eq!(attended_count(&tree, &seqs, SeqId(0), 4).unwrap(), 4);
        assert_eq!(attended_count(&tree, &seqs, SeqId(1), 6).unwrap(), 6);
        assert!(attended_count(&tree, &seqs, SeqId(1), 8).is_err());
        // The flattened reference predicts b1 after Q a1 a2 d1 d2.
        assert_eq!(attended_count_linear(5), 5);
    }

    #[test]
    fn single_sequence_tree_restores_linearization() {
        let (tree, seqs) = fig3_tree();
        let s = LinearizedSample::from_tree(&tree, &seqs).unwrap();
        let flat = s.single_sequence_tree(&tree).unwrap();
        assert!(flat.validate_with(s.tokens.as_slice()).is_empty());
        assert_eq!(
            flat.restore(s.tokens.as_slice(), false).unwrap(),
            s.tokens[1..].to_vec()
        );
        assert_eq!(build_training_mask(&s, &flat).unwrap(), build_training_mask(&s, &tree).unwrap());
    }

    #[test]
    fn packed_bits_round_trip() {
        let (tree, seqs) = fig3_tree();
        let s = LinearizedSample::from_tree(&tree, &seqs).unwrap();
        let m = build_training_mask(&s, &tree).unwrap();
        let bytes = m.to_packed_bits();
        assert_eq!(bytes.len(), 13);
        // Row 0 is [1,0,0,...]: the very first bit is set.
        assert_eq!(bytes[0] & 0x80, 0x80);
        assert_eq!(AttentionMask::from_packed_bits(10, &bytes).unwrap(), m);
        let mut buf = Vec::new();
        m.export(1, &mut buf).unwrap();
        assert!(buf.starts_with(br#"{"n":10,"prompt_len":1}"#));
    }
}
