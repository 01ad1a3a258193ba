//! Paragraph trees: the hierarchical plan behind a parallel generation.
//!
//! Every node is a slice `[start, end)` of one sequence (or `[start, ..)`
//! while the owning thread is still writing to it). A node carries either no
//! pointers or both a `first_child` (the detail paragraph) and a
//! `next_sibling` (the next paragraph of the same level). For attention and
//! traversal both pointers are parent edges: a sibling sees everything its
//! predecessor saw, plus the predecessor itself.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{AparError, Result};
use crate::token::Token;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SeqId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for SeqId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Anything that can hand out the token list of a sequence.
pub trait TokenSource {
    fn tokens(&self, seq: SeqId) -> Option<&[Token]>;
}

impl TokenSource for BTreeMap<SeqId, Vec<Token>> {
    fn tokens(&self, seq: SeqId) -> Option<&[Token]> {
        self.get(&seq).map(Vec::as_slice)
    }
}

impl TokenSource for HashMap<SeqId, Vec<Token>> {
    fn tokens(&self, seq: SeqId) -> Option<&[Token]> {
        self.get(&seq).map(Vec::as_slice)
    }
}

/// A single token list posing as sequence 0; used for linearized samples.
impl TokenSource for [Token] {
    fn tokens(&self, seq: SeqId) -> Option<&[Token]> {
        (seq == SeqId(0)).then_some(self)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParagraphNode {
    pub id: NodeId,
    pub seq: SeqId,
    pub start: usize,
    pub end: Option<usize>,
    pub first_child: Option<NodeId>,
    pub next_sibling: Option<NodeId>,
}

impl ParagraphNode {
    pub fn is_leaf(&self) -> bool {
        self.first_child.is_none() && self.next_sibling.is_none()
    }

    fn pointer_count(&self) -> usize {
        usize::from(self.first_child.is_some()) + usize::from(self.next_sibling.is_some())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParagraphTree {
    pub prompt_len: usize,
    pub root: NodeId,
    pub nodes: Vec<ParagraphNode>,
}

/// One broken invariant found by [`ParagraphTree::validate`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub node: NodeId,
    pub kind: ViolationKind,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum ViolationKind {
    MissingRoot,
    DuplicateId,
    OnePointer,
    DanglingPointer(NodeId),
    Cycle,
    MultipleParents,
    Unreachable,
    InvertedSlice,
    RootStart { expected: usize },
    OverlappingSlices(NodeId),
    SliceOutOfRange { len: usize },
    UnknownSequence,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = self.node;
        match &self.kind {
            ViolationKind::MissingRoot => write!(f, "root node {n} does not exist"),
            ViolationKind::DuplicateId => write!(f, "node id {n} appears more than once"),
            ViolationKind::OnePointer => write!(f, "node {n} has exactly 1 pointer"),
            ViolationKind::DanglingPointer(t) => write!(f, "node {n} points to missing node {t}"),
            ViolationKind::Cycle => write!(f, "cycle through node {n}"),
            ViolationKind::MultipleParents => write!(f, "node {n} has more than one parent"),
            ViolationKind::Unreachable => write!(f, "node {n} is unreachable from the root"),
            ViolationKind::InvertedSlice => write!(f, "node {n} has start > end"),
            ViolationKind::RootStart { expected } => {
                write!(f, "root node {n} must start at prompt length {expected}")
            }
            ViolationKind::OverlappingSlices(o) => {
                write!(f, "node {n} overlaps node {o} in the same sequence")
            }
            ViolationKind::SliceOutOfRange { len } => {
                write!(f, "node {n} slice exceeds sequence length {len}")
            }
            ViolationKind::UnknownSequence => write!(f, "node {n} refers to a missing sequence"),
        }
    }
}

impl ParagraphTree {
    /// A tree with a single open root slice starting after the prompt.
    pub fn new(prompt_len: usize, seq: SeqId) -> Self {
        ParagraphTree {
            prompt_len,
            root: NodeId(0),
            nodes: vec![ParagraphNode {
                id: NodeId(0),
                seq,
                start: prompt_len,
                end: None,
                first_child: None,
                next_sibling: None,
            }],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn index_of(&self, id: NodeId) -> Option<usize> {
        let i = id.0 as usize;
        if self.nodes.get(i).is_some_and(|n| n.id == id) {
            return Some(i);
        }
        self.nodes.iter().position(|n| n.id == id)
    }

    pub fn node(&self, id: NodeId) -> Option<&ParagraphNode> {
        self.index_of(id).map(|i| &self.nodes[i])
    }

    pub fn node_mut(&mut self, id: NodeId) -> Option<&mut ParagraphNode> {
        self.index_of(id).map(move |i| &mut self.nodes[i])
    }

    fn expect_node(&self, id: NodeId) -> Result<&ParagraphNode> {
        self.node(id)
            .ok_or_else(|| AparError::structural(id, "unknown node id"))
    }

    /// Appends an open leaf node and returns its id.
    pub fn push_node(&mut self, seq: SeqId, start: usize) -> NodeId {
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(ParagraphNode {
            id,
            seq,
            start,
            end: None,
            first_child: None,
            next_sibling: None,
        });
        id
    }

    /// Inverse of both pointer kinds.
    pub fn parent_map(&self) -> HashMap<NodeId, NodeId> {
        let mut parents = HashMap::with_capacity(self.nodes.len());
        for n in &self.nodes {
            for c in [n.first_child, n.next_sibling].into_iter().flatten() {
                parents.insert(c, n.id);
            }
        }
        parents
    }

    /// Node ids in root, first_child, next_sibling order.
    ///
    /// Fails on revisits, so a malformed tree cannot loop forever.
    pub fn traversal_order(&self) -> Result<Vec<NodeId>> {
        let mut order = Vec::with_capacity(self.nodes.len());
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![self.root];
        while let Some(id) = stack.pop() {
            let idx = self
                .index_of(id)
                .ok_or_else(|| AparError::structural(id, "pointer to missing node"))?;
            if std::mem::replace(&mut seen[idx], true) {
                return Err(AparError::structural(id, "node visited twice during traversal"));
            }
            order.push(id);
            let node = &self.nodes[idx];
            if let Some(s) = node.next_sibling {
                stack.push(s);
            }
            if let Some(c) = node.first_child {
                stack.push(c);
            }
        }
        Ok(order)
    }

    /// The tokens a node covers.
    pub fn slice<'a, S: TokenSource + ?Sized>(&self, src: &'a S, id: NodeId) -> Result<&'a [Token]> {
        let node = self.expect_node(id)?;
        let tokens = src
            .tokens(node.seq)
            .ok_or_else(|| AparError::structural(id, format!("sequence {} not found", node.seq)))?;
        let end = node.end.unwrap_or(tokens.len());
        if node.start > end || end > tokens.len() {
            return Err(AparError::structural(
                id,
                format!(
                    "slice {}..{} out of range for sequence of length {}",
                    node.start,
                    end,
                    tokens.len()
                ),
            ));
        }
        Ok(&tokens[node.start..end])
    }

    /// Linear output of the tree. Prompt tokens are never included.
    pub fn restore<S: TokenSource + ?Sized>(&self, src: &S, strip_control: bool) -> Result<Vec<Token>> {
        let mut out = Vec::new();
        for id in self.traversal_order()? {
            let slice = self.slice(src, id)?;
            if strip_control {
                out.extend(slice.iter().filter(|t| !t.is_control()).cloned());
            } else {
                out.extend_from_slice(slice);
            }
        }
        Ok(out)
    }

    /// The AR-equivalent sequence used as the metrics baseline.
    pub fn flatten_reference<S: TokenSource + ?Sized>(&self, src: &S) -> Result<Vec<Token>> {
        self.restore(src, true)
    }

    /// Attention ancestors of `id`: the node itself first, the root last.
    pub fn path_to_root(&self, id: NodeId) -> Result<Vec<NodeId>> {
        self.expect_node(id)?;
        let parents = self.parent_map();
        let mut path = vec![id];
        let mut cur = id;
        while let Some(&p) = parents.get(&cur) {
            if path.len() > self.nodes.len() {
                return Err(AparError::structural(id, "cycle on path to root"));
            }
            path.push(p);
            cur = p;
        }
        if cur != self.root {
            return Err(AparError::structural(id, "node is not connected to the root"));
        }
        Ok(path)
    }

    /// Structural invariants that need no sequence data.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut index: HashMap<NodeId, usize> = HashMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if index.insert(n.id, i).is_some() {
                out.push(Violation { node: n.id, kind: ViolationKind::DuplicateId });
            }
        }
        for n in &self.nodes {
            if n.pointer_count() == 1 {
                out.push(Violation { node: n.id, kind: ViolationKind::OnePointer });
            }
            for t in [n.first_child, n.next_sibling].into_iter().flatten() {
                if !index.contains_key(&t) {
                    out.push(Violation { node: n.id, kind: ViolationKind::DanglingPointer(t) });
                }
            }
            if n.end.is_some_and(|e| n.start > e) {
                out.push(Violation { node: n.id, kind: ViolationKind::InvertedSlice });
            }
        }
        match index.get(&self.root) {
            None => out.push(Violation { node: self.root, kind: ViolationKind::MissingRoot }),
            Some(&ri) => {
                if self.nodes[ri].start != self.prompt_len {
                    out.push(Violation {
                        node: self.root,
                        kind: ViolationKind::RootStart { expected: self.prompt_len },
                    });
                }
                self.check_graph(ri, &index, &mut out);
            }
        }
        self.check_overlaps(&mut out);
        out.sort_by(|a, b| (a.node, &a.kind).cmp(&(b.node, &b.kind)));
        out.dedup();
        out
    }

    /// [`validate`](Self::validate) plus slice bounds against real sequences.
    pub fn validate_with<S: TokenSource + ?Sized>(&self, src: &S) -> Vec<Violation> {
        let mut out = self.validate();
        for n in &self.nodes {
            match src.tokens(n.seq) {
                None => out.push(Violation { node: n.id, kind: ViolationKind::UnknownSequence }),
                Some(t) => {
                    let end = n.end.unwrap_or(t.len());
                    if n.start > t.len() || end > t.len() {
                        out.push(Violation {
                            node: n.id,
                            kind: ViolationKind::SliceOutOfRange { len: t.len() },
                        });
                    }
                }
            }
        }
        out.sort_by(|a, b| (a.node, &a.kind).cmp(&(b.node, &b.kind)));
        out.dedup();
        out
    }

    // Three-colour DFS over both pointer kinds. Back edges are cycles, edges
    // into finished nodes mean a shared subtree.
    fn check_graph(&self, root: usize, index: &HashMap<NodeId, usize>, out: &mut Vec<Violation>) {
        #[derive(Clone, Copy, PartialEq)]
        enum Colour {
            White,
            Grey,
            Black,
        }
        let mut colour = vec![Colour::White; self.nodes.len()];
        let mut starts = vec![root];
        starts.extend((0..self.nodes.len()).filter(|&i| i != root));
        for (k, s) in starts.into_iter().enumerate() {
            if colour[s] != Colour::White {
                continue;
            }
            if k == 1 {
                // Everything still white after the root pass is unreachable.
                for (i, c) in colour.iter().enumerate() {
                    if *c == Colour::White {
                        out.push(Violation { node: self.nodes[i].id, kind: ViolationKind::Unreachable });
                    }
                }
            }
            // (index, entered)
            let mut stack = vec![(s, false)];
            while let Some((i, entered)) = stack.pop() {
                if entered {
                    colour[i] = Colour::Black;
                    continue;
                }
                if colour[i] != Colour::White {
                    continue;
                }
                colour[i] = Colour::Grey;
                stack.push((i, true));
                let n = &self.nodes[i];
                for t in [n.next_sibling, n.first_child].into_iter().flatten() {
                    let Some(&j) = index.get(&t) else { continue };
                    match colour[j] {
                        Colour::Grey => out.push(Violation { node: t, kind: ViolationKind::Cycle }),
                        Colour::Black => {
                            out.push(Violation { node: t, kind: ViolationKind::MultipleParents })
                        }
                        Colour::White => stack.push((j, false)),
                    }
                }
            }
        }
        // A second pointer into a node still on the stack is also a shared target.
        let mut indegree: HashMap<NodeId, usize> = HashMap::new();
        for n in &self.nodes {
            for t in [n.first_child, n.next_sibling].into_iter().flatten() {
                *indegree.entry(t).or_default() += 1;
            }
        }
        for (id, d) in indegree {
            if d > 1 {
                out.push(Violation { node: id, kind: ViolationKind::MultipleParents });
            }
            if id == self.root && d > 0 {
                out.push(Violation { node: id, kind: ViolationKind::Cycle });
            }
        }
    }

    fn check_overlaps(&self, out: &mut Vec<Violation>) {
        let mut by_seq: BTreeMap<SeqId, Vec<&ParagraphNode>> = BTreeMap::new();
        for n in &self.nodes {
            by_seq.entry(n.seq).or_default().push(n);
        }
        for nodes in by_seq.values_mut() {
            nodes.sort_by_key(|n| (n.start, n.id));
            for w in nodes.windows(2) {
                let (a, b) = (w[0], w[1]);
                let a_end = a.end.unwrap_or(usize::MAX);
                // Empty slices touch but never overlap.
                let a_empty = a.end == Some(a.start);
                let b_empty = b.end == Some(b.start);
                if !a_empty && !b_empty && a_end > b.start {
                    out.push(Violation { node: b.id, kind: ViolationKind::OverlappingSlices(a.id) });
                }
            }
        }
    }
}
