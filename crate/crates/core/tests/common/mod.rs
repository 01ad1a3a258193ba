//! Independent oracles shared by the integration tests. Nothing here calls
//! the library's own traversal, ancestor or validation logic.
#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap};

use apar::tree::{NodeId, ParagraphTree};

/// Restore order by plain recursion: node, then first child, then sibling.
pub fn recursive_order(tree: &ParagraphTree) -> Vec<NodeId> {
    let by_id: HashMap<NodeId, (Option<NodeId>, Option<NodeId>)> =
        tree.nodes.iter().map(|n| (n.id, (n.first_child, n.next_sibling))).collect();
    fn go(id: NodeId, m: &HashMap<NodeId, (Option<NodeId>, Option<NodeId>)>, out: &mut Vec<NodeId>) {
        out.push(id);
        let (c, s) = m[&id];
        if let Some(c) = c {
            go(c, m, out);
        }
        if let Some(s) = s {
            go(s, m, out);
        }
    }
    let mut out = Vec::new();
    go(tree.root, &by_id, &mut out);
    out
}

/// Parent of `id` found by scanning every node's pointers.
pub fn scan_parent(tree: &ParagraphTree, id: NodeId) -> Option<NodeId> {
    tree.nodes
        .iter()
        .find(|n| n.first_child == Some(id) || n.next_sibling == Some(id))
        .map(|n| n.id)
}

pub fn scan_ancestors(tree: &ParagraphTree, id: NodeId) -> BTreeSet<NodeId> {
    let mut out = BTreeSet::new();
    let mut cur = scan_parent(tree, id);
    while let Some(p) = cur {
        if !out.insert(p) {
            break;
        }
        cur = scan_parent(tree, p);
    }
    out
}

/// Brute-force mask: prompt, ancestors' tokens, own node causally.
pub fn brute_mask(node_of: &[Option<NodeId>], tree: &ParagraphTree) -> Vec<Vec<bool>> {
    let n = node_of.len();
    let mut m = vec![vec![false; n]; n];
    for q in 0..n {
        let anc = node_of[q].map(|x| scan_ancestors(tree, x)).unwrap_or_default();
        for k in 0..n {
            m[q][k] = match (node_of[q], node_of[k]) {
                (_, None) => k <= q,
                (None, Some(_)) => false,
                (Some(a), Some(b)) => (a == b && k <= q) || anc.contains(&b),
            };
        }
    }
    m
}

/// Outcome of the graph oracle over raw pointers.
#[derive(Debug, Default)]
pub struct GraphVerdict {
    pub well_formed: bool,
    pub has_cycle: bool,
    pub one_pointer: bool,
}

/// `ptrs[i] = (first_child, next_sibling)` as raw indices; indices `>= n`
/// dangle. Node 0 is the root.
pub fn graph_oracle(ptrs: &[(Option<usize>, Option<usize>)]) -> GraphVerdict {
    let n = ptrs.len();
    let mut v = GraphVerdict::default();
    let dangling = ptrs.iter().any(|(a, b)| a.is_some_and(|x| x >= n) || b.is_some_and(|x| x >= n));
    v.one_pointer = ptrs.iter().any(|(a, b)| a.is_some() != b.is_some());
    let mut indeg = vec![0usize; n];
    for (a, b) in ptrs {
        for t in [a, b].into_iter().flatten() {
            if *t < n {
                indeg[*t] += 1;
            }
        }
    }
    // A cycle exists iff some node reaches itself.
    let succ = |i: usize| -> Vec<usize> {
        let (a, b) = ptrs[i];
        [a, b].into_iter().flatten().filter(|&t| t < n).collect()
    };
    for s in 0..n {
        let mut seen = vec![false; n];
        let mut stack = succ(s);
        while let Some(x) = stack.pop() {
            if x == s {
                v.has_cycle = true;
            }
            if !std::mem::replace(&mut seen[x], true) {
                stack.extend(succ(x));
            }
        }
    }
    let mut reach = vec![false; n];
    let mut stack = vec![0];
    while let Some(x) = stack.pop() {
        if !std::mem::replace(&mut reach[x], true) {
            stack.extend(succ(x));
        }
    }
    v.well_formed = !dangling
        && !v.one_pointer
        && !v.has_cycle
        && indeg[0] == 0
        && indeg.iter().all(|&d| d <= 1)
        && reach.iter().all(|&r| r);
    v
}

/// Steps a paragraph-tree decode takes under snapshot semantics, computed
/// from the script shape: a thread created after step `t` first samples at
/// `t + 1`.
pub fn critical_path_steps(script: &apar::script::ScriptTree) -> usize {
    // finish(node, start_step): step at which the thread that starts emitting
    // `node`'s content at `start_step` emits its final [EOS].
    fn go(s: &apar::script::ScriptTree, id: NodeId, start: usize) -> usize {
        let n = s.node(id).unwrap();
        // Content occupies start .. start+len-1.
        let after_content = start + n.tokens.len();
        match (n.first_child, n.next_sibling) {
            (Some(c), Some(sib)) => {
                // [Fork] at after_content; fork happens when the next token is
                // sampled at after_content + 1, the child's first sample is the
                // step after.
                let sibling_done = go(s, sib, after_content + 1);
                let child_done = go(s, c, after_content + 2);
                sibling_done.max(child_done)
            }
            _ => after_content,
        }
    }
    go(script, script.root, 1)
}
