//! Generation threads and the sequence group that owns them.
//!
//! A group starts as the prompt alone. Each fork clones the parent's tokens,
//! shares its KV blocks, injects `[Child]` into the clone and splits the
//! parent's current paragraph node into a sibling continuation and a child.

use serde::Serialize;

use crate::error::{AparError, Result};
use crate::kv::{BlockManager, BlockTable};
use crate::token::Token;
use crate::tree::{NodeId, ParagraphTree, SeqId, TokenSource};

#[derive(Clone, Debug)]
pub struct Sequence {
    pub id: SeqId,
    pub tokens: Vec<Token>,
    pub finished: bool,
    pub current_node: NodeId,
    pub table: BlockTable,
}

impl Sequence {
    pub fn last_token(&self) -> Option<&Token> {
        self.tokens.last()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct AppendOutcome {
    pub finished: bool,
    pub blocks_freed: usize,
}

#[derive(Clone, Debug)]
pub struct SequenceGroup {
    prompt: Vec<Token>,
    sequences: Vec<Sequence>,
    tree: ParagraphTree,
    release_on_finish: bool,
    // Per-node token counts, indexed by node id; `content` skips control tokens.
    node_len: Vec<usize>,
    node_content: Vec<usize>,
}

impl SequenceGroup {
    /// Starts a group from `prompt` and caches the prompt in `pool`.
    pub fn new<P: BlockManager + ?Sized>(prompt: Vec<Token>, pool: &mut P) -> Result<Self> {
        if prompt.is_empty() {
            return Err(AparError::invalid("prompt must not be empty"));
        }
        if let Some(t) = prompt.iter().find(|t| t.is_control()) {
            return Err(AparError::invalid(format!("prompt contains reserved token {t}")));
        }
        let mut table = BlockTable::new(SeqId(0));
        for _ in 0..prompt.len() {
            if let Err(e) = pool.append_slot(&mut table) {
                let _ = pool.release(&mut table);
                return Err(e);
            }
        }
        let tree = ParagraphTree::new(prompt.len(), SeqId(0));
        Ok(SequenceGroup {
            sequences: vec![Sequence {
                id: SeqId(0),
                tokens: prompt.clone(),
                finished: false,
                current_node: tree.root,
                table,
            }],
            prompt,
            tree,
            release_on_finish: true,
            node_len: vec![0],
            node_content: vec![0],
        })
    }

    /// Keep finished sequences' blocks until [`release_all`](Self::release_all).
    pub fn with_deferred_release(mut self) -> Self {
        self.release_on_finish = false;
        self
    }

    pub fn prompt(&self) -> &[Token] {
        &self.prompt
    }

    pub fn tree(&self) -> &ParagraphTree {
        &self.tree
    }

    pub fn sequences(&self) -> &[Sequence] {
        &self.sequences
    }

    pub fn sequence(&self, id: SeqId) -> Result<&Sequence> {
        self.sequences
            .get(id.0 as usize)
            .ok_or_else(|| AparError::invalid(format!("unknown sequence {id}")))
    }

    fn sequence_mut(&mut self, id: SeqId) -> Result<&mut Sequence> {
        self.sequences
            .get_mut(id.0 as usize)
            .ok_or_else(|| AparError::invalid(format!("unknown sequence {id}")))
    }

    pub fn is_finished(&self) -> bool {
        self.sequences.iter().all(|s| s.finished)
    }

    pub fn unfinished(&self) -> Vec<SeqId> {
        self.sequences.iter().filter(|s| !s.finished).map(|s| s.id).collect()
    }

    pub fn thread_count(&self) -> usize {
        self.sequences.len()
    }

    /// Forks `parent`, whose last token must be `[Fork]`.
    ///
    /// On a capacity error nothing is mutated: the parent keeps decoding
    /// linearly.
    pub fn fork_sequence<P: BlockManager + ?Sized>(&mut self, pool: &mut P, parent: SeqId) -> Result<SeqId> {
        let child_id = SeqId(self.sequences.len() as u32);
        let p = self.sequence(parent)?;
        if p.finished {
            return Err(AparError::protocol(format!("fork of finished sequence {parent}")));
        }
        if !p.last_token().is_some_and(Token::is_fork) {
            return Err(AparError::protocol(format!(
                "fork of sequence {parent} whose last token is not [Fork]"
            )));
        }
        let mut table = pool.fork_table(&p.table, child_id)?;
        if let Err(e) = pool.append_slot(&mut table) {
            pool.release(&mut table)?;
            return Err(e);
        }
        let parent_len = p.tokens.len();
        let parent_node = p.current_node;
        let mut tokens = p.tokens.clone();
        tokens.push(Token::child());

        let sibling = self.tree.push_node(parent, parent_len);
        // The child slice starts at its [Child] token so node content matches
        // the training layout.
        let child_node = self.tree.push_node(child_id, parent_len);
        self.node_len.extend([0, 1]);
        self.node_content.extend([0, 0]);
        let n = self
            .tree
            .node_mut(parent_node)
            .ok_or_else(|| AparError::structural(parent_node, "current node missing"))?;
        n.end = Some(parent_len);
        n.next_sibling = Some(sibling);
        n.first_child = Some(child_node);

        self.sequence_mut(parent)?.current_node = sibling;
        self.sequences.push(Sequence {
            id: child_id,
            tokens,
            finished: false,
            current_node: child_node,
            table,
        });
        Ok(child_id)
    }

    /// Appends `token` to `seq`, caching one slot. `[EOS]` finishes the
    /// sequence and, unless release is deferred, frees its unique blocks.
    pub fn append_token<P: BlockManager + ?Sized>(
        &mut self,
        pool: &mut P,
        seq: SeqId,
        token: Token,
    ) -> Result<AppendOutcome> {
        let release = self.release_on_finish;
        let s = self.sequence_mut(seq)?;
        if s.finished {
            return Err(AparError::protocol(format!("append to finished sequence {seq}")));
        }
        pool.append_slot(&mut s.table)?;
        let is_eos = token.is_eos();
        let is_control = token.is_control();
        let node = s.current_node.0 as usize;
        s.tokens.push(token);
        self.node_len[node] += 1;
        if !is_control {
            self.node_content[node] += 1;
        }
        let mut out = AppendOutcome::default();
        if is_eos {
            let s = self.sequence_mut(seq)?;
            s.finished = true;
            out.finished = true;
            if release {
                out.blocks_freed = pool.release(&mut s.table)?;
            }
        }
        Ok(out)
    }

    /// Finishes `seq` with an `[EOS]` that is not cached; used when a decode
    /// limit is hit.
    pub fn force_finish<P: BlockManager + ?Sized>(&mut self, pool: &mut P, seq: SeqId) -> Result<usize> {
        let release = self.release_on_finish;
        let s = self.sequence_mut(seq)?;
        if s.finished {
            return Ok(0);
        }
        s.tokens.push(Token::eos());
        s.finished = true;
        let node = s.current_node.0 as usize;
        let freed = if release { pool.release(&mut s.table)? } else { 0 };
        self.node_len[node] += 1;
        Ok(freed)
    }

    /// Releases every table still holding blocks.
    pub fn release_all<P: BlockManager + ?Sized>(&mut self, pool: &mut P) -> Result<usize> {
        let mut freed = 0;
        for s in &mut self.sequences {
            if !s.table.is_released() {
                freed += pool.release(&mut s.table)?;
            }
        }
        Ok(freed)
    }

    /// Drops all cache for the group without touching its tokens
    /// (preemption by recompute).
    pub fn evict<P: BlockManager + ?Sized>(&mut self, pool: &mut P) -> Result<usize> {
        self.release_all(pool)
    }

    fn rebuild_plan(&self, block_size: usize) -> Vec<(SeqId, Option<(SeqId, usize)>)> {
        let live: Vec<&Sequence> = self.sequences.iter().filter(|s| !s.finished).collect();
        let mut plan = Vec::with_capacity(live.len());
        for (i, s) in live.iter().enumerate() {
            let donor = live[..i]
                .iter()
                .map(|d| (d.id, common_prefix(&d.tokens, &s.tokens)))
                .filter(|&(_, l)| l >= block_size)
                .max_by_key(|&(id, l)| (l, std::cmp::Reverse(id)));
            plan.push((s.id, donor));
        }
        plan
    }

    /// Blocks [`rebuild`](Self::rebuild) will allocate.
    pub fn rebuild_demand(&self, block_size: usize) -> usize {
        self.rebuild_plan(block_size)
            .into_iter()
            .map(|(id, donor)| {
                let len = self.sequences[id.0 as usize].tokens.len();
                let shared = donor.map_or(0, |(_, l)| l / block_size);
                len.div_ceil(block_size) - shared
            })
            .sum()
    }

    /// Re-caches every unfinished sequence after an eviction, sharing full
    /// blocks of common prefixes between live sequences. Returns the number
    /// of slots recomputed.
    pub fn rebuild<P: BlockManager + ?Sized>(&mut self, pool: &mut P) -> Result<usize> {
        let bs = pool.block_size();
        let mut slots = 0;
        for (id, donor) in self.rebuild_plan(bs) {
            let len = self.sequences[id.0 as usize].tokens.len();
            let mut table = match donor {
                Some((d, l)) => {
                    let shared = (l / bs) * bs;
                    pool.fork_prefix(&self.sequences[d.0 as usize].table, shared, id)?
                }
                None => BlockTable::new(id),
            };
            while table.cached_tokens(bs) < len {
                pool.append_slot(&mut table)?;
            }
            slots += len;
            self.sequences[id.0 as usize].table = table;
        }
        Ok(slots)
    }

    /// Tokens cached logically for the given live sequences, counting shared
    /// prefixes once: `(all tokens, content tokens only)`.
    pub fn logical_cached(&self, live: &[SeqId]) -> (usize, usize) {
        let parents = self.tree.parent_map();
        let mut seen = vec![false; self.node_len.len()];
        let (mut all, mut content) = (self.prompt.len(), self.prompt.len());
        for &sid in live {
            let mut cur = Some(self.sequences[sid.0 as usize].current_node);
            while let Some(n) = cur {
                let i = n.0 as usize;
                if std::mem::replace(&mut seen[i], true) {
                    break;
                }
                all += self.node_len[i];
                content += self.node_content[i];
                cur = parents.get(&n).copied();
            }
        }
        (all, content)
    }

    /// Every current node must be an open leaf of its own sequence.
    pub fn check_leaves(&self) -> Result<()> {
        for s in &self.sequences {
            let n = self
                .tree
                .node(s.current_node)
                .ok_or_else(|| AparError::structural(s.current_node, "current node missing"))?;
            if !n.is_leaf() || n.end.is_some() || n.seq != s.id {
                return Err(AparError::structural(
                    n.id,
                    format!("current node of sequence {} is not its open leaf", s.id),
                ));
            }
        }
        Ok(())
    }

    /// Restored generation, control tokens stripped.
    pub fn restore(&self) -> Result<Vec<Token>> {
        self.tree.restore(self, true)
    }
}

impl TokenSource for SequenceGroup {
    fn tokens(&self, seq: SeqId) -> Option<&[Token]> {
        self.sequences.get(seq.0 as usize).map(|s| s.tokens.as_slice())
    }
}

fn common_prefix(a: &[Token], b: &[Token]) -> usize {
    a.iter().zip(b).take_while(|(x, y)| x == y).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kv::KvBlockPool;
    use crate::token::toks;

    fn pool() -> KvBlockPool {
        KvBlockPool::new(64, 16).unwrap()
    }

    fn push(g: &mut SequenceGroup, p: &mut KvBlockPool, seq: u32, text: &str) {
        for t in toks(text) {
            g.append_token(p, SeqId(seq), t).unwrap();
        }
    }

    #[test]
    fn new_group_has_root_after_prompt() {
        let mut p = pool();
        let g = SequenceGroup::new(toks("Q"), &mut p).unwrap();
        assert_eq!(g.sequences().len(), 1);
        assert_eq!(g.tree().node(g.tree().root).unwrap().start, 1);
        assert_eq!(g.sequences()[0].current_node, g.tree().root);
        let g = SequenceGroup::new(toks("a b c d e f g h i j"), &mut p).unwrap();
        assert_eq!(g.tree().node(g.tree().root).unwrap().start, 10);
    }

    #[test]
    fn prompt_with_control_token_is_rejected() {
        let mut p = pool();
        assert!(SequenceGroup::new(toks("Q [Fork]"), &mut p).is_err());
        assert!(SequenceGroup::new(vec![], &mut p).is_err());
    }

    #[test]
    fn fork_splits_current_node() {
        let mut p = pool();
        let mut g = SequenceGroup::new(toks("Q"), &mut p).unwrap();
        push(&mut g, &mut p, 0, "a1 a2 [Fork]");
        let child = g.fork_sequence(&mut p, SeqId(0)).unwrap();
        assert_eq!(child, SeqId(1));
        assert_eq!(g.sequences()[1].tokens, toks("Q a1 a2 [Fork] [Child]"));
        let root = g.tree().node(NodeId(0)).unwrap();
        assert_eq!(root.end, Some(4));
        let (sib, kid) = (root.next_sibling.unwrap(), root.first_child.unwrap());
        assert_eq!(g.sequences()[0].current_node, sib);
        assert_eq!(g.sequences()[1].current_node, kid);
        g.check_leaves().unwrap();
        assert!(g.tree().validate_with(&g).is_empty());
    }

    #[test]
    fn successive_forks_build_a_sibling_chain() {
        let mut p = pool();
        let mut g = SequenceGroup::new(toks("Q"), &mut p).unwrap();
        push(&mut g, &mut p, 0, "a [Fork]");
        g.fork_sequence(&mut p, SeqId(0)).unwrap();
        push(&mut g, &mut p, 0, "b [Fork]");
        g.fork_sequence(&mut p, SeqId(0)).unwrap();
        assert_eq!(g.sequences().len(), 3);
        let t = g.tree();
        let mut chain = 1;
        let mut cur = t.root;
        while let Some(n) = t.node(cur).unwrap().next_sibling {
            chain += 1;
            cur = n;
        }
        assert_eq!(chain, 3);
    }

    #[test]
    fn fork_requires_trailing_fork_token() {
        let mut p = pool();
        let mut g = SequenceGroup::new(toks("Q"), &mut p).unwrap();
        push(&mut g, &mut p, 0, "a1 a2");
        assert!(matches!(g.fork_sequence(&mut p, SeqId(0)), Err(AparError::Protocol(_))));
    }

    #[test]
    fn fork_capacity_failure_leaves_group_untouched() {
        let mut p = KvBlockPool::new(1, 4).unwrap();
        let mut g = SequenceGroup::new(toks("Q"), &mut p).unwrap();
        push(&mut g, &mut p, 0, "a [Fork]");
        let before = g.tree().clone();
        assert!(g.fork_sequence(&mut p, SeqId(0)).unwrap_err().is_capacity());
        assert_eq!(g.tree(), &before);
        assert_eq!(g.sequences().len(), 1);
        assert_eq!(p.usage().used_blocks, 1);
    }

    #[test]
    fn append_and_finish() {
        let mut p = pool();
        let mut g = SequenceGroup::new(toks("Q"), &mut p).unwrap();
        push(&mut g, &mut p, 0, "a1");
        assert_eq!(g.sequences()[0].tokens.len(), 2);
        assert_eq!(g.sequences()[0].table.cached_tokens(16), 2);
        let out = g.append_token(&mut p, SeqId(0), Token::eos()).unwrap();
        assert!(out.finished);
        assert_eq!(out.blocks_freed, 1);
        assert!(g.append_token(&mut p, SeqId(0), Token::new("x")).is_err());
    }

    #[test]
    fn logical_cache_counts_shared_prefix_once() {
        let mut p = pool();
        let mut g = SequenceGroup::new(toks("Q"), &mut p).unwrap();
        push(&mut g, &mut p, 0, "a1 a2 [Fork]");
        g.fork_sequence(&mut p, SeqId(0)).unwrap();
        push(&mut g, &mut p, 0, "b1");
        // Q + a1 a2 [Fork] + b1 + [Child]
        assert_eq!(g.logical_cached(&[SeqId(0), SeqId(1)]), (6, 4));
        assert_eq!(g.logical_cached(&[SeqId(1)]), (5, 3));
    }

    #[test]
    fn evict_and_rebuild_restores_sharing() {
        let mut p = KvBlockPool::new(64, 4).unwrap();
        let mut g = SequenceGroup::new(toks("Q"), &mut p).unwrap();
        push(&mut g, &mut p, 0, "a b c d e f [Fork]");
        g.fork_sequence(&mut p, SeqId(0)).unwrap();
        push(&mut g, &mut p, 0, "x y");
        push(&mut g, &mut p, 1, "k");
        let used = p.usage().used_blocks;
        g.evict(&mut p).unwrap();
        assert_eq!(p.usage().used_blocks, 0);
        let demand = g.rebuild_demand(4);
        g.rebuild(&mut p).unwrap();
        assert_eq!(p.usage().used_blocks, demand);
        assert_eq!(demand, used);
        for s in g.sequences() {
            assert_eq!(s.table.cached_tokens(4), s.tokens.len());
        }
    }
}
