//! Scripted paragraph trees and the deterministic models that replay them.

use std::collections::HashMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::LinearizedSample;
use crate::engine::LanguageModel;
use crate::error::{AparError, Result};
use crate::token::Token;
use crate::tree::{NodeId, ParagraphNode, ParagraphTree, SeqId};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptNode {
    pub id: NodeId,
    /// Content only; control tokens are implied by shape.
    pub tokens: Vec<Token>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_child: Option<NodeId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub next_sibling: Option<NodeId>,
}

impl ScriptNode {
    pub fn has_children(&self) -> bool {
        self.first_child.is_some()
    }
}

/// The paragraph tree a scripted model is meant to produce.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptTree {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    pub prompt: Vec<Token>,
    pub root: NodeId,
    pub nodes: Vec<ScriptNode>,
}

impl ScriptTree {
    /// A single-node tree: no forks.
    pub fn linear(prompt: Vec<Token>, content: Vec<Token>) -> Self {
        ScriptTree {
            name: None,
            category: None,
            prompt,
            root: NodeId(0),
            nodes: vec![ScriptNode {
                id: NodeId(0),
                tokens: content,
                first_child: None,
                next_sibling: None,
            }],
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let t: ScriptTree = serde_json::from_str(text).map_err(|e| AparError::invalid(format!("script: {e}")))?;
        t.validate()?;
        Ok(t)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("script trees serialize")
    }

    pub fn node(&self, id: NodeId) -> Option<&ScriptNode> {
        let i = id.0 as usize;
        match self.nodes.get(i) {
            Some(n) if n.id == id => Some(n),
            _ => self.nodes.iter().find(|n| n.id == id),
        }
    }

    fn expect(&self, id: NodeId) -> &ScriptNode {
        self.node(id).expect("validated script node")
    }

    /// The tree's shape with every slice empty.
    fn shape(&self) -> ParagraphTree {
        let p = self.prompt.len();
        ParagraphTree {
            prompt_len: p,
            root: self.root,
            nodes: self
                .nodes
                .iter()
                .map(|n| ParagraphNode {
                    id: n.id,
                    seq: SeqId(0),
                    start: p,
                    end: Some(p),
                    first_child: n.first_child,
                    next_sibling: n.next_sibling,
                })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.prompt.is_empty() {
            return Err(AparError::invalid("script prompt is empty"));
        }
        for t in self.prompt.iter().chain(self.nodes.iter().flat_map(|n| n.tokens.iter())) {
            if t.is_control() || t.as_str().is_empty() {
                return Err(AparError::invalid(format!("script contains reserved or empty token {t:?}")));
            }
        }
        if let Some(v) = self.shape().validate().into_iter().next() {
            return Err(AparError::structural(v.node, v.to_string()));
        }
        Ok(())
    }

    /// Restore order over node ids.
    pub fn order(&self) -> Vec<NodeId> {
        self.shape().traversal_order().expect("validated script is acyclic")
    }

    /// Content tokens in restore order: the reference output.
    pub fn flatten(&self) -> Vec<Token> {
        self.order().into_iter().flat_map(|id| self.expect(id).tokens.iter().cloned()).collect()
    }

    pub fn content_len(&self) -> usize {
        self.nodes.iter().map(|n| n.tokens.len()).sum()
    }

    pub fn fork_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.has_children()).count()
    }

    /// Threads a full decode spawns.
    pub fn thread_count(&self) -> usize {
        1 + self.fork_count()
    }

    /// The linearized training sample with control tokens, and the
    /// single-sequence tree indexing it. A node's slice is `[Child]` if it
    /// is a first child, its content, then `[Fork]` if it has children or
    /// `[EOS]` if it is a leaf.
    pub fn linearize(&self) -> (LinearizedSample, ParagraphTree) {
        let first_children: std::collections::HashSet<NodeId> =
            self.nodes.iter().filter_map(|n| n.first_child).collect();
        let p = self.prompt.len();
        let mut tokens = self.prompt.clone();
        let mut node_of = vec![None; p];
        let mut bounds: HashMap<NodeId, (usize, usize)> = HashMap::new();
        for id in self.order() {
            let n = self.expect(id);
            let start = tokens.len();
            if first_children.contains(&id) {
                tokens.push(Token::child());
            }
            tokens.extend(n.tokens.iter().cloned());
            tokens.push(if n.has_children() { Token::fork() } else { Token::eos() });
            node_of.resize(tokens.len(), Some(id));
            bounds.insert(id, (start, tokens.len()));
        }
        let tree = ParagraphTree {
            prompt_len: p,
            root: self.root,
            nodes: self
                .nodes
                .iter()
                .map(|n| {
                    let (s, e) = bounds[&n.id];
                    ParagraphNode {
                        id: n.id,
                        seq: SeqId(0),
                        start: s,
                        end: Some(e),
                        first_child: n.first_child,
                        next_sibling: n.next_sibling,
                    }
                })
                .collect(),
        };
        (LinearizedSample { tokens, node_of, prompt_len: p }, tree)
    }

    /// A model that emits the flattened content without forking.
    pub fn as_linear(&self) -> LinearModel {
        let mut stream = self.flatten();
        stream.push(Token::eos());
        LinearModel {
            prompt: self.prompt.clone(),
            stream,
        }
    }
}

fn mismatch(position: usize, expected: &Token, found: &Token) -> AparError {
    AparError::OracleMismatch {
        position,
        expected: expected.as_str().to_string(),
        found: found.clone(),
    }
}

fn check_prompt(prompt: &[Token], context: &[Token]) -> Result<()> {
    for (i, want) in prompt.iter().enumerate() {
        match context.get(i) {
            Some(t) if t == want => {}
            Some(t) => return Err(mismatch(i, want, t)),
            None => return Err(AparError::invalid("context shorter than the script prompt")),
        }
    }
    Ok(())
}

/// Replays a [`ScriptTree`]. From any context produced by a correct decode
/// it emits that thread's next token; anything else is an oracle mismatch.
#[derive(Clone, Debug)]
pub struct ScriptModel {
    script: Arc<ScriptTree>,
}

#[derive(Clone, Copy, Debug)]
enum Cursor {
    In { node: NodeId, pos: usize },
    AfterFork { node: NodeId },
}

impl ScriptModel {
    pub fn new(script: ScriptTree) -> Self {
        ScriptModel { script: Arc::new(script) }
    }

    pub fn script(&self) -> &ScriptTree {
        &self.script
    }

    fn sibling_of(&self, node: NodeId) -> NodeId {
        self.script.expect(node).next_sibling.expect("forking nodes have a sibling")
    }

    fn replay(&self, context: &[Token]) -> Result<Cursor> {
        let s = &*self.script;
        check_prompt(&s.prompt, context)?;
        let mut cur = Cursor::In { node: s.root, pos: 0 };
        for (i, tok) in context.iter().enumerate().skip(s.prompt.len()) {
            let (node, pos) = match cur {
                Cursor::AfterFork { node } if tok.is_child() => {
                    let child = s.expect(node).first_child.expect("forking nodes have a child");
                    cur = Cursor::In { node: child, pos: 0 };
                    continue;
                }
                Cursor::AfterFork { node } => (self.sibling_of(node), 0),
                Cursor::In { node, pos } => (node, pos),
            };
            let n = s.expect(node);
            if let Some(want) = n.tokens.get(pos) {
                if tok != want {
                    return Err(mismatch(i, want, tok));
                }
                cur = Cursor::In { node, pos: pos + 1 };
            } else if n.has_children() {
                if !tok.is_fork() {
                    return Err(mismatch(i, &Token::fork(), tok));
                }
                cur = Cursor::AfterFork { node };
            } else {
                return Err(mismatch(i, &Token::eos(), tok));
            }
        }
        Ok(cur)
    }
}

impl LanguageModel for ScriptModel {
    fn next_token(&self, context: &[Token]) -> Result<Token> {
        let (node, pos) = match self.replay(context)? {
            Cursor::AfterFork { node } => (self.sibling_of(node), 0),
            Cursor::In { node, pos } => (node, pos),
        };
        let n = self.script.expect(node);
        Ok(match n.tokens.get(pos) {
            Some(t) => t.clone(),
            None if n.has_children() => Token::fork(),
            None => Token::eos(),
        })
    }
}

/// Emits a fixed stream after a fixed prompt.
#[derive(Clone, Debug)]
pub struct LinearModel {
    pub prompt: Vec<Token>,
    pub stream: Vec<Token>,
}

impl LanguageModel for LinearModel {
    fn next_token(&self, context: &[Token]) -> Result<Token> {
        check_prompt(&self.prompt, context)?;
        let done = context.len() - self.prompt.len();
        for (k, (got, want)) in context[self.prompt.len()..].iter().zip(&self.stream).enumerate() {
            if got != want {
                return Err(mismatch(self.prompt.len() + k, want, got));
            }
        }
        self.stream
            .get(done)
            .cloned()
            .ok_or_else(|| AparError::invalid("context extends past the end of the stream"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RandomScriptParams {
    /// Upper bound on node count; always odd in the result.
    pub max_nodes: usize,
    pub min_node_len: usize,
    pub max_node_len: usize,
    pub prompt_len: usize,
}

impl Default for RandomScriptParams {
    fn default() -> Self {
        RandomScriptParams {
            max_nodes: 9,
            min_node_len: 8,
            max_node_len: 24,
            prompt_len: 8,
        }
    }
}

pub const RANDOM_VOCAB: usize = 64;

/// A seeded random well-formed script, grown by expanding random leaves
/// into a child/sibling pair.
pub fn random_script(seed: u64, params: RandomScriptParams) -> ScriptTree {
    assert!(params.min_node_len <= params.max_node_len, "min_node_len exceeds max_node_len");
    assert!(params.prompt_len > 0, "prompt must be non-empty");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let word = |rng: &mut ChaCha8Rng| Token::new(&format!("w{}", rng.gen_range(0..RANDOM_VOCAB)));
    let prompt = (0..params.prompt_len).map(|_| word(&mut rng)).collect();
    let target = rng.gen_range(0..=params.max_nodes.max(1).saturating_sub(1) / 2);
    let mut nodes = vec![ScriptNode { id: NodeId(0), tokens: Vec::new(), first_child: None, next_sibling: None }];
    for _ in 0..target {
        let leaves: Vec<usize> = (0..nodes.len()).filter(|&i| nodes[i].first_child.is_none()).collect();
        let &leaf = leaves.choose(&mut rng).expect("a tree always has a leaf");
        let c = NodeId(nodes.len() as u32);
        let s = NodeId(nodes.len() as u32 + 1);
        nodes[leaf].first_child = Some(c);
        nodes[leaf].next_sibling = Some(s);
        for id in [c, s] {
            nodes.push(ScriptNode { id, tokens: Vec::new(), first_child: None, next_sibling: None });
        }
    }
    for n in &mut nodes {
        let len = rng.gen_range(params.min_node_len..=params.max_node_len);
        n.tokens = (0..len).map(|_| word(&mut rng)).collect();
    }
    ScriptTree {
        name: Some(format!("random-{seed}")),
        category: None,
        prompt,
        root: NodeId(0),
        nodes,
    }
}
