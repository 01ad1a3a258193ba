//! Turning assistant responses into paragraph-tree training samples.
//!
//! A response is an ordered list, a set of paragraphs, or unstructured text.
//! Lists and paragraphs become trees whose restore order reproduces the
//! response; unstructured text becomes a single node.

use std::io::BufRead;
use std::sync::OnceLock;

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::attention::{build_loss_mask, LinearizedSample};
use crate::error::{AparError, Result};
use crate::script::{ScriptNode, ScriptTree};
use crate::token::{tokenize, untokenize};
use crate::tree::{NodeId, ParagraphTree};

pub const MIN_LIST_POINTS: usize = 3;
pub const MIN_DETAIL_CHARS: usize = 10;

fn list_item_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*(\d+)\.\s+([^:\n]{1,80}):\s*(.+)$").expect("valid regex"))
}

fn ambiguous_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"```|\$[^$\n]+\$|\\\[|\\\(|https?://").expect("valid regex"))
}

fn blank_line_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\n[ \t\r]*\n").expect("valid regex"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conversation {
    pub id: String,
    pub turns: Vec<Turn>,
}

impl Conversation {
    /// Roles alternate, starting with the user.
    pub fn validate(&self) -> Result<()> {
        for (i, t) in self.turns.iter().enumerate() {
            let want = if i % 2 == 0 { Role::User } else { Role::Assistant };
            if t.role != want {
                return Err(AparError::invalid(format!("conversation {}: turn {i} should be {want:?}", self.id)));
            }
        }
        Ok(())
    }

    pub fn assistant_turns(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.turns.len()).filter(|&i| self.turns[i].role == Role::Assistant)
    }
}

/// One conversation per non-blank line.
pub fn read_conversations<R: BufRead>(reader: R) -> Result<Vec<Conversation>> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| AparError::invalid(format!("line {}: {e}", n + 1)))?;
        if line.trim().is_empty() {
            continue;
        }
        let c: Conversation =
            serde_json::from_str(&line).map_err(|e| AparError::invalid(format!("line {}: {e}", n + 1)))?;
        c.validate()?;
        out.push(c);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleKind {
    OrderedList,
    Paragraph,
    Unstructured,
}

/// A tree whose nodes hold response text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextTree {
    pub root: usize,
    pub nodes: Vec<TextNode>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextNode {
    pub text: String,
    pub first_child: Option<usize>,
    pub next_sibling: Option<usize>,
}

impl TextTree {
    fn push(&mut self, text: impl Into<String>) -> usize {
        self.nodes.push(TextNode { text: text.into(), first_child: None, next_sibling: None });
        self.nodes.len() - 1
    }

    pub fn fork_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.first_child.is_some()).count()
    }

    /// Node texts in restore order.
    pub fn restore_texts(&self) -> Vec<&str> {
        let mut out = Vec::new();
        let mut stack = vec![self.root];
        while let Some(i) = stack.pop() {
            let n = &self.nodes[i];
            out.push(n.text.as_str());
            stack.extend(n.next_sibling);
            stack.extend(n.first_child);
        }
        out
    }

    pub fn to_script(&self, prompt: &str) -> Result<ScriptTree> {
        let prompt = tokenize(prompt);
        if prompt.is_empty() {
            return Err(AparError::invalid("empty prompt"));
        }
        let t = ScriptTree {
            name: None,
            category: None,
            prompt,
            root: NodeId(self.root as u32),
            nodes: self
                .nodes
                .iter()
                .enumerate()
                .map(|(i, n)| ScriptNode {
                    id: NodeId(i as u32),
                    tokens: tokenize(&n.text),
                    first_child: n.first_child.map(|c| NodeId(c as u32)),
                    next_sibling: n.next_sibling.map(|c| NodeId(c as u32)),
                })
                .collect(),
        };
        t.validate()?;
        Ok(t)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ListRejection {
    NoItems,
    TooFewPoints(usize),
    ShortDetail { item: usize },
}

struct ListItem {
    head: String,
    detail: String,
}

/// Ordered-list extraction with the reason when it does not apply.
///
/// Preamble, if any, is the root and forks into the head chain with an
/// empty sibling. Heads chain through `next_sibling`, each forking its
/// detail. The last head's sibling holds text after a blank line following
/// the last item. Other unmatched lines extend the preceding detail.
pub fn try_ordered_list(text: &str) -> std::result::Result<TextTree, ListRejection> {
    let re = list_item_re();
    let mut preamble: Vec<&str> = Vec::new();
    let mut items: Vec<ListItem> = Vec::new();
    let mut pending: Vec<&str> = Vec::new();
    for line in text.lines() {
        if let Some(c) = re.captures(line) {
            if let Some(last) = items.last_mut() {
                append_lines(&mut last.detail, &pending);
            }
            pending.clear();
            let detail = c[3].trim().to_string();
            if detail.chars().count() < MIN_DETAIL_CHARS {
                return Err(ListRejection::ShortDetail { item: items.len() + 1 });
            }
            items.push(ListItem { head: format!("{}. {}:", &c[1], c[2].trim()), detail });
        } else if items.is_empty() {
            preamble.push(line);
        } else {
            pending.push(line);
        }
    }
    if items.is_empty() {
        return Err(ListRejection::NoItems);
    }
    if items.len() < MIN_LIST_POINTS {
        return Err(ListRejection::TooFewPoints(items.len()));
    }
    let split = pending.iter().position(|l| l.trim().is_empty()).unwrap_or(pending.len());
    append_lines(&mut items.last_mut().expect("non-empty").detail, &pending[..split]);
    let conclusion = pending[split..].join("\n").trim().to_string();

    let mut t = TextTree { root: 0, nodes: Vec::new() };
    let preamble = preamble.join("\n").trim().to_string();
    let mut prev: Option<usize> = None;
    if !preamble.is_empty() {
        let root = t.push(preamble);
        let tail = t.push("");
        prev = Some(root);
        t.nodes[root].next_sibling = Some(tail);
    }
    for it in items {
        let head = t.push(it.head);
        let detail = t.push(it.detail);
        t.nodes[head].first_child = Some(detail);
        match prev {
            Some(p) if t.nodes[p].first_child.is_none() => t.nodes[p].first_child = Some(head),
            Some(p) => t.nodes[p].next_sibling = Some(head),
            None => t.root = head,
        }
        prev = Some(head);
    }
    let end = t.push(conclusion);
    t.nodes[prev.expect("at least one item")].next_sibling = Some(end);
    Ok(t)
}

fn append_lines(detail: &mut String, lines: &[&str]) {
    for l in lines.iter().map(|l| l.trim()).filter(|l| !l.is_empty()) {
        detail.push('\n');
        detail.push_str(l);
    }
}

pub fn extract_ordered_list(text: &str) -> Option<TextTree> {
    try_ordered_list(text).ok()
}

/// Splits after the first `.`, `!`, `?` or `:` followed by whitespace or the
/// end: `(first sentence, remainder)`.
pub fn split_first_sentence(text: &str) -> (&str, &str) {
    let bytes = text.as_bytes();
    for (i, &b) in bytes.iter().enumerate() {
        if matches!(b, b'.' | b'!' | b'?' | b':') && bytes.get(i + 1).map_or(true, |c| c.is_ascii_whitespace()) {
            return (text[..=i].trim(), text[i + 1..].trim());
        }
    }
    (text.trim(), "")
}

/// Paragraph extraction. Each paragraph of two or more sentences is a chain
/// node holding its first sentence and forking the rest. Single-sentence
/// paragraphs join the next chain node's text, or the empty terminal node
/// after the chain if none follows.
pub fn extract_paragraphs(text: &str) -> Option<TextTree> {
    let mut t = TextTree { root: 0, nodes: Vec::new() };
    let mut carry: Vec<&str> = Vec::new();
    let mut prev: Option<usize> = None;
    for para in blank_line_re().split(text).map(str::trim).filter(|p| !p.is_empty()) {
        let (first, rest) = split_first_sentence(para);
        if rest.is_empty() {
            carry.push(para);
            continue;
        }
        carry.push(first);
        let node = t.push(carry.join("\n"));
        carry.clear();
        let detail = t.push(rest);
        t.nodes[node].first_child = Some(detail);
        match prev {
            Some(p) => t.nodes[p].next_sibling = Some(node),
            None => t.root = node,
        }
        prev = Some(node);
    }
    let last = prev?;
    let end = t.push(carry.join("\n"));
    t.nodes[last].next_sibling = Some(end);
    Some(t)
}

pub fn has_ambiguous_pattern(text: &str) -> bool {
    ambiguous_re().is_match(text)
}

pub fn classify_response(text: &str) -> SampleKind {
    if has_ambiguous_pattern(text) {
        SampleKind::Unstructured
    } else if extract_ordered_list(text).is_some() {
        SampleKind::OrderedList
    } else if extract_paragraphs(text).is_some() {
        SampleKind::Paragraph
    } else {
        SampleKind::Unstructured
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub conversation: String,
    pub turn: usize,
    pub kind: SampleKind,
    pub prompt_text: String,
    pub response_text: String,
    pub tokens: LinearizedSample,
    pub tree: ParagraphTree,
    pub loss_mask: Vec<bool>,
}

impl TrainingSample {
    pub fn fork_count(&self) -> usize {
        self.tokens.tokens.iter().filter(|t| t.is_fork()).count()
    }

    /// Response text rebuilt from the tree.
    pub fn reconstruct(&self) -> Result<String> {
        Ok(untokenize(&self.tree.restore(&self.tokens.tokens[..], true)?))
    }
}

/// Equality up to whitespace.
pub fn same_modulo_whitespace(a: &str, b: &str) -> bool {
    a.chars().filter(|c| !c.is_whitespace()).eq(b.chars().filter(|c| !c.is_whitespace()))
}

pub fn build_training_sample(conv: &Conversation, turn: usize) -> Result<TrainingSample> {
    let t = conv
        .turns
        .get(turn)
        .ok_or_else(|| AparError::invalid(format!("conversation {} has no turn {turn}", conv.id)))?;
    if t.role != Role::Assistant || turn == 0 {
        return Err(AparError::invalid(format!("conversation {} turn {turn} is not an assistant turn", conv.id)));
    }
    let prompt_text = &conv.turns[turn - 1].text;
    let kind = classify_response(&t.text);
    let tree = match kind {
        SampleKind::OrderedList => extract_ordered_list(&t.text),
        SampleKind::Paragraph => extract_paragraphs(&t.text),
        SampleKind::Unstructured => None,
    }
    .unwrap_or_else(|| TextTree {
        root: 0,
        nodes: vec![TextNode { text: t.text.clone(), first_child: None, next_sibling: None }],
    });
    let script = tree.to_script(prompt_text)?;
    let (tokens, ptree) = script.linearize();
    let loss_mask = build_loss_mask(&tokens);
    Ok(TrainingSample {
        conversation: conv.id.clone(),
        turn,
        kind,
        prompt_text: prompt_text.clone(),
        response_text: t.text.clone(),
        tokens,
        tree: ptree,
        loss_mask,
    })
}

/// Samples for every assistant turn, in input order.
pub fn process_corpus(convs: &[Conversation]) -> Result<Vec<TrainingSample>> {
    let per_conv: Result<Vec<Vec<TrainingSample>>> = convs
        .par_iter()
        .map(|c| c.assistant_turns().map(|i| build_training_sample(c, i)).collect())
        .collect();
    Ok(per_conv?.into_iter().flatten().collect())
}

/// Subsamples so structured : unstructured is `structured : unstructured`,
/// keeping the smaller side whole. Input order is preserved.
pub fn apply_ratio(samples: Vec<TrainingSample>, structured: u32, unstructured: u32, seed: u64) -> Vec<TrainingSample> {
    let (s_idx, u_idx): (Vec<usize>, Vec<usize>) =
        (0..samples.len()).partition(|&i| samples[i].kind != SampleKind::Unstructured);
    let (s, u) = (s_idx.len() as u64, u_idx.len() as u64);
    let (a, b) = (u64::from(structured), u64::from(unstructured));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![true; samples.len()];
    let mut thin = |pool: &[usize], target: u64, rng: &mut ChaCha8Rng| {
        let chosen: std::collections::HashSet<usize> =
            sample_indices(rng, pool.len(), target as usize).into_iter().map(|k| pool[k]).collect();
        for &i in pool {
            keep[i] = chosen.contains(&i);
        }
    };
    if a == 0 {
        thin(&s_idx, 0, &mut rng);
    } else if b == 0 {
        thin(&u_idx, 0, &mut rng);
    } else if s * b > u * a {
        thin(&s_idx, u * a / b, &mut rng);
    } else if u * a > s * b {
        thin(&u_idx, s * b / a, &mut rng);
    }
    samples.into_iter().zip(keep).filter_map(|(x, k)| k.then_some(x)).collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub conversations: usize,
    pub samples: usize,
    pub ordered_list: usize,
    pub paragraph: usize,
    pub unstructured: usize,
    /// Conversations with at least one ordered-list response.
    pub list_coverage: f64,
    pub rejected_too_few_points: usize,
    pub rejected_short_detail: usize,
    pub forks: usize,
}

pub fn corpus_stats(conversations: usize, samples: &[TrainingSample]) -> CorpusStats {
    let mut st = CorpusStats { conversations, samples: samples.len(), ..CorpusStats::default() };
    let mut with_list = std::collections::HashSet::new();
    for s in samples {
        match s.kind {
            SampleKind::OrderedList => {
                st.ordered_list += 1;
                with_list.insert(s.conversation.as_str());
            }
            SampleKind::Paragraph => st.paragraph += 1,
            SampleKind::Unstructured => st.unstructured += 1,
        }
        match try_ordered_list(&s.response_text) {
            Err(ListRejection::TooFewPoints(_)) => st.rejected_too_few_points += 1,
            Err(ListRejection::ShortDetail { .. }) => st.rejected_short_detail += 1,
            _ => {}
        }
        st.forks += s.fork_count();
    }
    if conversations > 0 {
        st.list_coverage = with_list.len() as f64 / conversations as f64;
    }
    st
}

#[cfg(test)]
mod tests {
    use super::*;

    const LIST: &str = "Intro:\n1. Cost: saves money over long time.\n2. Health: improves wellbeing every day.\n3. Time: reduces the daily commute a lot.";

    fn conv(user: &str, assistant: &str) -> Conversation {
        Conversation {
            id: "c".into(),
            turns: vec![
                Turn { role: Role::User, text: user.into() },
                Turn { role: Role::Assistant, text: assistant.into() },
            ],
        }
    }

    #[test]
    fn list_with_preamble() {
        let t = extract_ordered_list(LIST).unwrap();
        assert_eq!(
            t.restore_texts(),
            vec![
                "Intro:",
                "1. Cost:",
                "saves money over long time.",
                "2. Health:",
                "improves wellbeing every day.",
                "3. Time:",
                "reduces the daily commute a lot.",
                "",
                "",
            ]
        );
        assert_eq!(t.fork_count(), 4);
        assert_eq!(t.nodes[t.root].text, "Intro:");
    }

    #[test]
    fn list_rejections() {
        assert_eq!(
            try_ordered_list("1. A: a long enough detail\n2. B: another long detail").unwrap_err(),
            ListRejection::TooFewPoints(2)
        );
        assert_eq!(
            try_ordered_list("1. A: a long enough detail\n2. B: too short\n3. C: third long detail").unwrap_err(),
            ListRejection::ShortDetail { item: 2 }
        );
        assert_eq!("too short".len(), 9);
        assert_eq!(try_ordered_list("no list here").unwrap_err(), ListRejection::NoItems);
    }

    #[test]
    fn list_without_preamble_and_conclusion() {
        let text = "1. A: first detail text\ncontinued here\n2. B: second detail text\n3. C: third detail text\n\nIn short, all good.";
        let t = extract_ordered_list(text).unwrap();
        assert_eq!(t.fork_count(), 3);
        assert_eq!(t.nodes[t.root].text, "1. A:");
        let texts = t.restore_texts();
        assert_eq!(texts[1], "first detail text\ncontinued here");
        assert_eq!(*texts.last().unwrap(), "In short, all good.");
    }

    #[test]
    fn paragraphs() {
        let t = extract_paragraphs("One. Two. Three.\n\nFour! Five? Six.").unwrap();
        assert_eq!(t.restore_texts(), vec!["One.", "Two. Three.", "Four!", "Five? Six.", ""]);
        assert_eq!(t.fork_count(), 2);
        assert!(extract_paragraphs("Just one sentence.").is_none());
        let mixed = extract_paragraphs("Alone here.\n\nFirst part. Second part.").unwrap();
        assert_eq!(mixed.fork_count(), 1);
        assert_eq!(mixed.restore_texts(), vec!["Alone here.\nFirst part.", "Second part.", ""]);
    }

    #[test]
    fn sentence_split() {
        assert_eq!(split_first_sentence("v1.2 is out. Yes"), ("v1.2 is out.", "Yes"));
        assert_eq!(split_first_sentence("Note: fine"), ("Note:", "fine"));
        assert_eq!(split_first_sentence("no end"), ("no end", ""));
    }

    #[test]
    fn classification() {
        assert_eq!(classify_response("```python\nprint(1)\n```"), SampleKind::Unstructured);
        assert_eq!(classify_response(LIST), SampleKind::OrderedList);
        assert_eq!(classify_response("A b. C d.\n\nE f. G h."), SampleKind::Paragraph);
        assert_eq!(classify_response("see https://x.org. Then more."), SampleKind::Unstructured);
        assert_eq!(classify_response("cost is $x$ here. ok."), SampleKind::Unstructured);
        assert_eq!(classify_response("short"), SampleKind::Unstructured);
    }

    #[test]
    fn samples_round_trip() {
        for text in [LIST, "A b. C d.\n\nE f. G h.", "```code``` here", "x [Fork] y. z."] {
            let s = build_training_sample(&conv("Why?", text), 1).unwrap();
            assert!(s.tree.validate_with(&s.tokens.tokens[..]).is_empty());
            assert!(same_modulo_whitespace(&s.reconstruct().unwrap(), text), "{text}");
            assert_eq!(s.loss_mask.len(), s.tokens.len());
        }
    }

    #[test]
    fn unstructured_sample_shape() {
        let s = build_training_sample(&conv("Q", "```x```"), 1).unwrap();
        assert_eq!(s.kind, SampleKind::Unstructured);
        assert_eq!(s.fork_count(), 0);
        assert_eq!(s.tree.len(), 1);
        let p = s.tokens.prompt_len;
        assert!(s.loss_mask[..p].iter().all(|m| !m));
        assert!(s.loss_mask[p..].iter().all(|&m| m));
    }

    #[test]
    fn list_sample_fork_pairs() {
        let s = build_training_sample(&conv("Q", LIST), 1).unwrap();
        assert_eq!(s.fork_count(), 4);
        assert_eq!(s.tokens.tokens.iter().filter(|t| t.is_child()).count(), 4);
        let bare = LIST.trim_start_matches("Intro:\n");
        assert_eq!(build_training_sample(&conv("Q", bare), 1).unwrap().fork_count(), 3);
    }

    #[test]
    fn non_assistant_turn_is_rejected() {
        assert!(build_training_sample(&conv("Q", LIST), 0).is_err());
        assert!(build_training_sample(&conv("Q", LIST), 5).is_err());
    }

    #[test]
    fn ratio_keeps_minority_whole() {
        let mut convs = Vec::new();
        for i in 0..6 {
            convs.push(conv("Q", if i < 4 { "```u```" } else { LIST }));
        }
        let samples = process_corpus(&convs).unwrap();
        let kept = apply_ratio(samples.clone(), 1, 1, 7);
        assert_eq!(kept.len(), 4);
        assert_eq!(kept.iter().filter(|s| s.kind == SampleKind::OrderedList).count(), 2);
        assert_eq!(apply_ratio(samples.clone(), 1, 2, 7).len(), 6);
        assert_eq!(apply_ratio(samples.clone(), 1, 1, 7), apply_ratio(samples, 1, 1, 7));
    }

    #[test]
    fn read_jsonl() {
        let text = r#"{"id":"a","turns":[{"role":"user","text":"hi"},{"role":"assistant","text":"Yo. There."}]}

{"id":"b","turns":[{"role":"assistant","text":"x"}]}"#;
        assert!(read_conversations(text.as_bytes()).is_err());
        let ok = read_conversations(text.lines().next().unwrap().as_bytes()).unwrap();
        assert_eq!(ok.len(), 1);
    }
}
