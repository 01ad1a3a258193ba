//! The decode loop.
//!
//! [`apar_step`] runs one step over a snapshot of the group's sequences: for
//! each unfinished sequence it samples a token, forks first if the sequence
//! ends in `[Fork]`, then appends the sample. Sequences created during a step
//! are first sampled on the next step, so one step is one batch.

use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{AparError, Result};
use crate::kv::BlockManager;
use crate::sequence::SequenceGroup;
use crate::token::Token;
use crate::tree::SeqId;

pub const DEFAULT_MAX_SEQ_LEN: usize = 2048;
pub const DEFAULT_MAX_STEPS: usize = 4096;

/// A next-token source. Must be deterministic for a given context.
pub trait LanguageModel: Send + Sync {
    fn next_token(&self, context: &[Token]) -> Result<Token>;
}

impl<M: LanguageModel + ?Sized> LanguageModel for &M {
    fn next_token(&self, context: &[Token]) -> Result<Token> {
        (**self).next_token(context)
    }
}

impl<M: LanguageModel + ?Sized> LanguageModel for Box<M> {
    fn next_token(&self, context: &[Token]) -> Result<Token> {
        (**self).next_token(context)
    }
}

impl<M: LanguageModel + ?Sized> LanguageModel for Arc<M> {
    fn next_token(&self, context: &[Token]) -> Result<Token> {
        (**self).next_token(context)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecodeLimits {
    pub max_steps: usize,
    pub max_seq_len: usize,
}

impl Default for DecodeLimits {
    fn default() -> Self {
        DecodeLimits {
            max_steps: DEFAULT_MAX_STEPS,
            max_seq_len: DEFAULT_MAX_SEQ_LEN,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SampleRecord {
    pub seq: SeqId,
    pub token: Token,
    /// Tokens visible when this one was predicted.
    pub context_len: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ForkRecord {
    pub parent: SeqId,
    pub child: SeqId,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub samples: Vec<SampleRecord>,
    pub forks: Vec<ForkRecord>,
    pub aborted_forks: Vec<SeqId>,
    pub forced_eos: Vec<SeqId>,
    pub slots_appended: usize,
    pub blocks_freed: usize,
    pub used_blocks: usize,
    pub physical_slots: usize,
    /// Logical cache of the sequences live during the step, shared prefix
    /// counted once, measured after this step's appends.
    pub logical_slots: usize,
    /// As `logical_slots`, control tokens excluded.
    pub logical_content: usize,
}

impl StepRecord {
    pub fn attended(&self) -> usize {
        self.samples.iter().map(|s| s.context_len).sum()
    }

    pub fn content_samples(&self) -> usize {
        self.samples.iter().filter(|s| !s.token.is_control()).count()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct DecodeTrace {
    pub prompt_len: usize,
    pub records: Vec<StepRecord>,
    pub truncated: bool,
}

impl DecodeTrace {
    pub fn steps(&self) -> usize {
        self.records.len()
    }

    pub fn fork_count(&self) -> usize {
        self.records.iter().map(|r| r.forks.len()).sum()
    }

    pub fn samples(&self) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().flat_map(|r| r.samples.iter())
    }

    /// One JSON object per step.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Apar,
    Ar,
}

#[derive(Clone, Debug)]
pub struct DecodeOutput {
    pub mode: DecodeMode,
    /// Restored generation without control tokens.
    pub tokens: Vec<Token>,
    pub group: SequenceGroup,
    pub trace: DecodeTrace,
}

impl DecodeOutput {
    pub fn text(&self) -> String {
        crate::token::detokenize(&self.tokens)
    }
}

fn check_sample(token: &Token) -> Result<()> {
    if token.as_str().is_empty() || token.is_child() || token.as_str().chars().any(char::is_whitespace) {
        return Err(AparError::InvalidToken(token.clone()));
    }
    Ok(())
}

/// One decode step over every unfinished sequence of `group`.
pub fn apar_step<M, P>(group: &mut SequenceGroup, model: &M, pool: &mut P, step: usize) -> Result<StepRecord>
where
    M: LanguageModel + ?Sized,
    P: BlockManager + ?Sized,
{
    let snapshot = group.unfinished();
    if snapshot.is_empty() {
        return Err(AparError::protocol("step on a group whose sequences have all finished"));
    }
    let mut rec = StepRecord {
        step,
        samples: Vec::with_capacity(snapshot.len()),
        forks: Vec::new(),
        aborted_forks: Vec::new(),
        forced_eos: Vec::new(),
        slots_appended: 0,
        blocks_freed: 0,
        used_blocks: 0,
        physical_slots: 0,
        logical_slots: 0,
        logical_content: 0,
    };
    let mut live = snapshot.clone();
    for sid in snapshot {
        let seq = group.sequence(sid)?;
        let x = model.next_token(&seq.tokens)?;
        check_sample(&x)?;
        rec.samples.push(SampleRecord {
            seq: sid,
            token: x.clone(),
            context_len: seq.tokens.len(),
        });
        if seq.last_token().is_some_and(Token::is_fork) {
            match group.fork_sequence(pool, sid) {
                Ok(child) => {
                    rec.forks.push(ForkRecord { parent: sid, child });
                    rec.slots_appended += 1;
                    live.push(child);
                }
                Err(e) if e.is_capacity() => rec.aborted_forks.push(sid),
                Err(e) => return Err(e),
            }
        }
        let out = group.append_token(pool, sid, x)?;
        rec.slots_appended += 1;
        rec.blocks_freed += out.blocks_freed;
    }
    let (all, content) = group.logical_cached(&live);
    rec.logical_slots = all;
    rec.logical_content = content;
    let usage = pool.usage();
    rec.used_blocks = usage.used_blocks;
    rec.physical_slots = usage.used_slots;
    Ok(rec)
}

fn enforce_seq_len<P: BlockManager + ?Sized>(
    group: &mut SequenceGroup,
    pool: &mut P,
    rec: &mut StepRecord,
    max_seq_len: usize,
) -> Result<()> {
    for sid in group.unfinished() {
        if group.sequence(sid)?.tokens.len() >= max_seq_len {
            rec.blocks_freed += group.force_finish(pool, sid)?;
            rec.forced_eos.push(sid);
        }
    }
    Ok(())
}

fn force_all<P: BlockManager + ?Sized>(group: &mut SequenceGroup, pool: &mut P, trace: &mut DecodeTrace) -> Result<()> {
    let pending = group.unfinished();
    if pending.is_empty() {
        return Ok(());
    }
    trace.truncated = true;
    let mut freed = 0;
    for &sid in &pending {
        freed += group.force_finish(pool, sid)?;
    }
    if let Some(last) = trace.records.last_mut() {
        last.forced_eos.extend(pending);
        last.blocks_freed += freed;
    }
    Ok(())
}

/// Decodes `prompt` to completion with forking enabled.
pub fn apar_decode<M, P>(prompt: Vec<Token>, model: &M, pool: &mut P, limits: DecodeLimits) -> Result<DecodeOutput>
where
    M: LanguageModel + ?Sized,
    P: BlockManager + ?Sized,
{
    let mut group = SequenceGroup::new(prompt, pool)?;
    let mut trace = DecodeTrace {
        prompt_len: group.prompt().len(),
        ..DecodeTrace::default()
    };
    while !group.is_finished() {
        if trace.records.len() >= limits.max_steps {
            break;
        }
        let mut rec = apar_step(&mut group, model, pool, trace.records.len() + 1)?;
        enforce_seq_len(&mut group, pool, &mut rec, limits.max_seq_len)?;
        if !rec.forced_eos.is_empty() {
            trace.truncated = true;
        }
        trace.records.push(rec);
    }
    force_all(&mut group, pool, &mut trace)?;
    group.release_all(pool)?;
    let tokens = group.restore()?;
    Ok(DecodeOutput {
        mode: DecodeMode::Apar,
        tokens,
        group,
        trace,
    })
}

/// Plain auto-regressive decoding: one sequence, one token per step, no
/// forking. Every token stays cached until `[EOS]`.
pub fn ar_decode<M, P>(prompt: Vec<Token>, model: &M, pool: &mut P, limits: DecodeLimits) -> Result<DecodeOutput>
where
    M: LanguageModel + ?Sized,
    P: BlockManager + ?Sized,
{
    let mut group = SequenceGroup::new(prompt, pool)?;
    let mut trace = DecodeTrace {
        prompt_len: group.prompt().len(),
        ..DecodeTrace::default()
    };
    let sid = SeqId(0);
    while !group.is_finished() && trace.records.len() < limits.max_steps {
        let context = &group.sequence(sid)?.tokens;
        let context_len = context.len();
        let x = model.next_token(context)?;
        check_sample(&x)?;
        let out = group.append_token(pool, sid, x.clone())?;
        let (all, content) = group.logical_cached(&[sid]);
        let usage = pool.usage();
        let mut rec = StepRecord {
            step: trace.records.len() + 1,
            samples: vec![SampleRecord { seq: sid, token: x, context_len }],
            forks: Vec::new(),
            aborted_forks: Vec::new(),
            forced_eos: Vec::new(),
            slots_appended: 1,
            blocks_freed: out.blocks_freed,
            used_blocks: usage.used_blocks,
            physical_slots: usage.used_slots,
            logical_slots: all,
            logical_content: content,
        };
        enforce_seq_len(&mut group, pool, &mut rec, limits.max_seq_len)?;
        if !rec.forced_eos.is_empty() {
            trace.truncated = true;
        }
        trace.records.push(rec);
    }
    force_all(&mut group, pool, &mut trace)?;
    group.release_all(pool)?;
    let tokens = group.restore()?;
    Ok(DecodeOutput {
        mode: DecodeMode::Ar,
        tokens,
        group,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::kv::{KvBlockPool, DEFAULT_BLOCK_SIZE};
    use crate::script::ScriptModel;
    use crate::token::toks;

    fn pool() -> KvBlockPool {
        KvBlockPool::new(1024, DEFAULT_BLOCK_SIZE).unwrap()
    }

    #[test]
    fn fig3_schedule_step_by_step() {
        let script = fixtures::fig3_toy();
        let model = ScriptModel::new(script.clone());
        let mut p = pool();
        let out = apar_decode(script.prompt.clone(), &model, &mut p, DecodeLimits::default()).unwrap();
        let steps: Vec<Vec<(u32, &str)>> = out
            .trace
            .records
            .iter()
            .map(|r| r.samples.iter().map(|s| (s.seq.0, s.token.as_str())).collect())
            .collect();
        assert_eq!(
            steps,
            vec![
                vec![(0, "a1")],
                vec![(0, "a2")],
                vec![(0, "[Fork]")],
                vec![(0, "b1")],
                vec![(0, "[EOS]"), (1, "d1")],
                vec![(1, "d2")],
                vec![(1, "[EOS]")],
            ]
        );
        assert_eq!(out.trace.records[3].forks, vec![ForkRecord { parent: SeqId(0), child: SeqId(1) }]);
        assert_eq!(out.tokens, toks("a1 a2 d1 d2 b1"));
        assert_eq!(out.group.tree().len(), 3);
        assert_eq!(out.group.thread_count(), 2);
        assert!(!out.trace.truncated);
        assert_eq!(p.usage().used_blocks, 0);
    }

    #[test]
    fn ar_decode_of_linear_model() {
        let script = fixtures::fig3_toy();
        let model = script.as_linear();
        let mut p = pool();
        let out = ar_decode(script.prompt.clone(), &model, &mut p, DecodeLimits::default()).unwrap();
        assert_eq!(out.tokens, toks("a1 a2 d1 d2 b1"));
        assert_eq!(out.trace.steps(), 6);
    }

    #[test]
    fn linear_script_peak_cache_includes_eos() {
        let script = crate::script::ScriptTree::linear(toks("P"), toks("x y"));
        let mut p = pool();
        let out = ar_decode(script.prompt.clone(), &script.as_linear(), &mut p, DecodeLimits::default()).unwrap();
        assert_eq!(out.tokens, toks("x y"));
        assert_eq!(out.trace.steps(), 3);
        let peak = out.trace.records.iter().map(|r| r.logical_slots).max().unwrap();
        assert_eq!(peak, 1 + 3);
    }

    #[test]
    fn apar_without_forks_matches_ar() {
        let script = crate::script::ScriptTree::linear(toks("P q"), toks("x y z"));
        let (mut p1, mut p2) = (pool(), pool());
        let a = apar_decode(script.prompt.clone(), &ScriptModel::new(script.clone()), &mut p1, DecodeLimits::default()).unwrap();
        let b = ar_decode(script.prompt.clone(), &script.as_linear(), &mut p2, DecodeLimits::default()).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.trace.steps(), b.trace.steps());
    }

    #[test]
    fn step_on_finished_group_is_an_error() {
        let script = fixtures::fig3_toy();
        let model = ScriptModel::new(script.clone());
        let mut p = pool();
        let mut out = apar_decode(script.prompt.clone(), &model, &mut p, DecodeLimits::default()).unwrap();
        assert!(matches!(apar_step(&mut out.group, &model, &mut p, 8), Err(AparError::Protocol(_))));
    }

    #[test]
    fn step_limit_truncates() {
        let script = fixtures::fig3_toy();
        let model = ScriptModel::new(script.clone());
        let mut p = pool();
        let limits = DecodeLimits { max_steps: 3, ..DecodeLimits::default() };
        let out = apar_decode(script.prompt.clone(), &model, &mut p, limits).unwrap();
        assert!(out.trace.truncated);
        assert_eq!(out.trace.steps(), 3);
        assert_eq!(out.tokens, toks("a1 a2"));
        assert_eq!(p.usage().used_blocks, 0);
        let out = ar_decode(script.prompt.clone(), &script.as_linear(), &mut pool(), limits).unwrap();
        assert!(out.trace.truncated);
    }

    #[test]
    fn seq_len_limit_truncates() {
        let script = fixtures::big_tree();
        let model = ScriptModel::new(script.clone());
        let limits = DecodeLimits { max_seq_len: 20, ..DecodeLimits::default() };
        let out = apar_decode(script.prompt.clone(), &model, &mut pool(), limits).unwrap();
        assert!(out.trace.truncated);
        assert!(out.group.sequences().iter().all(|s| s.tokens.len() <= 21));
    }

    #[test]
    fn invalid_model_output_is_rejected() {
        struct Bad;
        impl LanguageModel for Bad {
            fn next_token(&self, _: &[Token]) -> Result<Token> {
                Ok(Token::child())
            }
        }
        let err = apar_decode(toks("Q"), &Bad, &mut pool(), DecodeLimits::default()).unwrap_err();
        assert!(matches!(err, AparError::InvalidToken(_)));
    }

    #[test]
    fn fork_capacity_failure_degrades_to_linear() {
        // Two blocks of 4: the prompt plus "a [Fork]" fill one, the fork has
        // nowhere to put the copy once the parent grows into the second.
        let script = fixtures::fig3_toy();
        let model = ScriptModel::new(script.clone());
        let mut p = KvBlockPool::new(1, 4).unwrap();
        let err = apar_decode(script.prompt.clone(), &model, &mut p, DecodeLimits::default());
        // The parent continues past the aborted fork until the pool runs dry.
        match err {
            Ok(out) => assert!(out.trace.records.iter().any(|r| !r.aborted_forks.is_empty())),
            Err(e) => assert!(e.is_capacity()),
        }
    }

    #[test]
    fn trace_jsonl_has_one_line_per_step() {
        let script = fixtures::fig3_toy();
        let out = apar_decode(script.prompt.clone(), &ScriptModel::new(script), &mut pool(), DecodeLimits::default()).unwrap();
        let mut buf = Vec::new();
        out.trace.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 7);
        assert!(text.lines().next().unwrap().starts_with(r#"{"step":1,"samples":[{"seq":0,"token":"a1","context_len":1}]"#));
    }
}
