//! Efficiency metrics over decode traces, and the table-style report.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::engine::{DecodeOutput, DecodeTrace, StepRecord};
use crate::error::{AparError, Result};

/// Per-response metrics of one decode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    pub prompt_len: usize,
    /// Peak logical cache in content tokens.
    pub max_cached_tokens: usize,
    /// Peak logical cache in slots, control tokens included.
    pub max_cached_slots: usize,
    /// Mean context length over content-token predictions.
    pub mean_attended_tokens: f64,
    /// Content tokens generated.
    pub generated_tokens: usize,
    pub steps: usize,
    pub threads: usize,
    pub parallelizable: bool,
    pub truncated: bool,
}

impl GroupMetrics {
    /// Metrics of a traced decode.
    pub fn from_decode(out: &DecodeOutput) -> Result<Self> {
        let mut m = Self::from_trace(&out.trace)?;
        m.threads = out.group.thread_count();
        m.parallelizable = m.threads >= 2;
        Ok(m)
    }

    /// Thread count is taken from the fork records.
    pub fn from_trace(trace: &DecodeTrace) -> Result<Self> {
        if trace.records.is_empty() {
            return Err(AparError::invalid("empty trace"));
        }
        let (mut n, mut attended) = (0usize, 0usize);
        for s in trace.samples().filter(|s| !s.token.is_control()) {
            n += 1;
            attended += s.context_len;
        }
        let threads = 1 + trace.fork_count();
        Ok(GroupMetrics {
            name: None,
            category: None,
            prompt_len: trace.prompt_len,
            max_cached_tokens: max_cached_tokens(trace),
            max_cached_slots: trace.records.iter().map(|r| r.logical_slots).max().unwrap_or(0),
            mean_attended_tokens: if n == 0 { 0.0 } else { attended as f64 / n as f64 },
            generated_tokens: n,
            steps: trace.steps(),
            threads,
            parallelizable: threads >= 2,
            truncated: trace.truncated,
        })
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = Some(name.into());
        self
    }
}

/// Peak over steps of the live sequences' logical cache in content tokens,
/// shared prefixes counted once.
pub fn max_cached_tokens(trace: &DecodeTrace) -> usize {
    trace.records.iter().map(|r| r.logical_content).max().unwrap_or(trace.prompt_len)
}

/// Every generated token stays cached under plain decoding.
pub fn flatten_cached_tokens(prompt_len: usize, generated: usize) -> usize {
    prompt_len + generated
}

/// Mean context length of `n` tokens decoded one after another after `p`.
pub fn flatten_mean_attended(prompt_len: usize, generated: usize) -> f64 {
    if generated == 0 {
        return 0.0;
    }
    prompt_len as f64 + (generated as f64 - 1.0) / 2.0
}

/// Percentage of the flatten value saved: `100 * (flatten - apar) / flatten`.
pub fn saved_ratio(apar: f64, flatten: f64) -> Result<f64> {
    if !(flatten > 0.0) || !apar.is_finite() {
        return Err(AparError::invalid(format!("saved ratio needs a positive flatten value, got {flatten}")));
    }
    Ok(100.0 * (flatten - apar) / flatten)
}

/// Rounded to 0.1 as reported.
pub fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

/// `(#T, %P)` over thread counts; %P as a fraction.
pub fn thread_stats_counts(threads: &[usize]) -> Result<(f64, f64)> {
    if threads.is_empty() {
        return Err(AparError::invalid("thread statistics of an empty set"));
    }
    let n = threads.len() as f64;
    let mean = threads.iter().sum::<usize>() as f64 / n;
    let parallel = threads.iter().filter(|&&t| t >= 2).count() as f64 / n;
    Ok((mean, parallel))
}

pub fn thread_stats(groups: &[GroupMetrics]) -> Result<(f64, f64)> {
    thread_stats_counts(&groups.iter().map(|g| g.threads).collect::<Vec<_>>())
}

/// Wall time of one decode step.
pub trait StepLatency {
    fn step_latency(&self, record: &StepRecord) -> f64;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConstantLatency(pub f64);

impl StepLatency for ConstantLatency {
    fn step_latency(&self, _: &StepRecord) -> f64 {
        self.0
    }
}

/// Content tokens per second of simulated step time.
pub fn tokens_per_second<L: StepLatency + ?Sized>(trace: &DecodeTrace, latency: &L) -> f64 {
    let time: f64 = trace.records.iter().map(|r| latency.step_latency(r)).sum();
    let tokens: usize = trace.records.iter().map(StepRecord::content_samples).sum();
    if time > 0.0 {
        tokens as f64 / time
    } else {
        0.0
    }
}

/// Mergeable sums over responses; means are taken per response.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsAggregate {
    pub count: usize,
    pub apar_cached: f64,
    pub flatten_cached: f64,
    pub apar_attended: f64,
    pub flatten_attended: f64,
    pub threads: usize,
    pub parallel: usize,
    pub truncated: usize,
}

impl MetricsAggregate {
    pub fn of(m: &GroupMetrics) -> Self {
        MetricsAggregate {
            count: 1,
            apar_cached: m.max_cached_tokens as f64,
            flatten_cached: flatten_cached_tokens(m.prompt_len, m.generated_tokens) as f64,
            apar_attended: m.mean_attended_tokens,
            flatten_attended: flatten_mean_attended(m.prompt_len, m.generated_tokens),
            threads: m.threads,
            parallel: usize::from(m.parallelizable),
            truncated: usize::from(m.truncated),
        }
    }

    pub fn merge(mut self, other: &Self) -> Self {
        self.count += other.count;
        self.apar_cached += other.apar_cached;
        self.flatten_cached += other.flatten_cached;
        self.apar_attended += other.apar_attended;
        self.flatten_attended += other.flatten_attended;
        self.threads += other.threads;
        self.parallel += other.parallel;
        self.truncated += other.truncated;
        self
    }

    pub fn from_groups<'a>(groups: impl IntoIterator<Item = &'a GroupMetrics>) -> Self {
        groups
            .into_iter()
            .fold(MetricsAggregate::default(), |acc, g| acc.merge(&MetricsAggregate::of(g)))
    }

    pub fn row(&self, name: &str) -> Result<ReportRow> {
        if self.count == 0 {
            return Err(AparError::invalid("report over no responses"));
        }
        let n = self.count as f64;
        let (ac, fc) = (self.apar_cached / n, self.flatten_cached / n);
        let (aa, fa) = (self.apar_attended / n, self.flatten_attended / n);
        Ok(ReportRow {
            name: name.to_string(),
            responses: self.count,
            apar_cached: round1(ac),
            flatten_cached: round1(fc),
            saved_cached: round1(saved_ratio(ac, fc)?),
            apar_attended: round1(aa),
            flatten_attended: round1(fa),
            saved_attended: round1(saved_ratio(aa, fa)?),
            threads: round1(self.threads as f64 / n),
            parallel: (self.parallel as f64 / n * 100.0).round() / 100.0,
            truncated: self.truncated,
        })
    }
}

/// One report line. Cached and attended counts are means per response.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub name: String,
    pub responses: usize,
    #[serde(rename = "APAR_cached")]
    pub apar_cached: f64,
    #[serde(rename = "Flatten_cached")]
    pub flatten_cached: f64,
    #[serde(rename = "Saved_cached")]
    pub saved_cached: f64,
    #[serde(rename = "APAR_attended")]
    pub apar_attended: f64,
    #[serde(rename = "Flatten_attended")]
    pub flatten_attended: f64,
    #[serde(rename = "Saved_attended")]
    pub saved_attended: f64,
    #[serde(rename = "#T")]
    pub threads: f64,
    #[serde(rename = "%P")]
    pub parallel: f64,
    pub truncated: usize,
}

pub fn write_csv<W: Write>(rows: &[ReportRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r).map_err(|e| AparError::invalid(format!("csv: {e}")))?;
    }
    out.flush().map_err(|e| AparError::invalid(format!("csv: {e}")))?;
    Ok(())
}
