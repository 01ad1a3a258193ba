//! Command-line front end. Exit codes: 0 success, 1 bad input, 2 internal
//! invariant violation.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::corpus::{apply_ratio, corpus_stats, process_corpus, read_conversations};
use crate::engine::{apar_decode, ar_decode, DecodeLimits, DecodeMode, DEFAULT_MAX_SEQ_LEN, DEFAULT_MAX_STEPS};
use crate::error::AparError;
use crate::fixtures;
use crate::kv::{KvBlockPool, DEFAULT_BLOCK_SIZE};
use crate::metrics::{write_csv, GroupMetrics, MetricsAggregate, ReportRow};
use crate::script::{ScriptModel, ScriptTree};
use crate::sim::{sweep_budgets, SimConfig, SimReport, WorkloadSpec, DEFAULT_SIM_CONFIG};

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn input(msg: impl std::fmt::Display) -> Self {
        CliError { code: 1, message: msg.to_string() }
    }
}

impl From<AparError> for CliError {
    fn from(e: AparError) -> Self {
        let code = match e {
            AparError::InvalidInput(_) | AparError::Unschedulable { .. } => 1,
            _ => 2,
        };
        CliError { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::input(e)
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "apar", version, about = "Parallel paragraph-tree decoding toolchain")]
pub struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; 1 runs everything serially.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Turn conversations into paragraph-tree training samples.
    Extract(ExtractArgs),
    /// Decode one script and print the restored text.
    Decode(DecodeArgs),
    /// Compute cache and attention metrics over scripts.
    Bench(BenchArgs),
    /// Run the serving simulator.
    Simulate(SimulateArgs),
    /// Aggregate per-response metrics files into a table.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct ExtractArgs {
    /// Conversations, one JSON object per line.
    #[arg(long)]
    pub input: PathBuf,
    /// Training samples, one JSON object per line.
    #[arg(long)]
    pub output: PathBuf,
    /// Corpus statistics as JSON.
    #[arg(long)]
    pub stats: Option<PathBuf>,
    /// Structured:unstructured ratio, or "all" to keep everything.
    #[arg(long, default_value = "1:1")]
    pub ratio: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Apar,
    Ar,
}

impl From<ModeArg> for DecodeMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Apar => DecodeMode::Apar,
            ModeArg::Ar => DecodeMode::Ar,
        }
    }
}

#[derive(Args, Debug)]
pub struct ScriptSource {
    /// Script tree JSON file.
    #[arg(long, conflicts_with = "fixture")]
    pub script: Option<PathBuf>,
    /// Built-in script: fig3-toy or big-tree.
    #[arg(long)]
    pub fixture: Option<String>,
}

#[derive(Args, Debug)]
pub struct DecodeArgs {
    #[command(flatten)]
    pub source: ScriptSource,
    #[arg(long, value_enum, default_value = "apar")]
    pub mode: ModeArg,
    /// Per-step trace, one JSON object per line.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_BLOCK_SIZE)]
    pub block_size: usize,
    #[arg(long, default_value_t = 4096)]
    pub pool_blocks: usize,
    #[arg(long, default_value_t = DEFAULT_MAX_STEPS)]
    pub max_steps: usize,
    #[arg(long, default_value_t = DEFAULT_MAX_SEQ_LEN)]
    pub max_seq_len: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Directory of script JSON files, read in name order.
    #[arg(long)]
    pub scripts: Option<PathBuf>,
    /// Built-in scripts; repeatable.
    #[arg(long)]
    pub fixture: Vec<String>,
    /// Table output; stdout when absent.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: Format,
    /// Per-response metrics, one JSON object per line, for `report`.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_BLOCK_SIZE)]
    pub block_size: usize,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Simulator config JSON; the bundled default when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override the config's mode.
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Comma-separated cache budget fractions to sweep.
    #[arg(long, value_delimiter = ',')]
    pub budgets: Vec<f64>,
    /// Override the config's concurrency limit.
    #[arg(long)]
    pub concurrency: Option<usize>,
    /// Reports as JSON; stdout when absent.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Sample time series as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Per-response metrics files written by `bench --metrics`.
    #[arg(long, num_args = 1..)]
    pub inputs: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: Format,
    /// Only responses in these categories.
    #[arg(long)]
    pub include_category: Vec<String>,
    /// Drop responses in these categories.
    #[arg(long)]
    pub exclude_category: Vec<String>,
    /// Table output; stdout when absent.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

/// Parses `args` and runs; returns the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

pub fn run(cli: Cli) -> CliResult {
    if cli.jobs == 0 {
        return Err(CliError::input("--jobs must be at least 1"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build()
        .map_err(|e| CliError { code: 2, message: e.to_string() })?;
    let (seed, parallel) = (cli.seed, cli.jobs > 1);
    pool.install(|| match cli.command {
        Command::Extract(a) => extract(a, seed),
        Command::Decode(a) => decode(a),
        Command::Bench(a) => bench(a),
        Command::Simulate(a) => simulate(a, seed, parallel),
        Command::Report(a) => report(a),
    })
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

fn read(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

fn sink(path: Option<&Path>) -> CliResult<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(create(p)?),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn load_script(path: &Path) -> CliResult<ScriptTree> {
    ScriptTree::from_json(&read(path)?).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

fn fixture(name: &str) -> CliResult<ScriptTree> {
    fixtures::by_name(name).ok_or_else(|| CliError::input(format!("unknown fixture {name}")))
}

fn parse_ratio(s: &str) -> CliResult<Option<(u32, u32)>> {
    if s == "all" {
        return Ok(None);
    }
    let bad = || CliError::input(format!("--ratio must look like 1:1 or be \"all\", got {s}"));
    let (a, b) = s.split_once(':').ok_or_else(bad)?;
    let (a, b): (u32, u32) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
    if a == 0 && b == 0 {
        return Err(bad());
    }
    Ok(Some((a, b)))
}

fn extract(a: ExtractArgs, seed: u64) -> CliResult {
    let ratio = parse_ratio(&a.ratio)?;
    let file = File::open(&a.input).map_err(|e| CliError::input(format!("{}: {e}", a.input.display())))?;
    let convs = read_conversations(BufReader::new(file))?;
    let mut samples = process_corpus(&convs)?;
    if let Some((s, u)) = ratio {
        samples = apply_ratio(samples, s, u, seed);
    }
    let mut out = create(&a.output)?;
    for s in &samples {
        serde_json::to_writer(&mut out, s).map_err(|e| CliError { code: 2, message: e.to_string() })?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    let stats = corpus_stats(convs.len(), &samples);
    if let Some(p) = &a.stats {
        let mut w = create(p)?;
        serde_json::to_writer_pretty(&mut w, &stats).map_err(|e| CliError { code: 2, message: e.to_string() })?;
        w.write_all(b"\n")?;
        w.flush()?;
    }
    eprintln!(
        "{} samples: {} ordered_list, {} paragraph, {} unstructured",
        stats.samples, stats.ordered_list, stats.paragraph, stats.unstructured
    );
    Ok(())
}

fn source_script(s: &ScriptSource) -> CliResult<ScriptTree> {
    match (&s.script, &s.fixture) {
        (Some(p), _) => load_script(p),
        (None, Some(f)) => fixture(f),
        (None, None) => Err(CliError::input("one of --script or --fixture is required")),
    }
}

fn decode(a: DecodeArgs) -> CliResult {
    let script = source_script(&a.source)?;
    let mut pool = KvBlockPool::new(a.pool_blocks, a.block_size)?;
    let limits = DecodeLimits { max_steps: a.max_steps, max_seq_len: a.max_seq_len };
    let out = match a.mode {
        ModeArg::Apar => apar_decode(script.prompt.clone(), &ScriptModel::new(script.clone()), &mut pool, limits)?,
        ModeArg::Ar => ar_decode(script.prompt.clone(), &script.as_linear(), &mut pool, limits)?,
    };
    if let Some(p) = &a.trace {
        let mut w = create(p)?;
        out.trace.write_jsonl(&mut w)?;
        w.flush()?;
    }
    println!("{}", out.text());
    eprintln!(
        "steps={} threads={} truncated={}",
        out.trace.steps(),
        out.group.thread_count(),
        out.trace.truncated
    );
    Ok(())
}

fn bench_scripts(a: &BenchArgs) -> CliResult<Vec<(String, ScriptTree)>> {
    let mut scripts = Vec::new();
    if let Some(dir) = &a.scripts {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| CliError::input(format!("{}: {e}", dir.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        for p in paths {
            let s = load_script(&p)?;
            let name = s
                .name
                .clone()
                .unwrap_or_else(|| p.file_stem().unwrap_or_default().to_string_lossy().into_owned());
            scripts.push((name, s));
        }
    }
    for f in &a.fixture {
        scripts.push((f.clone(), fixture(f)?));
    }
    if scripts.is_empty() {
        return Err(CliError::input("no scripts: pass --scripts or --fixture"));
    }
    Ok(scripts)
}

fn write_rows(rows: &[ReportRow], format: Format, w: &mut dyn Write) -> CliResult {
    match format {
        Format::Csv => write_csv(rows, w)?,
        Format::Json => {
            serde_json::to_writer_pretty(&mut *w, rows).map_err(|e| CliError { code: 2, message: e.to_string() })?;
            w.write_all(b"\n")?;
        }
    }
    Ok(())
}

fn bench(a: BenchArgs) -> CliResult {
    let scripts = bench_scripts(&a)?;
    let mut groups = Vec::with_capacity(scripts.len());
    for (name, s) in &scripts {
        let mut pool = KvBlockPool::new(1 << 16, a.block_size)?;
        let out = apar_decode(s.prompt.clone(), &ScriptModel::new(s.clone()), &mut pool, DecodeLimits::default())?;
        if out.tokens != s.flatten() {
            return Err(AparError::protocol(format!("{name}: restored output differs from the script")).into());
        }
        let mut m = GroupMetrics::from_decode(&out)?.named(name.clone());
        m.category = s.category.clone();
        groups.push(m);
    }
    if let Some(p) = &a.metrics {
        let mut w = create(p)?;
        for g in &groups {
            serde_json::to_writer(&mut w, g).map_err(|e| CliError { code: 2, message: e.to_string() })?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }
    let mut rows = Vec::with_capacity(groups.len() + 1);
    for g in &groups {
        rows.push(MetricsAggregate::of(g).row(g.name.as_deref().unwrap_or("-"))?);
    }
    if groups.len() > 1 {
        rows.push(MetricsAggregate::from_groups(&groups).row("mean")?);
    }
    let mut w = sink(a.report.as_deref())?;
    write_rows(&rows, a.format, &mut *w)?;
    w.flush()?;
    Ok(())
}

fn simulate(a: SimulateArgs, seed: u64, parallel: bool) -> CliResult {
    let text = match &a.config {
        Some(p) => read(p)?,
        None => DEFAULT_SIM_CONFIG.to_string(),
    };
    let mut config = SimConfig::from_json(&text)?;
    if let Some(m) = a.mode {
        config.mode = m.into();
    }
    if let Some(c) = a.concurrency {
        config.concurrency_limit = c;
    }
    if let WorkloadSpec::Random { seed: s, .. } = &mut config.workload {
        *s = s.wrapping_add(seed);
    }
    config.validate()?;
    let workload = config.workload.resolve()?;
    let budgets = if a.budgets.is_empty() { vec![config.cache_budget_fraction] } else { a.budgets.clone() };
    let reports: Vec<SimReport> = sweep_budgets(&config, &workload, &budgets, parallel)?;
    if let Some(p) = &a.csv {
        let mut w = create(p)?;
        for (i, r) in reports.iter().enumerate() {
            // One header for the whole file.
            let mut buf = Vec::new();
            r.write_csv(&mut buf)?;
            let text = String::from_utf8(buf).expect("csv is utf-8");
            let body = if i == 0 { text.as_str() } else { text.split_once('\n').map_or("", |x| x.1) };
            w.write_all(body.as_bytes())?;
        }
        w.flush()?;
    }
    let mut w = sink(a.report.as_deref())?;
    serde_json::to_writer_pretty(&mut w, &reports).map_err(|e| CliError { code: 2, message: e.to_string() })?;
    w.write_all(b"\n")?;
    w.flush()?;
    for r in &reports {
        eprintln!(
            "budget={:.2} throughput={:.1} tok/s latency_mean={}",
            r.cache_budget_fraction,
            r.summary.throughput,
            r.summary.latency.map_or("-".to_string(), |l| format!("{:.4}", l.mean))
        );
    }
    Ok(())
}

fn report(a: ReportArgs) -> CliResult {
    if a.inputs.is_empty() {
        return Err(CliError::input("report needs at least one --inputs file"));
    }
    let mut rows = Vec::new();
    let mut all = MetricsAggregate::default();
    for p in &a.inputs {
        let mut agg = MetricsAggregate::default();
        for (n, line) in read(p)?.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let g: GroupMetrics = serde_json::from_str(line)
                .map_err(|e| CliError::input(format!("{}:{}: {e}", p.display(), n + 1)))?;
            let cat = g.category.as_deref();
            if !a.include_category.is_empty() && !cat.is_some_and(|c| a.include_category.iter().any(|x| x == c)) {
                continue;
            }
            if cat.is_some_and(|c| a.exclude_category.iter().any(|x| x == c)) {
                continue;
            }
            agg = agg.merge(&MetricsAggregate::of(&g));
        }
        if agg.count == 0 {
            return Err(CliError::input(format!("{}: no responses left after filtering", p.display())));
        }
        all = all.merge(&agg);
        rows.push(agg.row(&p.file_stem().unwrap_or_default().to_string_lossy())?);
    }
    if a.inputs.len() > 1 {
        rows.push(all.row("all")?);
    }
    let mut w = sink(a.output.as_deref())?;
    write_rows(&rows, a.format, &mut *w)?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_parsing() {
        assert_eq!(parse_ratio("1:1").unwrap(), Some((1, 1)));
        assert_eq!(parse_ratio("all").unwrap(), None);
        assert!(parse_ratio("1-1").is_err());
        assert!(parse_ratio("0:0").is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(run_from(["apar", "--help"]), 0);
        assert_eq!(run_from(["apar", "frobnicate"]), 1);
        assert_eq!(run_from(["apar", "report"]), 1);
        assert_eq!(run_from(["apar", "decode", "--fixture", "big-tree", "--bogus"]), 1);
        assert_eq!(run_from(["apar", "decode", "--fixture", "nope"]), 1);
    }

    #[test]
    fn error_classes() {
        assert_eq!(CliError::from(AparError::invalid("x")).code, 1);
        assert_eq!(CliError::from(AparError::protocol("x")).code, 2);
    }
}
