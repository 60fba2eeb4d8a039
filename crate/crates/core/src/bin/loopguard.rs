use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use loopguard::harness::{compare_policies, ingest_logs, run_scenario, run_stream, PolicyName, ProcessKind, RunConfig};
use loopguard::metrics::{sequence_stats, write_records_jsonl, write_table_csv, TableRow};
use loopguard::monitor::MonitorPreset;
use loopguard::rope::{barcode_export, derive_seed, verify_shift_invariance, PeriodicTailSpec, ToyHead};
use loopguard::Error;

#[derive(Parser)]
#[command(name = "loopguard", version, about = "Repetition-loop detection and KV-cache pruning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write a report.
    Simulate(SimulateArgs),
    /// Run several cache policies on identical seeds and write a CSV table.
    Compare(CompareArgs),
    /// Score external generation logs (JSONL).
    Score(ScoreArgs),
    /// Randomized check of the RoPE shift-invariance bound.
    LemmaCheck(LemmaArgs),
    /// Export toy-head attention maps as CSV and PGM.
    Barcode(BarcodeArgs),
}

#[derive(Args)]
struct ScenarioArgs {
    /// JSON or TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    streams: Option<usize>,
    /// healthy | loop
    #[arg(long)]
    process: Option<ProcessKind>,
    /// no_guard | always_on | single_signal | full
    #[arg(long)]
    preset: Option<MonitorPreset>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    jobs: Option<usize>,
}

impl ScenarioArgs {
    fn load(&self) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_path(p)?,
            None => RunConfig::default(),
        };
        cfg.scenario.seed = self.seed;
        if let Some(n) = self.streams {
            cfg.scenario.streams = n;
        }
        if let Some(p) = self.process {
            cfg.scenario.process = p;
        }
        if let Some(p) = self.preset {
            cfg.monitor.preset = p;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    /// full | sink_window | heavy_hitter | loopguard
    #[arg(long)]
    policy: Option<PolicyName>,
    /// Report JSON; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-stream generation records as JSONL.
    #[arg(long)]
    records: Option<PathBuf>,
    /// Intervention events as JSONL.
    #[arg(long)]
    events: Option<PathBuf>,
    /// Monitor trace of one stream as JSONL.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    trace_stream: usize,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[arg(long, value_delimiter = ',', default_value = "full,sink_window,heavy_hitter,loopguard")]
    policies: Vec<PolicyName>,
    /// CSV table; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "external")]
    method: String,
    #[arg(long, default_value = "logs")]
    dataset: String,
    /// CSV table; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the per-record JSON report here.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct LemmaArgs {
    #[arg(long, default_value_t = 64)]
    dh: usize,
    #[arg(long, default_value_t = 8)]
    period: usize,
    #[arg(long, default_value_t = 0.05)]
    delta_q: f64,
    #[arg(long, default_value_t = 0.05)]
    delta_k: f64,
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4096)]
    max_position: usize,
}

#[derive(Args)]
struct BarcodeArgs {
    #[arg(long, default_value = "loop")]
    process: ProcessKind,
    #[arg(long, default_value_t = 600)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    dh: usize,
    #[arg(long, default_value_t = 4.0)]
    scale: f64,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn output(path: Option<&Path>) -> io::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn write_json<T: serde::Serialize>(value: &T, path: Option<&Path>) -> Result<(), Error> {
    let mut w = output(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn write_jsonl<T: serde::Serialize>(items: impl IntoIterator<Item = T>, path: &Path) -> Result<(), Error> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, &item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn simulate(args: SimulateArgs) -> Result<(), Error> {
    let mut cfg = args.scenario.load()?;
    if let Some(p) = args.policy {
        cfg.scenario.policy = p;
    }
    let report = run_scenario(&cfg, args.scenario.jobs)?;
    write_json(&report.summary(), args.out.as_deref())?;
    if let Some(p) = &args.records {
        write_records_jsonl(&report.records(), BufWriter::new(File::create(p)?))?;
    }
    if let Some(p) = &args.events {
        write_jsonl(report.events(), p)?;
    }
    if let Some(p) = &args.trace {
        if args.trace_stream >= cfg.scenario.streams {
            return Err(Error::InvalidConfig(format!("trace stream {} out of range", args.trace_stream)));
        }
        let run = run_stream(&cfg, args.trace_stream, true)?;
        write_jsonl(&run.trace, p)?;
    }
    Ok(())
}

fn compare(args: CompareArgs) -> Result<(), Error> {
    let cfg = args.scenario.load()?;
    let reports = compare_policies(&cfg, &args.policies, args.scenario.jobs)?;
    let rows: Vec<TableRow> = reports.iter().map(|r| r.table_row()).collect();
    write_table_csv(&rows, output(args.out.as_deref())?)
}

fn score(args: ScoreArgs) -> Result<(), Error> {
    let cfg = match &args.config {
        Some(p) => RunConfig::from_path(p)?.loop_rule,
        None => Default::default(),
    };
    let ingested = ingest_logs(&args.input)?;
    for e in &ingested.errors {
        eprintln!("{}:{}: {}", args.input.display(), e.line, e.message);
    }
    let report = sequence_stats(&ingested.records, &cfg)?;
    if let Some(p) = &args.json {
        write_json(&report, Some(p))?;
    }
    let row = TableRow::from_report(&args.method, &args.dataset, &report);
    write_table_csv(&[row], output(args.out.as_deref())?)
}

fn lemma_check(args: LemmaArgs) -> Result<(), Error> {
    let spec = PeriodicTailSpec {
        head_dim: args.dh,
        period: args.period,
        delta_q: args.delta_q,
        delta_k: args.delta_k,
        max_position: args.max_position,
    };
    let report = verify_shift_invariance(&spec, args.trials, args.seed)?;
    write_json(&report, None)
}

fn barcode(args: BarcodeArgs) -> Result<(), Error> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::from_path(p)?,
        None => RunConfig::default(),
    };
    cfg.scenario.process = args.process;
    cfg.scenario.seed = args.seed;
    cfg.scenario.t_max = args.steps;
    cfg.loop_rule.t_max = args.steps;
    cfg.loop_rule.theta_len = cfg.loop_rule.theta_len.min(args.steps);
    cfg.scenario.policy = PolicyName::Full;
    cfg.validate()?;
    let run = run_stream(&cfg, 0, false)?;
    let tokens = run.report.record.tokens();
    let head = ToyHead::new(args.dh, args.scale, derive_seed(args.seed, u64::MAX))?;
    let history = head.attention_history(&tokens)?;
    for p in barcode_export(&history, &args.out_dir)? {
        println!("{}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Compare(a) => compare(a),
        Command::Score(a) => score(a),
        Command::LemmaCheck(a) => lemma_check(a),
        Command::Barcode(a) => barcode(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
