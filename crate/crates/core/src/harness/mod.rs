//! Scenario runner wiring generator, cache, monitor and pruner together.

mod generator;

use std::fmt;
use std::io::BufReader;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use generator::{DiverseSource, Emission, StreamGenerator};

use crate::cache::{CachePolicy, CacheShape, CacheState};
use crate::error::{Error, Result};
use crate::metrics::{
    classify_triple, loop_metrics, read_records_jsonl, DecodeStep, GenerationRecord, Ingested, LoopRuleConfig, TableRow, DEFLATE_LEVEL,
};
use crate::monitor::{Monitor, MonitorConfig, MonitorPreset, TraceRow};
use crate::pruner::{apply_prune, build_keep_set, Aggressiveness, BadSpan, InterventionEvent, PrunerConfig};
use crate::rope::derive_seed;

/// Inclusive integer range sampled uniformly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRange {
    pub min: usize,
    pub max: usize,
}

impl StepRange {
    pub const fn new(min: usize, max: usize) -> Self {
        Self { min, max }
    }

    pub const fn fixed(v: usize) -> Self {
        Self { min: v, max: v }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        rng.random_range(self.min..=self.max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProcessKind {
    Healthy,
    #[default]
    CacheCoupledLoop,
}

impl fmt::Display for ProcessKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Healthy => "healthy",
            Self::CacheCoupledLoop => "cache_coupled_loop",
        })
    }
}

impl std::str::FromStr for ProcessKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "healthy" => Ok(Self::Healthy),
            "loop" | "cache_coupled_loop" => Ok(Self::CacheCoupledLoop),
            other => Err(Error::InvalidConfig(format!("unknown process '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PolicyName {
    Full,
    SinkWindow,
    HeavyHitter,
    #[default]
    Loopguard,
}

impl PolicyName {
    pub const ALL: [PolicyName; 4] = [Self::Full, Self::SinkWindow, Self::HeavyHitter, Self::Loopguard];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::SinkWindow => "sink_window",
            Self::HeavyHitter => "heavy_hitter",
            Self::Loopguard => "loopguard",
        }
    }
}

impl fmt::Display for PolicyName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for PolicyName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown policy '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub process: ProcessKind,
    pub policy: PolicyName,
    pub streams: usize,
    pub seed: u64,
    pub t_max: usize,
    pub vocab: usize,
    pub zipf_exponent: f64,
    /// The diverse source never repeats a token within this many steps.
    pub no_repeat_window: usize,
    pub collapse_step: StepRange,
    pub period: StepRange,
    /// Where healthy streams stop.
    pub natural_stop: StepRange,
    /// Diverse tokens emitted after leaving a loop.
    pub exit_tail: StepRange,
    /// A prune within this many periods of the loop start breaks it.
    pub lock_in_blocks: usize,
    pub loop_p_max: f64,
    pub healthy_p_max_min: f64,
    pub healthy_p_max_max: f64,
    /// Cache positions occupied before decoding starts.
    pub prompt_len: usize,
    /// Logit bonus for same-token keys in the heavy-hitter attention proxy.
    pub attention_beta: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            process: ProcessKind::CacheCoupledLoop,
            policy: PolicyName::Loopguard,
            streams: 200,
            seed: 0,
            t_max: 2500,
            vocab: 32768,
            zipf_exponent: 1.3,
            no_repeat_window: 64,
            collapse_step: StepRange::new(200, 450),
            period: StepRange::new(2, 16),
            natural_stop: StepRange::new(800, 1600),
            exit_tail: StepRange::new(50, 150),
            lock_in_blocks: 2,
            loop_p_max: 0.97,
            healthy_p_max_min: 0.2,
            healthy_p_max_max: 0.7,
            prompt_len: 2048,
            attention_beta: 4.0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        for (name, r) in [
            ("collapse_step", self.collapse_step),
            ("period", self.period),
            ("natural_stop", self.natural_stop),
            ("exit_tail", self.exit_tail),
        ] {
            if r.min > r.max {
                return bad(format!("{name} range has min {} > max {}", r.min, r.max));
            }
        }
        if self.streams == 0 {
            return bad("streams must be at least 1".into());
        }
        if self.vocab < 100 {
            return bad(format!("vocab {} below 100", self.vocab));
        }
        if self.vocab > u32::MAX as usize {
            return bad("vocab exceeds the token id range".into());
        }
        if self.no_repeat_window * 4 > self.vocab {
            return bad("no_repeat_window too large for the vocabulary".into());
        }
        if self.zipf_exponent.is_nan() || self.zipf_exponent <= 0.0 {
            return bad("zipf_exponent must be positive".into());
        }
        if self.period.min == 0 {
            return bad("period must be at least 1".into());
        }
        if self.collapse_step.max >= self.t_max {
            return bad(format!("collapse step {} must be below t_max {}", self.collapse_step.max, self.t_max));
        }
        if self.collapse_step.min < self.period.max {
            return bad("collapse step must leave room for one period of output".into());
        }
        if !(0.0..=1.0).contains(&self.loop_p_max)
            || !(0.0..=1.0).contains(&self.healthy_p_max_min)
            || !(self.healthy_p_max_min..=1.0).contains(&self.healthy_p_max_max)
        {
            return bad("p_max settings must lie in [0, 1] with min <= max".into());
        }
        Ok(())
    }
}

/// Everything a run needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub loop_rule: LoopRuleConfig,
    pub monitor: MonitorConfig,
    pub pruner: PrunerConfig,
    pub scenario: ScenarioConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.loop_rule.validate()?;
        self.monitor.validate()?;
        self.pruner.validate()?;
        self.scenario.validate()?;
        if self.scenario.t_max != self.loop_rule.t_max {
            return Err(Error::InvalidConfig(format!(
                "scenario t_max {} differs from loop rule t_max {}",
                self.scenario.t_max, self.loop_rule.t_max
            )));
        }
        Ok(())
    }

    /// Parses TOML when the path ends in `.toml`, JSON otherwise.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| Error::InvalidConfig(e.to_string()))
        } else {
            serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(e.to_string()))
        }
    }

    /// Monitor preset actually used; baseline cache policies run unguarded.
    pub fn effective_preset(&self) -> MonitorPreset {
        match self.scenario.policy {
            PolicyName::Loopguard => self.monitor.preset,
            _ => MonitorPreset::NoGuard,
        }
    }

    fn cache_policy(&self) -> Result<CachePolicy> {
        CachePolicy::from_name(self.scenario.policy.as_str(), self.pruner.budget, self.pruner.n_anchor)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamReport {
    pub stream: usize,
    pub record: GenerationRecord,
    pub events: Vec<InterventionEvent>,
    pub collapse_step: Option<usize>,
    pub period: Option<usize>,
    pub loop_exit_step: Option<usize>,
    pub ttr: f64,
    pub cr: f64,
    pub is_loop: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub streams: usize,
    pub loop_rate_pct: f64,
    pub mean_cr: f64,
    pub mean_ttr: f64,
    pub mean_len: f64,
    pub interventions_per_seq: f64,
    pub total_triggers: usize,
    /// `None` when nothing fired.
    pub early_trigger_fraction: Option<f64>,
    pub deflate_level: u32,
    pub loop_rate_note: String,
}

/// Caveat attached to every synthetic loop rate.
pub const SYNTHETIC_NOTE: &str =
    "synthetic process: loop rate measures detector latency against t_max, not model behavior";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub policy: PolicyName,
    pub preset: MonitorPreset,
    pub process: ProcessKind,
    pub seed: u64,
    pub aggregate: Aggregate,
    pub streams: Vec<StreamReport>,
}

/// Per-stream summary used in the JSON report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamSummary {
    pub stream: usize,
    pub len: usize,
    pub ttr: f64,
    pub cr: f64,
    pub is_loop: bool,
    pub terminated_naturally: bool,
    pub collapse_step: Option<usize>,
    pub period: Option<usize>,
    pub loop_exit_step: Option<usize>,
    pub trigger_steps: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub policy: PolicyName,
    pub preset: MonitorPreset,
    pub process: ProcessKind,
    pub seed: u64,
    pub aggregate: Aggregate,
    pub streams: Vec<StreamSummary>,
}

impl RunReport {
    pub fn summary(&self) -> ReportSummary {
        ReportSummary {
            policy: self.policy,
            preset: self.preset,
            process: self.process,
            seed: self.seed,
            aggregate: self.aggregate.clone(),
            streams: self
                .streams
                .iter()
                .map(|s| StreamSummary {
                    stream: s.stream,
                    len: s.record.len(),
                    ttr: s.ttr,
                    cr: s.cr,
                    is_loop: s.is_loop,
                    terminated_naturally: s.record.terminated_naturally,
                    collapse_step: s.collapse_step,
                    period: s.period,
                    loop_exit_step: s.loop_exit_step,
                    trigger_steps: s.events.iter().map(|e| e.step).collect(),
                })
                .collect(),
        }
    }

    pub fn table_row(&self) -> TableRow {
        TableRow {
            method: self.policy_label(),
            dataset: self.process.to_string(),
            cr: self.aggregate.mean_cr,
            ttr: self.aggregate.mean_ttr,
            avg_len: self.aggregate.mean_len,
            loop_rate: self.aggregate.loop_rate_pct,
        }
    }

    fn policy_label(&self) -> String {
        match self.policy {
            PolicyName::Loopguard => format!("loopguard/{}", self.preset),
            p => p.to_string(),
        }
    }

    pub fn records(&self) -> Vec<GenerationRecord> {
        self.streams.iter().map(|s| s.record.clone()).collect()
    }

    pub fn events(&self) -> impl Iterator<Item = &InterventionEvent> {
        self.streams.iter().flat_map(|s| s.events.iter())
    }
}

/// A finished stream plus, optionally, the monitor trace.
pub struct StreamRun {
    pub report: StreamReport,
    pub trace: Vec<TraceRow>,
}

/// Runs one stream to completion.
pub fn run_stream(cfg: &RunConfig, stream: usize, keep_trace: bool) -> Result<StreamRun> {
    let sc = &cfg.scenario;
    let mut gen = StreamGenerator::new(sc, derive_seed(sc.seed, stream as u64));
    let shape = CacheShape { layers: 2, heads: 1, head_dim: 0 };
    let mut cache = CacheState::new(shape, cfg.cache_policy()?)?;
    let heavy = matches!(cache.policy(), CachePolicy::HeavyHitter { .. });

    let mut tokens_by_pos = gen.prompt(sc.prompt_len);
    for pos in 0..sc.prompt_len {
        cache.append_blank(pos)?;
    }

    let preset = cfg.effective_preset();
    let mut monitor = match preset {
        MonitorPreset::NoGuard => None,
        p => Some(Monitor::new(MonitorConfig { preset: p, ..cfg.monitor.clone() })?),
    };
    let mut agg = Aggressiveness::default();
    let mut steps = Vec::with_capacity(sc.t_max);
    let mut events = Vec::new();
    let mut trace = Vec::new();
    let mut terminated_naturally = false;

    for step in 0..sc.t_max {
        let (token, p_max) = match gen.next(step, &cache) {
            Emission::Token { token, p_max } => (token, p_max),
            Emission::Stop => {
                terminated_naturally = true;
                break;
            }
        };
        let pos = sc.prompt_len + step;
        tokens_by_pos.push(token);
        cache.append_blank(pos)?;
        if heavy {
            let weights = proxy_attention(&cache, &tokens_by_pos, token, sc.attention_beta);
            cache.record_attention(&weights)?;
        }
        let ds = DecodeStep { step, token, p_max };
        steps.push(ds);

        let Some(m) = monitor.as_mut() else { continue };
        let d = m.update(&ds)?;
        if keep_trace {
            trace.push(TraceRow::from(&d));
        }
        if !d.trigger {
            agg.escalate_or_decay(step, false, &cfg.pruner);
            continue;
        }
        agg.escalate_or_decay(step, true, &cfg.pruner);
        // Only the full preset localizes the loop; the ablations prune blind.
        let bad = match preset {
            MonitorPreset::Full => d.tail.map(|t| BadSpan {
                start: sc.prompt_len + t.bad_start,
                end: sc.prompt_len + t.end,
            }),
            _ => None,
        };
        let keep = build_keep_set(pos, bad, agg.level, &cfg.pruner)?;
        let kept = apply_prune(&mut cache, &keep)?;
        m.notify_intervention()?;
        events.push(InterventionEvent {
            stream,
            step,
            position: pos,
            level: agg.level,
            bad_span: bad,
            anchor: keep.anchor.len(),
            sparse: keep.sparse.len(),
            recent: keep.recent.len(),
            kept,
        });
    }

    let record = GenerationRecord {
        prompt_len: sc.prompt_len,
        steps,
        terminated_naturally,
        t_max: sc.t_max,
    };
    let metrics = loop_metrics(&record.tokens())?;
    Ok(StreamRun {
        report: StreamReport {
            stream,
            is_loop: classify_triple(metrics.ttr, metrics.cr, metrics.len, &cfg.loop_rule),
            ttr: metrics.ttr,
            cr: metrics.cr,
            record,
            events,
            collapse_step: gen.collapse_step,
            period: gen.period(),
            loop_exit_step: gen.exit_step,
        },
        trace,
    })
}

/// Attention proxy: same-token keys get a logit bonus of `beta`.
fn proxy_attention(cache: &CacheState, tokens: &[u32], query: u32, beta: f64) -> Vec<(usize, f64)> {
    let boost = beta.exp();
    let mut w: Vec<(usize, f64)> = cache
        .positions()
        .map(|p| (p, if tokens[p] == query { boost } else { 1.0 }))
        .collect();
    let z: f64 = w.iter().map(|(_, x)| x).sum();
    for (_, x) in &mut w {
        *x /= z;
    }
    w
}

fn aggregate(streams: &[StreamReport], preset: MonitorPreset) -> Aggregate {
    let n = streams.len() as f64;
    let total_triggers: usize = streams.iter().map(|s| s.events.len()).sum();
    let early: usize = streams
        .iter()
        .map(|s| {
            s.events
                .iter()
                .filter(|e| s.collapse_step.is_none_or(|tc| e.step < tc))
                .count()
        })
        .sum();
    Aggregate {
        streams: streams.len(),
        loop_rate_pct: 100.0 * streams.iter().filter(|s| s.is_loop).count() as f64 / n,
        mean_cr: streams.iter().map(|s| s.cr).sum::<f64>() / n,
        mean_ttr: streams.iter().map(|s| s.ttr).sum::<f64>() / n,
        mean_len: streams.iter().map(|s| s.record.len() as f64).sum::<f64>() / n,
        interventions_per_seq: total_triggers as f64 / n,
        total_triggers,
        early_trigger_fraction: (total_triggers > 0 && preset != MonitorPreset::NoGuard)
            .then(|| early as f64 / total_triggers as f64),
        deflate_level: DEFLATE_LEVEL,
        loop_rate_note: SYNTHETIC_NOTE.to_string(),
    }
}

fn with_pool<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match jobs {
        None => Ok(f()),
        Some(j) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(j.max(1))
                .build()
                .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// Runs every stream of the scenario. `jobs` fixes the thread count; output
/// does not depend on it.
pub fn run_scenario(cfg: &RunConfig, jobs: Option<usize>) -> Result<RunReport> {
    cfg.validate()?;
    let results: Vec<Result<StreamRun>> =
        with_pool(jobs, || (0..cfg.scenario.streams).into_par_iter().map(|i| run_stream(cfg, i, false)).collect())?;
    let streams = results.into_iter().map(|r| r.map(|s| s.report)).collect::<Result<Vec<_>>>()?;
    let preset = cfg.effective_preset();
    Ok(RunReport {
        policy: cfg.scenario.policy,
        preset,
        process: cfg.scenario.process,
        seed: cfg.scenario.seed,
        aggregate: aggregate(&streams, preset),
        streams,
    })
}

/// One report per policy over identical seeds.
pub fn compare_policies(cfg: &RunConfig, policies: &[PolicyName], jobs: Option<usize>) -> Result<Vec<RunReport>> {
    if policies.len() < 2 {
        return Err(Error::InvalidConfig("compare needs at least two policies".into()));
    }
    policies
        .iter()
        .map(|&p| {
            let mut c = cfg.clone();
            c.scenario.policy = p;
            run_scenario(&c, jobs)
        })
        .collect()
}

/// Loads JSONL generation logs; fails only if nothing valid remains.
pub fn ingest_logs(path: &Path) -> Result<Ingested> {
    let f = std::fs::File::open(path)?;
    let ingested = read_records_jsonl(BufReader::new(f))?;
    if ingested.records.is_empty() {
        return Err(Error::NoRecords);
    }
    Ok(ingested)
}
