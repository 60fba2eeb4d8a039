//! Sequence-level repetition metrics and the loop rule.

use std::collections::HashSet;
use std::io::{BufRead, Write};

use flate2::write::DeflateEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// DEFLATE effort level used for every compression ratio.
pub const DEFLATE_LEVEL: u32 = 6;

/// Sequences shorter than this report a compression ratio of 1.0.
pub const CR_MIN_TOKENS: usize = 64;

/// One generated token.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeStep {
    pub step: usize,
    pub token: u32,
    /// Probability of the most likely token at this step.
    pub p_max: f64,
}

/// A finished (or truncated) generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub prompt_len: usize,
    pub steps: Vec<DecodeStep>,
    /// Stopped on an end token rather than at `t_max`.
    pub terminated_naturally: bool,
    pub t_max: usize,
}

impl GenerationRecord {
    pub fn tokens(&self) -> Vec<u32> {
        self.steps.iter().map(|s| s.token).collect()
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Thresholds of the post-hoc loop rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoopRuleConfig {
    pub theta_ttr: f64,
    pub theta_cr: f64,
    pub theta_len: usize,
    pub t_max: usize,
}

impl Default for LoopRuleConfig {
    fn default() -> Self {
        Self {
            theta_ttr: 0.2,
            theta_cr: 0.12,
            theta_len: 2480,
            t_max: 2500,
        }
    }
}

impl LoopRuleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta_ttr > 0.0 && self.theta_ttr <= 1.0) {
            return Err(Error::InvalidConfig(format!("theta_ttr {} not in (0, 1]", self.theta_ttr)));
        }
        if !(self.theta_cr > 0.0 && self.theta_cr <= 1.0) {
            return Err(Error::InvalidConfig(format!("theta_cr {} not in (0, 1]", self.theta_cr)));
        }
        if self.theta_len > self.t_max {
            return Err(Error::InvalidConfig(format!(
                "theta_len {} exceeds t_max {}",
                self.theta_len, self.t_max
            )));
        }
        Ok(())
    }
}

/// Type-token ratio: distinct tokens over length.
pub fn distinct_token_ratio(tokens: &[u32]) -> Result<f64> {
    if tokens.is_empty() {
        return Err(Error::EmptySequence);
    }
    let distinct: HashSet<u32> = tokens.iter().copied().collect();
    Ok(distinct.len() as f64 / tokens.len() as f64)
}

/// Compression ratio with its byte counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompressionMeasurement {
    pub ratio: f64,
    pub raw_bytes: usize,
    pub compressed_bytes: usize,
    /// Below [`CR_MIN_TOKENS`]; `ratio` is fixed at 1.0.
    pub short: bool,
}

/// Tokens as 4-byte little-endian words.
pub fn serialize_tokens(tokens: &[u32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(tokens.len() * 4);
    for t in tokens {
        out.extend_from_slice(&t.to_le_bytes());
    }
    out
}

/// Length of the raw DEFLATE stream for `bytes`.
pub fn deflate_len(bytes: &[u8]) -> usize {
    let mut enc = DeflateEncoder::new(Vec::with_capacity(bytes.len() / 2 + 16), Compression::new(DEFLATE_LEVEL));
    // Writing into a Vec cannot fail.
    enc.write_all(bytes).expect("in-memory deflate");
    enc.finish().expect("in-memory deflate").len()
}

pub fn compression_measurement(tokens: &[u32]) -> Result<CompressionMeasurement> {
    if tokens.is_empty() {
        return Err(Error::EmptySequence);
    }
    let raw = serialize_tokens(tokens);
    if tokens.len() < CR_MIN_TOKENS {
        return Ok(CompressionMeasurement {
            ratio: 1.0,
            raw_bytes: raw.len(),
            compressed_bytes: raw.len(),
            short: true,
        });
    }
    let compressed = deflate_len(&raw);
    Ok(CompressionMeasurement {
        ratio: compressed as f64 / raw.len() as f64,
        raw_bytes: raw.len(),
        compressed_bytes: compressed,
        short: false,
    })
}

/// Compressed size over raw size. Lower means more redundant.
pub fn compression_ratio(tokens: &[u32]) -> Result<f64> {
    compression_measurement(tokens).map(|m| m.ratio)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoopMetrics {
    pub ttr: f64,
    pub cr: f64,
    pub len: usize,
    pub short: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoopVerdict {
    pub is_loop: bool,
    pub metrics: LoopMetrics,
}

/// The loop rule applied to a precomputed triple.
pub fn classify_triple(ttr: f64, cr: f64, len: usize, cfg: &LoopRuleConfig) -> bool {
    ttr <= cfg.theta_ttr && cr <= cfg.theta_cr && len >= cfg.theta_len
}

pub fn loop_metrics(tokens: &[u32]) -> Result<LoopMetrics> {
    let ttr = distinct_token_ratio(tokens)?;
    let m = compression_measurement(tokens)?;
    Ok(LoopMetrics {
        ttr,
        cr: m.ratio,
        len: tokens.len(),
        short: m.short,
    })
}

pub fn detect_loop(record: &GenerationRecord, cfg: &LoopRuleConfig) -> Result<LoopVerdict> {
    let metrics = loop_metrics(&record.tokens())?;
    Ok(LoopVerdict {
        is_loop: classify_triple(metrics.ttr, metrics.cr, metrics.len, cfg),
        metrics,
    })
}

/// Per-record row of an aggregate report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordMetrics {
    pub index: usize,
    pub ttr: f64,
    pub cr: f64,
    pub len: usize,
    pub is_loop: bool,
    pub terminated_naturally: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub n: usize,
    pub mean_ttr: f64,
    pub mean_cr: f64,
    pub mean_len: f64,
    pub loop_rate_pct: f64,
    pub deflate_level: u32,
    pub records: Vec<RecordMetrics>,
}

pub fn sequence_stats(records: &[GenerationRecord], cfg: &LoopRuleConfig) -> Result<AggregateReport> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(Error::NoRecords);
    }
    let mut rows = Vec::with_capacity(records.len());
    for (index, r) in records.iter().enumerate() {
        let v = detect_loop(r, cfg)?;
        rows.push(RecordMetrics {
            index,
            ttr: v.metrics.ttr,
            cr: v.metrics.cr,
            len: v.metrics.len,
            is_loop: v.is_loop,
            terminated_naturally: r.terminated_naturally,
        });
    }
    let n = rows.len() as f64;
    Ok(AggregateReport {
        n: rows.len(),
        mean_ttr: rows.iter().map(|r| r.ttr).sum::<f64>() / n,
        mean_cr: rows.iter().map(|r| r.cr).sum::<f64>() / n,
        mean_len: rows.iter().map(|r| r.len as f64).sum::<f64>() / n,
        loop_rate_pct: 100.0 * rows.iter().filter(|r| r.is_loop).count() as f64 / n,
        deflate_level: DEFLATE_LEVEL,
        records: rows,
    })
}

/// One row of the summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub method: String,
    pub dataset: String,
    pub cr: f64,
    pub ttr: f64,
    pub avg_len: f64,
    pub loop_rate: f64,
}

impl TableRow {
    pub fn from_report(method: &str, dataset: &str, report: &AggregateReport) -> Self {
        Self {
            method: method.to_string(),
            dataset: dataset.to_string(),
            cr: report.mean_cr,
            ttr: report.mean_ttr,
            avg_len: report.mean_len,
            loop_rate: report.loop_rate_pct,
        }
    }
}

pub fn write_table_csv<W: Write>(rows: &[TableRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// On-disk form of a generation log line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecordLine {
    #[serde(default)]
    pub prompt_len: usize,
    pub tokens: Vec<i64>,
    #[serde(default)]
    pub p_max: Option<Vec<f64>>,
    #[serde(default)]
    pub terminated_naturally: bool,
    #[serde(default = "default_t_max")]
    pub t_max: usize,
}

fn default_t_max() -> usize {
    LoopRuleConfig::default().t_max
}

impl From<&GenerationRecord> for RecordLine {
    fn from(r: &GenerationRecord) -> Self {
        Self {
            prompt_len: r.prompt_len,
            tokens: r.steps.iter().map(|s| i64::from(s.token)).collect(),
            p_max: Some(r.steps.iter().map(|s| s.p_max).collect()),
            terminated_naturally: r.terminated_naturally,
            t_max: r.t_max,
        }
    }
}

impl RecordLine {
    pub fn into_record(self) -> std::result::Result<GenerationRecord, String> {
        if self.tokens.is_empty() {
            return Err("empty token list".into());
        }
        if self.tokens.len() > self.t_max {
            return Err(format!("{} tokens exceed t_max {}", self.tokens.len(), self.t_max));
        }
        if let Some(p) = &self.p_max {
            if p.len() != self.tokens.len() {
                return Err(format!("p_max has {} entries for {} tokens", p.len(), self.tokens.len()));
            }
            if let Some(bad) = p.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(format!("p_max value {bad} not in [0, 1]"));
            }
        }
        let mut steps = Vec::with_capacity(self.tokens.len());
        for (i, &tok) in self.tokens.iter().enumerate() {
            let token = u32::try_from(tok).map_err(|_| format!("token id {tok} at index {i} is out of range"))?;
            let p_max = self.p_max.as_ref().map_or(0.0, |p| p[i]);
            steps.push(DecodeStep { step: i, token, p_max });
        }
        Ok(GenerationRecord {
            prompt_len: self.prompt_len,
            steps,
            terminated_naturally: self.terminated_naturally,
            t_max: self.t_max,
        })
    }
}

/// A rejected input line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineError {
    /// 1-based line number.
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct Ingested {
    pub records: Vec<GenerationRecord>,
    pub errors: Vec<LineError>,
}

/// Reads JSONL generation logs. Bad lines are reported and skipped.
pub fn read_records_jsonl<R: BufRead>(input: R) -> Result<Ingested> {
    let mut records = Vec::new();
    let mut errors = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<RecordLine>(&line)
            .map_err(|e| e.to_string())
            .and_then(RecordLine::into_record);
        match parsed {
            Ok(r) => records.push(r),
            Err(message) => errors.push(LineError { line: i + 1, message }),
        }
    }
    Ok(Ingested { records, errors })
}

pub fn write_records_jsonl<W: Write>(records: &[GenerationRecord], mut out: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, &RecordLine::from(r))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
