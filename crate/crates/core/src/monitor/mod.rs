//! Online degeneration monitor.
//!
//! The monitor consumes one decode step at a time, keeps windowed statistics
//! over the last `window` tokens, and decides when an intervention should fire.

mod novelty;
mod tail;

use std::collections::{HashMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

pub use novelty::{novelty, NoveltyTracker};
pub use tail::{tail_repetition_scan, Debounce, TailMatch, TailScanConfig, TailTracker};

use crate::error::{Error, Result};
use crate::metrics::{compression_ratio, DecodeStep, CR_MIN_TOKENS};

/// Which trigger logic the monitor runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MonitorPreset {
    /// Never fires.
    NoGuard,
    /// Fires on a fixed schedule regardless of the signals.
    AlwaysOn,
    /// Fires on the confidence-streak vote alone.
    SingleSignal,
    /// Vote plus persistence gates.
    #[default]
    Full,
}

impl fmt::Display for MonitorPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::NoGuard => "no_guard",
            Self::AlwaysOn => "always_on",
            Self::SingleSignal => "single_signal",
            Self::Full => "full",
        })
    }
}

impl std::str::FromStr for MonitorPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "no_guard" => Ok(Self::NoGuard),
            "always_on" => Ok(Self::AlwaysOn),
            "single_signal" => Ok(Self::SingleSignal),
            "full" => Ok(Self::Full),
            other => Err(Error::InvalidConfig(format!("unknown preset '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MonitorConfig {
    pub preset: MonitorPreset,
    /// Width of the statistics window.
    pub window: usize,
    /// Votes needed for a warning.
    pub k_vote: usize,
    pub theta_ttr: f64,
    pub theta_cr: f64,
    /// A step counts toward the streak when p_max exceeds this.
    pub theta_conf: f64,
    pub theta_streak: usize,
    pub theta_novelty: f64,
    /// Consecutive low-novelty steps before the stall gate opens.
    pub theta_stall: usize,
    pub ngram_n: usize,
    /// Warm-up: no trigger before this step.
    pub t_min: usize,
    /// Steps suppressed after an intervention.
    pub cooldown: usize,
    /// Recompute the windowed compression ratio every this many steps.
    pub cr_interval: usize,
    pub tail: TailScanConfig,
    /// Identical consecutive tail scans needed to assert the tail gate.
    pub debounce: usize,
    /// Firing interval of the always-on preset.
    pub always_on_interval: usize,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        Self {
            preset: MonitorPreset::Full,
            window: 256,
            k_vote: 2,
            theta_ttr: 0.2,
            theta_cr: 0.12,
            theta_conf: 0.9,
            theta_streak: 6,
            theta_novelty: 0.02,
            theta_stall: 4,
            ngram_n: 4,
            t_min: 64,
            cooldown: 32,
            cr_interval: 16,
            tail: TailScanConfig::default(),
            debounce: 3,
            always_on_interval: 200,
        }
    }
}

impl MonitorConfig {
    pub fn with_preset(preset: MonitorPreset) -> Self {
        Self { preset, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.window == 0 {
            return bad("window must be positive".into());
        }
        if self.k_vote == 0 || self.k_vote > 3 {
            return bad(format!("k_vote {} not in 1..=3", self.k_vote));
        }
        if self.ngram_n == 0 {
            return bad("ngram_n must be positive".into());
        }
        if self.cr_interval == 0 {
            return bad("cr_interval must be positive".into());
        }
        if self.always_on_interval == 0 {
            return bad("always_on_interval must be positive".into());
        }
        if self.tail.period_max == 0 || self.tail.min_repeats < 2 {
            return bad("tail scan needs period_max >= 1 and min_repeats >= 2".into());
        }
        if self.debounce == 0 {
            return bad("debounce must be positive".into());
        }
        Ok(())
    }
}

/// K-of-3 vote over the windowed signals.
pub fn warn_vote(m_ttr: f64, m_cr: f64, streak: usize, cfg: &MonitorConfig) -> bool {
    let votes = usize::from(m_ttr < cfg.theta_ttr) + usize::from(m_cr < cfg.theta_cr) + usize::from(streak >= cfg.theta_streak);
    votes >= cfg.k_vote
}

/// Counts consecutive low-novelty evaluations.
#[derive(Debug, Clone, Default)]
pub struct StallGate {
    run: usize,
}

impl StallGate {
    /// True once `theta_stall` consecutive values fall below `theta_novelty`.
    pub fn observe(&mut self, novelty: f64, cfg: &MonitorConfig) -> bool {
        self.run = if novelty < cfg.theta_novelty { self.run + 1 } else { 0 };
        self.run >= cfg.theta_stall
    }

    pub fn count(&self) -> usize {
        self.run
    }

    pub fn reset(&mut self) {
        self.run = 0;
    }
}

/// Everything the monitor knows after one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub step: usize,
    pub m_ttr: f64,
    /// `None` until the window holds enough tokens.
    pub m_cr: Option<f64>,
    pub streak: usize,
    pub novelty: f64,
    pub warn: bool,
    pub stall: bool,
    /// Debounced periodic tail, indices in decode steps.
    pub tail: Option<TailMatch>,
    pub cooldown: usize,
    pub trigger: bool,
}

/// One JSONL trace row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub m_ttr: f64,
    pub m_cr: Option<f64>,
    pub streak: usize,
    pub novelty: f64,
    pub warn: bool,
    pub stall: bool,
    pub tail_period: Option<usize>,
    pub trigger: bool,
}

impl From<&Decision> for TraceRow {
    fn from(d: &Decision) -> Self {
        Self {
            step: d.step,
            m_ttr: d.m_ttr,
            m_cr: d.m_cr,
            streak: d.streak,
            novelty: d.novelty,
            warn: d.warn,
            stall: d.stall,
            tail_period: d.tail.map(|t| t.period),
            trigger: d.trigger,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Monitor {
    cfg: MonitorConfig,
    next_step: usize,
    window: VecDeque<u32>,
    counts: HashMap<u32, usize>,
    streak: usize,
    stall: StallGate,
    novelty: NoveltyTracker,
    tail: TailTracker,
    debounce: Debounce,
    cr_cache: Option<(usize, f64)>,
    cooldown_remaining: usize,
    pending: bool,
    interventions: usize,
}

impl Monitor {
    pub fn new(cfg: MonitorConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            next_step: 0,
            window: VecDeque::with_capacity(cfg.window + 1),
            counts: HashMap::new(),
            streak: 0,
            stall: StallGate::default(),
            novelty: NoveltyTracker::new(cfg.ngram_n, cfg.window),
            tail: TailTracker::new(cfg.tail.clone()),
            debounce: Debounce::default(),
            cr_cache: None,
            cooldown_remaining: 0,
            pending: false,
            interventions: 0,
            cfg,
        })
    }

    pub fn config(&self) -> &MonitorConfig {
        &self.cfg
    }

    pub fn interventions(&self) -> usize {
        self.interventions
    }

    pub fn steps_seen(&self) -> usize {
        self.next_step
    }

    pub fn cooldown_remaining(&self) -> usize {
        self.cooldown_remaining
    }

    pub fn stall_count(&self) -> usize {
        self.stall.count()
    }

    pub fn streak(&self) -> usize {
        self.streak
    }

    fn windowed_cr(&mut self, step: usize) -> Option<f64> {
        if self.window.len() < CR_MIN_TOKENS {
            return None;
        }
        match self.cr_cache {
            Some((at, v)) if step - at < self.cfg.cr_interval => Some(v),
            _ => {
                let (a, b) = self.window.as_slices();
                let tokens = [a, b].concat();
                // Non-empty by the length check above.
                let v = compression_ratio(&tokens).ok()?;
                self.cr_cache = Some((step, v));
                Some(v)
            }
        }
    }

    pub fn update(&mut self, s: &DecodeStep) -> Result<Decision> {
        if s.step != self.next_step {
            return Err(Error::OutOfOrderStep {
                expected: self.next_step,
                got: s.step,
            });
        }
        self.next_step += 1;
        let step = s.step;

        self.window.push_back(s.token);
        *self.counts.entry(s.token).or_insert(0) += 1;
        if self.window.len() > self.cfg.window {
            let old = self.window.pop_front().expect("non-empty window");
            if let Some(c) = self.counts.get_mut(&old) {
                *c -= 1;
                if *c == 0 {
                    self.counts.remove(&old);
                }
            }
        }
        let m_ttr = self.counts.len() as f64 / self.window.len() as f64;
        let m_cr = self.windowed_cr(step);

        self.streak = if s.p_max > self.cfg.theta_conf { self.streak + 1 } else { 0 };

        let nov = self.novelty.push(s.token);
        let stall = self.stall.observe(nov, &self.cfg);

        let scan = self.tail.push(s.token);
        let tail_ok = self.debounce.observe(scan.map(|m| m.period), self.cfg.debounce);
        let tail = if tail_ok { scan } else { None };

        let warn = warn_vote(m_ttr, m_cr.unwrap_or(f64::INFINITY), self.streak, &self.cfg);
        let gated = step >= self.cfg.t_min && self.cooldown_remaining == 0;
        let trigger = match self.cfg.preset {
            MonitorPreset::NoGuard => false,
            MonitorPreset::AlwaysOn => step.is_multiple_of(self.cfg.always_on_interval),
            MonitorPreset::SingleSignal => gated && self.streak >= self.cfg.theta_streak,
            MonitorPreset::Full => gated && warn && (stall || tail.is_some()),
        };

        let decision = Decision {
            step,
            m_ttr,
            m_cr,
            streak: self.streak,
            novelty: nov,
            warn,
            stall,
            tail,
            cooldown: self.cooldown_remaining,
            trigger,
        };
        self.cooldown_remaining = self.cooldown_remaining.saturating_sub(1);
        self.pending = trigger;
        Ok(decision)
    }

    /// Acknowledges that the last trigger was acted on.
    pub fn notify_intervention(&mut self) -> Result<()> {
        if !self.pending {
            return Err(Error::DoubleNotify);
        }
        self.pending = false;
        self.cooldown_remaining = self.cfg.cooldown;
        self.streak = 0;
        self.stall.reset();
        self.debounce.reset();
        self.interventions += 1;
        Ok(())
    }
}
