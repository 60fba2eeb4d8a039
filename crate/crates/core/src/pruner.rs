//! Keep-set construction and progressive aggressiveness.

use serde::{Deserialize, Serialize};

use crate::cache::CacheState;
use crate::error::{Error, Result};

/// Smallest recent budget at any aggressiveness level.
pub const MIN_RECENT: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrunerConfig {
    pub n_anchor: usize,
    /// Width of the recent window, R.
    pub recent_window: usize,
    /// Total retained budget, B.
    pub budget: usize,
    pub level_cap: usize,
    /// A trigger this soon after the previous one escalates the level.
    pub retrigger_window: usize,
    /// Quiet steps before the level decays by one.
    pub decay_quiet_steps: usize,
    pub decay_enabled: bool,
}

impl Default for PrunerConfig {
    fn default() -> Self {
        Self {
            n_anchor: 32,
            recent_window: 512,
            budget: 1024,
            level_cap: 3,
            retrigger_window: 256,
            decay_quiet_steps: 512,
            decay_enabled: true,
        }
    }
}

impl PrunerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_anchor + MIN_RECENT > self.budget {
            return Err(Error::InvalidConfig(format!(
                "n_anchor {} + {MIN_RECENT} exceeds budget {}",
                self.n_anchor, self.budget
            )));
        }
        if self.recent_window == 0 {
            return Err(Error::InvalidConfig("recent_window must be positive".into()));
        }
        Ok(())
    }
}

/// Inclusive index range excluded from the recent part.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BadSpan {
    pub start: usize,
    pub end: usize,
}

impl BadSpan {
    pub fn contains(&self, i: usize) -> bool {
        (self.start..=self.end).contains(&i)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeepSet {
    pub anchor: Vec<usize>,
    pub sparse: Vec<usize>,
    pub recent: Vec<usize>,
    /// Sorted union of the three parts.
    pub union: Vec<usize>,
}

impl KeepSet {
    fn from_parts(anchor: Vec<usize>, sparse: Vec<usize>, recent: Vec<usize>) -> Self {
        let mut union: Vec<usize> = anchor.iter().chain(&sparse).chain(&recent).copied().collect();
        union.sort_unstable();
        Self { anchor, sparse, recent, union }
    }

    pub fn len(&self) -> usize {
        self.union.len()
    }

    pub fn is_empty(&self) -> bool {
        self.union.is_empty()
    }
}

pub fn recent_budget(level: usize, cfg: &PrunerConfig) -> usize {
    let level = level.min(cfg.level_cap);
    let shifted = cfg.recent_window.checked_shr(level as u32).unwrap_or(0);
    shifted.max(MIN_RECENT)
}

/// First index of the recent window at step `t`. Anchors are never part of it.
fn recent_start(t: usize, cfg: &PrunerConfig) -> usize {
    (t + 1).saturating_sub(cfg.recent_window).max(cfg.n_anchor)
}

/// Newest indices of the recent window outside `bad`, at most `recent_budget(level)`.
pub fn clean_recent(t: usize, bad: Option<BadSpan>, cfg: &PrunerConfig, level: usize) -> Vec<usize> {
    let cap = recent_budget(level, cfg);
    let mut out: Vec<usize> = (recent_start(t, cfg)..=t)
        .rev()
        .filter(|i| !bad.is_some_and(|b| b.contains(*i)))
        .take(cap)
        .collect();
    out.reverse();
    out
}

/// Evenly strided indices from `[n_anchor, recent_start)`.
pub fn select_sparse(t: usize, bad: Option<BadSpan>, sparse_budget: usize, cfg: &PrunerConfig) -> Vec<usize> {
    let lo = cfg.n_anchor;
    let hi = recent_start(t, cfg);
    if sparse_budget == 0 || hi <= lo {
        return Vec::new();
    }
    let len = hi - lo;
    let stride = len.div_ceil(sparse_budget);
    (lo..hi)
        .step_by(stride)
        .filter(|i| !bad.is_some_and(|b| b.contains(*i)))
        .collect()
}

pub fn build_keep_set(t: usize, bad: Option<BadSpan>, level: usize, cfg: &PrunerConfig) -> Result<KeepSet> {
    if t < cfg.n_anchor {
        return Err(Error::TooEarlyToPrune { t, n_anchor: cfg.n_anchor });
    }
    if let Some(b) = bad {
        if b.start > b.end || b.end > t {
            return Err(Error::InvalidBadSpan { start: b.start, end: b.end, t });
        }
    }
    let anchor: Vec<usize> = (0..cfg.n_anchor).collect();
    if t < cfg.budget && bad.is_none() {
        return Ok(KeepSet::from_parts(anchor, Vec::new(), (cfg.n_anchor..=t).collect()));
    }
    let mut recent = clean_recent(t, bad, cfg, level);
    let room = cfg.budget - cfg.n_anchor;
    if recent.len() > room {
        recent.drain(..recent.len() - room);
    }
    let sparse = select_sparse(t, bad, room - recent.len(), cfg);
    Ok(KeepSet::from_parts(anchor, sparse, recent))
}

/// Keeps the positions of `keep` that are still in the cache.
pub fn apply_prune(cache: &mut CacheState, keep: &KeepSet) -> Result<usize> {
    let present: Vec<usize> = keep.union.iter().copied().filter(|p| cache.contains(*p)).collect();
    cache.gather_indices(&present)?;
    Ok(present.len())
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Aggressiveness {
    pub level: usize,
    pub last_trigger_step: Option<usize>,
    /// Step of the last trigger or decay; quiet time is measured from here.
    pub last_change_step: Option<usize>,
}

impl Aggressiveness {
    /// Call with `triggered = true` on every trigger and `false` on quiet steps.
    pub fn escalate_or_decay(&mut self, step: usize, triggered: bool, cfg: &PrunerConfig) {
        if triggered {
            if let Some(last) = self.last_trigger_step {
                if step.saturating_sub(last) < cfg.retrigger_window {
                    self.level = (self.level + 1).min(cfg.level_cap);
                }
            }
            self.last_trigger_step = Some(step);
            self.last_change_step = Some(step);
        } else if cfg.decay_enabled && self.level > 0 {
            if let Some(since) = self.last_change_step {
                if step.saturating_sub(since) >= cfg.decay_quiet_steps {
                    self.level -= 1;
                    self.last_change_step = Some(step);
                }
            }
        }
    }
}

/// One logged intervention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionEvent {
    pub stream: usize,
    /// Decode step of the trigger.
    pub step: usize,
    /// Absolute cache position of the newest token.
    pub position: usize,
    pub level: usize,
    pub bad_span: Option<BadSpan>,
    pub anchor: usize,
    pub sparse: usize,
    pub recent: usize,
    pub kept: usize,
}
