//! Periodic-tail detection.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TailScanConfig {
    /// Largest period tested.
    pub period_max: usize,
    /// Minimum number of full periods in the tail.
    pub min_repeats: usize,
    /// Minimum length of the periodic region.
    pub min_span: usize,
    /// How many trailing tokens the scan may look at.
    pub horizon: usize,
}

impl Default for TailScanConfig {
    fn default() -> Self {
        Self {
            period_max: 64,
            min_repeats: 2,
            min_span: 24,
            horizon: 512,
        }
    }
}

/// A periodic tail ending at the newest token.
///
/// Indices are into the scanned history. The periodic region is
/// `[region_start, end]`; the repetitive copies after the first period are
/// `[bad_start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TailMatch {
    pub period: usize,
    pub region_start: usize,
    pub bad_start: usize,
    pub end: usize,
}

fn accept(run: usize, p: usize, cfg: &TailScanConfig) -> bool {
    run > 0 && run >= (cfg.min_repeats.saturating_sub(1)) * p && run + p >= cfg.min_span
}

fn make_match(run: usize, p: usize, end: usize) -> TailMatch {
    TailMatch {
        period: p,
        region_start: end + 1 - run - p,
        bad_start: end + 1 - run,
        end,
    }
}

/// Smallest period whose tail run satisfies the repetition rule.
///
/// For each `p`, counts how many consecutive newest tokens satisfy
/// `y[i] == y[i - p]`, without reaching before the horizon.
pub fn tail_repetition_scan(history: &[u32], cfg: &TailScanConfig) -> Option<TailMatch> {
    let n = history.len();
    if n < 2 {
        return None;
    }
    let end = n - 1;
    let lo = n.saturating_sub(cfg.horizon);
    for p in 1..=cfg.period_max {
        let mut run = 0;
        while end >= run + p + lo && history[end - run] == history[end - run - p] {
            run += 1;
        }
        if accept(run, p, cfg) {
            return Some(make_match(run, p, end));
        }
    }
    None
}

/// Incremental form of [`tail_repetition_scan`], O(period_max) per token.
#[derive(Debug, Clone)]
pub struct TailTracker {
    cfg: TailScanConfig,
    ring: Vec<u32>,
    runs: Vec<usize>,
    len: usize,
}

impl TailTracker {
    pub fn new(cfg: TailScanConfig) -> Self {
        let cap = cfg.period_max + 1;
        Self {
            runs: vec![0; cfg.period_max + 1],
            ring: vec![0; cap],
            len: 0,
            cfg,
        }
    }

    fn at(&self, idx: usize) -> u32 {
        self.ring[idx % self.ring.len()]
    }

    /// Appends a token and returns the scan result for the new tail.
    pub fn push(&mut self, token: u32) -> Option<TailMatch> {
        let idx = self.len;
        let cap = self.ring.len();
        self.ring[idx % cap] = token;
        self.len += 1;
        let mut found = None;
        for p in 1..=self.cfg.period_max {
            let limit = self.cfg.horizon.saturating_sub(p);
            self.runs[p] = if idx >= p && self.at(idx - p) == token {
                (self.runs[p] + 1).min(limit)
            } else {
                0
            };
            if found.is_none() && accept(self.runs[p], p, &self.cfg) {
                found = Some(make_match(self.runs[p], p, idx));
            }
        }
        found
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Requires the same period on `required` consecutive scans.
#[derive(Debug, Clone, Default)]
pub struct Debounce {
    last: Option<usize>,
    count: usize,
}

impl Debounce {
    pub fn observe(&mut self, period: Option<usize>, required: usize) -> bool {
        match period {
            Some(p) if self.last == Some(p) => self.count += 1,
            Some(p) => {
                self.last = Some(p);
                self.count = 1;
            }
            None => {
                self.last = None;
                self.count = 0;
            }
        }
        self.last.is_some() && self.count >= required
    }

    pub fn reset(&mut self) {
        *self = Self::default();
    }
}
