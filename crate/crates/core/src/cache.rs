//! Simulated multi-layer KV cache with pluggable eviction.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Keys and values for one token in one layer, per head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub position: usize,
    pub keys: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
    /// Attention mass this position has received so far.
    pub cum_attention: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CachePolicy {
    /// No eviction.
    Full,
    /// Keep the first `n_sink` positions and the last `window`.
    SinkWindow { n_sink: usize, window: usize },
    /// Keep the last `recent` entries and the `heavy` older entries with the most attention.
    HeavyHitter { recent: usize, heavy: usize },
    /// Anchors plus newest entries up to `budget`; the pruner edits the rest.
    LoopGuard { n_anchor: usize, budget: usize },
}

impl fmt::Display for CachePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Full => f.write_str("full"),
            Self::SinkWindow { .. } => f.write_str("sink_window"),
            Self::HeavyHitter { .. } => f.write_str("heavy_hitter"),
            Self::LoopGuard { .. } => f.write_str("loopguard"),
        }
    }
}

impl CachePolicy {
    /// The named policy sized to a total budget.
    pub fn from_name(name: &str, budget: usize, n_anchor: usize) -> Result<Self> {
        let window = budget.checked_sub(n_anchor).filter(|w| *w > 0);
        match name {
            "full" => Ok(Self::Full),
            "sink_window" => Ok(Self::SinkWindow {
                n_sink: n_anchor,
                window: window.ok_or_else(|| Error::InvalidConfig("budget must exceed the sink count".into()))?,
            }),
            "heavy_hitter" => Ok(Self::HeavyHitter {
                recent: budget / 4,
                heavy: budget - budget / 4,
            }),
            "loopguard" => {
                window.ok_or_else(|| Error::InvalidConfig("budget must exceed the anchor count".into()))?;
                Ok(Self::LoopGuard { n_anchor, budget })
            }
            other => Err(Error::InvalidConfig(format!("unknown cache policy '{other}'"))),
        }
    }

    pub fn capacity(&self) -> Option<usize> {
        match *self {
            Self::Full => None,
            Self::SinkWindow { n_sink, window } => Some(n_sink + window),
            Self::HeavyHitter { recent, heavy } => Some(recent + heavy),
            Self::LoopGuard { budget, .. } => Some(budget),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheShape {
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
}

/// Per-layer ordered entries. All layers share one accessible set.
#[derive(Debug, Clone)]
pub struct CacheState {
    shape: CacheShape,
    policy: CachePolicy,
    layers: Vec<BTreeMap<usize, CacheEntry>>,
    next_position: usize,
    gather_ops: u64,
    prune_epoch: u64,
}

impl CacheState {
    pub fn new(shape: CacheShape, policy: CachePolicy) -> Result<Self> {
        if shape.layers == 0 || shape.heads == 0 {
            return Err(Error::ShapeMismatch("need at least one layer and one head".into()));
        }
        if let Some(0) = policy.capacity() {
            return Err(Error::InvalidConfig("cache capacity must be positive".into()));
        }
        Ok(Self {
            shape,
            policy,
            layers: vec![BTreeMap::new(); shape.layers],
            next_position: 0,
            gather_ops: 0,
            prune_epoch: 0,
        })
    }

    pub fn shape(&self) -> CacheShape {
        self.shape
    }

    pub fn policy(&self) -> CachePolicy {
        self.policy
    }

    pub fn len(&self) -> usize {
        self.layers[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers[0].is_empty()
    }

    /// Position the next appended token must carry.
    pub fn next_position(&self) -> usize {
        self.next_position
    }

    /// Sorted accessible positions.
    pub fn accessible(&self) -> Vec<usize> {
        self.layers[0].keys().copied().collect()
    }

    pub fn positions(&self) -> impl DoubleEndedIterator<Item = usize> + '_ {
        self.layers[0].keys().copied()
    }

    pub fn positions_from(&self, start: usize) -> impl DoubleEndedIterator<Item = usize> + '_ {
        self.layers[0].range(start..).map(|(p, _)| *p)
    }

    pub fn contains(&self, position: usize) -> bool {
        self.layers[0].contains_key(&position)
    }

    pub fn entries(&self, layer: usize) -> impl Iterator<Item = &CacheEntry> {
        self.layers[layer].values()
    }

    pub fn entry(&self, layer: usize, position: usize) -> Option<&CacheEntry> {
        self.layers[layer].get(&position)
    }

    /// Entries touched by gather operations so far.
    pub fn gather_ops(&self) -> u64 {
        self.gather_ops
    }

    /// Bumped whenever a gather removes at least one entry.
    pub fn prune_epoch(&self) -> u64 {
        self.prune_epoch
    }

    /// Appends one token's keys and values (indexed `[layer][head]`) and then
    /// applies the eviction policy.
    pub fn append(&mut self, position: usize, keys: Vec<Vec<Vec<f64>>>, values: Vec<Vec<Vec<f64>>>) -> Result<()> {
        if position != self.next_position {
            return Err(Error::NonContiguousPosition {
                expected: self.next_position,
                position,
            });
        }
        let CacheShape { layers, heads, head_dim } = self.shape;
        if keys.len() != layers || values.len() != layers {
            return Err(Error::ShapeMismatch(format!("expected {layers} layers")));
        }
        for l in 0..layers {
            if keys[l].len() != heads || values[l].len() != heads {
                return Err(Error::ShapeMismatch(format!("expected {heads} heads in layer {l}")));
            }
            if keys[l].iter().chain(values[l].iter()).any(|v| v.len() != head_dim) {
                return Err(Error::ShapeMismatch(format!("expected head_dim {head_dim} in layer {l}")));
            }
        }
        for (l, (k, v)) in keys.into_iter().zip(values).enumerate() {
            self.layers[l].insert(
                position,
                CacheEntry {
                    position,
                    keys: k,
                    values: v,
                    cum_attention: 0.0,
                },
            );
        }
        self.next_position += 1;
        self.evict();
        Ok(())
    }

    /// Appends zero vectors; handy when only positions matter.
    pub fn append_blank(&mut self, position: usize) -> Result<()> {
        let CacheShape { layers, heads, head_dim } = self.shape;
        let blank = vec![vec![vec![0.0; head_dim]; heads]; layers];
        self.append(position, blank.clone(), blank)
    }

    fn remove(&mut self, position: usize) {
        for layer in &mut self.layers {
            layer.remove(&position);
        }
    }

    fn evict(&mut self) {
        match self.policy {
            CachePolicy::Full => {}
            CachePolicy::SinkWindow { n_sink, window } => self.evict_sink_window(n_sink, window),
            CachePolicy::HeavyHitter { recent, heavy } => self.evict_heavy_hitter(recent, heavy),
            CachePolicy::LoopGuard { n_anchor, budget } => {
                while self.len() > budget {
                    let oldest = self.layers[0].range(n_anchor..).next().map(|(p, _)| *p);
                    match oldest {
                        Some(p) => self.remove(p),
                        None => break,
                    }
                }
            }
        }
    }

    fn evict_sink_window(&mut self, n_sink: usize, window: usize) {
        let newest = self.next_position.saturating_sub(1);
        let cutoff = (newest + 1).saturating_sub(window);
        let stale: Vec<usize> = self.layers[0].range(n_sink..cutoff.max(n_sink)).map(|(p, _)| *p).collect();
        for p in stale {
            self.remove(p);
        }
    }

    fn evict_heavy_hitter(&mut self, recent: usize, heavy: usize) {
        while self.len() > recent + heavy {
            let older = self.len() - recent;
            // Lowest score among non-recent entries; ties go to the newer position.
            let victim = self.layers[0]
                .values()
                .take(older)
                .min_by(|a, b| {
                    a.cum_attention
                        .total_cmp(&b.cum_attention)
                        .then(b.position.cmp(&a.position))
                })
                .map(|e| e.position);
            match victim {
                Some(p) => self.remove(p),
                None => break,
            }
        }
    }

    /// Adds one step's attention weights, keyed by position, to the running mass.
    pub fn record_attention(&mut self, weights: &[(usize, f64)]) -> Result<()> {
        let total: f64 = weights.iter().map(|(_, w)| w).sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::WeightsNotNormalized(total));
        }
        let mut sorted;
        let mut weights = weights;
        if !weights.windows(2).all(|w| w[0].0 < w[1].0) {
            sorted = weights.to_vec();
            sorted.sort_by_key(|w| w.0);
            weights = &sorted;
        }
        // Merge join against the ordered entries; validate before mutating.
        let mut it = self.layers[0].keys().peekable();
        for &(p, _) in weights {
            while it.next_if(|k| **k < p).is_some() {}
            if it.next_if(|k| **k == p).is_none() {
                return Err(Error::UnknownPosition(p));
            }
        }
        for layer in &mut self.layers {
            let mut entries = layer.values_mut().peekable();
            for &(p, w) in weights {
                while entries.next_if(|e| e.position < p).is_some() {}
                if let Some(e) = entries.next() {
                    e.cum_attention += w;
                }
            }
        }
        Ok(())
    }

    /// Keeps exactly the listed positions in every layer.
    pub fn gather_indices(&mut self, keep: &[usize]) -> Result<()> {
        if keep.is_empty() {
            return Err(Error::EmptyKeepSet);
        }
        if let Some(&p) = keep.iter().find(|p| !self.contains(**p)) {
            return Err(Error::UnknownPosition(p));
        }
        let mut sorted = keep.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        let before = self.len();
        for layer in &mut self.layers {
            let mut kept = BTreeMap::new();
            for &p in &sorted {
                if let Some(e) = layer.remove(&p) {
                    kept.insert(p, e);
                }
            }
            *layer = kept;
        }
        self.gather_ops += (self.shape.layers * sorted.len()) as u64;
        if sorted.len() < before {
            self.prune_epoch += 1;
        }
        Ok(())
    }

    pub fn snapshot(&self) -> CacheSnapshot {
        CacheSnapshot {
            policy: self.policy,
            shape: self.shape,
            next_position: self.next_position,
            positions: self.accessible(),
            cum_attention: self.layers[0].values().map(|e| e.cum_attention).collect(),
            gather_ops: self.gather_ops,
            prune_epoch: self.prune_epoch,
        }
    }
}

/// Serializable view of the cache bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheSnapshot {
    pub policy: CachePolicy,
    pub shape: CacheShape,
    pub next_position: usize,
    pub positions: Vec<usize>,
    pub cum_attention: Vec<f64>,
    pub gather_ops: u64,
    pub prune_epoch: u64,
}

impl CacheSnapshot {
    /// `position,cum_attention` rows.
    pub fn write_attention_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["position", "cum_attention"])?;
        for (p, a) in self.positions.iter().zip(&self.cum_attention) {
            w.write_record([p.to_string(), a.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}
