//! Brute-force reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeSet, HashSet};

use loopguard::cache::{CachePolicy, CacheShape, CacheState};
use loopguard::metrics::compression_ratio;
use loopguard::monitor::{MonitorConfig, MonitorPreset};
use loopguard::pruner::{apply_prune, build_keep_set, BadSpan, PrunerConfig};
use loopguard::rope::{attention_scores_rotated, attention_step, gaussian_vec, softmax, Positioned, RopeConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Keep set built by plain set arithmetic.
pub struct RefKeep {
    pub anchor: BTreeSet<usize>,
    pub sparse: BTreeSet<usize>,
    pub recent: BTreeSet<usize>,
}

impl RefKeep {
    pub fn union(&self) -> Vec<usize> {
        self.anchor.iter().chain(&self.sparse).chain(&self.recent).copied().collect::<BTreeSet<_>>().into_iter().collect()
    }
}

pub fn ref_keep_set(t: usize, bad: Option<BadSpan>, level: usize, cfg: &PrunerConfig) -> Option<RefKeep> {
    if t < cfg.n_anchor {
        return None;
    }
    let in_bad = |i: usize| bad.is_some_and(|b| i >= b.start && i <= b.end);
    let anchor: BTreeSet<usize> = (0..cfg.n_anchor).collect();
    if t < cfg.budget && bad.is_none() {
        return Some(RefKeep {
            anchor,
            sparse: BTreeSet::new(),
            recent: (cfg.n_anchor..=t).collect(),
        });
    }
    let lvl = level.min(cfg.level_cap);
    let mut rb = cfg.recent_window;
    for _ in 0..lvl {
        rb /= 2;
    }
    let rb = rb.max(32);

    let window: Vec<usize> = (0..=t).filter(|&i| i + cfg.recent_window > t && i >= cfg.n_anchor).collect();
    let mut survivors: Vec<usize> = window.iter().copied().filter(|&i| !in_bad(i)).collect();
    survivors.sort_unstable_by(|a, b| b.cmp(a));
    survivors.truncate(rb);
    survivors.truncate(cfg.budget - cfg.n_anchor);
    let recent: BTreeSet<usize> = survivors.into_iter().collect();

    let sb = cfg.budget - cfg.n_anchor - recent.len();
    let cand: Vec<usize> = (cfg.n_anchor..=t).filter(|&i| i + cfg.recent_window <= t).collect();
    let mut sparse = BTreeSet::new();
    if sb > 0 && !cand.is_empty() {
        let stride = cand.len().div_ceil(sb);
        let mut k = 0;
        while k < cand.len() {
            if !in_bad(cand[k]) {
                sparse.insert(cand[k]);
            }
            k += stride;
        }
    }
    Some(RefKeep { anchor, sparse, recent })
}

/// What the reference monitor decided at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct RefDecision {
    pub m_ttr: f64,
    pub m_cr: Option<f64>,
    pub streak: usize,
    pub novelty: f64,
    pub warn: bool,
    pub stall: bool,
    /// (period, bad_start, end)
    pub tail: Option<(usize, usize, usize)>,
    pub trigger: bool,
}

/// Recomputes every statistic from the full history at each step.
pub struct RefMonitor {
    pub cfg: MonitorConfig,
    hist: Vec<u32>,
    streak: usize,
    stall_run: usize,
    cr_last: Option<(usize, f64)>,
    deb: Option<(usize, usize)>,
    cooldown: usize,
    pending: bool,
    pub interventions: usize,
}

pub fn brute_novelty(hist: &[u32], ws: usize, n: usize) -> f64 {
    let len = hist.len();
    if len - ws < n {
        return 1.0;
    }
    let before: HashSet<Vec<u32>> = (0..ws.saturating_sub(n - 1)).map(|k| hist[k..k + n].to_vec()).collect();
    let mut total = 0;
    let mut fresh = 0;
    for j in ws..=len - n {
        total += 1;
        if !before.contains(&hist[j..j + n]) {
            fresh += 1;
        }
    }
    fresh as f64 / total as f64
}

/// Smallest accepted period by direct comparison.
pub fn brute_tail(hist: &[u32], period_max: usize, m: usize, min_span: usize, horizon: usize) -> Option<(usize, usize, usize)> {
    let n = hist.len();
    if n == 0 {
        return None;
    }
    let t = n - 1;
    let lo = n.saturating_sub(horizon);
    for p in 1..=period_max {
        let mut l = 0;
        loop {
            // Both compared indices must lie inside the horizon.
            if t < l + p || t - l - p < lo {
                break;
            }
            if hist[t - l] != hist[t - l - p] {
                break;
            }
            l += 1;
        }
        if l >= 1 && l >= (m - 1) * p && l + p >= min_span {
            return Some((p, t + 1 - l, t));
        }
    }
    None
}

impl RefMonitor {
    pub fn new(cfg: MonitorConfig) -> Self {
        Self {
            cfg,
            hist: Vec::new(),
            streak: 0,
            stall_run: 0,
            cr_last: None,
            deb: None,
            cooldown: 0,
            pending: false,
            interventions: 0,
        }
    }

    pub fn step(&mut self, token: u32, p_max: f64) -> RefDecision {
        let c = self.cfg.clone();
        let step = self.hist.len();
        self.hist.push(token);
        let ws = self.hist.len().saturating_sub(c.window);
        let window = &self.hist[ws..];
        let distinct: HashSet<u32> = window.iter().copied().collect();
        let m_ttr = distinct.len() as f64 / window.len() as f64;
        let m_cr = if window.len() < 64 {
            None
        } else {
            match self.cr_last {
                Some((at, v)) if step - at < c.cr_interval => Some(v),
                _ => {
                    let v = compression_ratio(window).unwrap();
                    self.cr_last = Some((step, v));
                    Some(v)
                }
            }
        };
        self.streak = if p_max > c.theta_conf { self.streak + 1 } else { 0 };
        let novelty = brute_novelty(&self.hist, ws, c.ngram_n);
        self.stall_run = if novelty < c.theta_novelty { self.stall_run + 1 } else { 0 };
        let stall = self.stall_run >= c.theta_stall;

        let scan = brute_tail(&self.hist, c.tail.period_max, c.tail.min_repeats, c.tail.min_span, c.tail.horizon);
        self.deb = match (scan, self.deb) {
            (Some(s), Some((p, k))) if s.0 == p => Some((p, k + 1)),
            (Some(s), _) => Some((s.0, 1)),
            (None, _) => None,
        };
        let tail = match self.deb {
            Some((_, k)) if k >= c.debounce => scan,
            _ => None,
        };

        let votes = [m_ttr < c.theta_ttr, m_cr.is_some_and(|v| v < c.theta_cr), self.streak >= c.theta_streak];
        let warn = votes.iter().filter(|v| **v).count() >= c.k_vote;
        let open = step >= c.t_min && self.cooldown == 0;
        let trigger = match c.preset {
            MonitorPreset::NoGuard => false,
            MonitorPreset::AlwaysOn => step.is_multiple_of(c.always_on_interval),
            MonitorPreset::SingleSignal => open && self.streak >= c.theta_streak,
            MonitorPreset::Full => open && warn && (stall || tail.is_some()),
        };
        if self.cooldown > 0 {
            self.cooldown -= 1;
        }
        self.pending = trigger;
        RefDecision {
            m_ttr,
            m_cr,
            streak: self.streak,
            novelty,
            warn,
            stall,
            tail,
            trigger,
        }
    }

    pub fn notify(&mut self) {
        assert!(self.pending);
        self.pending = false;
        self.cooldown = self.cfg.cooldown;
        self.streak = 0;
        self.stall_run = 0;
        self.deb = None;
        self.interventions += 1;
    }
}

/// `count` distinct tokens starting at `base`.
pub fn distinct(base: u32, count: usize) -> Vec<u32> {
    (0..count as u32).map(|i| base + i).collect()
}

/// `block` repeated to length `len`.
pub fn cycle(block: &[u32], len: usize) -> Vec<u32> {
    block.iter().copied().cycle().take(len).collect()
}

/// Attention over a pruned cache equals attention restricted to the kept positions.
pub fn pruning_equivalence_case(seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = 8;
    let cfg = RopeConfig::new(d).unwrap();
    let n = rng.random_range(80..400);
    let shape = CacheShape { layers: 1, heads: 1, head_dim: d };
    let mut cache = CacheState::new(shape, CachePolicy::Full).unwrap();
    let mut keys = Vec::new();
    for p in 0..n {
        let k = gaussian_vec(&mut rng, d);
        let v = gaussian_vec(&mut rng, d);
        cache.append(p, vec![vec![k.clone()]], vec![vec![v]]).unwrap();
        keys.push(k);
    }
    let t = n - 1;
    let pcfg = PrunerConfig { n_anchor: 4, recent_window: 40, budget: 60, ..Default::default() };
    let bad = if rng.random_bool(0.5) {
        let s = rng.random_range(0..=t);
        Some(BadSpan { start: s, end: rng.random_range(s..=t) })
    } else {
        None
    };
    let keep = build_keep_set(t, bad, rng.random_range(0..4), &pcfg).unwrap();
    apply_prune(&mut cache, &keep).unwrap();
    let q = gaussian_vec(&mut rng, d);

    let entries: Vec<_> = cache.entries(0).collect();
    let ks: Vec<Positioned<'_>> = entries.iter().map(|e| Positioned { position: e.position, vec: &e.keys[0] }).collect();
    let vs: Vec<&[f64]> = entries.iter().map(|e| e.values[0].as_slice()).collect();
    let pruned = attention_step(&q, t, &ks, &vs, &cfg).unwrap();

    // Direct: full-history scores, masked to the keep set, renormalized.
    let scale = 1.0 / (d as f64).sqrt();
    let all: Vec<Positioned<'_>> = (0..n).map(|i| Positioned { position: i, vec: &keys[i] }).collect();
    let scores = attention_scores_rotated(&q, t, &all, &cfg).unwrap();
    let kept: Vec<f64> = keep.union.iter().map(|&i| scores[i] * scale).collect();
    let w = softmax(&kept);
    let mut out = vec![0.0; d];
    for (a, v) in w.iter().zip(&vs) {
        for (o, x) in out.iter_mut().zip(v.iter()) {
            *o += a * x;
        }
    }
    for ((p, a), (q, b)) in pruned.weights.iter().zip(keep.union.iter().zip(&w)) {
        assert_eq!(p, q);
        assert!((a - b).abs() <= 1e-10, "seed {seed}");
    }
    for (a, b) in pruned.output.iter().zip(&out) {
        assert!((a - b).abs() <= 1e-10, "seed {seed}");
    }
}
