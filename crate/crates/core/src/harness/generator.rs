//! Synthetic token processes.

use std::collections::{HashMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};

use super::{ProcessKind, ScenarioConfig};
use crate::cache::CacheState;

/// Zipf-distributed tokens that never repeat within a short horizon.
#[derive(Debug, Clone)]
pub struct DiverseSource {
    zipf: Zipf<f64>,
    exclusion: usize,
    recent: VecDeque<u32>,
    counts: HashMap<u32, usize>,
}

impl DiverseSource {
    pub fn new(cfg: &ScenarioConfig) -> Self {
        Self {
            // Validated by ScenarioConfig::validate.
            zipf: Zipf::new(cfg.vocab as f64, cfg.zipf_exponent).expect("valid zipf parameters"),
            exclusion: cfg.no_repeat_window,
            recent: VecDeque::with_capacity(cfg.no_repeat_window + 1),
            counts: HashMap::new(),
        }
    }

    pub fn sample<R: Rng>(&mut self, rng: &mut R) -> u32 {
        let token = loop {
            let t = self.zipf.sample(rng) as u32 - 1;
            if !self.counts.contains_key(&t) {
                break t;
            }
        };
        self.observe(token);
        token
    }

    /// Records a token emitted by someone else so it is excluded too.
    pub fn observe(&mut self, token: u32) {
        if self.exclusion == 0 {
            return;
        }
        self.recent.push_back(token);
        *self.counts.entry(token).or_insert(0) += 1;
        if self.recent.len() > self.exclusion {
            let old = self.recent.pop_front().expect("non-empty");
            if let Some(c) = self.counts.get_mut(&old) {
                *c -= 1;
                if *c == 0 {
                    self.counts.remove(&old);
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Emission {
    Token { token: u32, p_max: f64 },
    Stop,
}

#[derive(Debug, Clone)]
enum Phase {
    /// Diverse output until `until`, then either stop or collapse.
    Diverse { until: usize },
    Looping { start: usize, block: Vec<u32>, seen_epoch: u64 },
    Exiting { stop_at: usize },
}

/// One stream of either process kind.
#[derive(Debug, Clone)]
pub struct StreamGenerator {
    kind: ProcessKind,
    rng: ChaCha8Rng,
    source: DiverseSource,
    phase: Phase,
    history: Vec<u32>,
    prompt_len: usize,
    period: usize,
    lock_in: usize,
    exit_tail: (usize, usize),
    p_loop: f64,
    p_healthy: (f64, f64),
    /// Step the loop was left, if it was.
    pub exit_step: Option<usize>,
    pub collapse_step: Option<usize>,
}

impl StreamGenerator {
    pub fn new(cfg: &ScenarioConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (until, collapse_step, period) = match cfg.process {
            ProcessKind::Healthy => (cfg.natural_stop.sample(&mut rng), None, 0),
            ProcessKind::CacheCoupledLoop => {
                let tc = cfg.collapse_step.sample(&mut rng);
                (tc, Some(tc), cfg.period.sample(&mut rng))
            }
        };
        Self {
            kind: cfg.process,
            source: DiverseSource::new(cfg),
            phase: Phase::Diverse { until },
            history: Vec::new(),
            prompt_len: cfg.prompt_len,
            period,
            lock_in: cfg.lock_in_blocks * period,
            exit_tail: (cfg.exit_tail.min, cfg.exit_tail.max),
            p_loop: cfg.loop_p_max,
            p_healthy: (cfg.healthy_p_max_min, cfg.healthy_p_max_max),
            exit_step: None,
            collapse_step,
            rng,
        }
    }

    pub fn period(&self) -> Option<usize> {
        (self.period > 0).then_some(self.period)
    }

    /// Prompt tokens from the same diverse source.
    pub fn prompt(&mut self, len: usize) -> Vec<u32> {
        let mut src = self.source.clone();
        (0..len).map(|_| src.sample(&mut self.rng)).collect()
    }

    fn diverse(&mut self) -> Emission {
        let token = self.source.sample(&mut self.rng);
        let p_max = self.rng.random_range(self.p_healthy.0..=self.p_healthy.1);
        Emission::Token { token, p_max }
    }

    /// A run of `period` consecutive repeat positions survives in the cache.
    fn block_survives(&self, start: usize, cache: &CacheState) -> bool {
        let first = self.prompt_len + start;
        let mut run = 0;
        let mut prev: Option<usize> = None;
        for p in cache.positions_from(first).rev() {
            run = if prev == Some(p + 1) { run + 1 } else { 1 };
            if run >= self.period {
                return true;
            }
            prev = Some(p);
        }
        false
    }

    fn leave_loop(&mut self, step: usize) -> Emission {
        let tail = self.rng.random_range(self.exit_tail.0..=self.exit_tail.1);
        self.phase = Phase::Exiting { stop_at: step + tail };
        self.exit_step = Some(step);
        self.diverse()
    }

    /// Next emission at decode `step`, given the cache as it stands before the token.
    pub fn next(&mut self, step: usize, cache: &CacheState) -> Emission {
        let out = match &mut self.phase {
            Phase::Diverse { until } if step < *until => self.diverse(),
            Phase::Diverse { .. } => match self.kind {
                ProcessKind::Healthy => Emission::Stop,
                ProcessKind::CacheCoupledLoop => {
                    let block = self.history[step - self.period..step].to_vec();
                    self.phase = Phase::Looping {
                        start: step,
                        block,
                        seen_epoch: cache.prune_epoch(),
                    };
                    return self.next(step, cache);
                }
            },
            Phase::Looping { start, block, seen_epoch } => {
                let (start, age) = (*start, step - *start);
                let pruned = cache.prune_epoch() != *seen_epoch;
                *seen_epoch = cache.prune_epoch();
                let token = block[age % block.len()];
                let fragile = pruned && age < self.lock_in;
                if fragile || (age >= self.lock_in && !self.block_survives(start, cache)) {
                    self.leave_loop(step)
                } else {
                    self.source.observe(token);
                    Emission::Token { token, p_max: self.p_loop }
                }
            }
            Phase::Exiting { stop_at } if step < *stop_at => self.diverse(),
            Phase::Exiting { .. } => Emission::Stop,
        };
        if let Emission::Token { token, .. } = out {
            self.history.push(token);
        }
        out
    }
}
