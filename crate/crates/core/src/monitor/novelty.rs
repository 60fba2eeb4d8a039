//! N-gram novelty over the recent window.

use std::collections::{HashMap, HashSet, VecDeque};

/// Fraction of n-grams inside `history[window_start..]` that never occur
/// entirely inside `history[..window_start]`.
///
/// A window with fewer than `n` tokens has nothing to compare and reports 1.0.
pub fn novelty(history: &[u32], window_start: usize, n: usize) -> f64 {
    assert!(n > 0, "n-gram order must be positive");
    let window = &history[window_start.min(history.len())..];
    if window.len() < n {
        return 1.0;
    }
    let seen: HashSet<&[u32]> = history[..window_start].windows(n).collect();
    let total = window.len() + 1 - n;
    let fresh = window.windows(n).filter(|g| !seen.contains(g)).count();
    fresh as f64 / total as f64
}

/// Incremental novelty for a sliding window of fixed width.
#[derive(Debug, Clone)]
pub struct NoveltyTracker {
    n: usize,
    width: usize,
    history: Vec<u32>,
    /// Index where each distinct n-gram first ended.
    first_end: HashMap<Box<[u32]>, usize>,
    /// First-end indices for the n-grams ending inside the window, oldest first.
    in_window: VecDeque<usize>,
}

impl NoveltyTracker {
    pub fn new(n: usize, width: usize) -> Self {
        assert!(n > 0 && width > 0);
        Self {
            n,
            width,
            history: Vec::new(),
            first_end: HashMap::new(),
            in_window: VecDeque::new(),
        }
    }

    pub fn push(&mut self, token: u32) -> f64 {
        self.history.push(token);
        let end = self.history.len() - 1;
        if self.history.len() >= self.n {
            let gram = &self.history[end + 1 - self.n..];
            let first = match self.first_end.get(gram) {
                Some(&f) => f,
                None => {
                    self.first_end.insert(gram.into(), end);
                    end
                }
            };
            self.in_window.push_back(first);
        }
        let window_start = self.history.len().saturating_sub(self.width);
        // n-grams must lie fully inside the window.
        let max_grams = (self.history.len() - window_start + 1).saturating_sub(self.n);
        while self.in_window.len() > max_grams {
            self.in_window.pop_front();
        }
        if self.in_window.is_empty() {
            return 1.0;
        }
        // Seen before the window iff some occurrence ended before window_start.
        let fresh = self.in_window.iter().filter(|&&f| f >= window_start).count();
        fresh as f64 / self.in_window.len() as f64
    }
}
