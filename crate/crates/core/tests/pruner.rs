mod common;

use common::ref_keep_set;
use loopguard::cache::{CachePolicy, CacheShape, CacheState};
use loopguard::pruner::*;
use loopguard::Error;
use proptest::prelude::*;

fn span(start: usize, end: usize) -> Option<BadSpan> {
    Some(BadSpan { start, end })
}

#[test]
fn recent_budget_halves_per_level() {
    let cfg = PrunerConfig::default();
    let got: Vec<usize> = (0..6).map(|l| recent_budget(l, &cfg)).collect();
    assert_eq!(got, vec![512, 256, 128, 64, 64, 64]);
    let deep = PrunerConfig { level_cap: 10, ..Default::default() };
    assert_eq!(recent_budget(6, &deep), 32);
    assert_eq!(recent_budget(64, &deep), 32);
}

#[test]
fn clean_recent_examples() {
    let cfg = PrunerConfig::default();
    assert_eq!(clean_recent(2000, None, &cfg, 0), (1489..=2000).collect::<Vec<_>>());
    assert_eq!(clean_recent(2000, None, &cfg, 2), (1873..=2000).collect::<Vec<_>>());
    // Bad indices are skipped and the budget is filled from older clean ones.
    assert_eq!(clean_recent(2000, span(1900, 2000), &cfg, 1), (1644..=1899).collect::<Vec<_>>());
    // The window never reaches into the anchors.
    assert_eq!(clean_recent(100, None, &cfg, 0), (32..=100).collect::<Vec<_>>());
}

#[test]
fn sparse_examples() {
    let cfg = PrunerConfig::default();
    // Candidates are [32, 1031).
    let s = select_sparse(1542, None, 100, &cfg);
    assert_eq!(s.len(), 100);
    assert_eq!(s[..3], [32, 42, 52]);
    assert_eq!(*s.last().unwrap(), 1022);
    let s = select_sparse(1542, span(40, 60), 100, &cfg);
    assert_eq!(s[..3], [32, 62, 72]);
    assert!(select_sparse(1542, None, 0, &cfg).is_empty());
    assert!(select_sparse(300, None, 50, &cfg).is_empty());
}

#[test]
fn keep_set_at_default_budget() {
    let cfg = PrunerConfig::default();
    let k = build_keep_set(4000, None, 0, &cfg).unwrap();
    assert_eq!(k.anchor, (0..32).collect::<Vec<_>>());
    assert_eq!(k.recent, (3489..=4000).collect::<Vec<_>>());
    // 480 sparse slots over 3457 candidates: stride 8.
    assert_eq!(k.sparse.len(), 433);
    assert_eq!(k.sparse[1] - k.sparse[0], 8);
    assert_eq!(k.len(), 977);
    assert!(k.len() <= cfg.budget);
    assert!(k.union.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn keep_set_with_whole_window_bad() {
    let cfg = PrunerConfig::default();
    let k = build_keep_set(4000, span(3489, 4000), 3, &cfg).unwrap();
    assert!(k.recent.is_empty());
    assert_eq!(k.sparse.len(), 865);
    assert!(k.union.iter().all(|i| *i < 3489));
}

#[test]
fn keep_set_with_partial_bad_span() {
    let cfg = PrunerConfig::default();
    let k = build_keep_set(4000, span(3900, 4000), 1, &cfg).unwrap();
    assert_eq!(k.recent, (3644..=3899).collect::<Vec<_>>());
    assert!(k.union.iter().all(|i| !(3900..=4000).contains(i)));
}

#[test]
fn short_history_keeps_everything() {
    let cfg = PrunerConfig::default();
    let k = build_keep_set(500, None, 2, &cfg).unwrap();
    assert_eq!(k.union, (0..=500).collect::<Vec<_>>());
    assert!(k.sparse.is_empty());
    // A bad span forces a real prune even below budget.
    let k = build_keep_set(500, span(480, 500), 0, &cfg).unwrap();
    assert_eq!(k.union, (0..480).collect::<Vec<_>>());
}

#[test]
fn keep_set_errors() {
    let cfg = PrunerConfig::default();
    assert!(matches!(build_keep_set(31, None, 0, &cfg), Err(Error::TooEarlyToPrune { t: 31, n_anchor: 32 })));
    assert!(matches!(build_keep_set(2000, span(10, 5), 0, &cfg), Err(Error::InvalidBadSpan { .. })));
    assert!(matches!(build_keep_set(2000, span(10, 2001), 0, &cfg), Err(Error::InvalidBadSpan { .. })));
    assert!(PrunerConfig { budget: 63, ..Default::default() }.validate().is_err());
}

#[test]
fn recent_part_is_truncated_to_budget() {
    let cfg = PrunerConfig { budget: 96, ..Default::default() };
    let k = build_keep_set(4000, None, 0, &cfg).unwrap();
    assert_eq!(k.recent, (3937..=4000).collect::<Vec<_>>());
    assert!(k.sparse.is_empty());
    assert_eq!(k.len(), 96);
}

#[test]
fn escalation_and_decay() {
    let cfg = PrunerConfig::default();
    let mut a = Aggressiveness::default();
    let mut levels = Vec::new();
    for s in [100, 300, 500, 700, 900] {
        a.escalate_or_decay(s, true, &cfg);
        levels.push(a.level);
    }
    assert_eq!(levels, vec![0, 1, 2, 3, 3]);
    a.escalate_or_decay(1411, false, &cfg);
    assert_eq!(a.level, 3);
    a.escalate_or_decay(1412, false, &cfg);
    assert_eq!(a.level, 2);
    a.escalate_or_decay(1923, false, &cfg);
    assert_eq!(a.level, 2);
    a.escalate_or_decay(1924, false, &cfg);
    assert_eq!(a.level, 1);

    let mut a = Aggressiveness::default();
    a.escalate_or_decay(100, true, &cfg);
    a.escalate_or_decay(356, true, &cfg);
    assert_eq!(a.level, 0);

    let frozen = PrunerConfig { decay_enabled: false, ..Default::default() };
    let mut a = Aggressiveness::default();
    a.escalate_or_decay(0, true, &frozen);
    a.escalate_or_decay(10, true, &frozen);
    a.escalate_or_decay(5000, false, &frozen);
    assert_eq!(a.level, 1);
}

#[test]
fn apply_prune_on_large_cache() {
    let shape = CacheShape { layers: 2, heads: 1, head_dim: 2 };
    let mut cache = CacheState::new(shape, CachePolicy::Full).unwrap();
    for p in 0..4000 {
        cache.append_blank(p).unwrap();
    }
    let cfg = PrunerConfig { budget: 544, ..Default::default() };
    let k = build_keep_set(3999, None, 0, &cfg).unwrap();
    assert_eq!(k.len(), 544);
    assert_eq!(apply_prune(&mut cache, &k).unwrap(), 544);
    assert_eq!(cache.accessible(), k.union);
    assert_eq!(cache.gather_ops(), 2 * 544);
    assert_eq!(cache.prune_epoch(), 1);
}

#[test]
fn apply_prune_skips_missing_positions() {
    let shape = CacheShape { layers: 1, heads: 1, head_dim: 2 };
    let mut cache = CacheState::new(shape, CachePolicy::Full).unwrap();
    for p in 0..2000 {
        cache.append_blank(p).unwrap();
    }
    let cfg = PrunerConfig::default();
    let first = build_keep_set(1999, None, 0, &cfg).unwrap();
    apply_prune(&mut cache, &first).unwrap();
    let second = build_keep_set(1999, span(1900, 1999), 2, &cfg).unwrap();
    let kept = apply_prune(&mut cache, &second).unwrap();
    assert_eq!(kept, cache.len());
    assert!(cache.accessible().iter().all(|p| first.union.binary_search(p).is_ok()));
}

fn assert_matches_reference(t: usize, bad: Option<BadSpan>, level: usize, cfg: &PrunerConfig) {
    let got = build_keep_set(t, bad, level, cfg).unwrap();
    let want = ref_keep_set(t, bad, level, cfg).unwrap();
    let ctx = format!("t={t} bad={bad:?} level={level} cfg={cfg:?}");
    assert_eq!(got.anchor, want.anchor.iter().copied().collect::<Vec<_>>(), "{ctx}");
    assert_eq!(got.recent, want.recent.iter().copied().collect::<Vec<_>>(), "{ctx}");
    assert_eq!(got.sparse, want.sparse.iter().copied().collect::<Vec<_>>(), "{ctx}");
    assert_eq!(got.union, want.union(), "{ctx}");
}

#[test]
fn small_configs_match_reference_exhaustively() {
    let cfg = PrunerConfig { n_anchor: 3, recent_window: 70, budget: 80, ..Default::default() };
    for t in 3..220 {
        for level in 0..5 {
            assert_matches_reference(t, None, level, &cfg);
            for start in (0..=t).step_by(7) {
                for end in [start, (start + 5).min(t), t] {
                    assert_matches_reference(t, span(start, end), level, &cfg);
                }
            }
        }
    }
}

proptest! {
    #[test]
    fn keep_set_matches_reference(
        n_anchor in 0usize..40,
        extra in 32usize..300,
        recent_window in 1usize..400,
        t_off in 0usize..1500,
        level in 0usize..6,
        bad in prop::option::of((0.0f64..1.0, 0.0f64..1.0)),
    ) {
        let cfg = PrunerConfig { n_anchor, recent_window, budget: n_anchor + extra, ..Default::default() };
        let t = n_anchor + t_off;
        let bad = bad.map(|(a, b)| {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            BadSpan { start: (lo * t as f64) as usize, end: (hi * t as f64) as usize }
        });
        let k = build_keep_set(t, bad, level, &cfg).unwrap();
        prop_assert!(k.len() <= cfg.budget.max(t + 1));
        if t >= cfg.budget || bad.is_some() {
            prop_assert!(k.len() <= cfg.budget);
        }
        prop_assert_eq!(&k.anchor, &(0..n_anchor).collect::<Vec<_>>());
        prop_assert!(k.union.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(k.union.iter().all(|i| *i <= t));
        if let Some(b) = bad {
            prop_assert!(k.recent.iter().chain(&k.sparse).all(|i| !b.contains(*i)));
        }
        assert_matches_reference(t, bad, level, &cfg);
    }
}
