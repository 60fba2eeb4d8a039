mod common;

use common::{brute_novelty, brute_tail, cycle, distinct, RefMonitor};
use loopguard::metrics::{compression_ratio, DecodeStep};
use loopguard::monitor::*;
use loopguard::Error;
use proptest::prelude::*;

fn feed(m: &mut Monitor, tokens: &[u32], p: f64) -> Vec<Decision> {
    let start = m.steps_seen();
    tokens
        .iter()
        .enumerate()
        .map(|(i, &token)| m.update(&DecodeStep { step: start + i, token, p_max: p }).unwrap())
        .collect()
}

fn small_tail(min_span: usize) -> TailScanConfig {
    TailScanConfig { min_span, ..Default::default() }
}

#[test]
fn warn_vote_examples() {
    let k2 = MonitorConfig::default();
    assert!(warn_vote(0.15, 0.10, 2, &k2));
    assert!(!warn_vote(0.5, 0.5, 7, &k2));
    let k3 = MonitorConfig { k_vote: 3, ..Default::default() };
    assert!(warn_vote(0.15, 0.10, 7, &k3));
}

#[test]
fn warn_vote_matches_brute_force_count() {
    for k in 1..=3 {
        let cfg = MonitorConfig { k_vote: k, ..Default::default() };
        for mask in 0..8u8 {
            let (lt, lc, ls) = (mask & 1 != 0, mask & 2 != 0, mask & 4 != 0);
            let ttr = if lt { 0.1 } else { 0.3 };
            let cr = if lc { 0.05 } else { 0.5 };
            let streak = if ls { 6 } else { 5 };
            let votes = [lt, lc, ls].iter().filter(|v| **v).count();
            assert_eq!(warn_vote(ttr, cr, streak, &cfg), votes >= k, "k={k} mask={mask}");
        }
    }
}

#[test]
fn windowed_ttr_examples() {
    let mut m = Monitor::new(MonitorConfig::default()).unwrap();
    let d = feed(&mut m, &[9; 256], 0.5);
    assert_eq!(d[255].m_ttr, 1.0 / 256.0);

    let mut m = Monitor::new(MonitorConfig::default()).unwrap();
    let d = feed(&mut m, &distinct(0, 256), 0.5);
    assert_eq!(d[255].m_ttr, 1.0);

    let mut m = Monitor::new(MonitorConfig::default()).unwrap();
    let d = feed(&mut m, &cycle(&[1, 2, 3], 256), 0.5);
    assert_eq!(d[255].m_ttr, 3.0 / 256.0);

    // Older tokens leave the window.
    let mut m = Monitor::new(MonitorConfig::default()).unwrap();
    let mut s = distinct(1000, 256);
    s.extend(std::iter::repeat_n(5, 256));
    let d = feed(&mut m, &s, 0.5);
    assert_eq!(d[511].m_ttr, 1.0 / 256.0);
}

#[test]
fn windowed_cr_cadence() {
    let mut m = Monitor::new(MonitorConfig::default()).unwrap();
    let tokens = distinct(500, 100);
    let d = feed(&mut m, &tokens, 0.5);
    assert!(d[..63].iter().all(|x| x.m_cr.is_none()));
    // First eligible step computes immediately.
    assert_eq!(d[63].m_cr, Some(compression_ratio(&tokens[..64]).unwrap()));
    assert_eq!(d[64].m_cr, d[63].m_cr);
    assert_ne!(compression_ratio(&tokens[..65]).unwrap(), d[63].m_cr.unwrap());
    assert_eq!(d[78].m_cr, d[63].m_cr);
    assert_eq!(d[79].m_cr, Some(compression_ratio(&tokens[..80]).unwrap()));
}

#[test]
fn windowed_cr_low_on_repetition() {
    let mut m = Monitor::new(MonitorConfig::default()).unwrap();
    let d = feed(&mut m, &cycle(&[4, 8, 15, 16, 23], 256), 0.5);
    assert!(d[255].m_cr.unwrap() < 0.12);
}

#[test]
fn novelty_examples() {
    let fresh = distinct(0, 50);
    assert_eq!(novelty(&fresh, 0, 4), 1.0);

    let mut replay = distinct(0, 50);
    replay.extend(10..40);
    assert_eq!(novelty(&replay, 50, 4), 0.0);

    // 23 replayed tokens then 20 new ones: 20 of 40 n-grams are new.
    let mut half = distinct(0, 50);
    half.extend(5..28);
    half.extend(distinct(900, 20));
    assert_eq!(brute_novelty(&half, 50, 4), 0.5);
    assert_eq!(novelty(&half, 50, 4), 0.5);

    assert_eq!(novelty(&[1, 2, 3], 1, 4), 1.0);
}

#[test]
fn stall_gate_examples() {
    let cfg = MonitorConfig::default();
    let mut g = StallGate::default();
    let got: Vec<bool> = [0.01, 0.01, 0.01, 0.01].iter().map(|v| g.observe(*v, &cfg)).collect();
    assert_eq!(got, vec![false, false, false, true]);

    let mut g = StallGate::default();
    assert!([0.01, 0.01, 0.5, 0.01].iter().all(|v| !g.observe(*v, &cfg)));

    let mut g = StallGate::default();
    assert!([0.019; 4].iter().map(|v| g.observe(*v, &cfg)).last().unwrap());
}

#[test]
fn tail_scan_examples() {
    let cfg = small_tail(2);
    let mut s = distinct(100, 5);
    s.extend(cycle(&[1, 2, 3], 9));
    let m = tail_repetition_scan(&s, &cfg).unwrap();
    assert_eq!(m.period, 3);
    assert_eq!((m.bad_start, m.end), (s.len() - 6, s.len() - 1));
    assert_eq!(m.region_start, s.len() - 9);

    assert_eq!(tail_repetition_scan(&distinct(0, 20), &cfg), None);

    let m = tail_repetition_scan(&[7, 7, 7, 7, 7], &cfg).unwrap();
    assert_eq!(m.period, 1);

    // With the default minimum span the 9-token tail is too short.
    assert_eq!(tail_repetition_scan(&s, &TailScanConfig::default()), None);
}

#[test]
fn debounce_requires_identical_periods() {
    let mut d = Debounce::default();
    assert!(!d.observe(Some(3), 3));
    assert!(!d.observe(Some(3), 3));
    assert!(d.observe(Some(3), 3));
    assert!(!d.observe(Some(4), 3));
    assert!(!d.observe(None, 3));
    assert!(!d.observe(Some(4), 3));
}

#[test]
fn warmup_blocks_early_triggers() {
    for preset in [MonitorPreset::Full, MonitorPreset::SingleSignal] {
        let mut m = Monitor::new(MonitorConfig::with_preset(preset)).unwrap();
        let d = feed(&mut m, &[1; 64], 1.0);
        assert!(d.iter().all(|x| !x.trigger));
        assert!(d[63].warn);
    }
}

#[test]
fn cooldown_blocks_triggers() {
    let mut m = Monitor::new(MonitorConfig::default()).unwrap();
    let d = feed(&mut m, &[1; 200], 1.0);
    let first = d.iter().position(|x| x.trigger).unwrap();
    assert!(first >= 64);
    let mut m = Monitor::new(MonitorConfig::default()).unwrap();
    feed(&mut m, &[1; 200][..=first], 1.0);
    m.notify_intervention().unwrap();
    let after = feed(&mut m, &[1; 40], 1.0);
    assert!(after[..32].iter().all(|x| !x.trigger));
    assert_eq!(after[27].cooldown, 5);
    assert!(after[27].warn && after[27].tail.is_some());
    assert!(after[32].trigger);
}

#[test]
fn notify_contract() {
    let mut m = Monitor::new(MonitorConfig::default()).unwrap();
    assert!(matches!(m.notify_intervention(), Err(Error::DoubleNotify)));
    let d = feed(&mut m, &[1; 200], 1.0);
    let first = d.iter().position(|x| x.trigger).unwrap();
    let mut m = Monitor::new(MonitorConfig::default()).unwrap();
    feed(&mut m, &[1; 200][..=first], 1.0);
    m.notify_intervention().unwrap();
    assert_eq!(m.interventions(), 1);
    assert_eq!(m.streak(), 0);
    assert_eq!(m.cooldown_remaining(), 32);
    assert!(matches!(m.notify_intervention(), Err(Error::DoubleNotify)));
    assert_eq!(m.interventions(), 1);

    // Once the window has slid past the first occurrence the stall gate is live.
    let mut fired_with_stall = false;
    for _ in 0..600 {
        let step = m.steps_seen();
        let d = m.update(&DecodeStep { step, token: 1, p_max: 1.0 }).unwrap();
        if d.trigger {
            if m.stall_count() > 0 {
                fired_with_stall = true;
                m.notify_intervention().unwrap();
                assert_eq!(m.stall_count(), 0);
            } else {
                m.notify_intervention().unwrap();
            }
        }
    }
    assert!(fired_with_stall);
}

#[test]
fn out_of_order_steps_are_rejected() {
    let mut m = Monitor::new(MonitorConfig::default()).unwrap();
    m.update(&DecodeStep { step: 0, token: 1, p_max: 0.5 }).unwrap();
    let e = m.update(&DecodeStep { step: 2, token: 1, p_max: 0.5 }).unwrap_err();
    assert!(matches!(e, Error::OutOfOrderStep { expected: 1, got: 2 }));
}

#[test]
fn period_three_stream_triggers_where_reference_does() {
    let mut tokens = distinct(1000, 100);
    tokens.extend(cycle(&[1, 2, 3], 400));
    let p: Vec<f64> = (0..500).map(|i| if i < 100 { 0.5 } else { 0.97 }).collect();

    let mut m = Monitor::new(MonitorConfig::default()).unwrap();
    let mut r = RefMonitor::new(MonitorConfig::default());
    let mut first = None;
    for (i, (&t, &pm)) in tokens.iter().zip(&p).enumerate() {
        let d = m.update(&DecodeStep { step: i, token: t, p_max: pm }).unwrap();
        let e = r.step(t, pm);
        assert_eq!(d.trigger, e.trigger, "step {i}");
        if d.trigger && first.is_none() {
            first = Some((i, d));
        }
    }
    let (step, d) = first.expect("loop must trigger");
    assert!(step >= 100);
    assert!(d.warn && d.streak >= 6 && d.m_cr.unwrap() < 0.12);
    assert_eq!(d.tail.unwrap().period, 3);
}

#[test]
fn presets_follow_their_rules() {
    let mut m = Monitor::new(MonitorConfig::with_preset(MonitorPreset::AlwaysOn)).unwrap();
    let fired: Vec<usize> = feed(&mut m, &distinct(0, 2500), 0.3)
        .iter()
        .filter(|d| d.trigger)
        .map(|d| d.step)
        .collect();
    assert_eq!(fired, (0..2500).step_by(200).collect::<Vec<_>>());

    let mut m = Monitor::new(MonitorConfig::with_preset(MonitorPreset::NoGuard)).unwrap();
    assert!(feed(&mut m, &[3; 500], 1.0).iter().all(|d| !d.trigger));

    // Streak alone suffices for the single-signal preset.
    let mut m = Monitor::new(MonitorConfig::with_preset(MonitorPreset::SingleSignal)).unwrap();
    let d = feed(&mut m, &distinct(0, 200), 0.95);
    assert_eq!(d.iter().position(|x| x.trigger), Some(64));
    let mut m = Monitor::new(MonitorConfig::default()).unwrap();
    assert!(feed(&mut m, &distinct(0, 200), 0.95).iter().all(|x| !x.trigger));
}

#[test]
fn full_trigger_implies_gates() {
    let mut tokens = distinct(7000, 300);
    tokens.extend(cycle(&distinct(1, 7), 1500));
    let mut m = Monitor::new(MonitorConfig::default()).unwrap();
    for (i, &t) in tokens.iter().enumerate() {
        let d = m.update(&DecodeStep { step: i, token: t, p_max: if i < 300 { 0.4 } else { 0.97 } }).unwrap();
        if d.trigger {
            assert!(d.warn && (d.stall || d.tail.is_some()) && d.step >= 64 && d.cooldown == 0);
            m.notify_intervention().unwrap();
        }
    }
    assert!(m.interventions() > 1);
}

#[test]
fn trace_row_round_trips() {
    let mut m = Monitor::new(MonitorConfig::default()).unwrap();
    let d = feed(&mut m, &[1; 100], 1.0);
    let row = TraceRow::from(&d[99]);
    let s = serde_json::to_string(&row).unwrap();
    assert_eq!(serde_json::from_str::<TraceRow>(&s).unwrap(), row);
    assert!(s.contains("\"tail_period\":1"));
}

#[test]
fn config_validation() {
    assert!(Monitor::new(MonitorConfig { k_vote: 4, ..Default::default() }).is_err());
    assert!(Monitor::new(MonitorConfig { cr_interval: 0, ..Default::default() }).is_err());
    let toml_cfg: MonitorConfig = toml::from_str("preset = \"single_signal\"\nwindow = 128\n").unwrap();
    assert_eq!(toml_cfg.preset, MonitorPreset::SingleSignal);
    assert_eq!(toml_cfg.window, 128);
    assert_eq!(toml_cfg.t_min, 64);
}

/// Streams built from diverse runs and periodic segments.
fn mixed_stream() -> impl Strategy<Value = (Vec<u32>, Vec<f64>)> {
    prop::collection::vec((0usize..3, 1usize..12, 10usize..120, any::<bool>()), 1..6).prop_map(|segs| {
        let mut tokens = Vec::new();
        let mut p = Vec::new();
        let mut base = 10_000u32;
        for (kind, period, len, confident) in segs {
            let seg = match kind {
                0 => {
                    base += len as u32;
                    distinct(base, len)
                }
                1 => cycle(&distinct(base + 5000, period), len),
                _ => {
                    let start = tokens.len().saturating_sub(len);
                    let replay: Vec<u32> = tokens[start..].to_vec();
                    if replay.is_empty() { vec![1; len] } else { replay }
                }
            };
            p.extend(std::iter::repeat_n(if confident { 0.95 } else { 0.5 }, seg.len()));
            tokens.extend(seg);
        }
        (tokens, p)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn monitor_matches_reference((tokens, p) in mixed_stream(), preset_idx in 0usize..4) {
        let preset = [MonitorPreset::NoGuard, MonitorPreset::AlwaysOn, MonitorPreset::SingleSignal, MonitorPreset::Full][preset_idx];
        let cfg = MonitorConfig { preset, ..Default::default() };
        let mut m = Monitor::new(cfg.clone()).unwrap();
        let mut r = RefMonitor::new(cfg);
        for (i, (&t, &pm)) in tokens.iter().zip(&p).enumerate() {
            let d = m.update(&DecodeStep { step: i, token: t, p_max: pm }).unwrap();
            let e = r.step(t, pm);
            prop_assert_eq!(d.m_ttr, e.m_ttr);
            prop_assert_eq!(d.m_cr, e.m_cr);
            prop_assert_eq!(d.streak, e.streak);
            prop_assert!((d.novelty - e.novelty).abs() < 1e-12, "step {} {} vs {}", i, d.novelty, e.novelty);
            prop_assert_eq!(d.warn, e.warn);
            prop_assert_eq!(d.stall, e.stall);
            prop_assert_eq!(d.tail.map(|x| (x.period, x.bad_start, x.end)), e.tail);
            prop_assert_eq!(d.trigger, e.trigger, "step {}", i);
            if d.trigger {
                m.notify_intervention().unwrap();
                r.notify();
            }
        }
        prop_assert_eq!(m.interventions(), r.interventions);
    }

    #[test]
    fn incremental_tail_matches_pure_scan(
        tokens in prop::collection::vec(0u32..4, 1..300),
        period_max in 1usize..20,
        min_span in 1usize..30,
        horizon in 2usize..80,
    ) {
        let cfg = TailScanConfig { period_max, min_repeats: 2, min_span, horizon };
        let mut tr = TailTracker::new(cfg.clone());
        for i in 0..tokens.len() {
            let inc = tr.push(tokens[i]);
            let pure = tail_repetition_scan(&tokens[..=i], &cfg);
            prop_assert_eq!(inc, pure);
            prop_assert_eq!(
                pure.map(|m| (m.period, m.bad_start, m.end)),
                brute_tail(&tokens[..=i], period_max, 2, min_span, horizon)
            );
        }
    }

    #[test]
    fn tail_scan_returns_minimal_period(p in 1usize..=64, reps in 3usize..8, prefix in 0usize..40) {
        let mut s = distinct(50_000, prefix);
        s.extend(cycle(&distinct(10, p), p * reps));
        let m = tail_repetition_scan(&s, &TailScanConfig::default());
        if p * reps >= 24 {
            prop_assert_eq!(m.map(|m| m.period), Some(p));
        } else {
            prop_assert!(m.is_none_or(|m| m.period % p != 0 || m.period == p));
        }
    }

    #[test]
    fn incremental_novelty_matches_pure(tokens in prop::collection::vec(0u32..6, 1..400), width in 1usize..64, n in 1usize..5) {
        let mut tr = NoveltyTracker::new(n, width);
        for i in 0..tokens.len() {
            let got = tr.push(tokens[i]);
            let ws = (i + 1).saturating_sub(width);
            let want = novelty(&tokens[..=i], ws, n);
            prop_assert!((got - want).abs() < 1e-12, "i={} {} vs {}", i, got, want);
            prop_assert!((want - brute_novelty(&tokens[..=i], ws, n)).abs() < 1e-12);
        }
    }

    #[test]
    fn dormant_on_diverse_unconfident_streams(seed in any::<u64>(), len in 100usize..1500) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut m = Monitor::new(MonitorConfig::default()).unwrap();
        for i in 0..len {
            let d = m.update(&DecodeStep { step: i, token: rng.random_range(0..1_000_000), p_max: rng.random_range(0.0..0.9) }).unwrap();
            prop_assert!(d.m_ttr > 0.2);
            prop_assert!(!d.trigger);
        }
    }

    #[test]
    fn gated_presets_respect_warmup_and_cooldown(period in 1usize..10, noise in 0usize..64, single in any::<bool>()) {
        let preset = if single { MonitorPreset::SingleSignal } else { MonitorPreset::Full };
        let mut m = Monitor::new(MonitorConfig::with_preset(preset)).unwrap();
        let mut tokens = distinct(90_000, noise);
        tokens.extend(cycle(&distinct(3, period), 1500));
        let mut last: Option<usize> = None;
        for (i, &t) in tokens.iter().enumerate() {
            let d = m.update(&DecodeStep { step: i, token: t, p_max: 1.0 }).unwrap();
            if d.trigger {
                prop_assert!(i >= 64);
                if let Some(l) = last {
                    prop_assert!(i - l >= 32);
                }
                last = Some(i);
                m.notify_intervention().unwrap();
            }
        }
        prop_assert!(last.is_some());
    }
}
