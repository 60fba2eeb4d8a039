//! RoPE attention over positioned keys, shift-invariance checks and barcode export.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RopeConfig {
    pub head_dim: usize,
    pub base: f64,
    /// One frequency per 2-block.
    pub freqs: Vec<f64>,
}

impl RopeConfig {
    pub fn new(head_dim: usize) -> Result<Self> {
        Self::with_base(head_dim, 10_000.0)
    }

    pub fn with_base(head_dim: usize, base: f64) -> Result<Self> {
        if head_dim == 0 || !head_dim.is_multiple_of(2) {
            return Err(Error::OddHeadDim(head_dim));
        }
        if base.is_nan() || base <= 1.0 {
            return Err(Error::InvalidConfig(format!("rope base {base} must exceed 1")));
        }
        let freqs = (0..head_dim / 2)
            .map(|j| base.powf(-2.0 * j as f64 / head_dim as f64))
            .collect();
        Ok(Self { head_dim, base, freqs })
    }

    fn check(&self, v: &[f64]) -> Result<()> {
        if !v.len().is_multiple_of(2) {
            return Err(Error::OddHeadDim(v.len()));
        }
        if v.len() != self.head_dim {
            return Err(Error::ShapeMismatch(format!("vector of length {} for head_dim {}", v.len(), self.head_dim)));
        }
        Ok(())
    }
}

fn rotate_by(v: &[f64], angle_scale: f64, cfg: &RopeConfig) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    for (j, w) in cfg.freqs.iter().enumerate() {
        let (s, c) = (w * angle_scale).sin_cos();
        let (x, y) = (v[2 * j], v[2 * j + 1]);
        out[2 * j] = c * x - s * y;
        out[2 * j + 1] = s * x + c * y;
    }
    out
}

/// Rotates each 2-block by `omega_j * position`.
pub fn rope_rotate(v: &[f64], position: i64, cfg: &RopeConfig) -> Result<Vec<f64>> {
    cfg.check(v)?;
    Ok(rotate_by(v, position as f64, cfg))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn relative_score(q: &[f64], k: &[f64], offset: f64, cfg: &RopeConfig) -> f64 {
    let mut s = 0.0;
    for (j, w) in cfg.freqs.iter().enumerate() {
        let (sn, c) = (w * offset).sin_cos();
        let (kx, ky) = (k[2 * j], k[2 * j + 1]);
        // q^T R(-w * offset) k for one block, matching R(w t)q . R(w i)k.
        s += q[2 * j] * (c * kx + sn * ky) + q[2 * j + 1] * (c * ky - sn * kx);
    }
    s
}

/// A key or value at a fixed absolute position.
#[derive(Debug, Clone, Copy)]
pub struct Positioned<'a> {
    pub position: usize,
    pub vec: &'a [f64],
}

/// Raw scores in the relative-offset form.
pub fn attention_scores(q: &[f64], t: usize, keys: &[Positioned<'_>], cfg: &RopeConfig) -> Result<Vec<f64>> {
    cfg.check(q)?;
    keys.iter()
        .map(|k| {
            cfg.check(k.vec)?;
            if k.position > t {
                return Err(Error::Causality { index: k.position, t });
            }
            Ok(relative_score(q, k.vec, (t - k.position) as f64, cfg))
        })
        .collect()
}

/// Same scores computed by rotating both sides and taking a plain dot product.
pub fn attention_scores_rotated(q: &[f64], t: usize, keys: &[Positioned<'_>], cfg: &RopeConfig) -> Result<Vec<f64>> {
    let qr = rope_rotate(q, t as i64, cfg)?;
    keys.iter()
        .map(|k| {
            if k.position > t {
                return Err(Error::Causality { index: k.position, t });
            }
            Ok(dot(&qr, &rope_rotate(k.vec, k.position as i64, cfg)?))
        })
        .collect()
}

pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / z).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    /// `(position, weight)` over the accessible set, in input order.
    pub weights: Vec<(usize, f64)>,
    pub output: Vec<f64>,
}

/// Scaled softmax attention over `keys`, which must be the accessible set.
/// `values[i]` belongs to `keys[i]`.
pub fn attention_step(q: &[f64], t: usize, keys: &[Positioned<'_>], values: &[&[f64]], cfg: &RopeConfig) -> Result<AttentionOutput> {
    if keys.is_empty() {
        return Err(Error::EmptyAccessibleSet);
    }
    if values.len() != keys.len() {
        return Err(Error::ShapeMismatch(format!("{} values for {} keys", values.len(), keys.len())));
    }
    let dv = values[0].len();
    if values.iter().any(|v| v.len() != dv) {
        return Err(Error::ShapeMismatch("values differ in length".into()));
    }
    let scale = 1.0 / (cfg.head_dim as f64).sqrt();
    let scores: Vec<f64> = attention_scores(q, t, keys, cfg)?.into_iter().map(|s| s * scale).collect();
    let alpha = softmax(&scores);
    let mut output = vec![0.0; dv];
    for (a, v) in alpha.iter().zip(values) {
        for (o, x) in output.iter_mut().zip(v.iter()) {
            *o += a * x;
        }
    }
    Ok(AttentionOutput {
        weights: keys.iter().map(|k| k.position).zip(alpha).collect(),
        output,
    })
}

fn block_norm(v: &[f64], j: usize) -> f64 {
    v[2 * j].hypot(v[2 * j + 1])
}

/// Upper bound on the score change along a period-P shift with perturbed endpoints.
pub fn lemma_bound(q_prev: &[f64], k_prev: &[f64], delta_q: f64, delta_k: f64, cfg: &RopeConfig) -> Result<f64> {
    cfg.check(q_prev)?;
    cfg.check(k_prev)?;
    Ok((0..cfg.head_dim / 2)
        .map(|j| block_norm(k_prev, j) * delta_q + block_norm(q_prev, j) * delta_k + delta_q * delta_k)
        .sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodicTailSpec {
    pub head_dim: usize,
    pub period: usize,
    pub delta_q: f64,
    pub delta_k: f64,
    /// Positions are drawn from `[period, max_position]`.
    pub max_position: usize,
}

impl PeriodicTailSpec {
    pub fn validate(&self) -> Result<()> {
        if self.period == 0 {
            return Err(Error::InvalidConfig("period must be at least 1".into()));
        }
        if !(self.delta_q >= 0.0 && self.delta_k >= 0.0) {
            return Err(Error::InvalidConfig("perturbation magnitudes must be non-negative".into()));
        }
        if self.max_position < self.period {
            return Err(Error::InvalidConfig("max_position must be at least the period".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaReport {
    pub trials: usize,
    pub seed: u64,
    pub head_dim: usize,
    pub period: usize,
    pub delta_q: f64,
    pub delta_k: f64,
    pub max_abs_diff: f64,
    pub max_bound: f64,
    /// Smallest `bound - diff` seen.
    pub min_slack: f64,
    pub violations: usize,
}

/// Tolerance added to the analytic bound.
pub const LEMMA_TOLERANCE: f64 = 1e-9;

/// Stable per-index seed derivation.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn gaussian_vec<R: Rng>(rng: &mut R, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// A uniformly random direction scaled to length `r`.
pub fn sphere_vec<R: Rng>(rng: &mut R, d: usize, r: f64) -> Vec<f64> {
    loop {
        let g = gaussian_vec(rng, d);
        let n = dot(&g, &g).sqrt();
        if n > 1e-12 {
            return g.into_iter().map(|x| x * r / n).collect();
        }
    }
}

struct Trial {
    diff: f64,
    bound: f64,
}

fn run_trial(spec: &PeriodicTailSpec, cfg: &RopeConfig, seed: u64) -> Trial {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = spec.head_dim;
    let p = spec.period;
    let t = rng.random_range(p..=spec.max_position);
    let i = rng.random_range(p..=t);
    let q_prev = gaussian_vec(&mut rng, d);
    let k_prev = gaussian_vec(&mut rng, d);
    let dq = sphere_vec(&mut rng, d, spec.delta_q);
    let dk = sphere_vec(&mut rng, d, spec.delta_k);
    let q_t: Vec<f64> = q_prev.iter().zip(&dq).map(|(a, b)| a + b).collect();
    let k_i: Vec<f64> = k_prev.iter().zip(&dk).map(|(a, b)| a + b).collect();
    let now = relative_score(&q_t, &k_i, (t - i) as f64, cfg);
    let before = relative_score(&q_prev, &k_prev, ((t - p) - (i - p)) as f64, cfg);
    let bound = lemma_bound(&q_prev, &k_prev, spec.delta_q, spec.delta_k, cfg).expect("dimensions fixed above");
    Trial {
        diff: (now - before).abs(),
        bound,
    }
}

/// Randomized check of the shift-invariance bound. Deterministic in `(seed, trial)`.
pub fn verify_shift_invariance(spec: &PeriodicTailSpec, trials: usize, seed: u64) -> Result<LemmaReport> {
    spec.validate()?;
    if trials == 0 {
        return Err(Error::InvalidConfig("trials must be at least 1".into()));
    }
    let cfg = RopeConfig::new(spec.head_dim)?;
    let results: Vec<Trial> = (0..trials)
        .into_par_iter()
        .map(|k| run_trial(spec, &cfg, derive_seed(seed, k as u64)))
        .collect();
    let mut report = LemmaReport {
        trials,
        seed,
        head_dim: spec.head_dim,
        period: spec.period,
        delta_q: spec.delta_q,
        delta_k: spec.delta_k,
        max_abs_diff: 0.0,
        max_bound: 0.0,
        min_slack: f64::INFINITY,
        violations: 0,
    };
    for r in &results {
        report.max_abs_diff = report.max_abs_diff.max(r.diff);
        report.max_bound = report.max_bound.max(r.bound);
        report.min_slack = report.min_slack.min(r.bound - r.diff);
        if r.diff > r.bound + LEMMA_TOLERANCE {
            report.violations += 1;
        }
    }
    Ok(report)
}

/// Values over a tail window.
#[derive(Debug, Clone)]
pub struct TailWindow {
    pub positions: Vec<usize>,
    pub values: Vec<Vec<f64>>,
}

impl TailWindow {
    /// `sum_i alpha_i v_i` over the window.
    pub fn apply(&self, weights: &[(usize, f64)]) -> Result<Vec<f64>> {
        let dv = self.values.first().map_or(0, Vec::len);
        let mut out = vec![0.0; dv];
        for &(p, w) in weights {
            let idx = self.positions.iter().position(|&x| x == p).ok_or(Error::OutsideTail(p))?;
            for (o, x) in out.iter_mut().zip(&self.values[idx]) {
                *o += w * x;
            }
        }
        Ok(out)
    }
}

/// A single seeded attention head with token embeddings shared by queries and keys.
#[derive(Debug, Clone)]
pub struct ToyHead {
    pub cfg: RopeConfig,
    pub scale: f64,
    seed: u64,
}

impl ToyHead {
    pub fn new(head_dim: usize, scale: f64, seed: u64) -> Result<Self> {
        Ok(Self {
            cfg: RopeConfig::new(head_dim)?,
            scale,
            seed,
        })
    }

    /// Unit-norm embedding of a token, times the head scale.
    pub fn embed(&self, token: u32) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, u64::from(token)));
        sphere_vec(&mut rng, self.cfg.head_dim, self.scale)
    }

    /// Causal attention weights of every step over all earlier positions.
    pub fn attention_history(&self, tokens: &[u32]) -> Result<Vec<AttentionFrame>> {
        let embeds: Vec<Vec<f64>> = tokens.iter().map(|&t| self.embed(t)).collect();
        (0..tokens.len())
            .into_par_iter()
            .map(|t| {
                let keys: Vec<Positioned<'_>> = (0..=t).map(|i| Positioned { position: i, vec: &embeds[i] }).collect();
                let values: Vec<&[f64]> = (0..=t).map(|i| embeds[i].as_slice()).collect();
                let out = attention_step(&embeds[t], t, &keys, &values, &self.cfg)?;
                Ok(AttentionFrame {
                    step: t,
                    heads: vec![out.weights],
                })
            })
            .collect()
    }
}

/// Weights of one step, per head, as `(position, weight)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionFrame {
    pub step: usize,
    pub heads: Vec<Vec<(usize, f64)>>,
}

/// Dense `steps x (max_position + 1)` matrices, one per head.
pub fn barcode_matrices(history: &[AttentionFrame]) -> Result<Vec<Vec<Vec<f64>>>> {
    let first = history.first().ok_or_else(|| Error::RaggedHistory("history is empty".into()))?;
    let heads = first.heads.len();
    if heads == 0 {
        return Err(Error::RaggedHistory("frame without heads".into()));
    }
    if let Some(f) = history.iter().find(|f| f.heads.len() != heads) {
        return Err(Error::RaggedHistory(format!("step {} has {} heads, expected {heads}", f.step, f.heads.len())));
    }
    let cols = history
        .iter()
        .flat_map(|f| f.heads.iter().flatten().map(|(p, _)| p + 1))
        .max()
        .unwrap_or(0);
    let mut mats = vec![vec![vec![0.0; cols]; history.len()]; heads];
    for (r, f) in history.iter().enumerate() {
        for (h, w) in f.heads.iter().enumerate() {
            for &(p, a) in w {
                mats[h][r][p] += a;
            }
        }
    }
    Ok(mats)
}

/// Writes `head{h}.csv` and `head{h}.pgm` into `dir` and returns the paths.
pub fn barcode_export(history: &[AttentionFrame], dir: &Path) -> Result<Vec<PathBuf>> {
    let mats = barcode_matrices(history)?;
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for (h, m) in mats.iter().enumerate() {
        let csv_path = dir.join(format!("head{h}.csv"));
        let mut w = csv::Writer::from_path(&csv_path)?;
        for row in m {
            w.write_record(row.iter().map(|x| format!("{x:.6}")))?;
        }
        w.flush()?;
        paths.push(csv_path);

        let pgm_path = dir.join(format!("head{h}.pgm"));
        let mut f = std::io::BufWriter::new(std::fs::File::create(&pgm_path)?);
        write_pgm(m, &mut f)?;
        f.flush()?;
        paths.push(pgm_path);
    }
    Ok(paths)
}

/// Binary 8-bit PGM, scaled so the largest weight is white.
pub fn write_pgm<W: Write>(m: &[Vec<f64>], out: &mut W) -> Result<()> {
    let rows = m.len();
    let cols = m.first().map_or(0, Vec::len);
    let max = m.iter().flatten().copied().fold(0.0, f64::max);
    write!(out, "P5\n{cols} {rows}\n255\n")?;
    let mut buf = Vec::with_capacity(rows * cols);
    for row in m {
        for &x in row {
            let v = if max > 0.0 { (x / max * 255.0).round() } else { 0.0 };
            buf.push(v.clamp(0.0, 255.0) as u8);
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

/// Mean weight per column over rows `from..`.
pub fn sustained_column_mass(matrix: &[Vec<f64>], from: usize) -> Vec<f64> {
    let rows = &matrix[from.min(matrix.len())..];
    let cols = matrix.first().map_or(0, Vec::len);
    let mut mass = vec![0.0; cols];
    if rows.is_empty() {
        return mass;
    }
    for r in rows {
        for (m, x) in mass.iter_mut().zip(r) {
            *m += x;
        }
    }
    for m in &mut mass {
        *m /= rows.len() as f64;
    }
    mass
}
