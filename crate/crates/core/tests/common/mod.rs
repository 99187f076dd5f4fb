//! Shared fixtures and independent reference implementations for the
//! integration tests. Nothing here calls into the code under test except to
//! build inputs.

#![allow(dead_code)]

use kvevict::attention::{AttentionMatrix, AttentionRow, TokenModality};
use kvevict::decode::{CacheState, DdesConfig, KvEntry};
use kvevict::sim::StreamConfig;
use rand::Rng;

pub use rand::SeedableRng;
pub use rand_chacha::ChaCha8Rng as TestRng;

pub fn rng(seed: u64) -> TestRng {
    TestRng::seed_from_u64(seed)
}

pub fn random_modality(rng: &mut TestRng) -> TokenModality {
    match rng.random_range(0..3) {
        0 => TokenModality::Visual,
        1 => TokenModality::Text,
        _ => TokenModality::Generated,
    }
}

/// Random probability vector of length `n` with a fair share of exact zeros
/// and values near the sparsity threshold.
pub fn random_distribution(rng: &mut TestRng, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n)
        .map(|_| match rng.random_range(0..4) {
            0 => 0.0,
            1 => rng.random_range(0.0..2e-4),
            _ => rng.random_range(0.0..1.0),
        })
        .collect();
    let sum: f64 = v.iter().sum();
    if sum == 0.0 {
        v[0] = 1.0;
    } else {
        v.iter_mut().for_each(|x| *x /= sum);
    }
    v
}

/// Ragged causal matrix with random labels: row `i` has `i + 1` cells.
pub fn random_causal_matrix(rng: &mut TestRng, n: usize) -> (Vec<Vec<f64>>, Vec<TokenModality>) {
    let labels: Vec<TokenModality> = (0..n).map(|_| random_modality(rng)).collect();
    let rows = (0..n).map(|i| random_distribution(rng, i + 1)).collect();
    (rows, labels)
}

pub fn matrix(rows: &[Vec<f64>], labels: &[TokenModality]) -> AttentionMatrix {
    AttentionMatrix::self_attention(rows.to_vec(), labels.to_vec()).unwrap()
}

/// Reference sparsity count: `(at_or_below, total)` per column class.
pub struct NaiveSparsity {
    pub overall: (usize, usize),
    pub visual: (usize, usize),
    pub text: (usize, usize),
}

pub fn naive_sparsity(rows: &[Vec<f64>], labels: &[TokenModality], threshold: f64) -> NaiveSparsity {
    let mut s = NaiveSparsity {
        overall: (0, 0),
        visual: (0, 0),
        text: (0, 0),
    };
    for i in 0..rows.len() {
        for j in 0..rows[i].len() {
            let hit = if rows[i][j] <= threshold { 1 } else { 0 };
            s.overall.0 += hit;
            s.overall.1 += 1;
            if labels[j] == TokenModality::Visual {
                s.visual.0 += hit;
                s.visual.1 += 1;
            }
            if labels[j] == TokenModality::Text {
                s.text.0 += hit;
                s.text.1 += 1;
            }
        }
    }
    s
}

/// Dense text-by-visual block with column maxima spread around `alpha`-scale
/// values, so that both guard outcomes occur.
pub fn random_block(rng: &mut TestRng, n_text: usize, n_visual: usize) -> Vec<Vec<f64>> {
    let scales: Vec<f64> = (0..n_visual)
        .map(|_| 10f64.powf(rng.random_range(-6.0..-1.0)))
        .collect();
    (0..n_text)
        .map(|_| {
            scales
                .iter()
                .map(|s| if rng.random_bool(0.2) { 0.0 } else { s * rng.random_range(0.0..1.0) })
                .collect()
        })
        .collect()
}

/// Every `k`-subset of `0..n` in lexicographic order.
pub fn k_subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, k, &mut Vec::new(), &mut out);
    out
}

/// Minimum-sum `k`-subset by enumeration; among equal sums the
/// lexicographically first subset wins. Scores must make sums exact.
pub fn brute_force_eviction_set(scores: &[f64], k: usize) -> Vec<usize> {
    let mut best: Option<(f64, Vec<usize>)> = None;
    for subset in k_subsets(scores.len(), k) {
        let sum: f64 = subset.iter().map(|&i| scores[i]).sum();
        if best.as_ref().is_none_or(|(b, _)| sum < *b) {
            best = Some((sum, subset));
        }
    }
    best.map(|(_, s)| s).unwrap_or_default()
}

/// Scores on a dyadic grid so that every subset sum is exact; a small
/// `levels` forces many ties.
pub fn dyadic_scores(rng: &mut TestRng, n: usize, levels: u32) -> Vec<f64> {
    (0..n)
        .map(|_| f64::from(rng.random_range(0..levels)) / 64.0)
        .collect()
}

/// Small simulator stream for end-to-end tests.
pub fn small_stream(seed: u64) -> StreamConfig {
    StreamConfig {
        n_visual: 24,
        n_text: 8,
        n_layers: 2,
        decode_steps: 40,
        seed,
        ..StreamConfig::default()
    }
}

/// Random cache for direct decode-loop tests.
pub fn random_cache(rng: &mut TestRng, l: usize) -> CacheState {
    CacheState::new(
        (0..l)
            .map(|i| KvEntry::prompt(i, random_modality(rng), rng.random_range(0.0..4.0)))
            .collect(),
    )
}

/// Drives `steps` recycle-bin steps with random rows; returns the cache and
/// every row it was fed.
pub fn drive_ddes(
    rng: &mut TestRng,
    l: usize,
    cfg: &DdesConfig,
    steps: usize,
) -> (CacheState, Vec<AttentionRow>, Vec<kvevict::decode::DecodeEvent>) {
    let mut cache = random_cache(rng, l);
    let mut rows = Vec::with_capacity(steps);
    let mut events = Vec::with_capacity(steps);
    for t in 0..steps {
        let row = AttentionRow::new(t, random_distribution(rng, cache.len())).unwrap();
        events.push(
            cache
                .step_decode(cfg, &row, KvEntry::generated(l + t, t))
                .unwrap(),
        );
        rows.push(row);
    }
    (cache, rows, events)
}
