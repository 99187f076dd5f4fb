//! Prefill-time pruning of visual KV entries.
//!
//! A visual token is evicted only when it fails the global text-attention
//! filter (its summed attention from all text queries is below `r` times the
//! total) *and* no single text query attends to it with weight `alpha` or more.
//! The decision is taken once on the first layer and copied to every other
//! layer.
//!
//! Visual indices in this module are ordinals over the visual columns
//! (`0..n_visual`), not token positions; [`TextVisualBlock::visual_columns`]
//! maps them back.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionMatrix, TokenModality};
use crate::error::{Error, Result};

/// Text-query rows by visual-key columns of a prefill attention matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct TextVisualBlock {
    rows: Vec<Vec<f64>>,
    visual_columns: Vec<usize>,
}

impl TextVisualBlock {
    /// Dense block; every row must have the same width.
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != width {
                return Err(Error::LengthMismatch {
                    what: "block row width",
                    left: row.len(),
                    right: width,
                });
            }
            if row.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::InvalidRow(format!("block row {i} has a negative or non-finite value")));
            }
        }
        Ok(Self {
            rows,
            visual_columns: (0..width).collect(),
        })
    }

    /// Extracts text rows by visual columns. A cell a text query could not
    /// attend to (absent in the ragged matrix) contributes zero.
    pub fn from_matrix(m: &AttentionMatrix) -> Result<Self> {
        let visual_columns: Vec<usize> = m
            .col_modality()
            .iter()
            .enumerate()
            .filter(|(_, t)| **t == TokenModality::Visual)
            .map(|(j, _)| j)
            .collect();
        if visual_columns.is_empty() {
            return Err(Error::NoVisualTokens);
        }
        let rows: Vec<Vec<f64>> = m
            .rows()
            .iter()
            .zip(m.row_modality())
            .filter(|(_, t)| **t == TokenModality::Text)
            .map(|(row, _)| {
                visual_columns
                    .iter()
                    .map(|&j| row.probs.get(j).copied().unwrap_or(0.0))
                    .collect()
            })
            .collect();
        if rows.is_empty() {
            return Err(Error::NoTextContext);
        }
        Ok(Self {
            rows,
            visual_columns,
        })
    }

    pub fn n_text(&self) -> usize {
        self.rows.len()
    }

    pub fn n_visual(&self) -> usize {
        self.visual_columns.len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Matrix column of each visual ordinal.
    pub fn visual_columns(&self) -> &[usize] {
        &self.visual_columns
    }

    /// Largest attention any text query pays to visual ordinal `j`.
    pub fn column_max(&self, j: usize) -> f64 {
        self.rows.iter().map(|r| r[j]).fold(0.0, f64::max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DapConfig {
    /// Global-attention retention ratio.
    pub r: f64,
    /// Per-query maximum-attention guard.
    pub alpha: f64,
    /// Evictions are kept strictly below this count when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_evict: Option<usize>,
}

impl DapConfig {
    pub fn new(r: f64, alpha: f64) -> Self {
        Self {
            r,
            alpha,
            max_evict: None,
        }
    }

    pub fn with_max_evict(mut self, c: usize) -> Self {
        self.max_evict = Some(c);
        self
    }

    pub fn validate(&self, n_visual: usize) -> Result<()> {
        if !(self.r >= 0.0 && self.r.is_finite()) {
            return Err(Error::InvalidConfig(format!("dap.r must be >= 0, got {}", self.r)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "dap.alpha must be >= 0, got {}",
                self.alpha
            )));
        }
        if let Some(c) = self.max_evict {
            if c == 0 || c > n_visual {
                return Err(Error::InvalidConfig(format!(
                    "dap.max_evict must be in 1..={n_visual}, got {c}"
                )));
            }
        }
        Ok(())
    }
}

/// Which visual entries survive prefill. `retained` and `evicted` are sorted
/// and partition `0..n_visual`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneDecision {
    pub retained: Vec<usize>,
    pub evicted: Vec<usize>,
    pub layer_origin: usize,
}

/// Summed attention from all text queries to each visual column.
pub fn global_text_attention(block: &TextVisualBlock) -> Result<Vec<f64>> {
    if block.n_text() == 0 {
        return Err(Error::NoTextContext);
    }
    let mut totals = vec![0.0; block.n_visual()];
    for row in &block.rows {
        for (t, v) in totals.iter_mut().zip(row) {
            *t += v;
        }
    }
    Ok(totals)
}

/// Indices whose global attention reaches `r` times the total (inclusive).
pub fn select_retained(global: &[f64], r: f64) -> Vec<usize> {
    let threshold = r * global.iter().sum::<f64>();
    global
        .iter()
        .enumerate()
        .filter(|(_, &a)| a >= threshold)
        .map(|(j, _)| j)
        .collect()
}

/// True when no text query attends to `candidate` with weight `alpha` or more,
/// i.e. the token may be evicted.
///
/// # Panics
/// If `candidate` is not a visual ordinal of the block.
pub fn max_attention_guard(block: &TextVisualBlock, candidate: usize, alpha: f64) -> bool {
    assert!(candidate < block.n_visual(), "visual index {candidate} out of range");
    block.column_max(candidate) < alpha
}

pub fn prune_block(block: &TextVisualBlock, cfg: &DapConfig) -> Result<PruneDecision> {
    if block.n_visual() == 0 {
        return Err(Error::NoVisualTokens);
    }
    cfg.validate(block.n_visual())?;
    let global = global_text_attention(block)?;
    let retained_by_global: BTreeSet<usize> = select_retained(&global, cfg.r).into_iter().collect();

    let mut candidates: Vec<usize> = (0..block.n_visual())
        .filter(|j| !retained_by_global.contains(j) && max_attention_guard(block, *j, cfg.alpha))
        .collect();

    if let Some(c) = cfg.max_evict {
        if candidates.len() >= c {
            candidates.sort_by(|&a, &b| global[a].total_cmp(&global[b]).then(a.cmp(&b)));
            candidates.truncate(c - 1);
            candidates.sort_unstable();
        }
    }

    let evicted: BTreeSet<usize> = candidates.into_iter().collect();
    Ok(PruneDecision {
        retained: (0..block.n_visual()).filter(|j| !evicted.contains(j)).collect(),
        evicted: evicted.into_iter().collect(),
        layer_origin: 0,
    })
}

/// Runs the pruning decision on a prefill attention matrix.
pub fn prune_prefill(m: &AttentionMatrix, cfg: &DapConfig) -> Result<PruneDecision> {
    prune_block(&TextVisualBlock::from_matrix(m)?, cfg)
}

/// Copies the first-layer eviction set to every layer without recomputation.
pub fn broadcast(decision: &PruneDecision, layer_count: usize) -> Result<Vec<Vec<usize>>> {
    if layer_count == 0 {
        return Err(Error::InvalidConfig("layer_count must be >= 1".into()));
    }
    Ok(vec![decision.evicted.clone(); layer_count])
}

/// Share of the first-layer evictions that each layer would also evict.
pub fn overlap_rate(layer1_evicted: &[usize], per_layer_evictable: &[Vec<usize>]) -> Result<Vec<f64>> {
    let reference: BTreeSet<usize> = layer1_evicted.iter().copied().collect();
    if reference.is_empty() {
        return Err(Error::UndefinedOverlap);
    }
    Ok(per_layer_evictable
        .iter()
        .map(|layer| {
            let layer: BTreeSet<usize> = layer.iter().copied().collect();
            reference.intersection(&layer).count() as f64 / reference.len() as f64
        })
        .collect())
}

/// Reruns pruning independently on every layer. Analysis only; the serving
/// path broadcasts the first-layer decision instead.
pub fn per_layer_evictable(layers: &[AttentionMatrix], cfg: &DapConfig) -> Result<Vec<Vec<usize>>> {
    layers
        .iter()
        .map(|m| prune_prefill(m, cfg).map(|d| d.evicted))
        .collect()
}
