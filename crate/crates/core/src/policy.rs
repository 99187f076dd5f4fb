//! Runs one eviction policy end to end over a generated trace: prefill
//! pruning and broadcast (hierarchical policy only), then the decode loop of
//! every layer under the chosen evictor.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::attention::{cumulative_scores, TokenModality};
use crate::decode::{CacheState, DdesConfig, DecodeEvent, DecodeStats, Eviction, KvEntry};
use crate::error::{Error, Result};
use crate::prune::{self, DapConfig, PruneDecision, TextVisualBlock};
use crate::sim::GeneratedTrace;

/// Modeled KV bytes per token per layer.
pub const DEFAULT_BYTES_PER_ENTRY: u64 = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    /// No eviction; the reference.
    Full,
    /// Prefill pruning with broadcast, then recycle-bin decode eviction.
    Hae,
    /// Heavy-hitter greedy eviction, one entry per step.
    Greedy,
    /// Keep the most recent `budget` entries.
    Window,
}

impl Policy {
    pub fn name(self) -> &'static str {
        match self {
            Policy::Full => "full",
            Policy::Hae => "hae",
            Policy::Greedy => "greedy",
            Policy::Window => "window",
        }
    }
}

/// A policy and the knobs it uses. Knobs that do not belong to the policy are
/// rejected with `config-mismatch`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicySpec {
    pub policy: Policy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dap: Option<DapConfig>,
    /// Absent for `hae` means decode eviction is disabled.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ddes: Option<DdesConfig>,
    /// Greedy and window budget; defaults to the prompt length.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recent_window: Option<usize>,
}

impl PolicySpec {
    pub fn full() -> Self {
        Self {
            policy: Policy::Full,
            dap: None,
            ddes: None,
            budget: None,
            recent_window: None,
        }
    }

    pub fn hae(dap: DapConfig, ddes: Option<DdesConfig>) -> Self {
        Self {
            policy: Policy::Hae,
            dap: Some(dap),
            ddes,
            ..Self::full()
        }
    }

    pub fn greedy(budget: Option<usize>, recent_window: usize) -> Self {
        Self {
            policy: Policy::Greedy,
            budget,
            recent_window: Some(recent_window),
            ..Self::full()
        }
    }

    pub fn window(budget: Option<usize>) -> Self {
        Self {
            policy: Policy::Window,
            budget,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let name = self.policy.name();
        let forbid = |present: bool, knob: &str| -> Result<()> {
            if present {
                Err(Error::ConfigMismatch(format!("policy {name} does not take {knob}")))
            } else {
                Ok(())
            }
        };
        match self.policy {
            Policy::Full => {
                forbid(self.dap.is_some(), "dap")?;
                forbid(self.ddes.is_some(), "ddes")?;
                forbid(self.budget.is_some(), "budget")?;
                forbid(self.recent_window.is_some(), "recent_window")?;
            }
            Policy::Hae => {
                if self.dap.is_none() {
                    return Err(Error::ConfigMismatch("policy hae requires dap".into()));
                }
                forbid(self.budget.is_some(), "budget")?;
                forbid(self.recent_window.is_some(), "recent_window")?;
                if let Some(d) = &self.ddes {
                    d.validate()?;
                }
            }
            Policy::Greedy => {
                forbid(self.dap.is_some(), "dap")?;
                forbid(self.ddes.is_some(), "ddes")?;
            }
            Policy::Window => {
                forbid(self.dap.is_some(), "dap")?;
                forbid(self.ddes.is_some(), "ddes")?;
                forbid(self.recent_window.is_some(), "recent_window")?;
            }
        }
        Ok(())
    }
}

/// Swept parameter echoed into a record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub name: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub policy: String,
    pub seed: u64,
    /// Token-layer entries live at the end.
    pub retained_entries: usize,
    /// Token-layer entries removed during prefill and decode.
    pub evicted_entries: usize,
    pub prefill_evicted: usize,
    pub cache_bytes: u64,
    /// Decode-time eviction loss summed over layers.
    pub eviction_loss: f64,
    pub overlap_rates: Vec<f64>,
    /// Live entries over all layers, after prefill and after each decode step.
    pub cache_sizes: Vec<usize>,
    pub argmin_scans: usize,
    pub flushes: usize,
    pub wall_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub param: Option<SweepPoint>,
}

impl MetricsRecord {
    pub fn overlap_mean(&self) -> Option<f64> {
        (!self.overlap_rates.is_empty())
            .then(|| self.overlap_rates.iter().sum::<f64>() / self.overlap_rates.len() as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    pub bytes_per_entry: u64,
    /// Leave `wall_ms` at zero unless set, so records stay reproducible.
    pub record_wall_time: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            bytes_per_entry: DEFAULT_BYTES_PER_ENTRY,
            record_wall_time: false,
        }
    }
}

/// What one layer's decode stream ended with.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerRun {
    pub prefill_len: usize,
    pub final_entries: Vec<KvEntry>,
    pub evictions: Vec<Eviction>,
    pub events: Vec<DecodeEvent>,
    pub stats: DecodeStats,
}

impl LayerRun {
    /// Scores of the post-prefill entries: score at eviction for those that
    /// were evicted, final score for the rest.
    pub fn prompt_final_scores(&self) -> Vec<f64> {
        self.final_entries
            .iter()
            .filter(|e| e.modality != TokenModality::Generated)
            .map(|e| e.beta)
            .chain(
                self.evictions
                    .iter()
                    .filter(|e| e.modality != TokenModality::Generated)
                    .map(|e| e.score),
            )
            .collect()
    }

    /// Evictions of post-prefill (prompt) entries.
    pub fn prompt_evictions(&self) -> impl Iterator<Item = &Eviction> {
        self.evictions
            .iter()
            .filter(|e| e.modality != TokenModality::Generated)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyRun {
    pub record: MetricsRecord,
    pub decision: Option<PruneDecision>,
    pub layers: Vec<LayerRun>,
    pub elapsed: Duration,
}

/// Executes `spec` over `trace`.
pub fn run_policy(trace: &GeneratedTrace, spec: &PolicySpec, opts: &RunOptions) -> Result<PolicyRun> {
    spec.validate()?;
    let start = Instant::now();
    let n_layers = trace.n_layers();
    let n0 = trace.prompt_len();
    let steps = trace.decode_steps();

    // Prefill: decide on the first layer, broadcast, and measure how well the
    // broadcast matches what each layer would have chosen itself.
    let (decision, evicted_positions, overlap_rates) = match (&spec.policy, &spec.dap) {
        (Policy::Hae, Some(dap)) => {
            let block = TextVisualBlock::from_matrix(&trace.prefill()[0])?;
            let decision = prune::prune_block(&block, dap)?;
            let per_layer = prune::broadcast(&decision, n_layers)?;
            let positions: Vec<Vec<usize>> = per_layer
                .iter()
                .map(|ev| ev.iter().map(|&j| block.visual_columns()[j]).collect())
                .collect();
            let overlap = if decision.evicted.is_empty() {
                Vec::new()
            } else {
                let evictable = prune::per_layer_evictable(trace.prefill(), dap)?;
                prune::overlap_rate(&decision.evicted, &evictable)?
            };
            (Some(decision), positions, overlap)
        }
        _ => (None, vec![Vec::new(); n_layers], Vec::new()),
    };

    let mut cache_sizes = vec![0usize; steps + 1];
    let mut layers = Vec::with_capacity(n_layers);
    let mut positions = Vec::with_capacity(n0 + steps);
    for (layer, (prefill, evicted)) in trace.prefill().iter().zip(&evicted_positions).enumerate() {
        let scores = cumulative_scores(prefill);
        let entries: Vec<KvEntry> = (0..n0)
            .filter(|p| evicted.binary_search(p).is_err())
            .map(|p| KvEntry::prompt(p, trace.prompt_modality()[p], scores[p]))
            .collect();
        let mut state = CacheState::new(entries);
        let budget = spec.budget.unwrap_or(n0);
        let recent = spec.recent_window.unwrap_or(0);
        cache_sizes[0] += state.len();

        let mut events = Vec::with_capacity(steps);
        for t in 0..steps {
            positions.clear();
            positions.extend(state.original_indices());
            let row = trace.decode_row(layer, t, &positions);
            let newborn = KvEntry::generated(n0 + t, t);
            let event = match (spec.policy, &spec.ddes) {
                (Policy::Full, _) | (Policy::Hae, None) => state.append_step(&row, newborn)?,
                (Policy::Hae, Some(ddes)) => state.step_decode(ddes, &row, newborn)?,
                (Policy::Greedy, _) => state.greedy_evict_step(&row, newborn, budget, recent)?,
                (Policy::Window, _) => state.window_step(&row, newborn, budget)?,
            };
            cache_sizes[t + 1] += event.cache_size;
            events.push(event);
        }

        layers.push(LayerRun {
            prefill_len: state.prefill_len(),
            final_entries: state.entries().to_vec(),
            evictions: state.evictions().to_vec(),
            events,
            stats: state.stats(),
        });
    }

    let elapsed = start.elapsed();
    let retained: usize = layers.iter().map(|l| l.final_entries.len()).sum();
    let prefill_evicted: usize = evicted_positions.iter().map(Vec::len).sum();
    let decode_evicted: usize = layers.iter().map(|l| l.evictions.len()).sum();
    let record = MetricsRecord {
        policy: spec.policy.name().to_string(),
        seed: trace.seed(),
        retained_entries: retained,
        evicted_entries: prefill_evicted + decode_evicted,
        prefill_evicted,
        cache_bytes: retained as u64 * opts.bytes_per_entry,
        eviction_loss: layers.iter().map(|l| crate::decode::eviction_loss(&l.evictions)).fold(0.0, |acc, l| acc + l),
        overlap_rates,
        cache_sizes,
        argmin_scans: layers.iter().map(|l| l.stats.argmin_scans).sum(),
        flushes: layers.iter().map(|l| l.stats.flushes).sum(),
        wall_ms: if opts.record_wall_time {
            elapsed.as_secs_f64() * 1e3
        } else {
            0.0
        },
        param: None,
    };
    Ok(PolicyRun {
        record,
        decision,
        layers,
        elapsed,
    })
}
