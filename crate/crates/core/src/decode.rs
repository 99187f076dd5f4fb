//! Decode-time eviction.
//!
//! [`CacheState::step_decode`] implements the recycle-bin policy: every step
//! the lowest-scoring unmarked entry is marked, marked entries stay live and
//! keep collecting attention, and once `k` entries are marked they are all
//! removed at once. [`CacheState::greedy_evict_step`] is the heavy-hitter
//! baseline that removes one entry per step as soon as the budget is exceeded.
//!
//! Scores are cumulative attention: every row adds its probability to the
//! entry it is aligned with. An entry appended in the current step has not
//! been attended yet and is never an eviction candidate in that step.

use std::fs::OpenOptions;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionRow, TokenModality};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KvEntry {
    /// Token position in the full (unpruned) sequence.
    pub original_index: usize,
    pub modality: TokenModality,
    /// Cumulative attention received so far.
    pub beta: f64,
    /// In the recycle bin, still live.
    pub marked: bool,
    pub birth_step: usize,
}

impl KvEntry {
    /// Prompt token surviving prefill, optionally carrying attention it
    /// already received during prefill.
    pub fn prompt(original_index: usize, modality: TokenModality, beta: f64) -> Self {
        Self {
            original_index,
            modality,
            beta,
            marked: false,
            birth_step: 0,
        }
    }

    pub fn generated(original_index: usize, birth_step: usize) -> Self {
        Self {
            original_index,
            modality: TokenModality::Generated,
            beta: 0.0,
            marked: false,
            birth_step,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DdesConfig {
    /// Bin capacity; this many entries leave the cache at each flush.
    pub k: usize,
    /// Maximum growth of the cache above its post-prefill size.
    pub buffer: usize,
    /// Most-recent entries (counting the one appended this step) that are
    /// never marked. Zero and one both protect only the newborn.
    #[serde(default)]
    pub protect_recent: usize,
}

impl DdesConfig {
    pub fn new(k: usize, buffer: usize) -> Self {
        Self {
            k,
            buffer,
            protect_recent: 0,
        }
    }

    pub fn with_protect_recent(mut self, w: usize) -> Self {
        self.protect_recent = w;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 || self.k > self.buffer {
            return Err(Error::InvalidConfig(format!(
                "ddes requires 1 < k <= buffer, got k={} buffer={}",
                self.k, self.buffer
            )));
        }
        Ok(())
    }
}

/// One entry removed from the cache, with its score at removal time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Eviction {
    pub original_index: usize,
    pub modality: TokenModality,
    pub score: f64,
    pub step: usize,
}

/// One line of the decode event log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeEvent {
    pub step: usize,
    pub cache_size: usize,
    pub marked: Option<usize>,
    pub flushed: Vec<usize>,
    pub loss: f64,
}

/// Work counters for the decode loop.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeStats {
    pub argmin_scans: usize,
    pub flushes: usize,
    pub sorts: usize,
}

/// Live cache of one decode stream (one layer of one sample).
#[derive(Clone, Debug, PartialEq)]
pub struct CacheState {
    entries: Vec<KvEntry>,
    /// Original indices of marked entries, in marking order.
    bin: Vec<usize>,
    prefill_len: usize,
    step: usize,
    evictions: Vec<Eviction>,
    stats: DecodeStats,
}

impl CacheState {
    /// Starts a decode stream from the entries that survived prefill. Entries
    /// must be in ascending `original_index` order.
    pub fn new(entries: Vec<KvEntry>) -> Self {
        debug_assert!(entries.windows(2).all(|w| w[0].original_index < w[1].original_index));
        Self {
            prefill_len: entries.len(),
            entries,
            bin: Vec::new(),
            step: 0,
            evictions: Vec::new(),
            stats: DecodeStats::default(),
        }
    }

    pub fn entries(&self) -> &[KvEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn bin(&self) -> &[usize] {
        &self.bin
    }

    /// Cache size right after prefill.
    pub fn prefill_len(&self) -> usize {
        self.prefill_len
    }

    /// Decode steps completed.
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn evictions(&self) -> &[Eviction] {
        &self.evictions
    }

    pub fn stats(&self) -> DecodeStats {
        self.stats
    }

    pub fn original_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|e| e.original_index)
    }

    /// Total score of everything evicted so far.
    pub fn loss(&self) -> f64 {
        eviction_loss(&self.evictions)
    }

    /// Adds one row of attention to the entries it is aligned with. Marked
    /// entries are included.
    pub fn update_scores(&mut self, row: &AttentionRow) -> Result<()> {
        if row.len() != self.entries.len() {
            return Err(Error::RowCacheMisalignment {
                row: row.len(),
                cache: self.entries.len(),
            });
        }
        for (entry, p) in self.entries.iter_mut().zip(&row.probs) {
            entry.beta += p;
        }
        Ok(())
    }

    /// Decode step without eviction: score, then append.
    pub fn append_step(&mut self, row: &AttentionRow, new_entry: KvEntry) -> Result<DecodeEvent> {
        self.update_scores(row)?;
        self.entries.push(new_entry);
        Ok(self.finish_step(None, Vec::new(), 0.0))
    }

    /// One recycle-bin step: score, append, mark the lowest-scoring unmarked
    /// candidate, and flush the bin once it holds `k` entries.
    ///
    /// The cache stays within `prefill_len <= len < prefill_len + buffer`
    /// after every successful step. If the step cannot keep that bound (only
    /// possible when protection leaves nothing to mark) it fails with
    /// `buffer-overflow` and the state is left untouched.
    pub fn step_decode(
        &mut self,
        cfg: &DdesConfig,
        row: &AttentionRow,
        new_entry: KvEntry,
    ) -> Result<DecodeEvent> {
        cfg.validate()?;
        if row.len() != self.entries.len() {
            return Err(Error::RowCacheMisalignment {
                row: row.len(),
                cache: self.entries.len(),
            });
        }

        let len_after = self.entries.len() + 1;
        let candidate_end = len_after.saturating_sub(cfg.protect_recent.max(1));
        let can_mark = self.entries[..candidate_end.min(self.entries.len())]
            .iter()
            .any(|e| !e.marked);
        let will_flush = can_mark && self.bin.len() + 1 >= cfg.k;
        let size_after = if will_flush {
            len_after - (self.bin.len() + 1)
        } else {
            len_after
        };
        let limit = self.prefill_len + cfg.buffer;
        if size_after >= limit {
            return Err(Error::BufferOverflow {
                size: size_after,
                limit,
            });
        }

        self.update_scores(row)?;
        self.entries.push(new_entry);

        let marked = if can_mark {
            self.stats.argmin_scans += 1;
            let pos = argmin_unmarked(&self.entries[..candidate_end]).expect("checked above");
            let entry = &mut self.entries[pos];
            entry.marked = true;
            self.bin.push(entry.original_index);
            Some(entry.original_index)
        } else {
            None
        };

        let (flushed, loss) = if self.bin.len() >= cfg.k {
            self.flush()
        } else {
            (Vec::new(), 0.0)
        };
        Ok(self.finish_step(marked, flushed, loss))
    }

    /// Removes every marked entry at once and empties the bin.
    fn flush(&mut self) -> (Vec<usize>, f64) {
        self.stats.flushes += 1;
        let step = self.step;
        let mut flushed = Vec::with_capacity(self.bin.len());
        let mut loss = 0.0;
        let evictions = &mut self.evictions;
        self.entries.retain(|e| {
            if e.marked {
                flushed.push(e.original_index);
                loss += e.beta;
                evictions.push(Eviction {
                    original_index: e.original_index,
                    modality: e.modality,
                    score: e.beta,
                    step,
                });
            }
            !e.marked
        });
        self.bin.clear();
        (flushed, loss)
    }

    /// Heavy-hitter baseline step: score, append, and if the cache is over
    /// `budget`, rank the entries outside the most recent `recent_window`
    /// by score and evict the lowest one.
    pub fn greedy_evict_step(
        &mut self,
        row: &AttentionRow,
        new_entry: KvEntry,
        budget: usize,
        recent_window: usize,
    ) -> Result<DecodeEvent> {
        if budget < 1 {
            return Err(Error::InvalidBudget("budget must be >= 1".into()));
        }
        if recent_window > budget {
            return Err(Error::InvalidBudget(format!(
                "recent_window {recent_window} exceeds budget {budget}"
            )));
        }
        self.update_scores(row)?;
        self.entries.push(new_entry);
        if self.entries.len() <= budget {
            return Ok(self.finish_step(None, Vec::new(), 0.0));
        }

        let candidate_end = self.entries.len() - recent_window.max(1);
        self.stats.sorts += 1;
        let mut ranking: Vec<usize> = (0..candidate_end).collect();
        ranking.sort_by(|&a, &b| {
            let (ea, eb) = (&self.entries[a], &self.entries[b]);
            ea.beta
                .total_cmp(&eb.beta)
                .then(ea.original_index.cmp(&eb.original_index))
        });
        let victim = self.entries.remove(ranking[0]);
        let loss = victim.beta;
        self.evictions.push(Eviction {
            original_index: victim.original_index,
            modality: victim.modality,
            score: victim.beta,
            step: self.step,
        });
        Ok(self.finish_step(None, vec![victim.original_index], loss))
    }

    /// Sliding-window step: score, append, drop the oldest entry when over
    /// `budget`.
    pub fn window_step(
        &mut self,
        row: &AttentionRow,
        new_entry: KvEntry,
        budget: usize,
    ) -> Result<DecodeEvent> {
        if budget < 1 {
            return Err(Error::InvalidBudget("budget must be >= 1".into()));
        }
        self.update_scores(row)?;
        self.entries.push(new_entry);
        if self.entries.len() <= budget {
            return Ok(self.finish_step(None, Vec::new(), 0.0));
        }
        let victim = self.entries.remove(0);
        self.evictions.push(Eviction {
            original_index: victim.original_index,
            modality: victim.modality,
            score: victim.beta,
            step: self.step,
        });
        Ok(self.finish_step(None, vec![victim.original_index], victim.beta))
    }

    fn finish_step(&mut self, marked: Option<usize>, flushed: Vec<usize>, loss: f64) -> DecodeEvent {
        let event = DecodeEvent {
            step: self.step,
            cache_size: self.entries.len(),
            marked,
            flushed,
            loss,
        };
        self.step += 1;
        event
    }
}

/// Position of the lowest-scoring unmarked entry; ties go to the earliest
/// position, which is the lowest original index.
fn argmin_unmarked(entries: &[KvEntry]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (pos, e) in entries.iter().enumerate() {
        if e.marked {
            continue;
        }
        match best {
            Some((_, b)) if e.beta >= b => {}
            _ => best = Some((pos, e.beta)),
        }
    }
    best.map(|(pos, _)| pos)
}

/// Indices of the `k` lowest scores, ties broken by lower index, returned in
/// ascending index order. This is the minimum-sum `k`-subset.
pub fn select_eviction_set(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(Error::InsufficientEntries {
            k,
            len: scores.len(),
        });
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.select_nth_unstable_by(k - 1, |&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    Ok(idx)
}

/// Sum of scores at eviction time.
pub fn eviction_loss(evicted: &[Eviction]) -> f64 {
    evicted.iter().map(|e| e.score).fold(0.0, |acc, s| acc + s)
}

/// Appends events to a JSON-lines log, creating the file if needed.
pub fn append_event_log(path: &Path, events: &[DecodeEvent]) -> Result<()> {
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for event in events {
        serde_json::to_writer(&mut out, event)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cache(betas: &[f64]) -> CacheState {
        CacheState::new(
            betas
                .iter()
                .enumerate()
                .map(|(i, &b)| KvEntry::prompt(i, TokenModality::Text, b))
                .collect(),
        )
    }

    fn uniform(step: usize, n: usize) -> AttentionRow {
        AttentionRow::new(step, vec![1.0 / n as f64; n]).unwrap()
    }

    fn betas(c: &CacheState) -> Vec<f64> {
        c.entries().iter().map(|e| e.beta).collect()
    }

    #[test]
    fn update_adds_row() {
        let mut c = cache(&[0.1, 0.2]);
        c.update_scores(&AttentionRow::new(0, vec![0.6, 0.4]).unwrap()).unwrap();
        let b = betas(&c);
        assert!((b[0] - 0.7).abs() < 1e-15 && (b[1] - 0.6).abs() < 1e-15);

        let mut c = cache(&[0.0; 4]);
        c.update_scores(&uniform(0, 4)).unwrap();
        assert_eq!(betas(&c), vec![0.25; 4]);

        let err = c.update_scores(&uniform(1, 3)).unwrap_err();
        assert_eq!(err.code(), "row-cache-misalignment");
    }

    #[test]
    fn bin_marks_then_flushes() {
        // entries 0..=8; entry 3 then 7 are the weakest
        let mut c = cache(&[9.0, 8.0, 7.0, 0.1, 6.0, 5.0, 4.0, 0.2, 3.0]);
        let cfg = DdesConfig::new(2, 2).with_protect_recent(2);
        let n = c.len();
        let ev = c.step_decode(&cfg, &uniform(0, n), KvEntry::generated(9, 0)).unwrap();
        assert_eq!(ev.marked, Some(3));
        assert!(ev.flushed.is_empty());
        assert!(c.original_indices().any(|i| i == 3));
        assert_eq!(c.bin(), &[3]);

        let n = c.len();
        let ev = c.step_decode(&cfg, &uniform(1, n), KvEntry::generated(10, 1)).unwrap();
        assert_eq!(ev.marked, Some(7));
        assert_eq!(ev.flushed, vec![3, 7]);
        assert!(c.bin().is_empty());
        assert!(!c.original_indices().any(|i| i == 3 || i == 7));
    }

    #[test]
    fn size_trajectory_k_equals_buffer() {
        let mut c = cache(&[1.0, 2.0, 3.0, 4.0]);
        let cfg = DdesConfig::new(2, 2);
        let mut sizes = vec![c.len()];
        for t in 0..6 {
            let n = c.len();
            c.step_decode(&cfg, &uniform(t, n), KvEntry::generated(4 + t, t)).unwrap();
            sizes.push(c.len());
        }
        assert_eq!(sizes, vec![4, 5, 4, 5, 4, 5, 4]);
    }

    #[test]
    fn marked_entries_keep_scoring() {
        let mut c = cache(&[0.0, 5.0, 5.0]);
        let cfg = DdesConfig::new(3, 3);
        c.step_decode(&cfg, &uniform(0, 3), KvEntry::generated(3, 0)).unwrap();
        assert!(c.entries()[0].marked);
        let before = c.entries()[0].beta;
        c.step_decode(&cfg, &uniform(1, 4), KvEntry::generated(4, 1)).unwrap();
        assert!(c.entries()[0].beta > before);
    }

    #[test]
    fn marked_entry_cannot_be_marked_again() {
        let mut c = cache(&[0.0, 5.0, 6.0]);
        let cfg = DdesConfig::new(3, 3);
        c.step_decode(&cfg, &uniform(0, 3), KvEntry::generated(3, 0)).unwrap();
        c.step_decode(&cfg, &uniform(1, 4), KvEntry::generated(4, 1)).unwrap();
        assert_eq!(c.bin().len(), 2);
        let mut bin = c.bin().to_vec();
        bin.dedup();
        assert_eq!(bin.len(), 2);
    }

    #[test]
    fn overflow_when_nothing_can_be_marked() {
        let mut c = cache(&[1.0]);
        let cfg = DdesConfig::new(2, 2).with_protect_recent(10);
        c.step_decode(&cfg, &uniform(0, 1), KvEntry::generated(1, 0)).unwrap();
        let snapshot = c.clone();
        let err = c
            .step_decode(&cfg, &uniform(1, 2), KvEntry::generated(2, 1))
            .unwrap_err();
        assert_eq!(err.code(), "buffer-overflow");
        assert_eq!(c, snapshot);
    }

    #[test]
    fn invalid_ddes_config() {
        let mut c = cache(&[1.0, 2.0]);
        for cfg in [DdesConfig::new(1, 4), DdesConfig::new(5, 4)] {
            let err = c.step_decode(&cfg, &uniform(0, 2), KvEntry::generated(2, 0)).unwrap_err();
            assert_eq!(err.code(), "invalid-config");
        }
    }

    #[test]
    fn eviction_set_examples() {
        assert_eq!(select_eviction_set(&[3.0, 1.0, 2.0], 1).unwrap(), vec![1]);
        assert_eq!(select_eviction_set(&[1.0, 1.0, 5.0], 2).unwrap(), vec![0, 1]);
        assert_eq!(select_eviction_set(&[2.0, 2.0, 2.0], 2).unwrap(), vec![0, 1]);
        assert!(select_eviction_set(&[1.0], 0).unwrap().is_empty());
        assert_eq!(
            select_eviction_set(&[1.0], 2).unwrap_err().code(),
            "insufficient-entries"
        );
    }

    #[test]
    fn greedy_holds_budget() {
        let mut c = cache(&[1.0, 2.0, 3.0, 4.0]);
        let ev = c.greedy_evict_step(&uniform(0, 4), KvEntry::generated(4, 0), 4, 0).unwrap();
        assert_eq!(c.len(), 4);
        assert_eq!(ev.flushed, vec![0]);
        assert!((ev.loss - 1.25).abs() < 1e-15);
        assert_eq!(c.stats().sorts, 1);
    }

    #[test]
    fn greedy_full_window_is_sliding_window() {
        let mut greedy = cache(&[5.0, 0.1, 3.0]);
        let mut window = greedy.clone();
        for t in 0..5 {
            let n = greedy.len();
            greedy
                .greedy_evict_step(&uniform(t, n), KvEntry::generated(3 + t, t), 3, 3)
                .unwrap();
            window.window_step(&uniform(t, n), KvEntry::generated(3 + t, t), 3).unwrap();
        }
        assert_eq!(greedy.evictions(), window.evictions());
        let order: Vec<usize> = greedy.evictions().iter().map(|e| e.original_index).collect();
        assert_eq!(order, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn greedy_budget_errors() {
        let mut c = cache(&[1.0]);
        let err = c.greedy_evict_step(&uniform(0, 1), KvEntry::generated(1, 0), 0, 0).unwrap_err();
        assert_eq!(err.code(), "invalid-budget");
        let err = c.greedy_evict_step(&uniform(0, 1), KvEntry::generated(1, 0), 2, 3).unwrap_err();
        assert_eq!(err.code(), "invalid-budget");
    }

    #[test]
    fn loss_sums_scores() {
        assert_eq!(eviction_loss(&[]), 0.0);
        let ev = |s| Eviction {
            original_index: 0,
            modality: TokenModality::Text,
            score: s,
            step: 0,
        };
        assert!((eviction_loss(&[ev(0.1), ev(0.2)]) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn event_log_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.jsonl");
        let event = DecodeEvent {
            step: 3,
            cache_size: 10,
            marked: Some(4),
            flushed: vec![1, 4],
            loss: 0.5,
        };
        append_event_log(&path, std::slice::from_ref(&event)).unwrap();
        append_event_log(&path, &[event]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(
            lines[0],
            r#"{"step":3,"cache_size":10,"marked":4,"flushed":[1,4],"loss":0.5}"#
        );
    }
}
