//! Attention rows, ragged causal matrices and the observation metrics computed
//! over them: threshold sparsity, per-modality sparsity, cumulative scores and
//! per-modality score variance.
//!
//! Matrices are ragged. A row only holds the cells its query could attend to;
//! anything past the end of a row is structurally absent and is neither a zero
//! nor counted by any metric.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the sum of a post-softmax row.
pub const ROW_SUM_TOLERANCE: f64 = 1e-9;

/// Default threshold below which an attention probability counts as negligible.
pub const DEFAULT_SPARSITY_THRESHOLD: f64 = 1e-4;

/// Current version of the JSON attention trace document.
pub const TRACE_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenModality {
    Visual,
    Text,
    /// Appended during decode. Never assigned to prompt tokens.
    Generated,
}

/// One query step's attention over the live cache, in cache order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRow {
    pub step: usize,
    pub probs: Vec<f64>,
}

impl AttentionRow {
    /// Builds a row that must be a probability distribution.
    pub fn new(step: usize, probs: Vec<f64>) -> Result<Self> {
        let row = Self::unnormalized(step, probs)?;
        row.check_distribution()?;
        Ok(row)
    }

    /// Builds a row of non-negative weights without the sum-to-one check.
    /// Used for sub-blocks of a matrix and for hand-written fixtures.
    pub fn unnormalized(step: usize, probs: Vec<f64>) -> Result<Self> {
        if let Some((j, v)) = probs
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0)
        {
            return Err(Error::InvalidRow(format!(
                "step {step}: element {j} = {v} is not a finite non-negative value"
            )));
        }
        Ok(Self { step, probs })
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.probs.iter().sum()
    }

    pub fn check_distribution(&self) -> Result<()> {
        let s = self.sum();
        if (s - 1.0).abs() > ROW_SUM_TOLERANCE {
            return Err(Error::InvalidRow(format!(
                "step {}: probabilities sum to {s}",
                self.step
            )));
        }
        Ok(())
    }
}

/// Ragged attention matrix with modality labels on both axes.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMatrix {
    rows: Vec<AttentionRow>,
    row_modality: Vec<TokenModality>,
    col_modality: Vec<TokenModality>,
}

impl AttentionMatrix {
    pub fn new(
        rows: Vec<AttentionRow>,
        row_modality: Vec<TokenModality>,
        col_modality: Vec<TokenModality>,
    ) -> Result<Self> {
        if rows.len() != row_modality.len() {
            return Err(Error::LengthMismatch {
                what: "rows vs row modality labels",
                left: rows.len(),
                right: row_modality.len(),
            });
        }
        for (i, row) in rows.iter().enumerate() {
            if row.len() > col_modality.len() {
                return Err(Error::InvalidRow(format!(
                    "row {i} has {} cells but the matrix has {} columns",
                    row.len(),
                    col_modality.len()
                )));
            }
            if i > 0 && row.step <= rows[i - 1].step {
                return Err(Error::InvalidRow(format!(
                    "row {i}: step {} does not follow step {}",
                    row.step,
                    rows[i - 1].step
                )));
            }
        }
        Ok(Self {
            rows,
            row_modality,
            col_modality,
        })
    }

    /// Rows from plain vectors; row `i` gets step `i`.
    pub fn from_rows(
        values: Vec<Vec<f64>>,
        row_modality: Vec<TokenModality>,
        col_modality: Vec<TokenModality>,
    ) -> Result<Self> {
        let rows = values
            .into_iter()
            .enumerate()
            .map(|(i, v)| AttentionRow::unnormalized(i, v))
            .collect::<Result<Vec<_>>>()?;
        Self::new(rows, row_modality, col_modality)
    }

    /// Square causal self-attention matrix: row `i` is the query of token `i`.
    pub fn self_attention(values: Vec<Vec<f64>>, modality: Vec<TokenModality>) -> Result<Self> {
        Self::from_rows(values, modality.clone(), modality)
    }

    pub fn rows(&self) -> &[AttentionRow] {
        &self.rows
    }

    pub fn row_modality(&self) -> &[TokenModality] {
        &self.row_modality
    }

    pub fn col_modality(&self) -> &[TokenModality] {
        &self.col_modality
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.col_modality.len()
    }

    /// Number of present (non-absent) cells.
    pub fn cell_count(&self) -> usize {
        self.rows.iter().map(AttentionRow::len).sum()
    }

    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        self.rows.get(row)?.probs.get(col).copied()
    }

    pub fn to_trace(&self) -> AttentionTrace {
        let self_attention = self.row_modality == self.col_modality;
        AttentionTrace {
            version: TRACE_VERSION,
            modalities: self.col_modality.clone(),
            row_modalities: (!self_attention).then(|| self.row_modality.clone()),
            rows: self.rows.iter().map(|r| r.probs.clone()).collect(),
        }
    }
}

/// Count of cells at or below a threshold out of the cells considered.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SparsityCount {
    pub at_or_below: usize,
    pub total: usize,
}

impl SparsityCount {
    pub fn rate(&self) -> f64 {
        self.at_or_below as f64 / self.total as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalitySparsity {
    pub overall: SparsityCount,
    /// `None` when no column is labeled visual.
    pub visual: Option<SparsityCount>,
    /// `None` when no column is labeled text.
    pub text: Option<SparsityCount>,
}

fn check_threshold(threshold: f64) -> Result<()> {
    if threshold.is_nan() || threshold < 0.0 {
        return Err(Error::InvalidThreshold(threshold));
    }
    Ok(())
}

/// Fraction of present cells whose value is `<= threshold`.
pub fn sparsity_rate(m: &AttentionMatrix, threshold: f64) -> Result<f64> {
    check_threshold(threshold)?;
    let total = m.cell_count();
    if total == 0 {
        return Err(Error::EmptyMatrix);
    }
    let at_or_below = m
        .rows
        .iter()
        .flat_map(|r| r.probs.iter())
        .filter(|&&v| v <= threshold)
        .count();
    Ok(at_or_below as f64 / total as f64)
}

/// Sparsity over all cells and separately over visual and text columns.
/// Generated columns only contribute to the overall count.
pub fn modality_sparsity(m: &AttentionMatrix, threshold: f64) -> Result<ModalitySparsity> {
    check_threshold(threshold)?;
    let mut overall = SparsityCount::default();
    let mut visual = SparsityCount::default();
    let mut text = SparsityCount::default();
    for row in &m.rows {
        for (v, modality) in row.probs.iter().zip(&m.col_modality) {
            let hit = usize::from(*v <= threshold);
            overall.total += 1;
            overall.at_or_below += hit;
            let bucket = match modality {
                TokenModality::Visual => &mut visual,
                TokenModality::Text => &mut text,
                TokenModality::Generated => continue,
            };
            bucket.total += 1;
            bucket.at_or_below += hit;
        }
    }
    if overall.total == 0 {
        return Err(Error::EmptyMatrix);
    }
    let has = |t: TokenModality| m.col_modality.contains(&t);
    Ok(ModalitySparsity {
        overall,
        visual: has(TokenModality::Visual).then_some(visual),
        text: has(TokenModality::Text).then_some(text),
    })
}

/// Column sums: the total attention each column received over all rows.
pub fn cumulative_scores(m: &AttentionMatrix) -> Vec<f64> {
    let mut scores = vec![0.0; m.n_cols()];
    for row in &m.rows {
        for (s, v) in scores.iter_mut().zip(&row.probs) {
            *s += v;
        }
    }
    scores
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityVariance {
    pub visual: Option<f64>,
    pub text: Option<f64>,
}

/// Population variance of the scores belonging to each modality.
pub fn modality_variance(scores: &[f64], modalities: &[TokenModality]) -> Result<ModalityVariance> {
    if scores.len() != modalities.len() {
        return Err(Error::LengthMismatch {
            what: "scores vs modality labels",
            left: scores.len(),
            right: modalities.len(),
        });
    }
    // Welford accumulators: (count, mean, m2)
    let mut acc = [(0usize, 0.0f64, 0.0f64); 2];
    for (&x, modality) in scores.iter().zip(modalities) {
        let slot = match modality {
            TokenModality::Visual => &mut acc[0],
            TokenModality::Text => &mut acc[1],
            TokenModality::Generated => continue,
        };
        slot.0 += 1;
        let delta = x - slot.1;
        slot.1 += delta / slot.0 as f64;
        slot.2 += delta * (x - slot.1);
    }
    let finish = |(n, _, m2): (usize, f64, f64)| (n > 0).then(|| m2 / n as f64);
    Ok(ModalityVariance {
        visual: finish(acc[0]),
        text: finish(acc[1]),
    })
}

/// Versioned JSON form of an attention matrix.
///
/// `modalities` labels the columns. When `row_modalities` is omitted the rows
/// are taken to be the queries of the same tokens (square self-attention).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub version: u32,
    pub modalities: Vec<TokenModality>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub row_modalities: Option<Vec<TokenModality>>,
    pub rows: Vec<Vec<f64>>,
}

impl AttentionTrace {
    pub fn to_matrix(&self) -> Result<AttentionMatrix> {
        if self.version != TRACE_VERSION {
            return Err(Error::Format(format!(
                "unsupported trace version {} (expected {TRACE_VERSION})",
                self.version
            )));
        }
        let row_modality = match &self.row_modalities {
            Some(labels) => labels.clone(),
            None if self.rows.len() == self.modalities.len() => self.modalities.clone(),
            None => {
                return Err(Error::Format(format!(
                    "{} rows over {} columns need explicit row_modalities",
                    self.rows.len(),
                    self.modalities.len()
                )))
            }
        };
        AttentionMatrix::from_rows(self.rows.clone(), row_modality, self.modalities.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use TokenModality::*;

    fn square(values: Vec<Vec<f64>>, labels: Vec<TokenModality>) -> AttentionMatrix {
        AttentionMatrix::self_attention(values, labels).unwrap()
    }

    #[test]
    fn sparsity_half_zero() {
        let m = square(vec![vec![0.0, 0.5], vec![0.0, 0.5]], vec![Visual, Text]);
        assert_eq!(sparsity_rate(&m, 1e-4).unwrap(), 0.5);
    }

    #[test]
    fn sparsity_threshold_at_max_counts_everything() {
        let m = square(vec![vec![0.3, 0.7], vec![0.9, 0.1]], vec![Visual, Text]);
        assert_eq!(sparsity_rate(&m, 0.9).unwrap(), 1.0);
        assert_eq!(sparsity_rate(&m, f64::INFINITY).unwrap(), 1.0);
    }

    #[test]
    fn sparsity_rejects_empty_and_negative() {
        let m = AttentionMatrix::from_rows(vec![vec![]], vec![Text], vec![Text]).unwrap();
        assert_eq!(sparsity_rate(&m, 1e-4).unwrap_err().code(), "empty-matrix");
        let m = square(vec![vec![1.0]], vec![Text]);
        assert_eq!(sparsity_rate(&m, -1.0).unwrap_err().code(), "invalid-threshold");
    }

    #[test]
    fn ragged_cells_are_absent_not_zero() {
        // causal 2x2: the (0, 1) cell does not exist
        let m = square(vec![vec![1.0], vec![0.0, 1.0]], vec![Visual, Text]);
        assert_eq!(m.cell_count(), 3);
        assert!((sparsity_rate(&m, 1e-4).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn modality_sparsity_splits_columns() {
        let m = AttentionMatrix::from_rows(
            vec![vec![0.0, 0.0, 0.5, 0.5], vec![0.0, 0.0, 0.5, 0.5]],
            vec![Text, Text],
            vec![Visual, Visual, Text, Text],
        )
        .unwrap();
        let s = modality_sparsity(&m, 1e-4).unwrap();
        assert_eq!(s.overall.rate(), 0.5);
        assert_eq!(s.visual.unwrap().rate(), 1.0);
        assert_eq!(s.text.unwrap().rate(), 0.0);
    }

    #[test]
    fn modality_sparsity_all_zero_and_absent() {
        let m = AttentionMatrix::from_rows(
            vec![vec![0.0, 0.0], vec![0.0, 0.0]],
            vec![Text, Text],
            vec![Visual, Text],
        )
        .unwrap();
        let s = modality_sparsity(&m, 1e-4).unwrap();
        assert_eq!(
            (s.overall.rate(), s.visual.unwrap().rate(), s.text.unwrap().rate()),
            (1.0, 1.0, 1.0)
        );

        let only_text = square(vec![vec![1.0]], vec![Text]);
        let s = modality_sparsity(&only_text, 1e-4).unwrap();
        assert!(s.visual.is_none());
        assert!(s.text.is_some());
    }

    #[test]
    fn cumulative_scores_are_column_sums() {
        let m = square(vec![vec![0.2, 0.8], vec![0.6, 0.4]], vec![Visual, Text]);
        let got = cumulative_scores(&m);
        assert!((got[0] - 0.8).abs() < 1e-15 && (got[1] - 1.2).abs() < 1e-15, "{got:?}");
        let single = AttentionMatrix::from_rows(vec![vec![0.25, 0.75]], vec![Text], vec![Visual, Text])
            .unwrap();
        assert_eq!(cumulative_scores(&single), vec![0.25, 0.75]);
    }

    #[test]
    fn variance_by_modality() {
        let v = modality_variance(&[0.0, 2.0, 1.0, 1.0], &[Visual, Visual, Text, Text]).unwrap();
        assert_eq!(v.visual, Some(1.0));
        assert_eq!(v.text, Some(0.0));
        let v = modality_variance(&[3.0, 3.0, 3.0], &[Visual, Visual, Visual]).unwrap();
        assert_eq!(v.visual, Some(0.0));
        assert_eq!(v.text, None);
        assert_eq!(
            modality_variance(&[1.0], &[]).unwrap_err().code(),
            "length-mismatch"
        );
    }

    #[test]
    fn row_validation() {
        assert!(AttentionRow::new(0, vec![0.25; 4]).is_ok());
        assert!(AttentionRow::new(0, vec![0.25; 3]).is_err());
        assert!(AttentionRow::unnormalized(0, vec![-0.1]).is_err());
        assert!(AttentionRow::unnormalized(0, vec![f64::NAN]).is_err());
    }

    #[test]
    fn matrix_rejects_bad_shapes() {
        let r = AttentionMatrix::from_rows(vec![vec![0.5, 0.5, 0.0]], vec![Text], vec![Text, Text]);
        assert!(r.is_err());
        let rows = vec![
            AttentionRow::new(3, vec![1.0]).unwrap(),
            AttentionRow::new(3, vec![1.0]).unwrap(),
        ];
        assert!(AttentionMatrix::new(rows, vec![Text, Text], vec![Text]).is_err());
    }

    #[test]
    fn trace_json_roundtrip() {
        let m = square(vec![vec![1.0], vec![0.3, 0.7]], vec![Visual, Text]);
        let json = serde_json::to_string(&m.to_trace()).unwrap();
        assert!(json.starts_with(r#"{"version":1,"modalities":["visual","text"],"rows""#));
        let back: AttentionTrace = serde_json::from_str(&json).unwrap();
        assert_eq!(back.to_matrix().unwrap(), m);

        let bad = AttentionTrace {
            version: 2,
            ..back
        };
        assert_eq!(bad.to_matrix().unwrap_err().code(), "format-error");
    }
}
