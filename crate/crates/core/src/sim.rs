//! Deterministic synthetic multimodal attention streams.
//!
//! Stands in for a real multimodal model. Every token gets a per-layer
//! salience (a logit offset); attention logits are `(salience + noise) /
//! sqrt(head_dim)` and rows are causal softmaxes over them. Prompt tokens are
//! laid out visual first, then text; generated tokens follow.
//!
//! Visual salience is a two-level mixture: a small heavy fraction of tokens
//! sits far above the rest, so most visual keys get negligible attention.
//! Text salience is a single Gaussian. Layer saliences are built from a
//! standard-normal latent per token, mixed across layers as
//! `(rho * z_first + (1 - rho) * fresh) / sqrt(rho^2 + (1 - rho)^2)`, so every
//! layer's latent is standard normal and `rho = 1` repeats the first layer.
//! Per-cell logit noise is mixed across layers the same way.
//!
//! Randomness: prompt saliences and prefill noise come from ChaCha8 streams
//! seeded with `seed`; decode-step noise is a counter-based SplitMix64 hash of
//! `(seed, layer, step, position)`, so a decode row can be evaluated for any
//! subset of live keys without materialising the full row. Restricting the
//! softmax to live keys equals renormalising the full row over them.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionMatrix, AttentionRow, AttentionTrace, TokenModality};
use crate::error::{Error, Result};

/// Identifier written into trace headers.
pub const PRNG_ID: &str = "chacha8+splitmix64";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisualSalience {
    /// Share of visual tokens in the heavy component.
    pub heavy_fraction: f64,
    pub heavy_logit: f64,
    pub low_logit: f64,
    /// Latent spread around either level.
    pub spread: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextSalience {
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StreamConfig {
    pub n_visual: usize,
    pub n_text: usize,
    pub n_layers: usize,
    pub decode_steps: usize,
    pub head_dim: usize,
    pub visual_salience: VisualSalience,
    /// Also used for generated tokens.
    pub text_salience: TextSalience,
    /// Standard deviation of per-cell logit noise before scaling.
    pub noise_std: f64,
    pub rho: f64,
    pub seed: u64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            n_visual: 144,
            n_text: 32,
            n_layers: 4,
            decode_steps: 64,
            head_dim: 64,
            visual_salience: VisualSalience {
                heavy_fraction: 0.1,
                heavy_logit: 48.0,
                low_logit: -24.0,
                spread: 4.0,
            },
            text_salience: TextSalience { mean: 0.0, std: 8.0 },
            noise_std: 8.0,
            rho: 0.9,
            seed: 42,
        }
    }
}

impl StreamConfig {
    pub fn prompt_len(&self) -> usize {
        self.n_visual + self.n_text
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.n_visual == 0 || self.n_text == 0 {
            return bad("n_visual and n_text must be >= 1".into());
        }
        if self.n_layers == 0 {
            return bad("n_layers must be >= 1".into());
        }
        if self.head_dim == 0 {
            return bad("head_dim must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return bad(format!("rho must be in [0, 1], got {}", self.rho));
        }
        let v = &self.visual_salience;
        if !(0.0..=1.0).contains(&v.heavy_fraction) {
            return bad(format!("visual heavy_fraction must be in [0, 1], got {}", v.heavy_fraction));
        }
        let finite = [v.heavy_logit, v.low_logit, v.spread, self.text_salience.mean];
        if finite.iter().any(|x| !x.is_finite()) {
            return bad("salience parameters must be finite".into());
        }
        for (name, s) in [
            ("visual spread", v.spread),
            ("text std", self.text_salience.std),
            ("noise_std", self.noise_std),
        ] {
            if !(s >= 0.0 && s.is_finite()) {
                return bad(format!("{name} must be a finite value >= 0, got {s}"));
            }
        }
        Ok(())
    }

    fn logit_scale(&self) -> f64 {
        1.0 / (self.head_dim as f64).sqrt()
    }
}

/// Where decode rows come from.
#[derive(Clone, Debug, PartialEq)]
enum DecodeSource {
    /// Evaluated on demand from saliences and hashed noise.
    Synthetic,
    /// Full-cache rows per layer and step, e.g. loaded from a file.
    Recorded(Vec<Vec<Vec<f64>>>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedTrace {
    config: StreamConfig,
    prompt_modality: Vec<TokenModality>,
    prefill: Vec<AttentionMatrix>,
    /// Per layer, one salience per position (prompt then generated).
    saliences: Vec<Vec<f64>>,
    decode: DecodeSource,
}

/// Standard-normal latents, one vector per layer, mixed toward the first
/// layer with weight `rho`.
fn layer_latents(n: usize, layers: usize, rho: f64, mut draw: impl FnMut() -> f64) -> Vec<Vec<f64>> {
    let first: Vec<f64> = (0..n).map(|_| draw()).collect();
    let norm = (rho * rho + (1.0 - rho) * (1.0 - rho)).sqrt();
    let mut out = vec![first.clone()];
    for _ in 1..layers {
        out.push(
            first
                .iter()
                .map(|z| (rho * z + (1.0 - rho) * draw()) / norm)
                .collect(),
        );
    }
    out
}

fn visual_saliences(latent: &[f64], dist: &VisualSalience) -> Vec<f64> {
    let heavy = (dist.heavy_fraction * latent.len() as f64).ceil() as usize;
    let mut order: Vec<usize> = (0..latent.len()).collect();
    order.sort_by(|&a, &b| latent[b].total_cmp(&latent[a]).then(a.cmp(&b)));
    let mut s = vec![0.0; latent.len()];
    for (rank, &j) in order.iter().enumerate() {
        let level = if rank < heavy { dist.heavy_logit } else { dist.low_logit };
        s[j] = level + dist.spread * latent[j];
    }
    s
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn unit_open(h: u64) -> f64 {
    ((h >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// Standard normal from a hashed key (Box-Muller).
fn hashed_normal(key: u64) -> f64 {
    let a = splitmix64(key);
    let b = splitmix64(a);
    (-2.0 * unit_open(a).ln()).sqrt() * (std::f64::consts::TAU * unit_open(b)).cos()
}

fn row_key(seed: u64, salt: u64, layer: usize, step: usize) -> u64 {
    splitmix64(splitmix64(splitmix64(seed ^ salt) ^ layer as u64) ^ step as u64)
}

const SALT_DECODE_NOISE: u64 = 0x6465_636f_6465;
const SALT_GENERATED: u64 = 0x6765_6e65_7261;

/// Softmax in place, fixed summation order.
fn softmax(logits: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in logits.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in logits.iter_mut() {
        *x /= sum;
    }
}

/// Builds a full synthetic trace for `cfg`.
pub fn generate_trace(cfg: &StreamConfig) -> Result<GeneratedTrace> {
    cfg.validate()?;
    let n0 = cfg.prompt_len();
    let total = n0 + cfg.decode_steps;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let visual = layer_latents(cfg.n_visual, cfg.n_layers, cfg.rho, || rng.sample(StandardNormal));
    let text = layer_latents(cfg.n_text, cfg.n_layers, cfg.rho, || rng.sample(StandardNormal));

    let ts = &cfg.text_salience;
    let norm = (cfg.rho * cfg.rho + (1.0 - cfg.rho) * (1.0 - cfg.rho)).sqrt();
    let saliences: Vec<Vec<f64>> = (0..cfg.n_layers)
        .map(|layer| {
            let mut s = visual_saliences(&visual[layer], &cfg.visual_salience);
            s.extend(text[layer].iter().map(|z| ts.mean + ts.std * z));
            s.extend((n0..total).map(|pos| {
                let first = hashed_normal(row_key(cfg.seed, SALT_GENERATED, 0, pos));
                let z = if layer == 0 {
                    first
                } else {
                    let fresh = hashed_normal(row_key(cfg.seed, SALT_GENERATED, layer, pos));
                    (cfg.rho * first + (1.0 - cfg.rho) * fresh) / norm
                };
                ts.mean + ts.std * z
            }));
            s
        })
        .collect();

    let mut prompt_modality = vec![TokenModality::Visual; cfg.n_visual];
    prompt_modality.extend(std::iter::repeat_n(TokenModality::Text, cfg.n_text));

    let scale = cfg.logit_scale();
    let prefill = saliences
        .iter()
        .enumerate()
        .map(|(layer, sal)| {
            let mut first_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            first_rng.set_stream(1);
            let mut fresh_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            fresh_rng.set_stream(1 + layer as u64);
            let rows = (0..n0)
                .map(|i| {
                    let mut logits: Vec<f64> = sal[..=i]
                        .iter()
                        .map(|s| {
                            let first: f64 = first_rng.sample(StandardNormal);
                            let z = if layer == 0 {
                                first
                            } else {
                                let fresh: f64 = fresh_rng.sample(StandardNormal);
                                (cfg.rho * first + (1.0 - cfg.rho) * fresh) / norm
                            };
                            (s + cfg.noise_std * z) * scale
                        })
                        .collect();
                    softmax(&mut logits);
                    logits
                })
                .collect();
            AttentionMatrix::self_attention(rows, prompt_modality.clone())
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(GeneratedTrace {
        config: cfg.clone(),
        prompt_modality,
        prefill,
        saliences,
        decode: DecodeSource::Synthetic,
    })
}

impl GeneratedTrace {
    pub fn config(&self) -> &StreamConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.config.seed
    }

    pub fn n_layers(&self) -> usize {
        self.prefill.len()
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_modality.len()
    }

    pub fn decode_steps(&self) -> usize {
        match &self.decode {
            DecodeSource::Synthetic => self.config.decode_steps,
            DecodeSource::Recorded(layers) => layers.first().map_or(0, Vec::len),
        }
    }

    pub fn prompt_modality(&self) -> &[TokenModality] {
        &self.prompt_modality
    }

    pub fn prefill(&self) -> &[AttentionMatrix] {
        &self.prefill
    }

    /// Per-position saliences of one layer (empty for imported traces).
    pub fn saliences(&self, layer: usize) -> &[f64] {
        self.saliences.get(layer).map_or(&[], Vec::as_slice)
    }

    /// Attention of the decode-step-`step` query over the live keys at
    /// `positions` (ascending token positions, all `< prompt_len + step`).
    pub fn decode_row(&self, layer: usize, step: usize, positions: &[usize]) -> AttentionRow {
        debug_assert!(positions.iter().all(|&p| p < self.prompt_len() + step));
        let probs = match &self.decode {
            DecodeSource::Synthetic => {
                let sal = &self.saliences[layer];
                let scale = self.config.logit_scale();
                let rho = self.config.rho;
                let norm = (rho * rho + (1.0 - rho) * (1.0 - rho)).sqrt();
                let first_key = row_key(self.config.seed, SALT_DECODE_NOISE, 0, step);
                let key = row_key(self.config.seed, SALT_DECODE_NOISE, layer, step);
                let mut logits: Vec<f64> = positions
                    .iter()
                    .map(|&p| {
                        let spread = (p as u64).wrapping_mul(0xD6E8_FEB8_6659_FD93);
                        let first = hashed_normal(first_key ^ spread);
                        let z = if layer == 0 {
                            first
                        } else {
                            (rho * first + (1.0 - rho) * hashed_normal(key ^ spread)) / norm
                        };
                        (sal[p] + self.config.noise_std * z) * scale
                    })
                    .collect();
                softmax(&mut logits);
                logits
            }
            DecodeSource::Recorded(layers) => {
                let full = &layers[layer][step];
                let mut probs: Vec<f64> = positions.iter().map(|&p| full[p]).collect();
                let sum: f64 = probs.iter().sum();
                if sum > 0.0 {
                    probs.iter_mut().for_each(|p| *p /= sum);
                } else {
                    let u = 1.0 / probs.len() as f64;
                    probs.iter_mut().for_each(|p| *p = u);
                }
                probs
            }
        };
        AttentionRow { step, probs }
    }

    /// Decode rows over the full, never-evicted cache of one layer.
    pub fn full_decode_rows(&self, layer: usize) -> Vec<AttentionRow> {
        let n0 = self.prompt_len();
        (0..self.decode_steps())
            .map(|t| {
                let positions: Vec<usize> = (0..n0 + t).collect();
                self.decode_row(layer, t, &positions)
            })
            .collect()
    }

    pub fn to_trace_file(&self) -> TraceFile {
        let layers = (0..self.n_layers())
            .map(|layer| LayerTrace {
                prefill: self.prefill[layer].to_trace(),
                decode_rows: self
                    .full_decode_rows(layer)
                    .into_iter()
                    .map(|r| r.probs)
                    .collect(),
            })
            .collect();
        TraceFile {
            seed: self.config.seed,
            prng: PRNG_ID.to_string(),
            config: self.config.clone(),
            layers,
        }
    }

    pub fn from_trace_file(file: &TraceFile) -> Result<Self> {
        if file.layers.is_empty() {
            return Err(Error::Format("trace has no layers".into()));
        }
        let prefill = file
            .layers
            .iter()
            .map(|l| l.prefill.to_matrix())
            .collect::<Result<Vec<_>>>()?;
        let prompt_modality = prefill[0].col_modality().to_vec();
        let n0 = prompt_modality.len();
        let steps = file.layers[0].decode_rows.len();
        for (layer, l) in file.layers.iter().enumerate() {
            if l.prefill.modalities != prompt_modality || l.decode_rows.len() != steps {
                return Err(Error::Format(format!("layer {layer} does not match layer 0")));
            }
            for (t, row) in l.decode_rows.iter().enumerate() {
                if row.len() != n0 + t {
                    return Err(Error::Format(format!(
                        "layer {layer} decode row {t} has {} entries, expected {}",
                        row.len(),
                        n0 + t
                    )));
                }
                AttentionRow::new(t, row.clone())?;
            }
        }
        let mut config = file.config.clone();
        config.seed = file.seed;
        config.n_layers = file.layers.len();
        config.decode_steps = steps;
        Ok(Self {
            config,
            prompt_modality,
            prefill,
            saliences: Vec::new(),
            decode: DecodeSource::Recorded(file.layers.iter().map(|l| l.decode_rows.clone()).collect()),
        })
    }
}

/// Prefill matrix plus full-cache decode rows of one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerTrace {
    #[serde(flatten)]
    pub prefill: AttentionTrace,
    #[serde(default)]
    pub decode_rows: Vec<Vec<f64>>,
}

/// On-disk trace: header plus one attention document per layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceFile {
    pub seed: u64,
    pub prng: String,
    pub config: StreamConfig,
    pub layers: Vec<LayerTrace>,
}

impl TraceFile {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Either a full trace file or a bare single-matrix attention document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TraceInput {
    Full(TraceFile),
    Single(AttentionTrace),
}

impl TraceInput {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Prefill matrix of every layer.
    pub fn layer_matrices(&self) -> Result<Vec<AttentionMatrix>> {
        match self {
            TraceInput::Full(f) => f.layers.iter().map(|l| l.prefill.to_matrix()).collect(),
            TraceInput::Single(t) => Ok(vec![t.to_matrix()?]),
        }
    }
}
