//! Closed-form loss bounds used as oracles against the eviction engine.
//!
//! Decay model: a cached token's score shrinks geometrically,
//! `S(t) = S1 * (1 - lambda)^t`. Evicting it after a delay `t` therefore loses
//! at most `attn_max * (1 - lambda)^t`, which is `<= epsilon` exactly when
//! `t >= ceil(Q)` with `Q = ln(epsilon / attn_max) / ln(1 - lambda)`.
//! Q is a lower bound on the delay: waiting longer only shrinks the loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prune::TextVisualBlock;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayModelParams {
    pub lambda: f64,
    pub attn_max: f64,
    pub epsilon: f64,
    /// Optional per-token initial scores.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s1: Option<Vec<f64>>,
}

impl DecayModelParams {
    pub fn new(lambda: f64, attn_max: f64, epsilon: f64) -> Result<Self> {
        let p = Self {
            lambda,
            attn_max,
            epsilon,
            s1: None,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        check_lambda(self.lambda)?;
        if !(self.attn_max > 0.0 && self.attn_max.is_finite()) {
            return Err(Error::InvalidConfig(format!("attn_max must be > 0, got {}", self.attn_max)));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidConfig(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        Ok(())
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda > 0.0 && lambda < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidDecay(lambda))
    }
}

fn pow_retained(lambda: f64, t: u64) -> f64 {
    // powi needs i32; delays in practice are far below that
    (1.0 - lambda).powi(i32::try_from(t).unwrap_or(i32::MAX))
}

/// `s1 * (1 - lambda)^t`.
pub fn decayed_score(s1: f64, lambda: f64, t: u64) -> Result<f64> {
    check_lambda(lambda)?;
    Ok(s1 * pow_retained(lambda, t))
}

/// `Q = ln(epsilon / attn_max) / ln(1 - lambda)`. Fails with `vacuous-bound`
/// (carrying the negative Q) when `epsilon > attn_max`.
pub fn eviction_threshold(p: &DecayModelParams) -> Result<f64> {
    p.validate()?;
    let q = (p.epsilon / p.attn_max).ln() / (1.0 - p.lambda).ln();
    if p.epsilon > p.attn_max {
        return Err(Error::VacuousBound { q });
    }
    // ln(1) / ln(x) is -0.0
    Ok(q.max(0.0))
}

/// Smallest whole delay at which the worst-case single-token loss is within
/// epsilon.
pub fn min_safe_delay(p: &DecayModelParams) -> Result<u64> {
    match eviction_threshold(p) {
        Ok(q) => Ok(q.ceil() as u64),
        Err(Error::VacuousBound { .. }) => Ok(0),
        Err(e) => Err(e),
    }
}

/// Whether the worst-case loss after `t_evict` steps, `attn_max * (1 - lambda)^t`,
/// is at most epsilon.
pub fn single_token_loss_bound_holds(p: &DecayModelParams, t_evict: u64) -> Result<bool> {
    p.validate()?;
    Ok(p.attn_max * pow_retained(p.lambda, t_evict) <= p.epsilon)
}

/// `attn_max * (1 - lambda) * (1 - (1 - lambda)^k) / lambda`, the sum of the
/// decayed worst-case losses over `k` consecutive evictions.
pub fn geometric_total_loss(p: &DecayModelParams, k: u64) -> Result<f64> {
    p.validate()?;
    if k == 0 {
        return Err(Error::InvalidConfig("geometric_total_loss needs k >= 1".into()));
    }
    let keep = 1.0 - p.lambda;
    Ok(p.attn_max * keep * (1.0 - pow_retained(p.lambda, k)) / p.lambda)
}

/// Sum of the `d` smallest scores.
pub fn lowest_d_sum(final_scores: &[f64], d: usize) -> Result<f64> {
    if d > final_scores.len() {
        return Err(Error::InsufficientEntries {
            k: d,
            len: final_scores.len(),
        });
    }
    let mut sorted = final_scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[..d].iter().sum())
}

/// Whether `observed_loss` is within the sum of the `d` lowest scores.
pub fn corollary_bound(final_scores: &[f64], d: usize, observed_loss: f64) -> Result<bool> {
    Ok(observed_loss <= lowest_d_sum(final_scores, d)?)
}

/// Minimum, over the evicted visual columns, of the largest attention any text
/// query pays that column.
pub fn attn_max_estimate(block: &TextVisualBlock, evicted: &[usize]) -> Result<f64> {
    if evicted.is_empty() {
        return Err(Error::Undefined("attn_max needs at least one evicted token"));
    }
    Ok(evicted
        .iter()
        .map(|&j| block.column_max(j))
        .fold(f64::INFINITY, f64::min))
}

/// One Monte-Carlo instance of the single-token bound.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryCheck {
    pub seed: u64,
    pub lambda: f64,
    pub epsilon: f64,
    pub attn_max: f64,
    pub q: f64,
    pub delay: u64,
    pub loss: f64,
    pub bound_holds: bool,
}

/// Draws `instances` random decay models and checks that a token whose initial
/// score is at most `attn_max` loses no more than epsilon when evicted after
/// `ceil(Q)` or more steps.
pub fn monte_carlo_checks(instances: usize, seed: u64) -> Vec<TheoryCheck> {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    (0..instances as u64)
        .map(|i| {
            let instance_seed = seed.wrapping_add(i);
            let mut rng = ChaCha8Rng::seed_from_u64(instance_seed);
            let lambda = rng.random_range(0.01..0.99);
            let attn_max = rng.random_range(1e-3..=1.0);
            let epsilon = attn_max * rng.random_range(1e-6..=1.0);
            let s1 = attn_max * rng.random_range(0.0..=1.0);
            let p = DecayModelParams::new(lambda, attn_max, epsilon).expect("sampled in range");
            let q = eviction_threshold(&p).expect("epsilon <= attn_max");
            let delay = q.ceil() as u64 + rng.random_range(0..4);
            let loss = decayed_score(s1, lambda, delay).expect("lambda in range");
            TheoryCheck {
                seed: instance_seed,
                lambda,
                epsilon,
                attn_max,
                q,
                delay,
                loss,
                bound_holds: loss <= epsilon,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(lambda: f64, attn_max: f64, epsilon: f64) -> DecayModelParams {
        DecayModelParams::new(lambda, attn_max, epsilon).unwrap()
    }

    #[test]
    fn decay_examples() {
        assert_eq!(decayed_score(0.7, 0.3, 0).unwrap(), 0.7);
        assert_eq!(decayed_score(1.0, 0.5, 3).unwrap(), 0.125);
        // 0.8 * 0.9^10 by repeated multiplication
        let mut expected = 0.8;
        for _ in 0..10 {
            expected *= 0.9;
        }
        let got = decayed_score(0.8, 0.1, 10).unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 0.278_942).abs() < 1e-6);
        for bad in [0.0, 1.0, -0.5, 1.5] {
            assert_eq!(decayed_score(1.0, bad, 1).unwrap_err().code(), "invalid-decay");
        }
    }

    #[test]
    fn threshold_examples() {
        let q = eviction_threshold(&params(0.5, 1.0, 0.01)).unwrap();
        assert!((q - 0.01f64.ln() / 0.5f64.ln()).abs() < 1e-12);
        assert!((q - 6.643_856).abs() < 1e-6);
        assert_eq!(eviction_threshold(&params(0.5, 0.3, 0.3)).unwrap(), 0.0);
        assert!((eviction_threshold(&params(0.9, 1.0, 0.1)).unwrap() - 1.0).abs() < 1e-12);
        match eviction_threshold(&params(0.5, 0.1, 0.2)) {
            Err(Error::VacuousBound { q }) => assert!(q < 0.0),
            other => panic!("expected vacuous bound, got {other:?}"),
        }
    }

    #[test]
    fn single_token_bound_examples() {
        let p = params(0.5, 1.0, 0.01);
        assert!(single_token_loss_bound_holds(&p, 7).unwrap());
        assert!(!single_token_loss_bound_holds(&p, 6).unwrap());
        assert_eq!(min_safe_delay(&p).unwrap(), 7);
        let loose = params(0.5, 1.0, 2.0);
        assert!(single_token_loss_bound_holds(&loose, 0).unwrap());
        assert_eq!(min_safe_delay(&loose).unwrap(), 0);
    }

    #[test]
    fn geometric_examples() {
        assert!((geometric_total_loss(&params(0.5, 1.0, 0.1), 1).unwrap() - 0.5).abs() < 1e-15);
        let far = geometric_total_loss(&params(0.5, 1.0, 0.1), 200).unwrap();
        assert!((far - 1.0).abs() < 1e-12);
        let p = params(0.3, 2.0, 0.1);
        let explicit: f64 = (1..=5).map(|t| 2.0 * 0.7f64.powi(t)).sum();
        assert!((geometric_total_loss(&p, 5).unwrap() - explicit).abs() < 1e-12);
        assert!(geometric_total_loss(&p, 0).is_err());
    }

    #[test]
    fn corollary_examples() {
        assert!(corollary_bound(&[1.0, 2.0, 3.0], 2, 0.0).unwrap());
        assert!(corollary_bound(&[1.0, 2.0, 3.0], 2, 3.0).unwrap());
        assert!(!corollary_bound(&[1.0, 2.0, 3.0], 2, 3.5).unwrap());
        assert!(corollary_bound(&[3.0, 1.0, 2.0], 4, 0.0).is_err());
    }

    #[test]
    fn attn_max_is_min_of_column_max() {
        let b = TextVisualBlock::new(vec![vec![0.3, 0.05, 0.9], vec![0.1, 0.1, 0.0]]).unwrap();
        assert_eq!(attn_max_estimate(&b, &[0]).unwrap(), 0.3);
        assert_eq!(attn_max_estimate(&b, &[0, 1]).unwrap(), 0.1);
        assert_eq!(attn_max_estimate(&b, &[]).unwrap_err().code(), "undefined");
    }

    #[test]
    fn monte_carlo_is_seeded() {
        let a = monte_carlo_checks(20, 9);
        assert_eq!(a, monte_carlo_checks(20, 9));
        assert_ne!(a, monte_carlo_checks(20, 10));
        assert!(a.iter().all(|c| c.bound_holds));
    }
}
