//! Step-wise dynamic pruning of expansion candidates.
//!
//! Up to the transition step `t0` a candidate survives when its score is at
//! least `lambda` times the mean score of its siblings; after `t0` only the
//! candidates tied with the maximum survive. Scores are self-rewards, which
//! are positive for any realistic log-probability.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PruningError {
    #[error("pruning needs at least one candidate")]
    EmptyCandidateSet,
    #[error("candidate score {0} is not finite")]
    NonFiniteScore(f64),
    #[error("invalid pruning config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruningConfig {
    pub lambda: f64,
    /// Last step of the soft phase.
    pub t0: usize,
    pub enabled: bool,
}

impl Default for PruningConfig {
    fn default() -> Self {
        Self::for_depth(8)
    }
}

impl PruningConfig {
    /// Defaults with `t0` at half the maximum depth.
    pub fn for_depth(max_depth: usize) -> Self {
        Self {
            lambda: 0.9,
            t0: (max_depth / 2).max(1),
            enabled: true,
        }
    }

    /// `lambda = 0` is accepted: it turns the soft phase into a no-op, which
    /// the lambda sweep relies on.
    pub fn validate(&self) -> Result<(), PruningError> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(PruningError::InvalidConfig(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if self.t0 == 0 {
            return Err(PruningError::InvalidConfig("t0 must be at least 1".into()));
        }
        Ok(())
    }
}

/// Scores of all candidates competing at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepScores {
    pub step: usize,
    pub scores: Vec<f64>,
}

impl StepScores {
    pub fn new(step: usize, scores: Vec<f64>) -> Self {
        Self { step, scores }
    }

    pub fn is_soft(&self, config: &PruningConfig) -> bool {
        self.step <= config.t0
    }
}

fn max_of(scores: &[f64]) -> Result<f64, PruningError> {
    if scores.is_empty() {
        return Err(PruningError::EmptyCandidateSet);
    }
    let mut best = f64::NEG_INFINITY;
    for &s in scores {
        if !s.is_finite() {
            return Err(PruningError::NonFiniteScore(s));
        }
        best = best.max(s);
    }
    Ok(best)
}

/// The cut-off score at this step. In the soft phase the value never exceeds
/// the maximum, so the best candidate always passes.
pub fn threshold(scores: &StepScores, config: &PruningConfig) -> Result<f64, PruningError> {
    let max = max_of(&scores.scores)?;
    if scores.is_soft(config) {
        let mean = scores.scores.iter().sum::<f64>() / scores.scores.len() as f64;
        Ok((config.lambda * mean).min(max))
    } else {
        Ok(max)
    }
}

/// Keeps candidates whose score is at least the threshold, in input order.
pub fn filter<T>(candidates: Vec<(T, f64)>, step: usize, config: &PruningConfig) -> Result<Vec<(T, f64)>, PruningError> {
    if candidates.is_empty() {
        return Err(PruningError::EmptyCandidateSet);
    }
    if !config.enabled {
        return Ok(candidates);
    }
    let scores = StepScores::new(step, candidates.iter().map(|(_, s)| *s).collect());
    let tau = threshold(&scores, config)?;
    Ok(candidates.into_iter().filter(|(_, s)| *s >= tau).collect())
}

/// Smallest score, as a multiple of the mean of the other `n - 1` scores,
/// that is guaranteed to survive the soft phase.
pub fn retention_ratio(lambda: f64, n: usize) -> f64 {
    let n = n as f64;
    lambda * (n - 1.0) / (n - lambda)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(lambda: f64) -> PruningConfig {
        PruningConfig {
            lambda,
            t0: 4,
            enabled: true,
        }
    }

    fn kept(scores: &[f64], step: usize, c: &PruningConfig) -> Vec<usize> {
        let cands = scores.iter().copied().enumerate().collect();
        filter(cands, step, c).unwrap().into_iter().map(|(i, _)| i).collect()
    }

    #[test]
    fn threshold_examples() {
        let soft = StepScores::new(1, vec![10.0; 5]);
        assert!((threshold(&soft, &cfg(0.9)).unwrap() - 9.0).abs() < 1e-12);
        let hard = StepScores::new(5, vec![3.0, 7.0, 5.0]);
        assert_eq!(threshold(&hard, &cfg(0.9)).unwrap(), 7.0);
        assert_eq!(
            threshold(&StepScores::new(1, vec![]), &cfg(0.9)),
            Err(PruningError::EmptyCandidateSet)
        );
    }

    #[test]
    fn ratio_for_five_candidates() {
        let r = retention_ratio(0.9, 5);
        assert!((r - 3.6 / 4.1).abs() < 1e-15);
        assert!(r > 0.87 && r < 0.88);
    }

    #[test]
    fn uniform_soft_phase_keeps_all() {
        assert_eq!(kept(&[10.0; 5], 2, &cfg(0.9)), [0, 1, 2, 3, 4]);
    }

    #[test]
    fn hard_phase_keeps_max_ties() {
        assert_eq!(kept(&[3.0, 7.0, 5.0, 7.0], 5, &cfg(0.9)), [1, 3]);
    }

    #[test]
    fn disabled_is_identity() {
        let c = PruningConfig { enabled: false, ..cfg(1.0) };
        assert_eq!(kept(&[1.0, 100.0], 9, &c), [0, 1]);
    }

    #[test]
    fn negative_scores_never_empty() {
        assert_eq!(kept(&[-10.0, -20.0], 1, &cfg(0.5)), [0]);
    }

    #[test]
    fn validation() {
        assert!(cfg(0.0).validate().is_ok());
        assert!(cfg(1.0).validate().is_ok());
        assert!(cfg(1.1).validate().is_err());
        assert!(PruningConfig { t0: 0, ..cfg(0.9) }.validate().is_err());
        assert_eq!(PruningConfig::for_depth(12).t0, 6);
    }

    #[test]
    fn randomized_retention_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c = cfg(0.9);
        for _ in 0..10_000 {
            let scores: Vec<f64> = (0..5).map(|_| rng.gen_range(1.0..100.0)).collect();
            let survivors = kept(&scores, 1, &c);
            assert!(!survivors.is_empty());
            for i in 0..5 {
                let others = (scores.iter().sum::<f64>() - scores[i]) / 4.0;
                if scores[i] >= retention_ratio(0.9, 5) * others * (1.0 + 1e-12) {
                    assert!(survivors.contains(&i), "{scores:?} dropped {i}");
                }
            }
        }
    }

    #[test]
    fn raising_a_survivor_keeps_it() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..2_000 {
            let step = rng.gen_range(1..=8);
            let mut scores: Vec<f64> = (0..5).map(|_| rng.gen_range(50.0..100.0)).collect();
            let before = kept(&scores, step, &cfg(0.9));
            let i = before[rng.gen_range(0..before.len())];
            scores[i] += rng.gen_range(0.0..10.0);
            assert!(kept(&scores, step, &cfg(0.9)).contains(&i));
        }
    }

    #[test]
    fn power_of_two_scaling_keeps_decisions() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..2_000 {
            let step = rng.gen_range(1..=8);
            let scores: Vec<f64> = (0..5).map(|_| rng.gen_range(1.0..100.0)).collect();
            let c = 2f64.powi(rng.gen_range(-8..8));
            let scaled: Vec<f64> = scores.iter().map(|s| s * c).collect();
            assert_eq!(kept(&scores, step, &cfg(0.9)), kept(&scaled, step, &cfg(0.9)));
        }
    }
}
