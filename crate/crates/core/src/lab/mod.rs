//! Tabular meta-RL lab: a number-guessing game where a teacher who knows
//! the target answers CORRECT, HIGHER or LOWER.
//!
//! The student's observation is folded into the interval of targets still
//! consistent with the feedback, and the policy is a softmax table over
//! (interval, guess). Training on multi-turn episodes teaches the policy to
//! use feedback; training on single attempts cannot.

mod episode;
mod experiment;
mod gradcheck;
mod reinforce;
mod worldmodel;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use episode::{
    run_toy_episode, run_toy_episode_with, FeedbackChannel, ToyEpisode, ToyMode, ToyStep,
    TruthfulTeacher,
};
pub use experiment::{
    evaluate, ordering_experiment, sign_test_p_value, train, train_with, ExperimentConfig,
    OrderingReport, Regime, SeedOutcome, TrainOptions, TrainOutcome, CURVE_CHUNK,
};
pub use gradcheck::{gradcheck, relative_error, GradcheckReport};
pub use reinforce::{reinforce_gradient, reinforce_update, surrogate_objective, Baseline};
pub use worldmodel::{
    train_world_model, worldmodel_gradient, worldmodel_loss, worldmodel_update, Phi,
};

#[derive(Debug, Error, PartialEq)]
pub enum LabError {
    #[error("answer space must have at least 2 values, got {0}")]
    SpaceTooSmall(usize),
    #[error("max_turns must be at least 1")]
    ZeroTurns,
    #[error("value {value} outside answer space 0..{n}")]
    OutOfRange { value: usize, n: usize },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("non-finite gradient at index {index} (state {state}, slot {slot})")]
    NonFinite {
        index: usize,
        state: usize,
        slot: usize,
    },
    #[error("world-model updates need didactic episodes")]
    NotDidactic,
    #[error("parameter shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("episode count must be positive")]
    NoEpisodes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyConfig {
    /// Answers are 0..n.
    pub n: usize,
    pub max_turns: usize,
    pub seed: u64,
}

impl ToyConfig {
    pub fn new(n: usize, max_turns: usize, seed: u64) -> Result<Self, LabError> {
        let cfg = Self { n, max_turns, seed };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), LabError> {
        if self.n < 2 {
            return Err(LabError::SpaceTooSmall(self.n));
        }
        if self.max_turns == 0 {
            return Err(LabError::ZeroTurns);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ToyFeedback {
    Correct,
    Higher,
    Lower,
}

impl ToyFeedback {
    pub const ALL: [ToyFeedback; 3] = [
        ToyFeedback::Correct,
        ToyFeedback::Higher,
        ToyFeedback::Lower,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Teacher utterance rendered around the token.
    pub fn render(self, guess: usize) -> String {
        match self {
            ToyFeedback::Correct => format!("{guess} is correct."),
            ToyFeedback::Higher => format!("{guess} is too low; the answer is HIGHER."),
            ToyFeedback::Lower => format!("{guess} is too high; the answer is LOWER."),
        }
    }

    pub fn parse(text: &str) -> Option<ToyFeedback> {
        if text.contains("HIGHER") {
            Some(ToyFeedback::Higher)
        } else if text.contains("LOWER") {
            Some(ToyFeedback::Lower)
        } else if text.contains("correct") {
            Some(ToyFeedback::Correct)
        } else {
            None
        }
    }
}

/// Truthful teacher: compares the guess with the hidden target.
pub fn toy_teacher_feedback(
    target: usize,
    guess: usize,
    n: usize,
) -> Result<ToyFeedback, LabError> {
    for value in [target, guess] {
        if value >= n {
            return Err(LabError::OutOfRange { value, n });
        }
    }
    Ok(match guess.cmp(&target) {
        std::cmp::Ordering::Equal => ToyFeedback::Correct,
        std::cmp::Ordering::Less => ToyFeedback::Higher,
        std::cmp::Ordering::Greater => ToyFeedback::Lower,
    })
}

/// Inclusive interval of targets consistent with the feedback so far.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct IntervalState {
    pub lo: usize,
    pub hi: usize,
}

pub fn state_count(n: usize) -> usize {
    n * (n + 1) / 2
}

impl IntervalState {
    pub fn full(n: usize) -> Self {
        Self { lo: 0, hi: n - 1 }
    }

    pub fn contains(&self, y: usize) -> bool {
        self.lo <= y && y <= self.hi
    }

    pub fn width(&self) -> usize {
        self.hi - self.lo + 1
    }

    /// Dense index, ordered by `lo` then `hi`.
    pub fn index(&self, n: usize) -> usize {
        self.lo * n - self.lo * self.lo.saturating_sub(1) / 2 + (self.hi - self.lo)
    }

    pub fn from_index(index: usize, n: usize) -> Self {
        let mut rest = index;
        for lo in 0..n {
            let span = n - lo;
            if rest < span {
                return Self { lo, hi: lo + rest };
            }
            rest -= span;
        }
        panic!("state index {index} out of range for n = {n}");
    }

    pub fn all(n: usize) -> impl Iterator<Item = IntervalState> {
        (0..n).flat_map(move |lo| (lo..n).map(move |hi| IntervalState { lo, hi }))
    }

    /// Applies one (guess, feedback) pair. A contradiction resets to the
    /// full range.
    pub fn update(self, guess: usize, feedback: ToyFeedback, n: usize) -> Self {
        let (lo, hi) = match feedback {
            ToyFeedback::Correct => return self,
            ToyFeedback::Higher => (self.lo.max(guess + 1), self.hi as isize),
            ToyFeedback::Lower => (self.lo, (self.hi as isize).min(guess as isize - 1)),
        };
        if hi < 0 || lo > hi as usize || lo >= n {
            log::debug!(
                "contradictory feedback {feedback:?} at guess {guess} in {self:?}; resetting"
            );
            return Self::full(n);
        }
        Self {
            lo,
            hi: hi as usize,
        }
    }
}

pub fn featurize(history: &[(usize, ToyFeedback)], n: usize) -> IntervalState {
    history
        .iter()
        .fold(IntervalState::full(n), |s, &(g, f)| s.update(g, f, n))
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn sample_index(probs: &[f64], rng: &mut dyn RngCore) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs
        .iter()
        .rposition(|&p| p > 0.0)
        .unwrap_or(probs.len() - 1)
}

/// Softmax policy parameters: one row of `n` logits per interval state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theta {
    pub n: usize,
    pub logits: Vec<f64>,
}

impl Theta {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            logits: vec![0.0; state_count(n) * n],
        }
    }

    pub fn row(&self, state: IntervalState) -> &[f64] {
        let i = state.index(self.n) * self.n;
        &self.logits[i..i + self.n]
    }

    pub fn row_mut(&mut self, state: IntervalState) -> &mut [f64] {
        let i = state.index(self.n) * self.n;
        &mut self.logits[i..i + self.n]
    }

    pub fn probs(&self, state: IntervalState) -> Vec<f64> {
        softmax(self.row(state))
    }

    pub fn log_prob(&self, state: IntervalState, action: usize) -> f64 {
        let row = self.row(state);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        row[action] - lse
    }

    /// Samples (or takes the argmax, lowest index on ties) and returns the
    /// action with its exact log-probability.
    pub fn policy_action(
        &self,
        state: IntervalState,
        rng: &mut dyn RngCore,
        greedy: bool,
    ) -> (usize, f64) {
        let action = if greedy {
            let row = self.row(state);
            let mut best = 0;
            for (i, &l) in row.iter().enumerate() {
                if l > row[best] {
                    best = i;
                }
            }
            best
        } else {
            sample_index(&self.probs(state), rng)
        };
        (action, self.log_prob(state, action))
    }
}

/// Anything that picks a guess from the interval state.
pub trait ToyPolicy: Sync {
    fn act(&self, state: IntervalState, rng: &mut dyn RngCore) -> usize;
}

impl ToyPolicy for Theta {
    fn act(&self, state: IntervalState, rng: &mut dyn RngCore) -> usize {
        self.policy_action(state, rng, false).0
    }
}

/// Argmax of a parameter table.
#[derive(Debug, Clone, Copy)]
pub struct Greedy<'a>(pub &'a Theta);

impl ToyPolicy for Greedy<'_> {
    fn act(&self, state: IntervalState, rng: &mut dyn RngCore) -> usize {
        self.0.policy_action(state, rng, true).0
    }
}

/// Guesses the midpoint (rounded down) of the interval.
#[derive(Debug, Clone, Copy, Default)]
pub struct Bisection;

impl ToyPolicy for Bisection {
    fn act(&self, state: IntervalState, _rng: &mut dyn RngCore) -> usize {
        (state.lo + state.hi) / 2
    }
}

/// Ignores feedback and always guesses the same value.
#[derive(Debug, Clone, Copy)]
pub struct Repeat(pub usize);

impl ToyPolicy for Repeat {
    fn act(&self, _state: IntervalState, _rng: &mut dyn RngCore) -> usize {
        self.0
    }
}

/// Uniform over all `n` guesses regardless of state.
#[derive(Debug, Clone, Copy)]
pub struct UniformGuess(pub usize);

impl ToyPolicy for UniformGuess {
    fn act(&self, _state: IntervalState, rng: &mut dyn RngCore) -> usize {
        rng.gen_range(0..self.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn teacher_feedback_cases() {
        assert_eq!(toy_teacher_feedback(5, 5, 8), Ok(ToyFeedback::Correct));
        assert_eq!(toy_teacher_feedback(7, 3, 8), Ok(ToyFeedback::Higher));
        assert_eq!(toy_teacher_feedback(0, 3, 8), Ok(ToyFeedback::Lower));
        assert_eq!(
            toy_teacher_feedback(8, 3, 8),
            Err(LabError::OutOfRange { value: 8, n: 8 })
        );
    }

    #[test]
    fn featurize_cases() {
        assert_eq!(featurize(&[], 8), IntervalState { lo: 0, hi: 7 });
        assert_eq!(
            featurize(&[(3, ToyFeedback::Higher)], 8),
            IntervalState { lo: 4, hi: 7 }
        );
        assert_eq!(
            featurize(&[(3, ToyFeedback::Higher), (6, ToyFeedback::Lower)], 8),
            IntervalState { lo: 4, hi: 5 }
        );
        // contradiction resets
        assert_eq!(
            featurize(&[(5, ToyFeedback::Higher), (4, ToyFeedback::Lower)], 8),
            IntervalState::full(8)
        );
        assert_eq!(
            featurize(&[(0, ToyFeedback::Lower)], 8),
            IntervalState::full(8)
        );
        assert_eq!(
            featurize(&[(7, ToyFeedback::Higher)], 8),
            IntervalState::full(8)
        );
    }

    #[test]
    fn feedback_render_parse() {
        for f in ToyFeedback::ALL {
            assert_eq!(ToyFeedback::parse(&f.render(3)), Some(f));
        }
    }

    #[test]
    fn state_index_is_dense_bijection() {
        for n in 2..12 {
            let all: Vec<_> = IntervalState::all(n).collect();
            assert_eq!(all.len(), state_count(n));
            for (i, s) in all.iter().enumerate() {
                assert_eq!(s.index(n), i);
                assert_eq!(IntervalState::from_index(i, n), *s);
            }
        }
    }

    #[test]
    fn uniform_logits_give_uniform_policy() {
        let theta = Theta::zeros(8);
        let p = theta.probs(IntervalState::full(8));
        assert!(p.iter().all(|&x| (x - 0.125).abs() < 1e-15));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, lp) = theta.policy_action(IntervalState::full(8), &mut rng, false);
        assert!((lp - (0.125f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn dominant_logit_wins() {
        let mut theta = Theta::zeros(5);
        theta.row_mut(IntervalState::full(5))[3] = 200.0;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert_eq!(
                theta
                    .policy_action(IntervalState::full(5), &mut rng, false)
                    .0,
                3
            );
        }
        assert!(theta.log_prob(IntervalState::full(5), 3).abs() < 1e-12);
    }

    #[test]
    fn greedy_breaks_ties_low() {
        let mut theta = Theta::zeros(4);
        let s = IntervalState::full(4);
        theta.row_mut(s).copy_from_slice(&[0.0, 1.0, 1.0, 0.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(theta.policy_action(s, &mut rng, true).0, 1);
        assert_eq!(Greedy(&Theta::zeros(4)).act(s, &mut rng), 0);
    }

    #[test]
    fn softmax_normalized_everywhere() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for n in 2..10 {
            let mut theta = Theta::zeros(n);
            for l in theta.logits.iter_mut() {
                *l = rng.gen_range(-30.0..30.0);
            }
            for s in IntervalState::all(n) {
                let total: f64 = theta.probs(s).iter().sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }
}
