use rand::{Rng, RngCore};

use super::{
    toy_teacher_feedback, IntervalState, LabError, Phi, ToyConfig, ToyFeedback, ToyPolicy,
};

/// Source of feedback after a wrong guess.
pub trait FeedbackChannel {
    fn feedback(
        &mut self,
        target: usize,
        state: IntervalState,
        guess: usize,
        rng: &mut dyn RngCore,
    ) -> Result<ToyFeedback, LabError>;
}

#[derive(Debug, Clone, Copy)]
pub struct TruthfulTeacher {
    pub n: usize,
}

impl FeedbackChannel for TruthfulTeacher {
    fn feedback(
        &mut self,
        target: usize,
        _: IntervalState,
        guess: usize,
        _: &mut dyn RngCore,
    ) -> Result<ToyFeedback, LabError> {
        toy_teacher_feedback(target, guess, self.n)
    }
}

/// Hallucinated feedback sampled from a learned world model.
struct ModelChannel<'a>(&'a Phi);

impl FeedbackChannel for ModelChannel<'_> {
    fn feedback(
        &mut self,
        _: usize,
        state: IntervalState,
        guess: usize,
        rng: &mut dyn RngCore,
    ) -> Result<ToyFeedback, LabError> {
        let probs = self.0.probs(state, guess);
        let u: f64 = rng.gen();
        Ok(if u < probs[0] {
            ToyFeedback::Correct
        } else if u < probs[0] + probs[1] {
            ToyFeedback::Higher
        } else {
            ToyFeedback::Lower
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub enum ToyMode<'a> {
    Didactic,
    SingleTurn,
    /// Feedback comes from the world model; the episode still ends only
    /// when the guess truly matches the target.
    AutodidactUsing(&'a Phi),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyStep {
    pub state: IntervalState,
    pub action: usize,
    /// `None` after a failed final guess in single-turn or autodidact mode.
    pub feedback: Option<ToyFeedback>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyEpisode {
    pub target: usize,
    pub steps: Vec<ToyStep>,
    pub reward: f64,
    pub solved_at: Option<usize>,
    /// True when every recorded feedback came from the truthful teacher.
    pub didactic: bool,
}

/// Draws a uniform target and plays one episode.
pub fn run_toy_episode(
    policy: &dyn ToyPolicy,
    config: &ToyConfig,
    mode: ToyMode<'_>,
    rng: &mut dyn RngCore,
) -> Result<ToyEpisode, LabError> {
    config.validate()?;
    let target = rng.gen_range(0..config.n);
    match mode {
        ToyMode::Didactic => {
            let mut teacher = TruthfulTeacher { n: config.n };
            let mut ep = run_toy_episode_with(
                policy,
                config.n,
                target,
                config.max_turns,
                Some(&mut teacher),
                rng,
            )?;
            // The teacher's reply to a failed final guess is recorded so that
            // world-model data is not thinned out at the last turn.
            if let Some(last) = ep.steps.last_mut() {
                if last.feedback.is_none() {
                    last.feedback = Some(toy_teacher_feedback(target, last.action, config.n)?);
                }
            }
            ep.didactic = true;
            Ok(ep)
        }
        ToyMode::SingleTurn => run_toy_episode_with(policy, config.n, target, 1, None, rng),
        ToyMode::AutodidactUsing(phi) => {
            if phi.n != config.n {
                return Err(LabError::Shape {
                    expected: config.n,
                    got: phi.n,
                });
            }
            let mut channel = ModelChannel(phi);
            run_toy_episode_with(
                policy,
                config.n,
                target,
                config.max_turns,
                Some(&mut channel),
                rng,
            )
        }
    }
}

/// Plays against an explicit channel. The channel is consulted only after a
/// wrong guess that is not the last one; `None` means no feedback at all.
pub fn run_toy_episode_with(
    policy: &dyn ToyPolicy,
    n: usize,
    target: usize,
    max_turns: usize,
    mut channel: Option<&mut dyn FeedbackChannel>,
    rng: &mut dyn RngCore,
) -> Result<ToyEpisode, LabError> {
    if target >= n {
        return Err(LabError::OutOfRange { value: target, n });
    }
    if max_turns == 0 {
        return Err(LabError::ZeroTurns);
    }
    let mut state = IntervalState::full(n);
    let mut steps = Vec::with_capacity(max_turns);
    for t in 1..=max_turns {
        let action = policy.act(state, rng);
        if action >= n {
            return Err(LabError::OutOfRange { value: action, n });
        }
        if action == target {
            steps.push(ToyStep {
                state,
                action,
                feedback: Some(ToyFeedback::Correct),
            });
            return Ok(ToyEpisode {
                target,
                steps,
                reward: 1.0,
                solved_at: Some(t),
                didactic: false,
            });
        }
        let feedback = match channel.as_deref_mut() {
            Some(ch) if t < max_turns => Some(ch.feedback(target, state, action, rng)?),
            _ => None,
        };
        steps.push(ToyStep {
            state,
            action,
            feedback,
        });
        match feedback {
            Some(f) => state = state.update(action, f, n),
            None => break,
        }
    }
    Ok(ToyEpisode {
        target,
        steps,
        reward: 0.0,
        solved_at: None,
        didactic: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lab::{Bisection, Repeat, Theta};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Counting(usize);

    impl FeedbackChannel for Counting {
        fn feedback(
            &mut self,
            t: usize,
            _: IntervalState,
            g: usize,
            _: &mut dyn RngCore,
        ) -> Result<ToyFeedback, LabError> {
            self.0 += 1;
            toy_teacher_feedback(t, g, 8)
        }
    }

    #[test]
    fn bisection_solves_every_target_within_four_turns() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for y in 0..8 {
            let mut teacher = TruthfulTeacher { n: 8 };
            let ep =
                run_toy_episode_with(&Bisection, 8, y, 4, Some(&mut teacher), &mut rng).unwrap();
            assert_eq!(ep.reward, 1.0);
            assert!(ep.solved_at.unwrap() <= 4);
        }
    }

    #[test]
    fn states_follow_feedback() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut teacher = TruthfulTeacher { n: 8 };
        let ep = run_toy_episode_with(&Bisection, 8, 5, 4, Some(&mut teacher), &mut rng).unwrap();
        let states: Vec<_> = ep
            .steps
            .iter()
            .map(|s| (s.state.lo, s.state.hi, s.action))
            .collect();
        assert_eq!(states, vec![(0, 7, 3), (4, 7, 5)]);
        assert_eq!(ep.solved_at, Some(2));
    }

    #[test]
    fn single_turn_never_consults_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut counter = Counting(0);
        for y in 0..8 {
            let ep =
                run_toy_episode_with(&Repeat(2), 8, y, 1, Some(&mut counter), &mut rng).unwrap();
            assert_eq!(ep.steps.len(), 1);
        }
        assert_eq!(counter.0, 0);
    }

    #[test]
    fn channel_not_consulted_after_final_failure() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut counter = Counting(0);
        let ep = run_toy_episode_with(&Repeat(2), 8, 6, 4, Some(&mut counter), &mut rng).unwrap();
        assert_eq!(ep.steps.len(), 4);
        assert_eq!(counter.0, 3);
        assert_eq!(ep.steps[3].feedback, None);
    }

    #[test]
    fn didactic_records_final_feedback_and_rewards_are_binary() {
        let cfg = ToyConfig::new(8, 3, 0).unwrap();
        let theta = Theta::zeros(8);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..500 {
            let ep = run_toy_episode(&theta, &cfg, ToyMode::Didactic, &mut rng).unwrap();
            assert!(ep.reward == 0.0 || ep.reward == 1.0);
            assert_eq!(ep.reward == 1.0, ep.solved_at.is_some());
            assert!(ep.steps.len() <= 3);
            assert!(ep.steps.iter().all(|s| s.feedback.is_some()));
            for s in &ep.steps {
                assert_eq!(
                    s.feedback,
                    Some(toy_teacher_feedback(ep.target, s.action, 8).unwrap())
                );
            }
        }
    }

    #[test]
    fn autodidact_ends_only_on_true_match() {
        let cfg = ToyConfig::new(8, 5, 0).unwrap();
        let phi = Phi::zeros(8);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let ep = run_toy_episode(
                &Theta::zeros(8),
                &cfg,
                ToyMode::AutodidactUsing(&phi),
                &mut rng,
            )
            .unwrap();
            for (i, s) in ep.steps.iter().enumerate() {
                if s.action == ep.target {
                    assert_eq!(i + 1, ep.steps.len());
                    assert_eq!(ep.solved_at, Some(i + 1));
                }
            }
            if ep.solved_at.is_none() {
                assert_eq!(ep.steps.len(), 5);
            }
        }
    }

    #[test]
    fn bad_target_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(run_toy_episode_with(&Bisection, 8, 8, 4, None, &mut rng).is_err());
        assert!(ToyConfig::new(1, 4, 0).is_err());
        assert!(ToyConfig::new(4, 0, 0).is_err());
    }
}
