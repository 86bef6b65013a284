use didact_core::lab::{
    run_toy_episode_with, toy_teacher_feedback, Bisection, FeedbackChannel, IntervalState,
    ToyFeedback, TruthfulTeacher,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn bisection_profile_for_eight_values() {
    let n = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut solved_by = [0usize; 5];
    for target in 0..n {
        let mut teacher = TruthfulTeacher { n };
        let channel: &mut dyn FeedbackChannel = &mut teacher;
        let ep = run_toy_episode_with(&Bisection, n, target, 4, Some(channel), &mut rng).unwrap();
        let t = ep.solved_at.expect("bisection solves within four guesses");
        for slot in &mut solved_by[t..] {
            *slot += 1;
        }
    }
    let cumulative: Vec<f64> = solved_by[1..]
        .iter()
        .map(|&c| c as f64 / n as f64)
        .collect();
    assert_eq!(cumulative, [0.125, 0.375, 0.875, 1.0]);
}

proptest! {
    #[test]
    fn truthful_updates_keep_the_target(n in 2usize..24, seed: u64, guesses in prop::collection::vec(0usize..24, 1..12)) {
        let target = (seed % n as u64) as usize;
        let mut state = IntervalState::full(n);
        for g in guesses.into_iter().map(|g| g % n) {
            let fb = toy_teacher_feedback(target, g, n).unwrap();
            if fb == ToyFeedback::Correct {
                prop_assert_eq!(g, target);
                break;
            }
            let next = state.update(g, fb, n);
            prop_assert!(next.contains(target));
            prop_assert!(next.width() <= state.width());
            if state.contains(g) {
                prop_assert!(!next.contains(g));
            }
            state = next;
        }
    }

    #[test]
    fn state_index_round_trips(n in 1usize..40, lo in 0usize..40, span in 0usize..40) {
        prop_assume!(lo < n);
        let s = IntervalState { lo, hi: (lo + span).min(n - 1) };
        prop_assert_eq!(IntervalState::from_index(s.index(n), n), s);
    }
}
