//! Backends that produce student, teacher, critique and judge utterances.
//!
//! Only [`Agent::teacher_turn`] receives a [`DialogueState`]; every other
//! call sees the public [`Observation`] alone, so a backend cannot leak
//! privileged information into a student or critique request.

pub mod remote;

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dialogue::{DialogueState, Observation, PrivilegedInfo, Role};
pub use remote::{
    ChatMessage, ChatRole, ChatTransport, EndpointConfig, HttpReply, HttpTransport, RemoteChat,
    RemoteError, TransportError, API_KEY_ENV,
};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("scripted reply queue exhausted")]
    ScriptExhausted,
    #[error("precondition violated: {0}")]
    Precondition(&'static str),
    #[error("backend does not support {0}")]
    Unsupported(&'static str),
    #[error(transparent)]
    Remote(#[from] RemoteError),
}

pub trait Agent: Send {
    /// Next student attempt given the public history.
    fn student_turn(&mut self, observation: &Observation) -> Result<String, AgentError>;
    /// Feedback on a failed attempt; the only call that sees privileged info.
    fn teacher_turn(&mut self, state: &DialogueState) -> Result<String, AgentError>;
    /// Self-critique from the public history only.
    fn critique_turn(&mut self, observation: &Observation) -> Result<String, AgentError>;
    /// Free-form completion used by the leakage judge.
    fn judge(&mut self, prompt: &str) -> Result<String, AgentError>;
}

fn expect_last(observation: &Observation, role: Role) -> Result<(), AgentError> {
    match observation.last() {
        Some(u) if u.role == role => Ok(()),
        _ if role == Role::Teacher => Err(AgentError::Precondition(
            "last utterance must be a teacher turn",
        )),
        _ => Err(AgentError::Precondition(
            "last utterance must be a student turn",
        )),
    }
}

/// Replays canned replies in order, whatever the call kind.
#[derive(Debug, Clone, Default)]
pub struct ScriptedAgent {
    replies: VecDeque<String>,
    calls: usize,
    prompts: Vec<String>,
}

impl ScriptedAgent {
    pub fn new<I, S>(replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            replies: replies.into_iter().map(Into::into).collect(),
            calls: 0,
            prompts: Vec::new(),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls
    }

    /// Everything each call was given, rendered as text.
    pub fn prompts(&self) -> &[String] {
        &self.prompts
    }

    fn pop(&mut self, prompt: String) -> Result<String, AgentError> {
        self.calls += 1;
        self.prompts.push(prompt);
        self.replies.pop_front().ok_or(AgentError::ScriptExhausted)
    }
}

fn render_observation(observation: &Observation) -> String {
    serde_json::to_string(observation).expect("observation serializes")
}

impl Agent for ScriptedAgent {
    fn student_turn(&mut self, observation: &Observation) -> Result<String, AgentError> {
        expect_last(observation, Role::Teacher)?;
        self.pop(render_observation(observation))
    }

    fn teacher_turn(&mut self, state: &DialogueState) -> Result<String, AgentError> {
        expect_last(&state.observation, Role::Student)?;
        self.pop(format!(
            "{}\n{}",
            state.privileged.render(),
            render_observation(&state.observation)
        ))
    }

    fn critique_turn(&mut self, observation: &Observation) -> Result<String, AgentError> {
        expect_last(observation, Role::Student)?;
        self.pop(render_observation(observation))
    }

    fn judge(&mut self, prompt: &str) -> Result<String, AgentError> {
        self.pop(prompt.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticStudentParams {
    /// Probability of answering correctly on the first attempt.
    pub initial_accuracy: f64,
    /// Probability of switching to the correct answer after feedback.
    pub plasticity: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SyntheticStudentParams {
    pub fn new(initial_accuracy: f64, plasticity: f64, seed: u64) -> Self {
        Self {
            initial_accuracy,
            plasticity,
            seed,
        }
    }

    fn validate(&self) -> Result<(), AgentError> {
        let ok = |p: f64| (0.0..=1.0).contains(&p);
        if ok(self.initial_accuracy) && ok(self.plasticity) {
            Ok(())
        } else {
            Err(AgentError::Precondition(
                "synthetic student probabilities must lie in [0, 1]",
            ))
        }
    }

    /// Probability of having solved by student turn `t` (1-based).
    pub fn cumulative_solve_probability(&self, t: u32) -> f64 {
        if t == 0 {
            return 0.0;
        }
        1.0 - (1.0 - self.initial_accuracy) * (1.0 - self.plasticity).powi(t as i32 - 1)
    }
}

const STUDENT_CRITIQUE: &str =
    "Looking back at the previous attempt, one of the steps is probably wrong. Re-derive it carefully before answering again.";

/// Simulated student holding an answer key. It either knows the answer,
/// integrates feedback with probability `plasticity`, or repeats its last
/// attempt verbatim.
#[derive(Debug, Clone)]
pub struct SyntheticStudent {
    params: SyntheticStudentParams,
    correct_reply: String,
    rng: ChaCha8Rng,
}

impl SyntheticStudent {
    pub fn new(params: SyntheticStudentParams, answer_key: &str) -> Result<Self, AgentError> {
        params.validate()?;
        if answer_key.trim().is_empty() {
            return Err(AgentError::Precondition(
                "synthetic student needs a non-empty answer key",
            ));
        }
        Ok(Self {
            params,
            correct_reply: format!("FINAL ANSWER: {answer_key}"),
            rng: ChaCha8Rng::seed_from_u64(params.seed),
        })
    }

    /// Builds a student for a ground-truth task.
    pub fn for_task(
        params: SyntheticStudentParams,
        privileged: &PrivilegedInfo,
    ) -> Result<Self, AgentError> {
        match privileged.ground_truth() {
            Some(answer) => Self::new(params, answer),
            None => Err(AgentError::Unsupported(
                "synthetic students on program-output tasks",
            )),
        }
    }

    pub fn params(&self) -> SyntheticStudentParams {
        self.params
    }

    fn wrong_reply(&mut self) -> String {
        let tag: String = (0..6)
            .map(|_| self.rng.gen_range(b'a'..=b'z') as char)
            .collect();
        format!(
            "I worked through the problem and believe this is right.\nFINAL ANSWER: unsure_{tag}"
        )
    }
}

impl Agent for SyntheticStudent {
    fn student_turn(&mut self, observation: &Observation) -> Result<String, AgentError> {
        expect_last(observation, Role::Teacher)?;
        let previous = observation.last_of(Role::Student).map(|u| u.text.clone());
        let reply = match previous {
            None => {
                if self.rng.gen_bool(self.params.initial_accuracy) {
                    self.correct_reply.clone()
                } else {
                    self.wrong_reply()
                }
            }
            Some(prev) if prev == self.correct_reply => prev,
            Some(prev) => {
                if self.rng.gen_bool(self.params.plasticity) {
                    self.correct_reply.clone()
                } else {
                    prev
                }
            }
        };
        Ok(reply)
    }

    fn teacher_turn(&mut self, _state: &DialogueState) -> Result<String, AgentError> {
        Err(AgentError::Unsupported(
            "teacher turns on a synthetic student",
        ))
    }

    fn critique_turn(&mut self, observation: &Observation) -> Result<String, AgentError> {
        expect_last(observation, Role::Student)?;
        Ok(STUDENT_CRITIQUE.to_string())
    }

    fn judge(&mut self, _prompt: &str) -> Result<String, AgentError> {
        Err(AgentError::Unsupported("judging on a synthetic student"))
    }
}

pub const DEFAULT_HINT_TEMPLATE: &str =
    "That is not correct. Revisit the assumptions behind your derivation and check each step before answering again.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTeacherParams {
    /// Probability of appending the raw ground truth to the hint.
    #[serde(default)]
    pub leak_probability: f64,
    #[serde(default = "default_hint")]
    pub hint_template: String,
    #[serde(default)]
    pub seed: u64,
}

fn default_hint() -> String {
    DEFAULT_HINT_TEMPLATE.to_string()
}

impl Default for SyntheticTeacherParams {
    fn default() -> Self {
        Self {
            leak_probability: 0.0,
            hint_template: default_hint(),
            seed: 0,
        }
    }
}

/// Teacher that replies with a fixed hint, leaking with a set probability.
#[derive(Debug, Clone)]
pub struct SyntheticTeacher {
    params: SyntheticTeacherParams,
    rng: ChaCha8Rng,
}

impl SyntheticTeacher {
    pub fn new(params: SyntheticTeacherParams) -> Result<Self, AgentError> {
        if !(0.0..=1.0).contains(&params.leak_probability) {
            return Err(AgentError::Precondition(
                "leak probability must lie in [0, 1]",
            ));
        }
        if params.hint_template.trim().is_empty() {
            return Err(AgentError::Precondition("hint template must not be empty"));
        }
        let rng = ChaCha8Rng::seed_from_u64(params.seed);
        Ok(Self { params, rng })
    }
}

impl Agent for SyntheticTeacher {
    fn student_turn(&mut self, _observation: &Observation) -> Result<String, AgentError> {
        Err(AgentError::Unsupported(
            "student turns on a synthetic teacher",
        ))
    }

    fn teacher_turn(&mut self, state: &DialogueState) -> Result<String, AgentError> {
        expect_last(&state.observation, Role::Student)?;
        let mut text = self.params.hint_template.clone();
        if self.rng.gen_bool(self.params.leak_probability) {
            text.push_str(" The answer is ");
            text.push_str(&state.privileged.secrets().join(", "));
            text.push('.');
        }
        Ok(text)
    }

    fn critique_turn(&mut self, observation: &Observation) -> Result<String, AgentError> {
        expect_last(observation, Role::Student)?;
        Ok(self.params.hint_template.clone())
    }

    fn judge(&mut self, _prompt: &str) -> Result<String, AgentError> {
        Err(AgentError::Unsupported("judging on a synthetic teacher"))
    }
}

/// Closed set of shipped backends.
#[derive(Debug, Clone)]
pub enum AgentBackend {
    Scripted(ScriptedAgent),
    SyntheticStudent(SyntheticStudent),
    SyntheticTeacher(SyntheticTeacher),
    RemoteChat(RemoteChat),
}

impl AgentBackend {
    fn inner(&mut self) -> &mut dyn Agent {
        match self {
            AgentBackend::Scripted(a) => a,
            AgentBackend::SyntheticStudent(a) => a,
            AgentBackend::SyntheticTeacher(a) => a,
            AgentBackend::RemoteChat(a) => a,
        }
    }
}

impl Agent for AgentBackend {
    fn student_turn(&mut self, observation: &Observation) -> Result<String, AgentError> {
        self.inner().student_turn(observation)
    }

    fn teacher_turn(&mut self, state: &DialogueState) -> Result<String, AgentError> {
        self.inner().teacher_turn(state)
    }

    fn critique_turn(&mut self, observation: &Observation) -> Result<String, AgentError> {
        self.inner().critique_turn(observation)
    }

    fn judge(&mut self, prompt: &str) -> Result<String, AgentError> {
        self.inner().judge(prompt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dialogue::{EpisodeConfig, EpisodeRecord};
    use crate::leakage::detect_leakage;

    fn episode(answer: &str) -> EpisodeRecord {
        EpisodeRecord::new(
            "p",
            "Find it.",
            PrivilegedInfo::GroundTruthAnswer(answer.into()),
            &EpisodeConfig::new(5, 0),
        )
        .unwrap()
    }

    fn play_student(student: &mut SyntheticStudent, turns: usize) -> Vec<String> {
        let mut ep = episode("42");
        let mut out = Vec::new();
        for _ in 0..turns {
            let reply = student.student_turn(&ep.observation()).unwrap();
            ep.append_turn(Role::Student, reply.clone()).unwrap();
            ep.append_turn(Role::Teacher, "try again").unwrap();
            out.push(reply);
        }
        out
    }

    #[test]
    fn perfect_student_correct_on_first_turn() {
        for seed in 0..20 {
            let mut s =
                SyntheticStudent::new(SyntheticStudentParams::new(1.0, 0.3, seed), "42").unwrap();
            assert_eq!(play_student(&mut s, 1)[0], "FINAL ANSWER: 42");
        }
    }

    #[test]
    fn rigid_student_repeats_verbatim() {
        let mut s = SyntheticStudent::new(SyntheticStudentParams::new(0.0, 0.0, 7), "42").unwrap();
        let replies = play_student(&mut s, 4);
        assert!(replies.iter().all(|r| r == &replies[0]));
        assert_ne!(replies[0], "FINAL ANSWER: 42");
    }

    #[test]
    fn fully_plastic_student_fixes_on_second_turn() {
        let mut s = SyntheticStudent::new(SyntheticStudentParams::new(0.0, 1.0, 7), "42").unwrap();
        let replies = play_student(&mut s, 2);
        assert_ne!(replies[0], "FINAL ANSWER: 42");
        assert_eq!(replies[1], "FINAL ANSWER: 42");
    }

    #[test]
    fn student_precondition() {
        let mut s = SyntheticStudent::new(SyntheticStudentParams::new(0.5, 0.5, 0), "1").unwrap();
        let mut ep = episode("1");
        ep.append_turn(Role::Student, "x").unwrap();
        assert!(matches!(
            s.student_turn(&ep.observation()),
            Err(AgentError::Precondition(_))
        ));
        assert!(SyntheticStudent::new(SyntheticStudentParams::new(1.5, 0.0, 0), "1").is_err());
    }

    #[test]
    fn closed_form_solve_probability() {
        let p = SyntheticStudentParams::new(0.2, 0.5, 0);
        assert!((p.cumulative_solve_probability(1) - 0.2).abs() < 1e-15);
        assert!((p.cumulative_solve_probability(3) - (1.0 - 0.8 * 0.25)).abs() < 1e-15);
    }

    fn failed_state(answer: &str) -> DialogueState {
        let mut ep = episode(answer);
        ep.append_turn(Role::Student, "FINAL ANSWER: wrong")
            .unwrap();
        ep.state()
    }

    #[test]
    fn honest_teacher_never_leaks() {
        let mut t = SyntheticTeacher::new(SyntheticTeacherParams {
            seed: 3,
            ..Default::default()
        })
        .unwrap();
        let state = failed_state("0.29");
        for _ in 0..100 {
            let text = t.teacher_turn(&state).unwrap();
            assert!(!detect_leakage(&text, &state.privileged).flagged);
        }
    }

    #[test]
    fn leaky_teacher_always_leaks() {
        let params = SyntheticTeacherParams {
            leak_probability: 1.0,
            ..Default::default()
        };
        let mut t = SyntheticTeacher::new(params).unwrap();
        let state = failed_state("0.29");
        for _ in 0..20 {
            assert!(detect_leakage(&t.teacher_turn(&state).unwrap(), &state.privileged).flagged);
        }
    }

    #[test]
    fn scripted_replays_in_order_then_errors() {
        let mut s = ScriptedAgent::new([
            "Your mistake lies in assuming that the constant of integration...",
        ]);
        let state = failed_state("1 + 1/((x-t)**(1/2))");
        let text = s.teacher_turn(&state).unwrap();
        assert!(!detect_leakage(&text, &state.privileged).flagged);
        assert!(matches!(
            s.teacher_turn(&state),
            Err(AgentError::ScriptExhausted)
        ));
        assert_eq!(s.calls(), 2);
    }

    #[test]
    fn scripted_is_deterministic() {
        let state = failed_state("7");
        let run = || {
            let mut s = ScriptedAgent::new(["a", "b", "c"]);
            (0..3)
                .map(|_| s.teacher_turn(&state).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
        assert_eq!(run(), vec!["a", "b", "c"]);
    }
}
