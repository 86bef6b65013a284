//! Conversation state machine for a single didactic episode.
//!
//! An episode starts with the problem statement, recorded as the teacher
//! utterance at index 0, and then alternates student attempts and teacher
//! feedback until the student is verified correct, the attempt budget runs
//! out, or a backend fails.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::leakage::LeakFlag;
use crate::verify::Verdict;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DialogueError {
    #[error("problem text must not be empty")]
    EmptyProblem,
    #[error("utterance text must not be empty")]
    EmptyUtterance,
    #[error("privileged payload must not be empty")]
    EmptyPrivileged,
    #[error("max_turns must be at least 1")]
    ZeroMaxTurns,
    #[error("role alternation violated: {got:?} cannot follow {last:?}")]
    Alternation { last: Role, got: Role },
    #[error("episode already terminated ({0:?})")]
    Terminated(Termination),
    #[error("student attempt budget of {0} exhausted")]
    TurnBudget(u32),
    #[error("verdict recorded out of sequence: {0}")]
    VerdictSequence(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    Teacher,
    Student,
}

impl Role {
    pub fn other(self) -> Role {
        match self {
            Role::Teacher => Role::Student,
            Role::Student => Role::Teacher,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub role: Role,
    pub text: String,
    pub turn_index: u32,
}

/// The public conversation history. Never carries privileged content.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub history: Vec<Utterance>,
}

impl Observation {
    pub fn last(&self) -> Option<&Utterance> {
        self.history.last()
    }

    pub fn student_turns(&self) -> usize {
        self.history
            .iter()
            .filter(|u| u.role == Role::Student)
            .count()
    }

    pub fn last_of(&self, role: Role) -> Option<&Utterance> {
        self.history.iter().rev().find(|u| u.role == role)
    }

    pub fn problem_text(&self) -> &str {
        self.history
            .first()
            .map(|u| u.text.as_str())
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProgramTest {
    pub input: String,
    pub expected: String,
}

/// Teacher-only knowledge about the task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload")]
pub enum PrivilegedInfo {
    GroundTruthAnswer(String),
    ExpectedProgramOutputs(Vec<ProgramTest>),
}

impl PrivilegedInfo {
    pub fn validate(&self) -> Result<(), DialogueError> {
        let empty = match self {
            PrivilegedInfo::GroundTruthAnswer(answer) => answer.trim().is_empty(),
            PrivilegedInfo::ExpectedProgramOutputs(tests) => tests.is_empty(),
        };
        if empty {
            Err(DialogueError::EmptyPrivileged)
        } else {
            Ok(())
        }
    }

    /// Strings whose appearance in public text would reveal the solution.
    pub fn secrets(&self) -> Vec<&str> {
        match self {
            PrivilegedInfo::GroundTruthAnswer(answer) => vec![answer.as_str()],
            PrivilegedInfo::ExpectedProgramOutputs(tests) => {
                tests.iter().map(|t| t.expected.as_str()).collect()
            }
        }
    }

    pub fn ground_truth(&self) -> Option<&str> {
        match self {
            PrivilegedInfo::GroundTruthAnswer(answer) => Some(answer),
            PrivilegedInfo::ExpectedProgramOutputs(_) => None,
        }
    }

    /// Human-readable rendering handed to teacher prompts.
    pub fn render(&self) -> String {
        match self {
            PrivilegedInfo::GroundTruthAnswer(answer) => format!("Ground-truth answer: {answer}"),
            PrivilegedInfo::ExpectedProgramOutputs(tests) => {
                let mut out = String::from("Unit tests (input => expected output):");
                for t in tests {
                    out.push_str(&format!("\n{:?} => {:?}", t.input, t.expected));
                }
                out
            }
        }
    }
}

/// The teacher's view: privileged knowledge plus the public history.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DialogueState {
    pub privileged: PrivilegedInfo,
    pub observation: Observation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    /// Student attempts allowed.
    pub max_turns: u32,
    pub seed: u64,
    #[serde(default)]
    pub generate_feedback_after_final_failure: bool,
}

impl EpisodeConfig {
    pub fn new(max_turns: u32, seed: u64) -> Self {
        Self {
            max_turns,
            seed,
            generate_feedback_after_final_failure: false,
        }
    }

    pub fn validate(&self) -> Result<(), DialogueError> {
        if self.max_turns == 0 {
            return Err(DialogueError::ZeroMaxTurns);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EpisodeMode {
    Didactic,
    #[serde(rename = "single")]
    SingleTurn,
    Autodidact,
}

impl EpisodeMode {
    pub fn slug(self) -> &'static str {
        match self {
            EpisodeMode::Didactic => "didactic",
            EpisodeMode::SingleTurn => "single",
            EpisodeMode::Autodidact => "autodidact",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    Pending,
    /// 1-based student turn at which the verifier accepted the answer.
    SolvedAtTurn(u32),
    ExhaustedTurns,
    BackendError(String),
}

impl Termination {
    pub fn is_terminated(&self) -> bool {
        !matches!(self, Termination::Pending)
    }

    pub fn solved_at(&self) -> Option<u32> {
        match self {
            Termination::SolvedAtTurn(t) => Some(*t),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub problem_id: String,
    pub problem_text: String,
    pub privileged: PrivilegedInfo,
    pub utterances: Vec<Utterance>,
    pub verdicts: Vec<Verdict>,
    /// One flag per teacher utterance after the problem statement.
    pub leak_flags: Vec<LeakFlag>,
    pub reward: u8,
    pub termination: Termination,
    pub mode: EpisodeMode,
    pub max_turns: u32,
    pub seed: u64,
}

impl EpisodeRecord {
    /// Starts an episode whose only utterance is the problem statement.
    pub fn new(
        problem_id: impl Into<String>,
        problem_text: impl Into<String>,
        privileged: PrivilegedInfo,
        config: &EpisodeConfig,
    ) -> Result<Self, DialogueError> {
        let problem_text = problem_text.into();
        if problem_text.trim().is_empty() {
            return Err(DialogueError::EmptyProblem);
        }
        privileged.validate()?;
        config.validate()?;
        Ok(Self {
            problem_id: problem_id.into(),
            utterances: vec![Utterance {
                role: Role::Teacher,
                text: problem_text.clone(),
                turn_index: 0,
            }],
            problem_text,
            privileged,
            verdicts: Vec::new(),
            leak_flags: Vec::new(),
            reward: 0,
            termination: Termination::Pending,
            mode: EpisodeMode::Didactic,
            max_turns: config.max_turns,
            seed: config.seed,
        })
    }

    pub fn with_mode(mut self, mode: EpisodeMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn is_terminated(&self) -> bool {
        self.termination.is_terminated()
    }

    pub fn student_turns(&self) -> usize {
        self.utterances
            .iter()
            .filter(|u| u.role == Role::Student)
            .count()
    }

    /// Teacher utterances after the problem statement.
    pub fn feedback_turns(&self) -> usize {
        self.utterances
            .iter()
            .filter(|u| u.role == Role::Teacher && u.turn_index > 0)
            .count()
    }

    pub fn append_turn(
        &mut self,
        role: Role,
        text: impl Into<String>,
    ) -> Result<&Utterance, DialogueError> {
        if self.is_terminated() {
            return Err(DialogueError::Terminated(self.termination.clone()));
        }
        let text = text.into();
        if text.is_empty() {
            return Err(DialogueError::EmptyUtterance);
        }
        let last = self
            .utterances
            .last()
            .expect("episode always holds the problem statement");
        if last.role == role {
            return Err(DialogueError::Alternation {
                last: last.role,
                got: role,
            });
        }
        if role == Role::Student && self.student_turns() as u32 >= self.max_turns {
            return Err(DialogueError::TurnBudget(self.max_turns));
        }
        let turn_index = last.turn_index + 1;
        self.utterances.push(Utterance {
            role,
            text,
            turn_index,
        });
        Ok(self.utterances.last().unwrap())
    }

    /// Records the verdict for the latest student turn. A correct verdict
    /// ends the episode with reward 1.
    pub fn record_verdict(&mut self, verdict: Verdict) -> Result<(), DialogueError> {
        if self.is_terminated() {
            return Err(DialogueError::Terminated(self.termination.clone()));
        }
        if self.utterances.last().map(|u| u.role) != Some(Role::Student) {
            return Err(DialogueError::VerdictSequence(
                "last utterance is not a student turn",
            ));
        }
        if self.verdicts.len() + 1 != self.student_turns() {
            return Err(DialogueError::VerdictSequence(
                "student turn already judged",
            ));
        }
        let correct = verdict.correct;
        self.verdicts.push(verdict);
        if correct {
            self.reward = 1;
            self.termination = Termination::SolvedAtTurn(self.verdicts.len() as u32);
        }
        Ok(())
    }

    pub fn record_leak_flag(&mut self, flag: LeakFlag) {
        self.leak_flags.push(flag);
    }

    pub fn finish_exhausted(&mut self) -> Result<(), DialogueError> {
        if self.is_terminated() {
            return Err(DialogueError::Terminated(self.termination.clone()));
        }
        self.reward = 0;
        self.termination = Termination::ExhaustedTurns;
        Ok(())
    }

    /// Marks a backend failure. The partial transcript is kept.
    pub fn fail_backend(&mut self, detail: impl Into<String>) {
        self.reward = 0;
        self.termination = Termination::BackendError(detail.into());
    }

    pub fn observation(&self) -> Observation {
        Observation {
            history: self.utterances.clone(),
        }
    }

    pub fn state(&self) -> DialogueState {
        DialogueState {
            privileged: self.privileged.clone(),
            observation: self.observation(),
        }
    }

    /// Checks the record-level invariants; returns the first violation found.
    pub fn check_invariants(&self) -> Result<(), String> {
        match self.utterances.first() {
            Some(u) if u.role == Role::Teacher && u.turn_index == 0 => {}
            _ => return Err("first utterance must be the teacher problem statement".into()),
        }
        for pair in self.utterances.windows(2) {
            if pair[0].role == pair[1].role {
                return Err(format!("roles repeat at index {}", pair[1].turn_index));
            }
            if pair[1].turn_index <= pair[0].turn_index {
                return Err(format!(
                    "turn index not increasing at {}",
                    pair[1].turn_index
                ));
            }
        }
        let students = self.student_turns();
        if students > self.max_turns as usize {
            return Err(format!(
                "{students} student turns exceed max_turns {}",
                self.max_turns
            ));
        }
        if self.reward > 1 {
            return Err(format!("reward {} outside {{0,1}}", self.reward));
        }
        let solved = matches!(self.termination, Termination::SolvedAtTurn(_));
        if (self.reward == 1) != solved {
            return Err("reward = 1 must coincide with SolvedAtTurn".into());
        }
        if self.verdicts.iter().any(|v| v.correct) != solved {
            return Err("a correct verdict must coincide with SolvedAtTurn".into());
        }
        if let Termination::SolvedAtTurn(t) = self.termination {
            let t = t as usize;
            if t == 0 || t > self.verdicts.len() || !self.verdicts[t - 1].correct {
                return Err(format!(
                    "SolvedAtTurn({t}) does not point at a correct verdict"
                ));
            }
            if self.verdicts[..t - 1].iter().any(|v| v.correct) {
                return Err("correct verdict before the solving turn".into());
            }
        }
        match self.termination {
            Termination::BackendError(_) => {
                if self.verdicts.len() > students {
                    return Err("more verdicts than student turns".into());
                }
            }
            _ => {
                if self.verdicts.len() != students {
                    return Err(format!(
                        "{} verdicts for {students} student turns",
                        self.verdicts.len()
                    ));
                }
            }
        }
        if self.leak_flags.len() != self.feedback_turns() {
            return Err("one leak flag per feedback turn expected".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::verify::{Verdict, VerdictMethod};

    fn gt(s: &str) -> PrivilegedInfo {
        PrivilegedInfo::GroundTruthAnswer(s.into())
    }

    fn verdict(correct: bool) -> Verdict {
        Verdict {
            correct,
            method: VerdictMethod::ExactString,
            detail: String::new(),
        }
    }

    #[test]
    fn new_episode_holds_only_problem_statement() {
        let rec =
            EpisodeRecord::new("p1", "Solve x+1=2", gt("1"), &EpisodeConfig::new(3, 0)).unwrap();
        assert_eq!(rec.utterances.len(), 1);
        assert_eq!(rec.utterances[0].role, Role::Teacher);
        assert_eq!(rec.utterances[0].turn_index, 0);
        assert!(rec.verdicts.is_empty());
        assert_eq!(rec.reward, 0);
        assert_eq!(rec.termination, Termination::Pending);
    }

    #[test]
    fn empty_problem_rejected() {
        let err = EpisodeRecord::new("p2", "", gt("1"), &EpisodeConfig::new(3, 0)).unwrap_err();
        assert_eq!(err, DialogueError::EmptyProblem);
    }

    #[test]
    fn program_output_episode_single_turn() {
        let k = PrivilegedInfo::ExpectedProgramOutputs(vec![ProgramTest {
            input: "2".into(),
            expected: "4".into(),
        }]);
        let rec = EpisodeRecord::new("p3", "Q", k, &EpisodeConfig::new(1, 0))
            .unwrap()
            .with_mode(EpisodeMode::SingleTurn);
        assert_eq!(rec.max_turns, 1);
        assert_eq!(rec.mode, EpisodeMode::SingleTurn);
    }

    #[test]
    fn zero_max_turns_rejected() {
        let err = EpisodeRecord::new("p", "Q", gt("1"), &EpisodeConfig::new(0, 0)).unwrap_err();
        assert_eq!(err, DialogueError::ZeroMaxTurns);
    }

    #[test]
    fn append_alternates_and_indexes() {
        let mut rec = EpisodeRecord::new("p", "Q", gt("1"), &EpisodeConfig::new(3, 0)).unwrap();
        assert_eq!(rec.append_turn(Role::Student, "a").unwrap().turn_index, 1);
        let err = rec.append_turn(Role::Student, "b").unwrap_err();
        assert!(matches!(err, DialogueError::Alternation { .. }));
        rec.append_turn(Role::Teacher, "hint").unwrap();
        assert_eq!(rec.observation().history.len(), 3);
    }

    #[test]
    fn teacher_after_problem_rejected() {
        let mut rec = EpisodeRecord::new("p", "Q", gt("1"), &EpisodeConfig::new(3, 0)).unwrap();
        assert!(matches!(
            rec.append_turn(Role::Teacher, "x"),
            Err(DialogueError::Alternation {
                last: Role::Teacher,
                got: Role::Teacher
            })
        ));
    }

    #[test]
    fn append_after_solve_rejected() {
        let mut rec = EpisodeRecord::new("p", "Q", gt("1"), &EpisodeConfig::new(3, 0)).unwrap();
        rec.append_turn(Role::Student, "1").unwrap();
        rec.record_verdict(verdict(true)).unwrap();
        assert_eq!(rec.termination, Termination::SolvedAtTurn(1));
        assert_eq!(rec.reward, 1);
        assert!(matches!(
            rec.append_turn(Role::Teacher, "x"),
            Err(DialogueError::Terminated(_))
        ));
        rec.check_invariants().unwrap();
    }

    #[test]
    fn student_budget_enforced() {
        let mut rec = EpisodeRecord::new("p", "Q", gt("1"), &EpisodeConfig::new(1, 0)).unwrap();
        rec.append_turn(Role::Student, "2").unwrap();
        rec.record_verdict(verdict(false)).unwrap();
        rec.append_turn(Role::Teacher, "no").unwrap();
        assert_eq!(
            rec.append_turn(Role::Student, "3").unwrap_err(),
            DialogueError::TurnBudget(1)
        );
    }

    #[test]
    fn verdict_needs_student_turn() {
        let mut rec = EpisodeRecord::new("p", "Q", gt("1"), &EpisodeConfig::new(2, 0)).unwrap();
        assert!(rec.record_verdict(verdict(false)).is_err());
        rec.append_turn(Role::Student, "2").unwrap();
        rec.record_verdict(verdict(false)).unwrap();
        assert!(rec.record_verdict(verdict(false)).is_err());
    }

    #[test]
    fn observation_and_state_views() {
        let mut rec =
            EpisodeRecord::new("p", "Q", gt("secret-answer"), &EpisodeConfig::new(3, 0)).unwrap();
        assert_eq!(rec.observation().history.len(), 1);
        rec.append_turn(Role::Student, "a").unwrap();
        rec.append_turn(Role::Teacher, "b").unwrap();
        let obs = rec.observation();
        assert_eq!(
            obs.history.iter().map(|u| u.turn_index).collect::<Vec<_>>(),
            vec![0, 1, 2]
        );
        let state = rec.state();
        assert_eq!(state.observation, obs);
        assert_eq!(state.privileged, gt("secret-answer"));
        assert!(!serde_json::to_string(&obs)
            .unwrap()
            .contains("secret-answer"));
    }
}
