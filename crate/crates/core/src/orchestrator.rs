//! Episode loop (attempt, verify, feedback, retry) and batch evaluation.

use std::collections::HashSet;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agents::{
    Agent, AgentError, RemoteChat, ScriptedAgent, SyntheticStudent, SyntheticStudentParams,
    SyntheticTeacher, SyntheticTeacherParams,
};
use crate::dialogue::{
    DialogueError, EpisodeConfig, EpisodeMode, EpisodeRecord, PrivilegedInfo, ProgramTest, Role,
};
use crate::leakage::detect_leakage;
use crate::verify::{extract_final_answer, Verifier};

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error(transparent)]
    Dialogue(#[from] DialogueError),
    #[error("duplicate problem id {0:?}")]
    DuplicateProblem(String),
    #[error("worker_limit must be at least 1")]
    NoWorkers,
    #[error("problem file line {line}: {reason}")]
    ProblemFile { line: usize, reason: String },
    #[error("cannot read problem file: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot build worker pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Problem {
    pub id: String,
    pub text: String,
    pub privileged: PrivilegedInfo,
}

impl Problem {
    pub fn with_answer(
        id: impl Into<String>,
        text: impl Into<String>,
        answer: impl Into<String>,
    ) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            privileged: PrivilegedInfo::GroundTruthAnswer(answer.into()),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProblemLine {
    id: String,
    problem: String,
    #[serde(default)]
    answer: Option<String>,
    #[serde(default)]
    tests: Option<Vec<ProgramTest>>,
}

/// Parses a JSONL problem set: `{id, problem, answer}` or
/// `{id, problem, tests: [{input, expected}]}` per line.
pub fn parse_problems(text: &str) -> Result<Vec<Problem>, OrchestratorError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| OrchestratorError::ProblemFile {
            line: line_no,
            reason,
        };
        let raw: ProblemLine = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        let privileged = match (raw.answer, raw.tests) {
            (Some(answer), None) => PrivilegedInfo::GroundTruthAnswer(answer),
            (None, Some(tests)) => PrivilegedInfo::ExpectedProgramOutputs(tests),
            _ => return Err(bad("exactly one of `answer` or `tests` is required".into())),
        };
        privileged.validate().map_err(|e| bad(e.to_string()))?;
        if raw.problem.trim().is_empty() {
            return Err(bad("problem text is empty".into()));
        }
        out.push(Problem {
            id: raw.id,
            text: raw.problem,
            privileged,
        });
    }
    Ok(out)
}

pub fn load_problems(path: &Path) -> Result<Vec<Problem>, OrchestratorError> {
    parse_problems(&std::fs::read_to_string(path)?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub problems: Vec<Problem>,
    pub episode_config: EpisodeConfig,
    pub mode: EpisodeMode,
    pub worker_limit: usize,
    pub seed: u64,
}

impl BenchmarkSpec {
    pub fn validate(&self) -> Result<(), OrchestratorError> {
        self.episode_config.validate()?;
        if self.worker_limit == 0 {
            return Err(OrchestratorError::NoWorkers);
        }
        let mut seen = HashSet::new();
        for p in &self.problems {
            if !seen.insert(p.id.as_str()) {
                return Err(OrchestratorError::DuplicateProblem(p.id.clone()));
            }
            if p.text.trim().is_empty() {
                return Err(DialogueError::EmptyProblem.into());
            }
            p.privileged.validate()?;
        }
        Ok(())
    }
}

/// Seed for one episode, independent of batch order and worker count.
pub fn episode_seed(batch_seed: u64, problem_id: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(batch_seed.to_le_bytes());
    hasher.update(problem_id.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Builds fresh backends for each benchmark episode.
pub trait BackendFactory: Sync {
    fn student(&self, problem: &Problem, seed: u64) -> Result<Box<dyn Agent>, AgentError>;
    fn teacher(&self, problem: &Problem, seed: u64) -> Result<Box<dyn Agent>, AgentError>;
}

/// Synthetic student and teacher, reseeded per episode.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticFactory {
    pub student: SyntheticStudentParams,
    pub teacher: SyntheticTeacherParams,
}

impl BackendFactory for SyntheticFactory {
    fn student(&self, problem: &Problem, seed: u64) -> Result<Box<dyn Agent>, AgentError> {
        let params = SyntheticStudentParams {
            seed,
            ..self.student
        };
        Ok(Box::new(SyntheticStudent::for_task(
            params,
            &problem.privileged,
        )?))
    }

    fn teacher(&self, _problem: &Problem, seed: u64) -> Result<Box<dyn Agent>, AgentError> {
        let params = SyntheticTeacherParams {
            seed: seed.rotate_left(32) ^ 0x5eed,
            ..self.teacher.clone()
        };
        Ok(Box::new(SyntheticTeacher::new(params)?))
    }
}

/// Remote chat endpoints shared by every episode. Clones share the
/// transport and the in-flight limit.
#[derive(Debug, Clone)]
pub struct RemoteFactory {
    pub student: RemoteChat,
    pub teacher: RemoteChat,
}

impl BackendFactory for RemoteFactory {
    fn student(&self, _problem: &Problem, _seed: u64) -> Result<Box<dyn Agent>, AgentError> {
        Ok(Box::new(self.student.clone()))
    }

    fn teacher(&self, _problem: &Problem, _seed: u64) -> Result<Box<dyn Agent>, AgentError> {
        Ok(Box::new(self.teacher.clone()))
    }
}

/// The same canned replies for every episode.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ScriptedFactory {
    pub student: Vec<String>,
    pub teacher: Vec<String>,
}

impl BackendFactory for ScriptedFactory {
    fn student(&self, _problem: &Problem, _seed: u64) -> Result<Box<dyn Agent>, AgentError> {
        Ok(Box::new(ScriptedAgent::new(self.student.clone())))
    }

    fn teacher(&self, _problem: &Problem, _seed: u64) -> Result<Box<dyn Agent>, AgentError> {
        Ok(Box::new(ScriptedAgent::new(self.teacher.clone())))
    }
}

enum Feedback<'a> {
    Teacher(&'a mut dyn Agent),
    SelfCritique,
    Never,
}

#[derive(Debug, Clone, Default)]
pub struct Orchestrator {
    pub verifier: Verifier,
}

impl Orchestrator {
    pub fn new(verifier: Verifier) -> Self {
        Self { verifier }
    }

    /// Didactic loop: the teacher sees privileged info and comments on each
    /// failed attempt.
    pub fn run_episode(
        &self,
        problem: &Problem,
        student: &mut dyn Agent,
        teacher: &mut dyn Agent,
        config: &EpisodeConfig,
    ) -> Result<EpisodeRecord, OrchestratorError> {
        self.drive(
            problem,
            config,
            EpisodeMode::Didactic,
            student,
            Feedback::Teacher(teacher),
        )
    }

    /// One attempt, no feedback.
    pub fn run_single_turn(
        &self,
        problem: &Problem,
        student: &mut dyn Agent,
        config: &EpisodeConfig,
    ) -> Result<EpisodeRecord, OrchestratorError> {
        let config = EpisodeConfig {
            max_turns: 1,
            generate_feedback_after_final_failure: false,
            ..config.clone()
        };
        self.drive(
            problem,
            &config,
            EpisodeMode::SingleTurn,
            student,
            Feedback::Never,
        )
    }

    /// Self-play: the model critiques its own attempts from the public
    /// history. Privileged info is used only to score.
    pub fn run_autodidact(
        &self,
        problem: &Problem,
        model: &mut dyn Agent,
        config: &EpisodeConfig,
    ) -> Result<EpisodeRecord, OrchestratorError> {
        self.drive(
            problem,
            config,
            EpisodeMode::Autodidact,
            model,
            Feedback::SelfCritique,
        )
    }

    fn drive(
        &self,
        problem: &Problem,
        config: &EpisodeConfig,
        mode: EpisodeMode,
        student: &mut dyn Agent,
        mut feedback: Feedback<'_>,
    ) -> Result<EpisodeRecord, OrchestratorError> {
        let mut rec = EpisodeRecord::new(
            &problem.id,
            &problem.text,
            problem.privileged.clone(),
            config,
        )?
        .with_mode(mode);
        loop {
            let reply = match student.student_turn(&rec.observation()) {
                Ok(reply) => reply,
                Err(e) => {
                    rec.fail_backend(format!("student: {e}"));
                    break;
                }
            };
            if let Err(e) = rec.append_turn(Role::Student, reply.as_str()) {
                rec.fail_backend(format!("student reply rejected: {e}"));
                break;
            }
            let answer = extract_final_answer(&reply).unwrap_or_default();
            let verdict = self.verifier.verify(&answer, &rec.privileged);
            rec.record_verdict(verdict)?;
            if rec.is_terminated() {
                break;
            }
            let final_attempt = rec.student_turns() as u32 >= config.max_turns;
            let wants_feedback = !final_attempt || config.generate_feedback_after_final_failure;
            if wants_feedback {
                let text = match &mut feedback {
                    Feedback::Teacher(teacher) => teacher
                        .teacher_turn(&rec.state())
                        .map_err(|e| format!("teacher: {e}")),
                    Feedback::SelfCritique => student
                        .critique_turn(&rec.observation())
                        .map_err(|e| format!("critique: {e}")),
                    Feedback::Never => Err(String::new()),
                };
                match text {
                    Ok(text) => {
                        let flag = detect_leakage(&text, &rec.privileged);
                        if let Err(e) = rec.append_turn(Role::Teacher, text) {
                            rec.fail_backend(format!("feedback rejected: {e}"));
                            break;
                        }
                        rec.record_leak_flag(flag);
                    }
                    Err(why) if !why.is_empty() => {
                        rec.fail_backend(why);
                        break;
                    }
                    Err(_) => {}
                }
            }
            if final_attempt {
                rec.finish_exhausted()?;
                break;
            }
        }
        Ok(rec)
    }

    /// Runs every problem once. Records come back in problem order and are
    /// identical for any worker count.
    pub fn run_benchmark(
        &self,
        spec: &BenchmarkSpec,
        factory: &dyn BackendFactory,
    ) -> Result<Vec<EpisodeRecord>, OrchestratorError> {
        spec.validate()?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(spec.worker_limit)
            .build()
            .map_err(|e| OrchestratorError::Pool(e.to_string()))?;
        pool.install(|| {
            spec.problems
                .par_iter()
                .map(|problem| self.benchmark_episode(spec, problem, factory))
                .collect()
        })
    }

    fn benchmark_episode(
        &self,
        spec: &BenchmarkSpec,
        problem: &Problem,
        factory: &dyn BackendFactory,
    ) -> Result<EpisodeRecord, OrchestratorError> {
        let seed = episode_seed(spec.seed, &problem.id);
        let config = EpisodeConfig {
            seed,
            ..spec.episode_config.clone()
        };
        let setup_failure = |e: AgentError| -> Result<EpisodeRecord, OrchestratorError> {
            let mut rec = EpisodeRecord::new(
                &problem.id,
                &problem.text,
                problem.privileged.clone(),
                &config,
            )?
            .with_mode(spec.mode);
            rec.fail_backend(format!("backend setup: {e}"));
            Ok(rec)
        };
        let mut student = match factory.student(problem, seed) {
            Ok(s) => s,
            Err(e) => return setup_failure(e),
        };
        match spec.mode {
            EpisodeMode::Didactic => {
                let mut teacher = match factory.teacher(problem, seed) {
                    Ok(t) => t,
                    Err(e) => return setup_failure(e),
                };
                self.run_episode(problem, student.as_mut(), teacher.as_mut(), &config)
            }
            EpisodeMode::SingleTurn => self.run_single_turn(problem, student.as_mut(), &config),
            EpisodeMode::Autodidact => self.run_autodidact(problem, student.as_mut(), &config),
        }
    }
}
