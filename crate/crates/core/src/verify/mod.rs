//! Final-answer extraction and correctness checking.
//!
//! Ground-truth answers go through a cascade: normalized string match,
//! numeric comparison, then randomized evaluation of both sides as
//! expressions. Program tasks run the answer through an external runner.

pub mod expr;
pub mod runner;

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dialogue::PrivilegedInfo;
pub use expr::{eval_expression, parse_expression, BinOp, EvalError, Expr, Func, ParseError};
pub use runner::{ProgramRunner, RunnerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VerdictMethod {
    ExactString,
    NumericTolerance,
    ExpressionSampling,
    ProgramOutputs,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub correct: bool,
    pub method: VerdictMethod,
    pub detail: String,
}

impl Verdict {
    fn new(correct: bool, method: VerdictMethod, detail: impl Into<String>) -> Self {
        Self {
            correct,
            method,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EquivalencePolicy {
    pub sample_count: usize,
    /// Closed interval used for variables without an explicit domain.
    pub sample_domain: (f64, f64),
    pub variable_domains: BTreeMap<String, (f64, f64)>,
    pub relative_tolerance: f64,
    pub absolute_tolerance: f64,
    pub max_resamples_on_singularity: usize,
    pub seed: u64,
}

impl Default for EquivalencePolicy {
    fn default() -> Self {
        Self {
            sample_count: 32,
            sample_domain: (0.2, 2.0),
            variable_domains: BTreeMap::new(),
            relative_tolerance: 1e-9,
            absolute_tolerance: 1e-12,
            max_resamples_on_singularity: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolicyError {
    #[error("sample_count must be at least 1")]
    NoSamples,
    #[error("tolerances must be positive")]
    Tolerance,
    #[error("sample domain for {0:?} is empty or non-finite")]
    Domain(String),
}

impl EquivalencePolicy {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.sample_count == 0 {
            return Err(PolicyError::NoSamples);
        }
        if !(self.relative_tolerance > 0.0 && self.absolute_tolerance > 0.0) {
            return Err(PolicyError::Tolerance);
        }
        let domains = std::iter::once(("*", &self.sample_domain))
            .chain(self.variable_domains.iter().map(|(k, v)| (k.as_str(), v)));
        for (name, (lo, hi)) in domains {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(PolicyError::Domain(name.to_string()));
            }
        }
        Ok(())
    }

    fn domain_of(&self, var: &str) -> (f64, f64) {
        self.variable_domains
            .get(var)
            .copied()
            .unwrap_or(self.sample_domain)
    }

    pub fn close(&self, a: f64, b: f64) -> bool {
        (a - b).abs() <= self.absolute_tolerance + self.relative_tolerance * a.abs().max(b.abs())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum VerifyError {
    #[error("answer text is empty")]
    EmptyAnswer,
    #[error("no valid sample point found after {0} resamples")]
    Indeterminate(usize),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Pulls the final answer out of a free-form utterance: the last fenced
/// code block, else the text after the last `FINAL ANSWER:` line, else the
/// last non-empty line.
pub fn extract_final_answer(text: &str) -> Result<String, VerifyError> {
    if text.trim().is_empty() {
        return Err(VerifyError::EmptyAnswer);
    }
    if let Some(block) = last_code_block(text) {
        return Ok(block);
    }
    let lines: Vec<&str> = text.lines().collect();
    if let Some(i) = lines
        .iter()
        .rposition(|l| l.trim_start().starts_with("FINAL ANSWER:"))
    {
        let rest = lines[i].trim_start()["FINAL ANSWER:".len()..].trim();
        if !rest.is_empty() {
            return Ok(rest.to_string());
        }
        if let Some(next) = lines[i + 1..]
            .iter()
            .map(|l| l.trim())
            .find(|l| !l.is_empty())
        {
            return Ok(next.to_string());
        }
    }
    let last = lines
        .iter()
        .rev()
        .map(|l| l.trim())
        .find(|l| !l.is_empty())
        .unwrap_or_default();
    Ok(last.to_string())
}

fn last_code_block(text: &str) -> Option<String> {
    let mut last = None;
    let mut open: Option<Vec<&str>> = None;
    for line in text.lines() {
        let t = line.trim();
        match open.as_mut() {
            None if t.starts_with("```") => {
                let inner = &t[3..];
                if inner.len() >= 3 && inner.ends_with("```") {
                    last = Some(inner[..inner.len() - 3].trim().to_string());
                } else {
                    open = Some(Vec::new());
                }
            }
            None => {}
            Some(body) if t == "```" => {
                last = Some(body.join("\n").trim().to_string());
                open = None;
            }
            Some(body) => body.push(line),
        }
    }
    last
}

/// Whitespace stripped, lowercased, `$` removed.
pub fn normalize_answer(s: &str) -> String {
    s.chars()
        .filter(|c| !c.is_whitespace() && *c != '$')
        .flat_map(char::to_lowercase)
        .collect()
}

/// Randomized equivalence test of two expression strings. Inputs that do
/// not parse fall back to normalized string comparison.
pub fn expressions_equivalent(
    a: &str,
    b: &str,
    policy: &EquivalencePolicy,
) -> Result<bool, VerifyError> {
    policy.validate()?;
    let (ea, eb) = match (parse_expression(a), parse_expression(b)) {
        (Ok(ea), Ok(eb)) => (ea, eb),
        _ => return Ok(normalize_answer(a) == normalize_answer(b)),
    };
    let vars = ea.variables();
    if vars != eb.variables() {
        return Ok(false);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
    let mut assignment: HashMap<String, f64> = HashMap::with_capacity(vars.len());
    let samples = if vars.is_empty() {
        1
    } else {
        policy.sample_count
    };
    let mut resamples = 0usize;
    let mut accepted = 0usize;
    while accepted < samples {
        for v in &vars {
            let (lo, hi) = policy.domain_of(v);
            let x = if lo == hi { lo } else { rng.gen_range(lo..=hi) };
            assignment.insert(v.clone(), x);
        }
        match (
            eval_expression(&ea, &assignment),
            eval_expression(&eb, &assignment),
        ) {
            (Ok(va), Ok(vb)) => {
                if !policy.close(va, vb) {
                    return Ok(false);
                }
                accepted += 1;
            }
            _ => {
                resamples += 1;
                if resamples > policy.max_resamples_on_singularity || vars.is_empty() {
                    return Err(VerifyError::Indeterminate(resamples));
                }
            }
        }
    }
    Ok(true)
}

/// Checks an extracted answer against privileged information.
#[derive(Debug, Clone, Default)]
pub struct Verifier {
    pub policy: EquivalencePolicy,
    pub runner: Option<ProgramRunner>,
}

impl Verifier {
    pub fn new(policy: EquivalencePolicy) -> Self {
        Self {
            policy,
            runner: None,
        }
    }

    pub fn with_runner(mut self, runner: ProgramRunner) -> Self {
        self.runner = Some(runner);
        self
    }

    pub fn verify(&self, answer: &str, privileged: &PrivilegedInfo) -> Verdict {
        match privileged {
            PrivilegedInfo::GroundTruthAnswer(truth) => verify_answer(answer, truth, &self.policy),
            PrivilegedInfo::ExpectedProgramOutputs(tests) => match &self.runner {
                Some(runner) => runner.check(answer, tests),
                None => Verdict::new(
                    false,
                    VerdictMethod::ProgramOutputs,
                    "no program runner configured",
                ),
            },
        }
    }
}

/// Verifies with the default (absent) program runner.
pub fn verify(
    answer_text: &str,
    privileged: &PrivilegedInfo,
    policy: &EquivalencePolicy,
) -> Verdict {
    Verifier::new(policy.clone()).verify(answer_text, privileged)
}

fn verify_answer(answer: &str, truth: &str, policy: &EquivalencePolicy) -> Verdict {
    let (na, nt) = (normalize_answer(answer), normalize_answer(truth));
    if !na.is_empty() && na == nt {
        return Verdict::new(true, VerdictMethod::ExactString, "normalized strings match");
    }
    if let (Ok(x), Ok(y)) = (na.parse::<f64>(), nt.parse::<f64>()) {
        if x.is_finite() && y.is_finite() {
            let ok = policy.close(x, y);
            return Verdict::new(ok, VerdictMethod::NumericTolerance, format!("{x} vs {y}"));
        }
    }
    let parsed = parse_expression(answer).is_ok() && parse_expression(truth).is_ok();
    if !parsed {
        return Verdict::new(
            false,
            VerdictMethod::ExactString,
            "strings differ and do not both parse",
        );
    }
    match expressions_equivalent(answer, truth, policy) {
        Ok(true) => Verdict::new(
            true,
            VerdictMethod::ExpressionSampling,
            "equal at all sample points",
        ),
        Ok(false) => Verdict::new(
            false,
            VerdictMethod::ExpressionSampling,
            "differs at a sample point",
        ),
        Err(e) => Verdict::new(false, VerdictMethod::ExpressionSampling, e.to_string()),
    }
}
