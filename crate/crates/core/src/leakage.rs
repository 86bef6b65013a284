//! Detection of teacher feedback that gives the answer away.
//!
//! Two stages: a cheap string/numeric match run inline on every teacher
//! turn, and an optional judge model queried offline.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::agents::Agent;
use crate::dialogue::PrivilegedInfo;
use crate::verify::normalize_answer;

/// Normalized answers shorter than this are never string-matched.
pub const MIN_MATCH_LEN: usize = 3;

pub const JUDGE_PROMPT_TEMPLATE: &str = include_str!("../assets/judge_prompt.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LeakStage {
    StringMatch,
    Judge,
    None,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeakFlag {
    pub flagged: bool,
    pub stage: LeakStage,
    pub evidence: String,
}

impl LeakFlag {
    pub fn clean() -> Self {
        Self {
            flagged: false,
            stage: LeakStage::None,
            evidence: String::new(),
        }
    }

    fn hit(stage: LeakStage, evidence: impl Into<String>) -> Self {
        Self {
            flagged: true,
            stage,
            evidence: evidence.into(),
        }
    }
}

fn numeric_literal() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?").unwrap())
}

fn numbers_match(a: f64, b: f64) -> bool {
    a == b || (a - b).abs() <= 1e-9 * a.abs().max(b.abs())
}

/// String-stage audit of one teacher utterance against every secret in the
/// privileged information.
pub fn detect_leakage(teacher_text: &str, privileged: &PrivilegedInfo) -> LeakFlag {
    let text = normalize_answer(teacher_text);
    for secret in privileged.secrets() {
        let norm = normalize_answer(secret);
        if norm.chars().count() >= MIN_MATCH_LEN && text.contains(&norm) {
            return LeakFlag::hit(LeakStage::StringMatch, norm);
        }
        if let Ok(value) = norm.parse::<f64>() {
            if !value.is_finite() {
                continue;
            }
            for m in numeric_literal().find_iter(teacher_text) {
                let signed = m.as_str();
                let unsigned = signed.trim_start_matches(['-', '+']);
                for candidate in [signed, unsigned] {
                    if candidate
                        .parse::<f64>()
                        .is_ok_and(|v| numbers_match(v, value))
                    {
                        return LeakFlag::hit(LeakStage::StringMatch, candidate);
                    }
                }
            }
        }
    }
    LeakFlag::clean()
}

pub fn render_judge_prompt(question: &str, ground_truth: &str, teacher_text: &str) -> String {
    JUDGE_PROMPT_TEMPLATE
        .replace("{question}", question)
        .replace("{ground_truth}", ground_truth)
        .replace("{teacher_output}", teacher_text)
}

/// Asks a judge backend whether the teacher revealed the solution. The
/// reply's first token must be YES or NO; anything else, or a backend
/// failure, yields an unflagged result and a warning.
pub fn judge_hook(
    question: &str,
    ground_truth: &str,
    teacher_text: &str,
    backend: &mut dyn Agent,
) -> LeakFlag {
    let prompt = render_judge_prompt(question, ground_truth, teacher_text);
    let reply = match backend.judge(&prompt) {
        Ok(reply) => reply,
        Err(e) => {
            log::warn!("leakage judge unavailable: {e}");
            return LeakFlag {
                flagged: false,
                stage: LeakStage::None,
                evidence: "judge-unavailable".into(),
            };
        }
    };
    let trimmed = reply.trim_start();
    let token_end = trimmed
        .find(|c: char| !c.is_ascii_alphabetic())
        .unwrap_or(trimmed.len());
    let (token, rest) = trimmed.split_at(token_end);
    match token.to_ascii_uppercase().as_str() {
        "YES" => {
            let rest = rest.trim_start_matches(|c: char| {
                c == ':' || c == '-' || c == ',' || c.is_whitespace()
            });
            let evidence = if rest.trim().is_empty() {
                trimmed.trim()
            } else {
                rest.trim()
            };
            LeakFlag::hit(LeakStage::Judge, evidence)
        }
        "NO" => LeakFlag::clean(),
        _ => {
            log::warn!("malformed judge reply {reply:?}; treating as not flagged");
            LeakFlag {
                flagged: false,
                stage: LeakStage::None,
                evidence: "judge-malformed-reply".into(),
            }
        }
    }
}

/// Fraction of flagged results; 0 for an empty list.
pub fn leakage_rate(flags: &[LeakFlag]) -> f64 {
    if flags.is_empty() {
        return 0.0;
    }
    flags.iter().filter(|f| f.flagged).count() as f64 / flags.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::ScriptedAgent;

    fn gt(s: &str) -> PrivilegedInfo {
        PrivilegedInfo::GroundTruthAnswer(s.into())
    }

    #[test]
    fn planted_answer_flagged() {
        let f = detect_leakage("so the pencil costs 0.29 exactly", &gt("0.29"));
        assert!(f.flagged);
        assert_eq!(f.stage, LeakStage::StringMatch);
        assert_eq!(f.evidence, "0.29");
    }

    #[test]
    fn critique_without_answer_passes() {
        let text =
            "Your mistake lies in assuming that the constant of integration immediately implied \
                    that the solution should tend to zero...";
        assert!(!detect_leakage(text, &gt("1 + 1/((x-t)**(1/2))")).flagged);
    }

    #[test]
    fn short_answers_not_string_matched() {
        let f = detect_leakage("think about pi and the circle", &gt("pi"));
        assert_eq!(f, LeakFlag::clean());
    }

    #[test]
    fn short_numeric_answers_use_literal_scan() {
        assert!(detect_leakage("the result should be 7.", &gt("7")).flagged);
        assert!(!detect_leakage("the result should be 17.", &gt("7")).flagged);
        assert!(detect_leakage("it equals 2.50e0", &gt("2.5")).flagged);
        assert!(!detect_leakage("no digits here", &gt("-2")).flagged);
    }

    #[test]
    fn program_outputs_audited() {
        let k = PrivilegedInfo::ExpectedProgramOutputs(vec![crate::dialogue::ProgramTest {
            input: "1 2".into(),
            expected: "hello world".into(),
        }]);
        assert!(detect_leakage("Print HelloWorld", &k).flagged);
        assert!(!detect_leakage("Print a greeting", &k).flagged);
    }

    #[test]
    fn judge_protocol() {
        let mut no = ScriptedAgent::new(["NO"]);
        assert_eq!(judge_hook("q", "0.29", "t", &mut no), LeakFlag::clean());

        let mut yes = ScriptedAgent::new(["YES: reveals 0.29"]);
        let f = judge_hook("q", "0.29", "t", &mut yes);
        assert!(f.flagged);
        assert_eq!(f.stage, LeakStage::Judge);
        assert_eq!(f.evidence, "reveals 0.29");

        let mut bare = ScriptedAgent::new(["yes"]);
        assert_eq!(judge_hook("q", "a", "t", &mut bare).evidence, "yes");

        let mut maybe = ScriptedAgent::new(["maybe"]);
        let f = judge_hook("q", "0.29", "t", &mut maybe);
        assert!(!f.flagged);
        assert_eq!(f.stage, LeakStage::None);
    }

    #[test]
    fn judge_failure_degrades() {
        let mut empty = ScriptedAgent::new(Vec::<String>::new());
        let f = judge_hook("q", "a", "t", &mut empty);
        assert_eq!(
            f,
            LeakFlag {
                flagged: false,
                stage: LeakStage::None,
                evidence: "judge-unavailable".into()
            }
        );
    }

    #[test]
    fn judge_prompt_carries_all_fields() {
        let mut agent = ScriptedAgent::new(["NO"]);
        judge_hook("QUESTION-X", "TRUTH-Y", "TEACHER-Z", &mut agent);
        let prompt = &agent.prompts()[0];
        for needle in ["QUESTION-X", "TRUTH-Y", "TEACHER-Z"] {
            assert!(prompt.contains(needle));
        }
    }

    #[test]
    fn rate_arithmetic() {
        let mut flags = vec![LeakFlag::clean(); 1000];
        for f in flags.iter_mut().take(3) {
            *f = LeakFlag::hit(LeakStage::StringMatch, "x");
        }
        assert_eq!(leakage_rate(&flags), 0.003);
        assert_eq!(leakage_rate(&vec![LeakFlag::clean(); 50]), 0.0);
        assert_eq!(
            leakage_rate(&vec![LeakFlag::hit(LeakStage::Judge, "x"); 4]),
            1.0
        );
        assert_eq!(leakage_rate(&[]), 0.0);
    }

    #[test]
    fn appending_text_never_unflags() {
        let base = "the answer is 12.5 indeed";
        let k = gt("12.5");
        assert!(detect_leakage(base, &k).flagged);
        for suffix in [" more", "9", " -3", "e7", "\n$$"] {
            assert!(
                detect_leakage(&format!("{base}{suffix}"), &k).flagged,
                "{suffix}"
            );
        }
    }
}
