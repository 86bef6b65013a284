//! Subprocess runner for program-output tasks.
//!
//! The candidate program is written to a temporary file and the configured
//! command is run once per test with the test input on stdin. No sandboxing
//! is attempted.

use std::io::{Read, Write};
use std::process::{Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{Verdict, VerdictMethod};
use crate::dialogue::ProgramTest;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunnerConfig {
    /// Command line; the token `{file}` is replaced by the program path.
    pub command: Vec<String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    /// Free-form note on the memory limit expected of the host, if any.
    #[serde(default)]
    pub memory_note: Option<String>,
}

fn default_timeout_ms() -> u64 {
    5_000
}

#[derive(Debug, Clone)]
pub struct ProgramRunner {
    config: RunnerConfig,
}

#[derive(Debug)]
enum RunFailure {
    Timeout,
    Crashed(String),
}

impl ProgramRunner {
    pub fn new(config: RunnerConfig) -> Self {
        Self { config }
    }

    /// Correct iff every test's whitespace-normalized stdout equals the
    /// expected output.
    pub fn check(&self, program: &str, tests: &[ProgramTest]) -> Verdict {
        let verdict = |correct, detail: String| Verdict {
            correct,
            method: VerdictMethod::ProgramOutputs,
            detail,
        };
        if self.config.command.is_empty() {
            return verdict(false, "runner command is empty".into());
        }
        let mut file = match tempfile::NamedTempFile::new() {
            Ok(f) => f,
            Err(e) => return verdict(false, format!("cannot create program file: {e}")),
        };
        if let Err(e) = file
            .write_all(program.as_bytes())
            .and_then(|_| file.flush())
        {
            return verdict(false, format!("cannot write program file: {e}"));
        }
        let path = file.path().to_string_lossy().into_owned();
        for (i, test) in tests.iter().enumerate() {
            match self.run_once(&path, &test.input) {
                Ok(out) => {
                    if normalize_ws(&out) != normalize_ws(&test.expected) {
                        return verdict(
                            false,
                            format!(
                                "test {i}: expected {:?}, got {:?}",
                                test.expected,
                                out.trim()
                            ),
                        );
                    }
                }
                Err(RunFailure::Timeout) => {
                    return verdict(
                        false,
                        format!("test {i}: timed out after {} ms", self.config.timeout_ms),
                    )
                }
                Err(RunFailure::Crashed(why)) => return verdict(false, format!("test {i}: {why}")),
            }
        }
        verdict(true, format!("{} tests passed", tests.len()))
    }

    fn run_once(&self, path: &str, input: &str) -> Result<String, RunFailure> {
        let args: Vec<String> = self
            .config
            .command
            .iter()
            .map(|a| a.replace("{file}", path))
            .collect();
        let mut child = Command::new(&args[0])
            .args(&args[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| RunFailure::Crashed(format!("spawn failed: {e}")))?;
        let mut stdin = child.stdin.take().expect("stdin piped");
        let input = input.to_string();
        let writer = thread::spawn(move || {
            let _ = stdin.write_all(input.as_bytes());
        });
        let mut stdout = child.stdout.take().expect("stdout piped");
        let reader = thread::spawn(move || {
            let mut buf = Vec::new();
            let _ = stdout.read_to_end(&mut buf);
            buf
        });
        let deadline = Instant::now() + Duration::from_millis(self.config.timeout_ms);
        let status = loop {
            match child.try_wait() {
                Ok(Some(status)) => break status,
                Ok(None) if Instant::now() >= deadline => {
                    let _ = child.kill();
                    let _ = child.wait();
                    return Err(RunFailure::Timeout);
                }
                Ok(None) => thread::sleep(Duration::from_millis(2)),
                Err(e) => return Err(RunFailure::Crashed(format!("wait failed: {e}"))),
            }
        };
        let _ = writer.join();
        let out = reader.join().unwrap_or_default();
        if !status.success() {
            return Err(RunFailure::Crashed(format!("exited with {status}")));
        }
        Ok(String::from_utf8_lossy(&out).into_owned())
    }
}

fn normalize_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}
