//! Chat-completion client for remote models.
//!
//! Requests are `{model, messages: [{role, content}], temperature}` POSTed
//! with a bearer key; the reply text is read at a configurable JSON
//! pointer. The HTTP layer sits behind [`ChatTransport`] so tests can
//! capture request bodies.

use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use super::{expect_last, Agent, AgentError};
use crate::dialogue::{DialogueState, Observation, Role};

pub const API_KEY_ENV: &str = "DIDACT_API_KEY";
pub const TEACHER_SYSTEM_PROMPT: &str = include_str!("../../assets/teacher_system_prompt.txt");
pub const STUDENT_SYSTEM_PROMPT: &str = include_str!("../../assets/student_system_prompt.txt");
pub const CRITIQUE_SYSTEM_PROMPT: &str = include_str!("../../assets/critique_system_prompt.txt");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub url: String,
    pub model: String,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    /// JSON pointer to the reply text.
    #[serde(default = "default_reply_pointer")]
    pub reply_pointer: String,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    /// Overrides the bundled teacher prompt; `{privileged}` is substituted.
    #[serde(default)]
    pub teacher_prompt: Option<String>,
}

fn default_temperature() -> f64 {
    0.7
}
fn default_timeout_ms() -> u64 {
    60_000
}
fn default_max_retries() -> u32 {
    2
}
fn default_backoff_ms() -> u64 {
    500
}
fn default_reply_pointer() -> String {
    "/choices/0/message/content".into()
}
fn default_in_flight() -> usize {
    4
}

impl EndpointConfig {
    pub fn new(url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            model: model.into(),
            temperature: default_temperature(),
            timeout_ms: default_timeout_ms(),
            max_retries: default_max_retries(),
            backoff_ms: default_backoff_ms(),
            reply_pointer: default_reply_pointer(),
            max_in_flight: default_in_flight(),
            teacher_prompt: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChatRole {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: ChatRole,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: ChatRole, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpReply {
    pub status: u16,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    #[error("request timed out")]
    Timeout,
    #[error("transport failure: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RemoteError {
    #[error("missing credentials: set {0}")]
    MissingCredentials(&'static str),
    #[error("endpoint URL is empty")]
    MissingEndpoint,
    #[error("HTTP status {status}: {body}")]
    Http { status: u16, body: String },
    #[error("request timed out")]
    Timeout,
    #[error("malformed reply: {0}")]
    Malformed(String),
    #[error("transport failure: {0}")]
    Transport(String),
}

pub trait ChatTransport: Send + Sync {
    fn post(
        &self,
        url: &str,
        api_key: &str,
        body: &Value,
        timeout: Duration,
    ) -> Result<HttpReply, TransportError>;
}

/// Blocking HTTP transport.
#[derive(Debug, Clone, Default)]
pub struct HttpTransport {
    client: reqwest::blocking::Client,
}

impl ChatTransport for HttpTransport {
    fn post(
        &self,
        url: &str,
        api_key: &str,
        body: &Value,
        timeout: Duration,
    ) -> Result<HttpReply, TransportError> {
        let response = self
            .client
            .post(url)
            .bearer_auth(api_key)
            .json(body)
            .timeout(timeout)
            .send()
            .map_err(|e| {
                if e.is_timeout() {
                    TransportError::Timeout
                } else {
                    TransportError::Io(e.to_string())
                }
            })?;
        let status = response.status().as_u16();
        let body = response.text().map_err(|e| {
            if e.is_timeout() {
                TransportError::Timeout
            } else {
                TransportError::Io(e.to_string())
            }
        })?;
        Ok(HttpReply { status, body })
    }
}

#[derive(Debug)]
struct InFlight {
    max: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a InFlight);

impl InFlight {
    fn acquire(&self) -> Permit<'_> {
        let mut active = self.active.lock().unwrap();
        while *active >= self.max {
            active = self.freed.wait(active).unwrap();
        }
        *active += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.active.lock().unwrap() -= 1;
        self.0.freed.notify_one();
    }
}

#[derive(Clone)]
pub struct RemoteChat {
    config: EndpointConfig,
    api_key: String,
    transport: Arc<dyn ChatTransport>,
    limiter: Arc<InFlight>,
}

impl std::fmt::Debug for RemoteChat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteChat")
            .field("config", &self.config)
            .finish_non_exhaustive()
    }
}

impl RemoteChat {
    pub fn new(
        config: EndpointConfig,
        api_key: impl Into<String>,
        transport: Arc<dyn ChatTransport>,
    ) -> Result<Self, RemoteError> {
        let api_key = api_key.into();
        if config.url.trim().is_empty() {
            return Err(RemoteError::MissingEndpoint);
        }
        if api_key.is_empty() {
            return Err(RemoteError::MissingCredentials(API_KEY_ENV));
        }
        let limiter = Arc::new(InFlight {
            max: config.max_in_flight.max(1),
            active: Mutex::new(0),
            freed: Condvar::new(),
        });
        Ok(Self {
            config,
            api_key,
            transport,
            limiter,
        })
    }

    /// HTTP client with the key read from `DIDACT_API_KEY`.
    pub fn from_env(config: EndpointConfig) -> Result<Self, RemoteError> {
        let key = std::env::var(API_KEY_ENV).unwrap_or_default();
        Self::new(config, key, Arc::new(HttpTransport::default()))
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.config
    }

    pub fn request_body(&self, messages: &[ChatMessage]) -> Value {
        json!({
            "model": self.config.model,
            "messages": messages,
            "temperature": self.config.temperature,
        })
    }

    /// One logical request, retried on any failure up to `max_retries`
    /// times with exponential backoff.
    pub fn remote_chat(&self, messages: &[ChatMessage]) -> Result<String, RemoteError> {
        let body = self.request_body(messages);
        let timeout = Duration::from_millis(self.config.timeout_ms);
        let mut attempt = 0;
        loop {
            let result = {
                let _permit = self.limiter.acquire();
                self.transport
                    .post(&self.config.url, &self.api_key, &body, timeout)
            };
            match result
                .map_err(|e| match e {
                    TransportError::Timeout => RemoteError::Timeout,
                    TransportError::Io(msg) => RemoteError::Transport(msg),
                })
                .and_then(|reply| self.parse_reply(reply))
            {
                Ok(text) => return Ok(text),
                Err(e) if attempt >= self.config.max_retries => return Err(e),
                Err(e) => {
                    log::warn!("remote chat attempt {} failed: {e}", attempt + 1);
                    let delay = self.config.backoff_ms.saturating_mul(1 << attempt.min(16));
                    if delay > 0 {
                        std::thread::sleep(Duration::from_millis(delay));
                    }
                    attempt += 1;
                }
            }
        }
    }

    fn parse_reply(&self, reply: HttpReply) -> Result<String, RemoteError> {
        if !(200..300).contains(&reply.status) {
            let mut body = reply.body;
            body.truncate(512);
            return Err(RemoteError::Http {
                status: reply.status,
                body,
            });
        }
        let value: Value =
            serde_json::from_str(&reply.body).map_err(|e| RemoteError::Malformed(e.to_string()))?;
        value
            .pointer(&self.config.reply_pointer)
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| {
                RemoteError::Malformed(format!("no text at {}", self.config.reply_pointer))
            })
    }

    /// Student request: teacher turns become user messages.
    pub fn student_messages(observation: &Observation) -> Vec<ChatMessage> {
        let mut out = vec![ChatMessage::new(
            ChatRole::System,
            STUDENT_SYSTEM_PROMPT.trim(),
        )];
        out.extend(observation.history.iter().map(|u| {
            let role = match u.role {
                Role::Teacher => ChatRole::User,
                Role::Student => ChatRole::Assistant,
            };
            ChatMessage::new(role, u.text.clone())
        }));
        out
    }

    /// Teacher and critique requests: student turns become user messages;
    /// the problem statement is sent as the opening user message.
    fn inverted(system: String, observation: &Observation) -> Vec<ChatMessage> {
        let mut out = vec![ChatMessage::new(ChatRole::System, system)];
        for u in &observation.history {
            let msg = match (u.turn_index, u.role) {
                (0, _) => ChatMessage::new(ChatRole::User, format!("Problem:\n{}", u.text)),
                (_, Role::Student) => ChatMessage::new(ChatRole::User, u.text.clone()),
                (_, Role::Teacher) => ChatMessage::new(ChatRole::Assistant, u.text.clone()),
            };
            out.push(msg);
        }
        out
    }

    pub fn teacher_messages(&self, state: &DialogueState) -> Vec<ChatMessage> {
        let template = self
            .config
            .teacher_prompt
            .as_deref()
            .unwrap_or(TEACHER_SYSTEM_PROMPT);
        let system = template
            .trim()
            .replace("{privileged}", &state.privileged.render());
        Self::inverted(system, &state.observation)
    }

    pub fn critique_messages(observation: &Observation) -> Vec<ChatMessage> {
        Self::inverted(CRITIQUE_SYSTEM_PROMPT.trim().to_string(), observation)
    }
}

impl Agent for RemoteChat {
    fn student_turn(&mut self, observation: &Observation) -> Result<String, AgentError> {
        expect_last(observation, Role::Teacher)?;
        Ok(self.remote_chat(&Self::student_messages(observation))?)
    }

    fn teacher_turn(&mut self, state: &DialogueState) -> Result<String, AgentError> {
        expect_last(&state.observation, Role::Student)?;
        Ok(self.remote_chat(&self.teacher_messages(state))?)
    }

    fn critique_turn(&mut self, observation: &Observation) -> Result<String, AgentError> {
        expect_last(observation, Role::Student)?;
        Ok(self.remote_chat(&Self::critique_messages(observation))?)
    }

    fn judge(&mut self, prompt: &str) -> Result<String, AgentError> {
        Ok(self.remote_chat(&[ChatMessage::new(ChatRole::User, prompt)])?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    /// Answers with the last message's content, or a fixed status.
    struct EchoTransport {
        status: u16,
        attempts: AtomicUsize,
        bodies: Mutex<Vec<Value>>,
    }

    impl EchoTransport {
        fn new(status: u16) -> Arc<Self> {
            Arc::new(Self {
                status,
                attempts: AtomicUsize::new(0),
                bodies: Mutex::new(Vec::new()),
            })
        }
    }

    impl ChatTransport for EchoTransport {
        fn post(
            &self,
            _url: &str,
            _key: &str,
            body: &Value,
            _timeout: Duration,
        ) -> Result<HttpReply, TransportError> {
            self.attempts.fetch_add(1, Ordering::SeqCst);
            self.bodies.lock().unwrap().push(body.clone());
            if self.status != 200 {
                return Ok(HttpReply {
                    status: self.status,
                    body: "boom".into(),
                });
            }
            let last = body["messages"].as_array().unwrap().last().unwrap()["content"].clone();
            let reply = json!({"choices": [{"message": {"content": last}}]});
            Ok(HttpReply {
                status: 200,
                body: reply.to_string(),
            })
        }
    }

    fn client(transport: Arc<dyn ChatTransport>, max_retries: u32) -> RemoteChat {
        let mut cfg = EndpointConfig::new("http://fake", "m");
        cfg.max_retries = max_retries;
        cfg.backoff_ms = 0;
        RemoteChat::new(cfg, "key", transport).unwrap()
    }

    #[test]
    fn echo_round_trip() {
        let t = EchoTransport::new(200);
        let c = client(t.clone(), 2);
        let reply = c
            .remote_chat(&[ChatMessage::new(ChatRole::User, "hello there")])
            .unwrap();
        assert_eq!(reply, "hello there");
        let body = &t.bodies.lock().unwrap()[0];
        assert_eq!(body["model"], "m");
        assert_eq!(body["messages"][0]["role"], "user");
        assert_eq!(body["temperature"], 0.7);
    }

    #[test]
    fn server_error_retried_then_surfaced() {
        let t = EchoTransport::new(500);
        let c = client(t.clone(), 2);
        let err = c
            .remote_chat(&[ChatMessage::new(ChatRole::User, "x")])
            .unwrap_err();
        assert!(matches!(err, RemoteError::Http { status: 500, .. }));
        assert_eq!(t.attempts.load(Ordering::SeqCst), 3);
    }

    struct FixedTransport(Result<HttpReply, TransportError>);

    impl ChatTransport for FixedTransport {
        fn post(
            &self,
            _: &str,
            _: &str,
            _: &Value,
            _: Duration,
        ) -> Result<HttpReply, TransportError> {
            self.0.clone()
        }
    }

    #[test]
    fn distinct_error_kinds() {
        let timeout = client(Arc::new(FixedTransport(Err(TransportError::Timeout))), 0);
        assert_eq!(timeout.remote_chat(&[]).unwrap_err(), RemoteError::Timeout);
        let bad = client(
            Arc::new(FixedTransport(Ok(HttpReply {
                status: 200,
                body: "{}".into(),
            }))),
            0,
        );
        assert!(matches!(
            bad.remote_chat(&[]).unwrap_err(),
            RemoteError::Malformed(_)
        ));
        let junk = client(
            Arc::new(FixedTransport(Ok(HttpReply {
                status: 200,
                body: "not json".into(),
            }))),
            0,
        );
        assert!(matches!(
            junk.remote_chat(&[]).unwrap_err(),
            RemoteError::Malformed(_)
        ));
        let io = client(
            Arc::new(FixedTransport(Err(TransportError::Io("reset".into())))),
            1,
        );
        assert_eq!(
            io.remote_chat(&[]).unwrap_err(),
            RemoteError::Transport("reset".into())
        );
    }

    #[test]
    fn credentials_required() {
        let t: Arc<dyn ChatTransport> = EchoTransport::new(200);
        let err = RemoteChat::new(EndpointConfig::new("http://x", "m"), "", t.clone()).unwrap_err();
        assert_eq!(err, RemoteError::MissingCredentials(API_KEY_ENV));
        let err = RemoteChat::new(EndpointConfig::new("", "m"), "k", t).unwrap_err();
        assert_eq!(err, RemoteError::MissingEndpoint);
    }

    #[test]
    fn role_mapping() {
        use crate::dialogue::{EpisodeConfig, EpisodeRecord, PrivilegedInfo};
        let mut ep = EpisodeRecord::new(
            "p",
            "Q?",
            PrivilegedInfo::GroundTruthAnswer("SENTINEL-42".into()),
            &EpisodeConfig::new(3, 0),
        )
        .unwrap();
        ep.append_turn(Role::Student, "attempt").unwrap();
        let student = RemoteChat::student_messages(&Observation {
            history: ep.utterances[..1].to_vec(),
        });
        assert_eq!(
            student.iter().map(|m| m.role).collect::<Vec<_>>(),
            vec![ChatRole::System, ChatRole::User]
        );

        let c = client(EchoTransport::new(200), 0);
        let teacher = c.teacher_messages(&ep.state());
        assert_eq!(
            teacher.iter().map(|m| m.role).collect::<Vec<_>>(),
            vec![ChatRole::System, ChatRole::User, ChatRole::User]
        );
        assert!(teacher[0].content.contains("SENTINEL-42"));
        assert!(teacher[0]
            .content
            .contains("without revealing the final answer"));
        let critique = RemoteChat::critique_messages(&ep.observation());
        assert!(!serde_json::to_string(&critique)
            .unwrap()
            .contains("SENTINEL-42"));
    }
}
