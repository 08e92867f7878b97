//! Completion backends behind one interface, with exact call accounting.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const DEFAULT_RETRIES: u32 = 2;
pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;
pub const DEFAULT_MAX_RESPONSE_CHARS: usize = 64 * 1024;
pub const CODEGEN_TEMPERATURE: f64 = 0.2;
pub const ROWWISE_TEMPERATURE: f64 = 0.0;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("backend returned an unusable response: {0}")]
    BadResponse(String),
    #[error("replay fixture exhausted")]
    Exhausted,
    #[error("no scripted rule matches the prompt")]
    NoRule,
}

impl BackendError {
    fn is_transient(&self) -> bool {
        matches!(self, BackendError::Transport(_))
    }
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("completion `{tag}` failed after {attempts} attempt(s): {source}")]
    Backend {
        tag: String,
        attempts: u32,
        #[source]
        source: BackendError,
    },
    #[error("empty prompt for `{0}`")]
    EmptyPrompt(String),
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("environment variable `{0}` holding the model credential is not set")]
    MissingCredential(String),
    #[error("backend setting `{0}` is required")]
    MissingSetting(&'static str),
    #[error("malformed fixture {path}: {message}")]
    MalformedFixture { path: String, message: String },
    #[error("unknown backend kind `{0}` (expected http, replay or scripted)")]
    UnknownKind(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub max_output_tokens: usize,
    pub temperature: f64,
    /// Audit label, e.g. `fold2/iter1/row_alone`.
    pub tag: String,
}

impl CompletionRequest {
    pub fn new(prompt: impl Into<String>, temperature: f64, tag: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            max_output_tokens: 1024,
            temperature,
            tag: tag.into(),
        }
    }

    pub fn digest(&self) -> String {
        digest(&self.prompt)
    }
}

pub fn digest(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

pub trait CompletionBackend: Send + Sync {
    fn complete(&self, req: &CompletionRequest) -> Result<String, BackendError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub tag: String,
    pub request_digest: String,
    pub response_digest: Option<String>,
    pub latency_ms: u64,
    pub truncated: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CallLedger {
    pub total_calls: u64,
    pub per_tag: BTreeMap<String, u64>,
    pub transcript: Vec<TranscriptEntry>,
}

impl CallLedger {
    fn record(&mut self, entry: TranscriptEntry) {
        self.total_calls += 1;
        *self.per_tag.entry(entry.tag.clone()).or_default() += 1;
        self.transcript.push(entry);
    }
}

/// Replay fixture record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub digest: Option<String>,
    pub response: String,
}

struct Limiter {
    in_flight: Mutex<usize>,
    freed: Condvar,
    max: usize,
}

impl Limiter {
    fn acquire(&self) -> LimiterGuard<'_> {
        let mut n = self.in_flight.lock().expect("limiter poisoned");
        while *n >= self.max {
            n = self.freed.wait(n).expect("limiter poisoned");
        }
        *n += 1;
        LimiterGuard(self)
    }
}

struct LimiterGuard<'a>(&'a Limiter);

impl Drop for LimiterGuard<'_> {
    fn drop(&mut self) {
        let mut n = self.0.in_flight.lock().expect("limiter poisoned");
        *n -= 1;
        self.0.freed.notify_one();
    }
}

/// Shared entry point for every model call in a run.
pub struct ModelGateway {
    backend: Box<dyn CompletionBackend>,
    ledger: Mutex<CallLedger>,
    recorded: Mutex<Vec<FixtureRecord>>,
    limiter: Limiter,
    retries: u32,
    backoff: Duration,
    max_response_chars: usize,
}

impl ModelGateway {
    pub fn new(backend: Box<dyn CompletionBackend>) -> Self {
        Self {
            backend,
            ledger: Mutex::new(CallLedger::default()),
            recorded: Mutex::new(Vec::new()),
            limiter: Limiter {
                in_flight: Mutex::new(0),
                freed: Condvar::new(),
                max: DEFAULT_MAX_IN_FLIGHT,
            },
            retries: DEFAULT_RETRIES,
            backoff: Duration::from_millis(200),
            max_response_chars: DEFAULT_MAX_RESPONSE_CHARS,
        }
    }

    pub fn with_retries(mut self, retries: u32, backoff: Duration) -> Self {
        self.retries = retries;
        self.backoff = backoff;
        self
    }

    pub fn with_max_in_flight(mut self, max: usize) -> Self {
        self.limiter.max = max.max(1);
        self
    }

    pub fn with_max_response_chars(mut self, max: usize) -> Self {
        self.max_response_chars = max;
        self
    }

    /// One ledger entry per call, whether or not the backend eventually succeeds.
    pub fn complete(&self, req: &CompletionRequest) -> Result<String, GatewayError> {
        if req.prompt.is_empty() {
            return Err(GatewayError::EmptyPrompt(req.tag.clone()));
        }
        let _permit = self.limiter.acquire();
        let started = Instant::now();
        let mut attempts = 0;
        let result = loop {
            attempts += 1;
            match self.backend.complete(req) {
                Err(e) if e.is_transient() && attempts <= self.retries => {
                    std::thread::sleep(self.backoff * 2u32.pow(attempts - 1));
                }
                other => break other,
            }
        };
        let mut entry = TranscriptEntry {
            tag: req.tag.clone(),
            request_digest: req.digest(),
            response_digest: None,
            latency_ms: started.elapsed().as_millis() as u64,
            truncated: false,
            error: None,
        };
        let result = match result {
            Ok(mut text) => {
                if text.chars().count() > self.max_response_chars {
                    text = text.chars().take(self.max_response_chars).collect();
                    entry.truncated = true;
                }
                entry.response_digest = Some(digest(&text));
                self.recorded.lock().expect("recorder poisoned").push(FixtureRecord {
                    digest: Some(entry.request_digest.clone()),
                    response: text.clone(),
                });
                Ok(text)
            }
            Err(source) => {
                entry.error = Some(source.to_string());
                Err(GatewayError::Backend {
                    tag: req.tag.clone(),
                    attempts,
                    source,
                })
            }
        };
        self.ledger.lock().expect("ledger poisoned").record(entry);
        result
    }

    pub fn ledger(&self) -> CallLedger {
        self.ledger.lock().expect("ledger poisoned").clone()
    }

    pub fn total_calls(&self) -> u64 {
        self.ledger.lock().expect("ledger poisoned").total_calls
    }

    /// Successful exchanges so far, in replay fixture form.
    pub fn recorded_fixture(&self) -> Vec<FixtureRecord> {
        self.recorded.lock().expect("recorder poisoned").clone()
    }
}

/// Serves recorded responses: an unused record whose digest matches the
/// request first, otherwise the next unused record in file order.
pub struct ReplayBackend {
    records: Vec<FixtureRecord>,
    used: Mutex<Vec<bool>>,
}

impl ReplayBackend {
    pub fn new(records: Vec<FixtureRecord>) -> Self {
        let used = Mutex::new(vec![false; records.len()]);
        Self { records, used }
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        Ok(Self::new(read_json(path)?))
    }
}

impl CompletionBackend for ReplayBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<String, BackendError> {
        let mut used = self.used.lock().expect("replay state poisoned");
        let d = req.digest();
        let pick = self
            .records
            .iter()
            .enumerate()
            .position(|(i, r)| !used[i] && r.digest.as_deref() == Some(d.as_str()))
            .or_else(|| used.iter().position(|u| !u))
            .ok_or(BackendError::Exhausted)?;
        used[pick] = true;
        Ok(self.records[pick].response.clone())
    }
}

/// Scripted rule: prompts containing `pattern` get the rule's responses in
/// turn; the last response repeats once the list is used up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptRule {
    pub pattern: String,
    #[serde(flatten)]
    pub reply: ScriptReply,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScriptReply {
    One { response: String },
    Sequence { responses: Vec<String> },
}

impl ScriptRule {
    pub fn new(pattern: impl Into<String>, response: impl Into<String>) -> Self {
        Self {
            pattern: pattern.into(),
            reply: ScriptReply::One {
                response: response.into(),
            },
        }
    }

    pub fn sequence(pattern: impl Into<String>, responses: Vec<String>) -> Self {
        Self {
            pattern: pattern.into(),
            reply: ScriptReply::Sequence { responses },
        }
    }

    fn responses(&self) -> &[String] {
        match &self.reply {
            ScriptReply::One { response } => std::slice::from_ref(response),
            ScriptReply::Sequence { responses } => responses,
        }
    }
}

/// The first rule whose pattern occurs in the prompt answers.
pub struct ScriptedBackend {
    rules: Vec<ScriptRule>,
    served: Mutex<Vec<usize>>,
}

impl ScriptedBackend {
    pub fn new(rules: Vec<ScriptRule>) -> Self {
        let served = Mutex::new(vec![0; rules.len()]);
        Self { rules, served }
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let rules: Vec<ScriptRule> = read_json(path)?;
        if rules.iter().any(|r| r.responses().is_empty()) {
            return Err(ConfigError::MalformedFixture {
                path: path.display().to_string(),
                message: "rule without responses".into(),
            });
        }
        Ok(Self::new(rules))
    }
}

impl CompletionBackend for ScriptedBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<String, BackendError> {
        let i = self
            .rules
            .iter()
            .position(|r| req.prompt.contains(&r.pattern))
            .ok_or(BackendError::NoRule)?;
        let mut served = self.served.lock().expect("script state poisoned");
        let responses = self.rules[i].responses();
        let reply = responses
            .get(served[i])
            .or(responses.last())
            .cloned()
            .ok_or(BackendError::NoRule)?;
        served[i] += 1;
        Ok(reply)
    }
}

/// JSON-over-HTTP completion endpoint: POST `{model, prompt, max_tokens,
/// temperature}`, response `{text}`. The credential is sent as a bearer token.
pub struct HttpBackend {
    agent: ureq::Agent,
    endpoint: String,
    model: String,
    credential: String,
}

#[derive(Serialize)]
struct HttpRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    max_tokens: usize,
    temperature: f64,
}

#[derive(Deserialize)]
struct HttpResponse {
    text: String,
}

impl CompletionBackend for HttpBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<String, BackendError> {
        let body = HttpRequest {
            model: &self.model,
            prompt: &req.prompt,
            max_tokens: req.max_output_tokens,
            temperature: req.temperature,
        };
        let resp = self
            .agent
            .post(&self.endpoint)
            .set("Authorization", &format!("Bearer {}", self.credential))
            .send_json(&body);
        match resp {
            Ok(r) => r
                .into_json::<HttpResponse>()
                .map(|r| r.text)
                .map_err(|e| BackendError::BadResponse(e.to_string())),
            Err(ureq::Error::Status(code, r)) if code >= 500 || code == 429 => {
                Err(BackendError::Transport(format!("status {code}: {}", r.status_text())))
            }
            Err(ureq::Error::Status(code, r)) => {
                Err(BackendError::BadResponse(format!("status {code}: {}", r.status_text())))
            }
            Err(e) => Err(BackendError::Transport(e.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSettings {
    Http {
        endpoint: Option<String>,
        model: Option<String>,
        credential_env: Option<String>,
        #[serde(default = "default_http_timeout")]
        timeout_secs: u64,
    },
    Replay { fixture: std::path::PathBuf },
    Scripted { rules: std::path::PathBuf },
}

fn default_http_timeout() -> u64 {
    120
}

pub fn configure_backend(settings: &BackendSettings) -> Result<Box<dyn CompletionBackend>, ConfigError> {
    match settings {
        BackendSettings::Http {
            endpoint,
            model,
            credential_env,
            timeout_secs,
        } => {
            let endpoint = endpoint.clone().ok_or(ConfigError::MissingSetting("model.endpoint"))?;
            let model = model.clone().ok_or(ConfigError::MissingSetting("model.name"))?;
            let var = credential_env
                .clone()
                .ok_or(ConfigError::MissingSetting("model.credential_env"))?;
            let credential = std::env::var(&var).map_err(|_| ConfigError::MissingCredential(var))?;
            let agent = ureq::AgentBuilder::new()
                .timeout(Duration::from_secs(*timeout_secs))
                .build();
            Ok(Box::new(HttpBackend {
                agent,
                endpoint,
                model,
                credential,
            }))
        }
        BackendSettings::Replay { fixture } => Ok(Box::new(ReplayBackend::from_file(fixture)?)),
        BackendSettings::Scripted { rules } => Ok(Box::new(ScriptedBackend::from_file(rules)?)),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, ConfigError> {
    let malformed = |message: String| ConfigError::MalformedFixture {
        path: path.display().to_string(),
        message,
    };
    let text = std::fs::read_to_string(path).map_err(|e| malformed(e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| malformed(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicU32, Ordering};
    use std::sync::Arc;

    fn req(p: &str) -> CompletionRequest {
        CompletionRequest::new(p, 0.2, "t")
    }

    #[test]
    fn replay_serves_then_exhausts() {
        let g = ModelGateway::new(Box::new(ReplayBackend::new(vec![FixtureRecord {
            digest: None,
            response: "resp1".into(),
        }])));
        assert_eq!(g.complete(&req("a")).unwrap(), "resp1");
        assert_eq!(g.total_calls(), 1);
        assert!(g.complete(&req("b")).is_err());
        let l = g.ledger();
        assert_eq!(l.total_calls, 2);
        assert_eq!(l.transcript.len(), 2);
        assert!(l.transcript[1].error.is_some());
    }

    #[test]
    fn replay_prefers_digest_match() {
        let records = vec![
            FixtureRecord {
                digest: None,
                response: "first".into(),
            },
            FixtureRecord {
                digest: Some(digest("q")),
                response: "keyed".into(),
            },
        ];
        let g = ModelGateway::new(Box::new(ReplayBackend::new(records)));
        assert_eq!(g.complete(&req("q")).unwrap(), "keyed");
        assert_eq!(g.complete(&req("q")).unwrap(), "first");
    }

    #[test]
    fn scripted_sequences_repeat_last() {
        let b = ScriptedBackend::new(vec![
            ScriptRule::sequence("24-Hour", vec!["junk".into(), "good".into()]),
            ScriptRule::new("", "fallback"),
        ]);
        let g = ModelGateway::new(Box::new(b));
        assert_eq!(g.complete(&req("about 24-Hour")).unwrap(), "junk");
        assert_eq!(g.complete(&req("about 24-Hour")).unwrap(), "good");
        assert_eq!(g.complete(&req("about 24-Hour")).unwrap(), "good");
        assert_eq!(g.complete(&req("other")).unwrap(), "fallback");
    }

    struct Flaky {
        failures: AtomicU32,
    }

    impl CompletionBackend for Flaky {
        fn complete(&self, _: &CompletionRequest) -> Result<String, BackendError> {
            if self.failures.fetch_sub(1, Ordering::SeqCst) > 0 {
                Err(BackendError::Transport("reset".into()))
            } else {
                Ok("ok".into())
            }
        }
    }

    #[test]
    fn retries_count_once() {
        let g = ModelGateway::new(Box::new(Flaky {
            failures: AtomicU32::new(2),
        }))
        .with_retries(2, Duration::from_millis(1));
        assert_eq!(g.complete(&req("x")).unwrap(), "ok");
        assert_eq!(g.total_calls(), 1);

        let g = ModelGateway::new(Box::new(Flaky {
            failures: AtomicU32::new(5),
        }))
        .with_retries(2, Duration::from_millis(1));
        match g.complete(&req("x")) {
            Err(GatewayError::Backend { tag, attempts, .. }) => {
                assert_eq!(tag, "t");
                assert_eq!(attempts, 3);
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(g.total_calls(), 1);
    }

    #[test]
    fn oversized_response_truncated() {
        let b = ScriptedBackend::new(vec![ScriptRule::new("", "abcdef")]);
        let g = ModelGateway::new(Box::new(b)).with_max_response_chars(3);
        assert_eq!(g.complete(&req("x")).unwrap(), "abc");
        assert!(g.ledger().transcript[0].truncated);
    }

    #[test]
    fn concurrent_accounting_is_exact() {
        let b = ScriptedBackend::new(vec![ScriptRule::new("", "r")]);
        let g = Arc::new(ModelGateway::new(Box::new(b)));
        std::thread::scope(|s| {
            for t in 0..8 {
                let g = Arc::clone(&g);
                s.spawn(move || {
                    for i in 0..50 {
                        g.complete(&CompletionRequest::new(format!("{t}-{i}"), 0.0, format!("tag{}", t % 3)))
                            .unwrap();
                    }
                });
            }
        });
        let l = g.ledger();
        assert_eq!(l.total_calls, 400);
        assert_eq!(l.per_tag.values().sum::<u64>(), 400);
        assert_eq!(l.transcript.len(), 400);
    }

    #[test]
    fn http_requires_credential_before_first_call() {
        let s = BackendSettings::Http {
            endpoint: Some("http://127.0.0.1:9".into()),
            model: Some("m".into()),
            credential_env: Some("CODEWRANGLE_TEST_UNSET_CREDENTIAL".into()),
            timeout_secs: 1,
        };
        assert!(matches!(configure_backend(&s), Err(ConfigError::MissingCredential(_))));
    }

    #[test]
    fn replay_fixture_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.json");
        let recs: Vec<FixtureRecord> = (0..5)
            .map(|i| FixtureRecord {
                digest: None,
                response: format!("r{i}"),
            })
            .collect();
        std::fs::write(&p, serde_json::to_string(&recs).unwrap()).unwrap();
        let g = ModelGateway::new(configure_backend(&BackendSettings::Replay { fixture: p.clone() }).unwrap());
        for i in 0..5 {
            assert_eq!(g.complete(&req("x")).unwrap(), format!("r{i}"));
        }
        assert!(g.complete(&req("x")).is_err());
        std::fs::write(&p, "{not json").unwrap();
        assert!(matches!(
            configure_backend(&BackendSettings::Replay { fixture: p }),
            Err(ConfigError::MalformedFixture { .. })
        ));
    }
}
