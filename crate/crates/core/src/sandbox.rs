//! Snippet execution. [`ProcessExecutor`] drives an external runner over the
//! line-delimited JSON protocol; [`StubExecutor`] runs registered Rust
//! implementations in-process under the same contract.
//!
//! Protocol v1 (stdin/stdout, UTF-8 JSON Lines):
//! - runner → `{"ready": true, "protocol": 1}` as its first line
//! - orchestrator → `{"id": N, "row": {column: string | null}}` per row, ids increasing
//! - runner → `{"id": N, "value": "..."}` or `{"id": N, "error": "..."}` per row, same order
//! - exit codes: 0 clean, 2 snippet failed to load, 3 protocol violation

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::path::PathBuf;
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PROTOCOL_VERSION: u32 = 1;
pub const DEFAULT_BATCH_TIMEOUT: Duration = Duration::from_secs(5);
pub const READY_TIMEOUT: Duration = Duration::from_secs(3);
pub const BATCH_ROWS: usize = 1000;

pub type RowValues = BTreeMap<String, Option<String>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowMessage {
    pub id: u64,
    pub row: RowValues,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultMessage {
    pub id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Deserialize)]
struct ReadyMessage {
    ready: bool,
    protocol: u32,
}

/// Per-row result: the returned string, or the error the row raised.
pub type RowOutcome = Result<String, String>;

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("cannot launch runner: {0}")]
    Launch(String),
    #[error("runner protocol {found} does not match {expected}")]
    ProtocolMismatch { expected: u32, found: u32 },
    #[error("snippet failed to load: {0}")]
    SnippetLoad(String),
    #[error("runner exceeded its {budget_ms} ms budget and was killed")]
    Timeout { budget_ms: u64 },
    #[error("protocol violation: {0}")]
    Protocol(String),
}

/// Runs a snippet's `transform` over rows; outcomes come back in input order.
pub trait SnippetExecutor: Send + Sync {
    fn execute(&self, source: &str, rows: &[RowMessage]) -> Result<Vec<RowOutcome>, ExecError>;
}

type RustTransform = Arc<dyn Fn(&RowValues) -> RowOutcome + Send + Sync>;

/// In-process executor: snippet sources are looked up (after trimming) in a
/// registry of Rust closures. Unregistered sources fail to launch.
#[derive(Default, Clone)]
pub struct StubExecutor {
    programs: HashMap<String, RustTransform>,
}

impl StubExecutor {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        mut self,
        source: &str,
        f: impl Fn(&RowValues) -> RowOutcome + Send + Sync + 'static,
    ) -> Self {
        self.programs.insert(source.trim().to_string(), Arc::new(f));
        self
    }
}

impl SnippetExecutor for StubExecutor {
    fn execute(&self, source: &str, rows: &[RowMessage]) -> Result<Vec<RowOutcome>, ExecError> {
        let f = self
            .programs
            .get(source.trim())
            .ok_or_else(|| ExecError::SnippetLoad("no in-process implementation registered".into()))?;
        check_ids(rows)?;
        Ok(rows.iter().map(|m| f(&m.row)).collect())
    }
}

fn check_ids(rows: &[RowMessage]) -> Result<(), ExecError> {
    if rows.windows(2).any(|w| w[0].id >= w[1].id) {
        return Err(ExecError::Protocol("row ids must be strictly increasing".into()));
    }
    Ok(())
}

/// Launches `command --snippet-file <path> --batch-timeout-ms <ms>` per
/// session and speaks protocol v1 with it.
#[derive(Debug, Clone)]
pub struct ProcessExecutor {
    pub command: Vec<String>,
    /// Wall-clock budget per 1000 rows.
    pub batch_timeout: Duration,
    pub ready_timeout: Duration,
}

impl ProcessExecutor {
    pub fn new(command: Vec<String>) -> Self {
        Self {
            command,
            batch_timeout: DEFAULT_BATCH_TIMEOUT,
            ready_timeout: READY_TIMEOUT,
        }
    }

    pub fn with_batch_timeout(mut self, t: Duration) -> Self {
        self.batch_timeout = t;
        self
    }

    fn budget(&self, rows: usize) -> Duration {
        self.batch_timeout * rows.div_ceil(BATCH_ROWS).max(1) as u32
    }
}

struct Session {
    child: Child,
    lines: mpsc::Receiver<std::io::Result<String>>,
    _snippet: tempfile::NamedTempFile,
}

impl Session {
    fn next_line(&self, deadline: Instant) -> Result<Option<String>, RecvTimeoutError> {
        let wait = deadline.saturating_duration_since(Instant::now());
        match self.lines.recv_timeout(wait) {
            Ok(Ok(line)) => Ok(Some(line)),
            Ok(Err(_)) => Ok(None),
            Err(RecvTimeoutError::Disconnected) => Ok(None),
            Err(e) => Err(e),
        }
    }

    fn exit_code(&mut self) -> Option<i32> {
        let deadline = Instant::now() + Duration::from_millis(500);
        loop {
            match self.child.try_wait() {
                Ok(Some(status)) => return status.code(),
                Ok(None) if Instant::now() < deadline => std::thread::sleep(Duration::from_millis(5)),
                _ => {
                    let _ = self.child.kill();
                    return None;
                }
            }
        }
    }
}

impl Drop for Session {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl ProcessExecutor {
    fn launch(&self, source: &str, budget: Duration) -> Result<Session, ExecError> {
        let (program, args) = self
            .command
            .split_first()
            .ok_or_else(|| ExecError::Launch("empty runner command".into()))?;
        let mut snippet = tempfile::NamedTempFile::new().map_err(|e| ExecError::Launch(e.to_string()))?;
        snippet
            .write_all(source.as_bytes())
            .and_then(|_| snippet.flush())
            .map_err(|e| ExecError::Launch(e.to_string()))?;
        let path: PathBuf = snippet.path().to_path_buf();
        let mut child = Command::new(program)
            .args(args)
            .arg("--snippet-file")
            .arg(&path)
            .arg("--batch-timeout-ms")
            .arg(budget.as_millis().to_string())
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| ExecError::Launch(format!("{program}: {e}")))?;
        let stdout = child.stdout.take().expect("stdout piped");
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(Session {
            child,
            lines: rx,
            _snippet: snippet,
        })
    }
}

impl SnippetExecutor for ProcessExecutor {
    fn execute(&self, source: &str, rows: &[RowMessage]) -> Result<Vec<RowOutcome>, ExecError> {
        check_ids(rows)?;
        let budget = self.budget(rows.len());
        let mut session = self.launch(source, budget)?;

        let ready = session
            .next_line(Instant::now() + self.ready_timeout)
            .map_err(|_| ExecError::Launch("no ready line from runner".into()))?;
        let Some(ready) = ready else {
            return Err(match session.exit_code() {
                Some(2) => ExecError::SnippetLoad("runner exited with status 2".into()),
                _ => ExecError::Launch("runner exited before handshake".into()),
            });
        };
        // A runner that cannot load the snippet reports it instead of the handshake.
        let ready: ReadyMessage = serde_json::from_str(&ready).map_err(|_| match fatal_or_protocol(&ready) {
            e @ ExecError::SnippetLoad(_) => e,
            _ => ExecError::Launch(format!("malformed ready line: {ready}")),
        })?;
        if !ready.ready {
            return Err(ExecError::Launch("runner reported not ready".into()));
        }
        if ready.protocol != PROTOCOL_VERSION {
            return Err(ExecError::ProtocolMismatch {
                expected: PROTOCOL_VERSION,
                found: ready.protocol,
            });
        }

        let started = Instant::now();
        let deadline = started + budget;
        let mut stdin = session.child.stdin.take().expect("stdin piped");
        let payload: Vec<String> = rows
            .iter()
            .map(|m| serde_json::to_string(m).expect("row messages serialize"))
            .collect();
        std::thread::spawn(move || {
            for line in payload {
                if writeln!(stdin, "{line}").is_err() {
                    return;
                }
            }
            let _ = stdin.flush();
        });

        let mut outcomes = Vec::with_capacity(rows.len());
        for expected in rows {
            let line = match session.next_line(deadline) {
                Ok(Some(line)) => line,
                Ok(None) => {
                    return Err(match session.exit_code() {
                        Some(2) => ExecError::SnippetLoad("runner exited with status 2".into()),
                        Some(code) => ExecError::Protocol(format!(
                            "runner exited with status {code} after {} of {} results",
                            outcomes.len(),
                            rows.len()
                        )),
                        None => ExecError::Protocol("runner closed its output early".into()),
                    });
                }
                Err(_) => {
                    let _ = session.child.kill();
                    return Err(ExecError::Timeout {
                        budget_ms: budget.as_millis() as u64,
                    });
                }
            };
            let msg: ResultMessage = serde_json::from_str(&line)
                .map_err(|_| fatal_or_protocol(&line))?;
            if msg.id != expected.id {
                return Err(ExecError::Protocol(format!(
                    "expected result for id {}, got {}",
                    expected.id, msg.id
                )));
            }
            outcomes.push(match (msg.value, msg.error) {
                (Some(v), None) => Ok(v),
                (None, Some(e)) => Err(e),
                _ => {
                    return Err(ExecError::Protocol(format!(
                        "result {} must carry exactly one of value or error",
                        msg.id
                    )))
                }
            });
        }
        Ok(outcomes)
    }
}

/// Lines without an id are the runner's fatal load report.
fn fatal_or_protocol(line: &str) -> ExecError {
    #[derive(Deserialize)]
    struct Fatal {
        #[serde(alias = "fatal")]
        error: String,
    }
    match serde_json::from_str::<Fatal>(line) {
        Ok(f) => ExecError::SnippetLoad(f.error),
        Err(_) => ExecError::Protocol(format!("unparseable result line: {line}")),
    }
}

/// Numbers rows `0..n` into protocol messages.
pub fn row_messages(rows: Vec<RowValues>) -> Vec<RowMessage> {
    rows.into_iter()
        .enumerate()
        .map(|(i, row)| RowMessage { id: i as u64, row })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(n: usize) -> Vec<RowMessage> {
        row_messages(
            (0..n)
                .map(|i| {
                    let mut r = RowValues::new();
                    r.insert("x".into(), if i % 3 == 0 { None } else { Some(i.to_string()) });
                    r
                })
                .collect(),
        )
    }

    #[test]
    fn stub_runs_registered_source() {
        let exec = StubExecutor::new().register("def transform(row): ...", |r| {
            r["x"].clone().ok_or_else(|| "KeyError: x".to_string())
        });
        let out = exec.execute("  def transform(row): ...\n", &rows(4)).unwrap();
        assert_eq!(out[0], Err("KeyError: x".into()));
        assert_eq!(out[1], Ok("1".into()));
        assert!(matches!(exec.execute("other", &rows(1)), Err(ExecError::SnippetLoad(_))));
    }

    #[test]
    fn ids_must_increase() {
        let exec = StubExecutor::new().register("s", |_| Ok("v".into()));
        let mut r = rows(2);
        r[1].id = 0;
        assert!(matches!(exec.execute("s", &r), Err(ExecError::Protocol(_))));
    }

    #[test]
    fn messages_serialize_nulls() {
        let m = &rows(1)[0];
        assert_eq!(serde_json::to_string(m).unwrap(), r#"{"id":0,"row":{"x":null}}"#);
        let r: ResultMessage = serde_json::from_str(r#"{"id":3,"value":"a"}"#).unwrap();
        assert_eq!(r.value.as_deref(), Some("a"));
        assert!(r.error.is_none());
    }

    #[test]
    fn budget_scales_per_thousand_rows() {
        let p = ProcessExecutor::new(vec!["x".into()]).with_batch_timeout(Duration::from_millis(100));
        assert_eq!(p.budget(0), Duration::from_millis(100));
        assert_eq!(p.budget(1000), Duration::from_millis(100));
        assert_eq!(p.budget(1001), Duration::from_millis(200));
    }

    #[test]
    fn missing_program_is_launch_failure() {
        let p = ProcessExecutor::new(vec!["/nonexistent/runner-binary".into()]);
        assert!(matches!(p.execute("s", &rows(1)), Err(ExecError::Launch(_))));
    }
}
