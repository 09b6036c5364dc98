use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{ChatRequest, ClientError, Clock, Reply, RequestKey, Transport};

/// Frame id matching any frame when no exact entry exists.
pub const WILDCARD: &str = "*";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailKind {
    #[default]
    Transient,
    Auth,
    Malformed,
}

/// One scripted reply. `fail_times` injects that many failures of
/// `fail_kind` before the reply is served.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub frame_id: String,
    pub stage: u8,
    pub text: String,
    #[serde(default)]
    pub input_tokens: u64,
    #[serde(default)]
    pub output_tokens: u64,
    #[serde(default)]
    pub latency: f64,
    #[serde(default)]
    pub fail_times: u32,
    #[serde(default)]
    pub fail_kind: FailKind,
}

#[derive(Default)]
struct State {
    attempts: HashMap<RequestKey, u32>,
    log: Vec<(RequestKey, Duration)>,
}

/// Deterministic backend: replies are looked up by (frame id, stage).
pub struct ScriptedBackend {
    entries: HashMap<RequestKey, ScriptEntry>,
    clock: Option<Arc<dyn Clock>>,
    state: Mutex<State>,
}

impl ScriptedBackend {
    pub fn new(entries: impl IntoIterator<Item = ScriptEntry>) -> Self {
        let entries = entries
            .into_iter()
            .map(|e| {
                (
                    RequestKey {
                        frame_id: e.frame_id.clone(),
                        stage: e.stage,
                    },
                    e,
                )
            })
            .collect();
        Self {
            entries,
            clock: None,
            state: Mutex::new(State::default()),
        }
    }

    /// Loads a JSONL script, one [`ScriptEntry`] per line.
    pub fn from_file(path: &Path) -> Result<Self, ClientError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ClientError::Config(format!("reading script {}: {e}", path.display())))?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: ScriptEntry = serde_json::from_str(line).map_err(|e| {
                ClientError::Config(format!("{} line {}: {e}", path.display(), i + 1))
            })?;
            entries.push(entry);
        }
        Ok(Self::new(entries))
    }

    /// Timestamps logged calls with `clock`.
    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = Some(clock);
        self
    }

    /// Every call received, in order, including injected failures.
    pub fn calls(&self) -> Vec<RequestKey> {
        self.state.lock().unwrap().log.iter().map(|(k, _)| k.clone()).collect()
    }

    pub fn call_times(&self) -> Vec<Duration> {
        self.state.lock().unwrap().log.iter().map(|(_, t)| *t).collect()
    }

    fn lookup(&self, key: &RequestKey) -> Option<&ScriptEntry> {
        self.entries.get(key).or_else(|| {
            self.entries.get(&RequestKey {
                frame_id: WILDCARD.to_string(),
                stage: key.stage,
            })
        })
    }
}

impl Transport for ScriptedBackend {
    fn call(&self, request: &ChatRequest) -> Result<Reply, ClientError> {
        let key = request
            .key
            .clone()
            .ok_or_else(|| ClientError::InvalidRequest("scripted backend needs a request key".into()))?;
        let mut state = self.state.lock().unwrap();
        let now = self.clock.as_ref().map(|c| c.now()).unwrap_or_default();
        state.log.push((key.clone(), now));
        let Some(entry) = self.lookup(&key) else {
            return Err(ClientError::MissingScript {
                frame_id: key.frame_id,
                stage: key.stage,
            });
        };
        // Failure budgets are per requested key, also for wildcard entries.
        let attempts = state.attempts.entry(key.clone()).or_insert(0);
        *attempts += 1;
        if *attempts <= entry.fail_times {
            let what = format!("injected failure {} for {}:{}", attempts, key.frame_id, key.stage);
            return Err(match entry.fail_kind {
                FailKind::Transient => ClientError::Transient(what),
                FailKind::Auth => ClientError::Auth(what),
                FailKind::Malformed => ClientError::Malformed {
                    field: "text".into(),
                },
            });
        }
        Ok(Reply {
            text: entry.text.clone(),
            input_tokens: entry.input_tokens,
            output_tokens: entry.output_tokens,
            metadata: Default::default(),
            reported_latency: Some(entry.latency),
        })
    }
}
