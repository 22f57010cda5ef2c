//! Live conversation sessions over a loaded pipeline.
//!
//! Each user utterance runs the evaluation per-turn path with model sources
//! only. Sessions are independent; requests within one session are
//! serialized by a per-session lock. Unlike offline evaluation, a live
//! session has no annotations, so the goal and topics predicted for the
//! previous system turn are attached to the next user turn and the
//! histories are built from predictions.

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use mgcrs_core::corpus::{Speaker, Turn, TurnSample, UserProfile};
use mgcrs_core::pipeline::{Pipeline, StageOverride, TurnPrediction};
use mgcrs_core::vocab::SPECIAL_TOKENS;
use serde::{Deserialize, Serialize};

use crate::config::ServeConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemView {
    pub id: String,
    pub name: String,
    pub p: f64,
}

/// Response body of one user turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnPayload {
    pub goal: Vec<String>,
    pub topics: Vec<String>,
    pub items: Vec<ItemView>,
    pub response: String,
}

/// What the pipeline predicted for a system turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Inspector {
    pub goal: Vec<String>,
    pub topics: Vec<String>,
    pub items: Vec<ItemView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub speaker: Speaker,
    pub text: String,
    /// Present on system turns.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inspector: Option<Inspector>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub session_id: String,
    pub turns: Vec<TranscriptEntry>,
}

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("unknown or expired session `{0}`")]
    NotFound(String),
    #[error("{0}")]
    BadRequest(String),
    #[error(transparent)]
    Pipeline(#[from] mgcrs_core::Error),
    #[error("inference task failed: {0}")]
    Join(String),
}

impl ServiceError {
    pub fn kind(&self) -> &'static str {
        match self {
            ServiceError::NotFound(_) => "not_found",
            ServiceError::BadRequest(_) => "bad_request",
            ServiceError::Pipeline(e) => e.kind(),
            ServiceError::Join(_) => "internal",
        }
    }
}

/// Dialogue state of one session; append-only.
#[derive(Debug, Default)]
pub struct Session {
    pub turns: Vec<Turn>,
    pub predictions: Vec<TurnPrediction>,
    pub transcript: Vec<TranscriptEntry>,
}

struct Slot {
    state: tokio::sync::Mutex<Session>,
    created: Instant,
    last_active: Mutex<Instant>,
}

pub struct Service {
    pipeline: Arc<Pipeline>,
    cfg: ServeConfig,
    sessions: Mutex<HashMap<String, Arc<Slot>>>,
}

impl Service {
    pub fn new(pipeline: Arc<Pipeline>, cfg: ServeConfig) -> Self {
        Service {
            pipeline,
            cfg,
            sessions: Mutex::new(HashMap::new()),
        }
    }

    pub fn config(&self) -> &ServeConfig {
        &self.cfg
    }

    fn idle_limit(&self) -> Duration {
        Duration::from_secs(self.cfg.session_idle_secs)
    }

    pub fn create_session(&self) -> String {
        let id = uuid::Uuid::new_v4().to_string();
        let now = Instant::now();
        let slot = Arc::new(Slot {
            state: tokio::sync::Mutex::new(Session::default()),
            created: now,
            last_active: Mutex::new(now),
        });
        self.sessions.lock().unwrap().insert(id.clone(), slot);
        id
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().unwrap().len()
    }

    /// Looks a session up and marks it active; expired sessions are dropped.
    fn slot(&self, id: &str) -> Result<Arc<Slot>, ServiceError> {
        let mut map = self.sessions.lock().unwrap();
        let slot = map.get(id).cloned().ok_or_else(|| ServiceError::NotFound(id.to_string()))?;
        let mut last = slot.last_active.lock().unwrap();
        if last.elapsed() > self.idle_limit() {
            drop(last);
            map.remove(id);
            return Err(ServiceError::NotFound(id.to_string()));
        }
        *last = Instant::now();
        drop(last);
        Ok(slot)
    }

    /// Drops every expired session and returns how many were dropped.
    pub fn sweep(&self) -> usize {
        let limit = self.idle_limit();
        let mut map = self.sessions.lock().unwrap();
        let before = map.len();
        map.retain(|_, s| s.last_active.lock().unwrap().elapsed() <= limit);
        before - map.len()
    }

    /// Seconds since the session was created.
    pub fn session_age(&self, id: &str) -> Result<f64, ServiceError> {
        Ok(self.slot(id)?.created.elapsed().as_secs_f64())
    }

    /// Appends the user turn, runs the pipeline, appends the system turn.
    pub async fn turn(&self, id: &str, text: &str) -> Result<TurnPayload, ServiceError> {
        let text = text.split_whitespace().collect::<Vec<_>>().join(" ");
        if text.is_empty() {
            return Err(ServiceError::BadRequest("text must not be empty".into()));
        }
        if let Some(tok) = SPECIAL_TOKENS.iter().find(|t| text.contains(*t)) {
            return Err(ServiceError::BadRequest(format!("text must not contain the reserved token {tok}")));
        }
        let slot = self.slot(id)?;
        let mut session = slot.state.lock().await;

        let mut user = Turn::new(Speaker::User, text.clone());
        if let Some(prev) = session.predictions.last() {
            user.goals = prev.goal.clone();
            user.topics = prev.topics.clone();
        }
        let mut context = session.turns.clone();
        context.push(user.clone());
        let sample = TurnSample {
            dialogue_id: id.to_string(),
            turn_index: context.len(),
            context,
            profile: UserProfile::default(),
            kb: Vec::new(),
            oracle_goals: Vec::new(),
            oracle_topics: Vec::new(),
            oracle_items: Vec::new(),
            reference: String::new(),
        };
        let pipeline = self.pipeline.clone();
        let pred = tokio::task::spawn_blocking(move || pipeline.run_turn(&sample, &StageOverride::default()))
            .await
            .map_err(|e| ServiceError::Join(e.to_string()))??;

        let payload = self.payload(&pred);
        let mut system = Turn::new(Speaker::System, pred.response.clone());
        system.goals = pred.goal.clone();
        system.topics = pred.topics.clone();
        system.item_ids = pred.item_id.clone().into_iter().collect();
        let new_entries = [
            TranscriptEntry {
                speaker: Speaker::User,
                text,
                inspector: None,
            },
            TranscriptEntry {
                speaker: Speaker::System,
                text: pred.response.clone(),
                inspector: Some(Inspector {
                    goal: payload.goal.clone(),
                    topics: payload.topics.clone(),
                    items: payload.items.clone(),
                }),
            },
        ];
        self.persist(id, &new_entries);
        session.turns.push(user);
        session.turns.push(system);
        session.predictions.push(pred);
        session.transcript.extend(new_entries);
        Ok(payload)
    }

    fn payload(&self, pred: &TurnPrediction) -> TurnPayload {
        let items = pred
            .ranked_items
            .iter()
            .flatten()
            .take(self.cfg.top_items)
            .map(|r| ItemView {
                id: r.id.clone(),
                name: self
                    .pipeline
                    .catalog
                    .iter()
                    .find(|it| it.id == r.id)
                    .map_or_else(|| r.id.clone(), |it| it.name.clone()),
                p: r.p,
            })
            .collect();
        TurnPayload {
            goal: pred.goal.clone(),
            topics: pred.topics.clone(),
            items,
            response: pred.response.clone(),
        }
    }

    /// Appends transcript entries to `<persist_dir>/<session>.jsonl` when
    /// persistence is configured. Failures are logged, not fatal.
    fn persist(&self, id: &str, entries: &[TranscriptEntry]) {
        if self.cfg.persist_dir.is_empty() {
            return;
        }
        let dir = PathBuf::from(&self.cfg.persist_dir);
        let path = dir.join(format!("{id}.jsonl"));
        let result = fs::create_dir_all(&dir).and_then(|_| {
            let mut f = OpenOptions::new().create(true).append(true).open(&path)?;
            for e in entries {
                writeln!(f, "{}", serde_json::to_string(e)?)?;
            }
            Ok(())
        });
        if let Err(e) = result {
            eprintln!("warning: could not persist session {id} to {}: {e}", path.display());
        }
    }

    pub async fn transcript(&self, id: &str) -> Result<Transcript, ServiceError> {
        let slot = self.slot(id)?;
        let session = slot.state.lock().await;
        Ok(Transcript {
            session_id: id.to_string(),
            turns: session.transcript.clone(),
        })
    }

    /// Full pipeline outputs of a session, stage inputs included.
    pub async fn predictions(&self, id: &str) -> Result<Vec<TurnPrediction>, ServiceError> {
        let slot = self.slot(id)?;
        let session = slot.state.lock().await;
        Ok(session.predictions.clone())
    }
}
