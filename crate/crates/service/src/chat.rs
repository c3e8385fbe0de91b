//! Multi-round chat with a single simulated voter.

use std::collections::HashMap;
use std::sync::Arc;

use chrono::{DateTime, TimeZone, Utc};
use electsim_core::engine::backend::{BackendClient, ChatMessage};
use electsim_core::engine::prompt::{render_preamble, PersonaFormat, PromptConfig};
use serde::{Deserialize, Serialize};
use tokio::sync::{Mutex, RwLock};

use crate::error::ServiceError;
use crate::index::RunIndex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    Agent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatTurn {
    pub role: Speaker,
    pub text: String,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatSession {
    pub session_id: String,
    pub run_id: String,
    pub voter_id: String,
    pub state: Option<String>,
    pub preamble: String,
    pub prompt: PromptConfig,
    pub history: Vec<ChatTurn>,
}

/// Chat personas always use the post-history style of prompt.
pub fn chat_prompt_config(run_cfg: &PromptConfig) -> PromptConfig {
    PromptConfig {
        persona_format: PersonaFormat::Dict,
        baseline: 3,
        temporal_cutoff: run_cfg
            .temporal_cutoff
            .or_else(|| Some(Utc.with_ymd_and_hms(2020, 11, 1, 0, 0, 0).single().expect("valid date"))),
        ..run_cfg.clone()
    }
}

impl ChatSession {
    pub fn open(run: &RunIndex, state: Option<&str>, voter_id: &str, session_id: String) -> Result<Self, ServiceError> {
        let persona = run
            .persona(state, voter_id)
            .ok_or_else(|| ServiceError::NotFound(format!("voter {voter_id}")))?;
        let prompt = chat_prompt_config(&run.run.manifest.prompt);
        let preamble = render_preamble(persona, &prompt, None, run.run.manifest.backend.context_budget_chars).text();
        Ok(ChatSession {
            session_id,
            run_id: run.run_id().to_string(),
            voter_id: voter_id.to_string(),
            state: persona.state().map(str::to_string),
            preamble,
            prompt,
            history: Vec::new(),
        })
    }

    pub fn messages(&self, next: &str) -> Vec<ChatMessage> {
        let mut out = vec![ChatMessage::system(self.preamble.clone())];
        out.extend(self.history.iter().map(|t| match t.role {
            Speaker::User => ChatMessage::user(t.text.clone()),
            Speaker::Agent => ChatMessage::assistant(t.text.clone()),
        }));
        out.push(ChatMessage::user(next));
        out
    }

    /// Sends one user message; history grows by two turns on success and is
    /// left untouched on failure.
    pub async fn send(&mut self, text: &str, client: &BackendClient) -> Result<String, ServiceError> {
        if text.trim().is_empty() {
            return Err(ServiceError::invalid("text", "message is empty"));
        }
        let outcome = client.chat(self.messages(text)).await;
        let reply = outcome.result.map_err(|e| ServiceError::Backend(e.to_string()))?.content;
        let now = Utc::now();
        self.history.push(ChatTurn { role: Speaker::User, text: text.to_string(), timestamp: now });
        self.history.push(ChatTurn { role: Speaker::Agent, text: reply.clone(), timestamp: now });
        Ok(reply)
    }
}

/// In-memory sessions; each session is locked independently so calls on one
/// session are serialized while different sessions proceed concurrently.
#[derive(Default)]
pub struct SessionStore {
    sessions: RwLock<HashMap<String, Arc<Mutex<ChatSession>>>>,
}

impl SessionStore {
    pub async fn insert(&self, session: ChatSession) {
        self.sessions.write().await.insert(session.session_id.clone(), Arc::new(Mutex::new(session)));
    }

    pub async fn get(&self, id: &str) -> Result<Arc<Mutex<ChatSession>>, ServiceError> {
        self.sessions
            .read()
            .await
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("session {id}")))
    }

    pub async fn len(&self) -> usize {
        self.sessions.read().await.len()
    }

    pub async fn is_empty(&self) -> bool {
        self.sessions.read().await.is_empty()
    }
}
