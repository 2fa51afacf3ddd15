//! Versioned content, bot registrations, per-user state and the usage log.
//!
//! Layout under the backend root:
//!
//! ```text
//! index.json                       version counter
//! versions/<vid>.json              one ContentVersion per file
//! bots/<bot>/registration.json
//! bots/<bot>/salt                  pseudonymization salt (hex)
//! bots/<bot>/checkins.json
//! bots/<bot>/sessions/<uid>.json   keyed by pseudonymous user id
//! bots/<bot>/events/               append-only NDJSON segments
//! ```
//!
//! Every per-user record lives under its bot's directory, so nothing keyed
//! by one bot can reach another bot's state.

mod backend;

use std::collections::{BTreeMap, HashMap};
use std::io;
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::graph::{load_graph, validate_graph, Diagnostic, DialogGraph, LoadError, NodeId};
use crate::intent::IntentDef;
use crate::scheduler::CheckinConfig;

pub use backend::{Backend, DirBackend, MemBackend, DEFAULT_SEGMENT_BYTES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    SessionStarted,
    MessageOut,
    MessageIn,
    ModuleEntered,
    ModuleCompleted,
    EscalationTriggered,
    ReminderFired,
    ProgramCompleted,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::SessionStarted => "session_started",
            EventKind::MessageOut => "message_out",
            EventKind::MessageIn => "message_in",
            EventKind::ModuleEntered => "module_entered",
            EventKind::ModuleCompleted => "module_completed",
            EventKind::EscalationTriggered => "escalation_triggered",
            EventKind::ReminderFired => "reminder_fired",
            EventKind::ProgramCompleted => "program_completed",
        }
    }
}

pub type Payload = BTreeMap<String, serde_json::Value>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageEvent {
    pub event_id: u64,
    pub timestamp: DateTime<Utc>,
    pub bot_id: String,
    pub user_id: String,
    pub session_id: String,
    pub kind: EventKind,
    pub node_id: Option<NodeId>,
    pub payload: Payload,
}

/// An event before the store assigns its id.
#[derive(Debug, Clone, PartialEq)]
pub struct NewEvent {
    pub timestamp: DateTime<Utc>,
    pub bot_id: String,
    pub user_id: String,
    pub session_id: String,
    pub kind: EventKind,
    pub node_id: Option<NodeId>,
    pub payload: Payload,
}

/// Replaces free text with its length; the risk flag is kept.
pub fn redact(payload: &mut Payload) {
    if let Some(serde_json::Value::String(text)) = payload.remove("text") {
        payload.insert("len".into(), text.chars().count().into());
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VersionStatus {
    Draft,
    Published,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContentVersion {
    pub version_id: String,
    pub graph_id: String,
    pub status: VersionStatus,
    /// Canonical JSON of the graph.
    pub document: String,
    pub parent_version: Option<String>,
    pub created_at: DateTime<Utc>,
    /// Bumped on every draft update; used to reject stale writes.
    pub revision: u64,
}

impl ContentVersion {
    pub fn graph(&self) -> Result<DialogGraph, StoreError> {
        load_graph(&self.document).map_err(|e| StoreError::Corrupt {
            key: version_key(&self.version_id),
            message: e.to_string(),
        })
    }

    pub fn is_published(&self) -> bool {
        self.status == VersionStatus::Published
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelKind {
    HttpSync,
    Webhook,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelBinding {
    pub kind: ChannelKind,
    pub token: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub webhook_url: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BotRegistration {
    pub bot_id: String,
    pub display_name: String,
    pub channel: ChannelBinding,
    pub published_version: String,
    pub program_length_days: u32,
    #[serde(default)]
    pub intents: Vec<IntentDef>,
    #[serde(default)]
    pub risk_lexicon: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intent_threshold: Option<f64>,
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("storage i/o: {0}")]
    Io(#[from] io::Error),
    #[error("corrupt record {key}: {message}")]
    Corrupt { key: String, message: String },
    #[error("unknown version {0}")]
    UnknownVersion(String),
    #[error("unknown bot {0}")]
    UnknownBot(String),
    #[error("version {0} is published and immutable")]
    Immutable(String),
    #[error("version {0} is already published")]
    AlreadyPublished(String),
    #[error("stale write to {version}: expected revision {expected}, current is {current}")]
    Conflict {
        version: String,
        expected: u64,
        current: u64,
    },
    #[error("graph document rejected: {0}")]
    Load(#[from] LoadError),
    #[error("graph has {} validation error(s)", .0.iter().filter(|d| d.is_error()).count())]
    Validation(Vec<Diagnostic>),
    #[error("bot {bot} must bind a published version, {version} is not")]
    NotPublished { bot: String, version: String },
    #[error("invalid identifier {0:?}")]
    BadId(String),
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Index {
    next_version: u64,
}

fn version_key(vid: &str) -> String {
    format!("versions/{vid}.json")
}

fn check_id(id: &str) -> Result<(), StoreError> {
    let ok = !id.is_empty()
        && id.len() <= 128
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
        && !id.starts_with('.');
    if ok {
        Ok(())
    } else {
        Err(StoreError::BadId(id.to_string()))
    }
}

/// Strips a previous `@<version>` duplication suffix.
fn base_id(id: &str) -> &str {
    id.rsplit_once('@').map_or(id, |(base, _)| base)
}

pub struct ContentStore {
    backend: Arc<dyn Backend>,
    redaction: bool,
    content: Mutex<Index>,
    next_event_id: Mutex<u64>,
    bot_logs: Mutex<HashMap<String, Arc<Mutex<()>>>>,
    salts: Mutex<HashMap<String, Vec<u8>>>,
    /// Events whose durable append failed, retried on the next append.
    pending: Mutex<Vec<(String, Vec<Vec<u8>>)>>,
}

impl ContentStore {
    pub fn open(backend: Arc<dyn Backend>, redaction: bool) -> Result<ContentStore, StoreError> {
        let mut index: Index = match backend.get("index.json")? {
            Some(bytes) => serde_json::from_slice(&bytes).map_err(|e| StoreError::Corrupt {
                key: "index.json".into(),
                message: e.to_string(),
            })?,
            None => Index::default(),
        };
        // The index write may lag a crash; never reuse an existing id.
        for name in backend.list("versions")? {
            if let Some(n) = name
                .strip_suffix(".json")
                .and_then(|v| v.strip_prefix('v'))
                .and_then(|n| n.parse::<u64>().ok())
            {
                index.next_version = index.next_version.max(n + 1);
            }
        }
        let store = ContentStore {
            backend,
            redaction,
            content: Mutex::new(index),
            next_event_id: Mutex::new(1),
            bot_logs: Mutex::new(HashMap::new()),
            salts: Mutex::new(HashMap::new()),
            pending: Mutex::new(Vec::new()),
        };
        let mut next = 1;
        for bot in store.backend.list("bots")? {
            if let Some(last) = store.read_events(&bot)?.last() {
                next = next.max(last.event_id + 1);
            }
        }
        *store.next_event_id.lock().expect("event id lock") = next;
        Ok(store)
    }

    pub fn in_memory(redaction: bool) -> ContentStore {
        ContentStore::open(Arc::new(MemBackend::new()), redaction).expect("memory store opens")
    }

    pub fn redaction(&self) -> bool {
        self.redaction
    }

    fn get_json<T: DeserializeOwned>(&self, key: &str) -> Result<Option<T>, StoreError> {
        match self.backend.get(key)? {
            None => Ok(None),
            Some(bytes) => serde_json::from_slice(&bytes)
                .map(Some)
                .map_err(|e| StoreError::Corrupt {
                    key: key.to_string(),
                    message: e.to_string(),
                }),
        }
    }

    fn put_json<T: Serialize>(&self, key: &str, value: &T) -> Result<(), StoreError> {
        let bytes = serde_json::to_vec_pretty(value).expect("records serialize");
        self.backend.put(key, &bytes)?;
        Ok(())
    }

    // ---- content versions ----

    fn allocate_version(&self, index: &mut Index) -> Result<String, StoreError> {
        let n = index.next_version.max(1);
        index.next_version = n + 1;
        self.put_json("index.json", &*index)?;
        Ok(format!("v{n}"))
    }

    fn insert_version(
        &self,
        graph: &DialogGraph,
        parent: Option<String>,
        now: DateTime<Utc>,
        vid: String,
    ) -> Result<ContentVersion, StoreError> {
        let version = ContentVersion {
            version_id: vid,
            graph_id: graph.graph_id.clone(),
            status: VersionStatus::Draft,
            document: graph.to_json_string(),
            parent_version: parent,
            created_at: now,
            revision: 1,
        };
        self.put_json(&version_key(&version.version_id), &version)?;
        Ok(version)
    }

    /// Stores a new draft from a graph document. Drafts may fail
    /// validation; they must only parse.
    pub fn create_draft(&self, document: &str, now: DateTime<Utc>) -> Result<ContentVersion, StoreError> {
        let graph = load_graph(document)?;
        let mut index = self.content.lock().expect("content lock");
        let vid = self.allocate_version(&mut index)?;
        self.insert_version(&graph, None, now, vid)
    }

    pub fn get_version(&self, vid: &str) -> Result<ContentVersion, StoreError> {
        check_id(vid).map_err(|_| StoreError::UnknownVersion(vid.to_string()))?;
        self.get_json(&version_key(vid))?
            .ok_or_else(|| StoreError::UnknownVersion(vid.to_string()))
    }

    pub fn list_versions(&self) -> Result<Vec<ContentVersion>, StoreError> {
        let mut out = Vec::new();
        for name in self.backend.list("versions")? {
            if let Some(vid) = name.strip_suffix(".json") {
                out.push(self.get_version(vid)?);
            }
        }
        out.sort_by_key(|v| {
            (
                v.version_id[1..].parse::<u64>().unwrap_or(u64::MAX),
                v.version_id.clone(),
            )
        });
        Ok(out)
    }

    /// Replaces a draft's document. `expected_revision`, when given, must
    /// match the stored revision.
    pub fn update_draft(
        &self,
        vid: &str,
        document: &str,
        expected_revision: Option<u64>,
    ) -> Result<ContentVersion, StoreError> {
        let _guard = self.content.lock().expect("content lock");
        let mut version = self.get_version(vid)?;
        if version.is_published() {
            return Err(StoreError::Immutable(vid.to_string()));
        }
        if let Some(expected) = expected_revision {
            if expected != version.revision {
                return Err(StoreError::Conflict {
                    version: vid.to_string(),
                    expected,
                    current: version.revision,
                });
            }
        }
        let graph = load_graph(document)?;
        version.graph_id = graph.graph_id.clone();
        version.document = graph.to_json_string();
        version.revision += 1;
        self.put_json(&version_key(vid), &version)?;
        Ok(version)
    }

    pub fn validate_version(&self, vid: &str) -> Result<Vec<Diagnostic>, StoreError> {
        Ok(validate_graph(&self.get_version(vid)?.graph()?))
    }

    pub fn publish(&self, vid: &str) -> Result<ContentVersion, StoreError> {
        let _guard = self.content.lock().expect("content lock");
        let mut version = self.get_version(vid)?;
        if version.is_published() {
            return Err(StoreError::AlreadyPublished(vid.to_string()));
        }
        let diagnostics = validate_graph(&version.graph()?);
        if diagnostics.iter().any(Diagnostic::is_error) {
            return Err(StoreError::Validation(diagnostics));
        }
        version.status = VersionStatus::Published;
        self.put_json(&version_key(vid), &version)?;
        Ok(version)
    }

    /// Deep-copies a version into a new draft, renaming every node
    /// `<id>@<new version>` (after dropping any earlier `@` suffix).
    pub fn duplicate(&self, vid: &str, now: DateTime<Utc>) -> Result<ContentVersion, StoreError> {
        let source = self.get_version(vid)?;
        let graph = source.graph()?;
        let mut index = self.content.lock().expect("content lock");
        let new_vid = self.allocate_version(&mut index)?;
        let copy = duplicate_graph(&graph, &new_vid);
        self.insert_version(&copy, Some(source.version_id), now, new_vid)
    }

    // ---- bots ----

    pub fn put_bot(&self, registration: &BotRegistration) -> Result<(), StoreError> {
        check_id(&registration.bot_id)?;
        let version = self.get_version(&registration.published_version)?;
        if !version.is_published() {
            return Err(StoreError::NotPublished {
                bot: registration.bot_id.clone(),
                version: registration.published_version.clone(),
            });
        }
        self.put_json(&format!("bots/{}/registration.json", registration.bot_id), registration)
    }

    pub fn get_bot(&self, bot_id: &str) -> Result<Option<BotRegistration>, StoreError> {
        if check_id(bot_id).is_err() {
            return Ok(None);
        }
        self.get_json(&format!("bots/{bot_id}/registration.json"))
    }

    pub fn list_bots(&self) -> Result<Vec<BotRegistration>, StoreError> {
        let mut out = Vec::new();
        for bot in self.backend.list("bots")? {
            if let Some(reg) = self.get_bot(&bot)? {
                out.push(reg);
            }
        }
        Ok(out)
    }

    fn salt(&self, bot_id: &str) -> Result<Vec<u8>, StoreError> {
        let mut salts = self.salts.lock().expect("salt lock");
        if let Some(salt) = salts.get(bot_id) {
            return Ok(salt.clone());
        }
        let key = format!("bots/{bot_id}/salt");
        let salt = match self.backend.get(&key)? {
            Some(hexed) => hex::decode(hexed.trim_ascii()).map_err(|e| StoreError::Corrupt {
                key: key.clone(),
                message: e.to_string(),
            })?,
            None => {
                let salt: [u8; 16] = rand::random();
                self.backend.put(&key, hex::encode(salt).as_bytes())?;
                salt.to_vec()
            }
        };
        salts.insert(bot_id.to_string(), salt.clone());
        Ok(salt)
    }

    /// Stable per-bot pseudonym for a channel user id.
    pub fn pseudonymize(&self, bot_id: &str, channel_user: &str) -> Result<String, StoreError> {
        check_id(bot_id)?;
        let mut hasher = Sha256::new();
        hasher.update(self.salt(bot_id)?);
        hasher.update(channel_user.as_bytes());
        Ok(format!("u-{}", hex::encode(&hasher.finalize()[..12])))
    }

    // ---- per-user state ----

    fn session_key(bot_id: &str, user: &str) -> Result<String, StoreError> {
        check_id(bot_id)?;
        check_id(user)?;
        Ok(format!("bots/{bot_id}/sessions/{user}.json"))
    }

    pub fn save_session<T: Serialize>(&self, bot_id: &str, user: &str, record: &T) -> Result<(), StoreError> {
        self.put_json(&Self::session_key(bot_id, user)?, record)
    }

    pub fn load_session<T: DeserializeOwned>(&self, bot_id: &str, user: &str) -> Result<Option<T>, StoreError> {
        self.get_json(&Self::session_key(bot_id, user)?)
    }

    pub fn delete_session(&self, bot_id: &str, user: &str) -> Result<(), StoreError> {
        self.backend.delete(&Self::session_key(bot_id, user)?)?;
        Ok(())
    }

    pub fn list_sessions(&self, bot_id: &str) -> Result<Vec<String>, StoreError> {
        check_id(bot_id)?;
        Ok(self
            .backend
            .list(&format!("bots/{bot_id}/sessions"))?
            .into_iter()
            .filter_map(|n| n.strip_suffix(".json").map(str::to_string))
            .collect())
    }

    pub fn save_checkins(&self, bot_id: &str, configs: &[CheckinConfig]) -> Result<(), StoreError> {
        check_id(bot_id)?;
        debug_assert!(configs.iter().all(|c| c.bot_id == bot_id));
        self.put_json(&format!("bots/{bot_id}/checkins.json"), &configs)
    }

    pub fn load_checkins(&self, bot_id: &str) -> Result<Vec<CheckinConfig>, StoreError> {
        check_id(bot_id)?;
        Ok(self
            .get_json(&format!("bots/{bot_id}/checkins.json"))?
            .unwrap_or_default())
    }

    // ---- usage events ----

    fn bot_log_lock(&self, bot_id: &str) -> Arc<Mutex<()>> {
        self.bot_logs
            .lock()
            .expect("bot log table")
            .entry(bot_id.to_string())
            .or_default()
            .clone()
    }

    fn events_log(bot_id: &str) -> String {
        format!("bots/{bot_id}/events")
    }

    /// Assigns ids and appends events, grouped by bot. Returns the stored
    /// records. A failed write never fails the call: the records are queued
    /// and retried on the next append or [`ContentStore::flush_pending`].
    pub fn append_events(&self, events: Vec<NewEvent>) -> Vec<UsageEvent> {
        let mut by_bot: Vec<(String, Vec<NewEvent>)> = Vec::new();
        for e in events {
            match by_bot.iter_mut().find(|(b, _)| *b == e.bot_id) {
                Some((_, list)) => list.push(e),
                None => by_bot.push((e.bot_id.clone(), vec![e])),
            }
        }
        let mut stored = Vec::new();
        for (bot, events) in by_bot {
            if check_id(&bot).is_err() {
                tracing::warn!(bot, "dropping events for invalid bot id");
                continue;
            }
            let lock = self.bot_log_lock(&bot);
            let _writer = lock.lock().expect("bot log lock");
            let records: Vec<UsageEvent> = {
                let mut next = self.next_event_id.lock().expect("event id lock");
                events
                    .into_iter()
                    .map(|e| {
                        let mut payload = e.payload;
                        if self.redaction {
                            redact(&mut payload);
                        }
                        let id = *next;
                        *next += 1;
                        UsageEvent {
                            event_id: id,
                            timestamp: e.timestamp,
                            bot_id: e.bot_id,
                            user_id: e.user_id,
                            session_id: e.session_id,
                            kind: e.kind,
                            node_id: e.node_id,
                            payload,
                        }
                    })
                    .collect()
            };
            let lines: Vec<Vec<u8>> = records
                .iter()
                .map(|r| serde_json::to_vec(r).expect("event serializes"))
                .collect();
            let log = Self::events_log(&bot);
            self.retry_pending_for(&log);
            let queued_before = self.has_pending_for(&log);
            if queued_before || self.backend.append(&log, &lines).is_err() {
                tracing::warn!(bot, count = lines.len(), "event append failed; queued for retry");
                self.pending.lock().expect("pending lock").push((log, lines));
            }
            stored.extend(records);
        }
        stored
    }

    fn has_pending_for(&self, log: &str) -> bool {
        self.pending
            .lock()
            .expect("pending lock")
            .iter()
            .any(|(l, _)| l == log)
    }

    /// Retries queued batches for one log in order; stops at the first
    /// failure so per-bot ordering is preserved.
    fn retry_pending_for(&self, log: &str) {
        let mut pending = self.pending.lock().expect("pending lock");
        while let Some(pos) = pending.iter().position(|(l, _)| l == log) {
            if self.backend.append(log, &pending[pos].1).is_err() {
                return;
            }
            pending.remove(pos);
        }
    }

    /// Retries every queued batch; returns how many remain queued.
    pub fn flush_pending(&self) -> usize {
        let logs: Vec<String> = {
            let pending = self.pending.lock().expect("pending lock");
            let mut logs: Vec<String> = pending.iter().map(|(l, _)| l.clone()).collect();
            logs.dedup();
            logs
        };
        for log in logs {
            let bot = log
                .strip_prefix("bots/")
                .and_then(|l| l.strip_suffix("/events"))
                .unwrap_or_default()
                .to_string();
            let lock = self.bot_log_lock(&bot);
            let _writer = lock.lock().expect("bot log lock");
            self.retry_pending_for(&log);
        }
        self.pending_count()
    }

    pub fn pending_count(&self) -> usize {
        self.pending
            .lock()
            .expect("pending lock")
            .iter()
            .map(|(_, l)| l.len())
            .sum()
    }

    pub fn read_events(&self, bot_id: &str) -> Result<Vec<UsageEvent>, StoreError> {
        check_id(bot_id)?;
        let log = Self::events_log(bot_id);
        self.backend
            .read_log(&log)?
            .iter()
            .map(|line| {
                serde_json::from_slice(line).map_err(|e| StoreError::Corrupt {
                    key: log.clone(),
                    message: e.to_string(),
                })
            })
            .collect()
    }

    /// NDJSON of the bot's events with `from <= timestamp < to`, by id.
    pub fn export_events(
        &self,
        bot_id: &str,
        from: Option<DateTime<Utc>>,
        to: Option<DateTime<Utc>>,
    ) -> Result<String, StoreError> {
        if self.get_bot(bot_id)?.is_none() {
            return Err(StoreError::UnknownBot(bot_id.to_string()));
        }
        /// The fields export filters and orders on; stored lines are
        /// already canonical event JSON and are copied through unchanged.
        #[derive(Deserialize)]
        struct Stamp {
            event_id: u64,
            timestamp: DateTime<Utc>,
        }
        let log = Self::events_log(bot_id);
        let mut selected = Vec::new();
        for line in self.backend.read_log(&log)? {
            let stamp: Stamp = serde_json::from_slice(&line).map_err(|e| StoreError::Corrupt {
                key: log.clone(),
                message: e.to_string(),
            })?;
            if from.is_none_or(|f| stamp.timestamp >= f) && to.is_none_or(|t| stamp.timestamp < t) {
                selected.push((stamp.event_id, line));
            }
        }
        selected.sort_by_key(|(id, _)| *id);
        let mut out = String::with_capacity(selected.iter().map(|(_, l)| l.len() + 1).sum());
        for (_, line) in selected {
            out.push_str(std::str::from_utf8(&line).map_err(|e| StoreError::Corrupt {
                key: log.clone(),
                message: e.to_string(),
            })?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// The duplication id scheme, exposed for tests and the CLI.
pub fn duplicate_graph(graph: &DialogGraph, new_version: &str) -> DialogGraph {
    graph.map_node_ids(|id| NodeId::new(format!("{}@{new_version}", base_id(id.as_str()))))
}
