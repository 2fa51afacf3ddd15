//! Multi-bot runtime: routes inbound messages to sessions, fires scheduled
//! check-ins and records usage events.
//!
//! Turns for one (bot, user) pair never overlap: an inbound message that
//! arrives while another turn for the same user is running is rejected with
//! [`HostError::TurnInProgress`]. Different users run concurrently.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, RwLock, TryLockError};

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::engine::{Engine, EngineError, OutboundMessage, Program, Session, Turn};
use crate::graph::{NodeId, Origin};
use crate::intent::{CatalogError, IntentCatalog, IntentMatcher, RiskLexicon, DEFAULT_THRESHOLD};
use crate::scheduler::{CheckinConfig, Clock, Scheduler, SchedulerError};
use crate::store::{BotRegistration, ContentStore, EventKind, NewEvent, Payload, StoreError, UsageEvent};

type EventParts = (EventKind, Option<NodeId>, Payload);

/// Longest inbound message accepted, in characters.
pub const MAX_INBOUND_CHARS: usize = 4_000;

#[derive(Debug, thiserror::Error)]
pub enum HostError {
    #[error("unknown bot {0}")]
    UnknownBot(String),
    #[error("message is {0} characters; the limit is {MAX_INBOUND_CHARS}")]
    TextTooLong(usize),
    #[error("a turn for this user is already in progress")]
    TurnInProgress,
    #[error("runtime fault: {0}")]
    Runtime(EngineError),
    #[error("version {version} cannot run: {source}")]
    Program { version: String, source: EngineError },
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// A bot with its compiled program, intent catalog and risk lexicon.
pub struct BotRuntime {
    pub registration: BotRegistration,
    pub program: Arc<Program>,
    matcher: Arc<dyn IntentMatcher>,
    lexicon: RiskLexicon,
}

impl BotRuntime {
    fn engine<'a>(&'a self, program: &'a Program) -> Engine<'a> {
        Engine::new(program, &*self.matcher, &self.lexicon)
    }
}

/// Persisted per-user state. `address` is the raw channel id, kept only so
/// proactive check-ins can be delivered; everything else is keyed by the
/// pseudonym in `session.user_id`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionRecord {
    pub address: String,
    pub session: Session,
}

#[derive(Default)]
struct Slot {
    loaded: bool,
    record: Option<SessionRecord>,
}

/// Messages for one user, produced by an inbound turn or a check-in.
#[derive(Debug, Clone)]
pub struct Delivery {
    pub bot_id: String,
    /// Raw channel user id.
    pub address: String,
    pub messages: Vec<OutboundMessage>,
    pub events: Vec<UsageEvent>,
}

pub struct Host {
    store: Arc<ContentStore>,
    clock: Arc<dyn Clock>,
    seed: u64,
    bots: RwLock<HashMap<String, Arc<BotRuntime>>>,
    programs: Mutex<HashMap<String, Arc<Program>>>,
    slots: Mutex<HashMap<(String, String), Arc<Mutex<Slot>>>>,
    scheduler: Mutex<Scheduler>,
}

impl Host {
    /// Loads every registered bot and its check-ins from `store`. `seed`
    /// is mixed into every new session's generator seed.
    pub fn new(store: Arc<ContentStore>, clock: Arc<dyn Clock>, seed: u64) -> Result<Host, HostError> {
        let host = Host {
            store,
            clock,
            seed,
            bots: RwLock::new(HashMap::new()),
            programs: Mutex::new(HashMap::new()),
            slots: Mutex::new(HashMap::new()),
            scheduler: Mutex::new(Scheduler::new()),
        };
        for registration in host.store.list_bots()? {
            let checkins = host.store.load_checkins(&registration.bot_id)?;
            let runtime = host.build_runtime(registration)?;
            let mut scheduler = host.scheduler.lock().expect("scheduler lock");
            for config in checkins {
                scheduler.insert(config);
            }
            drop(scheduler);
            host.insert_runtime(runtime);
        }
        Ok(host)
    }

    pub fn store(&self) -> &ContentStore {
        &self.store
    }

    pub fn clock(&self) -> &dyn Clock {
        &*self.clock
    }

    /// Compiled program for a published version; cached per version.
    pub fn program(&self, version: &str) -> Result<Arc<Program>, HostError> {
        if let Some(p) = self.programs.lock().expect("program cache").get(version) {
            return Ok(p.clone());
        }
        let stored = self.store.get_version(version)?;
        if !stored.is_published() {
            return Err(StoreError::NotPublished {
                bot: String::new(),
                version: version.to_string(),
            }
            .into());
        }
        let program = Program::compile(stored.graph()?, version).map_err(|source| HostError::Program {
            version: version.to_string(),
            source,
        })?;
        let program = Arc::new(program);
        self.programs
            .lock()
            .expect("program cache")
            .insert(version.to_string(), program.clone());
        Ok(program)
    }

    fn build_runtime(&self, registration: BotRegistration) -> Result<BotRuntime, HostError> {
        let catalog = IntentCatalog::new(
            &registration.intents,
            registration.intent_threshold.unwrap_or(DEFAULT_THRESHOLD),
        )?;
        self.build_runtime_with(registration, Arc::new(catalog))
    }

    fn build_runtime_with(
        &self,
        registration: BotRegistration,
        matcher: Arc<dyn IntentMatcher>,
    ) -> Result<BotRuntime, HostError> {
        let program = self.program(&registration.published_version)?;
        let lexicon = RiskLexicon::new(&registration.risk_lexicon)?;
        Ok(BotRuntime {
            registration,
            program,
            matcher,
            lexicon,
        })
    }

    fn insert_runtime(&self, runtime: BotRuntime) -> Arc<BotRuntime> {
        let runtime = Arc::new(runtime);
        self.bots
            .write()
            .expect("bot table")
            .insert(runtime.registration.bot_id.clone(), runtime.clone());
        runtime
    }

    /// Creates or replaces a bot. Sessions mid-engagement finish on the
    /// version they started with; new engagements use the new binding.
    pub fn register_bot(&self, registration: BotRegistration) -> Result<Arc<BotRuntime>, HostError> {
        let runtime = self.build_runtime(registration)?;
        self.store.put_bot(&runtime.registration)?;
        Ok(self.insert_runtime(runtime))
    }

    /// Like [`Host::register_bot`], but routes free text through `matcher`
    /// instead of the registration's built-in intent catalog.
    pub fn register_bot_with_matcher(
        &self,
        registration: BotRegistration,
        matcher: Arc<dyn IntentMatcher>,
    ) -> Result<Arc<BotRuntime>, HostError> {
        let runtime = self.build_runtime_with(registration, matcher)?;
        self.store.put_bot(&runtime.registration)?;
        Ok(self.insert_runtime(runtime))
    }

    pub fn bot(&self, bot_id: &str) -> Option<Arc<BotRuntime>> {
        self.bots.read().expect("bot table").get(bot_id).cloned()
    }

    pub fn bot_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.bots.read().expect("bot table").keys().cloned().collect();
        ids.sort();
        ids
    }

    fn session_seed(&self, bot_id: &str, address: &str) -> u64 {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(bot_id.as_bytes());
        hasher.update([0]);
        hasher.update(address.as_bytes());
        let digest = hasher.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    fn slot(&self, bot_id: &str, user: &str) -> Arc<Mutex<Slot>> {
        self.slots
            .lock()
            .expect("slot table")
            .entry((bot_id.to_string(), user.to_string()))
            .or_default()
            .clone()
    }

    fn load_slot(&self, bot_id: &str, user: &str, slot: &mut Slot) -> Result<(), HostError> {
        if !slot.loaded {
            slot.record = self.store.load_session(bot_id, user)?;
            slot.loaded = true;
        }
        Ok(())
    }

    fn record_events(&self, session: &Session, events: Vec<EventParts>) -> Vec<UsageEvent> {
        let timestamp = self.clock.now();
        self.store.append_events(
            events
                .into_iter()
                .map(|(kind, node_id, payload)| NewEvent {
                    timestamp,
                    bot_id: session.bot_id.clone(),
                    user_id: session.user_id.clone(),
                    session_id: session.session_id.clone(),
                    kind,
                    node_id,
                    payload,
                })
                .collect(),
        )
    }

    fn turn_events(turn: &mut Turn) -> Vec<EventParts> {
        std::mem::take(&mut turn.events)
            .into_iter()
            .map(|e| (e.kind, e.node, e.payload))
            .collect()
    }

    /// Program for the session's next step: its own version while an
    /// engagement is in flight, the bot's current binding otherwise.
    fn program_for(&self, bot: &BotRuntime, session: Option<&Session>) -> Arc<Program> {
        match session {
            Some(s) if !s.is_terminated() && s.version != bot.program.version() => {
                self.program(&s.version).unwrap_or_else(|_| bot.program.clone())
            }
            _ => bot.program.clone(),
        }
    }

    /// Handles one inbound channel message. `utc_offset_minutes` is the
    /// sender's offset if known; it is captured when a session is created.
    pub fn handle_inbound(
        &self,
        bot_id: &str,
        address: &str,
        text: &str,
        utc_offset_minutes: Option<i32>,
    ) -> Result<Delivery, HostError> {
        let bot = self.bot(bot_id).ok_or_else(|| HostError::UnknownBot(bot_id.to_string()))?;
        let len = text.chars().count();
        if len > MAX_INBOUND_CHARS {
            return Err(HostError::TextTooLong(len));
        }
        let user = self.store.pseudonymize(bot_id, address)?;
        let slot = self.slot(bot_id, &user);
        let mut guard = match slot.try_lock() {
            Ok(g) => g,
            Err(TryLockError::WouldBlock) => return Err(HostError::TurnInProgress),
            Err(TryLockError::Poisoned(p)) => p.into_inner(),
        };
        self.load_slot(bot_id, &user, &mut guard)?;

        let program = self.program_for(&bot, guard.record.as_ref().map(|r| &r.session));
        let engine = bot.engine(&program);
        let mut record = match guard.record.take() {
            Some(r) => r,
            None => {
                let mut session = Session::new(&program, bot_id, &user, self.session_seed(bot_id, address));
                session.utc_offset_minutes = utc_offset_minutes.unwrap_or(0);
                SessionRecord {
                    address: address.to_string(),
                    session,
                }
            }
        };
        record.address = address.to_string();
        let result = engine.receive(&mut record.session, text);
        let outcome = match result {
            Ok(mut turn) => {
                if let Some(minutes) = turn.checkin {
                    if let Err(e) = self.set_checkin(bot_id, &user, minutes, record.session.utc_offset_minutes) {
                        tracing::error!(bot_id, error = %e, "storing check-in failed");
                    }
                }
                let events = self.record_events(&record.session, Self::turn_events(&mut turn));
                Ok(Delivery {
                    bot_id: bot_id.to_string(),
                    address: address.to_string(),
                    messages: turn.messages,
                    events,
                })
            }
            Err(e) => {
                tracing::error!(bot_id, error = %e, "turn failed");
                Err(HostError::Runtime(e))
            }
        };
        let saved = self.store.save_session(bot_id, &user, &record);
        guard.record = Some(record);
        saved?;
        outcome
    }

    fn set_checkin(&self, bot_id: &str, user: &str, minutes: u16, offset: i32) -> Result<(), HostError> {
        let mut scheduler = self.scheduler.lock().expect("scheduler lock");
        scheduler.set_checkin(bot_id, user, u32::from(minutes), offset, self.clock.now())?;
        let configs: Vec<_> = scheduler.configs_for(bot_id).cloned().collect();
        self.store.save_checkins(bot_id, &configs)?;
        Ok(())
    }

    /// Fires every check-in due now. Each due user either gets a prompted
    /// engagement (day counter advanced) or, past the program length, has
    /// the check-in deactivated.
    pub fn tick(&self) -> Vec<Delivery> {
        let now = self.clock.now();
        let due = {
            let mut scheduler = self.scheduler.lock().expect("scheduler lock");
            let due = scheduler.due_engagements(now);
            let mut bots: Vec<&String> = due.iter().map(|(b, _)| b).collect();
            bots.dedup();
            for bot in bots {
                let configs: Vec<_> = scheduler.configs_for(bot).cloned().collect();
                if let Err(e) = self.store.save_checkins(bot, &configs) {
                    tracing::error!(bot, error = %e, "saving check-ins failed");
                }
            }
            due
        };
        let mut out = Vec::new();
        for (bot_id, user) in due {
            match self.fire(&bot_id, &user) {
                Ok(Some(d)) => out.push(d),
                Ok(None) => {}
                Err(e) => tracing::error!(bot_id, error = %e, "check-in failed"),
            }
        }
        out
    }

    fn fire(&self, bot_id: &str, user: &str) -> Result<Option<Delivery>, HostError> {
        let Some(bot) = self.bot(bot_id) else {
            return Ok(None);
        };
        let slot = self.slot(bot_id, user);
        let mut guard = slot.lock().unwrap_or_else(|p| p.into_inner());
        self.load_slot(bot_id, user, &mut guard)?;
        let Some(mut record) = guard.record.take() else {
            return Ok(None);
        };
        let length = bot.registration.program_length_days;
        let result = if record.session.day_index >= length {
            {
                let mut scheduler = self.scheduler.lock().expect("scheduler lock");
                scheduler.deactivate(bot_id, user);
                let configs: Vec<_> = scheduler.configs_for(bot_id).cloned().collect();
                if let Err(e) = self.store.save_checkins(bot_id, &configs) {
                    tracing::error!(bot_id, error = %e, "saving check-ins failed");
                }
            }
            let events = self.record_events(
                &record.session,
                vec![(
                    EventKind::ProgramCompleted,
                    None,
                    [("days".to_string(), json!(record.session.day_index))].into_iter().collect(),
                )],
            );
            Ok(Delivery {
                bot_id: bot_id.to_string(),
                address: record.address.clone(),
                messages: Vec::new(),
                events,
            })
        } else {
            let day = record.session.day_index + 1;
            record.session.set_day_index(day);
            let mut events = self.record_events(
                &record.session,
                vec![(
                    EventKind::ReminderFired,
                    None,
                    [("day".to_string(), json!(day))].into_iter().collect(),
                )],
            );
            let program = bot.program.clone();
            match bot.engine(&program).begin_engagement(&mut record.session, Origin::Prompted) {
                Ok(mut turn) => {
                    events.extend(self.record_events(&record.session, Self::turn_events(&mut turn)));
                    Ok(Delivery {
                        bot_id: bot_id.to_string(),
                        address: record.address.clone(),
                        messages: turn.messages,
                        events,
                    })
                }
                Err(e) => Err(HostError::Runtime(e)),
            }
        };
        let saved = self.store.save_session(bot_id, user, &record);
        guard.record = Some(record);
        saved?;
        result.map(Some)
    }

    /// Forgets a user's session and check-in. Returns whether a session
    /// existed.
    pub fn reset_session(&self, bot_id: &str, address: &str) -> Result<bool, HostError> {
        if self.bot(bot_id).is_none() {
            return Err(HostError::UnknownBot(bot_id.to_string()));
        }
        let user = self.store.pseudonymize(bot_id, address)?;
        let slot = self.slot(bot_id, &user);
        let mut guard = match slot.try_lock() {
            Ok(g) => g,
            Err(TryLockError::WouldBlock) => return Err(HostError::TurnInProgress),
            Err(TryLockError::Poisoned(p)) => p.into_inner(),
        };
        self.load_slot(bot_id, &user, &mut guard)?;
        let existed = guard.record.take().is_some();
        self.store.delete_session(bot_id, &user)?;
        {
            let mut scheduler = self.scheduler.lock().expect("scheduler lock");
            if scheduler.remove(bot_id, &user).is_some() {
                let configs: Vec<_> = scheduler.configs_for(bot_id).cloned().collect();
                self.store.save_checkins(bot_id, &configs)?;
            }
        }
        Ok(existed)
    }

    /// Current state of a user's session, if any.
    pub fn session(&self, bot_id: &str, address: &str) -> Result<Option<Session>, HostError> {
        if self.bot(bot_id).is_none() {
            return Err(HostError::UnknownBot(bot_id.to_string()));
        }
        let user = self.store.pseudonymize(bot_id, address)?;
        let slot = self.slot(bot_id, &user);
        let mut guard = slot.lock().unwrap_or_else(|p| p.into_inner());
        self.load_slot(bot_id, &user, &mut guard)?;
        Ok(guard.record.as_ref().map(|r| r.session.clone()))
    }

    pub fn checkin(&self, bot_id: &str, address: &str) -> Result<Option<CheckinConfig>, HostError> {
        let user = self.store.pseudonymize(bot_id, address)?;
        Ok(self.scheduler.lock().expect("scheduler lock").get(bot_id, &user).cloned())
    }
}
