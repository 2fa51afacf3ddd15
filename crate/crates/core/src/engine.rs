//! Deterministic session interpreter.
//!
//! A turn runs nodes until the conversation yields at a Question or ends.
//! Everything a turn does is a function of the compiled [`Program`], the
//! session state (including its seeded generator) and the inbound text.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::expr::{eval_expr, parse_expr, EvalError, Expr};
use crate::graph::{
    normalize_label, validate_graph, AssignValue, Diagnostic, DialogGraph, MediaRef, NodeId,
    NodeKind, Origin, TextVariantSet, CHECKIN_TIME_VARIABLE,
};
use crate::intent::{IntentMatcher, RiskLexicon};
use crate::store::EventKind;
use crate::value::{Number, Value, VarType, VariableStore};

pub const MAX_STEPS_PER_TURN: usize = 1_000;
pub const MAX_CALL_DEPTH: usize = 16;

/// Reserved text variable naming the persona that speaks for the bot.
pub const PERSONA_VARIABLE: &str = "persona";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EngineError {
    #[error("conversation ended")]
    ConversationEnded,
    #[error("graph has validation errors")]
    NotPublished(Vec<Diagnostic>),
    #[error("more than {MAX_STEPS_PER_TURN} node executions without yielding (last at {node})")]
    NonYieldingLoop { node: NodeId },
    #[error("module call stack exceeds {MAX_CALL_DEPTH} at {node}")]
    CallStackOverflow { node: NodeId },
    #[error("module_return with an empty call stack at {node}")]
    EmptyStackReturn { node: NodeId },
    #[error("edge to unknown node {0}")]
    DanglingEdge(NodeId),
    #[error("unknown module {0}")]
    UnknownModule(String),
    #[error("condition at {node} failed: {source}")]
    Eval { node: NodeId, source: EvalError },
}

impl EngineError {
    pub fn is_runtime_fault(&self) -> bool {
        !matches!(self, EngineError::ConversationEnded | EngineError::NotPublished(_))
    }
}

/// A validated graph with its conditions parsed, ready to run.
#[derive(Debug)]
pub struct Program {
    graph: Arc<DialogGraph>,
    version: String,
    conditions: HashMap<NodeId, Vec<Expr>>,
    warnings: Vec<Diagnostic>,
}

impl Program {
    /// Fails with the full diagnostic list if any error is present.
    pub fn compile(graph: DialogGraph, version: impl Into<String>) -> Result<Program, EngineError> {
        let diagnostics = validate_graph(&graph);
        if diagnostics.iter().any(Diagnostic::is_error) {
            return Err(EngineError::NotPublished(diagnostics));
        }
        let mut conditions = HashMap::new();
        for (id, node) in &graph.nodes {
            if let NodeKind::Condition { branches, .. } = &node.kind {
                let exprs = branches
                    .iter()
                    .map(|b| parse_expr(&b.expr).expect("validated condition parses"))
                    .collect();
                conditions.insert(id.clone(), exprs);
            }
        }
        Ok(Program {
            graph: Arc::new(graph),
            version: version.into(),
            conditions,
            warnings: diagnostics,
        })
    }

    pub fn graph(&self) -> &DialogGraph {
        &self.graph
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn warnings(&self) -> &[Diagnostic] {
        &self.warnings
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "state", content = "node")]
pub enum Position {
    At(NodeId),
    Terminated,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "state", content = "question")]
pub enum Awaiting {
    None,
    Reply(NodeId),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Frame {
    pub continuation: NodeId,
    pub module: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flags {
    pub escalated_last_engagement: bool,
}

/// One user's live conversation with one bot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub bot_id: String,
    pub user_id: String,
    pub version: String,
    pub position: Position,
    pub call_stack: Vec<Frame>,
    pub store: VariableStore,
    pub awaiting: Awaiting,
    pub origin: Origin,
    pub flags: Flags,
    pub rng_seed: u64,
    rng: ChaCha8Rng,
    pub reprompt_count: u8,
    pub day_index: u32,
    pub utc_offset_minutes: i32,
    /// Number of engagements begun so far; zero means never onboarded.
    pub engagements: u32,
}

impl Session {
    /// A session that has not begun any engagement yet.
    pub fn new(program: &Program, bot_id: &str, user_id: &str, seed: u64) -> Session {
        let mut hasher = Sha256::new();
        hasher.update(bot_id.as_bytes());
        hasher.update([0]);
        hasher.update(user_id.as_bytes());
        hasher.update(seed.to_le_bytes());
        let session_id = hex::encode(&hasher.finalize()[..8]);

        let store = program
            .graph()
            .variables
            .iter()
            .filter_map(|v| v.initial.clone().map(|init| (v.name.clone(), init)))
            .collect();
        let mut session = Session {
            session_id,
            bot_id: bot_id.to_string(),
            user_id: user_id.to_string(),
            version: program.version().to_string(),
            position: Position::Terminated,
            call_stack: Vec::new(),
            store,
            awaiting: Awaiting::None,
            origin: Origin::Onboarding,
            flags: Flags::default(),
            rng_seed: seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
            reprompt_count: 0,
            day_index: 0,
            utc_offset_minutes: 0,
            engagements: 0,
        };
        session.sync_builtins();
        session
    }

    pub fn is_terminated(&self) -> bool {
        self.position == Position::Terminated
    }

    fn terminate(&mut self) {
        self.position = Position::Terminated;
        self.awaiting = Awaiting::None;
        self.call_stack.clear();
    }

    /// Copies engine-maintained values into the store.
    pub fn sync_builtins(&mut self) {
        self.store.set(
            "day",
            Value::Number(Number::from_int(i64::from(self.day_index)).expect("day fits")),
        );
        self.store.set("origin", Value::Text(self.origin.as_str().to_string()));
        self.store.set(
            "escalated_last_engagement",
            Value::Bool(self.flags.escalated_last_engagement),
        );
    }

    pub fn set_day_index(&mut self, day: u32) {
        self.day_index = day;
        self.sync_builtins();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    Text,
    Image,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MessageBody {
    Text(String),
    Media(MediaRef),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutboundMessage {
    pub kind: MessageKind,
    pub body: MessageBody,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub quick_replies: Vec<String>,
    pub persona: String,
}

impl OutboundMessage {
    pub fn text(&self) -> Option<&str> {
        match &self.body {
            MessageBody::Text(t) => Some(t),
            MessageBody::Media(_) => None,
        }
    }
}

/// Telemetry produced by a turn; the host stamps and stores it.
#[derive(Debug, Clone, PartialEq)]
pub struct TurnEvent {
    pub kind: EventKind,
    pub node: Option<NodeId>,
    pub payload: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Turn {
    pub messages: Vec<OutboundMessage>,
    pub events: Vec<TurnEvent>,
    /// Check-in time (minutes after midnight) captured during the turn.
    pub checkin: Option<u16>,
}

impl Turn {
    fn event(&mut self, kind: EventKind, node: Option<&NodeId>, payload: serde_json::Value) {
        let payload = match payload {
            serde_json::Value::Object(m) => m.into_iter().collect(),
            _ => BTreeMap::new(),
        };
        self.events.push(TurnEvent {
            kind,
            node: node.cloned(),
            payload,
        });
    }
}

/// Parses `HH:MM` (24-hour) into minutes after midnight.
pub fn parse_time_of_day(text: &str) -> Option<u16> {
    let (h, m) = text.trim().split_once(':')?;
    if h.is_empty() || h.len() > 2 || m.len() != 2 {
        return None;
    }
    let h: u16 = h.parse().ok()?;
    let m: u16 = m.parse().ok()?;
    (h < 24 && m < 60).then_some(h * 60 + m)
}

/// Uniform draw from the session generator; consumes exactly one step.
pub fn draw_variant<'a>(set: &'a TextVariantSet, session: &mut Session) -> &'a str {
    let n = set.len() as u128;
    let x = u128::from(session.rng.next_u64());
    &set.variants()[((x * n) >> 64) as usize]
}

/// Runs turns of one program for one bot's catalog and lexicon.
pub struct Engine<'a> {
    program: &'a Program,
    matcher: &'a dyn IntentMatcher,
    lexicon: &'a RiskLexicon,
}

impl<'a> Engine<'a> {
    pub fn new(program: &'a Program, matcher: &'a dyn IntentMatcher, lexicon: &'a RiskLexicon) -> Self {
        Engine {
            program,
            matcher,
            lexicon,
        }
    }

    fn graph(&self) -> &'a DialogGraph {
        self.program.graph()
    }

    /// Creates a session and runs its first engagement from `origin`.
    pub fn start_session(
        &self,
        bot_id: &str,
        user_id: &str,
        origin: Origin,
        seed: u64,
    ) -> Result<(Session, Turn), EngineError> {
        let mut session = Session::new(self.program, bot_id, user_id, seed);
        let turn = self.begin_engagement(&mut session, origin)?;
        Ok((session, turn))
    }

    /// Starts a fresh engagement at the entry point for `origin`, keeping
    /// the store, flags and day counter.
    pub fn begin_engagement(&self, session: &mut Session, origin: Origin) -> Result<Turn, EngineError> {
        let mut turn = Turn::default();
        self.enter(session, origin);
        turn.event(EventKind::SessionStarted, None, json!({"origin": origin.as_str()}));
        self.finish(session, turn)
    }

    fn enter(&self, session: &mut Session, origin: Origin) {
        session.version = self.program.version().to_string();
        session.origin = origin;
        session.engagements += 1;
        session.call_stack.clear();
        session.awaiting = Awaiting::None;
        session.reprompt_count = 0;
        session.position = Position::At(self.graph().entry_points.get(origin).clone());
        session.sync_builtins();
    }

    /// Entry point for any inbound text: answers the pending question, or
    /// begins a user-initiated engagement if none is pending.
    pub fn receive(&self, session: &mut Session, text: &str) -> Result<Turn, EngineError> {
        if matches!(session.awaiting, Awaiting::Reply(_)) && !session.is_terminated() {
            return self.handle_user_message(session, text);
        }
        let origin = if session.engagements == 0 {
            Origin::Onboarding
        } else {
            Origin::Unprompted
        };
        let mut turn = Turn::default();
        let risk = self.lexicon.detect(text);
        turn.event(EventKind::MessageIn, None, json!({"text": text, "risk": risk}));
        self.enter(session, origin);
        turn.event(EventKind::SessionStarted, None, json!({"origin": origin.as_str()}));
        if risk {
            let entry = self.graph().entry_points.get(origin).clone();
            if let Err(e) = self.escalate(session, entry, None, &mut turn) {
                session.terminate();
                return Err(e);
            }
        }
        self.finish(session, turn)
    }

    /// Routes a reply to the pending question.
    pub fn handle_user_message(&self, session: &mut Session, text: &str) -> Result<Turn, EngineError> {
        if session.is_terminated() {
            return Err(EngineError::ConversationEnded);
        }
        let Awaiting::Reply(question_id) = session.awaiting.clone() else {
            return self.receive(session, text);
        };
        let mut turn = Turn::default();
        let risk = self.lexicon.detect(text);
        turn.event(
            EventKind::MessageIn,
            Some(&question_id),
            json!({"text": text, "risk": risk}),
        );
        session.awaiting = Awaiting::None;

        let node = self
            .graph()
            .node(&question_id)
            .ok_or_else(|| EngineError::DanglingEdge(question_id.clone()))?;
        let NodeKind::Question {
            quick_replies,
            store_as,
            intent_routes,
            fallback_next,
            reprompt_limit,
            ..
        } = &node.kind
        else {
            session.terminate();
            return Err(EngineError::DanglingEdge(question_id));
        };

        if risk {
            session.reprompt_count = 0;
            if let Err(e) = self.escalate(session, question_id.clone(), Some(&question_id), &mut turn) {
                session.terminate();
                return Err(e);
            }
            return self.finish(session, turn);
        }

        let normalized = normalize_label(text);
        if let Some(reply) = quick_replies.iter().find(|q| normalize_label(&q.label) == normalized) {
            if let Some(var) = store_as {
                self.store_reply(session, var, &reply.label, &mut turn);
            }
            session.reprompt_count = 0;
            session.position = Position::At(reply.next.clone());
            return self.finish(session, turn);
        }

        let candidates: Vec<&str> = intent_routes.keys().map(String::as_str).collect();
        if !candidates.is_empty() {
            if let Some(m) = self.matcher.best_match(text, &candidates) {
                if let Some(var) = store_as {
                    self.store_reply(session, var, text.trim(), &mut turn);
                }
                session.reprompt_count = 0;
                session.position = Position::At(intent_routes[&m.intent].clone());
                return self.finish(session, turn);
            }
        }

        session.reprompt_count = session.reprompt_count.saturating_add(1);
        if session.reprompt_count < *reprompt_limit {
            session.position = Position::At(question_id);
        } else {
            session.reprompt_count = 0;
            session.position = Position::At(fallback_next.clone());
        }
        self.finish(session, turn)
    }

    fn escalate(
        &self,
        session: &mut Session,
        resume_at: NodeId,
        at: Option<&NodeId>,
        turn: &mut Turn,
    ) -> Result<(), EngineError> {
        let graph = self.graph();
        let module = graph
            .module(&graph.escalation_module)
            .ok_or_else(|| EngineError::UnknownModule(graph.escalation_module.clone()))?;
        session.flags.escalated_last_engagement = true;
        session.sync_builtins();
        turn.event(EventKind::EscalationTriggered, at, json!({}));
        if session.call_stack.len() >= MAX_CALL_DEPTH {
            return Err(EngineError::CallStackOverflow { node: resume_at });
        }
        session.call_stack.push(Frame {
            continuation: resume_at,
            module: module.name.clone(),
        });
        turn.event(EventKind::ModuleEntered, at, json!({"module": module.name}));
        session.position = Position::At(module.entry.clone());
        Ok(())
    }

    /// Writes a reply into `var`, converting to its declared type; values
    /// that do not fit the type are dropped.
    fn store_reply(&self, session: &mut Session, var: &str, raw: &str, turn: &mut Turn) {
        let Some(decl) = self.graph().variable(var) else {
            return;
        };
        let value = match decl.var_type {
            VarType::Text => Some(Value::Text(raw.to_string())),
            VarType::Number => raw.trim().parse::<Number>().ok().map(Value::Number),
            VarType::Boolean => match raw.trim().to_lowercase().as_str() {
                "true" => Some(Value::Bool(true)),
                "false" => Some(Value::Bool(false)),
                _ => None,
            },
        };
        if let Some(value) = value {
            if var == CHECKIN_TIME_VARIABLE {
                turn.checkin = parse_time_of_day(raw);
            }
            session.store.set(var, value);
        }
    }

    fn finish(&self, session: &mut Session, mut turn: Turn) -> Result<Turn, EngineError> {
        match self.run_until_yield(session, &mut turn) {
            Ok(()) => Ok(turn),
            Err(e) => {
                session.terminate();
                Err(e)
            }
        }
    }

    fn persona(&self, session: &Session) -> String {
        let personas = &self.graph().personas;
        if let Some(Value::Text(chosen)) = session.store.get(PERSONA_VARIABLE) {
            if personas.iter().any(|p| &p.name == chosen) {
                return chosen.clone();
            }
        }
        personas.first().map(|p| p.name.clone()).unwrap_or_default()
    }

    /// Executes nodes from the current position until a Question or the end.
    pub fn run_until_yield(&self, session: &mut Session, turn: &mut Turn) -> Result<(), EngineError> {
        let graph = self.graph();
        let mut steps = 0;
        while let Position::At(id) = session.position.clone() {
            steps += 1;
            if steps > MAX_STEPS_PER_TURN {
                return Err(EngineError::NonYieldingLoop { node: id });
            }
            let node = graph.node(&id).ok_or_else(|| EngineError::DanglingEdge(id.clone()))?;
            match &node.kind {
                NodeKind::Statement { text, media, next } => {
                    let body = draw_variant(text, session).to_string();
                    let persona = self.persona(session);
                    turn.messages.push(OutboundMessage {
                        kind: MessageKind::Text,
                        body: MessageBody::Text(body),
                        quick_replies: Vec::new(),
                        persona: persona.clone(),
                    });
                    turn.event(EventKind::MessageOut, Some(&id), json!({"kind": "text"}));
                    for m in media {
                        turn.messages.push(OutboundMessage {
                            kind: MessageKind::Image,
                            body: MessageBody::Media(m.clone()),
                            quick_replies: Vec::new(),
                            persona: persona.clone(),
                        });
                        turn.event(EventKind::MessageOut, Some(&id), json!({"kind": "image"}));
                    }
                    match next {
                        Some(next) => session.position = Position::At(next.clone()),
                        None => session.terminate(),
                    }
                }
                NodeKind::Question {
                    prompt,
                    quick_replies,
                    ..
                } => {
                    let body = draw_variant(prompt, session).to_string();
                    turn.messages.push(OutboundMessage {
                        kind: MessageKind::Text,
                        body: MessageBody::Text(body),
                        quick_replies: quick_replies.iter().map(|q| q.label.clone()).collect(),
                        persona: self.persona(session),
                    });
                    turn.event(EventKind::MessageOut, Some(&id), json!({"kind": "text"}));
                    session.awaiting = Awaiting::Reply(id);
                    return Ok(());
                }
                NodeKind::Condition { branches, else_next } => {
                    let exprs = &self.program.conditions[&id];
                    let mut target = else_next;
                    for (branch, expr) in branches.iter().zip(exprs) {
                        let hit = eval_expr(expr, &session.store).map_err(|source| EngineError::Eval {
                            node: id.clone(),
                            source,
                        })?;
                        if hit {
                            target = &branch.next;
                            break;
                        }
                    }
                    session.position = Position::At(target.clone());
                }
                NodeKind::Assign { assignments, next } => {
                    for a in assignments {
                        let value = match &a.value {
                            AssignValue::Literal(v) => v.clone(),
                            AssignValue::Variable(src) => session.store.get(src).cloned().ok_or_else(|| {
                                EngineError::Eval {
                                    node: id.clone(),
                                    source: EvalError::MissingVariable(src.clone()),
                                }
                            })?,
                        };
                        if a.variable == "escalated_last_engagement" {
                            session.flags.escalated_last_engagement = value == Value::Bool(true);
                            session.sync_builtins();
                        } else {
                            session.store.set(a.variable.clone(), value);
                        }
                    }
                    session.position = Position::At(next.clone());
                }
                NodeKind::ModuleCall { module, next } => {
                    let def = graph
                        .module(module)
                        .ok_or_else(|| EngineError::UnknownModule(module.clone()))?;
                    if session.call_stack.len() >= MAX_CALL_DEPTH {
                        return Err(EngineError::CallStackOverflow { node: id });
                    }
                    session.call_stack.push(Frame {
                        continuation: next.clone(),
                        module: module.clone(),
                    });
                    turn.event(EventKind::ModuleEntered, Some(&id), json!({"module": module}));
                    session.position = Position::At(def.entry.clone());
                }
                NodeKind::ModuleReturn => {
                    let frame = session
                        .call_stack
                        .pop()
                        .ok_or_else(|| EngineError::EmptyStackReturn { node: id.clone() })?;
                    turn.event(EventKind::ModuleCompleted, Some(&id), json!({"module": frame.module}));
                    session.position = Position::At(frame.continuation);
                }
                NodeKind::End => session.terminate(),
            }
        }
        Ok(())
    }
}
