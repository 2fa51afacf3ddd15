//! Scripted replay of one user against one bot on a virtual clock.
//!
//! Script format, one item per line:
//!
//! - `# ...` comment, ignored (blank lines too)
//! - `@advance <duration>` steps the clock minute by minute, running the
//!   scheduler after every minute; durations combine `d`, `h` and `m`
//!   units, e.g. `1d`, `10h`, `1h30m`
//! - anything else is sent as a user message

use std::fmt::Write as _;
use std::sync::Arc;

use chrono::{DateTime, Duration, FixedOffset, Utc};

use crate::engine::{MessageBody, OutboundMessage, Session};
use crate::graph::{validate_graph, Diagnostic, DialogGraph};
use crate::host::{Delivery, Host, HostError};
use crate::scheduler::{Clock, VirtualClock};
use crate::store::{BotRegistration, ContentStore, EventKind, StoreError, UsageEvent};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Step {
    Say(String),
    /// Minutes to advance.
    Advance(u32),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Script {
    pub steps: Vec<(usize, Step)>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("line {line}: {message}")]
pub struct ScriptError {
    pub line: usize,
    pub message: String,
}

/// Parses `1d2h30m`-style durations into minutes.
pub fn parse_duration(text: &str) -> Result<u32, String> {
    let mut total: u32 = 0;
    let mut digits = String::new();
    let mut any = false;
    for c in text.trim().chars() {
        if c.is_ascii_digit() {
            digits.push(c);
            continue;
        }
        let unit = match c {
            'd' => 1440,
            'h' => 60,
            'm' => 1,
            _ => return Err(format!("unknown duration unit {c:?}")),
        };
        let n: u32 = digits
            .parse()
            .map_err(|_| format!("missing number before {c:?}"))?;
        digits.clear();
        total = n
            .checked_mul(unit)
            .and_then(|v| total.checked_add(v))
            .ok_or("duration too long")?;
        any = true;
    }
    if !digits.is_empty() {
        return Err(format!("number {digits} has no unit"));
    }
    if !any {
        return Err("empty duration".into());
    }
    Ok(total)
}

pub fn parse_script(text: &str) -> Result<Script, ScriptError> {
    let mut steps = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        if let Some(directive) = trimmed.strip_prefix('@') {
            let (name, arg) = directive.split_once(char::is_whitespace).unwrap_or((directive, ""));
            match name {
                "advance" => {
                    let minutes = parse_duration(arg).map_err(|message| ScriptError { line, message })?;
                    steps.push((line, Step::Advance(minutes)));
                }
                other => {
                    return Err(ScriptError {
                        line,
                        message: format!("unknown directive @{other}"),
                    })
                }
            }
            continue;
        }
        steps.push((line, Step::Say(trimmed.to_string())));
    }
    Ok(Script { steps })
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub seed: u64,
    pub start: DateTime<Utc>,
    pub utc_offset_minutes: i32,
    pub user: String,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 42,
            start: "2026-01-04T20:00:00Z".parse().expect("valid instant"),
            utc_offset_minutes: 780,
            user: "sim-user".into(),
        }
    }
}

#[derive(Debug)]
pub struct SimOutcome {
    pub transcript: String,
    pub events: Vec<UsageEvent>,
    pub session: Option<Session>,
    /// Set when a turn hit a runtime fault; the replay stops there.
    pub fault: Option<String>,
}

impl SimOutcome {
    pub fn exit_code(&self) -> i32 {
        if self.fault.is_some() {
            EXIT_RUNTIME
        } else {
            EXIT_OK
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("graph has validation errors")]
    Validation(Vec<Diagnostic>),
    #[error("utc offset {0} minutes is out of range")]
    BadOffset(i32),
    #[error(transparent)]
    Host(#[from] HostError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl SimError {
    pub fn exit_code(&self) -> i32 {
        match self {
            SimError::Validation(_) => EXIT_VALIDATION,
            SimError::Host(HostError::Runtime(_)) => EXIT_RUNTIME,
            SimError::BadOffset(_) | SimError::Host(_) | SimError::Store(_) => EXIT_IO,
        }
    }
}

struct Printer {
    out: String,
    offset: FixedOffset,
}

impl Printer {
    fn stamp(&self, at: DateTime<Utc>) -> String {
        at.with_timezone(&self.offset).format("%Y-%m-%d %H:%M").to_string()
    }

    fn line(&mut self, at: DateTime<Utc>, text: &str) {
        let _ = writeln!(self.out, "[{}] {text}", self.stamp(at));
    }

    fn messages(&mut self, at: DateTime<Utc>, messages: &[OutboundMessage]) {
        for m in messages {
            let body = match &m.body {
                MessageBody::Text(t) => t.clone(),
                MessageBody::Media(media) => format!("[image: {}] <{}>", media.alt_text, media.uri),
            };
            let mut line = format!("{}: {body}", m.persona);
            if !m.quick_replies.is_empty() {
                let _ = write!(line, "  ( {} )", m.quick_replies.join(" | "));
            }
            self.line(at, &line);
        }
    }

    fn delivery(&mut self, at: DateTime<Utc>, d: &Delivery) {
        for e in &d.events {
            match e.kind {
                EventKind::ReminderFired => {
                    let day = e.payload.get("day").cloned().unwrap_or_default();
                    self.line(at, &format!("-- check-in, day {day} --"));
                }
                EventKind::ProgramCompleted => self.line(at, "-- program completed --"),
                _ => {}
            }
        }
        self.messages(at, &d.messages);
    }
}

/// Publishes `graph` for `bot` in a fresh in-memory store and replays
/// `script`. The bot's `published_version` is replaced by the new version.
pub fn simulate(
    graph: &DialogGraph,
    mut bot: BotRegistration,
    script: &Script,
    config: &SimConfig,
) -> Result<SimOutcome, SimError> {
    let diagnostics = validate_graph(graph);
    if diagnostics.iter().any(Diagnostic::is_error) {
        return Err(SimError::Validation(diagnostics));
    }
    let store = Arc::new(ContentStore::in_memory(true));
    let version = store.create_draft(&graph.to_json_string(), config.start)?;
    store.publish(&version.version_id)?;
    bot.published_version = version.version_id;
    let bot_id = bot.bot_id.clone();

    let clock = Arc::new(VirtualClock::new(config.start));
    let host = Host::new(store.clone(), clock.clone(), config.seed)?;
    host.register_bot(bot)?;

    let offset = FixedOffset::east_opt(config.utc_offset_minutes.saturating_mul(60))
        .ok_or(SimError::BadOffset(config.utc_offset_minutes))?;
    let mut printer = Printer {
        out: String::new(),
        offset,
    };
    let mut fault = None;
    'script: for (_, step) in &script.steps {
        match step {
            Step::Say(text) => {
                let now = clock.now();
                printer.line(now, &format!("> {text}"));
                match host.handle_inbound(&bot_id, &config.user, text, Some(config.utc_offset_minutes)) {
                    Ok(d) => printer.messages(now, &d.messages),
                    Err(HostError::Runtime(e)) => {
                        printer.line(now, &format!("!! runtime fault: {e}"));
                        fault = Some(e.to_string());
                        break 'script;
                    }
                    Err(e) => return Err(e.into()),
                }
            }
            Step::Advance(minutes) => {
                printer.line(clock.now(), &format!("@advance {}", format_minutes(*minutes)));
                for _ in 0..*minutes {
                    let now = clock.advance(Duration::minutes(1));
                    for d in host.tick() {
                        printer.delivery(now, &d);
                    }
                }
            }
        }
    }
    let events = store.read_events(&bot_id)?;
    let session = host.session(&bot_id, &config.user)?;
    if let Some(s) = &session {
        let _ = writeln!(
            printer.out,
            "== end of script: day {}, {} events ==",
            s.day_index,
            events.len()
        );
    }
    Ok(SimOutcome {
        transcript: printer.out,
        events,
        session,
        fault,
    })
}

fn format_minutes(minutes: u32) -> String {
    let (d, h, m) = (minutes / 1440, minutes % 1440 / 60, minutes % 60);
    let mut out = String::new();
    if d > 0 {
        let _ = write!(out, "{d}d");
    }
    if h > 0 {
        let _ = write!(out, "{h}h");
    }
    if m > 0 || out.is_empty() {
        let _ = write!(out, "{m}m");
    }
    out
}
