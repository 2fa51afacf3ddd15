//! Shared helpers for the integration tests.

#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use convograph_core::host::Host;
use convograph_core::scheduler::VirtualClock;
use convograph_core::store::{BotRegistration, ContentStore};

pub fn fixture(rel: &str) -> String {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(rel);
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

pub fn demo_bot() -> BotRegistration {
    serde_json::from_str(&fixture("demo/bot.json")).unwrap()
}

/// Publishes `graph` and returns its version id.
pub fn publish(store: &ContentStore, graph: &str, now: DateTime<Utc>) -> String {
    let draft = store.create_draft(graph, now).unwrap();
    store.publish(&draft.version_id).unwrap();
    draft.version_id
}

/// 2026-01-04T20:00Z, which is 09:00 on 2026-01-05 at UTC+13.
pub fn start() -> DateTime<Utc> {
    "2026-01-04T20:00:00Z".parse().unwrap()
}

pub const OFFSET: i32 = 780;

/// A host serving the demo pack from `store` on a virtual clock.
pub fn demo_host(store: Arc<ContentStore>) -> (Host, Arc<VirtualClock>) {
    let clock = Arc::new(VirtualClock::new(start()));
    let mut bot = demo_bot();
    bot.published_version = publish(&store, &fixture("demo/graph.json"), start());
    let host = Host::new(store, clock.clone(), 42).unwrap();
    host.register_bot(bot).unwrap();
    (host, clock)
}
