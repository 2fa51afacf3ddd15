//! Shared helpers: fixtures and an in-process server on a loopback port.

#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use convograph_core::host::Host;
use convograph_core::scheduler::VirtualClock;
use convograph_core::store::{BotRegistration, ContentStore};
use convograph_server::api::{self, SharedState};
use serde_json::{json, Value};

pub mod checks;

pub const ADMIN: &str = "admin-secret";
/// 09:00 local at UTC+13 on 2026-01-05.
pub const LOCAL_TS: &str = "2026-01-05T09:00:00+13:00";

pub fn fixture_path(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(rel)
}

pub fn fixture(rel: &str) -> String {
    let path = fixture_path(rel);
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

pub fn start() -> DateTime<Utc> {
    "2026-01-04T20:00:00Z".parse().unwrap()
}

pub fn demo_bot() -> BotRegistration {
    serde_json::from_str(&fixture("demo/bot.json")).unwrap()
}

/// Publishes `graph` and returns its version id.
pub fn publish(store: &ContentStore, graph: &str) -> String {
    let draft = store.create_draft(graph, start()).unwrap();
    store.publish(&draft.version_id).unwrap();
    draft.version_id
}

pub struct TestServer {
    pub base: String,
    pub state: SharedState,
    pub clock: Arc<VirtualClock>,
    pub client: reqwest::Client,
    task: tokio::task::JoinHandle<()>,
}

impl Drop for TestServer {
    fn drop(&mut self) {
        self.task.abort();
    }
}

impl TestServer {
    pub fn host(&self) -> &Host {
        &self.state.host
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    /// Sends one channel message with the bot token and returns the status
    /// and JSON body.
    pub async fn say(&self, bot: &str, token: &str, user: &str, text: &str) -> (u16, Value) {
        let resp = self
            .client
            .post(self.url(&format!("/v1/channels/{bot}/messages")))
            .bearer_auth(token)
            .json(&json!({"user_id": user, "text": text, "timestamp": LOCAL_TS}))
            .send()
            .await
            .unwrap();
        let status = resp.status().as_u16();
        (status, resp.json().await.unwrap_or(Value::Null))
    }

    pub async fn admin(&self, method: reqwest::Method, path: &str, body: Option<Value>) -> (u16, Value) {
        let mut req = self.client.request(method, self.url(path)).bearer_auth(ADMIN);
        if let Some(b) = body {
            req = req.json(&b);
        }
        let resp = req.send().await.unwrap();
        let status = resp.status().as_u16();
        (status, resp.json().await.unwrap_or(Value::Null))
    }

    /// Runs one scheduler tick and routes its deliveries like the ticker.
    pub fn tick(&self) -> usize {
        let deliveries = self.state.host.tick();
        let n = deliveries.len();
        api::dispatch_proactive(&self.state, deliveries);
        n
    }
}

/// Serves a fresh host over `store` on 127.0.0.1 with a virtual clock.
pub async fn spawn(store: Arc<ContentStore>, bots: Vec<BotRegistration>) -> TestServer {
    let clock = Arc::new(VirtualClock::new(start()));
    let host = Host::new(store, clock.clone(), 42).unwrap();
    for bot in bots {
        host.register_bot(bot).unwrap();
    }
    spawn_host(host, clock).await
}

pub async fn spawn_host(host: Host, clock: Arc<VirtualClock>) -> TestServer {
    let state = api::app_state(Arc::new(host), ADMIN.to_string());
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    let app = api::router(state.clone());
    let task = tokio::spawn(async move {
        axum::serve(listener, app).await.unwrap();
    });
    TestServer {
        base,
        state,
        clock,
        client: reqwest::Client::new(),
        task,
    }
}

/// A server with the demo bot bound to a freshly published demo graph.
pub async fn demo_server() -> TestServer {
    let store = Arc::new(ContentStore::in_memory(true));
    let mut bot = demo_bot();
    bot.published_version = publish(&store, &fixture("demo/graph.json"));
    spawn(store, vec![bot]).await
}

/// Text bodies of a reply's `messages` array.
pub fn texts(reply: &Value) -> Vec<String> {
    reply["messages"]
        .as_array()
        .map(|m| m.iter().filter_map(|m| m["body"].as_str().map(String::from)).collect())
        .unwrap_or_default()
}
