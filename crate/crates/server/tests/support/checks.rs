//! Whole-system checks shared by the focused test targets and the
//! acceptance summary. Each returns a one-line detail on success and a
//! description of the first violation on failure.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::{Duration, Instant};

use convograph_core::store::{BotRegistration, ContentStore, DirBackend, EventKind};
use convograph_core::synth::scale_graph;
use convograph_core::value::Value as Var;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use super::*;

pub const TENANT_USERS: usize = 50;
const BETA_GREETING: &str = "Beta here.";

struct Tenant {
    bot: &'static str,
    token: &'static str,
    checkin: &'static str,
    persona: &'static str,
}

const TENANTS: [Tenant; 2] = [
    Tenant {
        bot: "alpha",
        token: "alpha-token",
        checkin: "08:00",
        persona: "Manaia",
    },
    Tenant {
        bot: "beta",
        token: "beta-token",
        checkin: "12:00",
        persona: "Aroha",
    },
];

fn ensure(ok: bool, what: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(what())
    }
}

/// Two bots on two published versions, 50 users each with the same raw
/// channel ids, driven concurrently through HTTP and then through three
/// days of check-ins.
pub async fn multi_tenancy() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let store = Arc::new(ContentStore::open(Arc::new(DirBackend::open(dir.path()).unwrap()), true).unwrap());

    let mut beta_doc: Value = serde_json::from_str(&fixture("demo/graph.json")).unwrap();
    beta_doc["graph_id"] = "beta-wellbeing".into();
    beta_doc["nodes"]["ob_hi"]["text"] = serde_json::json!([format!("{BETA_GREETING} Nice to meet you.")]);
    beta_doc["variables"][0]["initial"] = "Ravi".into();
    let versions = [
        publish(&store, &fixture("demo/graph.json")),
        publish(&store, &beta_doc.to_string()),
    ];
    let bots: Vec<BotRegistration> = TENANTS
        .iter()
        .zip(&versions)
        .map(|(t, v)| {
            let mut reg = demo_bot();
            reg.bot_id = t.bot.into();
            reg.channel.token = t.token.into();
            reg.published_version = v.clone();
            reg
        })
        .collect();
    let server = Arc::new(spawn(store.clone(), bots).await);

    let mut tasks = Vec::new();
    for (ti, tenant) in TENANTS.iter().enumerate() {
        for u in 0..TENANT_USERS {
            let server = server.clone();
            let mut rng = ChaCha8Rng::seed_from_u64((ti * 1000 + u) as u64);
            tasks.push(tokio::spawn(async move {
                let user = format!("user-{u}");
                let script = ["hi", tenant.checkin, tenant.persona, "hello", "joke", "bye"];
                let mut replies = Vec::new();
                for text in script {
                    tokio::time::sleep(Duration::from_millis(rng.gen_range(0..8))).await;
                    let (status, reply) = server.say(tenant.bot, tenant.token, &user, text).await;
                    replies.push((status, reply));
                }
                (ti, user, replies)
            }));
        }
    }
    for task in tasks {
        let (ti, user, replies) = task.await.map_err(|e| e.to_string())?;
        let tenant = &TENANTS[ti];
        for (i, (status, reply)) in replies.iter().enumerate() {
            ensure(*status == 200, || format!("{}/{user} turn {i}: status {status}", tenant.bot))?;
            for text in texts(reply) {
                ensure(!text.starts_with(BETA_GREETING) || (ti == 1 && i == 0), || {
                    format!("{}/{user} turn {i} saw {text:?}", tenant.bot)
                })?;
            }
            if i >= 3 {
                for m in reply["messages"].as_array().into_iter().flatten() {
                    ensure(m["persona"] == tenant.persona, || format!("{}/{user}: persona {}", tenant.bot, m["persona"]))?;
                }
            }
        }
        let beta_hi = texts(&replies[0].1).first().is_some_and(|t| t.starts_with(BETA_GREETING));
        ensure(beta_hi == (ti == 1), || format!("{}/{user}: wrong greeting", tenant.bot))?;
    }

    // Three days of five-minute ticks fire every user's check-in.
    for _ in 0..(3 * 24 * 12) {
        server.clock.advance(chrono::Duration::minutes(5));
        server.tick();
    }

    let mut users_by_bot = Vec::new();
    let mut sessions_by_bot = Vec::new();
    let mut reminders = Vec::new();
    for (ti, tenant) in TENANTS.iter().enumerate() {
        for u in 0..TENANT_USERS {
            let user = format!("user-{u}");
            let session = server.host().session(tenant.bot, &user).unwrap().ok_or(format!("{user} lost"))?;
            ensure(session.bot_id == tenant.bot && session.version == versions[ti], || {
                format!("{}/{user}: session bound to {} {}", tenant.bot, session.bot_id, session.version)
            })?;
            ensure(session.store.get("persona") == Some(&Var::Text(tenant.persona.into())), || {
                format!("{}/{user}: persona variable {:?}", tenant.bot, session.store.get("persona"))
            })?;
            ensure(session.store.get("checkin_time") == Some(&Var::Text(tenant.checkin.into())), || {
                format!("{}/{user}: checkin_time {:?}", tenant.bot, session.store.get("checkin_time"))
            })?;
        }
        let events = store.read_events(tenant.bot).map_err(|e| e.to_string())?;
        ensure(events.iter().all(|e| e.bot_id == tenant.bot), || format!("{}: foreign event in log", tenant.bot))?;
        let users: BTreeSet<String> = events.iter().map(|e| e.user_id.clone()).collect();
        ensure(users.len() == TENANT_USERS, || format!("{}: {} distinct users in log", tenant.bot, users.len()))?;
        let stored: BTreeSet<String> = store.list_sessions(tenant.bot).unwrap().into_iter().collect();
        ensure(stored == users, || format!("{}: session records differ from log users", tenant.bot))?;
        let checkins = store.load_checkins(tenant.bot).unwrap();
        let minutes = chrono::NaiveTime::parse_from_str(tenant.checkin, "%H:%M").unwrap();
        let expected = (minutes.signed_duration_since(chrono::NaiveTime::MIN).num_minutes()) as u16;
        ensure(
            checkins.len() == TENANT_USERS && checkins.iter().all(|c| c.bot_id == tenant.bot && c.time_of_day == expected),
            || format!("{}: check-in table mismatch", tenant.bot),
        )?;
        reminders.push(events.iter().filter(|e| e.kind == EventKind::ReminderFired).count());
        sessions_by_bot.push(events.iter().map(|e| e.session_id.clone()).collect::<BTreeSet<_>>());
        users_by_bot.push(users);
    }
    ensure(users_by_bot[0].is_disjoint(&users_by_bot[1]), || "pseudonyms shared across bots".into())?;
    ensure(sessions_by_bot[0].is_disjoint(&sessions_by_bot[1]), || "session ids shared across bots".into())?;
    ensure(reminders.iter().all(|n| *n == 3 * TENANT_USERS), || format!("reminder counts {reminders:?}"))?;
    Ok(format!(
        "2 bots, {} sessions each, {} + {} events, no leakage",
        TENANT_USERS,
        store.read_events("alpha").unwrap().len(),
        store.read_events("beta").unwrap().len()
    ))
}

pub struct Latency {
    pub requests: usize,
    pub p50: Duration,
    pub p99: Duration,
    pub by_endpoint: BTreeMap<&'static str, Duration>,
}

fn percentile(sorted: &[Duration], p: f64) -> Duration {
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// 100 concurrent sessions on the 2,500-node generated graph, mixing
/// channel messages with session, bot and event reads.
pub async fn latency_under_load(sessions: usize, turns: usize) -> Latency {
    let store = Arc::new(ContentStore::in_memory(true));
    let mut reg = demo_bot();
    reg.bot_id = "scale".into();
    reg.channel.token = "scale-token".into();
    reg.published_version = publish(&store, &scale_graph(2_500, 7).to_json_string());
    let server = Arc::new(spawn(store, vec![reg]).await);
    // Warm the connection pool and program cache.
    server.say("scale", "scale-token", "warmup", "hi").await;

    let mut tasks = Vec::new();
    for s in 0..sessions {
        let server = server.clone();
        tasks.push(tokio::spawn(async move {
            let mut rng = ChaCha8Rng::seed_from_u64(s as u64);
            let user = format!("load-{s}");
            let mut samples = Vec::with_capacity(turns);
            for t in 0..turns {
                let started = Instant::now();
                let endpoint = match t % 10 {
                    9 => {
                        let r = server
                            .client
                            .get(server.url(&format!("/v1/bots/scale/sessions/{user}")))
                            .bearer_auth("scale-token")
                            .send()
                            .await
                            .unwrap();
                        assert!(r.status().is_success(), "session read: {}", r.status());
                        r.bytes().await.unwrap();
                        "session"
                    }
                    5 => {
                        let r = server.client.get(server.url("/v1/bots/scale")).bearer_auth("scale-token").send().await.unwrap();
                        assert!(r.status().is_success());
                        r.bytes().await.unwrap();
                        "bot"
                    }
                    _ => {
                        let text = ["yes", "again", "next", "back", "1", "hello"][rng.gen_range(0..6)];
                        let (status, _) = server.say("scale", "scale-token", &user, text).await;
                        assert_eq!(status, 200);
                        "message"
                    }
                };
                samples.push((endpoint, started.elapsed()));
            }
            samples
        }));
    }
    let mut all = Vec::new();
    let mut per: BTreeMap<&'static str, Vec<Duration>> = BTreeMap::new();
    for task in tasks {
        for (endpoint, d) in task.await.unwrap() {
            all.push(d);
            per.entry(endpoint).or_default().push(d);
        }
    }
    // A window of the event log, parsed while the log is full.
    let started = Instant::now();
    let r = server
        .client
        .get(server.url("/v1/bots/scale/events?from=2026-01-04T20:00:00Z&to=2026-01-04T20:00:01Z"))
        .bearer_auth("scale-token")
        .send()
        .await
        .unwrap();
    assert!(r.status().is_success());
    r.bytes().await.unwrap();
    per.entry("events").or_default().push(started.elapsed());

    all.sort();
    let by_endpoint = per
        .into_iter()
        .map(|(k, mut v)| {
            v.sort();
            (k, percentile(&v, 99.0))
        })
        .collect();
    Latency {
        requests: all.len(),
        p50: percentile(&all, 50.0),
        p99: percentile(&all, 99.0),
        by_endpoint,
    }
}
