//! HTTP endpoints exercised over a real loopback socket.

mod support;

use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::http::HeaderMap;
use axum::routing::post;
use axum::{Json, Router};
use convograph_core::host::Host;
use convograph_core::intent::{IntentMatch, IntentMatcher};
use convograph_core::scheduler::VirtualClock;
use convograph_core::store::{ChannelKind, ContentStore};
use reqwest::Method;
use serde_json::{json, Value};
use support::*;

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn first_message_runs_onboarding() {
    let server = demo_server().await;
    let (status, reply) = server.say("demo", "demo-token", "u9", "hi").await;
    assert_eq!(status, 200);
    let texts = texts(&reply);
    assert_eq!(texts.len(), 3, "{reply}");
    assert!(texts[0].starts_with("Kia ora!"));
    assert_eq!(texts[2], "What time should I check in each day?");
    assert_eq!(reply["messages"][2]["quick_replies"], json!(["08:00", "12:00", "19:00"]));
    assert_eq!(reply["messages"][0]["persona"], "Olivia");

    // The onboarding transcript matches the one the simulator froze.
    let golden = fixture("demo/golden/21-days.txt");
    for t in &texts {
        assert!(golden.contains(t.as_str()), "{t} missing from golden transcript");
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn unknown_bot_is_404_before_auth() {
    let server = demo_server().await;
    let resp = server
        .client
        .post(server.url("/v1/channels/nobody/messages"))
        .json(&json!({"user_id": "u", "text": "hi"}))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 404);
    let body: Value = resp.json().await.unwrap();
    assert_eq!(body["error"]["code"], "bot_not_found");

    let (status, body) = server.say("demo", "wrong", "u", "hi").await;
    assert_eq!(status, 401);
    assert_eq!(body["error"]["code"], "unauthorized");
    let resp = server
        .client
        .post(server.url("/v1/channels/demo/messages"))
        .json(&json!({"user_id": "u", "text": "hi"}))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 401);
    // The admin token is accepted on bot endpoints too.
    assert_eq!(server.say("demo", ADMIN, "u", "hi").await.0, 200);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn oversized_and_malformed_messages_are_rejected() {
    let server = demo_server().await;
    let long = "a".repeat(4_001);
    let (status, body) = server.say("demo", "demo-token", "u1", &long).await;
    assert_eq!(status, 422);
    assert_eq!(body["error"]["code"], "text_too_long");
    // Exactly at the limit is fine.
    assert_eq!(server.say("demo", "demo-token", "u1", &"a".repeat(4_000)).await.0, 200);

    let resp = server
        .client
        .post(server.url("/v1/channels/demo/messages"))
        .bearer_auth("demo-token")
        .body("{not json")
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 400);
    let (status, _) = server.say("demo", "demo-token", "", "hi").await;
    assert_eq!(status, 400);
}

/// Delegates nothing and takes its time, so a turn holds the user's slot.
struct SlowMatcher;

impl IntentMatcher for SlowMatcher {
    fn best_match(&self, _text: &str, _candidates: &[&str]) -> Option<IntentMatch> {
        std::thread::sleep(Duration::from_millis(500));
        None
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn overlapping_turns_for_one_user_get_409() {
    let store = Arc::new(ContentStore::in_memory(true));
    let clock = Arc::new(VirtualClock::new(start()));
    let host = Host::new(store.clone(), clock.clone(), 42).unwrap();
    let mut bot = demo_bot();
    bot.published_version = publish(&store, &fixture("demo/graph.json"));
    host.register_bot_with_matcher(bot, Arc::new(SlowMatcher)).unwrap();
    let server = spawn_host(host, clock).await;

    // Onboard, then open the unprompted menu, which routes free text
    // through the matcher.
    for text in ["hi", "19:00", "Aroha", "hello"] {
        assert_eq!(server.say("demo", "demo-token", "u1", text).await.0, 200);
    }
    let (a, b) = tokio::join!(
        server.say("demo", "demo-token", "u1", "something unusual"),
        async {
            tokio::time::sleep(Duration::from_millis(100)).await;
            server.say("demo", "demo-token", "u1", "something else").await
        }
    );
    let mut statuses = [a.0, b.0];
    statuses.sort();
    assert_eq!(statuses, [200, 409]);
    let conflict = if a.0 == 409 { a.1 } else { b.1 };
    assert_eq!(conflict["error"]["code"], "turn_in_progress");

    // A different user is not blocked by u1's turn.
    let (c, d) = tokio::join!(
        server.say("demo", "demo-token", "u1", "slow again"),
        async {
            tokio::time::sleep(Duration::from_millis(100)).await;
            server.say("demo", "demo-token", "u2", "hi").await
        }
    );
    assert_eq!((c.0, d.0), (200, 200));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn authoring_lifecycle() {
    let server = demo_server().await;
    let doc: Value = serde_json::from_str(&fixture("minimal/graph.json")).unwrap();

    let unauth = server.client.get(server.url("/v1/graphs")).send().await.unwrap();
    assert_eq!(unauth.status(), 401);

    let resp = server
        .client
        .post(server.url("/v1/graphs"))
        .bearer_auth(ADMIN)
        .json(&doc)
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 201);
    let created: Value = resp.json().await.unwrap();
    let gid = created["graph_id"].as_str().unwrap().to_string();
    let vid = created["version_id"].as_str().unwrap().to_string();
    assert_eq!(created["status"], "draft");
    let base = format!("/v1/graphs/{gid}/versions/{vid}");

    let (status, listed) = server.admin(Method::GET, "/v1/graphs", None).await;
    assert_eq!(status, 200);
    let ids: Vec<&str> = listed["graphs"].as_array().unwrap().iter().map(|g| g["graph_id"].as_str().unwrap()).collect();
    assert!(ids.contains(&"demo-wellbeing") && ids.contains(&gid.as_str()));

    let (status, full) = server.admin(Method::GET, &base, None).await;
    assert_eq!(status, 200);
    assert_eq!(full["document"]["graph_id"], gid.as_str());

    // A draft may be saved broken; validate reports it and publish refuses.
    let mut broken = doc.clone();
    broken["nodes"]["hello"]["next"] = json!("nowhere");
    let (status, updated) = server
        .admin(Method::PUT, &base, Some(json!({"revision": 1, "document": broken})))
        .await;
    assert_eq!(status, 200, "{updated}");
    assert_eq!(updated["revision"], 2);
    let (status, stale) = server
        .admin(Method::PUT, &base, Some(json!({"revision": 1, "document": doc})))
        .await;
    assert_eq!((status, stale["error"]["code"].as_str()), (409, Some("revision_conflict")));
    let mut other = doc.clone();
    other["graph_id"] = json!("another");
    let (status, mismatch) = server.admin(Method::PUT, &base, Some(json!({"document": other}))).await;
    assert_eq!((status, mismatch["error"]["code"].as_str()), (422, Some("graph_id_mismatch")));
    let (status, bad) = server.admin(Method::PUT, &base, Some(json!({"document": {"nodes": 3}}))).await;
    assert_eq!((status, bad["error"]["code"].as_str()), (422, Some("invalid_document")));

    let (status, report) = server.admin(Method::POST, &format!("{base}/validate"), None).await;
    assert_eq!(status, 200);
    assert_eq!(report["error_count"], 1);
    assert_eq!(report["diagnostics"][0]["code"], "E-DANGLE");
    let (status, refused) = server.admin(Method::POST, &format!("{base}/publish"), None).await;
    assert_eq!(status, 422);
    assert_eq!(refused["error"]["code"], "validation_failed");
    assert_eq!(refused["error"]["diagnostics"][0]["code"], "E-DANGLE");

    // Fix, publish, and the version freezes.
    assert_eq!(server.admin(Method::PUT, &base, Some(json!({"document": doc}))).await.0, 200);
    let (status, published) = server.admin(Method::POST, &format!("{base}/publish"), None).await;
    assert_eq!((status, published["status"].as_str()), (200, Some("published")));
    let (status, frozen) = server.admin(Method::PUT, &base, Some(json!({"document": doc}))).await;
    assert_eq!((status, frozen["error"]["code"].as_str()), (409, Some("version_immutable")));
    let (status, again) = server.admin(Method::POST, &format!("{base}/publish"), None).await;
    assert_eq!((status, again["error"]["code"].as_str()), (409, Some("already_published")));

    let (status, copy) = server.admin(Method::POST, &format!("{base}/duplicate"), None).await;
    assert_eq!(status, 201);
    assert_eq!(copy["parent_version"], vid.as_str());
    assert_eq!(copy["status"], "draft");
    let copy_id = copy["version_id"].as_str().unwrap();
    let (_, copy_full) = server.admin(Method::GET, &format!("/v1/graphs/{gid}/versions/{copy_id}"), None).await;
    assert!(copy_full["document"]["nodes"].as_object().unwrap().keys().all(|k| k.ends_with(&format!("@{copy_id}"))));

    let (status, missing) = server.admin(Method::GET, &format!("/v1/graphs/{gid}/versions/v999"), None).await;
    assert_eq!((status, missing["error"]["code"].as_str()), (404, Some("version_not_found")));
    let (status, _) = server.admin(Method::GET, &format!("/v1/graphs/demo-wellbeing/versions/{vid}"), None).await;
    assert_eq!(status, 404, "version looked up under the wrong graph");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn bots_sessions_and_events() {
    let server = demo_server().await;
    let (status, bot) = server.admin(Method::GET, "/v1/bots/demo", None).await;
    assert_eq!(status, 200);
    assert!(bot["channel"].get("token").is_none(), "token leaked: {bot}");
    assert_eq!(bot["program_length_days"], 21);

    for text in ["hi", "19:00", "Aroha"] {
        server.say("demo", "demo-token", "u1", text).await;
    }
    let (status, session) = server.admin(Method::GET, "/v1/bots/demo/sessions/u1", None).await;
    assert_eq!(status, 200);
    assert_eq!(session["engagements"], 1);
    let (status, none) = server.admin(Method::GET, "/v1/bots/demo/sessions/ghost", None).await;
    assert_eq!((status, none["error"]["code"].as_str()), (404, Some("session_not_found")));

    let resp = server
        .client
        .get(server.url("/v1/bots/demo/events"))
        .bearer_auth("demo-token")
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 200);
    assert_eq!(resp.headers()["content-type"], "application/x-ndjson");
    let body = resp.text().await.unwrap();
    let events: Vec<Value> = body.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(!events.is_empty());
    assert!(events.iter().all(|e| e["bot_id"] == "demo" && e["user_id"] != "u1"), "raw ids in log");
    // Redaction is on: inbound text never reaches the log.
    assert!(!body.contains("Aroha\""), "{body}");

    let window = server
        .client
        .get(server.url("/v1/bots/demo/events?from=2026-01-05T00:00:00Z&to=2026-01-04T00:00:00Z"))
        .bearer_auth(ADMIN)
        .send()
        .await
        .unwrap();
    assert_eq!(window.status(), 400);
    let empty = server
        .client
        .get(server.url("/v1/bots/demo/events?from=2030-01-01T00:00:00Z"))
        .bearer_auth(ADMIN)
        .send()
        .await
        .unwrap();
    assert_eq!(empty.text().await.unwrap(), "");

    let (status, reset) = server.admin(Method::POST, "/v1/bots/demo/sessions/u1/reset", None).await;
    assert_eq!((status, reset["reset"].as_bool()), (200, Some(true)));
    let (_, reset) = server.admin(Method::POST, "/v1/bots/demo/sessions/u1/reset", None).await;
    assert_eq!(reset["reset"], false);
    // After a reset the user is onboarded again.
    let (_, reply) = server.say("demo", "demo-token", "u1", "hi").await;
    assert!(texts(&reply)[0].starts_with("Kia ora!"));

    // Re-registering requires admin and a published version.
    let mut reg = demo_bot();
    reg.published_version = "v1".into();
    reg.display_name = "Renamed".into();
    let resp = server
        .client
        .put(server.url("/v1/bots/demo"))
        .bearer_auth("demo-token")
        .json(&reg)
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 401);
    let (status, updated) = server.admin(Method::PUT, "/v1/bots/demo", Some(serde_json::to_value(&reg).unwrap())).await;
    assert_eq!((status, updated["display_name"].as_str()), (200, Some("Renamed")));
    let (status, _) = server.admin(Method::PUT, "/v1/bots/other", Some(serde_json::to_value(&reg).unwrap())).await;
    assert_eq!(status, 400);
    let draft = server.host().store().duplicate("v1", start()).unwrap();
    reg.published_version = draft.version_id;
    let (status, body) = server.admin(Method::PUT, "/v1/bots/demo", Some(serde_json::to_value(&reg).unwrap())).await;
    assert_eq!((status, body["error"]["code"].as_str()), (422, Some("version_not_published")));
}

/// Runs one demo conversation, optionally editing a draft between turns.
async fn scripted_chat(edit_between_turns: bool) -> Vec<String> {
    let server = demo_server().await;
    let editor = async |step: usize| {
        if !edit_between_turns {
            return;
        }
        let (status, copy) = server
            .admin(Method::POST, "/v1/graphs/demo-wellbeing/versions/v1/duplicate", None)
            .await;
        assert_eq!(status, 201);
        let vid = copy["version_id"].as_str().unwrap().to_string();
        let base = format!("/v1/graphs/demo-wellbeing/versions/{vid}");
        let (_, full) = server.admin(Method::GET, &base, None).await;
        let mut doc = full["document"].clone();
        for node in doc["nodes"].as_object_mut().unwrap().values_mut() {
            if node["kind"] == "statement" {
                node["text"] = json!([format!("edited {step}")]);
            }
        }
        assert_eq!(server.admin(Method::PUT, &base, Some(json!({"document": doc}))).await.0, 200);
        server.admin(Method::POST, &format!("{base}/validate"), None).await;
    };
    let mut transcript = Vec::new();
    for (step, text) in ["hi", "19:00", "Aroha", "hello", "joke", "bye"].into_iter().enumerate() {
        editor(step).await;
        let (status, reply) = server.say("demo", "demo-token", "u1", text).await;
        assert_eq!(status, 200);
        transcript.push(format!("> {text}"));
        transcript.extend(texts(&reply));
    }
    transcript
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn draft_edits_do_not_reach_live_traffic() {
    let control = scripted_chat(false).await;
    let edited = scripted_chat(true).await;
    assert_eq!(control, edited);
    assert!(edited.iter().all(|l| !l.starts_with("edited")));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn publishing_and_rebinding_switches_new_engagements() {
    let server = demo_server().await;
    server.say("demo", "demo-token", "old", "hi").await;

    let (_, copy) = server
        .admin(Method::POST, "/v1/graphs/demo-wellbeing/versions/v1/duplicate", None)
        .await;
    let vid = copy["version_id"].as_str().unwrap().to_string();
    let base = format!("/v1/graphs/demo-wellbeing/versions/{vid}");
    let (_, full) = server.admin(Method::GET, &base, None).await;
    let mut doc = full["document"].clone();
    doc["nodes"][format!("ob_hi@{vid}")]["text"] = json!(["Welcome to version two."]);
    server.admin(Method::PUT, &base, Some(json!({"document": doc}))).await;
    assert_eq!(server.admin(Method::POST, &format!("{base}/publish"), None).await.0, 200);
    let mut reg = demo_bot();
    reg.published_version = vid.clone();
    assert_eq!(server.admin(Method::PUT, "/v1/bots/demo", Some(serde_json::to_value(&reg).unwrap())).await.0, 200);

    let (_, fresh) = server.say("demo", "demo-token", "new", "hi").await;
    assert_eq!(texts(&fresh)[0], "Welcome to version two.");
    // The session that was mid-onboarding finishes on its original version.
    let (_, reply) = server.say("demo", "demo-token", "old", "19:00").await;
    assert_eq!(texts(&reply), ["Who would you like to chat with? Pick a buddy."]);
    let session = server.host().session("demo", "old").unwrap().unwrap();
    assert_eq!(session.version, "v1");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn http_sync_check_ins_ride_on_the_next_reply() {
    let server = demo_server().await;
    for text in ["hi", "19:00", "Aroha"] {
        server.say("demo", "demo-token", "u1", text).await;
    }
    server.clock.advance(chrono::Duration::hours(10));
    assert_eq!(server.tick(), 1);
    assert!(server.state.outbox.queued("demo", "u1") > 0);
    // The queued check-in comes along in `proactive`.
    let (_, reply) = server.say("demo", "demo-token", "u1", "fine").await;
    let proactive: Vec<&str> = reply["proactive"].as_array().unwrap().iter().filter_map(|m| m["body"].as_str()).collect();
    assert!(proactive.contains(&"On a scale of 1 to 5, how stressed do you feel right now?"), "{reply}");
    assert_eq!(server.state.outbox.queued("demo", "u1"), 0);
}

type Received = Arc<Mutex<Vec<(Option<String>, Value)>>>;

async fn webhook_receiver() -> (String, Received, tokio::task::JoinHandle<()>) {
    let received: Received = Arc::default();
    let sink = received.clone();
    let app = Router::new().route(
        "/hook",
        post(move |headers: HeaderMap, Json(body): Json<Value>| {
            let sink = sink.clone();
            async move {
                let auth = headers.get("authorization").and_then(|v| v.to_str().ok()).map(String::from);
                sink.lock().unwrap().push((auth, body));
                "ok"
            }
        }),
    );
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let url = format!("http://{}/hook", listener.local_addr().unwrap());
    let task = tokio::spawn(async move {
        axum::serve(listener, app).await.unwrap();
    });
    (url, received, task)
}

async fn wait_for(received: &Received, n: usize) -> Vec<(Option<String>, Value)> {
    for _ in 0..100 {
        if received.lock().unwrap().len() >= n {
            break;
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    received.lock().unwrap().clone()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn webhook_bots_ack_and_post_replies() {
    let (url, received, _receiver) = webhook_receiver().await;
    let store = Arc::new(ContentStore::in_memory(true));
    let mut bot = demo_bot();
    bot.bot_id = "hooked".into();
    bot.channel.kind = ChannelKind::Webhook;
    bot.channel.token = "hook-token".into();
    bot.channel.webhook_url = Some(url);
    bot.published_version = publish(&store, &fixture("demo/graph.json"));
    let server = spawn(store, vec![bot]).await;

    let (status, ack) = server.say("hooked", "hook-token", "u1", "hi").await;
    assert_eq!((status, ack["status"].as_str()), (202, Some("accepted")));
    let got = wait_for(&received, 1).await;
    assert_eq!(got.len(), 1);
    let (auth, payload) = &got[0];
    assert_eq!(auth.as_deref(), Some("Bearer hook-token"));
    assert_eq!(payload["bot_id"], "hooked");
    assert_eq!(payload["user_id"], "u1");
    assert_eq!(payload["messages"].as_array().unwrap().len(), 3);

    for text in ["19:00", "Aroha"] {
        server.say("hooked", "hook-token", "u1", text).await;
    }
    let before = wait_for(&received, 3).await.len();
    server.clock.advance(chrono::Duration::hours(10));
    assert_eq!(server.tick(), 1);
    let got = wait_for(&received, before + 1).await;
    assert_eq!(got.len(), before + 1, "check-in was not posted");
    let last = texts(&got[before].1);
    assert!(last.contains(&"On a scale of 1 to 5, how stressed do you feel right now?".to_string()), "{last:?}");
}
