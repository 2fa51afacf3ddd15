//! Outbound delivery: webhook posts and the per-user outbox used by
//! synchronous channels for check-in messages.

use std::collections::HashMap;
use std::sync::Mutex;
use std::time::Duration;

use convograph_core::engine::OutboundMessage;
use convograph_core::host::Delivery;
use convograph_core::store::BotRegistration;
use serde::{Deserialize, Serialize};

/// Attempts per webhook delivery, including the first.
const WEBHOOK_ATTEMPTS: u32 = 3;

/// JSON body posted to a bot's webhook.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WebhookPayload {
    pub bot_id: String,
    pub user_id: String,
    pub messages: Vec<OutboundMessage>,
}

pub struct Outbox {
    client: reqwest::Client,
    pending: Mutex<HashMap<(String, String), Vec<OutboundMessage>>>,
}

impl Outbox {
    pub fn new(client: reqwest::Client) -> Outbox {
        Outbox {
            client,
            pending: Mutex::new(HashMap::new()),
        }
    }

    fn pending(&self) -> std::sync::MutexGuard<'_, HashMap<(String, String), Vec<OutboundMessage>>> {
        self.pending.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Queues messages for the user's next synchronous request.
    pub fn push(&self, bot_id: &str, user_id: &str, messages: Vec<OutboundMessage>) {
        self.pending()
            .entry((bot_id.to_string(), user_id.to_string()))
            .or_default()
            .extend(messages);
    }

    /// Drains queued messages for one user.
    pub fn take(&self, bot_id: &str, user_id: &str) -> Vec<OutboundMessage> {
        self.pending()
            .remove(&(bot_id.to_string(), user_id.to_string()))
            .unwrap_or_default()
    }

    pub fn queued(&self, bot_id: &str, user_id: &str) -> usize {
        self.pending()
            .get(&(bot_id.to_string(), user_id.to_string()))
            .map_or(0, Vec::len)
    }

    /// Posts a delivery to the bot's webhook in the background. Must be
    /// called from inside a tokio runtime.
    pub fn deliver(&self, registration: &BotRegistration, delivery: Delivery) {
        let Some(url) = registration.channel.webhook_url.clone() else {
            tracing::warn!(bot = %registration.bot_id, "webhook channel without webhook_url; dropping delivery");
            return;
        };
        if delivery.messages.is_empty() {
            return;
        }
        let payload = WebhookPayload {
            bot_id: delivery.bot_id,
            user_id: delivery.address,
            messages: delivery.messages,
        };
        let client = self.client.clone();
        let token = registration.channel.token.clone();
        tokio::spawn(async move {
            for attempt in 1..=WEBHOOK_ATTEMPTS {
                let result = client
                    .post(&url)
                    .bearer_auth(&token)
                    .json(&payload)
                    .timeout(Duration::from_secs(10))
                    .send()
                    .await
                    .and_then(|r| r.error_for_status());
                match result {
                    Ok(_) => return,
                    Err(e) => {
                        tracing::warn!(bot = %payload.bot_id, attempt, error = %e, "webhook delivery failed");
                        tokio::time::sleep(Duration::from_millis(200 * u64::from(attempt))).await;
                    }
                }
            }
            tracing::error!(bot = %payload.bot_id, "webhook delivery abandoned");
        });
    }
}
