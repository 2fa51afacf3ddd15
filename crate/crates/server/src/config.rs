//! Server configuration file and startup bootstrap.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use chrono::Utc;
use convograph_core::graph::load_graph;
use convograph_core::host::Host;
use convograph_core::store::{BotRegistration, ContentStore};
use serde::{Deserialize, Serialize};

pub const DATA_DIR_ENV: &str = "HEADLESS_DATA_DIR";

fn default_redaction() -> bool {
    true
}

fn default_tick_seconds() -> u64 {
    60
}

/// One bot entry. `graph_file`, if present, is published on startup (or
/// matched to an identical published version) and overrides
/// `published_version`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BotConfig {
    #[serde(flatten)]
    pub registration: BotRegistration,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub graph_file: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ServerConfig {
    #[serde(default)]
    pub port: u16,
    pub admin_token: String,
    pub data_dir: PathBuf,
    #[serde(default = "default_redaction")]
    pub redaction: bool,
    #[serde(default = "default_tick_seconds")]
    pub tick_seconds: u64,
    #[serde(default)]
    pub bots: Vec<BotConfig>,
}

impl ServerConfig {
    /// Reads the file, resolves relative paths against its directory and
    /// applies the data-dir environment override.
    pub fn load(path: &Path) -> anyhow::Result<ServerConfig> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut config: ServerConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(dir) = std::env::var_os(DATA_DIR_ENV) {
            config.data_dir = PathBuf::from(dir);
        } else if config.data_dir.is_relative() {
            config.data_dir = base.join(&config.data_dir);
        }
        for bot in &mut config.bots {
            if let Some(file) = &bot.graph_file {
                if file.is_relative() {
                    bot.graph_file = Some(base.join(file));
                }
            }
        }
        if config.admin_token.is_empty() {
            bail!("admin_token must not be empty");
        }
        Ok(config)
    }
}

/// Publishes `graph_file` unless an identical published version exists;
/// returns that version id.
pub fn ensure_published(store: &ContentStore, graph_file: &Path) -> anyhow::Result<String> {
    let text = std::fs::read_to_string(graph_file).with_context(|| format!("reading {}", graph_file.display()))?;
    let graph = load_graph(&text).with_context(|| format!("loading {}", graph_file.display()))?;
    let canonical = graph.to_json_string();
    for version in store.list_versions()? {
        if version.is_published() && version.document == canonical {
            return Ok(version.version_id);
        }
    }
    let draft = store.create_draft(&canonical, Utc::now())?;
    store
        .publish(&draft.version_id)
        .with_context(|| format!("publishing {}", graph_file.display()))?;
    Ok(draft.version_id)
}

/// Registers every configured bot with the host.
pub fn bootstrap(host: &Host, config: &ServerConfig) -> anyhow::Result<()> {
    for bot in &config.bots {
        let mut registration = bot.registration.clone();
        if let Some(file) = &bot.graph_file {
            registration.published_version = ensure_published(host.store(), file)?;
        }
        host.register_bot(registration)
            .with_context(|| format!("registering bot {}", bot.registration.bot_id))?;
    }
    Ok(())
}
