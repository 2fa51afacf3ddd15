//! Daily check-in scheduling.
//!
//! A config is due when it is active, has not fired on the user's current
//! local calendar day, and the local time has reached the chosen slot. A
//! slot missed earlier in the same day fires on the next tick; a slot missed
//! across midnight is skipped, so a user is never prompted twice in a day.

use std::collections::BTreeMap;
use std::sync::Mutex;

use chrono::{DateTime, Duration, FixedOffset, NaiveDate, NaiveDateTime, Timelike, Utc};
use serde::{Deserialize, Serialize};

pub const MINUTES_PER_DAY: u16 = 1440;

pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// Manually advanced clock for tests and simulation.
#[derive(Debug)]
pub struct VirtualClock {
    now: Mutex<DateTime<Utc>>,
}

impl VirtualClock {
    pub fn new(start: DateTime<Utc>) -> VirtualClock {
        VirtualClock {
            now: Mutex::new(start),
        }
    }

    /// Moves time forward; negative durations are ignored so reads stay monotone.
    pub fn advance(&self, by: Duration) -> DateTime<Utc> {
        let mut now = self.now.lock().expect("clock lock");
        if by > Duration::zero() {
            *now += by;
        }
        *now
    }

    pub fn set(&self, to: DateTime<Utc>) -> DateTime<Utc> {
        let mut now = self.now.lock().expect("clock lock");
        if to > *now {
            *now = to;
        }
        *now
    }
}

impl Clock for VirtualClock {
    fn now(&self) -> DateTime<Utc> {
        *self.now.lock().expect("clock lock")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckinConfig {
    pub bot_id: String,
    pub user_id: String,
    /// Minutes after local midnight, 0..=1439.
    pub time_of_day: u16,
    pub utc_offset_minutes: i32,
    pub active: bool,
    pub last_fired_date: Option<NaiveDate>,
}

impl CheckinConfig {
    fn offset(&self) -> FixedOffset {
        FixedOffset::east_opt(self.utc_offset_minutes * 60).expect("offset validated on insert")
    }

    pub fn local(&self, now: DateTime<Utc>) -> NaiveDateTime {
        now.with_timezone(&self.offset()).naive_local()
    }

    pub fn is_due(&self, now: DateTime<Utc>) -> bool {
        let local = self.local(now);
        let minute = (local.hour() * 60 + local.minute()) as u16;
        self.active && self.last_fired_date != Some(local.date()) && minute >= self.time_of_day
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SchedulerError {
    #[error("time of day {0} is outside 0..=1439")]
    TimeOutOfRange(u32),
    #[error("utc offset {0} minutes is out of range")]
    OffsetOutOfRange(i32),
}

pub fn format_time_of_day(minutes: u16) -> String {
    format!("{:02}:{:02}", minutes / 60, minutes % 60)
}

/// Check-in configs, at most one per (bot, user).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Scheduler {
    #[serde(with = "config_list")]
    configs: BTreeMap<(String, String), CheckinConfig>,
}

mod config_list {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(
        map: &BTreeMap<(String, String), CheckinConfig>,
        s: S,
    ) -> Result<S::Ok, S::Error> {
        s.collect_seq(map.values())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> Result<BTreeMap<(String, String), CheckinConfig>, D::Error> {
        let list = Vec::<CheckinConfig>::deserialize(d)?;
        Ok(list
            .into_iter()
            .map(|c| ((c.bot_id.clone(), c.user_id.clone()), c))
            .collect())
    }
}

impl Scheduler {
    pub fn new() -> Scheduler {
        Scheduler::default()
    }

    /// Upserts the user's check-in. If the slot has already passed today,
    /// the first fire is tomorrow.
    pub fn set_checkin(
        &mut self,
        bot_id: &str,
        user_id: &str,
        time_of_day: u32,
        utc_offset_minutes: i32,
        now: DateTime<Utc>,
    ) -> Result<CheckinConfig, SchedulerError> {
        if time_of_day >= u32::from(MINUTES_PER_DAY) {
            return Err(SchedulerError::TimeOutOfRange(time_of_day));
        }
        if FixedOffset::east_opt(utc_offset_minutes.saturating_mul(60)).is_none() {
            return Err(SchedulerError::OffsetOutOfRange(utc_offset_minutes));
        }
        let key = (bot_id.to_string(), user_id.to_string());
        let previous = self.configs.get(&key).and_then(|c| c.last_fired_date);
        let mut config = CheckinConfig {
            bot_id: bot_id.to_string(),
            user_id: user_id.to_string(),
            time_of_day: time_of_day as u16,
            utc_offset_minutes,
            active: true,
            last_fired_date: previous,
        };
        if config.is_due(now) {
            config.last_fired_date = Some(config.local(now).date());
        }
        self.configs.insert(key, config.clone());
        Ok(config)
    }

    /// Returns and marks every config due at `now`.
    pub fn due_engagements(&mut self, now: DateTime<Utc>) -> Vec<(String, String)> {
        let mut due = Vec::new();
        for (key, config) in self.configs.iter_mut() {
            if config.is_due(now) {
                config.last_fired_date = Some(config.local(now).date());
                due.push(key.clone());
            }
        }
        due
    }

    pub fn deactivate(&mut self, bot_id: &str, user_id: &str) -> bool {
        match self.configs.get_mut(&(bot_id.to_string(), user_id.to_string())) {
            Some(c) => {
                c.active = false;
                true
            }
            None => false,
        }
    }

    pub fn remove(&mut self, bot_id: &str, user_id: &str) -> Option<CheckinConfig> {
        self.configs.remove(&(bot_id.to_string(), user_id.to_string()))
    }

    pub fn get(&self, bot_id: &str, user_id: &str) -> Option<&CheckinConfig> {
        self.configs.get(&(bot_id.to_string(), user_id.to_string()))
    }

    pub fn configs_for<'a>(&'a self, bot_id: &'a str) -> impl Iterator<Item = &'a CheckinConfig> + 'a {
        self.configs.values().filter(move |c| c.bot_id == bot_id)
    }

    pub fn insert(&mut self, config: CheckinConfig) {
        self.configs
            .insert((config.bot_id.clone(), config.user_id.clone()), config);
    }

    pub fn len(&self) -> usize {
        self.configs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.configs.is_empty()
    }
}
