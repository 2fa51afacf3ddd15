//! Typed values held in a user's variable store.
//!
//! Numbers are fixed-point decimals with at most six fractional digits so
//! that equality in authored conditions is exact.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

const SCALE: i64 = 1_000_000;
const MAX_FRACTION_DIGITS: usize = 6;

/// Decimal number stored as an integer count of millionths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Number(i64);

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum NumberError {
    #[error("not a decimal number: {0:?}")]
    Malformed(String),
    #[error("more than {MAX_FRACTION_DIGITS} fractional digits in {0:?}")]
    TooPrecise(String),
    #[error("number out of range: {0:?}")]
    OutOfRange(String),
}

impl Number {
    pub const ZERO: Number = Number(0);

    pub fn from_int(n: i64) -> Option<Number> {
        n.checked_mul(SCALE).map(Number)
    }

    pub fn from_micros(micros: i64) -> Number {
        Number(micros)
    }

    pub fn micros(self) -> i64 {
        self.0
    }

    pub fn is_integral(self) -> bool {
        self.0 % SCALE == 0
    }

    /// Integral part, if the number has no fractional part.
    pub fn as_int(self) -> Option<i64> {
        self.is_integral().then_some(self.0 / SCALE)
    }

    pub fn to_f64(self) -> f64 {
        self.0 as f64 / SCALE as f64
    }

    pub(crate) fn from_json(n: &serde_json::Number) -> Result<Number, NumberError> {
        if let Some(i) = n.as_i64() {
            return Number::from_int(i).ok_or_else(|| NumberError::OutOfRange(n.to_string()));
        }
        // f64 Display never uses exponent notation, so this is a plain decimal.
        let f = n.as_f64().ok_or_else(|| NumberError::Malformed(n.to_string()))?;
        format!("{f}").parse()
    }

    pub(crate) fn to_json(self) -> serde_json::Value {
        match self.as_int() {
            Some(i) => serde_json::Value::from(i),
            None => serde_json::Value::from(self.to_f64()),
        }
    }
}

impl FromStr for Number {
    type Err = NumberError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let malformed = || NumberError::Malformed(s.to_string());
        let (negative, body) = match s.strip_prefix('-') {
            Some(rest) => (true, rest),
            None => (false, s),
        };
        let (int_part, frac_part) = match body.split_once('.') {
            Some((i, f)) => (i, Some(f)),
            None => (body, None),
        };
        if int_part.is_empty() || !int_part.bytes().all(|b| b.is_ascii_digit()) {
            return Err(malformed());
        }
        let mut micros: i64 = 0;
        for b in int_part.bytes() {
            micros = micros
                .checked_mul(10)
                .and_then(|m| m.checked_add(i64::from(b - b'0')))
                .ok_or_else(|| NumberError::OutOfRange(s.to_string()))?;
        }
        micros = micros
            .checked_mul(SCALE)
            .ok_or_else(|| NumberError::OutOfRange(s.to_string()))?;
        if let Some(frac) = frac_part {
            if frac.is_empty() || !frac.bytes().all(|b| b.is_ascii_digit()) {
                return Err(malformed());
            }
            if frac.len() > MAX_FRACTION_DIGITS {
                return Err(NumberError::TooPrecise(s.to_string()));
            }
            let mut f: i64 = 0;
            for b in frac.bytes() {
                f = f * 10 + i64::from(b - b'0');
            }
            f *= 10_i64.pow((MAX_FRACTION_DIGITS - frac.len()) as u32);
            micros += f;
        }
        Ok(Number(if negative { -micros } else { micros }))
    }
}

impl fmt::Display for Number {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = if self.0 < 0 { "-" } else { "" };
        let abs = self.0.unsigned_abs();
        let int = abs / SCALE as u64;
        let frac = abs % SCALE as u64;
        if frac == 0 {
            write!(f, "{sign}{int}")
        } else {
            let digits = format!("{frac:06}");
            write!(f, "{sign}{int}.{}", digits.trim_end_matches('0'))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarType {
    Number,
    Text,
    Boolean,
}

impl fmt::Display for VarType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VarType::Number => "number",
            VarType::Text => "text",
            VarType::Boolean => "boolean",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Value {
    Number(Number),
    Text(String),
    Bool(bool),
}

impl Value {
    pub fn var_type(&self) -> VarType {
        match self {
            Value::Number(_) => VarType::Number,
            Value::Text(_) => VarType::Text,
            Value::Bool(_) => VarType::Boolean,
        }
    }

    pub(crate) fn from_json(v: &serde_json::Value) -> Option<Value> {
        match v {
            serde_json::Value::Bool(b) => Some(Value::Bool(*b)),
            serde_json::Value::String(s) => Some(Value::Text(s.clone())),
            serde_json::Value::Number(n) => Number::from_json(n).ok().map(Value::Number),
            _ => None,
        }
    }

    pub(crate) fn to_json(&self) -> serde_json::Value {
        match self {
            Value::Number(n) => n.to_json(),
            Value::Text(s) => serde_json::Value::String(s.clone()),
            Value::Bool(b) => serde_json::Value::Bool(*b),
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Number(n) => n.fmt(f),
            Value::Text(s) => f.write_str(s),
            Value::Bool(b) => b.fmt(f),
        }
    }
}

impl Serialize for Value {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_json().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Value {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = serde_json::Value::deserialize(deserializer)?;
        Value::from_json(&raw)
            .ok_or_else(|| serde::de::Error::custom(format!("not a number, text or boolean: {raw}")))
    }
}

/// A user's variables, keyed by name.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VariableStore {
    values: BTreeMap<String, Value>,
}

impl VariableStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<&Value> {
        self.values.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.values.contains_key(name)
    }

    pub fn set(&mut self, name: impl Into<String>, value: Value) {
        self.values.insert(name.into(), value);
    }

    pub fn remove(&mut self, name: &str) -> Option<Value> {
        self.values.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Value)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

impl<K: Into<String>> FromIterator<(K, Value)> for VariableStore {
    fn from_iter<I: IntoIterator<Item = (K, Value)>>(iter: I) -> Self {
        VariableStore {
            values: iter.into_iter().map(|(k, v)| (k.into(), v)).collect(),
        }
    }
}
