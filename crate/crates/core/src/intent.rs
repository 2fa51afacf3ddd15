//! Built-in intent matcher and risk-phrase detection.
//!
//! Scoring is phrase coverage over token sets: the fraction of a phrase's
//! distinct tokens that appear in the input. Short canonical phrases thus
//! match inside longer utterances. [`IntentMatcher`] is the seam where an
//! external NLU service could be plugged in instead.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

pub const DEFAULT_THRESHOLD: f64 = 0.75;

/// Applies full Unicode case folding, strips punctuation and splits on whitespace.
pub fn normalize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|word| {
            caseless::default_case_fold_str(word)
                .chars()
                .filter(|c| c.is_alphanumeric())
                .collect::<String>()
        })
        .filter(|t| !t.is_empty())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntentDef {
    pub name: String,
    pub phrases: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntentMatch {
    pub intent: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CatalogError {
    #[error("duplicate intent {0}")]
    DuplicateIntent(String),
    #[error("intent {0} has no phrases")]
    NoPhrases(String),
    #[error("risk phrase {0:?} has no words")]
    EmptyRiskPhrase(String),
}

pub trait IntentMatcher: Send + Sync {
    /// Best intent among `candidates` (names), or `None` below threshold.
    fn best_match(&self, text: &str, candidates: &[&str]) -> Option<IntentMatch>;
}

#[derive(Debug, Clone)]
struct CompiledIntent {
    name: String,
    phrases: Vec<BTreeSet<String>>,
}

/// Token-overlap matcher over a fixed catalog.
#[derive(Debug, Clone)]
pub struct IntentCatalog {
    intents: Vec<CompiledIntent>,
    threshold: f64,
}

impl IntentCatalog {
    pub fn new(defs: &[IntentDef], threshold: f64) -> Result<IntentCatalog, CatalogError> {
        let mut intents: Vec<CompiledIntent> = Vec::with_capacity(defs.len());
        for def in defs {
            if intents.iter().any(|i| i.name == def.name) {
                return Err(CatalogError::DuplicateIntent(def.name.clone()));
            }
            if def.phrases.is_empty() {
                return Err(CatalogError::NoPhrases(def.name.clone()));
            }
            let phrases = def
                .phrases
                .iter()
                .map(|p| normalize(p).into_iter().collect::<BTreeSet<_>>())
                .filter(|p| !p.is_empty())
                .collect();
            intents.push(CompiledIntent {
                name: def.name.clone(),
                phrases,
            });
        }
        Ok(IntentCatalog { intents, threshold })
    }

    pub fn empty() -> IntentCatalog {
        IntentCatalog {
            intents: Vec::new(),
            threshold: DEFAULT_THRESHOLD,
        }
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    fn score_tokens(input: &BTreeSet<String>, phrase: &BTreeSet<String>) -> f64 {
        let shared = phrase.intersection(input).count();
        if shared == 0 {
            return 0.0;
        }
        shared as f64 / phrase.len() as f64
    }

    fn best_in(&self, text: &str, mut keep: impl FnMut(&str) -> bool) -> Option<IntentMatch> {
        let input: BTreeSet<String> = normalize(text).into_iter().collect();
        let mut best: Option<(&CompiledIntent, f64)> = None;
        for intent in self.intents.iter().filter(|i| keep(&i.name)) {
            let score = intent
                .phrases
                .iter()
                .map(|p| Self::score_tokens(&input, p))
                .fold(0.0, f64::max);
            if score >= self.threshold && score > 0.0 && best.is_none_or(|(_, s)| score > s) {
                best = Some((intent, score));
            }
        }
        best.map(|(i, score)| IntentMatch {
            intent: i.name.clone(),
            score,
        })
    }

    /// Best intent over the whole catalog.
    pub fn match_intent(&self, text: &str) -> Option<IntentMatch> {
        self.best_in(text, |_| true)
    }
}

impl IntentMatcher for IntentCatalog {
    fn best_match(&self, text: &str, candidates: &[&str]) -> Option<IntentMatch> {
        self.best_in(text, |name| candidates.contains(&name))
    }
}

/// Convenience wrapper: one-off match against a catalog slice.
pub fn match_intent(text: &str, catalog: &[IntentDef], threshold: f64) -> Option<IntentMatch> {
    IntentCatalog::new(catalog, threshold).ok()?.match_intent(text)
}

/// Phrases whose occurrence in a message triggers escalation.
#[derive(Debug, Clone, Default)]
pub struct RiskLexicon {
    phrases: Vec<Vec<String>>,
}

impl RiskLexicon {
    pub fn new<S: AsRef<str>>(phrases: &[S]) -> Result<RiskLexicon, CatalogError> {
        let phrases = phrases
            .iter()
            .map(|p| {
                let tokens = normalize(p.as_ref());
                if tokens.is_empty() {
                    Err(CatalogError::EmptyRiskPhrase(p.as_ref().to_string()))
                } else {
                    Ok(tokens)
                }
            })
            .collect::<Result<_, _>>()?;
        Ok(RiskLexicon { phrases })
    }

    pub fn is_empty(&self) -> bool {
        self.phrases.is_empty()
    }

    /// True iff some phrase occurs as a contiguous run of the message tokens.
    pub fn detect(&self, text: &str) -> bool {
        let tokens = normalize(text);
        self.phrases
            .iter()
            .any(|phrase| tokens.windows(phrase.len()).any(|w| w == phrase.as_slice()))
    }
}

pub fn detect_risk(text: &str, lexicon: &RiskLexicon) -> bool {
    lexicon.detect(text)
}
