//! Customer profiles with per-category consent and retention.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::CustomerId;
use crate::Millis;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DataCategory {
    Identity,
    Transactional,
    Conversational,
    Visual,
    Sentiment,
}

impl DataCategory {
    pub const ALL: [DataCategory; 5] = [
        DataCategory::Identity,
        DataCategory::Transactional,
        DataCategory::Conversational,
        DataCategory::Visual,
        DataCategory::Sentiment,
    ];
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProfileError {
    #[error("consent withheld for {0:?} data")]
    ConsentDenied(DataCategory),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub category: DataCategory,
    pub key: String,
    pub value: String,
    pub recorded_at: Millis,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CustomerProfile {
    pub customer_id: CustomerId,
    pub display_name: String,
    pub locale: String,
    /// Missing categories default to consent granted.
    pub consent: BTreeMap<DataCategory, bool>,
    pub facts: Vec<Fact>,
}

impl CustomerProfile {
    pub fn new(
        customer_id: CustomerId,
        display_name: impl Into<String>,
        locale: impl Into<String>,
    ) -> Self {
        Self {
            customer_id,
            display_name: display_name.into(),
            locale: locale.into(),
            consent: BTreeMap::new(),
            facts: Vec::new(),
        }
    }

    pub fn consents_to(&self, category: DataCategory) -> bool {
        self.consent.get(&category).copied().unwrap_or(true)
    }

    pub fn set_consent(&mut self, category: DataCategory, value: bool) {
        self.consent.insert(category, value);
    }

    /// Stores a fact if the category is consented.
    pub fn remember(
        &mut self,
        category: DataCategory,
        key: impl Into<String>,
        value: impl Into<String>,
        now: Millis,
    ) -> Result<(), ProfileError> {
        if !self.consents_to(category) {
            return Err(ProfileError::ConsentDenied(category));
        }
        self.facts.push(Fact {
            category,
            key: key.into(),
            value: value.into(),
            recorded_at: now,
        });
        Ok(())
    }

    /// Most recent value recorded under `key`.
    pub fn recall(&self, key: &str) -> Option<&str> {
        self.facts
            .iter()
            .rev()
            .find(|f| f.key == key)
            .map(|f| f.value.as_str())
    }

    pub fn purge_expired(&mut self, policy: &RetentionPolicy, now: Millis) -> usize {
        let before = self.facts.len();
        self.facts.retain(|f| !policy.is_expired(f, now));
        before - self.facts.len()
    }

    /// Drops every fact of `category` and withdraws consent for it.
    pub fn forget(&mut self, category: DataCategory) -> usize {
        let before = self.facts.len();
        self.facts.retain(|f| f.category != category);
        self.consent.insert(category, false);
        before - self.facts.len()
    }
}

const DAY_S: u64 = 24 * 60 * 60;

/// Time-to-live per category in seconds; `None` keeps forever.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetentionPolicy {
    pub ttl_seconds: BTreeMap<DataCategory, Option<u64>>,
}

impl Default for RetentionPolicy {
    fn default() -> Self {
        let ttl_seconds = BTreeMap::from([
            (DataCategory::Identity, None),
            (DataCategory::Transactional, Some(90 * DAY_S)),
            (DataCategory::Conversational, Some(30 * DAY_S)),
            (DataCategory::Visual, Some(7 * DAY_S)),
            (DataCategory::Sentiment, Some(7 * DAY_S)),
        ]);
        Self { ttl_seconds }
    }
}

impl RetentionPolicy {
    pub fn ttl(&self, category: DataCategory) -> Option<u64> {
        self.ttl_seconds.get(&category).copied().flatten()
    }

    pub fn validate(&self) -> Result<(), String> {
        match self.ttl_seconds.iter().find(|(_, ttl)| **ttl == Some(0)) {
            Some((cat, _)) => Err(format!("ttl for {cat:?} must be positive or unlimited")),
            None => Ok(()),
        }
    }

    pub fn is_expired(&self, fact: &Fact, now: Millis) -> bool {
        match self.ttl(fact.category) {
            None => false,
            Some(ttl) => now.saturating_sub(fact.recorded_at) > ttl * 1000,
        }
    }
}
