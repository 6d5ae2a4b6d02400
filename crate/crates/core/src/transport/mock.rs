//! Rule-driven mock transport.
//!
//! Each send is classified by the first matching [`OutcomeRule`]; the rule's
//! event script becomes the send's delivery events. Probability matchers and
//! open events draw from seeded generators, so a fixed seed, rule set and
//! send order always yield the same event stream.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{check_payload, DeliveryEvent, EventType, OutgoingMessage, SendReceipt, Transport, TransportError};
use crate::domain::{BounceType, EmailAddress, Timestamp};

pub const DELIVERY_DELAY_MS: u64 = 10;
pub const BOUNCE_DELAY_MS: u64 = 200;
pub const COMPLAINT_DELAY_MS: u64 = 1000;
pub const OPEN_DELAY_MS: u64 = 1000;

#[derive(Debug, Error)]
pub enum RuleError {
    #[error("reading rules: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing rules: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid rule {index}: {reason}")]
    Invalid { index: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matcher {
    DomainSuffix(String),
    ExactAddress(String),
    Probability { p: f64, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventStep {
    #[serde(rename = "type")]
    pub event_type: EventType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounce_type: Option<BounceType>,
    #[serde(default)]
    pub delay_ms: u64,
}

impl EventStep {
    pub fn delivery() -> Self {
        EventStep { event_type: EventType::Delivery, bounce_type: None, delay_ms: DELIVERY_DELAY_MS }
    }

    pub fn bounce(kind: BounceType) -> Self {
        EventStep { event_type: EventType::Bounce, bounce_type: Some(kind), delay_ms: BOUNCE_DELAY_MS }
    }

    pub fn complaint() -> Self {
        EventStep { event_type: EventType::Complaint, bounce_type: None, delay_ms: COMPLAINT_DELAY_MS }
    }

    pub fn open() -> Self {
        EventStep { event_type: EventType::Open, bounce_type: None, delay_ms: OPEN_DELAY_MS }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRule {
    #[serde(rename = "match")]
    pub matcher: Matcher,
    pub events: Vec<EventStep>,
}

impl OutcomeRule {
    pub fn new(matcher: Matcher, events: Vec<EventStep>) -> Self {
        OutcomeRule { matcher, events }
    }

    fn validate(&self, index: usize) -> Result<(), RuleError> {
        let invalid = |reason: &str| RuleError::Invalid { index, reason: reason.to_owned() };
        let terminal =
            self.events.iter().filter(|e| matches!(e.event_type, EventType::Delivery | EventType::Bounce)).count();
        if terminal != 1 {
            return Err(invalid("script needs exactly one Delivery or Bounce event"));
        }
        for e in &self.events {
            if (e.event_type == EventType::Bounce) != e.bounce_type.is_some() {
                return Err(invalid("bounce_type must be given exactly for Bounce events"));
            }
        }
        if let Matcher::Probability { p, .. } = self.matcher {
            if !(0.0..=1.0).contains(&p) {
                return Err(invalid("probability must be within [0, 1]"));
            }
        }
        Ok(())
    }
}

/// Ordered outcome rules plus the fallback behaviour.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RuleSet {
    pub rules: Vec<OutcomeRule>,
    /// Appends the reserved `*.sim` domain rules after `rules`.
    pub include_reserved: bool,
    /// Chance that an unmatched delivery is followed by an open event.
    pub p_open: f64,
    pub seed: u64,
}

impl Default for RuleSet {
    fn default() -> Self {
        RuleSet { rules: Vec::new(), include_reserved: true, p_open: 0.0, seed: 0 }
    }
}

impl RuleSet {
    /// Reserved test domains: `bounce.sim`, `soft.sim`, `complaint.sim`, `ok.sim`.
    pub fn reserved() -> Vec<OutcomeRule> {
        use Matcher::DomainSuffix;
        vec![
            OutcomeRule::new(DomainSuffix("bounce.sim".into()), vec![EventStep::bounce(BounceType::Permanent)]),
            OutcomeRule::new(DomainSuffix("soft.sim".into()), vec![EventStep::bounce(BounceType::Transient)]),
            OutcomeRule::new(DomainSuffix("complaint.sim".into()), vec![EventStep::delivery(), EventStep::complaint()]),
            OutcomeRule::new(DomainSuffix("ok.sim".into()), vec![EventStep::delivery()]),
        ]
    }

    pub fn with_rule(mut self, rule: OutcomeRule) -> Self {
        self.rules.push(rule);
        self
    }

    pub fn from_json(text: &str) -> Result<Self, RuleError> {
        let set: RuleSet = serde_json::from_str(text)?;
        set.validate()?;
        Ok(set)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, RuleError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), RuleError> {
        for (i, r) in self.rules.iter().enumerate() {
            r.validate(i)?;
        }
        if !(0.0..=1.0).contains(&self.p_open) {
            return Err(RuleError::Invalid { index: usize::MAX, reason: "p_open must be within [0, 1]".into() });
        }
        Ok(())
    }

    fn effective(&self) -> Vec<OutcomeRule> {
        let mut rules = self.rules.clone();
        if self.include_reserved {
            rules.extend(Self::reserved());
        }
        rules
    }
}

struct CompiledRule {
    rule: OutcomeRule,
    rng: Option<Mutex<ChaCha8Rng>>,
}

pub struct MockTransport {
    rules: Vec<CompiledRule>,
    p_open: f64,
    open_rng: Mutex<ChaCha8Rng>,
    payload_limit: usize,
    next_id: AtomicU64,
    sends: AtomicU64,
}

impl MockTransport {
    pub fn new(rules: RuleSet, payload_limit: usize) -> Self {
        let compiled = rules
            .effective()
            .into_iter()
            .map(|rule| {
                let rng = match rule.matcher {
                    Matcher::Probability { seed, .. } => Some(Mutex::new(ChaCha8Rng::seed_from_u64(seed))),
                    _ => None,
                };
                CompiledRule { rule, rng }
            })
            .collect();
        MockTransport {
            rules: compiled,
            p_open: rules.p_open,
            open_rng: Mutex::new(ChaCha8Rng::seed_from_u64(rules.seed)),
            payload_limit,
            next_id: AtomicU64::new(1),
            sends: AtomicU64::new(0),
        }
    }

    pub fn send_count(&self) -> u64 {
        self.sends.load(Ordering::SeqCst)
    }

    /// Event script for `address`: the first matching rule's, else the
    /// fallback delivery with a possible open.
    fn classify(&self, address: &EmailAddress) -> Vec<EventStep> {
        for c in &self.rules {
            let hit = match &c.rule.matcher {
                Matcher::DomainSuffix(s) => address.domain_matches_suffix(s),
                Matcher::ExactAddress(a) => crate::domain::validate_address(a).map(|a| &a == address).unwrap_or(false),
                Matcher::Probability { p, .. } => {
                    let rng = c.rng.as_ref().expect("probability rule has rng");
                    rng.lock().expect("rng poisoned").gen::<f64>() < *p
                }
            };
            if hit {
                return c.rule.events.clone();
            }
        }
        let mut script = vec![EventStep::delivery()];
        if self.p_open > 0.0 && self.open_rng.lock().expect("rng poisoned").gen::<f64>() < self.p_open {
            script.push(EventStep::open());
        }
        script
    }
}

impl Transport for MockTransport {
    fn send(&self, msg: &OutgoingMessage, now: Timestamp) -> Result<SendReceipt, TransportError> {
        check_payload(msg, self.payload_limit)?;
        self.sends.fetch_add(1, Ordering::SeqCst);
        let message_id = format!("mock-{:010}", self.next_id.fetch_add(1, Ordering::SeqCst));
        let events = self
            .classify(&msg.to)
            .into_iter()
            .map(|step| DeliveryEvent {
                event_type: step.event_type,
                address: msg.to.clone(),
                campaign_id: msg.campaign_id.clone(),
                bounce_type: step.bounce_type,
                occurred_at: now + Duration::from_millis(step.delay_ms),
                message_id: message_id.clone(),
            })
            .collect();
        Ok(SendReceipt { message_id, events })
    }
}
