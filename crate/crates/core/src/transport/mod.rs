//! Delivery backends and the event topic they publish outcomes to.
//!
//! A transport turns a rendered message into a message id plus the delivery
//! events that will follow (delivery, bounce, complaint, open). The caller
//! publishes those events on the [`EventTopic`] at their `occurred_at`.

mod mock;
mod smtp;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{BounceType, EmailAddress, Rendered, Timestamp};
use crate::runtime::{Payload, Runtime, RuntimeError};

pub use mock::{EventStep, Matcher, MockTransport, OutcomeRule, RuleError, RuleSet};
pub use smtp::{SmtpConfig, SmtpTransport, SMTP_PASS_ENV, SMTP_USER_ENV};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EventType {
    Delivery,
    Bounce,
    Complaint,
    Open,
}

impl EventType {
    pub const ALL: [EventType; 4] = [EventType::Delivery, EventType::Bounce, EventType::Complaint, EventType::Open];

    pub fn as_str(self) -> &'static str {
        match self {
            EventType::Delivery => "Delivery",
            EventType::Bounce => "Bounce",
            EventType::Complaint => "Complaint",
            EventType::Open => "Open",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeliveryEvent {
    pub event_type: EventType,
    pub address: EmailAddress,
    pub campaign_id: String,
    pub bounce_type: Option<BounceType>,
    pub occurred_at: Timestamp,
    pub message_id: String,
}

impl DeliveryEvent {
    /// `bounce_type` is present exactly for bounces.
    pub fn is_well_formed(&self) -> bool {
        (self.event_type == EventType::Bounce) == self.bounce_type.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutgoingMessage {
    pub campaign_id: String,
    pub from: EmailAddress,
    pub to: EmailAddress,
    pub rendered: Rendered,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SendReceipt {
    pub message_id: String,
    /// Outcome events in the order they should be published.
    pub events: Vec<DeliveryEvent>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    #[error("transport unavailable: {0}")]
    TransportUnavailable(String),
    #[error("rendered message is {size} bytes, limit is {limit}")]
    PayloadTooLarge { size: usize, limit: usize },
}

pub trait Transport: Send + Sync {
    fn send(&self, msg: &OutgoingMessage, now: Timestamp) -> Result<SendReceipt, TransportError>;
}

/// Size re-check every transport performs before sending.
pub fn check_payload(msg: &OutgoingMessage, limit: usize) -> Result<(), TransportError> {
    let size = msg.rendered.size_bytes();
    if size > limit {
        return Err(TransportError::PayloadTooLarge { size, limit });
    }
    Ok(())
}

/// The configuration-set topic that fans delivery events out to functions.
#[derive(Clone)]
pub struct EventTopic {
    runtime: Runtime,
    name: String,
}

impl EventTopic {
    pub const DEFAULT_NAME: &'static str = "delivery-events";

    pub fn new(runtime: Runtime, name: impl Into<String>) -> Self {
        EventTopic { runtime, name: name.into() }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn subscribe(&self, function: &str) -> Result<(), RuntimeError> {
        self.runtime.subscribe(&self.name, function)
    }

    /// Publishes now. Events for one address reach each subscriber in
    /// publication order.
    pub fn publish(&self, event: DeliveryEvent) {
        let key = event.address.canonical();
        self.runtime.publish(&self.name, &key, Payload::Event(event));
    }

    /// Publishes each event when the clock reaches its `occurred_at`.
    pub fn publish_at_occurrence(&self, events: Vec<DeliveryEvent>) {
        for event in events {
            let topic = self.clone();
            let at = event.occurred_at;
            self.runtime.schedule_at(at, move || topic.publish(event));
        }
    }
}
