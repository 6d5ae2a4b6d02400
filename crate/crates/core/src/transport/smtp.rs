//! SMTP backend. A 250 reply is a delivery, 5xx a permanent bounce, 4xx a
//! transient one. Anything that prevents an SMTP reply (refused connection,
//! TLS failure, timeout) is reported as `TransportUnavailable`.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use lettre::message::header::ContentType;
use lettre::message::Mailbox;
use lettre::transport::smtp::authentication::Credentials;
use lettre::{Message, Transport as _};
use serde::{Deserialize, Serialize};

use super::{check_payload, DeliveryEvent, EventType, OutgoingMessage, SendReceipt, Transport, TransportError};
use crate::domain::{BounceType, Timestamp};

pub const SMTP_USER_ENV: &str = "MAILBURST_SMTP_USER";
pub const SMTP_PASS_ENV: &str = "MAILBURST_SMTP_PASS";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SmtpConfig {
    pub host: String,
    pub port: u16,
    /// Upgrade with STARTTLS. Off means plaintext, for local relays.
    pub starttls: bool,
    pub timeout_ms: u64,
}

impl Default for SmtpConfig {
    fn default() -> Self {
        SmtpConfig { host: "localhost".into(), port: 25, starttls: false, timeout_ms: 10_000 }
    }
}

pub struct SmtpTransport {
    inner: lettre::SmtpTransport,
    payload_limit: usize,
    next_id: AtomicU64,
}

impl SmtpTransport {
    /// Credentials come from the environment only.
    pub fn new(config: &SmtpConfig, payload_limit: usize) -> Result<Self, TransportError> {
        let builder = if config.starttls {
            lettre::SmtpTransport::starttls_relay(&config.host)
                .map_err(|e| TransportError::TransportUnavailable(e.to_string()))?
        } else {
            lettre::SmtpTransport::builder_dangerous(&config.host)
        };
        let mut builder = builder.port(config.port).timeout(Some(Duration::from_millis(config.timeout_ms)));
        if let (Ok(user), Ok(pass)) = (std::env::var(SMTP_USER_ENV), std::env::var(SMTP_PASS_ENV)) {
            builder = builder.credentials(Credentials::new(user, pass));
        }
        Ok(SmtpTransport { inner: builder.build(), payload_limit, next_id: AtomicU64::new(1) })
    }

    fn build_message(msg: &OutgoingMessage, message_id: &str) -> Result<Message, TransportError> {
        let mailbox = |a: &crate::domain::EmailAddress| {
            a.canonical()
                .parse::<Mailbox>()
                .map_err(|e| TransportError::TransportUnavailable(format!("address {a}: {e}")))
        };
        Message::builder()
            .from(mailbox(&msg.from)?)
            .to(mailbox(&msg.to)?)
            .subject(msg.rendered.subject.clone())
            .message_id(Some(format!("<{message_id}@mailburst>")))
            .header(ContentType::TEXT_HTML)
            .body(msg.rendered.body.clone())
            .map_err(|e| TransportError::TransportUnavailable(e.to_string()))
    }
}

/// Maps an SMTP failure to a bounce kind, or `None` when no reply code was
/// received.
pub(crate) fn classify_error(err: &lettre::transport::smtp::Error) -> Option<BounceType> {
    if err.is_permanent() {
        Some(BounceType::Permanent)
    } else if err.is_transient() {
        Some(BounceType::Transient)
    } else {
        None
    }
}

impl Transport for SmtpTransport {
    fn send(&self, msg: &OutgoingMessage, now: Timestamp) -> Result<SendReceipt, TransportError> {
        check_payload(msg, self.payload_limit)?;
        let message_id = format!("smtp-{:010}", self.next_id.fetch_add(1, Ordering::SeqCst));
        let email = Self::build_message(msg, &message_id)?;
        let (event_type, bounce_type) = match self.inner.send(&email) {
            Ok(_) => (EventType::Delivery, None),
            Err(e) => match classify_error(&e) {
                Some(kind) => (EventType::Bounce, Some(kind)),
                None => return Err(TransportError::TransportUnavailable(e.to_string())),
            },
        };
        let event = DeliveryEvent {
            event_type,
            address: msg.to.clone(),
            campaign_id: msg.campaign_id.clone(),
            bounce_type,
            occurred_at: now,
            message_id: message_id.clone(),
        };
        Ok(SendReceipt { message_id, events: vec![event] })
    }
}
