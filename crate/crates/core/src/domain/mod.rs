//! Shared vocabulary: addresses, templates, batches, campaigns and the
//! sending constraints every other module works against.

mod address;
mod batch;
mod template;
mod time;

pub use address::{validate_address, EmailAddress, SyntaxError, MAX_ADDRESS_LEN};
pub use batch::{dedupe_recipients, plan_batches, Batch, RecipientEntry};
pub use template::{
    is_placeholder_name, placeholders, render_str, render_template, RenderError, Rendered, Template, Variables,
};
pub use time::{duration_micros_ceil, Timestamp};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Hard upper bound on recipients per batch unless explicitly overridden.
pub const DEFAULT_MAX_BATCH_SIZE: u32 = 50;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DomainError {
    #[error("campaign has no recipients")]
    EmptyCampaign,
    #[error("invalid constraints: {0}")]
    InvalidConstraints(&'static str),
    #[error("illegal campaign state transition {from:?} -> {to:?}")]
    IllegalTransition { from: CampaignState, to: CampaignState },
}

/// Account-level sending limits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Constraints {
    pub max_send_rate_per_s: f64,
    pub daily_quota: u64,
    pub payload_limit_bytes: usize,
    pub max_batch_size: u32,
    /// Permits `max_batch_size` above 50.
    pub allow_large_batches: bool,
}

impl Default for Constraints {
    fn default() -> Self {
        Constraints {
            max_send_rate_per_s: 14.0,
            daily_quota: 50_000,
            payload_limit_bytes: 5120,
            max_batch_size: DEFAULT_MAX_BATCH_SIZE,
            allow_large_batches: false,
        }
    }
}

impl Constraints {
    pub fn validate(&self) -> Result<(), DomainError> {
        if !(self.max_send_rate_per_s.is_finite() && self.max_send_rate_per_s > 0.0) {
            return Err(DomainError::InvalidConstraints("max_send_rate_per_s must be > 0"));
        }
        if self.daily_quota == 0 {
            return Err(DomainError::InvalidConstraints("daily_quota must be > 0"));
        }
        if self.payload_limit_bytes == 0 {
            return Err(DomainError::InvalidConstraints("payload_limit_bytes must be > 0"));
        }
        if self.max_batch_size == 0 {
            return Err(DomainError::InvalidConstraints("max_batch_size must be > 0"));
        }
        if self.max_batch_size > DEFAULT_MAX_BATCH_SIZE && !self.allow_large_batches {
            return Err(DomainError::InvalidConstraints("max_batch_size above 50 requires allow_large_batches"));
        }
        Ok(())
    }
}

/// A validated bulk-send request. Recipients are already deduplicated.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CampaignRequest {
    pub from: EmailAddress,
    pub subject: String,
    pub html_body: String,
    pub recipients: Vec<RecipientEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BounceType {
    Permanent,
    Transient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CampaignState {
    Queued,
    Sending,
    Complete,
    Failed,
}

impl CampaignState {
    pub fn can_transition_to(self, to: CampaignState) -> bool {
        use CampaignState::*;
        matches!((self, to), (Queued, Sending) | (Queued, Failed) | (Sending, Complete) | (Sending, Failed))
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, CampaignState::Complete | CampaignState::Failed)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CampaignCounts {
    pub total: u64,
    pub sent: u64,
    pub suppressed_skipped: u64,
    pub render_failed: u64,
    pub bounced: u64,
    pub duplicates_removed: u64,
    /// Recipients left unsent because the daily quota ran out mid-campaign.
    pub deferred: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Campaign {
    pub campaign_id: String,
    pub request: CampaignRequest,
    pub state: CampaignState,
    pub failure_reason: Option<String>,
    pub counts: CampaignCounts,
    pub submitted_at: Timestamp,
    pub completed_at: Option<Timestamp>,
    pub template_id: String,
    pub batch_count: u32,
    /// Batches durably enqueued so far; lets preprocessing resume.
    pub enqueued_batches: u32,
    pub final_batch_acked: bool,
    pub template_deleted: bool,
    pub last_send_at: Option<Timestamp>,
    pub trace_id: String,
}

impl Campaign {
    pub fn transition(&mut self, to: CampaignState) -> Result<(), DomainError> {
        if !self.state.can_transition_to(to) {
            return Err(DomainError::IllegalTransition { from: self.state, to });
        }
        self.state = to;
        Ok(())
    }

    pub fn template(&self) -> Template {
        Template {
            template_id: self.template_id.clone(),
            subject_part: self.request.subject.clone(),
            html_part: self.request.html_body.clone(),
            created_at: self.submitted_at,
        }
    }
}
