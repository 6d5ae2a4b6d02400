//! HTTP front door. [`Gateway`] holds the request logic and is `Send +
//! Sync`; [`router`] binds it to axum routes.

mod http;

use std::collections::BTreeMap;
use std::sync::mpsc::Sender;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use http::router;

use crate::bounce::{list_bounces, BounceError};
use crate::domain::{
    dedupe_recipients, is_placeholder_name, render_template, validate_address, Campaign, CampaignCounts,
    CampaignRequest, CampaignState, RecipientEntry, Template, Timestamp, Variables,
};
use crate::observe::{trace_id, TraceSegment};
use crate::store::{BounceRecordDoc, StoreError};
use crate::system::{Command, Services};

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct SubmitRequest {
    pub from: String,
    #[serde(default)]
    pub subject: String,
    #[serde(default)]
    pub html_body: String,
    pub recipients: Vec<RawRecipient>,
}

/// A recipient given either as a bare address or with variables.
#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(untagged)]
pub enum RawRecipient {
    Address(String),
    Entry {
        address: String,
        #[serde(default)]
        variables: Variables,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejected {
    pub address: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmitResponse {
    pub campaign_id: String,
    pub accepted_count: u64,
    pub duplicates_removed: u64,
    pub rejected: Vec<Rejected>,
    pub batch_count: u32,
}

/// Campaign status without the recipient list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CampaignView {
    pub campaign_id: String,
    pub state: CampaignState,
    pub failure_reason: Option<String>,
    pub counts: CampaignCounts,
    pub from: String,
    pub subject: String,
    pub submitted_at: Timestamp,
    pub completed_at: Option<Timestamp>,
    pub batch_count: u32,
    pub trace_id: String,
}

impl CampaignView {
    pub fn of(c: &Campaign) -> Self {
        CampaignView {
            campaign_id: c.campaign_id.clone(),
            state: c.state,
            failure_reason: c.failure_reason.clone(),
            counts: c.counts.clone(),
            from: c.request.from.canonical(),
            subject: c.request.subject.clone(),
            submitted_at: c.submitted_at,
            completed_at: c.completed_at,
            batch_count: c.batch_count,
            trace_id: c.trace_id.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceView {
    pub trace_id: String,
    pub campaign_id: String,
    pub segments: Vec<TraceSegment>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiError {
    pub status: u16,
    pub code: &'static str,
    pub detail: String,
}

impl ApiError {
    fn new(status: u16, code: &'static str, detail: impl Into<String>) -> Self {
        ApiError { status, code, detail: detail.into() }
    }

    fn not_found(what: &str, id: &str) -> Self {
        Self::new(404, "NotFound", format!("{what} {id} not found"))
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound(id) => Self::new(404, "NotFound", id),
            other => Self::new(503, "StoreUnavailable", other.to_string()),
        }
    }
}

impl std::fmt::Display for ApiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} {}: {}", self.status, self.code, self.detail)
    }
}

impl std::error::Error for ApiError {}

#[derive(Clone)]
pub struct Gateway {
    svc: Arc<Services>,
    commands: Sender<Command>,
}

impl Gateway {
    pub fn new(svc: Arc<Services>, commands: Sender<Command>) -> Self {
        Gateway { svc, commands }
    }

    pub fn services(&self) -> &Arc<Services> {
        &self.svc
    }

    pub fn now(&self) -> Timestamp {
        self.svc.now()
    }

    pub fn submit_json(&self, body: &[u8], now: Timestamp) -> Result<SubmitResponse, ApiError> {
        let req: SubmitRequest =
            serde_json::from_slice(body).map_err(|e| ApiError::new(400, "MalformedBody", e.to_string()))?;
        self.submit(req, now)
    }

    /// Validates and persists the campaign, then hands it to preprocessing
    /// without waiting for any send.
    pub fn submit(&self, req: SubmitRequest, now: Timestamp) -> Result<SubmitResponse, ApiError> {
        let from = validate_address(&req.from).map_err(|e| ApiError::new(400, "InvalidFrom", e.to_string()))?;

        let mut rejected = Vec::new();
        let mut valid = Vec::new();
        for raw in req.recipients {
            let (address, variables) = match raw {
                RawRecipient::Address(a) => (a, Variables::new()),
                RawRecipient::Entry { address, variables } => (address, variables),
            };
            if let Some(bad) = variables.keys().find(|k| !is_placeholder_name(k)) {
                rejected.push(Rejected { reason: format!("invalid variable name {bad:?}"), address });
                continue;
            }
            match validate_address(&address) {
                Ok(a) => valid.push(RecipientEntry { address: a, variables }),
                Err(e) => rejected.push(Rejected { address, reason: e.to_string() }),
            }
        }
        let (recipients, duplicates) = dedupe_recipients(valid);
        if recipients.is_empty() {
            return Err(ApiError::new(400, "EmptyCampaign", "no valid recipients"));
        }

        let probe = Template {
            template_id: String::new(),
            subject_part: req.subject.clone(),
            html_part: req.html_body.clone(),
            created_at: now,
        };
        let limit = self.svc.constraints.payload_limit_bytes;
        for r in &recipients {
            // Unrenderable recipients are counted as render failures at send time.
            if let Ok(rendered) = render_template(&probe, &r.variables) {
                let size = rendered.size_bytes();
                if size > limit {
                    return Err(ApiError::new(
                        413,
                        "PayloadTooLarge",
                        format!("message for {} renders to {size} bytes, limit is {limit}", r.address),
                    ));
                }
            }
        }

        let seq = self.svc.next_id();
        let campaign_id = format!("cmp-{:x}-{seq:04}", now.as_micros());
        let accepted = recipients.len() as u64;
        self.svc
            .quota
            .admit(&campaign_id, accepted, now)
            .map_err(|e| ApiError::new(429, "QuotaExceeded", e.to_string()))?;

        let max = self.svc.constraints.max_batch_size as u64;
        let batch_count = accepted.div_ceil(max) as u32;
        let tid = trace_id(now, seq);
        let campaign = Campaign {
            campaign_id: campaign_id.clone(),
            request: CampaignRequest { from, subject: req.subject, html_body: req.html_body, recipients },
            state: CampaignState::Queued,
            failure_reason: None,
            counts: CampaignCounts { total: accepted, duplicates_removed: duplicates as u64, ..Default::default() },
            submitted_at: now,
            completed_at: None,
            template_id: format!("tpl-{campaign_id}"),
            batch_count,
            enqueued_batches: 0,
            final_batch_acked: false,
            template_deleted: false,
            last_send_at: None,
            trace_id: tid.clone(),
        };
        if let Err(e) = self.svc.store.insert_campaign(campaign) {
            self.svc.quota.release(&campaign_id);
            return Err(e.into());
        }
        let root = self.svc.tracer.begin(&tid, None, "campaign", now);
        self.svc.tracer.record(&tid, Some(&root), "gateway", now, now);
        let _ = self.commands.send(Command::Preprocess(campaign_id.clone()));

        Ok(SubmitResponse {
            campaign_id,
            accepted_count: accepted,
            duplicates_removed: duplicates as u64,
            rejected,
            batch_count,
        })
    }

    pub fn campaign(&self, id: &str) -> Result<CampaignView, ApiError> {
        self.svc.store.with_campaign(id, CampaignView::of).map_err(|e| match e {
            StoreError::NotFound(_) => ApiError::not_found("campaign", id),
            other => other.into(),
        })
    }

    /// Most recent first.
    pub fn campaigns(&self) -> Vec<CampaignView> {
        let mut out: Vec<_> = self
            .svc
            .store
            .campaign_ids()
            .iter()
            .filter_map(|id| self.svc.store.with_campaign(id, CampaignView::of).ok())
            .collect();
        out.sort_by(|a, b| b.submitted_at.cmp(&a.submitted_at).then(b.campaign_id.cmp(&a.campaign_id)));
        out
    }

    pub fn bounces(&self, id: &str) -> Result<Vec<BounceRecordDoc>, ApiError> {
        list_bounces(&self.svc.store, id).map_err(|e| match e {
            BounceError::UnknownCampaign(_) => ApiError::not_found("campaign", id),
            BounceError::Store(s) => s.into(),
        })
    }

    pub fn metrics_text(&self) -> String {
        self.svc.metrics.exposition()
    }

    pub fn trace(&self, campaign_id: &str) -> Result<TraceView, ApiError> {
        let tid = self
            .svc
            .store
            .with_campaign(campaign_id, |c| c.trace_id.clone())
            .map_err(|_| ApiError::not_found("trace for campaign", campaign_id))?;
        let segments = self.svc.tracer.segments(&tid).ok_or_else(|| ApiError::not_found("trace", &tid))?;
        Ok(TraceView { trace_id: tid, campaign_id: campaign_id.to_owned(), segments })
    }

    pub fn health(&self) -> BTreeMap<&'static str, String> {
        BTreeMap::from([("status", "ok".to_owned())])
    }
}
