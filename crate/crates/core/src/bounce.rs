//! The bounce-handling function and bounce retrieval.

use thiserror::Error;

use crate::config::SuppressionPolicy;
use crate::domain::BounceType;
use crate::store::{BounceRecordDoc, Store, StoreError};
use crate::system::Services;
use crate::transport::{DeliveryEvent, EventType};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BounceError {
    #[error("unknown campaign {0}")]
    UnknownCampaign(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Keeps the fields that matter and discards the rest of the event.
pub fn bounce_doc(e: &DeliveryEvent) -> Option<BounceRecordDoc> {
    Some(BounceRecordDoc {
        address: e.address.clone(),
        bounce_type: e.bounce_type?,
        campaign_id: e.campaign_id.clone(),
        occurred_at: e.occurred_at,
    })
}

/// Handles one topic event. Every fallible store write happens before the
/// metric is recorded, so a retried event is counted once.
pub fn handle_event(svc: &Services, e: &DeliveryEvent) -> Result<(), StoreError> {
    let cfg = &svc.config.suppression;
    match e.event_type {
        EventType::Bounce => {
            let Some(doc) = bounce_doc(e) else {
                tracing::warn!(address = %e.address, "bounce without bounce_type ignored");
                return Ok(());
            };
            let suppress = match cfg.policy {
                SuppressionPolicy::AnyBounce => true,
                SuppressionPolicy::PermanentOnly => doc.bounce_type == BounceType::Permanent,
            };
            if suppress {
                svc.store.suppress(&e.address, doc.bounce_type, &e.campaign_id, e.occurred_at)?;
            }
            if svc.store.put_bounce(doc)? {
                let _ = svc.store.update_campaign(&e.campaign_id, |c| c.counts.bounced += 1);
                svc.metrics.count_event(EventType::Bounce, &e.campaign_id, e.occurred_at);
            }
        }
        EventType::Complaint => {
            if cfg.complaints_suppress {
                svc.store.suppress(&e.address, BounceType::Permanent, &e.campaign_id, e.occurred_at)?;
            }
            svc.metrics.count_event(EventType::Complaint, &e.campaign_id, e.occurred_at);
        }
        EventType::Delivery | EventType::Open => {
            svc.metrics.count_event(e.event_type, &e.campaign_id, e.occurred_at);
        }
    }
    Ok(())
}

/// The campaign's bounce documents, oldest first.
pub fn list_bounces(store: &Store, campaign_id: &str) -> Result<Vec<BounceRecordDoc>, BounceError> {
    if !store.campaign_exists(campaign_id) {
        return Err(BounceError::UnknownCampaign(campaign_id.to_owned()));
    }
    Ok(store.query_bounces(campaign_id)?)
}
