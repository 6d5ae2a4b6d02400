//! The sender function: leased batch in, rate-limited sends out.

mod limiter;
mod quota;

use std::sync::Arc;

use serde::Serialize;

pub use limiter::RateLimiter;
pub use quota::{Quota, QuotaError, QuotaSnapshot};

use crate::domain::{render_template, CampaignCounts, CampaignState, Template, Timestamp};
use crate::observe::metrics::SEND;
use crate::runtime::{BatchDelivery, HandlerError, Runtime};
use crate::store::{IdempotencyKey, StoreError};
use crate::system::Services;
use crate::transport::{EventTopic, OutgoingMessage, TransportError};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct BatchResult {
    pub sent: u64,
    pub skipped_suppressed: u64,
    pub render_failed: u64,
    /// Recipients already claimed by an earlier delivery of this batch.
    pub already_claimed: u64,
}

fn bump(svc: &Services, campaign_id: &str, f: impl FnOnce(&mut CampaignCounts)) {
    if let Err(e) = svc.store.update_campaign(campaign_id, |c| f(&mut c.counts)) {
        tracing::warn!(campaign = campaign_id, error = %e, "count update lost");
    }
}

fn store_err(e: StoreError) -> HandlerError {
    HandlerError::new(e)
}

/// Processes one leased batch in recipient order.
///
/// Every recipient is claimed once per campaign before anything observable
/// happens to it, so a redelivered batch neither resends nor recounts.
pub async fn process_batch(
    svc: &Arc<Services>,
    rt: &Runtime,
    topic: &EventTopic,
    d: BatchDelivery,
) -> Result<BatchResult, HandlerError> {
    let batch = &d.message.body;
    let cid = batch.campaign_id.as_str();
    let info = svc.store.with_campaign(cid, |c| (c.state, c.request.from.clone(), c.trace_id.clone()));
    let (state, from, trace_id) = match info {
        Ok(v) => v,
        Err(StoreError::NotFound(_)) => {
            let _ = d.queue.ack(&d.lease, rt.now());
            return Ok(BatchResult::default());
        }
        Err(e) => return Err(store_err(e)),
    };
    if state.is_terminal() {
        let _ = d.queue.ack(&d.lease, rt.now());
        return Ok(BatchResult::default());
    }

    let guard = svc.enter(cid);
    let start = rt.now();
    let mut template: Option<Template> = None;
    let mut res = BatchResult::default();

    for (i, r) in batch.recipients.iter().enumerate() {
        if svc.store.with_campaign(cid, |c| c.state.is_terminal()).map_err(store_err)? {
            let _ = d.queue.ack(&d.lease, rt.now());
            return Ok(res);
        }
        let key = IdempotencyKey::new(cid, r.address.clone());
        if svc.store.is_suppressed(&r.address).map_err(store_err)? {
            if svc.store.claim_send(&key).map_err(store_err)? {
                res.skipped_suppressed += 1;
                bump(svc, cid, |c| c.suppressed_skipped += 1);
            }
            continue;
        }
        if !svc.store.claim_send(&key).map_err(store_err)? {
            res.already_claimed += 1;
            continue;
        }
        let tpl = match &template {
            Some(t) => t,
            None => match svc.store.get_template(&batch.template_id) {
                Ok(t) => template.insert(t),
                Err(e) => {
                    let _ = svc.store.release_claim(&key);
                    let now = rt.now();
                    if matches!(e, StoreError::NotFound(_)) {
                        let _ = d.queue.nack(&d.lease, now);
                        return Err(HandlerError(format!("TemplateMissing: {}", batch.template_id)));
                    }
                    return Err(store_err(e));
                }
            },
        };
        let rendered = match render_template(tpl, &r.variables) {
            Ok(x) => x,
            Err(_) => {
                res.render_failed += 1;
                bump(svc, cid, |c| c.render_failed += 1);
                continue;
            }
        };

        svc.limiter.acquire(rt).await;
        let now = rt.now();
        if svc.quota.consume_for(cid, now).is_err() {
            let _ = svc.store.release_claim(&key);
            tracing::warn!(campaign = cid, left = batch.recipients.len() - i, "daily quota exhausted mid-batch");
            fail_campaign(svc, cid, "QuotaExhausted", now);
            let _ = d.queue.ack(&d.lease, now);
            return Ok(res);
        }
        let msg = OutgoingMessage { campaign_id: cid.to_owned(), from: from.clone(), to: r.address.clone(), rendered };
        match svc.transport.send(&msg, now) {
            Ok(receipt) => {
                res.sent += 1;
                if let Err(e) = svc.store.update_campaign(cid, |c| {
                    c.counts.sent += 1;
                    c.last_send_at = Some(now);
                }) {
                    tracing::warn!(campaign = cid, error = %e, "count update lost");
                }
                svc.metrics.count(SEND, cid, now);
                topic.publish_at_occurrence(receipt.events);
            }
            Err(TransportError::PayloadTooLarge { .. }) => {
                res.render_failed += 1;
                bump(svc, cid, |c| c.render_failed += 1);
            }
            Err(e @ TransportError::TransportUnavailable(_)) => {
                let _ = svc.store.release_claim(&key);
                let _ = d.queue.nack(&d.lease, now);
                return Err(HandlerError::new(e));
            }
        }
    }

    let end = rt.now();
    // A processor whose lease expired loses the ack and records nothing.
    if d.queue.ack(&d.lease, end).is_ok() {
        if let Some(root) = svc.tracer.root(&trace_id).filter(|r| r.end.is_none()) {
            svc.tracer.record(&trace_id, Some(&root.segment_id), &format!("batch-{}", batch.batch_seq), start, end);
        }
        if batch.is_final {
            svc.store.update_campaign(cid, |c| c.final_batch_acked = true).map_err(store_err)?;
        }
    }
    drop(guard);
    try_complete(svc, cid, end);
    Ok(res)
}

/// Completes the campaign once its final batch is acked and no processor
/// for it is still running. Deletes the template exactly once.
pub fn try_complete(svc: &Services, campaign_id: &str, now: Timestamp) {
    if svc.inflight(campaign_id) > 0 {
        return;
    }
    let done = svc.store.update_campaign(campaign_id, |c| {
        if c.state == CampaignState::Sending && c.final_batch_acked {
            c.transition(CampaignState::Complete).expect("Sending -> Complete");
            c.completed_at = Some(now);
            Some((c.template_id.clone(), c.trace_id.clone()))
        } else {
            None
        }
    });
    if let Ok(Some((template_id, trace_id))) = done {
        finish(svc, campaign_id, &template_id, &trace_id, now);
    }
}

/// Moves a live campaign to Failed; recipients not yet accounted for are
/// recorded as deferred.
pub fn fail_campaign(svc: &Services, campaign_id: &str, reason: &str, now: Timestamp) {
    let failed = svc.store.update_campaign(campaign_id, |c| {
        if c.state.is_terminal() {
            return None;
        }
        c.transition(CampaignState::Failed).expect("live -> Failed");
        c.failure_reason = Some(reason.to_owned());
        c.completed_at = Some(now);
        let k = &mut c.counts;
        k.deferred = k.total.saturating_sub(k.sent + k.suppressed_skipped + k.render_failed);
        Some((c.template_id.clone(), c.trace_id.clone()))
    });
    if let Ok(Some((template_id, trace_id))) = failed {
        finish(svc, campaign_id, &template_id, &trace_id, now);
    }
}

fn finish(svc: &Services, campaign_id: &str, template_id: &str, trace_id: &str, now: Timestamp) {
    match svc.store.delete_template(template_id) {
        Ok(_) => {
            let _ = svc.store.update_campaign(campaign_id, |c| c.template_deleted = true);
        }
        Err(e) => tracing::warn!(campaign = campaign_id, error = %e, "template not deleted"),
    }
    svc.quota.release(campaign_id);
    if let Some(root) = svc.tracer.root(trace_id) {
        svc.tracer.end(trace_id, &root.segment_id, now);
    }
}
