//! The preprocess function: stores the campaign template, plans batches and
//! enqueues them in order under the campaign's message group.

use std::sync::Arc;

use thiserror::Error;

use crate::dispatch::fail_campaign;
use crate::domain::{plan_batches, CampaignState, DomainError};
use crate::runtime::{Runtime, RuntimeError};
use crate::store::StoreError;
use crate::system::{Services, BATCH_QUEUE};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("template store failure: {0}")]
    TemplateStoreFailure(StoreError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error("preprocess interrupted after {0} batches")]
    Interrupted(u32),
}

pub fn dedup_key(campaign_id: &str, batch_seq: u32) -> String {
    format!("{campaign_id}/{batch_seq}")
}

/// Enqueues the campaign's batches, resuming after the last one already
/// enqueued. Returns how many this call enqueued.
///
/// A Queued campaign is claimed by moving it to Sending, so only one
/// preprocess starts it; a Sending campaign with batches outstanding is
/// resumed, and the queue's dedup key keeps a racing resume harmless.
pub async fn preprocess(svc: &Arc<Services>, rt: &Runtime, campaign_id: &str) -> Result<u32, IngestError> {
    let start = rt.now();
    let (state, template, trace_id, already, batch_count) = svc.store.with_campaign(campaign_id, |c| {
        (c.state, c.template(), c.trace_id.clone(), c.enqueued_batches, c.batch_count)
    })?;

    match state {
        CampaignState::Queued => {
            if let Err(e) = svc.store.put_template(template) {
                fail_campaign(svc, campaign_id, "TemplateStoreFailure", rt.now());
                return Err(IngestError::TemplateStoreFailure(e));
            }
            let claimed = svc.store.update_campaign(campaign_id, |c| {
                c.state == CampaignState::Queued && c.transition(CampaignState::Sending).is_ok()
            })?;
            if !claimed {
                return Ok(0);
            }
        }
        CampaignState::Sending if already < batch_count => {
            // Restores the template if the crash preceded its write.
            svc.store.put_template(template).map_err(IngestError::TemplateStoreFailure)?;
        }
        _ => return Ok(0),
    }

    let batches = svc.store.with_campaign(campaign_id, |c| {
        plan_batches(campaign_id, &c.template_id, &c.request.recipients, &svc.constraints)
    })??;

    let mut enqueued = 0;
    for batch in batches.into_iter().skip(already as usize) {
        let crash = {
            let mut f = svc.faults.preprocess_crash_after.lock().expect("faults poisoned");
            if *f == Some(already + enqueued) {
                f.take()
            } else {
                None
            }
        };
        if crash.is_some() {
            return Err(IngestError::Interrupted(already + enqueued));
        }
        let seq = batch.batch_seq;
        rt.enqueue_batch(BATCH_QUEUE, &dedup_key(campaign_id, seq), batch)?;
        svc.store.update_campaign(campaign_id, |c| c.enqueued_batches = c.enqueued_batches.max(seq + 1))?;
        enqueued += 1;
    }

    if let Some(root) = svc.tracer.root(&trace_id).filter(|r| r.end.is_none()) {
        svc.tracer.record(&trace_id, Some(&root.segment_id), "preprocess", start, rt.now());
    }
    Ok(enqueued)
}
