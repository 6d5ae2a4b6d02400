//! Document store for bounce records, the suppression list, idempotency
//! claims, templates, campaign state and parked dead letters.
//!
//! Everything sits behind one mutex, so each operation is linearizable;
//! `claim_send` and `suppress` are atomic compare-and-insert. An optional
//! append-only JSON-lines file makes the contents survive restarts.

mod persist;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{BounceType, Campaign, EmailAddress, Template, Timestamp};

use persist::Journal;
pub use persist::Record;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StoreError {
    #[error("store unavailable")]
    StoreUnavailable,
    #[error("{0} not found")]
    NotFound(String),
    #[error("persistence error: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BounceRecordDoc {
    pub address: EmailAddress,
    pub bounce_type: BounceType,
    pub campaign_id: String,
    pub occurred_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuppressionEntry {
    pub address: EmailAddress,
    pub reason: BounceType,
    pub first_bounced_at: Timestamp,
    pub source_campaign_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct IdempotencyKey {
    pub campaign_id: String,
    pub address: EmailAddress,
}

impl IdempotencyKey {
    pub fn new(campaign_id: impl Into<String>, address: EmailAddress) -> Self {
        IdempotencyKey { campaign_id: campaign_id.into(), address }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeadLetterRecord {
    pub queue: String,
    pub message_id: String,
    pub group_id: String,
    pub batch_seq: u32,
    pub delivery_count: u32,
    pub parked_at: Timestamp,
}

#[derive(Default)]
struct State {
    bounces: BTreeMap<String, Vec<BounceRecordDoc>>,
    bounce_keys: HashSet<(String, EmailAddress, Timestamp)>,
    suppression: HashMap<EmailAddress, SuppressionEntry>,
    claims: HashSet<IdempotencyKey>,
    templates: HashMap<String, Template>,
    template_deletes: HashMap<String, u32>,
    campaigns: BTreeMap<String, Campaign>,
    dead_letters: Vec<DeadLetterRecord>,
}

impl State {
    fn apply(&mut self, record: Record) {
        match record {
            Record::Bounce(doc) => {
                let key = (doc.campaign_id.clone(), doc.address.clone(), doc.occurred_at);
                if self.bounce_keys.insert(key) {
                    self.bounces.entry(doc.campaign_id.clone()).or_default().push(doc);
                }
            }
            Record::Suppress(entry) => {
                self.suppression.entry(entry.address.clone()).or_insert(entry);
            }
            Record::Unsuppress { address } => {
                self.suppression.remove(&address);
            }
            Record::Claim(key) => {
                self.claims.insert(key);
            }
            Record::ReleaseClaim(key) => {
                self.claims.remove(&key);
            }
            Record::TemplatePut(t) => {
                self.templates.insert(t.template_id.clone(), t);
            }
            Record::TemplateDelete { template_id } => {
                self.templates.remove(&template_id);
                *self.template_deletes.entry(template_id).or_default() += 1;
            }
            Record::Campaign(c) => {
                self.campaigns.insert(c.campaign_id.clone(), *c);
            }
            Record::DeadLetter(d) => self.dead_letters.push(d),
        }
    }
}

pub struct Store {
    state: Mutex<State>,
    journal: Option<Mutex<Journal>>,
    fail_next: AtomicU32,
    down: AtomicU32,
}

impl Default for Store {
    fn default() -> Self {
        Self::in_memory()
    }
}

impl Store {
    pub fn in_memory() -> Self {
        Store {
            state: Mutex::new(State::default()),
            journal: None,
            fail_next: AtomicU32::new(0),
            down: AtomicU32::new(0),
        }
    }

    /// Opens (or creates) a journal file, replaying its records.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let (journal, records) = Journal::open(path.as_ref())?;
        let mut state = State::default();
        for r in records {
            state.apply(r);
        }
        Ok(Store {
            state: Mutex::new(state),
            journal: Some(Mutex::new(journal)),
            fail_next: AtomicU32::new(0),
            down: AtomicU32::new(0),
        })
    }

    /// Makes the next `n` operations fail with `StoreUnavailable`.
    pub fn fail_next(&self, n: u32) {
        self.fail_next.store(n, Ordering::SeqCst);
    }

    /// Takes the whole store offline or back online.
    pub fn set_available(&self, available: bool) {
        self.down.store(u32::from(!available), Ordering::SeqCst);
    }

    fn check(&self) -> Result<(), StoreError> {
        if self.down.load(Ordering::SeqCst) != 0 {
            return Err(StoreError::StoreUnavailable);
        }
        let failed = self.fail_next.fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1)).is_ok();
        if failed {
            Err(StoreError::StoreUnavailable)
        } else {
            Ok(())
        }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, State> {
        self.state.lock().expect("store mutex poisoned")
    }

    fn persist(&self, record: &Record) -> Result<(), StoreError> {
        match &self.journal {
            Some(j) => j.lock().expect("journal mutex poisoned").append(record),
            None => Ok(()),
        }
    }

    /// Stores a bounce document; an identical (campaign, address, time)
    /// document is a no-op. Returns true if newly stored.
    pub fn put_bounce(&self, doc: BounceRecordDoc) -> Result<bool, StoreError> {
        self.check()?;
        let mut state = self.lock();
        let key = (doc.campaign_id.clone(), doc.address.clone(), doc.occurred_at);
        if state.bounce_keys.contains(&key) {
            return Ok(false);
        }
        let record = Record::Bounce(doc);
        self.persist(&record)?;
        state.apply(record);
        Ok(true)
    }

    /// Bounce documents of one campaign, ordered by `occurred_at`.
    pub fn query_bounces(&self, campaign_id: &str) -> Result<Vec<BounceRecordDoc>, StoreError> {
        self.check()?;
        let mut docs = self.lock().bounces.get(campaign_id).cloned().unwrap_or_default();
        docs.sort_by(|a, b| a.occurred_at.cmp(&b.occurred_at).then_with(|| a.address.cmp(&b.address)));
        Ok(docs)
    }

    pub fn query_bounces_by_address(&self, address: &EmailAddress) -> Result<Vec<BounceRecordDoc>, StoreError> {
        self.check()?;
        let state = self.lock();
        let mut docs: Vec<_> = state.bounces.values().flatten().filter(|d| &d.address == address).cloned().collect();
        docs.sort_by_key(|d| d.occurred_at);
        Ok(docs)
    }

    pub fn bounce_count(&self) -> usize {
        self.lock().bounce_keys.len()
    }

    /// Adds `address` to the suppression list. The first entry wins; returns
    /// true iff this call inserted it.
    pub fn suppress(
        &self,
        address: &EmailAddress,
        reason: BounceType,
        campaign_id: &str,
        at: Timestamp,
    ) -> Result<bool, StoreError> {
        self.check()?;
        let mut state = self.lock();
        if state.suppression.contains_key(address) {
            return Ok(false);
        }
        let record = Record::Suppress(SuppressionEntry {
            address: address.clone(),
            reason,
            first_bounced_at: at,
            source_campaign_id: campaign_id.to_owned(),
        });
        self.persist(&record)?;
        state.apply(record);
        Ok(true)
    }

    pub fn is_suppressed(&self, address: &EmailAddress) -> Result<bool, StoreError> {
        self.check()?;
        Ok(self.lock().suppression.contains_key(address))
    }

    pub fn suppression_entry(&self, address: &EmailAddress) -> Option<SuppressionEntry> {
        self.lock().suppression.get(address).cloned()
    }

    /// All entries, sorted by address.
    pub fn suppression_list(&self) -> Vec<SuppressionEntry> {
        let mut v: Vec<_> = self.lock().suppression.values().cloned().collect();
        v.sort_by(|a, b| a.address.cmp(&b.address));
        v
    }

    /// Explicit operator removal. Returns true if an entry was removed.
    pub fn remove_suppression(&self, address: &EmailAddress) -> Result<bool, StoreError> {
        self.check()?;
        let mut state = self.lock();
        if !state.suppression.contains_key(address) {
            return Ok(false);
        }
        let record = Record::Unsuppress { address: address.clone() };
        self.persist(&record)?;
        state.apply(record);
        Ok(true)
    }

    /// Atomically records that a send is about to be attempted. Only the
    /// caller that gets `true` may hand the message to a transport.
    pub fn claim_send(&self, key: &IdempotencyKey) -> Result<bool, StoreError> {
        self.check()?;
        let mut state = self.lock();
        if state.claims.contains(key) {
            return Ok(false);
        }
        let record = Record::Claim(key.clone());
        self.persist(&record)?;
        state.apply(record);
        Ok(true)
    }

    /// Undoes a claim for a send that never reached the transport.
    pub fn release_claim(&self, key: &IdempotencyKey) -> Result<(), StoreError> {
        self.check()?;
        let mut state = self.lock();
        if state.claims.contains(key) {
            let record = Record::ReleaseClaim(key.clone());
            self.persist(&record)?;
            state.apply(record);
        }
        Ok(())
    }

    pub fn is_claimed(&self, key: &IdempotencyKey) -> bool {
        self.lock().claims.contains(key)
    }

    pub fn put_template(&self, template: Template) -> Result<(), StoreError> {
        self.check()?;
        let mut state = self.lock();
        let record = Record::TemplatePut(template);
        self.persist(&record)?;
        state.apply(record);
        Ok(())
    }

    pub fn get_template(&self, template_id: &str) -> Result<Template, StoreError> {
        self.check()?;
        self.lock()
            .templates
            .get(template_id)
            .cloned()
            .ok_or_else(|| StoreError::NotFound(format!("template {template_id}")))
    }

    /// Deletes a template. Returns true if it existed.
    pub fn delete_template(&self, template_id: &str) -> Result<bool, StoreError> {
        self.check()?;
        let mut state = self.lock();
        let existed = state.templates.contains_key(template_id);
        let record = Record::TemplateDelete { template_id: template_id.to_owned() };
        self.persist(&record)?;
        state.apply(record);
        Ok(existed)
    }

    /// How many times `delete_template` was called for `template_id`.
    pub fn template_delete_calls(&self, template_id: &str) -> u32 {
        self.lock().template_deletes.get(template_id).copied().unwrap_or(0)
    }

    pub fn insert_campaign(&self, campaign: Campaign) -> Result<(), StoreError> {
        self.check()?;
        let mut state = self.lock();
        let record = Record::Campaign(Box::new(campaign));
        self.persist(&record)?;
        state.apply(record);
        Ok(())
    }

    pub fn get_campaign(&self, campaign_id: &str) -> Result<Campaign, StoreError> {
        self.check()?;
        self.lock()
            .campaigns
            .get(campaign_id)
            .cloned()
            .ok_or_else(|| StoreError::NotFound(format!("campaign {campaign_id}")))
    }

    /// Reads a campaign without cloning it.
    pub fn with_campaign<R>(&self, campaign_id: &str, f: impl FnOnce(&Campaign) -> R) -> Result<R, StoreError> {
        self.check()?;
        let state = self.lock();
        let c =
            state.campaigns.get(campaign_id).ok_or_else(|| StoreError::NotFound(format!("campaign {campaign_id}")))?;
        Ok(f(c))
    }

    pub fn campaign_exists(&self, campaign_id: &str) -> bool {
        self.lock().campaigns.contains_key(campaign_id)
    }

    pub fn campaign_ids(&self) -> Vec<String> {
        self.lock().campaigns.keys().cloned().collect()
    }

    /// Applies `f` to a campaign under the store lock. State changes are
    /// journaled; counter updates are not.
    pub fn update_campaign<R>(&self, campaign_id: &str, f: impl FnOnce(&mut Campaign) -> R) -> Result<R, StoreError> {
        self.check()?;
        let mut state = self.lock();
        let c = state
            .campaigns
            .get_mut(campaign_id)
            .ok_or_else(|| StoreError::NotFound(format!("campaign {campaign_id}")))?;
        let before = c.state;
        let out = f(c);
        if c.state != before && self.journal.is_some() {
            let record = Record::Campaign(Box::new(c.clone()));
            self.persist(&record)?;
        }
        Ok(out)
    }

    pub fn record_dead_letter(&self, d: DeadLetterRecord) -> Result<(), StoreError> {
        let mut state = self.lock();
        let record = Record::DeadLetter(d);
        self.persist(&record)?;
        state.apply(record);
        Ok(())
    }

    pub fn dead_letters(&self) -> Vec<DeadLetterRecord> {
        self.lock().dead_letters.clone()
    }
}
