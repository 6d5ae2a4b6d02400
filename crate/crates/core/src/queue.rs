//! FIFO queue with message groups, leases and redelivery.
//!
//! Messages of one group are delivered strictly one at a time in enqueue
//! order: while a group's head message is leased, nothing else from that
//! group is visible. A lease that expires returns the head to the group so it
//! is redelivered before anything behind it. Groups are independent.

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::sync::Mutex;
use std::time::Duration;

use serde::Serialize;
use thiserror::Error;

use crate::domain::Timestamp;

pub const DEFAULT_VISIBILITY_TIMEOUT: Duration = Duration::from_secs(30);
pub const DEFAULT_MAX_REDELIVERIES: u32 = 10;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum QueueError {
    #[error("queue is closed")]
    QueueClosed,
    #[error("lease expired; the message was returned to the queue")]
    LeaseExpired,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct QueueMessage<T> {
    pub message_id: String,
    pub group_id: String,
    pub body: T,
    pub enqueue_seq: u64,
    pub delivery_count: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lease {
    pub message_id: String,
    pub group_id: String,
    /// Distinguishes successive deliveries of the same message.
    pub receipt: u64,
    pub worker_id: String,
    pub leased_at: Timestamp,
    pub visibility_timeout: Duration,
}

impl Lease {
    pub fn expires_at(&self) -> Timestamp {
        self.leased_at + self.visibility_timeout
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DeadLetter<T> {
    pub message: QueueMessage<T>,
    pub parked_at: Timestamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Enqueued {
    pub enqueue_seq: u64,
    /// True when the dedup key was already present and nothing was added.
    pub duplicate: bool,
}

struct Group<T> {
    pending: VecDeque<QueueMessage<T>>,
    lease: Option<Lease>,
}

struct Inner<T> {
    closed: bool,
    next_seq: u64,
    next_receipt: u64,
    groups: BTreeMap<String, Group<T>>,
    dedup: HashSet<(String, String)>,
    dead: Vec<DeadLetter<T>>,
    dead_unseen: usize,
}

pub struct FifoQueue<T> {
    name: String,
    max_redeliveries: u32,
    inner: Mutex<Inner<T>>,
}

impl<T: Clone> FifoQueue<T> {
    pub fn new(name: impl Into<String>) -> Self {
        Self::with_max_redeliveries(name, DEFAULT_MAX_REDELIVERIES)
    }

    pub fn with_max_redeliveries(name: impl Into<String>, max_redeliveries: u32) -> Self {
        FifoQueue {
            name: name.into(),
            max_redeliveries,
            inner: Mutex::new(Inner {
                closed: false,
                next_seq: 0,
                next_receipt: 0,
                groups: BTreeMap::new(),
                dedup: HashSet::new(),
                dead: Vec::new(),
                dead_unseen: 0,
            }),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner<T>> {
        self.inner.lock().expect("queue mutex poisoned")
    }

    pub fn enqueue(&self, group_id: &str, body: T) -> Result<String, QueueError> {
        let mut inner = self.lock();
        let seq = Self::push(&mut inner, &self.name, group_id, body)?;
        Ok(message_id(&self.name, seq))
    }

    /// Enqueues unless `dedup_key` was already used for this group.
    pub fn enqueue_dedup(&self, group_id: &str, dedup_key: &str, body: T) -> Result<Enqueued, QueueError> {
        let mut inner = self.lock();
        if inner.closed {
            return Err(QueueError::QueueClosed);
        }
        if !inner.dedup.insert((group_id.to_owned(), dedup_key.to_owned())) {
            return Ok(Enqueued { enqueue_seq: 0, duplicate: true });
        }
        let seq = Self::push(&mut inner, &self.name, group_id, body)?;
        Ok(Enqueued { enqueue_seq: seq, duplicate: false })
    }

    fn push(inner: &mut Inner<T>, name: &str, group_id: &str, body: T) -> Result<u64, QueueError> {
        if inner.closed {
            return Err(QueueError::QueueClosed);
        }
        let seq = inner.next_seq;
        inner.next_seq += 1;
        let msg = QueueMessage {
            message_id: message_id(name, seq),
            group_id: group_id.to_owned(),
            body,
            enqueue_seq: seq,
            delivery_count: 0,
        };
        inner
            .groups
            .entry(group_id.to_owned())
            .or_insert_with(|| Group { pending: VecDeque::new(), lease: None })
            .pending
            .push_back(msg);
        Ok(seq)
    }

    pub fn close(&self) {
        self.lock().closed = true;
    }

    /// Returns expired leases' messages to their groups, parking those that
    /// have used up their redeliveries.
    fn expire(&self, inner: &mut Inner<T>, now: Timestamp) {
        let mut emptied = Vec::new();
        for (gid, group) in inner.groups.iter_mut() {
            let expired = group.lease.as_ref().is_some_and(|l| now >= l.expires_at());
            if !expired {
                continue;
            }
            group.lease = None;
            let exhausted = group.pending.front().is_some_and(|m| m.delivery_count > self.max_redeliveries);
            if exhausted {
                let message = group.pending.pop_front().expect("leased head");
                inner.dead.push(DeadLetter { message, parked_at: now });
                inner.dead_unseen += 1;
                if group.pending.is_empty() {
                    emptied.push(gid.clone());
                }
            }
        }
        for gid in emptied {
            inner.groups.remove(&gid);
        }
    }

    /// Releases leases that have expired by `now` without leasing anything.
    pub fn reap_expired(&self, now: Timestamp) {
        let mut inner = self.lock();
        self.expire(&mut inner, now);
    }

    /// Leases the visible message with the lowest enqueue sequence among
    /// groups that have no live lease.
    pub fn lease_next(
        &self,
        worker_id: &str,
        visibility_timeout: Duration,
        now: Timestamp,
    ) -> Option<(QueueMessage<T>, Lease)> {
        let mut inner = self.lock();
        self.expire(&mut inner, now);
        let receipt = inner.next_receipt;
        let key = inner
            .groups
            .iter()
            .filter(|(_, g)| g.lease.is_none())
            .filter_map(|(k, g)| g.pending.front().map(|m| (m.enqueue_seq, k)))
            .min_by_key(|(seq, _)| *seq)
            .map(|(_, k)| k.clone())?;
        let group = inner.groups.get_mut(&key).expect("group exists");
        let head = group.pending.front_mut().expect("non-empty group");
        head.delivery_count += 1;
        let lease = Lease {
            message_id: head.message_id.clone(),
            group_id: head.group_id.clone(),
            receipt,
            worker_id: worker_id.to_owned(),
            leased_at: now,
            visibility_timeout,
        };
        group.lease = Some(lease.clone());
        let msg = head.clone();
        inner.next_receipt += 1;
        Some((msg, lease))
    }

    fn live_group<'a>(inner: &'a mut Inner<T>, lease: &Lease, now: Timestamp) -> Result<&'a mut Group<T>, QueueError> {
        let group = inner.groups.get_mut(&lease.group_id).ok_or(QueueError::LeaseExpired)?;
        match &group.lease {
            Some(l) if l.receipt == lease.receipt && now < l.expires_at() => Ok(group),
            _ => Err(QueueError::LeaseExpired),
        }
    }

    /// Deletes the leased message and unlocks its group.
    pub fn ack(&self, lease: &Lease, now: Timestamp) -> Result<(), QueueError> {
        let mut inner = self.lock();
        let group = Self::live_group(&mut inner, lease, now)?;
        group.lease = None;
        group.pending.pop_front();
        if group.pending.is_empty() {
            inner.groups.remove(&lease.group_id);
        }
        Ok(())
    }

    /// Gives the message back immediately for redelivery.
    pub fn nack(&self, lease: &Lease, now: Timestamp) -> Result<(), QueueError> {
        let mut inner = self.lock();
        let group = Self::live_group(&mut inner, lease, now)?;
        group.lease = None;
        let exhausted = group.pending.front().is_some_and(|m| m.delivery_count > self.max_redeliveries);
        if exhausted {
            let message = group.pending.pop_front().expect("leased head");
            if group.pending.is_empty() {
                inner.groups.remove(&lease.group_id);
            }
            inner.dead.push(DeadLetter { message, parked_at: now });
            inner.dead_unseen += 1;
        }
        Ok(())
    }

    /// Earliest instant at which a live lease expires.
    pub fn next_expiry(&self) -> Option<Timestamp> {
        self.lock().groups.values().filter_map(|g| g.lease.as_ref().map(Lease::expires_at)).min()
    }

    /// Messages not yet acked or dead-lettered, leased ones included.
    pub fn len(&self) -> usize {
        self.lock().groups.values().map(|g| g.pending.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn in_flight(&self) -> usize {
        self.lock().groups.values().filter(|g| g.lease.is_some()).count()
    }

    /// Group ids that currently hold a live lease at `now`.
    pub fn leased_groups(&self, now: Timestamp) -> Vec<String> {
        self.lock()
            .groups
            .iter()
            .filter(|(_, g)| g.lease.as_ref().is_some_and(|l| now < l.expires_at()))
            .map(|(id, _)| id.clone())
            .collect()
    }

    pub fn dead_letters(&self) -> Vec<DeadLetter<T>> {
        self.lock().dead.clone()
    }

    /// Dead letters parked since the previous call.
    pub fn take_new_dead_letters(&self) -> Vec<DeadLetter<T>> {
        let mut inner = self.lock();
        let start = inner.dead.len() - inner.dead_unseen;
        inner.dead_unseen = 0;
        inner.dead[start..].to_vec()
    }
}

fn message_id(queue: &str, seq: u64) -> String {
    format!("{queue}-{seq:08}")
}
