//! Lambda-style function orchestrator.
//!
//! Functions are registered with a trigger (direct invocation, a queue, or a
//! topic) and run as tasks on a single-threaded executor that owns the clock.
//! In virtual mode the clock moves only through [`Runtime::advance_clock`] or
//! the `run_*` drivers, which makes every run reproducible; in real-time mode
//! a driver loop keeps the clock in step with the wall clock.

mod executor;

use std::cell::{Cell, RefCell};
use std::collections::{BTreeMap, VecDeque};
use std::future::Future;
use std::rc::Rc;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Batch, Timestamp};
use crate::queue::{DeadLetter, FifoQueue, Lease, QueueError, QueueMessage, DEFAULT_VISIBILITY_TIMEOUT};
use crate::transport::DeliveryEvent;

use executor::Executor;
pub use executor::{LocalBoxFuture, Permit, Semaphore, Sleep, YieldNow};

/// Attempts per topic delivery: the first plus this many retries.
pub const TOPIC_MAX_RETRIES: u32 = 3;
pub const TOPIC_RETRY_DELAY: Duration = Duration::from_millis(100);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockMode {
    RealTime,
    Virtual,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Trigger {
    Http,
    Queue(String),
    Topic(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionSpec {
    pub name: String,
    pub trigger: Trigger,
    pub max_concurrency: u32,
    pub cold_start: Duration,
    pub keep_alive: Duration,
}

impl FunctionSpec {
    pub const DEFAULT_COLD_START: Duration = Duration::from_millis(120);
    pub const DEFAULT_KEEP_ALIVE: Duration = Duration::from_secs(300);

    pub fn new(name: impl Into<String>, trigger: Trigger) -> Self {
        FunctionSpec {
            name: name.into(),
            trigger,
            max_concurrency: 1,
            cold_start: Self::DEFAULT_COLD_START,
            keep_alive: Self::DEFAULT_KEEP_ALIVE,
        }
    }

    pub fn max_concurrency(mut self, n: u32) -> Self {
        self.max_concurrency = n;
        self
    }

    pub fn cold_start(mut self, d: Duration) -> Self {
        self.cold_start = d;
        self
    }

    pub fn keep_alive(mut self, d: Duration) -> Self {
        self.keep_alive = d;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct InvocationRecord {
    pub invocation_id: u64,
    pub function: String,
    pub triggered_at: Timestamp,
    pub start: Timestamp,
    pub end: Timestamp,
    pub cold: bool,
    pub billed_ms: u64,
    pub error: Option<String>,
}

impl InvocationRecord {
    pub fn duration(&self) -> Duration {
        self.end.saturating_since(self.start)
    }
}

/// Billed duration: elapsed time rounded up to the next whole millisecond.
pub fn billed_ms(start: Timestamp, end: Timestamp) -> u64 {
    end.as_micros().saturating_sub(start.as_micros()).div_ceil(1000)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{0}")]
pub struct HandlerError(pub String);

impl HandlerError {
    pub fn new(cause: impl std::fmt::Display) -> Self {
        HandlerError(cause.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RuntimeError {
    #[error("function {0} is already registered")]
    DuplicateFunction(String),
    #[error("unknown function {0}")]
    UnknownFunction(String),
    #[error("unknown queue {0}")]
    UnknownQueue(String),
    #[error("invalid function spec: {0}")]
    InvalidSpec(&'static str),
    #[error("operation requires virtual clock mode")]
    WrongMode,
    #[error(transparent)]
    Queue(#[from] QueueError),
    #[error("handler failed: {cause}")]
    HandlerError { cause: String, record: Box<InvocationRecord> },
}

/// What a function receives when triggered.
#[derive(Debug, Clone)]
pub enum Payload {
    Empty,
    Json(serde_json::Value),
    Campaign(String),
    Batch(BatchDelivery),
    Event(DeliveryEvent),
}

/// A leased batch handed to a queue-triggered function.
#[derive(Clone)]
pub struct BatchDelivery {
    pub message: QueueMessage<Batch>,
    pub lease: Lease,
    pub queue: Arc<FifoQueue<Batch>>,
}

impl std::fmt::Debug for BatchDelivery {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BatchDelivery")
            .field("message_id", &self.message.message_id)
            .field("lease", &self.lease)
            .finish()
    }
}

/// Context passed to a running handler.
#[derive(Clone)]
pub struct Invocation {
    pub invocation_id: u64,
    pub function: String,
    pub runtime: Runtime,
}

pub type Handler = Rc<dyn Fn(Invocation, Payload) -> LocalBoxFuture<'static, Result<(), HandlerError>>>;

/// Wraps an async closure as a [`Handler`].
pub fn handler_fn<F, Fut>(f: F) -> Handler
where
    F: Fn(Invocation, Payload) -> Fut + 'static,
    Fut: Future<Output = Result<(), HandlerError>> + 'static,
{
    Rc::new(move |inv, payload| Box::pin(f(inv, payload)))
}

struct Instance {
    busy: bool,
    last_completed: Timestamp,
}

struct FunctionSlot {
    spec: FunctionSpec,
    handler: Handler,
    permits: Rc<Semaphore>,
    instances: RefCell<Vec<Instance>>,
}

impl FunctionSlot {
    /// Claims a warm idle instance if one completed within keep-alive,
    /// otherwise starts a cold one. Returns (instance index, cold).
    fn claim_instance(&self, now: Timestamp) -> (usize, bool) {
        let mut instances = self.instances.borrow_mut();
        let warm = instances
            .iter()
            .enumerate()
            .filter(|(_, i)| !i.busy && now.saturating_since(i.last_completed) <= self.spec.keep_alive)
            .max_by_key(|(idx, i)| (i.last_completed, std::cmp::Reverse(*idx)))
            .map(|(idx, _)| idx);
        if let Some(idx) = warm {
            instances[idx].busy = true;
            return (idx, false);
        }
        let reuse = instances.iter().position(|i| !i.busy);
        let idx = match reuse {
            Some(idx) => idx,
            None => {
                instances.push(Instance { busy: false, last_completed: Timestamp::EPOCH });
                instances.len() - 1
            }
        };
        instances[idx].busy = true;
        (idx, true)
    }

    fn release_instance(&self, idx: usize, now: Timestamp) {
        let mut instances = self.instances.borrow_mut();
        instances[idx].busy = false;
        instances[idx].last_completed = now;
    }
}

struct QueueBinding {
    queue: Arc<FifoQueue<Batch>>,
    visibility_timeout: Duration,
    consumers: RefCell<Vec<String>>,
    wake_scheduled: Cell<Option<Timestamp>>,
    dead_letter_hook: RefCell<Option<Rc<dyn Fn(&DeadLetter<Batch>)>>>,
}

#[derive(Default)]
struct Lane {
    busy: bool,
    pending: VecDeque<Payload>,
}

#[derive(Debug, Clone)]
pub struct TopicDeadLetter {
    pub topic: String,
    pub subscriber: String,
    pub payload: Payload,
    pub attempts: u32,
    pub last_error: String,
}

struct Inner {
    exec: Rc<Executor>,
    mode: ClockMode,
    functions: RefCell<BTreeMap<String, Rc<FunctionSlot>>>,
    queues: RefCell<BTreeMap<String, Rc<QueueBinding>>>,
    topics: RefCell<BTreeMap<String, Vec<String>>>,
    lanes: RefCell<BTreeMap<(String, String, String), Lane>>,
    topic_dead: RefCell<Vec<TopicDeadLetter>>,
    records: RefCell<Vec<InvocationRecord>>,
    next_invocation: Cell<u64>,
}

/// Handle to the orchestrator. Cheap to clone; not `Send`.
#[derive(Clone)]
pub struct Runtime(Rc<Inner>);

impl Runtime {
    pub fn new(mode: ClockMode, start: Timestamp) -> Self {
        let start = match mode {
            ClockMode::Virtual => start,
            ClockMode::RealTime => Timestamp::now_utc(),
        };
        Runtime(Rc::new(Inner {
            exec: Rc::new(Executor::new(start)),
            mode,
            functions: RefCell::new(BTreeMap::new()),
            queues: RefCell::new(BTreeMap::new()),
            topics: RefCell::new(BTreeMap::new()),
            lanes: RefCell::new(BTreeMap::new()),
            topic_dead: RefCell::new(Vec::new()),
            records: RefCell::new(Vec::new()),
            next_invocation: Cell::new(1),
        }))
    }

    pub fn virtual_at(start: Timestamp) -> Self {
        Self::new(ClockMode::Virtual, start)
    }

    pub fn mode(&self) -> ClockMode {
        self.0.mode
    }

    pub fn now(&self) -> Timestamp {
        self.0.exec.now()
    }

    pub fn sleep(&self, d: Duration) -> Sleep {
        self.sleep_until(self.now() + d)
    }

    pub fn sleep_until(&self, deadline: Timestamp) -> Sleep {
        Sleep::new(self.0.exec.clone(), deadline)
    }

    pub fn spawn(&self, fut: impl Future<Output = ()> + 'static) {
        self.0.exec.spawn(fut);
    }

    /// Runs `f` once the clock reaches `at`.
    pub fn schedule_at(&self, at: Timestamp, f: impl FnOnce() + 'static) {
        let rt = self.clone();
        self.spawn(async move {
            rt.sleep_until(at).await;
            f();
        });
    }

    pub fn register_function(&self, spec: FunctionSpec, handler: Handler) -> Result<(), RuntimeError> {
        if spec.max_concurrency == 0 {
            return Err(RuntimeError::InvalidSpec("max_concurrency must be at least 1"));
        }
        let mut functions = self.0.functions.borrow_mut();
        if functions.contains_key(&spec.name) {
            return Err(RuntimeError::DuplicateFunction(spec.name));
        }
        if let Trigger::Queue(q) = &spec.trigger {
            if !self.0.queues.borrow().contains_key(q) {
                return Err(RuntimeError::UnknownQueue(q.clone()));
            }
        }
        if let Trigger::Topic(t) = &spec.trigger {
            self.0.topics.borrow_mut().entry(t.clone()).or_default().push(spec.name.clone());
        }
        let slot = Rc::new(FunctionSlot {
            permits: Semaphore::new(spec.max_concurrency),
            spec: spec.clone(),
            handler,
            instances: RefCell::new(Vec::new()),
        });
        functions.insert(spec.name.clone(), slot);
        drop(functions);
        if let Trigger::Queue(q) = &spec.trigger {
            let binding = self.0.queues.borrow().get(q).cloned().expect("checked above");
            binding.consumers.borrow_mut().push(spec.name.clone());
            self.poll_queue(q);
        }
        Ok(())
    }

    pub fn function_spec(&self, name: &str) -> Option<FunctionSpec> {
        self.0.functions.borrow().get(name).map(|s| s.spec.clone())
    }

    /// Makes `queue` available as a trigger source.
    pub fn add_queue(&self, queue: Arc<FifoQueue<Batch>>, visibility_timeout: Duration) {
        let name = queue.name().to_owned();
        self.0.queues.borrow_mut().insert(
            name,
            Rc::new(QueueBinding {
                queue,
                visibility_timeout,
                consumers: RefCell::new(Vec::new()),
                wake_scheduled: Cell::new(None),
                dead_letter_hook: RefCell::new(None),
            }),
        );
    }

    pub fn add_queue_default(&self, queue: Arc<FifoQueue<Batch>>) {
        self.add_queue(queue, DEFAULT_VISIBILITY_TIMEOUT)
    }

    /// Called with every message the queue parks as a dead letter.
    pub fn on_dead_letter(&self, queue: &str, hook: impl Fn(&DeadLetter<Batch>) + 'static) {
        if let Some(binding) = self.0.queues.borrow().get(queue) {
            *binding.dead_letter_hook.borrow_mut() = Some(Rc::new(hook));
        }
    }

    pub fn queue(&self, name: &str) -> Option<Arc<FifoQueue<Batch>>> {
        self.0.queues.borrow().get(name).map(|b| b.queue.clone())
    }

    /// Enqueues a batch and wakes the queue's consumers.
    pub fn enqueue_batch(&self, queue: &str, dedup_key: &str, batch: Batch) -> Result<bool, RuntimeError> {
        let q = self.queue(queue).ok_or_else(|| RuntimeError::UnknownQueue(queue.to_owned()))?;
        let group = batch.campaign_id.clone();
        let res = q.enqueue_dedup(&group, dedup_key, batch)?;
        self.poll_queue(queue);
        Ok(!res.duplicate)
    }

    /// Leases messages for idle consumers of `queue` and starts invocations.
    pub fn poll_queue(&self, queue: &str) {
        let Some(binding) = self.0.queues.borrow().get(queue).cloned() else {
            return;
        };
        let now = self.now();
        // Leases must expire even when no consumer is free to lease.
        binding.queue.reap_expired(now);
        let consumers = binding.consumers.borrow().clone();
        for consumer in &consumers {
            let Some(slot) = self.0.functions.borrow().get(consumer).cloned() else {
                continue;
            };
            loop {
                let Some(permit) = slot.permits.try_acquire() else {
                    break;
                };
                let worker = format!("{consumer}-{}", self.0.next_invocation.get());
                match binding.queue.lease_next(&worker, binding.visibility_timeout, now) {
                    Some((message, lease)) => {
                        let payload = Payload::Batch(BatchDelivery { message, lease, queue: binding.queue.clone() });
                        let rt = self.clone();
                        let slot = slot.clone();
                        let qname = queue.to_owned();
                        self.spawn(async move {
                            let _ = rt.run_invocation(&slot, payload, Some(permit)).await;
                            rt.poll_queue(&qname);
                        });
                    }
                    None => break,
                }
            }
        }
        let hook = binding.dead_letter_hook.borrow().clone();
        if let Some(hook) = hook {
            for dl in binding.queue.take_new_dead_letters() {
                hook(&dl);
            }
        }
        if let Some(expiry) = binding.queue.next_expiry().filter(|&e| e > now) {
            let scheduled = binding.wake_scheduled.get();
            if scheduled.is_none_or(|s| s > expiry || s < now) {
                binding.wake_scheduled.set(Some(expiry));
                let rt = self.clone();
                let qname = queue.to_owned();
                let b = binding.clone();
                self.schedule_at(expiry, move || {
                    if b.wake_scheduled.get() == Some(expiry) {
                        b.wake_scheduled.set(None);
                    }
                    rt.poll_queue(&qname);
                });
            }
        }
    }

    async fn run_invocation(
        &self,
        slot: &Rc<FunctionSlot>,
        payload: Payload,
        permit: Option<Permit>,
    ) -> Result<InvocationRecord, RuntimeError> {
        let triggered_at = self.now();
        let _permit = match permit {
            Some(p) => p,
            None => slot.permits.acquire().await,
        };
        let (instance, cold) = slot.claim_instance(self.now());
        if cold && !slot.spec.cold_start.is_zero() {
            self.sleep(slot.spec.cold_start).await;
        }
        let invocation_id = self.0.next_invocation.get();
        self.0.next_invocation.set(invocation_id + 1);
        let start = self.now();
        let inv = Invocation { invocation_id, function: slot.spec.name.clone(), runtime: self.clone() };
        let result = (slot.handler)(inv, payload).await;
        let end = self.now();
        slot.release_instance(instance, end);
        let record = InvocationRecord {
            invocation_id,
            function: slot.spec.name.clone(),
            triggered_at,
            start,
            end,
            cold,
            billed_ms: billed_ms(start, end),
            error: result.as_ref().err().map(|e| e.0.clone()),
        };
        self.0.records.borrow_mut().push(record.clone());
        match result {
            Ok(()) => Ok(record),
            Err(e) => Err(RuntimeError::HandlerError { cause: e.0, record: Box::new(record) }),
        }
    }

    fn slot(&self, name: &str) -> Result<Rc<FunctionSlot>, RuntimeError> {
        self.0.functions.borrow().get(name).cloned().ok_or_else(|| RuntimeError::UnknownFunction(name.to_owned()))
    }

    /// Invokes a function and waits for it to finish.
    pub async fn invoke(&self, name: &str, payload: Payload) -> Result<InvocationRecord, RuntimeError> {
        let slot = self.slot(name)?;
        self.run_invocation(&slot, payload, None).await
    }

    /// Starts an invocation without waiting for it.
    pub fn invoke_detached(&self, name: &str, payload: Payload) -> Result<(), RuntimeError> {
        let slot = self.slot(name)?;
        let rt = self.clone();
        self.spawn(async move {
            let _ = rt.run_invocation(&slot, payload, None).await;
        });
        Ok(())
    }

    /// Virtual mode: invokes and drives the clock until the invocation ends.
    pub fn invoke_blocking(&self, name: &str, payload: Payload) -> Result<InvocationRecord, RuntimeError> {
        if self.0.mode != ClockMode::Virtual {
            return Err(RuntimeError::WrongMode);
        }
        let slot = self.slot(name)?;
        let out: Rc<RefCell<Option<Result<InvocationRecord, RuntimeError>>>> = Rc::new(RefCell::new(None));
        let (rt, o) = (self.clone(), out.clone());
        self.spawn(async move {
            let r = rt.run_invocation(&slot, payload, None).await;
            *o.borrow_mut() = Some(r);
        });
        self.0.exec.run_until(|| out.borrow().is_some());
        let r = out.borrow_mut().take();
        r.expect("invocation did not finish")
    }

    /// Adds `function` as a subscriber of `topic`.
    pub fn subscribe(&self, topic: &str, function: &str) -> Result<(), RuntimeError> {
        self.slot(function)?;
        let mut topics = self.0.topics.borrow_mut();
        let subs = topics.entry(topic.to_owned()).or_default();
        if !subs.iter().any(|s| s == function) {
            subs.push(function.to_owned());
        }
        Ok(())
    }

    pub fn subscribers(&self, topic: &str) -> Vec<String> {
        self.0.topics.borrow().get(topic).cloned().unwrap_or_default()
    }

    /// Fans `payload` out to every subscriber of `topic`. Deliveries that
    /// share an ordering key reach each subscriber one at a time, in
    /// publication order. Failed deliveries are retried, then dead-lettered.
    pub fn publish(&self, topic: &str, ordering_key: &str, payload: Payload) {
        for sub in self.subscribers(topic) {
            let key = (topic.to_owned(), sub, ordering_key.to_owned());
            let start = {
                let mut lanes = self.0.lanes.borrow_mut();
                let lane = lanes.entry(key.clone()).or_default();
                if lane.busy {
                    lane.pending.push_back(payload.clone());
                    false
                } else {
                    lane.busy = true;
                    true
                }
            };
            if start {
                let rt = self.clone();
                let p = payload.clone();
                self.spawn(async move { rt.drain_lane(key, p).await });
            }
        }
    }

    async fn drain_lane(&self, key: (String, String, String), first: Payload) {
        let mut next = Some(first);
        while let Some(payload) = next {
            self.deliver_with_retry(&key.0, &key.1, payload).await;
            let mut lanes = self.0.lanes.borrow_mut();
            let lane = lanes.get_mut(&key).expect("lane exists while busy");
            next = lane.pending.pop_front();
            if next.is_none() {
                lanes.remove(&key);
            }
        }
    }

    async fn deliver_with_retry(&self, topic: &str, subscriber: &str, payload: Payload) {
        let Ok(slot) = self.slot(subscriber) else {
            return;
        };
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.run_invocation(&slot, payload.clone(), None).await {
                Ok(_) => return,
                Err(e) if attempts > TOPIC_MAX_RETRIES => {
                    self.0.topic_dead.borrow_mut().push(TopicDeadLetter {
                        topic: topic.to_owned(),
                        subscriber: subscriber.to_owned(),
                        payload,
                        attempts,
                        last_error: e.to_string(),
                    });
                    return;
                }
                Err(_) => self.sleep(TOPIC_RETRY_DELAY).await,
            }
        }
    }

    pub fn topic_dead_letters(&self) -> Vec<TopicDeadLetter> {
        self.0.topic_dead.borrow().clone()
    }

    pub fn records(&self) -> Vec<InvocationRecord> {
        self.0.records.borrow().clone()
    }

    pub fn records_for(&self, function: &str) -> Vec<InvocationRecord> {
        self.0.records.borrow().iter().filter(|r| r.function == function).cloned().collect()
    }

    pub fn with_records<R>(&self, f: impl FnOnce(&[InvocationRecord]) -> R) -> R {
        f(&self.0.records.borrow())
    }

    /// Virtual mode: moves the clock forward by `delta`, firing everything
    /// due on the way in timestamp order.
    pub fn advance_clock(&self, delta: Duration) -> Result<(), RuntimeError> {
        if self.0.mode != ClockMode::Virtual {
            return Err(RuntimeError::WrongMode);
        }
        self.0.exec.advance_to(self.now() + delta);
        Ok(())
    }

    /// Virtual mode: runs until nothing is left to do.
    pub fn run_until_idle(&self) -> Result<(), RuntimeError> {
        if self.0.mode != ClockMode::Virtual {
            return Err(RuntimeError::WrongMode);
        }
        self.0.exec.run_until_idle();
        Ok(())
    }

    /// Virtual mode: runs until `done` holds or the system is idle.
    pub fn run_until(&self, done: impl FnMut() -> bool) -> Result<bool, RuntimeError> {
        if self.0.mode != ClockMode::Virtual {
            return Err(RuntimeError::WrongMode);
        }
        Ok(self.0.exec.run_until(done))
    }

    /// Real-time mode: catches the clock up with the wall clock and runs
    /// everything that is due. Returns the next pending deadline.
    pub fn step_realtime(&self) -> Option<Timestamp> {
        self.0.exec.set_now(Timestamp::now_utc());
        let now = self.now();
        loop {
            self.0.exec.run_ready();
            if !self.0.exec.fire_next_timer(Some(now)) {
                break;
            }
        }
        self.0.exec.next_deadline()
    }

    pub fn pending_tasks(&self) -> usize {
        self.0.exec.task_count()
    }
}

/// Largest number of records of `function` whose [start, end) intervals
/// overlap at one instant.
pub fn max_overlap(records: &[InvocationRecord], function: &str) -> usize {
    let mut edges: Vec<(Timestamp, i32)> = Vec::new();
    for r in records.iter().filter(|r| r.function == function) {
        if r.end > r.start {
            edges.push((r.start, 1));
            edges.push((r.end, -1));
        }
    }
    // Ends sort before starts at the same instant.
    edges.sort();
    let (mut cur, mut best) = (0i32, 0i32);
    for (_, d) in edges {
        cur += d;
        best = best.max(cur);
    }
    best as usize
}

#[cfg(test)]
mod tests;
