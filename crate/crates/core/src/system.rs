//! Wiring of the pipeline: shared thread-safe services plus the engine that
//! owns the runtime and registers the three functions.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use crate::config::{Config, BOUNCE_FN, PREPROCESS_FN, SENDER_FN};
use crate::dispatch::{self, Quota, RateLimiter};
use crate::domain::{Batch, Constraints, Timestamp};
use crate::gateway::Gateway;
use crate::observe::{Metrics, Tracer};
use crate::queue::FifoQueue;
use crate::runtime::{handler_fn, ClockMode, HandlerError, Payload, Runtime, RuntimeError, Trigger};
use crate::store::{DeadLetterRecord, Store};
use crate::transport::{EventTopic, Transport};
use crate::{bounce, ingest};

pub const BATCH_QUEUE: &str = "batches";

/// Test hooks for crash and failure injection.
#[derive(Default)]
pub struct Faults {
    /// Makes the next preprocess stop after enqueuing this many batches.
    pub preprocess_crash_after: Mutex<Option<u32>>,
}

/// Everything the functions and the HTTP layer share. `Send + Sync`.
pub struct Services {
    pub config: Config,
    pub constraints: Constraints,
    pub store: Arc<Store>,
    pub limiter: RateLimiter,
    pub quota: Quota,
    pub metrics: Metrics,
    pub tracer: Tracer,
    pub transport: Arc<dyn Transport>,
    pub queue: Arc<FifoQueue<Batch>>,
    pub faults: Faults,
    inflight: Mutex<BTreeMap<String, u32>>,
    next_id: AtomicU64,
    /// Engine time in µs for callers off the runtime thread; 0 means wall clock.
    clock_micros: AtomicU64,
}

impl Services {
    pub fn new(config: Config, store: Arc<Store>, transport: Arc<dyn Transport>, start: Timestamp) -> Arc<Self> {
        let constraints = config.constraints();
        Arc::new(Services {
            limiter: RateLimiter::new(config.limits.rate_per_s, config.burst(), start),
            quota: Quota::new(config.limits.daily_quota, start),
            queue: Arc::new(FifoQueue::with_max_redeliveries(BATCH_QUEUE, config.queue.max_redeliveries)),
            metrics: Metrics::new(),
            tracer: Tracer::new(),
            faults: Faults::default(),
            inflight: Mutex::new(BTreeMap::new()),
            next_id: AtomicU64::new(1),
            clock_micros: AtomicU64::new(0),
            constraints,
            config,
            store,
            transport,
        })
    }

    /// The engine's current time as last published by it.
    pub fn now(&self) -> Timestamp {
        match self.clock_micros.load(Ordering::SeqCst) {
            0 => Timestamp::now_utc(),
            us => Timestamp::from_micros(us),
        }
    }

    fn publish_clock(&self, t: Timestamp) {
        self.clock_micros.store(t.as_micros(), Ordering::SeqCst);
    }

    pub fn next_id(&self) -> u64 {
        self.next_id.fetch_add(1, Ordering::SeqCst)
    }

    /// Marks a batch processor for `campaign_id` as running until the guard
    /// drops.
    pub fn enter(self: &Arc<Self>, campaign_id: &str) -> InflightGuard {
        *self.inflight.lock().expect("inflight poisoned").entry(campaign_id.to_owned()).or_default() += 1;
        InflightGuard { svc: self.clone(), campaign_id: campaign_id.to_owned() }
    }

    pub fn inflight(&self, campaign_id: &str) -> u32 {
        self.inflight.lock().expect("inflight poisoned").get(campaign_id).copied().unwrap_or(0)
    }
}

pub struct InflightGuard {
    svc: Arc<Services>,
    campaign_id: String,
}

impl Drop for InflightGuard {
    fn drop(&mut self) {
        let mut m = self.svc.inflight.lock().expect("inflight poisoned");
        if let Some(n) = m.get_mut(&self.campaign_id) {
            *n -= 1;
            if *n == 0 {
                m.remove(&self.campaign_id);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Command {
    Preprocess(String),
}

/// Owns the runtime; lives on one thread.
pub struct Engine {
    rt: Runtime,
    svc: Arc<Services>,
    topic: EventTopic,
    tx: Sender<Command>,
    rx: Receiver<Command>,
}

impl Engine {
    pub fn new(svc: Arc<Services>, mode: ClockMode, start: Timestamp) -> Result<Self, RuntimeError> {
        let rt = Runtime::new(mode, start);
        if mode == ClockMode::Virtual {
            svc.publish_clock(start);
        }
        let topic = EventTopic::new(rt.clone(), EventTopic::DEFAULT_NAME);
        rt.add_queue(svc.queue.clone(), svc.config.visibility_timeout());

        let s = svc.clone();
        let dead_svc = svc.clone();
        let dead_rt = rt.clone();
        rt.on_dead_letter(BATCH_QUEUE, move |dl| {
            let now = dead_rt.now();
            let batch = &dl.message.body;
            let _ = dead_svc.store.record_dead_letter(DeadLetterRecord {
                queue: BATCH_QUEUE.to_owned(),
                message_id: dl.message.message_id.clone(),
                group_id: dl.message.group_id.clone(),
                batch_seq: batch.batch_seq,
                delivery_count: dl.message.delivery_count,
                parked_at: dl.parked_at,
            });
            tracing::warn!(campaign = %batch.campaign_id, seq = batch.batch_seq, "batch dead-lettered");
            dispatch::fail_campaign(&dead_svc, &batch.campaign_id, "batch dead-lettered", now);
        });

        let cfg = &svc.config;
        rt.register_function(
            cfg.function_spec(PREPROCESS_FN, Trigger::Http, 10),
            handler_fn(move |inv, payload| {
                let s = s.clone();
                async move {
                    let Payload::Campaign(id) = payload else {
                        return Err(HandlerError::new("preprocess expects a campaign id"));
                    };
                    ingest::preprocess(&s, &inv.runtime, &id).await.map(|_| ()).map_err(HandlerError::new)
                }
            }),
        )?;

        let s = svc.clone();
        let t = topic.clone();
        rt.register_function(
            cfg.function_spec(SENDER_FN, Trigger::Queue(BATCH_QUEUE.into()), cfg.sender.workers),
            handler_fn(move |inv, payload| {
                let (s, t) = (s.clone(), t.clone());
                async move {
                    let Payload::Batch(d) = payload else {
                        return Err(HandlerError::new("sender expects a batch"));
                    };
                    dispatch::process_batch(&s, &inv.runtime, &t, d).await.map(|_| ())
                }
            }),
        )?;

        let s = svc.clone();
        rt.register_function(
            cfg.function_spec(BOUNCE_FN, Trigger::Topic(EventTopic::DEFAULT_NAME.into()), 10),
            handler_fn(move |_inv, payload| {
                let s = s.clone();
                async move {
                    let Payload::Event(e) = payload else {
                        return Err(HandlerError::new("bounce handler expects an event"));
                    };
                    bounce::handle_event(&s, &e).map_err(HandlerError::new)
                }
            }),
        )?;

        let (tx, rx) = mpsc::channel();
        Ok(Engine { rt, svc, topic, tx, rx })
    }

    pub fn runtime(&self) -> &Runtime {
        &self.rt
    }

    pub fn services(&self) -> &Arc<Services> {
        &self.svc
    }

    pub fn topic(&self) -> &EventTopic {
        &self.topic
    }

    pub fn gateway(&self) -> Gateway {
        Gateway::new(self.svc.clone(), self.tx.clone())
    }

    fn handle(&self, cmd: Command) {
        match cmd {
            Command::Preprocess(id) => {
                if let Err(e) = self.rt.invoke_detached(PREPROCESS_FN, Payload::Campaign(id)) {
                    tracing::error!(error = %e, "could not start preprocessing");
                }
            }
        }
    }

    /// Makes the virtual time visible to `Services::now`.
    pub fn sync_clock(&self) {
        if self.rt.mode() == ClockMode::Virtual {
            self.svc.publish_clock(self.rt.now());
        }
    }

    /// Starts work for every queued command. Returns whether there was any.
    pub fn pump(&self) -> bool {
        let mut any = false;
        while let Ok(cmd) = self.rx.try_recv() {
            self.handle(cmd);
            any = true;
        }
        any
    }

    /// Virtual mode: runs until no command, task or timer is left.
    pub fn run_until_quiescent(&self) -> Result<(), RuntimeError> {
        loop {
            self.pump();
            self.rt.run_until_idle()?;
            self.sync_clock();
            if !self.pump() {
                return Ok(());
            }
        }
    }

    /// Virtual mode: runs until every known campaign is terminal, leaving
    /// later timers (pending delivery events) unfired.
    pub fn run_until_campaigns_done(&self) -> Result<(), RuntimeError> {
        self.pump();
        let store = self.svc.store.clone();
        self.rt.run_until(|| {
            store.campaign_ids().iter().all(|id| store.with_campaign(id, |c| c.state.is_terminal()).unwrap_or(true))
        })?;
        self.sync_clock();
        Ok(())
    }

    /// Real-time driver: keeps the clock in step with the wall clock and
    /// executes commands until `stop` is set.
    pub fn serve(&self, stop: &AtomicBool) {
        const MAX_IDLE: Duration = Duration::from_millis(50);
        while !stop.load(Ordering::SeqCst) {
            self.pump();
            let next = self.rt.step_realtime();
            let wait = match next {
                Some(deadline) => deadline.saturating_since(Timestamp::now_utc()).min(MAX_IDLE),
                None => MAX_IDLE,
            };
            match self.rx.recv_timeout(wait) {
                Ok(cmd) => self.handle(cmd),
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => return,
            }
        }
    }
}
