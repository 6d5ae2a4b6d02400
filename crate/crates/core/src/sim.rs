//! Virtual-clock harness: the whole pipeline on one thread with the mock
//! transport, plus a log of every transport call.

use std::fmt::Write as _;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use thiserror::Error;

use crate::config::Config;
use crate::domain::{BounceType, EmailAddress, Timestamp};
use crate::gateway::{ApiError, Gateway, RawRecipient, SubmitRequest, SubmitResponse};
use crate::observe::{campaign_duration, ObserveError};
use crate::runtime::{ClockMode, RuntimeError};
use crate::store::Store;
use crate::system::{Engine, Services};
use crate::transport::{
    EventStep, Matcher, MockTransport, OutcomeRule, OutgoingMessage, RuleSet, SendReceipt, Transport, TransportError,
};

/// 2025-01-01T09:00:00Z
pub const DEFAULT_START: Timestamp = Timestamp::from_secs(1_735_722_000);

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error(transparent)]
    Api(#[from] ApiError),
    #[error(transparent)]
    Observe(#[from] ObserveError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SendCall {
    pub campaign_id: String,
    pub address: EmailAddress,
    pub at: Timestamp,
}

/// Logs each call, then forwards it.
pub struct RecordingTransport {
    inner: Arc<dyn Transport>,
    calls: Mutex<Vec<SendCall>>,
}

impl RecordingTransport {
    pub fn new(inner: Arc<dyn Transport>) -> Self {
        RecordingTransport { inner, calls: Mutex::new(Vec::new()) }
    }

    pub fn calls(&self) -> Vec<SendCall> {
        self.calls.lock().expect("calls poisoned").clone()
    }
}

impl Transport for RecordingTransport {
    fn send(&self, msg: &OutgoingMessage, now: Timestamp) -> Result<SendReceipt, TransportError> {
        self.calls.lock().expect("calls poisoned").push(SendCall {
            campaign_id: msg.campaign_id.clone(),
            address: msg.to.clone(),
            at: now,
        });
        self.inner.send(msg, now)
    }
}

pub struct Simulation {
    engine: Engine,
    gateway: Gateway,
    recorder: Arc<RecordingTransport>,
}

impl Simulation {
    pub fn new(config: Config, rules: RuleSet, start: Timestamp) -> Result<Self, SimError> {
        let mock = Arc::new(MockTransport::new(rules, config.limits.payload_limit_bytes));
        Self::with_transport(config, Arc::new(Store::in_memory()), mock, start)
    }

    pub fn with_transport(
        config: Config,
        store: Arc<Store>,
        transport: Arc<dyn Transport>,
        start: Timestamp,
    ) -> Result<Self, SimError> {
        let recorder = Arc::new(RecordingTransport::new(transport));
        let svc = Services::new(config, store, recorder.clone(), start);
        let engine = Engine::new(svc, ClockMode::Virtual, start)?;
        let gateway = engine.gateway();
        Ok(Simulation { engine, gateway, recorder })
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    pub fn services(&self) -> &Arc<Services> {
        self.engine.services()
    }

    pub fn now(&self) -> Timestamp {
        self.engine.runtime().now()
    }

    /// Submits at the current virtual time. Nothing runs until the clock
    /// is driven.
    pub fn submit(&self, req: SubmitRequest) -> Result<SubmitResponse, ApiError> {
        self.gateway.submit(req, self.now())
    }

    pub fn run_until_quiescent(&self) -> Result<(), SimError> {
        Ok(self.engine.run_until_quiescent()?)
    }

    pub fn advance(&self, d: Duration) -> Result<(), SimError> {
        self.engine.pump();
        self.engine.runtime().advance_clock(d)?;
        self.engine.sync_clock();
        Ok(())
    }

    /// Moves the clock to `t`, running everything due before it.
    pub fn advance_to(&self, t: Timestamp) -> Result<(), SimError> {
        self.advance(t.saturating_since(self.now()))
    }

    pub fn transport_calls(&self) -> Vec<SendCall> {
        self.recorder.calls()
    }
}

pub const SENDER: &str = "campaigns@mailburst.example";

pub fn request(recipients: Vec<String>) -> SubmitRequest {
    SubmitRequest {
        from: SENDER.into(),
        subject: "Hello {{name}}".into(),
        html_body: "<p>Hi {{name}}, this is message {{n}}.</p>".into(),
        recipients: recipients
            .into_iter()
            .enumerate()
            .map(|(i, a)| RawRecipient::Entry {
                variables: [("name".to_owned(), format!("user {i}")), ("n".to_owned(), i.to_string())].into(),
                address: a,
            })
            .collect(),
    }
}

/// `n` distinct `example.com` recipients with their template variables.
pub fn synthetic_request(n: usize) -> SubmitRequest {
    request((0..n).map(|i| format!("user{i:06}@example.com")).collect())
}

/// Flags accepted by `mailburst simulate`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulateArgs {
    pub recipients: usize,
    pub bounce_fraction: f64,
    pub seed: u64,
}

/// One end-to-end virtual campaign, reported as `key=value` lines.
pub fn simulate(args: &SimulateArgs, config: Config) -> Result<String, SimError> {
    let rules = RuleSet { seed: args.seed, ..RuleSet::default() }.with_rule(OutcomeRule::new(
        Matcher::Probability { p: args.bounce_fraction, seed: args.seed },
        vec![EventStep::bounce(BounceType::Permanent)],
    ));
    let sim = Simulation::new(config, rules, DEFAULT_START)?;
    let resp = sim.submit(synthetic_request(args.recipients))?;
    sim.run_until_quiescent()?;
    let svc = sim.services();
    let id = &resp.campaign_id;
    let view = sim.gateway().campaign(id)?;
    let bounces = sim.gateway().bounces(id)?;
    let duration = campaign_duration(svc, id).ok();
    let m = svc.metrics.counts();

    let mut out = String::new();
    let mut line = |k: &str, v: String| {
        let _ = writeln!(out, "{k}={v}");
    };
    line("campaign_id", id.clone());
    line("state", format!("{:?}", view.state));
    line("recipients", args.recipients.to_string());
    line("accepted", resp.accepted_count.to_string());
    line("batches", resp.batch_count.to_string());
    line("sent", view.counts.sent.to_string());
    line("suppressed_skipped", view.counts.suppressed_skipped.to_string());
    line("render_failed", view.counts.render_failed.to_string());
    line("bounces", bounces.len().to_string());
    line("deliveries", m.delivery.to_string());
    line("bounce_rate", format!("{:.6}", m.bounce_rate()));
    line("duration_s", duration.map(|d| format!("{d:.6}")).unwrap_or_else(|| "n/a".into()));
    line("suppression_list", svc.store.suppression_list().len().to_string());
    Ok(out)
}
