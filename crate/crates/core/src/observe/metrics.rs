use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Mutex;

use serde::Serialize;

use crate::domain::Timestamp;
use crate::transport::EventType;

pub type Dimensions = BTreeMap<String, String>;

/// Counter names besides the four event types.
pub const SEND: &str = "Send";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricPoint {
    pub name: String,
    pub timestamp: Timestamp,
    pub value: f64,
    pub dimensions: Dimensions,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct EventCounts {
    pub send: u64,
    pub delivery: u64,
    pub bounce: u64,
    pub complaint: u64,
    pub open: u64,
}

impl EventCounts {
    pub fn bounce_rate(&self) -> f64 {
        bounce_rate(self.bounce, self.send)
    }
}

/// Zero sends report a rate of 0.
pub fn bounce_rate(bounces: u64, sends: u64) -> f64 {
    if sends == 0 {
        0.0
    } else {
        bounces as f64 / sends as f64
    }
}

#[derive(Default)]
struct Inner {
    points: Vec<MetricPoint>,
    totals: BTreeMap<(String, Dimensions), f64>,
}

/// In-process metric sink: every recorded point is kept, and running totals
/// are maintained per (name, dimensions) series.
#[derive(Default)]
pub struct Metrics {
    inner: Mutex<Inner>,
}

impl Metrics {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record_metric(&self, name: &str, value: f64, dims: Dimensions, at: Timestamp) {
        let mut g = self.inner.lock().expect("metrics poisoned");
        *g.totals.entry((name.to_owned(), dims.clone())).or_default() += value;
        g.points.push(MetricPoint { name: name.to_owned(), timestamp: at, value, dimensions: dims });
    }

    /// Counts one event globally and under its campaign.
    pub fn count(&self, name: &str, campaign_id: &str, at: Timestamp) {
        self.record_metric(name, 1.0, Dimensions::new(), at);
        let dims = Dimensions::from([("campaign_id".to_owned(), campaign_id.to_owned())]);
        self.record_metric(name, 1.0, dims, at);
    }

    pub fn count_event(&self, event: EventType, campaign_id: &str, at: Timestamp) {
        self.count(event.as_str(), campaign_id, at);
    }

    pub fn total(&self, name: &str, dims: &Dimensions) -> f64 {
        let g = self.inner.lock().expect("metrics poisoned");
        g.totals.get(&(name.to_owned(), dims.clone())).copied().unwrap_or(0.0)
    }

    fn counts_for(&self, dims: &Dimensions) -> EventCounts {
        let get = |n: &str| self.total(n, dims) as u64;
        EventCounts {
            send: get(SEND),
            delivery: get(EventType::Delivery.as_str()),
            bounce: get(EventType::Bounce.as_str()),
            complaint: get(EventType::Complaint.as_str()),
            open: get(EventType::Open.as_str()),
        }
    }

    pub fn counts(&self) -> EventCounts {
        self.counts_for(&Dimensions::new())
    }

    pub fn campaign_counts(&self, campaign_id: &str) -> EventCounts {
        self.counts_for(&Dimensions::from([("campaign_id".to_owned(), campaign_id.to_owned())]))
    }

    pub fn points(&self) -> Vec<MetricPoint> {
        self.inner.lock().expect("metrics poisoned").points.clone()
    }

    /// One `name{dims} value` line per series, sorted, then the global
    /// bounce rate. The five event counters always appear.
    pub fn exposition(&self) -> String {
        let g = self.inner.lock().expect("metrics poisoned");
        let mut totals = g.totals.clone();
        drop(g);
        for name in [SEND, "Delivery", "Bounce", "Complaint", "Open"] {
            totals.entry((name.to_owned(), Dimensions::new())).or_insert(0.0);
        }
        let mut out = String::new();
        for ((name, dims), value) in &totals {
            let labels = dims.iter().map(|(k, v)| format!("{k}=\"{v}\"")).collect::<Vec<_>>().join(",");
            let _ = writeln!(out, "{}{{{}}} {}", name, labels, fmt_value(*value));
        }
        let _ = writeln!(out, "bounce_rate{{}} {}", fmt_value(self.counts().bounce_rate()));
        out
    }
}

fn fmt_value(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_counters_are_zero() {
        let m = Metrics::new();
        assert_eq!(m.counts(), EventCounts { send: 0, delivery: 0, bounce: 0, complaint: 0, open: 0 });
        assert_eq!(m.counts().bounce_rate(), 0.0);
        let text = m.exposition();
        assert!(text.contains("Send{} 0\n"));
        assert!(text.contains("bounce_rate{} 0\n"));
    }

    #[test]
    fn bounce_rate_division() {
        let m = Metrics::new();
        for i in 0..100 {
            m.count(SEND, "c", Timestamp::from_micros(i));
        }
        for i in 0..7 {
            m.count_event(EventType::Bounce, "c", Timestamp::from_micros(100 + i));
        }
        assert_eq!(m.counts().bounce_rate(), 0.07);
        assert_eq!(m.campaign_counts("c").bounce, 7);
        assert!(m.exposition().contains("Bounce{campaign_id=\"c\"} 7\n"));
        assert_eq!(m.points().len(), 214);
    }
}
