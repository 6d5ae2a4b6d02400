use std::collections::BTreeMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::Timestamp;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceSegment {
    pub trace_id: String,
    pub segment_id: String,
    pub parent_segment_id: Option<String>,
    pub name: String,
    pub start: Timestamp,
    /// `None` while the segment is open.
    pub end: Option<Timestamp>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TraceError {
    #[error("unknown trace {0}")]
    UnknownTrace(String),
    #[error("trace {trace_id} has {roots} root segments")]
    RootCount { trace_id: String, roots: usize },
    #[error("segment {0} is still open")]
    Open(String),
    #[error("segment {0} ends before it starts")]
    Inverted(String),
    #[error("segment {0} has an unknown parent")]
    Orphan(String),
    #[error("segment {child} is not within its parent {parent}")]
    NotNested { child: String, parent: String },
}

#[derive(Default)]
struct Inner {
    traces: BTreeMap<String, Vec<TraceSegment>>,
    next_segment: u64,
}

/// Collects segments keyed by trace id.
#[derive(Default)]
pub struct Tracer {
    inner: Mutex<Inner>,
}

/// Trace ids follow the `1-<8 hex epoch seconds>-<24 hex>` shape.
pub fn trace_id(at: Timestamp, unique: u64) -> String {
    format!("1-{:08x}-{:024x}", at.as_micros() / 1_000_000, unique)
}

impl Tracer {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(
        &self,
        trace_id: &str,
        parent: Option<&str>,
        name: &str,
        start: Timestamp,
        end: Option<Timestamp>,
    ) -> String {
        let mut g = self.inner.lock().expect("tracer poisoned");
        g.next_segment += 1;
        let segment_id = format!("{:016x}", g.next_segment);
        g.traces.entry(trace_id.to_owned()).or_default().push(TraceSegment {
            trace_id: trace_id.to_owned(),
            segment_id: segment_id.clone(),
            parent_segment_id: parent.map(str::to_owned),
            name: name.to_owned(),
            start,
            end,
        });
        segment_id
    }

    /// Opens a segment and returns its id.
    pub fn begin(&self, trace_id: &str, parent: Option<&str>, name: &str, start: Timestamp) -> String {
        self.push(trace_id, parent, name, start, None)
    }

    /// Records a finished segment.
    pub fn record(&self, trace_id: &str, parent: Option<&str>, name: &str, start: Timestamp, end: Timestamp) -> String {
        self.push(trace_id, parent, name, start, Some(end))
    }

    pub fn end(&self, trace_id: &str, segment_id: &str, end: Timestamp) {
        let mut g = self.inner.lock().expect("tracer poisoned");
        if let Some(seg) =
            g.traces.get_mut(trace_id).and_then(|segs| segs.iter_mut().find(|s| s.segment_id == segment_id))
        {
            seg.end = Some(end);
        }
    }

    pub fn root(&self, trace_id: &str) -> Option<TraceSegment> {
        let g = self.inner.lock().expect("tracer poisoned");
        g.traces.get(trace_id)?.iter().find(|s| s.parent_segment_id.is_none()).cloned()
    }

    pub fn segments(&self, trace_id: &str) -> Option<Vec<TraceSegment>> {
        self.inner.lock().expect("tracer poisoned").traces.get(trace_id).cloned()
    }

    pub fn trace_ids(&self) -> Vec<String> {
        self.inner.lock().expect("tracer poisoned").traces.keys().cloned().collect()
    }

    pub fn check(&self, trace_id: &str) -> Result<(), TraceError> {
        let segs = self.segments(trace_id).ok_or_else(|| TraceError::UnknownTrace(trace_id.to_owned()))?;
        check_well_formed(trace_id, &segs)
    }
}

/// Single root, all segments closed, and every child within its parent.
pub fn check_well_formed(trace_id: &str, segs: &[TraceSegment]) -> Result<(), TraceError> {
    let roots = segs.iter().filter(|s| s.parent_segment_id.is_none()).count();
    if roots != 1 {
        return Err(TraceError::RootCount { trace_id: trace_id.to_owned(), roots });
    }
    let by_id: BTreeMap<&str, &TraceSegment> = segs.iter().map(|s| (s.segment_id.as_str(), s)).collect();
    for s in segs {
        let end = s.end.ok_or_else(|| TraceError::Open(s.segment_id.clone()))?;
        if end < s.start {
            return Err(TraceError::Inverted(s.segment_id.clone()));
        }
        if let Some(pid) = &s.parent_segment_id {
            let p = by_id.get(pid.as_str()).ok_or_else(|| TraceError::Orphan(s.segment_id.clone()))?;
            let pend = p.end.ok_or_else(|| TraceError::Open(p.segment_id.clone()))?;
            if s.start < p.start || end > pend {
                return Err(TraceError::NotNested { child: s.segment_id.clone(), parent: pid.clone() });
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(us: u64) -> Timestamp {
        Timestamp::from_micros(us)
    }

    #[test]
    fn trace_id_shape() {
        let id = trace_id(Timestamp::from_secs(0x5f00_0000), 7);
        assert_eq!(id, "1-5f000000-000000000000000000000007");
    }

    #[test]
    fn nesting_rules() {
        let tr = Tracer::new();
        let root = tr.begin("x", None, "campaign", t(0));
        tr.record("x", Some(&root), "preprocess", t(10), t(20));
        assert_eq!(tr.check("x"), Err(TraceError::Open(root.clone())));
        tr.end("x", &root, t(30));
        assert_eq!(tr.check("x"), Ok(()));
        tr.record("x", Some(&root), "late", t(25), t(31));
        assert!(matches!(tr.check("x"), Err(TraceError::NotNested { .. })));

        let tr = Tracer::new();
        tr.record("y", None, "a", t(0), t(1));
        tr.record("y", None, "b", t(0), t(1));
        assert!(matches!(tr.check("y"), Err(TraceError::RootCount { roots: 2, .. })));
        assert!(matches!(tr.check("z"), Err(TraceError::UnknownTrace(_))));
    }
}
