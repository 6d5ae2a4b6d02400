//! Metrics, trace segments, campaign durations and the timing report.

mod fit;
pub mod metrics;
mod trace;

use serde::Serialize;
use thiserror::Error;

pub use fit::{ols, LinearFit};
pub use metrics::{bounce_rate, Dimensions, EventCounts, MetricPoint, Metrics};
pub use trace::{check_well_formed, trace_id, TraceError, TraceSegment, Tracer};

use crate::config::Config;
use crate::domain::CampaignState;
use crate::sim::{SimError, Simulation};
use crate::store::StoreError;
use crate::system::Services;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ObserveError {
    #[error("campaign {0} is not complete")]
    NotComplete(String),
    #[error("campaign {0} has no trace")]
    NoTrace(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Seconds from the gateway receiving the campaign (its root segment start)
/// to its last transport send. A campaign that sent nothing measures to its
/// completion instead.
pub fn campaign_duration(svc: &Services, campaign_id: &str) -> Result<f64, ObserveError> {
    let (state, trace_id, last, completed) =
        svc.store.with_campaign(campaign_id, |c| (c.state, c.trace_id.clone(), c.last_send_at, c.completed_at))?;
    if state != CampaignState::Complete {
        return Err(ObserveError::NotComplete(campaign_id.to_owned()));
    }
    let root = svc.tracer.root(&trace_id).ok_or_else(|| ObserveError::NoTrace(campaign_id.to_owned()))?;
    let end = last.or(completed).unwrap_or(root.start);
    Ok(end.saturating_since(root.start).as_secs_f64())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimingRow {
    pub n_emails: u64,
    pub duration_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingReport {
    pub rows: Vec<TimingRow>,
    /// Absent with fewer than two distinct sizes.
    pub fit: Option<LinearFit>,
}

impl TimingReport {
    pub fn from_rows(mut rows: Vec<TimingRow>) -> Self {
        rows.sort_by_key(|r| r.n_emails);
        let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.n_emails as f64, r.duration_s)).collect();
        TimingReport { fit: ols(&pts), rows }
    }

    /// `n_emails,duration_s` rows, then a `# fit` summary line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n_emails,duration_s\n");
        for r in &self.rows {
            out.push_str(&format!("{},{:.6}\n", r.n_emails, r.duration_s));
        }
        match &self.fit {
            Some(f) => out.push_str(&format!(
                "# fit slope_s_per_email={:.9} intercept_s={:.6} r_squared={:.6}\n",
                f.slope_s_per_email, f.intercept_s, f.r_squared
            )),
            None => out.push_str("# fit absent\n"),
        }
        out
    }
}

/// Runs one isolated virtual campaign per size and fits duration against
/// size. Recipients all take the default delivery outcome.
pub fn timing_series(sizes: &[u64], config: &Config) -> Result<TimingReport, SimError> {
    let mut rows = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let sim = Simulation::new(config.clone(), Default::default(), crate::sim::DEFAULT_START)?;
        let resp = sim.submit(crate::sim::synthetic_request(n as usize))?;
        sim.engine().run_until_campaigns_done()?;
        let duration_s = campaign_duration(sim.services(), &resp.campaign_id)?;
        rows.push(TimingRow { n_emails: n, duration_s });
    }
    Ok(TimingReport::from_rows(rows))
}
