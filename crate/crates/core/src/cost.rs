//! Monthly cost estimate: sending, data transfer, receiving and compute.
//!
//! Data transfer is billed per decimal gigabyte (10^9 bytes). Line items are
//! kept unrounded; only the total is rounded, half-up to cents.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::runtime::InvocationRecord;

pub const BYTES_PER_GB: f64 = 1e9;

#[derive(Debug, Error)]
pub enum CostError {
    #[error("{0} must not be negative")]
    NegativeInput(&'static str),
    #[error("unknown rates preset {0:?} (expected paper-example or paper-sentence)")]
    UnknownPreset(String),
    #[error("reading rates: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing rates: {0}")]
    Parse(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostRates {
    pub per_thousand_sent: f64,
    pub per_gb_data: f64,
    pub per_thousand_received: f64,
    pub received_free_tier: u64,
    pub compute_per_gbsecond: f64,
}

impl Default for CostRates {
    fn default() -> Self {
        CostRates {
            per_thousand_sent: 0.10,
            per_gb_data: 0.12,
            per_thousand_received: 0.10,
            received_free_tier: 1000,
            compute_per_gbsecond: 0.0,
        }
    }
}

impl CostRates {
    /// Rates that reproduce the worked monthly example (the defaults).
    pub fn paper_example() -> Self {
        Self::default()
    }

    /// The one-cent-per-thousand sending rate, everything else default.
    pub fn paper_sentence() -> Self {
        CostRates { per_thousand_sent: 0.01, ..Self::default() }
    }

    pub fn preset(name: &str) -> Result<Self, CostError> {
        match name {
            "paper-example" => Ok(Self::paper_example()),
            "paper-sentence" => Ok(Self::paper_sentence()),
            other => Err(CostError::UnknownPreset(other.to_owned())),
        }
    }

    /// A preset name, or a path to a JSON rates file.
    pub fn resolve(spec: &str) -> Result<Self, CostError> {
        match Self::preset(spec) {
            Ok(r) => Ok(r),
            Err(e) if !Path::new(spec).exists() => Err(e),
            Err(_) => {
                let rates: CostRates = serde_json::from_str(&std::fs::read_to_string(spec)?)?;
                rates.validate()?;
                Ok(rates)
            }
        }
    }

    pub fn validate(&self) -> Result<(), CostError> {
        for (name, v) in [
            ("per_thousand_sent", self.per_thousand_sent),
            ("per_gb_data", self.per_gb_data),
            ("per_thousand_received", self.per_thousand_received),
            ("compute_per_gbsecond", self.compute_per_gbsecond),
        ] {
            if !(v >= 0.0) {
                return Err(CostError::NegativeInput(name));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Usage {
    pub sent: i64,
    pub received: i64,
    pub avg_size_bytes: i64,
    pub gb_seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostEstimate {
    pub sending: f64,
    pub data: f64,
    pub receiving: f64,
    pub compute: f64,
    /// Sum of the line items, rounded half-up to cents.
    pub total: f64,
}

impl CostEstimate {
    pub fn total_cents(&self) -> i64 {
        (self.total * 100.0).round() as i64
    }

    /// `item,amount_usd` table.
    pub fn to_table(&self) -> String {
        format!(
            "item,amount_usd\nsending,{:.6}\ndata,{:.6}\nreceiving,{:.6}\ncompute,{:.6}\ntotal,{:.2}\n",
            self.sending, self.data, self.receiving, self.compute, self.total
        )
    }
}

/// Half-up to cents. The small bias absorbs binary representation error in
/// sums such as 0.125 that are exact halves in decimal.
pub fn round_cents(x: f64) -> f64 {
    (x * 100.0 + 0.5 + 1e-7).floor() / 100.0
}

pub fn estimate_monthly(usage: Usage, rates: &CostRates) -> Result<CostEstimate, CostError> {
    if usage.sent < 0 {
        return Err(CostError::NegativeInput("sent"));
    }
    if usage.received < 0 {
        return Err(CostError::NegativeInput("received"));
    }
    if usage.avg_size_bytes < 0 {
        return Err(CostError::NegativeInput("avg_size_bytes"));
    }
    if !(usage.gb_seconds >= 0.0) {
        return Err(CostError::NegativeInput("gb_seconds"));
    }
    rates.validate()?;
    let sent = usage.sent as f64;
    let sending = sent / 1000.0 * rates.per_thousand_sent;
    let data = sent * usage.avg_size_bytes as f64 / BYTES_PER_GB * rates.per_gb_data;
    let billable_received = (usage.received as u64).saturating_sub(rates.received_free_tier);
    let receiving = billable_received as f64 / 1000.0 * rates.per_thousand_received;
    let compute = usage.gb_seconds * rates.compute_per_gbsecond;
    let total = round_cents(sending + data + receiving + compute);
    Ok(CostEstimate { sending, data, receiving, compute, total })
}

/// GB-seconds billed across invocation records at `memory_mb` per instance.
pub fn gb_seconds(records: &[InvocationRecord], memory_mb: u32) -> f64 {
    let ms: u64 = records.iter().map(|r| r.billed_ms).sum();
    ms as f64 / 1000.0 * memory_mb as f64 / 1024.0
}

/// Queue requests for a month of sending: one send, receive and delete per
/// batch of `batch_size`.
pub fn estimated_queue_requests(sent: u64, batch_size: u32) -> u64 {
    sent.div_ceil(batch_size.max(1) as u64) * 3
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn usage(sent: i64, received: i64, size: i64) -> Usage {
        Usage { sent, received, avg_size_bytes: size, gb_seconds: 0.0 }
    }

    /// Hand calculation: 250 thousand sends at $0.10, 8.192 GB at $0.12,
    /// no billable receipts.
    #[test]
    fn worked_example() {
        let e = estimate_monthly(usage(250_000, 1000, 32_768), &CostRates::paper_example()).unwrap();
        assert!((e.sending - 25.0).abs() < 1e-12);
        assert!((e.data - 0.98304).abs() < 1e-12);
        assert_eq!(e.receiving, 0.0);
        assert_eq!(e.total, 25.98);
        assert_eq!(e.total_cents(), 2598);
    }

    #[test]
    fn sentence_preset() {
        let e = estimate_monthly(usage(250_000, 1000, 32_768), &CostRates::paper_sentence()).unwrap();
        assert!((e.sending - 2.5).abs() < 1e-12);
        assert_eq!(e.total, 3.48);
    }

    #[test]
    fn zero_and_sending_only() {
        assert_eq!(estimate_monthly(usage(0, 0, 4096), &CostRates::default()).unwrap().total, 0.0);
        let only_sending = CostRates {
            per_thousand_sent: 0.10,
            per_gb_data: 0.0,
            per_thousand_received: 0.0,
            received_free_tier: 0,
            compute_per_gbsecond: 0.0,
        };
        assert_eq!(estimate_monthly(usage(50_000, 0, 0), &only_sending).unwrap().total, 5.0);
    }

    #[test]
    fn receiving_beyond_free_tier() {
        let e = estimate_monthly(usage(0, 3500, 0), &CostRates::default()).unwrap();
        assert!((e.receiving - 0.25).abs() < 1e-12);
        assert_eq!(e.total, 0.25);
    }

    #[test]
    fn rounding_is_half_up_at_the_end() {
        assert_eq!(round_cents(0.125), 0.13);
        assert_eq!(round_cents(0.124999), 0.12);
        assert_eq!(round_cents(25.98304), 25.98);
        assert_eq!(round_cents(2.005), 2.01);
    }

    #[test]
    fn negative_inputs_rejected() {
        assert!(matches!(
            estimate_monthly(usage(-1, 0, 0), &CostRates::default()),
            Err(CostError::NegativeInput("sent"))
        ));
        assert!(matches!(estimate_monthly(usage(0, -1, 0), &CostRates::default()), Err(CostError::NegativeInput(_))));
        let bad = CostRates { per_gb_data: -0.1, ..CostRates::default() };
        assert!(matches!(estimate_monthly(usage(1, 0, 0), &bad), Err(CostError::NegativeInput("per_gb_data"))));
    }

    #[test]
    fn presets_and_files() {
        assert!(CostRates::resolve("nope").is_err());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rates.json");
        std::fs::write(&p, r#"{"per_thousand_sent": 0.2}"#).unwrap();
        let r = CostRates::resolve(p.to_str().unwrap()).unwrap();
        assert_eq!(r.per_thousand_sent, 0.2);
        assert_eq!(r.per_gb_data, 0.12);
    }

    #[test]
    fn queue_request_estimate() {
        assert_eq!(estimated_queue_requests(250_000, 50), 15_000);
        assert_eq!(estimated_queue_requests(101, 50), 9);
    }

    proptest! {
        #[test]
        fn sending_line_is_linear(sent in 0i64..10_000_000, k in 1i64..50) {
            let r = CostRates::default();
            let a = estimate_monthly(usage(sent, 0, 100), &r).unwrap();
            let b = estimate_monthly(usage(sent * k, 0, 100), &r).unwrap();
            prop_assert!((b.sending - k as f64 * a.sending).abs() <= 1e-9 * b.sending.max(1.0));
        }

        #[test]
        fn total_is_monotone(sent in 0i64..1_000_000, recv in 0i64..1_000_000, size in 0i64..100_000,
                             ds in 0i64..1000, dr in 0i64..5000, dz in 0i64..1000) {
            let r = CostRates::default();
            let base = estimate_monthly(usage(sent, recv, size), &r).unwrap().total;
            prop_assert!(estimate_monthly(usage(sent + ds, recv, size), &r).unwrap().total >= base);
            prop_assert!(estimate_monthly(usage(sent, recv + dr, size), &r).unwrap().total >= base);
            prop_assert!(estimate_monthly(usage(sent, recv, size + dz), &r).unwrap().total >= base);
        }
    }
}
