use std::collections::BTreeMap;
use std::sync::Mutex;

use serde::Serialize;
use thiserror::Error;

use crate::domain::Timestamp;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum QuotaError {
    #[error("daily quota exhausted")]
    QuotaExhausted,
    #[error("{requested} recipients exceed the {remaining} sends left today")]
    QuotaExceeded { requested: u64, remaining: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct QuotaSnapshot {
    pub day_window_start: Timestamp,
    pub sent_today: u64,
    pub reserved: u64,
    pub daily_quota: u64,
}

#[derive(Debug)]
struct Inner {
    day_window_start: Timestamp,
    sent_today: u64,
    /// Sends promised to admitted campaigns but not yet made.
    reservations: BTreeMap<String, u64>,
}

impl Inner {
    fn roll(&mut self, now: Timestamp) {
        let midnight = now.utc_midnight();
        if midnight > self.day_window_start {
            self.day_window_start = midnight;
            self.sent_today = 0;
        }
    }

    fn reserved(&self) -> u64 {
        self.reservations.values().sum()
    }
}

/// Account-wide daily send cap with a UTC-midnight boundary.
///
/// Admission reserves a campaign's whole recipient count; each send
/// consumes quota and draws down the sending campaign's reservation.
#[derive(Debug)]
pub struct Quota {
    daily_quota: u64,
    inner: Mutex<Inner>,
}

impl Quota {
    pub fn new(daily_quota: u64, now: Timestamp) -> Self {
        Quota {
            daily_quota,
            inner: Mutex::new(Inner {
                day_window_start: now.utc_midnight(),
                sent_today: 0,
                reservations: BTreeMap::new(),
            }),
        }
    }

    fn lock(&self, now: Timestamp) -> std::sync::MutexGuard<'_, Inner> {
        let mut g = self.inner.lock().expect("quota poisoned");
        g.roll(now);
        g
    }

    pub fn consume(&self, n: u64, now: Timestamp) -> Result<(), QuotaError> {
        let mut g = self.lock(now);
        if g.sent_today + n > self.daily_quota {
            return Err(QuotaError::QuotaExhausted);
        }
        g.sent_today += n;
        Ok(())
    }

    /// One send for `campaign_id`.
    pub fn consume_for(&self, campaign_id: &str, now: Timestamp) -> Result<(), QuotaError> {
        let mut g = self.lock(now);
        if g.sent_today + 1 > self.daily_quota {
            return Err(QuotaError::QuotaExhausted);
        }
        g.sent_today += 1;
        if let Some(r) = g.reservations.get_mut(campaign_id) {
            *r = r.saturating_sub(1);
        }
        Ok(())
    }

    /// All-or-nothing admission of `n` sends.
    pub fn admit(&self, campaign_id: &str, n: u64, now: Timestamp) -> Result<(), QuotaError> {
        let mut g = self.lock(now);
        let committed = g.sent_today + g.reserved();
        let remaining = self.daily_quota.saturating_sub(committed);
        if n > remaining {
            return Err(QuotaError::QuotaExceeded { requested: n, remaining });
        }
        *g.reservations.entry(campaign_id.to_owned()).or_default() += n;
        Ok(())
    }

    /// Drops whatever is left of a campaign's reservation.
    pub fn release(&self, campaign_id: &str) {
        self.inner.lock().expect("quota poisoned").reservations.remove(campaign_id);
    }

    pub fn remaining(&self, now: Timestamp) -> u64 {
        let g = self.lock(now);
        self.daily_quota.saturating_sub(g.sent_today + g.reserved())
    }

    pub fn snapshot(&self, now: Timestamp) -> QuotaSnapshot {
        let g = self.lock(now);
        QuotaSnapshot {
            day_window_start: g.day_window_start,
            sent_today: g.sent_today,
            reserved: g.reserved(),
            daily_quota: self.daily_quota,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DAY: u64 = 86_400;

    #[test]
    fn boundary_and_exhaustion() {
        let t = Timestamp::from_secs(10 * DAY + 5);
        let q = Quota::new(50_000, t);
        q.consume(49_999, t).unwrap();
        q.consume(1, t).unwrap();
        assert_eq!(q.snapshot(t).sent_today, 50_000);
        assert_eq!(q.consume(1, t), Err(QuotaError::QuotaExhausted));
    }

    #[test]
    fn resets_at_utc_midnight() {
        let t = Timestamp::from_secs(11 * DAY - 1);
        let q = Quota::new(10, t);
        q.consume(10, t).unwrap();
        assert!(q.consume(1, t).is_err());
        let after = Timestamp::from_secs(11 * DAY);
        assert_eq!(q.snapshot(after).sent_today, 0);
        assert_eq!(q.snapshot(after).day_window_start, after);
        q.consume(1, after).unwrap();
    }

    #[test]
    fn admission_counts_reservations() {
        let t = Timestamp::from_secs(DAY);
        let q = Quota::new(100, t);
        q.admit("a", 60, t).unwrap();
        assert_eq!(q.admit("b", 41, t), Err(QuotaError::QuotaExceeded { requested: 41, remaining: 40 }));
        q.admit("b", 40, t).unwrap();
        for _ in 0..60 {
            q.consume_for("a", t).unwrap();
        }
        assert_eq!(q.snapshot(t).reserved, 40);
        assert_eq!(q.remaining(t), 0);
        q.release("b");
        assert_eq!(q.remaining(t), 40);
    }
}
