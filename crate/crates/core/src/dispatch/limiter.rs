use std::sync::Mutex;
use std::time::Duration;

use crate::domain::Timestamp;
use crate::runtime::Runtime;

/// Fixed-point scale: one token is this many units. Refill adds
/// `rate_milli` units per elapsed microsecond, so `1e9 = 1e6 µs * 1000`.
const UNITS_PER_TOKEN: u128 = 1_000_000_000;

#[derive(Debug)]
struct Bucket {
    tokens: u128,
    last_refill: Timestamp,
}

/// Global token bucket shared by every sender worker.
///
/// Accounting is exact integer arithmetic: the rate is kept to 0.001
/// tokens/s and elapsed time to the microsecond. A grant that had to wait is
/// rounded up to the next microsecond, and the fraction of a token that
/// accrues during that rounding stays in the bucket, so grant times never
/// drift from `t0 + k / rate`.
#[derive(Debug)]
pub struct RateLimiter {
    rate_milli: u128,
    capacity: u128,
    bucket: Mutex<Bucket>,
}

impl RateLimiter {
    /// Starts full at `start`.
    pub fn new(rate_per_s: f64, burst: f64, start: Timestamp) -> Self {
        assert!(rate_per_s > 0.0 && burst >= 1.0, "rate must be > 0 and burst >= 1");
        let rate_milli = (rate_per_s * 1000.0).round().max(1.0) as u128;
        let capacity = (burst * UNITS_PER_TOKEN as f64).round() as u128;
        RateLimiter { rate_milli, capacity, bucket: Mutex::new(Bucket { tokens: capacity, last_refill: start }) }
    }

    pub fn rate_per_s(&self) -> f64 {
        self.rate_milli as f64 / 1000.0
    }

    pub fn burst_capacity(&self) -> f64 {
        self.capacity as f64 / UNITS_PER_TOKEN as f64
    }

    fn refill(&self, b: &mut Bucket, now: Timestamp) {
        if now > b.last_refill {
            let elapsed = (now.as_micros() - b.last_refill.as_micros()) as u128;
            b.tokens = (b.tokens + elapsed * self.rate_milli).min(self.capacity);
            b.last_refill = now;
        }
    }

    /// Tokens available at `now`, without taking any.
    pub fn available(&self, now: Timestamp) -> f64 {
        let mut b = self.bucket.lock().expect("limiter poisoned");
        self.refill(&mut b, now);
        b.tokens as f64 / UNITS_PER_TOKEN as f64
    }

    /// Takes a token, or returns how long to wait before one is available.
    pub fn try_acquire(&self, now: Timestamp) -> Result<(), Duration> {
        let mut b = self.bucket.lock().expect("limiter poisoned");
        self.refill(&mut b, now);
        if b.tokens >= UNITS_PER_TOKEN {
            b.tokens -= UNITS_PER_TOKEN;
            return Ok(());
        }
        let missing = UNITS_PER_TOKEN - b.tokens;
        let wait_us = missing.div_ceil(self.rate_milli);
        Err(Duration::from_micros(wait_us as u64))
    }

    /// Waits on the runtime clock until a token is granted; returns the
    /// grant time.
    pub async fn acquire(&self, rt: &Runtime) -> Timestamp {
        loop {
            let now = rt.now();
            match self.try_acquire(now) {
                Ok(()) => return now,
                Err(wait) => rt.sleep(wait).await,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::RefCell;
    use std::rc::Rc;

    fn secs(s: f64) -> Timestamp {
        Timestamp::from_micros((s * 1e6).round() as u64)
    }

    #[test]
    fn burst_is_granted_immediately() {
        let l = RateLimiter::new(14.0, 14.0, Timestamp::EPOCH);
        for _ in 0..14 {
            assert_eq!(l.try_acquire(Timestamp::EPOCH), Ok(()));
        }
        // 1/14 s rounded up to the microsecond
        assert_eq!(l.try_acquire(Timestamp::EPOCH), Err(Duration::from_micros(71_429)));
        assert_eq!(l.available(secs(0.5)), 7.0);
    }

    #[test]
    fn refill_is_capped() {
        let l = RateLimiter::new(14.0, 14.0, Timestamp::EPOCH);
        assert_eq!(l.available(secs(100.0)), 14.0);
    }

    /// Independent oracle: with a full bucket of B tokens at rate r, the
    /// k-th sequential grant (0-based) happens at max(0, (k - B + 1) / r),
    /// rounded up to the microsecond.
    fn oracle_grant(k: u64, burst: u64, rate: f64) -> Timestamp {
        if k < burst {
            return Timestamp::EPOCH;
        }
        Timestamp::from_micros((((k - burst + 1) as f64) * 1e6 / rate - 1e-6).ceil() as u64)
    }

    fn run_acquires(n: usize, workers: usize) -> Vec<Timestamp> {
        let rt = Runtime::virtual_at(Timestamp::EPOCH);
        let l = Rc::new(RateLimiter::new(14.0, 14.0, Timestamp::EPOCH));
        let grants = Rc::new(RefCell::new(Vec::new()));
        let per = n / workers;
        for _ in 0..workers {
            let (rt2, l, g) = (rt.clone(), l.clone(), grants.clone());
            rt.spawn(async move {
                for _ in 0..per {
                    let t = l.acquire(&rt2).await;
                    g.borrow_mut().push(t);
                }
            });
        }
        rt.run_until_idle().unwrap();
        let mut v = grants.borrow().clone();
        v.sort();
        v
    }

    #[test]
    fn sequential_acquires_match_closed_form() {
        let grants = run_acquires(1400, 1);
        for (k, t) in grants.iter().enumerate() {
            assert_eq!(*t, oracle_grant(k as u64, 14, 14.0), "grant {k}");
        }
        let last = grants.last().unwrap().as_secs_f64();
        assert!(last >= (1400.0 - 14.0) / 14.0);
        assert!((last - 99.0).abs() < 1e-3);
    }

    #[test]
    fn twenty_eight_requests_finish_within_a_second() {
        let grants = run_acquires(28, 28);
        assert_eq!(grants.iter().filter(|t| **t == Timestamp::EPOCH).count(), 14);
        assert!(*grants.last().unwrap() <= secs(1.0));
    }

    #[test]
    fn sliding_window_ceiling_with_many_workers() {
        let grants = run_acquires(2800, 10);
        assert_eq!(grants.len(), 2800);
        let us: Vec<u64> = grants.iter().map(|t| t.as_micros()).collect();
        for (i, start) in us.iter().enumerate() {
            let in_window = us[i..].iter().take_while(|t| **t < start + 1_000_000).count();
            let cap = if *start == 0 { 28 } else { 14 + if *start < 1_000_000 { 14 } else { 0 } };
            assert!(in_window <= cap, "window at {start}us has {in_window}");
        }
    }
}
