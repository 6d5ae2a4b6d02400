use std::fmt;
use std::ops::{Add, AddAssign};
use std::time::Duration;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

const MICROS_PER_SEC: u64 = 1_000_000;
const SECS_PER_DAY: u64 = 86_400;

/// A UTC instant with microsecond resolution, counted from the Unix epoch.
///
/// Both clock modes produce these: the virtual clock starts at a configured
/// instant and only moves when advanced, the real-time clock samples the
/// system clock.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Timestamp(u64);

impl Timestamp {
    pub const EPOCH: Timestamp = Timestamp(0);

    pub const fn from_micros(us: u64) -> Self {
        Timestamp(us)
    }

    pub const fn from_secs(secs: u64) -> Self {
        Timestamp(secs * MICROS_PER_SEC)
    }

    pub const fn as_micros(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / MICROS_PER_SEC as f64
    }

    /// Wall-clock now.
    pub fn now_utc() -> Self {
        let us = Utc::now().timestamp_micros();
        Timestamp(us.max(0) as u64)
    }

    pub fn parse_rfc3339(s: &str) -> Result<Self, chrono::ParseError> {
        let dt = DateTime::parse_from_rfc3339(s)?;
        Ok(Timestamp(dt.with_timezone(&Utc).timestamp_micros().max(0) as u64))
    }

    pub fn to_rfc3339(self) -> String {
        DateTime::<Utc>::from_timestamp_micros(self.0 as i64)
            .expect("timestamp in chrono range")
            .to_rfc3339_opts(SecondsFormat::Micros, true)
    }

    /// Time elapsed since `earlier`, zero if `earlier` is in the future.
    pub fn saturating_since(self, earlier: Timestamp) -> Duration {
        Duration::from_micros(self.0.saturating_sub(earlier.0))
    }

    /// Index of the UTC calendar day containing this instant.
    pub fn utc_day(self) -> u64 {
        self.0 / (SECS_PER_DAY * MICROS_PER_SEC)
    }

    /// Midnight (00:00:00 UTC) that starts this instant's day.
    pub fn utc_midnight(self) -> Timestamp {
        Timestamp(self.utc_day() * SECS_PER_DAY * MICROS_PER_SEC)
    }

    pub fn next_utc_midnight(self) -> Timestamp {
        Timestamp((self.utc_day() + 1) * SECS_PER_DAY * MICROS_PER_SEC)
    }
}

/// Converts a duration to whole microseconds, rounding up.
pub fn duration_micros_ceil(d: Duration) -> u64 {
    let nanos = d.as_nanos();
    nanos.div_ceil(1_000) as u64
}

impl Add<Duration> for Timestamp {
    type Output = Timestamp;
    fn add(self, rhs: Duration) -> Timestamp {
        Timestamp(self.0 + duration_micros_ceil(rhs))
    }
}

impl AddAssign<Duration> for Timestamp {
    fn add_assign(&mut self, rhs: Duration) {
        *self = *self + rhs;
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_rfc3339())
    }
}

impl Serialize for Timestamp {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_rfc3339())
    }
}

impl<'de> Deserialize<'de> for Timestamp {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Timestamp::parse_rfc3339(&s).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rfc3339_round_trip() {
        let t = Timestamp::parse_rfc3339("2025-03-01T12:34:56.789012Z").unwrap();
        assert_eq!(t.to_rfc3339(), "2025-03-01T12:34:56.789012Z");
        assert_eq!(Timestamp::parse_rfc3339(&t.to_rfc3339()).unwrap(), t);
    }

    #[test]
    fn midnight_boundaries() {
        let t = Timestamp::parse_rfc3339("2025-03-01T23:59:59.999999Z").unwrap();
        assert_eq!(t.utc_midnight().to_rfc3339(), "2025-03-01T00:00:00.000000Z");
        assert_eq!(t.next_utc_midnight().to_rfc3339(), "2025-03-02T00:00:00.000000Z");
        let next = t + Duration::from_micros(1);
        assert_eq!(next.utc_day(), t.utc_day() + 1);
    }

    #[test]
    fn adding_sub_microsecond_durations_rounds_up() {
        let t = Timestamp::from_micros(10);
        assert_eq!((t + Duration::from_nanos(1)).as_micros(), 11);
        assert_eq!((t + Duration::from_nanos(1000)).as_micros(), 11);
        assert_eq!((t + Duration::ZERO).as_micros(), 10);
    }
}
