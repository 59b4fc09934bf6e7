use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use chrono::{DateTime, SecondsFormat, TimeZone, Utc};
use serde::{Deserialize, Serialize};

/// Source of RFC 3339 timestamps for audit records, snapshots and tickets.
pub trait Clock: Send + Sync {
    fn now(&self) -> String;
}

#[derive(Debug, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> String {
        Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
    }
}

/// Deterministic clock: starts at a fixed instant and advances one second per
/// reading. Replays with a logical clock produce identical audit digests.
#[derive(Debug)]
pub struct LogicalClock {
    start: DateTime<Utc>,
    ticks: AtomicU64,
}

impl Default for LogicalClock {
    fn default() -> Self {
        Self {
            start: Utc.with_ymd_and_hms(2026, 1, 1, 0, 0, 0).unwrap(),
            ticks: AtomicU64::new(0),
        }
    }
}

impl Clock for LogicalClock {
    fn now(&self) -> String {
        let tick = self.ticks.fetch_add(1, Ordering::SeqCst);
        (self.start + chrono::Duration::seconds(tick as i64))
            .to_rfc3339_opts(SecondsFormat::Millis, true)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClockKind {
    #[default]
    Wall,
    Logical,
}

impl ClockKind {
    pub fn build(self) -> Arc<dyn Clock> {
        match self {
            ClockKind::Wall => Arc::new(SystemClock),
            ClockKind::Logical => Arc::new(LogicalClock::default()),
        }
    }
}
