use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Exponential backoff with optional full jitter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    /// Total attempts including the first.
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
    /// Upper bound on a server-provided `Retry-After`.
    pub max_retry_after_ms: u64,
    pub jitter: bool,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay_ms: 500,
            max_delay_ms: 20_000,
            max_retry_after_ms: 60_000,
            jitter: true,
        }
    }
}

impl RetryPolicy {
    /// Delay before attempt `failed + 1`, given `failed` failures so far.
    /// A `Retry-After` hint overrides the computed backoff.
    pub fn delay(&self, failed: u32, retry_after: Option<Duration>) -> Duration {
        if let Some(hint) = retry_after {
            return hint.min(Duration::from_millis(self.max_retry_after_ms));
        }
        let exp = failed.saturating_sub(1).min(20);
        let ceiling = self.base_delay_ms.saturating_mul(1 << exp).min(self.max_delay_ms);
        let ms = if self.jitter && ceiling > 0 {
            rand::thread_rng().gen_range(ceiling / 2..=ceiling)
        } else {
            ceiling
        };
        Duration::from_millis(ms)
    }
}

/// Parses a `Retry-After` header given in (possibly fractional) seconds.
/// HTTP-date values are ignored.
pub(crate) fn parse_retry_after(value: &str) -> Option<Duration> {
    value
        .trim()
        .parse::<f64>()
        .ok()
        .filter(|s| s.is_finite() && *s >= 0.0)
        .map(Duration::from_secs_f64)
}
