use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

/// Latency samples kept for percentile reporting.
const MAX_SAMPLES: usize = 10_000;

#[derive(Debug)]
pub struct Meter {
    started: Instant,
    pairs: u64,
    flags: u64,
    latencies_ms: Vec<f64>,
    next_slot: usize,
}

impl Meter {
    pub fn new() -> Self {
        Self::starting_at(Instant::now())
    }

    pub fn starting_at(started: Instant) -> Self {
        Self {
            started,
            pairs: 0,
            flags: 0,
            latencies_ms: Vec::new(),
            next_slot: 0,
        }
    }

    pub fn started(&self) -> Instant {
        self.started
    }

    pub fn record(&mut self, latency: Duration, flagged: bool) {
        self.pairs += 1;
        self.flags += flagged as u64;
        let ms = latency.as_secs_f64() * 1e3;
        if self.latencies_ms.len() < MAX_SAMPLES {
            self.latencies_ms.push(ms);
        } else {
            self.latencies_ms[self.next_slot] = ms;
            self.next_slot = (self.next_slot + 1) % MAX_SAMPLES;
        }
    }

    pub fn snapshot(&self, sessions: usize) -> ServiceMetrics {
        self.snapshot_at(Instant::now(), sessions)
    }

    pub fn snapshot_at(&self, now: Instant, sessions: usize) -> ServiceMetrics {
        let elapsed = now.saturating_duration_since(self.started).as_secs_f64();
        let pairs_per_hour = if elapsed > 0.0 {
            self.pairs as f64 / (elapsed / 3600.0)
        } else {
            0.0
        };
        ServiceMetrics {
            pairs: self.pairs,
            elapsed_secs: elapsed,
            pairs_per_hour,
            latency: LatencySummary::of(&self.latencies_ms),
            repetition_flags: self.flags,
            sessions,
        }
    }
}

impl Default for Meter {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceMetrics {
    /// Completed question/answer pairs.
    pub pairs: u64,
    pub elapsed_secs: f64,
    pub pairs_per_hour: f64,
    pub latency: LatencySummary,
    pub repetition_flags: u64,
    pub sessions: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub samples: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub max_ms: f64,
}

impl LatencySummary {
    pub fn of(samples: &[f64]) -> Self {
        if samples.is_empty() {
            return Self::default();
        }
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let pick = |q: f64| sorted[((sorted.len() - 1) as f64 * q).round() as usize];
        Self {
            samples: sorted.len(),
            mean_ms: sorted.iter().sum::<f64>() / sorted.len() as f64,
            p50_ms: pick(0.5),
            p95_ms: pick(0.95),
            max_ms: *sorted.last().unwrap(),
        }
    }
}
