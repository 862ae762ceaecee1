//! Latency acquisition and per-window minimum-RTT aggregation.

pub mod atlas;
pub mod campaign;
pub mod store;

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Duration, TimeZone, Utc};
use serde::{Deserialize, Serialize};

pub use campaign::{load_ping_campaign, CampaignLoad};

/// Campaign cadence: one ping round every twelve hours.
pub fn campaign_window() -> Duration {
    Duration::hours(12)
}

/// Historical pulls: one sample day per week.
pub fn historical_window() -> Duration {
    Duration::weeks(1)
}

/// One ping result. `rtt_ms` is `None` for a failed or timed-out ping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub vp_id: String,
    pub probe_id: u64,
    pub timestamp: DateTime<Utc>,
    pub rtt_ms: Option<f64>,
}

/// Minimum RTT of one <vantage point, probe> pair within one window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyObservation {
    pub vp_id: String,
    pub probe_id: u64,
    pub window_start: DateTime<Utc>,
    pub min_rtt_ms: f64,
    pub sample_count: u32,
}

impl LatencyObservation {
    pub fn key(&self) -> (u64, &str, DateTime<Utc>) {
        (self.probe_id, self.vp_id.as_str(), self.window_start)
    }
}

/// Floor of `t` onto an epoch-aligned grid of `window`-sized buckets.
pub fn window_start(t: DateTime<Utc>, window: Duration) -> DateTime<Utc> {
    let width = window.num_seconds().max(1);
    let secs = t.timestamp().div_euclid(width) * width;
    Utc.timestamp_opt(secs, 0).single().expect("in-range timestamp")
}

#[derive(Debug, Default, Clone, PartialEq)]
pub struct Aggregation {
    /// Sorted by (probe_id, vp_id, window_start).
    pub observations: Vec<LatencyObservation>,
    /// Samples with a non-positive or non-finite RTT.
    pub rejected: usize,
    /// Failed pings.
    pub timeouts: usize,
    /// Probes that appeared only with failed pings.
    pub unresponsive_probes: BTreeSet<u64>,
}

/// Reduces a sample stream to one minimum-RTT observation per
/// (vantage point, probe, window). The result is independent of input order.
pub fn aggregate_min_rtt<I>(samples: I, window: Duration) -> Aggregation
where
    I: IntoIterator<Item = Sample>,
{
    let mut acc: BTreeMap<(u64, String, DateTime<Utc>), (f64, u32)> = BTreeMap::new();
    let mut seen = BTreeSet::new();
    let mut responsive = BTreeSet::new();
    let mut rejected = 0;
    let mut timeouts = 0;
    for s in samples {
        seen.insert(s.probe_id);
        let Some(rtt) = s.rtt_ms else {
            timeouts += 1;
            continue;
        };
        if !(rtt.is_finite() && rtt > 0.0) {
            rejected += 1;
            continue;
        }
        responsive.insert(s.probe_id);
        let key = (s.probe_id, s.vp_id, window_start(s.timestamp, window));
        let slot = acc.entry(key).or_insert((f64::INFINITY, 0));
        slot.0 = slot.0.min(rtt);
        slot.1 += 1;
    }
    let observations = acc
        .into_iter()
        .map(|((probe_id, vp_id, window_start), (min_rtt_ms, sample_count))| LatencyObservation {
            vp_id,
            probe_id,
            window_start,
            min_rtt_ms,
            sample_count,
        })
        .collect();
    Aggregation {
        observations,
        rejected,
        timeouts,
        unresponsive_probes: seen.difference(&responsive).copied().collect(),
    }
}
