//! Violations over time: grouping a probe's violating windows into
//! episodes, deciding how each episode ended, and the time series and CDFs
//! built on top of them.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};

use crate::detector::{empirical_cdf, DetectionReport};
use crate::error::{Error, Result};
use crate::geo::{haversine, DistanceKm, GeoPoint};
use crate::ingest::{window_start, LatencyObservation};
use crate::registry::{ProbeStatus, Registry};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeConfig {
    /// Violating windows at most this far apart (with nothing but silence in
    /// between) belong to the same episode.
    pub gap_tolerance_days: i64,
    /// Silence after the last violation that counts as disconnection.
    pub disconnect_after_days: i64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            gap_tolerance_days: 14,
            disconnect_after_days: 30,
        }
    }
}

impl EpisodeConfig {
    fn gap_tolerance(&self) -> Duration {
        Duration::days(self.gap_tolerance_days)
    }

    fn disconnect_after(&self) -> Duration {
        Duration::days(self.disconnect_after_days)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Resolution {
    LocationUpdate,
    Disconnected,
    MeasurementChange,
    Ongoing,
}

impl Resolution {
    pub const ALL: [Resolution; 4] = [
        Resolution::LocationUpdate,
        Resolution::Disconnected,
        Resolution::MeasurementChange,
        Resolution::Ongoing,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowState {
    pub window_start: DateTime<Utc>,
    pub violating: bool,
}

/// Per-probe sequence of windows in which the probe answered, each marked
/// violating or clean.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Timeline {
    probes: BTreeMap<u64, Vec<WindowState>>,
    horizon: Option<DateTime<Utc>>,
}

impl Timeline {
    /// Builds a timeline from `(probe_id, window_start, violating)` triples;
    /// a window violates if any triple for it does.
    pub fn from_windows(windows: impl IntoIterator<Item = (u64, DateTime<Utc>, bool)>) -> Self {
        let mut merged: BTreeMap<u64, BTreeMap<DateTime<Utc>, bool>> = BTreeMap::new();
        for (probe, t, violating) in windows {
            *merged.entry(probe).or_default().entry(t).or_insert(false) |= violating;
        }
        let horizon = merged.values().filter_map(|w| w.keys().next_back().copied()).max();
        let probes = merged
            .into_iter()
            .map(|(p, ws)| {
                let states = ws
                    .into_iter()
                    .map(|(window_start, violating)| WindowState { window_start, violating })
                    .collect();
                (p, states)
            })
            .collect();
        Timeline { probes, horizon }
    }

    /// Timeline of a detection run over many windows: every observed window
    /// is a response, violating if the report holds a record for it.
    pub fn from_scan(observations: &[LatencyObservation], report: &DetectionReport) -> Self {
        let violating: BTreeSet<(u64, DateTime<Utc>)> = report.records.iter().map(|r| (r.probe_id, r.window_start)).collect();
        Self::from_windows(
            observations
                .iter()
                .map(|o| (o.probe_id, o.window_start, violating.contains(&(o.probe_id, o.window_start)))),
        )
    }

    /// Extends the observation horizon past the last window, e.g. to the
    /// end of the collection period.
    pub fn with_horizon(mut self, horizon: DateTime<Utc>) -> Self {
        self.horizon = Some(self.horizon.map_or(horizon, |h| h.max(horizon)));
        self
    }

    pub fn horizon(&self) -> Option<DateTime<Utc>> {
        self.horizon
    }

    pub fn probes(&self) -> impl Iterator<Item = (u64, &[WindowState])> {
        self.probes.iter().map(|(p, w)| (*p, w.as_slice()))
    }

    pub fn distinct_windows(&self) -> usize {
        self.probes.values().flatten().map(|w| w.window_start).collect::<BTreeSet<_>>().len()
    }

    pub fn is_empty(&self) -> bool {
        self.probes.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolationEpisode {
    pub probe_id: u64,
    pub first_violation: DateTime<Utc>,
    pub last_violation: DateTime<Utc>,
    pub resolution: Resolution,
    pub location_before: Option<GeoPoint>,
    pub location_after: Option<GeoPoint>,
    pub update_time: Option<DateTime<Utc>>,
    pub location_change_km: Option<f64>,
    pub weeks_to_update: Option<f64>,
    pub data_quality: Option<String>,
}

/// Row of the episode output file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub probe_id: u64,
    pub first_violation: DateTime<Utc>,
    pub last_violation: DateTime<Utc>,
    pub resolution: Resolution,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub weeks_to_update: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub location_change_km: Option<f64>,
}

impl From<&ViolationEpisode> for EpisodeRow {
    fn from(e: &ViolationEpisode) -> Self {
        EpisodeRow {
            probe_id: e.probe_id,
            first_violation: e.first_violation,
            last_violation: e.last_violation,
            resolution: e.resolution,
            weeks_to_update: e.weeks_to_update,
            location_change_km: e.location_change_km,
        }
    }
}

const WEEK_SECONDS: f64 = 7.0 * 24.0 * 3600.0;

/// Splits each probe's timeline into episodes and classifies how each one
/// ended.
///
/// Consecutive violating windows merge when they are at most
/// `gap_tolerance` apart with no clean response between them. An episode
/// is resolved by a location update when the reported location changes after
/// the last violating window and no later than the first clean window that
/// follows. Otherwise it is a disconnection if the probe then stays silent
/// for `disconnect_after` (or the data ends that long after it, or the
/// registry marks the probe disconnected/abandoned and nothing follows), a
/// measurement change if the probe keeps answering cleanly, and ongoing
/// otherwise.
pub fn build_episodes(timeline: &Timeline, registry: &Registry, config: &EpisodeConfig) -> Vec<ViolationEpisode> {
    let mut out = Vec::new();
    for (probe_id, windows) in timeline.probes() {
        let mut i = 0;
        while i < windows.len() {
            if !windows[i].violating {
                i += 1;
                continue;
            }
            let first = windows[i].window_start;
            let mut last_idx = i;
            while last_idx + 1 < windows.len() {
                let next = windows[last_idx + 1];
                if next.violating && next.window_start - windows[last_idx].window_start <= config.gap_tolerance() {
                    last_idx += 1;
                } else {
                    break;
                }
            }
            let following = windows.get(last_idx + 1).copied();
            out.push(classify(probe_id, first, windows[last_idx].window_start, following, timeline.horizon(), registry, config));
            i = last_idx + 1;
        }
    }
    out
}

fn classify(
    probe_id: u64,
    first: DateTime<Utc>,
    last: DateTime<Utc>,
    following: Option<WindowState>,
    horizon: Option<DateTime<Utc>>,
    registry: &Registry,
    config: &EpisodeConfig,
) -> ViolationEpisode {
    let mut episode = ViolationEpisode {
        probe_id,
        first_violation: first,
        last_violation: last,
        resolution: Resolution::Ongoing,
        location_before: None,
        location_after: None,
        update_time: None,
        location_change_km: None,
        weeks_to_update: None,
        data_quality: None,
    };
    let probe = match registry.probe(probe_id) {
        Some(p) if !p.location_history.is_empty() => p,
        Some(_) => {
            episode.data_quality = Some("probe has no location history".into());
            return episode;
        }
        None => {
            episode.data_quality = Some("probe missing from registry".into());
            return episode;
        }
    };
    episode.location_before = probe.location_at(first).ok();

    let clean_next = following.filter(|w| !w.violating);
    if let Some(clean) = clean_next {
        let update = probe
            .location_changes()
            .filter(|e| e.effective_from > last && e.effective_from <= clean.window_start)
            .last();
        if let Some(update) = update {
            let after = update.location;
            episode.resolution = Resolution::LocationUpdate;
            episode.location_after = Some(after);
            episode.update_time = Some(update.effective_from);
            episode.weeks_to_update = Some((update.effective_from - first).num_seconds() as f64 / WEEK_SECONDS);
            episode.location_change_km = episode.location_before.map(|before| haversine(before, after).value());
            return episode;
        }
    }

    let silent_for = match following {
        Some(w) => Some(w.window_start - last),
        None => horizon.map(|h| h - last),
    };
    let registry_says_gone = following.is_none() && matches!(probe.status, ProbeStatus::Disconnected | ProbeStatus::Abandoned);
    episode.resolution = if silent_for.is_some_and(|s| s >= config.disconnect_after()) || registry_says_gone {
        Resolution::Disconnected
    } else if clean_next.is_some() {
        Resolution::MeasurementChange
    } else {
        Resolution::Ongoing
    };
    episode
}

/// Great-circle distance between the location before the episode and the
/// one that resolved it.
pub fn location_change_distance(episode: &ViolationEpisode) -> Result<DistanceKm> {
    match (episode.resolution, episode.location_before, episode.location_after) {
        (Resolution::LocationUpdate, Some(before), Some(after)) => Ok(haversine(before, after)),
        _ => Err(Error::NotALocationUpdate(episode.probe_id)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketCount {
    pub bucket_start: DateTime<Utc>,
    pub violating_probes: usize,
    pub responding_probes: usize,
    pub violating_ratio: f64,
}

/// Distinct violating and responding probes per epoch-aligned bucket, for
/// every bucket from the first to the last with data.
pub fn violators_over_time(timeline: &Timeline, bucket: Duration) -> Vec<BucketCount> {
    let mut by_bucket: BTreeMap<DateTime<Utc>, (BTreeSet<u64>, BTreeSet<u64>)> = BTreeMap::new();
    for (probe, windows) in timeline.probes() {
        for w in windows {
            let slot = by_bucket.entry(window_start(w.window_start, bucket)).or_default();
            slot.1.insert(probe);
            if w.violating {
                slot.0.insert(probe);
            }
        }
    }
    let (Some(&first), Some(&last)) = (by_bucket.keys().next(), by_bucket.keys().next_back()) else {
        return Vec::new();
    };
    let mut out = Vec::new();
    let mut t = first;
    while t <= last {
        let (violating, responding) = by_bucket.get(&t).map_or((0, 0), |(v, r)| (v.len(), r.len()));
        out.push(BucketCount {
            bucket_start: t,
            violating_probes: violating,
            responding_probes: responding,
            violating_ratio: if responding == 0 { 0.0 } else { violating as f64 / responding as f64 },
        });
        t += bucket;
    }
    out
}

/// CDF of weeks from first violation to the resolving update, over
/// location-update episodes only.
pub fn weeks_to_update_cdf(episodes: &[ViolationEpisode]) -> Vec<(f64, f64)> {
    let weeks: Vec<f64> = episodes
        .iter()
        .filter(|e| e.resolution == Resolution::LocationUpdate)
        .filter_map(|e| e.weeks_to_update)
        .collect();
    if weeks.is_empty() {
        log::warn!("no location-update episodes; weeks-to-update CDF is empty");
        return Vec::new();
    }
    empirical_cdf(weeks)
}

/// CDF of how far resolving updates moved the reported pin, km.
pub fn location_change_cdf(episodes: &[ViolationEpisode]) -> Vec<(f64, f64)> {
    let km: Vec<f64> = episodes.iter().filter_map(|e| location_change_distance(e).ok()).map(DistanceKm::value).collect();
    if km.is_empty() {
        log::warn!("no location-update episodes; location-change CDF is empty");
        return Vec::new();
    }
    empirical_cdf(km)
}

/// Episode count per resolution; every resolution is present, zero or not.
pub fn resolution_counts(episodes: &[ViolationEpisode]) -> BTreeMap<Resolution, usize> {
    let mut counts: BTreeMap<Resolution, usize> = Resolution::ALL.iter().map(|r| (*r, 0)).collect();
    for e in episodes {
        *counts.entry(e.resolution).or_default() += 1;
    }
    counts
}
