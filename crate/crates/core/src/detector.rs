//! The scan: every latency observation is checked against the minimum RTT
//! implied by the probe's reported location, and violations are rolled up
//! per probe and per country.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Duration, Utc};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::SoiConfig;
use crate::error::{Error, Result};
use crate::geo::{haversine, GeoPoint};
use crate::ingest::LatencyObservation;
use crate::registry::Registry;
use crate::soi::{is_violation, Medium, ViolationRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectionConfig {
    /// Extra error radius covering the platform's anonymisation of probe
    /// pins, km. Zero disables it.
    pub probe_allowance_km: f64,
    pub guard_ms: f64,
    pub centroid_threshold_km: f64,
    /// Fraction of skipped observations above which a run is a data-quality
    /// failure.
    pub max_skipped_fraction: f64,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        DetectionConfig {
            probe_allowance_km: 1.0,
            guard_ms: 0.0,
            centroid_threshold_km: 200.0,
            max_skipped_fraction: 0.10,
        }
    }
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipTally {
    pub unknown_probe: usize,
    pub unknown_vp: usize,
    pub no_location: usize,
    pub invalid_rtt: usize,
}

impl SkipTally {
    pub fn total(&self) -> usize {
        self.unknown_probe + self.unknown_vp + self.no_location + self.invalid_rtt
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountryAggregate {
    pub country_code: String,
    pub violator_count: usize,
    pub probe_count: usize,
    pub violator_pct: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CountryOrder {
    ByCount,
    ByPct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub scanned_pairs: usize,
    /// Probes with at least one scanned observation.
    pub scanned_probes: BTreeSet<u64>,
    pub violating_probes: BTreeSet<u64>,
    /// Sorted by (probe_id, vp_id, window_start).
    pub records: Vec<ViolationRecord>,
    pub country_aggregates: Vec<CountryAggregate>,
    /// Latest window start among scanned observations.
    pub generated_at: Option<DateTime<Utc>>,
    pub config_fingerprint: String,
    pub skipped: SkipTally,
}

impl DetectionReport {
    pub fn skipped_fraction(&self) -> f64 {
        let total = self.scanned_pairs + self.skipped.total();
        if total == 0 {
            0.0
        } else {
            self.skipped.total() as f64 / total as f64
        }
    }
}

/// Which observation windows a detection run looks at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    All,
    /// Windows starting within one `window` of the most recent window start.
    Latest { window: Duration },
    /// Windows whose span `[start, start + window)` contains the instant.
    At { t: DateTime<Utc>, window: Duration },
}

pub fn select_observations(observations: &[LatencyObservation], selection: Selection) -> Vec<LatencyObservation> {
    match selection {
        Selection::All => observations.to_vec(),
        Selection::Latest { window } => {
            let Some(latest) = observations.iter().map(|o| o.window_start).max() else {
                return Vec::new();
            };
            observations.iter().filter(|o| o.window_start > latest - window).cloned().collect()
        }
        Selection::At { t, window } => observations
            .iter()
            .filter(|o| o.window_start <= t && t < o.window_start + window)
            .cloned()
            .collect(),
    }
}

enum PairOutcome {
    Skipped(fn(&mut SkipTally)),
    Clean { probe_id: u64 },
    Violation(ViolationRecord),
}

fn check_pair(obs: &LatencyObservation, registry: &Registry, config: &SoiConfig) -> PairOutcome {
    let Some(probe) = registry.probe(obs.probe_id) else {
        return PairOutcome::Skipped(|t| t.unknown_probe += 1);
    };
    let Some(vp) = registry.vantage_point(&obs.vp_id) else {
        return PairOutcome::Skipped(|t| t.unknown_vp += 1);
    };
    let Ok(reported) = probe.location_at(obs.window_start) else {
        return PairOutcome::Skipped(|t| t.no_location += 1);
    };
    let medium = probe.medium();
    let d_theory = haversine(vp.location, reported);
    let radius = vp.error_radius_km + config.detection.probe_allowance_km;
    let bound = config.speeds.min_rtt_bound(d_theory, radius, medium);
    match is_violation(obs.min_rtt_ms, &bound, config.detection.guard_ms) {
        Err(_) => PairOutcome::Skipped(|t| t.invalid_rtt += 1),
        Ok(false) => PairOutcome::Clean { probe_id: obs.probe_id },
        Ok(true) => match config.speeds.distance_error(obs.min_rtt_ms, bound.effective_distance_km, medium) {
            Ok(err) => PairOutcome::Violation(ViolationRecord {
                probe_id: obs.probe_id,
                vp_id: obs.vp_id.clone(),
                window_start: obs.window_start,
                measured_rtt_ms: obs.min_rtt_ms,
                bound_rtt_ms: bound.bound_ms,
                margin_ms: bound.bound_ms - obs.min_rtt_ms,
                min_distance_error_km: err.value(),
            }),
            // Rounding at the exact boundary: not a provable violation.
            Err(_) => PairOutcome::Clean { probe_id: obs.probe_id },
        },
    }
}

/// Flags every observation whose RTT is below the physical minimum for the
/// probe's reported location at the observation's window. A probe violates
/// iff any of its pairs does.
pub fn detect(observations: &[LatencyObservation], registry: &Registry, config: &SoiConfig) -> DetectionReport {
    let outcomes: Vec<PairOutcome> = observations.par_iter().map(|o| check_pair(o, registry, config)).collect();

    let mut skipped = SkipTally::default();
    let mut scanned_pairs = 0;
    let mut scanned_probes = BTreeSet::new();
    let mut records = Vec::new();
    for outcome in outcomes {
        match outcome {
            PairOutcome::Skipped(bump) => bump(&mut skipped),
            PairOutcome::Clean { probe_id } => {
                scanned_pairs += 1;
                scanned_probes.insert(probe_id);
            }
            PairOutcome::Violation(r) => {
                scanned_pairs += 1;
                scanned_probes.insert(r.probe_id);
                records.push(r);
            }
        }
    }
    records.sort_by(|a, b| (a.probe_id, &a.vp_id, a.window_start).cmp(&(b.probe_id, &b.vp_id, b.window_start)));
    let violating_probes = records.iter().map(|r| r.probe_id).collect();
    let generated_at = observations.iter().map(|o| o.window_start).max();

    let mut report = DetectionReport {
        scanned_pairs,
        scanned_probes,
        violating_probes,
        records,
        country_aggregates: Vec::new(),
        generated_at,
        config_fingerprint: config.fingerprint(),
        skipped,
    };
    report.country_aggregates = aggregate_by_country(&report, registry, CountryOrder::ByCount, 1);
    report
}

/// Per-country violator counts over the scanned population. Countries
/// without violators or with fewer than `min_probes` scanned probes are
/// omitted. Ties break on country code.
pub fn aggregate_by_country(report: &DetectionReport, registry: &Registry, order: CountryOrder, min_probes: usize) -> Vec<CountryAggregate> {
    let mut counts: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for &id in &report.scanned_probes {
        let cc = registry.probe(id).map(|p| p.country_code.clone()).unwrap_or_default();
        let slot = counts.entry(cc).or_default();
        slot.1 += 1;
        if report.violating_probes.contains(&id) {
            slot.0 += 1;
        }
    }
    let mut out: Vec<CountryAggregate> = counts
        .into_iter()
        .filter(|(_, (v, n))| *v > 0 && *n >= min_probes.max(1))
        .map(|(country_code, (violator_count, probe_count))| CountryAggregate {
            country_code,
            violator_count,
            probe_count,
            violator_pct: 100.0 * violator_count as f64 / probe_count as f64,
        })
        .collect();
    match order {
        CountryOrder::ByCount => out.sort_by(|a, b| {
            b.violator_count
                .cmp(&a.violator_count)
                .then_with(|| a.country_code.cmp(&b.country_code))
        }),
        CountryOrder::ByPct => out.sort_by(|a, b| {
            b.violator_pct
                .total_cmp(&a.violator_pct)
                .then_with(|| a.country_code.cmp(&b.country_code))
        }),
    }
    out
}

/// Empirical CDF: values ascending, paired with `i / n`.
pub fn empirical_cdf(mut values: Vec<f64>) -> Vec<(f64, f64)> {
    values.sort_by(f64::total_cmp);
    let n = values.len() as f64;
    values.into_iter().enumerate().map(|(i, v)| (v, (i + 1) as f64 / n)).collect()
}

/// Largest distance error of each violating <probe, vp> pair across windows.
pub fn pair_errors(report: &DetectionReport) -> BTreeMap<(u64, String), f64> {
    let mut out: BTreeMap<(u64, String), f64> = BTreeMap::new();
    for r in &report.records {
        let e = out.entry((r.probe_id, r.vp_id.clone())).or_insert(0.0);
        *e = e.max(r.min_distance_error_km);
    }
    out
}

/// Distance-error CDF with one point per violating <probe, vp> pair.
pub fn error_cdf(report: &DetectionReport) -> Vec<(f64, f64)> {
    if report.records.is_empty() {
        log::warn!("error CDF requested for a report without violations");
        return Vec::new();
    }
    empirical_cdf(pair_errors(report).into_values().collect())
}

/// Distance-error CDF with one point per violating probe (its largest error).
pub fn probe_error_cdf(report: &DetectionReport) -> Vec<(f64, f64)> {
    if report.records.is_empty() {
        log::warn!("error CDF requested for a report without violations");
        return Vec::new();
    }
    empirical_cdf(probe_summaries(report, &Registry::default(), None).into_iter().map(|s| s.max_distance_error_km).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub probe_id: u64,
    pub country_code: String,
    pub medium: Medium,
    pub violating_records: usize,
    pub violating_vps: Vec<String>,
    pub max_margin_ms: f64,
    pub max_distance_error_km: f64,
    /// Whether the probe sits farther than the threshold from its country
    /// centroid; `None` when no centroid is known.
    pub far_from_centroid: Option<bool>,
}

pub fn probe_summaries(report: &DetectionReport, registry: &Registry, centroids: Option<(&CentroidTable, f64)>) -> Vec<ProbeSummary> {
    let mut by_probe: BTreeMap<u64, Vec<&ViolationRecord>> = BTreeMap::new();
    for r in &report.records {
        by_probe.entry(r.probe_id).or_default().push(r);
    }
    by_probe
        .into_iter()
        .map(|(probe_id, recs)| {
            let probe = registry.probe(probe_id);
            let vps: BTreeSet<String> = recs.iter().map(|r| r.vp_id.clone()).collect();
            let far_from_centroid = match (probe, centroids) {
                (Some(p), Some((table, threshold))) => p
                    .latest_location()
                    .and_then(|loc| centroid_distance_check(loc, &p.country_code, table, threshold)),
                _ => None,
            };
            ProbeSummary {
                probe_id,
                country_code: probe.map(|p| p.country_code.clone()).unwrap_or_default(),
                medium: probe.map_or(Medium::Fiber, |p| p.medium()),
                violating_records: recs.len(),
                violating_vps: vps.into_iter().collect(),
                max_margin_ms: recs.iter().map(|r| r.margin_ms).fold(0.0, f64::max),
                max_distance_error_km: recs.iter().map(|r| r.min_distance_error_km).fold(0.0, f64::max),
                far_from_centroid,
            }
        })
        .collect()
}

/// ISO country code to geographic centre.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CentroidTable {
    entries: BTreeMap<String, GeoPoint>,
}

const BUILTIN_CENTROIDS: &str = include_str!("../data/country_centroids.csv");

impl CentroidTable {
    pub fn builtin() -> Self {
        Self::from_csv(BUILTIN_CENTROIDS, "builtin centroids").expect("bundled centroid table parses")
    }

    /// Parses `country_code,latitude,longitude[,name]` rows; `#` comments and
    /// a header row are skipped.
    pub fn from_csv(text: &str, origin: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with("country_code") {
                continue;
            }
            let err = |reason: String| Error::Parse {
                path: origin.to_string(),
                line: idx + 1,
                reason,
            };
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() < 3 {
                return Err(err("expected country_code,latitude,longitude".into()));
            }
            let lat: f64 = fields[1].trim().parse().map_err(|_| err(format!("bad latitude `{}`", fields[1])))?;
            let lon: f64 = fields[2].trim().parse().map_err(|_| err(format!("bad longitude `{}`", fields[2])))?;
            let point = GeoPoint::new(lat, lon).map_err(|e| err(e.to_string()))?;
            entries.insert(fields[0].trim().to_ascii_uppercase(), point);
        }
        Ok(CentroidTable { entries })
    }

    pub fn get(&self, country_code: &str) -> Option<GeoPoint> {
        self.entries.get(&country_code.to_ascii_uppercase()).copied()
    }

    pub fn insert(&mut self, country_code: &str, point: GeoPoint) {
        self.entries.insert(country_code.to_ascii_uppercase(), point);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Whether `reported` lies more than `threshold_km` from the country's
/// centroid. `None` when the table has no entry for the country.
pub fn centroid_distance_check(reported: GeoPoint, country_code: &str, centroids: &CentroidTable, threshold_km: f64) -> Option<bool> {
    let centroid = centroids.get(country_code)?;
    Some(haversine(reported, centroid).value() > threshold_km)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::DistanceKm;
    use crate::registry::{LocationEntry, ProbeRecord, ProbeStatus, VantagePoint};
    use chrono::TimeZone;

    fn t0() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2024, 5, 6, 0, 0, 0).unwrap()
    }

    fn probe(id: u64, cc: &str, lat: f64, lon: f64) -> ProbeRecord {
        ProbeRecord {
            probe_id: id,
            asn_v4: Some(3320),
            asn_v6: None,
            country_code: cc.into(),
            admin1: None,
            status: ProbeStatus::Connected,
            is_anchor: false,
            location_history: vec![LocationEntry {
                effective_from: t0() - Duration::days(365),
                location: GeoPoint::new(lat, lon).unwrap(),
            }],
        }
    }

    fn obs(probe: u64, vp: &str, rtt: f64) -> LatencyObservation {
        LatencyObservation {
            vp_id: vp.into(),
            probe_id: probe,
            window_start: t0(),
            min_rtt_ms: rtt,
            sample_count: 1,
        }
    }

    #[test]
    fn co_located_probe_never_violates() {
        let reg = Registry::new([probe(1, "ZA", -26.2, 28.0)], [VantagePoint::exact("jnb", GeoPoint::new(-26.2, 28.0).unwrap())]);
        let report = detect(&[obs(1, "jnb", 0.1)], &reg, &SoiConfig::default());
        assert!(report.violating_probes.is_empty());
        assert_eq!(report.scanned_pairs, 1);
    }

    #[test]
    fn unknown_references_are_tallied() {
        let reg = Registry::new([probe(1, "ZA", -26.2, 28.0)], [VantagePoint::exact("jnb", GeoPoint::new(-26.2, 28.0).unwrap())]);
        let mut early = obs(1, "jnb", 1.0);
        early.window_start = t0() - Duration::days(400);
        let report = detect(&[obs(2, "jnb", 1.0), obs(1, "nope", 1.0), early, obs(1, "jnb", 1.0)], &reg, &SoiConfig::default());
        assert_eq!(
            report.skipped,
            SkipTally { unknown_probe: 1, unknown_vp: 1, no_location: 1, invalid_rtt: 0 }
        );
        assert_eq!(report.scanned_pairs, 1);
        assert!((report.skipped_fraction() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn country_ordering_and_ties() {
        let reg = Registry::new(
            [probe(1, "SZ", 0.0, 0.0), probe(2, "LS", 0.0, 0.0), probe(3, "ZA", 0.0, 0.0), probe(4, "ZA", 0.0, 0.0), probe(5, "ZA", 0.0, 0.0)],
            [],
        );
        let report = DetectionReport {
            scanned_pairs: 5,
            scanned_probes: (1..=5).collect(),
            violating_probes: BTreeSet::from([1, 2, 3]),
            records: vec![],
            country_aggregates: vec![],
            generated_at: None,
            config_fingerprint: String::new(),
            skipped: SkipTally::default(),
        };
        let by_count = aggregate_by_country(&report, &reg, CountryOrder::ByCount, 1);
        let codes: Vec<&str> = by_count.iter().map(|c| c.country_code.as_str()).collect();
        assert_eq!(codes, ["LS", "SZ", "ZA"]);
        let by_pct = aggregate_by_country(&report, &reg, CountryOrder::ByPct, 1);
        assert_eq!(by_pct[0].country_code, "LS");
        assert_eq!(by_pct[0].violator_pct, 100.0);
        assert_eq!(by_pct[2].country_code, "ZA");
        assert!((by_pct[2].violator_pct - 100.0 / 3.0).abs() < 1e-9);
        assert_eq!(aggregate_by_country(&report, &reg, CountryOrder::ByPct, 2).len(), 1);

        let none = DetectionReport { violating_probes: BTreeSet::new(), ..report };
        assert!(aggregate_by_country(&none, &reg, CountryOrder::ByCount, 1).is_empty());
    }

    #[test]
    fn cdf_shapes() {
        assert_eq!(empirical_cdf(vec![5.0]), vec![(5.0, 1.0)]);
        let cdf = empirical_cdf(vec![300.0, 100.0, 200.0]);
        assert_eq!(cdf.iter().map(|p| p.0).collect::<Vec<_>>(), vec![100.0, 200.0, 300.0]);
        assert!((cdf[0].1 - 1.0 / 3.0).abs() < 1e-12);
        assert!((cdf[1].1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(cdf[2].1, 1.0);
    }

    #[test]
    fn error_cdf_has_one_point_per_pair() {
        let reg = Registry::new(
            [probe(1, "DE", 49.45, 11.08)],
            [VantagePoint::exact("sin", GeoPoint::new(1.35, 103.82).unwrap()), VantagePoint::exact("ams", GeoPoint::new(52.37, 4.90).unwrap())],
        );
        let mut later = obs(1, "sin", 20.0);
        later.window_start = t0() + Duration::weeks(1);
        let report = detect(&[obs(1, "sin", 23.0), later, obs(1, "ams", 0.5)], &reg, &SoiConfig::default());
        assert_eq!(report.records.len(), 3);
        assert_eq!(error_cdf(&report).len(), 2);
        assert_eq!(probe_error_cdf(&report).len(), 1);
        let empty = detect(&[], &reg, &SoiConfig::default());
        assert!(error_cdf(&empty).is_empty());
    }

    #[test]
    fn selection_windows() {
        let w = Duration::weeks(1);
        let mut a = obs(1, "x", 1.0);
        a.window_start = t0() - w;
        let b = obs(1, "x", 1.0);
        let all = vec![a.clone(), b.clone()];
        assert_eq!(select_observations(&all, Selection::Latest { window: w }), vec![b.clone()]);
        assert_eq!(select_observations(&all, Selection::At { t: t0() - Duration::days(3), window: w }), vec![a]);
        assert_eq!(select_observations(&all, Selection::All).len(), 2);
    }

    #[test]
    fn centroid_check() {
        let table = CentroidTable::builtin();
        let us = table.get("US").unwrap();
        assert_eq!(centroid_distance_check(us, "US", &table, 200.0), Some(false));
        // 201 km due north of the centroid.
        let north = us.destination(0.0, DistanceKm::new(201.0).unwrap());
        assert_eq!(centroid_distance_check(north, "US", &table, 200.0), Some(true));
        assert_eq!(centroid_distance_check(us, "QQ", &table, 200.0), None);
    }
}
