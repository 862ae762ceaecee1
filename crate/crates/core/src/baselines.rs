//! Two earlier approaches to finding misreported probes, implemented so
//! their output can be compared with the speed-of-Internet scan:
//!
//! * default-coordinate and shared-router heuristics over traceroutes;
//! * iterative anchor-mesh pruning followed by probe checks against the
//!   surviving anchors.

use std::collections::{BTreeMap, BTreeSet};
use std::io::BufRead;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::detector::CentroidTable;
use crate::error::{Error, Result};
use crate::geo::{haversine, GeoPoint};
use crate::registry::{parse_timestamp, LineError};
use crate::soi::{is_violation, Medium, SpeedModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouterMatch {
    /// Any responding hop shared between two traceroutes.
    AnyHop,
    FirstHop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub router_distance_km: f64,
    /// Radius around the country centroid that counts as "default
    /// coordinates"; `None` requires exact equality.
    pub centroid_match_km: Option<f64>,
    pub router_match: RouterMatch,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            router_distance_km: 100.0,
            centroid_match_km: Some(1.0),
            router_match: RouterMatch::AnyHop,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracerouteRecord {
    pub probe_id: u64,
    pub timestamp: DateTime<Utc>,
    pub hop_ips: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BaselineMethod {
    GharaibehDefaultCoord,
    GharaibehSharedRouter,
    DarwichPruned,
    DarwichProbe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Evidence {
    MatchedCentroid { country_code: String, distance_km: f64 },
    SharedRouter { router: String, peer_probe_id: u64, pair_distance_km: f64 },
    AnchorViolations { violations: usize, iteration: usize },
    ProbeViolations { violations: usize, anchors: Vec<u64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineFlag {
    pub probe_id: u64,
    pub method: BaselineMethod,
    pub evidence: Evidence,
}

/// A probe's reported position as seen by the heuristics.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeLocation {
    pub probe_id: u64,
    pub country_code: String,
    pub location: GeoPoint,
}

#[derive(Debug, Default, Clone, PartialEq)]
pub struct GharaibehOutcome {
    /// Sorted by (method, probe_id).
    pub flags: Vec<BaselineFlag>,
    pub skipped_traceroutes: usize,
    pub missing_centroids: usize,
}

impl GharaibehOutcome {
    pub fn flagged_probes(&self) -> BTreeSet<u64> {
        self.flags.iter().map(|f| f.probe_id).collect()
    }
}

fn usable_hop(hop: &str) -> bool {
    let hop = hop.trim();
    !hop.is_empty() && hop != "*"
}

/// Default-coordinate and shared-router flags.
pub fn gharaibeh_flags(probes: &[ProbeLocation], traceroutes: &[TracerouteRecord], centroids: &CentroidTable, config: &BaselineConfig) -> GharaibehOutcome {
    let mut outcome = GharaibehOutcome::default();
    let by_id: BTreeMap<u64, &ProbeLocation> = probes.iter().map(|p| (p.probe_id, p)).collect();

    for p in probes {
        let Some(centroid) = centroids.get(&p.country_code) else {
            outcome.missing_centroids += 1;
            continue;
        };
        let d = haversine(p.location, centroid).value();
        let matched = match config.centroid_match_km {
            Some(radius) => d <= radius,
            None => p.location == centroid,
        };
        if matched {
            outcome.flags.push(BaselineFlag {
                probe_id: p.probe_id,
                method: BaselineMethod::GharaibehDefaultCoord,
                evidence: Evidence::MatchedCentroid { country_code: p.country_code.clone(), distance_km: d },
            });
        }
    }

    let mut routers: BTreeMap<&str, BTreeSet<u64>> = BTreeMap::new();
    for tr in traceroutes {
        let hops: Vec<&str> = tr.hop_ips.iter().map(String::as_str).filter(|h| usable_hop(h)).collect();
        if hops.is_empty() {
            outcome.skipped_traceroutes += 1;
            continue;
        }
        let hops = match config.router_match {
            RouterMatch::AnyHop => hops,
            RouterMatch::FirstHop => hops[..1].to_vec(),
        };
        for hop in hops {
            routers.entry(hop.trim()).or_default().insert(tr.probe_id);
        }
    }

    // Per probe, the farthest peer found behind any shared router.
    let mut best: BTreeMap<u64, (f64, u64, &str)> = BTreeMap::new();
    for (router, members) in &routers {
        let located: Vec<&ProbeLocation> = members.iter().filter_map(|id| by_id.get(id).copied()).collect();
        if located.len() < 2 {
            continue;
        }
        for (i, a) in located.iter().enumerate() {
            for b in &located[i + 1..] {
                let d = haversine(a.location, b.location).value();
                if d <= config.router_distance_km {
                    continue;
                }
                for (me, peer) in [(a.probe_id, b.probe_id), (b.probe_id, a.probe_id)] {
                    let slot = best.entry(me).or_insert((d, peer, router));
                    if d > slot.0 {
                        *slot = (d, peer, router);
                    }
                }
            }
        }
    }
    outcome.flags.extend(best.into_iter().map(|(probe_id, (d, peer, router))| BaselineFlag {
        probe_id,
        method: BaselineMethod::GharaibehSharedRouter,
        evidence: Evidence::SharedRouter {
            router: router.to_string(),
            peer_probe_id: peer,
            pair_distance_km: d,
        },
    }));
    outcome.flags.sort_by_key(|f| (f.method, f.probe_id));
    outcome
}

/// Minimum RTTs between anchors. Measurements in either direction collapse
/// to one undirected pair holding the smaller RTT.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnchorMatrix {
    pairs: BTreeMap<(u64, u64), f64>,
}

impl AnchorMatrix {
    pub fn insert(&mut self, a: u64, b: u64, min_rtt_ms: f64) {
        if a == b {
            return;
        }
        let key = (a.min(b), a.max(b));
        let slot = self.pairs.entry(key).or_insert(min_rtt_ms);
        *slot = slot.min(min_rtt_ms);
    }

    pub fn from_triples(triples: impl IntoIterator<Item = (u64, u64, f64)>) -> Self {
        let mut m = AnchorMatrix::default();
        for (a, b, rtt) in triples {
            m.insert(a, b, rtt);
        }
        m
    }

    pub fn pairs(&self) -> impl Iterator<Item = (u64, u64, f64)> + '_ {
        self.pairs.iter().map(|(&(a, b), &r)| (a, b, r))
    }

    pub fn anchors(&self) -> BTreeSet<u64> {
        self.pairs.keys().flat_map(|&(a, b)| [a, b]).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }
}

/// Zero-radius fiber check used by both pruning stages.
pub fn pair_violates(speeds: &SpeedModel, a: GeoPoint, b: GeoPoint, rtt_ms: f64) -> bool {
    let bound = speeds.min_rtt_bound(haversine(a, b), 0.0, Medium::Fiber);
    is_violation(rtt_ms, &bound, 0.0).unwrap_or(false)
}

/// Violating pairs among `active` anchors.
pub fn violating_pairs(matrix: &AnchorMatrix, locations: &BTreeMap<u64, GeoPoint>, active: &BTreeSet<u64>, speeds: &SpeedModel) -> Vec<(u64, u64)> {
    matrix
        .pairs()
        .filter(|(a, b, _)| active.contains(a) && active.contains(b))
        .filter_map(|(a, b, rtt)| {
            let (la, lb) = (locations.get(&a)?, locations.get(&b)?);
            pair_violates(speeds, *la, *lb, rtt).then_some((a, b))
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PruneOutcome {
    pub validated: BTreeSet<u64>,
    /// In removal order.
    pub pruned: Vec<BaselineFlag>,
}

/// Repeatedly drops the anchor involved in the most violating pairs
/// (smallest id on ties) until no pair among the survivors violates.
/// Anchors without a known location take no part.
pub fn darwich_prune(matrix: &AnchorMatrix, locations: &BTreeMap<u64, GeoPoint>, speeds: &SpeedModel) -> PruneOutcome {
    let mut active: BTreeSet<u64> = matrix.anchors().into_iter().filter(|a| locations.contains_key(a)).collect();
    let mut pruned = Vec::new();
    let mut iteration = 0;
    loop {
        let violations = violating_pairs(matrix, locations, &active, speeds);
        if violations.is_empty() {
            break;
        }
        let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
        for (a, b) in violations {
            *counts.entry(a).or_default() += 1;
            *counts.entry(b).or_default() += 1;
        }
        // BTreeMap iterates ids ascending; keep the first maximum.
        let (&worst, &count) = counts
            .iter()
            .fold(None, |acc: Option<(&u64, &usize)>, cur| match acc {
                Some(best) if best.1 >= cur.1 => Some(best),
                _ => Some(cur),
            })
            .expect("non-empty");
        active.remove(&worst);
        iteration += 1;
        pruned.push(BaselineFlag {
            probe_id: worst,
            method: BaselineMethod::DarwichPruned,
            evidence: Evidence::AnchorViolations { violations: count, iteration },
        });
    }
    PruneOutcome { validated: active, pruned }
}

/// Flags probes whose RTT to any validated anchor is physically impossible
/// for their reported location.
pub fn darwich_probe_stage(
    probe_rtts: &[(u64, u64, f64)],
    validated: &BTreeSet<u64>,
    anchor_locations: &BTreeMap<u64, GeoPoint>,
    probe_locations: &BTreeMap<u64, GeoPoint>,
    speeds: &SpeedModel,
) -> Vec<BaselineFlag> {
    let mut hits: BTreeMap<u64, BTreeSet<u64>> = BTreeMap::new();
    let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
    for &(probe, anchor, rtt) in probe_rtts {
        if !validated.contains(&anchor) {
            continue;
        }
        let (Some(&pl), Some(&al)) = (probe_locations.get(&probe), anchor_locations.get(&anchor)) else {
            continue;
        };
        if pair_violates(speeds, pl, al, rtt) {
            hits.entry(probe).or_default().insert(anchor);
            *counts.entry(probe).or_default() += 1;
        }
    }
    hits.into_iter()
        .map(|(probe_id, anchors)| BaselineFlag {
            probe_id,
            method: BaselineMethod::DarwichProbe,
            evidence: Evidence::ProbeViolations {
                violations: counts[&probe_id],
                anchors: anchors.into_iter().collect(),
            },
        })
        .collect()
}

/// Pair-measurements needed for one point in time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasurementCost {
    pub primary_pairs: u64,
    pub darwich_pairs: u64,
    pub ratio: f64,
}

/// `V·P` for trusted vantage points against probes, `A² + A·P` for a full
/// anchor mesh followed by probe checks.
pub fn measurement_cost(trusted_vps: u64, probes: u64, anchors: u64) -> MeasurementCost {
    let primary_pairs = trusted_vps * probes;
    let darwich_pairs = anchors * anchors + anchors * probes;
    MeasurementCost {
        primary_pairs,
        darwich_pairs,
        ratio: if primary_pairs == 0 { f64::INFINITY } else { darwich_pairs as f64 / primary_pairs as f64 },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodComparison {
    pub method: String,
    pub flagged: usize,
    pub primary_flagged: usize,
    pub both: usize,
    pub only_primary: Vec<u64>,
    pub only_method: Vec<u64>,
    /// |both| / |union|; 1.0 when both sets are empty.
    pub overlap: f64,
    pub measurement_pairs: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub primary_pairs: Option<u64>,
    pub rows: Vec<MethodComparison>,
}

/// Compares the primary flag set with each baseline's.
pub fn compare_methods(
    primary: &BTreeSet<u64>,
    primary_pairs: Option<u64>,
    baselines: &[(String, BTreeSet<u64>, Option<u64>)],
) -> ComparisonTable {
    let rows = baselines
        .iter()
        .map(|(name, flagged, pairs)| {
            let both = primary.intersection(flagged).count();
            let union = primary.union(flagged).count();
            MethodComparison {
                method: name.clone(),
                flagged: flagged.len(),
                primary_flagged: primary.len(),
                both,
                only_primary: primary.difference(flagged).copied().collect(),
                only_method: flagged.difference(primary).copied().collect(),
                overlap: if union == 0 { 1.0 } else { both as f64 / union as f64 },
                measurement_pairs: *pairs,
            }
        })
        .collect();
    ComparisonTable { primary_pairs, rows }
}

#[derive(Debug, Deserialize)]
struct TracerouteLine {
    probe_id: u64,
    timestamp: String,
    hop_ips: Vec<Option<String>>,
}

/// Newline-delimited `{probe_id, timestamp, hop_ips[]}`. Unreadable lines are
/// reported and skipped; `null` hops become `"*"`.
pub fn load_traceroutes<R: BufRead>(source: R) -> Result<(Vec<TracerouteRecord>, Vec<LineError>)> {
    let mut out = Vec::new();
    let mut errors = Vec::new();
    for (idx, line) in source.lines().enumerate() {
        let text = line.map_err(|e| Error::io("reading traceroutes", e))?;
        let text = text.trim();
        if text.is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<TracerouteLine>(text)
            .map_err(|e| e.to_string())
            .and_then(|raw| {
                let timestamp = parse_timestamp(&raw.timestamp).ok_or_else(|| format!("bad timestamp `{}`", raw.timestamp))?;
                Ok(TracerouteRecord {
                    probe_id: raw.probe_id,
                    timestamp,
                    hop_ips: raw.hop_ips.into_iter().map(|h| h.unwrap_or_else(|| "*".into())).collect(),
                })
            });
        match parsed {
            Ok(r) => out.push(r),
            Err(reason) => errors.push(LineError { line: idx + 1, reason }),
        }
    }
    Ok((out, errors))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnchorLine {
    anchor_a: u64,
    anchor_b: u64,
    min_rtt_ms: f64,
}

/// Newline-delimited `{anchor_a, anchor_b, min_rtt_ms}`.
pub fn load_anchor_matrix<R: BufRead>(source: R) -> Result<(AnchorMatrix, Vec<LineError>)> {
    let mut matrix = AnchorMatrix::default();
    let mut errors = Vec::new();
    for (idx, line) in source.lines().enumerate() {
        let text = line.map_err(|e| Error::io("reading anchor matrix", e))?;
        let text = text.trim();
        if text.is_empty() {
            continue;
        }
        match serde_json::from_str::<AnchorLine>(text) {
            Ok(l) if l.min_rtt_ms.is_finite() && l.min_rtt_ms > 0.0 => matrix.insert(l.anchor_a, l.anchor_b, l.min_rtt_ms),
            Ok(l) => errors.push(LineError { line: idx + 1, reason: format!("non-positive rtt {}", l.min_rtt_ms) }),
            Err(e) => errors.push(LineError { line: idx + 1, reason: e.to_string() }),
        }
    }
    Ok((matrix, errors))
}
