//! Probe and vantage-point catalog.
//!
//! Probe metadata arrives as newline-delimited snapshot documents, one per
//! probe per archive date. Snapshots of the same probe are folded into a
//! location history so that detection can ask where a probe claimed to be at
//! any point in time.

use std::collections::{BTreeMap, BTreeSet};
use std::io::BufRead;

use chrono::{DateTime, NaiveDate, NaiveDateTime, TimeZone, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::GeoPoint;
use crate::soi::{asn_set, classify_medium, Medium};

/// Default uncertainty around a city-centre vantage point, km.
pub const DEFAULT_CITY_RADIUS_KM: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeStatus {
    Connected,
    Disconnected,
    Abandoned,
}

impl ProbeStatus {
    fn parse(raw: &str) -> Option<Self> {
        match raw.trim().to_ascii_lowercase().as_str() {
            "connected" => Some(ProbeStatus::Connected),
            "disconnected" | "never connected" => Some(ProbeStatus::Disconnected),
            "abandoned" => Some(ProbeStatus::Abandoned),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationEntry {
    pub effective_from: DateTime<Utc>,
    pub location: GeoPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub probe_id: u64,
    pub asn_v4: Option<u32>,
    pub asn_v6: Option<u32>,
    pub country_code: String,
    pub admin1: Option<String>,
    pub status: ProbeStatus,
    pub is_anchor: bool,
    /// Strictly increasing in `effective_from`.
    pub location_history: Vec<LocationEntry>,
}

impl ProbeRecord {
    pub fn medium(&self) -> Medium {
        classify_medium(&asn_set(self.asn_v4, self.asn_v6))
    }

    /// Location in force at `t`: the last entry with `effective_from <= t`.
    pub fn location_at(&self, t: DateTime<Utc>) -> Result<GeoPoint> {
        let idx = self.location_history.partition_point(|e| e.effective_from <= t);
        if idx == 0 {
            return Err(Error::NoReportedLocation {
                probe_id: self.probe_id,
                at: t,
            });
        }
        Ok(self.location_history[idx - 1].location)
    }

    pub fn latest_location(&self) -> Option<GeoPoint> {
        self.location_history.last().map(|e| e.location)
    }

    /// Location changes strictly after the first entry.
    pub fn location_changes(&self) -> impl Iterator<Item = &LocationEntry> {
        self.location_history.iter().skip(1)
    }
}

pub fn location_at(probe: &ProbeRecord, t: DateTime<Utc>) -> Result<GeoPoint> {
    probe.location_at(t)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum VpKind {
    Exact,
    CityCenter,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VantagePoint {
    pub vp_id: String,
    pub location: GeoPoint,
    pub error_radius_km: f64,
    pub kind: VpKind,
}

impl VantagePoint {
    pub fn exact(vp_id: impl Into<String>, location: GeoPoint) -> Self {
        VantagePoint {
            vp_id: vp_id.into(),
            location,
            error_radius_km: 0.0,
            kind: VpKind::Exact,
        }
    }

    pub fn city_center(vp_id: impl Into<String>, location: GeoPoint, error_radius_km: f64) -> Result<Self> {
        let vp = VantagePoint {
            vp_id: vp_id.into(),
            location,
            error_radius_km,
            kind: VpKind::CityCenter,
        };
        vp.validate()?;
        Ok(vp)
    }

    fn validate(&self) -> Result<()> {
        let invalid = |reason: &str| Error::InvalidVantagePoint {
            vp_id: self.vp_id.clone(),
            reason: reason.to_string(),
        };
        if self.vp_id.is_empty() {
            return Err(invalid("empty id"));
        }
        if !(self.error_radius_km.is_finite() && self.error_radius_km >= 0.0) {
            return Err(invalid("error radius must be non-negative"));
        }
        if self.kind == VpKind::Exact && self.error_radius_km != 0.0 {
            return Err(invalid("EXACT vantage points carry no error radius"));
        }
        Ok(())
    }
}

/// The seven RIPE-operated central servers, placed at their city centres.
/// Identifiers follow the platform's `ctr-<site><n>` host naming.
pub fn builtin_vp_registry(city_radius_km: f64) -> Result<Vec<VantagePoint>> {
    const SERVERS: [(&str, f64, f64); 7] = [
        ("ctr-fmt01", 37.5485, -121.9886),  // Fremont, CA
        ("ctr-ewr01", 40.7357, -74.1724),   // Newark, NJ
        ("ctr-sin01", 1.3521, 103.8198),    // Singapore
        ("ctr-ams01", 52.3676, 4.9041),     // Amsterdam
        ("ctr-ams02", 52.3676, 4.9041),
        ("ctr-nue01", 49.4521, 11.0767),    // Nuremberg
        ("ctr-nue02", 49.4521, 11.0767),
    ];
    SERVERS
        .iter()
        .map(|&(id, lat, lon)| VantagePoint::city_center(id, GeoPoint::new(lat, lon)?, city_radius_km))
        .collect()
}

/// Per-line problems encountered while loading a file; loading continues.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LineError {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Default, Clone, PartialEq)]
pub struct Registry {
    probes: BTreeMap<u64, ProbeRecord>,
    vantage_points: BTreeMap<String, VantagePoint>,
}

impl Registry {
    pub fn new(probes: impl IntoIterator<Item = ProbeRecord>, vps: impl IntoIterator<Item = VantagePoint>) -> Self {
        let mut registry = Registry::default();
        for p in probes {
            registry.probes.insert(p.probe_id, p);
        }
        for vp in vps {
            registry.vantage_points.insert(vp.vp_id.clone(), vp);
        }
        registry
    }

    pub fn probe(&self, id: u64) -> Option<&ProbeRecord> {
        self.probes.get(&id)
    }

    pub fn vantage_point(&self, id: &str) -> Option<&VantagePoint> {
        self.vantage_points.get(id)
    }

    pub fn probes(&self) -> impl Iterator<Item = &ProbeRecord> {
        self.probes.values()
    }

    pub fn vantage_points(&self) -> impl Iterator<Item = &VantagePoint> {
        self.vantage_points.values()
    }

    pub fn probe_count(&self) -> usize {
        self.probes.len()
    }

    pub fn vp_count(&self) -> usize {
        self.vantage_points.len()
    }

    pub fn insert_probe(&mut self, probe: ProbeRecord) {
        self.probes.insert(probe.probe_id, probe);
    }

    /// Adds vantage points, rejecting duplicate ids.
    pub fn add_vantage_points(&mut self, vps: impl IntoIterator<Item = VantagePoint>) -> Result<()> {
        for vp in vps {
            vp.validate()?;
            if self.vantage_points.contains_key(&vp.vp_id) {
                return Err(Error::InvalidVantagePoint {
                    vp_id: vp.vp_id,
                    reason: "duplicate id".into(),
                });
            }
            self.vantage_points.insert(vp.vp_id.clone(), vp);
        }
        Ok(())
    }

    pub fn remove_vantage_point(&mut self, id: &str) -> Option<VantagePoint> {
        self.vantage_points.remove(id)
    }
}

/// One line of a probe archive.
#[derive(Debug, Deserialize)]
struct ProbeSnapshot {
    id: u64,
    snapshot_date: String,
    latitude: Option<f64>,
    longitude: Option<f64>,
    asn_v4: Option<u32>,
    asn_v6: Option<u32>,
    country_code: Option<String>,
    #[serde(default)]
    admin1: Option<String>,
    status: StatusField,
    #[serde(default)]
    is_anchor: bool,
}

/// Archive dumps carry status either as a bare name or as `{"name": ...}`.
#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum StatusField {
    Name(String),
    Object { name: String },
}

/// Accepts RFC 3339, a naive `YYYY-MM-DD[ T]HH:MM:SS` (taken as UTC), a bare
/// date, or unix seconds.
pub fn parse_timestamp(raw: &str) -> Option<DateTime<Utc>> {
    let raw = raw.trim();
    if let Ok(t) = DateTime::parse_from_rfc3339(raw) {
        return Some(t.with_timezone(&Utc));
    }
    if let Ok(t) = NaiveDateTime::parse_from_str(raw, "%Y-%m-%dT%H:%M:%S") {
        return Some(Utc.from_utc_datetime(&t));
    }
    if let Ok(d) = NaiveDate::parse_from_str(raw, "%Y-%m-%d") {
        return Some(Utc.from_utc_datetime(&d.and_hms_opt(0, 0, 0)?));
    }
    raw.parse::<i64>().ok().and_then(|secs| Utc.timestamp_opt(secs, 0).single())
}

struct ParsedSnapshot {
    line: usize,
    at: DateTime<Utc>,
    location: Option<GeoPoint>,
    doc: ProbeSnapshot,
    status: ProbeStatus,
}

fn parse_snapshot(text: &str, line: usize) -> std::result::Result<ParsedSnapshot, String> {
    let doc: ProbeSnapshot = serde_json::from_str(text).map_err(|e| e.to_string())?;
    let at = parse_timestamp(&doc.snapshot_date).ok_or_else(|| format!("bad snapshot_date `{}`", doc.snapshot_date))?;
    let status_name = match &doc.status {
        StatusField::Name(n) | StatusField::Object { name: n } => n.clone(),
    };
    let status = ProbeStatus::parse(&status_name).ok_or_else(|| format!("unknown status `{status_name}`"))?;
    let location = match (doc.latitude, doc.longitude) {
        (Some(lat), Some(lon)) => Some(GeoPoint::new(lat, lon).map_err(|e| format!("probe {}: {e}", doc.id))?),
        _ => None,
    };
    Ok(ParsedSnapshot { line, at, location, doc, status })
}

#[derive(Debug, Default)]
pub struct ProbeArchive {
    pub probes: Vec<ProbeRecord>,
    pub errors: Vec<LineError>,
}

/// Folds a newline-delimited probe archive into one record per probe.
///
/// Snapshots are ordered by date (later lines win on equal dates); a new
/// history entry starts only when the coordinates change. Metadata other
/// than location comes from the most recent snapshot. Snapshots without
/// coordinates leave the history untouched.
pub fn load_probe_archive<R: BufRead>(source: R) -> Result<ProbeArchive> {
    let mut by_probe: BTreeMap<u64, Vec<ParsedSnapshot>> = BTreeMap::new();
    let mut errors = Vec::new();
    for (idx, line) in source.lines().enumerate() {
        let line_no = idx + 1;
        let text = line.map_err(|e| Error::io(format!("reading probe archive line {line_no}"), e))?;
        let text = text.trim();
        if text.is_empty() {
            continue;
        }
        match parse_snapshot(text, line_no) {
            Ok(s) => by_probe.entry(s.doc.id).or_default().push(s),
            Err(reason) => errors.push(LineError { line: line_no, reason }),
        }
    }

    let probes = by_probe
        .into_values()
        .map(|mut snaps| {
            snaps.sort_by(|a, b| a.at.cmp(&b.at).then(a.line.cmp(&b.line)));
            let mut history: Vec<LocationEntry> = Vec::new();
            let mut dated: BTreeMap<DateTime<Utc>, GeoPoint> = BTreeMap::new();
            for s in &snaps {
                if let Some(loc) = s.location {
                    dated.insert(s.at, loc);
                }
            }
            for (at, location) in dated {
                if history.last().map(|e| e.location) != Some(location) {
                    history.push(LocationEntry { effective_from: at, location });
                }
            }
            let latest = snaps.pop().expect("at least one snapshot per probe");
            ProbeRecord {
                probe_id: latest.doc.id,
                asn_v4: latest.doc.asn_v4,
                asn_v6: latest.doc.asn_v6,
                country_code: latest.doc.country_code.unwrap_or_default().to_ascii_uppercase(),
                admin1: latest.doc.admin1,
                status: latest.status,
                is_anchor: latest.doc.is_anchor,
                location_history: history,
            }
        })
        .collect();
    Ok(ProbeArchive { probes, errors })
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct VpLine {
    vp_id: String,
    latitude: f64,
    longitude: f64,
    error_radius_km: f64,
    kind: VpKind,
}

/// Loads user-supplied vantage points; any bad line fails the load since
/// every measurement from an unvetted source would be suspect.
pub fn load_vantage_points<R: BufRead>(source: R, origin: &str) -> Result<Vec<VantagePoint>> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (idx, line) in source.lines().enumerate() {
        let line_no = idx + 1;
        let text = line.map_err(|e| Error::io(format!("reading {origin}"), e))?;
        let text = text.trim();
        if text.is_empty() || text.starts_with('#') {
            continue;
        }
        let parse_err = |reason: String| Error::Parse {
            path: origin.to_string(),
            line: line_no,
            reason,
        };
        let raw: VpLine = serde_json::from_str(text).map_err(|e| parse_err(e.to_string()))?;
        let location = GeoPoint::new(raw.latitude, raw.longitude).map_err(|e| parse_err(e.to_string()))?;
        let vp = VantagePoint {
            vp_id: raw.vp_id,
            location,
            error_radius_km: raw.error_radius_km,
            kind: raw.kind,
        };
        vp.validate().map_err(|e| parse_err(e.to_string()))?;
        if !seen.insert(vp.vp_id.clone()) {
            return Err(parse_err(format!("duplicate vp_id `{}`", vp.vp_id)));
        }
        out.push(vp);
    }
    Ok(out)
}
