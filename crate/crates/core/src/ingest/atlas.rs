//! Client for built-in ping measurement results on the Atlas REST API.
//!
//! Requests go through the [`Transport`] trait so the same fetch logic runs
//! against the live API, recorded fixtures, or instrumented fakes.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration as StdDuration;

use chrono::{DateTime, Duration, NaiveDate, NaiveTime, TimeZone, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use super::Sample;

pub const DEFAULT_API_BASE: &str = "https://atlas.ripe.net/api/v2";

/// Environment variable holding an optional API key.
pub const API_KEY_ENV: &str = "SOI_ATLAS_KEY";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: String,
}

/// Connection-level failure; always considered transient.
#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("{0}")]
pub struct TransportError(pub String);

pub trait Transport: Send + Sync {
    fn get(&self, url: &str, query: &[(String, String)], api_key: Option<&str>) -> Result<HttpResponse, TransportError>;
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum FetchError {
    #[error("GET {url} returned HTTP {status}: {body}")]
    Client { url: String, status: u16, body: String },
    #[error("GET {url} returned HTTP {status} after {attempts} attempts")]
    Server { url: String, status: u16, attempts: u32 },
    #[error("GET {url} failed after {attempts} attempts: {message}")]
    Transport { url: String, attempts: u32, message: String },
    #[error("no built-in measurement configured for vantage point `{0}`")]
    UnmappedVantagePoint(String),
    #[error("pagination loop detected at {0}")]
    PaginationLoop(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cadence {
    Daily,
    Weekly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 5,
            base_delay_ms: 500,
            max_delay_ms: 8_000,
        }
    }
}

impl RetryPolicy {
    fn delay(&self, attempt: u32) -> StdDuration {
        let exp = self.base_delay_ms.saturating_mul(1u64 << attempt.min(20));
        StdDuration::from_millis(exp.min(self.max_delay_ms))
    }
}

/// Maps each central server to the built-in ping measurements that target it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MeasurementMap {
    pub targets: BTreeMap<String, Vec<u64>>,
}

impl MeasurementMap {
    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FetchPlan {
    pub api_base: String,
    pub api_key: Option<String>,
    pub vp_ids: Vec<String>,
    pub probe_ids: BTreeSet<u64>,
    /// Inclusive date range.
    pub from: NaiveDate,
    pub to: NaiveDate,
    pub cadence: Cadence,
    pub sample_times: Vec<NaiveTime>,
    /// Width of the result window requested around each sample time.
    pub slot: Duration,
    pub probes_per_request: usize,
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
}

impl FetchPlan {
    pub fn new(vp_ids: Vec<String>, probe_ids: BTreeSet<u64>, from: NaiveDate, to: NaiveDate) -> Self {
        FetchPlan {
            api_base: DEFAULT_API_BASE.to_string(),
            api_key: None,
            vp_ids,
            probe_ids,
            from,
            to,
            cadence: Cadence::Weekly,
            sample_times: default_sample_times(),
            slot: Duration::seconds(240),
            probes_per_request: 500,
            max_in_flight: 4,
            retry: RetryPolicy::default(),
        }
    }

    /// Start of every sampling slot in the plan.
    pub fn slot_starts(&self) -> Vec<DateTime<Utc>> {
        let step = match self.cadence {
            Cadence::Daily => 1,
            Cadence::Weekly => 7,
        };
        let mut out = Vec::new();
        let mut day = self.from;
        while day <= self.to {
            for t in &self.sample_times {
                out.push(Utc.from_utc_datetime(&day.and_time(*t)));
            }
            day += Duration::days(step);
        }
        out
    }
}

/// 06:00, 12:00 and 18:00 UTC.
pub fn default_sample_times() -> Vec<NaiveTime> {
    [6, 12, 18].iter().map(|&h| NaiveTime::from_hms_opt(h, 0, 0).unwrap()).collect()
}

#[derive(Debug, Default)]
pub struct FetchOutcome {
    /// Sorted by (probe, vantage point, timestamp).
    pub samples: Vec<Sample>,
    pub requests: usize,
    pub malformed: usize,
    /// The first fatal error, if any. Samples gathered before it are kept.
    pub failure: Option<FetchError>,
}

struct Job {
    vp_id: String,
    msm_id: u64,
    slot_start: DateTime<Utc>,
    probes: Vec<u64>,
}

#[derive(Default)]
struct JobResult {
    samples: Vec<Sample>,
    requests: usize,
    malformed: usize,
}

/// Pulls one sample per (probe, server, slot): the lowest successful RTT in
/// the slot, or a timeout sample when every ping in the slot failed.
pub fn fetch_builtin_measurements(transport: &dyn Transport, plan: &FetchPlan, map: &MeasurementMap) -> FetchOutcome {
    if plan.probe_ids.is_empty() || plan.vp_ids.is_empty() {
        return FetchOutcome::default();
    }
    let mut jobs = Vec::new();
    let probes: Vec<u64> = plan.probe_ids.iter().copied().collect();
    let slots = plan.slot_starts();
    for vp in &plan.vp_ids {
        let msm_ids = match map.targets.get(vp) {
            Some(ids) if !ids.is_empty() => ids,
            _ => {
                return FetchOutcome {
                    failure: Some(FetchError::UnmappedVantagePoint(vp.clone())),
                    ..Default::default()
                }
            }
        };
        for &msm_id in msm_ids {
            for &slot_start in &slots {
                for chunk in probes.chunks(plan.probes_per_request.max(1)) {
                    jobs.push(Job {
                        vp_id: vp.clone(),
                        msm_id,
                        slot_start,
                        probes: chunk.to_vec(),
                    });
                }
            }
        }
    }

    let next = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let results: Mutex<Vec<Option<JobResult>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    let failure: Mutex<Option<(usize, FetchError)>> = Mutex::new(None);
    let workers = plan.max_in_flight.max(1).min(jobs.len());

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                if abort.load(Ordering::SeqCst) {
                    break;
                }
                let idx = next.fetch_add(1, Ordering::SeqCst);
                let Some(job) = jobs.get(idx) else { break };
                match run_job(transport, plan, job) {
                    Ok(r) => results.lock().unwrap()[idx] = Some(r),
                    Err(e) => {
                        abort.store(true, Ordering::SeqCst);
                        let mut slot = failure.lock().unwrap();
                        if slot.as_ref().map_or(true, |(i, _)| idx < *i) {
                            *slot = Some((idx, e));
                        }
                    }
                }
            });
        }
    });

    let mut outcome = FetchOutcome {
        failure: failure.into_inner().unwrap().map(|(_, e)| e),
        ..Default::default()
    };
    for r in results.into_inner().unwrap().into_iter().flatten() {
        outcome.requests += r.requests;
        outcome.malformed += r.malformed;
        outcome.samples.extend(r.samples);
    }
    outcome
        .samples
        .sort_by(|a, b| (a.probe_id, &a.vp_id, a.timestamp).cmp(&(b.probe_id, &b.vp_id, b.timestamp)));
    outcome
}

fn run_job(transport: &dyn Transport, plan: &FetchPlan, job: &Job) -> Result<JobResult, FetchError> {
    let start = job.slot_start.timestamp();
    let stop = start + plan.slot.num_seconds();
    let wanted: BTreeSet<u64> = job.probes.iter().copied().collect();
    let mut url = format!("{}/measurements/{}/results/", plan.api_base.trim_end_matches('/'), job.msm_id);
    let mut query = vec![
        ("start".to_string(), start.to_string()),
        ("stop".to_string(), (stop - 1).to_string()),
        ("probe_ids".to_string(), job.probes.iter().map(u64::to_string).collect::<Vec<_>>().join(",")),
        ("format".to_string(), "json".to_string()),
    ];
    let mut result = JobResult::default();
    // Per probe: (best rtt, saw any result).
    let mut best: BTreeMap<u64, Option<f64>> = BTreeMap::new();
    let mut visited = BTreeSet::new();
    loop {
        if !visited.insert((url.clone(), query.clone())) {
            return Err(FetchError::PaginationLoop(url));
        }
        let response = get_with_retry(transport, plan, &url, &query)?;
        result.requests += 1;
        let page = parse_page(&response.body);
        result.malformed += page.malformed;
        for r in page.results {
            if r.timestamp < start || r.timestamp >= stop || !wanted.contains(&r.probe_id) {
                continue;
            }
            let slot = best.entry(r.probe_id).or_insert(None);
            if let Some(rtt) = r.min_rtt {
                *slot = Some(slot.map_or(rtt, |b: f64| b.min(rtt)));
            }
        }
        match page.next {
            Some(next) => {
                url = next;
                query.clear();
            }
            None => break,
        }
    }
    result.samples = best
        .into_iter()
        .map(|(probe_id, rtt_ms)| Sample {
            vp_id: job.vp_id.clone(),
            probe_id,
            timestamp: job.slot_start,
            rtt_ms,
        })
        .collect();
    Ok(result)
}

fn get_with_retry(
    transport: &dyn Transport,
    plan: &FetchPlan,
    url: &str,
    query: &[(String, String)],
) -> Result<HttpResponse, FetchError> {
    let attempts = plan.retry.max_attempts.max(1);
    let mut last = None;
    for attempt in 0..attempts {
        if attempt > 0 {
            std::thread::sleep(plan.retry.delay(attempt - 1));
        }
        match transport.get(url, query, plan.api_key.as_deref()) {
            Ok(r) if (200..300).contains(&r.status) => return Ok(r),
            Ok(r) if (400..500).contains(&r.status) && r.status != 429 => {
                let body: String = r.body.chars().take(200).collect();
                return Err(FetchError::Client {
                    url: url.to_string(),
                    status: r.status,
                    body,
                });
            }
            Ok(r) => {
                log::warn!("GET {url}: HTTP {} (attempt {})", r.status, attempt + 1);
                last = Some(FetchError::Server {
                    url: url.to_string(),
                    status: r.status,
                    attempts,
                });
            }
            Err(e) => {
                log::warn!("GET {url}: {e} (attempt {})", attempt + 1);
                last = Some(FetchError::Transport {
                    url: url.to_string(),
                    attempts,
                    message: e.0,
                });
            }
        }
    }
    Err(last.expect("at least one attempt"))
}

/// A ping result reduced to what detection needs.
#[derive(Debug, Clone, PartialEq)]
pub struct PingResult {
    pub probe_id: u64,
    pub timestamp: i64,
    pub min_rtt: Option<f64>,
}

#[derive(Debug, Default)]
pub struct Page {
    pub results: Vec<PingResult>,
    pub malformed: usize,
    pub next: Option<String>,
}

/// Accepts both a bare result array and a paginated `{"results", "next"}`
/// envelope. Unparseable documents count as malformed.
pub fn parse_page(body: &str) -> Page {
    let mut page = Page::default();
    let value: Value = match serde_json::from_str(body) {
        Ok(v) => v,
        Err(_) => {
            page.malformed += 1;
            return page;
        }
    };
    let items = match value {
        Value::Array(items) => items,
        Value::Object(mut obj) => {
            page.next = obj.get("next").and_then(Value::as_str).map(str::to_string);
            match obj.remove("results") {
                Some(Value::Array(items)) => items,
                _ => {
                    page.malformed += 1;
                    return page;
                }
            }
        }
        _ => {
            page.malformed += 1;
            return page;
        }
    };
    for item in &items {
        match parse_result(item) {
            Some(r) => page.results.push(r),
            None => page.malformed += 1,
        }
    }
    page
}

fn parse_result(item: &Value) -> Option<PingResult> {
    let probe_id = item.get("prb_id")?.as_u64()?;
    let timestamp = item.get("timestamp")?.as_i64()?;
    let from_min = item.get("min").and_then(Value::as_f64).filter(|v| *v > 0.0);
    let from_replies = item.get("result").and_then(Value::as_array).and_then(|replies| {
        replies
            .iter()
            .filter_map(|r| r.get("rtt").and_then(Value::as_f64))
            .filter(|v| *v > 0.0)
            .min_by(f64::total_cmp)
    });
    if item.get("min").is_none() && item.get("result").is_none() {
        return None;
    }
    Some(PingResult {
        probe_id,
        timestamp,
        min_rtt: from_min.or(from_replies),
    })
}

/// Replays recorded results from `<dir>/<msm_id>.json`, applying the same
/// `start`/`stop`/`probe_ids` filtering the API would.
#[derive(Debug)]
pub struct FixtureTransport {
    dir: PathBuf,
    requests: AtomicUsize,
}

impl FixtureTransport {
    pub fn new(dir: impl AsRef<Path>) -> Self {
        FixtureTransport {
            dir: dir.as_ref().to_path_buf(),
            requests: AtomicUsize::new(0),
        }
    }

    pub fn requests(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }
}

impl Transport for FixtureTransport {
    fn get(&self, url: &str, query: &[(String, String)], _api_key: Option<&str>) -> Result<HttpResponse, TransportError> {
        self.requests.fetch_add(1, Ordering::SeqCst);
        let Some(msm) = url
            .trim_end_matches('/')
            .strip_suffix("/results")
            .and_then(|u| u.rsplit('/').next())
            .and_then(|id| id.parse::<u64>().ok())
        else {
            return Ok(HttpResponse { status: 404, body: format!("no fixture route for {url}") });
        };
        let path = self.dir.join(format!("{msm}.json"));
        let Ok(text) = fs::read_to_string(&path) else {
            return Ok(HttpResponse { status: 404, body: format!("missing fixture {}", path.display()) });
        };
        let param = |k: &str| query.iter().find(|(q, _)| q == k).map(|(_, v)| v.as_str());
        let start = param("start").and_then(|v| v.parse::<i64>().ok()).unwrap_or(i64::MIN);
        let stop = param("stop").and_then(|v| v.parse::<i64>().ok()).unwrap_or(i64::MAX);
        let probes: Option<BTreeSet<u64>> = param("probe_ids").map(|v| v.split(',').filter_map(|p| p.parse().ok()).collect());
        let Ok(Value::Array(items)) = serde_json::from_str::<Value>(&text) else {
            return Ok(HttpResponse { status: 200, body: text });
        };
        let kept: Vec<&Value> = items
            .iter()
            .filter(|item| {
                let ts = item.get("timestamp").and_then(Value::as_i64);
                let prb = item.get("prb_id").and_then(Value::as_u64);
                match (ts, prb) {
                    (Some(ts), Some(prb)) => {
                        ts >= start && ts <= stop && probes.as_ref().map_or(true, |set| set.contains(&prb))
                    }
                    // Malformed documents pass through for the client to tally.
                    _ => true,
                }
            })
            .collect();
        Ok(HttpResponse {
            status: 200,
            body: serde_json::to_string(&kept).expect("serializable"),
        })
    }
}
