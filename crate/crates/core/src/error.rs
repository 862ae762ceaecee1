use std::path::PathBuf;

use chrono::{DateTime, Utc};
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("latitude {0} outside [-90, 90]")]
    LatitudeOutOfRange(f64),
    #[error("longitude {0} outside [-180, 180]")]
    LongitudeOutOfRange(f64),
    #[error("distance must be a finite non-negative number of km, got {0}")]
    InvalidDistance(f64),
    #[error("RTT must be a finite positive number of ms, got {0}")]
    NonPositiveRtt(f64),
    #[error("pair does not violate the speed-of-Internet bound (measured {measured_ms} ms, radius {radius_km} km, distance {distance_km} km)")]
    NotAViolation {
        measured_ms: f64,
        radius_km: f64,
        distance_km: f64,
    },
    #[error("probe {probe_id} has no reported location at {at}")]
    NoReportedLocation { probe_id: u64, at: DateTime<Utc> },
    #[error("unknown vantage point `{0}`")]
    UnknownVantagePoint(String),
    #[error("invalid vantage point `{vp_id}`: {reason}")]
    InvalidVantagePoint { vp_id: String, reason: String },
    #[error("episode for probe {0} was not resolved by a location update")]
    NotALocationUpdate(u64),
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("{path}:{line}: {reason}")]
    Parse {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("store at {path} is locked by another invocation")]
    StoreLocked { path: PathBuf },
    #[error(transparent)]
    Fetch(#[from] crate::ingest::atlas::FetchError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
