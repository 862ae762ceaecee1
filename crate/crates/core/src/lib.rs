//! Detects measurement vantage points whose latencies are physically
//! impossible for the location their operators report.
//!
//! The check is a lower bound: a round trip between two points cannot be
//! faster than light over the great-circle distance between them, at fiber
//! speed for terrestrial paths and at vacuum speed for satellite-laser
//! networks. A probe that answers faster than that bound cannot be where it
//! says it is.

pub mod baselines;
pub mod config;
pub mod detector;
pub mod error;
pub mod geo;
pub mod ingest;
pub mod longitudinal;
pub mod registry;
pub mod report;
pub mod sim;
pub mod soi;

pub use config::SoiConfig;
pub use detector::{detect, CentroidTable, CountryAggregate, DetectionReport};
pub use error::{Error, Result};
pub use geo::{haversine, miles_from_km, DistanceKm, GeoPoint, EARTH_RADIUS_KM};
pub use ingest::{aggregate_min_rtt, LatencyObservation, Sample};
pub use longitudinal::{build_episodes, Resolution, Timeline, ViolationEpisode};
pub use registry::{ProbeRecord, Registry, VantagePoint, VpKind};
pub use soi::{classify_medium, is_violation, max_radius_km, min_rtt_bound, Medium, RttBound, SpeedModel, ViolationRecord};
