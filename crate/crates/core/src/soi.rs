//! Speed-of-Internet bounds: the fastest a signal can travel over a given
//! medium, the minimum RTT that implies for a distance, and the converse
//! radius an observed RTT allows.

use std::collections::BTreeSet;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::DistanceKm;

/// Speed of light in vacuum, km/s.
pub const SPEED_OF_LIGHT_KM_S: f64 = 299_792.458;

/// Two thirds of the vacuum speed of light, km/s.
pub const FIBER_SPEED_KM_S: f64 = SPEED_OF_LIGHT_KM_S * 2.0 / 3.0;

/// Starlink's autonomous system. Probes announced from it may ride
/// inter-satellite laser links and get the vacuum speed.
pub const STARLINK_ASN: u32 = 14593;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Medium {
    Fiber,
    FreeSpace,
}

/// Probe-level medium: vacuum speed iff either address family is announced
/// by Starlink, fiber otherwise (including when no ASN is known).
pub fn classify_medium<'a>(probe_asns: impl IntoIterator<Item = &'a u32>) -> Medium {
    if probe_asns.into_iter().any(|&asn| asn == STARLINK_ASN) {
        Medium::FreeSpace
    } else {
        Medium::Fiber
    }
}

/// Propagation speeds per medium, km/s. Overridable from configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpeedModel {
    pub fiber_km_s: f64,
    pub free_space_km_s: f64,
}

impl Default for SpeedModel {
    fn default() -> Self {
        SpeedModel {
            fiber_km_s: FIBER_SPEED_KM_S,
            free_space_km_s: SPEED_OF_LIGHT_KM_S,
        }
    }
}

/// Theoretical absolute minimum RTT for a pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RttBound {
    pub bound_ms: f64,
    pub effective_distance_km: DistanceKm,
}

impl SpeedModel {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("fiber_km_s", self.fiber_km_s), ("free_space_km_s", self.free_space_km_s)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    pub fn km_per_ms(&self, medium: Medium) -> f64 {
        match medium {
            Medium::Fiber => self.fiber_km_s / 1000.0,
            Medium::FreeSpace => self.free_space_km_s / 1000.0,
        }
    }

    /// Round-trip bound after shrinking `distance` by `error_radius_km`.
    pub fn min_rtt_bound(&self, distance: DistanceKm, error_radius_km: f64, medium: Medium) -> RttBound {
        let effective = DistanceKm::saturating(distance.value() - error_radius_km.max(0.0));
        RttBound {
            bound_ms: 2.0 * effective.value() / self.km_per_ms(medium),
            effective_distance_km: effective,
        }
    }

    /// Farthest one-way distance a responder can be from the vantage point.
    pub fn max_radius_km(&self, measured_rtt_ms: f64, medium: Medium) -> Result<DistanceKm> {
        check_rtt(measured_rtt_ms)?;
        Ok(DistanceKm::saturating(measured_rtt_ms / 2.0 * self.km_per_ms(medium)))
    }

    /// Minimum distance between where the responder can be and where it
    /// claims to be: `d_theory - max_radius_km`. Computed from the RTT gap so
    /// that it is positive exactly when the zero-guard predicate fires.
    pub fn distance_error(&self, measured_rtt_ms: f64, d_theory: DistanceKm, medium: Medium) -> Result<DistanceKm> {
        check_rtt(measured_rtt_ms)?;
        let bound = self.min_rtt_bound(d_theory, 0.0, medium).bound_ms;
        if measured_rtt_ms < bound {
            Ok(DistanceKm::saturating((bound - measured_rtt_ms) / 2.0 * self.km_per_ms(medium)))
        } else {
            Err(Error::NotAViolation {
                measured_ms: measured_rtt_ms,
                radius_km: measured_rtt_ms / 2.0 * self.km_per_ms(medium),
                distance_km: d_theory.value(),
            })
        }
    }
}

fn check_rtt(measured_rtt_ms: f64) -> Result<()> {
    if measured_rtt_ms.is_finite() && measured_rtt_ms > 0.0 {
        Ok(())
    } else {
        Err(Error::NonPositiveRtt(measured_rtt_ms))
    }
}

pub fn min_rtt_bound(distance: DistanceKm, error_radius_km: f64, medium: Medium) -> RttBound {
    SpeedModel::default().min_rtt_bound(distance, error_radius_km, medium)
}

pub fn max_radius_km(measured_rtt_ms: f64, medium: Medium) -> Result<DistanceKm> {
    SpeedModel::default().max_radius_km(measured_rtt_ms, medium)
}

pub fn distance_error(measured_rtt_ms: f64, d_theory: DistanceKm, medium: Medium) -> Result<DistanceKm> {
    SpeedModel::default().distance_error(measured_rtt_ms, d_theory, medium)
}

/// Strict check: a measurement equal to the bound is physically possible.
pub fn is_violation(measured_rtt_ms: f64, bound: &RttBound, guard_ms: f64) -> Result<bool> {
    check_rtt(measured_rtt_ms)?;
    Ok(measured_rtt_ms < bound.bound_ms - guard_ms.max(0.0))
}

/// One physically impossible <probe, vantage point> observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolationRecord {
    pub probe_id: u64,
    pub vp_id: String,
    pub window_start: DateTime<Utc>,
    pub measured_rtt_ms: f64,
    pub bound_rtt_ms: f64,
    pub margin_ms: f64,
    pub min_distance_error_km: f64,
}

/// ASNs of a probe as a set, for [`classify_medium`].
pub fn asn_set(asn_v4: Option<u32>, asn_v6: Option<u32>) -> BTreeSet<u32> {
    asn_v4.into_iter().chain(asn_v6).collect()
}
