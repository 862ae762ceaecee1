//! Spherical-Earth geodesy: coordinates, great-circle distance and unit
//! conversion. Kilometres are the internal unit everywhere; miles exist only
//! for reporting.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean Earth radius (IUGG), km.
pub const EARTH_RADIUS_KM: f64 = 6371.0088;

pub const KM_PER_MILE: f64 = 1.609344;

/// A validated latitude/longitude pair, in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GeoPoint {
    lat_deg: f64,
    lon_deg: f64,
}

impl GeoPoint {
    pub fn new(lat_deg: f64, lon_deg: f64) -> Result<Self> {
        if !(-90.0..=90.0).contains(&lat_deg) {
            return Err(Error::LatitudeOutOfRange(lat_deg));
        }
        if !(-180.0..=180.0).contains(&lon_deg) {
            return Err(Error::LongitudeOutOfRange(lon_deg));
        }
        Ok(GeoPoint { lat_deg, lon_deg })
    }

    pub fn lat_deg(&self) -> f64 {
        self.lat_deg
    }

    pub fn lon_deg(&self) -> f64 {
        self.lon_deg
    }

    /// Point reached by travelling `distance` along the great circle leaving
    /// `self` at `bearing_deg` (clockwise from north).
    pub fn destination(&self, bearing_deg: f64, distance: DistanceKm) -> GeoPoint {
        let delta = distance.value() / EARTH_RADIUS_KM;
        let theta = bearing_deg.to_radians();
        let phi1 = self.lat_deg.to_radians();
        let lambda1 = self.lon_deg.to_radians();

        let sin_phi2 = phi1.sin() * delta.cos() + phi1.cos() * delta.sin() * theta.cos();
        let phi2 = sin_phi2.clamp(-1.0, 1.0).asin();
        let lambda2 = lambda1
            + (theta.sin() * delta.sin() * phi1.cos()).atan2(delta.cos() - phi1.sin() * sin_phi2);

        GeoPoint {
            lat_deg: phi2.to_degrees().clamp(-90.0, 90.0),
            lon_deg: wrap_longitude(lambda2.to_degrees()),
        }
    }
}

impl<'de> Deserialize<'de> for GeoPoint {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            lat_deg: f64,
            lon_deg: f64,
        }
        let raw = Raw::deserialize(d)?;
        GeoPoint::new(raw.lat_deg, raw.lon_deg).map_err(serde::de::Error::custom)
    }
}

impl fmt::Display for GeoPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:.4}, {:.4})", self.lat_deg, self.lon_deg)
    }
}

fn wrap_longitude(lon: f64) -> f64 {
    let wrapped = (lon + 180.0).rem_euclid(360.0) - 180.0;
    // rem_euclid maps +180 to -180; both name the same meridian.
    wrapped.clamp(-180.0, 180.0)
}

/// Non-negative distance in kilometres.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DistanceKm(f64);

impl DistanceKm {
    pub const ZERO: DistanceKm = DistanceKm(0.0);

    pub fn new(value: f64) -> Result<Self> {
        if value.is_finite() && value >= 0.0 {
            Ok(DistanceKm(value))
        } else {
            Err(Error::InvalidDistance(value))
        }
    }

    /// Clamps negatives (including `-0.0`) to zero.
    pub(crate) fn saturating(value: f64) -> Self {
        DistanceKm(if value > 0.0 { value } else { 0.0 })
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn miles(self) -> f64 {
        miles_from_km(self)
    }
}

impl fmt::Display for DistanceKm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.1} km", self.0)
    }
}

/// Great-circle distance on a sphere of radius [`EARTH_RADIUS_KM`].
pub fn haversine(a: GeoPoint, b: GeoPoint) -> DistanceKm {
    if a == b {
        return DistanceKm::ZERO;
    }
    let phi1 = a.lat_deg.to_radians();
    let phi2 = b.lat_deg.to_radians();
    let dphi = phi2 - phi1;
    let dlambda = (b.lon_deg - a.lon_deg).to_radians();

    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    let arc = 2.0 * h.sqrt().min(1.0).asin();
    DistanceKm::saturating(arc * EARTH_RADIUS_KM)
}

pub fn miles_from_km(d: DistanceKm) -> f64 {
    d.0 / KM_PER_MILE
}

pub fn km_from_miles(miles: f64) -> f64 {
    miles * KM_PER_MILE
}
