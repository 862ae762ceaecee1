//! Every threshold and physical constant that can change a result, gathered
//! in one place so it can be overridden from a file and fingerprinted.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::BaselineConfig;
use crate::detector::DetectionConfig;
use crate::error::{Error, Result};
use crate::longitudinal::EpisodeConfig;
use crate::registry::DEFAULT_CITY_RADIUS_KM;
use crate::soi::SpeedModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SoiConfig {
    pub speeds: SpeedModel,
    /// Error radius given to city-centre vantage points, km.
    pub city_radius_km: f64,
    pub detection: DetectionConfig,
    pub episodes: EpisodeConfig,
    pub baselines: BaselineConfig,
}

impl Default for SoiConfig {
    fn default() -> Self {
        SoiConfig {
            speeds: SpeedModel::default(),
            city_radius_km: DEFAULT_CITY_RADIUS_KM,
            detection: DetectionConfig::default(),
            episodes: EpisodeConfig::default(),
            baselines: BaselineConfig::default(),
        }
    }
}

impl SoiConfig {
    pub fn validate(&self) -> Result<()> {
        self.speeds.validate()?;
        let non_negative = [
            ("city_radius_km", self.city_radius_km),
            ("detection.probe_allowance_km", self.detection.probe_allowance_km),
            ("detection.guard_ms", self.detection.guard_ms),
            ("detection.centroid_threshold_km", self.detection.centroid_threshold_km),
            ("detection.max_skipped_fraction", self.detection.max_skipped_fraction),
            ("baselines.router_distance_km", self.baselines.router_distance_km),
        ];
        for (name, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be non-negative, got {v}")));
            }
        }
        if self.episodes.gap_tolerance_days < 0 || self.episodes.disconnect_after_days < 0 {
            return Err(Error::InvalidConfig("episode durations must be non-negative".into()));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form of the configuration.
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fingerprint_tracks_every_knob() {
        let base = SoiConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        seen.insert(base.fingerprint());

        let mut variants = Vec::new();
        let mut c = base.clone();
        c.speeds.fiber_km_s = 200_000.0;
        variants.push(c);
        let mut c = base.clone();
        c.city_radius_km = 25.0;
        variants.push(c);
        let mut c = base.clone();
        c.detection.guard_ms = 0.5;
        variants.push(c);
        let mut c = base.clone();
        c.detection.probe_allowance_km = 0.0;
        variants.push(c);
        let mut c = base.clone();
        c.episodes.gap_tolerance_days = 21;
        variants.push(c);
        let mut c = base.clone();
        c.baselines.router_distance_km = 50.0;
        variants.push(c);
        for v in variants {
            assert!(seen.insert(v.fingerprint()));
        }
        assert_eq!(base.fingerprint(), SoiConfig::default().fingerprint());
    }

    #[test]
    fn negative_values_rejected() {
        let mut c = SoiConfig::default();
        c.detection.guard_ms = -1.0;
        assert!(c.validate().is_err());
        assert!(SoiConfig::default().validate().is_ok());
    }
}
