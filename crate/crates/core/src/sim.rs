//! Synthetic ground truth for the detector.
//!
//! A scenario places probes and vantage points uniformly on the sphere,
//! moves the reported location of a chosen subset of probes, and generates
//! RTTs that are never faster than light from the probe's *true* position.
//! Running the detector on the result measures how much of the planted
//! misreporting the lower bound can see.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, TimeZone, Utc};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::SoiConfig;
use crate::detector::detect;
use crate::error::{Error, Result};
use crate::geo::{haversine, DistanceKm, GeoPoint};
use crate::ingest::LatencyObservation;
use crate::registry::{LocationEntry, ProbeRecord, ProbeStatus, Registry, VantagePoint};
use crate::soi::{Medium, STARLINK_ASN};

/// Non-negative scalar distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Dist {
    Fixed { value: f64 },
    Uniform { lo: f64, hi: f64 },
    Exponential { mean: f64 },
}

impl Dist {
    fn validate(&self, what: &str, allow_negative: bool) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidScenario(format!("{what}: {msg}")));
        match *self {
            Dist::Fixed { value } if !value.is_finite() => bad(format!("non-finite value {value}")),
            Dist::Fixed { value } if value < 0.0 && !allow_negative => bad(format!("negative value {value}")),
            Dist::Uniform { lo, hi } if !(lo.is_finite() && hi.is_finite() && lo <= hi) => bad(format!("bad range [{lo}, {hi}]")),
            Dist::Uniform { lo, .. } if lo < 0.0 && !allow_negative => bad(format!("negative lower bound {lo}")),
            Dist::Exponential { mean } if !(mean.is_finite() && mean >= 0.0) => bad(format!("bad mean {mean}")),
            _ => Ok(()),
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            Dist::Fixed { value } => value,
            Dist::Uniform { lo, hi } => {
                if hi > lo {
                    rng.random_range(lo..=hi)
                } else {
                    lo
                }
            }
            Dist::Exponential { mean } => {
                let u: f64 = rng.random();
                -mean * (1.0 - u).ln()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Displacement {
    Fixed { km: f64 },
    Uniform { lo_km: f64, hi_km: f64 },
    Mixture { components: Vec<(f64, Displacement)> },
}

impl Displacement {
    fn validate(&self) -> Result<()> {
        match self {
            Displacement::Fixed { km } => Dist::Fixed { value: *km }.validate("displacement", false),
            Displacement::Uniform { lo_km, hi_km } => Dist::Uniform { lo: *lo_km, hi: *hi_km }.validate("displacement", false),
            Displacement::Mixture { components } => {
                if components.is_empty() || components.iter().any(|(w, _)| !(w.is_finite() && *w >= 0.0)) {
                    return Err(Error::InvalidScenario("mixture needs non-negative weights".into()));
                }
                if components.iter().map(|(w, _)| w).sum::<f64>() <= 0.0 {
                    return Err(Error::InvalidScenario("mixture weights sum to zero".into()));
                }
                components.iter().try_for_each(|(_, d)| d.validate())
            }
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match self {
            Displacement::Fixed { km } => *km,
            Displacement::Uniform { lo_km, hi_km } => Dist::Uniform { lo: *lo_km, hi: *hi_km }.sample(rng),
            Displacement::Mixture { components } => {
                let total: f64 = components.iter().map(|(w, _)| w).sum();
                let mut pick = rng.random::<f64>() * total;
                for (w, d) in components {
                    if pick < *w {
                        return d.sample(rng);
                    }
                    pick -= w;
                }
                components.last().expect("validated").1.sample(rng)
            }
        }
    }
}

/// `rtt = bound(true distance) * (1 + inflation) + jitter_ms`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub inflation: Dist,
    pub jitter_ms: Dist,
}

impl NoiseModel {
    pub fn none() -> Self {
        NoiseModel {
            inflation: Dist::Fixed { value: 0.0 },
            jitter_ms: Dist::Fixed { value: 0.0 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimScenario {
    pub seed: u64,
    pub n_probes: usize,
    pub n_vps: usize,
    pub misreport_fraction: f64,
    pub displacement: Displacement,
    pub noise: NoiseModel,
    /// Fraction of probes announced from the satellite ASN.
    #[serde(default)]
    pub medium_mix: f64,
    /// Lets noise go negative, producing faster-than-light RTTs. Only for
    /// checking that the evaluation harness can detect broken soundness.
    #[serde(default)]
    pub allow_subphysical: bool,
}

impl SimScenario {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("misreport_fraction", self.misreport_fraction), ("medium_mix", self.medium_mix)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidScenario(format!("{name} must be in [0, 1], got {v}")));
            }
        }
        self.displacement.validate()?;
        self.noise.inflation.validate("inflation", self.allow_subphysical)?;
        self.noise.jitter_ms.validate("jitter_ms", self.allow_subphysical)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedProbe {
    pub probe_id: u64,
    pub true_location: GeoPoint,
    pub reported_location: GeoPoint,
    pub displacement_km: f64,
    pub medium: Medium,
}

#[derive(Debug, Clone)]
pub struct SimWorld {
    pub registry: Registry,
    pub observations: Vec<LatencyObservation>,
    /// Ids of probes whose reported location was moved.
    pub truth: BTreeSet<u64>,
    pub planted: Vec<PlantedProbe>,
}

/// Window all simulated observations fall in.
pub fn sim_epoch() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2024, 5, 6, 0, 0, 0).unwrap()
}

fn random_point<R: Rng>(rng: &mut R) -> GeoPoint {
    // Uniform on the sphere: z = sin(lat) uniform in [-1, 1].
    let z: f64 = rng.random_range(-1.0..=1.0);
    let lon: f64 = rng.random_range(-180.0..=180.0);
    GeoPoint::new(z.asin().to_degrees().clamp(-90.0, 90.0), lon).expect("in range")
}

/// Independent stream per (vantage point, probe) pair so RTTs do not depend
/// on generation order.
fn pair_rng(seed: u64, vp: usize, probe: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f1a_7ec7);
    rng.set_stream(((vp as u64) << 32) | probe as u64);
    rng
}

pub fn generate(scenario: &SimScenario) -> Result<SimWorld> {
    scenario.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let epoch = sim_epoch();

    let vps: Vec<VantagePoint> = (0..scenario.n_vps)
        .map(|i| VantagePoint::exact(format!("sim-vp-{i:04}"), random_point(&mut rng)))
        .collect();

    let n_misreported = (scenario.misreport_fraction * scenario.n_probes as f64).round() as usize;
    let misreported: BTreeSet<usize> = if scenario.n_probes == 0 {
        BTreeSet::new()
    } else {
        sample_indices(&mut rng, scenario.n_probes, n_misreported.min(scenario.n_probes)).into_iter().collect()
    };

    let mut planted = Vec::with_capacity(scenario.n_probes);
    let mut probes = Vec::with_capacity(scenario.n_probes);
    for i in 0..scenario.n_probes {
        let probe_id = i as u64 + 1;
        let true_location = random_point(&mut rng);
        let starlink = rng.random::<f64>() < scenario.medium_mix;
        let bearing: f64 = rng.random_range(0.0..360.0);
        let displacement_km = if misreported.contains(&i) { scenario.displacement.sample(&mut rng).max(0.0) } else { 0.0 };
        let reported_location = if displacement_km > 0.0 {
            true_location.destination(bearing, DistanceKm::saturating(displacement_km))
        } else {
            true_location
        };
        let medium = if starlink { Medium::FreeSpace } else { Medium::Fiber };
        probes.push(ProbeRecord {
            probe_id,
            asn_v4: Some(if starlink { STARLINK_ASN } else { 64_512 }),
            asn_v6: None,
            country_code: "XX".into(),
            admin1: None,
            status: ProbeStatus::Connected,
            is_anchor: false,
            location_history: vec![LocationEntry {
                effective_from: epoch,
                location: reported_location,
            }],
        });
        planted.push(PlantedProbe {
            probe_id,
            true_location,
            reported_location,
            displacement_km,
            medium,
        });
    }

    let speeds = crate::soi::SpeedModel::default();
    let mut observations = Vec::with_capacity(scenario.n_probes * scenario.n_vps);
    for (pi, p) in planted.iter().enumerate() {
        for (vi, vp) in vps.iter().enumerate() {
            let mut prng = pair_rng(scenario.seed, vi, pi);
            let bound = speeds.min_rtt_bound(haversine(vp.location, p.true_location), 0.0, p.medium).bound_ms;
            let inflation = scenario.noise.inflation.sample(&mut prng);
            let jitter = scenario.noise.jitter_ms.sample(&mut prng);
            let rtt = bound * (1.0 + inflation) + jitter;
            if !(rtt.is_finite() && rtt > 0.0) {
                continue;
            }
            observations.push(LatencyObservation {
                vp_id: vp.vp_id.clone(),
                probe_id: p.probe_id,
                window_start: epoch,
                min_rtt_ms: rtt,
                sample_count: 1,
            });
        }
    }
    observations.sort_by(|a, b| (a.probe_id, &a.vp_id).cmp(&(b.probe_id, &b.vp_id)));

    let truth = misreported.iter().map(|&i| i as u64 + 1).collect();
    Ok(SimWorld {
        registry: Registry::new(probes, vps),
        observations,
        truth,
        planted,
    })
}

/// Recall buckets on planted displacement, km: `[lo, hi)`, with a
/// dedicated bucket for zero.
pub const DEFAULT_BUCKET_EDGES_KM: [f64; 8] = [0.0, 1e-9, 100.0, 500.0, 1000.0, 2500.0, 5000.0, f64::INFINITY];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallBucket {
    pub lo_km: f64,
    pub hi_km: f64,
    pub planted: usize,
    pub detected: usize,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub precision: f64,
    pub recall: f64,
    pub recall_by_displacement_bucket: Vec<RecallBucket>,
    pub flagged: BTreeSet<u64>,
    pub truth: BTreeSet<u64>,
    pub false_positives: BTreeSet<u64>,
}

/// Scores a flag set against the planted truth. Precision is 1 when nothing
/// is flagged; recall is 1 when nothing was planted.
pub fn score(world: &SimWorld, flagged: &BTreeSet<u64>, edges: &[f64]) -> SimResult {
    let hits = flagged.intersection(&world.truth).count();
    let precision = if flagged.is_empty() { 1.0 } else { hits as f64 / flagged.len() as f64 };
    let recall = if world.truth.is_empty() { 1.0 } else { hits as f64 / world.truth.len() as f64 };

    let mut buckets: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for p in world.planted.iter().filter(|p| world.truth.contains(&p.probe_id)) {
        let Some(b) = edges.windows(2).position(|w| p.displacement_km >= w[0] && p.displacement_km < w[1]) else {
            continue;
        };
        let slot = buckets.entry(b).or_default();
        slot.0 += 1;
        if flagged.contains(&p.probe_id) {
            slot.1 += 1;
        }
    }
    let recall_by_displacement_bucket = buckets
        .into_iter()
        .map(|(b, (planted, detected))| RecallBucket {
            lo_km: edges[b],
            hi_km: edges[b + 1],
            planted,
            detected,
            recall: detected as f64 / planted as f64,
        })
        .collect();

    SimResult {
        precision,
        recall,
        recall_by_displacement_bucket,
        flagged: flagged.clone(),
        truth: world.truth.clone(),
        false_positives: flagged.difference(&world.truth).copied().collect(),
    }
}

/// Generates the scenario, runs the detector on it and scores the result.
pub fn evaluate(scenario: &SimScenario, config: &SoiConfig) -> Result<SimResult> {
    let world = generate(scenario)?;
    let report = detect(&world.observations, &world.registry, config);
    Ok(score(&world, &report.violating_probes, &DEFAULT_BUCKET_EDGES_KM))
}
