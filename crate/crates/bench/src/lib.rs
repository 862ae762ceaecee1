//! Workloads shared by the benchmarks.

use soi_core::sim::{generate, Dist, Displacement, NoiseModel, SimScenario, SimWorld};

/// A simulated probe population of the requested size with a tenth of the
/// probes misreported.
pub fn synthetic_world(n_probes: usize, n_vps: usize, seed: u64) -> SimWorld {
    generate(&SimScenario {
        seed,
        n_probes,
        n_vps,
        misreport_fraction: 0.1,
        displacement: Displacement::Uniform { lo_km: 0.0, hi_km: 8000.0 },
        noise: NoiseModel {
            inflation: Dist::Uniform { lo: 0.0, hi: 0.6 },
            jitter_ms: Dist::Exponential { mean: 1.5 },
        },
        medium_mix: 0.02,
        allow_subphysical: false,
    })
    .expect("valid scenario")
}
