//! Calibrated cost functions for device kernels, host-side runtime API calls
//! and host application work.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::des::SimDuration;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CostError {
    #[error("kernel fit needs at least two distinct atom counts, got {0}")]
    Underdetermined(usize),
    #[error("no cost entry for kernel {0:?}")]
    UnknownKernel(KernelKind),
    #[error("no latency entry for API call {0:?}")]
    UnknownApi(ApiKind),
    #[error("invalid cost entry {name}: {reason}")]
    Invalid { name: String, reason: String },
    #[error("calibration table: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum KernelKind {
    NbnxmLocal,
    NbnxmNonLocal,
    PruneOnly,
    PairSearch,
    PmeSpread,
    PmeGather,
    PmeSolve,
    Fft3dForward,
    Fft3dInverse,
    ListedForces,
    LeapFrog,
    Constraints,
    ReduceForces,
    GridMemset,
    HaloPackUnpack,
    /// Post-prune pair-list sort, only launched by the HIP code path.
    PairListSort,
}

impl KernelKind {
    pub const ALL: [KernelKind; 16] = [
        KernelKind::NbnxmLocal,
        KernelKind::NbnxmNonLocal,
        KernelKind::PruneOnly,
        KernelKind::PairSearch,
        KernelKind::PmeSpread,
        KernelKind::PmeGather,
        KernelKind::PmeSolve,
        KernelKind::Fft3dForward,
        KernelKind::Fft3dInverse,
        KernelKind::ListedForces,
        KernelKind::LeapFrog,
        KernelKind::Constraints,
        KernelKind::ReduceForces,
        KernelKind::GridMemset,
        KernelKind::HaloPackUnpack,
        KernelKind::PairListSort,
    ];

    pub fn is_nonbonded(self) -> bool {
        matches!(self, KernelKind::NbnxmLocal | KernelKind::NbnxmNonLocal | KernelKind::PruneOnly)
    }
}

/// Which code base produced the kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backend {
    Sycl,
    Hip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelCost {
    /// Walltime at zero work, µs.
    pub floor_us: f64,
    /// Additional walltime per atom (or grid point), µs.
    pub slope_us: f64,
    pub sycl_multiplier: f64,
    pub hip_multiplier: f64,
    pub provenance: String,
}

impl KernelCost {
    fn multiplier(&self, backend: Backend) -> f64 {
        match backend {
            Backend::Sycl => self.sycl_multiplier,
            Backend::Hip => self.hip_multiplier,
        }
    }
}

/// A kernel's duration split into the latency part (runs regardless of
/// device load) and the throughput part (shares the device with other
/// concurrently running kernels).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct KernelPhases {
    pub latency: SimDuration,
    pub work: SimDuration,
}

impl KernelPhases {
    pub fn total(&self) -> SimDuration {
        self.latency + self.work
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelCostModel {
    pub kernels: BTreeMap<KernelKind, KernelCost>,
}

impl KernelCostModel {
    pub fn validate(&self) -> Result<(), CostError> {
        for (kind, c) in &self.kernels {
            let invalid = |reason: &str| CostError::Invalid {
                name: format!("{kind:?}"),
                reason: reason.into(),
            };
            if !(c.floor_us >= 0.0) || !(c.slope_us >= 0.0) {
                return Err(invalid("floor and slope must be non-negative"));
            }
            if !(c.sycl_multiplier > 0.0) || !(c.hip_multiplier > 0.0) {
                return Err(invalid("multipliers must be positive"));
            }
        }
        Ok(())
    }

    pub fn entry(&self, kind: KernelKind) -> Result<&KernelCost, CostError> {
        self.kernels.get(&kind).ok_or(CostError::UnknownKernel(kind))
    }

    /// `(floor + slope·atoms) × multiplier`, rounded to whole nanoseconds.
    pub fn kernel_walltime(&self, kind: KernelKind, atoms: u64, backend: Backend) -> Result<SimDuration, CostError> {
        let c = self.entry(kind)?;
        Ok(SimDuration::from_us_f64((c.floor_us + c.slope_us * atoms as f64) * c.multiplier(backend)))
    }

    /// Same total as [`kernel_walltime`](Self::kernel_walltime), split into phases.
    /// `work_scale` multiplies the per-atom part only (system-specific density).
    pub fn kernel_phases(&self, kind: KernelKind, atoms: u64, backend: Backend, work_scale: f64) -> Result<KernelPhases, CostError> {
        let c = self.entry(kind)?;
        let m = c.multiplier(backend);
        let latency = SimDuration::from_us_f64(c.floor_us * m);
        let total = SimDuration::from_us_f64((c.floor_us + c.slope_us * work_scale * atoms as f64) * m);
        Ok(KernelPhases {
            latency,
            work: SimDuration(total.0.saturating_sub(latency.0)),
        })
    }

    pub fn with_uniform_multipliers(&self) -> KernelCostModel {
        let mut m = self.clone();
        for c in m.kernels.values_mut() {
            c.sycl_multiplier = 1.0;
            c.hip_multiplier = 1.0;
        }
        m
    }
}

/// Least-squares fit of `walltime = floor + slope·atoms`.
///
/// Samples are `(atoms, walltime µs)`. A negative intercept is clamped to
/// zero and the slope refitted through the origin.
pub fn fit_kernel_model(samples: &[(f64, f64)]) -> Result<(f64, f64), CostError> {
    let mut distinct: Vec<f64> = samples.iter().map(|s| s.0).collect();
    distinct.sort_by(|a, b| a.total_cmp(b));
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(CostError::Underdetermined(distinct.len()));
    }
    let n = samples.len() as f64;
    let mean_x = samples.iter().map(|s| s.0).sum::<f64>() / n;
    let mean_y = samples.iter().map(|s| s.1).sum::<f64>() / n;
    let sxx: f64 = samples.iter().map(|s| (s.0 - mean_x).powi(2)).sum();
    let sxy: f64 = samples.iter().map(|s| (s.0 - mean_x) * (s.1 - mean_y)).sum();
    let slope = sxy / sxx;
    let floor = mean_y - slope * mean_x;
    if floor >= 0.0 {
        return Ok((floor, slope.max(0.0)));
    }
    let through_origin = samples.iter().map(|s| s.0 * s.1).sum::<f64>() / samples.iter().map(|s| s.0 * s.0).sum::<f64>();
    Ok((0.0, through_origin.max(0.0)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApiKind {
    KernelLaunch,
    EventRecord,
    EventCreateDestroy,
    StreamWaitEvent,
    MemcpyAsync,
    HostSyncPoll,
}

impl ApiKind {
    pub const ALL: [ApiKind; 6] = [
        ApiKind::KernelLaunch,
        ApiKind::EventRecord,
        ApiKind::EventCreateDestroy,
        ApiKind::StreamWaitEvent,
        ApiKind::MemcpyAsync,
        ApiKind::HostSyncPoll,
    ];

    fn stream_id(self) -> u64 {
        self as u64 + 1
    }
}

/// Two-point latency distribution of one API call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiLatency {
    pub mean_us: f64,
    pub tail_us: f64,
    pub tail_prob: f64,
    pub provenance: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiLatencyModel {
    pub calls: BTreeMap<ApiKind, ApiLatency>,
}

impl ApiLatencyModel {
    pub fn validate(&self) -> Result<(), CostError> {
        for (kind, l) in &self.calls {
            let invalid = |reason: &str| CostError::Invalid {
                name: format!("{kind:?}"),
                reason: reason.into(),
            };
            if !(l.mean_us >= 0.0) {
                return Err(invalid("mean must be non-negative"));
            }
            if !(l.tail_us >= l.mean_us) {
                return Err(invalid("tail value must be at least the mean"));
            }
            if !(0.0..=1.0).contains(&l.tail_prob) {
                return Err(invalid("tail probability outside [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn entry(&self, kind: ApiKind) -> Result<&ApiLatency, CostError> {
        self.calls.get(&kind).ok_or(CostError::UnknownApi(kind))
    }

    /// Expected latency including the tail.
    pub fn expected(&self, kind: ApiKind) -> f64 {
        self.calls
            .get(&kind)
            .map(|l| l.mean_us * (1.0 - l.tail_prob) + l.tail_us * l.tail_prob)
            .unwrap_or(0.0)
    }

    pub fn zero() -> ApiLatencyModel {
        ApiLatencyModel {
            calls: ApiKind::ALL
                .iter()
                .map(|&k| {
                    (
                        k,
                        ApiLatency {
                            mean_us: 0.0,
                            tail_us: 0.0,
                            tail_prob: 0.0,
                            provenance: "zero".into(),
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn without_tails(&self) -> ApiLatencyModel {
        let mut m = self.clone();
        for l in m.calls.values_mut() {
            l.tail_prob = 0.0;
        }
        m
    }
}

/// Seeded sampler over an [`ApiLatencyModel`].
///
/// Samples are addressed by `(kind, key)`: the same key always yields the
/// same draw, so inserting extra calls of one kind never perturbs the draws
/// of another call site. [`sample_api_latency`](Self::sample_api_latency)
/// walks keys sequentially.
#[derive(Debug, Clone)]
pub struct ApiSampler {
    model: ApiLatencyModel,
    seed: u64,
    counters: BTreeMap<ApiKind, u64>,
}

impl ApiSampler {
    pub fn new(model: ApiLatencyModel, seed: u64) -> Self {
        ApiSampler {
            model,
            seed,
            counters: BTreeMap::new(),
        }
    }

    pub fn model(&self) -> &ApiLatencyModel {
        &self.model
    }

    pub fn sample_api_latency(&mut self, kind: ApiKind) -> SimDuration {
        let c = self.counters.entry(kind).or_insert(0);
        let key = *c;
        *c += 1;
        self.sample_keyed(kind, key)
    }

    pub fn sample_keyed(&self, kind: ApiKind, key: u64) -> SimDuration {
        let Some(l) = self.model.calls.get(&kind) else {
            return SimDuration::ZERO;
        };
        let tail = if l.tail_prob <= 0.0 {
            false
        } else if l.tail_prob >= 1.0 {
            true
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(kind.stream_id());
            rng.set_word_pos(u128::from(key) * 2);
            rng.random::<f64>() < l.tail_prob
        };
        SimDuration::from_us_f64(if tail { l.tail_us } else { l.mean_us })
    }
}

/// Host-side application (MD engine) CPU costs, independent of the GPU runtime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HostCostModel {
    /// Fixed per-step bookkeeping on the main thread, µs.
    pub step_overhead_us: f64,
    /// Main-thread work preceding each GPU task submission, µs.
    pub per_task_us: f64,
    /// Pair search and domain repartitioning on search steps, µs per atom,
    /// spread over the rank's application threads.
    pub search_us_per_atom: f64,
    /// Spin-wait window of idle application threads, µs; zero means they
    /// sleep at once.
    #[serde(default)]
    pub spin_window_us: f64,
    pub provenance: String,
}

impl HostCostModel {
    pub fn zero() -> HostCostModel {
        HostCostModel {
            step_overhead_us: 0.0,
            per_task_us: 0.0,
            search_us_per_atom: 0.0,
            spin_window_us: 0.0,
            provenance: "zero".into(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(kind: KernelKind, floor: f64, slope: f64, sycl: f64) -> KernelCostModel {
        KernelCostModel {
            kernels: [(
                kind,
                KernelCost {
                    floor_us: floor,
                    slope_us: slope,
                    sycl_multiplier: sycl,
                    hip_multiplier: 1.0,
                    provenance: "test".into(),
                },
            )]
            .into_iter()
            .collect(),
        }
    }

    #[test]
    fn two_anchor_fit_matches_hand_solve() {
        // Exact two-point solve: slope = Δt/ΔN, floor = t1 − slope·N1.
        let (n1, t1, n2, t2) = (1_500.0, 19.2, 6_144_000.0, 20_000.0);
        let slope_ref = (t2 - t1) / (n2 - n1);
        let floor_ref = t1 - slope_ref * n1;
        let (floor, slope) = fit_kernel_model(&[(n1, t1), (n2, t2)]).unwrap();
        assert!((slope - slope_ref).abs() < 1e-15);
        assert!((floor - floor_ref).abs() < 1e-9);
        assert!((slope / 3.256e-3 - 1.0).abs() < 2e-3, "slope {slope}");
        assert!((floor - 14.32).abs() < 0.05, "floor {floor}");
        // Per-atom cost at 384k atoms is near the asymptote.
        let per_atom = floor / 384_000.0 + slope;
        assert!(per_atom / slope - 1.0 < 0.05);
    }

    #[test]
    fn proportional_data_has_zero_floor() {
        let (floor, slope) = fit_kernel_model(&[(1000.0, 5.0), (2000.0, 10.0)]).unwrap();
        assert!(floor.abs() < 1e-12);
        assert!((slope - 0.005).abs() < 1e-15);
    }

    #[test]
    fn negative_intercept_is_clamped() {
        let (floor, slope) = fit_kernel_model(&[(1000.0, 1.0), (2000.0, 10.0)]).unwrap();
        assert_eq!(floor, 0.0);
        assert!(slope > 0.0);
    }

    #[test]
    fn fit_needs_two_distinct_sizes() {
        assert_eq!(fit_kernel_model(&[(5.0, 1.0), (5.0, 2.0)]), Err(CostError::Underdetermined(1)));
        assert_eq!(fit_kernel_model(&[]), Err(CostError::Underdetermined(0)));
    }

    #[test]
    fn walltime_at_zero_atoms_is_floor_times_multiplier() {
        let m = single(KernelKind::PmeSolve, 8.0, 0.1, 1.25);
        assert_eq!(m.kernel_walltime(KernelKind::PmeSolve, 0, Backend::Sycl).unwrap(), SimDuration(10_000));
        assert_eq!(m.kernel_walltime(KernelKind::PmeSolve, 0, Backend::Hip).unwrap(), SimDuration(8_000));
        assert!(matches!(
            m.kernel_walltime(KernelKind::LeapFrog, 0, Backend::Hip),
            Err(CostError::UnknownKernel(KernelKind::LeapFrog))
        ));
    }

    #[test]
    fn phases_sum_to_walltime() {
        let m = single(KernelKind::NbnxmLocal, 14.32, 3.2529e-3, 1.17);
        let p = m.kernel_phases(KernelKind::NbnxmLocal, 12_000, Backend::Sycl, 1.0).unwrap();
        assert_eq!(p.total(), m.kernel_walltime(KernelKind::NbnxmLocal, 12_000, Backend::Sycl).unwrap());
    }

    fn event_model(prob: f64) -> ApiLatencyModel {
        ApiLatencyModel {
            calls: [(
                ApiKind::EventRecord,
                ApiLatency {
                    mean_us: 2.0,
                    tail_us: 30.0,
                    tail_prob: prob,
                    provenance: "test".into(),
                },
            )]
            .into_iter()
            .collect(),
        }
    }

    #[test]
    fn zero_tail_probability_always_returns_mean() {
        let mut s = ApiSampler::new(event_model(0.0), 7);
        for _ in 0..1000 {
            assert_eq!(s.sample_api_latency(ApiKind::EventRecord), SimDuration(2_000));
        }
    }

    #[test]
    fn tail_frequency_and_determinism() {
        let mut a = ApiSampler::new(event_model(0.02), 11);
        let mut b = ApiSampler::new(event_model(0.02), 11);
        let xs: Vec<_> = (0..20_000).map(|_| a.sample_api_latency(ApiKind::EventRecord)).collect();
        let ys: Vec<_> = (0..20_000).map(|_| b.sample_api_latency(ApiKind::EventRecord)).collect();
        assert_eq!(xs, ys);
        let tails = xs.iter().filter(|d| d.0 == 30_000).count() as f64 / xs.len() as f64;
        assert!((tails - 0.02).abs() < 0.005, "tail share {tails}");
        assert!(xs.iter().all(|d| d.0 == 2_000 || d.0 == 30_000));
    }

    #[test]
    fn validation_rejects_bad_entries() {
        let mut m = event_model(0.5);
        m.calls.get_mut(&ApiKind::EventRecord).unwrap().tail_us = 1.0;
        assert!(m.validate().is_err());
        let k = single(KernelKind::LeapFrog, -1.0, 0.0, 1.0);
        assert!(k.validate().is_err());
        let k = single(KernelKind::LeapFrog, 1.0, 0.0, 0.0);
        assert!(k.validate().is_err());
    }
}
