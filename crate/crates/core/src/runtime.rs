//! GPU runtime submission layer: submission modes, event recording, the
//! deferred task-graph buffer and stream to hardware-queue multiplexing.
//!
//! The timing behaviour lives in [`crate::exec`]; this module holds the
//! configuration and the pieces that are pure functions of it.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::{ApiKind, ApiSampler, Backend};
use crate::des::SimDuration;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RuntimeError {
    #[error("unknown runtime profile '{0}'")]
    UnknownProfile(String),
    #[error("bad value '{value}' for {key}")]
    BadValue { key: String, value: String },
    #[error("invalid runtime config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum SubmissionMode {
    Instant,
    Deferred { mcn: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EventMode {
    /// Every submission records (and manages) a native event.
    Full,
    /// Only explicitly requested events are recorded.
    CoarseGrained,
}

/// How the PME rank talks to the PP ranks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "pattern")]
pub enum PmeCommPattern {
    /// All PP messages posted together and completed with one wait.
    Aggregated,
    /// Messages handled one PP rank at a time, each with host-side processing.
    PerRankSerialized { per_message_us: f64 },
}

/// Worker-thread CPU duty, interpolated between the MCN = 0 value and the
/// floor reached with large caches: `floor + (at_zero − floor) / (1 + mcn)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DutyCurve {
    pub at_zero: f64,
    pub floor: f64,
}

impl DutyCurve {
    pub fn at(&self, mcn: u32) -> f64 {
        (self.floor + (self.at_zero - self.floor) / (1.0 + mcn as f64)).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeConfig {
    pub profile: String,
    pub submission: SubmissionMode,
    pub event_mode: EventMode,
    /// Kernels come from this code base.
    pub backend: Backend,
    /// Caller-side cost of a SYCL submit in instant mode (on top of the
    /// native launch call), µs.
    pub instant_submit_us: f64,
    /// Caller-side cost of inserting a node into the task graph, µs.
    pub deferred_submit_us: f64,
    pub flush_bookkeeping_us: f64,
    pub per_node_flush_us: f64,
    /// Handoff delay before an idle flush worker starts on a new batch, µs.
    #[serde(default)]
    pub worker_wakeup_us: f64,
    pub flush_worker_duty: DutyCurve,
    pub monitor_worker_duty: DutyCurve,
    pub hsa_worker_duty: f64,
    /// Whether the HSA worker keeps the rank's core binding.
    pub hsa_respects_affinity: bool,
    pub idle_streams_per_visible_device: u32,
    pub visible_devices: u32,
    pub max_hw_queues: u32,
    /// Delay between a launch call returning and the device seeing the task, µs.
    pub dispatch_latency_us: f64,
    /// Device-side cost of the barrier packet behind each recorded event, µs.
    pub event_barrier_us: f64,
    /// Host cost of returning from a blocking wait, on top of the poll call, µs.
    pub sync_overhead_us: f64,
    pub pme_comm: PmeCommPattern,
}

impl RuntimeConfig {
    pub fn validate(&self) -> Result<(), RuntimeError> {
        if self.max_hw_queues < 1 {
            return Err(RuntimeError::Invalid("max_hw_queues must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.hsa_worker_duty) {
            return Err(RuntimeError::Invalid("HSA worker duty outside [0, 1]".into()));
        }
        let costs = [
            self.instant_submit_us,
            self.deferred_submit_us,
            self.flush_bookkeeping_us,
            self.per_node_flush_us,
            self.worker_wakeup_us,
            self.dispatch_latency_us,
            self.event_barrier_us,
            self.sync_overhead_us,
        ];
        if costs.iter().any(|c| !(*c >= 0.0)) {
            return Err(RuntimeError::Invalid("costs must be non-negative".into()));
        }
        Ok(())
    }

    pub fn is_deferred(&self) -> bool {
        matches!(self.submission, SubmissionMode::Deferred { .. })
    }

    pub fn mcn(&self) -> Option<u32> {
        match self.submission {
            SubmissionMode::Deferred { mcn } => Some(mcn),
            SubmissionMode::Instant => None,
        }
    }

    /// Runtime-owned worker threads besides the HSA thread.
    pub fn worker_threads(&self) -> u32 {
        match self.submission {
            SubmissionMode::Instant => 0,
            SubmissionMode::Deferred { .. } => 2,
        }
    }

    pub fn flush_duty(&self) -> f64 {
        self.mcn().map(|m| self.flush_worker_duty.at(m)).unwrap_or(0.0)
    }

    pub fn monitor_duty(&self) -> f64 {
        self.mcn().map(|m| self.monitor_worker_duty.at(m)).unwrap_or(0.0)
    }

    /// Idle runtime streams created on the rank's device.
    pub fn idle_streams(&self) -> u32 {
        if self.backend == Backend::Hip {
            return 0;
        }
        if self.visible_devices <= 1 {
            0
        } else {
            self.idle_streams_per_visible_device
        }
    }

    /// Applies overrides keyed by the native environment variable names.
    pub fn apply_env(&mut self, vars: &BTreeMap<String, String>) -> Result<(), RuntimeError> {
        let bad = |k: &str, v: &str| RuntimeError::BadValue {
            key: k.into(),
            value: v.into(),
        };
        if let Some(v) = vars.get("HIPSYCL_ALLOW_INSTANT_SUBMISSION") {
            match v.as_str() {
                "1" => self.submission = SubmissionMode::Instant,
                "0" => {
                    if !self.is_deferred() {
                        self.submission = SubmissionMode::Deferred { mcn: 100 };
                    }
                }
                _ => return Err(bad("HIPSYCL_ALLOW_INSTANT_SUBMISSION", v)),
            }
        }
        if let Some(v) = vars.get("HIPSYCL_RT_MAX_CACHED_NODES") {
            let mcn = v.parse().map_err(|_| bad("HIPSYCL_RT_MAX_CACHED_NODES", v))?;
            if self.is_deferred() {
                self.submission = SubmissionMode::Deferred { mcn };
            }
        }
        if let Some(v) = vars.get("GPU_MAX_HW_QUEUES") {
            let q: u32 = v.parse().map_err(|_| bad("GPU_MAX_HW_QUEUES", v))?;
            if q == 0 {
                return Err(bad("GPU_MAX_HW_QUEUES", v));
            }
            self.max_hw_queues = q;
        }
        if let Some(v) = vars.get("HSA_OVERRIDE_CPU_AFFINITY_DEBUG") {
            self.hsa_respects_affinity = match v.as_str() {
                "0" => true,
                "1" => false,
                _ => return Err(bad("HSA_OVERRIDE_CPU_AFFINITY_DEBUG", v)),
            };
        }
        if let Some(v) = vars.get("ROCR_VISIBLE_DEVICES") {
            self.visible_devices = v.split(',').filter(|s| !s.is_empty()).count().max(1) as u32;
        }
        Ok(())
    }

    /// Same profile with every host- and device-side runtime cost zeroed.
    pub fn zero_overhead(&self) -> RuntimeConfig {
        RuntimeConfig {
            instant_submit_us: 0.0,
            deferred_submit_us: 0.0,
            flush_bookkeeping_us: 0.0,
            per_node_flush_us: 0.0,
            worker_wakeup_us: 0.0,
            dispatch_latency_us: 0.0,
            event_barrier_us: 0.0,
            sync_overhead_us: 0.0,
            flush_worker_duty: DutyCurve { at_zero: 0.0, floor: 0.0 },
            monitor_worker_duty: DutyCurve { at_zero: 0.0, floor: 0.0 },
            hsa_worker_duty: 0.0,
            pme_comm: PmeCommPattern::Aggregated,
            ..self.clone()
        }
    }
}

/// Named runtime profiles plus the bundled table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeProfiles {
    pub profiles: BTreeMap<String, RuntimeConfig>,
}

impl RuntimeProfiles {
    pub fn get(&self, name: &str) -> Result<RuntimeConfig, RuntimeError> {
        self.profiles.get(name).cloned().ok_or_else(|| RuntimeError::UnknownProfile(name.into()))
    }

    /// Profile with its cache threshold replaced. Instant profiles ignore `mcn`.
    pub fn with_mcn(&self, name: &str, mcn: Option<u32>) -> Result<RuntimeConfig, RuntimeError> {
        let mut cfg = self.get(name)?;
        if let (Some(m), true) = (mcn, cfg.is_deferred()) {
            cfg.submission = SubmissionMode::Deferred { mcn: m };
        }
        Ok(cfg)
    }
}

/// Pending nodes of the deferred task graph.
#[derive(Debug, Clone, Default)]
pub struct TaskGraphBuffer {
    nodes: Vec<usize>,
    threshold: u32,
}

impl TaskGraphBuffer {
    pub fn new(mcn: u32) -> Self {
        TaskGraphBuffer {
            nodes: Vec::new(),
            threshold: mcn,
        }
    }

    pub fn threshold(&self) -> u32 {
        self.threshold
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Caches a node; returns true once the buffer holds more than `mcn` nodes.
    pub fn push(&mut self, node: usize) -> bool {
        self.nodes.push(node);
        self.nodes.len() > self.threshold as usize
    }

    pub fn take(&mut self) -> Vec<usize> {
        std::mem::take(&mut self.nodes)
    }
}

/// API calls and their summed latency for one submission.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ApiCharge {
    pub calls: u32,
    pub latency: SimDuration,
}

impl ApiCharge {
    fn add(&mut self, d: SimDuration, calls: u32) {
        self.calls += calls;
        self.latency += d;
    }
}

/// Native calls needed to put one task on the device: its launch, its event
/// (per event mode) and one wait per cross-queue dependency.
///
/// `key` addresses the latency draws so that the same task draws the same
/// latencies regardless of which thread issues the calls.
pub fn native_submit_charge(cfg: &RuntimeConfig, sampler: &ApiSampler, key: u64, cross_queue_deps: u32) -> ApiCharge {
    let mut c = ApiCharge::default();
    c.add(sampler.sample_keyed(ApiKind::KernelLaunch, key), 1);
    let ev = record_event_charge(cfg, sampler, key);
    c.add(ev.latency, ev.calls);
    for d in 0..cross_queue_deps as u64 {
        c.add(sampler.sample_keyed(ApiKind::StreamWaitEvent, key * 8 + d), 1);
    }
    c
}

/// Cost of the per-submission event. Coarse-grained events cost nothing but
/// remain usable for ordering; full events record a native event and manage
/// its lifetime (create + destroy).
pub fn record_event_charge(cfg: &RuntimeConfig, sampler: &ApiSampler, key: u64) -> ApiCharge {
    let mut c = ApiCharge::default();
    if cfg.event_mode == EventMode::Full && cfg.backend == Backend::Sycl {
        c.add(sampler.sample_keyed(ApiKind::EventRecord, key), 1);
        c.add(sampler.sample_keyed(ApiKind::EventCreateDestroy, key), 2);
    }
    c
}

/// Hardware slot per stream. Idle runtime streams are created first, then the
/// application streams; slots are handed out round-robin in creation order.
/// Returns the slots of the application streams.
pub fn map_streams_to_hw_queues(app_streams: usize, cfg: &RuntimeConfig) -> Vec<usize> {
    let slots = cfg.max_hw_queues.max(1) as usize;
    let idle = cfg.idle_streams() as usize;
    (0..app_streams).map(|i| (idle + i) % slots).collect()
}

/// Full stream table: `(stream name, slot)` including idle runtime streams.
pub fn stream_table(app_streams: &[&str], cfg: &RuntimeConfig) -> Vec<(String, usize)> {
    let slots = cfg.max_hw_queues.max(1) as usize;
    let idle = cfg.idle_streams() as usize;
    let mut out: Vec<(String, usize)> = (0..idle).map(|i| (format!("idle{i}"), i % slots)).collect();
    out.extend(app_streams.iter().enumerate().map(|(i, s)| (s.to_string(), (idle + i) % slots)));
    out
}
