//! Execution of per-rank host programs against simulated devices.
//!
//! Each rank has one application host thread that walks a linear program of
//! [`HostOp`]s, a device with hardware queue slots, and (in deferred mode) a
//! flush worker. Host threads run ahead of the global clock until they block
//! on a sync or an unmatched receive; everything they post lies in the
//! future, so the event order stays causal.
//!
//! Kernels have a latency phase that ignores device load and a work phase
//! that shares device throughput evenly with the other kernels in their
//! work phase (processor sharing with exact integer bookkeeping).

use std::collections::{BTreeMap, VecDeque};

use serde_json::json;

use crate::comm::{CommModel, LinkClass};
use crate::cost::{ApiKind, ApiLatencyModel, ApiSampler, Backend, KernelKind, KernelPhases};
use crate::des::{ActorId, CpuPool, CpuThread, DesError, EventQueue, SimDuration, SimTime, ThreadKind, Trace};
use crate::runtime::{map_streams_to_hw_queues, native_submit_charge, EventMode, RuntimeConfig, SubmissionMode, TaskGraphBuffer};

/// Rank-local task index.
pub type TaskIdx = usize;

/// Divisible by every thread count up to 16, so shared progress stays exact.
const SHARE_SCALE: u64 = 720_720;

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceTask {
    pub label: String,
    pub kind: KernelKind,
    pub queue: usize,
    pub phases: KernelPhases,
    pub deps: Vec<TaskIdx>,
    pub step: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum HostOp {
    /// Host work on the main thread, or on the whole team when `parallel`.
    Cpu { work: SimDuration, parallel: bool },
    Submit(TaskIdx),
    /// Block until the task completes (flushing the task graph first).
    Sync(TaskIdx),
    Send {
        to: usize,
        tag: u64,
        bytes: u64,
        link: LinkClass,
        /// Return only once the transfer has completed.
        blocking: bool,
    },
    Recv { from: usize, tag: u64 },
    StepMark(u32),
}

/// CPU resources of a rank.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RankCpu {
    pub cores: u32,
    pub app_threads: u32,
    /// Cores a floating (unbound) thread may land on.
    pub node_cores: u32,
    /// How long idle application threads keep spinning after a step
    /// boundary before they sleep.
    pub spin_window: SimDuration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankProgram {
    pub ops: Vec<HostOp>,
    pub tasks: Vec<DeviceTask>,
    pub app_streams: usize,
    pub cpu: RankCpu,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MachineConfig {
    pub runtime: RuntimeConfig,
    pub api: ApiLatencyModel,
    pub comm: CommModel,
    pub seed: u64,
    pub device_sharing: bool,
    pub cpu_contention: bool,
    pub record_trace: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TaskTiming {
    pub submit: SimTime,
    pub arrive: SimTime,
    pub start: SimTime,
    pub end: SimTime,
    pub slot: u32,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RankStats {
    pub host_api_calls: u64,
    pub host_api_time: SimDuration,
    pub worker_api_calls: u64,
    pub worker_api_time: SimDuration,
    pub flushes: u64,
    pub sync_flushes: u64,
    pub syncs: u64,
    pub cpu_requested: SimDuration,
    pub host_busy: SimDuration,
    pub device_busy: SimDuration,
    pub step_marks: Vec<(u32, SimTime)>,
    pub finished: SimTime,
    pub serial_load: f64,
    pub parallel_load: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExecResult {
    pub timings: Vec<Vec<TaskTiming>>,
    pub ranks: Vec<RankStats>,
    pub trace: Option<Trace>,
    pub makespan: SimTime,
    pub events: u64,
    /// CPU work accounted by the processor-sharing pools.
    pub cpu_charged: SimDuration,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Ev {
    Host(usize),
    Arrive(usize, TaskIdx),
    LatencyDone(usize, TaskIdx),
    Finish(usize, TaskIdx),
    Tick(usize, u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Blocked {
    No,
    Sync(TaskIdx),
    Recv(u64, u64),
    Done,
}

struct CpuModel {
    serial: CpuPool,
    parallel: CpuPool,
    serial_load: f64,
    parallel_load: f64,
    worker_load: f64,
    desc: RankCpu,
    contention: bool,
    last_mark: Option<SimTime>,
}

const MAIN: u32 = 0;
const HSA: u32 = 1000;
const FLUSH: u32 = 1001;
const MONITOR: u32 = 1002;

fn build_pool(cpu: RankCpu, rt: &RuntimeConfig, active: u32, idle_duty: f64) -> Result<CpuPool, DesError> {
    let cores = cpu.cores.max(1);
    let mut pool = CpuPool::new();
    for t in 0..cpu.app_threads.max(1) {
        let duty = if t < active { 1.0 } else { idle_duty };
        pool.add(CpuThread::new(t, 0..cores, ThreadKind::Application, duty)?);
    }
    let hsa_cores = if rt.hsa_respects_affinity { 0..cores } else { 0..cpu.node_cores.max(cores) };
    pool.add(CpuThread::new(HSA, hsa_cores, ThreadKind::HsaWorker, rt.hsa_worker_duty)?);
    if rt.worker_threads() > 0 {
        pool.add(CpuThread::new(FLUSH, 0..cores, ThreadKind::DagFlushWorker, rt.flush_duty())?);
        pool.add(CpuThread::new(MONITOR, 0..cores, ThreadKind::DagMonitorWorker, rt.monitor_duty())?);
    }
    Ok(pool)
}

impl CpuModel {
    fn new(cpu: RankCpu, rt: &RuntimeConfig, contention: bool) -> Result<CpuModel, DesError> {
        let serial = build_pool(cpu, rt, 1, 0.0)?;
        let parallel = build_pool(cpu, rt, cpu.app_threads.max(1), 0.0)?;
        let mut m = CpuModel {
            serial,
            parallel,
            serial_load: 1.0,
            parallel_load: 1.0,
            worker_load: 1.0,
            desc: cpu,
            contention,
            last_mark: None,
        };
        if contention {
            m.serial_load = m.serial.load_factor(MAIN)?;
            m.parallel_load = m.parallel.load_factor(MAIN)?;
            if rt.worker_threads() > 0 {
                m.worker_load = m.serial.load_factor(FLUSH)?;
            }
        }
        Ok(m)
    }

    /// Re-derives the serial-phase stretch at a step boundary: idle
    /// application threads spin for part of the coming step, in proportion to
    /// how the spin window compares with the last step.
    fn step_boundary(&mut self, rt: &RuntimeConfig, now: SimTime) -> Result<(), DesError> {
        let last = self.last_mark.replace(now);
        if !self.contention || self.desc.spin_window == SimDuration::ZERO {
            return Ok(());
        }
        let Some(last) = last else { return Ok(()) };
        let step = now.saturating_since(last).as_ns().max(1) as f64;
        let spin = (self.desc.spin_window.as_ns() as f64 / step).min(1.0);
        let pool = build_pool(self.desc, rt, 1, spin)?;
        self.serial_load = pool.load_factor(MAIN)?;
        if rt.worker_threads() > 0 {
            self.worker_load = pool.load_factor(FLUSH)?;
        }
        Ok(())
    }

    /// Elapsed time of `work` started at `t` on the main thread or team.
    fn charge(&mut self, t: SimTime, work: SimDuration, parallel: bool) -> SimTime {
        let (pool, load) = if parallel {
            (&mut self.parallel, self.parallel_load)
        } else {
            (&mut self.serial, self.serial_load)
        };
        // Record the request with the pool; the stretch factor is fixed per rank.
        let _ = pool.charge_cpu(MAIN, work, t);
        t + work.scale(load)
    }

    fn charged(&self) -> SimDuration {
        self.serial.charged_work().values().copied().sum::<SimDuration>() + self.parallel.charged_work().values().copied().sum::<SimDuration>()
    }
}

struct Rank<'p> {
    prog: &'p RankProgram,
    pc: usize,
    host_t: SimTime,
    blocked: Blocked,
    buffer: Option<TaskGraphBuffer>,
    worker_free: SimTime,
    cpu: CpuModel,
    stream_slot: Vec<usize>,
    slots: Vec<VecDeque<TaskIdx>>,
    slot_busy: Vec<Option<TaskIdx>>,
    done: Vec<bool>,
    submitted: Vec<bool>,
    timing: Vec<TaskTiming>,
    working: Vec<(TaskIdx, u64)>,
    last_update: SimTime,
    gen: u64,
    running: usize,
    busy_since: SimTime,
    stats: RankStats,
    latency: Vec<SimDuration>,
    cross_deps: Vec<u32>,
}

struct Machine<'p> {
    cfg: &'p MachineConfig,
    sampler: ApiSampler,
    q: EventQueue<Ev>,
    ranks: Vec<Rank<'p>>,
    messages: BTreeMap<(usize, usize, u64), SimTime>,
    trace: Option<Trace>,
}

fn us(v: f64) -> SimDuration {
    SimDuration::from_us_f64(v)
}

impl<'p> Machine<'p> {
    fn post(&mut self, t: SimTime, actor: ActorId, ev: Ev) -> Result<(), DesError> {
        self.q.schedule(t, actor, ev).map(|_| ())
    }

    fn sampling_key(rank: usize, task: TaskIdx) -> u64 {
        ((rank as u64) << 40) | task as u64
    }

    fn sync_cost(&self, rank: usize, task: TaskIdx) -> SimDuration {
        self.sampler.sample_keyed(ApiKind::HostSyncPoll, Self::sampling_key(rank, task)) + us(self.cfg.runtime.sync_overhead_us)
    }

    fn run_host(&mut self, r: usize) -> Result<(), DesError> {
        let now = self.q.now();
        if self.ranks[r].host_t < now {
            self.ranks[r].host_t = now;
        }
        let prog: &'p RankProgram = self.ranks[r].prog;
        loop {
            let rank = &mut self.ranks[r];
            let Some(op) = prog.ops.get(rank.pc) else {
                self.finish_host(r)?;
                return Ok(());
            };
            match op {
                HostOp::Cpu { work, parallel } => {
                    let begin = rank.host_t;
                    rank.host_t = rank.cpu.charge(begin, *work, *parallel);
                    rank.stats.cpu_requested += *work;
                    rank.stats.host_busy += rank.host_t - begin;
                    if let Some(tr) = self.trace.as_mut() {
                        tr.push(format!("rank{r}/host"), if *parallel { "cpu-parallel" } else { "cpu" }, begin, rank.host_t);
                    }
                }
                HostOp::StepMark(s) => {
                    rank.stats.step_marks.push((*s, rank.host_t));
                    rank.cpu.step_boundary(&self.cfg.runtime, rank.host_t)?;
                }
                HostOp::Submit(i) => {
                    let i = *i;
                    self.submit(r, i)?;
                }
                HostOp::Sync(i) => {
                    let i = *i;
                    rank.stats.syncs += 1;
                    if rank.buffer.as_ref().is_some_and(|b| !b.is_empty()) {
                        rank.stats.sync_flushes += 1;
                        let t = rank.host_t;
                        self.flush(r, t)?;
                    }
                    let rank = &mut self.ranks[r];
                    if rank.done[i] {
                        let cost = self.sync_cost(r, i);
                        let rank = &mut self.ranks[r];
                        rank.host_t += cost;
                        rank.stats.host_busy += cost;
                    } else {
                        rank.blocked = Blocked::Sync(i);
                        rank.pc += 1;
                        return Ok(());
                    }
                }
                HostOp::Send {
                    to,
                    tag,
                    bytes,
                    link,
                    blocking,
                } => {
                    let (to, tag, bytes, link, blocking) = (*to, *tag, *bytes, *link, *blocking);
                    let begin = rank.host_t;
                    rank.host_t = rank.cpu.charge(begin, us(self.cfg.comm.mpi_call_us), false);
                    rank.stats.host_busy += rank.host_t - begin;
                    let transfer = self
                        .cfg
                        .comm
                        .transfer_time(bytes, link)
                        .map_err(|e| DesError::Deadlock { blocked: vec![e.to_string()] })?;
                    let arrival = rank.host_t + transfer;
                    if blocking {
                        rank.host_t = arrival;
                    }
                    self.deliver(r, to, tag, arrival)?;
                }
                HostOp::Recv { from, tag } => {
                    let key = (*from, r, *tag);
                    match self.messages.get(&key).copied() {
                        Some(arrival) => {
                            self.messages.remove(&key);
                            let rank = &mut self.ranks[r];
                            let begin = rank.host_t.max(arrival);
                            rank.host_t = rank.cpu.charge(begin, us(self.cfg.comm.mpi_call_us), false);
                        }
                        None => {
                            rank.blocked = Blocked::Recv(*from as u64, *tag);
                            rank.pc += 1;
                            return Ok(());
                        }
                    }
                }
            }
            self.ranks[r].pc += 1;
        }
    }

    fn finish_host(&mut self, r: usize) -> Result<(), DesError> {
        let t = self.ranks[r].host_t;
        if self.ranks[r].buffer.as_ref().is_some_and(|b| !b.is_empty()) {
            self.flush(r, t)?;
        }
        let rank = &mut self.ranks[r];
        rank.blocked = Blocked::Done;
        rank.stats.finished = rank.host_t;
        Ok(())
    }

    fn deliver(&mut self, from: usize, to: usize, tag: u64, arrival: SimTime) -> Result<(), DesError> {
        if to >= self.ranks.len() {
            return Err(DesError::Deadlock {
                blocked: vec![format!("rank{from}: send to missing rank {to}")],
            });
        }
        let waiting = self.ranks[to].blocked == Blocked::Recv(from as u64, tag);
        if waiting {
            let dest = &mut self.ranks[to];
            dest.blocked = Blocked::No;
            let begin = dest.host_t.max(arrival);
            dest.host_t = dest.cpu.charge(begin, us(self.cfg.comm.mpi_call_us), false);
            let t = dest.host_t;
            self.post(t, ActorId::CpuThread(to as u32), Ev::Host(to))?;
        } else {
            self.messages.insert((from, to, tag), arrival);
        }
        Ok(())
    }

    fn submit(&mut self, r: usize, i: TaskIdx) -> Result<(), DesError> {
        let cfg = self.cfg;
        let rank = &mut self.ranks[r];
        if i >= rank.prog.tasks.len() || rank.submitted[i] {
            return Err(DesError::Deadlock {
                blocked: vec![format!("rank{r}: invalid or repeated submission of task {i}")],
            });
        }
        rank.submitted[i] = true;
        rank.timing[i].submit = rank.host_t;
        match cfg.runtime.submission {
            SubmissionMode::Instant => {
                let key = Self::sampling_key(r, i);
                let charge = native_submit_charge(&cfg.runtime, &self.sampler, key, rank.cross_deps[i]);
                let launch = self.sampler.sample_keyed(ApiKind::KernelLaunch, key);
                let layer = us(cfg.runtime.instant_submit_us);
                let begin = rank.host_t;
                let arrive = rank.cpu.charge(begin, layer + launch, false) + us(cfg.runtime.dispatch_latency_us);
                rank.host_t = rank.cpu.charge(begin, layer + charge.latency, false);
                rank.stats.cpu_requested += layer + charge.latency;
                rank.stats.host_busy += rank.host_t - begin;
                rank.stats.host_api_calls += charge.calls as u64;
                rank.stats.host_api_time += charge.latency;
                self.post(arrive, ActorId::DeviceQueue(r as u32), Ev::Arrive(r, i))?;
            }
            SubmissionMode::Deferred { .. } => {
                let begin = rank.host_t;
                let cost = us(cfg.runtime.deferred_submit_us);
                rank.host_t = rank.cpu.charge(begin, cost, false);
                rank.stats.cpu_requested += cost;
                rank.stats.host_busy += rank.host_t - begin;
                let full = rank.buffer.as_mut().map(|b| b.push(i)).unwrap_or(true);
                if full {
                    let t = rank.host_t;
                    self.flush(r, t)?;
                }
            }
        }
        Ok(())
    }

    /// Hands the cached nodes to the flush worker, which issues their native
    /// calls one after the other.
    fn flush(&mut self, r: usize, t: SimTime) -> Result<(), DesError> {
        let cfg = self.cfg;
        let rank = &mut self.ranks[r];
        let Some(buffer) = rank.buffer.as_mut() else {
            return Ok(());
        };
        let nodes = buffer.take();
        if nodes.is_empty() {
            return Ok(());
        }
        rank.stats.flushes += 1;
        let load = rank.cpu.worker_load;
        let begin = if rank.worker_free < t { t + us(cfg.runtime.worker_wakeup_us) } else { rank.worker_free };
        let mut cur = begin + us(cfg.runtime.flush_bookkeeping_us).scale(load);
        let mut arrivals = Vec::with_capacity(nodes.len());
        for &i in &nodes {
            let key = Self::sampling_key(r, i);
            let launch = self.sampler.sample_keyed(ApiKind::KernelLaunch, key);
            let charge = native_submit_charge(&cfg.runtime, &self.sampler, key, rank.cross_deps[i]);
            let node = us(cfg.runtime.per_node_flush_us);
            arrivals.push((i, cur + (node + launch).scale(load) + us(cfg.runtime.dispatch_latency_us)));
            cur += (node + charge.latency).scale(load);
            rank.stats.worker_api_calls += charge.calls as u64;
            rank.stats.worker_api_time += charge.latency;
        }
        rank.worker_free = cur;
        if let Some(tr) = self.trace.as_mut() {
            tr.push(format!("rank{r}/flush"), "flush", begin, cur).args.insert("nodes".into(), json!(nodes.len()));
        }
        for (i, a) in arrivals {
            self.post(a, ActorId::DeviceQueue(r as u32), Ev::Arrive(r, i))?;
        }
        Ok(())
    }

    fn arrive(&mut self, r: usize, i: TaskIdx) -> Result<(), DesError> {
        let now = self.q.now();
        let rank = &mut self.ranks[r];
        rank.timing[i].arrive = now;
        let slot = rank.stream_slot[rank.prog.tasks[i].queue];
        rank.timing[i].slot = slot as u32;
        rank.slots[slot].push_back(i);
        self.try_start(r, slot)
    }

    fn try_start(&mut self, r: usize, slot: usize) -> Result<(), DesError> {
        let now = self.q.now();
        let rank = &mut self.ranks[r];
        if rank.slot_busy[slot].is_some() {
            return Ok(());
        }
        let Some(&i) = rank.slots[slot].front() else {
            return Ok(());
        };
        if !rank.prog.tasks[i].deps.iter().all(|&d| rank.done[d]) {
            return Ok(());
        }
        rank.slots[slot].pop_front();
        rank.slot_busy[slot] = Some(i);
        rank.timing[i].start = now;
        if rank.running == 0 {
            rank.busy_since = now;
        }
        rank.running += 1;
        let lat = rank.latency[i];
        if lat > SimDuration::ZERO {
            self.post(now + lat, ActorId::DeviceQueue(r as u32), Ev::LatencyDone(r, i))
        } else {
            self.enter_work(r, i)
        }
    }

    fn enter_work(&mut self, r: usize, i: TaskIdx) -> Result<(), DesError> {
        let now = self.q.now();
        let work = self.ranks[r].prog.tasks[i].phases.work;
        if work == SimDuration::ZERO {
            return self.complete(r, i);
        }
        if !self.cfg.device_sharing {
            return self.post(now + work, ActorId::DeviceQueue(r as u32), Ev::Finish(r, i));
        }
        self.advance(r);
        self.ranks[r].working.push((i, work.as_ns() * SHARE_SCALE));
        self.reschedule(r)
    }

    fn advance(&mut self, r: usize) {
        let now = self.q.now();
        let rank = &mut self.ranks[r];
        let k = rank.working.len() as u64;
        let elapsed = (now - rank.last_update).as_ns();
        if k > 0 && elapsed > 0 {
            let dec = (elapsed as u128 * SHARE_SCALE as u128 / k as u128) as u64;
            for w in rank.working.iter_mut() {
                w.1 = w.1.saturating_sub(dec);
            }
        }
        rank.last_update = now;
    }

    fn reschedule(&mut self, r: usize) -> Result<(), DesError> {
        let now = self.q.now();
        let rank = &mut self.ranks[r];
        rank.gen += 1;
        let k = rank.working.len() as u128;
        let Some(min) = rank.working.iter().map(|w| w.1).min() else {
            return Ok(());
        };
        let dt = (min as u128 * k).div_ceil(SHARE_SCALE as u128) as u64;
        let gen = rank.gen;
        self.post(now + SimDuration(dt), ActorId::DeviceQueue(r as u32), Ev::Tick(r, gen))
    }

    fn tick(&mut self, r: usize, gen: u64) -> Result<(), DesError> {
        if self.ranks[r].gen != gen {
            return Ok(());
        }
        self.advance(r);
        let rank = &mut self.ranks[r];
        let mut finished: Vec<TaskIdx> = rank.working.iter().filter(|w| w.1 == 0).map(|w| w.0).collect();
        finished.sort_unstable();
        rank.working.retain(|w| w.1 != 0);
        for i in finished {
            self.complete(r, i)?;
        }
        self.reschedule(r)
    }

    fn complete(&mut self, r: usize, i: TaskIdx) -> Result<(), DesError> {
        let now = self.q.now();
        let rank = &mut self.ranks[r];
        rank.done[i] = true;
        rank.timing[i].end = now;
        let slot = rank.timing[i].slot as usize;
        rank.slot_busy[slot] = None;
        rank.running -= 1;
        if rank.running == 0 {
            rank.stats.device_busy += now - rank.busy_since;
        }
        if let Some(tr) = self.trace.as_mut() {
            let t = &rank.prog.tasks[i];
            let rec = tr.push(format!("rank{r}/q{}", t.queue), t.label.clone(), rank.timing[i].start, now);
            rec.args.insert("kind".into(), json!(format!("{:?}", t.kind)));
            rec.args.insert("step".into(), json!(t.step));
            rec.args.insert("slot".into(), json!(slot));
            rec.args.insert("arrive_ns".into(), json!(rank.timing[i].arrive.as_ns()));
        }
        if rank.blocked == Blocked::Sync(i) {
            rank.blocked = Blocked::No;
            let cost = self.sync_cost(r, i);
            let rank = &mut self.ranks[r];
            let wait_from = rank.host_t;
            rank.host_t = rank.host_t.max(now) + cost;
            rank.stats.host_busy += cost;
            if let Some(tr) = self.trace.as_mut() {
                tr.push(format!("rank{r}/host"), "sync-wait", wait_from, now);
            }
            let t = self.ranks[r].host_t;
            self.post(t, ActorId::CpuThread(r as u32), Ev::Host(r))?;
        }
        for s in 0..self.ranks[r].slots.len() {
            self.try_start(r, s)?;
        }
        Ok(())
    }

    fn blocked_report(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (r, rank) in self.ranks.iter().enumerate() {
            match rank.blocked {
                Blocked::Sync(i) => out.push(format!("rank{r}: sync on {}", rank.prog.tasks[i].label)),
                Blocked::Recv(from, tag) => out.push(format!("rank{r}: recv from rank{from} tag {tag:#x}")),
                Blocked::No => out.push(format!("rank{r}: host at op {}", rank.pc)),
                Blocked::Done => {}
            }
            for (s, q) in rank.slots.iter().enumerate() {
                if let Some(&i) = q.front() {
                    out.push(format!("rank{r}/slot{s}: {} waiting on dependencies", rank.prog.tasks[i].label));
                }
            }
            let unsubmitted = rank.submitted.iter().filter(|s| !**s).count();
            if unsubmitted > 0 && rank.blocked == Blocked::Done {
                out.push(format!("rank{r}: {unsubmitted} task(s) never submitted"));
            }
        }
        out
    }
}

/// Runs the programs to completion.
pub fn execute(programs: &[RankProgram], cfg: &MachineConfig) -> Result<ExecResult, DesError> {
    if programs.is_empty() {
        return Err(DesError::NothingPosted);
    }
    let rt = &cfg.runtime;
    let mut ranks = Vec::with_capacity(programs.len());
    for prog in programs {
        let cpu = CpuModel::new(prog.cpu, rt, cfg.cpu_contention)?;
        let stream_slot = map_streams_to_hw_queues(prog.app_streams.max(1), rt);
        let nslots = rt.max_hw_queues.max(1) as usize;
        let barrier = if rt.event_mode == EventMode::Full && rt.backend == Backend::Sycl {
            us(rt.event_barrier_us)
        } else {
            SimDuration::ZERO
        };
        for t in &prog.tasks {
            if t.queue >= stream_slot.len() || t.deps.iter().any(|&d| d >= prog.tasks.len()) {
                return Err(DesError::Deadlock {
                    blocked: vec![format!("task {} has an invalid queue or dependency", t.label)],
                });
            }
        }
        let latency = prog.tasks.iter().map(|t| t.phases.latency + barrier).collect();
        let cross_deps = prog
            .tasks
            .iter()
            .map(|t| t.deps.iter().filter(|&&d| prog.tasks[d].queue != t.queue).count() as u32)
            .collect();
        let (serial_load, parallel_load) = (cpu.serial_load, cpu.parallel_load);
        ranks.push(Rank {
            prog,
            pc: 0,
            host_t: SimTime::ZERO,
            blocked: Blocked::No,
            buffer: rt.mcn().map(TaskGraphBuffer::new),
            worker_free: SimTime::ZERO,
            cpu,
            stream_slot,
            slots: vec![VecDeque::new(); nslots],
            slot_busy: vec![None; nslots],
            done: vec![false; prog.tasks.len()],
            submitted: vec![false; prog.tasks.len()],
            timing: vec![TaskTiming::default(); prog.tasks.len()],
            working: Vec::new(),
            last_update: SimTime::ZERO,
            gen: 0,
            running: 0,
            busy_since: SimTime::ZERO,
            stats: RankStats {
                serial_load,
                parallel_load,
                ..RankStats::default()
            },
            latency,
            cross_deps,
        });
    }
    let mut m = Machine {
        cfg,
        sampler: ApiSampler::new(cfg.api.clone(), cfg.seed),
        q: EventQueue::new(),
        ranks,
        messages: BTreeMap::new(),
        trace: cfg.record_trace.then(Trace::new),
    };
    for r in 0..programs.len() {
        m.post(SimTime::ZERO, ActorId::CpuThread(r as u32), Ev::Host(r))?;
    }
    while let Some(ev) = m.q.pop() {
        match ev.action {
            Ev::Host(r) => m.run_host(r)?,
            Ev::Arrive(r, i) => m.arrive(r, i)?,
            Ev::LatencyDone(r, i) => m.enter_work(r, i)?,
            Ev::Finish(r, i) => m.complete(r, i)?,
            Ev::Tick(r, g) => m.tick(r, g)?,
        }
    }
    let stuck = m.ranks.iter().any(|r| r.blocked != Blocked::Done || r.done.iter().any(|d| !d));
    if stuck {
        return Err(DesError::Deadlock { blocked: m.blocked_report() });
    }
    let makespan = m
        .ranks
        .iter()
        .flat_map(|r| r.timing.iter().map(|t| t.end).chain(std::iter::once(r.stats.finished)))
        .max()
        .unwrap_or(SimTime::ZERO);
    let cpu_charged = m.ranks.iter().map(|r| r.cpu.charged()).sum();
    let events = m.q.executed();
    Ok(ExecResult {
        timings: m.ranks.iter().map(|r| r.timing.clone()).collect(),
        ranks: m.ranks.into_iter().map(|r| r.stats).collect(),
        trace: m.trace,
        makespan,
        events,
        cpu_charged,
    })
}
