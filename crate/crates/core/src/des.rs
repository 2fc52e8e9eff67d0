//! Deterministic discrete-event engine.
//!
//! The clock is an integer count of nanoseconds. Events are totally ordered
//! by `(fire_time, actor, seq)`, where `seq` is a per-queue insertion
//! counter, so two runs with identical inputs pop identical sequences.
//!
//! Besides the event queue this module holds the trace format shared by all
//! simulations, the processor-sharing CPU model, and a small task-graph
//! executor for in-order device queues.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};
use std::fmt;
use std::io::Write;
use std::ops::{Add, AddAssign, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A point on the simulated wall clock, in nanoseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct SimTime(pub u64);

/// A non-negative span of simulated time, in nanoseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct SimDuration(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub fn as_ns(self) -> u64 {
        self.0
    }

    pub fn saturating_since(self, earlier: SimTime) -> SimDuration {
        SimDuration(self.0.saturating_sub(earlier.0))
    }
}

impl SimDuration {
    pub const ZERO: SimDuration = SimDuration(0);

    pub fn from_ns(ns: u64) -> Self {
        SimDuration(ns)
    }

    /// Converts microseconds to nanoseconds, rounding half up.
    /// Negative and non-finite inputs clamp to zero.
    pub fn from_us_f64(us: f64) -> Self {
        Self::from_ns_f64(us * 1e3)
    }

    pub fn from_ns_f64(ns: f64) -> Self {
        if !ns.is_finite() || ns <= 0.0 {
            return SimDuration(0);
        }
        SimDuration((ns + 0.5).floor() as u64)
    }

    pub fn as_ns(self) -> u64 {
        self.0
    }

    pub fn as_us_f64(self) -> f64 {
        self.0 as f64 / 1e3
    }

    /// Scales by a real factor, rounding half up.
    pub fn scale(self, factor: f64) -> SimDuration {
        SimDuration::from_ns_f64(self.0 as f64 * factor)
    }
}

impl Add<SimDuration> for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimDuration) -> SimTime {
        SimTime(self.0 + rhs.0)
    }
}

impl AddAssign<SimDuration> for SimTime {
    fn add_assign(&mut self, rhs: SimDuration) {
        self.0 += rhs.0;
    }
}

impl Add for SimDuration {
    type Output = SimDuration;
    fn add(self, rhs: SimDuration) -> SimDuration {
        SimDuration(self.0 + rhs.0)
    }
}

impl AddAssign for SimDuration {
    fn add_assign(&mut self, rhs: SimDuration) {
        self.0 += rhs.0;
    }
}

impl Sub for SimTime {
    type Output = SimDuration;
    fn sub(self, rhs: SimTime) -> SimDuration {
        SimDuration(self.0 - rhs.0)
    }
}

impl std::iter::Sum for SimDuration {
    fn sum<I: Iterator<Item = SimDuration>>(iter: I) -> Self {
        SimDuration(iter.map(|d| d.0).sum())
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}ns", self.0)
    }
}

impl fmt::Display for SimDuration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}ns", self.0)
    }
}

/// Who an event belongs to. The derived order is part of the event order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ActorId {
    CpuThread(u32),
    DeviceQueue(u32),
    NicLink(u32),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DesError {
    #[error("causality violation: event at {fire_time} posted while clock is at {now}")]
    Causality { fire_time: SimTime, now: SimTime },
    #[error("deadlock: no pending events but {} actor(s) still blocked: {}", blocked.len(), blocked.join(", "))]
    Deadlock { blocked: Vec<String> },
    #[error("thread {0} is bound to no cores")]
    EmptyBinding(u32),
    #[error("duty cycle {0} outside [0, 1]")]
    BadDuty(f64),
    #[error("unknown thread {0}")]
    UnknownThread(u32),
    #[error("nothing to run: no events were posted")]
    NothingPosted,
}

/// A scheduled event. `seq` is assigned by the queue on `post`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimEvent<A> {
    pub fire_time: SimTime,
    pub actor: ActorId,
    pub action: A,
    pub seq: u64,
}

impl<A> SimEvent<A> {
    pub fn new(fire_time: SimTime, actor: ActorId, action: A) -> Self {
        SimEvent {
            fire_time,
            actor,
            action,
            seq: 0,
        }
    }
}

type EventKey = (SimTime, ActorId, u64);

/// Priority queue of events plus the simulation clock.
#[derive(Debug)]
pub struct EventQueue<A> {
    heap: BinaryHeap<Reverse<EventKey>>,
    actions: BTreeMap<u64, A>,
    now: SimTime,
    next_seq: u64,
    popped: u64,
}

impl<A> Default for EventQueue<A> {
    fn default() -> Self {
        Self::new()
    }
}

impl<A> EventQueue<A> {
    pub fn new() -> Self {
        EventQueue {
            heap: BinaryHeap::new(),
            actions: BTreeMap::new(),
            now: SimTime::ZERO,
            next_seq: 0,
            popped: 0,
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    /// Number of events popped so far.
    pub fn executed(&self) -> u64 {
        self.popped
    }

    /// Inserts an event, returning the sequence number it was assigned.
    pub fn post(&mut self, event: SimEvent<A>) -> Result<u64, DesError> {
        if event.fire_time < self.now {
            return Err(DesError::Causality {
                fire_time: event.fire_time,
                now: self.now,
            });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Reverse((event.fire_time, event.actor, seq)));
        self.actions.insert(seq, event.action);
        Ok(seq)
    }

    pub fn schedule(&mut self, fire_time: SimTime, actor: ActorId, action: A) -> Result<u64, DesError> {
        self.post(SimEvent::new(fire_time, actor, action))
    }

    /// Removes the smallest event and advances the clock to its fire time.
    pub fn pop(&mut self) -> Option<SimEvent<A>> {
        let Reverse((fire_time, actor, seq)) = self.heap.pop()?;
        let action = self.actions.remove(&seq).expect("event payload present");
        self.now = fire_time;
        self.popped += 1;
        Some(SimEvent {
            fire_time,
            actor,
            action,
            seq,
        })
    }

    pub fn peek_time(&self) -> Option<SimTime> {
        self.heap.peek().map(|Reverse((t, _, _))| *t)
    }
}

/// One executed action on one actor timeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub actor: String,
    pub name: String,
    pub begin_ns: u64,
    pub end_ns: u64,
    pub args: BTreeMap<String, serde_json::Value>,
}

/// Ordered list of trace records. Serializes as a plain JSON array.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
}

impl Trace {
    pub fn new() -> Self {
        Trace::default()
    }

    pub fn push(&mut self, actor: impl Into<String>, name: impl Into<String>, begin: SimTime, end: SimTime) -> &mut TraceRecord {
        self.records.push(TraceRecord {
            actor: actor.into(),
            name: name.into(),
            begin_ns: begin.0,
            end_ns: end.0,
            args: BTreeMap::new(),
        });
        self.records.last_mut().expect("just pushed")
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Latest end time over all records.
    pub fn makespan(&self) -> SimDuration {
        SimDuration(self.records.iter().map(|r| r.end_ns).max().unwrap_or(0))
    }

    pub fn for_actor<'a>(&'a self, actor: &'a str) -> impl Iterator<Item = &'a TraceRecord> + 'a {
        self.records.iter().filter(move |r| r.actor == actor)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.records).expect("trace records serialize")
    }

    pub fn write_json<W: Write>(&self, out: W) -> serde_json::Result<()> {
        serde_json::to_writer_pretty(out, &self.records)
    }

    pub fn from_json(text: &str) -> serde_json::Result<Trace> {
        Ok(Trace {
            records: serde_json::from_str(text)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThreadKind {
    Application,
    HsaWorker,
    DagFlushWorker,
    DagMonitorWorker,
}

/// A simulated CPU thread bound to a set of cores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpuThread {
    pub id: u32,
    pub bound_cores: BTreeSet<u32>,
    pub kind: ThreadKind,
    /// Fraction of a core the thread consumes on average.
    pub duty_cycle: f64,
}

impl CpuThread {
    pub fn new(id: u32, cores: impl IntoIterator<Item = u32>, kind: ThreadKind, duty_cycle: f64) -> Result<Self, DesError> {
        let bound_cores: BTreeSet<u32> = cores.into_iter().collect();
        if bound_cores.is_empty() {
            return Err(DesError::EmptyBinding(id));
        }
        if !(0.0..=1.0).contains(&duty_cycle) {
            return Err(DesError::BadDuty(duty_cycle));
        }
        Ok(CpuThread {
            id,
            bound_cores,
            kind,
            duty_cycle,
        })
    }
}

/// Fluid processor-sharing model over a set of threads.
///
/// A thread's duty is spread evenly over its bound cores. The load seen by a
/// thread is the summed duty landing on its cores divided by its core count;
/// work charged to it is stretched by `max(1, load)`.
#[derive(Debug, Clone, Default)]
pub struct CpuPool {
    threads: Vec<CpuThread>,
    requested: BTreeMap<u32, SimDuration>,
}

impl CpuPool {
    pub fn new() -> Self {
        CpuPool::default()
    }

    pub fn add(&mut self, thread: CpuThread) -> u32 {
        let id = thread.id;
        self.threads.retain(|t| t.id != id);
        self.threads.push(thread);
        id
    }

    pub fn thread(&self, id: u32) -> Option<&CpuThread> {
        self.threads.iter().find(|t| t.id == id)
    }

    pub fn threads(&self) -> &[CpuThread] {
        &self.threads
    }

    pub fn set_duty(&mut self, id: u32, duty: f64) -> Result<(), DesError> {
        if !(0.0..=1.0).contains(&duty) {
            return Err(DesError::BadDuty(duty));
        }
        let t = self
            .threads
            .iter_mut()
            .find(|t| t.id == id)
            .ok_or(DesError::UnknownThread(id))?;
        t.duty_cycle = duty;
        Ok(())
    }

    pub fn load_factor(&self, id: u32) -> Result<f64, DesError> {
        let me = self.thread(id).ok_or(DesError::UnknownThread(id))?;
        let mut load = 0.0;
        for other in &self.threads {
            let shared = other.bound_cores.intersection(&me.bound_cores).count();
            if shared == 0 {
                continue;
            }
            load += other.duty_cycle * shared as f64 / other.bound_cores.len() as f64;
        }
        Ok((load / me.bound_cores.len() as f64).max(1.0))
    }

    /// Charges `work` to a thread starting at `now` and returns the
    /// completion time under the current load.
    pub fn charge_cpu(&mut self, id: u32, work: SimDuration, now: SimTime) -> Result<SimTime, DesError> {
        let factor = self.load_factor(id)?;
        *self.requested.entry(id).or_default() += work;
        Ok(now + work.scale(factor))
    }

    /// Total work requested so far, per thread.
    pub fn charged_work(&self) -> &BTreeMap<u32, SimDuration> {
        &self.requested
    }
}

/// A task for [`TaskGraph`]: runs on one in-order queue after its dependencies.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphTask {
    pub name: String,
    pub queue: usize,
    pub duration: SimDuration,
    pub deps: Vec<usize>,
}

/// Tasks on in-order device queues with cross-queue dependencies.
///
/// Tasks sharing a queue start in insertion order; tasks on distinct queues
/// overlap freely.
#[derive(Debug, Clone, Default)]
pub struct TaskGraph {
    tasks: Vec<GraphTask>,
}

#[derive(Debug, Clone, Copy)]
enum GraphAction {
    Finish(usize),
}

impl TaskGraph {
    pub fn new() -> Self {
        TaskGraph::default()
    }

    pub fn add(&mut self, name: impl Into<String>, queue: usize, duration: SimDuration, deps: &[usize]) -> usize {
        self.tasks.push(GraphTask {
            name: name.into(),
            queue,
            duration,
            deps: deps.to_vec(),
        });
        self.tasks.len() - 1
    }

    pub fn tasks(&self) -> &[GraphTask] {
        &self.tasks
    }

    /// Executes every task and returns the trace, or the blocked task set
    /// when some tasks can never start.
    pub fn run_until_idle(&self) -> Result<Trace, DesError> {
        if self.tasks.is_empty() {
            return Err(DesError::NothingPosted);
        }
        let n_queues = self.tasks.iter().map(|t| t.queue + 1).max().unwrap_or(0);
        let mut pending: Vec<VecDeque<usize>> = vec![VecDeque::new(); n_queues];
        for (i, t) in self.tasks.iter().enumerate() {
            pending[t.queue].push_back(i);
        }
        let mut done = vec![false; self.tasks.len()];
        let mut busy = vec![false; n_queues];
        let mut queue: EventQueue<GraphAction> = EventQueue::new();
        let mut trace = Trace::new();
        let mut begin = vec![SimTime::ZERO; self.tasks.len()];

        let start_ready = |queue: &mut EventQueue<GraphAction>,
                           pending: &mut Vec<VecDeque<usize>>,
                           busy: &mut Vec<bool>,
                           done: &Vec<bool>,
                           begin: &mut Vec<SimTime>|
         -> Result<(), DesError> {
            for q in 0..pending.len() {
                if busy[q] {
                    continue;
                }
                let Some(&head) = pending[q].front() else { continue };
                if self.tasks[head].deps.iter().all(|&d| d < done.len() && done[d]) {
                    pending[q].pop_front();
                    busy[q] = true;
                    let now = queue.now();
                    begin[head] = now;
                    queue.schedule(now + self.tasks[head].duration, ActorId::DeviceQueue(q as u32), GraphAction::Finish(head))?;
                }
            }
            Ok(())
        };

        start_ready(&mut queue, &mut pending, &mut busy, &done, &mut begin)?;
        while let Some(ev) = queue.pop() {
            let GraphAction::Finish(i) = ev.action;
            done[i] = true;
            busy[self.tasks[i].queue] = false;
            let rec = trace.push(format!("queue{}", self.tasks[i].queue), self.tasks[i].name.clone(), begin[i], ev.fire_time);
            rec.args.insert("task".into(), serde_json::json!(i));
            start_ready(&mut queue, &mut pending, &mut busy, &done, &mut begin)?;
        }

        let blocked: Vec<String> = self
            .tasks
            .iter()
            .enumerate()
            .filter(|(i, _)| !done[*i])
            .map(|(_, t)| t.name.clone())
            .collect();
        if !blocked.is_empty() {
            return Err(DesError::Deadlock { blocked });
        }
        Ok(trace)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pop_order_is_time_then_sequence() {
        let mut q = EventQueue::new();
        let a = ActorId::CpuThread(0);
        q.schedule(SimTime(5), a, "b").unwrap();
        q.schedule(SimTime(0), a, "a").unwrap();
        q.schedule(SimTime(5), a, "c").unwrap();
        let order: Vec<_> = std::iter::from_fn(|| q.pop()).map(|e| (e.fire_time.0, e.action)).collect();
        assert_eq!(order, vec![(0, "a"), (5, "b"), (5, "c")]);
    }

    #[test]
    fn posting_into_the_past_is_rejected() {
        let mut q = EventQueue::new();
        q.schedule(SimTime(10), ActorId::CpuThread(0), ()).unwrap();
        q.pop();
        let err = q.schedule(SimTime(9), ActorId::CpuThread(0), ()).unwrap_err();
        assert!(matches!(err, DesError::Causality { .. }));
    }

    fn random_pop_sequence(seed: u64, n: usize) -> Vec<(u64, ActorId, u64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut q = EventQueue::new();
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let t = q.now().0 + rng.random_range(0..1000);
            let actor = match rng.random_range(0..3) {
                0 => ActorId::CpuThread(rng.random_range(0..4)),
                1 => ActorId::DeviceQueue(rng.random_range(0..4)),
                _ => ActorId::NicLink(rng.random_range(0..4)),
            };
            q.schedule(SimTime(t), actor, ()).unwrap();
            if rng.random_bool(0.5) {
                if let Some(e) = q.pop() {
                    out.push((e.fire_time.0, e.actor, e.seq));
                }
            }
        }
        while let Some(e) = q.pop() {
            out.push((e.fire_time.0, e.actor, e.seq));
        }
        out
    }

    #[test]
    fn million_random_events_replay_identically() {
        let a = random_pop_sequence(42, 1_000_000);
        let b = random_pop_sequence(42, 1_000_000);
        assert_eq!(a.len(), 1_000_000);
        assert!(a == b);
        assert!(a.windows(2).all(|w| w[0].0 <= w[1].0));
    }

    #[test]
    fn serial_chain_sums() {
        let mut g = TaskGraph::new();
        let a = g.add("a", 0, SimDuration(10), &[]);
        let b = g.add("b", 0, SimDuration(10), &[a]);
        g.add("c", 0, SimDuration(10), &[b]);
        assert_eq!(g.run_until_idle().unwrap().makespan(), SimDuration(30));
    }

    #[test]
    fn independent_queues_overlap() {
        let mut g = TaskGraph::new();
        g.add("a", 0, SimDuration(10), &[]);
        g.add("b", 1, SimDuration(10), &[]);
        assert_eq!(g.run_until_idle().unwrap().makespan(), SimDuration(10));
    }

    #[test]
    fn dependency_cycle_reports_blocked_set() {
        let mut g = TaskGraph::new();
        g.add("A", 0, SimDuration(10), &[1]);
        g.add("B", 1, SimDuration(10), &[0]);
        match g.run_until_idle() {
            Err(DesError::Deadlock { blocked }) => assert_eq!(blocked, vec!["A".to_string(), "B".to_string()]),
            other => panic!("expected deadlock, got {other:?}"),
        }
    }

    #[test]
    fn cpu_alone_is_uncontended() {
        let mut pool = CpuPool::new();
        pool.add(CpuThread::new(0, [0], ThreadKind::Application, 1.0).unwrap());
        assert_eq!(pool.charge_cpu(0, SimDuration(100), SimTime::ZERO).unwrap(), SimTime(100));
    }

    #[test]
    fn two_threads_share_one_core() {
        let mut pool = CpuPool::new();
        pool.add(CpuThread::new(0, [0], ThreadKind::Application, 1.0).unwrap());
        pool.add(CpuThread::new(1, [0], ThreadKind::Application, 1.0).unwrap());
        assert_eq!(pool.charge_cpu(0, SimDuration(100), SimTime::ZERO).unwrap(), SimTime(200));
        assert_eq!(pool.charge_cpu(1, SimDuration(100), SimTime::ZERO).unwrap(), SimTime(200));
    }

    #[test]
    fn hsa_worker_stretches_application_work() {
        let mut pool = CpuPool::new();
        pool.add(CpuThread::new(0, [0], ThreadKind::Application, 1.0).unwrap());
        pool.add(CpuThread::new(1, [0], ThreadKind::HsaWorker, 0.8).unwrap());
        assert_eq!(pool.charge_cpu(0, SimDuration(100), SimTime::ZERO).unwrap(), SimTime(180));
    }

    #[test]
    fn thread_construction_validates() {
        assert!(matches!(
            CpuThread::new(3, Vec::<u32>::new(), ThreadKind::Application, 1.0),
            Err(DesError::EmptyBinding(3))
        ));
        assert!(CpuThread::new(3, [0], ThreadKind::Application, 1.5).is_err());
    }

    #[test]
    fn rounding_is_half_up() {
        assert_eq!(SimDuration::from_us_f64(0.0005), SimDuration(1));
        assert_eq!(SimDuration::from_us_f64(0.0004), SimDuration(0));
        assert_eq!(SimDuration::from_us_f64(19.2), SimDuration(19_200));
        assert_eq!(SimDuration::from_us_f64(-3.0), SimDuration(0));
    }

    #[test]
    fn trace_json_uses_listed_field_names() {
        let mut t = Trace::new();
        t.push("gpu0", "nbnxm", SimTime(1), SimTime(4)).args.insert("step".into(), serde_json::json!(3));
        let v: serde_json::Value = serde_json::from_str(&t.to_json()).unwrap();
        let rec = &v.as_array().unwrap()[0];
        let mut keys: Vec<_> = rec.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(keys, vec!["actor", "args", "begin_ns", "end_ns", "name"]);
        assert_eq!(Trace::from_json(&t.to_json()).unwrap(), t);
    }
}
