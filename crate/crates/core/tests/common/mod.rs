//! Helpers shared by the property suites and the acceptance run.
#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mdsim::bench::{Layout, Scenario};
use mdsim::config::{self, Bundle};
use mdsim::cost::{ApiLatencyModel, KernelKind, KernelPhases};
use mdsim::des::{SimDuration, SimTime};
use mdsim::exec::{execute, DeviceTask, ExecResult, HostOp, MachineConfig, RankCpu, RankProgram};
use mdsim::pipeline::{build_step_schedule, lower, rank_cpu, CodeVariant, Decomposition, RunOptions};
use mdsim::runtime::{EventMode, SubmissionMode};
use mdsim::topology::{Ccx, NodeTopology, Reorder};

pub fn bundle() -> &'static Bundle {
    config::bundled()
}

/// A random DAG of device tasks; dependencies only point backwards.
#[derive(Debug, Clone)]
pub struct RandomDag {
    pub durations_ns: Vec<u64>,
    pub queues: Vec<usize>,
    pub deps: Vec<Vec<usize>>,
    /// Host work before each submission, ns.
    pub gaps_ns: Vec<u64>,
    /// Sync on task `i` right after submitting it.
    pub sync_after: Vec<bool>,
    pub streams: usize,
}

impl RandomDag {
    pub fn generate(rng: &mut ChaCha8Rng, max_tasks: usize, queues: usize) -> RandomDag {
        let n = rng.random_range(1..=max_tasks);
        let mut dag = RandomDag {
            durations_ns: Vec::with_capacity(n),
            queues: Vec::with_capacity(n),
            deps: Vec::with_capacity(n),
            gaps_ns: Vec::with_capacity(n),
            sync_after: Vec::with_capacity(n),
            streams: queues,
        };
        for i in 0..n {
            dag.durations_ns.push(rng.random_range(0..50) * 1_000);
            dag.queues.push(rng.random_range(0..queues));
            let mut d = Vec::new();
            if i > 0 {
                for _ in 0..rng.random_range(0..3) {
                    let j = rng.random_range(0..i);
                    if !d.contains(&j) {
                        d.push(j);
                    }
                }
            }
            dag.deps.push(d);
            dag.gaps_ns.push(if rng.random_bool(0.3) { rng.random_range(0..20) * 1_000 } else { 0 });
            dag.sync_after.push(rng.random_bool(0.1));
        }
        dag
    }

    pub fn from_seed(seed: u64, max_tasks: usize, queues: usize) -> RandomDag {
        RandomDag::generate(&mut ChaCha8Rng::seed_from_u64(seed), max_tasks, queues)
    }

    pub fn len(&self) -> usize {
        self.durations_ns.len()
    }

    /// Submits everything in index order, optionally with host gaps and syncs.
    pub fn program(&self, with_host_work: bool) -> RankProgram {
        let tasks = (0..self.len())
            .map(|i| DeviceTask {
                label: format!("t{i}"),
                kind: KernelKind::NbnxmLocal,
                queue: self.queues[i],
                phases: KernelPhases {
                    latency: SimDuration::ZERO,
                    work: SimDuration::from_ns(self.durations_ns[i]),
                },
                deps: self.deps[i].clone(),
                step: 0,
            })
            .collect();
        let mut ops = Vec::new();
        for i in 0..self.len() {
            if with_host_work && self.gaps_ns[i] > 0 {
                ops.push(HostOp::Cpu {
                    work: SimDuration::from_ns(self.gaps_ns[i]),
                    parallel: false,
                });
            }
            ops.push(HostOp::Submit(i));
            if with_host_work && self.sync_after[i] {
                ops.push(HostOp::Sync(i));
            }
        }
        RankProgram {
            ops,
            tasks,
            app_streams: self.streams,
            cpu: RankCpu {
                cores: 7,
                app_threads: 7,
                node_cores: 56,
                spin_window: SimDuration::ZERO,
            },
        }
    }

    /// Longest weighted path by exhaustive path enumeration. Edges are the
    /// dependencies plus the FIFO order of tasks sharing a hardware slot.
    pub fn brute_force_longest_path(&self, slot_of_queue: &[usize]) -> u64 {
        let n = self.len();
        let mut preds: Vec<Vec<usize>> = self.deps.clone();
        let mut last_in_slot: BTreeMap<usize, usize> = BTreeMap::new();
        for i in 0..n {
            let s = slot_of_queue[self.queues[i]];
            if let Some(&p) = last_in_slot.get(&s) {
                if !preds[i].contains(&p) {
                    preds[i].push(p);
                }
            }
            last_in_slot.insert(s, i);
        }
        fn walk(i: usize, preds: &[Vec<usize>], w: &[u64]) -> u64 {
            // Every path ending at i, no memoization.
            let mut best = 0;
            for &p in &preds[i] {
                best = best.max(walk(p, preds, w));
            }
            best + w[i]
        }
        (0..n).map(|i| walk(i, &preds, &self.durations_ns)).max().unwrap_or(0)
    }
}

/// Zero-overhead machine for a bundled profile, no contention or sharing.
pub fn bare_machine(profile: &str) -> MachineConfig {
    let b = bundle();
    MachineConfig {
        runtime: b.runtime.get(profile).unwrap().zero_overhead(),
        api: ApiLatencyModel::zero(),
        comm: b.cal.comm.free(),
        seed: 7,
        device_sharing: false,
        cpu_contention: false,
        record_trace: false,
    }
}

/// Tasks on one application queue must start in submission order and never
/// overlap.
pub fn check_in_order(prog: &RankProgram, res_timings: &[mdsim::exec::TaskTiming]) -> Result<(), String> {
    let mut order: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for op in &prog.ops {
        if let HostOp::Submit(i) = op {
            order.entry(prog.tasks[*i].queue).or_default().push(*i);
        }
    }
    for (q, idx) in order {
        for w in idx.windows(2) {
            let (a, b) = (&res_timings[w[0]], &res_timings[w[1]]);
            if b.start < a.end {
                return Err(format!("queue {q}: {} starts at {:?} before {} ends at {:?}", prog.tasks[w[1]].label, b.start, prog.tasks[w[0]].label, a.end));
            }
        }
    }
    Ok(())
}

/// Per hardware slot, the labels in device start order.
pub fn slot_order(prog: &RankProgram, res: &ExecResult, rank: usize) -> BTreeMap<u32, Vec<String>> {
    let mut by: BTreeMap<u32, Vec<(SimTime, usize)>> = BTreeMap::new();
    for (i, t) in res.timings[rank].iter().enumerate() {
        by.entry(t.slot).or_default().push((t.start, i));
    }
    by.into_iter()
        .map(|(s, mut v)| {
            v.sort();
            (s, v.into_iter().map(|(_, i)| format!("{}@{}", prog.tasks[i].label, prog.tasks[i].step)).collect())
        })
        .collect()
}

pub const PROFILES: [&str; 4] = ["0.9.4", "23.10", "23.10-instant", "hip-native"];
pub const SMALL_PRESETS: [&str; 5] = ["grappa-pme-1500", "grappa-pme-3k", "grappa-pme-6k", "rnase-dodec", "grappa-pme-24k"];

/// A small random scenario; short enough to run hundreds of times.
pub fn random_scenario(seed: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let preset = SMALL_PRESETS[rng.random_range(0..SMALL_PRESETS.len())];
    let profile = PROFILES[rng.random_range(0..PROFILES.len())];
    let layout = Layout::Gcds(rng.random_range(1..=4));
    let mut s = Scenario::new(preset, layout, profile);
    if profile == "0.9.4" || profile == "23.10" {
        s.mcn = Some([0, 3, 5, 20, 100][rng.random_range(0..5)]);
    }
    if rng.random_bool(0.3) {
        s.event_mode = Some(EventMode::Full);
    }
    if rng.random_bool(0.5) {
        s.topology = "dardel".into();
    }
    s.n_steps = Some(rng.random_range(101..=130));
    s.seed = rng.random();
    s
}

/// Lowers a scenario to rank programs plus the machine it runs on.
pub fn lowered(s: &Scenario, submission: Option<SubmissionMode>) -> (Vec<RankProgram>, MachineConfig) {
    let b = bundle();
    let sys = b.preset(&s.preset).unwrap();
    let mut cfg = s.runtime(b).unwrap();
    if let Some(m) = submission {
        cfg.submission = m;
    }
    let dec = match s.layout {
        Layout::Gcds(n) => Decomposition::single_node(&sys, n),
        Layout::Nodes(n) => Decomposition::multi_node(&sys, n),
    }
    .unwrap();
    let sched = build_step_schedule(&sys, &dec, CodeVariant::of(&cfg)).unwrap();
    let opts = RunOptions {
        n_steps: s.n_steps.unwrap_or(120),
        seed: s.seed,
        app_threads: s.app_threads,
        ..RunOptions::default()
    };
    let topo = s.node_topology().unwrap();
    let cpu = RankCpu {
        spin_window: SimDuration::from_us_f64(b.cal.host.spin_window_us),
        ..rank_cpu(&topo, &opts)
    };
    let low = lower(&sched, &b.cal, cpu, opts.n_steps).unwrap();
    let mcfg = MachineConfig {
        runtime: cfg,
        api: b.cal.api.clone(),
        comm: b.cal.comm.clone(),
        seed: s.seed,
        device_sharing: true,
        cpu_contention: true,
        record_trace: false,
    };
    (low.programs, mcfg)
}

pub fn run_programs(progs: &[RankProgram], cfg: &MachineConfig) -> ExecResult {
    execute(progs, cfg).unwrap()
}

/// A random node where CCXs and GCDs pair up one to one.
pub fn random_bijective_topology(rng: &mut ChaCha8Rng) -> NodeTopology {
    use rand::seq::SliceRandom;
    let n = rng.random_range(1..=8u32);
    let cores_per = rng.random_range(2..=8u32);
    let smt = rng.random_bool(0.5);
    let mut ccx_ids: Vec<u32> = (0..n).map(|i| i * 3 + rng.random_range(0..3)).collect();
    ccx_ids.shuffle(rng);
    let mut pool: Vec<u32> = (0..16).collect();
    pool.shuffle(rng);
    let gcd_list: Vec<u32> = pool[..n as usize].to_vec();
    let mut affinity = gcd_list.clone();
    affinity.shuffle(rng);
    let nics = rng.random_range(1..=n);
    let max_gcd = *gcd_list.iter().max().unwrap() as usize;
    let gcd_nic = (0..=max_gcd).map(|_| rng.random_range(0..nics)).collect();
    let gcd_module = (0..=max_gcd as u32).map(|g| g / 2).collect();
    NodeTopology {
        name: format!("random-{n}x{cores_per}"),
        ccx_list: ccx_ids
            .iter()
            .enumerate()
            .map(|(i, &id)| Ccx {
                id,
                cores: (i as u32 * cores_per..(i as u32 + 1) * cores_per).collect(),
                smt,
            })
            .collect(),
        gcd_list,
        nic_list: (0..nics).collect(),
        ccx_gcd_affinity: affinity,
        gcd_nic,
        gcd_module,
        reserved_core_per_ccx: rng.random_bool(0.5),
        smt_sibling_offset: n * cores_per,
        reorder: if rng.random_bool(0.5) { Reorder::RankToCcx } else { Reorder::GpuIds },
    }
}
