//! MD step schedules and their simulation.
//!
//! A [`StepSchedule`] holds, per simulated rank, three step templates
//! (search, prune and plain steps) written as ordered [`StepItem`]s. Lowering
//! unrolls them into host programs for [`crate::exec`], resolving task labels
//! within the step and against the previous step.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::comm::{dd_grid, halo_exchange, halo_last_label, CommError, HaloNeighbors, HaloPhase, HaloSpec, LinkClass};
use crate::config::Calibration;
use crate::cost::{Backend, CostError, KernelKind};
use crate::des::{DesError, SimDuration, SimTime, Trace};
use crate::exec::{execute, DeviceTask, HostOp, MachineConfig, RankCpu, RankProgram, TaskIdx};
use crate::runtime::{PmeCommPattern, RuntimeConfig};
use crate::topology::NodeTopology;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("inconsistent decomposition: {0}")]
    Decomposition(String),
    #[error("invalid system: {0}")]
    System(String),
    #[error("ms per step must be positive, got {0}")]
    NonPositive(f64),
    #[error("need at least {need} steps, got {got}")]
    TooFewSteps { need: u32, got: u32 },
    #[error("schedule references unknown task '{0}'")]
    UnknownLabel(String),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Comm(#[from] CommError),
    #[error(transparent)]
    Des(#[from] DesError),
}

/// Application stream ids.
pub mod queues {
    pub const LOCAL: usize = 0;
    pub const NONLOCAL: usize = 1;
    pub const PME: usize = 2;
    pub const UPDATE: usize = 3;
    pub const COUNT: usize = 4;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Electrostatics {
    Pme,
    Rf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    pub name: String,
    pub atoms: u64,
    pub electrostatics: Electrostatics,
    #[serde(default = "default_dt")]
    pub dt_fs: f64,
    #[serde(default = "default_nstlist")]
    pub nstlist: u32,
    #[serde(default = "default_prune")]
    pub prune_interval: u32,
    #[serde(default = "one")]
    pub grid_points_per_atom: f64,
    #[serde(default = "default_density")]
    pub density: f64,
    #[serde(default = "default_cutoff")]
    pub cutoff_nm: f64,
    /// Per-atom non-bonded cost relative to the calibration system.
    #[serde(default = "one")]
    pub nb_cost_scale: f64,
    /// Extra SYCL non-bonded factor for this input.
    #[serde(default = "one")]
    pub sycl_nb_factor: f64,
    /// Per-atom PME cost relative to the calibration system.
    #[serde(default = "one")]
    pub pme_cost_scale: f64,
    #[serde(default)]
    pub provenance: String,
}

fn default_dt() -> f64 {
    2.0
}
fn default_nstlist() -> u32 {
    100
}
fn default_prune() -> u32 {
    10
}
fn one() -> f64 {
    1.0
}
fn default_density() -> f64 {
    100.0
}
fn default_cutoff() -> f64 {
    1.2
}

impl SystemSpec {
    pub fn new(name: &str, atoms: u64, electrostatics: Electrostatics) -> SystemSpec {
        SystemSpec {
            name: name.into(),
            atoms,
            electrostatics,
            dt_fs: default_dt(),
            nstlist: default_nstlist(),
            prune_interval: default_prune(),
            grid_points_per_atom: 1.0,
            density: default_density(),
            cutoff_nm: default_cutoff(),
            nb_cost_scale: 1.0,
            sycl_nb_factor: 1.0,
            pme_cost_scale: 1.0,
            provenance: String::new(),
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::System(format!("{}: {m}", self.name)));
        if self.atoms < 1 {
            return bad("needs at least one atom");
        }
        if !(self.dt_fs > 0.0) {
            return bad("time step must be positive");
        }
        if self.nstlist == 0 || self.prune_interval == 0 || !self.nstlist.is_multiple_of(self.prune_interval) {
            return bad("prune interval must divide nstlist");
        }
        if !(self.density > 0.0) || !(self.cutoff_nm > 0.0) || !(self.nb_cost_scale > 0.0) || !(self.sycl_nb_factor > 0.0) || !(self.pme_cost_scale > 0.0) {
            return bad("density, cutoff and cost scales must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub pp_ranks: usize,
    pub pme_ranks: usize,
    pub atoms_per_pp_rank: u64,
    pub grid: [usize; 3],
    /// Pulses per decomposed dimension.
    pub pulses: Vec<u32>,
    pub gcds_per_node: usize,
    pub dim_links: [LinkClass; 3],
    pub pme_link: LinkClass,
}

impl Decomposition {
    pub fn new(sys: &SystemSpec, pp_ranks: usize, pme_ranks: usize, gcds_per_node: usize) -> Result<Decomposition, PipelineError> {
        sys.validate()?;
        if pp_ranks < 1 {
            return Err(PipelineError::Decomposition("at least one PP rank is required".into()));
        }
        if pme_ranks > 1 {
            return Err(PipelineError::Decomposition("at most one PME rank is supported".into()));
        }
        if pme_ranks == 1 && sys.electrostatics == Electrostatics::Rf {
            return Err(PipelineError::Decomposition("reaction-field systems have no PME rank".into()));
        }
        let grid = dd_grid(pp_ranks)?;
        let halo = HaloSpec::geometric(grid, sys.atoms, sys.density, sys.cutoff_nm);
        let gpn = gcds_per_node.max(1);
        let block = node_block(grid, gpn);
        // A partly filled node has no fixed block layout.
        let single_node = pp_ranks + pme_ranks <= gpn && block.iter().product::<usize>() != gpn;
        let mut dim_links = [LinkClass::IntraNode; 3];
        for d in 0..3 {
            dim_links[d] = if single_node {
                if d == 0 && grid[0] == 2 && pp_ranks == 2 {
                    LinkClass::IntraGcdPair
                } else {
                    LinkClass::IntraNode
                }
            } else if grid[d] > block[d] {
                LinkClass::InterNode
            } else if d == 0 && block[0] == 2 {
                LinkClass::IntraGcdPair
            } else {
                LinkClass::IntraNode
            };
        }
        Ok(Decomposition {
            pp_ranks,
            pme_ranks,
            atoms_per_pp_rank: sys.atoms.div_ceil(pp_ranks as u64),
            grid,
            pulses: halo.pulses_per_dim,
            gcds_per_node: gpn,
            dim_links,
            pme_link: LinkClass::IntraNode,
        })
    }

    /// `gcds` devices of one node: PME systems dedicate one of them to PME
    /// once there are at least two.
    pub fn single_node(sys: &SystemSpec, gcds: usize) -> Result<Decomposition, PipelineError> {
        let pme = usize::from(sys.electrostatics == Electrostatics::Pme && gcds >= 2);
        Decomposition::new(sys, gcds.saturating_sub(pme).max(1), pme, 8)
    }

    /// One PP rank per GCD over `nodes` nodes of eight GCDs.
    pub fn multi_node(sys: &SystemSpec, nodes: usize) -> Result<Decomposition, PipelineError> {
        if sys.electrostatics == Electrostatics::Pme && nodes > 1 {
            return Err(PipelineError::Decomposition("multi-node runs need PME decomposition, which is not modelled".into()));
        }
        Decomposition::new(sys, 8 * nodes.max(1), 0, 8)
    }

    /// Grid actually simulated: at most two ranks per decomposed dimension
    /// once the run exceeds eight PP ranks.
    pub fn simulated_grid(&self) -> [usize; 3] {
        if self.pp_ranks <= 8 {
            return self.grid;
        }
        self.grid.map(|n| n.min(2))
    }

    pub fn halo(&self, sys: &SystemSpec) -> HaloSpec {
        HaloSpec::geometric(self.grid, sys.atoms, sys.density, sys.cutoff_nm)
    }
}

/// Extent of one node's block of ranks in the grid, filled up with factors
/// of two dimension by dimension.
fn node_block(grid: [usize; 3], gcds_per_node: usize) -> [usize; 3] {
    let mut b = [1usize; 3];
    let mut left = gcds_per_node;
    for _ in 0..3 {
        for d in 0..3 {
            if left > 1 && left.is_multiple_of(2) && grid[d].is_multiple_of(b[d] * 2) {
                b[d] *= 2;
                left /= 2;
            }
        }
    }
    b
}

/// What the code base does differently: kernel backend and PME messaging.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodeVariant {
    pub backend: Backend,
    pub pme_comm: PmeCommPattern,
}

impl CodeVariant {
    pub fn of(cfg: &RuntimeConfig) -> CodeVariant {
        CodeVariant {
            backend: cfg.backend,
            pme_comm: cfg.pme_comm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum DepRef {
    /// Earlier task of the same step.
    Item(String),
    /// Task of the previous step; absent on the first step.
    Prev(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskTemplate {
    pub label: String,
    pub kind: KernelKind,
    /// Size driver: atoms, or grid points for FFT and solve.
    pub size: u64,
    pub queue: usize,
    pub deps: Vec<DepRef>,
    /// Present only in code built for this backend.
    pub only: Option<Backend>,
}

impl TaskTemplate {
    pub fn new(label: &str, kind: KernelKind, size: u64, queue: usize, deps: Vec<DepRef>) -> TaskTemplate {
        TaskTemplate {
            label: label.into(),
            kind,
            size,
            queue,
            deps,
            only: None,
        }
    }

    fn only(mut self, backend: Backend) -> TaskTemplate {
        self.only = Some(backend);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CpuWork {
    StepOverhead,
    /// Pair search and repartitioning over the rank's atoms.
    Search { atoms: u64 },
    Fixed { us: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum StepItem {
    Task(TaskTemplate),
    Sync(String),
    SyncPrev(String),
    Cpu(CpuWork),
    Send {
        to: usize,
        tag: u32,
        bytes: u64,
        link: LinkClass,
        blocking: bool,
    },
    Recv {
        from: usize,
        tag: u32,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RankRole {
    Pp,
    Pme,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankSchedule {
    pub role: RankRole,
    pub atoms: u64,
    pub search: Vec<StepItem>,
    pub prune: Vec<StepItem>,
    pub plain: Vec<StepItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub system: SystemSpec,
    pub decomposition: Decomposition,
    pub variant: CodeVariant,
    pub ranks: Vec<RankSchedule>,
}

/// Label of the task closing each step on PP ranks.
pub const STEP_END: &str = "constraints";

#[derive(Clone, Copy, PartialEq, Eq)]
enum StepKind {
    Search,
    Prune,
    Plain,
}

const TAG_X_TO_PME: u32 = 0x10;
const TAG_F_FROM_PME: u32 = 0x11;
const TAG_CTS: u32 = 0x12;

fn item(l: &str) -> DepRef {
    DepRef::Item(l.into())
}

fn prev(l: &str) -> DepRef {
    DepRef::Prev(l.into())
}

fn push_task(items: &mut Vec<StepItem>, t: TaskTemplate) {
    items.push(StepItem::Task(t));
}

/// Force tasks shared by every PP flavour: pair search or prune on cadence,
/// local non-bonded work and listed forces.
fn local_force_items(items: &mut Vec<StepItem>, kind: StepKind, atoms: u64, nonlocal: Option<u64>) {
    let mut nb_deps = vec![prev(STEP_END)];
    if kind == StepKind::Search {
        push_task(items, TaskTemplate::new("search", KernelKind::PairSearch, atoms, queues::LOCAL, vec![prev(STEP_END)]));
        push_task(items, TaskTemplate::new("sort", KernelKind::PairListSort, atoms, queues::LOCAL, vec![item("search")]).only(Backend::Hip));
        nb_deps = vec![item("search"), item("sort")];
        if let Some(n) = nonlocal {
            push_task(items, TaskTemplate::new("search_nl", KernelKind::PairSearch, n, queues::NONLOCAL, vec![prev(STEP_END)]));
        }
    }
    push_task(items, TaskTemplate::new("nb_local", KernelKind::NbnxmLocal, atoms, queues::LOCAL, nb_deps));
    if kind == StepKind::Prune {
        push_task(items, TaskTemplate::new("prune", KernelKind::PruneOnly, atoms, queues::LOCAL, vec![item("nb_local")]));
        push_task(items, TaskTemplate::new("prune_sort", KernelKind::PairListSort, atoms, queues::LOCAL, vec![item("prune")]).only(Backend::Hip));
    }
}

fn pme_items(items: &mut Vec<StepItem>, sys: &SystemSpec, atoms: u64, coords_dep: Vec<DepRef>) {
    let grid = (atoms as f64 * sys.grid_points_per_atom).round() as u64;
    push_task(items, TaskTemplate::new("grid_clear", KernelKind::GridMemset, grid, queues::PME, vec![prev("pme_gather")]).only(Backend::Sycl));
    let mut spread_deps = coords_dep;
    spread_deps.push(item("grid_clear"));
    push_task(items, TaskTemplate::new("pme_spread", KernelKind::PmeSpread, atoms, queues::PME, spread_deps));
    push_task(items, TaskTemplate::new("fft_fwd", KernelKind::Fft3dForward, grid, queues::PME, vec![item("pme_spread")]));
    push_task(items, TaskTemplate::new("pme_solve", KernelKind::PmeSolve, grid, queues::PME, vec![item("fft_fwd")]));
    push_task(items, TaskTemplate::new("fft_inv", KernelKind::Fft3dInverse, grid, queues::PME, vec![item("pme_solve")]));
    push_task(items, TaskTemplate::new("pme_gather", KernelKind::PmeGather, atoms, queues::PME, vec![item("fft_inv")]));
}

fn update_items(items: &mut Vec<StepItem>, atoms: u64, mut reduce_deps: Vec<DepRef>) {
    reduce_deps.push(item("listed"));
    push_task(items, TaskTemplate::new("reduce", KernelKind::ReduceForces, atoms, queues::UPDATE, reduce_deps));
    push_task(items, TaskTemplate::new("leapfrog", KernelKind::LeapFrog, atoms, queues::UPDATE, vec![item("reduce")]));
    push_task(items, TaskTemplate::new(STEP_END, KernelKind::Constraints, atoms, queues::UPDATE, vec![item("leapfrog")]));
}

fn single_rank_step(sys: &SystemSpec, kind: StepKind) -> Vec<StepItem> {
    let atoms = sys.atoms;
    let mut items = vec![StepItem::Cpu(CpuWork::StepOverhead)];
    if kind == StepKind::Search {
        items.push(StepItem::SyncPrev(STEP_END.into()));
        items.push(StepItem::Cpu(CpuWork::Search { atoms }));
    }
    local_force_items(&mut items, kind, atoms, None);
    let mut reduce_deps = vec![item("nb_local")];
    if sys.electrostatics == Electrostatics::Pme {
        pme_items(&mut items, sys, atoms, vec![prev(STEP_END)]);
        reduce_deps.push(item("pme_gather"));
    }
    push_task(&mut items, TaskTemplate::new("listed", KernelKind::ListedForces, atoms, queues::LOCAL, vec![item("nb_local")]));
    update_items(&mut items, atoms, reduce_deps);
    items
}

struct PpContext<'a> {
    sys: &'a SystemSpec,
    dec: &'a Decomposition,
    variant: CodeVariant,
    halo: HaloSpec,
    neighbors: Vec<HaloNeighbors>,
    pme_rank: Option<usize>,
}

fn pp_step(ctx: &PpContext, kind: StepKind) -> Vec<StepItem> {
    let atoms = ctx.dec.atoms_per_pp_rank;
    let decomposed = !ctx.neighbors.is_empty();
    let halo_atoms = ctx.halo.total_halo_atoms(atoms);
    let mut items = vec![StepItem::Cpu(CpuWork::StepOverhead)];
    if kind == StepKind::Search {
        items.push(StepItem::SyncPrev(STEP_END.into()));
        items.push(StepItem::Cpu(CpuWork::Search { atoms: atoms + halo_atoms }));
    }
    if let Some(pme) = ctx.pme_rank {
        if matches!(ctx.variant.pme_comm, PmeCommPattern::PerRankSerialized { .. }) {
            items.push(StepItem::Recv { from: pme, tag: TAG_CTS });
        }
        items.push(StepItem::SyncPrev(STEP_END.into()));
        items.push(StepItem::Send {
            to: pme,
            tag: TAG_X_TO_PME,
            bytes: atoms * ctx.halo.bytes_per_atom_coords,
            link: ctx.dec.pme_link,
            blocking: false,
        });
    }
    local_force_items(&mut items, kind, atoms, decomposed.then_some(halo_atoms));
    let mut reduce_deps = vec![item("nb_local")];
    if decomposed {
        let mut x_in = vec![prev(STEP_END)];
        if kind == StepKind::Search {
            x_in.push(item("search_nl"));
        }
        items.extend(halo_exchange(HaloPhase::Coords, &ctx.halo, &ctx.neighbors, atoms, &x_in));
        let last_x = halo_last_label(HaloPhase::Coords, &ctx.halo).expect("decomposed");
        push_task(&mut items, TaskTemplate::new("nb_nonlocal", KernelKind::NbnxmNonLocal, halo_atoms, queues::NONLOCAL, vec![item(&last_x)]));
        if kind == StepKind::Prune {
            push_task(&mut items, TaskTemplate::new("prune_nl", KernelKind::PruneOnly, halo_atoms, queues::NONLOCAL, vec![item("nb_nonlocal")]));
        }
    }
    push_task(&mut items, TaskTemplate::new("listed", KernelKind::ListedForces, atoms, queues::LOCAL, vec![item("nb_local")]));
    if decomposed {
        items.extend(halo_exchange(HaloPhase::Forces, &ctx.halo, &ctx.neighbors, atoms, &[item("nb_nonlocal")]));
        reduce_deps.push(item(&halo_last_label(HaloPhase::Forces, &ctx.halo).expect("decomposed")));
    }
    if let Some(pme) = ctx.pme_rank {
        items.push(StepItem::Recv { from: pme, tag: TAG_F_FROM_PME });
    } else if ctx.sys.electrostatics == Electrostatics::Pme {
        pme_items(&mut items, ctx.sys, atoms, vec![prev(STEP_END)]);
        reduce_deps.push(item("pme_gather"));
    }
    update_items(&mut items, atoms, reduce_deps);
    items
}

fn pme_rank_step(sys: &SystemSpec, dec: &Decomposition, variant: CodeVariant, pp: &[usize]) -> Vec<StepItem> {
    let mut items = vec![StepItem::Cpu(CpuWork::StepOverhead)];
    let coords_bytes = dec.atoms_per_pp_rank * 12;
    let serialized = match variant.pme_comm {
        PmeCommPattern::PerRankSerialized { per_message_us } => Some(per_message_us),
        PmeCommPattern::Aggregated => None,
    };
    for &r in pp {
        if let Some(m) = serialized {
            items.push(StepItem::Send {
                to: r,
                tag: TAG_CTS,
                bytes: 0,
                link: dec.pme_link,
                blocking: false,
            });
            items.push(StepItem::Recv { from: r, tag: TAG_X_TO_PME });
            items.push(StepItem::Cpu(CpuWork::Fixed { us: m }));
        } else {
            items.push(StepItem::Recv { from: r, tag: TAG_X_TO_PME });
        }
    }
    pme_items(&mut items, sys, sys.atoms, vec![]);
    items.push(StepItem::Sync("pme_gather".into()));
    for &r in pp {
        if let Some(m) = serialized {
            items.push(StepItem::Cpu(CpuWork::Fixed { us: m }));
        }
        items.push(StepItem::Send {
            to: r,
            tag: TAG_F_FROM_PME,
            bytes: coords_bytes,
            link: dec.pme_link,
            blocking: serialized.is_some(),
        });
    }
    items
}

/// Builds the step templates of every simulated rank.
pub fn build_step_schedule(sys: &SystemSpec, dec: &Decomposition, variant: CodeVariant) -> Result<StepSchedule, PipelineError> {
    sys.validate()?;
    if dec.pme_ranks > 0 && sys.electrostatics == Electrostatics::Rf {
        return Err(PipelineError::Decomposition("reaction-field systems have no PME rank".into()));
    }
    if dec.pme_ranks > 1 || dec.pp_ranks < 1 {
        return Err(PipelineError::Decomposition("need at least one PP rank and at most one PME rank".into()));
    }
    let kinds = [StepKind::Search, StepKind::Prune, StepKind::Plain];
    let mut ranks = Vec::new();
    if dec.pp_ranks == 1 && dec.pme_ranks == 0 {
        let [search, prune, plain] = kinds.map(|k| single_rank_step(sys, k));
        ranks.push(RankSchedule {
            role: RankRole::Pp,
            atoms: sys.atoms,
            search,
            prune,
            plain,
        });
    } else {
        let sim = dec.simulated_grid();
        let n_pp = sim.iter().product::<usize>();
        let halo = dec.halo(sys);
        let pme_rank = (dec.pme_ranks == 1).then_some(n_pp);
        let decomposed_dims: Vec<usize> = (0..3).filter(|&d| dec.grid[d] >= 2).collect();
        for r in 0..n_pp {
            let c = [r % sim[0], (r / sim[0]) % sim[1], r / (sim[0] * sim[1])];
            let neighbors = decomposed_dims
                .iter()
                .map(|&d| {
                    let at = |v: usize| {
                        let mut cc = c;
                        cc[d] = v;
                        cc[0] + sim[0] * (cc[1] + sim[1] * cc[2])
                    };
                    HaloNeighbors {
                        send_to: at((c[d] + sim[d] - 1) % sim[d]),
                        recv_from: at((c[d] + 1) % sim[d]),
                        link: dec.dim_links[d],
                    }
                })
                .collect();
            let ctx = PpContext {
                sys,
                dec,
                variant,
                halo: halo.clone(),
                neighbors,
                pme_rank,
            };
            let [search, prune, plain] = kinds.map(|k| pp_step(&ctx, k));
            ranks.push(RankSchedule {
                role: RankRole::Pp,
                atoms: dec.atoms_per_pp_rank,
                search,
                prune,
                plain,
            });
        }
        if pme_rank.is_some() {
            let pp: Vec<usize> = (0..n_pp).collect();
            let t = pme_rank_step(sys, dec, variant, &pp);
            ranks.push(RankSchedule {
                role: RankRole::Pme,
                atoms: sys.atoms,
                search: t.clone(),
                prune: t.clone(),
                plain: t,
            });
        }
    }
    Ok(StepSchedule {
        system: sys.clone(),
        decomposition: dec.clone(),
        variant,
        ranks,
    })
}

impl StepSchedule {
    pub fn template(&self, rank: usize, step: u32) -> &[StepItem] {
        let r = &self.ranks[rank];
        match step_kind(&self.system, step) {
            StepKind::Search => &r.search,
            StepKind::Prune => &r.prune,
            StepKind::Plain => &r.plain,
        }
    }

    /// Host syncs a rank performs on a plain step.
    pub fn syncs_per_plain_step(&self, rank: usize) -> usize {
        self.ranks[rank]
            .plain
            .iter()
            .filter(|i| matches!(i, StepItem::Sync(_) | StepItem::SyncPrev(_)))
            .count()
    }

    /// GPU tasks a rank submits on a plain step, for the given backend.
    pub fn tasks_per_plain_step(&self, rank: usize) -> usize {
        self.ranks[rank]
            .plain
            .iter()
            .filter(|i| matches!(i, StepItem::Task(t) if t.only.is_none_or(|b| b == self.variant.backend)))
            .count()
    }

    pub fn kinds(&self) -> Vec<KernelKind> {
        let mut out: Vec<KernelKind> = self
            .ranks
            .iter()
            .flat_map(|r| r.search.iter().chain(&r.prune).chain(&r.plain))
            .filter_map(|i| match i {
                StepItem::Task(t) => Some(t.kind),
                _ => None,
            })
            .collect();
        out.sort();
        out.dedup();
        out
    }
}

fn step_kind(sys: &SystemSpec, step: u32) -> StepKind {
    if step.is_multiple_of(sys.nstlist) {
        StepKind::Search
    } else if step.is_multiple_of(sys.prune_interval) {
        StepKind::Prune
    } else {
        StepKind::Plain
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub n_steps: u32,
    pub seed: u64,
    /// Application threads per rank; defaults to the rank's usable cores.
    pub app_threads: Option<u32>,
    /// Hardware threads per rank; defaults to one CCX of the topology.
    pub cores: Option<u32>,
    pub device_sharing: bool,
    pub cpu_contention: bool,
    pub record_trace: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            n_steps: 200,
            seed: 42,
            app_threads: None,
            cores: None,
            device_sharing: true,
            cpu_contention: true,
            record_trace: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub ms_per_step: f64,
    pub ns_per_day: f64,
    /// Busy fraction per actor over the whole run.
    pub utilization: BTreeMap<String, f64>,
    /// Completion time of each step, max over PP ranks.
    pub step_ends: Vec<SimTime>,
    pub flushes: u64,
    pub syncs: u64,
    pub host_api_calls: u64,
    pub host_api_time: SimDuration,
    pub worker_api_calls: u64,
    pub makespan: SimTime,
    pub events: u64,
    pub trace: Option<Trace>,
    /// Device-side begin order per rank and queue, as task labels with step.
    pub device_order: Vec<BTreeMap<usize, Vec<(u32, String)>>>,
    /// Submission-to-arrival delay per rank and task.
    pub launch_delays: Vec<Vec<SimDuration>>,
    pub cpu_requested: SimDuration,
    pub cpu_charged: SimDuration,
}

/// Unrolled programs plus the index of each step's closing task per rank.
pub struct Lowered {
    pub programs: Vec<RankProgram>,
    pub step_end: Vec<Vec<Option<TaskIdx>>>,
}

/// Unrolls `n_steps` steps into host programs.
pub fn lower(sched: &StepSchedule, cal: &Calibration, cpu: RankCpu, n_steps: u32) -> Result<Lowered, PipelineError> {
    let sys = &sched.system;
    let backend = sched.variant.backend;
    let host = &cal.host;
    let mut programs = Vec::new();
    let mut step_end = Vec::new();
    for r in 0..sched.ranks.len() {
        let mut ops = Vec::new();
        let mut tasks: Vec<DeviceTask> = Vec::new();
        let mut ends = Vec::with_capacity(n_steps as usize);
        let mut prev_map: BTreeMap<String, Vec<TaskIdx>> = BTreeMap::new();
        for s in 0..n_steps {
            let mut cur: BTreeMap<String, Vec<TaskIdx>> = BTreeMap::new();
            ops.push(HostOp::StepMark(s));
            for it in sched.template(r, s) {
                match it {
                    StepItem::Task(t) => {
                        let mut deps = Vec::new();
                        for d in &t.deps {
                            match d {
                                DepRef::Item(l) => deps.extend(cur.get(l).ok_or_else(|| PipelineError::UnknownLabel(l.clone()))?),
                                DepRef::Prev(l) => deps.extend(prev_map.get(l).into_iter().flatten()),
                            }
                        }
                        deps.sort_unstable();
                        deps.dedup();
                        if t.only.is_some_and(|b| b != backend) {
                            // Dependents of an absent task wait on its inputs instead.
                            cur.insert(t.label.clone(), deps);
                            continue;
                        }
                        let scale = match t.kind {
                            k if k.is_nonbonded() || k == KernelKind::PairListSort => sys.nb_cost_scale,
                            KernelKind::PmeSpread | KernelKind::PmeGather | KernelKind::PmeSolve | KernelKind::Fft3dForward | KernelKind::Fft3dInverse => sys.pme_cost_scale,
                            _ => 1.0,
                        };
                        let mut phases = cal.kernels.kernel_phases(t.kind, t.size, backend, scale)?;
                        if backend == Backend::Sycl && t.kind.is_nonbonded() && sys.sycl_nb_factor != 1.0 {
                            phases.latency = phases.latency.scale(sys.sycl_nb_factor);
                            phases.work = phases.work.scale(sys.sycl_nb_factor);
                        }
                        let idx = tasks.len();
                        tasks.push(DeviceTask {
                            label: t.label.clone(),
                            kind: t.kind,
                            queue: t.queue,
                            phases,
                            deps,
                            step: s,
                        });
                        if host.per_task_us > 0.0 {
                            ops.push(HostOp::Cpu {
                                work: SimDuration::from_us_f64(host.per_task_us),
                                parallel: false,
                            });
                        }
                        ops.push(HostOp::Submit(idx));
                        cur.insert(t.label.clone(), vec![idx]);
                    }
                    StepItem::Sync(l) => {
                        for &i in cur.get(l).ok_or_else(|| PipelineError::UnknownLabel(l.clone()))? {
                            ops.push(HostOp::Sync(i));
                        }
                    }
                    StepItem::SyncPrev(l) => {
                        for &i in prev_map.get(l).into_iter().flatten() {
                            ops.push(HostOp::Sync(i));
                        }
                    }
                    StepItem::Cpu(w) => {
                        let (us, parallel) = match w {
                            CpuWork::StepOverhead => (host.step_overhead_us, false),
                            CpuWork::Search { atoms } => (host.search_us_per_atom * *atoms as f64 / cpu.app_threads.max(1) as f64, true),
                            CpuWork::Fixed { us } => (*us, false),
                        };
                        if us > 0.0 {
                            ops.push(HostOp::Cpu {
                                work: SimDuration::from_us_f64(us),
                                parallel,
                            });
                        }
                    }
                    StepItem::Send {
                        to,
                        tag,
                        bytes,
                        link,
                        blocking,
                    } => ops.push(HostOp::Send {
                        to: *to,
                        tag: ((s as u64) << 16) | *tag as u64,
                        bytes: *bytes,
                        link: *link,
                        blocking: *blocking,
                    }),
                    StepItem::Recv { from, tag } => ops.push(HostOp::Recv {
                        from: *from,
                        tag: ((s as u64) << 16) | *tag as u64,
                    }),
                }
            }
            ends.push(cur.get(STEP_END).and_then(|v| v.first().copied()));
            prev_map = cur;
        }
        programs.push(RankProgram {
            ops,
            tasks,
            app_streams: queues::COUNT,
            cpu,
        });
        step_end.push(ends);
    }
    Ok(Lowered { programs, step_end })
}

/// ns/day from ms/step and the time step in fs.
pub fn throughput(ms_per_step: f64, dt_fs: f64) -> Result<f64, PipelineError> {
    if !(ms_per_step > 0.0) {
        return Err(PipelineError::NonPositive(ms_per_step));
    }
    Ok(86.4 * dt_fs / ms_per_step)
}

/// Rank CPU resources from the topology: one CCX worth of hardware threads.
pub fn rank_cpu(topo: &NodeTopology, opts: &RunOptions) -> RankCpu {
    let ccx = topo.ccx_list.first().map(|c| c.id).unwrap_or(0);
    let per_ccx = topo.usable_hw_threads(ccx).map(|v| v.len() as u32).unwrap_or(1).max(1);
    let node: u32 = topo
        .ccx_list
        .iter()
        .map(|c| topo.usable_hw_threads(c.id).map(|v| v.len() as u32).unwrap_or(0))
        .sum();
    let cores = opts.cores.unwrap_or(per_ccx).max(1);
    RankCpu {
        cores,
        app_threads: opts.app_threads.unwrap_or(topo.usable_cores(ccx).map(|v| v.len() as u32).unwrap_or(1)).max(1),
        node_cores: node.max(cores),
        spin_window: SimDuration::ZERO,
    }
}

/// Simulates `opts.n_steps` steps and measures the steady state after the
/// first pair-search cycle.
pub fn simulate_run(sched: &StepSchedule, cfg: &RuntimeConfig, topo: &NodeTopology, cal: &Calibration, opts: &RunOptions) -> Result<RunResult, PipelineError> {
    let sys = &sched.system;
    let warm = sys.nstlist;
    if opts.n_steps <= warm {
        return Err(PipelineError::TooFewSteps {
            need: warm + 1,
            got: opts.n_steps,
        });
    }
    let cpu = RankCpu {
        spin_window: SimDuration::from_us_f64(cal.host.spin_window_us),
        ..rank_cpu(topo, opts)
    };
    let lowered = lower(sched, cal, cpu, opts.n_steps)?;
    let mcfg = MachineConfig {
        runtime: cfg.clone(),
        api: cal.api.clone(),
        comm: cal.comm.clone(),
        seed: opts.seed,
        device_sharing: opts.device_sharing,
        cpu_contention: opts.cpu_contention,
        record_trace: opts.record_trace,
    };
    let res = execute(&lowered.programs, &mcfg)?;
    let mut step_ends = vec![SimTime::ZERO; opts.n_steps as usize];
    for (r, rs) in sched.ranks.iter().enumerate() {
        if rs.role != RankRole::Pp {
            continue;
        }
        for (s, idx) in lowered.step_end[r].iter().enumerate() {
            if let Some(i) = idx {
                step_ends[s] = step_ends[s].max(res.timings[r][*i].end);
            }
        }
    }
    let n = opts.n_steps as usize;
    let w = warm as usize;
    let span = step_ends[n - 1] - step_ends[w - 1];
    let ms_per_step = span.as_ns() as f64 / 1e6 / (n - w) as f64;
    let ns_per_day = throughput(ms_per_step, sys.dt_fs)?;
    let total = res.makespan.as_ns().max(1) as f64;
    let mut utilization = BTreeMap::new();
    for (r, st) in res.ranks.iter().enumerate() {
        utilization.insert(format!("rank{r}/device"), st.device_busy.as_ns() as f64 / total);
        utilization.insert(format!("rank{r}/host"), st.host_busy.as_ns() as f64 / total);
    }
    let mut device_order = Vec::new();
    let mut launch_delays = Vec::new();
    for (r, prog) in lowered.programs.iter().enumerate() {
        let mut by_queue: BTreeMap<usize, Vec<(SimTime, usize)>> = BTreeMap::new();
        for (i, t) in prog.tasks.iter().enumerate() {
            by_queue.entry(t.queue).or_default().push((res.timings[r][i].start, i));
        }
        let order = by_queue
            .into_iter()
            .map(|(q, mut v)| {
                v.sort();
                (q, v.into_iter().map(|(_, i)| (prog.tasks[i].step, prog.tasks[i].label.clone())).collect())
            })
            .collect();
        device_order.push(order);
        launch_delays.push(res.timings[r].iter().map(|t| t.arrive - t.submit).collect());
    }
    Ok(RunResult {
        ms_per_step,
        ns_per_day,
        utilization,
        step_ends,
        flushes: res.ranks.iter().map(|s| s.flushes).sum(),
        syncs: res.ranks.iter().map(|s| s.syncs).sum(),
        host_api_calls: res.ranks.iter().map(|s| s.host_api_calls).sum(),
        host_api_time: res.ranks.iter().map(|s| s.host_api_time).sum(),
        worker_api_calls: res.ranks.iter().map(|s| s.worker_api_calls).sum(),
        makespan: res.makespan,
        events: res.events,
        trace: res.trace,
        device_order,
        launch_delays,
        cpu_requested: res.ranks.iter().map(|s| s.cpu_requested).sum(),
        cpu_charged: res.cpu_charged,
    })
}
