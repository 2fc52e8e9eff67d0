//! Scenario sweeps, CSV reports and comparison against reference data.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{Bundle, ConfigError};
use crate::pipeline::{build_step_schedule, simulate_run, CodeVariant, Decomposition, PipelineError, RunOptions, RunResult};
use crate::runtime::{EventMode, RuntimeConfig, RuntimeError};
use crate::topology::{build_ex235a, NodeTopology, Profile};

pub const CSV_SCHEMA: &str = "# mdsim-sweep v1";

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("scenario {id}: {source}")]
    Runtime { id: String, source: RuntimeError },
    #[error("scenario {id}: {source}")]
    Simulation { id: String, source: PipelineError },
    #[error("csv: {0}")]
    Csv(String),
    #[error("unknown topology '{0}'")]
    Topology(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    /// GCDs of a single node.
    Gcds(usize),
    /// Full nodes, eight GCDs each.
    Nodes(usize),
}

impl std::fmt::Display for Layout {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Layout::Gcds(n) => write!(f, "{n}gcd"),
            Layout::Nodes(n) => write!(f, "{n}node"),
        }
    }
}

fn default_reps() -> u32 {
    1
}

fn default_seed() -> u64 {
    42
}

fn default_topology() -> String {
    "lumi".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub preset: String,
    pub layout: Layout,
    pub profile: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mcn: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event_mode: Option<EventMode>,
    /// Overrides keyed by runtime environment variable.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub env: BTreeMap<String, String>,
    #[serde(default = "default_topology")]
    pub topology: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_steps: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub app_threads: Option<u32>,
    #[serde(default = "default_reps")]
    pub reps: u32,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Seed increment between repetitions; 0 repeats the same seed.
    #[serde(default)]
    pub seed_stride: u64,
}

impl Scenario {
    pub fn new(preset: &str, layout: Layout, profile: &str) -> Scenario {
        Scenario {
            preset: preset.into(),
            layout,
            profile: profile.into(),
            mcn: None,
            event_mode: None,
            env: BTreeMap::new(),
            topology: default_topology(),
            n_steps: None,
            app_threads: None,
            reps: 1,
            seed: default_seed(),
            seed_stride: 0,
        }
    }

    pub fn with_mcn(mut self, mcn: u32) -> Scenario {
        self.mcn = Some(mcn);
        self
    }

    pub fn with_event_mode(mut self, mode: EventMode) -> Scenario {
        self.event_mode = Some(mode);
        self
    }

    /// Stable identifier, e.g. `grappa-pme-12k/1gcd/23.10/mcn5`.
    pub fn id(&self) -> String {
        let mut s = format!("{}/{}/{}", self.preset, self.layout, self.profile);
        if let Some(m) = self.mcn {
            s += &format!("/mcn{m}");
        }
        if let Some(e) = self.event_mode {
            s += match e {
                EventMode::Full => "/full",
                EventMode::CoarseGrained => "/cg",
            };
        }
        for (k, v) in &self.env {
            s += &format!("/{k}={v}");
        }
        if self.topology != "lumi" {
            s += &format!("/{}", self.topology);
        }
        if let Some(t) = self.app_threads {
            s += &format!("/t{t}");
        }
        s
    }

    pub fn seed_for(&self, rep: u32) -> u64 {
        self.seed.wrapping_add(self.seed_stride.wrapping_mul(rep as u64))
    }

    pub fn runtime(&self, bundle: &Bundle) -> Result<RuntimeConfig, BenchError> {
        let err = |source| BenchError::Runtime { id: self.id(), source };
        let mut cfg = bundle.runtime.with_mcn(&self.profile, self.mcn).map_err(err)?;
        cfg.apply_env(&self.env).map_err(err)?;
        if let Some(e) = self.event_mode {
            cfg.event_mode = e;
        }
        cfg.validate().map_err(err)?;
        Ok(cfg)
    }

    pub fn node_topology(&self) -> Result<NodeTopology, BenchError> {
        let p: Profile = self.topology.parse().map_err(|_| BenchError::Topology(self.topology.clone()))?;
        Ok(build_ex235a(p))
    }

    /// One simulation of this scenario with the given seed.
    pub fn run(&self, bundle: &Bundle, seed: u64, record_trace: bool) -> Result<RunResult, BenchError> {
        let sys = bundle.preset(&self.preset)?;
        let cfg = self.runtime(bundle)?;
        let topo = self.node_topology()?;
        let sim = |source| BenchError::Simulation { id: self.id(), source };
        let dec = match self.layout {
            Layout::Gcds(n) => Decomposition::single_node(&sys, n),
            Layout::Nodes(n) => Decomposition::multi_node(&sys, n),
        }
        .map_err(sim)?;
        let sched = build_step_schedule(&sys, &dec, CodeVariant::of(&cfg)).map_err(sim)?;
        let mut opts = RunOptions {
            seed,
            app_threads: self.app_threads,
            record_trace,
            ..RunOptions::default()
        };
        if let Some(n) = self.n_steps {
            opts.n_steps = n;
        } else {
            opts.n_steps = opts.n_steps.max(2 * sys.nstlist);
        }
        simulate_run(&sched, &cfg, &topo, &bundle.cal, &opts).map_err(sim)
    }
}

/// Cartesian product of scenario axes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub presets: Vec<String>,
    pub layouts: Vec<Layout>,
    pub profiles: Vec<String>,
    /// Cache thresholds; empty keeps each profile's own.
    #[serde(default)]
    pub mcn: Vec<u32>,
    #[serde(default)]
    pub event_modes: Vec<EventMode>,
    #[serde(default = "default_reps")]
    pub reps: u32,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

impl Matrix {
    /// Instant profiles appear once regardless of the `mcn` axis.
    pub fn expand(&self, bundle: &Bundle) -> Vec<Scenario> {
        let mut out = Vec::new();
        for p in &self.presets {
            for &l in &self.layouts {
                for prof in &self.profiles {
                    let deferred = bundle.runtime.get(prof).map(|c| c.is_deferred()).unwrap_or(true);
                    let mcns: Vec<Option<u32>> = if self.mcn.is_empty() || !deferred {
                        vec![None]
                    } else {
                        self.mcn.iter().map(|&m| Some(m)).collect()
                    };
                    let modes: Vec<Option<EventMode>> = if self.event_modes.is_empty() {
                        vec![None]
                    } else {
                        self.event_modes.iter().map(|&m| Some(m)).collect()
                    };
                    for m in &mcns {
                        for e in &modes {
                            let mut s = Scenario::new(p, l, prof);
                            s.mcn = *m;
                            s.event_mode = *e;
                            s.reps = self.reps;
                            s.seed = self.seed;
                            out.push(s);
                        }
                    }
                }
            }
        }
        out
    }
}

/// A sweep input file: explicit scenarios plus matrices.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    #[serde(default)]
    pub scenario: Vec<Scenario>,
    #[serde(default)]
    pub matrix: Vec<Matrix>,
}

impl SweepSpec {
    pub fn scenarios(&self, bundle: &Bundle) -> Vec<Scenario> {
        let mut v = self.scenario.clone();
        for m in &self.matrix {
            v.extend(m.expand(bundle));
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub scenario: String,
    pub rep: u32,
    pub seed: u64,
    pub ms_per_step: f64,
    pub ns_per_day: f64,
    /// Mean device busy fraction over the run's ranks.
    pub gpu_utilization: f64,
    pub median_ms_per_step: f64,
    pub median_ns_per_day: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn device_utilization(r: &RunResult) -> f64 {
    let dev: Vec<f64> = r.utilization.iter().filter(|(k, _)| k.ends_with("/device")).map(|(_, v)| *v).collect();
    if dev.is_empty() {
        0.0
    } else {
        dev.iter().sum::<f64>() / dev.len() as f64
    }
}

/// Runs every repetition of every scenario, in parallel. Row order follows
/// the input order so the report does not depend on scheduling.
pub fn run_sweep(scenarios: &[Scenario], bundle: &Bundle) -> Result<SweepReport, BenchError> {
    let jobs: Vec<(usize, u32)> = scenarios.iter().enumerate().flat_map(|(i, s)| (0..s.reps.max(1)).map(move |r| (i, r))).collect();
    let results: Vec<Result<(usize, u32, u64, RunResult), BenchError>> = jobs
        .par_iter()
        .map(|&(i, rep)| {
            let s = &scenarios[i];
            let seed = s.seed_for(rep);
            s.run(bundle, seed, false).map(|r| (i, rep, seed, r))
        })
        .collect();
    let mut rows = Vec::with_capacity(results.len());
    let mut by_scenario: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for res in results {
        let (i, rep, seed, r) = res?;
        by_scenario.entry(i).or_default().push(rows.len());
        rows.push(SweepRow {
            scenario: scenarios[i].id(),
            rep,
            seed,
            ms_per_step: r.ms_per_step,
            ns_per_day: r.ns_per_day,
            gpu_utilization: device_utilization(&r),
            median_ms_per_step: 0.0,
            median_ns_per_day: 0.0,
        });
    }
    for idx in by_scenario.values() {
        let mut ms: Vec<f64> = idx.iter().map(|&k| rows[k].ms_per_step).collect();
        let mut ns: Vec<f64> = idx.iter().map(|&k| rows[k].ns_per_day).collect();
        let (m, n) = (median(&mut ms), median(&mut ns));
        for &k in idx {
            rows[k].median_ms_per_step = m;
            rows[k].median_ns_per_day = n;
        }
    }
    Ok(SweepReport { rows })
}

const COLUMNS: [&str; 8] = ["scenario", "rep", "seed", "ms_per_step", "ns_per_day", "gpu_utilization", "median_ms_per_step", "median_ns_per_day"];

impl SweepReport {
    /// Median rate and step time of a scenario, if present.
    pub fn median(&self, scenario: &str) -> Option<(f64, f64)> {
        self.rows.iter().find(|r| r.scenario == scenario).map(|r| (r.median_ns_per_day, r.median_ms_per_step))
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(COLUMNS).expect("in-memory write");
        for r in &self.rows {
            w.write_record([
                r.scenario.clone(),
                r.rep.to_string(),
                r.seed.to_string(),
                format!("{:.6}", r.ms_per_step),
                format!("{:.3}", r.ns_per_day),
                format!("{:.4}", r.gpu_utilization),
                format!("{:.6}", r.median_ms_per_step),
                format!("{:.3}", r.median_ns_per_day),
            ])
            .expect("in-memory write");
        }
        let body = String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv");
        format!("{CSV_SCHEMA}\n{body}")
    }

    pub fn from_csv(text: &str) -> Result<SweepReport, BenchError> {
        let body = text.strip_prefix(CSV_SCHEMA).ok_or_else(|| BenchError::Csv("missing schema line".into()))?;
        let mut rd = csv::Reader::from_reader(body.trim_start_matches(['\r', '\n']).as_bytes());
        let num = |s: &str| s.parse::<f64>().map_err(|e| BenchError::Csv(format!("{s}: {e}")));
        let mut rows = Vec::new();
        for rec in rd.records() {
            let rec = rec.map_err(|e| BenchError::Csv(e.to_string()))?;
            if rec.len() != COLUMNS.len() {
                return Err(BenchError::Csv(format!("expected {} columns, got {}", COLUMNS.len(), rec.len())));
            }
            rows.push(SweepRow {
                scenario: rec[0].to_string(),
                rep: rec[1].parse().map_err(|_| BenchError::Csv(format!("bad rep '{}'", &rec[1])))?,
                seed: rec[2].parse().map_err(|_| BenchError::Csv(format!("bad seed '{}'", &rec[2])))?,
                ms_per_step: num(&rec[3])?,
                ns_per_day: num(&rec[4])?,
                gpu_utilization: num(&rec[5])?,
                median_ms_per_step: num(&rec[6])?,
                median_ns_per_day: num(&rec[7])?,
            });
        }
        Ok(SweepReport { rows })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    NsPerDay,
    MsPerStep,
    /// Rate of `scenario` over the best rate among `baseline`, minus one.
    Speedup,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ToleranceKind {
    Relative,
    Absolute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferencePoint {
    pub id: String,
    /// Figure or section label of the source.
    pub figure: String,
    pub metric: Metric,
    pub scenario: Scenario,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub baseline: Vec<Scenario>,
    pub value: f64,
    pub tolerance: f64,
    pub tolerance_kind: ToleranceKind,
    pub provenance: String,
}

impl ReferencePoint {
    /// Every scenario the point needs from a report.
    pub fn scenarios(&self) -> impl Iterator<Item = &Scenario> {
        std::iter::once(&self.scenario).chain(self.baseline.iter())
    }

    pub fn within(&self, simulated: f64) -> bool {
        let err = (simulated - self.value).abs();
        match self.tolerance_kind {
            ToleranceKind::Absolute => err <= self.tolerance,
            ToleranceKind::Relative => err <= self.tolerance * self.value.abs(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckLine {
    pub id: String,
    pub simulated: f64,
    pub reference: f64,
    pub relative_error: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CheckReport {
    pub lines: Vec<CheckLine>,
    /// Points skipped because the report lacks one of their scenarios.
    pub missing: Vec<(String, String)>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.lines.iter().all(|l| l.pass)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for l in &self.lines {
            s += &format!(
                "{} {}: simulated {:.4}, reference {:.4}, rel. error {:+.3}\n",
                if l.pass { "PASS" } else { "FAIL" },
                l.id,
                l.simulated,
                l.reference,
                l.relative_error
            );
        }
        for (id, sc) in &self.missing {
            s += &format!("MISSING {id}: no rows for {sc}\n");
        }
        s
    }
}

pub fn check_against_reference(report: &SweepReport, refs: &[ReferencePoint]) -> CheckReport {
    let mut out = CheckReport::default();
    for p in refs {
        if let Some(sc) = p.scenarios().find(|s| report.median(&s.id()).is_none()) {
            out.missing.push((p.id.clone(), sc.id()));
            continue;
        }
        let (rate, ms) = report.median(&p.scenario.id()).expect("checked above");
        let simulated = match p.metric {
            Metric::NsPerDay => rate,
            Metric::MsPerStep => ms,
            Metric::Speedup => {
                let best = p.baseline.iter().filter_map(|b| report.median(&b.id())).map(|(r, _)| r).fold(f64::NEG_INFINITY, f64::max);
                rate / best - 1.0
            }
        };
        out.lines.push(CheckLine {
            id: p.id.clone(),
            simulated,
            reference: p.value,
            relative_error: if p.value != 0.0 { (simulated - p.value) / p.value.abs() } else { simulated },
            pass: p.within(simulated),
        });
    }
    out
}

/// Distinct scenarios referenced by a point set, in first-use order.
pub fn reference_scenarios(refs: &[ReferencePoint]) -> Vec<Scenario> {
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::new();
    for p in refs {
        for s in p.scenarios() {
            if seen.insert(s.id()) {
                out.push(s.clone());
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config;

    fn row(id: &str, ns: f64) -> SweepRow {
        SweepRow {
            scenario: id.into(),
            rep: 0,
            seed: 1,
            ms_per_step: 172.8 / ns,
            ns_per_day: ns,
            gpu_utilization: 0.5,
            median_ms_per_step: 172.8 / ns,
            median_ns_per_day: ns,
        }
    }

    fn point(metric: Metric, sc: Scenario, baseline: Vec<Scenario>, value: f64, tol: f64) -> ReferencePoint {
        ReferencePoint {
            id: "p".into(),
            figure: "t".into(),
            metric,
            scenario: sc,
            baseline,
            value,
            tolerance: tol,
            tolerance_kind: if metric == Metric::Speedup { ToleranceKind::Absolute } else { ToleranceKind::Relative },
            provenance: "test".into(),
        }
    }

    #[test]
    fn scenario_ids() {
        let s = Scenario::new("grappa-pme-12k", Layout::Gcds(1), "23.10").with_mcn(5);
        assert_eq!(s.id(), "grappa-pme-12k/1gcd/23.10/mcn5");
        let s = Scenario::new("grappa-rf-46m", Layout::Nodes(512), "23.10-instant").with_event_mode(EventMode::Full);
        assert_eq!(s.id(), "grappa-rf-46m/512node/23.10-instant/full");
    }

    #[test]
    fn matrix_skips_mcn_for_instant_profiles() {
        let m = Matrix {
            presets: vec!["grappa-pme-12k".into(), "grappa-pme-192k".into()],
            layouts: vec![Layout::Gcds(1)],
            profiles: vec!["0.9.4".into(), "23.10".into(), "23.10-instant".into()],
            mcn: vec![0, 5, 100],
            event_modes: vec![],
            reps: 5,
            seed: 42,
        };
        let v = m.expand(config::bundled());
        assert_eq!(v.len(), 2 * (3 + 3 + 1));
        assert!(v.iter().all(|s| s.reps == 5));
    }

    #[test]
    fn repeated_seed_gives_identical_rows() {
        let mut s = Scenario::new("grappa-pme-12k", Layout::Gcds(1), "23.10");
        s.reps = 5;
        s.n_steps = Some(150);
        let rep = run_sweep(&[s], config::bundled()).unwrap();
        assert_eq!(rep.rows.len(), 5);
        for r in &rep.rows[1..] {
            assert_eq!(r.ms_per_step, rep.rows[0].ms_per_step);
            assert_eq!(r.median_ms_per_step, rep.rows[0].ms_per_step);
        }
    }

    #[test]
    fn csv_round_trip_and_quoting() {
        let mut rep = SweepReport {
            rows: vec![row("a,b", 900.0), row("plain", 450.0)],
        };
        rep.rows[0].scenario = "with \"quote\", comma".into();
        let text = rep.to_csv();
        assert!(text.starts_with(CSV_SCHEMA));
        assert!(text.contains("\"with \"\"quote\"\", comma\""));
        let back = SweepReport::from_csv(&text).unwrap();
        assert_eq!(back.rows.len(), 2);
        assert_eq!(back.rows[0].scenario, rep.rows[0].scenario);
        assert!(SweepReport::from_csv("scenario\n").is_err());
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&mut []).is_nan());
    }

    #[test]
    fn reference_checks() {
        let a = Scenario::new("x", Layout::Gcds(1), "i");
        let b = Scenario::new("x", Layout::Gcds(1), "c1");
        let c = Scenario::new("x", Layout::Gcds(1), "c2");
        let rep = SweepReport {
            rows: vec![row(&a.id(), 226.0), row(&b.id(), 185.0), row(&c.id(), 150.0)],
        };
        let within = point(Metric::NsPerDay, a.clone(), vec![], 240.0, 0.10);
        let speed = point(Metric::Speedup, a.clone(), vec![b.clone(), c.clone()], 0.22, 0.05);
        let off = point(Metric::NsPerDay, a.clone(), vec![], 300.0, 0.10);
        let missing = point(Metric::NsPerDay, Scenario::new("y", Layout::Gcds(2), "i"), vec![], 1.0, 0.1);
        let out = check_against_reference(&rep, &[within, speed, off, missing]);
        assert_eq!(out.lines.len(), 3);
        assert!(out.lines[0].pass);
        assert!(out.lines[1].pass);
        assert!((out.lines[1].simulated - (226.0 / 185.0 - 1.0)).abs() < 1e-12);
        assert!(!out.lines[2].pass);
        assert_eq!(out.missing.len(), 1);
        assert!(!out.passed());
        assert!(out.render().contains("MISSING"));
    }

    #[test]
    fn empty_reference_set_passes() {
        let out = check_against_reference(&SweepReport::default(), &[]);
        assert!(out.passed());
        assert!(out.lines.is_empty());
    }
}
