use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use mdsim::bench::{check_against_reference, reference_scenarios, run_sweep, Layout, ReferencePoint, Scenario, SweepReport, SweepSpec};
use mdsim::config::{self, Bundle, References};
use mdsim::cost::fit_kernel_model;
use mdsim::runtime::EventMode;
use mdsim::topology::{build_ex235a, plan_affinity, NodeTopology, Profile};

#[derive(Parser)]
#[command(name = "mdsim", version, about = "Simulate GPU-offloaded MD step execution")]
struct Cli {
    /// Directory with replacement calibration tables; missing files fall
    /// back to the bundled ones.
    #[arg(long, global = true)]
    config_dir: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one scenario and print its rates.
    Simulate(ScenarioArgs),
    /// Run every scenario of a sweep file and write CSV.
    Sweep {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit floor and slope of a kernel from `atoms,walltime_us` samples.
    Calibrate {
        #[arg(long)]
        samples: PathBuf,
        /// Kernel table entry to print the fit under.
        #[arg(long, default_value = "Kernel")]
        kernel: String,
    },
    /// Compare simulated results with reference points.
    Check {
        /// Sweep CSV to check; runs the referenced scenarios when absent.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Print rank-to-core/GCD/NIC bindings for a node.
    PlanAffinity {
        #[arg(long, default_value = "lumi")]
        topology: String,
        /// TOML node description; overrides `--topology`.
        #[arg(long)]
        topology_file: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        ranks: usize,
        #[arg(long, value_enum, default_value_t = PlanFormat::Toml)]
        format: PlanFormat,
    },
    /// Run one scenario and write its trace as JSON.
    ExportTrace {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PlanFormat {
    Toml,
    Masks,
    Env,
}

#[derive(Clone, Copy, ValueEnum)]
enum EventArg {
    Full,
    CoarseGrained,
}

#[derive(Args)]
struct ScenarioArgs {
    #[arg(long)]
    preset: String,
    #[arg(long, default_value = "23.10")]
    profile: String,
    #[arg(long, conflicts_with = "nodes")]
    gcds: Option<usize>,
    #[arg(long)]
    nodes: Option<usize>,
    #[arg(long)]
    mcn: Option<u32>,
    #[arg(long, value_enum)]
    event_mode: Option<EventArg>,
    #[arg(long, default_value = "lumi")]
    topology: String,
    #[arg(long)]
    app_threads: Option<u32>,
    #[arg(long)]
    steps: Option<u32>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Runtime environment override, `NAME=VALUE`; repeatable.
    #[arg(long = "env", value_name = "NAME=VALUE")]
    env: Vec<String>,
}

impl ScenarioArgs {
    fn scenario(&self) -> Result<Scenario> {
        let layout = match (self.gcds, self.nodes) {
            (_, Some(n)) => Layout::Nodes(n),
            (Some(g), None) => Layout::Gcds(g),
            (None, None) => Layout::Gcds(1),
        };
        let mut s = Scenario::new(&self.preset, layout, &self.profile);
        s.mcn = self.mcn;
        s.event_mode = self.event_mode.map(|e| match e {
            EventArg::Full => EventMode::Full,
            EventArg::CoarseGrained => EventMode::CoarseGrained,
        });
        s.topology = self.topology.clone();
        s.app_threads = self.app_threads;
        s.n_steps = self.steps;
        s.seed = self.seed;
        let mut env = BTreeMap::new();
        for kv in &self.env {
            let Some((k, v)) = kv.split_once('=') else {
                bail!("--env expects NAME=VALUE, got '{kv}'");
            };
            env.insert(k.to_string(), v.to_string());
        }
        s.env = env;
        Ok(s)
    }
}

fn load_bundle(dir: Option<&Path>) -> Result<Bundle> {
    match dir {
        Some(d) => Bundle::from_dir(d).with_context(|| format!("loading tables from {}", d.display())),
        None => Ok(config::bundled().clone()),
    }
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn read_samples(path: &Path) -> Result<Vec<(f64, f64)>> {
    let mut rd = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let rec = rec?;
        if rec.len() < 2 {
            bail!("{}: row {} needs atoms and walltime", path.display(), i + 1);
        }
        let atoms: f64 = rec[0].parse().with_context(|| format!("row {}: atoms", i + 1))?;
        let wall: f64 = rec[1].parse().with_context(|| format!("row {}: walltime", i + 1))?;
        out.push((atoms, wall));
    }
    Ok(out)
}

fn run(cli: Cli) -> Result<bool> {
    let bundle = load_bundle(cli.config_dir.as_deref())?;
    match cli.cmd {
        Cmd::Simulate(args) => {
            let s = args.scenario()?;
            let r = s.run(&bundle, s.seed, false)?;
            println!("scenario    {}", s.id());
            println!("ms/step     {:.6}", r.ms_per_step);
            println!("ns/day      {:.3}", r.ns_per_day);
            println!("steps       {}", r.step_ends.len());
            println!("flushes     {}", r.flushes);
            println!("syncs       {}", r.syncs);
            println!("api calls   {} host, {} worker", r.host_api_calls, r.worker_api_calls);
            for (k, v) in &r.utilization {
                println!("busy        {k} {v:.3}");
            }
        }
        Cmd::Sweep { spec, out } => {
            let text = fs::read_to_string(&spec).with_context(|| format!("reading {}", spec.display()))?;
            let spec: SweepSpec = toml::from_str(&text).with_context(|| format!("parsing {}", spec.display()))?;
            let scenarios = spec.scenarios(&bundle);
            if scenarios.is_empty() {
                bail!("sweep file lists no scenarios");
            }
            let report = run_sweep(&scenarios, &bundle)?;
            write_or_print(out.as_deref(), &report.to_csv())?;
        }
        Cmd::Calibrate { samples, kernel } => {
            let pts = read_samples(&samples)?;
            let (floor, slope) = fit_kernel_model(&pts)?;
            println!("[kernels.{kernel}]");
            println!("floor_us = {floor}");
            println!("slope_us = {slope:e}");
        }
        Cmd::Check { report, reference } => {
            let refs: Vec<ReferencePoint> = match &reference {
                Some(p) => {
                    let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                    toml::from_str::<References>(&text).with_context(|| format!("parsing {}", p.display()))?.points
                }
                None => bundle.references.points.clone(),
            };
            let report = match &report {
                Some(p) => SweepReport::from_csv(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
                None => run_sweep(&reference_scenarios(&refs), &bundle)?,
            };
            let out = check_against_reference(&report, &refs);
            print!("{}", out.render());
            return Ok(out.passed());
        }
        Cmd::PlanAffinity {
            topology,
            topology_file,
            ranks,
            format,
        } => {
            let topo = match topology_file {
                Some(p) => NodeTopology::from_toml(&fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?)?,
                None => build_ex235a(topology.parse::<Profile>().map_err(anyhow::Error::msg)?),
            };
            let plan = plan_affinity(&topo, ranks)?;
            if let Err(e) = plan.check(&topo) {
                bail!("generated plan is invalid: {e}");
            }
            match format {
                PlanFormat::Toml => print!("{}", plan.to_toml()),
                PlanFormat::Masks => println!("{}", plan.cpu_bind_masks()),
                PlanFormat::Env => print!("{}", plan.env_lines()),
            }
        }
        Cmd::ExportTrace { scenario, out } => {
            let s = scenario.scenario()?;
            let r = s.run(&bundle, s.seed, true)?;
            let trace = r.trace.context("simulation recorded no trace")?;
            fs::write(&out, trace.to_json()).with_context(|| format!("writing {}", out.display()))?;
            eprintln!("{} records, makespan {}", trace.len(), trace.makespan());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
