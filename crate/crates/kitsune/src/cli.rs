//! Command-line interface. `run` renders each command to a string so the
//! binary and the tests share one code path.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use kitsune_core::balance::{profile_pipeline, solve_allocation, Allocation};
use kitsune_core::graph::{OpKind, OperatorGraph, BUILTIN_NAMES};
use kitsune_core::machine::MachineConfig;
use kitsune_core::metrics::{quadrants, sensitivity_sweep, speedup_report, traffic_report, LOW_UTILIZATION};
use kitsune_core::pipeline::{design_pipelines, PipelineOptions, PipelineSpec, DEFAULT_PAYLOAD_BUDGET};
use kitsune_core::queue::check::{explore, CheckConfig, Fault};
use kitsune_core::select::{coverage, select_subgraphs_with, PatternLibrary, SelectOptions, SfNode};
use kitsune_core::sim::{simulate_with, ExecTrace, Mode, SimOptions, VerticalOptions};
use serde::Serialize;

use crate::error::{CliError, Result};
use crate::harness::check_ilp;
use crate::io::{self, to_json};
use crate::report::{quadrant_csv, speedup_csv, sweep_csv, traffic_csv, QuadrantRow};

#[derive(Debug, Parser)]
#[command(name = "kitsune", version, about = "Dataflow compiler and GPU execution model")]
pub struct Cli {
    /// Seed for randomized harnesses.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Inspect operator graphs.
    #[command(subcommand)]
    Graph(GraphCommand),
    /// Mark sf-nodes by pattern matching; prints them as JSON.
    Select {
        #[command(flatten)]
        graph: GraphArg,
        #[command(flatten)]
        select: SelectArgs,
    },
    /// Rewrite sf-nodes into pipelines; prints the pipeline specs as JSON.
    Pipeline {
        #[command(flatten)]
        graph: GraphArg,
        /// Selection JSON from `kitsune select`; selects afresh when absent.
        #[arg(long)]
        sf: Option<PathBuf>,
        #[command(flatten)]
        select: SelectArgs,
        #[command(flatten)]
        pipeline: PipelineArgs,
    },
    /// Assign CTAs to the stages of each pipeline in a pipeline JSON file.
    Balance {
        pipeline: PathBuf,
        #[command(flatten)]
        machine: MachineArg,
    },
    /// Execute a graph in one mode and write the trace as JSON.
    Simulate {
        #[command(flatten)]
        graph: GraphArg,
        #[arg(long, value_parser = parse_mode, default_value = "dataflow")]
        mode: Mode,
        #[command(flatten)]
        machine: MachineArg,
        #[command(flatten)]
        sim: SimArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run graphs in every mode and tabulate speedup, traffic or utilization.
    Report {
        /// Graph files or `builtin:<name>`; defaults to every builtin.
        graphs: Vec<String>,
        #[arg(long, value_enum, default_value_t = ReportKind::Speedup)]
        kind: ReportKind,
        /// Low-utilization threshold for quadrant reports.
        #[arg(long, default_value_t = LOW_UTILIZATION)]
        threshold: f64,
        #[command(flatten)]
        machine: MachineArg,
        #[command(flatten)]
        sim: SimArgs,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Self-speedup of each mode under machine variants.
    Sweep {
        /// Graph files or `builtin:<name>`; defaults to every builtin.
        graphs: Vec<String>,
        /// Variant presets or config files.
        #[arg(long = "variant", default_values_t = vec!["a100-2x-sm-l2".to_string()])]
        variants: Vec<String>,
        #[arg(long = "mode", value_parser = parse_mode, default_values_t = Mode::ALL.to_vec())]
        modes: Vec<Mode>,
        #[command(flatten)]
        machine: MachineArg,
        #[command(flatten)]
        sim: SimArgs,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Explore every interleaving of the queue protocol.
    CheckQueue {
        #[arg(long, default_value_t = 1)]
        consumers: usize,
        #[arg(long, default_value_t = 2)]
        depth: u32,
        #[arg(long, default_value_t = 4)]
        items: u64,
        #[arg(long, value_enum, default_value_t = FaultArg::None)]
        fault: FaultArg,
        /// Check 1..=2 consumers, depth 2..=3 and 1..=items items.
        #[arg(long)]
        all: bool,
    },
    /// Compare the allocation solver with exhaustive enumeration on seeded
    /// random instances.
    CheckIlp {
        #[arg(long, default_value_t = 500)]
        instances: usize,
        #[arg(long, default_value_t = 4)]
        max_stages: usize,
        #[arg(long, default_value_t = 8)]
        max_sms: u32,
    },
}

#[derive(Debug, Subcommand)]
pub enum GraphCommand {
    /// Load a graph and print its topological order and shapes.
    Validate {
        #[command(flatten)]
        graph: GraphArg,
    },
    /// Print a builtin graph in the file format.
    Builtin {
        /// One of the builtin names; `list` prints them all.
        name: String,
        #[arg(long = "param", value_name = "KEY=VALUE")]
        params: Vec<String>,
    },
}

#[derive(Debug, Args)]
pub struct GraphArg {
    /// Graph file or `builtin:<name>`.
    pub graph: String,
    /// Builtin parameter override.
    #[arg(long = "param", value_name = "KEY=VALUE")]
    pub params: Vec<String>,
}

#[derive(Debug, Args)]
pub struct MachineArg {
    /// Preset name or machine JSON; defaults to $KITSUNE_MACHINE, then a100.
    #[arg(long)]
    pub machine: Option<String>,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    /// Pattern library file; the builtin library when absent.
    #[arg(long)]
    pub patterns: Option<PathBuf>,
    /// Operator kinds never placed in an sf-node.
    #[arg(long = "deny", value_parser = parse_kind, default_values_t = vec![OpKind::Gather])]
    pub deny: Vec<OpKind>,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    #[arg(long, default_value_t = DEFAULT_PAYLOAD_BUDGET)]
    pub payload_budget: u64,
    #[arg(long, default_value_t = 2)]
    pub queue_depth: u32,
    #[arg(long, default_value_t = 2)]
    pub reduction_arity: usize,
}

#[derive(Debug, Args)]
pub struct SimArgs {
    #[command(flatten)]
    pub select: SelectArgs,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    /// Keep vertical fusion groups even when they are slower than unfused.
    #[arg(long)]
    pub force_vertical: bool,
}

#[derive(Debug, Args)]
pub struct OutputArgs {
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportKind {
    Speedup,
    Traffic,
    Quadrants,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FaultArg {
    None,
    SkipConsumerCheck,
    SkipPublishCheck,
}

impl From<FaultArg> for Fault {
    fn from(f: FaultArg) -> Self {
        match f {
            FaultArg::None => Fault::None,
            FaultArg::SkipConsumerCheck => Fault::SkipConsumerCheck,
            FaultArg::SkipPublishCheck => Fault::SkipPublishCheck,
        }
    }
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    s.parse().map_err(|_| format!("expected one of bsp, vertical, dataflow; got `{s}`"))
}

fn parse_kind(s: &str) -> std::result::Result<OpKind, String> {
    OpKind::ALL
        .into_iter()
        .find(|k| k.as_str().eq_ignore_ascii_case(s))
        .ok_or_else(|| format!("unknown operator kind `{s}`"))
}

/// What a command produced: text for stdout and the process exit code.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outcome {
    pub stdout: String,
    pub code: i32,
}

impl Outcome {
    fn ok(stdout: String) -> Self {
        Self { stdout, code: 0 }
    }
}

impl SelectArgs {
    fn library(&self) -> Result<PatternLibrary> {
        match &self.patterns {
            Some(p) => io::load_patterns(p),
            None => Ok(PatternLibrary::default_library()),
        }
    }

    fn options(&self) -> SelectOptions {
        SelectOptions { deny: self.deny.iter().copied().collect::<BTreeSet<_>>() }
    }
}

impl PipelineArgs {
    fn options(&self) -> PipelineOptions {
        PipelineOptions {
            payload_budget: self.payload_budget,
            queue_depth: self.queue_depth,
            reduction_arity: self.reduction_arity,
        }
    }
}

impl SimArgs {
    fn options(&self) -> Result<SimOptions> {
        Ok(SimOptions {
            library: self.select.library()?,
            select: self.select.options(),
            pipeline: self.pipeline.options(),
            vertical: VerticalOptions { profitable_only: !self.force_vertical },
        })
    }
}

fn graphs_or_builtins(args: &[String]) -> Result<Vec<(String, OperatorGraph)>> {
    let defaults: Vec<String>;
    let args = if args.is_empty() {
        defaults = BUILTIN_NAMES.iter().map(|n| format!("builtin:{n}")).collect();
        &defaults
    } else {
        args
    };
    args.iter().map(|a| io::resolve_graph(a, &[])).collect()
}

fn emit(out: &Option<PathBuf>, text: String) -> Result<Outcome> {
    match out {
        Some(path) => {
            io::write_text(path, &text)?;
            Ok(Outcome::ok(String::new()))
        }
        None => Ok(Outcome::ok(text)),
    }
}

#[derive(Serialize)]
struct GraphSummary<'a> {
    name: &'a str,
    nodes: usize,
    edges: usize,
    dtype_bytes: u8,
    topo_order: Vec<NodeSummary<'a>>,
}

#[derive(Serialize)]
struct NodeSummary<'a> {
    id: &'a str,
    kind: OpKind,
    output_shape: &'a [u64],
    flops: u64,
}

#[derive(Serialize)]
struct Selection<'a> {
    coverage: f64,
    sf_nodes: &'a [SfNode],
}

#[derive(Serialize)]
struct Balanced<'a> {
    sf_id: &'a str,
    allocation: Allocation,
}

/// Selection JSON is either the object `kitsune select` prints or a bare
/// list of sf-nodes.
fn load_selection(path: &Path) -> Result<Vec<SfNode>> {
    #[derive(serde::Deserialize)]
    #[serde(untagged)]
    enum SelectionFile {
        Wrapped { sf_nodes: Vec<SfNode> },
        Bare(Vec<SfNode>),
    }
    let origin = path.display().to_string();
    Ok(match io::parse_json::<SelectionFile>(&io::read_text(path)?, &origin)? {
        SelectionFile::Wrapped { sf_nodes } | SelectionFile::Bare(sf_nodes) => sf_nodes,
    })
}

fn run_all_modes(
    graphs: &[(String, OperatorGraph)],
    cfg: &MachineConfig,
    opts: &SimOptions,
) -> Result<Vec<(String, ExecTrace)>> {
    let mut traces = Vec::new();
    for (name, g) in graphs {
        for mode in Mode::ALL {
            let t = simulate_with(g, mode, cfg, opts).map_err(|e| CliError::model(format!("{name} ({mode})"), e))?;
            traces.push((name.clone(), t));
        }
    }
    Ok(traces)
}

pub fn run(cli: &Cli) -> Result<Outcome> {
    match &cli.command {
        Command::Graph(GraphCommand::Validate { graph }) => {
            let (name, g) = io::resolve_graph(&graph.graph, &graph.params)?;
            let summary = GraphSummary {
                name: &name,
                nodes: g.len(),
                edges: g.edges().len(),
                dtype_bytes: g.dtype_bytes(),
                topo_order: g
                    .topo()
                    .map(|n| NodeSummary {
                        id: &n.id,
                        kind: n.kind,
                        output_shape: &n.output_shape.dims,
                        flops: kitsune_core::graph::op_flops(n),
                    })
                    .collect(),
            };
            Ok(Outcome::ok(to_json(&summary)))
        }
        Command::Graph(GraphCommand::Builtin { name, params }) => {
            if name == "list" {
                return Ok(Outcome::ok(BUILTIN_NAMES.iter().map(|n| format!("{n}\n")).collect()));
            }
            let (_, g) = io::resolve_graph(&format!("builtin:{name}"), params)?;
            Ok(Outcome::ok(io::graph_to_json(&g)))
        }
        Command::Select { graph, select } => {
            let (_, g) = io::resolve_graph(&graph.graph, &graph.params)?;
            let sf = select_subgraphs_with(&g, &select.library()?, &select.options());
            Ok(Outcome::ok(to_json(&Selection { coverage: coverage(&g, &sf), sf_nodes: &sf })))
        }
        Command::Pipeline { graph, sf, select, pipeline } => {
            let (name, g) = io::resolve_graph(&graph.graph, &graph.params)?;
            let sfnodes = match sf {
                Some(path) => load_selection(path)?,
                None => select_subgraphs_with(&g, &select.library()?, &select.options()),
            };
            let specs = design_pipelines(&g, &sfnodes, &pipeline.options()).map_err(|e| CliError::model(name, e))?;
            Ok(Outcome::ok(to_json(&specs)))
        }
        Command::Balance { pipeline, machine } => {
            let cfg = io::resolve_machine(machine.machine.as_deref())?;
            let origin = pipeline.display().to_string();
            let specs: Vec<PipelineSpec> = io::parse_json(&io::read_text(pipeline)?, &origin)?;
            let mut out = Vec::new();
            for spec in &specs {
                let profiles = profile_pipeline(spec, &cfg);
                let allocation =
                    solve_allocation(spec, &profiles, &cfg).map_err(|e| CliError::model(&spec.sf_id, e))?;
                out.push(Balanced { sf_id: &spec.sf_id, allocation });
            }
            Ok(Outcome::ok(to_json(&out)))
        }
        Command::Simulate { graph, mode, machine, sim, out } => {
            let (name, g) = io::resolve_graph(&graph.graph, &graph.params)?;
            let cfg = io::resolve_machine(machine.machine.as_deref())?;
            let trace = simulate_with(&g, *mode, &cfg, &sim.options()?).map_err(|e| CliError::model(name, e))?;
            emit(out, to_json(&trace))
        }
        Command::Report { graphs, kind, threshold, machine, sim, output } => {
            let graphs = graphs_or_builtins(graphs)?;
            let cfg = io::resolve_machine(machine.machine.as_deref())?;
            let traces = run_all_modes(&graphs, &cfg, &sim.options()?)?;
            let text = match kind {
                ReportKind::Speedup => {
                    let r = speedup_report(&traces).map_err(|e| CliError::model("report", e))?;
                    match output.format {
                        Format::Json => to_json(&r),
                        Format::Csv => speedup_csv(&r),
                    }
                }
                ReportKind::Traffic => {
                    let r = traffic_report(&traces);
                    match output.format {
                        Format::Json => to_json(&r),
                        Format::Csv => traffic_csv(&r),
                    }
                }
                ReportKind::Quadrants => {
                    let mut rows = Vec::new();
                    for (graph, t) in &traces {
                        let q = quadrants(t, *threshold).map_err(|e| CliError::model(graph, e))?;
                        rows.push(QuadrantRow { graph: graph.clone(), mode: t.mode, quadrants: q });
                    }
                    rows.sort_by(|a, b| (&a.graph, a.mode).cmp(&(&b.graph, b.mode)));
                    match output.format {
                        Format::Json => to_json(&rows),
                        Format::Csv => quadrant_csv(&rows),
                    }
                }
            };
            emit(&output.out, text)
        }
        Command::Sweep { graphs, variants, modes, machine, sim, output } => {
            let graphs = graphs_or_builtins(graphs)?;
            let base = io::resolve_machine(machine.machine.as_deref())?;
            let variants: Vec<(String, MachineConfig)> = variants
                .iter()
                .map(|v| Ok((v.clone(), io::resolve_machine(Some(v))?)))
                .collect::<Result<_>>()?;
            let r = sensitivity_sweep(&graphs, &base, &variants, modes, &sim.options()?)
                .map_err(|e| CliError::model("sweep", e))?;
            let text = match output.format {
                Format::Json => to_json(&r),
                Format::Csv => sweep_csv(&r),
            };
            emit(&output.out, text)
        }
        Command::CheckQueue { consumers, depth, items, fault, all } => {
            let configs: Vec<CheckConfig> = if *all {
                let mut v = Vec::new();
                for c in 1..=2 {
                    for d in 2..=3 {
                        for i in 1..=*items {
                            v.push(CheckConfig { consumers: c, depth: d, items: i, fault: (*fault).into() });
                        }
                    }
                }
                v
            } else {
                vec![CheckConfig { consumers: *consumers, depth: *depth, items: *items, fault: (*fault).into() }]
            };
            if configs.iter().any(|c| c.consumers == 0 || c.depth < 2) {
                return Err(CliError::Usage("need at least one consumer and depth >= 2".into()));
            }
            let reports: Vec<_> = configs.iter().map(explore).collect();
            let failed = reports.iter().any(|r| !r.passed());
            Ok(Outcome { stdout: to_json(&reports), code: if failed { 2 } else { 0 } })
        }
        Command::CheckIlp { instances, max_stages, max_sms } => {
            if *max_stages == 0 || *max_sms == 0 {
                return Err(CliError::Usage("--max-stages and --max-sms must be positive".into()));
            }
            let r = check_ilp(cli.seed, *instances, *max_stages, *max_sms);
            let code = if r.mismatches.is_empty() { 0 } else { 2 };
            Ok(Outcome { stdout: to_json(&r), code })
        }
    }
}
