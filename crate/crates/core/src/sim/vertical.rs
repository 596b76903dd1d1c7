//! Vertical fusion: chains of operators run as one kernel in which every CTA
//! owns a row shard and keeps intermediates in shared memory. SIMT and
//! TENSOR phases of a CTA run one after the other.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::graph::{op_work, OpClass, OpKind, OperatorGraph, OperatorNode};
use crate::machine::MachineConfig;
use crate::math::div_ceil;
use crate::select::{is_contiguous, select_runs, PatternLibrary, SelectOptions};
use crate::{Error, Result};

use super::bsp::{bsp_kernel_time, memory_s, run_kernel, wave_compute_s};
use super::{EventKind, ExecTrace, Mode, Recorder};

/// Chains a fusing compiler recognizes.
pub const VERTICAL_LIBRARY: &str = "\
mlp: (Linear|Attention) Elementwise* (Linear|Attention) Elementwise*
epilogue: (Linear|Attention|Reduce|LayerNorm|Softmax) Elementwise Elementwise*
";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionGroup {
    pub pattern: String,
    /// Chain members, producer first.
    pub members: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionPlan {
    pub groups: Vec<FusionGroup>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerticalOptions {
    /// Keep only groups that beat running their members unfused.
    pub profitable_only: bool,
}

impl Default for VerticalOptions {
    fn default() -> Self {
        Self { profitable_only: true }
    }
}

/// Longest prefix of `run` that forms a forward-pass chain.
fn chain_prefix(graph: &OperatorGraph, run: &[&OperatorNode]) -> usize {
    let mut len = 0;
    for (i, node) in run.iter().enumerate() {
        if node.is_backward() {
            break;
        }
        if i > 0 {
            let prev = run[i - 1];
            let single = graph.consumers(&prev.id).map(|c| c.len() == 1).unwrap_or(false);
            if !single || !node.inputs.contains(&prev.id) {
                break;
            }
        }
        len = i + 1;
    }
    if len < 2 {
        0
    } else {
        len
    }
}

/// Fusion groups a compiler would form: pattern matches over the
/// topological order trimmed to forward-pass chains.
pub fn vertical_plan(graph: &OperatorGraph, cfg: &MachineConfig, opts: &VerticalOptions) -> FusionPlan {
    let lib = PatternLibrary::parse(VERTICAL_LIBRARY).expect("built-in library parses");
    let runs = select_runs(graph, &lib, &SelectOptions::default(), |run| chain_prefix(graph, run));
    let groups = runs
        .into_iter()
        .map(|(pattern, members)| FusionGroup { pattern, members })
        .filter(|g| {
            if !opts.profitable_only {
                return true;
            }
            let nodes: Vec<&OperatorNode> = g.members.iter().filter_map(|m| graph.node(m).ok()).collect();
            let fused = group_cost(graph, &nodes, cfg).time_s();
            let unfused: f64 = nodes.iter().map(|n| bsp_kernel_time(n, cfg)).sum();
            fused <= unfused
        })
        .collect();
    FusionPlan { groups }
}

struct Spill {
    tensor: String,
    bytes: u64,
}

struct GroupCost {
    ctas: u64,
    waves: u64,
    tensor_flops: u64,
    simt_flops: u64,
    compute_s: f64,
    dram_bytes: u64,
    spills: Vec<Spill>,
    memory_s: f64,
    spill_latency_s: f64,
}

impl GroupCost {
    fn time_s(&self) -> f64 {
        self.compute_s.max(self.memory_s) + self.spill_latency_s
    }
}

fn group_cost(graph: &OperatorGraph, nodes: &[&OperatorNode], cfg: &MachineConfig) -> GroupCost {
    let head = nodes[0];
    let rows = head.output_shape.rows();
    let ctas = div_ceil(rows, cfg.vertical_tile_rows).max(1);
    let waves = div_ceil(ctas, u64::from(cfg.sm_count));
    let ids: BTreeSet<&str> = nodes.iter().map(|n| n.id.as_str()).collect();

    let mut dram = 0u64;
    let mut tensor_flops = 0u64;
    let mut simt_flops = 0u64;
    let mut compute_s = 0.0;
    let mut spills = Vec::new();
    for (i, n) in nodes.iter().enumerate() {
        let work = op_work(n);
        match n.class() {
            OpClass::Tensor => tensor_flops += work.flops,
            OpClass::Simt => simt_flops += work.flops,
        }
        compute_s += wave_compute_s(work.flops, ctas, cfg.flops_per_sm(n.class()), cfg);
        let prev = if i > 0 { Some(nodes[i - 1].id.as_str()) } else { None };
        for op in &n.operands {
            if op.source.as_deref().is_none() || op.source.as_deref() != prev {
                dram += op.shape.bytes();
            }
        }
        let consumers = graph.consumers(&n.id).unwrap_or_default();
        let leaves = n.is_saved() || consumers.is_empty() || consumers.iter().any(|c| !ids.contains(c.id.as_str()));
        if leaves {
            dram += n.output_shape.bytes();
        }
        // an intermediate feeding a non-elementwise consumer is staged whole
        if let Some(next) = nodes.get(i + 1) {
            if next.kind != OpKind::Elementwise {
                let bytes = spill_bytes(n, cfg);
                if bytes > 0 {
                    spills.push(Spill { tensor: n.id.clone(), bytes });
                }
            }
        }
    }
    let spill_total: u64 = spills.iter().map(|s| 2 * s.bytes).sum();
    let memory = memory_s(dram + spill_total, ctas, cfg);
    GroupCost {
        ctas,
        waves,
        tensor_flops,
        simt_flops,
        compute_s,
        dram_bytes: dram,
        spill_latency_s: (spills.len() as u64 * waves) as f64 * cfg.dram_latency_s(),
        spills,
        memory_s: memory,
    }
}

/// Bytes of `node`'s output that do not fit in shared memory, over all
/// CTAs, when each CTA stages its whole row shard plus an operand slice.
fn spill_bytes(node: &OperatorNode, cfg: &MachineConfig) -> u64 {
    let shape = &node.output_shape;
    let dtype = u64::from(shape.dtype_bytes);
    let rows = shape.rows();
    let mut total = 0;
    let mut start = 0;
    while start < rows {
        let r = cfg.vertical_tile_rows.min(rows - start);
        let tile = r * shape.row_bytes();
        let working = tile + r * cfg.vertical_staging_cols * dtype;
        if working > cfg.smem_per_sm_bytes {
            total += (working - cfg.smem_per_sm_bytes).min(tile);
        }
        start += r;
    }
    total
}

fn validate_plan<'g>(graph: &'g OperatorGraph, plan: &FusionPlan) -> Result<Vec<Vec<&'g OperatorNode>>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for g in &plan.groups {
        if g.members.is_empty() {
            return Err(Error::InvalidFusionPlan("empty group".into()));
        }
        let nodes: Vec<&OperatorNode> = g.members.iter().map(|m| graph.node(m)).collect::<Result<_>>()?;
        for (i, n) in nodes.iter().enumerate() {
            if !seen.insert(n.id.as_str()) {
                return Err(Error::InvalidFusionPlan(format!("`{}` is in more than one group", n.id)));
            }
            if i > 0 {
                let prev = nodes[i - 1];
                let single = graph.consumers(&prev.id)?.len() == 1;
                if !n.inputs.contains(&prev.id) || !single {
                    return Err(Error::InvalidFusionPlan(format!(
                        "`{}` -> `{}` is not a chain link",
                        prev.id, n.id
                    )));
                }
            }
        }
        if !is_contiguous(graph, &g.members)? {
            return Err(Error::InvalidFusionPlan(format!("group {:?} is not contiguous", g.members)));
        }
        out.push(nodes);
    }
    Ok(out)
}

pub fn run_vertical(graph: &OperatorGraph, plan: &FusionPlan, cfg: &MachineConfig) -> Result<ExecTrace> {
    cfg.validate()?;
    let groups = validate_plan(graph, plan)?;
    let mut rec = Recorder::new(Mode::Vertical);
    // A group runs when its last member would, so every outside producer
    // it reads from has already finished.
    let last_of: Vec<&str> = groups.iter().map(|g| g[g.len() - 1].id.as_str()).collect();
    let grouped: BTreeSet<&str> = groups.iter().flatten().map(|n| n.id.as_str()).collect();
    for node in graph.topo() {
        if let Some(gi) = last_of.iter().position(|&l| l == node.id) {
            run_group(&mut rec, graph, &groups[gi], cfg);
        } else if !grouped.contains(node.id.as_str()) {
            run_kernel(&mut rec, node, cfg);
        }
    }
    Ok(rec.finish(cfg))
}

fn run_group(rec: &mut Recorder, graph: &OperatorGraph, nodes: &[&OperatorNode], cfg: &MachineConfig) {
    let c = group_cost(graph, nodes, cfg);
    let name = nodes.iter().map(|n| n.id.as_str()).collect::<Vec<_>>().join("+");
    let start = rec.now;
    let dur = c.time_s();
    let end = start + dur;
    let class = if c.tensor_flops > 0 { OpClass::Tensor } else { OpClass::Simt };
    let spill_total: u64 = c.spills.iter().map(|s| 2 * s.bytes).sum();
    let dram = c.dram_bytes + spill_total;

    rec.event(start, start, EventKind::Dispatch { kernel: name.clone(), class, ctas: c.ctas.min(u32::MAX as u64) as u32 });
    rec.event(start, start + c.compute_s, EventKind::Compute { kernel: name.clone(), flops: c.tensor_flops + c.simt_flops });
    rec.event(start, start + c.memory_s, EventKind::Memory { kernel: name.clone(), dram_bytes: dram, l2_bytes: dram });
    let latency_cycles = c.waves * cfg.dram_latency_cycles;
    let mut t = start + c.compute_s.max(c.memory_s);
    for s in &c.spills {
        let lat = c.waves as f64 * cfg.dram_latency_s();
        rec.event(
            t,
            t + lat,
            EventKind::Spill { kernel: name.clone(), tensor: s.tensor.clone(), dram_bytes: 2 * s.bytes, latency_cycles },
        );
        t += lat;
    }
    if dur > 0.0 {
        let tensor = c.tensor_flops as f64 / (cfg.peak_flops(OpClass::Tensor) * dur);
        let simt = c.simt_flops as f64 / (cfg.peak_flops(OpClass::Simt) * dur);
        rec.segment(start, end, tensor.max(simt), dram as f64 / (cfg.dram_bytes_per_s() * dur));
    }
    rec.event(end, end, EventKind::Barrier);
    rec.dram_bytes += dram;
    rec.l2_bytes += dram;
    rec.spill_bytes += spill_total;
    rec.tensor_flops += c.tensor_flops;
    rec.simt_flops += c.simt_flops;
    rec.now = end;
}
