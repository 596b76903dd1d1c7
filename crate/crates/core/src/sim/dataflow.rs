//! Spatial-pipeline execution.
//!
//! Each stage is one agent of the queue protocol. For step `k` it acquires
//! entry `k` of every input queue and of its output queue, pays the
//! synchronization latency, runs its share of the work as a fluid job, then
//! releases everything. A stage that finds a queue not ready stalls and
//! re-polls on a fixed cadence. All stages of a pipeline share DRAM, L2 and
//! the queue fabric.

use alloc::collections::{BTreeMap, BTreeSet, BinaryHeap};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Reverse;

use serde::{Deserialize, Serialize};

use crate::balance::{profile_pipeline, solve_allocation, Allocation};
use crate::graph::{OpClass, OperatorGraph};
use crate::machine::MachineConfig;
use crate::math::ceil;
use crate::pipeline::{design_pipeline, step_share, PipelineOptions, PipelineSpec, PipelineStage, QueueNode};
use crate::queue::{fabric_gbps, Acquire, FabricQueue, QueueState};
use crate::select::{select_subgraphs_with, PatternLibrary, SelectOptions};
use crate::{Error, Result};

use super::bsp::run_kernel;
use super::fluid::{allocate, Job, DRAM};
use super::sched::grid_schedule;
use super::{EventKind, ExecTrace, Mode, PipelineRecord, Recorder, StallReason};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LaunchKernel {
    pub stage: String,
    pub class: OpClass,
    pub ctas: u32,
}

/// Everything needed to start a pipeline: one kernel per stage with its CTA
/// budget, the queues binding them, and the work per stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SpatialPipelineLaunch {
    pub sf_id: String,
    pub steps: u64,
    pub kernels: Vec<LaunchKernel>,
    /// (producer stage, consumer stage) through some queue.
    pub edges: Vec<(String, String)>,
    pub queues: Vec<QueueNode>,
    pub stages: Vec<PipelineStage>,
    pub modeled_throughput: f64,
}

pub fn build_launch(spec: &PipelineSpec, alloc: &Allocation) -> SpatialPipelineLaunch {
    let kernels = spec
        .stages
        .iter()
        .zip(&alloc.stages)
        .map(|(s, a)| LaunchKernel { stage: s.id.clone(), class: s.class, ctas: a.ctas })
        .collect();
    let edges = spec
        .queues
        .iter()
        .flat_map(|q| q.consumers.iter().map(move |c| (q.producer.clone(), c.clone())))
        .collect();
    SpatialPipelineLaunch {
        sf_id: spec.sf_id.clone(),
        steps: spec.steps,
        kernels,
        edges,
        queues: spec.queues.clone(),
        stages: spec.stages.clone(),
        modeled_throughput: alloc.throughput,
    }
}

pub fn run_dataflow(launch: &SpatialPipelineLaunch, cfg: &MachineConfig) -> Result<ExecTrace> {
    cfg.validate()?;
    let mut rec = Recorder::new(Mode::Dataflow);
    simulate_pipeline(&mut rec, launch, cfg)?;
    Ok(rec.finish(cfg))
}

/// Runs the graph with every selected sf-node as a pipeline and all other
/// operators as bulk-synchronous kernels.
pub fn run_graph_dataflow(
    graph: &OperatorGraph,
    lib: &PatternLibrary,
    select: &SelectOptions,
    opts: &PipelineOptions,
    cfg: &MachineConfig,
) -> Result<ExecTrace> {
    cfg.validate()?;
    let sfnodes = select_subgraphs_with(graph, lib, select);
    let mut specs = Vec::with_capacity(sfnodes.len());
    for sf in &sfnodes {
        specs.push(design_pipeline(sf, graph, opts)?);
    }
    let mut rec = Recorder::new(Mode::Dataflow);
    for unit in unit_order(graph, &specs)? {
        match unit {
            Unit::Node(id) => run_kernel(&mut rec, graph.node(id)?, cfg),
            Unit::Pipeline(i) => {
                let spec = &specs[i];
                let profiles = profile_pipeline(spec, cfg);
                let alloc = solve_allocation(spec, &profiles, cfg)?;
                simulate_pipeline(&mut rec, &build_launch(spec, &alloc), cfg)?;
            }
        }
    }
    Ok(rec.finish(cfg))
}

enum Unit<'a> {
    Node(&'a str),
    Pipeline(usize),
}

/// Topological order of the graph with each pipeline collapsed to one
/// vertex; ties go to the unit whose earliest node comes first.
fn unit_order<'a>(graph: &'a OperatorGraph, specs: &[PipelineSpec]) -> Result<Vec<Unit<'a>>> {
    let ids = graph.topo_ids();
    let mut unit_of: Vec<usize> = Vec::with_capacity(ids.len());
    let mut member_of: BTreeMap<&str, usize> = BTreeMap::new();
    for (p, s) in specs.iter().enumerate() {
        for m in &s.members {
            member_of.insert(m.as_str(), p);
        }
    }
    // units 0..specs.len() are pipelines, the rest single nodes
    let mut first_pos = vec![usize::MAX; specs.len()];
    let mut node_units: Vec<&str> = Vec::new();
    for (pos, id) in ids.iter().enumerate() {
        match member_of.get(id) {
            Some(&p) => {
                first_pos[p] = first_pos[p].min(pos);
                unit_of.push(p);
            }
            None => {
                node_units.push(id);
                first_pos.push(pos);
                unit_of.push(specs.len() + node_units.len() - 1);
            }
        }
    }
    let n = first_pos.len();
    let mut succ: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    let mut indeg = vec![0usize; n];
    let pos_of: BTreeMap<&str, usize> = ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
    for e in graph.edges() {
        let (a, b) = (unit_of[pos_of[e.producer.as_str()]], unit_of[pos_of[e.consumer.as_str()]]);
        if a != b && succ[a].insert(b) {
            indeg[b] += 1;
        }
    }
    let mut heap: BinaryHeap<Reverse<(usize, usize)>> =
        (0..n).filter(|&u| indeg[u] == 0).map(|u| Reverse((first_pos[u], u))).collect();
    let mut out = Vec::with_capacity(n);
    while let Some(Reverse((_, u))) = heap.pop() {
        out.push(if u < specs.len() { Unit::Pipeline(u) } else { Unit::Node(node_units[u - specs.len()]) });
        for &v in &succ[u] {
            indeg[v] -= 1;
            if indeg[v] == 0 {
                heap.push(Reverse((first_pos[v], v)));
            }
        }
    }
    if out.len() != n {
        return Err(Error::InvalidFusionPlan("sf-nodes are not contiguous".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Phase {
    /// Acquiring queue entries, possibly blocked.
    Acquire,
    Sync { until: f64 },
    Run { start: f64, progress: f64 },
    Done,
}

struct Blocked {
    since: f64,
    queue: usize,
    reason: StallReason,
    wake: Option<f64>,
}

struct StageSim {
    ctas: u32,
    step: u64,
    phase: Phase,
    /// (queue index, consumer slot) per input queue.
    inputs: Vec<(usize, usize)>,
    output: Option<usize>,
    held_in: Vec<Option<usize>>,
    held_out: Option<usize>,
    blocked: Option<Blocked>,
    job: Option<Job>,
    stall_s: f64,
}

const EPS: f64 = 1e-15;

pub(crate) fn simulate_pipeline(rec: &mut Recorder, launch: &SpatialPipelineLaunch, cfg: &MachineConfig) -> Result<()> {
    let placements = grid_schedule(launch, cfg)?;
    let footprint: u64 = launch.queues.iter().map(QueueNode::footprint_bytes).sum();
    if footprint > cfg.l2_capacity_bytes {
        return Err(Error::QueueFootprint { bytes: footprint, capacity: cfg.l2_capacity_bytes });
    }
    let steps = launch.steps.max(1);
    let qindex: BTreeMap<&str, usize> = launch.queues.iter().enumerate().map(|(i, q)| (q.id.as_str(), i)).collect();
    let mut queues: Vec<QueueState> =
        launch.queues.iter().map(|q| QueueState::new(q.depth, q.payload_bytes, q.consumers.len())).collect();

    let mut sims = Vec::with_capacity(launch.stages.len());
    for (stage, kernel) in launch.stages.iter().zip(&launch.kernels) {
        let mut inputs = Vec::new();
        for qid in &stage.input_queues {
            let qi = *qindex.get(qid.as_str()).ok_or_else(|| Error::InvalidConfig(format!("unknown queue `{qid}`")))?;
            let slot = launch.queues[qi]
                .consumers
                .iter()
                .position(|c| *c == stage.id)
                .ok_or_else(|| Error::InvalidConfig(format!("stage `{}` is not a consumer of `{qid}`", stage.id)))?;
            inputs.push((qi, slot));
        }
        let output = stage.output_queue.as_deref().and_then(|q| qindex.get(q).copied());
        sims.push(StageSim {
            ctas: kernel.ctas.max(1),
            step: 0,
            phase: Phase::Acquire,
            held_in: vec![None; inputs.len()],
            inputs,
            output,
            held_out: None,
            blocked: None,
            job: None,
            stall_s: 0.0,
        });
    }

    // Every producer CTA owns a physical ring, so the fabric serves as many
    // queues as there are producer CTAs.
    let producer_ctas = |q: &QueueNode| {
        launch.kernels.iter().find(|k| k.stage == q.producer).map(|k| k.ctas.max(1)).unwrap_or(1)
    };
    let fabric: Vec<FabricQueue> = launch
        .queues
        .iter()
        .map(|q| FabricQueue { payload_bytes: q.payload_bytes, depth: q.depth, rings: producer_ctas(q) })
        .collect();
    let queue_cap = if fabric.is_empty() { f64::INFINITY } else { fabric_gbps(&fabric, cfg) * 1e9 };
    let caps = [cfg.dram_bytes_per_s(), cfg.l2_bytes_per_s(), queue_cap];
    let start = rec.now;
    for k in &launch.kernels {
        rec.event(start, start, EventKind::Dispatch { kernel: k.stage.clone(), class: k.class, ctas: k.ctas });
    }
    let mut t = start;
    let mut dram_total = vec![0u64; sims.len()];
    let mut l2_total = vec![0u64; sims.len()];

    loop {
        // Let every stage act at time `t` until nothing changes.
        let mut changed = true;
        while changed {
            changed = false;
            for i in 0..sims.len() {
                changed |= advance(i, &mut sims, &mut queues, launch, t, cfg, rec)?;
            }
        }
        if sims.iter().all(|s| s.phase == Phase::Done) {
            break;
        }

        let running: Vec<usize> = (0..sims.len()).filter(|&i| matches!(sims[i].phase, Phase::Run { .. })).collect();
        let jobs: Vec<&Job> = running.iter().map(|&i| sims[i].job.as_ref().expect("running stage has a job")).collect();
        let rates = allocate(&jobs, &caps);

        let mut dt = f64::INFINITY;
        for (r, &i) in rates.iter().zip(&running) {
            if let Phase::Run { progress, .. } = sims[i].phase {
                dt = dt.min(if r.is_infinite() { 0.0 } else { (1.0 - progress) / r });
            }
        }
        for s in &sims {
            match (&s.phase, &s.blocked) {
                (Phase::Sync { until }, _) => dt = dt.min(until - t),
                (Phase::Acquire, Some(Blocked { wake: Some(w), .. })) => dt = dt.min(w - t),
                _ => {}
            }
        }
        if !dt.is_finite() {
            return Err(Error::InvalidConfig(format!("pipeline {} deadlocked at {t} s", launch.sf_id)));
        }
        let dt = dt.max(0.0);

        if dt > 0.0 {
            let (mut tensor, mut simt, mut dram) = (0.0, 0.0, 0.0);
            for (r, &i) in rates.iter().zip(&running) {
                let st = &launch.stages[i];
                let job = sims[i].job.as_ref().expect("job");
                tensor += r * step_share(st.tensor_flops, steps, sims[i].step) as f64;
                simt += r * step_share(st.simt_flops, steps, sims[i].step) as f64;
                dram += r * job.bytes[DRAM];
            }
            let sm = (tensor / cfg.peak_flops(OpClass::Tensor)).max(simt / cfg.peak_flops(OpClass::Simt));
            rec.segment(t, t + dt, sm, dram / cfg.dram_bytes_per_s());
        }

        let t_next = t + dt;
        for (r, &i) in rates.iter().zip(&running) {
            let Phase::Run { start: job_start, progress } = sims[i].phase else { continue };
            let remaining = if r.is_infinite() { 0.0 } else { (1.0 - progress) / r };
            if remaining <= dt * (1.0 + 1e-12) + EPS {
                finish_step(i, &mut sims, &mut queues, launch, job_start, t_next, rec, &mut dram_total, &mut l2_total)?;
            } else {
                sims[i].phase = Phase::Run { start: job_start, progress: progress + r * dt };
            }
        }
        t = t_next;
    }

    let end = t;
    for (i, st) in launch.stages.iter().enumerate() {
        rec.event(
            start,
            end,
            EventKind::Memory { kernel: st.id.clone(), dram_bytes: dram_total[i], l2_bytes: l2_total[i] },
        );
    }
    rec.event(end, end, EventKind::Barrier);
    rec.pipelines.push(PipelineRecord {
        sf_id: launch.sf_id.clone(),
        steps,
        stages: launch.stages.iter().map(|s| s.id.clone()).collect(),
        ctas: launch.kernels.iter().map(|k| k.ctas).collect(),
        modeled_throughput: launch.modeled_throughput,
        placements,
        start_ns: start * 1e9,
        end_ns: end * 1e9,
        stall_ns: sims.iter().map(|s| s.stall_s * 1e9).collect(),
    });
    rec.now = end;
    Ok(())
}

/// Next poll instant at or after `t` for a wait that began at `since`.
fn next_poll(since: f64, t: f64, poll: f64) -> f64 {
    let n = ceil((t - since) / poll - 1e-9).max(0.0);
    since + n * poll
}

#[allow(clippy::too_many_arguments)]
fn advance(
    i: usize,
    sims: &mut [StageSim],
    queues: &mut [QueueState],
    launch: &SpatialPipelineLaunch,
    t: f64,
    cfg: &MachineConfig,
    rec: &mut Recorder,
) -> Result<bool> {
    let poll = cfg.poll_interval_ns * 1e-9;
    let sync = cfg.queue.sync_latency_s();
    let s = &mut sims[i];
    match s.phase {
        Phase::Done | Phase::Run { .. } => Ok(false),
        Phase::Sync { until } => {
            if t + EPS >= until {
                s.job = Some(make_job(&launch.stages[i], s, launch, cfg));
                s.phase = Phase::Run { start: t, progress: 0.0 };
                Ok(true)
            } else {
                Ok(false)
            }
        }
        Phase::Acquire => {
            if let Some(b) = &mut s.blocked {
                let ready = match b.reason {
                    StallReason::Empty => {
                        let slot = s.inputs.iter().find(|(q, _)| *q == b.queue).map(|&(_, c)| c).unwrap_or(0);
                        queues[b.queue].rd_ready(slot)
                    }
                    StallReason::Full => queues[b.queue].wr_ready(),
                };
                if !ready {
                    return Ok(false);
                }
                let wake = *b.wake.get_or_insert_with(|| next_poll(b.since, t, poll));
                if t + EPS < wake {
                    return Ok(false);
                }
                let qid = launch.queues[b.queue].id.clone();
                rec.event(
                    b.since,
                    t,
                    EventKind::Stall { stage: launch.stages[i].id.clone(), queue: qid, reason: b.reason },
                );
                s.stall_s += t - b.since;
                s.blocked = None;
            }
            for j in 0..s.inputs.len() {
                if s.held_in[j].is_some() {
                    continue;
                }
                let (q, slot) = s.inputs[j];
                match queues[q].rd_acquire(slot)? {
                    Acquire::Granted { entry, seq } => {
                        debug_assert_eq!(seq, s.step);
                        s.held_in[j] = Some(entry);
                    }
                    Acquire::Blocked { .. } => {
                        s.blocked = Some(Blocked { since: t, queue: q, reason: StallReason::Empty, wake: None });
                        return Ok(true);
                    }
                }
            }
            if let (Some(q), None) = (s.output, s.held_out) {
                match queues[q].wr_acquire(crate::queue::Agent::Producer)? {
                    Acquire::Granted { entry, .. } => s.held_out = Some(entry),
                    Acquire::Blocked { .. } => {
                        s.blocked = Some(Blocked { since: t, queue: q, reason: StallReason::Full, wake: None });
                        return Ok(true);
                    }
                }
            }
            let pairs = s.inputs.len() + usize::from(s.output.is_some());
            s.phase = Phase::Sync { until: t + pairs as f64 * sync };
            Ok(true)
        }
    }
}

fn make_job(stage: &PipelineStage, s: &StageSim, launch: &SpatialPipelineLaunch, cfg: &MachineConfig) -> Job {
    let steps = launch.steps.max(1);
    let share = |total: u64| step_share(total, steps, s.step) as f64;
    let dram = share(stage.dram_read_bytes) + share(stage.dram_write_bytes);
    let read: f64 = s.inputs.iter().map(|&(q, _)| share(launch.queues[q].tensor_bytes)).sum();
    let written = s.output.map(|q| share(launch.queues[q].tensor_bytes)).unwrap_or(0.0);
    let a = f64::from(s.ctas);
    let compute_s = share(stage.tensor_flops) / (a * cfg.flops_per_sm(OpClass::Tensor))
        + share(stage.simt_flops) / (a * cfg.flops_per_sm(OpClass::Simt));
    // the fabric carries each payload once; L2 sees both ends
    Job { compute_s, bytes: [dram, dram + read + written, written], port_bytes_per_s: f64::INFINITY }
}

#[allow(clippy::too_many_arguments)]
fn finish_step(
    i: usize,
    sims: &mut [StageSim],
    queues: &mut [QueueState],
    launch: &SpatialPipelineLaunch,
    job_start: f64,
    t: f64,
    rec: &mut Recorder,
    dram_total: &mut [u64],
    l2_total: &mut [u64],
) -> Result<()> {
    let steps = launch.steps.max(1);
    let stage = &launch.stages[i];
    let s = &mut sims[i];
    let k = s.step;
    for j in 0..s.inputs.len() {
        let (q, slot) = s.inputs[j];
        let entry = s.held_in[j].take().expect("input held");
        queues[q].rd_release(slot, entry)?;
    }
    if let Some(q) = s.output {
        let entry = s.held_out.take().expect("output held");
        queues[q].wr_release(entry)?;
    }
    let share = |total: u64| step_share(total, steps, k);
    let dram = share(stage.dram_read_bytes) + share(stage.dram_write_bytes);
    let queue: u64 = s.inputs.iter().map(|&(q, _)| share(launch.queues[q].tensor_bytes)).sum::<u64>()
        + s.output.map(|q| share(launch.queues[q].tensor_bytes)).unwrap_or(0);
    let (tf, sf) = (share(stage.tensor_flops), share(stage.simt_flops));
    rec.dram_bytes += dram;
    rec.l2_bytes += dram + queue;
    rec.tensor_flops += tf;
    rec.simt_flops += sf;
    dram_total[i] += dram;
    l2_total[i] += dram + queue;
    rec.event(job_start, t, EventKind::Compute { kernel: stage.id.clone(), flops: tf + sf });
    s.job = None;
    s.step += 1;
    s.phase = if s.step >= steps { Phase::Done } else { Phase::Acquire };
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::TensorShape;
    use crate::pipeline::StageRole;

    fn cfg() -> MachineConfig {
        MachineConfig { simt_flops_per_sm: 1e12, ..MachineConfig::a100() }
    }

    fn stage(id: &str, step_us: f64, steps: u64, input: Option<&str>, output: Option<&str>) -> PipelineStage {
        PipelineStage {
            id: id.into(),
            nodes: vec![id.into()],
            role: StageRole::Compute,
            class: OpClass::Simt,
            output_shape: TensorShape::new(vec![steps, 1], 2).unwrap(),
            tile_shape: [1, 1],
            tiles_total: steps,
            input_queues: input.into_iter().map(Into::into).collect(),
            output_queue: output.map(Into::into),
            tensor_flops: 0,
            simt_flops: (step_us * 1e-6 * 1e12) as u64 * steps,
            dram_read_bytes: 0,
            dram_write_bytes: 0,
            queue_read_bytes: 0,
            queue_write_bytes: 0,
            bsp_bytes: 0,
        }
    }

    /// Producer feeding one consumer through a depth-2 queue of empty tiles.
    fn two_stage(producer_us: f64, consumer_us: f64, steps: u64) -> SpatialPipelineLaunch {
        let stages = vec![stage("p", producer_us, steps, None, Some("q")), stage("c", consumer_us, steps, Some("q"), None)];
        SpatialPipelineLaunch {
            sf_id: "sf".into(),
            steps,
            kernels: stages.iter().map(|s| LaunchKernel { stage: s.id.clone(), class: s.class, ctas: 1 }).collect(),
            edges: vec![("p".into(), "c".into())],
            queues: vec![QueueNode {
                id: "q".into(),
                producer: "p".into(),
                consumers: vec!["c".into()],
                tensor: "p".into(),
                tensor_bytes: 0,
                payload_bytes: 0,
                depth: 2,
            }],
            stages,
            modeled_throughput: 0.0,
        }
    }

    #[test]
    fn balanced_pipeline_fills_then_streams() {
        let trace = run_dataflow(&two_stage(10.0, 10.0, 16), &cfg()).unwrap();
        let expect = 17.0 * 10e3;
        assert!((trace.total_ns - expect).abs() / expect < 0.02, "{}", trace.total_ns);
        assert_eq!(trace.simt_flops, 2 * 16 * 10_000_000);
    }

    #[test]
    fn slow_consumer_stalls_producer_half_the_time() {
        let trace = run_dataflow(&two_stage(10.0, 20.0, 16), &cfg()).unwrap();
        let rec = &trace.pipelines[0];
        let producer_end = trace
            .events
            .iter()
            .filter(|e| matches!(&e.kind, EventKind::Compute { kernel, .. } if kernel == "p"))
            .map(|e| e.end_ns)
            .fold(0.0, f64::max);
        // steady state starts once the queue is full
        let steady = producer_end - 2.0 * 10e3;
        let frac = rec.stall_ns[0] / steady;
        assert!((frac - 0.5).abs() < 0.05, "{frac}");
        assert!(trace.events.iter().any(|e| matches!(&e.kind, EventKind::Stall { reason: StallReason::Full, .. })));
        // the consumer only waits for the first tile
        assert!(rec.stall_ns[1] < 11e3);
    }

    #[test]
    fn oversized_queues_are_rejected() {
        let mut l = two_stage(10.0, 10.0, 4);
        l.queues[0].payload_bytes = cfg().l2_capacity_bytes;
        assert!(matches!(run_dataflow(&l, &cfg()), Err(Error::QueueFootprint { .. })));
    }
}
