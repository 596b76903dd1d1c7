//! Cycle-approximate GPU model.
//!
//! Three execution modes share one machine description and one trace
//! format: bulk-synchronous kernels separated by global barriers, vertically
//! fused kernels that stage intermediates in shared memory, and spatial
//! pipelines whose stages run concurrently and exchange tiles through L2
//! queues. Durations are analytic (flops over pipe peak, bytes over the
//! bandwidth share a transfer receives).

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::graph::{OpClass, OperatorGraph};
use crate::machine::MachineConfig;
use crate::math::{ceil, floor};
use crate::pipeline::PipelineOptions;
use crate::select::{PatternLibrary, SelectOptions};
use crate::{Error, Result};

mod bsp;
mod dataflow;
mod fluid;
mod sched;
mod vertical;

pub use bsp::{bsp_kernel_time, run_bsp};
pub use dataflow::{build_launch, run_dataflow, run_graph_dataflow, LaunchKernel, SpatialPipelineLaunch};
pub use sched::{grid_schedule, greedy_schedule, pairing_violations, paired_fraction, Placement};
pub use vertical::{run_vertical, vertical_plan, FusionGroup, FusionPlan, VerticalOptions, VERTICAL_LIBRARY};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Bsp,
    Vertical,
    Dataflow,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Bsp, Mode::Vertical, Mode::Dataflow];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Bsp => "bsp",
            Mode::Vertical => "vertical",
            Mode::Dataflow => "dataflow",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidConfig(alloc::format!("unknown mode `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StallReason {
    /// Waiting for the producer to publish.
    Empty,
    /// Waiting for every consumer to free the entry.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EventKind {
    Dispatch { kernel: String, class: OpClass, ctas: u32 },
    Compute { kernel: String, flops: u64 },
    Memory { kernel: String, dram_bytes: u64, l2_bytes: u64 },
    Stall { stage: String, queue: String, reason: StallReason },
    Spill { kernel: String, tensor: String, dram_bytes: u64, latency_cycles: u64 },
    Barrier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub start_ns: f64,
    pub end_ns: f64,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtilSample {
    pub start_ns: f64,
    pub duration_ns: f64,
    /// Busiest pipe's occupancy across all SMs.
    pub sm_util: f64,
    pub dram_util: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineRecord {
    pub sf_id: String,
    pub steps: u64,
    pub stages: Vec<String>,
    pub ctas: Vec<u32>,
    pub modeled_throughput: f64,
    pub placements: Vec<Placement>,
    pub start_ns: f64,
    pub end_ns: f64,
    /// Stall time per stage.
    pub stall_ns: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecTrace {
    pub mode: Mode,
    pub events: Vec<Event>,
    pub samples: Vec<UtilSample>,
    pub dram_bytes: u64,
    pub l2_bytes: u64,
    /// Part of `dram_bytes` caused by shared-memory spills.
    pub spill_bytes: u64,
    pub tensor_flops: u64,
    pub simt_flops: u64,
    pub total_ns: f64,
    pub total_cycles: u64,
    pub pipelines: Vec<PipelineRecord>,
}

impl ExecTrace {
    pub fn runtime_s(&self) -> f64 {
        self.total_ns * 1e-9
    }

    /// SM-cycles of pure arithmetic on each pipe class.
    pub fn compute_cycles(&self, cfg: &MachineConfig) -> (u64, u64) {
        let per_cycle = |class| cfg.flops_per_sm(class) / (cfg.clock_ghz * 1e9);
        (
            crate::math::round(self.tensor_flops as f64 / per_cycle(OpClass::Tensor)) as u64,
            crate::math::round(self.simt_flops as f64 / per_cycle(OpClass::Simt)) as u64,
        )
    }

    pub fn stall_ns(&self) -> f64 {
        self.events
            .iter()
            .filter(|e| matches!(e.kind, EventKind::Stall { .. }))
            .map(|e| e.end_ns - e.start_ns)
            .sum()
    }
}

/// Options for whole-graph simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct SimOptions {
    pub library: PatternLibrary,
    pub select: SelectOptions,
    pub pipeline: PipelineOptions,
    pub vertical: VerticalOptions,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            library: PatternLibrary::default_library(),
            select: SelectOptions::default(),
            pipeline: PipelineOptions::default(),
            vertical: VerticalOptions::default(),
        }
    }
}

pub fn simulate(graph: &OperatorGraph, mode: Mode, cfg: &MachineConfig) -> Result<ExecTrace> {
    simulate_with(graph, mode, cfg, &SimOptions::default())
}

pub fn simulate_with(graph: &OperatorGraph, mode: Mode, cfg: &MachineConfig, opts: &SimOptions) -> Result<ExecTrace> {
    cfg.validate()?;
    match mode {
        Mode::Bsp => run_bsp(graph, cfg),
        Mode::Vertical => {
            let plan = vertical_plan(graph, cfg, &opts.vertical);
            run_vertical(graph, &plan, cfg)
        }
        Mode::Dataflow => run_graph_dataflow(graph, &opts.library, &opts.select, &opts.pipeline, cfg),
    }
}

/// Accumulates events, counters and utilization while a mode runs.
pub(crate) struct Recorder {
    mode: Mode,
    /// Current simulated time in seconds.
    pub now: f64,
    events: Vec<Event>,
    segments: Vec<(f64, f64, f64, f64)>,
    pub dram_bytes: u64,
    pub l2_bytes: u64,
    pub spill_bytes: u64,
    pub tensor_flops: u64,
    pub simt_flops: u64,
    pub pipelines: Vec<PipelineRecord>,
}

impl Recorder {
    pub fn new(mode: Mode) -> Self {
        Self {
            mode,
            now: 0.0,
            events: Vec::new(),
            segments: Vec::new(),
            dram_bytes: 0,
            l2_bytes: 0,
            spill_bytes: 0,
            tensor_flops: 0,
            simt_flops: 0,
            pipelines: Vec::new(),
        }
    }

    pub fn event(&mut self, start_s: f64, end_s: f64, kind: EventKind) {
        self.events.push(Event { start_ns: start_s * 1e9, end_ns: end_s * 1e9, kind });
    }

    /// Utilization held constant over `[start, end)`.
    pub fn segment(&mut self, start: f64, end: f64, sm_util: f64, dram_util: f64) {
        if end > start {
            self.segments.push((start, end, sm_util.clamp(0.0, 1.0), dram_util.clamp(0.0, 1.0)));
        }
    }

    pub fn add_flops(&mut self, class: OpClass, flops: u64) {
        match class {
            OpClass::Tensor => self.tensor_flops += flops,
            OpClass::Simt => self.simt_flops += flops,
        }
    }

    pub fn finish(mut self, cfg: &MachineConfig) -> ExecTrace {
        self.events.sort_by(|a, b| a.start_ns.total_cmp(&b.start_ns).then(a.end_ns.total_cmp(&b.end_ns)));
        let samples = resample(&self.segments, self.now, cfg.sample_interval_ns * 1e-9);
        ExecTrace {
            mode: self.mode,
            events: self.events,
            samples,
            dram_bytes: self.dram_bytes,
            l2_bytes: self.l2_bytes,
            spill_bytes: self.spill_bytes,
            tensor_flops: self.tensor_flops,
            simt_flops: self.simt_flops,
            total_ns: self.now * 1e9,
            total_cycles: cfg.cycles(self.now),
            pipelines: self.pipelines,
        }
    }
}

/// Time-weighted averages of utilization segments over fixed bins. Gaps
/// between segments count as idle.
fn resample(segments: &[(f64, f64, f64, f64)], total: f64, interval: f64) -> Vec<UtilSample> {
    if total <= 0.0 {
        return Vec::new();
    }
    let bins = ceil(total / interval).max(1.0) as usize;
    let mut sm = alloc::vec![0.0f64; bins];
    let mut dram = alloc::vec![0.0f64; bins];
    for &(start, end, s, d) in segments {
        let first = (floor(start / interval) as usize).min(bins - 1);
        let last = (floor(end / interval) as usize).min(bins - 1);
        for b in first..=last {
            let lo = start.max(b as f64 * interval);
            let hi = end.min(((b + 1) as f64 * interval).min(total));
            if hi > lo {
                sm[b] += s * (hi - lo);
                dram[b] += d * (hi - lo);
            }
        }
    }
    (0..bins)
        .map(|b| {
            let lo = b as f64 * interval;
            let width = (total.min(lo + interval) - lo).max(0.0);
            let avg = |x: f64| if width > 0.0 { (x / width).clamp(0.0, 1.0) } else { 0.0 };
            UtilSample { start_ns: lo * 1e9, duration_ns: width * 1e9, sm_util: avg(sm[b]), dram_util: avg(dram[b]) }
        })
        .filter(|s| s.duration_ns > 0.0)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resample_partial_bins() {
        let s = resample(&[(0.0, 1.5e-6, 0.5, 1.0)], 2.5e-6, 1e-6);
        assert_eq!(s.len(), 3);
        assert!((s[0].sm_util - 0.5).abs() < 1e-12);
        assert!((s[1].sm_util - 0.25).abs() < 1e-12);
        assert_eq!(s[2].sm_util, 0.0);
        assert!((s[2].duration_ns - 500.0).abs() < 1e-6);
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("Dataflow".parse::<Mode>().unwrap(), Mode::Dataflow);
        assert!("spatial".parse::<Mode>().is_err());
    }
}
