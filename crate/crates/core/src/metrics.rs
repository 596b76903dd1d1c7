//! Reports derived from execution traces.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::graph::OperatorGraph;
use crate::machine::MachineConfig;
use crate::math::{exp, ln};
use crate::sim::{simulate_with, ExecTrace, Mode, SimOptions};
use crate::{Error, Result};

pub const LOW_UTILIZATION: f64 = 1.0 / 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtilizationQuadrants {
    pub both_low: f64,
    pub low_sm: f64,
    pub low_dram: f64,
    pub neither_low: f64,
    pub threshold: f64,
}

/// Fraction of runtime in each SM/DRAM utilization quadrant.
pub fn quadrants(trace: &ExecTrace, threshold: f64) -> Result<UtilizationQuadrants> {
    let total: f64 = trace.samples.iter().map(|s| s.duration_ns).sum();
    if trace.samples.is_empty() || total <= 0.0 {
        return Err(Error::EmptyTrace);
    }
    let mut q = [0.0f64; 4];
    for s in &trace.samples {
        let idx = match (s.sm_util < threshold, s.dram_util < threshold) {
            (true, true) => 0,
            (true, false) => 1,
            (false, true) => 2,
            (false, false) => 3,
        };
        q[idx] += s.duration_ns;
    }
    Ok(UtilizationQuadrants {
        both_low: q[0] / total,
        low_sm: q[1] / total,
        low_dram: q[2] / total,
        neither_low: q[3] / total,
        threshold,
    })
}

/// n-th root of the product, computed in log space.
pub fn geomean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    exp(values.iter().map(|&v| ln(v)).sum::<f64>() / values.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub graph: String,
    pub mode: Mode,
    pub runtime_s: f64,
    pub dram_bytes: u64,
    pub l2_bytes: u64,
    pub speedup: f64,
    pub traffic_reduction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeomeanRow {
    pub mode: Mode,
    pub speedup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub rows: Vec<ReportRow>,
    pub geomean: Vec<GeomeanRow>,
}

fn by_graph(traces: &[(String, ExecTrace)]) -> BTreeMap<&str, BTreeMap<Mode, &ExecTrace>> {
    let mut map: BTreeMap<&str, BTreeMap<Mode, &ExecTrace>> = BTreeMap::new();
    for (g, t) in traces {
        map.entry(g.as_str()).or_default().insert(t.mode, t);
    }
    map
}

fn reduction(bytes: u64, base: u64) -> f64 {
    if base == 0 {
        0.0
    } else {
        1.0 - bytes as f64 / base as f64
    }
}

/// Speedup and traffic reduction of every trace against the BSP trace of
/// the same graph. Rows are ordered by graph name, then mode.
pub fn speedup_report(traces: &[(String, ExecTrace)]) -> Result<ExperimentReport> {
    let mut rows = Vec::new();
    let mut per_mode: BTreeMap<Mode, Vec<f64>> = BTreeMap::new();
    for (graph, modes) in by_graph(traces) {
        let base = modes.get(&Mode::Bsp).ok_or(Error::MissingBaseline)?;
        for (&mode, t) in &modes {
            let speedup = if t.total_ns > 0.0 { base.total_ns / t.total_ns } else { 1.0 };
            per_mode.entry(mode).or_default().push(speedup);
            rows.push(ReportRow {
                graph: graph.into(),
                mode,
                runtime_s: t.runtime_s(),
                dram_bytes: t.dram_bytes,
                l2_bytes: t.l2_bytes,
                speedup,
                traffic_reduction: reduction(t.dram_bytes, base.dram_bytes),
            });
        }
    }
    let geomean = per_mode.into_iter().map(|(mode, v)| GeomeanRow { mode, speedup: geomean(&v) }).collect();
    Ok(ExperimentReport { rows, geomean })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficRow {
    pub graph: String,
    pub mode: Mode,
    pub dram_bytes: u64,
    pub l2_bytes: u64,
    /// Relative to BSP; absent when the graph has no BSP trace.
    pub dram_reduction: Option<f64>,
    pub l2_reduction: Option<f64>,
}

pub fn traffic_report(traces: &[(String, ExecTrace)]) -> Vec<TrafficRow> {
    let mut rows = Vec::new();
    for (graph, modes) in by_graph(traces) {
        let base = modes.get(&Mode::Bsp);
        for (&mode, t) in &modes {
            rows.push(TrafficRow {
                graph: graph.into(),
                mode,
                dram_bytes: t.dram_bytes,
                l2_bytes: t.l2_bytes,
                dram_reduction: base.map(|b| reduction(t.dram_bytes, b.dram_bytes)),
                l2_reduction: base.map(|b| reduction(t.l2_bytes, b.l2_bytes)),
            });
        }
    }
    rows
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub variant: String,
    pub graph: String,
    pub mode: Mode,
    pub runtime_s: f64,
    pub base_runtime_s: f64,
    /// Base runtime over variant runtime, same mode.
    pub self_speedup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub variant: String,
    pub mode: Mode,
    pub geomean_self_speedup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub summary: Vec<SweepSummary>,
}

pub fn sensitivity_sweep(
    graphs: &[(String, OperatorGraph)],
    base: &MachineConfig,
    variants: &[(String, MachineConfig)],
    modes: &[Mode],
    opts: &SimOptions,
) -> Result<SweepReport> {
    for (_, v) in variants {
        v.validate()?;
    }
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    let mut base_times: BTreeMap<(usize, Mode), f64> = BTreeMap::new();
    for (gi, (_, g)) in graphs.iter().enumerate() {
        for &m in modes {
            base_times.insert((gi, m), simulate_with(g, m, base, opts)?.runtime_s());
        }
    }
    for (vname, cfg) in variants {
        let mut per_mode: BTreeMap<Mode, Vec<f64>> = BTreeMap::new();
        for (gi, (gname, g)) in graphs.iter().enumerate() {
            for &m in modes {
                let runtime = if cfg == base { base_times[&(gi, m)] } else { simulate_with(g, m, cfg, opts)?.runtime_s() };
                let base_runtime = base_times[&(gi, m)];
                let self_speedup = if runtime > 0.0 { base_runtime / runtime } else { 1.0 };
                per_mode.entry(m).or_default().push(self_speedup);
                rows.push(SweepRow {
                    variant: vname.clone(),
                    graph: gname.clone(),
                    mode: m,
                    runtime_s: runtime,
                    base_runtime_s: base_runtime,
                    self_speedup,
                });
            }
        }
        for (m, v) in per_mode {
            summary.push(SweepSummary { variant: vname.clone(), mode: m, geomean_self_speedup: geomean(&v) });
        }
    }
    Ok(SweepReport { rows, summary })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::UtilSample;
    use alloc::vec;

    fn trace(mode: Mode, samples: &[(f64, f64, f64)]) -> ExecTrace {
        let mut t0 = 0.0;
        let samples = samples
            .iter()
            .map(|&(d, sm, dram)| {
                let s = UtilSample { start_ns: t0, duration_ns: d, sm_util: sm, dram_util: dram };
                t0 += d;
                s
            })
            .collect();
        ExecTrace {
            mode,
            events: vec![],
            samples,
            dram_bytes: 100,
            l2_bytes: 100,
            spill_bytes: 0,
            tensor_flops: 0,
            simt_flops: 0,
            total_ns: t0,
            total_cycles: 0,
            pipelines: vec![],
        }
    }

    #[test]
    fn quadrant_examples() {
        let q = quadrants(&trace(Mode::Bsp, &[(1000.0, 0.1, 0.5)]), LOW_UTILIZATION).unwrap();
        assert_eq!(q.low_sm, 1.0);
        let q = quadrants(&trace(Mode::Bsp, &[(1000.0, 0.9, 0.9)]), LOW_UTILIZATION).unwrap();
        assert_eq!(q.neither_low, 1.0);
        let q = quadrants(&trace(Mode::Bsp, &[(500.0, 0.1, 0.1), (500.0, 0.9, 0.9)]), LOW_UTILIZATION).unwrap();
        assert_eq!((q.both_low, q.neither_low), (0.5, 0.5));
        assert_eq!(quadrants(&trace(Mode::Bsp, &[]), LOW_UTILIZATION), Err(Error::EmptyTrace));
    }

    #[test]
    fn geomeans() {
        assert!((geomean(&[2.0, 2.0]) - 2.0).abs() < 1e-12);
        assert!((geomean(&[1.0, 4.0]) - 2.0).abs() < 1e-12);
        assert_eq!(geomean(&[1.0; 7]), 1.0);
    }

    #[test]
    fn identical_traces() {
        let t = trace(Mode::Bsp, &[(10.0, 0.5, 0.5)]);
        let mut d = t.clone();
        d.mode = Mode::Dataflow;
        let r = speedup_report(&[("g".into(), t), ("g".into(), d)]).unwrap();
        assert!(r.rows.iter().all(|row| row.speedup == 1.0 && row.traffic_reduction == 0.0));
    }

    #[test]
    fn missing_baseline() {
        let t = trace(Mode::Dataflow, &[(10.0, 0.5, 0.5)]);
        assert_eq!(speedup_report(&[("g".into(), t)]), Err(Error::MissingBaseline));
    }
}
