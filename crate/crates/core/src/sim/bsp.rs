//! Bulk-synchronous execution: one kernel per operator, a global barrier
//! after each, every intermediate round-tripping through main memory.

use crate::graph::{op_work, OperatorGraph, OperatorNode};
use crate::machine::MachineConfig;
use crate::math::div_ceil;
use crate::Result;

use super::{EventKind, ExecTrace, Mode, Recorder};

/// Output-tile CTAs of a library kernel for `node`.
pub(crate) fn kernel_ctas(node: &OperatorNode, cfg: &MachineConfig) -> u64 {
    let shape = &node.output_shape;
    div_ceil(shape.rows(), cfg.cta_tile_rows) * div_ceil(shape.row_elems(), cfg.cta_tile_cols)
}

/// Seconds to finish `flops` on `ctas` CTAs of one pipe class, with wave
/// quantization.
pub(crate) fn wave_compute_s(flops: u64, ctas: u64, per_sm: f64, cfg: &MachineConfig) -> f64 {
    if flops == 0 {
        return 0.0;
    }
    let waves = div_ceil(ctas, u64::from(cfg.sm_count));
    waves as f64 * (flops as f64 / ctas as f64) / per_sm
}

/// Seconds to move `bytes` through main memory with `ctas` CTAs issuing.
pub(crate) fn memory_s(bytes: u64, ctas: u64, cfg: &MachineConfig) -> f64 {
    if bytes == 0 {
        return 0.0;
    }
    let active = ctas.min(u64::from(cfg.sm_count)) as f64;
    bytes as f64 / cfg.dram_bytes_per_s().min(active * cfg.per_sm_bytes_per_s())
}

/// Duration of `node` as a stand-alone kernel.
pub fn bsp_kernel_time(node: &OperatorNode, cfg: &MachineConfig) -> f64 {
    let ctas = kernel_ctas(node, cfg);
    let work = op_work(node);
    let compute = wave_compute_s(work.flops, ctas, cfg.flops_per_sm(node.class()), cfg);
    compute.max(memory_s(work.bytes(), ctas, cfg))
}

pub(crate) fn run_kernel(rec: &mut Recorder, node: &OperatorNode, cfg: &MachineConfig) {
    let ctas = kernel_ctas(node, cfg);
    let work = op_work(node);
    let class = node.class();
    let compute = wave_compute_s(work.flops, ctas, cfg.flops_per_sm(class), cfg);
    let mem = memory_s(work.bytes(), ctas, cfg);
    let dur = compute.max(mem);
    let start = rec.now;
    let end = start + dur;
    rec.event(start, start, EventKind::Dispatch { kernel: node.id.clone(), class, ctas: ctas.min(u32::MAX as u64) as u32 });
    rec.event(start, start + compute, EventKind::Compute { kernel: node.id.clone(), flops: work.flops });
    rec.event(
        start,
        start + mem,
        EventKind::Memory { kernel: node.id.clone(), dram_bytes: work.bytes(), l2_bytes: work.bytes() },
    );
    if dur > 0.0 {
        let sm = work.flops as f64 / (cfg.peak_flops(class) * dur);
        let dram = work.bytes() as f64 / (cfg.dram_bytes_per_s() * dur);
        rec.segment(start, end, sm, dram);
    }
    rec.event(end, end, EventKind::Barrier);
    rec.dram_bytes += work.bytes();
    rec.l2_bytes += work.bytes();
    rec.add_flops(class, work.flops);
    rec.now = end;
}

pub fn run_bsp(graph: &OperatorGraph, cfg: &MachineConfig) -> Result<ExecTrace> {
    cfg.validate()?;
    let mut rec = Recorder::new(Mode::Bsp);
    for node in graph.topo() {
        run_kernel(&mut rec, node, cfg);
    }
    Ok(rec.finish(cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{builtin_graph, BuiltinParams, NodeDecl, OpKind};
    use alloc::vec;

    #[test]
    fn empty_graph_is_zero_length() {
        let t = run_bsp(&OperatorGraph::empty(2), &MachineConfig::a100()).unwrap();
        assert_eq!((t.total_ns, t.dram_bytes, t.events.len(), t.samples.len()), (0.0, 0, 0, 0));
    }

    #[test]
    fn elementwise_is_dram_bound() {
        let g = OperatorGraph::from_decls(
            2,
            vec![NodeDecl::new("e", OpKind::Elementwise).attr_list("shape", &[8192, 8192])],
        )
        .unwrap();
        let cfg = MachineConfig::a100();
        let t = run_bsp(&g, &cfg).unwrap();
        let n = (8192u64 * 8192 * 2) as f64;
        let expect = 2.0 * n / cfg.dram_bytes_per_s();
        assert!((t.runtime_s() - expect).abs() / expect < 1e-12);
        assert_eq!(t.dram_bytes, 2 * 8192 * 8192 * 2);
    }

    #[test]
    fn mlp_intermediate_round_trips() {
        let g = builtin_graph("mlp-wide-hidden", &BuiltinParams::new()).unwrap();
        let t = run_bsp(&g, &MachineConfig::a100()).unwrap();
        assert_eq!(t.dram_bytes, 10 << 20);
        assert_eq!(t.dram_bytes, g.total_work().bytes());
        let x = g.node("act").unwrap().output_shape.bytes();
        let fc2_reads_x = g.node("fc2").unwrap().operands[0].shape.bytes();
        assert_eq!(fc2_reads_x, x);
    }
}
