//! Properties over randomly generated operator graphs.

use std::collections::BTreeSet;

use kitsune_core::graph::{op_flops, builtin_graph, BuiltinParams, NodeDecl, OpKind, OperatorGraph, BUILTIN_NAMES};
use kitsune_core::machine::MachineConfig;
use kitsune_core::select::{is_contiguous, select_subgraphs, PatternLibrary};
use kitsune_core::sim::{pairing_violations, paired_fraction, simulate, Mode};
use proptest::prelude::*;

const ROWS: i64 = 512;
const COLS: i64 = 256;

/// One node per entry: a kind selector, input picks (indices modulo the
/// number of earlier nodes) and whether the output is saved.
fn graph_strategy() -> impl Strategy<Value = OperatorGraph> {
    prop::collection::vec((0u8..6, prop::collection::vec(any::<prop::sample::Index>(), 0..3), any::<bool>()), 1..14)
        .prop_map(|spec| {
            let mut decls: Vec<NodeDecl> = Vec::new();
            for (i, (kind, picks, save)) in spec.into_iter().enumerate() {
                let id = format!("n{i}");
                let mut inputs: Vec<String> = if i == 0 {
                    Vec::new()
                } else {
                    picks.iter().map(|p| format!("n{}", p.index(i))).collect()
                };
                inputs.dedup();
                let d = match kind {
                    0 => NodeDecl::new(&id, OpKind::Linear).attr("M", ROWS).attr("K", COLS).attr("N", COLS),
                    1 => NodeDecl::new(&id, OpKind::Elementwise).attr_list("shape", &[ROWS, COLS]),
                    2 => NodeDecl::new(&id, OpKind::Reduce).attr_list("shape", &[ROWS, COLS]).attr("fanin", 3),
                    3 => NodeDecl::new(&id, OpKind::Softmax).attr_list("shape", &[ROWS, COLS]),
                    4 => NodeDecl::new(&id, OpKind::LayerNorm).attr_list("shape", &[ROWS, COLS]),
                    _ => NodeDecl::new(&id, OpKind::Gather).attr_list("shape", &[ROWS, COLS]),
                };
                inputs.truncate(match kind {
                    0 | 3 | 4 | 5 => 1,
                    _ => 2,
                });
                let d = inputs.into_iter().fold(d, NodeDecl::input);
                decls.push(if save { d.attr("save", 1) } else { d });
            }
            OperatorGraph::from_decls(2, decls).expect("generated graph is valid")
        })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn selection_is_disjoint_contiguous_and_ordered(g in graph_strategy()) {
        let sel = select_subgraphs(&g, &PatternLibrary::default_library());
        let mut seen = BTreeSet::new();
        let mut last_end = None;
        for sf in &sel {
            prop_assert!(is_contiguous(&g, &sf.members).unwrap());
            let pos: Vec<usize> = sf.members.iter().map(|m| g.topo_position(m).unwrap()).collect();
            // members form a run of the topological order
            prop_assert!(pos.windows(2).all(|w| w[1] == w[0] + 1));
            prop_assert!(last_end.is_none_or(|e| pos[0] > e));
            last_end = pos.last().copied();
            for m in &sf.members {
                prop_assert!(seen.insert(m.clone()), "{m} in two sf-nodes");
                prop_assert!(g.node(m).unwrap().kind != OpKind::Gather);
            }
        }
        prop_assert_eq!(sel, select_subgraphs(&g, &PatternLibrary::default_library()));
    }

    #[test]
    fn every_mode_does_the_same_arithmetic(g in graph_strategy()) {
        let cfg = MachineConfig::a100();
        let flops: u64 = g.topo().map(op_flops).sum();
        for mode in Mode::ALL {
            let t = simulate(&g, mode, &cfg).unwrap();
            prop_assert_eq!(t.tensor_flops + t.simt_flops, flops, "{}", mode);
            prop_assert!(t.total_ns > 0.0);
            prop_assert!(t.samples.iter().all(|s| (0.0..=1.0 + 1e-9).contains(&s.sm_util)
                && (0.0..=1.0 + 1e-9).contains(&s.dram_util)));
            prop_assert!(t.events.windows(2).all(|w| w[0].start_ns <= w[1].start_ns));
        }
    }

    #[test]
    fn dataflow_never_moves_more_dram_bytes(g in graph_strategy()) {
        let cfg = MachineConfig::a100();
        let bsp = simulate(&g, Mode::Bsp, &cfg).unwrap();
        let df = simulate(&g, Mode::Dataflow, &cfg).unwrap();
        prop_assert!(df.dram_bytes <= bsp.dram_bytes);
    }

    #[test]
    fn simulation_is_deterministic(g in graph_strategy()) {
        let cfg = MachineConfig::a100();
        for mode in Mode::ALL {
            prop_assert_eq!(simulate(&g, mode, &cfg).unwrap(), simulate(&g, mode, &cfg).unwrap());
        }
    }
}

#[test]
fn builtin_pipelines_pair_classes() {
    let cfg = MachineConfig::a100();
    for name in BUILTIN_NAMES {
        let g = builtin_graph(name, &BuiltinParams::new()).unwrap();
        let t = simulate(&g, Mode::Dataflow, &cfg).unwrap();
        for p in &t.pipelines {
            assert!(pairing_violations(&p.placements, cfg.sm_count).is_empty(), "{name} {}", p.sf_id);
            let per_class = |simt: bool| {
                p.placements.iter().filter(|x| (x.class == kitsune_core::graph::OpClass::Simt) == simt).count()
            };
            if per_class(true) == per_class(false) {
                assert_eq!(paired_fraction(&p.placements, cfg.sm_count), 1.0, "{name}");
            }
        }
    }
}
