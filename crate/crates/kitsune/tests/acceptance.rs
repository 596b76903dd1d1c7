//! Acceptance criteria, one PASS/FAIL line each. Runs as a plain binary so
//! the report is always printed; exits non-zero if any criterion fails.

use std::collections::BTreeSet;
use std::process::Command;
use std::time::Instant;

use kitsune_core::balance::{solve, AllocationProblem};
use kitsune_core::graph::{builtin_graph, op_work, BuiltinParams, OpClass, OperatorGraph, BUILTIN_NAMES};
use kitsune_core::machine::MachineConfig;
use kitsune_core::metrics::geomean;
use kitsune_core::queue::check::{explore, CheckConfig, Fault};
use kitsune_core::queue::queue_cost;
use kitsune_core::select::{select_subgraphs, PatternLibrary};
use kitsune_core::sim::{
    pairing_violations, paired_fraction, run_dataflow, simulate, simulate_with, EventKind, LaunchKernel, Mode,
    SimOptions, SpatialPipelineLaunch, VerticalOptions,
};
use kitsune_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
    flags: Vec<String>,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into(), flags: Vec::new() }
}

fn graph(name: &str, params: &[(&str, u64)]) -> OperatorGraph {
    let p = params.iter().fold(BuiltinParams::new(), |p, (k, v)| p.with(k, *v));
    builtin_graph(name, &p).expect("builtin graph")
}

fn queue_protocol() -> Outcome {
    let start = Instant::now();
    let mut states = 0;
    let mut bad = Vec::new();
    for consumers in [1, 2] {
        for depth in [2, 3] {
            for items in 1..=6 {
                let r = explore(&CheckConfig { consumers, depth, items, fault: Fault::None });
                states += r.states;
                if !r.passed() || r.terminal_states == 0 {
                    bad.push(format!("{consumers}C/d{depth}/{items}"));
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(bad.is_empty() && secs < 60.0, format!("{states} states, violations in {bad:?}, {secs:.2} s (< 60 s)"))
}

/// Exhaustive enumeration over allocations whose present classes each sum
/// to the SM count.
fn enumerate(p: &AllocationProblem) -> Option<f64> {
    let n = p.len();
    let mut best: Option<f64> = None;
    let total = (p.sm_count as usize).pow(n as u32);
    for code in 0..total {
        let mut c = code;
        let a: Vec<u32> = (0..n)
            .map(|_| {
                let v = (c % p.sm_count as usize) as u32 + 1;
                c /= p.sm_count as usize;
                v
            })
            .collect();
        let ok = [OpClass::Tensor, OpClass::Simt].iter().all(|&cl| {
            let m: Vec<u32> = (0..n).filter(|&i| p.classes[i] == cl).map(|i| a[i]).collect();
            m.is_empty() || m.iter().sum::<u32>() == p.sm_count
        });
        if ok {
            let v = p.throughput(&a);
            best = Some(best.map_or(v, |b: f64| b.max(v)));
        }
    }
    best
}

fn ilp_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut mismatches = 0;
    let mut feasible = 0;
    for _ in 0..500 {
        let n = rng.random_range(1..=4usize);
        let p = AllocationProblem {
            classes: (0..n).map(|_| if rng.random_bool(0.5) { OpClass::Tensor } else { OpClass::Simt }).collect(),
            t: (0..n).map(|_| rng.random_range(1e4..1e7)).collect(),
            s: (0..n).map(|_| 1.0 / rng.random_range(0.05..1.0)).collect(),
            sm_count: rng.random_range(1..=8),
            dram_bytes_per_step: rng.random_range(0.0..4e6),
            l2_bytes_per_step: rng.random_range(0.0..8e6),
            dram_peak: 1.5e12,
            l2_peak: 4.5e12,
        };
        match (solve(&p), enumerate(&p)) {
            (Ok(a), Some(best)) if p.throughput(&a) == best && p.is_valid(&a) => feasible += 1,
            (Err(Error::Infeasible { .. }), None) => {}
            _ => mismatches += 1,
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        mismatches == 0 && secs < 30.0,
        format!("500 instances ({feasible} feasible), {mismatches} mismatches, {secs:.2} s (< 30 s)"),
    )
}

/// BSP bytes are every operand read plus every output write; dataflow drops
/// reads of operands produced inside the same sf-node and writes of members
/// whose outputs never leave it.
fn traffic_oracle(g: &OperatorGraph) -> (u64, u64) {
    let bsp: u64 = g.topo().map(|n| op_work(n).bytes()).sum();
    let exits: BTreeSet<String> = g.exit_nodes().iter().map(|n| n.id.clone()).collect();
    let mut removed = 0;
    for sf in select_subgraphs(g, &PatternLibrary::default_library()) {
        let members: BTreeSet<&str> = sf.members.iter().map(String::as_str).collect();
        for &m in &members {
            let node = g.node(m).unwrap();
            removed += node
                .operands
                .iter()
                .filter(|o| o.source.as_deref().is_some_and(|s| members.contains(s)))
                .map(|o| o.shape.bytes())
                .sum::<u64>();
            let consumers = g.consumers(m).unwrap();
            if !consumers.is_empty()
                && consumers.iter().all(|c| members.contains(c.id.as_str()))
                && !node.is_saved()
                && !exits.contains(m)
            {
                removed += node.output_shape.bytes();
            }
        }
    }
    (bsp, bsp - removed)
}

fn traffic_exactness() -> Outcome {
    let cfg = MachineConfig::a100();
    let mut parts = Vec::new();
    let mut pass = true;
    for name in ["mlp-wide-hidden", "splitk-reduce", "backprop-multicast"] {
        let g = graph(name, &[]);
        let (bsp, df) = traffic_oracle(&g);
        let tb = simulate(&g, Mode::Bsp, &cfg).unwrap().dram_bytes;
        let td = simulate(&g, Mode::Dataflow, &cfg).unwrap().dram_bytes;
        pass &= tb == bsp && td == df;
        parts.push(format!("{name}: bsp {tb}/{bsp} B, dataflow {td}/{df} B"));
    }
    outcome(pass, parts.join("; "))
}

fn reduction(bytes: u64, base: u64) -> f64 {
    1.0 - bytes as f64 / base as f64
}

fn nerf_traffic() -> Outcome {
    let cfg = MachineConfig::a100();
    let g = graph("nerf-chain", &[]);
    let bsp = simulate(&g, Mode::Bsp, &cfg).unwrap().dram_bytes;
    let df = reduction(simulate(&g, Mode::Dataflow, &cfg).unwrap().dram_bytes, bsp);
    let vert = reduction(simulate(&g, Mode::Vertical, &cfg).unwrap().dram_bytes, bsp);
    outcome(
        df >= 0.90 && df - vert >= 0.30,
        format!("dataflow {:.2}% (>= 90%), vertical {:.2}%, gap {:.1} pp (>= 30)", df * 100.0, vert * 100.0, (df - vert) * 100.0),
    )
}

fn mode_ordering() -> Outcome {
    let cfg = MachineConfig::a100();
    let mut pass = true;
    let mut parts = Vec::new();
    let mut flags = Vec::new();
    for name in BUILTIN_NAMES {
        let g = graph(name, &[]);
        let t = |m| simulate(&g, m, &cfg).unwrap().total_ns;
        let (b, v, d) = (t(Mode::Bsp), t(Mode::Vertical), t(Mode::Dataflow));
        pass &= d <= v && v <= b;
        let speedup = b / d;
        if !(1.1..=3.5).contains(&speedup) {
            flags.push(format!("{name} dataflow speedup {speedup:.2}x outside [1.1, 3.5]"));
        }
        parts.push(format!("{name} {:.1}/{:.1}/{:.1} us ({speedup:.2}x)", b / 1e3, v / 1e3, d / 1e3));
    }
    Outcome { pass, detail: format!("bsp/vertical/dataflow: {}", parts.join(", ")), flags }
}

fn spill_threshold() -> Outcome {
    let cfg = MachineConfig::a100();
    assert_eq!(cfg.smem_per_sm_bytes, 192 << 10);
    let opts = SimOptions { vertical: VerticalOptions { profitable_only: false }, ..SimOptions::default() };
    let run = |n: u64| {
        let g = graph("mlp-wide-hidden", &[("N", n)]);
        let t = simulate_with(&g, Mode::Vertical, &cfg, &opts).unwrap();
        let bsp = simulate(&g, Mode::Bsp, &cfg).unwrap().dram_bytes;
        let hidden = g.node("fc1").unwrap().output_shape.bytes() + g.node("act").unwrap().output_shape.bytes();
        let spills: Vec<u64> = t
            .events
            .iter()
            .filter_map(|e| match &e.kind {
                EventKind::Spill { latency_cycles, .. } => Some(*latency_cycles),
                _ => None,
            })
            .collect();
        // intermediate DRAM bytes: what the fused run moves beyond the
        // traffic with every intermediate kept on chip
        (t.dram_bytes - (bsp - 2 * hidden), spills)
    };
    let (small, small_spills) = run(256);
    let (large, large_spills) = run(1024);
    let latency_ok = !large_spills.is_empty() && large_spills.iter().all(|&c| c >= 572);
    outcome(
        small == 0 && small_spills.is_empty() && large > 0 && latency_ok,
        format!(
            "N=256: {small} B intermediate; N=1024: {large} B over {} spills, min latency {} cycles (>= 572)",
            large_spills.len(),
            large_spills.iter().min().copied().unwrap_or(0)
        ),
    )
}

fn scheduler_pairing() -> Outcome {
    let mut traces = 0;
    let mut bad = Vec::new();
    for cfg in [MachineConfig::a100(), MachineConfig::a100_2x_sm_l2()] {
        for name in BUILTIN_NAMES {
            let t = simulate(&graph(name, &[]), Mode::Dataflow, &cfg).unwrap();
            for p in &t.pipelines {
                traces += 1;
                if !pairing_violations(&p.placements, cfg.sm_count).is_empty() {
                    bad.push(format!("{name}/{}", p.sf_id));
                }
            }
        }
    }
    // equal class counts
    let cfg = MachineConfig::a100();
    let launch = SpatialPipelineLaunch {
        sf_id: "paired".into(),
        steps: 1,
        kernels: vec![
            LaunchKernel { stage: "t".into(), class: OpClass::Tensor, ctas: 54 },
            LaunchKernel { stage: "s".into(), class: OpClass::Simt, ctas: 54 },
        ],
        ..SpatialPipelineLaunch::default()
    };
    let t = run_dataflow(&launch, &cfg).unwrap();
    let p = &t.pipelines[0];
    let full = paired_fraction(&p.placements, cfg.sm_count);
    outcome(
        bad.is_empty() && pairing_violations(&p.placements, cfg.sm_count).is_empty() && full == 1.0,
        format!("{traces} pipelines, same-class collisions in {bad:?}; 54+54 CTAs paired {:.0}%", full * 100.0),
    )
}

fn sensitivity() -> Outcome {
    let base = MachineConfig::a100();
    let big = MachineConfig::a100_2x_sm_l2();
    let self_speedup = |mode| {
        let v: Vec<f64> = BUILTIN_NAMES
            .iter()
            .map(|n| {
                let g = graph(n, &[]);
                simulate(&g, mode, &base).unwrap().total_ns / simulate(&g, mode, &big).unwrap().total_ns
            })
            .collect();
        geomean(&v)
    };
    let (df, bsp) = (self_speedup(Mode::Dataflow), self_speedup(Mode::Bsp));
    outcome(df > bsp, format!("geomean self-speedup dataflow {df:.3}x > bsp {bsp:.3}x"))
}

fn queue_curve() -> Outcome {
    let cfg = MachineConfig::a100();
    let band: Vec<f64> = [128u64, 192, 256].iter().map(|k| queue_cost(k << 10, 54, &cfg).aggregate_gbps).collect();
    let band_ok = band.iter().all(|g| (g - 2000.0).abs() <= 200.0);
    let peak = queue_cost(128 << 10, 54, &cfg).per_queue_gbps;
    let small = queue_cost(1 << 10, 54, &cfg).per_queue_gbps;
    let spilled = queue_cost(1 << 20, 54, &cfg);
    let decline = spilled.spilled && spilled.aggregate_gbps < band[0];
    outcome(
        band_ok && peak / small >= 10.0 && decline,
        format!(
            "128-256 KiB aggregate {:?} GB/s (2000 +/- 10%), 1 KiB degradation {:.1}x (>= 10), 1 MiB spilled {:.0} GB/s",
            band.iter().map(|g| g.round()).collect::<Vec<_>>(),
            peak / small,
            spilled.aggregate_gbps
        ),
    )
}

fn determinism() -> Outcome {
    let exe = env!("CARGO_BIN_EXE_kitsune");
    let dir = tempfile::tempdir().unwrap();
    let d = |name: &str| dir.path().join(name).display().to_string();
    let invoke = |args: &[String]| {
        let out = Command::new(exe).args(args).env_remove("KITSUNE_MACHINE").output().expect("binary runs");
        (out.status.code(), out.stdout, out.stderr)
    };
    // setup artifacts for the file-consuming commands
    let sel = invoke(&["select".into(), "builtin:nerf-chain".into()]).1;
    std::fs::write(d("sel.json"), sel).unwrap();
    let pipe = invoke(&["pipeline".into(), "builtin:nerf-chain".into(), "--sf".into(), d("sel.json")]).1;
    std::fs::write(d("pipe.json"), pipe).unwrap();

    let commands: Vec<Vec<String>> = [
        "graph validate builtin:transformer-ffn",
        "graph builtin mgn-mlp --param edges=4096",
        "select builtin:nerf-chain",
        &format!("pipeline builtin:nerf-chain --sf {}", d("sel.json")),
        &format!("balance {} --machine a100", d("pipe.json")),
        &format!("simulate builtin:splitk-reduce --mode dataflow --out {}", d("trace.json")),
        "simulate builtin:mlp-wide-hidden --mode vertical --force-vertical",
        "report --format csv",
        "report --kind quadrants",
        "report builtin:mlp-wide-hidden --kind traffic --format csv",
        "sweep builtin:nerf-chain builtin:mlp-wide-hidden",
        "check-queue --consumers 2 --depth 3 --items 4",
        "check-ilp --instances 200 --seed 11",
    ]
    .iter()
    .map(|c| c.split_whitespace().map(String::from).collect())
    .collect();
    let mut diffs = Vec::new();
    for args in &commands {
        let first = invoke(args);
        let file1 = std::fs::read(d("trace.json")).ok();
        let second = invoke(args);
        let file2 = std::fs::read(d("trace.json")).ok();
        if first != second || file1 != file2 || first.0 != Some(0) {
            diffs.push(args.join(" "));
        }
    }
    outcome(diffs.is_empty(), format!("{} commands run twice; differing or failing: {diffs:?}", commands.len()))
}

fn main() {
    type Criterion = (&'static str, fn() -> Outcome);
    let criteria: [Criterion; 10] = [
        ("queue protocol safety/liveness", queue_protocol),
        ("ILP oracle equivalence", ilp_oracle),
        ("traffic exactness", traffic_exactness),
        ("NeRF-analogue traffic", nerf_traffic),
        ("mode ordering", mode_ordering),
        ("spill threshold", spill_threshold),
        ("scheduler pairing", scheduler_pairing),
        ("sensitivity direction", sensitivity),
        ("queue bandwidth curve", queue_curve),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        println!("{} {:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, i + 1, o.detail);
        for f in &o.flags {
            println!("FLAG {:>2} {f}", i + 1);
        }
        failed += usize::from(!o.pass);
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
