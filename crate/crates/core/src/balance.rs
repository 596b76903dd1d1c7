//! CTA allocation across pipeline stages.
//!
//! Throughput is measured in pipeline steps per second. A stage given `a`
//! of the machine's `S` SMs sustains `(a/S)·s·t`, where `t` is its
//! bulk-synchronous throughput on the whole machine and `s = 1/u` the relief
//! from running beside other stages. SIMT and TENSOR stages draw on
//! separate per-SM budgets, so each class must use exactly `S` CTAs.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::graph::OpClass;
use crate::machine::MachineConfig;
use crate::pipeline::{PipelineSpec, PipelineStage};
use crate::{Error, Result};

/// Floor for `u`, keeping `s = 1/u` finite for stages with no arithmetic.
pub const MIN_UTILIZATION: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageProfile {
    pub stage: String,
    pub class: OpClass,
    /// Bulk-synchronous throughput, steps per second on the full machine.
    pub t: f64,
    /// Busiest pipe's occupancy at throughput `t`.
    pub u: f64,
    pub s: f64,
    /// Dataflow traffic per step.
    pub dram_bytes: f64,
    pub l2_bytes: f64,
}

pub fn profile_stage(stage: &PipelineStage, steps: u64, cfg: &MachineConfig) -> StageProfile {
    let n = steps.max(1) as f64;
    let tensor_s = stage.tensor_flops as f64 / n / cfg.peak_flops(OpClass::Tensor);
    let simt_s = stage.simt_flops as f64 / n / cfg.peak_flops(OpClass::Simt);
    let mem_s = stage.bsp_bytes as f64 / n / cfg.dram_bytes_per_s();
    let step_s = (tensor_s + simt_s).max(mem_s);
    let dram = stage.dram_bytes() as f64 / n;
    let l2 = dram + stage.queue_bytes() as f64 / n;
    if step_s <= 0.0 {
        return StageProfile {
            stage: stage.id.clone(),
            class: stage.class,
            t: f64::INFINITY,
            u: MIN_UTILIZATION,
            s: 1.0 / MIN_UTILIZATION,
            dram_bytes: dram,
            l2_bytes: l2,
        };
    }
    let t = 1.0 / step_s;
    let u = (tensor_s.max(simt_s) * t).clamp(MIN_UTILIZATION, 1.0);
    StageProfile { stage: stage.id.clone(), class: stage.class, t, u, s: 1.0 / u, dram_bytes: dram, l2_bytes: l2 }
}

pub fn profile_pipeline(spec: &PipelineSpec, cfg: &MachineConfig) -> Vec<StageProfile> {
    spec.stages.iter().map(|s| profile_stage(s, spec.steps, cfg)).collect()
}

/// `ResourceScale(a) = a / S`.
pub fn resource_scale(ctas: u32, sm_count: u32) -> f64 {
    f64::from(ctas) / f64::from(sm_count)
}

/// Throughput of one stage given `ctas` CTAs.
pub fn stage_rate(ctas: u32, sm_count: u32, s: f64, t: f64) -> f64 {
    resource_scale(ctas, sm_count) * s * t
}

/// The integer program in solver-ready form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationProblem {
    pub classes: Vec<OpClass>,
    pub t: Vec<f64>,
    pub s: Vec<f64>,
    pub sm_count: u32,
    /// Whole-pipeline traffic per step.
    pub dram_bytes_per_step: f64,
    pub l2_bytes_per_step: f64,
    pub dram_peak: f64,
    pub l2_peak: f64,
}

impl AllocationProblem {
    pub fn from_profiles(profiles: &[StageProfile], cfg: &MachineConfig) -> Self {
        Self {
            classes: profiles.iter().map(|p| p.class).collect(),
            t: profiles.iter().map(|p| p.t).collect(),
            s: profiles.iter().map(|p| p.s).collect(),
            sm_count: cfg.sm_count,
            dram_bytes_per_step: profiles.iter().map(|p| p.dram_bytes).sum(),
            l2_bytes_per_step: profiles.iter().map(|p| p.l2_bytes).sum(),
            dram_peak: cfg.dram_bytes_per_s(),
            l2_peak: cfg.l2_bytes_per_s(),
        }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn dram_cap(&self) -> f64 {
        cap(self.dram_peak, self.dram_bytes_per_step)
    }

    pub fn l2_cap(&self) -> f64 {
        cap(self.l2_peak, self.l2_bytes_per_step)
    }

    pub fn rate(&self, i: usize, ctas: u32) -> f64 {
        stage_rate(ctas, self.sm_count, self.s[i], self.t[i])
    }

    /// Objective value of an allocation: slowest stage, capped by traffic.
    pub fn throughput(&self, ctas: &[u32]) -> f64 {
        let mut thrpt = self.dram_cap().min(self.l2_cap());
        for (i, &a) in ctas.iter().enumerate() {
            thrpt = thrpt.min(self.rate(i, a));
        }
        thrpt
    }

    /// Checks the constraints of an allocation post hoc.
    pub fn is_valid(&self, ctas: &[u32]) -> bool {
        if ctas.len() != self.len() || ctas.iter().any(|&a| a < 1 || a > self.sm_count) {
            return false;
        }
        [OpClass::Simt, OpClass::Tensor].iter().all(|&c| {
            let members: Vec<u32> = self.indices(c).map(|i| ctas[i]).collect();
            members.is_empty() || members.iter().sum::<u32>() == self.sm_count
        })
    }

    fn indices(&self, class: OpClass) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(move |&i| self.classes[i] == class)
    }

    /// Fewest CTAs letting stage `i` reach `theta`, if any count up to `S` does.
    fn need(&self, i: usize, theta: f64) -> Option<u32> {
        if self.rate(i, self.sm_count) < theta {
            return None;
        }
        let (mut lo, mut hi) = (1u32, self.sm_count);
        while lo < hi {
            let mid = lo + (hi - lo) / 2;
            if self.rate(i, mid) >= theta {
                hi = mid;
            } else {
                lo = mid + 1;
            }
        }
        Some(lo)
    }

    fn feasible(&self, members: &[usize], theta: f64) -> Option<Vec<u32>> {
        let mut total = 0u32;
        let mut needs = Vec::with_capacity(members.len());
        for &i in members {
            let k = self.need(i, theta)?;
            total += k;
            if total > self.sm_count {
                return None;
            }
            needs.push(k);
        }
        Some(needs)
    }

    /// Best bottleneck rate one class can reach on its own.
    fn class_optimum(&self, members: &[usize]) -> f64 {
        let mut candidates: Vec<f64> = Vec::new();
        for &i in members {
            for k in 1..=self.sm_count {
                candidates.push(self.rate(i, k));
            }
        }
        candidates.sort_by(f64::total_cmp);
        candidates.dedup();
        // feasibility is monotone in theta; find the last feasible candidate
        let (mut lo, mut hi) = (0usize, candidates.len());
        while lo + 1 < hi {
            let mid = lo + (hi - lo) / 2;
            if self.feasible(members, candidates[mid]).is_some() {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        candidates[lo]
    }
}

fn cap(peak: f64, bytes: f64) -> f64 {
    if bytes > 0.0 {
        peak / bytes
    } else {
        f64::INFINITY
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Binding {
    /// The stage itself is the bottleneck.
    Stage,
    Dram,
    L2,
    Slack,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageAllocation {
    pub stage: String,
    pub class: OpClass,
    pub ctas: u32,
    pub rate: f64,
    pub binding: Binding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    pub stages: Vec<StageAllocation>,
    /// Pipeline steps per second.
    pub throughput: f64,
    pub dram_cap: f64,
    pub l2_cap: f64,
}

impl Allocation {
    pub fn ctas(&self) -> Vec<u32> {
        self.stages.iter().map(|s| s.ctas).collect()
    }
}

/// Exact optimum of the allocation program; among optimal allocations the
/// lexicographically smallest is returned.
pub fn solve(problem: &AllocationProblem) -> Result<Vec<u32>> {
    let s = problem.sm_count;
    if s == 0 {
        return Err(Error::InvalidConfig("sm_count must be positive".into()));
    }
    let mut class_best = f64::INFINITY;
    for class in [OpClass::Simt, OpClass::Tensor] {
        let members: Vec<usize> = problem.indices(class).collect();
        if members.is_empty() {
            continue;
        }
        if members.len() > s as usize {
            return Err(Error::Infeasible { class: class.as_str(), stages: members.len(), sm_count: s });
        }
        class_best = class_best.min(problem.class_optimum(&members));
    }
    let theta = class_best.min(problem.dram_cap()).min(problem.l2_cap());

    let mut ctas = alloc::vec![0u32; problem.len()];
    for class in [OpClass::Simt, OpClass::Tensor] {
        let members: Vec<usize> = problem.indices(class).collect();
        let Some(&last) = members.last() else { continue };
        let needs = if theta.is_finite() {
            problem.feasible(&members, theta).expect("optimum is feasible per class")
        } else {
            alloc::vec![1; members.len()]
        };
        for (&i, k) in members.iter().zip(needs) {
            ctas[i] = k;
        }
        let used: u32 = members.iter().map(|&i| ctas[i]).sum();
        ctas[last] += s - used;
    }
    Ok(ctas)
}

pub fn solve_allocation(spec: &PipelineSpec, profiles: &[StageProfile], cfg: &MachineConfig) -> Result<Allocation> {
    debug_assert_eq!(spec.stages.len(), profiles.len());
    let problem = AllocationProblem::from_profiles(profiles, cfg);
    let ctas = solve(&problem)?;
    Ok(describe(&problem, profiles, &ctas))
}

fn describe(problem: &AllocationProblem, profiles: &[StageProfile], ctas: &[u32]) -> Allocation {
    let throughput = problem.throughput(ctas);
    let (dram_cap, l2_cap) = (problem.dram_cap(), problem.l2_cap());
    let stages = profiles
        .iter()
        .zip(ctas)
        .enumerate()
        .map(|(i, (p, &a))| {
            let rate = problem.rate(i, a);
            let binding = if rate == throughput {
                Binding::Stage
            } else if dram_cap == throughput {
                Binding::Dram
            } else if l2_cap == throughput {
                Binding::L2
            } else {
                Binding::Slack
            };
            StageAllocation { stage: p.stage.clone(), class: p.class, ctas: a, rate, binding }
        })
        .collect();
    Allocation { stages, throughput, dram_cap, l2_cap }
}

pub fn modeled_throughput(alloc: &Allocation, profiles: &[StageProfile], cfg: &MachineConfig) -> f64 {
    AllocationProblem::from_profiles(profiles, cfg).throughput(&alloc.ctas())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn problem(classes: &[OpClass], t: &[f64], s: &[f64], sms: u32) -> AllocationProblem {
        AllocationProblem {
            classes: classes.to_vec(),
            t: t.to_vec(),
            s: s.to_vec(),
            sm_count: sms,
            dram_bytes_per_step: 0.0,
            l2_bytes_per_step: 0.0,
            dram_peak: 1.0,
            l2_peak: 1.0,
        }
    }

    #[test]
    fn two_tensor_stages() {
        let p = problem(&[OpClass::Tensor; 2], &[100.0, 300.0], &[1.0, 1.0], 4);
        let a = solve(&p).unwrap();
        assert_eq!(a, vec![3, 1]);
        assert_eq!(p.throughput(&a), 75.0);
    }

    #[test]
    fn classes_sum_independently() {
        let p = problem(&[OpClass::Simt, OpClass::Tensor], &[10.0, 10.0], &[1.0, 1.0], 4);
        assert_eq!(solve(&p).unwrap(), vec![4, 4]);
    }

    #[test]
    fn dram_cap_binds() {
        let mut p = problem(&[OpClass::Tensor], &[1e9], &[1.0], 4);
        p.dram_bytes_per_step = 1.0;
        p.dram_peak = 10.0;
        let a = solve(&p).unwrap();
        assert_eq!(p.throughput(&a), 10.0);
    }

    #[test]
    fn single_stage_gets_t() {
        let p = problem(&[OpClass::Simt], &[123.5], &[1.0], 108);
        assert_eq!(p.throughput(&solve(&p).unwrap()), 123.5);
    }

    #[test]
    fn homogeneous_in_t() {
        let p = problem(&[OpClass::Tensor; 3], &[100.0, 300.0, 50.0], &[1.0, 2.0, 1.0], 8);
        let q = problem(&[OpClass::Tensor; 3], &[200.0, 600.0, 100.0], &[1.0, 2.0, 1.0], 8);
        let (a, b) = (solve(&p).unwrap(), solve(&q).unwrap());
        assert_eq!(2.0 * p.throughput(&a), q.throughput(&b));
    }

    #[test]
    fn infeasible_when_too_many_stages() {
        let p = problem(&[OpClass::Tensor; 3], &[1.0; 3], &[1.0; 3], 2);
        assert!(matches!(solve(&p), Err(Error::Infeasible { stages: 3, sm_count: 2, .. })));
    }

    #[test]
    fn profile_examples() {
        use crate::graph::TensorShape;
        use crate::pipeline::StageRole;
        let cfg = MachineConfig::a100();
        let mut st = PipelineStage {
            id: "s0".into(),
            nodes: vec!["n".into()],
            role: StageRole::Compute,
            class: OpClass::Tensor,
            output_shape: TensorShape::new(vec![1024, 1024], 2).unwrap(),
            tile_shape: [64, 1024],
            tiles_total: 16,
            input_queues: vec![],
            output_queue: None,
            tensor_flops: 1 << 34,
            simt_flops: 0,
            dram_read_bytes: 0,
            dram_write_bytes: 0,
            queue_read_bytes: 0,
            queue_write_bytes: 0,
            bsp_bytes: 1 << 20,
        };
        let p = profile_stage(&st, 16, &cfg);
        assert_eq!(p.u, 1.0);
        let expect = cfg.peak_flops(OpClass::Tensor) / ((1u64 << 34) as f64 / 16.0);
        assert!((p.t - expect).abs() / expect < 1e-12);

        // memory-bound elementwise at a quarter of SIMT peak
        st.class = OpClass::Simt;
        st.tensor_flops = 0;
        st.bsp_bytes = 1 << 30;
        let mem_s = (1u64 << 30) as f64 / cfg.dram_bytes_per_s();
        st.simt_flops = (0.25 * mem_s * cfg.peak_flops(OpClass::Simt)) as u64;
        let p = profile_stage(&st, 1, &cfg);
        assert!((p.u - 0.25).abs() < 1e-6);
        assert!((p.s - 4.0).abs() < 1e-4);
    }
}
