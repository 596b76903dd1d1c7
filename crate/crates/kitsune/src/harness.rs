//! Seeded self-checks exposed on the command line.

use kitsune_core::balance::{solve, AllocationProblem};
use kitsune_core::graph::OpClass;
use kitsune_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IlpMismatch {
    pub instance: usize,
    pub problem: AllocationProblem,
    pub solver: Option<Vec<u32>>,
    pub enumeration: Option<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IlpCheck {
    pub seed: u64,
    pub instances: usize,
    pub infeasible: usize,
    pub mismatches: Vec<IlpMismatch>,
}

pub fn random_problem(rng: &mut ChaCha8Rng, max_stages: usize, max_sms: u32) -> AllocationProblem {
    let n = rng.random_range(1..=max_stages.max(1));
    let classes = (0..n).map(|_| if rng.random_bool(0.5) { OpClass::Tensor } else { OpClass::Simt }).collect();
    let t = (0..n).map(|_| f64::from(rng.random_range(1..=12u32)) * 1e5).collect();
    let s = (0..n).map(|_| [1.0, 1.5, 2.0, 4.0][rng.random_range(0..4usize)]).collect();
    let dram = f64::from(rng.random_range(0..=4u32)) * 1e6;
    AllocationProblem {
        classes,
        t,
        s,
        sm_count: rng.random_range(1..=max_sms.max(1)),
        dram_bytes_per_step: dram,
        l2_bytes_per_step: dram + f64::from(rng.random_range(0..=4u32)) * 1e6,
        dram_peak: 1.5e12,
        l2_peak: 4.5e12,
    }
}

/// Best allocation by exhaustive enumeration, lexicographically smallest on
/// ties; `None` when no allocation satisfies the class sums.
pub fn enumerate_best(p: &AllocationProblem) -> Option<Vec<u32>> {
    let n = p.len();
    let mut a = vec![1u32; n];
    let mut best: Option<(Vec<u32>, f64)> = None;
    loop {
        let ok = [OpClass::Tensor, OpClass::Simt].iter().all(|&c| {
            let mut members = (0..n).filter(|&i| p.classes[i] == c).peekable();
            members.peek().is_none() || members.map(|i| a[i]).sum::<u32>() == p.sm_count
        });
        if ok {
            let v = p.throughput(&a);
            if best.as_ref().is_none_or(|(_, b)| v > *b) {
                best = Some((a.clone(), v));
            }
        }
        let mut i = n;
        loop {
            if i == 0 {
                return best.map(|(a, _)| a);
            }
            i -= 1;
            if a[i] < p.sm_count {
                a[i] += 1;
                a[i + 1..].fill(1);
                break;
            }
        }
    }
}

pub fn check_ilp(seed: u64, instances: usize, max_stages: usize, max_sms: u32) -> IlpCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = IlpCheck { seed, instances, infeasible: 0, mismatches: Vec::new() };
    for instance in 0..instances {
        let p = random_problem(&mut rng, max_stages, max_sms);
        let solver = match solve(&p) {
            Ok(a) => Some(a),
            Err(Error::Infeasible { .. }) => None,
            Err(e) => panic!("solver failed on instance {instance}: {e}"),
        };
        let enumeration = enumerate_best(&p);
        if solver.is_none() && enumeration.is_none() {
            out.infeasible += 1;
        } else if solver != enumeration {
            out.mismatches.push(IlpMismatch { instance, problem: p, solver, enumeration });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_runs_repeat() {
        assert_eq!(check_ilp(7, 50, 4, 8), check_ilp(7, 50, 4, 8));
        assert!(check_ilp(7, 50, 4, 8).mismatches.is_empty());
    }

    #[test]
    fn enumeration_handles_single_sm() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = random_problem(&mut rng, 1, 1);
        p.sm_count = 1;
        assert_eq!(enumerate_best(&p), Some(vec![1]));
    }
}
