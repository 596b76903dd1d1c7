//! CTA placement for spatial pipelines.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::graph::OpClass;
use crate::machine::MachineConfig;
use crate::{Error, Result};

use super::dataflow::SpatialPipelineLaunch;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub sm: u32,
    pub class: OpClass,
    pub stage: String,
    /// Index of the CTA within its kernel.
    pub cta: u32,
}

fn class_total(launch: &SpatialPipelineLaunch, class: OpClass) -> u32 {
    launch.kernels.iter().filter(|k| k.class == class).map(|k| k.ctas).sum()
}

/// Two round-robin arbiters, one per pipe class, both starting at SM 0.
/// Kernels are served in launch order.
pub fn grid_schedule(launch: &SpatialPipelineLaunch, cfg: &MachineConfig) -> Result<Vec<Placement>> {
    let mut next = [0u32; 2];
    let mut out = Vec::new();
    for class in [OpClass::Tensor, OpClass::Simt] {
        let total = class_total(launch, class);
        if total > cfg.sm_count {
            return Err(Error::ClassOversubscribed { class: class.as_str(), ctas: total, sm_count: cfg.sm_count });
        }
    }
    for k in &launch.kernels {
        let arbiter = &mut next[(k.class == OpClass::Simt) as usize];
        for cta in 0..k.ctas {
            out.push(Placement { sm: *arbiter, class: k.class, stage: k.stage.clone(), cta });
            *arbiter += 1;
        }
    }
    Ok(out)
}

/// Single arbiter that fills each SM's two CTA slots before moving on,
/// regardless of class.
pub fn greedy_schedule(launch: &SpatialPipelineLaunch, cfg: &MachineConfig) -> Result<Vec<Placement>> {
    let total: u32 = launch.kernels.iter().map(|k| k.ctas).sum();
    if total > 2 * cfg.sm_count {
        return Err(Error::ClassOversubscribed { class: "any", ctas: total, sm_count: cfg.sm_count });
    }
    let mut out = Vec::new();
    let mut slot = 0u32;
    for k in &launch.kernels {
        for cta in 0..k.ctas {
            out.push(Placement { sm: slot / 2, class: k.class, stage: k.stage.clone(), cta });
            slot += 1;
        }
    }
    Ok(out)
}

/// SMs holding more than one CTA of a class.
pub fn pairing_violations(placements: &[Placement], sm_count: u32) -> Vec<u32> {
    let mut count = vec![[0u32; 2]; sm_count as usize];
    for p in placements {
        if let Some(c) = count.get_mut(p.sm as usize) {
            c[(p.class == OpClass::Simt) as usize] += 1;
        }
    }
    (0..sm_count).filter(|&s| count[s as usize].iter().any(|&n| n > 1)).collect()
}

/// Fraction of occupied SMs hosting one CTA of each class.
pub fn paired_fraction(placements: &[Placement], sm_count: u32) -> f64 {
    let mut has = vec![[false; 2]; sm_count as usize];
    for p in placements {
        if let Some(h) = has.get_mut(p.sm as usize) {
            h[(p.class == OpClass::Simt) as usize] = true;
        }
    }
    let occupied = has.iter().filter(|h| h[0] || h[1]).count();
    if occupied == 0 {
        return 0.0;
    }
    has.iter().filter(|h| h[0] && h[1]).count() as f64 / occupied as f64
}
