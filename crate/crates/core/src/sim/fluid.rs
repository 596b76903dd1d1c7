//! Bandwidth sharing among concurrently running jobs.
//!
//! A job is one unit of work (a pipeline step) that needs some compute time
//! and moves some bytes over shared resources. Rates are assigned by
//! progressive filling: every unfrozen job runs at the same fraction of the
//! rate it would get alone, raised until a resource saturates; jobs using
//! that resource are frozen and the rest keep growing.

use alloc::vec;
use alloc::vec::Vec;

pub(crate) const DRAM: usize = 0;
pub(crate) const L2: usize = 1;
pub(crate) const RESOURCES: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Job {
    /// Seconds of arithmetic at the job's full compute allotment.
    pub compute_s: f64,
    /// Bytes for the whole job on DRAM, L2 and the queue fabric.
    pub bytes: [f64; RESOURCES],
    /// Per-job ceiling on L2-side bytes per second (the SMs it runs on).
    pub port_bytes_per_s: f64,
}

impl Job {
    fn solo_rate(&self, caps: &[f64; RESOURCES]) -> f64 {
        let mut r = if self.compute_s > 0.0 { 1.0 / self.compute_s } else { f64::INFINITY };
        if self.bytes[L2] > 0.0 {
            r = r.min(self.port_bytes_per_s / self.bytes[L2]);
        }
        for (cap, bytes) in caps.iter().zip(&self.bytes) {
            if *bytes > 0.0 {
                r = r.min(cap / bytes);
            }
        }
        r
    }
}

/// Progress rate (fraction of the job per second) of every job.
pub(crate) fn allocate(jobs: &[&Job], caps: &[f64; RESOURCES]) -> Vec<f64> {
    let solo: Vec<f64> = jobs.iter().map(|j| j.solo_rate(caps)).collect();
    let mut rate = vec![0.0; jobs.len()];
    let mut frozen = vec![false; jobs.len()];
    // jobs with no demand on any shared resource run alone
    for (i, j) in jobs.iter().enumerate() {
        if j.bytes.iter().all(|&b| b <= 0.0) || !solo[i].is_finite() {
            rate[i] = solo[i];
            frozen[i] = true;
        }
    }
    loop {
        let live: Vec<usize> = (0..jobs.len()).filter(|&i| !frozen[i]).collect();
        if live.is_empty() {
            return rate;
        }
        let mut phi = 1.0f64;
        let mut bottleneck = None;
        for (k, cap) in caps.iter().enumerate() {
            let demand: f64 = live.iter().map(|&i| solo[i] * jobs[i].bytes[k]).sum();
            if demand <= 0.0 {
                continue;
            }
            let used: f64 = (0..jobs.len()).filter(|&i| frozen[i]).map(|i| rate[i] * jobs[i].bytes[k]).sum();
            let share = ((cap - used) / demand).max(0.0);
            if share < phi {
                phi = share;
                bottleneck = Some(k);
            }
        }
        match bottleneck {
            None => {
                for &i in &live {
                    rate[i] = solo[i];
                    frozen[i] = true;
                }
            }
            Some(k) => {
                for &i in &live {
                    if jobs[i].bytes[k] > 0.0 {
                        rate[i] = phi * solo[i];
                        frozen[i] = true;
                    }
                }
            }
        }
    }
}
