//! Machine parameters for the execution model.

use alloc::format;
use alloc::string::ToString;

use serde::{Deserialize, Serialize};

use crate::graph::OpClass;
use crate::queue::QueueCostModel;
use crate::{Error, Result};

pub const PRESETS: [&str; 2] = ["a100", "a100-2x-sm-l2"];

/// GPU parameters. Every field has an A100-class default so partial JSON
/// files are accepted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MachineConfig {
    pub sm_count: u32,
    pub clock_ghz: f64,
    /// Dense fp16 TensorCore flop/s per SM.
    pub tensor_flops_per_sm: f64,
    /// SIMT flop/s per SM.
    pub simt_flops_per_sm: f64,
    pub dram_gbps: f64,
    /// L2 bandwidth as a multiple of DRAM bandwidth.
    pub l2_ratio: f64,
    pub l2_capacity_bytes: u64,
    pub smem_per_sm_bytes: u64,
    pub dram_latency_cycles: u64,
    /// Output tile (rows x cols) one CTA of a library kernel computes.
    pub cta_tile_rows: u64,
    pub cta_tile_cols: u64,
    /// Row shard each CTA of a vertically fused kernel owns.
    pub vertical_tile_rows: u64,
    /// Width of the operand slice staged in shared memory next to a fused
    /// intermediate.
    pub vertical_staging_cols: u64,
    pub poll_interval_ns: f64,
    pub sample_interval_ns: f64,
    pub queue: QueueCostModel,
}

impl Default for MachineConfig {
    fn default() -> Self {
        Self::a100()
    }
}

impl MachineConfig {
    pub fn a100() -> Self {
        Self {
            sm_count: 108,
            clock_ghz: 1.4,
            tensor_flops_per_sm: 312e12 / 108.0,
            simt_flops_per_sm: 19.5e12 / 108.0,
            dram_gbps: 1500.0,
            l2_ratio: 3.0,
            l2_capacity_bytes: 40 << 20,
            smem_per_sm_bytes: 192 << 10,
            dram_latency_cycles: 572,
            cta_tile_rows: 128,
            cta_tile_cols: 128,
            vertical_tile_rows: 128,
            vertical_staging_cols: 64,
            poll_interval_ns: 200.0,
            sample_interval_ns: 1000.0,
            queue: QueueCostModel::default(),
        }
    }

    /// Twice the SMs and twice the L2 bandwidth ratio; DRAM unchanged.
    pub fn a100_2x_sm_l2() -> Self {
        let base = Self::a100();
        Self { sm_count: base.sm_count * 2, l2_ratio: base.l2_ratio * 2.0, ..base }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "a100" => Some(Self::a100()),
            "a100-2x-sm-l2" => Some(Self::a100_2x_sm_l2()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("clock_ghz", self.clock_ghz),
            ("tensor_flops_per_sm", self.tensor_flops_per_sm),
            ("simt_flops_per_sm", self.simt_flops_per_sm),
            ("dram_gbps", self.dram_gbps),
            ("l2_ratio", self.l2_ratio),
            ("poll_interval_ns", self.poll_interval_ns),
            ("sample_interval_ns", self.sample_interval_ns),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        let counts = [
            ("sm_count", u64::from(self.sm_count)),
            ("l2_capacity_bytes", self.l2_capacity_bytes),
            ("smem_per_sm_bytes", self.smem_per_sm_bytes),
            ("cta_tile_rows", self.cta_tile_rows),
            ("cta_tile_cols", self.cta_tile_cols),
            ("vertical_tile_rows", self.vertical_tile_rows),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.l2_ratio < 1.0 {
            return Err(Error::InvalidConfig("l2_ratio must be >= 1".to_string()));
        }
        self.queue.validate()
    }

    pub fn dram_bytes_per_s(&self) -> f64 {
        self.dram_gbps * 1e9
    }

    pub fn l2_gbps(&self) -> f64 {
        self.dram_gbps * self.l2_ratio
    }

    pub fn l2_bytes_per_s(&self) -> f64 {
        self.l2_gbps() * 1e9
    }

    /// L2 bandwidth one SM can draw.
    pub fn per_sm_bytes_per_s(&self) -> f64 {
        self.l2_bytes_per_s() / f64::from(self.sm_count)
    }

    pub fn flops_per_sm(&self, class: OpClass) -> f64 {
        match class {
            OpClass::Tensor => self.tensor_flops_per_sm,
            OpClass::Simt => self.simt_flops_per_sm,
        }
    }

    pub fn peak_flops(&self, class: OpClass) -> f64 {
        self.flops_per_sm(class) * f64::from(self.sm_count)
    }

    pub fn dram_latency_s(&self) -> f64 {
        self.dram_latency_cycles as f64 / (self.clock_ghz * 1e9)
    }

    pub fn cycles(&self, seconds: f64) -> u64 {
        crate::math::round(seconds * self.clock_ghz * 1e9) as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets() {
        let a = MachineConfig::preset("a100").unwrap();
        let b = MachineConfig::preset("a100-2x-sm-l2").unwrap();
        assert_eq!(b.sm_count, 2 * a.sm_count);
        assert_eq!(b.l2_gbps(), 2.0 * a.l2_gbps());
        assert_eq!(b.dram_gbps, a.dram_gbps);
        assert!(MachineConfig::preset("h100").is_none());
        a.validate().unwrap();
        b.validate().unwrap();
    }

    #[test]
    fn a100_latency_is_572_cycles() {
        let a = MachineConfig::a100();
        assert_eq!(a.cycles(a.dram_latency_s()), 572);
        // about 409 ns at 1.4 GHz
        assert!((a.dram_latency_s() * 1e9 - 408.57).abs() < 0.01);
    }

    #[test]
    fn rejects_bad_values() {
        let mut c = MachineConfig::a100();
        c.l2_ratio = 0.5;
        assert!(c.validate().is_err());
        let mut c = MachineConfig::a100();
        c.sm_count = 0;
        assert!(c.validate().is_err());
    }
}
