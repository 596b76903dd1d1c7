//! Analytic work and footprint of a single operator.

use core::ops::Add;

use serde::{Deserialize, Serialize};

use super::{OpKind, OperatorNode};

/// Flops and main-memory footprint of one operator executed on its own.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkEstimate {
    pub flops: u64,
    pub input_bytes: u64,
    pub output_bytes: u64,
}

impl WorkEstimate {
    pub fn bytes(&self) -> u64 {
        self.input_bytes + self.output_bytes
    }
}

impl Add for WorkEstimate {
    type Output = WorkEstimate;

    fn add(self, rhs: Self) -> Self {
        WorkEstimate {
            flops: self.flops + rhs.flops,
            input_bytes: self.input_bytes + rhs.input_bytes,
            output_bytes: self.output_bytes + rhs.output_bytes,
        }
    }
}

const SOFTMAX_FLOPS_PER_ELEMENT: u64 = 5;
const LAYERNORM_FLOPS_PER_ELEMENT: u64 = 8;

pub fn op_flops(node: &OperatorNode) -> u64 {
    let out = node.output_shape.numel();
    let attr = |k: &str| node.int_attr(k).unwrap_or(1).max(1) as u64;
    match node.kind {
        OpKind::Linear => 2 * attr("M") * attr("N") * attr("K"),
        OpKind::Attention => 2 * attr("B") * attr("M") * attr("N") * attr("K"),
        OpKind::Elementwise => attr("flops_per_element") * out,
        OpKind::Reduce => match node.reduction_fanin() {
            Some(n) => (n as u64 - 1) * out,
            None => node.operands[0].shape.numel() - out,
        },
        // pure data movement, one op per element moved
        OpKind::Concat | OpKind::Gather => out,
        OpKind::Softmax => SOFTMAX_FLOPS_PER_ELEMENT * out,
        OpKind::LayerNorm => LAYERNORM_FLOPS_PER_ELEMENT * out,
    }
}

pub fn op_work(node: &OperatorNode) -> WorkEstimate {
    WorkEstimate {
        flops: op_flops(node),
        input_bytes: node.operands.iter().map(|o| o.shape.bytes()).sum(),
        output_bytes: node.output_shape.bytes(),
    }
}
