use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::queue::QueueError;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    UnknownNode(String),
    DuplicateNode(String),
    UnknownKind(String),
    MissingAttr { node: String, attr: &'static str },
    InvalidAttr { node: String, attr: String, reason: String },
    /// Operand shape does not fit the consuming operator.
    ShapeMismatch { producer: String, consumer: String, detail: String },
    /// Node ids along a dependence cycle, first id repeated at the end.
    Cycle(Vec<String>),
    UnknownBuiltin(String),
    InvalidParam { name: String, reason: String },
    Pattern { line: usize, column: usize, message: String },
    NotAReduction(String),
    InvalidArity(usize),
    Untileable { node: String, row_bytes: u64, budget: u64 },
    Infeasible { class: &'static str, stages: usize, sm_count: u32 },
    ClassOversubscribed { class: &'static str, ctas: u32, sm_count: u32 },
    QueueFootprint { bytes: u64, capacity: u64 },
    InvalidFusionPlan(String),
    InvalidConfig(String),
    MissingBaseline,
    EmptyTrace,
    Queue(QueueError),
}

impl From<QueueError> for Error {
    fn from(e: QueueError) -> Self {
        Error::Queue(e)
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::UnknownNode(id) => write!(f, "unknown node `{id}`"),
            Error::DuplicateNode(id) => write!(f, "duplicate node id `{id}`"),
            Error::UnknownKind(k) => write!(f, "unknown operator kind `{k}`"),
            Error::MissingAttr { node, attr } => {
                write!(f, "node `{node}` is missing required attribute `{attr}`")
            }
            Error::InvalidAttr { node, attr, reason } => {
                write!(f, "node `{node}`: invalid attribute `{attr}`: {reason}")
            }
            Error::ShapeMismatch { producer, consumer, detail } => {
                write!(f, "shape mismatch between `{producer}` and `{consumer}`: {detail}")
            }
            Error::Cycle(ids) => write!(f, "dependence cycle: {}", ids.join(" -> ")),
            Error::UnknownBuiltin(name) => write!(f, "unknown builtin graph `{name}`"),
            Error::InvalidParam { name, reason } => write!(f, "invalid parameter `{name}`: {reason}"),
            Error::Pattern { line, column, message } => {
                write!(f, "pattern error at {line}:{column}: {message}")
            }
            Error::NotAReduction(id) => write!(f, "node `{id}` is not an n-ary reduction"),
            Error::InvalidArity(a) => write!(f, "reduction arity must be at least 2, got {a}"),
            Error::Untileable { node, row_bytes, budget } => write!(
                f,
                "node `{node}` cannot be tiled: one output row is {row_bytes} B, payload budget is {budget} B"
            ),
            Error::Infeasible { class, stages, sm_count } => write!(
                f,
                "allocation infeasible: {stages} {class} stages but only {sm_count} SMs"
            ),
            Error::ClassOversubscribed { class, ctas, sm_count } => write!(
                f,
                "{ctas} {class} CTAs cannot be co-resident on {sm_count} SMs"
            ),
            Error::QueueFootprint { bytes, capacity } => write!(
                f,
                "queue footprint {bytes} B exceeds L2 capacity {capacity} B"
            ),
            Error::InvalidFusionPlan(msg) => write!(f, "invalid fusion plan: {msg}"),
            Error::InvalidConfig(msg) => write!(f, "invalid machine config: {msg}"),
            Error::MissingBaseline => f.write_str("report requires a bulk-synchronous baseline trace"),
            Error::EmptyTrace => f.write_str("trace has no utilization samples"),
            Error::Queue(e) => write!(f, "queue protocol error: {e}"),
        }
    }
}

impl core::error::Error for Error {}
