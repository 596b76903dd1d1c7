//! Operator-graph data model.
//!
//! A graph is declared as a list of [`NodeDecl`]s (the on-disk form) and
//! resolved by [`OperatorGraph::from_decls`], which infers output shapes,
//! checks operand compatibility and fixes a reproducible topological order.

use alloc::collections::{BTreeMap, BTreeSet, BinaryHeap};
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use alloc::{format, vec};
use core::cmp::Reverse;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub mod builtin;
mod shape;
pub mod work;

pub use builtin::{builtin_graph, BuiltinParams, BUILTIN_NAMES};
pub use work::{op_flops, op_work, WorkEstimate};

/// Operator kinds understood by the compiler and the cost model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum OpKind {
    Linear,
    Elementwise,
    Reduce,
    Concat,
    Gather,
    Softmax,
    LayerNorm,
    /// Batched GEMM standing in for one matmul of an attention block.
    Attention,
}

impl OpKind {
    pub const ALL: [OpKind; 8] = [
        OpKind::Linear,
        OpKind::Elementwise,
        OpKind::Reduce,
        OpKind::Concat,
        OpKind::Gather,
        OpKind::Softmax,
        OpKind::LayerNorm,
        OpKind::Attention,
    ];

    pub fn class(self) -> OpClass {
        match self {
            OpKind::Linear | OpKind::Attention => OpClass::Tensor,
            _ => OpClass::Simt,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            OpKind::Linear => "Linear",
            OpKind::Elementwise => "Elementwise",
            OpKind::Reduce => "Reduce",
            OpKind::Concat => "Concat",
            OpKind::Gather => "Gather",
            OpKind::Softmax => "Softmax",
            OpKind::LayerNorm => "LayerNorm",
            OpKind::Attention => "Attention",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .iter()
            .copied()
            .find(|k| k.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::UnknownKind(s.to_string()))
    }
}

/// Which SM pipe an operator runs on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum OpClass {
    Simt,
    Tensor,
}

impl OpClass {
    pub fn as_str(self) -> &'static str {
        match self {
            OpClass::Simt => "SIMT",
            OpClass::Tensor => "TENSOR",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TensorShape {
    pub dims: Vec<u64>,
    pub dtype_bytes: u8,
}

impl TensorShape {
    pub fn new(dims: Vec<u64>, dtype_bytes: u8) -> Result<Self> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(Error::InvalidParam {
                name: "dims".into(),
                reason: format!("every dimension must be >= 1, got {dims:?}"),
            });
        }
        if !matches!(dtype_bytes, 1 | 2 | 4) {
            return Err(Error::InvalidParam {
                name: "dtype_bytes".into(),
                reason: format!("must be 1, 2 or 4, got {dtype_bytes}"),
            });
        }
        Ok(Self { dims, dtype_bytes })
    }

    pub fn numel(&self) -> u64 {
        self.dims.iter().product()
    }

    pub fn bytes(&self) -> u64 {
        self.numel() * u64::from(self.dtype_bytes)
    }

    /// Number of rows when the tensor is viewed as a 2-D matrix whose row is
    /// the innermost dimension. A 1-D tensor is a column of scalars.
    pub fn rows(&self) -> u64 {
        if self.dims.len() == 1 {
            self.dims[0]
        } else {
            self.dims[..self.dims.len() - 1].iter().product()
        }
    }

    pub fn row_elems(&self) -> u64 {
        if self.dims.len() == 1 {
            1
        } else {
            self.dims[self.dims.len() - 1]
        }
    }

    pub fn row_bytes(&self) -> u64 {
        self.row_elems() * u64::from(self.dtype_bytes)
    }
}

impl fmt::Display for TensorShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("[")?;
        for (i, d) in self.dims.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{d}")?;
        }
        f.write_str("]")
    }
}

/// Attribute value: a scalar or a list of integers.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AttrValue {
    Int(i64),
    Ints(Vec<i64>),
}

pub type Attrs = BTreeMap<String, AttrValue>;

/// A node as declared in a graph file, before shape inference.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeDecl {
    pub id: String,
    pub kind: OpKind,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub attrs: Attrs,
    #[serde(default)]
    pub inputs: Vec<String>,
}

impl NodeDecl {
    pub fn new(id: impl Into<String>, kind: OpKind) -> Self {
        Self { id: id.into(), kind, attrs: Attrs::new(), inputs: Vec::new() }
    }

    pub fn attr(mut self, key: &str, value: i64) -> Self {
        self.attrs.insert(key.to_string(), AttrValue::Int(value));
        self
    }

    pub fn attr_list(mut self, key: &str, values: &[i64]) -> Self {
        self.attrs.insert(key.to_string(), AttrValue::Ints(values.to_vec()));
        self
    }

    pub fn input(mut self, id: impl Into<String>) -> Self {
        self.inputs.push(id.into());
        self
    }
}

/// One tensor operand of a node. `source` is `None` when the operand is read
/// from main memory rather than produced inside the graph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Operand {
    pub source: Option<String>,
    pub shape: TensorShape,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperatorNode {
    pub id: String,
    pub kind: OpKind,
    pub inputs: Vec<String>,
    /// All operands in port order, including ones read from main memory.
    pub operands: Vec<Operand>,
    pub output_shape: TensorShape,
    pub attrs: Attrs,
}

impl OperatorNode {
    pub fn class(&self) -> OpClass {
        self.kind.class()
    }

    pub fn int_attr(&self, key: &str) -> Option<i64> {
        match self.attrs.get(key) {
            Some(AttrValue::Int(v)) => Some(*v),
            _ => None,
        }
    }

    /// Output is needed by a later backward pass and must reach main memory.
    pub fn is_saved(&self) -> bool {
        self.int_attr("save").unwrap_or(0) != 0
    }

    pub fn is_backward(&self) -> bool {
        self.int_attr("backward").unwrap_or(0) != 0
    }

    /// Operand count of an n-ary reduction, `None` for axis reductions and
    /// other kinds.
    pub fn reduction_fanin(&self) -> Option<usize> {
        if self.kind == OpKind::Reduce && !self.attrs.contains_key("axis") {
            Some(self.operands.len())
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Edge {
    pub producer: String,
    pub consumer: String,
    pub port: usize,
}

/// Validated, immutable operator DAG.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorGraph {
    dtype_bytes: u8,
    nodes: Vec<OperatorNode>,
    index: BTreeMap<String, usize>,
    order: Vec<usize>,
    position: Vec<usize>,
    consumers: Vec<Vec<usize>>,
    edges: Vec<Edge>,
}

impl OperatorGraph {
    pub fn empty(dtype_bytes: u8) -> Self {
        Self {
            dtype_bytes,
            nodes: Vec::new(),
            index: BTreeMap::new(),
            order: Vec::new(),
            position: Vec::new(),
            consumers: Vec::new(),
            edges: Vec::new(),
        }
    }

    /// Resolves declarations into a graph. Ties in the topological order are
    /// broken by declaration order, so the same declarations always yield the
    /// same order.
    pub fn from_decls(dtype_bytes: u8, decls: Vec<NodeDecl>) -> Result<Self> {
        if !matches!(dtype_bytes, 1 | 2 | 4) {
            return Err(Error::InvalidParam {
                name: "dtype_bytes".into(),
                reason: format!("must be 1, 2 or 4, got {dtype_bytes}"),
            });
        }
        let mut index = BTreeMap::new();
        for (i, d) in decls.iter().enumerate() {
            if index.insert(d.id.clone(), i).is_some() {
                return Err(Error::DuplicateNode(d.id.clone()));
            }
        }
        let n = decls.len();
        let mut preds: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut consumers: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (i, d) in decls.iter().enumerate() {
            for input in &d.inputs {
                let &p = index.get(input).ok_or_else(|| Error::UnknownNode(input.clone()))?;
                preds[i].push(p);
                if !consumers[p].contains(&i) {
                    consumers[p].push(i);
                }
            }
        }

        // Kahn's algorithm with a min-heap on declaration index.
        let mut indeg: Vec<usize> = preds
            .iter()
            .map(|p| p.iter().collect::<BTreeSet<_>>().len())
            .collect();
        let mut heap: BinaryHeap<Reverse<usize>> =
            (0..n).filter(|&i| indeg[i] == 0).map(Reverse).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(Reverse(i)) = heap.pop() {
            order.push(i);
            for &c in &consumers[i] {
                indeg[c] -= 1;
                if indeg[c] == 0 {
                    heap.push(Reverse(c));
                }
            }
        }
        if order.len() < n {
            let cycle = find_cycle(&preds, &indeg);
            return Err(Error::Cycle(cycle.into_iter().map(|i| decls[i].id.clone()).collect()));
        }

        // Shape inference in topological order.
        let mut resolved: Vec<Option<OperatorNode>> = vec![None; n];
        for &i in &order {
            let input_shapes: Vec<(&str, &TensorShape)> = decls[i]
                .inputs
                .iter()
                .map(|id| {
                    let p = index[id];
                    (id.as_str(), &resolved[p].as_ref().expect("topological order").output_shape)
                })
                .collect();
            let (operands, output_shape) = shape::infer(&decls[i], &input_shapes, dtype_bytes)?;
            let d = &decls[i];
            resolved[i] = Some(OperatorNode {
                id: d.id.clone(),
                kind: d.kind,
                inputs: d.inputs.clone(),
                operands,
                output_shape,
                attrs: d.attrs.clone(),
            });
        }
        let nodes: Vec<OperatorNode> = resolved.into_iter().map(|n| n.expect("resolved")).collect();

        let mut position = vec![0; n];
        for (pos, &i) in order.iter().enumerate() {
            position[i] = pos;
        }
        let mut edges = Vec::new();
        for &i in &order {
            for (port, op) in nodes[i].operands.iter().enumerate() {
                if let Some(src) = &op.source {
                    edges.push(Edge { producer: src.clone(), consumer: nodes[i].id.clone(), port });
                }
            }
        }
        for c in consumers.iter_mut() {
            c.sort_by_key(|&x| position[x]);
        }
        Ok(Self { dtype_bytes, nodes, index, order, position, consumers, edges })
    }

    pub fn dtype_bytes(&self) -> u8 {
        self.dtype_bytes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn node(&self, id: &str) -> Result<&OperatorNode> {
        self.index
            .get(id)
            .map(|&i| &self.nodes[i])
            .ok_or_else(|| Error::UnknownNode(id.to_string()))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    /// Nodes in the deterministic topological order.
    pub fn topo(&self) -> impl ExactSizeIterator<Item = &OperatorNode> + '_ {
        self.order.iter().map(move |&i| &self.nodes[i])
    }

    pub fn topo_ids(&self) -> Vec<&str> {
        self.topo().map(|n| n.id.as_str()).collect()
    }

    /// Position of a node in the topological order.
    pub fn topo_position(&self, id: &str) -> Result<usize> {
        self.index
            .get(id)
            .map(|&i| self.position[i])
            .ok_or_else(|| Error::UnknownNode(id.to_string()))
    }

    /// Distinct consumers of a node, in topological order.
    pub fn consumers(&self, id: &str) -> Result<Vec<&OperatorNode>> {
        let &i = self.index.get(id).ok_or_else(|| Error::UnknownNode(id.to_string()))?;
        Ok(self.consumers[i].iter().map(|&c| &self.nodes[c]).collect())
    }

    pub fn entry_nodes(&self) -> Vec<&OperatorNode> {
        self.topo().filter(|n| n.inputs.is_empty()).collect()
    }

    pub fn exit_nodes(&self) -> Vec<&OperatorNode> {
        self.order
            .iter()
            .filter(|&&i| self.consumers[i].is_empty())
            .map(|&i| &self.nodes[i])
            .collect()
    }

    /// Declarations reproducing this graph, in topological order.
    pub fn to_decls(&self) -> Vec<NodeDecl> {
        self.topo()
            .map(|n| NodeDecl {
                id: n.id.clone(),
                kind: n.kind,
                attrs: n.attrs.clone(),
                inputs: n.inputs.clone(),
            })
            .collect()
    }

    /// Total work over all nodes.
    pub fn total_work(&self) -> WorkEstimate {
        self.topo().map(op_work).fold(WorkEstimate::default(), |a, b| a + b)
    }
}

/// Walks predecessor links among the nodes Kahn's algorithm could not place
/// until a node repeats.
fn find_cycle(preds: &[Vec<usize>], indeg: &[usize]) -> Vec<usize> {
    let stuck: BTreeSet<usize> = (0..preds.len()).filter(|&i| indeg[i] > 0).collect();
    let start = *stuck.iter().next().expect("a cycle leaves nodes unplaced");
    let mut path = vec![start];
    let mut seen = BTreeMap::new();
    seen.insert(start, 0usize);
    let mut cur = start;
    loop {
        let next = *preds[cur]
            .iter()
            .find(|p| stuck.contains(p))
            .expect("unplaced node has an unplaced predecessor");
        if let Some(&pos) = seen.get(&next) {
            let mut cycle: Vec<usize> = path[pos..].to_vec();
            cycle.reverse();
            cycle.push(cycle[0]);
            return cycle;
        }
        seen.insert(next, path.len());
        path.push(next);
        cur = next;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mlp_decls() -> Vec<NodeDecl> {
        vec![
            NodeDecl::new("fc1", OpKind::Linear).attr("M", 1024).attr("K", 256).attr("N", 1024),
            NodeDecl::new("act", OpKind::Elementwise).input("fc1"),
            NodeDecl::new("fc2", OpKind::Linear)
                .attr("M", 1024)
                .attr("K", 1024)
                .attr("N", 256)
                .input("act"),
        ]
    }

    #[test]
    fn empty_graph() {
        let g = OperatorGraph::from_decls(2, Vec::new()).unwrap();
        assert!(g.is_empty());
        assert!(g.edges().is_empty());
    }

    #[test]
    fn single_linear_shape() {
        let g = OperatorGraph::from_decls(
            2,
            vec![NodeDecl::new("l", OpKind::Linear).attr("M", 1024).attr("K", 256).attr("N", 1024)],
        )
        .unwrap();
        assert_eq!(g.node("l").unwrap().output_shape.dims, vec![1024, 1024]);
    }

    #[test]
    fn mlp_topo_order() {
        let g = OperatorGraph::from_decls(2, mlp_decls()).unwrap();
        assert_eq!(g.len(), 3);
        assert_eq!(g.edges().len(), 2);
        let kinds: Vec<OpKind> = g.topo().map(|n| n.kind).collect();
        assert_eq!(kinds, vec![OpKind::Linear, OpKind::Elementwise, OpKind::Linear]);
    }

    #[test]
    fn declaration_order_does_not_need_to_be_topological() {
        let mut d = mlp_decls();
        d.reverse();
        let g = OperatorGraph::from_decls(2, d).unwrap();
        assert_eq!(g.topo_ids(), vec!["fc1", "act", "fc2"]);
    }

    #[test]
    fn cycle_is_reported() {
        let d = vec![
            NodeDecl::new("a", OpKind::Elementwise).attr_list("shape", &[4]).input("c"),
            NodeDecl::new("b", OpKind::Elementwise).input("a"),
            NodeDecl::new("c", OpKind::Elementwise).input("b"),
        ];
        match OperatorGraph::from_decls(2, d) {
            Err(Error::Cycle(ids)) => {
                assert_eq!(ids.len(), 4);
                assert_eq!(ids.first(), ids.last());
                for id in ["a", "b", "c"] {
                    assert!(ids.iter().any(|x| x == id));
                }
            }
            other => panic!("expected cycle, got {other:?}"),
        }
    }

    #[test]
    fn shape_mismatch_names_both_nodes() {
        let d = vec![
            NodeDecl::new("fc1", OpKind::Linear).attr("M", 64).attr("K", 32).attr("N", 128),
            NodeDecl::new("fc2", OpKind::Linear).attr("M", 64).attr("K", 100).attr("N", 8).input("fc1"),
        ];
        match OperatorGraph::from_decls(2, d) {
            Err(Error::ShapeMismatch { producer, consumer, .. }) => {
                assert_eq!(producer, "fc1");
                assert_eq!(consumer, "fc2");
            }
            other => panic!("expected mismatch, got {other:?}"),
        }
    }

    #[test]
    fn unknown_input_and_duplicate() {
        let d = vec![NodeDecl::new("a", OpKind::Elementwise).input("nope")];
        assert_eq!(OperatorGraph::from_decls(2, d), Err(Error::UnknownNode("nope".into())));
        let d = vec![
            NodeDecl::new("a", OpKind::Elementwise).attr_list("shape", &[4]),
            NodeDecl::new("a", OpKind::Elementwise).attr_list("shape", &[4]),
        ];
        assert_eq!(OperatorGraph::from_decls(2, d), Err(Error::DuplicateNode("a".into())));
    }

    #[test]
    fn kind_parsing_is_case_insensitive() {
        assert_eq!("layernorm".parse::<OpKind>().unwrap(), OpKind::LayerNorm);
        assert!("Conv".parse::<OpKind>().is_err());
    }
}
