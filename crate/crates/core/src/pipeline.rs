//! Lowering of sf-nodes into spatial pipelines.
//!
//! Every member of an sf-node becomes part of a stage. n-ary reductions are
//! first split into fan-in trees; an Elementwise node that trivially depends
//! on its producer is folded into the producer's stage; every other
//! intermediate gets exactly one queue, shared by all of its consumers.
//! Stage outputs are tiled along rows so that no queue payload exceeds the
//! budget.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::graph::{op_flops, OpClass, OpKind, OperatorGraph, OperatorNode, TensorShape};
use crate::math::div_ceil;
use crate::select::SfNode;
use crate::{Error, Result};

pub const DEFAULT_PAYLOAD_BUDGET: u64 = 128 << 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineOptions {
    pub payload_budget: u64,
    pub queue_depth: u32,
    pub reduction_arity: usize,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self { payload_budget: DEFAULT_PAYLOAD_BUDGET, queue_depth: 2, reduction_arity: 2 }
    }
}

impl PipelineOptions {
    pub fn validate(&self) -> Result<()> {
        if self.payload_budget == 0 {
            return Err(Error::InvalidConfig("payload_budget must be positive".into()));
        }
        if self.queue_depth < 2 {
            return Err(Error::InvalidConfig("queue_depth must be >= 2".into()));
        }
        if self.reduction_arity < 2 {
            return Err(Error::InvalidArity(self.reduction_arity));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TilePlan {
    pub tile_rows: u64,
    pub tile_shape: [u64; 2],
    pub tiles_total: u64,
    pub tile_bytes: u64,
}

/// Largest row tile of `shape` whose payload fits `budget`. `None` if a
/// single row is already too large.
pub fn tile_plan(shape: &TensorShape, budget: u64) -> Option<TilePlan> {
    let row_bytes = shape.row_bytes();
    if row_bytes > budget {
        return None;
    }
    let rows = shape.rows();
    let tile_rows = (budget / row_bytes).min(rows);
    Some(TilePlan {
        tile_rows,
        tile_shape: [tile_rows, shape.row_elems()],
        tiles_total: div_ceil(rows, tile_rows),
        tile_bytes: tile_rows * row_bytes,
    })
}

/// Input of a reduction tree node: an operand of the original reduction or
/// the output of an earlier partial stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TreeInput {
    Operand(usize),
    Partial(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeStage {
    pub level: usize,
    pub inputs: Vec<TreeInput>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReductionTree {
    /// Partial reductions; `TreeInput::Partial(i)` refers to `fanin[i]`.
    pub fanin: Vec<TreeStage>,
    pub final_stage: TreeStage,
}

impl ReductionTree {
    /// Element-wise adds per output element over the whole tree.
    pub fn adds_per_element(&self) -> u64 {
        self.fanin.iter().chain(core::iter::once(&self.final_stage)).map(|s| s.inputs.len() as u64 - 1).sum()
    }

    pub fn depth(&self) -> usize {
        self.final_stage.level + 1
    }
}

/// Splits an n-ary reduction into a tree of partial reductions of the
/// given arity. Inputs are grouped level by level; a lone leftover input is
/// passed up unchanged.
pub fn split_reduction(node: &OperatorNode, arity: usize) -> Result<ReductionTree> {
    if arity < 2 {
        return Err(Error::InvalidArity(arity));
    }
    let n = match node.reduction_fanin() {
        Some(n) if n >= 2 => n,
        _ => return Err(Error::NotAReduction(node.id.clone())),
    };
    let mut level_items: Vec<TreeInput> = (0..n).map(TreeInput::Operand).collect();
    let mut fanin = Vec::new();
    let mut level = 0;
    while level_items.len() > arity {
        let mut next = Vec::new();
        for chunk in level_items.chunks(arity) {
            if chunk.len() == 1 {
                next.push(chunk[0]);
            } else {
                fanin.push(TreeStage { level, inputs: chunk.to_vec() });
                next.push(TreeInput::Partial(fanin.len() - 1));
            }
        }
        level_items = next;
        level += 1;
    }
    Ok(ReductionTree { fanin, final_stage: TreeStage { level, inputs: level_items } })
}

/// Whether `b` can be folded into the stage that produces `a`.
pub fn epilogue_fusible(graph: &OperatorGraph, a: &OperatorNode, b: &OperatorNode) -> bool {
    if b.kind != OpKind::Elementwise || b.inputs.len() != 1 || b.inputs[0] != a.id {
        return false;
    }
    let out = b.output_shape.numel();
    let tensor_sized = b.operands.iter().filter(|o| o.shape.numel() >= out).count();
    if tensor_sized != 1 {
        return false;
    }
    let consumers = |id: &str| graph.consumers(id).map(|c| c.len()).unwrap_or(usize::MAX);
    consumers(&a.id) == 1 && consumers(&b.id) <= 1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageRole {
    Compute,
    FanIn { level: usize, index: usize },
    Final,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineStage {
    pub id: String,
    /// Graph nodes whose work this stage performs, producer first.
    pub nodes: Vec<String>,
    pub role: StageRole,
    pub class: OpClass,
    pub output_shape: TensorShape,
    pub tile_shape: [u64; 2],
    pub tiles_total: u64,
    pub input_queues: Vec<String>,
    pub output_queue: Option<String>,
    pub tensor_flops: u64,
    pub simt_flops: u64,
    /// Whole-tensor byte totals over the pipeline's lifetime.
    pub dram_read_bytes: u64,
    pub dram_write_bytes: u64,
    pub queue_read_bytes: u64,
    pub queue_write_bytes: u64,
    /// Main-memory bytes the same work moves when run bulk-synchronously.
    pub bsp_bytes: u64,
}

impl PipelineStage {
    pub fn flops(&self) -> u64 {
        self.tensor_flops + self.simt_flops
    }

    pub fn dram_bytes(&self) -> u64 {
        self.dram_read_bytes + self.dram_write_bytes
    }

    pub fn queue_bytes(&self) -> u64 {
        self.queue_read_bytes + self.queue_write_bytes
    }

    pub fn is_entry(&self) -> bool {
        self.input_queues.is_empty()
    }

    pub fn is_exit(&self) -> bool {
        self.output_queue.is_none() || self.dram_write_bytes > 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueNode {
    pub id: String,
    pub producer: String,
    /// Consumer stages in pipeline order; all read in producer order.
    pub consumers: Vec<String>,
    /// Node (or partial reduction) whose output the queue carries.
    pub tensor: String,
    pub tensor_bytes: u64,
    pub payload_bytes: u64,
    pub depth: u32,
}

impl QueueNode {
    pub fn footprint_bytes(&self) -> u64 {
        crate::queue::QueueState::new(self.depth, self.payload_bytes, self.consumers.len()).footprint_bytes()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineSpec {
    pub sf_id: String,
    pub members: Vec<String>,
    /// Pipeline steps; every stage handles `1/steps` of its work per step.
    pub steps: u64,
    pub stages: Vec<PipelineStage>,
    pub queues: Vec<QueueNode>,
    pub entry_stages: Vec<String>,
    pub exit_stages: Vec<String>,
}

impl PipelineSpec {
    pub fn stage(&self, id: &str) -> Option<&PipelineStage> {
        self.stages.iter().find(|s| s.id == id)
    }

    pub fn queue(&self, id: &str) -> Option<&QueueNode> {
        self.queues.iter().find(|q| q.id == id)
    }

    pub fn dram_bytes(&self) -> u64 {
        self.stages.iter().map(PipelineStage::dram_bytes).sum()
    }

    pub fn queue_bytes(&self) -> u64 {
        self.stages.iter().map(PipelineStage::queue_bytes).sum()
    }

    pub fn queue_footprint_bytes(&self) -> u64 {
        self.queues.iter().map(QueueNode::footprint_bytes).sum()
    }
}

/// Byte split of a `total` transferred in `steps` equal parts; part `k`
/// gets `floor((k+1)total/steps) - floor(k total/steps)` bytes so the parts
/// sum to `total` exactly.
pub fn step_share(total: u64, steps: u64, k: u64) -> u64 {
    let t = u128::from(total);
    let s = u128::from(steps);
    let k = u128::from(k);
    ((k + 1) * t / s - k * t / s) as u64
}

struct Draft {
    nodes: Vec<String>,
    role: StageRole,
    out: TensorShape,
    tensor_flops: u64,
    simt_flops: u64,
    dram_read: u64,
    dram_write: u64,
    bsp: u64,
    /// Producer stages this stage reads from, with bytes per read.
    reads: Vec<(usize, u64)>,
}

impl Draft {
    fn new(role: StageRole, out: TensorShape) -> Self {
        Self {
            nodes: Vec::new(),
            role,
            out,
            tensor_flops: 0,
            simt_flops: 0,
            dram_read: 0,
            dram_write: 0,
            bsp: 0,
            reads: Vec::new(),
        }
    }

    fn add_flops(&mut self, node: &OperatorNode, flops: u64) {
        match node.class() {
            OpClass::Tensor => self.tensor_flops += flops,
            OpClass::Simt => self.simt_flops += flops,
        }
    }

    fn read(&mut self, producer: Option<usize>, bytes: u64) {
        match producer {
            Some(p) => {
                if !self.reads.iter().any(|&(q, _)| q == p) {
                    self.reads.push((p, bytes));
                }
            }
            None => self.dram_read += bytes,
        }
        self.bsp += bytes;
    }
}

fn leaves_pipeline(graph: &OperatorGraph, sf: &SfNode, node: &OperatorNode) -> Result<bool> {
    let consumers = graph.consumers(&node.id)?;
    Ok(node.is_saved() || consumers.is_empty() || consumers.iter().any(|c| !sf.contains(&c.id)))
}

pub fn design_pipeline(sf: &SfNode, graph: &OperatorGraph, opts: &PipelineOptions) -> Result<PipelineSpec> {
    opts.validate()?;
    let mut members: Vec<&OperatorNode> = sf.members.iter().map(|m| graph.node(m)).collect::<Result<_>>()?;
    members.sort_by_key(|n| graph.topo_position(&n.id).unwrap_or(usize::MAX));

    let mut drafts: Vec<Draft> = Vec::new();
    // Stage holding each member's output.
    let mut stage_of: BTreeMap<&str, usize> = BTreeMap::new();

    for &node in &members {
        let fuse_into = node
            .inputs
            .first()
            .filter(|_| node.inputs.len() == 1)
            .and_then(|p| stage_of.get(p.as_str()).copied())
            .filter(|&s| {
                let d = &drafts[s];
                !matches!(d.role, StageRole::FanIn { .. })
                    && d.nodes.last().map(String::as_str) == Some(node.inputs[0].as_str())
            })
            .filter(|_| {
                graph.node(&node.inputs[0]).map(|a| epilogue_fusible(graph, a, node)).unwrap_or(false)
            });

        let producer_stage = |src: &Option<String>| -> Option<usize> {
            src.as_deref().filter(|s| sf.contains(s)).and_then(|s| stage_of.get(s).copied())
        };

        if let Some(s) = fuse_into {
            let d = &mut drafts[s];
            d.nodes.push(node.id.clone());
            d.add_flops(node, op_flops(node));
            for op in &node.operands {
                if op.source.as_deref() == Some(node.inputs[0].as_str()) {
                    // produced in this stage, the bulk-synchronous read still counts
                    d.bsp += op.shape.bytes();
                } else {
                    d.read(None, op.shape.bytes());
                }
            }
            d.out = node.output_shape.clone();
            d.bsp += node.output_shape.bytes();
            stage_of.insert(&node.id, s);
            continue;
        }

        if let Some(n) = node.reduction_fanin().filter(|&n| n >= 2) {
            let tree = split_reduction(node, opts.reduction_arity)?;
            let elems = node.output_shape.numel();
            let out_bytes = node.output_shape.bytes();
            let mut partial_stage = Vec::with_capacity(tree.fanin.len());
            let tree_nodes = tree
                .fanin
                .iter()
                .enumerate()
                .map(|(i, t)| (StageRole::FanIn { level: t.level, index: i }, t))
                .chain(core::iter::once((StageRole::Final, &tree.final_stage)));
            for (role, t) in tree_nodes {
                let mut d = Draft::new(role, node.output_shape.clone());
                d.nodes.push(node.id.clone());
                d.add_flops(node, (t.inputs.len() as u64 - 1) * elems);
                for input in &t.inputs {
                    match *input {
                        TreeInput::Operand(i) => {
                            debug_assert!(i < n);
                            let op = &node.operands[i];
                            d.read(producer_stage(&op.source), op.shape.bytes());
                        }
                        TreeInput::Partial(p) => {
                            d.reads.push((partial_stage[p], out_bytes));
                        }
                    }
                }
                if role == StageRole::Final {
                    d.bsp += out_bytes;
                }
                drafts.push(d);
                partial_stage.push(drafts.len() - 1);
            }
            stage_of.insert(&node.id, drafts.len() - 1);
            continue;
        }

        let mut d = Draft::new(StageRole::Compute, node.output_shape.clone());
        d.nodes.push(node.id.clone());
        d.add_flops(node, op_flops(node));
        for op in &node.operands {
            d.read(producer_stage(&op.source), op.shape.bytes());
        }
        d.bsp += node.output_shape.bytes();
        drafts.push(d);
        stage_of.insert(&node.id, drafts.len() - 1);
    }

    // Main-memory writes: outputs leaving the pipeline and activation saves.
    for &node in &members {
        if leaves_pipeline(graph, sf, node)? {
            drafts[stage_of[node.id.as_str()]].dram_write += node.output_shape.bytes();
        }
    }

    let mut tiles = Vec::with_capacity(drafts.len());
    for d in &drafts {
        let plan = tile_plan(&d.out, opts.payload_budget).ok_or_else(|| Error::Untileable {
            node: d.nodes.last().cloned().unwrap_or_default(),
            row_bytes: d.out.row_bytes(),
            budget: opts.payload_budget,
        })?;
        tiles.push(plan);
    }
    let steps = tiles.iter().map(|t| t.tiles_total).max().unwrap_or(1);

    let stage_id = |i: usize| format!("s{i}");
    let mut consumers_of: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for (c, d) in drafts.iter().enumerate() {
        for &(p, _) in &d.reads {
            consumers_of.entry(p).or_default().insert(c);
        }
    }
    let mut queues = Vec::new();
    let mut queue_of: BTreeMap<usize, String> = BTreeMap::new();
    for (&p, cs) in &consumers_of {
        let id = format!("q{}", queues.len());
        let d = &drafts[p];
        let tensor = match d.role {
            StageRole::FanIn { index, .. } => format!("{}.partial{index}", d.nodes[0]),
            _ => d.nodes.last().cloned().unwrap_or_default(),
        };
        let tensor_bytes = d.out.bytes();
        queues.push(QueueNode {
            id: id.clone(),
            producer: stage_id(p),
            consumers: cs.iter().map(|&c| stage_id(c)).collect(),
            tensor,
            tensor_bytes,
            payload_bytes: div_ceil(tensor_bytes, steps).max(1),
            depth: opts.queue_depth,
        });
        queue_of.insert(p, id);
    }

    let mut stages = Vec::with_capacity(drafts.len());
    for (i, (d, plan)) in drafts.into_iter().zip(tiles).enumerate() {
        let class = if d.tensor_flops > 0 { OpClass::Tensor } else { OpClass::Simt };
        let output_queue = queue_of.get(&i).cloned();
        let queue_write_bytes = if output_queue.is_some() { d.out.bytes() } else { 0 };
        stages.push(PipelineStage {
            id: stage_id(i),
            nodes: d.nodes,
            role: d.role,
            class,
            output_shape: d.out,
            tile_shape: plan.tile_shape,
            tiles_total: plan.tiles_total,
            input_queues: d.reads.iter().map(|(p, _)| queue_of[p].clone()).collect(),
            output_queue,
            tensor_flops: d.tensor_flops,
            simt_flops: d.simt_flops,
            dram_read_bytes: d.dram_read,
            dram_write_bytes: d.dram_write,
            queue_read_bytes: d.reads.iter().map(|&(_, b)| b).sum(),
            queue_write_bytes,
            bsp_bytes: d.bsp,
        });
    }
    let entry_stages = stages.iter().filter(|s| s.is_entry()).map(|s| s.id.clone()).collect();
    let exit_stages = stages.iter().filter(|s| s.is_exit()).map(|s| s.id.clone()).collect();

    Ok(PipelineSpec {
        sf_id: sf.id.clone(),
        members: members.iter().map(|n| n.id.clone()).collect(),
        steps,
        stages,
        queues,
        entry_stages,
        exit_stages,
    })
}

pub fn design_pipelines(graph: &OperatorGraph, sfnodes: &[SfNode], opts: &PipelineOptions) -> Result<Vec<PipelineSpec>> {
    sfnodes.iter().map(|sf| design_pipeline(sf, graph, opts)).collect()
}
