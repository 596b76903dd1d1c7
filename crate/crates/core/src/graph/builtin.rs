//! Generators for the common operator patterns and simplified application
//! graphs used throughout the test suite and the CLI.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::{NodeDecl, OpKind, OperatorGraph};
use crate::{Error, Result};

pub const BUILTIN_NAMES: [&str; 6] = [
    "mlp-wide-hidden",
    "splitk-reduce",
    "backprop-multicast",
    "nerf-chain",
    "mgn-mlp",
    "transformer-ffn",
];

/// Named integer parameters overriding a builtin's defaults.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BuiltinParams(pub BTreeMap<String, u64>);

impl BuiltinParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, key: &str, value: u64) -> Self {
        self.0.insert(key.to_string(), value);
        self
    }
}

struct Reader<'a> {
    params: &'a BuiltinParams,
    allowed: &'static [(&'static str, u64)],
}

impl Reader<'_> {
    fn check(&self) -> Result<()> {
        for (k, v) in &self.params.0 {
            if !self.allowed.iter().any(|(name, _)| name == k) {
                let names: Vec<&str> = self.allowed.iter().map(|(n, _)| *n).collect();
                return Err(Error::InvalidParam {
                    name: k.clone(),
                    reason: format!("unknown parameter; expected one of {}", names.join(", ")),
                });
            }
            if *v == 0 {
                return Err(Error::InvalidParam { name: k.clone(), reason: "must be >= 1".into() });
            }
        }
        Ok(())
    }

    fn get(&self, key: &str) -> i64 {
        let default = self.allowed.iter().find(|(n, _)| *n == key).map(|(_, d)| *d).expect("declared");
        *self.params.0.get(key).unwrap_or(&default) as i64
    }
}

type Builder = fn(&Reader<'_>) -> Result<Vec<NodeDecl>>;

pub fn builtin_graph(name: &str, params: &BuiltinParams) -> Result<OperatorGraph> {
    let (allowed, build): (&'static [(&'static str, u64)], Builder) =
        match name {
            "mlp-wide-hidden" => (&[("B", 1024), ("K", 256), ("N", 1024)], mlp_wide_hidden),
            "splitk-reduce" => (&[("M", 1024), ("N", 1024), ("K", 4096), ("splits", 4)], splitk_reduce),
            "backprop-multicast" => (&[("B", 1024), ("H", 1024)], backprop_multicast),
            "nerf-chain" => (
                &[("batch", 65536), ("hidden", 256), ("layers", 8), ("pos_dim", 60), ("dir_dim", 24)],
                nerf_chain,
            ),
            "mgn-mlp" => (&[("edges", 65536), ("latent", 128)], mgn_mlp),
            "transformer-ffn" => (&[("tokens", 2048), ("d_model", 1024), ("d_ff", 4096)], transformer_ffn),
            _ => return Err(Error::UnknownBuiltin(name.to_string())),
        };
    let reader = Reader { params, allowed };
    reader.check()?;
    OperatorGraph::from_decls(2, build(&reader)?)
}

fn linear(id: &str, m: i64, k: i64, n: i64) -> NodeDecl {
    NodeDecl::new(id, OpKind::Linear).attr("M", m).attr("K", k).attr("N", n)
}

/// Linear -> Elementwise -> Linear with a wide hidden dimension `N`.
fn mlp_wide_hidden(p: &Reader<'_>) -> Result<Vec<NodeDecl>> {
    let (b, k, n) = (p.get("B"), p.get("K"), p.get("N"));
    Ok(alloc::vec![
        linear("fc1", b, k, n),
        NodeDecl::new("act", OpKind::Elementwise).input("fc1"),
        linear("fc2", b, n, k).input("act"),
    ])
}

/// `splits` partial GEMMs over slices of K summed by one reduction.
fn splitk_reduce(p: &Reader<'_>) -> Result<Vec<NodeDecl>> {
    let (m, n, k, s) = (p.get("M"), p.get("N"), p.get("K"), p.get("splits"));
    if s < 2 {
        return Err(Error::InvalidParam { name: "splits".into(), reason: "must be >= 2".into() });
    }
    if k % s != 0 {
        return Err(Error::InvalidParam { name: "splits".into(), reason: format!("must divide K={k}") });
    }
    let mut decls: Vec<NodeDecl> = (0..s).map(|i| linear(&format!("part{i}"), m, k / s, n)).collect();
    let mut sum = NodeDecl::new("sum", OpKind::Reduce);
    for i in 0..s {
        sum = sum.input(format!("part{i}"));
    }
    decls.push(sum);
    Ok(decls)
}

/// Backward pass of Linear+activation: the activation gradient feeds both
/// the input-gradient and the weight-gradient GEMMs.
fn backprop_multicast(p: &Reader<'_>) -> Result<Vec<NodeDecl>> {
    let (b, h) = (p.get("B"), p.get("H"));
    Ok(alloc::vec![
        NodeDecl::new("grad", OpKind::Elementwise)
            .attr_list("shape", &[b, h])
            .attr("external_inputs", 2)
            .attr("backward", 1),
        linear("dx", b, h, h).input("grad").attr("backward", 1),
        linear("dw", h, b, h).attr("operand", 1).input("grad").attr("backward", 1),
    ])
}

/// NeRF-style MLP: `layers` Linear+ReLU with a positional-encoding skip
/// concat halfway, a density head and a view-dependent colour head.
fn nerf_chain(p: &Reader<'_>) -> Result<Vec<NodeDecl>> {
    let (batch, hidden, layers) = (p.get("batch"), p.get("hidden"), p.get("layers"));
    let (pos, dir) = (p.get("pos_dim"), p.get("dir_dim"));
    if layers < 2 {
        return Err(Error::InvalidParam { name: "layers".into(), reason: "must be >= 2".into() });
    }
    if hidden < 2 {
        return Err(Error::InvalidParam { name: "hidden".into(), reason: "must be >= 2".into() });
    }
    let mut decls = Vec::new();
    let mut prev: Option<String> = None;
    let mut width = pos;
    for i in 0..layers {
        if i == layers / 2 {
            let src = prev.clone().expect("layers >= 2");
            decls.push(NodeDecl::new("skip", OpKind::Concat).attr("extra", pos).input(src));
            prev = Some("skip".into());
            width = hidden + pos;
        }
        let mut fc = linear(&format!("fc{i}"), batch, width, hidden);
        if let Some(src) = &prev {
            fc = fc.input(src.clone());
        }
        decls.push(fc);
        decls.push(NodeDecl::new(format!("relu{i}"), OpKind::Elementwise).input(format!("fc{i}")));
        prev = Some(format!("relu{i}"));
        width = hidden;
    }
    let trunk = prev.expect("at least one layer");
    decls.push(linear("sigma", batch, hidden, 1).input(trunk.clone()));
    decls.push(linear("feature", batch, hidden, hidden).input(trunk));
    decls.push(NodeDecl::new("viewdir", OpKind::Concat).attr("extra", dir).input("feature"));
    decls.push(linear("rgb_fc", batch, hidden + dir, hidden / 2).input("viewdir"));
    decls.push(NodeDecl::new("rgb_relu", OpKind::Elementwise).input("rgb_fc"));
    decls.push(linear("rgb", batch, hidden / 2, 3).input("rgb_relu"));
    decls.push(NodeDecl::new("rgb_sigmoid", OpKind::Elementwise).attr("flops_per_element", 4).input("rgb"));
    Ok(decls)
}

/// MeshGraphNets edge update: gather both endpoint latents, concat with the
/// edge latent, 3-layer MLP, LayerNorm, residual.
fn mgn_mlp(p: &Reader<'_>) -> Result<Vec<NodeDecl>> {
    let (e, l) = (p.get("edges"), p.get("latent"));
    Ok(alloc::vec![
        NodeDecl::new("gather_src", OpKind::Gather).attr_list("shape", &[e, l]),
        NodeDecl::new("gather_dst", OpKind::Gather).attr_list("shape", &[e, l]),
        NodeDecl::new("edge_cat", OpKind::Concat).attr("extra", l).input("gather_src").input("gather_dst"),
        linear("fc0", e, 3 * l, l).input("edge_cat"),
        NodeDecl::new("relu0", OpKind::Elementwise).input("fc0"),
        linear("fc1", e, l, l).input("relu0"),
        NodeDecl::new("relu1", OpKind::Elementwise).input("fc1"),
        linear("fc2", e, l, l).input("relu1"),
        NodeDecl::new("norm", OpKind::LayerNorm).input("fc2"),
        NodeDecl::new("residual", OpKind::Elementwise).attr("external_inputs", 1).input("norm"),
    ])
}

/// Pre-norm transformer feed-forward block.
fn transformer_ffn(p: &Reader<'_>) -> Result<Vec<NodeDecl>> {
    let (t, d, f) = (p.get("tokens"), p.get("d_model"), p.get("d_ff"));
    Ok(alloc::vec![
        NodeDecl::new("norm", OpKind::LayerNorm).attr_list("shape", &[t, d]),
        linear("up", t, d, f).input("norm"),
        NodeDecl::new("gelu", OpKind::Elementwise).attr("flops_per_element", 8).input("up"),
        linear("down", t, f, d).input("gelu"),
        NodeDecl::new("residual", OpKind::Elementwise).attr("external_inputs", 1).input("down"),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn all_builtins_build() {
        for name in BUILTIN_NAMES {
            let g = builtin_graph(name, &BuiltinParams::new()).unwrap();
            assert!(!g.is_empty(), "{name}");
        }
    }

    #[test]
    fn mlp_shape() {
        let g = builtin_graph("mlp-wide-hidden", &BuiltinParams::new()).unwrap();
        let kinds: Vec<OpKind> = g.topo().map(|n| n.kind).collect();
        assert_eq!(kinds, vec![OpKind::Linear, OpKind::Elementwise, OpKind::Linear]);
        assert_eq!(g.node("act").unwrap().output_shape.dims, vec![1024, 1024]);
    }

    #[test]
    fn nerf_defaults() {
        let g = builtin_graph("nerf-chain", &BuiltinParams::new()).unwrap();
        assert_eq!(g.len(), 24);
        let linears = g.topo().filter(|n| n.id.starts_with("fc")).count();
        assert_eq!(linears, 8);
        assert_eq!(g.node("relu0").unwrap().output_shape.dims[1], 256);
    }

    #[test]
    fn multicast_feeds_two_gemms() {
        let g = builtin_graph("backprop-multicast", &BuiltinParams::new()).unwrap();
        let c = g.consumers("grad").unwrap();
        assert_eq!(c.len(), 2);
        assert!(c.iter().all(|n| n.kind == OpKind::Linear));
    }

    #[test]
    fn bad_params() {
        assert!(matches!(
            builtin_graph("resnet", &BuiltinParams::new()),
            Err(Error::UnknownBuiltin(_))
        ));
        let p = BuiltinParams::new().with("Q", 3);
        assert!(matches!(builtin_graph("mlp-wide-hidden", &p), Err(Error::InvalidParam { .. })));
        let p = BuiltinParams::new().with("splits", 3);
        assert!(builtin_graph("splitk-reduce", &p).is_err());
    }
}
