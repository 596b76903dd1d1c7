//! Per-kind shape inference and operand resolution.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::{AttrValue, NodeDecl, OpKind, Operand, TensorShape};
use crate::{Error, Result};

type Inputs<'a> = [(&'a str, &'a TensorShape)];

pub(super) fn infer(
    decl: &NodeDecl,
    inputs: &Inputs<'_>,
    dtype: u8,
) -> Result<(Vec<Operand>, TensorShape)> {
    match decl.kind {
        OpKind::Linear => gemm(decl, inputs, dtype, false),
        OpKind::Attention => gemm(decl, inputs, dtype, true),
        OpKind::Elementwise => elementwise(decl, inputs, dtype),
        OpKind::Reduce => reduce(decl, inputs, dtype),
        OpKind::Concat => concat(decl, inputs, dtype),
        OpKind::Gather => gather(decl, inputs, dtype),
        OpKind::Softmax | OpKind::LayerNorm => unary(decl, inputs, dtype),
    }
}

fn int(decl: &NodeDecl, key: &'static str) -> Result<Option<i64>> {
    match decl.attrs.get(key) {
        None => Ok(None),
        Some(AttrValue::Int(v)) => Ok(Some(*v)),
        Some(AttrValue::Ints(_)) => Err(invalid(decl, key, "expected an integer")),
    }
}

fn positive(decl: &NodeDecl, key: &'static str) -> Result<Option<u64>> {
    match int(decl, key)? {
        None => Ok(None),
        Some(v) if v >= 1 => Ok(Some(v as u64)),
        Some(v) => Err(invalid(decl, key, &format!("must be >= 1, got {v}"))),
    }
}

fn required(decl: &NodeDecl, key: &'static str) -> Result<u64> {
    positive(decl, key)?.ok_or_else(|| Error::MissingAttr { node: decl.id.clone(), attr: key })
}

fn shape_attr(decl: &NodeDecl, dtype: u8) -> Result<Option<TensorShape>> {
    match decl.attrs.get("shape") {
        None => Ok(None),
        Some(AttrValue::Ints(dims)) => {
            if dims.is_empty() || dims.iter().any(|&d| d < 1) {
                return Err(invalid(decl, "shape", "dimensions must be >= 1"));
            }
            Ok(Some(TensorShape::new(dims.iter().map(|&d| d as u64).collect(), dtype)?))
        }
        Some(AttrValue::Int(_)) => Err(invalid(decl, "shape", "expected a list of integers")),
    }
}

fn invalid(decl: &NodeDecl, attr: &str, reason: &str) -> Error {
    Error::InvalidAttr { node: decl.id.clone(), attr: attr.to_string(), reason: reason.to_string() }
}

fn mismatch(producer: &str, decl: &NodeDecl, detail: String) -> Error {
    Error::ShapeMismatch { producer: producer.to_string(), consumer: decl.id.clone(), detail }
}

fn external(shape: TensorShape) -> Operand {
    Operand { source: None, shape }
}

fn from_input((id, shape): &(&str, &TensorShape)) -> Operand {
    Operand { source: Some(id.to_string()), shape: (*shape).clone() }
}

fn arity_error(decl: &NodeDecl, detail: &str) -> Error {
    invalid(decl, "inputs", detail)
}

/// `Linear` (and batched `Attention`): operand A is `[.., M, K]`, B is
/// `[.., K, N]`. With one node input, attribute `operand` (0 or 1) says which
/// side it feeds; the other is read from memory.
fn gemm(decl: &NodeDecl, inputs: &Inputs<'_>, dtype: u8, batched: bool) -> Result<(Vec<Operand>, TensorShape)> {
    let m = required(decl, "M")?;
    let n = required(decl, "N")?;
    let k = required(decl, "K")?;
    let b = if batched { positive(decl, "B")?.unwrap_or(1) } else { 1 };
    let prefix = |dims: [u64; 2]| -> Vec<u64> {
        if batched { alloc::vec![b, dims[0], dims[1]] } else { dims.to_vec() }
    };
    let a_shape = TensorShape::new(prefix([m, k]), dtype)?;
    let b_shape = TensorShape::new(prefix([k, n]), dtype)?;
    let out = TensorShape::new(prefix([m, n]), dtype)?;

    let check_a = |inp: &(&str, &TensorShape)| -> Result<()> {
        let s = inp.1;
        if s.numel() != a_shape.numel() || s.row_elems() != k {
            return Err(mismatch(inp.0, decl, format!("operand A is {s}, expected {a_shape} (inner dim K={k})")));
        }
        Ok(())
    };
    let check_b = |inp: &(&str, &TensorShape)| -> Result<()> {
        let s = inp.1;
        if s.numel() != b_shape.numel() {
            return Err(mismatch(inp.0, decl, format!("operand B is {s}, expected {b_shape}")));
        }
        Ok(())
    };

    let operands = match inputs {
        [] => alloc::vec![external(a_shape), external(b_shape)],
        [one] => match int(decl, "operand")?.unwrap_or(0) {
            0 => {
                check_a(one)?;
                alloc::vec![from_input(one), external(b_shape)]
            }
            1 => {
                check_b(one)?;
                alloc::vec![external(a_shape), from_input(one)]
            }
            _ => return Err(invalid(decl, "operand", "must be 0 (A) or 1 (B)")),
        },
        [a, bb] => {
            check_a(a)?;
            check_b(bb)?;
            alloc::vec![from_input(a), from_input(bb)]
        }
        _ => return Err(arity_error(decl, "a GEMM takes at most two operands")),
    };
    Ok((operands, out))
}

/// Numpy-style broadcast of two shapes.
fn broadcast(a: &TensorShape, b: &TensorShape) -> Option<Vec<u64>> {
    let n = a.dims.len().max(b.dims.len());
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let da = if i < n - a.dims.len() { 1 } else { a.dims[i - (n - a.dims.len())] };
        let db = if i < n - b.dims.len() { 1 } else { b.dims[i - (n - b.dims.len())] };
        out.push(match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        });
    }
    Some(out)
}

fn elementwise(decl: &NodeDecl, inputs: &Inputs<'_>, dtype: u8) -> Result<(Vec<Operand>, TensorShape)> {
    let declared = shape_attr(decl, dtype)?;
    let mut out = match (inputs.first(), &declared) {
        (Some(first), _) => first.1.clone(),
        (None, Some(s)) => s.clone(),
        (None, None) => return Err(Error::MissingAttr { node: decl.id.clone(), attr: "shape" }),
    };
    for inp in inputs.iter().skip(1) {
        let dims = broadcast(&out, inp.1)
            .ok_or_else(|| mismatch(inp.0, decl, format!("{} does not broadcast with {out}", inp.1)))?;
        out = TensorShape::new(dims, dtype)?;
    }
    if let (Some(first), Some(s)) = (inputs.first(), &declared) {
        if *s != out {
            return Err(mismatch(first.0, decl, format!("inputs give {out}, declared shape is {s}")));
        }
    }
    let default_ext = if inputs.is_empty() { 1 } else { 0 };
    let ext = int(decl, "external_inputs")?.unwrap_or(default_ext);
    if ext < 0 {
        return Err(invalid(decl, "external_inputs", "must be >= 0"));
    }
    if inputs.is_empty() && ext == 0 {
        return Err(invalid(decl, "external_inputs", "an Elementwise node needs at least one operand"));
    }
    let mut operands: Vec<Operand> = inputs.iter().map(from_input).collect();
    for _ in 0..ext {
        operands.push(external(out.clone()));
    }
    Ok((operands, out))
}

/// Two forms: n-ary (sum of `fanin` equally shaped operands) or, with
/// attribute `axis`, a reduction over one axis of a single operand.
fn reduce(decl: &NodeDecl, inputs: &Inputs<'_>, dtype: u8) -> Result<(Vec<Operand>, TensorShape)> {
    let declared = shape_attr(decl, dtype)?;
    if let Some(axis) = int(decl, "axis")? {
        let operand = match (inputs, &declared) {
            ([one], _) => from_input(one),
            ([], Some(s)) => external(s.clone()),
            ([], None) => return Err(Error::MissingAttr { node: decl.id.clone(), attr: "shape" }),
            _ => return Err(arity_error(decl, "an axis reduction takes exactly one operand")),
        };
        let rank = operand.shape.dims.len() as i64;
        let ax = if axis < 0 { axis + rank } else { axis };
        if !(0..rank).contains(&ax) {
            return Err(invalid(decl, "axis", &format!("out of range for rank {rank}")));
        }
        let mut dims = operand.shape.dims.clone();
        dims.remove(ax as usize);
        if dims.is_empty() {
            dims.push(1);
        }
        let out = TensorShape::new(dims, dtype)?;
        return Ok((alloc::vec![operand], out));
    }

    let out = match (inputs.first(), &declared) {
        (Some(first), _) => first.1.clone(),
        (None, Some(s)) => s.clone(),
        (None, None) => return Err(Error::MissingAttr { node: decl.id.clone(), attr: "shape" }),
    };
    for inp in inputs {
        if inp.1 != &out {
            return Err(mismatch(inp.0, decl, format!("reduction operand {} differs from {out}", inp.1)));
        }
    }
    let fanin = positive(decl, "fanin")?.unwrap_or(inputs.len() as u64) as usize;
    if fanin < 2 {
        return Err(invalid(decl, "fanin", "an n-ary reduction needs at least two operands"));
    }
    if fanin < inputs.len() {
        return Err(invalid(decl, "fanin", "smaller than the number of node inputs"));
    }
    let mut operands: Vec<Operand> = inputs.iter().map(from_input).collect();
    while operands.len() < fanin {
        operands.push(external(out.clone()));
    }
    Ok((operands, out))
}

/// Concatenation along `axis` (default: innermost). `extra` adds one operand
/// read from memory with that extent along the axis.
fn concat(decl: &NodeDecl, inputs: &Inputs<'_>, dtype: u8) -> Result<(Vec<Operand>, TensorShape)> {
    let first = inputs.first().ok_or_else(|| arity_error(decl, "Concat needs at least one node input"))?;
    let rank = first.1.dims.len() as i64;
    let axis = int(decl, "axis")?.unwrap_or(-1);
    let ax = if axis < 0 { axis + rank } else { axis };
    if !(0..rank).contains(&ax) {
        return Err(invalid(decl, "axis", &format!("out of range for rank {rank}")));
    }
    let ax = ax as usize;
    let mut dims = first.1.dims.clone();
    for inp in inputs.iter().skip(1) {
        let same_rank = inp.1.dims.len() == dims.len();
        let compatible = same_rank
            && inp.1.dims.iter().zip(&dims).enumerate().all(|(i, (a, b))| i == ax || a == b);
        if !compatible {
            return Err(mismatch(inp.0, decl, format!("{} cannot be concatenated with {}", inp.1, first.1)));
        }
        dims[ax] += inp.1.dims[ax];
    }
    let mut operands: Vec<Operand> = inputs.iter().map(from_input).collect();
    if let Some(extra) = positive(decl, "extra")? {
        let mut ext = first.1.dims.clone();
        ext[ax] = extra;
        operands.push(external(TensorShape::new(ext, dtype)?));
        dims[ax] += extra;
    }
    Ok((operands, TensorShape::new(dims, dtype)?))
}

/// Row gather: output `shape` rows are read from a table in memory. A node
/// input, if any, supplies the indices.
fn gather(decl: &NodeDecl, inputs: &Inputs<'_>, dtype: u8) -> Result<(Vec<Operand>, TensorShape)> {
    let out = shape_attr(decl, dtype)?
        .ok_or_else(|| Error::MissingAttr { node: decl.id.clone(), attr: "shape" })?;
    if inputs.len() > 1 {
        return Err(arity_error(decl, "Gather takes at most one index input"));
    }
    let mut operands: Vec<Operand> = inputs.iter().map(from_input).collect();
    operands.push(external(out.clone()));
    Ok((operands, out))
}

fn unary(decl: &NodeDecl, inputs: &Inputs<'_>, dtype: u8) -> Result<(Vec<Operand>, TensorShape)> {
    match (inputs, shape_attr(decl, dtype)?) {
        ([one], None) => Ok((alloc::vec![from_input(one)], one.1.clone())),
        ([one], Some(s)) if &s == one.1 => Ok((alloc::vec![from_input(one)], s)),
        ([one], Some(s)) => Err(mismatch(one.0, decl, format!("input {} differs from declared {s}", one.1))),
        ([], Some(s)) => Ok((alloc::vec![external(s.clone())], s)),
        ([], None) => Err(Error::MissingAttr { node: decl.id.clone(), attr: "shape" }),
        _ => Err(arity_error(decl, &format!("{} takes exactly one operand", decl.kind))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{NodeDecl, OpKind, OperatorGraph};
    use alloc::vec;

    #[test]
    fn broadcast_rules() {
        let a = TensorShape::new(vec![4, 8], 2).unwrap();
        let b = TensorShape::new(vec![8], 2).unwrap();
        assert_eq!(broadcast(&a, &b), Some(vec![4, 8]));
        let c = TensorShape::new(vec![3], 2).unwrap();
        assert_eq!(broadcast(&a, &c), None);
    }

    #[test]
    fn reduce_forms() {
        let g = OperatorGraph::from_decls(
            2,
            vec![
                NodeDecl::new("r", OpKind::Reduce).attr_list("shape", &[1024]).attr("fanin", 8),
                NodeDecl::new("s", OpKind::Reduce).attr("axis", 0).input("r"),
            ],
        )
        .unwrap();
        assert_eq!(g.node("r").unwrap().operands.len(), 8);
        assert_eq!(g.node("r").unwrap().reduction_fanin(), Some(8));
        assert_eq!(g.node("s").unwrap().output_shape.dims, vec![1]);
        assert_eq!(g.node("s").unwrap().reduction_fanin(), None);
    }

    #[test]
    fn concat_with_extra() {
        let g = OperatorGraph::from_decls(
            2,
            vec![
                NodeDecl::new("h", OpKind::Elementwise).attr_list("shape", &[16, 256]),
                NodeDecl::new("c", OpKind::Concat).attr("extra", 60).input("h"),
            ],
        )
        .unwrap();
        assert_eq!(g.node("c").unwrap().output_shape.dims, vec![16, 316]);
        assert_eq!(g.node("c").unwrap().operands[1].source, None);
    }

    #[test]
    fn linear_operand_b_from_node() {
        let g = OperatorGraph::from_decls(
            2,
            vec![
                NodeDecl::new("g", OpKind::Elementwise).attr_list("shape", &[64, 32]),
                NodeDecl::new("dw", OpKind::Linear)
                    .attr("M", 16)
                    .attr("K", 64)
                    .attr("N", 32)
                    .attr("operand", 1)
                    .input("g"),
            ],
        )
        .unwrap();
        let dw = g.node("dw").unwrap();
        assert_eq!(dw.operands[0].source, None);
        assert_eq!(dw.operands[1].source.as_deref(), Some("g"));
        assert_eq!(g.edges()[0].port, 1);
    }

    #[test]
    fn missing_attrs() {
        let r = OperatorGraph::from_decls(2, vec![NodeDecl::new("l", OpKind::Linear).attr("M", 2)]);
        assert!(matches!(r, Err(Error::MissingAttr { attr: "N", .. })));
        let r = OperatorGraph::from_decls(2, vec![NodeDecl::new("s", OpKind::Softmax)]);
        assert!(matches!(r, Err(Error::MissingAttr { attr: "shape", .. })));
    }
}
