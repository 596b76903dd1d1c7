//! Subgraph selection: marks sf-nodes (groups of operators to co-execute as
//! one spatial pipeline) by matching kind patterns over the topological order.
//!
//! A pattern is a regular expression over operator kinds:
//!
//! ```text
//! chain: (Linear|Attention) (Linear|Elementwise|Concat)*
//! ```
//!
//! Tokens are kind names or `.` (any kind), grouped with parentheses,
//! repeated with a postfix `*`, and separated into alternatives with `|`.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::graph::{Edge, OpKind, OperatorGraph, OperatorNode};
use crate::{Error, Result};

/// Library shipped with the CLI. Order is matching priority.
pub const DEFAULT_LIBRARY: &str = "\
# GEMM chains with their epilogues, concats and reductions
chain: (Linear|Attention) (Linear|Attention|Elementwise|Softmax|LayerNorm|Concat|Reduce)*
# one elementwise producer multicast to GEMM consumers
multicast: Elementwise (Linear|Attention) (Linear|Attention)*
";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PatternExpr {
    Kind(OpKind),
    Any,
    Seq(Vec<PatternExpr>),
    Alt(Vec<PatternExpr>),
    Star(alloc::boxed::Box<PatternExpr>),
}

impl PatternExpr {
    /// All end positions of matches of `self` starting at `pos`. Denied
    /// nodes appear as `None` and match nothing.
    fn ends(&self, kinds: &[Option<OpKind>], pos: usize) -> BTreeSet<usize> {
        let mut out = BTreeSet::new();
        match self {
            PatternExpr::Kind(k) => {
                if kinds.get(pos).copied().flatten() == Some(*k) {
                    out.insert(pos + 1);
                }
            }
            PatternExpr::Any => {
                if matches!(kinds.get(pos), Some(Some(_))) {
                    out.insert(pos + 1);
                }
            }
            PatternExpr::Seq(items) => {
                out.insert(pos);
                for item in items {
                    let mut next = BTreeSet::new();
                    for &p in &out {
                        next.extend(item.ends(kinds, p));
                    }
                    out = next;
                    if out.is_empty() {
                        break;
                    }
                }
            }
            PatternExpr::Alt(alts) => {
                for a in alts {
                    out.extend(a.ends(kinds, pos));
                }
            }
            PatternExpr::Star(inner) => {
                out.insert(pos);
                let mut frontier = alloc::vec![pos];
                while let Some(p) = frontier.pop() {
                    for e in inner.ends(kinds, p) {
                        if e > p && out.insert(e) {
                            frontier.push(e);
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pattern {
    pub name: String,
    pub source: String,
    pub expr: PatternExpr,
}

impl Pattern {
    pub fn parse(name: &str, source: &str) -> Result<Self> {
        Self::parse_at(name, source, 1, 1)
    }

    fn parse_at(name: &str, source: &str, line: usize, col0: usize) -> Result<Self> {
        let tokens = tokenize(source, line, col0)?;
        let mut p = Parser { tokens: &tokens, pos: 0, line, end_col: col0 + source.len() };
        let expr = p.alt()?;
        if let Some(t) = p.tokens.get(p.pos) {
            return Err(Error::Pattern { line, column: t.col, message: format!("unexpected `{}`", t.text) });
        }
        Ok(Self { name: name.to_string(), source: source.trim().to_string(), expr })
    }

    /// Longest match length starting at `pos`, if any non-empty match exists.
    pub fn longest_match(&self, kinds: &[Option<OpKind>], pos: usize) -> Option<usize> {
        self.expr.ends(kinds, pos).into_iter().next_back().filter(|&e| e > pos).map(|e| e - pos)
    }
}

#[derive(Debug)]
struct Token<'a> {
    text: &'a str,
    col: usize,
}

fn tokenize(src: &str, line: usize, col0: usize) -> Result<Vec<Token<'_>>> {
    let mut out = Vec::new();
    let bytes = src.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        if c.is_ascii_whitespace() {
            i += 1;
        } else if matches!(c, b'(' | b')' | b'|' | b'*' | b'.') {
            out.push(Token { text: &src[i..i + 1], col: col0 + i });
            i += 1;
        } else if c.is_ascii_alphanumeric() || c == b'_' || c == b'-' {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_' || bytes[i] == b'-') {
                i += 1;
            }
            out.push(Token { text: &src[start..i], col: col0 + start });
        } else {
            return Err(Error::Pattern {
                line,
                column: col0 + i,
                message: format!("unexpected character `{}`", c as char),
            });
        }
    }
    Ok(out)
}

struct Parser<'t, 'a> {
    tokens: &'t [Token<'a>],
    pos: usize,
    line: usize,
    end_col: usize,
}

impl Parser<'_, '_> {
    fn peek(&self) -> Option<&str> {
        self.tokens.get(self.pos).map(|t| t.text)
    }

    fn err(&self, message: String) -> Error {
        let column = self.tokens.get(self.pos).map(|t| t.col).unwrap_or(self.end_col);
        Error::Pattern { line: self.line, column, message }
    }

    fn alt(&mut self) -> Result<PatternExpr> {
        let mut alts = alloc::vec![self.seq()?];
        while self.peek() == Some("|") {
            self.pos += 1;
            alts.push(self.seq()?);
        }
        Ok(if alts.len() == 1 { alts.pop().unwrap() } else { PatternExpr::Alt(alts) })
    }

    fn seq(&mut self) -> Result<PatternExpr> {
        let mut items = Vec::new();
        while let Some(t) = self.peek() {
            if t == "|" || t == ")" {
                break;
            }
            let mut atom = self.atom()?;
            while self.peek() == Some("*") {
                self.pos += 1;
                atom = PatternExpr::Star(alloc::boxed::Box::new(atom));
            }
            items.push(atom);
        }
        match items.len() {
            0 => Err(self.err("expected an operator kind".into())),
            1 => Ok(items.pop().unwrap()),
            _ => Ok(PatternExpr::Seq(items)),
        }
    }

    fn atom(&mut self) -> Result<PatternExpr> {
        let t = self.peek().ok_or_else(|| self.err("unexpected end of pattern".into()))?;
        match t {
            "(" => {
                self.pos += 1;
                let inner = self.alt()?;
                if self.peek() != Some(")") {
                    return Err(self.err("expected `)`".into()));
                }
                self.pos += 1;
                Ok(inner)
            }
            "." => {
                self.pos += 1;
                Ok(PatternExpr::Any)
            }
            "*" | ")" => Err(self.err(format!("unexpected `{t}`"))),
            name => {
                let kind = name
                    .parse::<OpKind>()
                    .map_err(|_| self.err(format!("unknown operator kind `{name}`")))?;
                self.pos += 1;
                Ok(PatternExpr::Kind(kind))
            }
        }
    }
}

/// Ordered set of patterns; earlier patterns win.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PatternLibrary {
    pub patterns: Vec<Pattern>,
}

impl PatternLibrary {
    /// Parses the line format `name: EXPR`. Blank lines and lines starting
    /// with `#` are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut patterns = Vec::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = ln + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let colon = raw.find(':').ok_or_else(|| Error::Pattern {
                line,
                column: 1,
                message: "expected `name: pattern`".into(),
            })?;
            let name = raw[..colon].trim();
            if name.is_empty() {
                return Err(Error::Pattern { line, column: 1, message: "empty pattern name".into() });
            }
            if patterns.iter().any(|p: &Pattern| p.name == name) {
                return Err(Error::Pattern { line, column: 1, message: format!("duplicate pattern `{name}`") });
            }
            patterns.push(Pattern::parse_at(name, &raw[colon + 1..], line, colon + 2)?);
        }
        Ok(Self { patterns })
    }

    pub fn default_library() -> Self {
        Self::parse(DEFAULT_LIBRARY).expect("built-in library parses")
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for p in &self.patterns {
            s.push_str(&p.name);
            s.push_str(": ");
            s.push_str(&p.source);
            s.push('\n');
        }
        s
    }
}

/// Kinds never placed inside an sf-node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectOptions {
    pub deny: BTreeSet<OpKind>,
}

impl Default for SelectOptions {
    fn default() -> Self {
        let mut deny = BTreeSet::new();
        deny.insert(OpKind::Gather);
        Self { deny }
    }
}

/// A contiguous group of operators selected for spatial co-execution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SfNode {
    pub id: String,
    pub pattern: String,
    /// Members in topological order.
    pub members: Vec<String>,
    pub boundary_in: Vec<Edge>,
    pub boundary_out: Vec<Edge>,
}

impl SfNode {
    pub fn contains(&self, id: &str) -> bool {
        self.members.iter().any(|m| m == id)
    }
}

/// True iff no path leaves `members` and later re-enters it.
pub fn is_contiguous<S: AsRef<str>>(graph: &OperatorGraph, members: &[S]) -> Result<bool> {
    let set: BTreeSet<&str> = members.iter().map(|m| m.as_ref()).collect();
    for m in &set {
        graph.node(m)?;
    }
    // Nodes reachable from the set through at least one outside node.
    let mut stack: Vec<&str> = Vec::new();
    let mut seen: BTreeSet<&str> = BTreeSet::new();
    for m in &set {
        for c in graph.consumers(m)? {
            if !set.contains(c.id.as_str()) && seen.insert(c.id.as_str()) {
                stack.push(c.id.as_str());
            }
        }
    }
    while let Some(n) = stack.pop() {
        for c in graph.consumers(n)? {
            let id = c.id.as_str();
            if set.contains(id) {
                return Ok(false);
            }
            if seen.insert(id) {
                stack.push(id);
            }
        }
    }
    Ok(true)
}

pub fn select_subgraphs(graph: &OperatorGraph, lib: &PatternLibrary) -> Vec<SfNode> {
    select_subgraphs_with(graph, lib, &SelectOptions::default())
}

pub fn select_subgraphs_with(graph: &OperatorGraph, lib: &PatternLibrary, opts: &SelectOptions) -> Vec<SfNode> {
    select_runs(graph, lib, opts, |run| run.len())
        .into_iter()
        .enumerate()
        .map(|(i, (pattern, members))| make_sfnode(graph, format!("sf{i}"), pattern, members))
        .collect()
}

/// Greedy single pass over the topological order. At each position the
/// first pattern with a non-empty match wins; `accept` may trim the matched
/// run to a prefix (returning its length, 0 to reject).
pub(crate) fn select_runs<'g>(
    graph: &'g OperatorGraph,
    lib: &PatternLibrary,
    opts: &SelectOptions,
    accept: impl Fn(&[&'g OperatorNode]) -> usize,
) -> Vec<(String, Vec<String>)> {
    let order: Vec<&OperatorNode> = graph.topo().collect();
    let kinds: Vec<Option<OpKind>> =
        order.iter().map(|n| if opts.deny.contains(&n.kind) { None } else { Some(n.kind) }).collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut advanced = false;
        for p in &lib.patterns {
            let Some(len) = p.longest_match(&kinds, i) else { continue };
            let mut len = accept(&order[i..i + len]).min(len);
            while len > 0 {
                let ids: Vec<&str> = order[i..i + len].iter().map(|n| n.id.as_str()).collect();
                if is_contiguous(graph, &ids).unwrap_or(false) {
                    break;
                }
                len -= 1;
            }
            if len == 0 {
                continue;
            }
            out.push((p.name.clone(), order[i..i + len].iter().map(|n| n.id.clone()).collect()));
            i += len;
            advanced = true;
            break;
        }
        if !advanced {
            i += 1;
        }
    }
    out
}

pub(crate) fn make_sfnode(graph: &OperatorGraph, id: String, pattern: String, members: Vec<String>) -> SfNode {
    let set: BTreeSet<&str> = members.iter().map(String::as_str).collect();
    let mut boundary_in = Vec::new();
    let mut boundary_out = Vec::new();
    for e in graph.edges() {
        let p_in = set.contains(e.producer.as_str());
        let c_in = set.contains(e.consumer.as_str());
        if c_in && !p_in {
            boundary_in.push(e.clone());
        } else if p_in && !c_in {
            boundary_out.push(e.clone());
        }
    }
    SfNode { id, pattern, members, boundary_in, boundary_out }
}

/// Fraction of the graph's operators inside some sf-node.
pub fn coverage(graph: &OperatorGraph, sfnodes: &[SfNode]) -> f64 {
    if graph.is_empty() {
        return 0.0;
    }
    let covered: BTreeSet<&str> = sfnodes.iter().flat_map(|s| s.members.iter().map(String::as_str)).collect();
    covered.len() as f64 / graph.len() as f64
}
