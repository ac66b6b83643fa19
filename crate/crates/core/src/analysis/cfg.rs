//! Per-function control-flow graphs.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::vm::{FunctionDef, FunctionId, Instruction};

/// Vertex identity. `Block(o)` is the basic block starting at instruction `o`;
/// `Check(o)` is the empty vertex in front of a checked instruction at `o`
/// from which the two virtual edges leave.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum VertexKey {
    Entry,
    Check(usize),
    Block(usize),
    Exit,
}

impl VertexKey {
    fn rank(self) -> (u8, usize, u8) {
        match self {
            VertexKey::Entry => (0, 0, 0),
            VertexKey::Check(o) => (1, o, 0),
            VertexKey::Block(o) => (1, o, 1),
            VertexKey::Exit => (2, 0, 0),
        }
    }

    pub fn offset(self) -> Option<usize> {
        match self {
            VertexKey::Check(o) | VertexKey::Block(o) => Some(o),
            _ => None,
        }
    }
}

impl std::fmt::Display for VertexKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            VertexKey::Entry => f.write_str("entry"),
            VertexKey::Exit => f.write_str("exit"),
            VertexKey::Check(o) => write!(f, "c{o}"),
            VertexKey::Block(o) => write!(f, "b{o}"),
        }
    }
}

impl std::str::FromStr for VertexKey {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let num = |r: &str| r.parse::<usize>().map_err(|e| format!("bad vertex `{s}`: {e}"));
        match s {
            "entry" => Ok(VertexKey::Entry),
            "exit" => Ok(VertexKey::Exit),
            _ if s.starts_with('b') => num(&s[1..]).map(VertexKey::Block),
            _ if s.starts_with('c') => num(&s[1..]).map(VertexKey::Check),
            _ => Err(format!("bad vertex `{s}`")),
        }
    }
}

impl Serialize for VertexKey {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for VertexKey {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

impl Ord for VertexKey {
    fn cmp(&self, other: &Self) -> Ordering {
        self.rank().cmp(&other.rank())
    }
}

impl PartialOrd for VertexKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    Real,
    SurrogateEntry,
    SurrogateExit,
    VirtualFalse,
    VirtualTrue,
}

impl EdgeKind {
    pub fn is_virtual(self) -> bool {
        matches!(self, EdgeKind::VirtualTrue | EdgeKind::VirtualFalse)
    }

    pub fn is_surrogate(self) -> bool {
        matches!(self, EdgeKind::SurrogateEntry | EdgeKind::SurrogateExit)
    }
}

/// A backedge `src → dst` of the real CFG. `branch` disambiguates the two
/// edges of a JUMPI whose targets coincide.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Backedge {
    pub src: VertexKey,
    pub dst: VertexKey,
    pub branch: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub src: VertexKey,
    pub dst: VertexKey,
    pub kind: EdgeKind,
    /// For edges out of a JUMPI block: true on the taken edge.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub branch: Option<bool>,
    /// Backedges a surrogate (or a real entry edge merged with one) stands for.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub backedges: Vec<Backedge>,
}

impl Edge {
    fn real(src: VertexKey, dst: VertexKey, branch: Option<bool>) -> Self {
        Edge { src, dst, kind: EdgeKind::Real, branch, backedges: Vec::new() }
    }

    fn sort_key(&self) -> (VertexKey, VertexKey, EdgeKind, Option<bool>) {
        (self.src, self.dst, self.kind, self.branch)
    }

    /// Instruction offset checked by a virtual edge.
    pub fn checked_offset(&self) -> Option<usize> {
        if !self.kind.is_virtual() {
            return None;
        }
        match self.src {
            VertexKey::Check(o) => Some(o),
            _ => self.dst.offset().map(|o| o - 1),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vertex {
    pub key: VertexKey,
    /// Instruction range `[start, end)`; empty for ENTRY, EXIT and checks.
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cfg {
    pub contract: String,
    pub function: FunctionId,
    pub vertices: Vec<Vertex>,
    pub edges: Vec<Edge>,
}

impl Cfg {
    fn normalize(&mut self) {
        self.vertices.sort_by_key(|v| v.key);
        self.vertices.dedup_by_key(|v| v.key);
        self.edges.sort_by_key(|a| a.sort_key());
    }

    pub fn vertex(&self, key: VertexKey) -> Option<&Vertex> {
        self.vertices.binary_search_by_key(&key, |v| v.key).ok().map(|i| &self.vertices[i])
    }

    /// Vertex whose instruction range contains `offset`.
    pub fn block_of(&self, offset: usize) -> Option<VertexKey> {
        self.vertices
            .iter()
            .find(|v| v.start <= offset && offset < v.end)
            .map(|v| v.key)
    }

    pub fn out_edges(&self, key: VertexKey) -> impl Iterator<Item = &Edge> {
        self.edges.iter().filter(move |e| e.src == key)
    }

    pub fn in_edges(&self, key: VertexKey) -> impl Iterator<Item = &Edge> {
        self.edges.iter().filter(move |e| e.dst == key)
    }

    /// Number of basic blocks (vertices other than ENTRY and EXIT).
    pub fn block_count(&self) -> usize {
        self.vertices.len() - 2
    }

    /// Kahn topological order, or `None` when the graph has a cycle.
    pub fn topo_order(&self) -> Option<Vec<VertexKey>> {
        let mut indeg: BTreeMap<VertexKey, usize> = self.vertices.iter().map(|v| (v.key, 0)).collect();
        for e in &self.edges {
            *indeg.get_mut(&e.dst)? += 1;
        }
        let mut ready: BTreeSet<VertexKey> = indeg.iter().filter(|(_, d)| **d == 0).map(|(k, _)| *k).collect();
        let mut order = Vec::with_capacity(self.vertices.len());
        while let Some(v) = ready.pop_first() {
            order.push(v);
            for e in self.out_edges(v) {
                let d = indeg.get_mut(&e.dst).expect("edge endpoint");
                *d -= 1;
                if *d == 0 {
                    ready.insert(e.dst);
                }
            }
        }
        (order.len() == self.vertices.len()).then_some(order)
    }

    pub fn is_acyclic(&self) -> bool {
        self.topo_order().is_some()
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("cfg serializes")
    }
}

/// Splits the body into basic blocks and connects them with real edges.
/// Blocks unreachable from ENTRY are dropped.
pub fn build_cfg(contract: &str, f: &FunctionDef) -> Cfg {
    let body = &f.body;
    let mut leaders = BTreeSet::from([0usize]);
    for (i, ins) in body.iter().enumerate() {
        if matches!(ins, Instruction::JumpDest) {
            leaders.insert(i);
        }
        if let Some(t) = ins.jump_target() {
            leaders.insert(t);
        }
        if ins.ends_block() && i + 1 < body.len() {
            leaders.insert(i + 1);
        }
    }
    let starts: Vec<usize> = leaders.into_iter().collect();
    let mut vertices = vec![
        Vertex { key: VertexKey::Entry, start: 0, end: 0 },
        Vertex { key: VertexKey::Exit, start: 0, end: 0 },
    ];
    let mut edges = vec![Edge::real(VertexKey::Entry, VertexKey::Block(0), None)];
    for (k, &s) in starts.iter().enumerate() {
        let end = starts.get(k + 1).copied().unwrap_or(body.len());
        let key = VertexKey::Block(s);
        vertices.push(Vertex { key, start: s, end });
        let last = &body[end - 1];
        match last {
            Instruction::Jump(t) => edges.push(Edge::real(key, VertexKey::Block(*t), None)),
            Instruction::JumpI(t) => {
                edges.push(Edge::real(key, VertexKey::Block(*t), Some(true)));
                edges.push(Edge::real(key, VertexKey::Block(end), Some(false)));
            }
            i if i.is_exit() => edges.push(Edge::real(key, VertexKey::Exit, None)),
            _ => edges.push(Edge::real(key, VertexKey::Block(end), None)),
        }
    }
    let mut cfg = Cfg { contract: contract.to_string(), function: f.id, vertices, edges };
    prune_unreachable(&mut cfg);
    cfg.normalize();
    cfg
}

fn prune_unreachable(cfg: &mut Cfg) {
    let mut seen = BTreeSet::from([VertexKey::Entry]);
    let mut work = vec![VertexKey::Entry];
    while let Some(v) = work.pop() {
        for e in cfg.edges.iter().filter(|e| e.src == v) {
            if seen.insert(e.dst) {
                work.push(e.dst);
            }
        }
    }
    seen.insert(VertexKey::Exit);
    cfg.vertices.retain(|v| seen.contains(&v.key));
    cfg.edges.retain(|e| seen.contains(&e.src));
}

/// Depth-first search from ENTRY, successors in ascending vertex order; an
/// edge into a vertex on the DFS stack is a backedge.
pub fn find_backedges(cfg: &Cfg) -> Vec<Backedge> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        New,
        OnStack,
        Done,
    }
    let mut mark: BTreeMap<VertexKey, Mark> = cfg.vertices.iter().map(|v| (v.key, Mark::New)).collect();
    let succ: BTreeMap<VertexKey, Vec<&Edge>> = cfg.vertices.iter().map(|v| (v.key, cfg.out_edges(v.key).collect())).collect();
    let mut back = Vec::new();
    // explicit stack of (vertex, next successor index)
    let mut stack = vec![(VertexKey::Entry, 0usize)];
    mark.insert(VertexKey::Entry, Mark::OnStack);
    while let Some(&mut (v, ref mut i)) = stack.last_mut() {
        let out = &succ[&v];
        if *i < out.len() {
            let e = out[*i];
            *i += 1;
            match mark[&e.dst] {
                Mark::New => {
                    mark.insert(e.dst, Mark::OnStack);
                    stack.push((e.dst, 0));
                }
                Mark::OnStack => back.push(Backedge { src: e.src, dst: e.dst, branch: e.branch }),
                Mark::Done => {}
            }
        } else {
            mark.insert(v, Mark::Done);
            stack.pop();
        }
    }
    back.sort();
    back
}

/// Replaces each backedge `w → v` with `ENTRY → v` and `w → EXIT`. Surrogates
/// sharing an endpoint are merged, and an `ENTRY → v` surrogate coinciding
/// with the real entry edge is folded into it.
pub fn acyclicize(cfg: &Cfg, backedges: &[Backedge]) -> Cfg {
    let mut out = cfg.clone();
    out.edges.retain(|e| !backedges.iter().any(|b| b.src == e.src && b.dst == e.dst && b.branch == e.branch && e.kind == EdgeKind::Real));
    for b in backedges {
        let entry = out
            .edges
            .iter_mut()
            .find(|e| e.src == VertexKey::Entry && e.dst == b.dst && matches!(e.kind, EdgeKind::Real | EdgeKind::SurrogateEntry));
        match entry {
            Some(e) => e.backedges.push(*b),
            None => out.edges.push(Edge {
                src: VertexKey::Entry,
                dst: b.dst,
                kind: EdgeKind::SurrogateEntry,
                branch: None,
                backedges: vec![*b],
            }),
        }
        match out.edges.iter_mut().find(|e| e.src == b.src && e.dst == VertexKey::Exit && e.kind == EdgeKind::SurrogateExit) {
            Some(e) => e.backedges.push(*b),
            None => out.edges.push(Edge {
                src: b.src,
                dst: VertexKey::Exit,
                kind: EdgeKind::SurrogateExit,
                branch: None,
                backedges: vec![*b],
            }),
        }
    }
    out.normalize();
    out
}

/// Splits blocks at every ADD/SUB/MUL (overflow diamond in front of the
/// instruction) and turns the fall-through of every CALL/DELEGATECALL into a
/// "returned zero" diamond.
pub fn insert_virtual_branches(cfg: &Cfg, f: &FunctionDef) -> Cfg {
    let mut out = cfg.clone();
    let blocks: Vec<Vertex> = cfg.vertices.iter().filter(|v| matches!(v.key, VertexKey::Block(_))).copied().collect();
    for b in blocks {
        let checks: Vec<usize> = (b.start..b.end).filter(|&i| f.body[i].is_checked_arith()).collect();
        let is_call = f.body[b.end - 1].is_message_call();
        if checks.is_empty() && !is_call {
            continue;
        }
        let mut last = b.key;
        if !checks.is_empty() {
            out.vertices.retain(|v| v.key != b.key);
            let first = if checks[0] == b.start { VertexKey::Check(b.start) } else { b.key };
            for e in out.edges.iter_mut().filter(|e| e.dst == b.key) {
                e.dst = first;
            }
            let outgoing: Vec<usize> = (0..out.edges.len()).filter(|&i| out.edges[i].src == b.key).collect();
            let mut piece_start = b.start;
            for &c in &checks {
                if c > piece_start {
                    out.vertices.push(Vertex { key: VertexKey::Block(piece_start), start: piece_start, end: c });
                    out.edges.push(Edge::real(VertexKey::Block(piece_start), VertexKey::Check(c), None));
                }
                out.vertices.push(Vertex { key: VertexKey::Check(c), start: c, end: c });
                for kind in [EdgeKind::VirtualFalse, EdgeKind::VirtualTrue] {
                    out.edges.push(Edge { src: VertexKey::Check(c), dst: VertexKey::Block(c), kind, branch: None, backedges: Vec::new() });
                }
                piece_start = c;
            }
            out.vertices.push(Vertex { key: VertexKey::Block(piece_start), start: piece_start, end: b.end });
            last = VertexKey::Block(piece_start);
            for i in outgoing {
                out.edges[i].src = last;
            }
        }
        if is_call {
            let next = VertexKey::Block(b.end);
            if let Some(pos) = out.edges.iter().position(|e| e.src == last && e.dst == next && e.kind == EdgeKind::Real) {
                out.edges.remove(pos);
                for kind in [EdgeKind::VirtualFalse, EdgeKind::VirtualTrue] {
                    out.edges.push(Edge { src: last, dst: next, kind, branch: None, backedges: Vec::new() });
                }
            }
        }
    }
    out.normalize();
    out
}

/// The acyclic, virtual-branch-augmented CFG used for path indexing.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalyzedFunction {
    pub cfg: Cfg,
    pub backedges: Vec<Backedge>,
    /// Set when the real CFG is irreducible: loop decomposition then depends
    /// on DFS order.
    pub irreducible: bool,
}

pub fn analyze_function(contract: &str, f: &FunctionDef) -> AnalyzedFunction {
    let real = build_cfg(contract, f);
    let backedges = find_backedges(&real);
    let irreducible = !backedges.iter().all(|b| dominates(&real, b.dst, b.src));
    let acyclic = acyclicize(&real, &backedges);
    let cfg = insert_virtual_branches(&acyclic, f);
    AnalyzedFunction { cfg, backedges, irreducible }
}

/// Whether `a` dominates `b` (every ENTRY→b path passes `a`).
pub fn dominates(cfg: &Cfg, a: VertexKey, b: VertexKey) -> bool {
    if a == b {
        return true;
    }
    let mut seen = BTreeSet::from([VertexKey::Entry]);
    if a == VertexKey::Entry {
        return true;
    }
    let mut work = vec![VertexKey::Entry];
    while let Some(v) = work.pop() {
        for e in cfg.out_edges(v) {
            if e.dst != a && seen.insert(e.dst) {
                work.push(e.dst);
            }
        }
    }
    !seen.contains(&b)
}
