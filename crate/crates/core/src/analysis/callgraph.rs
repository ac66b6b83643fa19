//! Inter-procedural call graph over the protected contracts.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::vm::{ContractProgram, FunctionId, Instruction};

pub type NodeId = usize;

/// The synthetic program-entry node.
pub const ENTRY_NODE: NodeId = 0;

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FnRef {
    pub contract: String,
    pub function: FunctionId,
    pub name: String,
    pub external: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallKind {
    /// `s → f` for an externally callable `f`.
    Entry,
    Internal,
    ExternalProtected,
    /// From an unprotected message-call site back into an entry function of
    /// the calling contract.
    Reentry,
    Surrogate,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CallSite {
    pub contract: String,
    pub function: FunctionId,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallEdge {
    /// Call-site number; 0 for entry edges. A surrogate keeps the number of
    /// the recursive site it replaces.
    pub id: u32,
    pub caller: NodeId,
    pub callee: NodeId,
    pub kind: CallKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub site: Option<CallSite>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallGraph {
    /// Node 0 is the program entry `s`.
    pub nodes: Vec<FnRef>,
    pub edges: Vec<CallEdge>,
    /// Message calls leaving the protected boundary.
    pub unprotected_sites: Vec<CallSite>,
    pub warnings: Vec<String>,
}

impl CallGraph {
    pub fn node_of(&self, contract: &str, function: FunctionId) -> Option<NodeId> {
        self.nodes
            .iter()
            .position(|n| n.contract == contract && n.function == function)
            .filter(|&i| i != ENTRY_NODE)
    }

    /// In-edges of `n` ordered by call-site id (then caller).
    pub fn in_edges(&self, n: NodeId) -> Vec<&CallEdge> {
        let mut v: Vec<&CallEdge> = self.edges.iter().filter(|e| e.callee == n).collect();
        v.sort_by_key(|e| (e.id, e.caller, e.kind));
        v
    }

    pub fn out_edges(&self, n: NodeId) -> impl Iterator<Item = &CallEdge> {
        self.edges.iter().filter(move |e| e.caller == n)
    }

    /// Call-site number of the ICALL/CALL at a site, if it is on the graph.
    pub fn site_id(&self, site: &CallSite) -> Option<u32> {
        self.edges.iter().find(|e| e.site.as_ref() == Some(site)).map(|e| e.id)
    }

    /// One return edge per call edge that is not a surrogate.
    pub fn return_edges(&self) -> impl Iterator<Item = &CallEdge> {
        self.edges.iter().filter(|e| e.kind != CallKind::Surrogate)
    }

    pub fn topo_order(&self) -> Option<Vec<NodeId>> {
        let mut indeg = vec![0usize; self.nodes.len()];
        for e in &self.edges {
            indeg[e.callee] += 1;
        }
        let mut ready: BTreeSet<NodeId> = (0..self.nodes.len()).filter(|&n| indeg[n] == 0).collect();
        let mut order = Vec::new();
        while let Some(n) = ready.pop_first() {
            order.push(n);
            for e in self.out_edges(n) {
                indeg[e.callee] -= 1;
                if indeg[e.callee] == 0 {
                    ready.insert(e.callee);
                }
            }
        }
        (order.len() == self.nodes.len()).then_some(order)
    }

    pub fn is_acyclic(&self) -> bool {
        self.topo_order().is_some()
    }

    fn reaches(&self, from: NodeId, to: NodeId, skip: &BTreeSet<usize>) -> bool {
        let mut seen = BTreeSet::from([from]);
        let mut work = vec![from];
        while let Some(n) = work.pop() {
            if n == to {
                return true;
            }
            for (i, e) in self.edges.iter().enumerate() {
                if e.caller == n && !skip.contains(&i) && seen.insert(e.callee) {
                    work.push(e.callee);
                }
            }
        }
        false
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("call graph serializes")
    }
}

/// Builds the call graph of the contracts named in `boundary`. Call sites are
/// numbered from 1 in (contract name, function id, offset) order.
pub fn build_call_graph(programs: &[ContractProgram], boundary: &BTreeSet<String>) -> CallGraph {
    let mut protected: Vec<&ContractProgram> = programs.iter().filter(|p| boundary.contains(&p.name)).collect();
    protected.sort_by(|a, b| a.name.cmp(&b.name));
    let mut cg = CallGraph {
        nodes: vec![FnRef { contract: String::new(), function: 0, name: "s".into(), external: false }],
        ..CallGraph::default()
    };
    let mut index: BTreeMap<(&str, FunctionId), NodeId> = BTreeMap::new();
    for p in &protected {
        for f in &p.functions {
            index.insert((p.name.as_str(), f.id), cg.nodes.len());
            cg.nodes.push(FnRef { contract: p.name.clone(), function: f.id, name: f.name.clone(), external: f.is_external() });
        }
    }
    for n in 1..cg.nodes.len() {
        if cg.nodes[n].external {
            cg.edges.push(CallEdge { id: 0, caller: ENTRY_NODE, callee: n, kind: CallKind::Entry, site: None });
        }
    }
    let by_name: BTreeMap<&str, &ContractProgram> = protected.iter().map(|p| (p.name.as_str(), *p)).collect();
    let mut next_id = 1u32;
    for p in &protected {
        for f in &p.functions {
            let caller = index[&(p.name.as_str(), f.id)];
            for (offset, ins) in f.body.iter().enumerate() {
                let site = CallSite { contract: p.name.clone(), function: f.id, offset };
                match ins {
                    Instruction::ICall(g) => {
                        let callee = index[&(p.name.as_str(), *g)];
                        cg.edges.push(CallEdge { id: next_id, caller, callee, kind: CallKind::Internal, site: Some(site) });
                        next_id += 1;
                    }
                    Instruction::Call(t) | Instruction::DelegateCall(t) => match t.as_deref().and_then(|t| by_name.get(t)) {
                        Some(target) => {
                            for g in target.entry_functions() {
                                let callee = index[&(target.name.as_str(), g)];
                                cg.edges.push(CallEdge {
                                    id: next_id,
                                    caller,
                                    callee,
                                    kind: CallKind::ExternalProtected,
                                    site: Some(site.clone()),
                                });
                            }
                            next_id += 1;
                        }
                        None => {
                            for g in p.entry_functions() {
                                let callee = index[&(p.name.as_str(), g)];
                                cg.edges.push(CallEdge { id: next_id, caller, callee, kind: CallKind::Reentry, site: Some(site.clone()) });
                            }
                            next_id += 1;
                            if t.is_none() {
                                let msg = format!(
                                    "{}.{} offset {offset}: call target not annotated; treated as unprotected",
                                    p.name, f.name
                                );
                                log::warn!("{msg}");
                                cg.warnings.push(msg);
                            }
                            cg.unprotected_sites.push(site);
                        }
                    },
                    _ => {}
                }
            }
        }
    }
    cg
}

/// Breaks recursion: call edges are visited in ascending call-site order and
/// every edge that still closes a cycle is replaced by a surrogate
/// `s → callee` carrying the same call-site number.
pub fn acyclicize_callgraph(cg: &CallGraph) -> CallGraph {
    let mut out = cg.clone();
    let mut order: Vec<usize> = (0..out.edges.len()).filter(|&i| out.edges[i].kind != CallKind::Entry).collect();
    order.sort_by_key(|&i| (out.edges[i].id, out.edges[i].callee, out.edges[i].caller));
    let mut removed = BTreeSet::new();
    for i in order {
        let e = &out.edges[i];
        if e.kind == CallKind::Surrogate {
            continue;
        }
        if out.reaches(e.callee, e.caller, &removed) {
            removed.insert(i);
        }
    }
    for &i in &removed {
        let e = &mut out.edges[i];
        e.caller = ENTRY_NODE;
        e.kind = CallKind::Surrogate;
    }
    out
}
