//! Calling-context numbering on an acyclic call graph: path numbering run in
//! the reverse direction, with in-edges ordered by call-site number.

use serde::{Deserialize, Serialize};

use crate::analysis::{CallGraph, NodeId, ENTRY_NODE};
use crate::error::{Error, Result};
use crate::word::{Width, Word};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CcLabeling {
    pub num_ccs: Vec<u128>,
    /// `Val(c)` for `cg.edges[i]`.
    pub call_val: Vec<u128>,
}

impl CcLabeling {
    /// `Val(r) = −Val(c)` as a signed integer.
    pub fn return_val(&self, edge: usize) -> i128 {
        -(self.call_val[edge] as i128)
    }

    /// The return value as a Word increment (two's complement).
    pub fn return_word(&self, edge: usize, width: Width) -> Word {
        width.neg(width.wrap(self.call_val[edge]))
    }
}

pub fn label_ccp(cg: &CallGraph) -> CcLabeling {
    let topo = cg.topo_order().expect("label_ccp needs an acyclic call graph");
    let mut num_ccs = vec![0u128; cg.nodes.len()];
    let mut call_val = vec![0u128; cg.edges.len()];
    for n in topo {
        if n == ENTRY_NODE {
            num_ccs[n] = 1;
            continue;
        }
        let mut acc = 0u128;
        for e in cg.in_edges(n) {
            let i = edge_index(cg, e);
            call_val[i] = acc;
            acc = acc.saturating_add(num_ccs[e.caller]);
        }
        num_ccs[n] = acc;
    }
    CcLabeling { num_ccs, call_val }
}

fn edge_index(cg: &CallGraph, e: &crate::analysis::CallEdge) -> usize {
    cg.edges.iter().position(|x| std::ptr::eq(x, e)).expect("edge of graph")
}

/// Sum of call values over a chain of call edges from `s`.
pub fn context_to_id(lab: &CcLabeling, cg: &CallGraph, chain: &[usize]) -> Result<u128> {
    let mut at = ENTRY_NODE;
    let mut sum = 0u128;
    for &i in chain {
        let e = cg.edges.get(i).ok_or(Error::OutOfRange { what: "call edge", id: i as u64, bound: cg.edges.len() as u64 })?;
        if e.caller != at {
            return Err(Error::InvalidProgram(format!("call edge {i} does not continue the chain")));
        }
        sum += lab.call_val[i];
        at = e.callee;
    }
    Ok(sum)
}

/// Regenerates the call-edge chain from `s` to `f` numbered `id`.
pub fn id_to_context(lab: &CcLabeling, cg: &CallGraph, f: NodeId, id: u128) -> Result<Vec<usize>> {
    if id >= lab.num_ccs[f] {
        return Err(Error::OutOfRange { what: "context id", id: id as u64, bound: lab.num_ccs[f] as u64 });
    }
    let mut rem = id;
    let mut at = f;
    let mut chain = Vec::new();
    while at != ENTRY_NODE {
        let ins = cg.in_edges(at);
        let e = ins
            .iter()
            .rev()
            .find(|e| {
                let v = lab.call_val[edge_index(cg, e)];
                v <= rem && rem - v < lab.num_ccs[e.caller]
            })
            .expect("in-edges cover every context id");
        let i = edge_index(cg, e);
        rem -= lab.call_val[i];
        chain.push(i);
        at = e.caller;
    }
    chain.reverse();
    Ok(chain)
}
