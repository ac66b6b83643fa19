//! Path and calling-context numbering, and the combined per-function index.

pub mod ccp;
pub mod epp;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use ccp::{context_to_id, id_to_context, label_ccp, CcLabeling};
pub use epp::{index_to_path, label_epp, minimize_nonzero, path_to_index, EppLabeling};

use crate::analysis::{acyclicize_callgraph, analyze_function, build_call_graph, AnalyzedFunction, CallGraph, NodeId};
use crate::error::{Error, Result};
use crate::vm::{ContractProgram, FunctionId};
use crate::word::Width;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CombinedIndex {
    pub ctx: u128,
    pub epp: u128,
    pub value: u128,
}

/// `ctx × num_paths + epp`.
pub fn combined_index(ctx: u128, epp: u128, num_paths: u128, num_ccs: u128) -> Result<CombinedIndex> {
    if ctx >= num_ccs {
        return Err(Error::OutOfRange { what: "context id", id: ctx as u64, bound: num_ccs as u64 });
    }
    if epp >= num_paths {
        return Err(Error::OutOfRange { what: "path id", id: epp as u64, bound: num_paths as u64 });
    }
    Ok(CombinedIndex { ctx, epp, value: ctx * num_paths + epp })
}

/// Inverse of [`combined_index`]: `(ctx, epp)`.
pub fn split_index(value: u128, num_paths: u128) -> (u128, u128) {
    (value / num_paths, value % num_paths)
}

/// Everything needed to number the paths of one function.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionIndex {
    pub contract: String,
    pub function: FunctionId,
    pub name: String,
    pub node: NodeId,
    pub analyzed: AnalyzedFunction,
    pub epp: EppLabeling,
    pub num_ccs: u128,
}

impl FunctionIndex {
    pub fn num_paths(&self) -> u128 {
        self.epp.total()
    }

    /// Size of the combined index space, `NumPaths(entry) × NumCCs(f)`.
    pub fn index_space(&self) -> u128 {
        self.num_paths().saturating_mul(self.num_ccs)
    }
}

/// Labelings for every function of a set of protected contracts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProgramIndex {
    pub call_graph: CallGraph,
    pub ccp: CcLabeling,
    #[serde(with = "crate::serde_pairs")]
    pub functions: BTreeMap<(String, FunctionId), FunctionIndex>,
}

impl ProgramIndex {
    pub fn function(&self, contract: &str, f: FunctionId) -> Option<&FunctionIndex> {
        self.functions.get(&(contract.to_string(), f))
    }
}

/// Analyzes and labels every function of the contracts in `boundary`.
/// Fails when a function's index space exceeds `2^(W-1)`.
pub fn index_programs(programs: &[ContractProgram], boundary: &BTreeSet<String>) -> Result<ProgramIndex> {
    let cg = acyclicize_callgraph(&build_call_graph(programs, boundary));
    let ccp = label_ccp(&cg);
    let mut functions = BTreeMap::new();
    for p in programs.iter().filter(|p| boundary.contains(&p.name)) {
        for f in &p.functions {
            let node = cg.node_of(&p.name, f.id).expect("protected function on call graph");
            let analyzed = analyze_function(&p.name, f);
            let epp = label_epp(&analyzed.cfg);
            let fi = FunctionIndex {
                contract: p.name.clone(),
                function: f.id,
                name: f.name.clone(),
                node,
                analyzed,
                epp,
                num_ccs: ccp.num_ccs[node],
            };
            check_index_space(&fi, p.width)?;
            functions.insert((p.name.clone(), f.id), fi);
        }
    }
    Ok(ProgramIndex { call_graph: cg, ccp, functions })
}

pub fn check_index_space(fi: &FunctionIndex, width: Width) -> Result<()> {
    let np = fi.num_paths();
    let space = np.checked_mul(fi.num_ccs.max(1));
    match space {
        Some(s) if s <= width.index_limit() => Ok(()),
        _ => Err(Error::IndexSpaceOverflow {
            function: format!("{}.{}", fi.contract, fi.name),
            num_paths: np,
            num_ccs: fi.num_ccs,
            bits: width.bits() - 1,
        }),
    }
}
