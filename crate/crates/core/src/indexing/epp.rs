//! Ball-Larus path numbering on an acyclic CFG.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::analysis::{Cfg, EdgeKind, VertexKey};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EppLabeling {
    pub num_paths: BTreeMap<VertexKey, u128>,
    /// `Val(e)` for `cfg.edges[i]`.
    pub edge_val: Vec<u128>,
    /// Out-edge order per vertex (indices into `cfg.edges`); the first gets 0.
    pub order: BTreeMap<VertexKey, Vec<usize>>,
    /// `Val(ENTRY → v)` for every loop header `v` a path restarts at.
    pub reset_val: BTreeMap<VertexKey, u128>,
}

impl EppLabeling {
    pub fn total(&self) -> u128 {
        self.num_paths[&VertexKey::Entry]
    }
}

/// Out-edges of `v` heaviest first: descending `NumPaths(dst)`, then
/// ascending destination, edge kind and branch.
pub fn minimize_nonzero(cfg: &Cfg, num_paths: &BTreeMap<VertexKey, u128>, v: VertexKey) -> Vec<usize> {
    let mut out: Vec<usize> = (0..cfg.edges.len()).filter(|&i| cfg.edges[i].src == v).collect();
    out.sort_by_key(|&i| {
        let e = &cfg.edges[i];
        (std::cmp::Reverse(num_paths[&e.dst]), e.dst, e.kind, e.branch)
    });
    out
}

pub fn label_epp(cfg: &Cfg) -> EppLabeling {
    let topo = cfg.topo_order().expect("label_epp needs an acyclic CFG");
    let mut num_paths = BTreeMap::new();
    for &v in topo.iter().rev() {
        let n = if v == VertexKey::Exit {
            1
        } else {
            cfg.out_edges(v).fold(0u128, |acc, e| acc.saturating_add(num_paths[&e.dst]))
        };
        num_paths.insert(v, n);
    }
    let mut edge_val = vec![0u128; cfg.edges.len()];
    let mut order = BTreeMap::new();
    for v in &topo {
        let ord = minimize_nonzero(cfg, &num_paths, *v);
        let mut acc = 0u128;
        for &i in &ord {
            edge_val[i] = acc;
            acc = acc.saturating_add(num_paths[&cfg.edges[i].dst]);
        }
        if !ord.is_empty() {
            order.insert(*v, ord);
        }
    }
    let reset_val = cfg
        .edges
        .iter()
        .enumerate()
        .filter(|(_, e)| e.src == VertexKey::Entry && (e.kind == EdgeKind::SurrogateEntry || !e.backedges.is_empty()))
        .map(|(i, e)| (e.dst, edge_val[i]))
        .collect();
    EppLabeling { num_paths, edge_val, order, reset_val }
}

/// Sum of `Val` over a path given as edge indices.
pub fn path_to_index(lab: &EppLabeling, cfg: &Cfg, path: &[usize]) -> Result<u128> {
    let mut at = VertexKey::Entry;
    let mut sum = 0u128;
    for &i in path {
        let e = cfg.edges.get(i).ok_or(Error::OutOfRange { what: "edge", id: i as u64, bound: cfg.edges.len() as u64 })?;
        if e.src != at {
            return Err(Error::InvalidProgram(format!("edge {i} does not continue the path at {at:?}")));
        }
        sum += lab.edge_val[i];
        at = e.dst;
    }
    if at != VertexKey::Exit {
        return Err(Error::InvalidProgram("path does not reach EXIT".into()));
    }
    Ok(sum)
}

/// Regenerates the path numbered `id`.
pub fn index_to_path(lab: &EppLabeling, cfg: &Cfg, id: u128) -> Result<Vec<usize>> {
    if id >= lab.total() {
        return Err(Error::OutOfRange { what: "path id", id: id as u64, bound: lab.total() as u64 });
    }
    let mut rem = id;
    let mut at = VertexKey::Entry;
    let mut path = Vec::new();
    while at != VertexKey::Exit {
        let ord = &lab.order[&at];
        let &i = ord.iter().rev().find(|&&i| lab.edge_val[i] <= rem).expect("first edge has Val 0");
        rem -= lab.edge_val[i];
        path.push(i);
        at = cfg.edges[i].dst;
    }
    Ok(path)
}
