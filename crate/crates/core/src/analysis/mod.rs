//! Control-flow and call-graph construction.

pub mod callgraph;
pub mod cfg;

pub use callgraph::{acyclicize_callgraph, build_call_graph, CallEdge, CallGraph, CallKind, CallSite, FnRef, NodeId, ENTRY_NODE};
pub use cfg::{
    acyclicize, analyze_function, build_cfg, find_backedges, insert_virtual_branches, AnalyzedFunction, Backedge, Cfg,
    Edge, EdgeKind, Vertex, VertexKey,
};
