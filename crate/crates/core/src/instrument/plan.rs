//! Instrument points and the per-contract plan.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::layout::ReservedLayout;
use crate::analysis::VertexKey;
use crate::pathset::MphtSpec;
use crate::vm::{Address, FunctionId};
use crate::word::Word;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PointKind {
    ContractWrapper,
    FunctionEntry,
    Branch,
    Backedge,
    InternalCallEdge,
    InternalReturnEdge,
    ExternalCallUnprotected,
    ExternalCallProtected,
    FunctionExit,
    PathSetCheck,
    /// Calldata / return-data accessors shifted past the protocol prefix.
    DataAccess,
    /// Approval entry for administrators.
    Admin,
}

impl PointKind {
    pub const ALL: [PointKind; 12] = [
        PointKind::ContractWrapper,
        PointKind::FunctionEntry,
        PointKind::Branch,
        PointKind::Backedge,
        PointKind::InternalCallEdge,
        PointKind::InternalReturnEdge,
        PointKind::ExternalCallUnprotected,
        PointKind::ExternalCallProtected,
        PointKind::FunctionExit,
        PointKind::PathSetCheck,
        PointKind::DataAccess,
        PointKind::Admin,
    ];
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Site {
    Function,
    Offset(usize),
    Edge(VertexKey, VertexKey),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Payload {
    None,
    /// Counter increment.
    Add(u128),
    /// Counter decrement.
    Sub(u128),
    /// Counter assignment.
    Set(u128),
    /// Checked against function `fid`'s set.
    Check(FunctionId),
    /// External call site id.
    CallSite(u64),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstrumentPoint {
    pub kind: PointKind,
    pub function: FunctionId,
    pub site: Site,
    pub payload: Payload,
}

impl fmt::Display for InstrumentPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?} f{} ", self.kind, self.function)?;
        match &self.site {
            Site::Function => f.write_str("fn")?,
            Site::Offset(o) => write!(f, "@{o}")?,
            Site::Edge(a, b) => write!(f, "{a}->{b}")?,
        }
        match &self.payload {
            Payload::None => Ok(()),
            Payload::Add(v) => write!(f, " +{v}"),
            Payload::Sub(v) => write!(f, " -{v}"),
            Payload::Set(v) => write!(f, " ={v}"),
            Payload::Check(fid) => write!(f, " check f{fid}"),
            Payload::CallSite(id) => write!(f, " site {id}"),
        }
    }
}

/// Embedded part of a function's safe set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Embedded {
    List(Vec<Word>),
    Mpht(MphtSpec),
    /// Nothing embedded; only the storage mapping is consulted.
    None,
}

impl Embedded {
    pub fn len(&self) -> usize {
        match self {
            Embedded::List(k) => k.len(),
            Embedded::Mpht(t) => t.n as usize,
            Embedded::None => 0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuardOptions {
    /// Log every check (function, index) for profiling comparisons.
    pub audit: bool,
    /// Alarms are logged but never revert.
    pub monitor: bool,
    pub admin: Address,
}

impl Default for GuardOptions {
    fn default() -> Self {
        GuardOptions { audit: false, monitor: false, admin: 0xad }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstrumentationPlan {
    pub contract: String,
    pub points: Vec<InstrumentPoint>,
    pub reserved: ReservedLayout,
    pub boundary: BTreeSet<String>,
    pub options: GuardOptions,
    pub embedded: BTreeMap<FunctionId, Embedded>,
    /// Keys kept only in the storage mapping, to be approved after deployment.
    pub spilled: BTreeMap<FunctionId, Vec<Word>>,
    pub approve_selector: u32,
}

impl InstrumentationPlan {
    pub fn listing(&self) -> String {
        let mut out = String::new();
        for p in &self.points {
            out.push_str(&p.to_string());
            out.push('\n');
        }
        out
    }

    pub fn count(&self, kind: PointKind) -> usize {
        self.points.iter().filter(|p| p.kind == kind).count()
    }

    pub fn points_of(&self, kind: PointKind, function: FunctionId) -> Vec<&InstrumentPoint> {
        self.points.iter().filter(|p| p.kind == kind && p.function == function).collect()
    }
}
