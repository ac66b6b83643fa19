//! Bytecode instrumentation: path counters, calling-context tracking, the
//! guard-marker protocol between protected contracts, path-set checks and
//! the guard revert.

pub mod check;
pub mod emit;
pub mod layout;
pub mod plan;
mod rewrite;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use emit::Origin;
pub use layout::{ReservedLayout, APPROVE_SELECTOR, MARKER, RESERVED_TOP_SLOTS};
pub use plan::{Embedded, GuardOptions, InstrumentPoint, InstrumentationPlan, Payload, PointKind, Site};
pub use rewrite::scan_reserved;

use crate::error::{Error, Result};
use crate::indexing::ProgramIndex;
use crate::pathset::{MappingLayout, PathSetSnapshot, Strategy, CELL_SIZE, DESCRIPTOR_SIZE};
use crate::vm::program::FUNCTION_ENTRY_SIZE;
use crate::vm::{ContractProgram, FunctionId, MAX_CODE_SIZE};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstrumentedProgram {
    pub program: ContractProgram,
    pub plan: InstrumentationPlan,
    pub original_size: usize,
    pub instrumented_size: usize,
    /// Per function of `program`, per instruction.
    pub origins: Vec<Vec<Origin>>,
    /// Bytes added per point kind; sums to the size difference.
    pub point_sizes: BTreeMap<PointKind, usize>,
}

impl InstrumentedProgram {
    /// `instrumented / original − 100%`, computed as `(i − o)·100 / o`.
    pub fn deployment_overhead(&self) -> f64 {
        deployment_overhead(self.original_size, self.instrumented_size)
    }

    pub fn origin(&self, function: FunctionId, offset: usize) -> Option<Origin> {
        self.origins.get(function as usize)?.get(offset).copied()
    }
}

pub fn deployment_overhead(original: usize, instrumented: usize) -> f64 {
    (instrumented as f64 - original as f64) * 100.0 / original as f64
}

fn pick_approve_selector(p: &ContractProgram) -> u32 {
    let mask = p.width.mask();
    let used: BTreeSet<u64> = p.functions.iter().filter_map(|f| f.selector).map(|s| s as u64 & mask).collect();
    let mut sel = APPROVE_SELECTOR;
    while sel as u64 & mask == 0 || used.contains(&(sel as u64 & mask)) {
        sel = sel.wrapping_add(1);
    }
    sel
}

/// Plans the instrumentation of one protected program.
pub fn plan(
    program: &ContractProgram,
    index: &ProgramIndex,
    pathsets: &PathSetSnapshot,
    boundary: &BTreeSet<String>,
    options: &GuardOptions,
) -> Result<InstrumentationPlan> {
    let mut spaces = BTreeMap::new();
    let mut embedded = BTreeMap::new();
    let mut spilled = BTreeMap::new();
    for f in &program.functions {
        let fi = index
            .function(&program.name, f.id)
            .ok_or_else(|| Error::InvalidProgram(format!("`{}.{}` is not indexed", program.name, f.name)))?;
        spaces.insert(f.id, fi.index_space());
        let e = match pathsets.function(&program.name, f.id) {
            None => Embedded::List(Vec::new()),
            Some(ps) => match (ps.strategy, &ps.mpht) {
                (Strategy::Mpht, Some(t)) => Embedded::Mpht(t.clone()),
                (Strategy::Mapping, _) => {
                    spilled.insert(f.id, ps.keys());
                    Embedded::None
                }
                _ => Embedded::List(ps.keys()),
            },
        };
        embedded.insert(f.id, e);
    }
    let start = index
        .functions
        .iter()
        .filter(|((c, _), _)| *c < program.name)
        .fold(0u128, |acc, (_, fi)| acc.saturating_add(fi.index_space()));
    let mapping = MappingLayout::new(program.width, &spaces, start, RESERVED_TOP_SLOTS)
        .ok_or_else(|| Error::Unsupported(format!("index spaces of `{}` do not fit the approval mapping", program.name)))?;
    let mut plan = InstrumentationPlan {
        contract: program.name.clone(),
        points: Vec::new(),
        reserved: ReservedLayout::new(program.width, mapping),
        boundary: boundary.clone(),
        options: options.clone(),
        embedded,
        spilled,
        approve_selector: pick_approve_selector(program),
    };
    plan.points = generate(program, index, &plan)?.points;
    Ok(plan)
}

fn generate(program: &ContractProgram, index: &ProgramIndex, plan: &InstrumentationPlan) -> Result<rewrite::Generated> {
    rewrite::generate(
        program,
        &rewrite::Config {
            index,
            boundary: &plan.boundary,
            options: &plan.options,
            embedded: &plan.embedded,
            layout: &plan.reserved,
            approve_selector: plan.approve_selector,
        },
    )
}

/// Emits the instrumented program. Fails with `SizeLimitExceeded` when it
/// does not fit; see [`instrument`] for the spilling driver.
pub fn rewrite(program: &ContractProgram, plan: &InstrumentationPlan, index: &ProgramIndex) -> Result<InstrumentedProgram> {
    let g = generate(program, index, plan)?;
    debug_assert_eq!(g.points, plan.points);
    let out = finish(program, plan, g);
    if out.instrumented_size > MAX_CODE_SIZE {
        return Err(Error::SizeLimitExceeded { size: out.instrumented_size, limit: MAX_CODE_SIZE });
    }
    Ok(out)
}

fn finish(program: &ContractProgram, plan: &InstrumentationPlan, g: rewrite::Generated) -> InstrumentedProgram {
    let w = program.width;
    let mut point_sizes: BTreeMap<PointKind, usize> = BTreeMap::new();
    for (f, org) in g.program.functions.iter().zip(&g.origins) {
        let mut seen = BTreeSet::new();
        for (ins, o) in f.body.iter().zip(org) {
            match o {
                Origin::Injected(k) => *point_sizes.entry(*k).or_default() += ins.encoded_size(w),
                // an exit trampoline repeats the original terminator
                Origin::Original(off) if !seen.insert(*off) => {
                    *point_sizes.entry(PointKind::FunctionExit).or_default() += ins.encoded_size(w)
                }
                Origin::Original(_) => {}
            }
        }
        if f.id as usize >= program.functions.len() {
            let k = match org.first() {
                Some(Origin::Injected(k)) => *k,
                _ => PointKind::ContractWrapper,
            };
            *point_sizes.entry(k).or_default() += FUNCTION_ENTRY_SIZE;
        }
    }
    let blob = g.program.data.len() - program.data.len();
    if blob > 0 {
        *point_sizes.entry(PointKind::PathSetCheck).or_default() += blob;
    }
    InstrumentedProgram {
        original_size: program.byte_size(),
        instrumented_size: g.program.byte_size(),
        program: g.program,
        plan: plan.clone(),
        origins: g.origins,
        point_sizes,
    }
}

/// Moves the largest embedded set into the approval mapping. Returns false
/// when nothing is left to move.
pub fn spill_to_mapping(plan: &mut InstrumentationPlan) -> bool {
    let largest = plan
        .embedded
        .iter()
        .filter(|(_, e)| !e.is_empty())
        .max_by_key(|(f, e)| (embedded_bytes(e), std::cmp::Reverse(**f)))
        .map(|(f, _)| *f);
    let Some(f) = largest else { return false };
    let keys = match std::mem::replace(plan.embedded.get_mut(&f).expect("present"), Embedded::None) {
        Embedded::List(k) => k,
        Embedded::Mpht(t) => {
            let mut k = t.slots.clone();
            k.sort_unstable();
            k
        }
        Embedded::None => Vec::new(),
    };
    plan.spilled.entry(f).or_default().extend(keys);
    true
}

fn embedded_bytes(e: &Embedded) -> usize {
    match e {
        Embedded::List(k) => DESCRIPTOR_SIZE + CELL_SIZE * k.len(),
        Embedded::Mpht(t) => DESCRIPTOR_SIZE + 2 * CELL_SIZE * t.m as usize + CELL_SIZE * t.n as usize,
        Embedded::None => 0,
    }
}

/// Plans, rewrites and spills embedded sets to the mapping until the
/// program fits the code size limit.
pub fn instrument(
    program: &ContractProgram,
    index: &ProgramIndex,
    pathsets: &PathSetSnapshot,
    boundary: &BTreeSet<String>,
    options: &GuardOptions,
) -> Result<InstrumentedProgram> {
    let mut p = plan(program, index, pathsets, boundary, options)?;
    loop {
        let g = generate(program, index, &p)?;
        let out = finish(program, &p, g);
        if out.instrumented_size <= MAX_CODE_SIZE {
            return Ok(out);
        }
        if !spill_to_mapping(&mut p) {
            return Err(Error::SizeLimitExceeded { size: out.instrumented_size, limit: MAX_CODE_SIZE });
        }
        log::info!("`{}`: moved an embedded path set to the approval mapping", program.name);
    }
}
