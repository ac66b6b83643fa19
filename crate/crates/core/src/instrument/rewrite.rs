//! Code generation: instrumented business functions, entry wrappers, check
//! routines and the approval entry.

use std::collections::{BTreeMap, BTreeSet};

use super::check::{emit_check, CheckParams, DataRef};
use super::emit::{Emitter, Label, Origin};
use super::layout::{ReservedLayout, MARKER, RESERVED_TOP_SLOTS};
use super::plan::{Embedded, GuardOptions, InstrumentPoint, Payload, PointKind, Site};
use crate::analysis::{build_cfg, Backedge, CallKind, Cfg, EdgeKind, VertexKey};
use crate::error::{Error, Result};
use crate::indexing::{FunctionIndex, ProgramIndex};
use crate::pathset::{descriptor, list_blob, DESCRIPTOR_SIZE};
use crate::vm::{ContractProgram, FunctionDef, FunctionId, Instruction as I, Visibility, GUARD_MARKER};
use crate::word::{Width, Word};

pub(crate) struct Config<'a> {
    pub index: &'a ProgramIndex,
    pub boundary: &'a BTreeSet<String>,
    pub options: &'a GuardOptions,
    pub embedded: &'a BTreeMap<FunctionId, Embedded>,
    pub layout: &'a ReservedLayout,
    pub approve_selector: u32,
}

pub(crate) struct Generated {
    pub program: ContractProgram,
    pub points: Vec<InstrumentPoint>,
    /// Per function of `program`.
    pub origins: Vec<Vec<Origin>>,
}

/// Fails when a literal memory address or storage slot of the original
/// program falls into the reserved ranges.
pub fn scan_reserved(p: &ContractProgram, layout: &ReservedLayout) -> Result<()> {
    for f in &p.functions {
        for w in f.body.windows(2) {
            match (&w[0], &w[1]) {
                (I::Push(v), I::MLoad | I::MStore) if layout.is_reserved_memory(*v) => {
                    return Err(Error::ReservedConflict(*v))
                }
                (I::Push(v), I::SLoad | I::SStore) if layout.is_reserved_slot(*v) => {
                    return Err(Error::ReservedConflict(*v))
                }
                _ => {}
            }
        }
    }
    Ok(())
}

/// Radix of the ctx-slot encoding `1 + site·M + ctx`, where `M` bounds the
/// context ids of the contract's functions. Fails when the largest
/// unprotected site id does not fit the word.
pub(crate) fn reentry_radix(p: &ContractProgram, index: &ProgramIndex) -> Result<Word> {
    let cg = &index.call_graph;
    let mut m = 1u128;
    let mut top_site = 0u128;
    for f in &p.functions {
        if let Some(n) = cg.node_of(&p.name, f.id) {
            m = m.max(index.ccp.num_ccs[n]);
        }
    }
    for e in cg.edges.iter().filter(|e| e.kind == CallKind::Reentry || e.kind == CallKind::Surrogate) {
        if e.site.as_ref().is_some_and(|s| s.contract == p.name) {
            top_site = top_site.max(e.id as u128);
        }
    }
    match (top_site + 1).checked_mul(m) {
        Some(v) if v < p.width.mask() as u128 => Ok(m as Word),
        _ => Err(Error::Unsupported(format!("`{}`: reentry context encoding exceeds {} bits", p.name, p.width.bits()))),
    }
}

/// What executing one real control transfer does to the path counter.
#[derive(Clone, Copy, Debug)]
enum Step {
    Edge { val: u128 },
    /// Fall-through of a message call: add `val` when the call returned 0.
    Diamond { val: u128 },
    Back { exit_val: u128, reset: u128 },
}

impl Step {
    fn is_noop(self) -> bool {
        matches!(self, Step::Edge { val: 0 })
    }
}

fn first_vertex(cfg: &Cfg, start: usize) -> VertexKey {
    if cfg.vertex(VertexKey::Check(start)).is_some() {
        VertexKey::Check(start)
    } else {
        VertexKey::Block(start)
    }
}

fn step(fi: &FunctionIndex, from_block: usize, last: VertexKey, to: usize, branch: Option<bool>) -> Step {
    let cfg = &fi.analyzed.cfg;
    let val = |pred: &dyn Fn(&crate::analysis::Edge) -> bool| {
        let i = cfg.edges.iter().position(pred).expect("edge present in labeled CFG");
        fi.epp.edge_val[i]
    };
    let be = Backedge { src: VertexKey::Block(from_block), dst: VertexKey::Block(to), branch };
    if fi.analyzed.backedges.contains(&be) {
        let exit_val = val(&|e| e.kind == EdgeKind::SurrogateExit && e.backedges.contains(&be));
        let reset = val(&|e| e.src == VertexKey::Entry && e.backedges.contains(&be));
        return Step::Back { exit_val, reset };
    }
    let dst = first_vertex(cfg, to);
    if let Some(i) = cfg.edges.iter().position(|e| e.src == last && e.dst == dst && e.kind == EdgeKind::Real && e.branch == branch) {
        return Step::Edge { val: fi.epp.edge_val[i] };
    }
    let vf = val(&|e| e.src == last && e.dst == dst && e.kind == EdgeKind::VirtualFalse);
    assert_eq!(vf, 0, "heaviest virtual edge carries no increment");
    Step::Diamond { val: val(&|e| e.src == last && e.dst == dst && e.kind == EdgeKind::VirtualTrue) }
}

struct Gen<'a> {
    e: Emitter,
    c: &'a Config<'a>,
    width: Width,
    points: Vec<InstrumentPoint>,
    fid: FunctionId,
}

impl<'a> Gen<'a> {
    fn point(&mut self, kind: PointKind, site: Site, payload: Payload) {
        self.points.push(InstrumentPoint { kind, function: self.fid, site, payload });
    }

    fn l(&self) -> &ReservedLayout {
        self.c.layout
    }

    fn word(&self, v: u128) -> Word {
        self.width.wrap(v)
    }

    fn epp_addr(&mut self) {
        let (d, b) = (self.l().depth_mem, self.l().epp_base);
        self.e.ops([I::Push(d), I::MLoad, I::Push(b), I::Sub]);
    }

    fn save_addr(&mut self) {
        let (d, b) = (self.l().depth_mem, self.l().save_base);
        self.e.ops([I::Push(d), I::MLoad, I::Push(b), I::Sub]);
    }

    fn epp_add(&mut self, v: u128) {
        if v == 0 {
            return;
        }
        self.e.kind = PointKind::Branch;
        self.epp_addr();
        let v = self.word(v);
        self.e.ops([I::Dup(1), I::MLoad, I::Push(v), I::Add, I::Swap(1), I::MStore]);
    }

    /// Consumes a 0/1 flag on top of the stack: `epp += flag * v`.
    fn epp_add_flag(&mut self, v: u128) {
        self.e.kind = PointKind::Branch;
        if v == 0 {
            self.e.op(I::Pop);
            return;
        }
        let v = self.word(v);
        self.e.ops([I::Push(v), I::Mul]);
        self.epp_addr();
        self.e.ops([I::Dup(1), I::MLoad, I::Dup(3), I::Add, I::Swap(1), I::MStore, I::Pop]);
    }

    fn epp_set(&mut self, v: u128) {
        let v = self.word(v);
        self.e.push(v);
        self.epp_addr();
        self.e.op(I::MStore);
    }

    fn check(&mut self, fi: &FunctionIndex, chk: FunctionId, site: usize) {
        self.e.kind = PointKind::PathSetCheck;
        self.point(PointKind::PathSetCheck, Site::Offset(site), Payload::Check(fi.function));
        self.epp_addr();
        self.e.op(I::MLoad);
        let np = self.word(fi.num_paths());
        let ctx = self.l().ctx_mem;
        self.e.ops([I::Push(np), I::Push(ctx), I::MLoad, I::Mul, I::Add]);
        self.e.icall_fn(chk);
    }

    fn do_step(&mut self, s: Step, fi: &FunctionIndex, chk: FunctionId, site: usize) {
        match s {
            Step::Edge { val } => self.epp_add(val),
            Step::Diamond { val } => {
                if val != 0 {
                    self.e.kind = PointKind::Branch;
                    self.e.ops([I::Dup(1), I::IsZero]);
                    self.epp_add_flag(val);
                }
            }
            Step::Back { exit_val, reset } => {
                self.epp_add(exit_val);
                self.check(fi, chk, site);
                self.e.kind = PointKind::Backedge;
                self.epp_set(reset);
            }
        }
    }

    /// Boundary handling at a frame-ending STOP/RETURN: protected callers get
    /// `[MARKER, flag, data..]`; boundary entries revert when flagged.
    /// `origin` is the original terminator this exit replaces, if any.
    fn exit_sequence(&mut self, stop: bool, origin: Option<usize>, pre: &mut Vec<(Label, bool, Option<usize>)>, guard: Label) {
        self.e.kind = PointKind::FunctionExit;
        let l = self.e.label();
        let cd = self.l().cdoff_mem;
        self.e.ops([I::Push(cd), I::MLoad]);
        self.e.jumpi(l);
        pre.push((l, stop, origin));
        if !self.c.options.monitor {
            let fl = self.l().flag_mem;
            self.e.ops([I::Push(fl), I::MLoad]);
            self.e.jumpi(guard);
        }
    }

    fn exit_trampolines(&mut self, pre: &[(Label, bool, Option<usize>)], guard: Label) {
        self.e.kind = PointKind::FunctionExit;
        let fl = self.l().flag_mem;
        for &(l, stop, origin) in pre {
            self.e.dest(l);
            if stop {
                self.e.push(0);
            }
            self.e.ops([I::Push(fl), I::MLoad, I::Swap(1), I::Push(MARKER), I::Swap(1), I::Push(2), I::Add]);
            // stands in for the original STOP or RETURN, which cost the same
            match origin {
                Some(o) => self.e.original(I::Return, o),
                None => self.e.op(I::Return),
            }
        }
        self.e.dest(guard);
        self.e.ops([I::Push(GUARD_MARKER), I::Push(1), I::Revert]);
    }
}

struct Ids {
    wrapper: BTreeMap<FunctionId, FunctionId>,
    check: BTreeMap<FunctionId, FunctionId>,
    approve: FunctionId,
}

pub(crate) fn generate(p: &ContractProgram, c: &Config) -> Result<Generated> {
    if p.width.bits() < 16 {
        return Err(Error::Unsupported(format!("instrumenting {}-bit programs", p.width.bits())));
    }
    scan_reserved(p, c.layout)?;
    let n = p.functions.len() as FunctionId;
    let externals: Vec<FunctionId> = p.functions.iter().filter(|f| f.is_external()).map(|f| f.id).collect();
    let mut ids = Ids { wrapper: BTreeMap::new(), check: BTreeMap::new(), approve: 0 };
    let mut next = n;
    for &f in &externals {
        ids.wrapper.insert(f, next);
        next += 1;
    }
    for f in 0..n {
        ids.check.insert(f, next);
        next += 1;
    }
    ids.approve = next;

    // data segment: original bytes, then one blob per embedded set
    let mut data = p.data.clone();
    let mut refs = BTreeMap::new();
    for f in 0..n {
        let r = match c.embedded.get(&f) {
            Some(Embedded::List(keys)) => {
                let off = data.len();
                data.extend(list_blob(f, keys, off));
                DataRef::List { cells: (off + DESCRIPTOR_SIZE) as u64, n: keys.len() as u64 }
            }
            Some(Embedded::Mpht(t)) => {
                let off = data.len();
                let (bytes, slots_at) = t.encode();
                data.extend(descriptor(f, t.n as usize, off + DESCRIPTOR_SIZE));
                data.extend(bytes);
                let d = (off + DESCRIPTOR_SIZE) as u64;
                DataRef::Mpht { displacements: d, slots: d + slots_at as u64 }
            }
            _ => DataRef::None,
        };
        refs.insert(f, r);
    }

    let mut functions = Vec::new();
    let mut origins = Vec::new();
    let mut points = Vec::new();
    for f in &p.functions {
        let fi = c.index.function(&p.name, f.id).ok_or_else(|| Error::InvalidProgram(format!("`{}.{}` is not indexed", p.name, f.name)))?;
        let (body, org, pts) = business(p, f, fi, c, &ids)?;
        functions.push(FunctionDef { id: f.id, name: f.name.clone(), visibility: Visibility::Internal, selector: None, body });
        origins.push(org);
        points.extend(pts);
    }
    for &f in &externals {
        let orig = &p.functions[f as usize];
        let (body, org, pts) = wrapper(p, orig, c)?;
        functions.push(FunctionDef {
            id: ids.wrapper[&f],
            name: format!("__w_{}", orig.name),
            visibility: Visibility::External,
            selector: orig.selector,
            body,
        });
        origins.push(org);
        points.extend(pts);
    }
    for f in &p.functions {
        let fi = c.index.function(&p.name, f.id).expect("indexed above");
        let mut e = Emitter::new();
        let empty = Embedded::None;
        emit_check(
            &mut e,
            c.layout,
            &CheckParams {
                function: f.id,
                space: fi.index_space(),
                embedded: c.embedded.get(&f.id).unwrap_or(&empty),
                data: refs[&f.id],
                mapping_base: c.layout.mapping.base + c.layout.mapping.offsets.get(&f.id).copied().unwrap_or(0),
                audit: c.options.audit,
            },
        );
        let (body, org) = e.finish();
        functions.push(FunctionDef { id: ids.check[&f.id], name: format!("__chk_{}", f.name), visibility: Visibility::Internal, selector: None, body });
        origins.push(org);
    }
    let (body, org) = approve(c);
    functions.push(FunctionDef {
        id: ids.approve,
        name: "__guard_approve".into(),
        visibility: Visibility::External,
        selector: Some(c.approve_selector),
        body,
    });
    origins.push(org);
    points.push(InstrumentPoint { kind: PointKind::Admin, function: ids.approve, site: Site::Function, payload: Payload::None });

    let program = ContractProgram {
        name: p.name.clone(),
        width: p.width,
        functions,
        fallback: p.fallback.map(|f| ids.wrapper[&f]),
        data,
    };
    program.validate()?;
    Ok(Generated { program, points, origins })
}

type Body = (Vec<I>, Vec<Origin>, Vec<InstrumentPoint>);

fn business(p: &ContractProgram, f: &FunctionDef, fi: &FunctionIndex, c: &Config, ids: &Ids) -> Result<Body> {
    let cfg = &fi.analyzed.cfg;
    let real = build_cfg(&p.name, f);
    let chk = ids.check[&f.id];
    let mut g = Gen { e: Emitter::new(), c, width: p.width, points: Vec::new(), fid: f.id };
    let targets: BTreeSet<usize> = f.body.iter().filter_map(|i| i.jump_target()).collect();
    let labels: BTreeMap<usize, Label> = targets.iter().map(|&t| (t, g.e.label())).collect();
    let guard = g.e.label();
    let mut pre_exits = Vec::new();
    let mut trampolines: Vec<(Label, Step, usize, usize)> = Vec::new();
    let cg = &c.index.call_graph;
    let ccp = &c.index.ccp;

    // prologue: depth += 1, epp = Val(entry edge)
    let entry = cfg.edges.iter().position(|e| e.src == VertexKey::Entry && e.kind == EdgeKind::Real).expect("entry edge");
    let init = fi.epp.edge_val[entry];
    g.e.kind = PointKind::FunctionEntry;
    g.point(PointKind::FunctionEntry, Site::Function, Payload::Set(init));
    let (dm, eb) = (c.layout.depth_mem, c.layout.epp_base);
    let w_init = g.word(init);
    g.e.ops([I::Push(dm), I::MLoad, I::Push(1), I::Add, I::Dup(1), I::Push(dm), I::MStore, I::Push(eb), I::Sub]);
    g.e.ops([I::Push(w_init), I::Swap(1), I::MStore]);

    for (o, ins) in f.body.iter().enumerate() {
        if let Some(&l) = labels.get(&o) {
            g.e.place(l);
        }
        let Some(VertexKey::Block(start)) = real.block_of(o) else {
            // unreachable code is copied verbatim
            match ins.jump_target() {
                Some(t) => g.e.original_jump(matches!(ins, I::JumpI(_)), labels[&t], o),
                None => g.e.original(ins.clone(), o),
            }
            continue;
        };
        let end = real.vertex(VertexKey::Block(start)).expect("real block").end;
        let last = cfg.block_of(end - 1).expect("block in labeled CFG");
        match ins {
            I::Add | I::Sub | I::Mul if cfg.vertex(VertexKey::Check(o)).is_some() => {
                g.e.kind = PointKind::Branch;
                match ins {
                    I::Add => g.e.ops([I::Dup(2), I::Dup(2), I::Add, I::Dup(2), I::Gt]),
                    I::Sub => g.e.ops([I::Dup(2), I::Dup(2), I::Lt]),
                    _ => g.e.ops([
                        I::Dup(2), I::Dup(2), I::Mul, I::Dup(2), I::Swap(1), I::Div, I::Dup(3), I::Eq, I::IsZero,
                        I::Dup(2), I::IsZero, I::IsZero, I::And,
                    ]),
                }
                let vt = cfg
                    .edges
                    .iter()
                    .position(|e| e.src == VertexKey::Check(o) && e.kind == EdgeKind::VirtualTrue)
                    .map(|i| fi.epp.edge_val[i])
                    .expect("virtual edge");
                g.epp_add_flag(vt);
                g.e.original(ins.clone(), o);
            }
            I::Jump(t) => {
                let s = step(fi, start, last, *t, None);
                g.do_step(s, fi, chk, o);
                g.e.original_jump(false, labels[t], o);
            }
            I::JumpI(t) => {
                let taken = step(fi, start, last, *t, Some(true));
                let fall = step(fi, start, last, o + 1, Some(false));
                if taken.is_noop() {
                    g.e.original_jump(true, labels[t], o);
                } else {
                    let l = g.e.label();
                    g.e.original_jump(true, l, o);
                    trampolines.push((l, taken, *t, o));
                }
                g.do_step(fall, fi, chk, o);
            }
            I::Stop | I::Return | I::IRet => {
                let s = step_exit(fi, last);
                g.epp_add(s);
                g.check(fi, chk, o);
                g.point(PointKind::FunctionExit, Site::Offset(o), Payload::None);
                if matches!(ins, I::IRet) {
                    g.e.kind = PointKind::FunctionExit;
                    g.e.ops([I::Push(dm), I::MLoad, I::Push(1), I::Swap(1), I::Sub, I::Push(dm), I::MStore]);
                } else {
                    g.exit_sequence(matches!(ins, I::Stop), Some(o), &mut pre_exits, guard);
                }
                g.e.original(ins.clone(), o);
            }
            I::Revert => {
                g.point(PointKind::FunctionExit, Site::Offset(o), Payload::None);
                g.e.original(ins.clone(), o);
            }
            I::ICall(_) => {
                let site = crate::analysis::CallSite { contract: p.name.clone(), function: f.id, offset: o };
                let ei = cg.edges.iter().position(|e| e.site.as_ref() == Some(&site)).expect("internal call on call graph");
                let edge = &cg.edges[ei];
                let v = ccp.call_val[ei];
                let ctx = c.layout.ctx_mem;
                if edge.kind == CallKind::Surrogate {
                    g.e.kind = PointKind::InternalCallEdge;
                    g.point(PointKind::InternalCallEdge, Site::Offset(o), Payload::Set(v));
                    g.e.ops([I::Push(ctx), I::MLoad]);
                    g.save_addr();
                    g.e.op(I::MStore);
                    let wv = g.word(v);
                    g.e.ops([I::Push(wv), I::Push(ctx), I::MStore]);
                    g.e.original(ins.clone(), o);
                    g.e.kind = PointKind::InternalReturnEdge;
                    g.point(PointKind::InternalReturnEdge, Site::Offset(o), Payload::None);
                    g.save_addr();
                    g.e.ops([I::MLoad, I::Push(ctx), I::MStore]);
                } else if v != 0 {
                    g.e.kind = PointKind::InternalCallEdge;
                    g.point(PointKind::InternalCallEdge, Site::Offset(o), Payload::Add(v));
                    let wv = g.word(v);
                    g.e.ops([I::Push(ctx), I::MLoad, I::Push(wv), I::Add, I::Push(ctx), I::MStore]);
                    g.e.original(ins.clone(), o);
                    g.e.kind = PointKind::InternalReturnEdge;
                    g.point(PointKind::InternalReturnEdge, Site::Offset(o), Payload::Sub(v));
                    let nv = p.width.neg(wv);
                    g.e.ops([I::Push(ctx), I::MLoad, I::Push(nv), I::Add, I::Push(ctx), I::MStore]);
                } else {
                    g.e.original(ins.clone(), o);
                }
            }
            I::Call(t) | I::DelegateCall(t) => {
                let delegate = matches!(ins, I::DelegateCall(_));
                let protected = t.as_ref().is_some_and(|t| c.boundary.contains(t));
                let l = c.layout.clone();
                if protected {
                    let site = crate::analysis::CallSite { contract: p.name.clone(), function: f.id, offset: o };
                    let id = cg.site_id(&site).expect("protected call on call graph") as Word;
                    g.e.kind = PointKind::ExternalCallProtected;
                    g.point(PointKind::ExternalCallProtected, Site::Offset(o), Payload::CallSite(id));
                    g.e.ops([I::Push(l.scratch_addr), I::MStore]);
                    if !delegate {
                        g.e.ops([I::Push(l.scratch_value), I::MStore]);
                    }
                    g.e.ops([I::Push(l.scratch_selector), I::MStore, I::Push(3), I::Add, I::Push(l.scratch_k), I::MStore]);
                    g.e.ops([I::Push(id), I::Push(l.ctx_mem), I::MLoad, I::Push(MARKER)]);
                    g.e.ops([I::Push(l.scratch_k), I::MLoad, I::Push(l.scratch_selector), I::MLoad]);
                    if !delegate {
                        g.e.ops([I::Push(l.scratch_value), I::MLoad]);
                    }
                    g.e.ops([I::Push(l.scratch_addr), I::MLoad]);
                    g.e.original(ins.clone(), o);
                    g.e.ops([I::ReturnDataSize, I::Push(2), I::Gt, I::IsZero]);
                    g.e.ops([I::Push(0), I::ReturnDataLoad, I::Push(MARKER), I::Eq, I::And]);
                    g.e.ops([I::Dup(1), I::Push(2), I::Mul, I::Push(l.rdoff_mem), I::MStore]);
                    g.e.ops([I::Push(1), I::ReturnDataLoad, I::And, I::IsZero, I::IsZero]);
                    g.e.ops([I::Push(l.flag_mem), I::MLoad, I::Or, I::Push(l.flag_mem), I::MStore]);
                } else {
                    g.e.kind = PointKind::ExternalCallUnprotected;
                    g.point(PointKind::ExternalCallUnprotected, Site::Offset(o), Payload::None);
                    let site = crate::analysis::CallSite { contract: p.name.clone(), function: f.id, offset: o };
                    let id = cg.site_id(&site).expect("unprotected call on call graph") as Word;
                    let k = id * reentry_radix(p, c.index)? + 1;
                    g.e.ops([I::Push(l.ctx_slot), I::SLoad, I::Push(l.ctxsave_mem), I::MStore]);
                    g.e.ops([I::Push(l.ctx_mem), I::MLoad, I::Push(k), I::Add, I::Push(l.ctx_slot), I::SStore]);
                    g.e.original(ins.clone(), o);
                    g.e.ops([I::Push(l.ctxsave_mem), I::MLoad, I::Push(l.ctx_slot), I::SStore]);
                    g.e.ops([I::Push(0), I::Push(l.rdoff_mem), I::MStore]);
                }
            }
            I::CallDataLoad | I::ReturnDataLoad => {
                let off = if matches!(ins, I::CallDataLoad) { c.layout.cdoff_mem } else { c.layout.rdoff_mem };
                g.e.kind = PointKind::DataAccess;
                g.point(PointKind::DataAccess, Site::Offset(o), Payload::None);
                g.e.ops([I::Push(off), I::MLoad, I::Add]);
                g.e.original(ins.clone(), o);
            }
            I::CallDataSize | I::ReturnDataSize => {
                let off = if matches!(ins, I::CallDataSize) { c.layout.cdoff_mem } else { c.layout.rdoff_mem };
                g.e.kind = PointKind::DataAccess;
                g.point(PointKind::DataAccess, Site::Offset(o), Payload::None);
                g.e.original(ins.clone(), o);
                g.e.ops([I::Push(off), I::MLoad, I::Swap(1), I::Sub]);
            }
            _ => g.e.original(ins.clone(), o),
        }
        let falls = o + 1 == end && !ins.is_terminator() && !matches!(ins, I::JumpI(_));
        if falls {
            let s = step(fi, start, last, o + 1, None);
            g.do_step(s, fi, chk, o);
        }
    }

    for (l, s, t, o) in trampolines {
        g.e.dest(l);
        g.do_step(s, fi, chk, o);
        g.e.kind = PointKind::Branch;
        g.e.jump(labels[&t]);
    }
    g.exit_trampolines(&pre_exits, guard);

    // one Branch point per nonzero edge, one Backedge point per backedge
    for (i, e) in cfg.edges.iter().enumerate() {
        if fi.epp.edge_val[i] != 0 {
            g.point(PointKind::Branch, Site::Edge(e.src, e.dst), Payload::Add(fi.epp.edge_val[i]));
        }
    }
    for b in &fi.analyzed.backedges {
        let reset = cfg.edges.iter().position(|e| e.src == VertexKey::Entry && e.backedges.contains(b)).map(|i| fi.epp.edge_val[i]).unwrap_or(0);
        g.point(PointKind::Backedge, Site::Edge(b.src, b.dst), Payload::Set(reset));
    }
    let (body, org) = g.e.finish();
    Ok((body, org, g.points))
}

fn step_exit(fi: &FunctionIndex, last: VertexKey) -> u128 {
    let cfg = &fi.analyzed.cfg;
    let i = cfg
        .edges
        .iter()
        .position(|e| e.src == last && e.dst == VertexKey::Exit && e.kind == EdgeKind::Real)
        .expect("exit edge");
    fi.epp.edge_val[i]
}

fn wrapper(p: &ContractProgram, f: &FunctionDef, c: &Config) -> Result<Body> {
    let l = c.layout.clone();
    let mut g = Gen { e: Emitter::new(), c, width: p.width, points: Vec::new(), fid: f.id };
    g.e.kind = PointKind::ContractWrapper;
    g.point(PointKind::ContractWrapper, Site::Function, Payload::None);
    let (marked, fresh, dispatch, body) = (g.e.label(), g.e.label(), g.e.label(), g.e.label());
    let radix = reentry_radix(p, c.index)?;
    g.e.ops([I::CallDataSize, I::Push(3), I::Gt, I::IsZero]);
    g.e.ops([I::Push(0), I::CallDataLoad, I::Push(MARKER), I::Eq, I::And]);
    g.e.jumpi(marked);
    // boundary entry: the slot holds 1 + site·M + ctx while this contract
    // waits on an unprotected call, 0 otherwise
    g.e.ops([I::Push(l.ctx_slot), I::SLoad, I::Dup(1), I::IsZero]);
    g.e.jumpi(fresh);
    g.e.ops([I::Push(1), I::Swap(1), I::Sub]);
    g.e.ops([I::Push(radix), I::Dup(2), I::Mod, I::Swap(1), I::Push(radix), I::Swap(1), I::Div]);
    g.e.jump(dispatch);
    g.e.dest(fresh);
    g.e.op(I::Pop);
    g.e.jump(body);
    // protected caller: [MARKER, ctx, site]
    g.e.dest(marked);
    g.e.ops([I::Push(3), I::Push(l.cdoff_mem), I::MStore, I::Push(1), I::CallDataLoad, I::Push(2), I::CallDataLoad]);
    // stack: ctx, site
    g.e.dest(dispatch);
    let cg = &c.index.call_graph;
    let node = cg.node_of(&p.name, f.id).expect("function on call graph");
    let mut cases = Vec::new();
    for e in cg.in_edges(node) {
        // surrogates of recursive ICALLs never arrive here; their cases are
        // dead but harmless since site ids are unique
        if !matches!(e.kind, CallKind::ExternalProtected | CallKind::Reentry | CallKind::Surrogate) {
            continue;
        }
        let ei = cg.edges.iter().position(|x| std::ptr::eq(x, e)).expect("edge of graph");
        let lab = g.e.label();
        g.e.ops([I::Dup(1), I::Push(e.id as Word), I::Eq]);
        g.e.jumpi(lab);
        cases.push((lab, e.kind == CallKind::Surrogate, c.index.ccp.call_val[ei]));
    }
    g.e.ops([I::Pop, I::Push(l.ctx_mem), I::MStore]);
    g.e.jump(body);
    for (lab, surrogate, v) in cases {
        g.e.dest(lab);
        let wv = g.word(v);
        if surrogate {
            g.e.ops([I::Pop, I::Pop, I::Push(wv)]);
        } else {
            g.e.ops([I::Pop, I::Push(wv), I::Add]);
        }
        g.e.ops([I::Push(l.ctx_mem), I::MStore]);
        g.e.jump(body);
    }
    g.e.dest(body);
    g.e.icall_fn(f.id);
    // the business function returned from the top activation: a STOP
    let guard = g.e.label();
    let mut pre = Vec::new();
    g.exit_sequence(true, None, &mut pre, guard);
    g.e.kind = PointKind::ContractWrapper;
    g.e.op(I::Stop);
    g.exit_trampolines(&pre, guard);
    let (body, org) = g.e.finish();
    Ok((body, org, g.points))
}

fn approve(c: &Config) -> (Vec<I>, Vec<Origin>) {
    let l = c.layout;
    let mut e = Emitter::new();
    e.kind = PointKind::Admin;
    let (deny, lp, done) = (e.label(), e.label(), e.label());
    e.ops([I::Caller, I::Push(c.options.admin & l.width.mask()), I::Eq, I::IsZero]);
    e.jumpi(deny);
    e.push(0);
    e.dest(lp);
    e.ops([I::Dup(1), I::CallDataSize, I::Eq]);
    e.jumpi(done);
    e.ops([I::Dup(1), I::CallDataLoad, I::Dup(1), I::Push(l.mapping.base), I::Gt]);
    e.jumpi(deny);
    e.ops([I::Dup(1), I::Push(l.width.mask() - RESERVED_TOP_SLOTS), I::Lt]);
    e.jumpi(deny);
    e.ops([I::Push(1), I::Swap(1), I::SStore, I::Push(1), I::Add]);
    e.jump(lp);
    e.dest(done);
    e.op(I::Stop);
    e.dest(deny);
    e.ops([I::Push(0), I::Revert]);
    e.finish()
}
