//! Reference profiler: replays the event trace of an uninstrumented run and
//! emits the (function, combined index) checks the instrumented code would
//! perform, in the same order.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::analysis::{build_cfg, Backedge, CallKind, Cfg, EdgeKind, VertexKey};
use crate::error::{Error, Result};
use crate::indexing::{FunctionIndex, ProgramIndex};
use crate::vm::{Address, ContractProgram, EventKind, FunctionId, Instruction, TraceEvent, WorldState};
use crate::word::{Width, Word};

/// One path-set check: the program at `code` checks `index` for `function`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PathCheck {
    pub contract: String,
    pub code: Address,
    pub function: FunctionId,
    pub index: Word,
}

enum OnReturn {
    Keep,
    Sub(Word),
    Restore(Word),
}

struct Activation {
    fid: FunctionId,
    at: VertexKey,
    epp: Word,
    on_return: OnReturn,
    /// Offset of the ICALL this activation is suspended at.
    call_at: Option<usize>,
}

struct Frame {
    self_addr: Address,
    code: Address,
    name: String,
    protected: bool,
    ctx: Word,
    acts: Vec<Activation>,
    done: bool,
    /// Site id when suspended at a protected external call.
    marked_site: Option<u32>,
    /// Slot contents to restore when a pending unprotected call returns.
    unprotected_call: Option<Option<(Word, u32)>>,
    slots_before: BTreeMap<Address, (Word, u32)>,
}

pub struct TraceOracle<'a> {
    index: &'a ProgramIndex,
    boundary: &'a BTreeSet<String>,
    programs: BTreeMap<Address, Arc<ContractProgram>>,
    real: BTreeMap<(String, FunctionId), Cfg>,
    /// Shadow of each storage context's ctx slot: caller ctx and site id of
    /// the pending unprotected call.
    slots: BTreeMap<Address, (Word, u32)>,
}

impl<'a> TraceOracle<'a> {
    pub fn new(index: &'a ProgramIndex, boundary: &'a BTreeSet<String>, world: &WorldState) -> Self {
        let mut programs = BTreeMap::new();
        let mut real = BTreeMap::new();
        for (addr, acct) in world.accounts() {
            if let Some(p) = &acct.code {
                if boundary.contains(&p.name) {
                    for f in &p.functions {
                        real.entry((p.name.clone(), f.id)).or_insert_with(|| build_cfg(&p.name, f));
                    }
                }
                programs.insert(*addr, p.clone());
            }
        }
        TraceOracle { index, boundary, programs, real, slots: BTreeMap::new() }
    }

    /// Checks of one transaction's trace.
    pub fn run(&mut self, trace: &[TraceEvent]) -> Result<Vec<PathCheck>> {
        self.slots.clear();
        let mut frames: Vec<Frame> = Vec::new();
        let mut out = Vec::new();
        for ev in trace {
            match ev.kind {
                EventKind::FrameEnter { .. } => {
                    let f = self.enter(frames.last(), ev)?;
                    frames.push(f);
                    continue;
                }
                EventKind::FrameExit { success } => {
                    let f = frames.pop().ok_or_else(|| malformed("frame exit without frame"))?;
                    if !success {
                        self.slots = f.slots_before;
                    }
                    continue;
                }
                _ => {}
            }
            let frame = frames.last_mut().ok_or_else(|| malformed("event outside a frame"))?;
            if !frame.protected || frame.done {
                continue;
            }
            self.step(frame, ev, &mut out)?;
        }
        Ok(out)
    }

    fn program(&self, code: Address) -> Result<&Arc<ContractProgram>> {
        self.programs.get(&code).ok_or_else(|| malformed("code address without program"))
    }

    fn fi(&self, name: &str, fid: FunctionId) -> Result<&'a FunctionIndex> {
        self.index.function(name, fid).ok_or_else(|| malformed("function without labeling"))
    }

    fn enter(&self, parent: Option<&Frame>, ev: &TraceEvent) -> Result<Frame> {
        let p = self.program(ev.code)?;
        let width = p.width;
        let protected = self.boundary.contains(&p.name);
        let mut frame = Frame {
            self_addr: ev.contract,
            code: ev.code,
            name: p.name.clone(),
            protected,
            ctx: 0,
            acts: Vec::new(),
            done: false,
            marked_site: None,
            unprotected_call: None,
            slots_before: self.slots.clone(),
        };
        if !protected {
            return Ok(frame);
        }
        let site = parent.filter(|f| f.protected).and_then(|f| f.marked_site.map(|s| (f.ctx, s)));
        let site = site.or_else(|| self.slots.get(&ev.contract).copied());
        frame.ctx = match site {
            Some((caller_ctx, id)) => {
                let cg = &self.index.call_graph;
                let node = cg.node_of(&p.name, ev.function).ok_or_else(|| malformed("entry not on call graph"))?;
                let hit = cg.edges.iter().enumerate().find(|(_, e)| {
                    e.callee == node && e.id == id && matches!(e.kind, CallKind::ExternalProtected | CallKind::Reentry | CallKind::Surrogate)
                });
                match hit {
                    Some((i, e)) if e.kind == CallKind::Surrogate => width.wrap(self.index.ccp.call_val[i]),
                    Some((i, _)) => width.add(caller_ctx, width.wrap(self.index.ccp.call_val[i])).0,
                    None => caller_ctx,
                }
            }
            None => 0,
        };
        let act = self.activation(&p.name, ev.function, width, OnReturn::Keep)?;
        frame.acts.push(act);
        Ok(frame)
    }

    fn activation(&self, name: &str, fid: FunctionId, width: Width, on_return: OnReturn) -> Result<Activation> {
        let fi = self.fi(name, fid)?;
        let cfg = &fi.analyzed.cfg;
        let i = cfg
            .edges
            .iter()
            .position(|e| e.src == VertexKey::Entry && e.kind == EdgeKind::Real)
            .ok_or_else(|| malformed("no entry edge"))?;
        Ok(Activation { fid, at: cfg.edges[i].dst, epp: width.wrap(fi.epp.edge_val[i]), on_return, call_at: None })
    }

    fn step(&mut self, frame: &mut Frame, ev: &TraceEvent, out: &mut Vec<PathCheck>) -> Result<()> {
        let p = self.program(frame.code)?.clone();
        let w = p.width;
        match ev.kind {
            EventKind::ArithChecked { overflow } => {
                let c = VertexKey::Check(ev.offset);
                self.advance(frame, &p, Some(c), ev.offset, out)?;
                let fi = self.fi(&frame.name, top(frame)?.fid)?;
                let kind = if overflow { EdgeKind::VirtualTrue } else { EdgeKind::VirtualFalse };
                let v = edge_val(fi, |e| e.src == c && e.kind == kind)?;
                let a = top_mut(frame)?;
                a.epp = w.add(a.epp, w.wrap(v)).0;
                a.at = VertexKey::Block(ev.offset);
            }
            EventKind::BranchTaken { taken } => {
                self.advance(frame, &p, None, ev.offset, out)?;
                let fid = top(frame)?.fid;
                let Instruction::JumpI(t) = p.functions[fid as usize].body[ev.offset] else {
                    return Err(malformed("branch event off a JUMPI"));
                };
                let to = if taken { t } else { ev.offset + 1 };
                self.transfer(frame, &p, ev.offset, to, Some(taken), None, out)?;
            }
            EventKind::CallEnter { callee } => {
                self.advance(frame, &p, None, ev.offset, out)?;
                let fid = top(frame)?.fid;
                let cg = &self.index.call_graph;
                let (i, e) = cg
                    .edges
                    .iter()
                    .enumerate()
                    .find(|(_, e)| {
                        e.site.as_ref().is_some_and(|s| s.contract == frame.name && s.function == fid && s.offset == ev.offset)
                    })
                    .ok_or_else(|| malformed("internal call not on call graph"))?;
                let v = w.wrap(self.index.ccp.call_val[i]);
                let on_return = if e.kind == CallKind::Surrogate {
                    let saved = frame.ctx;
                    frame.ctx = v;
                    OnReturn::Restore(saved)
                } else {
                    frame.ctx = w.add(frame.ctx, v).0;
                    OnReturn::Sub(v)
                };
                top_mut(frame)?.call_at = Some(ev.offset);
                let act = self.activation(&frame.name, callee, w, on_return)?;
                frame.acts.push(act);
            }
            EventKind::CallReturn => {
                self.advance(frame, &p, None, ev.offset, out)?;
                self.complete(frame, &p, out)?;
                let done = frame.acts.pop().ok_or_else(|| malformed("return without activation"))?;
                match done.on_return {
                    OnReturn::Keep => {}
                    OnReturn::Sub(v) => frame.ctx = w.sub(frame.ctx, v).0,
                    OnReturn::Restore(c) => frame.ctx = c,
                }
                match frame.acts.last_mut() {
                    None => frame.done = true,
                    Some(caller) => {
                        let at = caller.call_at.take().ok_or_else(|| malformed("return to a caller not in a call"))?;
                        self.transfer(frame, &p, at, at + 1, None, None, out)?;
                    }
                }
            }
            EventKind::Halt => {
                self.advance(frame, &p, None, ev.offset, out)?;
                self.complete(frame, &p, out)?;
                frame.done = true;
            }
            EventKind::Revert => frame.done = true,
            EventKind::ExternalCallEnter { .. } => {
                self.advance(frame, &p, None, ev.offset, out)?;
                let fid = top(frame)?.fid;
                let target = p.functions[fid as usize].body[ev.offset].call_target().map(str::to_string);
                if target.is_some_and(|t| self.boundary.contains(&t)) {
                    let site = crate::analysis::CallSite { contract: frame.name.clone(), function: fid, offset: ev.offset };
                    frame.marked_site = Some(self.index.call_graph.site_id(&site).ok_or_else(|| malformed("protected site without id"))?);
                } else {
                    let site = crate::analysis::CallSite { contract: frame.name.clone(), function: fid, offset: ev.offset };
                    let id = self.index.call_graph.site_id(&site).ok_or_else(|| malformed("unprotected site without id"))?;
                    frame.unprotected_call = Some(self.slots.insert(frame.self_addr, (frame.ctx, id)));
                }
            }
            EventKind::ExternalCallReturn { success } => {
                match frame.unprotected_call.take() {
                    Some(Some(prev)) => {
                        self.slots.insert(frame.self_addr, prev);
                    }
                    Some(None) => {
                        self.slots.remove(&frame.self_addr);
                    }
                    None => {}
                }
                frame.marked_site = None;
                self.transfer(frame, &p, ev.offset, ev.offset + 1, None, Some(!success), out)?;
            }
            EventKind::BlockEnter | EventKind::Sstore { .. } => {}
            EventKind::FrameEnter { .. } | EventKind::FrameExit { .. } => unreachable!("handled by run"),
        }
        Ok(())
    }

    /// Follows deterministic control flow until the top activation is at
    /// `check` (when given) or inside the vertex holding `offset`.
    fn advance(&self, frame: &mut Frame, p: &ContractProgram, check: Option<VertexKey>, offset: usize, out: &mut Vec<PathCheck>) -> Result<()> {
        for _ in 0..100_000 {
            let a = top(frame)?;
            let fi = self.fi(&frame.name, a.fid)?;
            let cfg = &fi.analyzed.cfg;
            let v = cfg.vertex(a.at).ok_or_else(|| malformed("activation off the CFG"))?;
            match check {
                Some(c) if a.at == c => return Ok(()),
                None if v.start <= offset && offset < v.end => return Ok(()),
                _ => {}
            }
            if matches!(a.at, VertexKey::Check(_)) {
                return Err(malformed("arithmetic check vertex left without its event"));
            }
            let body = &p.functions[a.fid as usize].body;
            let real_end = self.real_block(&frame.name, a.fid, v.end - 1)?.1;
            if v.end < real_end {
                // piece boundary in front of a checked instruction
                top_mut(frame)?.at = VertexKey::Check(v.end);
                continue;
            }
            let last = v.end - 1;
            match &body[last] {
                Instruction::Jump(t) => self.transfer(frame, p, last, *t, None, None, out)?,
                i if !i.ends_block() => self.transfer(frame, p, last, v.end, None, None, out)?,
                i => return Err(malformed(&format!("reached {} at {last} without its event", i.mnemonic()))),
            }
        }
        Err(malformed("no progress"))
    }

    fn real_block(&self, name: &str, fid: FunctionId, offset: usize) -> Result<(usize, usize)> {
        let real = &self.real[&(name.to_string(), fid)];
        let k = real.block_of(offset).ok_or_else(|| malformed("offset outside the real CFG"))?;
        let v = real.vertex(k).expect("vertex of its own key");
        Ok((v.start, v.end))
    }

    /// Takes the real control transfer from the instruction at `from` to
    /// block `to`. `returned_zero` selects the arm of a message-call diamond.
    #[allow(clippy::too_many_arguments)]
    fn transfer(
        &self,
        frame: &mut Frame,
        p: &ContractProgram,
        from: usize,
        to: usize,
        branch: Option<bool>,
        returned_zero: Option<bool>,
        out: &mut Vec<PathCheck>,
    ) -> Result<()> {
        let w = p.width;
        let fid = top(frame)?.fid;
        let fi = self.fi(&frame.name, fid)?;
        let cfg = &fi.analyzed.cfg;
        let src = cfg.block_of(from).ok_or_else(|| malformed("transfer from outside the CFG"))?;
        let be = Backedge { src: VertexKey::Block(self.real_block(&frame.name, fid, from)?.0), dst: VertexKey::Block(to), branch };
        if fi.analyzed.backedges.contains(&be) {
            let exit = edge_val(fi, |e| e.kind == EdgeKind::SurrogateExit && e.backedges.contains(&be))?;
            let a = top_mut(frame)?;
            a.epp = w.add(a.epp, w.wrap(exit)).0;
            self.emit(frame, out)?;
            let i = cfg
                .edges
                .iter()
                .position(|e| e.src == VertexKey::Entry && e.backedges.contains(&be))
                .ok_or_else(|| malformed("backedge without restart edge"))?;
            let a = top_mut(frame)?;
            a.epp = w.wrap(fi.epp.edge_val[i]);
            a.at = cfg.edges[i].dst;
            return Ok(());
        }
        let cands: Vec<usize> = (0..cfg.edges.len())
            .filter(|&i| {
                let e = &cfg.edges[i];
                e.src == src && e.dst.offset() == Some(to) && e.dst != VertexKey::Exit
            })
            .collect();
        let pick = cands.iter().copied().find(|&i| {
            let e = &cfg.edges[i];
            match e.kind {
                EdgeKind::Real => e.branch == branch,
                EdgeKind::VirtualTrue => returned_zero == Some(true),
                EdgeKind::VirtualFalse => returned_zero == Some(false),
                _ => false,
            }
        });
        let i = pick.ok_or_else(|| malformed(&format!("no edge {src} -> {to}")))?;
        let a = top_mut(frame)?;
        a.epp = w.add(a.epp, w.wrap(fi.epp.edge_val[i])).0;
        a.at = cfg.edges[i].dst;
        Ok(())
    }

    /// Takes the edge to EXIT from the current vertex and emits the path.
    fn complete(&self, frame: &mut Frame, p: &ContractProgram, out: &mut Vec<PathCheck>) -> Result<()> {
        let a = top(frame)?;
        let fi = self.fi(&frame.name, a.fid)?;
        let at = a.at;
        let v = edge_val(fi, |e| e.src == at && e.dst == VertexKey::Exit && e.kind == EdgeKind::Real)?;
        let a = top_mut(frame)?;
        a.epp = p.width.add(a.epp, p.width.wrap(v)).0;
        self.emit(frame, out)
    }

    fn emit(&self, frame: &Frame, out: &mut Vec<PathCheck>) -> Result<()> {
        let a = top(frame)?;
        let fi = self.fi(&frame.name, a.fid)?;
        let w = self.program(frame.code)?.width;
        let np = w.wrap(fi.num_paths());
        let index = w.add(w.mul(frame.ctx, np).0, a.epp).0;
        out.push(PathCheck { contract: frame.name.clone(), code: frame.code, function: a.fid, index });
        Ok(())
    }
}

fn top(f: &Frame) -> Result<&Activation> {
    f.acts.last().ok_or_else(|| malformed("no activation"))
}

fn top_mut(f: &mut Frame) -> Result<&mut Activation> {
    f.acts.last_mut().ok_or_else(|| malformed("no activation"))
}

fn edge_val(fi: &FunctionIndex, pred: impl Fn(&crate::analysis::Edge) -> bool) -> Result<u128> {
    let i = fi.analyzed.cfg.edges.iter().position(pred).ok_or_else(|| malformed("missing labeled edge"))?;
    Ok(fi.epp.edge_val[i])
}

fn malformed(msg: &str) -> Error {
    Error::MalformedTrace(msg.to_string())
}

/// The checks an audit-mode instrumented run performed, read back from its
/// `AUDIT` log records.
pub fn audit_checks(world: &WorldState, logs: &[crate::vm::LogRecord]) -> Vec<PathCheck> {
    logs.iter()
        .filter(|l| l.topic == crate::vm::AUDIT_TOPIC)
        .map(|l| PathCheck {
            contract: world.code(l.code).map(|p| p.name.clone()).unwrap_or_default(),
            code: l.code,
            function: l.a as FunctionId,
            index: l.b,
        })
        .collect()
}
