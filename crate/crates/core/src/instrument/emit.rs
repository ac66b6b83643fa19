//! Instruction buffer with symbolic jump labels.

use serde::{Deserialize, Serialize};

use super::plan::PointKind;
use crate::vm::Instruction;
use crate::word::Word;

/// Provenance of an instruction in an instrumented body.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Origin {
    /// The original instruction at this offset (possibly retargeted).
    Original(usize),
    Injected(PointKind),
}

pub type Label = usize;

enum Item {
    Ins(Instruction, Origin),
    Jump { conditional: bool, to: Label, origin: Origin },
    Call { to: Label, origin: Origin },
    Place(Label),
}

pub struct Emitter {
    items: Vec<Item>,
    labels: usize,
    pub kind: PointKind,
}

impl Emitter {
    pub fn new() -> Self {
        Emitter { items: Vec::new(), labels: 0, kind: PointKind::ContractWrapper }
    }

    pub fn label(&mut self) -> Label {
        self.labels += 1;
        self.labels - 1
    }

    pub fn place(&mut self, l: Label) {
        self.items.push(Item::Place(l));
    }

    /// Places `l` on a fresh JUMPDEST.
    pub fn dest(&mut self, l: Label) {
        self.place(l);
        self.op(Instruction::JumpDest);
    }

    pub fn op(&mut self, i: Instruction) {
        self.items.push(Item::Ins(i, Origin::Injected(self.kind)));
    }

    pub fn ops(&mut self, is: impl IntoIterator<Item = Instruction>) {
        for i in is {
            self.op(i);
        }
    }

    pub fn push(&mut self, v: Word) {
        self.op(Instruction::Push(v));
    }

    pub fn original(&mut self, i: Instruction, offset: usize) {
        self.items.push(Item::Ins(i, Origin::Original(offset)));
    }

    pub fn jump(&mut self, to: Label) {
        self.items.push(Item::Jump { conditional: false, to, origin: Origin::Injected(self.kind) });
    }

    pub fn jumpi(&mut self, to: Label) {
        self.items.push(Item::Jump { conditional: true, to, origin: Origin::Injected(self.kind) });
    }

    /// An original JUMP/JUMPI whose target moved.
    pub fn original_jump(&mut self, conditional: bool, to: Label, offset: usize) {
        self.items.push(Item::Jump { conditional, to, origin: Origin::Original(offset) });
    }

    /// ICALL whose callee id is a label resolved by the caller of `finish`.
    pub fn icall_fn(&mut self, fid: u16) {
        self.op(Instruction::ICall(fid));
    }

    #[allow(dead_code)]
    pub fn call_label(&mut self, to: Label) {
        self.items.push(Item::Call { to, origin: Origin::Injected(self.kind) });
    }

    /// Resolves labels to instruction indices.
    pub fn finish(self) -> (Vec<Instruction>, Vec<Origin>) {
        let mut at = vec![usize::MAX; self.labels];
        let mut n = 0;
        for it in &self.items {
            match it {
                Item::Place(l) => at[*l] = n,
                _ => n += 1,
            }
        }
        let mut body = Vec::with_capacity(n);
        let mut origins = Vec::with_capacity(n);
        for it in self.items {
            match it {
                Item::Ins(i, o) => {
                    body.push(i);
                    origins.push(o);
                }
                Item::Jump { conditional, to, origin } => {
                    let t = at[to];
                    assert!(t != usize::MAX, "unplaced label");
                    body.push(if conditional { Instruction::JumpI(t) } else { Instruction::Jump(t) });
                    origins.push(origin);
                }
                Item::Call { to, origin } => {
                    body.push(Instruction::ICall(at[to] as u16));
                    origins.push(origin);
                }
                Item::Place(_) => {}
            }
        }
        (body, origins)
    }
}
