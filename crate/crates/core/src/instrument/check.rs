//! The per-function membership check routine.
//!
//! Called with the combined index on the stack; consults the embedded set,
//! then the approval mapping, and on a miss logs an alarm and raises the
//! frame's anomaly flag. Leaves the stack as it found it.

use super::emit::Emitter;
use super::layout::ReservedLayout;
use super::plan::{Embedded, PointKind};
use crate::pathset::mpht::{field_shifts, mix_shifts, MIX_ADD, MIX_MUL1, MIX_MUL2};
use crate::vm::{FunctionId, Instruction as I, GasSchedule, ALARM_TOPIC, AUDIT_TOPIC};
use crate::word::Word;

/// Where a function's embedded structure sits in the data segment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataRef {
    /// First list cell and element count.
    List { cells: u64, n: u64 },
    /// Displacement cells and slot cells.
    Mpht { displacements: u64, slots: u64 },
    None,
}

pub struct CheckParams<'a> {
    pub function: FunctionId,
    pub space: u128,
    pub embedded: &'a Embedded,
    pub data: DataRef,
    /// `base + offset` of the function's mapping range.
    pub mapping_base: Word,
    pub audit: bool,
}

pub fn emit_check(e: &mut Emitter, layout: &ReservedLayout, p: &CheckParams) {
    e.kind = PointKind::PathSetCheck;
    let found = e.label();
    let miss = e.label();
    let probe = e.label();
    if p.audit {
        e.ops([I::Dup(1), I::Push(p.function as Word), I::Push(AUDIT_TOPIC), I::Log]);
    }
    if p.space <= layout.width.mask() as u128 {
        e.ops([I::Dup(1), I::Push(p.space as Word), I::Gt, I::IsZero]);
        e.jumpi(miss);
    }
    match (p.embedded, p.data) {
        (Embedded::List(keys), DataRef::List { cells, n }) if !keys.is_empty() => {
            let lp = e.label();
            let hit = e.label();
            e.push(cells);
            e.dest(lp);
            e.ops([I::Dup(1), I::CodeLoad, I::Dup(3), I::Eq]);
            e.jumpi(hit);
            e.ops([I::Push(8), I::Add, I::Dup(1), I::Push(cells + 8 * n), I::Eq, I::IsZero]);
            e.jumpi(lp);
            e.op(I::Pop);
            e.jump(probe);
            e.dest(hit);
            e.op(I::Pop);
            e.jump(found);
        }
        (Embedded::Mpht(t), DataRef::Mpht { displacements, slots }) => {
            let w = layout.width;
            let mask = w.mask();
            let [s1, s2, s3] = mix_shifts(w);
            let (f1s, f2s) = field_shifts(w);
            // h = mix(idx ^ seed)
            e.ops([I::Dup(1), I::Push(t.word_seed()), I::Xor, I::Push(MIX_ADD & mask), I::Add]);
            e.ops([I::Dup(1), I::Push(s1 as Word), I::Shr, I::Xor, I::Push(MIX_MUL1 & mask), I::Mul]);
            e.ops([I::Dup(1), I::Push(s2 as Word), I::Shr, I::Xor, I::Push(MIX_MUL2 & mask), I::Mul]);
            e.ops([I::Dup(1), I::Push(s3 as Word), I::Shr, I::Xor]);
            // bucket cell address
            e.ops([I::Push(t.m), I::Dup(2), I::Mod, I::Push(16), I::Mul, I::Push(displacements), I::Add]);
            // idx h ga n y, y = d0*f2 + d1
            e.ops([I::Push(t.n), I::Push(t.n), I::Dup(4), I::Push(f2s as Word), I::Shr, I::Mod]);
            e.ops([I::Dup(3), I::CodeLoad, I::Mul]);
            e.ops([I::Dup(3), I::Push(8), I::Add, I::CodeLoad, I::Add]);
            // + f1, mod n
            e.ops([I::Push(t.n), I::Dup(5), I::Push(f1s as Word), I::Shr, I::Mod, I::Add, I::Mod]);
            e.ops([I::Swap(2), I::Pop, I::Pop]);
            e.ops([I::Push(8), I::Mul, I::Push(slots), I::Add, I::CodeLoad]);
            e.ops([I::Dup(2), I::Eq]);
            e.jumpi(found);
        }
        _ => {}
    }
    e.dest(probe);
    e.ops([I::Dup(1), I::Push(p.mapping_base), I::Add, I::SLoad]);
    e.jumpi(found);
    e.dest(miss);
    e.ops([I::Dup(1), I::Push(p.function as Word), I::Push(ALARM_TOPIC), I::Log]);
    e.ops([I::Push(1), I::Push(layout.flag_mem), I::MStore]);
    e.dest(found);
    e.ops([I::Pop, I::IRet]);
}

/// Gas of the check routine (ICALL through IRET) for an accepted index,
/// without audit logging. `List` is averaged over the member positions; an
/// empty list is a mapping hit.
pub fn accepted_check_gas(kind: crate::pathset::Strategy, n: u64, s: &GasSchedule) -> f64 {
    use crate::pathset::Strategy;
    let b = s.base_op as f64;
    let j = s.jumpi as f64;
    // ICALL, bounds check, found: JUMPDEST POP IRET
    let common = 5.0 * b + j + 3.0 * b;
    match kind {
        Strategy::List if n > 0 => {
            // PUSH, hit iteration, hit trampoline, plus 13 ops per skipped element
            let first = b + (5.0 * b + j) + 3.0 * b;
            let per = 11.0 * b + 2.0 * j;
            common + first + per * (n as f64 - 1.0) / 2.0
        }
        Strategy::Mpht => common + 59.0 * b + j,
        // probe: JUMPDEST DUP PUSH ADD SLOAD JUMPI
        _ => common + 4.0 * b + s.sload as f64 + j,
    }
}
