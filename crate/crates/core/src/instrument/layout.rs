//! Reserved memory words, storage slots and protocol constants.

use serde::{Deserialize, Serialize};

use crate::pathset::MappingLayout;
use crate::word::{Width, Word};

/// First calldata / return-data word of the guard protocol.
pub const MARKER: Word = 0xC7C7;
/// Selector of the synthetic approval entry (reduced modulo the width).
pub const APPROVE_SELECTOR: u32 = 0xa99f_0e1d;
/// Internal-call nesting the per-activation stacks can hold.
pub const MAX_ACTIVATIONS: u64 = 2048;
/// Storage slots kept free at the top of the slot space.
pub const RESERVED_TOP_SLOTS: u64 = 16;

/// Where the instrumentation keeps its state. Memory addresses hang off the
/// top of the word space; the per-activation path counters and saved
/// contexts are stacks indexed by activation depth.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReservedLayout {
    pub width: Width,
    pub ctx_mem: Word,
    pub flag_mem: Word,
    pub depth_mem: Word,
    pub cdoff_mem: Word,
    pub scratch_addr: Word,
    pub scratch_value: Word,
    pub scratch_selector: Word,
    pub scratch_k: Word,
    pub rdoff_mem: Word,
    /// Previous ctx-slot contents while an unprotected call is pending.
    pub ctxsave_mem: Word,
    pub epp_base: Word,
    pub save_base: Word,
    pub ctx_slot: Word,
    pub mapping: MappingLayout,
}

impl ReservedLayout {
    pub fn new(width: Width, mapping: MappingLayout) -> Self {
        let top = width.mask();
        let epp_base = top - 16;
        ReservedLayout {
            width,
            ctx_mem: top,
            flag_mem: top - 1,
            depth_mem: top - 2,
            cdoff_mem: top - 3,
            scratch_addr: top - 4,
            scratch_value: top - 5,
            scratch_selector: top - 6,
            scratch_k: top - 7,
            rdoff_mem: top - 8,
            ctxsave_mem: top - 9,
            epp_base,
            save_base: epp_base - MAX_ACTIVATIONS,
            ctx_slot: top,
            mapping,
        }
    }

    /// Lowest reserved memory address.
    pub fn memory_floor(&self) -> Word {
        self.save_base - MAX_ACTIVATIONS
    }

    pub fn is_reserved_memory(&self, addr: Word) -> bool {
        addr >= self.memory_floor()
    }

    pub fn is_reserved_slot(&self, slot: Word) -> bool {
        slot >= self.mapping.base
    }
}
