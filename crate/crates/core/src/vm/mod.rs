//! Deterministic gas-metered stack machine with contracts, storage and
//! message calls.

pub mod asm;
mod exec;
pub mod isa;
pub mod program;
pub mod tx;
pub mod world;

pub use asm::{assemble, disassemble, disassemble_with};
pub use exec::{
    execute_transaction, execute_with, AlarmRecord, EventKind, ExecOptions, GasProfileEntry, GasSchedule, LogRecord,
    Receipt, TraceEvent, TxStatus, MAX_CALL_DEPTH, MAX_STACK,
};
pub use isa::{FunctionId, Instruction};
pub use program::{ContractProgram, FunctionDef, Visibility, MAX_CODE_SIZE};
pub use tx::{parse_transactions, Transaction, TxRecord};
pub use world::{Account, Snapshot, WorldState};

use crate::word::Word;

pub type Address = Word;

/// Return data `[GUARD_MARKER]` on REVERT marks a guard-initiated revert.
pub const GUARD_MARKER: Word = 0xA1A7;
/// LOG topic of an alarm record: `LOG(ALARM_TOPIC, function, index)`.
pub const ALARM_TOPIC: Word = 0xA1A3;
/// LOG topic emitted for every checked path in audit mode.
pub const AUDIT_TOPIC: Word = 0xA0D1;
