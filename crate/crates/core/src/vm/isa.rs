use std::fmt;

use serde::{Deserialize, Serialize};

use crate::word::{Width, Word};

pub type FunctionId = u16;

/// One machine instruction. Jump targets are instruction indices inside the
/// enclosing function body; call annotations name a protected callee contract
/// and are metadata only (they are not part of the encoded bytes).
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Instruction {
    Push(Word),
    Pop,
    Dup(u8),
    Swap(u8),
    Add,
    Sub,
    Mul,
    Div,
    Mod,
    Lt,
    Gt,
    Eq,
    IsZero,
    And,
    Or,
    Xor,
    Not,
    Shr,
    Jump(usize),
    JumpI(usize),
    JumpDest,
    MLoad,
    MStore,
    SLoad,
    SStore,
    CallDataLoad,
    CallDataSize,
    Caller,
    Origin,
    Address,
    CallValue,
    Balance,
    Call(Option<String>),
    DelegateCall(Option<String>),
    ICall(FunctionId),
    IRet,
    Return,
    Revert,
    Stop,
    ReturnDataLoad,
    ReturnDataSize,
    CodeLoad,
    Log,
}

impl Instruction {
    pub fn mnemonic(&self) -> &'static str {
        use Instruction::*;
        match self {
            Push(_) => "PUSH",
            Pop => "POP",
            Dup(_) => "DUP",
            Swap(_) => "SWAP",
            Add => "ADD",
            Sub => "SUB",
            Mul => "MUL",
            Div => "DIV",
            Mod => "MOD",
            Lt => "LT",
            Gt => "GT",
            Eq => "EQ",
            IsZero => "ISZERO",
            And => "AND",
            Or => "OR",
            Xor => "XOR",
            Not => "NOT",
            Shr => "SHR",
            Jump(_) => "JUMP",
            JumpI(_) => "JUMPI",
            JumpDest => "JUMPDEST",
            MLoad => "MLOAD",
            MStore => "MSTORE",
            SLoad => "SLOAD",
            SStore => "SSTORE",
            CallDataLoad => "CALLDATALOAD",
            CallDataSize => "CALLDATASIZE",
            Caller => "CALLER",
            Origin => "ORIGIN",
            Address => "ADDRESS",
            CallValue => "CALLVALUE",
            Balance => "BALANCE",
            Call(_) => "CALL",
            DelegateCall(_) => "DELEGATECALL",
            ICall(_) => "ICALL",
            IRet => "IRET",
            Return => "RETURN",
            Revert => "REVERT",
            Stop => "STOP",
            ReturnDataLoad => "RETURNDATALOAD",
            ReturnDataSize => "RETURNDATASIZE",
            CodeLoad => "CODELOAD",
            Log => "LOG",
        }
    }

    /// Opcode byte used by the binary encoding.
    pub fn opcode(&self) -> u8 {
        use Instruction::*;
        match self {
            Stop => 0x00,
            Add => 0x01,
            Mul => 0x02,
            Sub => 0x03,
            Div => 0x04,
            Mod => 0x06,
            Lt => 0x10,
            Gt => 0x11,
            Eq => 0x14,
            IsZero => 0x15,
            And => 0x16,
            Or => 0x17,
            Xor => 0x18,
            Not => 0x19,
            Shr => 0x1c,
            Address => 0x30,
            Balance => 0x31,
            Origin => 0x32,
            Caller => 0x33,
            CallValue => 0x34,
            CallDataLoad => 0x35,
            CallDataSize => 0x36,
            CodeLoad => 0x39,
            ReturnDataSize => 0x3d,
            ReturnDataLoad => 0x3e,
            Pop => 0x50,
            MLoad => 0x51,
            MStore => 0x52,
            SLoad => 0x54,
            SStore => 0x55,
            Jump(_) => 0x56,
            JumpI(_) => 0x57,
            JumpDest => 0x5b,
            Push(_) => 0x60,
            Dup(n) => 0x7f + n,
            Swap(n) => 0x8f + n,
            Log => 0xa0,
            ICall(_) => 0xb0,
            IRet => 0xb1,
            Call(_) => 0xf1,
            Return => 0xf3,
            DelegateCall(_) => 0xf4,
            Revert => 0xfd,
        }
    }

    pub fn immediate(&self) -> Option<Word> {
        match self {
            Instruction::Push(v) => Some(*v),
            Instruction::Jump(t) | Instruction::JumpI(t) => Some(*t as Word),
            Instruction::ICall(f) => Some(*f as Word),
            _ => None,
        }
    }

    /// Encoded size: one opcode byte plus `W/8` bytes per immediate.
    pub fn encoded_size(&self, width: Width) -> usize {
        1 + if self.immediate().is_some() { width.bytes() } else { 0 }
    }

    pub fn is_jump(&self) -> bool {
        matches!(self, Instruction::Jump(_) | Instruction::JumpI(_))
    }

    pub fn jump_target(&self) -> Option<usize> {
        match self {
            Instruction::Jump(t) | Instruction::JumpI(t) => Some(*t),
            _ => None,
        }
    }

    /// Instructions after which control never falls through to the next one.
    pub fn is_terminator(&self) -> bool {
        matches!(
            self,
            Instruction::Return
                | Instruction::Revert
                | Instruction::Stop
                | Instruction::IRet
                | Instruction::Jump(_)
        )
    }

    /// Instructions that end a function activation (edge to EXIT).
    pub fn is_exit(&self) -> bool {
        matches!(
            self,
            Instruction::Return | Instruction::Revert | Instruction::Stop | Instruction::IRet
        )
    }

    pub fn is_checked_arith(&self) -> bool {
        matches!(self, Instruction::Add | Instruction::Sub | Instruction::Mul)
    }

    pub fn is_message_call(&self) -> bool {
        matches!(self, Instruction::Call(_) | Instruction::DelegateCall(_))
    }

    pub fn call_target(&self) -> Option<&str> {
        match self {
            Instruction::Call(t) | Instruction::DelegateCall(t) => t.as_deref(),
            _ => None,
        }
    }

    /// Whether this instruction ends a basic block.
    pub fn ends_block(&self) -> bool {
        self.is_terminator()
            || matches!(
                self,
                Instruction::JumpI(_)
                    | Instruction::ICall(_)
                    | Instruction::Call(_)
                    | Instruction::DelegateCall(_)
            )
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Instruction::Push(v) => write!(f, "PUSH {v:#x}"),
            Instruction::Dup(n) => write!(f, "DUP {n}"),
            Instruction::Swap(n) => write!(f, "SWAP {n}"),
            Instruction::Jump(t) => write!(f, "JUMP {t}"),
            Instruction::JumpI(t) => write!(f, "JUMPI {t}"),
            Instruction::ICall(id) => write!(f, "ICALL {id}"),
            Instruction::Call(Some(t)) => write!(f, "CALL target={t}"),
            Instruction::DelegateCall(Some(t)) => write!(f, "DELEGATECALL target={t}"),
            other => f.write_str(other.mnemonic()),
        }
    }
}
