use thiserror::Error;

use crate::vm::Address;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum Error {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: undefined label `{label}`")]
    UndefinedLabel { line: usize, label: String },
    #[error("invalid jump target: function `{function}` offset {offset} jumps to {target}")]
    InvalidJumpTarget { function: String, offset: usize, target: usize },
    #[error("jump into immediate: `{function}` offset {offset}")]
    JumpIntoImmediate { function: String, offset: usize },
    #[error("selector collision on {selector:#010x}")]
    SelectorCollision { selector: u32 },
    #[error("invalid program: {0}")]
    InvalidProgram(String),
    #[error("code size {size} exceeds the {limit}-byte limit")]
    SizeLimitExceeded { size: usize, limit: usize },
    #[error("no contract at address {0:#x}")]
    NotAContract(Address),
    #[error("unknown selector for contract `{contract}`")]
    UnknownSelector { contract: String },
    #[error("invalid transaction: {0}")]
    InvalidTransaction(String),
    #[error("index space overflow in `{function}`: {num_paths} paths x {num_ccs} contexts exceeds 2^{bits}")]
    IndexSpaceOverflow { function: String, num_paths: u128, num_ccs: u128, bits: u32 },
    #[error("{what} {id} out of range (< {bound})")]
    OutOfRange { what: &'static str, id: u64, bound: u64 },
    #[error("perfect hash construction failed after {tries} seeds")]
    ConstructionFailed { tries: u32 },
    #[error("training transaction {index} did not succeed: {status}")]
    TrainingTxFailed { index: usize, status: String },
    #[error("snapshot does not match program `{contract}` function `{function}`")]
    FingerprintMismatch { contract: String, function: String },
    #[error("caller {0:#x} is not the configured admin")]
    NotAdmin(Address),
    #[error("alarm already approved")]
    AlreadyApproved,
    #[error("reserved address or slot {0:#x} is used by the original program")]
    ReservedConflict(u64),
    #[error("unsupported configuration: {0}")]
    Unsupported(String),
    #[error("malformed trace: {0}")]
    MalformedTrace(String),
    #[error("io: {0}")]
    Io(String),
    #[error("json: {0}")]
    Json(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e.to_string())
    }
}
