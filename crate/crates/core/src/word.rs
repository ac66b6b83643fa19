//! Machine words of a configurable width.
//!
//! Words are stored in a `u64` and every arithmetic result is reduced
//! modulo `2^W`. Overflow is reported to the caller rather than hidden so the
//! interpreter can surface it as a trace event.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Word = u64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct Width(u32);

impl Width {
    pub const W8: Width = Width(8);
    pub const W16: Width = Width(16);
    pub const W32: Width = Width(32);
    pub const W64: Width = Width(64);

    pub fn new(bits: u32) -> Result<Self> {
        match bits {
            8 | 16 | 32 | 64 => Ok(Width(bits)),
            _ => Err(Error::Unsupported(format!("word width {bits}"))),
        }
    }

    pub fn bits(self) -> u32 {
        self.0
    }

    pub fn bytes(self) -> usize {
        (self.0 / 8) as usize
    }

    pub fn mask(self) -> Word {
        if self.0 == 64 {
            u64::MAX
        } else {
            (1u64 << self.0) - 1
        }
    }

    pub fn wrap(self, v: u128) -> Word {
        (v & self.mask() as u128) as Word
    }

    /// `(a + b) mod 2^W` and whether the true sum reached `2^W`.
    pub fn add(self, a: Word, b: Word) -> (Word, bool) {
        let s = a as u128 + b as u128;
        (self.wrap(s), s > self.mask() as u128)
    }

    /// `(a - b) mod 2^W` and whether it borrowed.
    pub fn sub(self, a: Word, b: Word) -> (Word, bool) {
        (self.wrap((a as u128).wrapping_sub(b as u128)), a < b)
    }

    pub fn mul(self, a: Word, b: Word) -> (Word, bool) {
        let p = a as u128 * b as u128;
        (self.wrap(p), p > self.mask() as u128)
    }

    /// Two's-complement negation, used to encode negative counter increments.
    pub fn neg(self, a: Word) -> Word {
        self.wrap((a as u128).wrapping_neg())
    }

    /// Largest index space an instrumented counter may use: `2^(W-1)`.
    pub fn index_limit(self) -> u128 {
        1u128 << (self.0 - 1)
    }
}

impl Default for Width {
    fn default() -> Self {
        Width::W64
    }
}

impl TryFrom<u32> for Width {
    type Error = Error;
    fn try_from(v: u32) -> Result<Self> {
        Width::new(v)
    }
}

impl From<Width> for u32 {
    fn from(w: Width) -> u32 {
        w.0
    }
}
