use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::isa::{FunctionId, Instruction};
use crate::error::{Error, Result};
use crate::word::Width;

/// Container header bytes.
pub const HEADER_SIZE: usize = 32;
/// Bytes per function-table entry.
pub const FUNCTION_ENTRY_SIZE: usize = 8;
/// Maximum deployable code size.
pub const MAX_CODE_SIZE: usize = 24576;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Visibility {
    External,
    Internal,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionDef {
    pub id: FunctionId,
    pub name: String,
    pub visibility: Visibility,
    pub selector: Option<u32>,
    pub body: Vec<Instruction>,
}

impl FunctionDef {
    /// Execution always begins at the first instruction.
    pub fn entry_offset(&self) -> usize {
        0
    }

    pub fn is_external(&self) -> bool {
        self.visibility == Visibility::External
    }

    pub fn code_size(&self, width: Width) -> usize {
        self.body.iter().map(|i| i.encoded_size(width)).sum()
    }
}

/// A deployable contract: function table, selector map, fallback and an
/// optional read-only data segment addressed by `CODELOAD`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContractProgram {
    pub name: String,
    pub width: Width,
    pub functions: Vec<FunctionDef>,
    pub fallback: Option<FunctionId>,
    #[serde(default, with = "hex_bytes")]
    pub data: Vec<u8>,
}

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(s).map_err(serde::de::Error::custom)
    }
}

impl ContractProgram {
    pub fn function(&self, id: FunctionId) -> Option<&FunctionDef> {
        self.functions.get(id as usize)
    }

    pub fn function_by_name(&self, name: &str) -> Option<&FunctionDef> {
        self.functions.iter().find(|f| f.name == name)
    }

    pub fn selector_table(&self) -> BTreeMap<u32, FunctionId> {
        self.functions
            .iter()
            .filter_map(|f| f.selector.map(|s| (s, f.id)))
            .collect()
    }

    /// Functions a transaction or message call may enter directly.
    pub fn entry_functions(&self) -> Vec<FunctionId> {
        let mut ids: BTreeSet<FunctionId> = self.selector_table().into_values().collect();
        if let Some(fb) = self.fallback {
            ids.insert(fb);
        }
        ids.into_iter().collect()
    }

    pub fn dispatch(&self, selector: Option<u32>) -> Option<FunctionId> {
        let mask = self.width.mask();
        match selector {
            Some(sel) => self
                .functions
                .iter()
                .find(|f| f.selector.map(|s| s as u64 & mask) == Some(sel as u64 & mask))
                .map(|f| f.id)
                .or(self.fallback),
            None => self.fallback,
        }
    }

    pub fn byte_size(&self) -> usize {
        HEADER_SIZE
            + FUNCTION_ENTRY_SIZE * self.functions.len()
            + self.functions.iter().map(|f| f.code_size(self.width)).sum::<usize>()
            + self.data.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.functions.is_empty() {
            return Err(Error::InvalidProgram(format!("`{}` has no functions", self.name)));
        }
        let mut names = BTreeSet::new();
        let mut selectors = BTreeSet::new();
        let mask = self.width.mask();
        for (i, f) in self.functions.iter().enumerate() {
            if f.id as usize != i {
                return Err(Error::InvalidProgram(format!("function `{}` has id {} at index {i}", f.name, f.id)));
            }
            if !names.insert(f.name.as_str()) {
                return Err(Error::InvalidProgram(format!("duplicate function `{}`", f.name)));
            }
            if let Some(sel) = f.selector {
                if f.visibility != Visibility::External {
                    return Err(Error::InvalidProgram(format!("internal function `{}` has a selector", f.name)));
                }
                if sel == 0 {
                    return Err(Error::InvalidProgram("selector 0 is reserved for fallback calls".into()));
                }
                if !selectors.insert(sel as u64 & mask) {
                    return Err(Error::SelectorCollision { selector: sel });
                }
            }
            if f.body.is_empty() {
                return Err(Error::InvalidProgram(format!("function `{}` is empty", f.name)));
            }
            if !f.body.last().unwrap().is_terminator() {
                return Err(Error::InvalidProgram(format!("function `{}` falls off its end", f.name)));
            }
            for (off, ins) in f.body.iter().enumerate() {
                if let Some(t) = ins.jump_target() {
                    if f.body.get(t) != Some(&Instruction::JumpDest) {
                        return Err(Error::InvalidJumpTarget { function: f.name.clone(), offset: off, target: t });
                    }
                }
                match ins {
                    Instruction::ICall(id) if *id as usize >= self.functions.len() => {
                        return Err(Error::InvalidProgram(format!("`{}` calls unknown function {id}", f.name)));
                    }
                    Instruction::Dup(n) | Instruction::Swap(n) if !(1..=16).contains(n) => {
                        return Err(Error::InvalidProgram(format!("`{}`: bad stack index {n}", f.name)));
                    }
                    Instruction::Push(v) if *v > mask => {
                        return Err(Error::InvalidProgram(format!("`{}`: immediate {v:#x} exceeds word width", f.name)));
                    }
                    _ => {}
                }
            }
        }
        if let Some(fb) = self.fallback {
            match self.function(fb) {
                Some(f) if f.is_external() && f.selector.is_none() => {}
                _ => return Err(Error::InvalidProgram("fallback must be an external function without selector".into())),
            }
        }
        Ok(())
    }

    /// Binary encoding: header, function table, bodies, data segment.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.byte_size());
        let mut header = [0u8; HEADER_SIZE];
        header[..4].copy_from_slice(b"GVM1");
        header[4] = self.width.bits() as u8;
        header[5..7].copy_from_slice(&(self.functions.len() as u16).to_be_bytes());
        header[7..9].copy_from_slice(&self.fallback.map(|f| f + 1).unwrap_or(0).to_be_bytes());
        header[9..13].copy_from_slice(&(self.data.len() as u32).to_be_bytes());
        out.extend_from_slice(&header);
        for f in &self.functions {
            out.extend_from_slice(&f.id.to_be_bytes());
            out.push(matches!(f.visibility, Visibility::External) as u8);
            out.push(0);
            out.extend_from_slice(&f.selector.unwrap_or(0).to_be_bytes());
        }
        let imm_bytes = self.width.bytes();
        for f in &self.functions {
            for ins in &f.body {
                out.push(ins.opcode());
                if let Some(v) = ins.immediate() {
                    out.extend_from_slice(&v.to_be_bytes()[8 - imm_bytes..]);
                }
            }
        }
        out.extend_from_slice(&self.data);
        out
    }

    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.encode()))
    }

    /// Reads an 8-byte big-endian cell of the data segment; bytes past the
    /// end read as zero.
    pub fn data_cell(&self, offset: u64) -> u64 {
        let mut buf = [0u8; 8];
        for (i, b) in buf.iter_mut().enumerate() {
            let idx = offset as u128 + i as u128;
            if idx < self.data.len() as u128 {
                *b = self.data[idx as usize];
            }
        }
        u64::from_be_bytes(buf)
    }
}
