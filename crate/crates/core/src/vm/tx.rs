//! Transactions and their JSON-lines form.

use serde::{Deserialize, Serialize};

use super::world::WorldState;
use super::Address;
use crate::error::{Error, Result};
use crate::word::Word;

/// A resolved transaction. `selector: None` calls the fallback.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transaction {
    pub origin: Address,
    pub to: Address,
    pub selector: Option<u32>,
    pub calldata: Vec<Word>,
    pub value: Word,
    pub gas_limit: u64,
}

/// One line of a transaction file:
/// `{"origin": "0xa1", "to": "Bank", "fn": "deposit", "calldata": ["0x1"], "value": "0x0", "gas_limit": 100000}`.
/// `to` is an address or the name of a deployed contract.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TxRecord {
    pub origin: String,
    pub to: String,
    #[serde(rename = "fn")]
    pub function: String,
    #[serde(default)]
    pub calldata: Vec<String>,
    #[serde(default = "zero")]
    pub value: String,
    pub gas_limit: u64,
}

fn zero() -> String {
    "0x0".into()
}

pub fn parse_word(s: &str) -> Result<Word> {
    let s = s.trim();
    let r = match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(h) => u64::from_str_radix(h, 16),
        None => s.parse(),
    };
    r.map_err(|_| Error::InvalidTransaction(format!("bad word `{s}`")))
}

impl Transaction {
    /// Calls `function` of the contract at `to` by name.
    pub fn call(world: &WorldState, origin: Address, to: Address, function: &str, calldata: Vec<Word>) -> Result<Self> {
        let selector = resolve_selector(world, to, function)?;
        Ok(Transaction { origin, to, selector, calldata, value: 0, gas_limit: 10_000_000 })
    }

    pub fn with_value(mut self, value: Word) -> Self {
        self.value = value;
        self
    }

    pub fn with_gas(mut self, gas_limit: u64) -> Self {
        self.gas_limit = gas_limit;
        self
    }

    pub fn from_record(rec: &TxRecord, world: &WorldState) -> Result<Self> {
        let to = match parse_word(&rec.to) {
            Ok(a) => a,
            Err(_) => world
                .address_of(&rec.to)
                .ok_or_else(|| Error::InvalidTransaction(format!("unknown contract `{}`", rec.to)))?,
        };
        let selector = resolve_selector(world, to, &rec.function)?;
        if rec.gas_limit == 0 {
            return Err(Error::InvalidTransaction("gas_limit must be positive".into()));
        }
        Ok(Transaction {
            origin: parse_word(&rec.origin)?,
            to,
            selector,
            calldata: rec.calldata.iter().map(|w| parse_word(w)).collect::<Result<_>>()?,
            value: parse_word(&rec.value)?,
            gas_limit: rec.gas_limit,
        })
    }

    pub fn to_record(&self, world: &WorldState) -> TxRecord {
        let program = world.code(self.to);
        let function = match self.selector {
            None => "fallback".to_string(),
            Some(sel) => program
                .and_then(|p| p.functions.iter().find(|f| f.selector == Some(sel)))
                .map(|f| f.name.clone())
                .unwrap_or_else(|| format!("{sel:#010x}")),
        };
        TxRecord {
            origin: format!("{:#x}", self.origin),
            to: format!("{:#x}", self.to),
            function,
            calldata: self.calldata.iter().map(|w| format!("{w:#x}")).collect(),
            value: format!("{:#x}", self.value),
            gas_limit: self.gas_limit,
        }
    }
}

fn resolve_selector(world: &WorldState, to: Address, function: &str) -> Result<Option<u32>> {
    if function == "fallback" {
        return Ok(None);
    }
    let program = world.code(to).ok_or(Error::NotAContract(to))?;
    if let Some(f) = program.function_by_name(function) {
        return match f.selector {
            Some(sel) => Ok(Some(sel)),
            None if program.fallback == Some(f.id) => Ok(None),
            None => Err(Error::InvalidTransaction(format!("`{function}` is not externally callable"))),
        };
    }
    // raw selector
    match parse_word(function) {
        Ok(v) if v <= u32::MAX as u64 => Ok(Some(v as u32)),
        _ => Err(Error::UnknownSelector { contract: program.name.clone() }),
    }
}

/// Parses a JSON-lines transaction file; blank lines are skipped.
pub fn parse_transactions(text: &str, world: &WorldState) -> Result<Vec<Transaction>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let rec: TxRecord = serde_json::from_str(l).map_err(|e| Error::Json(format!("line {}: {e}", i + 1)))?;
            Transaction::from_record(&rec, world)
        })
        .collect()
}
