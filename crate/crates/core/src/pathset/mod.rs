//! Safe path sets: embedded list, embedded perfect hash table and the
//! storage mapping for paths approved after deployment.

pub mod mpht;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use mpht::{build_mpht, MphtSpec, DEFAULT_LAMBDA, DEFAULT_SEED};

use crate::error::{Error, Result};
use crate::indexing::{FunctionIndex, ProgramIndex};
use crate::vm::{Address, ContractProgram, FunctionId, GasSchedule, WorldState};
use crate::word::{Width, Word};

/// Sets smaller than this are embedded as a list.
pub const LIST_THRESHOLD: usize = 6;
/// Bytes of the list/table descriptor: function id (2), count (4), offset (8).
pub const DESCRIPTOR_SIZE: usize = 14;
pub const CELL_SIZE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    List,
    Mpht,
    /// Entirely in the storage mapping (nothing embedded).
    Mapping,
}

pub fn choose_strategy(n: usize) -> Strategy {
    if n < LIST_THRESHOLD {
        Strategy::List
    } else {
        Strategy::Mpht
    }
}

/// Analytic cost of storing `n` paths with `strategy`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GasEstimate {
    /// Code deposit for the embedded blob, or the SSTOREs filling the mapping.
    pub deploy_gas: u64,
    /// Gas of the check routine for an accepted index, averaged over members.
    pub per_check_gas: f64,
}

pub fn estimate_gas(strategy: Strategy, n: u64, schedule: &GasSchedule) -> GasEstimate {
    let bytes = |b: u64| schedule.deploy_cost(b as usize);
    let deploy_gas = match strategy {
        Strategy::List => bytes(DESCRIPTOR_SIZE as u64 + CELL_SIZE as u64 * n),
        Strategy::Mpht => {
            let m = MphtSpec::bucket_count(n, DEFAULT_LAMBDA);
            bytes(DESCRIPTOR_SIZE as u64 + 2 * CELL_SIZE as u64 * m + CELL_SIZE as u64 * n)
        }
        Strategy::Mapping => schedule.sstore_set * n,
    };
    GasEstimate { deploy_gas, per_check_gas: crate::instrument::check::accepted_check_gas(strategy, n, schedule) }
}

pub fn descriptor(function: FunctionId, count: usize, offset: usize) -> Vec<u8> {
    let mut d = Vec::with_capacity(DESCRIPTOR_SIZE);
    d.extend_from_slice(&function.to_be_bytes());
    d.extend_from_slice(&(count as u32).to_be_bytes());
    d.extend_from_slice(&(offset as u64).to_be_bytes());
    d
}

/// List blob: descriptor followed by one 8-byte cell per element; the cells
/// start `DESCRIPTOR_SIZE` bytes after `blob_offset`.
pub fn list_blob(function: FunctionId, keys: &[Word], blob_offset: usize) -> Vec<u8> {
    let mut out = descriptor(function, keys.len(), blob_offset + DESCRIPTOR_SIZE);
    for k in keys {
        out.extend_from_slice(&k.to_be_bytes());
    }
    out
}

pub fn list_contains(keys: &[Word], key: Word) -> bool {
    keys.contains(&key)
}

/// Storage slots of the approval mapping: function `f`'s key `k` lives at
/// `base + offsets[f] + k`. Offsets partition the upper half of the slot
/// space by index-space size, so distinct (function, key) pairs never share a slot.
/// Each protected contract's range starts where the previous one ends, so
/// code run through DELEGATECALL does not collide with its host's keys.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MappingLayout {
    pub base: Word,
    pub offsets: BTreeMap<FunctionId, Word>,
    pub limits: BTreeMap<FunctionId, Word>,
}

impl MappingLayout {
    /// Lays out one contract's functions; `None` when they do not fit below
    /// the slots reserved at the top of storage.
    pub fn new(width: Width, spaces: &BTreeMap<FunctionId, u128>, start: u128, reserved_top: u64) -> Option<Self> {
        let base = 1u64 << (width.bits() - 1);
        let room = (width.mask() - base).saturating_sub(reserved_top) as u128;
        let mut offsets = BTreeMap::new();
        let mut limits = BTreeMap::new();
        let mut at = start;
        for (&f, &space) in spaces {
            offsets.insert(f, at as Word);
            limits.insert(f, space.min(u64::MAX as u128) as Word);
            at = at.checked_add(space)?;
        }
        (at <= room).then_some(MappingLayout { base, offsets, limits })
    }

    pub fn slot(&self, function: FunctionId, key: Word) -> Result<Word> {
        let off = self.offsets.get(&function).ok_or(Error::OutOfRange { what: "function", id: function as u64, bound: 0 })?;
        let limit = self.limits[&function];
        if key >= limit {
            return Err(Error::OutOfRange { what: "combined index", id: key, bound: limit });
        }
        Ok(self.base + off + key)
    }

    pub fn check(&self, world: &WorldState, contract: Address, function: FunctionId, key: Word) -> bool {
        self.slot(function, key).map(|s| world.storage(contract, s) != 0).unwrap_or(false)
    }

    /// Direct append outside a transaction (tests and genesis); returns the
    /// SSTORE gas it costs.
    pub fn append(&self, world: &mut WorldState, contract: Address, function: FunctionId, key: Word, schedule: &GasSchedule) -> Result<u64> {
        let slot = self.slot(function, key)?;
        let cost = schedule.sstore_cost(world.storage(contract, slot), 1);
        world.set_storage(contract, slot, 1);
        world.commit();
        Ok(cost)
    }
}

mod hex_ids {
    use std::collections::BTreeSet;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &BTreeSet<u64>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(|x| format!("{x:#x}")))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeSet<u64>, D::Error> {
        Vec::<String>::deserialize(d)?
            .into_iter()
            .map(|s| {
                u64::from_str_radix(s.trim_start_matches("0x"), 16).map_err(serde::de::Error::custom)
            })
            .collect()
    }
}

/// Safe path set of one function.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionPathSet {
    pub contract: String,
    pub function: FunctionId,
    pub name: String,
    pub num_paths: u128,
    pub num_ccs: u128,
    /// Digest of the CFG edge list and edge values.
    pub edge_order: String,
    #[serde(with = "hex_ids")]
    pub safe: BTreeSet<Word>,
    pub strategy: Strategy,
    pub mpht: Option<MphtSpec>,
}

impl FunctionPathSet {
    pub fn contains(&self, key: Word) -> bool {
        match (&self.strategy, &self.mpht) {
            (Strategy::Mpht, Some(t)) => t.contains(key),
            (Strategy::Mapping, _) => false,
            _ => self.safe.contains(&key),
        }
    }

    pub fn keys(&self) -> Vec<Word> {
        self.safe.iter().copied().collect()
    }
}

pub fn edge_order_digest(fi: &FunctionIndex) -> String {
    let json = serde_json::to_vec(&(&fi.analyzed.cfg.edges, &fi.epp.edge_val)).expect("labeling serializes");
    hex::encode(&Sha256::digest(json)[..16])
}

/// The trained safe sets of every protected function, plus what is needed
/// to check they still match the programs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathSetSnapshot {
    pub lambda: u32,
    pub seed: u64,
    pub programs: BTreeMap<String, String>,
    pub functions: Vec<FunctionPathSet>,
}

impl PathSetSnapshot {
    /// Builds per-function sets from observed combined indices.
    pub fn build(
        programs: &[ContractProgram],
        index: &ProgramIndex,
        observed: &BTreeMap<(String, FunctionId), BTreeSet<Word>>,
        lambda: u32,
        seed: u64,
    ) -> Result<Self> {
        let widths: BTreeMap<&str, Width> = programs.iter().map(|p| (p.name.as_str(), p.width)).collect();
        let mut functions = Vec::new();
        for ((contract, fid), fi) in &index.functions {
            let safe = observed.get(&(contract.clone(), *fid)).cloned().unwrap_or_default();
            let space = fi.index_space();
            if let Some(bad) = safe.iter().find(|k| **k as u128 >= space) {
                return Err(Error::OutOfRange { what: "combined index", id: *bad, bound: space as u64 });
            }
            let strategy = choose_strategy(safe.len());
            let mpht = match strategy {
                Strategy::Mpht => {
                    let keys: Vec<Word> = safe.iter().copied().collect();
                    Some(build_mpht(&keys, lambda, seed, widths[contract.as_str()])?)
                }
                _ => None,
            };
            functions.push(FunctionPathSet {
                contract: contract.clone(),
                function: *fid,
                name: fi.name.clone(),
                num_paths: fi.num_paths(),
                num_ccs: fi.num_ccs,
                edge_order: edge_order_digest(fi),
                safe,
                strategy,
                mpht,
            });
        }
        let programs = programs
            .iter()
            .filter(|p| index.functions.keys().any(|(c, _)| c == &p.name))
            .map(|p| (p.name.clone(), p.fingerprint()))
            .collect();
        Ok(PathSetSnapshot { lambda, seed, programs, functions })
    }

    pub fn function(&self, contract: &str, fid: FunctionId) -> Option<&FunctionPathSet> {
        self.functions.iter().find(|f| f.contract == contract && f.function == fid)
    }

    pub fn function_mut(&mut self, contract: &str, fid: FunctionId) -> Option<&mut FunctionPathSet> {
        self.functions.iter_mut().find(|f| f.contract == contract && f.function == fid)
    }

    /// Fails unless every program and labeling matches this snapshot.
    pub fn verify(&self, programs: &[ContractProgram], index: &ProgramIndex) -> Result<()> {
        for p in programs.iter().filter(|p| self.programs.contains_key(&p.name)) {
            if self.programs[&p.name] != p.fingerprint() {
                return Err(Error::FingerprintMismatch { contract: p.name.clone(), function: "*".into() });
            }
        }
        for f in &self.functions {
            let fi = index
                .function(&f.contract, f.function)
                .ok_or_else(|| Error::FingerprintMismatch { contract: f.contract.clone(), function: f.name.clone() })?;
            if fi.num_paths() != f.num_paths || fi.num_ccs != f.num_ccs || edge_order_digest(fi) != f.edge_order {
                return Err(Error::FingerprintMismatch { contract: f.contract.clone(), function: f.name.clone() });
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("snapshot serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}
