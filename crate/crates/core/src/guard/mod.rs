//! The train → protect → detect → review workflow.

pub mod detect;
pub mod oracle;
pub mod report;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use detect::{
    alarm_details, approve_at, approve_tx, false_alarm_simulation, review_and_approve, run_detection, AlarmDetail, Approval, Deployment,
    DetectionRun, FalseAlarmReport, TxOutcome,
};
pub use oracle::{audit_checks, PathCheck, TraceOracle};
pub use report::{overhead_pct, reconcile_gas, ContractOverhead, GasReconciliation, OverheadReport, TxOverhead};

use crate::error::{Error, Result};
use crate::indexing::{index_programs, ProgramIndex};
use crate::instrument::{instrument, GuardOptions, InstrumentedProgram};
use crate::pathset::{PathSetSnapshot, DEFAULT_LAMBDA, DEFAULT_SEED};
use crate::vm::tx::parse_word;
use crate::vm::world::FIRST_CONTRACT_ADDRESS;
use crate::vm::{
    execute_transaction, Address, ContractProgram, GasSchedule, Transaction, TxStatus, WorldState,
};
use crate::word::Word;

/// Balance granted to an account (address or contract name) at genesis.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Funding {
    pub account: String,
    pub amount: Word,
}

/// Storage preset at genesis.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StorageInit {
    pub contract: String,
    pub slot: Word,
    pub value: Word,
}

/// Programs in deployment order plus genesis state and the protected set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bundle {
    pub programs: Vec<ContractProgram>,
    pub boundary: BTreeSet<String>,
    #[serde(default)]
    pub funding: Vec<Funding>,
    #[serde(default)]
    pub storage: Vec<StorageInit>,
}

/// Workflow configuration file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuardConfig {
    /// Word width to assemble with when the source does not say.
    pub width: Option<u32>,
    pub gas: GasSchedule,
    pub lambda: u32,
    pub seed: u64,
    /// Overrides the bundle's protected set when non-empty.
    pub boundary: Vec<String>,
    #[serde(deserialize_with = "word_or_text::one")]
    pub admin: Address,
    pub monitor: bool,
    pub audit: bool,
    /// Storage slots the programs are known to use; protect refuses to run
    /// when one falls into the reserved range.
    #[serde(deserialize_with = "word_or_text::many")]
    pub reserved_tags: Vec<Word>,
}

/// Accepts `173`, `"173"` or `"0xad"`.
mod word_or_text {
    use serde::{Deserialize, Deserializer};

    use crate::vm::tx::parse_word;
    use crate::word::Word;

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(Word),
        Text(String),
    }

    fn resolve<E: serde::de::Error>(r: Raw) -> Result<Word, E> {
        match r {
            Raw::Num(n) => Ok(n),
            Raw::Text(s) => parse_word(&s).map_err(E::custom),
        }
    }

    pub fn one<'de, D: Deserializer<'de>>(d: D) -> Result<Word, D::Error> {
        resolve(Raw::deserialize(d)?)
    }

    pub fn many<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Word>, D::Error> {
        Vec::<Raw>::deserialize(d)?.into_iter().map(resolve).collect()
    }
}

impl Default for GuardConfig {
    fn default() -> Self {
        GuardConfig {
            width: None,
            gas: GasSchedule::default(),
            lambda: DEFAULT_LAMBDA,
            seed: DEFAULT_SEED,
            boundary: Vec::new(),
            admin: GuardOptions::default().admin,
            monitor: false,
            audit: false,
            reserved_tags: Vec::new(),
        }
    }
}

impl GuardConfig {
    pub fn options(&self) -> GuardOptions {
        GuardOptions { audit: self.audit, monitor: self.monitor, admin: self.admin }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

impl Bundle {
    pub fn new(programs: Vec<ContractProgram>, boundary: &[&str]) -> Self {
        Bundle { programs, boundary: boundary.iter().map(|s| s.to_string()).collect(), funding: Vec::new(), storage: Vec::new() }
    }

    /// Applies the configured protected set. Entries are contract names or
    /// deployment addresses.
    pub fn with_boundary(mut self, config: &GuardConfig) -> Result<Self> {
        if config.boundary.is_empty() {
            return Ok(self);
        }
        let mut names = BTreeSet::new();
        for b in &config.boundary {
            let name = match parse_word(b) {
                Ok(a) => a
                    .checked_sub(FIRST_CONTRACT_ADDRESS)
                    .and_then(|i| self.programs.get(i as usize))
                    .map(|p| p.name.clone())
                    .ok_or_else(|| Error::InvalidProgram(format!("no contract at boundary address {b}")))?,
                Err(_) if self.address(b).is_some() => b.clone(),
                Err(_) => return Err(Error::InvalidProgram(format!("unknown boundary contract `{b}`"))),
            };
            names.insert(name);
        }
        self.boundary = names;
        Ok(self)
    }

    pub fn index(&self) -> Result<ProgramIndex> {
        index_programs(&self.programs, &self.boundary)
    }

    /// Address the `i`-th program deploys to.
    pub fn address(&self, name: &str) -> Option<Address> {
        self.programs.iter().position(|p| p.name == name).map(|i| FIRST_CONTRACT_ADDRESS + i as Address)
    }

    fn resolve(&self, account: &str) -> Result<Address> {
        parse_word(account)
            .or_else(|_| self.address(account).ok_or_else(|| Error::InvalidTransaction(format!("unknown account `{account}`"))))
    }

    /// Deploys `programs` (same names and order as the bundle) and applies
    /// the genesis state. Returns the world and deployment gas per contract.
    pub fn deploy_programs(&self, programs: &[ContractProgram], schedule: &GasSchedule) -> Result<(WorldState, BTreeMap<String, u64>)> {
        let mut world = WorldState::new();
        let mut gas = BTreeMap::new();
        for p in programs {
            let (_, g) = world.deploy(p.clone(), schedule.code_deposit_per_byte)?;
            gas.insert(p.name.clone(), g);
        }
        for f in &self.funding {
            world.fund(self.resolve(&f.account)?, f.amount);
        }
        for s in &self.storage {
            let a = self.resolve(&s.contract)?;
            world.set_storage(a, s.slot, s.value);
        }
        world.commit();
        Ok((world, gas))
    }

    pub fn deploy(&self, schedule: &GasSchedule) -> Result<WorldState> {
        Ok(self.deploy_programs(&self.programs, schedule)?.0)
    }
}

fn delegates_to(bundle: &Bundle, caller: &str, callee: &str) -> bool {
    caller != callee
        && bundle.programs.iter().filter(|p| p.name == caller).flat_map(|p| &p.functions).flat_map(|f| &f.body).any(|i| {
            matches!(i, crate::vm::Instruction::DelegateCall(Some(t)) if t == callee)
        })
}

/// Profiles `txs` on the uninstrumented bundle and collects the safe sets.
pub fn train(bundle: &Bundle, txs: &[Transaction], config: &GuardConfig) -> Result<PathSetSnapshot> {
    let index = bundle.index()?;
    let mut world = bundle.deploy(&config.gas)?;
    let mut oracle = TraceOracle::new(&index, &bundle.boundary, &world);
    let mut observed: BTreeMap<(String, crate::vm::FunctionId), BTreeSet<Word>> = BTreeMap::new();
    for ((c, f), _) in &index.functions {
        observed.insert((c.clone(), *f), BTreeSet::new());
    }
    for (i, tx) in txs.iter().enumerate() {
        let r = execute_transaction(&mut world, tx, &config.gas)?;
        if r.status != TxStatus::Accepted {
            return Err(Error::TrainingTxFailed { index: i, status: format!("{:?}", r.status) });
        }
        for c in oracle.run(&r.trace)? {
            observed.entry((c.contract, c.function)).or_default().insert(c.index);
        }
    }
    PathSetSnapshot::build(&bundle.programs, &index, &observed, config.lambda, config.seed)
}

/// A bundle whose protected programs are instrumented.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Guarded {
    pub bundle: Bundle,
    pub snapshot: PathSetSnapshot,
    pub instrumented: BTreeMap<String, InstrumentedProgram>,
    pub options: GuardOptions,
}

pub fn protect(bundle: &Bundle, snapshot: &PathSetSnapshot, config: &GuardConfig) -> Result<Guarded> {
    let index = bundle.index()?;
    snapshot.verify(&bundle.programs, &index)?;
    let options = config.options();
    let mut instrumented = BTreeMap::new();
    for p in bundle.programs.iter().filter(|p| bundle.boundary.contains(&p.name)) {
        let ip = instrument(p, &index, snapshot, &bundle.boundary, &options)?;
        for &tag in &config.reserved_tags {
            if ip.plan.reserved.is_reserved_slot(tag) {
                return Err(Error::ReservedConflict(tag));
            }
        }
        instrumented.insert(p.name.clone(), ip);
    }
    Ok(Guarded { bundle: bundle.clone(), snapshot: snapshot.clone(), instrumented, options })
}

impl Guarded {
    /// Programs in deployment order, instrumented where protected.
    pub fn programs(&self) -> Vec<ContractProgram> {
        self.bundle
            .programs
            .iter()
            .map(|p| self.instrumented.get(&p.name).map_or_else(|| p.clone(), |ip| ip.program.clone()))
            .collect()
    }

    pub fn index(&self) -> Result<ProgramIndex> {
        self.bundle.index()
    }

    /// Deploys the instrumented bundle and approves every spilled path.
    /// Returns the world and the deployment gas per contract (code deposit
    /// plus approval transactions).
    pub fn deploy(&self, schedule: &GasSchedule) -> Result<(WorldState, BTreeMap<String, u64>)> {
        let (mut world, mut gas) = self.bundle.deploy_programs(&self.programs(), schedule)?;
        for (name, ip) in &self.instrumented {
            let keys: Vec<(crate::vm::FunctionId, Word)> =
                ip.plan.spilled.iter().flat_map(|(f, ks)| ks.iter().map(move |k| (*f, *k))).collect();
            if keys.is_empty() {
                continue;
            }
            let r = detect::approve_tx(self, &mut world, name, &keys, self.options.admin, schedule)?;
            *gas.entry(name.clone()).or_default() += r.gas_used;
            // contracts that run this code through DELEGATECALL probe their own storage
            for (other, _) in self.instrumented.iter().filter(|(o, _)| delegates_to(&self.bundle, o, name)) {
                let at = self.bundle.address(other).expect("protected contract is in the bundle");
                let r = detect::approve_at(self, &mut world, name, at, &keys, self.options.admin, schedule)?;
                *gas.entry(other.clone()).or_default() += r.gas_used;
            }
        }
        Ok((world, gas))
    }
}
