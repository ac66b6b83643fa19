//! Detection runs, alarm diagnostics and the review/approve loop.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::report::{reconcile_gas, GasReconciliation};
use super::{protect, train, Bundle, GuardConfig, Guarded};
use crate::analysis::cfg::VertexKey;
use crate::error::{Error, Result};
use crate::indexing::ccp::id_to_context;
use crate::indexing::epp::index_to_path;
use crate::indexing::{split_index, ProgramIndex};
use crate::vm::{
    execute_with, Address, AlarmRecord, ExecOptions, FunctionId, GasSchedule, Receipt, Transaction,
    TxStatus, WorldState,
};
use crate::word::Word;

const ADMIN_GAS_LIMIT: u64 = 1 << 40;
const MAX_REVIEW_ROUNDS: usize = 64;

/// An alarm with its index split back into context and path.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlarmDetail {
    pub tx_index: usize,
    pub contract: String,
    pub address: Address,
    pub function: FunctionId,
    pub function_name: String,
    pub combined_id: Word,
    /// `None` when the index lies outside the function's index space.
    pub ctx_id: Option<u128>,
    pub epp_id: Option<u128>,
    /// Call sites from the entry, as `contract.function@offset`.
    pub context_chain: Vec<String>,
    /// Blocks along the acyclic path, as instruction offsets.
    pub path_blocks: Vec<usize>,
}

fn contract_at(world: &WorldState, code: Address) -> Option<String> {
    world.code(code).map(|p| p.name.clone())
}

/// Regenerates the context chain and path of an alarm.
pub fn alarm_details(index: &ProgramIndex, world: &WorldState, tx_index: usize, alarm: &AlarmRecord) -> AlarmDetail {
    let contract = if alarm.contract.is_empty() { contract_at(world, alarm.address).unwrap_or_default() } else { alarm.contract.clone() };
    let mut d = AlarmDetail {
        tx_index,
        contract: contract.clone(),
        address: alarm.address,
        function: alarm.function,
        function_name: String::new(),
        combined_id: alarm.index,
        ctx_id: None,
        epp_id: None,
        context_chain: Vec::new(),
        path_blocks: Vec::new(),
    };
    let Some(fi) = index.function(&contract, alarm.function) else { return d };
    d.function_name = fi.name.clone();
    if alarm.index as u128 >= fi.index_space() {
        return d;
    }
    let (ctx, epp) = split_index(alarm.index as u128, fi.num_paths());
    d.ctx_id = Some(ctx);
    d.epp_id = Some(epp);
    let cg = &index.call_graph;
    if let Ok(chain) = id_to_context(&index.ccp, cg, fi.node, ctx) {
        d.context_chain = chain
            .iter()
            .map(|&i| {
                let e = &cg.edges[i];
                match &e.site {
                    Some(s) => {
                        let n = &cg.nodes[e.caller];
                        format!("{}.{}@{}", s.contract, n.name, s.offset)
                    }
                    None => format!("{}.{}", cg.nodes[e.callee].contract, cg.nodes[e.callee].name),
                }
            })
            .collect();
    }
    let cfg = &fi.analyzed.cfg;
    if let Ok(path) = index_to_path(&fi.epp, cfg, epp) {
        d.path_blocks = path
            .iter()
            .filter_map(|&i| match cfg.edges[i].dst {
                VertexKey::Block(o) => Some(o),
                _ => None,
            })
            .collect();
    }
    d
}

/// Instrumented and mirrored uninstrumented worlds, deployed identically.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Deployment {
    pub world: WorldState,
    pub shadow: WorldState,
    pub deploy_gas: BTreeMap<String, u64>,
    pub original_deploy_gas: BTreeMap<String, u64>,
}

impl Guarded {
    pub fn deploy_pair(&self, schedule: &GasSchedule) -> Result<Deployment> {
        let (world, deploy_gas) = self.deploy(schedule)?;
        let (shadow, original_deploy_gas) = self.bundle.deploy_programs(&self.bundle.programs, schedule)?;
        Ok(Deployment { world, shadow, deploy_gas, original_deploy_gas })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TxOutcome {
    pub tx_index: usize,
    pub status: TxStatus,
    pub original_status: TxStatus,
    pub gas_instr: u64,
    pub gas_orig: u64,
    pub return_data: Vec<Word>,
    pub original_return_data: Vec<Word>,
    /// Alarms of a guard-reverted transaction.
    pub alarms: Vec<AlarmDetail>,
    /// Alarms raised inside frames that were reverted while the
    /// transaction as a whole went on.
    pub contained_alarms: Vec<AlarmDetail>,
    /// For guard-reverted transactions: post-state equals pre-state.
    pub rolled_back: Option<bool>,
    /// Protected contracts this transaction entered.
    pub touches_protected: bool,
    /// For accepted transactions: both worlds agree outside reserved storage.
    pub state_matches: Option<bool>,
    pub gas: GasReconciliation,
}

impl TxOutcome {
    pub fn alarmed(&self) -> bool {
        !self.alarms.is_empty() || !self.contained_alarms.is_empty()
    }
}

impl Deployment {
    /// Balances and storage agree, ignoring the guard's reserved slots.
    pub fn visible_state_matches(&self, g: &Guarded) -> bool {
        let view = |w: &WorldState| -> BTreeMap<Address, (Word, BTreeMap<Word, Word>)> {
            w.accounts()
                .map(|(&a, acc)| {
                    let reserved = w.code(a).and_then(|p| g.instrumented.get(&p.name)).map(|ip| &ip.plan.reserved);
                    let storage: BTreeMap<Word, Word> = acc
                        .storage
                        .iter()
                        .filter(|(s, v)| **v != 0 && !reserved.is_some_and(|r| r.is_reserved_slot(**s)))
                        .map(|(s, v)| (*s, *v))
                        .collect();
                    (a, (acc.balance, storage))
                })
                .filter(|(_, (b, s))| *b != 0 || !s.is_empty())
                .collect()
        };
        view(&self.world) == view(&self.shadow)
    }

    /// Runs `tx` on both worlds. The shadow world only advances when the
    /// instrumented run is accepted, keeping the two in step.
    pub fn execute(&mut self, g: &Guarded, index: &ProgramIndex, tx_index: usize, tx: &Transaction, schedule: &GasSchedule) -> Result<(TxOutcome, Receipt)> {
        let pre = self.world.clone();
        let opts = ExecOptions { trace: true, profile: true };
        let r = execute_with(&mut self.world, tx, schedule, opts)?;
        let mut shadow = self.shadow.clone();
        let o = execute_with(&mut shadow, tx, schedule, ExecOptions { trace: false, profile: true })?;
        if r.status == TxStatus::Accepted {
            self.shadow = shadow;
        }
        let protected: BTreeSet<Address> = g.instrumented.keys().filter_map(|n| g.bundle.address(n)).collect();
        let touches_protected = protected.contains(&tx.to)
            || r.trace.iter().any(|e| protected.contains(&e.code));
        let details = |v: &[AlarmRecord]| v.iter().map(|a| alarm_details(index, &self.world, tx_index, a)).collect::<Vec<_>>();
        let out = TxOutcome {
            tx_index,
            status: r.status,
            original_status: o.status,
            gas_instr: r.gas_used,
            gas_orig: o.gas_used,
            return_data: r.return_data.clone(),
            original_return_data: o.return_data.clone(),
            alarms: details(&r.alarms),
            contained_alarms: details(&r.contained_alarms),
            rolled_back: (r.status == TxStatus::GuardReverted).then(|| self.world == pre),
            touches_protected,
            state_matches: (r.status == TxStatus::Accepted).then(|| self.visible_state_matches(g)),
            gas: reconcile_gas(g, &r, &o),
        };
        Ok((out, r))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DetectionRun {
    pub deployment: Deployment,
    pub outcomes: Vec<TxOutcome>,
}

impl DetectionRun {
    /// Every alarm in transaction order.
    pub fn alarm_log(&self) -> Vec<AlarmDetail> {
        self.outcomes.iter().flat_map(|o| o.alarms.iter().chain(&o.contained_alarms).cloned()).collect()
    }
}

/// Deploys the guarded bundle and runs `txs` in order.
pub fn run_detection(g: &Guarded, txs: &[Transaction], schedule: &GasSchedule) -> Result<DetectionRun> {
    let index = g.index()?;
    let mut deployment = g.deploy_pair(schedule)?;
    let mut outcomes = Vec::with_capacity(txs.len());
    for (i, tx) in txs.iter().enumerate() {
        outcomes.push(deployment.execute(g, &index, i, tx, schedule)?.0);
    }
    Ok(DetectionRun { deployment, outcomes })
}

/// Sends the administration transaction that marks `keys` of `contract`
/// as approved.
pub fn approve_tx(
    g: &Guarded,
    world: &mut WorldState,
    contract: &str,
    keys: &[(FunctionId, Word)],
    admin: Address,
    schedule: &GasSchedule,
) -> Result<Receipt> {
    let to = g
        .bundle
        .address(contract)
        .ok_or_else(|| Error::InvalidTransaction(format!("unknown contract `{contract}`")))?;
    approve_at(g, world, contract, to, keys, admin, schedule)
}

/// Approves `contract`'s keys in the storage of the protected contract at
/// `storage`, which runs `contract`'s code through DELEGATECALL when the
/// two differ.
pub fn approve_at(
    g: &Guarded,
    world: &mut WorldState,
    contract: &str,
    storage: Address,
    keys: &[(FunctionId, Word)],
    admin: Address,
    schedule: &GasSchedule,
) -> Result<Receipt> {
    let ip = g
        .instrumented
        .get(contract)
        .ok_or_else(|| Error::InvalidTransaction(format!("`{contract}` is not protected")))?;
    let target = contract_at(world, storage).and_then(|n| g.instrumented.get(&n));
    let Some(target) = target else {
        return Err(Error::InvalidTransaction(format!("{storage:#x} is not a protected contract")));
    };
    let to = storage;
    let mapping = &ip.plan.reserved.mapping;
    let calldata = keys.iter().map(|&(f, k)| mapping.slot(f, k)).collect::<Result<Vec<_>>>()?;
    let tx = Transaction {
        origin: admin,
        to,
        selector: Some(target.plan.approve_selector),
        calldata,
        value: 0,
        gas_limit: ADMIN_GAS_LIMIT,
    };
    let r = execute_with(world, &tx, schedule, ExecOptions::default())?;
    if r.status != TxStatus::Accepted {
        return Err(Error::NotAdmin(admin));
    }
    Ok(r)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Approval {
    /// (contract, function, combined index) appended to the mapping.
    pub approved: Vec<(String, FunctionId, Word)>,
    /// Gas of the administration transactions.
    pub gas: u64,
    pub rounds: usize,
    /// Status of the final replay in the fork.
    pub replay: TxStatus,
}

/// Replays `tx` on a fork of `world`, approves every alarmed index and
/// repeats until the replay raises no alarm. Approvals are applied to `world`.
pub fn review_and_approve(g: &Guarded, world: &mut WorldState, tx: &Transaction, approver: Address, schedule: &GasSchedule) -> Result<Approval> {
    if approver != g.options.admin {
        return Err(Error::NotAdmin(approver));
    }
    let mut approved = Vec::new();
    let mut seen = BTreeSet::new();
    let mut gas = 0;
    for round in 0..MAX_REVIEW_ROUNDS {
        let mut fork = world.clone();
        let r = execute_with(&mut fork, tx, schedule, ExecOptions::default())?;
        let mut by_contract: BTreeMap<(String, Address), Vec<(FunctionId, Word)>> = BTreeMap::new();
        for a in r.logged_alarms() {
            let name = contract_at(world, a.address).unwrap_or_default();
            if seen.insert((name.clone(), a.storage, a.function, a.index)) {
                by_contract.entry((name, a.storage)).or_default().push((a.function, a.index));
            }
        }
        if by_contract.is_empty() {
            if round == 0 {
                return Err(Error::AlreadyApproved);
            }
            return Ok(Approval { approved, gas, rounds: round, replay: r.status });
        }
        for ((name, storage), keys) in by_contract {
            gas += approve_at(g, world, &name, storage, &keys, approver, schedule)?.gas_used;
            approved.extend(keys.into_iter().map(|(f, k)| (name.clone(), f, k)));
        }
    }
    Err(Error::InvalidTransaction(format!("still alarming after {MAX_REVIEW_ROUNDS} approval rounds")))
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FalseAlarmReport {
    pub transactions: usize,
    /// Indices of transactions that raised at least one alarm.
    pub alarmed: Vec<usize>,
    pub approved_paths: usize,
    pub approval_gas: u64,
    /// Alarmed transactions that ran clean after approval.
    pub replays_accepted: usize,
}

impl FalseAlarmReport {
    pub fn alarms(&self) -> usize {
        self.alarmed.len()
    }
}

/// Cold start: protect with empty path sets and approve on every alarm.
pub fn false_alarm_simulation(bundle: &Bundle, txs: &[Transaction], config: &GuardConfig) -> Result<FalseAlarmReport> {
    let snapshot = train(bundle, &[], config)?;
    let g = protect(bundle, &snapshot, config)?;
    let (mut world, _) = g.deploy(&config.gas)?;
    let mut rep = FalseAlarmReport { transactions: txs.len(), ..Default::default() };
    for (i, tx) in txs.iter().enumerate() {
        let mut fork = world.clone();
        let r = execute_with(&mut fork, tx, &config.gas, ExecOptions::default())?;
        if r.logged_alarms().is_empty() {
            world = fork;
            continue;
        }
        rep.alarmed.push(i);
        let a = review_and_approve(&g, &mut world, tx, g.options.admin, &config.gas)?;
        rep.approved_paths += a.approved.len();
        rep.approval_gas += a.gas;
        let r = execute_with(&mut world, tx, &config.gas, ExecOptions::default())?;
        if r.logged_alarms().is_empty() && r.status != TxStatus::GuardReverted {
            rep.replays_accepted += 1;
        }
    }
    Ok(rep)
}
