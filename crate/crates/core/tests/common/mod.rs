#![allow(dead_code)]

use pathguard::vm::{ContractProgram, FunctionDef, Instruction, Visibility};
use pathguard::Width;
use proptest::prelude::*;

/// How a random block ends.
#[derive(Clone, Debug)]
pub enum Tail {
    Fall,
    Jump(usize),
    Branch(usize),
    Stop,
    Add,
    Call,
}

/// A function of `tails.len()` blocks, each starting with a JUMPDEST; block
/// targets are taken modulo the block count.
pub fn function_from_tails(tails: &[Tail]) -> FunctionDef {
    let n = tails.len();
    // every block is JUMPDEST, PUSH, <tail...>
    let mut starts = Vec::new();
    let mut off = 0;
    for t in tails {
        starts.push(off);
        off += 2 + match t {
            Tail::Fall | Tail::Stop | Tail::Jump(_) | Tail::Branch(_) => 1,
            Tail::Add => 3,
            Tail::Call => 6,
        };
    }
    let mut body = Vec::new();
    for (i, t) in tails.iter().enumerate() {
        let last = i + 1 == n;
        body.push(Instruction::JumpDest);
        body.push(Instruction::Push(1));
        match t {
            Tail::Jump(k) => body.push(Instruction::Jump(starts[k % n])),
            Tail::Branch(k) if !last => body.push(Instruction::JumpI(starts[k % n])),
            Tail::Add if !last => body.extend([Instruction::Push(1), Instruction::Add, Instruction::Pop]),
            Tail::Call if !last => body.extend([
                Instruction::Push(0),
                Instruction::Push(0),
                Instruction::Push(0),
                Instruction::Push(0x1000),
                Instruction::Call(None),
                Instruction::Pop,
            ]),
            Tail::Fall if !last => body.push(Instruction::Pop),
            _ => body.push(Instruction::Stop),
        }
    }
    // keep offsets consistent when the last tail was forced to STOP
    let mut f = FunctionDef { id: 0, name: "f".into(), visibility: Visibility::External, selector: Some(1), body };
    fix_last(&mut f, tails, &starts);
    f
}

fn fix_last(f: &mut FunctionDef, tails: &[Tail], starts: &[usize]) {
    let n = tails.len();
    let last_start = starts[n - 1];
    f.body.truncate(last_start + 2);
    match &tails[n - 1] {
        Tail::Jump(k) => f.body.push(Instruction::Jump(starts[k % n])),
        _ => f.body.push(Instruction::Stop),
    }
}

pub fn arb_tail(max: usize) -> impl Strategy<Value = Tail> {
    prop_oneof![
        2 => Just(Tail::Fall),
        2 => (0..max).prop_map(Tail::Jump),
        4 => (0..max).prop_map(Tail::Branch),
        1 => Just(Tail::Stop),
        1 => Just(Tail::Add),
        1 => Just(Tail::Call),
    ]
}

pub fn arb_function(max_blocks: usize) -> impl Strategy<Value = FunctionDef> {
    prop::collection::vec(arb_tail(max_blocks), 1..=max_blocks).prop_map(|t| function_from_tails(&t))
}

pub fn single(f: FunctionDef) -> ContractProgram {
    ContractProgram { name: "R".into(), width: Width::W64, functions: vec![f], fallback: None, data: vec![] }
}

use std::collections::{BTreeMap, BTreeSet};

use pathguard::guard::{Bundle, PathCheck, TraceOracle};
use pathguard::vm::{execute_transaction, GasSchedule, Transaction, TxStatus};

/// Oracle checks of every transaction, run on the uninstrumented bundle.
pub fn oracle_checks(bundle: &Bundle, txs: &[Transaction]) -> Vec<(TxStatus, Vec<PathCheck>)> {
    let schedule = GasSchedule::default();
    let index = bundle.index().unwrap();
    let mut world = bundle.deploy(&schedule).unwrap();
    let mut oracle = TraceOracle::new(&index, &bundle.boundary, &world);
    txs.iter()
        .map(|tx| {
            let r = execute_transaction(&mut world, tx, &schedule).unwrap();
            (r.status, oracle.run(&r.trace).unwrap())
        })
        .collect()
}

/// Transactions that take a path none of their predecessors took.
pub fn new_path_transactions(bundle: &Bundle, txs: &[Transaction]) -> Vec<usize> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (i, (_, checks)) in oracle_checks(bundle, txs).into_iter().enumerate() {
        let mut fresh = false;
        for c in checks {
            fresh |= seen.insert((c.contract, c.function, c.index));
        }
        if fresh {
            out.push(i);
        }
    }
    out
}

use pathguard::indexing::index_programs;
use pathguard::instrument::{instrument, GuardOptions, InstrumentedProgram};
use pathguard::pathset::{build_mpht, PathSetSnapshot, Strategy as SetStrategy, DEFAULT_LAMBDA, DEFAULT_SEED};
use pathguard::vm::{assemble, execute_with, ExecOptions, Instruction as I, WorldState};
use pathguard::Word;
use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;

/// One external function made of `k` independent two-way branches, so its
/// index space is exactly `2^k`.
pub fn wide(k: usize) -> ContractProgram {
    let mut s = String::from("contract Wide {\n fn f external selector=0x1 {\n");
    for i in 0..k {
        s += &format!("  PUSH {i} CALLDATALOAD JUMPI t{i}\n  PUSH 1 POP JUMP j{i}\n t{i}: JUMPDEST\n  PUSH 2 POP\n j{i}: JUMPDEST\n");
    }
    s += "  STOP\n }\n}\n";
    assemble(&s).unwrap()
}

/// Guarded `Wide` with a safe set of `keys` stored as `strategy`.
pub fn guarded(k: usize, keys: &BTreeSet<Word>, strategy: SetStrategy) -> (ContractProgram, InstrumentedProgram) {
    let p = wide(k);
    let boundary = BTreeSet::from(["Wide".to_string()]);
    let index = index_programs(std::slice::from_ref(&p), &boundary).unwrap();
    assert_eq!(index.function("Wide", 0).unwrap().index_space(), 1u128 << k);
    let observed = BTreeMap::from([(("Wide".to_string(), 0), keys.clone())]);
    let mut snap = PathSetSnapshot::build(std::slice::from_ref(&p), &index, &observed, DEFAULT_LAMBDA, DEFAULT_SEED).unwrap();
    let f = snap.function_mut("Wide", 0).unwrap();
    f.strategy = strategy;
    f.mpht = match strategy {
        SetStrategy::Mpht => Some(build_mpht(&f.keys(), DEFAULT_LAMBDA, DEFAULT_SEED, Width::W64).unwrap()),
        _ => None,
    };
    let ip = instrument(&p, &index, &snap, &boundary, &GuardOptions::default()).unwrap();
    (p, ip)
}

/// Deploys the instrumented program plus an entry that runs the check
/// routine of `f` on `calldata[0]` and returns the anomaly flag.
pub struct Harness {
    pub world: WorldState,
    pub schedule: GasSchedule,
    check: u16,
}

pub const PROBE: u32 = 0x7e57;

impl Harness {
    pub fn new(ip: &InstrumentedProgram) -> Self {
        let mut p = ip.program.clone();
        let check = p.function_by_name("__chk_f").unwrap().id;
        let flag = ip.plan.reserved.flag_mem;
        p.functions.push(FunctionDef {
            id: p.functions.len() as u16,
            name: "probe".into(),
            visibility: Visibility::External,
            selector: Some(PROBE),
            body: vec![I::Push(0), I::CallDataLoad, I::ICall(check), I::Push(flag), I::MLoad, I::Push(1), I::Return],
        });
        let mut world = WorldState::new();
        world.deploy(p, 200).unwrap();
        Harness { world, schedule: GasSchedule::default(), check }
    }

    pub fn approve(&mut self, ip: &InstrumentedProgram, keys: &[Word]) {
        for &k in keys {
            ip.plan.reserved.mapping.append(&mut self.world, 0x1000, 0, k, &self.schedule).unwrap();
        }
    }

    /// (accepted, gas of ICALL through IRET)
    pub fn probe(&mut self, key: Word) -> (bool, u64) {
        let tx = Transaction { origin: 0xa1, to: 0x1000, selector: Some(PROBE), calldata: vec![key], value: 0, gas_limit: 1 << 32 };
        let r = execute_with(&mut self.world, &tx, &self.schedule, ExecOptions { trace: false, profile: true }).unwrap();
        let gas: u64 = r.gas_profile.iter().filter(|e| e.function == self.check).map(|e| e.gas).sum();
        (r.return_data == vec![0], gas + self.schedule.base_op)
    }
}

pub fn random_keys(rng: &mut ChaCha8Rng, space: usize, n: usize) -> BTreeSet<Word> {
    sample(rng, space, n).into_iter().map(|k| k as Word).collect()
}

pub fn measured_mean(ip: &InstrumentedProgram, keys: &BTreeSet<Word>) -> (f64, BTreeSet<u64>) {
    let mut h = Harness::new(ip);
    let mut total = 0;
    let mut distinct = BTreeSet::new();
    for &k in keys {
        let (ok, gas) = h.probe(k);
        assert!(ok);
        total += gas;
        distinct.insert(gas);
    }
    (total as f64 / keys.len() as f64, distinct)
}

