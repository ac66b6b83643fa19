//! Bundled example contracts and the vulnerability scenario corpus.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::guard::{Bundle, Funding, StorageInit};
use crate::vm::world::FIRST_CONTRACT_ADDRESS;
use crate::vm::{assemble, execute_transaction, Address, ContractProgram, GasSchedule, Transaction, TxStatus, WorldState};
use crate::word::Word;

pub const LOOP: &str = include_str!("../fixtures/loop.gasm");
pub const CONTEXTS: &str = include_str!("../fixtures/contexts.gasm");
pub const BANK: &str = include_str!("../fixtures/bank.gasm");
pub const BANK_ATTACKER: &str = include_str!("../fixtures/bank_attacker.gasm");
pub const WALLET_LIBRARY: &str = include_str!("../fixtures/wallet_library.gasm");
pub const WALLET: &str = include_str!("../fixtures/wallet.gasm");
pub const BEC_TOKEN: &str = include_str!("../fixtures/bec_token.gasm");
pub const KING: &str = include_str!("../fixtures/king.gasm");
pub const DEPTH_ATTACKER: &str = include_str!("../fixtures/depth_attacker.gasm");
pub const ORIGIN_WALLET: &str = include_str!("../fixtures/origin_wallet.gasm");
pub const PHISHER: &str = include_str!("../fixtures/phisher.gasm");
pub const VAULT: &str = include_str!("../fixtures/vault.gasm");
pub const AIRDROP: &str = include_str!("../fixtures/airdrop.gasm");

pub const ALL_SOURCES: [&str; 13] = [
    LOOP,
    CONTEXTS,
    BANK,
    BANK_ATTACKER,
    WALLET_LIBRARY,
    WALLET,
    BEC_TOKEN,
    KING,
    DEPTH_ATTACKER,
    ORIGIN_WALLET,
    PHISHER,
    VAULT,
    AIRDROP,
];

/// Assembles a bundled source; panics on the (impossible) invalid fixture.
pub fn program(source: &str) -> ContractProgram {
    assemble(source).expect("bundled fixture assembles")
}

/// Accounts that send normal traffic.
pub const USERS: [Address; 6] = [0xa1, 0xa2, 0xa3, 0xa4, 0xa5, 0xa6];
/// The attacker's externally owned account.
pub const ATTACKER: Address = 0xe1;

const GENESIS_FUNDS: Word = 1_000_000_000;
const CONTRACT_FUNDS: Word = 1_000_000;
const TOKEN_SUPPLY: Word = 1000;
/// Claimants of the airdrop; distinct per sequence.
const CLAIMANT_BASE: Address = 0x2000;
const CLAIMANTS: u64 = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Vulnerability {
    Reentrancy,
    Delegatecall,
    Overflow,
    UncheckedSend,
    TxOrigin,
    DefaultVisibility,
    LogicError,
}

impl Vulnerability {
    pub const ALL: [Vulnerability; 7] = [
        Vulnerability::Reentrancy,
        Vulnerability::Delegatecall,
        Vulnerability::Overflow,
        Vulnerability::UncheckedSend,
        Vulnerability::TxOrigin,
        Vulnerability::DefaultVisibility,
        Vulnerability::LogicError,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Vulnerability::Reentrancy => "reentrancy",
            Vulnerability::Delegatecall => "delegatecall",
            Vulnerability::Overflow => "overflow",
            Vulnerability::UncheckedSend => "unchecked-send",
            Vulnerability::TxOrigin => "tx-origin",
            Vulnerability::DefaultVisibility => "default-visibility",
            Vulnerability::LogicError => "logic-error",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    /// The logic-error attack follows a trained path and is not expected to
    /// be caught.
    pub fn expect_detect(self) -> bool {
        self != Vulnerability::LogicError
    }

    /// Normal transaction shapes; each takes its own set of paths.
    pub fn shapes(self) -> &'static [&'static str] {
        match self {
            Vulnerability::Reentrancy => &["deposit", "withdraw", "withdraw-empty", "balance"],
            Vulnerability::Delegatecall => &["deposit", "withdraw", "owner", "init"],
            Vulnerability::Overflow => &["transfer", "batch", "balance"],
            Vulnerability::UncheckedSend => &["claim", "prize"],
            Vulnerability::TxOrigin => &["deposit", "pay"],
            Vulnerability::DefaultVisibility => &["deposit", "withdraw", "change-owner"],
            Vulnerability::LogicError => &["claim", "tokens"],
        }
    }

    pub fn bundle(self) -> Bundle {
        let users = || USERS.iter().chain([&ATTACKER]).map(|a| Funding { account: format!("{a:#x}"), amount: GENESIS_FUNDS });
        let store = |contract: &str, slot: Word, value: Word| StorageInit { contract: contract.into(), slot, value };
        let mut b = match self {
            Vulnerability::Reentrancy => {
                // an idle depositor keeps funds in the bank
                let mut b = Bundle::new(vec![program(BANK), program(BANK_ATTACKER)], &["Bank"]);
                b.funding.push(Funding { account: "Bank".into(), amount: CONTRACT_FUNDS });
                b.storage.push(store("Bank", 0xb0, CONTRACT_FUNDS));
                b
            }
            Vulnerability::Delegatecall => {
                let mut b = Bundle::new(vec![program(WALLET_LIBRARY), program(WALLET)], &["WalletLibrary", "Wallet"]);
                b.funding.push(Funding { account: "Wallet".into(), amount: CONTRACT_FUNDS });
                b.storage.push(store("Wallet", 0, USERS[0]));
                b
            }
            Vulnerability::Overflow => {
                let mut b = Bundle::new(vec![program(BEC_TOKEN)], &["BecToken"]);
                b.storage.extend(USERS.iter().map(|&u| store("BecToken", u, TOKEN_SUPPLY)));
                return b;
            }
            Vulnerability::UncheckedSend => {
                let mut b = Bundle::new(vec![program(KING), program(DEPTH_ATTACKER)], &["KingOfEther"]);
                b.funding.push(Funding { account: "KingOfEther".into(), amount: 1 });
                b.storage.push(store("KingOfEther", 0, 0xa0));
                b.storage.push(store("KingOfEther", 1, 1));
                b
            }
            Vulnerability::TxOrigin => {
                let mut b = Bundle::new(vec![program(ORIGIN_WALLET), program(PHISHER)], &["OriginWallet"]);
                b.funding.push(Funding { account: "OriginWallet".into(), amount: CONTRACT_FUNDS });
                b.storage.push(store("OriginWallet", 0, USERS[0]));
                b
            }
            Vulnerability::DefaultVisibility => {
                let mut b = Bundle::new(vec![program(VAULT)], &["Vault"]);
                b.funding.push(Funding { account: "Vault".into(), amount: CONTRACT_FUNDS });
                b.storage.push(store("Vault", 0, USERS[0]));
                b
            }
            Vulnerability::LogicError => return Bundle::new(vec![program(AIRDROP)], &["Airdrop"]),
        };
        b.funding.extend(users());
        b
    }
}

/// A fixture with a normal training stream and a test stream with attacks
/// at random positions.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub kind: Vulnerability,
    pub bundle: Bundle,
    pub training: Vec<Transaction>,
    /// Shape of each training transaction.
    pub training_shapes: Vec<&'static str>,
    pub test: Vec<Transaction>,
    /// Positions of attack transactions in `test`.
    pub attacks: Vec<usize>,
}

impl Scenario {
    pub fn expect_detect(&self) -> bool {
        self.kind.expect_detect()
    }
}

/// Builds a scenario whose streams both hold `len` transactions.
pub fn scenario(kind: Vulnerability, seed: u64, len: usize) -> Scenario {
    let bundle = kind.bundle();
    let (training, training_shapes) = normal_stream(kind, &bundle, seed, len);
    let (test, attacks) = attack_stream(kind, &bundle, seed ^ 0x5eed_0f_7e57, len);
    Scenario { kind, bundle, training, training_shapes, test, attacks }
}

/// Normal transactions only. Every shape appears once before the random part.
pub fn normal_stream(kind: Vulnerability, bundle: &Bundle, seed: u64, len: usize) -> (Vec<Transaction>, Vec<&'static str>) {
    let mut g = Generator::new(kind, bundle, seed);
    let mut txs = Vec::with_capacity(len);
    let mut shapes = Vec::with_capacity(len);
    while txs.len() < len {
        let shape = g.next_shape(txs.len());
        if let Some(tx) = g.normal(shape) {
            txs.push(tx);
            shapes.push(shape);
        }
    }
    (txs, shapes)
}

/// A test stream with between 1 and `len/20` attacks after the warm-up.
pub fn attack_stream(kind: Vulnerability, bundle: &Bundle, seed: u64, len: usize) -> (Vec<Transaction>, Vec<usize>) {
    let mut g = Generator::new(kind, bundle, seed);
    let warmup = kind.shapes().len();
    assert!(len > warmup, "a {} stream needs more than {warmup} transactions", kind.name());
    let count = g.rng.gen_range(1..=(len / 20).max(1));
    let mut slots: Vec<usize> = (warmup..len).collect();
    slots.shuffle(&mut g.rng);
    let attacks: BTreeSet<usize> = slots.into_iter().take(count).collect();
    let mut txs = Vec::with_capacity(len);
    while txs.len() < len {
        if attacks.contains(&txs.len()) {
            txs.push(g.attack());
            continue;
        }
        let shape = g.next_shape(txs.len());
        if let Some(tx) = g.normal(shape) {
            txs.push(tx);
        }
    }
    (txs, attacks.into_iter().collect())
}

struct Generator {
    kind: Vulnerability,
    world: WorldState,
    schedule: GasSchedule,
    rng: ChaCha8Rng,
    base: Address,
    claimed: Vec<Address>,
    next_claimant: u64,
}

impl Generator {
    fn new(kind: Vulnerability, bundle: &Bundle, seed: u64) -> Self {
        let schedule = GasSchedule::default();
        let world = bundle.deploy(&schedule).expect("fixture bundle deploys");
        Generator {
            kind,
            world,
            schedule,
            rng: ChaCha8Rng::seed_from_u64(seed),
            base: FIRST_CONTRACT_ADDRESS,
            claimed: Vec::new(),
            next_claimant: 0,
        }
    }

    fn next_shape(&mut self, i: usize) -> &'static str {
        let shapes = self.kind.shapes();
        if i < shapes.len() {
            shapes[i]
        } else {
            shapes[self.rng.gen_range(0..shapes.len())]
        }
    }

    fn call(&self, origin: Address, to: Address, function: &str, data: Vec<Word>) -> Transaction {
        Transaction::call(&self.world, origin, to, function, data).expect("fixture function exists")
    }

    fn user(&mut self) -> Address {
        USERS[self.rng.gen_range(0..USERS.len())]
    }

    /// Runs `tx` on a copy of the world and keeps the result when accepted.
    fn apply(&mut self, tx: Transaction) -> Option<Transaction> {
        let mut w = self.world.clone();
        let r = execute_transaction(&mut w, &tx, &self.schedule).expect("fixture transaction is well formed");
        (r.status == TxStatus::Accepted).then(|| {
            self.world = w;
            tx
        })
    }

    fn normal(&mut self, shape: &str) -> Option<Transaction> {
        use Vulnerability::*;
        let c = self.base;
        let tx = match (self.kind, shape) {
            (Reentrancy, "deposit") => {
                let v = self.rng.gen_range(1..=1000);
                let u = self.user();
                self.call(u, c, "deposit", vec![]).with_value(v)
            }
            (Reentrancy, "withdraw") => {
                let funded: Vec<Address> = USERS.iter().copied().filter(|&u| self.world.storage(c, u) > 0).collect();
                let u = *funded.choose(&mut self.rng)?;
                self.call(u, c, "withdraw", vec![])
            }
            (Reentrancy, "withdraw-empty") => {
                let empty: Vec<Address> = USERS.iter().copied().filter(|&u| self.world.storage(c, u) == 0).collect();
                let u = *empty.choose(&mut self.rng)?;
                self.call(u, c, "withdraw", vec![])
            }
            (Reentrancy | Overflow, "balance") => {
                let (u, a) = (self.user(), self.user());
                self.call(u, c, "balanceOf", vec![a])
            }
            (Delegatecall, "deposit") | (TxOrigin, "deposit") | (DefaultVisibility, "deposit") => {
                let target = if self.kind == Delegatecall { c + 1 } else { c };
                let v = self.rng.gen_range(1..=1000);
                let u = self.user();
                self.call(u, target, "deposit", vec![]).with_value(v)
            }
            (Delegatecall, "withdraw") => {
                let v = self.rng.gen_range(1..=500);
                self.call(USERS[0], c + 1, "withdraw", vec![v])
            }
            (Delegatecall, "owner") => {
                let u = self.user();
                self.call(u, c + 1, "fallback", vec![0x21, 0])
            }
            (Delegatecall, "init") => self.call(USERS[0], c + 1, "initWallet", vec![]),
            (Overflow, "transfer") => {
                let (u, to) = (self.user(), self.user());
                let bal = self.world.storage(c, u);
                let v = self.rng.gen_range(0..=bal.min(50));
                self.call(u, c, "transfer", vec![to, v])
            }
            (Overflow, "batch") => {
                let (u, r1, r2) = (self.user(), self.user(), self.user());
                let bal = self.world.storage(c, u);
                let v = self.rng.gen_range(0..=(bal / 2).min(20));
                self.call(u, c, "batchTransfer", vec![v, r1, r2])
            }
            (UncheckedSend, "claim") => {
                let prize = self.world.storage(c, 1);
                let v = prize + self.rng.gen_range(1..=10);
                let u = self.user();
                self.call(u, c, "claimThrone", vec![]).with_value(v)
            }
            (UncheckedSend, "prize") => {
                let u = self.user();
                self.call(u, c, "prize", vec![])
            }
            (TxOrigin, "pay") => {
                let to = self.user();
                let v = self.rng.gen_range(1..=500);
                self.call(USERS[0], c, "pay", vec![to, v])
            }
            (DefaultVisibility, "withdraw") => {
                let owner = self.world.storage(c, 0);
                let v = self.rng.gen_range(1..=500);
                self.call(owner, c, "withdraw", vec![v])
            }
            (DefaultVisibility, "change-owner") => {
                let owner = self.world.storage(c, 0);
                let next = USERS[self.rng.gen_range(0..2)];
                self.call(owner, c, "changeOwner", vec![next])
            }
            (LogicError, "claim") => {
                if self.next_claimant == CLAIMANTS {
                    return None;
                }
                let u = CLAIMANT_BASE + self.next_claimant;
                self.next_claimant += 1;
                self.claimed.push(u);
                self.call(u, c, "claim", vec![])
            }
            (LogicError, "tokens") => {
                let u = self.user();
                let a = CLAIMANT_BASE + self.rng.gen_range(0..CLAIMANTS);
                self.call(u, c, "tokens", vec![a])
            }
            (k, s) => unreachable!("{} has no shape `{s}`", k.name()),
        };
        self.apply(tx)
    }

    /// An attack transaction that succeeds against the unprotected bundle.
    /// Only undetectable attacks are applied to the generator's world.
    fn attack(&mut self) -> Transaction {
        use Vulnerability::*;
        let c = self.base;
        let tx = match self.kind {
            Reentrancy => {
                let v = (self.world.balance(c) / 2).clamp(1, 1000);
                self.call(ATTACKER, c + 1, "attack", vec![]).with_value(v)
            }
            Delegatecall => self.call(ATTACKER, c + 1, "fallback", vec![0x20, ATTACKER]),
            Overflow => self.call(ATTACKER, c, "batchTransfer", vec![0x8000, ATTACKER, ATTACKER + 1]),
            UncheckedSend => {
                let prize = self.world.storage(c, 1);
                self.call(ATTACKER, c + 1, "deep", vec![63]).with_value(prize + 1)
            }
            TxOrigin => self.call(USERS[0], c, "pay", vec![c + 1, 1]),
            DefaultVisibility => self.call(ATTACKER, c, "setOwner", vec![ATTACKER]),
            LogicError => {
                // a second claim is the last one the bound lets through
                assert!(!self.claimed.is_empty(), "warm-up made a claim");
                let u = self.claimed.swap_remove(self.rng.gen_range(0..self.claimed.len()));
                self.call(u, c, "claim", vec![])
            }
        };
        let mut w = self.world.clone();
        let r = execute_transaction(&mut w, &tx, &self.schedule).expect("fixture transaction is well formed");
        assert_eq!(r.status, TxStatus::Accepted, "{} attack must succeed unprotected", self.kind.name());
        if !self.kind.expect_detect() {
            self.world = w;
        }
        tx
    }
}
