use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::program::{ContractProgram, MAX_CODE_SIZE};
use super::Address;
use crate::error::{Error, Result};
use crate::word::Word;

/// First address handed out by `deploy`.
pub const FIRST_CONTRACT_ADDRESS: Address = 0x1000;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Account {
    pub balance: Word,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub storage: BTreeMap<Word, Word>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub code: Option<Arc<ContractProgram>>,
}

#[derive(Clone, Debug)]
enum JournalEntry {
    Storage { addr: Address, slot: Word, prev: Option<Word> },
    Balance { addr: Address, prev: Word },
    Created { addr: Address, prev: Option<Account> },
}

/// Snapshot token: the journal length at the time of the snapshot.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Snapshot(usize);

/// Accounts, storage and code. Every mutation is journaled so frames can be
/// rolled back; `commit` drops the journal between transactions.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WorldState {
    accounts: BTreeMap<Address, Account>,
    next_address: Address,
    #[serde(skip)]
    journal: Vec<JournalEntry>,
}

impl Default for WorldState {
    fn default() -> Self {
        WorldState { accounts: BTreeMap::new(), next_address: FIRST_CONTRACT_ADDRESS, journal: Vec::new() }
    }
}

impl PartialEq for WorldState {
    fn eq(&self, other: &Self) -> bool {
        // absent accounts and zero-valued default accounts are equivalent
        let norm = |w: &WorldState| -> BTreeMap<Address, Account> {
            w.accounts
                .iter()
                .filter(|(_, a)| **a != Account::default())
                .map(|(k, a)| {
                    let mut a = a.clone();
                    a.storage.retain(|_, v| *v != 0);
                    (*k, a)
                })
                .collect()
        };
        self.next_address == other.next_address && norm(self) == norm(other)
    }
}

impl WorldState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn account(&self, addr: Address) -> Option<&Account> {
        self.accounts.get(&addr)
    }

    pub fn accounts(&self) -> impl Iterator<Item = (&Address, &Account)> {
        self.accounts.iter()
    }

    pub fn code(&self, addr: Address) -> Option<&Arc<ContractProgram>> {
        self.accounts.get(&addr).and_then(|a| a.code.as_ref())
    }

    /// Address of the first contract whose program has this name.
    pub fn address_of(&self, name: &str) -> Option<Address> {
        self.accounts
            .iter()
            .find(|(_, a)| a.code.as_ref().is_some_and(|c| c.name == name))
            .map(|(k, _)| *k)
    }

    pub fn balance(&self, addr: Address) -> Word {
        self.accounts.get(&addr).map_or(0, |a| a.balance)
    }

    pub fn storage(&self, addr: Address, slot: Word) -> Word {
        self.accounts
            .get(&addr)
            .and_then(|a| a.storage.get(&slot).copied())
            .unwrap_or(0)
    }

    pub fn set_storage(&mut self, addr: Address, slot: Word, value: Word) {
        let acct = self.accounts.entry(addr).or_default();
        let prev = if value == 0 { acct.storage.remove(&slot) } else { acct.storage.insert(slot, value) };
        self.journal.push(JournalEntry::Storage { addr, slot, prev });
    }

    pub fn set_balance(&mut self, addr: Address, value: Word) {
        let acct = self.accounts.entry(addr).or_default();
        let prev = std::mem::replace(&mut acct.balance, value);
        self.journal.push(JournalEntry::Balance { addr, prev });
    }

    /// Moves `amount` between accounts; false (and no change) on insufficient balance.
    pub fn transfer(&mut self, from: Address, to: Address, amount: Word) -> bool {
        if amount == 0 || from == to {
            return self.balance(from) >= amount;
        }
        let fb = self.balance(from);
        if fb < amount {
            return false;
        }
        let tb = self.balance(to);
        let Some(nb) = tb.checked_add(amount) else { return false };
        self.set_balance(from, fb - amount);
        self.set_balance(to, nb);
        true
    }

    /// Credits an account outside any transaction (genesis funding).
    pub fn fund(&mut self, addr: Address, amount: Word) {
        let b = self.balance(addr);
        self.set_balance(addr, b.saturating_add(amount));
        self.commit();
    }

    /// Creates a contract account; returns its address and the deployment gas.
    pub fn deploy(&mut self, program: ContractProgram, code_deposit_per_byte: u64) -> Result<(Address, u64)> {
        program.validate()?;
        let size = program.byte_size();
        if size > MAX_CODE_SIZE {
            return Err(Error::SizeLimitExceeded { size, limit: MAX_CODE_SIZE });
        }
        let addr = self.next_address;
        self.next_address += 1;
        let prev = self.accounts.insert(addr, Account { balance: 0, storage: BTreeMap::new(), code: Some(Arc::new(program)) });
        self.journal.push(JournalEntry::Created { addr, prev });
        self.commit();
        Ok((addr, size as u64 * code_deposit_per_byte))
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot(self.journal.len())
    }

    /// Undoes every change made after `token` was taken.
    pub fn rollback(&mut self, token: Snapshot) {
        assert!(token.0 <= self.journal.len(), "stale snapshot token");
        while self.journal.len() > token.0 {
            match self.journal.pop().expect("journal entry") {
                JournalEntry::Storage { addr, slot, prev } => {
                    let acct = self.accounts.entry(addr).or_default();
                    match prev {
                        Some(v) => acct.storage.insert(slot, v),
                        None => acct.storage.remove(&slot),
                    };
                }
                JournalEntry::Balance { addr, prev } => self.accounts.entry(addr).or_default().balance = prev,
                JournalEntry::Created { addr, prev } => {
                    match prev {
                        Some(a) => self.accounts.insert(addr, a),
                        None => self.accounts.remove(&addr),
                    };
                    self.next_address -= 1;
                }
            }
        }
    }

    /// Forgets the journal; earlier snapshot tokens become stale.
    pub fn commit(&mut self) {
        self.journal.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rollback_restores_three_slots() {
        let mut w = WorldState::new();
        w.set_storage(1, 9, 9);
        w.commit();
        let before = w.clone();
        let s = w.snapshot();
        w.set_storage(1, 1, 5);
        w.set_storage(1, 2, 6);
        w.set_storage(1, 9, 0);
        w.rollback(s);
        assert_eq!(w, before);
        assert_eq!(w.storage(1, 9), 9);
    }

    #[test]
    fn nested_rollback_keeps_outer_writes() {
        let mut w = WorldState::new();
        let outer = w.snapshot();
        w.set_storage(1, 1, 1);
        let inner = w.snapshot();
        w.set_storage(1, 2, 2);
        w.set_balance(7, 100);
        w.rollback(inner);
        assert_eq!((w.storage(1, 1), w.storage(1, 2), w.balance(7)), (1, 0, 0));
        w.rollback(outer);
        assert_eq!(w.storage(1, 1), 0);
    }

    #[test]
    #[should_panic(expected = "stale")]
    fn stale_token_panics() {
        let mut w = WorldState::new();
        w.set_storage(1, 1, 1);
        let s = w.snapshot();
        w.commit();
        w.rollback(s);
    }

    #[test]
    fn transfer_checks_balance() {
        let mut w = WorldState::new();
        w.fund(1, 10);
        assert!(!w.transfer(1, 2, 11));
        assert!(w.transfer(1, 2, 4));
        assert_eq!((w.balance(1), w.balance(2)), (6, 4));
    }
}
