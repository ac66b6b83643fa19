use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::isa::{FunctionId, Instruction};
use super::program::ContractProgram;
use super::tx::Transaction;
use super::world::WorldState;
use super::{Address, ALARM_TOPIC, GUARD_MARKER};
use crate::error::{Error, Result};
use crate::word::Word;

pub const MAX_STACK: usize = 1024;
pub const MAX_CALL_DEPTH: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GasSchedule {
    pub base_op: u64,
    pub jumpi: u64,
    pub sload: u64,
    pub sstore_set: u64,
    pub sstore_update: u64,
    pub call_base: u64,
    pub code_deposit_per_byte: u64,
    pub memory_op: u64,
    pub log: u64,
}

impl Default for GasSchedule {
    fn default() -> Self {
        GasSchedule {
            base_op: 3,
            jumpi: 10,
            sload: 200,
            sstore_set: 20000,
            sstore_update: 5000,
            call_base: 700,
            code_deposit_per_byte: 200,
            memory_op: 3,
            log: 375,
        }
    }
}

impl GasSchedule {
    /// Charge for everything except SSTORE, whose cost depends on the slot.
    pub fn static_cost(&self, ins: &Instruction) -> u64 {
        use Instruction::*;
        match ins {
            JumpI(_) => self.jumpi,
            SLoad => self.sload,
            SStore => self.sstore_update,
            Call(_) | DelegateCall(_) => self.call_base,
            MLoad | MStore => self.memory_op,
            Log => self.log,
            _ => self.base_op,
        }
    }

    pub fn sstore_cost(&self, current: Word, new: Word) -> u64 {
        if current == 0 && new != 0 {
            self.sstore_set
        } else {
            self.sstore_update
        }
    }

    pub fn deploy_cost(&self, byte_size: usize) -> u64 {
        byte_size as u64 * self.code_deposit_per_byte
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TxStatus {
    Accepted,
    Reverted,
    GuardReverted,
    OutOfGas,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AlarmRecord {
    pub contract: String,
    /// Address of the code that raised the alarm.
    pub address: Address,
    /// Storage context it ran in; differs from `address` under DELEGATECALL.
    pub storage: Address,
    pub function: FunctionId,
    pub index: Word,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogRecord {
    /// Storage context (`ADDRESS`) of the emitting frame.
    pub address: Address,
    pub code: Address,
    pub function: FunctionId,
    pub topic: Word,
    pub a: Word,
    pub b: Word,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventKind {
    FrameEnter { caller: Address, delegate: bool },
    FrameExit { success: bool },
    BlockEnter,
    BranchTaken { taken: bool },
    ArithChecked { overflow: bool },
    CallEnter { callee: FunctionId },
    CallReturn,
    ExternalCallEnter { callee: Address, delegate: bool },
    ExternalCallReturn { success: bool },
    Sstore { slot: Word, value: Word },
    Revert,
    Halt,
}

/// One trace event. `contract` is the storage context, `code` the account
/// whose program is executing (they differ under DELEGATECALL).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub contract: Address,
    pub code: Address,
    pub function: FunctionId,
    pub offset: usize,
    pub kind: EventKind,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GasProfileEntry {
    pub code: Address,
    pub function: FunctionId,
    pub offset: usize,
    pub gas: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Receipt {
    pub status: TxStatus,
    pub gas_used: u64,
    pub return_data: Vec<Word>,
    pub alarms: Vec<AlarmRecord>,
    /// Alarms raised by guard reverts of inner frames when the transaction
    /// as a whole still succeeded.
    pub contained_alarms: Vec<AlarmRecord>,
    pub logs: Vec<LogRecord>,
    pub trace: Vec<TraceEvent>,
    pub gas_by_opcode: BTreeMap<String, u64>,
    pub gas_profile: Vec<GasProfileEntry>,
}

impl Receipt {
    /// Every alarm logged during the transaction, reverted or not.
    pub fn logged_alarms(&self) -> Vec<AlarmRecord> {
        self.logs
            .iter()
            .filter(|l| l.topic == ALARM_TOPIC)
            .map(|l| AlarmRecord { contract: String::new(), address: l.code, storage: l.address, function: l.a as FunctionId, index: l.b })
            .collect()
    }

    pub fn succeeded(&self) -> bool {
        self.status == TxStatus::Accepted
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ExecOptions {
    pub trace: bool,
    pub profile: bool,
}

impl ExecOptions {
    pub fn traced() -> Self {
        ExecOptions { trace: true, profile: false }
    }
}

/// Runs a transaction with tracing enabled.
pub fn execute_transaction(world: &mut WorldState, tx: &Transaction, schedule: &GasSchedule) -> Result<Receipt> {
    execute_with(world, tx, schedule, ExecOptions::traced())
}

pub fn execute_with(world: &mut WorldState, tx: &Transaction, schedule: &GasSchedule, opts: ExecOptions) -> Result<Receipt> {
    if tx.gas_limit == 0 {
        return Err(Error::InvalidTransaction("gas_limit must be positive".into()));
    }
    let program = world.code(tx.to).cloned().ok_or(Error::NotAContract(tx.to))?;
    let fid = program
        .dispatch(tx.selector)
        .ok_or_else(|| Error::UnknownSelector { contract: program.name.clone() })?;
    if world.balance(tx.origin) < tx.value {
        return Err(Error::InvalidTransaction(format!("origin {:#x} cannot pay value {}", tx.origin, tx.value)));
    }
    world.commit();
    let pre = world.snapshot();
    let mut m = Machine {
        world,
        schedule,
        opts,
        gas_left: tx.gas_limit,
        origin: tx.origin,
        trace: Vec::new(),
        logs: Vec::new(),
        guard_alarms: Vec::new(),
        gas_by_op: [0; 256],
        names: [""; 256],
        profile: BTreeMap::new(),
    };
    let frame = Frame {
        self_addr: tx.to,
        code_addr: tx.to,
        program,
        caller: tx.origin,
        value: tx.value,
        calldata: tx.calldata.clone(),
        depth: 0,
        delegate: false,
    };
    let halt = m.run_frame(frame, fid, Some((tx.origin, tx.value)));
    let gas_used = tx.gas_limit - m.gas_left;
    let mut alarms = std::mem::take(&mut m.guard_alarms);
    alarms.dedup();
    let (status, return_data, alarms, contained) = match halt {
        Halt::Success(data) => (TxStatus::Accepted, data, Vec::new(), alarms),
        Halt::Failure { data, .. } if !alarms.is_empty() => (TxStatus::GuardReverted, data, alarms, Vec::new()),
        Halt::Failure { data, .. } => (TxStatus::Reverted, data, Vec::new(), Vec::new()),
        Halt::OutOfGas => (TxStatus::OutOfGas, Vec::new(), Vec::new(), Vec::new()),
    };
    let gas_used = if status == TxStatus::OutOfGas { tx.gas_limit } else { gas_used };
    let mut gas_by_opcode: BTreeMap<String, u64> = BTreeMap::new();
    for (op, g) in m.gas_by_op.iter().enumerate().filter(|(_, g)| **g > 0) {
        // DUPn and SWAPn share a mnemonic
        *gas_by_opcode.entry(m.names[op].to_string()).or_default() += g;
    }
    let gas_profile = m
        .profile
        .iter()
        .map(|(&(code, function, offset), &gas)| GasProfileEntry { code, function, offset, gas })
        .collect();
    let receipt = Receipt {
        status,
        gas_used,
        return_data,
        alarms,
        contained_alarms: contained,
        logs: std::mem::take(&mut m.logs),
        trace: std::mem::take(&mut m.trace),
        gas_by_opcode,
        gas_profile,
    };
    if status != TxStatus::Accepted {
        // frames already unwound their own writes; this is belt and braces
        world.rollback(pre);
    }
    world.commit();
    Ok(receipt)
}

struct Frame {
    self_addr: Address,
    code_addr: Address,
    program: Arc<ContractProgram>,
    caller: Address,
    value: Word,
    calldata: Vec<Word>,
    depth: usize,
    delegate: bool,
}

enum Halt {
    Success(Vec<Word>),
    Failure { data: Vec<Word> },
    OutOfGas,
}

struct Machine<'a> {
    world: &'a mut WorldState,
    schedule: &'a GasSchedule,
    opts: ExecOptions,
    gas_left: u64,
    origin: Address,
    trace: Vec<TraceEvent>,
    logs: Vec<LogRecord>,
    guard_alarms: Vec<AlarmRecord>,
    gas_by_op: [u64; 256],
    names: [&'static str; 256],
    profile: BTreeMap<(Address, FunctionId, usize), u64>,
}

impl Machine<'_> {
    fn emit(&mut self, f: &Frame, function: FunctionId, offset: usize, kind: EventKind) {
        if self.opts.trace {
            self.trace.push(TraceEvent { contract: f.self_addr, code: f.code_addr, function, offset, kind });
        }
    }

    fn run_frame(&mut self, frame: Frame, entry: FunctionId, transfer: Option<(Address, Word)>) -> Halt {
        let snap = self.world.snapshot();
        let log_start = self.logs.len();
        self.emit(&frame, entry, 0, EventKind::FrameEnter { caller: frame.caller, delegate: frame.delegate });
        let halt = match transfer {
            Some((from, amount)) if !self.world.transfer(from, frame.self_addr, amount) => {
                Halt::Failure { data: Vec::new() }
            }
            _ => self.interpret(&frame, entry),
        };
        let (last_fid, last_off, success) = match &halt {
            Halt::Success(_) => (entry, 0, true),
            Halt::Failure { data } => {
                if data.as_slice() == [GUARD_MARKER] {
                    let name = frame.program.name.clone();
                    for l in &self.logs[log_start..] {
                        if l.topic == ALARM_TOPIC {
                            let rec = AlarmRecord {
                                contract: self.world.code(l.code).map_or_else(|| name.clone(), |p| p.name.clone()),
                                address: l.code,
                                storage: l.address,
                                function: l.a as FunctionId,
                                index: l.b,
                            };
                            if !self.guard_alarms.contains(&rec) {
                                self.guard_alarms.push(rec);
                            }
                        }
                    }
                }
                (entry, 0, false)
            }
            Halt::OutOfGas => (entry, 0, false),
        };
        if !success {
            self.world.rollback(snap);
        }
        self.emit(&frame, last_fid, last_off, EventKind::FrameExit { success });
        halt
    }

    fn interpret(&mut self, f: &Frame, entry: FunctionId) -> Halt {
        use Instruction::*;
        let program = f.program.clone();
        let width = program.width;
        let mask = width.mask();
        let mut stack: Vec<Word> = Vec::with_capacity(32);
        let mut memory: HashMap<Word, Word> = HashMap::new();
        let mut icalls: Vec<(FunctionId, usize)> = Vec::new();
        let mut return_data: Vec<Word> = Vec::new();
        let mut fid = entry;
        let mut pc = 0usize;
        let fail = || Halt::Failure { data: Vec::new() };

        macro_rules! pop {
            () => {
                match stack.pop() {
                    Some(v) => v,
                    None => return fail(),
                }
            };
        }
        macro_rules! push {
            ($v:expr) => {{
                let v: Word = $v;
                if stack.len() >= super::MAX_STACK {
                    return fail();
                }
                stack.push(v & mask);
            }};
        }
        macro_rules! pop_words {
            () => {{
                let k = pop!();
                if k as usize > stack.len() {
                    return fail();
                }
                let mut words = Vec::with_capacity(k as usize);
                for _ in 0..k {
                    words.push(pop!());
                }
                words
            }};
        }

        loop {
            let body = &program.functions[fid as usize].body;
            let ins = &body[pc];
            let cost = match ins {
                SStore => {
                    let n = stack.len();
                    if n < 2 {
                        self.schedule.sstore_update
                    } else {
                        let cur = self.world.storage(f.self_addr, stack[n - 1]);
                        self.schedule.sstore_cost(cur, stack[n - 2])
                    }
                }
                other => self.schedule.static_cost(other),
            };
            if cost > self.gas_left {
                self.gas_left = 0;
                return Halt::OutOfGas;
            }
            self.gas_left -= cost;
            let op = ins.opcode() as usize;
            self.gas_by_op[op] += cost;
            self.names[op] = ins.mnemonic();
            if self.opts.profile {
                *self.profile.entry((f.code_addr, fid, pc)).or_insert(0) += cost;
            }

            let mut next = pc + 1;
            match ins {
                Push(v) => push!(*v),
                Pop => {
                    pop!();
                }
                Dup(n) => {
                    let n = *n as usize;
                    if n > stack.len() {
                        return fail();
                    }
                    push!(stack[stack.len() - n]);
                }
                Swap(n) => {
                    let n = *n as usize;
                    let len = stack.len();
                    if n >= len {
                        return fail();
                    }
                    stack.swap(len - 1, len - 1 - n);
                }
                Add | Sub | Mul => {
                    let a = pop!();
                    let b = pop!();
                    let (r, overflow) = match ins {
                        Add => width.add(a, b),
                        Sub => width.sub(a, b),
                        _ => width.mul(a, b),
                    };
                    push!(r);
                    self.emit(f, fid, pc, EventKind::ArithChecked { overflow });
                }
                Div | Mod => {
                    let a = pop!();
                    let b = pop!();
                    push!(match (ins, b) {
                        (_, 0) => 0,
                        (Div, _) => a / b,
                        _ => a % b,
                    });
                }
                Lt | Gt | Eq | And | Or | Xor => {
                    let a = pop!();
                    let b = pop!();
                    push!(match ins {
                        Lt => (a < b) as Word,
                        Gt => (a > b) as Word,
                        Eq => (a == b) as Word,
                        And => a & b,
                        Or => a | b,
                        _ => a ^ b,
                    });
                }
                IsZero => {
                    let a = pop!();
                    push!((a == 0) as Word);
                }
                Not => {
                    let a = pop!();
                    push!(!a);
                }
                Shr => {
                    let shift = pop!();
                    let v = pop!();
                    push!(if shift >= width.bits() as u64 { 0 } else { v >> shift });
                }
                Jump(t) => {
                    next = *t;
                    self.emit(f, fid, next, EventKind::BlockEnter);
                }
                JumpI(t) => {
                    let cond = pop!();
                    let taken = cond != 0;
                    self.emit(f, fid, pc, EventKind::BranchTaken { taken });
                    if taken {
                        next = *t;
                        self.emit(f, fid, next, EventKind::BlockEnter);
                    }
                }
                JumpDest => {}
                MLoad => {
                    let a = pop!();
                    push!(memory.get(&a).copied().unwrap_or(0));
                }
                MStore => {
                    let a = pop!();
                    let v = pop!();
                    memory.insert(a, v);
                }
                SLoad => {
                    let slot = pop!();
                    push!(self.world.storage(f.self_addr, slot));
                }
                SStore => {
                    let slot = pop!();
                    let v = pop!();
                    self.world.set_storage(f.self_addr, slot, v);
                    self.emit(f, fid, pc, EventKind::Sstore { slot, value: v });
                }
                CallDataLoad => {
                    let i = pop!();
                    push!(f.calldata.get(i as usize).copied().unwrap_or(0));
                }
                CallDataSize => push!(f.calldata.len() as Word),
                Caller => push!(f.caller),
                Origin => push!(self.origin),
                Address => push!(f.self_addr),
                CallValue => push!(f.value),
                Balance => {
                    let a = pop!();
                    push!(self.world.balance(a));
                }
                Call(_) | DelegateCall(_) => {
                    let delegate = matches!(ins, DelegateCall(_));
                    let callee = pop!();
                    let value = if delegate { 0 } else { pop!() };
                    let selector = pop!();
                    let calldata = pop_words!();
                    self.emit(f, fid, pc, EventKind::ExternalCallEnter { callee, delegate });
                    let (success, data) = match self.message_call(f, callee, value, selector, calldata, delegate) {
                        Some(r) => r,
                        None => return Halt::OutOfGas,
                    };
                    return_data = data;
                    self.emit(f, fid, pc, EventKind::ExternalCallReturn { success });
                    push!(success as Word);
                }
                ICall(callee) => {
                    if icalls.len() >= super::MAX_STACK {
                        return fail();
                    }
                    self.emit(f, fid, pc, EventKind::CallEnter { callee: *callee });
                    icalls.push((fid, pc + 1));
                    fid = *callee;
                    next = 0;
                }
                IRet => {
                    self.emit(f, fid, pc, EventKind::CallReturn);
                    match icalls.pop() {
                        Some((rf, rpc)) => {
                            fid = rf;
                            next = rpc;
                        }
                        None => {
                            self.emit(f, fid, pc, EventKind::Halt);
                            return Halt::Success(Vec::new());
                        }
                    }
                }
                Return => {
                    let data = pop_words!();
                    self.emit(f, fid, pc, EventKind::Halt);
                    return Halt::Success(data);
                }
                Revert => {
                    let data = pop_words!();
                    self.emit(f, fid, pc, EventKind::Revert);
                    return Halt::Failure { data };
                }
                Stop => {
                    self.emit(f, fid, pc, EventKind::Halt);
                    return Halt::Success(Vec::new());
                }
                ReturnDataLoad => {
                    let i = pop!();
                    push!(return_data.get(i as usize).copied().unwrap_or(0));
                }
                ReturnDataSize => push!(return_data.len() as Word),
                CodeLoad => {
                    let off = pop!();
                    push!(program.data_cell(off));
                }
                Log => {
                    let topic = pop!();
                    let a = pop!();
                    let b = pop!();
                    self.logs.push(LogRecord { address: f.self_addr, code: f.code_addr, function: fid, topic, a, b });
                }
            }
            pc = next;
        }
    }

    /// `None` means the transaction ran out of gas inside the callee.
    fn message_call(
        &mut self,
        f: &Frame,
        callee: Address,
        value: Word,
        selector: Word,
        calldata: Vec<Word>,
        delegate: bool,
    ) -> Option<(bool, Vec<Word>)> {
        if f.depth + 1 > MAX_CALL_DEPTH {
            return Some((false, Vec::new()));
        }
        let Some(program) = self.world.code(callee).cloned() else {
            // plain account: only moves value
            let ok = delegate || self.world.transfer(f.self_addr, callee, value);
            return Some((ok, Vec::new()));
        };
        let sel = if selector == 0 { None } else { u32::try_from(selector).ok().or(Some(0)) };
        let Some(fid) = program.dispatch(sel) else { return Some((false, Vec::new())) };
        let frame = if delegate {
            Frame {
                self_addr: f.self_addr,
                code_addr: callee,
                program,
                caller: f.caller,
                value: f.value,
                calldata,
                depth: f.depth + 1,
                delegate: true,
            }
        } else {
            Frame {
                self_addr: callee,
                code_addr: callee,
                program,
                caller: f.self_addr,
                value,
                calldata,
                depth: f.depth + 1,
                delegate: false,
            }
        };
        let transfer = if delegate { None } else { Some((f.self_addr, value)) };
        match self.run_frame(frame, fid, transfer) {
            Halt::Success(data) => Some((true, data)),
            Halt::Failure { data } => Some((false, data)),
            Halt::OutOfGas => None,
        }
    }
}
