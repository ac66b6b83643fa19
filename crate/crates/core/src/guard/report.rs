//! Overhead metrics and gas reconciliation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::detect::DetectionRun;
use super::Guarded;
use crate::instrument::{Origin, PointKind};
use crate::vm::{Address, FunctionId, Receipt, TxStatus};

/// `(instrumented − original) / original`, in percent.
pub fn overhead_pct(original: u64, instrumented: u64) -> f64 {
    (instrumented as f64 - original as f64) * 100.0 / original as f64
}

/// Instrumented gas split into what the original instructions cost and
/// what each kind of injected code cost.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GasReconciliation {
    pub gas_orig: u64,
    pub gas_instr: u64,
    /// Gas of original instructions inside the instrumented run.
    pub original_part: u64,
    pub injected: BTreeMap<PointKind, u64>,
    /// `(code, function, offset, original gas, gas in instrumented run)`
    /// for instructions whose cost changed.
    pub mismatches: Vec<(Address, FunctionId, usize, u64, u64)>,
}

impl GasReconciliation {
    pub fn injected_total(&self) -> u64 {
        self.injected.values().sum()
    }

    /// The delta is exactly the injected gas and no original instruction
    /// changed cost.
    pub fn reconciles(&self) -> bool {
        self.mismatches.is_empty()
            && self.original_part == self.gas_orig
            && self.gas_orig + self.injected_total() == self.gas_instr
    }
}

/// Attributes the profiled gas of an instrumented run to original
/// instructions and point kinds, and compares it with the original run.
/// Both receipts need gas profiles.
pub fn reconcile_gas(g: &Guarded, instrumented: &Receipt, original: &Receipt) -> GasReconciliation {
    let by_addr: BTreeMap<Address, &crate::instrument::InstrumentedProgram> =
        g.instrumented.iter().filter_map(|(n, ip)| Some((g.bundle.address(n)?, ip))).collect();
    let mut rec = GasReconciliation { gas_orig: original.gas_used, gas_instr: instrumented.gas_used, ..Default::default() };
    let mut mapped: BTreeMap<(Address, FunctionId, usize), u64> = BTreeMap::new();
    for e in &instrumented.gas_profile {
        let origin = match by_addr.get(&e.code) {
            Some(ip) => ip.origin(e.function, e.offset).unwrap_or(Origin::Injected(PointKind::ContractWrapper)),
            None => Origin::Original(e.offset),
        };
        match origin {
            Origin::Original(off) => {
                rec.original_part += e.gas;
                *mapped.entry((e.code, e.function, off)).or_default() += e.gas;
            }
            Origin::Injected(k) => *rec.injected.entry(k).or_default() += e.gas,
        }
    }
    let mut orig: BTreeMap<(Address, FunctionId, usize), u64> = BTreeMap::new();
    for e in &original.gas_profile {
        *orig.entry((e.code, e.function, e.offset)).or_default() += e.gas;
    }
    for k in orig.keys().chain(mapped.keys()).copied().collect::<std::collections::BTreeSet<_>>() {
        let (a, b) = (orig.get(&k).copied().unwrap_or(0), mapped.get(&k).copied().unwrap_or(0));
        if a != b {
            rec.mismatches.push((k.0, k.1, k.2, a, b));
        }
    }
    rec
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContractOverhead {
    pub contract: String,
    pub original_size: usize,
    pub instrumented_size: usize,
    pub deploy_overhead_pct: f64,
    pub deploy_gas_extra: u64,
    pub point_sizes: BTreeMap<PointKind, usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TxOverhead {
    pub tx_index: usize,
    pub status: TxStatus,
    pub gas_orig: u64,
    pub gas_instr: u64,
    pub runtime_overhead_pct: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverheadReport {
    pub contracts: Vec<ContractOverhead>,
    pub transactions: Vec<TxOverhead>,
    pub avg_deploy_overhead_pct: f64,
    /// Over accepted transactions.
    pub avg_runtime_overhead_pct: f64,
    /// Accepted transactions per runtime-overhead bucket (`"0-10"`, `"10-20"`, ..., `"100+"`).
    pub runtime_buckets: BTreeMap<String, usize>,
    pub false_alarm_count: usize,
    /// Injected gas per point kind over accepted transactions.
    pub point_gas: BTreeMap<PointKind, u64>,
}

fn bucket(pct: f64) -> String {
    if pct >= 100.0 {
        return "100+".into();
    }
    let lo = (pct.max(0.0) / 10.0).floor() as u32 * 10;
    format!("{lo}-{}", lo + 10)
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 { 0.0 } else { s / n as f64 }
}

impl OverheadReport {
    /// `false_alarm_count` counts transactions that alarmed although the
    /// original program accepted them and they were not marked as attacks.
    pub fn build(g: &Guarded, run: &DetectionRun, attacks: &[usize]) -> Self {
        let d = &run.deployment;
        let contracts: Vec<ContractOverhead> = g
            .instrumented
            .iter()
            .map(|(n, ip)| ContractOverhead {
                contract: n.clone(),
                original_size: ip.original_size,
                instrumented_size: ip.instrumented_size,
                deploy_overhead_pct: overhead_pct(ip.original_size as u64, ip.instrumented_size as u64),
                deploy_gas_extra: d.deploy_gas.get(n).copied().unwrap_or(0).saturating_sub(d.original_deploy_gas.get(n).copied().unwrap_or(0)),
                point_sizes: ip.point_sizes.clone(),
            })
            .collect();
        let transactions: Vec<TxOverhead> = run
            .outcomes
            .iter()
            .map(|o| TxOverhead {
                tx_index: o.tx_index,
                status: o.status,
                gas_orig: o.gas_orig,
                gas_instr: o.gas_instr,
                runtime_overhead_pct: if o.touches_protected { overhead_pct(o.gas_orig, o.gas_instr) } else { 0.0 },
            })
            .collect();
        let accepted = || transactions.iter().filter(|t| t.status == TxStatus::Accepted);
        let mut runtime_buckets = BTreeMap::new();
        for t in accepted() {
            *runtime_buckets.entry(bucket(t.runtime_overhead_pct)).or_insert(0) += 1;
        }
        let mut point_gas = BTreeMap::new();
        for o in run.outcomes.iter().filter(|o| o.status == TxStatus::Accepted) {
            for (k, v) in &o.gas.injected {
                *point_gas.entry(*k).or_insert(0) += v;
            }
        }
        let false_alarm_count = run
            .outcomes
            .iter()
            .filter(|o| o.alarmed() && o.original_status == TxStatus::Accepted && !attacks.contains(&o.tx_index))
            .count();
        OverheadReport {
            avg_deploy_overhead_pct: mean(contracts.iter().map(|c| c.deploy_overhead_pct)),
            avg_runtime_overhead_pct: mean(accepted().map(|t| t.runtime_overhead_pct)),
            contracts,
            transactions,
            runtime_buckets,
            false_alarm_count,
            point_gas,
        }
    }
}
