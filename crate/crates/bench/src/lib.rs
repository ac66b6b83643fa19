//! Shared setup for the benchmarks.

use pathguard::fixtures::{scenario, Scenario, Vulnerability};
use pathguard::guard::{protect, train, GuardConfig, Guarded};

/// A trained and protected fixture.
pub struct Prepared {
    pub scenario: Scenario,
    pub guarded: Guarded,
    pub config: GuardConfig,
}

pub fn prepare(kind: Vulnerability, len: usize) -> Prepared {
    let config = GuardConfig::default();
    let scenario = scenario(kind, 1, len);
    let snapshot = train(&scenario.bundle, &scenario.training, &config).expect("fixture trains");
    let guarded = protect(&scenario.bundle, &snapshot, &config).expect("fixture instruments");
    Prepared { scenario, guarded, config }
}
