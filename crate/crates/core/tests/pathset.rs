mod common;

use std::collections::{BTreeMap, BTreeSet};

use common::{guarded, measured_mean, random_keys, wide, Harness};
use pathguard::indexing::index_programs;
use pathguard::pathset::{
    build_mpht, choose_strategy, estimate_gas, list_contains, MphtSpec, PathSetSnapshot, Strategy, DEFAULT_LAMBDA,
    DEFAULT_SEED,
};
use pathguard::vm::{GasSchedule, WorldState};
use pathguard::{Width, Word};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn strategy_boundary_is_six() {
    assert_eq!(choose_strategy(0), Strategy::List);
    assert_eq!(choose_strategy(5), Strategy::List);
    assert_eq!(choose_strategy(6), Strategy::Mpht);
    assert_eq!(choose_strategy(1000), Strategy::Mpht);
}

#[test]
fn list_membership() {
    let s = [1, 4, 9, 16, 25];
    assert!(list_contains(&s, 9));
    assert!(!list_contains(&s, 10));
}

#[test]
fn list_deploy_gas_is_1600n_plus_2800() {
    let schedule = GasSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for n in 0..=10u64 {
        let expect = 1600 * n + 2800;
        assert_eq!(estimate_gas(Strategy::List, n, &schedule).deploy_gas, expect);
        let keys = random_keys(&mut rng, 256, n as usize);
        let (p, ip) = guarded(8, &keys, Strategy::List);
        let blob = (ip.program.data.len() - p.data.len()) as u64;
        assert_eq!(blob * schedule.code_deposit_per_byte, expect, "n={n}");
    }
}

#[test]
fn empty_list_rejects_everything() {
    let (_, ip) = guarded(8, &BTreeSet::new(), Strategy::List);
    let mut h = Harness::new(&ip);
    for k in 0..300 {
        assert!(!h.probe(k).0);
    }
}

#[test]
fn mapping_append_costs_one_fresh_sstore() {
    let schedule = GasSchedule::default();
    let (_, ip) = guarded(6, &BTreeSet::new(), Strategy::Mapping);
    let mut world = WorldState::new();
    let m = &ip.plan.reserved.mapping;
    assert_eq!(m.append(&mut world, 0x1000, 0, 19, &schedule).unwrap(), 20000);
    assert!(m.check(&world, 0x1000, 0, 19));
    assert!(!m.check(&world, 0x1000, 0, 20));
    assert!(m.slot(0, 64).is_err());
    assert_eq!(estimate_gas(Strategy::Mapping, 7, &schedule).deploy_gas, 140000);
}

#[test]
fn mapping_check_gas_does_not_grow() {
    let (_, ip) = guarded(10, &BTreeSet::new(), Strategy::Mapping);
    let mut h = Harness::new(&ip);
    h.approve(&ip, &[3]);
    let (ok, small) = h.probe(3);
    assert!(ok);
    h.approve(&ip, &(100..600).collect::<Vec<_>>());
    let (ok, large) = h.probe(3);
    assert!(ok);
    assert_eq!(small, large);
}

#[test]
fn single_key_table() {
    let t = build_mpht(&[42], DEFAULT_LAMBDA, DEFAULT_SEED, Width::W64).unwrap();
    assert_eq!(t.m, 1);
    assert_eq!(t.n, 1);
    assert_eq!(t.position_of(42), 0);
    assert!(t.contains(42));
    assert!(!t.contains(43));
}

#[test]
fn hundred_key_table_membership() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let keys: Vec<Word> = (0..100).map(|_| rng.gen()).collect();
    let t = build_mpht(&keys, DEFAULT_LAMBDA, DEFAULT_SEED, Width::W64).unwrap();
    assert!(keys.iter().all(|k| t.contains(*k)));
    let set: BTreeSet<Word> = keys.iter().copied().collect();
    let mut outsiders = 0;
    while outsiders < 1000 {
        let k: Word = rng.gen();
        if !set.contains(&k) {
            assert!(!t.contains(k));
            outsiders += 1;
        }
    }
    // the position function is a bijection onto the slots
    let pos: BTreeSet<u64> = keys.iter().map(|k| t.position_of(*k)).collect();
    assert_eq!(pos, (0..100).collect());
}

#[test]
fn table_construction_is_deterministic() {
    let keys: Vec<Word> = (0..500).map(|i| i * 7 + 3).collect();
    let a = build_mpht(&keys, DEFAULT_LAMBDA, DEFAULT_SEED, Width::W64).unwrap();
    let b = build_mpht(&keys, DEFAULT_LAMBDA, DEFAULT_SEED, Width::W64).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.encode(), b.encode());
    assert_eq!(a.m, MphtSpec::bucket_count(500, DEFAULT_LAMBDA));
}

#[test]
fn tables_at_every_width_are_perfect() {
    for w in [Width::W16, Width::W32, Width::W64] {
        let keys: Vec<Word> = (0..300).map(|i| i * 97 + 5).collect();
        let t = build_mpht(&keys, DEFAULT_LAMBDA, DEFAULT_SEED, w).unwrap();
        let pos: BTreeSet<u64> = keys.iter().map(|k| t.position_of(*k)).collect();
        assert_eq!(pos.len(), keys.len());
        for k in 0..30000 {
            assert_eq!(t.contains(k), keys.contains(&k), "{w:?} {k}");
        }
    }
}

/// Generated check code against the source set over a 2^16 index space.
#[test]
fn generated_checks_are_exact_over_the_full_space() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let space = 1usize << 16;
    let keys = random_keys(&mut rng, space, 1000);
    let (_, ip) = guarded(16, &keys, Strategy::Mpht);
    let mut h = Harness::new(&ip);
    let approved: Vec<Word> = random_keys(&mut rng, space, 50).into_iter().filter(|k| !keys.contains(k)).collect();
    h.approve(&ip, &approved);
    for k in 0..space as Word + 16 {
        let expect = keys.contains(&k) || approved.contains(&k);
        assert_eq!(h.probe(k).0, expect, "key {k}");
    }
    let small = random_keys(&mut rng, 1 << 12, 5);
    let (_, ip) = guarded(12, &small, Strategy::List);
    let mut h = Harness::new(&ip);
    for k in 0..(1 << 12) + 16 {
        assert_eq!(h.probe(k).0, small.contains(&k), "key {k}");
    }
}

#[test]
fn estimates_track_the_vm_within_five_percent() {
    let schedule = GasSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for n in [1usize, 5, 6, 10, 100, 1000] {
        let keys = random_keys(&mut rng, 1 << 16, n);
        for strategy in [Strategy::List, Strategy::Mpht] {
            let (_, ip) = guarded(16, &keys, strategy);
            let (vm, _) = measured_mean(&ip, &keys);
            let est = estimate_gas(strategy, n as u64, &schedule).per_check_gas;
            let err = (est - vm).abs() / vm;
            assert!(err <= 0.05, "{strategy:?} n={n}: estimate {est} vm {vm}");
        }
    }
}

#[test]
fn table_check_gas_is_constant_in_n() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut seen = BTreeSet::new();
    for n in [10, 100, 1000] {
        let keys = random_keys(&mut rng, 1 << 16, n);
        let (_, ip) = guarded(16, &keys, Strategy::Mpht);
        let (_, distinct) = measured_mean(&ip, &keys);
        seen.extend(distinct);
    }
    assert_eq!(seen.len(), 1, "{seen:?}");
}

#[test]
fn list_and_table_cross_between_five_and_seven() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut crossover = None;
    for n in 1..=10 {
        let keys = random_keys(&mut rng, 1 << 16, n);
        let (list, _) = measured_mean(&guarded(16, &keys, Strategy::List).1, &keys);
        let (table, _) = measured_mean(&guarded(16, &keys, Strategy::Mpht).1, &keys);
        if table < list && crossover.is_none() {
            crossover = Some(n);
        }
        if n <= 5 {
            assert!(list < table, "n={n}: list {list} table {table}");
        }
    }
    let c = crossover.expect("the table wins eventually");
    assert!((6..=7).contains(&c), "crossover at {c}");
}

#[test]
fn snapshot_json_round_trips() {
    let keys: BTreeSet<Word> = (0..40).map(|k| k * 3).collect();
    let p = wide(8);
    let boundary = BTreeSet::from(["Wide".to_string()]);
    let index = index_programs(std::slice::from_ref(&p), &boundary).unwrap();
    let observed = BTreeMap::from([(("Wide".to_string(), 0), keys)]);
    let snap = PathSetSnapshot::build(std::slice::from_ref(&p), &index, &observed, DEFAULT_LAMBDA, DEFAULT_SEED).unwrap();
    assert_eq!(PathSetSnapshot::from_json(&snap.to_json()).unwrap(), snap);
    snap.verify(std::slice::from_ref(&p), &index).unwrap();
    assert!(snap.verify(&[wide(7)], &index_programs(&[wide(7)], &boundary).unwrap()).is_err());
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn table_is_a_perfect_map_of_its_keys(keys in prop::collection::btree_set(any::<u64>(), 1..300), probes in prop::collection::vec(any::<u64>(), 64), seed in any::<u64>()) {
            let v: Vec<Word> = keys.iter().copied().collect();
            let t = build_mpht(&v, DEFAULT_LAMBDA, seed, Width::W64).unwrap();
            let pos: BTreeSet<u64> = v.iter().map(|k| t.position_of(*k)).collect();
            prop_assert_eq!(pos, (0..v.len() as u64).collect::<BTreeSet<_>>());
            for p in probes {
                prop_assert_eq!(t.contains(p), keys.contains(&p));
            }
        }

        #[test]
        fn narrow_tables_stay_exact(keys in prop::collection::btree_set(0u64..1 << 16, 1..200), w in prop::sample::select(vec![Width::W16, Width::W32])) {
            let v: Vec<Word> = keys.iter().copied().collect();
            let t = build_mpht(&v, DEFAULT_LAMBDA, DEFAULT_SEED, w).unwrap();
            for k in (0..1u64 << 16).step_by(7) {
                prop_assert_eq!(t.contains(k), keys.contains(&k));
            }
        }
    }

    proptest! {
        #[test]
        fn mapping_slots_are_injective(spaces in prop::collection::vec(1u128..200, 1..6), start in 0u128..1000) {
            use pathguard::pathset::MappingLayout;
            let spaces: BTreeMap<u16, u128> = spaces.into_iter().enumerate().map(|(i, s)| (i as u16, s)).collect();
            let m = MappingLayout::new(Width::W32, &spaces, start, 16).unwrap();
            let mut seen = BTreeSet::new();
            for (&f, &n) in &spaces {
                for k in 0..n as Word {
                    let slot = m.slot(f, k).unwrap();
                    prop_assert!(slot >= 1 << 31);
                    prop_assert!(seen.insert(slot));
                }
                prop_assert!(m.slot(f, n as Word).is_err());
            }
        }
    }
}
