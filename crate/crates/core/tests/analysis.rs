mod common;

use std::collections::{BTreeMap, BTreeSet};

use pathguard::analysis::*;
use pathguard::fixtures;
use pathguard::vm::assemble;
use proptest::prelude::*;
use VertexKey::{Block, Entry, Exit};

fn func(src: &str) -> (String, pathguard::vm::FunctionDef) {
    let p = assemble(src).unwrap();
    (p.name.clone(), p.functions[0].clone())
}

fn pairs(cfg: &Cfg) -> BTreeSet<(VertexKey, VertexKey)> {
    cfg.edges.iter().map(|e| (e.src, e.dst)).collect()
}

/// Number of ENTRY→EXIT paths, by explicit enumeration.
fn count_paths(cfg: &Cfg) -> usize {
    fn go(cfg: &Cfg, v: VertexKey, depth: usize) -> usize {
        assert!(depth < 10_000);
        if v == Exit {
            return 1;
        }
        cfg.out_edges(v).map(|e| go(cfg, e.dst, depth + 1)).sum()
    }
    go(cfg, Entry, 0)
}

/// All simple cycles, each as its list of (src, dst, branch) edges.
fn simple_cycles(cfg: &Cfg) -> Vec<Vec<(VertexKey, VertexKey, Option<bool>)>> {
    let keys: Vec<VertexKey> = cfg.vertices.iter().map(|v| v.key).collect();
    let mut out = Vec::new();
    for &start in &keys {
        let mut path = Vec::new();
        let mut on = BTreeSet::from([start]);
        fn dfs(
            cfg: &Cfg,
            start: VertexKey,
            v: VertexKey,
            path: &mut Vec<(VertexKey, VertexKey, Option<bool>)>,
            on: &mut BTreeSet<VertexKey>,
            out: &mut Vec<Vec<(VertexKey, VertexKey, Option<bool>)>>,
        ) {
            for e in cfg.out_edges(v) {
                if e.dst == start {
                    path.push((e.src, e.dst, e.branch));
                    out.push(path.clone());
                    path.pop();
                } else if e.dst > start && !on.contains(&e.dst) {
                    on.insert(e.dst);
                    path.push((e.src, e.dst, e.branch));
                    dfs(cfg, start, e.dst, path, on, out);
                    path.pop();
                    on.remove(&e.dst);
                }
            }
        }
        dfs(cfg, start, start, &mut path, &mut on, &mut out);
    }
    out
}

#[test]
fn straight_line_is_one_block() {
    let (c, f) = func("contract C { fn f external selector=0x1 { PUSH 1 PUSH 2 ADD STOP } }");
    let cfg = build_cfg(&c, &f);
    assert_eq!(cfg.block_count(), 1);
    assert_eq!(pairs(&cfg), BTreeSet::from([(Entry, Block(0)), (Block(0), Exit)]));
}

#[test]
fn if_else_diamond() {
    let (c, f) = func(
        "contract C { fn f external selector=0x1 {
            CALLER JUMPI t
            PUSH 1 POP JUMP join
         t: JUMPDEST PUSH 2 POP
         join: JUMPDEST STOP } }",
    );
    let cfg = build_cfg(&c, &f);
    assert_eq!((cfg.block_count(), cfg.edges.len()), (4, 6));
    assert!(find_backedges(&cfg).is_empty());
    assert_eq!(acyclicize(&cfg, &[]), cfg);
}

fn loop_blocks(cfg: &Cfg) -> BTreeMap<VertexKey, u32> {
    // number blocks 1..5 in offset order
    cfg.vertices
        .iter()
        .filter(|v| matches!(v.key, Block(_)))
        .enumerate()
        .map(|(i, v)| (v.key, i as u32 + 1))
        .collect()
}

#[test]
fn loop_fixture_shape_backedges_and_acyclic_form() {
    let p = fixtures::program(fixtures::LOOP);
    let cfg = build_cfg(&p.name, &p.functions[0]);
    let n = loop_blocks(&cfg);
    assert_eq!(n.len(), 5);
    let name = |k: VertexKey| match k {
        Entry => "entry".to_string(),
        Exit => "exit".to_string(),
        k => n[&k].to_string(),
    };
    let named = |cfg: &Cfg| -> BTreeSet<String> { cfg.edges.iter().map(|e| format!("{}->{}", name(e.src), name(e.dst))).collect() };
    let real: BTreeSet<String> =
        ["entry->1", "1->2", "1->5", "2->3", "3->4", "3->1", "4->3", "5->exit"].iter().map(|s| s.to_string()).collect();
    assert_eq!(named(&cfg), real);

    let back = find_backedges(&cfg);
    let back_names: BTreeSet<String> = back.iter().map(|b| format!("{}->{}", name(b.src), name(b.dst))).collect();
    assert_eq!(back_names, BTreeSet::from(["3->1".to_string(), "4->3".to_string()]));

    let dag = acyclicize(&cfg, &back);
    let expected: BTreeSet<String> = ["entry->1", "entry->3", "1->2", "1->5", "2->3", "3->4", "3->exit", "4->exit", "5->exit"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    assert_eq!(named(&dag), expected);
    assert_eq!(dag.edges.len(), 9);
    assert!(dag.is_acyclic());
}

#[test]
fn self_loop_gets_both_surrogates() {
    let (c, f) = func("contract C { fn f external selector=0x1 { PUSH 1 POP l: JUMPDEST CALLER JUMPI l STOP } }");
    let cfg = build_cfg(&c, &f);
    let back = find_backedges(&cfg);
    assert_eq!(back.len(), 1);
    assert_eq!((back[0].src, back[0].dst), (Block(2), Block(2)));
    let dag = acyclicize(&cfg, &back);
    let kinds: BTreeSet<_> = dag.edges.iter().map(|e| (e.src, e.dst, e.kind)).collect();
    assert!(kinds.contains(&(Entry, Block(2), EdgeKind::SurrogateEntry)));
    assert!(kinds.contains(&(Block(2), Exit, EdgeKind::SurrogateExit)));
    assert!(dag.is_acyclic());
}

#[test]
fn nested_loops_each_cycle_has_one_backedge() {
    let (c, f) = func(
        "contract C { fn f external selector=0x1 {
           PUSH 1 POP
         outer: JUMPDEST PUSH 1 POP
         inner: JUMPDEST CALLER JUMPI inner
           ORIGIN JUMPI outer
           STOP } }",
    );
    let cfg = build_cfg(&c, &f);
    let back = find_backedges(&cfg);
    assert_eq!(back.len(), 2);
    let cycles = simple_cycles(&cfg);
    assert_eq!(cycles.len(), 2);
    for cyc in cycles {
        let hits = cyc.iter().filter(|(s, d, b)| back.iter().any(|x| x.src == *s && x.dst == *d && x.branch == *b)).count();
        assert_eq!(hits, 1);
    }
}

#[test]
fn virtual_branches_double_paths() {
    let (c, f) = func("contract C { fn f external selector=0x1 { PUSH 1 PUSH 2 ADD STOP } }");
    let plain = build_cfg(&c, &f);
    assert_eq!(count_paths(&plain), 1);
    assert_eq!(count_paths(&insert_virtual_branches(&plain, &f)), 2);

    let (c, f) = func("contract C { fn f external selector=0x1 { PUSH 1 PUSH 2 ADD PUSH 3 MUL STOP } }");
    assert_eq!(count_paths(&insert_virtual_branches(&build_cfg(&c, &f), &f)), 4);

    // a checked op at block start and a DIV (no diamond)
    let (c, f) = func("contract C { fn f external selector=0x1 { PUSH 1 PUSH 2 l: JUMPDEST SUB PUSH 1 DIV STOP } }");
    let v = insert_virtual_branches(&build_cfg(&c, &f), &f);
    assert_eq!(count_paths(&v), 2);
    assert!(v.is_acyclic());
}

#[test]
fn call_return_diamond() {
    let (c, f) = func("contract C { fn f external selector=0x1 { PUSH 0 PUSH 0 PUSH 0 PUSH 9 CALL POP STOP } }");
    let v = insert_virtual_branches(&build_cfg(&c, &f), &f);
    assert_eq!(count_paths(&v), 2);
    let virt: Vec<_> = v.edges.iter().filter(|e| e.kind.is_virtual()).collect();
    assert_eq!(virt.len(), 2);
    assert_eq!(virt[0].checked_offset(), Some(4));
}

#[test]
fn contexts_call_graph() {
    let p = fixtures::program(fixtures::CONTEXTS);
    let boundary = BTreeSet::from([p.name.clone()]);
    let cg = build_call_graph(&[p], &boundary);
    let names: Vec<&str> = cg.nodes.iter().map(|n| n.name.as_str()).collect();
    assert_eq!(names, vec!["s", "A", "B", "C"]);
    assert_eq!(cg.edges.len(), 6);
    assert!(!cg.is_acyclic());
    let acyc = acyclicize_callgraph(&cg);
    assert!(acyc.is_acyclic());
    let non_sur = acyc.edges.iter().filter(|e| e.kind != CallKind::Surrogate).count();
    assert_eq!(non_sur, 5);
    let sur: Vec<_> = acyc.edges.iter().filter(|e| e.kind == CallKind::Surrogate).collect();
    assert_eq!((sur.len(), sur[0].caller, sur[0].callee, sur[0].id), (1, ENTRY_NODE, 2, 3));
    // contexts of C by enumerating s→C paths
    assert_eq!(count_cg_paths(&acyc, 3), 4);
}

fn count_cg_paths(cg: &CallGraph, to: NodeId) -> usize {
    fn go(cg: &CallGraph, n: NodeId, to: NodeId) -> usize {
        if n == to {
            return 1;
        }
        cg.out_edges(n).map(|e| go(cg, e.callee, to)).sum()
    }
    go(cg, ENTRY_NODE, to)
}

#[test]
fn no_calls_means_entry_edges_only() {
    let p = assemble("contract C { fn a external selector=0x1 { STOP } fn b internal { IRET } fn fallback external { STOP } }").unwrap();
    let cg = build_call_graph(&[p], &BTreeSet::from(["C".to_string()]));
    assert_eq!(cg.edges.len(), 2);
    assert!(cg.edges.iter().all(|e| e.kind == CallKind::Entry));
    assert_eq!(acyclicize_callgraph(&cg), cg);
}

#[test]
fn protected_and_unprotected_calls() {
    let a = assemble("contract A { fn f external selector=0x1 { PUSH 0 PUSH 0 PUSH 2 PUSH 0x1001 CALL target=B POP PUSH 0 PUSH 0 PUSH 0 PUSH 5 CALL POP STOP } }").unwrap();
    let b = assemble("contract B { fn g external selector=0x2 { STOP } }").unwrap();
    let cg = build_call_graph(&[a, b], &BTreeSet::from(["A".to_string(), "B".to_string()]));
    let ext: Vec<_> = cg.edges.iter().filter(|e| e.kind == CallKind::ExternalProtected).collect();
    assert_eq!(ext.len(), 1);
    assert_eq!(cg.nodes[ext[0].callee].name, "g");
    assert_eq!(cg.unprotected_sites.len(), 1);
    assert_eq!(cg.warnings.len(), 1);
}

#[test]
fn mutual_recursion_replaces_lower_site() {
    let p = assemble(
        "contract M { fn f external selector=0x1 { CALLER JUMPI out ICALL g out: JUMPDEST IRET }
                      fn g external selector=0x2 { CALLER JUMPI out ICALL f out: JUMPDEST IRET } }",
    )
    .unwrap();
    let cg = acyclicize_callgraph(&build_call_graph(&[p], &BTreeSet::from(["M".to_string()])));
    assert!(cg.is_acyclic());
    let sur: Vec<_> = cg.edges.iter().filter(|e| e.kind == CallKind::Surrogate).collect();
    assert_eq!(sur.len(), 1);
    assert_eq!(sur[0].id, 1);
    // site 1 (f→g) became s⇒g; f keeps s→f and g→f
    assert_eq!(count_cg_paths(&cg, 1), 3);
    assert_eq!(count_cg_paths(&cg, 2), 2);
}

#[test]
fn dumps_are_stable() {
    let p = fixtures::program(fixtures::LOOP);
    let a = analyze_function(&p.name, &p.functions[0]);
    let j1 = serde_json::to_string(&a.cfg.to_json()).unwrap();
    let j2 = serde_json::to_string(&analyze_function(&p.name, &p.functions[0]).cfg.to_json()).unwrap();
    assert_eq!(j1, j2);
    assert!(j1.contains("surrogate_exit"));
    assert!(!a.irreducible);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn removing_backedges_yields_dag(f in common::arb_function(9)) {
        let cfg = build_cfg("R", &f);
        let back = find_backedges(&cfg);
        let mut cut = cfg.clone();
        cut.edges.retain(|e| !back.iter().any(|b| b.src == e.src && b.dst == e.dst && b.branch == e.branch));
        prop_assert!(cut.is_acyclic());
        for cyc in simple_cycles(&cfg) {
            prop_assert!(cyc.iter().any(|(s, d, b)| back.iter().any(|x| x.src == *s && x.dst == *d && x.branch == *b)));
        }
        let full = analyze_function("R", &f).cfg;
        prop_assert!(full.is_acyclic());
        // every vertex lies on an ENTRY→EXIT path
        for v in &full.vertices {
            prop_assert!(v.key == Entry || full.in_edges(v.key).next().is_some());
            prop_assert!(v.key == Exit || full.out_edges(v.key).next().is_some());
        }
    }
}
