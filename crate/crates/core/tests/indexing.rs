mod common;

use std::collections::{BTreeMap, BTreeSet};

use pathguard::analysis::*;
use pathguard::fixtures;
use pathguard::indexing::*;
use pathguard::vm::assemble;
use pathguard::{Error, Width};
use proptest::prelude::*;
use VertexKey::{Entry, Exit};

/// Every ENTRY→EXIT path as a list of edge indices.
fn all_paths(cfg: &Cfg) -> Vec<Vec<usize>> {
    fn go(cfg: &Cfg, v: VertexKey, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if v == Exit {
            out.push(cur.clone());
            return;
        }
        for (i, e) in cfg.edges.iter().enumerate() {
            if e.src == v {
                cur.push(i);
                go(cfg, e.dst, cur, out);
                cur.pop();
            }
        }
    }
    let mut out = Vec::new();
    go(cfg, Entry, &mut Vec::new(), &mut out);
    out
}

fn paths_from(cfg: &Cfg, v: VertexKey) -> u128 {
    if v == Exit {
        return 1;
    }
    cfg.out_edges(v).map(|e| paths_from(cfg, e.dst)).sum()
}

/// Checks the labeling against explicit enumeration.
fn check_epp(cfg: &Cfg) -> Result<(), TestCaseError> {
    let lab = label_epp(cfg);
    let paths = all_paths(cfg);
    prop_assert_eq!(lab.total(), paths.len() as u128);
    let mut sums: Vec<u128> = paths.iter().map(|p| p.iter().map(|&i| lab.edge_val[i]).sum()).collect();
    sums.sort();
    prop_assert_eq!(sums, (0..paths.len() as u128).collect::<Vec<_>>());
    for v in &cfg.vertices {
        prop_assert_eq!(lab.num_paths[&v.key], paths_from(cfg, v.key));
        let out: Vec<usize> = (0..cfg.edges.len()).filter(|&i| cfg.edges[i].src == v.key).collect();
        if out.is_empty() {
            continue;
        }
        let zeros: Vec<usize> = out.iter().copied().filter(|&i| lab.edge_val[i] == 0).collect();
        prop_assert_eq!(zeros.len(), 1);
        let heaviest = out.iter().map(|&i| paths_from(cfg, cfg.edges[i].dst)).max().unwrap();
        prop_assert_eq!(paths_from(cfg, cfg.edges[zeros[0]].dst), heaviest);
    }
    for (id, p) in paths.iter().enumerate() {
        let idx = path_to_index(&lab, cfg, p).unwrap();
        prop_assert_eq!(&index_to_path(&lab, cfg, idx).unwrap(), p);
        let _ = id;
    }
    Ok(())
}

fn analyzed(src: &str) -> Cfg {
    let p = assemble(src).unwrap();
    analyze_function(&p.name, &p.functions[0]).cfg
}

#[test]
fn vertex_with_two_routes_has_two_paths() {
    // D branches to F directly or through E
    let cfg = analyzed("contract C { fn f external selector=0x1 { CALLER JUMPI f PUSH 1 POP f: JUMPDEST STOP } }");
    let lab = label_epp(&cfg);
    assert_eq!(lab.num_paths[&VertexKey::Block(0)], 2);
}

#[test]
fn loop_fixture_numbers() {
    let p = fixtures::program(fixtures::LOOP);
    let cfg = analyze_function(&p.name, &p.functions[0]).cfg;
    let lab = label_epp(&cfg);
    let blocks: Vec<VertexKey> = cfg.vertices.iter().filter(|v| matches!(v.key, VertexKey::Block(_))).map(|v| v.key).collect();
    let np: Vec<u128> = blocks.iter().map(|b| lab.num_paths[b]).collect();
    assert_eq!(np, vec![3, 2, 2, 1, 1]);
    assert_eq!((lab.num_paths[&Entry], lab.num_paths[&Exit]), (5, 1));
    check_epp(&cfg).unwrap();

    // entry→1→2→3→4→exit is path 0
    let walk = [Entry, blocks[0], blocks[1], blocks[2], blocks[3], Exit];
    let path: Vec<usize> = walk
        .windows(2)
        .map(|w| cfg.edges.iter().position(|e| e.src == w[0] && e.dst == w[1]).unwrap())
        .collect();
    assert_eq!(path_to_index(&lab, &cfg, &path).unwrap(), 0);
    assert!(matches!(index_to_path(&lab, &cfg, 5), Err(Error::OutOfRange { .. })));

    // zero edges: one per branching vertex at least
    let nonzero = lab.edge_val.iter().filter(|v| **v != 0).count();
    let with_out = cfg.vertices.iter().filter(|v| cfg.out_edges(v.key).next().is_some()).count();
    assert!(nonzero <= cfg.edges.len() - with_out);
    // resets: header 1 shares the entry edge (0), header 3 gets its own value
    assert_eq!(lab.reset_val.values().copied().collect::<BTreeSet<_>>(), BTreeSet::from([0, 3]));
}

#[test]
fn single_block_has_one_path() {
    let cfg = analyzed("contract C { fn f external selector=0x1 { PUSH 1 POP STOP } }");
    let lab = label_epp(&cfg);
    assert_eq!(lab.total(), 1);
    assert!(lab.edge_val.iter().all(|v| *v == 0));
}

#[test]
fn heaviest_successor_gets_zero_and_ties_go_to_lower_offset() {
    // b0 → {b3 (3 paths via two diamonds... ), exit}
    let cfg = analyzed(
        "contract C { fn f external selector=0x1 {
            CALLER JUMPI heavy
            STOP
         heavy: JUMPDEST CALLER JUMPI x PUSH 1 POP x: JUMPDEST CALLER JUMPI y STOP y: JUMPDEST STOP } }",
    );
    let lab = label_epp(&cfg);
    let out: Vec<(u128, u128)> = lab.order[&VertexKey::Block(0)]
        .iter()
        .map(|&i| (lab.num_paths[&cfg.edges[i].dst], lab.edge_val[i]))
        .collect();
    assert_eq!(out, vec![(4, 0), (1, 4)]);

    let tie = analyzed("contract C { fn f external selector=0x1 { CALLER JUMPI b STOP b: JUMPDEST STOP } }");
    let lab = label_epp(&tie);
    let first = lab.order[&VertexKey::Block(0)][0];
    assert_eq!(tie.edges[first].dst, VertexKey::Block(2));
}

#[test]
fn contexts_labeling() {
    let p = fixtures::program(fixtures::CONTEXTS);
    let idx = index_programs(&[p], &BTreeSet::from(["Contexts".to_string()])).unwrap();
    let cg = &idx.call_graph;
    let lab = &idx.ccp;
    let c = cg.node_of("Contexts", 2).unwrap();
    let b = cg.node_of("Contexts", 1).unwrap();
    assert_eq!(lab.num_ccs[c], 4);
    assert_eq!(lab.num_ccs[b], 2);
    let vals: Vec<(u32, u128)> = cg.in_edges(c).iter().map(|e| (e.id, lab.call_val[cg.edges.iter().position(|x| x == *e).unwrap()])).collect();
    assert_eq!(vals, vec![(1, 0), (2, 1), (4, 2)]);
    let sur = cg.edges.iter().position(|e| e.kind == CallKind::Surrogate).unwrap();
    assert_eq!(lab.call_val[sur], 1);
    assert_eq!(lab.return_val(sur), -1);
    assert_eq!(lab.return_word(sur, Width::W8), 0xff);

    // brute-force: every chain s→C and its sum
    let chains = chains_to(cg, c);
    let mut sums: Vec<u128> = chains.iter().map(|ch| context_to_id(lab, cg, ch).unwrap()).collect();
    sums.sort();
    assert_eq!(sums, vec![0, 1, 2, 3]);
    let three = id_to_context(lab, cg, c, 3).unwrap();
    assert_eq!(three.iter().map(|&i| cg.edges[i].kind).collect::<Vec<_>>(), vec![CallKind::Surrogate, CallKind::Internal]);
    for ch in chains {
        let id = context_to_id(lab, cg, &ch).unwrap();
        assert_eq!(id_to_context(lab, cg, c, id).unwrap(), ch);
    }
    let zero = id_to_context(lab, cg, c, 0).unwrap();
    assert!(zero.iter().all(|&i| lab.call_val[i] == 0));
    assert!(id_to_context(lab, cg, c, 4).is_err());
}

fn chains_to(cg: &CallGraph, f: NodeId) -> Vec<Vec<usize>> {
    fn go(cg: &CallGraph, n: NodeId, f: NodeId, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if n == f {
            out.push(cur.clone());
        }
        for (i, e) in cg.edges.iter().enumerate() {
            if e.caller == n {
                cur.push(i);
                go(cg, e.callee, f, cur, out);
                cur.pop();
            }
        }
    }
    let mut out = Vec::new();
    go(cg, ENTRY_NODE, f, &mut Vec::new(), &mut out);
    out
}

#[test]
fn leaf_called_once() {
    let p = assemble("contract L { fn f external selector=0x1 { ICALL g STOP } fn g internal { IRET } }").unwrap();
    let idx = index_programs(&[p], &BTreeSet::from(["L".to_string()])).unwrap();
    let g = idx.call_graph.node_of("L", 1).unwrap();
    assert_eq!(idx.ccp.num_ccs[g], 1);
    let e = idx.call_graph.edges.iter().position(|e| e.callee == g).unwrap();
    assert_eq!(idx.ccp.call_val[e], 0);
}

#[test]
fn combined_index_examples() {
    assert_eq!(combined_index(3, 4, 5, 4).unwrap().value, 19);
    assert_eq!(combined_index(0, 2, 5, 4).unwrap().value, 2);
    assert_eq!(split_index(19, 5), (3, 4));
    assert!(combined_index(4, 0, 5, 4).is_err());
    assert!(combined_index(0, 5, 5, 4).is_err());
}

#[test]
fn index_space_overflow_rejects() {
    let body = |n: usize| "PUSH 1 ".to_string() + &"PUSH 1 ADD ".repeat(n) + "STOP";
    let ok = assemble(&format!("contract C width=16 {{ fn f external selector=0x1 {{ {} }} }}", body(15))).unwrap();
    let idx = index_programs(&[ok], &BTreeSet::from(["C".to_string()])).unwrap();
    assert_eq!(idx.function("C", 0).unwrap().index_space(), 1 << 15);
    let bad = assemble(&format!("contract C width=16 {{ fn f external selector=0x1 {{ {} }} }}", body(16))).unwrap();
    assert!(matches!(
        index_programs(&[bad], &BTreeSet::from(["C".to_string()])),
        Err(Error::IndexSpaceOverflow { bits: 15, .. })
    ));
}

#[test]
fn fixture_round_trips_and_json() {
    for src in [fixtures::LOOP, fixtures::CONTEXTS] {
        let p = fixtures::program(src);
        let idx = index_programs(&[p.clone()], &BTreeSet::from([p.name.clone()])).unwrap();
        for fi in idx.functions.values() {
            for id in 0..fi.num_paths() {
                let path = index_to_path(&fi.epp, &fi.analyzed.cfg, id).unwrap();
                assert_eq!(path_to_index(&fi.epp, &fi.analyzed.cfg, &path).unwrap(), id);
            }
            for id in 0..fi.num_ccs {
                let ch = id_to_context(&idx.ccp, &idx.call_graph, fi.node, id).unwrap();
                assert_eq!(context_to_id(&idx.ccp, &idx.call_graph, &ch).unwrap(), id);
            }
        }
        let json = serde_json::to_string(&idx).unwrap();
        let back: ProgramIndex = serde_json::from_str(&json).unwrap();
        assert_eq!(back, idx);
    }
}

/// A random DAG over ENTRY, b1..bk, EXIT; targets are drawn above the source.
fn arb_dag() -> impl Strategy<Value = Cfg> {
    (0usize..=10).prop_flat_map(|k| {
        prop::collection::vec(prop::collection::vec(0usize..64, 1..=3), k + 1).prop_map(move |outs| {
            let key = |i: usize| match i {
                0 => Entry,
                i if i == k + 1 => Exit,
                i => VertexKey::Block(i),
            };
            let mut edges: Vec<Edge> = Vec::new();
            let mut seen: BTreeMap<(usize, usize), usize> = BTreeMap::new();
            let mut has_in = vec![false; k + 2];
            for (i, targets) in outs.iter().enumerate() {
                for &t in targets {
                    let d = i + 1 + t % (k + 1 - i);
                    let n = seen.entry((i, d)).or_insert(0);
                    let kind = match *n {
                        0 => EdgeKind::Real,
                        1 => EdgeKind::VirtualFalse,
                        2 => EdgeKind::VirtualTrue,
                        _ => continue,
                    };
                    *n += 1;
                    has_in[d] = true;
                    edges.push(Edge { src: key(i), dst: key(d), kind, branch: None, backedges: vec![] });
                }
            }
            for d in 1..=k {
                if !has_in[d] {
                    edges.push(Edge { src: Entry, dst: key(d), kind: EdgeKind::SurrogateEntry, branch: None, backedges: vec![] });
                }
            }
            let vertices = (0..=k + 1).map(|i| Vertex { key: key(i), start: 0, end: 0 }).collect();
            Cfg { contract: "R".into(), function: 0, vertices, edges }
        })
    })
}

/// A random acyclic call graph: node i may call any node j > i.
fn arb_call_graph() -> impl Strategy<Value = CallGraph> {
    (1usize..=7).prop_flat_map(|k| {
        (prop::collection::vec(prop::collection::vec(0usize..64, 0..=3), k), prop::collection::vec(any::<bool>(), k)).prop_map(
            move |(outs, ext)| {
                let mut cg = CallGraph::default();
                cg.nodes.push(FnRef { contract: String::new(), function: 0, name: "s".into(), external: false });
                for i in 0..k {
                    cg.nodes.push(FnRef { contract: "R".into(), function: i as u16, name: format!("f{i}"), external: ext[i] || i == 0 });
                }
                for n in 1..=k {
                    if cg.nodes[n].external {
                        cg.edges.push(CallEdge { id: 0, caller: ENTRY_NODE, callee: n, kind: CallKind::Entry, site: None });
                    }
                }
                let mut id = 1;
                for (i, targets) in outs.iter().enumerate() {
                    let caller = i + 1;
                    for &t in targets {
                        if caller == k {
                            break;
                        }
                        let callee = caller + 1 + t % (k - caller);
                        cg.edges.push(CallEdge { id, caller, callee, kind: CallKind::Internal, site: None });
                        id += 1;
                    }
                }
                cg
            },
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn epp_bijection_on_random_dags(cfg in arb_dag()) {
        prop_assert!(cfg.is_acyclic());
        check_epp(&cfg)?;
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn epp_bijection_on_random_functions(f in common::arb_function(10)) {
        check_epp(&analyze_function("R", &f).cfg)?;
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn ccp_bijection_on_random_call_graphs(cg in arb_call_graph()) {
        let lab = label_ccp(&cg);
        for n in 1..cg.nodes.len() {
            let chains = chains_to(&cg, n);
            prop_assert_eq!(lab.num_ccs[n], chains.len() as u128);
            let mut sums: Vec<u128> = chains.iter().map(|c| context_to_id(&lab, &cg, c).unwrap()).collect();
            sums.sort();
            prop_assert_eq!(sums, (0..chains.len() as u128).collect::<Vec<_>>());
            for c in chains {
                let id = context_to_id(&lab, &cg, &c).unwrap();
                prop_assert_eq!(id_to_context(&lab, &cg, n, id).unwrap(), c);
            }
        }
    }

    #[test]
    fn word_counter_matches_exact_context(cg in arb_call_graph(), walk in prop::collection::vec(0usize..64, 1..40), w in prop::sample::select(vec![8u32, 16, 32, 64])) {
        // random call/return walk from s keeping ctx as a Word
        let width = Width::new(w).unwrap();
        let lab = label_ccp(&cg);
        prop_assume!(lab.num_ccs.iter().all(|&n| n < width.index_limit()));
        let mut stack: Vec<usize> = Vec::new();
        let mut at = ENTRY_NODE;
        let mut ctx: u64 = 0;
        for step in walk {
            let outs: Vec<usize> = (0..cg.edges.len()).filter(|&i| cg.edges[i].caller == at).collect();
            if step % 3 == 0 || outs.is_empty() {
                if let Some(e) = stack.pop() {
                    ctx = width.add(ctx, lab.return_word(e, width)).0;
                    at = cg.edges[e].caller;
                }
            } else {
                let e = outs[step % outs.len()];
                ctx = width.add(ctx, width.wrap(lab.call_val[e])).0;
                stack.push(e);
                at = cg.edges[e].callee;
            }
            prop_assert_eq!(ctx as u128, context_to_id(&lab, &cg, &stack).unwrap());
        }
    }
}
