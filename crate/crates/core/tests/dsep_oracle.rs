mod common;

use std::collections::BTreeSet;

use common::{observed_indices, subsets, to_set, Edges};
use proptest::prelude::*;
use transport_core::dsep::{d_separated, path_is_active, witness_path, SeparationQuery};
use transport_core::graph::{CausalDiagram, DiagramSpec, Mutilation, NodeSet};
use transport_core::verify::{random_diagram, DiagramConfig};

/// Exhaustive comparison over singleton pairs and every conditioning set.
fn agree_exhaustively(g: &CausalDiagram, cut_in: &BTreeSet<usize>) -> usize {
    let oracle = Edges::of(g).mutilated(cut_in, &BTreeSet::new());
    let m = Mutilation::incoming(to_set(cut_in));
    let mut checked = 0;
    for x in 0..g.len() {
        for y in 0..g.len() {
            if x == y {
                continue;
            }
            let rest: Vec<usize> = (0..g.len()).filter(|&v| v != x && v != y).collect();
            for z in subsets(&rest) {
                let q = SeparationQuery::new(NodeSet::single(x), NodeSet::single(y), to_set(&z)).under(m);
                let fast = d_separated(g, &q).unwrap();
                assert_eq!(fast, oracle.separated(x, y, &z), "{:?} {x} {y} {z:?} cut {cut_in:?}", g.to_spec());
                let w = witness_path(g, &q).unwrap();
                assert_eq!(w.is_none(), fast);
                if let Some(p) = w {
                    assert!(path_is_active(g, &q, &p).unwrap(), "{p}");
                }
                checked += 1;
            }
        }
    }
    checked
}

#[test]
fn corpus_agrees_with_path_enumeration() {
    for (name, f) in common::corpus() {
        let g = f.diagram.graph();
        let x = g.index("X").map(|i| BTreeSet::from([i])).unwrap_or_default();
        assert!(agree_exhaustively(g, &BTreeSet::new()) > 0, "{name}");
        agree_exhaustively(g, &x);
    }
}

#[test]
fn symmetric_on_corpus() {
    for (_, f) in common::corpus() {
        let g = f.diagram.graph();
        for x in 0..g.len() {
            for y in 0..g.len() {
                if x != y {
                    let q = SeparationQuery::new(NodeSet::single(x), NodeSet::single(y), NodeSet::EMPTY);
                    assert_eq!(d_separated(g, &q).unwrap(), d_separated(g, &q.symmetric()).unwrap());
                }
            }
        }
    }
}

#[test]
fn selection_confounded_witness() {
    let f = common::load("selection_into_outcome_confounded.dg");
    let g = f.diagram.graph();
    let q = SeparationQuery::new(g.set_of(["S"]).unwrap(), g.set_of(["Y"]).unwrap(), g.set_of(["X"]).unwrap())
        .under(Mutilation::incoming(g.set_of(["X"]).unwrap()));
    let p = witness_path(g, &q).unwrap().unwrap();
    assert_eq!(p.to_string(), "S -> Y");
    // with the arc kept, the selection node also reaches the treatment side
    let f = common::load("no_admissible_set.dg");
    let g = f.diagram.graph();
    let q = SeparationQuery::new(g.set_of(["S"]).unwrap(), g.set_of(["Y"]).unwrap(), g.set_of(["X", "Z"]).unwrap())
        .under(Mutilation::incoming(g.set_of(["X"]).unwrap()));
    let p = witness_path(g, &q).unwrap().unwrap();
    assert_eq!(p.to_string(), "S -> Z <-> Y");
}

fn arb_diagram() -> impl Strategy<Value = CausalDiagram> {
    (any::<u64>(), 2usize..=7, 0.1f64..0.6, 0.0f64..0.3, 0usize..=2).prop_map(|(seed, n, e, b, s)| {
        random_diagram(
            seed,
            &DiagramConfig {
                observed: n,
                edge_prob: e,
                bidir_prob: b,
                selection_nodes: s,
            },
        )
        .into_graph()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_diagrams_agree(g in arb_diagram(), cut in any::<u64>()) {
        let obs = observed_indices(&g);
        let cut_in: BTreeSet<usize> = obs.iter().copied().filter(|&i| cut >> i & 1 == 1 && cut % 3 == 0).collect();
        agree_exhaustively(&g, &cut_in);
    }

    #[test]
    fn mutilation_is_idempotent_and_only_removes(g in arb_diagram(), a in any::<u64>(), b in any::<u64>()) {
        let obs = to_set(&observed_indices(&g).into_iter().collect());
        let m = Mutilation { cut_incoming: NodeSet::from_bits(a).intersection(obs), cut_outgoing: NodeSet::from_bits(b).intersection(obs) };
        let once = g.mutilate(&m).unwrap();
        prop_assert_eq!(&once.mutilate(&m).unwrap(), &once);
        prop_assert_eq!(once.names(), g.names());
        for (u, v) in once.directed_edges() {
            prop_assert!(g.children(u).contains(v));
            prop_assert!(!m.cut_incoming.contains(v) && !m.cut_outgoing.contains(u));
        }
        for (u, v) in once.bidirected_edges() {
            prop_assert!(g.spouses(u).contains(v));
            prop_assert!(!m.cut_incoming.contains(u) && !m.cut_incoming.contains(v));
        }
    }

    #[test]
    fn ancestors_monotone_and_reflexive(g in arb_diagram(), a in any::<u64>(), b in any::<u64>()) {
        let all = g.all();
        let small = NodeSet::from_bits(a & b).intersection(all);
        let big = NodeSet::from_bits(a).intersection(all).union(small);
        let (sa, ba) = (g.ancestors(small).unwrap(), g.ancestors(big).unwrap());
        prop_assert!(small.is_subset(sa));
        prop_assert!(sa.is_subset(ba));
        let oracle = Edges::of(&g).ancestors(&big.iter().collect());
        prop_assert_eq!(ba, to_set(&oracle));
    }
}

#[test]
fn rejects_bad_queries() {
    let g = DiagramSpec::new().nodes(&["A", "B"]).edge("A", "B").build().unwrap().into_graph();
    let q = SeparationQuery::new(NodeSet::single(0), NodeSet::single(5), NodeSet::EMPTY);
    assert!(d_separated(&g, &q).is_err());
}
