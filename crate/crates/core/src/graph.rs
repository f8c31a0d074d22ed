//! Causal and selection diagrams.
//!
//! Nodes are stored sorted by name, so a node's index doubles as its rank in
//! the canonical lexicographic order and every [`NodeSet`] iterates in that
//! order. Bidirected edges are kept natively; latent nodes only appear as
//! virtual nodes inside separation and model enumeration.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_NODES: usize = 64;

/// Node name. Ordered lexicographically.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(String);

impl NodeId {
    pub fn new(name: impl Into<String>) -> Self {
        NodeId(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for NodeId {
    fn from(s: &str) -> Self {
        NodeId(s.to_string())
    }
}

/// Set of node indices of one diagram, as a 64-bit mask.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeSet(u64);

impl NodeSet {
    pub const EMPTY: NodeSet = NodeSet(0);

    pub fn from_bits(bits: u64) -> Self {
        NodeSet(bits)
    }

    pub fn bits(self) -> u64 {
        self.0
    }

    pub fn single(i: usize) -> Self {
        NodeSet(1 << i)
    }

    pub fn contains(self, i: usize) -> bool {
        self.0 >> i & 1 == 1
    }

    pub fn insert(&mut self, i: usize) {
        self.0 |= 1 << i;
    }

    pub fn remove(&mut self, i: usize) {
        self.0 &= !(1 << i);
    }

    pub fn with(self, i: usize) -> Self {
        NodeSet(self.0 | 1 << i)
    }

    pub fn union(self, other: NodeSet) -> Self {
        NodeSet(self.0 | other.0)
    }

    pub fn intersection(self, other: NodeSet) -> Self {
        NodeSet(self.0 & other.0)
    }

    pub fn difference(self, other: NodeSet) -> Self {
        NodeSet(self.0 & !other.0)
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn is_subset(self, other: NodeSet) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn is_disjoint(self, other: NodeSet) -> bool {
        self.0 & other.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn first(self) -> Option<usize> {
        (self.0 != 0).then(|| self.0.trailing_zeros() as usize)
    }

    pub fn iter(self) -> impl Iterator<Item = usize> {
        let mut bits = self.0;
        std::iter::from_fn(move || {
            if bits == 0 {
                None
            } else {
                let i = bits.trailing_zeros() as usize;
                bits &= bits - 1;
                Some(i)
            }
        })
    }

    /// All subsets of `self` with at most `max_size` members, by cardinality
    /// and then lexicographically by member index.
    pub fn subsets_canonical(self, max_size: usize) -> Vec<NodeSet> {
        let members: Vec<usize> = self.iter().collect();
        let mut out = Vec::new();
        for size in 0..=max_size.min(members.len()) {
            let mut idx: Vec<usize> = (0..size).collect();
            loop {
                out.push(idx.iter().map(|&k| NodeSet::single(members[k])).fold(NodeSet::EMPTY, NodeSet::union));
                // advance the combination
                let mut pos = size;
                while pos > 0 && idx[pos - 1] == members.len() - size + pos - 1 {
                    pos -= 1;
                }
                if pos == 0 {
                    break;
                }
                idx[pos - 1] += 1;
                for k in pos..size {
                    idx[k] = idx[k - 1] + 1;
                }
            }
        }
        out
    }
}

impl FromIterator<usize> for NodeSet {
    fn from_iter<T: IntoIterator<Item = usize>>(iter: T) -> Self {
        iter.into_iter().fold(NodeSet::EMPTY, NodeSet::with)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Observed,
    Selection,
}

/// Arrow deletions `G_{X̄ Z̲}`: edges into `cut_incoming`, edges out of
/// `cut_outgoing`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct Mutilation {
    pub cut_incoming: NodeSet,
    pub cut_outgoing: NodeSet,
}

impl Mutilation {
    pub fn incoming(set: NodeSet) -> Self {
        Mutilation {
            cut_incoming: set,
            cut_outgoing: NodeSet::EMPTY,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.cut_incoming.is_empty() && self.cut_outgoing.is_empty()
    }
}

/// A mixed graph over named nodes: directed edges plus bidirected arcs.
/// Selection nodes, when present, are ordinary roots flagged by kind.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CausalDiagram {
    names: Vec<NodeId>,
    kinds: Vec<NodeKind>,
    parents: Vec<NodeSet>,
    children: Vec<NodeSet>,
    spouses: Vec<NodeSet>,
}

impl CausalDiagram {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, i: usize) -> &NodeId {
        &self.names[i]
    }

    pub fn names(&self) -> &[NodeId] {
        &self.names
    }

    pub fn kind(&self, i: usize) -> NodeKind {
        self.kinds[i]
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.binary_search_by(|n| n.as_str().cmp(name)).ok()
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.index(name).ok_or_else(|| Error::UnknownNode(name.to_string()))
    }

    /// Resolves names to a set; fails on the first unknown name.
    pub fn set_of<I, S>(&self, names: I) -> Result<NodeSet>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        names
            .into_iter()
            .map(|n| self.index_of(n.as_ref()))
            .collect::<Result<Vec<_>>>()
            .map(|v| v.into_iter().collect())
    }

    pub fn names_of(&self, set: NodeSet) -> BTreeSet<NodeId> {
        set.iter().map(|i| self.names[i].clone()).collect()
    }

    pub fn all(&self) -> NodeSet {
        if self.len() == 64 {
            NodeSet::from_bits(u64::MAX)
        } else {
            NodeSet::from_bits((1u64 << self.len()) - 1)
        }
    }

    pub fn observed(&self) -> NodeSet {
        (0..self.len()).filter(|&i| self.kinds[i] == NodeKind::Observed).collect()
    }

    pub fn selection_nodes(&self) -> NodeSet {
        (0..self.len()).filter(|&i| self.kinds[i] == NodeKind::Selection).collect()
    }

    pub fn parents(&self, i: usize) -> NodeSet {
        self.parents[i]
    }

    pub fn children(&self, i: usize) -> NodeSet {
        self.children[i]
    }

    /// Bidirected neighbours of `i`.
    pub fn spouses(&self, i: usize) -> NodeSet {
        self.spouses[i]
    }

    pub fn directed_edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.len()).flat_map(move |a| self.children[a].iter().map(move |b| (a, b)))
    }

    /// Bidirected arcs as `(a, b)` with `a < b`.
    pub fn bidirected_edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.len()).flat_map(move |a| self.spouses[a].iter().filter(move |&b| b > a).map(move |b| (a, b)))
    }

    pub fn edge_count(&self) -> usize {
        self.directed_edges().count() + self.bidirected_edges().count()
    }

    fn check_subset(&self, set: NodeSet) -> Result<()> {
        match set.difference(self.all()).first() {
            Some(i) => Err(Error::UnknownNode(format!("#{i}"))),
            None => Ok(()),
        }
    }

    /// Deletes arrows into `cut_incoming` (bidirected arcs included, since
    /// they carry an arrowhead at both ends) and arrows out of `cut_outgoing`.
    pub fn mutilate(&self, m: &Mutilation) -> Result<CausalDiagram> {
        self.check_subset(m.cut_incoming)?;
        self.check_subset(m.cut_outgoing)?;
        let mut g = self.clone();
        for i in 0..g.len() {
            if m.cut_incoming.contains(i) {
                g.parents[i] = NodeSet::EMPTY;
                g.spouses[i] = NodeSet::EMPTY;
            } else {
                g.parents[i] = g.parents[i].difference(m.cut_outgoing);
                g.spouses[i] = g.spouses[i].difference(m.cut_incoming);
            }
            if m.cut_outgoing.contains(i) {
                g.children[i] = NodeSet::EMPTY;
            } else {
                g.children[i] = g.children[i].difference(m.cut_incoming);
            }
        }
        Ok(g)
    }

    /// Reflexive ancestors along directed edges.
    pub fn ancestors(&self, nodes: NodeSet) -> Result<NodeSet> {
        self.check_subset(nodes)?;
        Ok(self.closure(nodes, |i| self.parents[i]))
    }

    /// Reflexive descendants along directed edges.
    pub fn descendants(&self, nodes: NodeSet) -> Result<NodeSet> {
        self.check_subset(nodes)?;
        Ok(self.closure(nodes, |i| self.children[i]))
    }

    fn closure(&self, start: NodeSet, step: impl Fn(usize) -> NodeSet) -> NodeSet {
        let mut seen = start;
        let mut frontier = start;
        while !frontier.is_empty() {
            let next = frontier.iter().fold(NodeSet::EMPTY, |acc, i| acc.union(step(i)));
            frontier = next.difference(seen);
            seen = seen.union(next);
        }
        seen
    }

    /// `Z(W)`: members of `z` that are not ancestors of any `w` node once
    /// arrows into `x` are removed.
    pub fn z_outside_ancestors_of_w(&self, z: NodeSet, w: NodeSet, x: NodeSet) -> Result<NodeSet> {
        self.check_subset(z)?;
        let g = self.mutilate(&Mutilation::incoming(x))?;
        Ok(z.difference(g.ancestors(w)?))
    }

    /// The diagram with selection nodes removed. Node indices change.
    pub fn without_selection(&self) -> CausalDiagram {
        let mut spec = self.to_spec();
        spec.selection_edges.clear();
        spec.build_causal().expect("subgraph of a valid diagram is valid")
    }

    pub fn to_spec(&self) -> DiagramSpec {
        let mut spec = DiagramSpec::default();
        for i in 0..self.len() {
            if self.kinds[i] == NodeKind::Observed {
                spec.nodes.push(self.names[i].as_str().to_string());
            }
        }
        for (a, b) in self.directed_edges() {
            let (na, nb) = (self.names[a].as_str().to_string(), self.names[b].as_str().to_string());
            if self.kinds[a] == NodeKind::Selection {
                spec.selection_edges.push((na, nb));
            } else {
                spec.edges.push((na, nb));
            }
        }
        for (a, b) in self.bidirected_edges() {
            spec.bidirected.push((self.names[a].as_str().to_string(), self.names[b].as_str().to_string()));
        }
        spec
    }
}

/// Unvalidated diagram declaration, as read from a file or built in code.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiagramSpec {
    pub nodes: Vec<String>,
    pub edges: Vec<(String, String)>,
    pub bidirected: Vec<(String, String)>,
    pub selection_edges: Vec<(String, String)>,
}

impl DiagramSpec {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn node(mut self, name: &str) -> Self {
        self.nodes.push(name.to_string());
        self
    }

    pub fn nodes(mut self, names: &[&str]) -> Self {
        self.nodes.extend(names.iter().map(|s| s.to_string()));
        self
    }

    pub fn edge(mut self, a: &str, b: &str) -> Self {
        self.edges.push((a.to_string(), b.to_string()));
        self
    }

    pub fn bidir(mut self, a: &str, b: &str) -> Self {
        self.bidirected.push((a.to_string(), b.to_string()));
        self
    }

    pub fn sel(mut self, s: &str, b: &str) -> Self {
        self.selection_edges.push((s.to_string(), b.to_string()));
        self
    }

    /// Checks every diagram invariant without building.
    pub fn validate(&self) -> Result<()> {
        self.build_causal().map(|_| ())
    }

    pub fn build(self) -> Result<SelectionDiagram> {
        self.build_causal().map(SelectionDiagram)
    }

    fn build_causal(&self) -> Result<CausalDiagram> {
        let mut kinds: BTreeMap<&str, NodeKind> = BTreeMap::new();
        for n in &self.nodes {
            kinds.insert(n.as_str(), NodeKind::Observed);
        }
        for (s, _) in &self.selection_edges {
            kinds.insert(s.as_str(), NodeKind::Selection);
        }
        if kinds.len() > MAX_NODES {
            return Err(Error::TooManyNodes(kinds.len()));
        }
        let names: Vec<NodeId> = kinds.keys().map(|&n| NodeId::new(n)).collect();
        let n = names.len();
        let lookup = |name: &str| kinds.keys().position(|&k| k == name);

        let mut parents = vec![NodeSet::EMPTY; n];
        let mut children = vec![NodeSet::EMPTY; n];
        let mut spouses = vec![NodeSet::EMPTY; n];
        let resolve = |a: &str, b: &str| -> Result<(usize, usize)> {
            let ia = lookup(a).ok_or_else(|| Error::DanglingEdge {
                from: a.to_string(),
                to: b.to_string(),
                missing: a.to_string(),
            })?;
            let ib = lookup(b).ok_or_else(|| Error::DanglingEdge {
                from: a.to_string(),
                to: b.to_string(),
                missing: b.to_string(),
            })?;
            if ia == ib {
                return Err(Error::SelfLoop(a.to_string()));
            }
            Ok((ia, ib))
        };

        let kind_vec: Vec<NodeKind> = kinds.values().copied().collect();
        for (a, b) in &self.edges {
            let (ia, ib) = resolve(a, b)?;
            if kind_vec[ib] == NodeKind::Selection {
                return Err(Error::BadSelectionNode {
                    node: b.clone(),
                    reason: format!("has parent {a}"),
                });
            }
            if kind_vec[ia] == NodeKind::Selection {
                return Err(Error::BadSelectionNode {
                    node: a.clone(),
                    reason: "selection edges must be declared with `sel`".into(),
                });
            }
            children[ia].insert(ib);
            parents[ib].insert(ia);
        }
        for (a, b) in &self.bidirected {
            let (ia, ib) = resolve(a, b)?;
            for (i, name) in [(ia, a), (ib, b)] {
                if kind_vec[i] == NodeKind::Selection {
                    return Err(Error::BadSelectionNode {
                        node: name.clone(),
                        reason: "incident to a bidirected arc".into(),
                    });
                }
            }
            spouses[ia].insert(ib);
            spouses[ib].insert(ia);
        }
        for (s, b) in &self.selection_edges {
            let (is, ib) = resolve(s, b)?;
            if kind_vec[ib] == NodeKind::Selection {
                return Err(Error::BadSelectionNode {
                    node: s.clone(),
                    reason: format!("points to selection node {b}"),
                });
            }
            children[is].insert(ib);
            parents[ib].insert(is);
        }

        let g = CausalDiagram {
            names,
            kinds: kind_vec,
            parents,
            children,
            spouses,
        };
        if let Some(cycle) = find_cycle(&g) {
            return Err(Error::Cycle(cycle.into_iter().map(|i| g.names[i].as_str().to_string()).collect()));
        }
        Ok(g)
    }
}

fn find_cycle(g: &CausalDiagram) -> Option<Vec<usize>> {
    // 0 = unvisited, 1 = on stack, 2 = done
    let mut state = vec![0u8; g.len()];
    let mut stack: Vec<usize> = Vec::new();

    fn dfs(g: &CausalDiagram, v: usize, state: &mut [u8], stack: &mut Vec<usize>) -> Option<Vec<usize>> {
        state[v] = 1;
        stack.push(v);
        for c in g.children(v).iter() {
            match state[c] {
                0 => {
                    if let Some(cyc) = dfs(g, c, state, stack) {
                        return Some(cyc);
                    }
                }
                1 => {
                    let pos = stack.iter().position(|&u| u == c).unwrap();
                    let mut cyc = stack[pos..].to_vec();
                    cyc.push(c);
                    return Some(cyc);
                }
                _ => {}
            }
        }
        stack.pop();
        state[v] = 2;
        None
    }

    (0..g.len()).find_map(|v| if state[v] == 0 { dfs(g, v, &mut state, &mut stack) } else { None })
}

/// A validated selection diagram: a causal diagram whose selection nodes are
/// roots pointing only at observed nodes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionDiagram(CausalDiagram);

impl SelectionDiagram {
    pub fn graph(&self) -> &CausalDiagram {
        &self.0
    }

    pub fn into_graph(self) -> CausalDiagram {
        self.0
    }
}

impl std::ops::Deref for SelectionDiagram {
    type Target = CausalDiagram;

    fn deref(&self) -> &CausalDiagram {
        &self.0
    }
}

/// Validates a declaration: acyclic, no self-loops, no undeclared endpoints,
/// selection nodes are roots without bidirected arcs.
pub fn validate(spec: &DiagramSpec) -> Result<()> {
    spec.validate()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fig_age() -> SelectionDiagram {
        DiagramSpec::new()
            .nodes(&["X", "Y", "Z"])
            .edge("Z", "X")
            .edge("Z", "Y")
            .edge("X", "Y")
            .bidir("X", "Y")
            .sel("S", "Z")
            .build()
            .unwrap()
    }

    #[test]
    fn validate_accepts_well_formed() {
        let spec = DiagramSpec::new().nodes(&["X", "Y", "Z"]).edge("X", "Y").edge("Z", "X").sel("S", "Z");
        assert!(validate(&spec).is_ok());
    }

    #[test]
    fn validate_rejects_two_cycle() {
        let spec = DiagramSpec::new().nodes(&["X", "Y"]).edge("X", "Y").edge("Y", "X");
        assert!(matches!(validate(&spec), Err(Error::Cycle(_))));
    }

    #[test]
    fn validate_rejects_selection_with_parent() {
        let spec = DiagramSpec::new().nodes(&["W", "Z"]).sel("S", "Z").edge("W", "S");
        assert!(matches!(validate(&spec), Err(Error::BadSelectionNode { .. })));
    }

    #[test]
    fn validate_rejects_selection_bidirected_and_chained() {
        let spec = DiagramSpec::new().nodes(&["Z"]).sel("S", "Z").bidir("S", "Z");
        assert!(matches!(validate(&spec), Err(Error::BadSelectionNode { .. })));
        let spec = DiagramSpec::new().nodes(&["Z"]).sel("S", "Z").sel("T", "S");
        assert!(matches!(validate(&spec), Err(Error::BadSelectionNode { .. })));
    }

    #[test]
    fn validate_rejects_dangling_and_self_loops() {
        let spec = DiagramSpec::new().nodes(&["X"]).edge("X", "Q");
        assert!(matches!(validate(&spec), Err(Error::DanglingEdge { .. })));
        let spec = DiagramSpec::new().nodes(&["X"]).bidir("X", "X");
        assert!(matches!(validate(&spec), Err(Error::SelfLoop(_))));
    }

    #[test]
    fn mutilate_chain() {
        let g = DiagramSpec::new().nodes(&["X", "Y", "Z"]).edge("Z", "X").edge("X", "Y").build().unwrap();
        let x = g.set_of(["X"]).unwrap();
        let m = g.mutilate(&Mutilation::incoming(x)).unwrap();
        let edges: Vec<_> = m.directed_edges().map(|(a, b)| (m.name(a).to_string(), m.name(b).to_string())).collect();
        assert_eq!(edges, vec![("X".to_string(), "Y".to_string())]);
        assert_eq!(m.names(), g.names());
    }

    #[test]
    fn mutilate_removes_bidirected_at_cut_node() {
        let g = fig_age();
        let x = g.set_of(["X"]).unwrap();
        let m = g.mutilate(&Mutilation::incoming(x)).unwrap();
        let (iz, iy, ix) = (g.index("Z").unwrap(), g.index("Y").unwrap(), g.index("X").unwrap());
        assert!(m.children(iz).contains(iy));
        assert!(!m.children(iz).contains(ix));
        assert!(m.spouses(ix).is_empty());
        assert!(m.spouses(iy).is_empty());
    }

    #[test]
    fn mutilate_outgoing_keeps_bidirected() {
        let g = fig_age();
        let x = g.set_of(["X"]).unwrap();
        let m = g
            .mutilate(&Mutilation {
                cut_incoming: NodeSet::EMPTY,
                cut_outgoing: x,
            })
            .unwrap();
        let (ix, iy) = (g.index("X").unwrap(), g.index("Y").unwrap());
        assert!(m.children(ix).is_empty());
        assert!(m.spouses(ix).contains(iy));
    }

    #[test]
    fn empty_mutilation_is_identity() {
        let g = fig_age();
        assert_eq!(&g.mutilate(&Mutilation::default()).unwrap(), g.graph());
    }

    #[test]
    fn ancestors_of_chain() {
        let g = DiagramSpec::new().nodes(&["A", "B", "C"]).edge("A", "B").edge("B", "C").build().unwrap();
        let c = g.set_of(["C"]).unwrap();
        assert_eq!(g.ancestors(c).unwrap(), g.all());
        assert_eq!(g.ancestors(NodeSet::EMPTY).unwrap(), NodeSet::EMPTY);
    }

    #[test]
    fn ancestors_ignore_bidirected() {
        let g = DiagramSpec::new().nodes(&["A", "B"]).bidir("A", "B").build().unwrap();
        let b = g.set_of(["B"]).unwrap();
        assert_eq!(g.ancestors(b).unwrap(), b);
    }

    #[test]
    fn z_outside_ancestors_edge_cases() {
        let g = fig_age();
        let z = g.set_of(["Z", "X"]).unwrap();
        assert_eq!(g.z_outside_ancestors_of_w(z, NodeSet::EMPTY, NodeSet::EMPTY).unwrap(), z);
        assert_eq!(g.z_outside_ancestors_of_w(z, z, NodeSet::EMPTY).unwrap(), NodeSet::EMPTY);
    }

    #[test]
    fn unknown_node_errors() {
        let g = fig_age();
        assert!(matches!(g.set_of(["Q"]), Err(Error::UnknownNode(_))));
        assert!(g.ancestors(NodeSet::single(40)).is_err());
    }

    #[test]
    fn canonical_subsets_order() {
        let s: NodeSet = [0, 2, 5].into_iter().collect();
        let subs = s.subsets_canonical(2);
        let as_vecs: Vec<Vec<usize>> = subs.iter().map(|x| x.iter().collect()).collect();
        assert_eq!(as_vecs, vec![vec![], vec![0], vec![2], vec![5], vec![0, 2], vec![0, 5], vec![2, 5]]);
        assert_eq!(s.subsets_canonical(10).len(), 8);
    }
}
