//! d-separation by reachability over `(node, direction)` states.
//!
//! A bidirected arc `a <-> b` is traversed as a virtual latent parent shared
//! by `a` and `b`: leaving `a` towards its parents also reaches `b` with an
//! arrowhead into `b`. The virtual node is never conditioned on.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{CausalDiagram, Mutilation, NodeId, NodeSet};

/// `(x ⊥ y | given)` evaluated on `graph` mutilated by `mutilation`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SeparationQuery {
    pub x: NodeSet,
    pub y: NodeSet,
    pub given: NodeSet,
    pub mutilation: Mutilation,
}

impl SeparationQuery {
    pub fn new(x: NodeSet, y: NodeSet, given: NodeSet) -> Self {
        SeparationQuery {
            x,
            y,
            given,
            mutilation: Mutilation::default(),
        }
    }

    pub fn under(mut self, mutilation: Mutilation) -> Self {
        self.mutilation = mutilation;
        self
    }

    pub fn symmetric(self) -> Self {
        SeparationQuery {
            x: self.y,
            y: self.x,
            ..self
        }
    }

    fn check(&self, g: &CausalDiagram) -> Result<()> {
        let all = g.all();
        for set in [self.x, self.y, self.given, self.mutilation.cut_incoming, self.mutilation.cut_outgoing] {
            if let Some(i) = set.difference(all).first() {
                return Err(Error::UnknownNode(format!("#{i}")));
            }
        }
        for (a, b) in [(self.x, self.y), (self.x, self.given), (self.y, self.given)] {
            if let Some(i) = a.intersection(b).first() {
                return Err(Error::OverlappingSets(g.name(i).to_string()));
            }
        }
        Ok(())
    }

    pub fn certificate(&self, g: &CausalDiagram) -> Certificate {
        Certificate {
            x: g.names_of(self.x),
            y: g.names_of(self.y),
            given: g.names_of(self.given),
            cut_incoming: g.names_of(self.mutilation.cut_incoming),
            cut_outgoing: g.names_of(self.mutilation.cut_outgoing),
        }
    }
}

/// A separation statement by node name; the replayable form stored in
/// derivation traces.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Certificate {
    pub x: BTreeSet<NodeId>,
    pub y: BTreeSet<NodeId>,
    pub given: BTreeSet<NodeId>,
    #[serde(default)]
    pub cut_incoming: BTreeSet<NodeId>,
    #[serde(default)]
    pub cut_outgoing: BTreeSet<NodeId>,
}

impl Certificate {
    pub fn resolve(&self, g: &CausalDiagram) -> Result<SeparationQuery> {
        let set = |s: &BTreeSet<NodeId>| g.set_of(s.iter().map(NodeId::as_str));
        Ok(SeparationQuery {
            x: set(&self.x)?,
            y: set(&self.y)?,
            given: set(&self.given)?,
            mutilation: Mutilation {
                cut_incoming: set(&self.cut_incoming)?,
                cut_outgoing: set(&self.cut_outgoing)?,
            },
        })
    }

    pub fn holds(&self, g: &CausalDiagram) -> Result<bool> {
        d_separated(g, &self.resolve(g)?)
    }
}

fn join(set: &BTreeSet<NodeId>) -> String {
    set.iter().map(NodeId::as_str).collect::<Vec<_>>().join(",")
}

impl fmt::Display for Certificate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({} _||_ {}", join(&self.x), join(&self.y))?;
        if !self.given.is_empty() {
            write!(f, " | {}", join(&self.given))?;
        }
        write!(f, ")")?;
        if !self.cut_incoming.is_empty() || !self.cut_outgoing.is_empty() {
            write!(f, " in G")?;
            if !self.cut_incoming.is_empty() {
                write!(f, "[no arrows into {}]", join(&self.cut_incoming))?;
            }
            if !self.cut_outgoing.is_empty() {
                write!(f, "[no arrows out of {}]", join(&self.cut_outgoing))?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    /// `a -> b`
    Forward,
    /// `a <- b`
    Backward,
    /// `a <-> b`
    Bidirected,
}

impl Link {
    fn head_at_end(self) -> bool {
        matches!(self, Link::Forward | Link::Bidirected)
    }

    fn head_at_start(self) -> bool {
        matches!(self, Link::Backward | Link::Bidirected)
    }

    fn arrow(self) -> &'static str {
        match self {
            Link::Forward => "->",
            Link::Backward => "<-",
            Link::Bidirected => "<->",
        }
    }
}

/// An active path: `nodes[i]` and `nodes[i + 1]` are joined by `links[i]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivePath {
    pub nodes: Vec<NodeId>,
    pub links: Vec<Link>,
}

impl fmt::Display for ActivePath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, n) in self.nodes.iter().enumerate() {
            if i > 0 {
                write!(f, " {} ", self.links[i - 1].arrow())?;
            }
            write!(f, "{n}")?;
        }
        Ok(())
    }
}

const UP: usize = 0;
const DOWN: usize = 1;

struct Reach {
    /// predecessor state and link for every visited state
    pred: Vec<[Option<(usize, usize, Link)>; 2]>,
    visited: Vec<[bool; 2]>,
    hit: Option<(usize, usize)>,
}

fn reach(g: &CausalDiagram, q: &SeparationQuery, stop_at_y: bool) -> Reach {
    let n = g.len();
    let anc_given = g.ancestors(q.given).expect("checked subset");
    let mut r = Reach {
        pred: vec![[None, None]; n],
        visited: vec![[false; 2]; n],
        hit: None,
    };
    let mut queue = VecDeque::new();
    for x in q.x.iter() {
        r.visited[x][UP] = true;
        queue.push_back((x, UP));
    }
    while let Some((v, dir)) = queue.pop_front() {
        if q.y.contains(v) {
            r.hit = Some((v, dir));
            if stop_at_y {
                break;
            }
        }
        let mut next: Vec<(usize, usize, Link)> = Vec::new();
        let in_given = q.given.contains(v);
        if dir == UP {
            if !in_given {
                next.extend(g.parents(v).iter().map(|p| (p, UP, Link::Backward)));
                next.extend(g.spouses(v).iter().map(|s| (s, DOWN, Link::Bidirected)));
                next.extend(g.children(v).iter().map(|c| (c, DOWN, Link::Forward)));
            }
        } else {
            if !in_given {
                next.extend(g.children(v).iter().map(|c| (c, DOWN, Link::Forward)));
            }
            if anc_given.contains(v) {
                next.extend(g.parents(v).iter().map(|p| (p, UP, Link::Backward)));
                next.extend(g.spouses(v).iter().map(|s| (s, DOWN, Link::Bidirected)));
            }
        }
        for (w, d, link) in next {
            if !r.visited[w][d] {
                r.visited[w][d] = true;
                r.pred[w][d] = Some((v, dir, link));
                queue.push_back((w, d));
            }
        }
    }
    r
}

/// True iff every path between `q.x` and `q.y` is blocked by `q.given` in the
/// mutilated graph. Empty `x` or `y` is vacuously separated.
pub fn d_separated(g: &CausalDiagram, q: &SeparationQuery) -> Result<bool> {
    q.check(g)?;
    if q.x.is_empty() || q.y.is_empty() {
        return Ok(true);
    }
    let m = if q.mutilation.is_identity() {
        None
    } else {
        Some(g.mutilate(&q.mutilation)?)
    };
    let g = m.as_ref().unwrap_or(g);
    Ok(reach(g, q, true).hit.is_none())
}

/// Nodes reachable from `q.x` along active paths given `q.given`; `q.y` is
/// ignored.
pub fn reachable(g: &CausalDiagram, q: &SeparationQuery) -> Result<NodeSet> {
    q.check(g)?;
    let m = g.mutilate(&q.mutilation)?;
    let r = reach(&m, q, false);
    Ok((0..m.len())
        .filter(|&v| (r.visited[v][UP] || r.visited[v][DOWN]) && !q.given.contains(v) && !q.x.contains(v))
        .collect())
}

/// One active path certifying dependence, or `None` when separated.
pub fn witness_path(g: &CausalDiagram, q: &SeparationQuery) -> Result<Option<ActivePath>> {
    q.check(g)?;
    if q.x.is_empty() || q.y.is_empty() {
        return Ok(None);
    }
    let m = g.mutilate(&q.mutilation)?;
    let r = reach(&m, q, true);
    let Some((mut v, mut dir)) = r.hit else {
        return Ok(None);
    };
    let mut nodes = vec![v];
    let mut links = Vec::new();
    while let Some((p, pd, link)) = r.pred[v][dir] {
        nodes.push(p);
        links.push(link);
        v = p;
        dir = pd;
    }
    nodes.reverse();
    links.reverse();
    let simple = nodes.iter().collect::<BTreeSet<_>>().len() == nodes.len();
    let path = if simple {
        Some((nodes, links))
    } else {
        simple_active_path(&m, q)
    };
    Ok(path.map(|(nodes, links)| ActivePath {
        nodes: nodes.into_iter().map(|i| m.name(i).clone()).collect(),
        links,
    }))
}

/// Depth-first search for a simple active path; fallback when the
/// breadth-first walk revisits a node.
fn simple_active_path(g: &CausalDiagram, q: &SeparationQuery) -> Option<(Vec<usize>, Vec<Link>)> {
    let anc_given = g.ancestors(q.given).ok()?;
    let neighbours = |v: usize| -> Vec<(usize, Link)> {
        let mut out: Vec<(usize, Link)> = g.children(v).iter().map(|c| (c, Link::Forward)).collect();
        out.extend(g.parents(v).iter().map(|p| (p, Link::Backward)));
        out.extend(g.spouses(v).iter().map(|s| (s, Link::Bidirected)));
        out
    };
    let interior_open = |v: usize, into: Link, out: Link| {
        if into.head_at_end() && out.head_at_start() {
            anc_given.contains(v)
        } else {
            !q.given.contains(v)
        }
    };

    fn go(
        v: usize,
        nodes: &mut Vec<usize>,
        links: &mut Vec<Link>,
        q: &SeparationQuery,
        neighbours: &dyn Fn(usize) -> Vec<(usize, Link)>,
        interior_open: &dyn Fn(usize, Link, Link) -> bool,
    ) -> bool {
        for (w, link) in neighbours(v) {
            if nodes.contains(&w) {
                continue;
            }
            if let Some(&prev) = links.last() {
                if !interior_open(v, prev, link) {
                    continue;
                }
            }
            nodes.push(w);
            links.push(link);
            if q.y.contains(w) || go(w, nodes, links, q, neighbours, interior_open) {
                return true;
            }
            nodes.pop();
            links.pop();
        }
        false
    }

    for x in q.x.iter() {
        let mut nodes = vec![x];
        let mut links = Vec::new();
        if go(x, &mut nodes, &mut links, q, &neighbours, &interior_open) {
            return Some((nodes, links));
        }
    }
    None
}

/// Checks that `path` is a simple active path from `q.x` to `q.y` on the
/// mutilated graph.
pub fn path_is_active(g: &CausalDiagram, q: &SeparationQuery, path: &ActivePath) -> Result<bool> {
    q.check(g)?;
    let m = g.mutilate(&q.mutilation)?;
    let idx: Vec<usize> = path.nodes.iter().map(|n| m.index_of(n.as_str())).collect::<Result<_>>()?;
    if idx.is_empty() || path.links.len() + 1 != idx.len() {
        return Ok(false);
    }
    if !q.x.contains(idx[0]) || !q.y.contains(*idx.last().unwrap()) {
        return Ok(false);
    }
    if idx.iter().collect::<BTreeSet<_>>().len() != idx.len() {
        return Ok(false);
    }
    for (k, link) in path.links.iter().enumerate() {
        let (a, b) = (idx[k], idx[k + 1]);
        let present = match link {
            Link::Forward => m.children(a).contains(b),
            Link::Backward => m.children(b).contains(a),
            Link::Bidirected => m.spouses(a).contains(b),
        };
        if !present {
            return Ok(false);
        }
    }
    let anc_given = m.ancestors(q.given)?;
    for k in 1..idx.len() - 1 {
        let v = idx[k];
        let collider = path.links[k - 1].head_at_end() && path.links[k].head_at_start();
        let open = if collider {
            anc_given.contains(v)
        } else {
            !q.given.contains(v)
        };
        if !open {
            return Ok(false);
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::DiagramSpec;

    fn chain_with_noise() -> crate::graph::SelectionDiagram {
        // U_Z -> Z -> X -> Y, U_X -> X
        DiagramSpec::new()
            .nodes(&["U_X", "U_Z", "X", "Y", "Z"])
            .edge("U_Z", "Z")
            .edge("Z", "X")
            .edge("X", "Y")
            .edge("U_X", "X")
            .build()
            .unwrap()
    }

    fn q(g: &CausalDiagram, x: &[&str], y: &[&str], z: &[&str]) -> SeparationQuery {
        SeparationQuery::new(g.set_of(x).unwrap(), g.set_of(y).unwrap(), g.set_of(z).unwrap())
    }

    #[test]
    fn chain_blocked_by_emitting_node() {
        let g = chain_with_noise();
        assert!(d_separated(&g, &q(&g, &["U_Z"], &["Y"], &["Z"])).unwrap());
        assert!(d_separated(&g, &q(&g, &["U_Z"], &["Y"], &["X"])).unwrap());
        assert!(!d_separated(&g, &q(&g, &["U_Z"], &["Y"], &[])).unwrap());
    }

    #[test]
    fn collider_opened_by_descendant() {
        let g = chain_with_noise();
        assert!(d_separated(&g, &q(&g, &["U_Z"], &["U_X"], &[])).unwrap());
        let query = q(&g, &["U_Z"], &["U_X"], &["Y"]);
        assert!(!d_separated(&g, &query).unwrap());
        let path = witness_path(&g, &query).unwrap().unwrap();
        assert_eq!(path.to_string(), "U_Z -> Z -> X <- U_X");
        assert!(path_is_active(&g, &query, &path).unwrap());
    }

    #[test]
    fn isolated_nodes_are_separated() {
        let g = DiagramSpec::new().nodes(&["A", "B", "C"]).build().unwrap();
        for z in [&[][..], &["C"][..]] {
            let query = q(&g, &["A"], &["B"], z);
            assert!(d_separated(&g, &query).unwrap());
            assert!(witness_path(&g, &query).unwrap().is_none());
        }
    }

    #[test]
    fn bidirected_arc_acts_as_latent_parent() {
        let g = DiagramSpec::new().nodes(&["A", "B", "C"]).bidir("A", "B").edge("C", "B").build().unwrap();
        assert!(!d_separated(&g, &q(&g, &["A"], &["B"], &[])).unwrap());
        // A <-> B <- C: B is a collider
        assert!(d_separated(&g, &q(&g, &["A"], &["C"], &[])).unwrap());
        assert!(!d_separated(&g, &q(&g, &["A"], &["C"], &["B"])).unwrap());
    }

    #[test]
    fn overlapping_sets_rejected() {
        let g = chain_with_noise();
        assert!(matches!(d_separated(&g, &q(&g, &["X"], &["X"], &[])), Err(Error::OverlappingSets(_))));
        assert!(matches!(d_separated(&g, &q(&g, &["X"], &["Y"], &["X"])), Err(Error::OverlappingSets(_))));
    }

    #[test]
    fn certificate_round_trip_and_display() {
        let g = chain_with_noise();
        let query = q(&g, &["U_Z"], &["Y"], &["Z"]).under(Mutilation::incoming(g.set_of(["X"]).unwrap()));
        let cert = query.certificate(&g);
        assert_eq!(cert.resolve(&g).unwrap(), query);
        assert_eq!(cert.to_string(), "(U_Z _||_ Y | Z) in G[no arrows into X]");
    }
}
