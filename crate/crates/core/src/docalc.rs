//! The three rules of do-calculus as separation tests, and their local
//! application to terms of a probability expression.
//!
//! A term is read inside its own population, so selection nodes are always
//! part of the conditioning set when a rule is certified. The selection rule
//! is rule 1 with the selection nodes themselves as the deleted observation,
//! and moves a term between populations.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dsep::{d_separated, Certificate, SeparationQuery};
use crate::error::{Error, Result};
use crate::expr::{Population, ProbExpr, ProbTerm};
use crate::graph::{CausalDiagram, Mutilation, NodeId, NodeSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Rule {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
    #[serde(rename = "3")]
    Three,
}

impl Rule {
    pub fn number(self) -> u8 {
        match self {
            Rule::One => 1,
            Rule::Two => 2,
            Rule::Three => 3,
        }
    }
}

fn check_sets(g: &CausalDiagram, sets: &[NodeSet]) -> Result<()> {
    let all = g.all();
    for (i, a) in sets.iter().enumerate() {
        if let Some(v) = a.difference(all).first() {
            return Err(Error::UnknownNode(format!("#{v}")));
        }
        for b in &sets[i + 1..] {
            if let Some(v) = a.intersection(*b).first() {
                return Err(Error::OverlappingSets(g.name(v).to_string()));
            }
        }
    }
    Ok(())
}

/// The separation statement licensing rule `rule` for `(y, z, x, w)`.
pub fn rule_query(g: &CausalDiagram, rule: Rule, y: NodeSet, z: NodeSet, x: NodeSet, w: NodeSet) -> Result<SeparationQuery> {
    check_sets(g, &[y, z, x, w])?;
    let mutilation = match rule {
        Rule::One => Mutilation::incoming(x),
        Rule::Two => Mutilation {
            cut_incoming: x,
            cut_outgoing: z,
        },
        Rule::Three => Mutilation::incoming(x.union(g.z_outside_ancestors_of_w(z, w, x)?)),
    };
    Ok(SeparationQuery::new(y, z, x.union(w)).under(mutilation))
}

/// `P(y|do(x),z,w) = P(y|do(x),w)` when `(Y ⊥ Z | X, W)` in G with no arrows into X.
pub fn rule1_applicable(g: &CausalDiagram, y: NodeSet, z: NodeSet, x: NodeSet, w: NodeSet) -> Result<bool> {
    d_separated(g, &rule_query(g, Rule::One, y, z, x, w)?)
}

/// `P(y|do(x),do(z),w) = P(y|do(x),z,w)` when `(Y ⊥ Z | X, W)` in G with no
/// arrows into X and none out of Z.
pub fn rule2_applicable(g: &CausalDiagram, y: NodeSet, z: NodeSet, x: NodeSet, w: NodeSet) -> Result<bool> {
    d_separated(g, &rule_query(g, Rule::Two, y, z, x, w)?)
}

/// `P(y|do(x),do(z),w) = P(y|do(x),w)` when `(Y ⊥ Z | X, W)` in G with no
/// arrows into X or into Z(W).
pub fn rule3_applicable(g: &CausalDiagram, y: NodeSet, z: NodeSet, x: NodeSet, w: NodeSet) -> Result<bool> {
    d_separated(g, &rule_query(g, Rule::Three, y, z, x, w)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Insert,
    Delete,
    Exchange,
}

/// A rewrite of a single term. Sets are node names.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "op", content = "set", rename_all = "snake_case")]
pub enum RuleSpec {
    DeleteObservation(BTreeSet<NodeId>),
    InsertObservation(BTreeSet<NodeId>),
    ActionToObservation(BTreeSet<NodeId>),
    ObservationToAction(BTreeSet<NodeId>),
    DeleteAction(BTreeSet<NodeId>),
    InsertAction(BTreeSet<NodeId>),
    /// Target term to source term.
    DropSelection,
    /// Source term to target term.
    AddSelection,
}

impl RuleSpec {
    pub fn rule(&self) -> Rule {
        match self {
            RuleSpec::DeleteObservation(_)
            | RuleSpec::InsertObservation(_)
            | RuleSpec::DropSelection
            | RuleSpec::AddSelection => Rule::One,
            RuleSpec::ActionToObservation(_) | RuleSpec::ObservationToAction(_) => Rule::Two,
            RuleSpec::DeleteAction(_) | RuleSpec::InsertAction(_) => Rule::Three,
        }
    }

    pub fn direction(&self) -> Direction {
        match self {
            RuleSpec::DeleteObservation(_) | RuleSpec::DeleteAction(_) | RuleSpec::DropSelection => Direction::Delete,
            RuleSpec::InsertObservation(_) | RuleSpec::InsertAction(_) | RuleSpec::AddSelection => Direction::Insert,
            RuleSpec::ActionToObservation(_) | RuleSpec::ObservationToAction(_) => Direction::Exchange,
        }
    }

    pub fn delete_action(names: impl IntoIterator<Item = NodeId>) -> Self {
        RuleSpec::DeleteAction(names.into_iter().collect())
    }

    pub fn action_to_observation(names: impl IntoIterator<Item = NodeId>) -> Self {
        RuleSpec::ActionToObservation(names.into_iter().collect())
    }
}

impl fmt::Display for RuleSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let list = |s: &BTreeSet<NodeId>| s.iter().map(NodeId::as_str).collect::<Vec<_>>().join(",");
        match self {
            RuleSpec::DeleteObservation(s) => write!(f, "delete observation {}", list(s)),
            RuleSpec::InsertObservation(s) => write!(f, "insert observation {}", list(s)),
            RuleSpec::ActionToObservation(s) => write!(f, "exchange do({}) for observation", list(s)),
            RuleSpec::ObservationToAction(s) => write!(f, "exchange observation {} for do", list(s)),
            RuleSpec::DeleteAction(s) => write!(f, "delete do({})", list(s)),
            RuleSpec::InsertAction(s) => write!(f, "insert do({})", list(s)),
            RuleSpec::DropSelection => write!(f, "drop selection"),
            RuleSpec::AddSelection => write!(f, "add selection"),
        }
    }
}

/// One certified rewrite; `before` and `after` are whole expressions and
/// `site` addresses the rewritten term.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleStep {
    pub rule: Rule,
    pub direction: Direction,
    pub spec: RuleSpec,
    pub site: Vec<usize>,
    pub certificate: Certificate,
    pub before: ProbExpr,
    pub after: ProbExpr,
}

fn bad(term: &ProbTerm, msg: &str) -> Error {
    Error::BadSite(format!("{term}: {msg}"))
}

/// Separation query certifying `spec` on `term`, and the rewritten term.
pub fn rewrite_term(g: &CausalDiagram, term: &ProbTerm, spec: &RuleSpec) -> Result<(SeparationQuery, ProbTerm)> {
    term.validate()?;
    let set = |s: &BTreeSet<NodeId>| g.set_of(s.iter().map(NodeId::as_str));
    let sel = g.selection_nodes();
    let y = set(&term.targets)?;
    let dos = set(&term.do_set)?;
    let conds = set(&term.conds)?;
    if !y.union(dos).union(conds).is_disjoint(sel) {
        return Err(bad(term, "selection nodes may not appear in terms"));
    }
    let mut out = term.clone();
    let query = match spec {
        RuleSpec::DeleteObservation(z) | RuleSpec::InsertObservation(z) => {
            let zs = set(z)?;
            let deleting = matches!(spec, RuleSpec::DeleteObservation(_));
            if deleting && !zs.is_subset(conds) {
                return Err(bad(term, "deleted observations are not all conditioned on"));
            }
            if !deleting && !zs.is_disjoint(y.union(dos).union(conds).union(sel)) {
                return Err(bad(term, "inserted observations already occur in the term"));
            }
            let w = conds.difference(zs).union(sel);
            if deleting {
                out.conds.retain(|v| !z.contains(v));
            } else {
                out.conds.extend(z.iter().cloned());
            }
            rule_query(g, Rule::One, y, zs, dos, w)?
        }
        RuleSpec::ActionToObservation(z) | RuleSpec::ObservationToAction(z) => {
            let zs = set(z)?;
            let to_obs = matches!(spec, RuleSpec::ActionToObservation(_));
            let (from, to) = if to_obs { (dos, conds) } else { (conds, dos) };
            if zs.is_empty() || !zs.is_subset(from) {
                return Err(bad(term, "exchanged variables are not present on the expected side"));
            }
            debug_assert!(zs.is_disjoint(to));
            let x = dos.difference(zs);
            let w = conds.difference(zs).union(sel);
            if to_obs {
                out.do_set.retain(|v| !z.contains(v));
                out.conds.extend(z.iter().cloned());
            } else {
                out.conds.retain(|v| !z.contains(v));
                out.do_set.extend(z.iter().cloned());
            }
            rule_query(g, Rule::Two, y, zs, x, w)?
        }
        RuleSpec::DeleteAction(z) | RuleSpec::InsertAction(z) => {
            let zs = set(z)?;
            let deleting = matches!(spec, RuleSpec::DeleteAction(_));
            if deleting && !zs.is_subset(dos) {
                return Err(bad(term, "deleted actions are not all intervened on"));
            }
            if !deleting && !zs.is_disjoint(y.union(dos).union(conds).union(sel)) {
                return Err(bad(term, "inserted actions already occur in the term"));
            }
            let x = dos.difference(zs);
            let w = conds.union(sel);
            if deleting {
                out.do_set.retain(|v| !z.contains(v));
            } else {
                out.do_set.extend(z.iter().cloned());
            }
            rule_query(g, Rule::Three, y, zs, x, w)?
        }
        RuleSpec::DropSelection | RuleSpec::AddSelection => {
            let (from, to) = if matches!(spec, RuleSpec::DropSelection) {
                (Population::Target, Population::Source)
            } else {
                (Population::Source, Population::Target)
            };
            if term.population != from {
                return Err(bad(term, "term is not in the expected population"));
            }
            out.population = to;
            rule_query(g, Rule::One, y, sel, dos, conds)?
        }
    };
    out.validate()?;
    Ok((query, out))
}

/// Rewrites the term at `site` under `spec`, certifying the rule on `g`.
pub fn apply_rule(g: &CausalDiagram, expr: &ProbExpr, site: &[usize], spec: &RuleSpec) -> Result<(ProbExpr, RuleStep)> {
    let term = match expr.at(site) {
        Some(ProbExpr::Term(t)) => t,
        Some(_) => return Err(Error::BadSite(format!("{site:?} is not a term"))),
        None => return Err(Error::BadSite(format!("{site:?} does not exist"))),
    };
    let (query, new_term) = rewrite_term(g, term, spec)?;
    let certificate = query.certificate(g);
    if !d_separated(g, &query)? {
        return Err(Error::RuleNotApplicable {
            query: Box::new(certificate),
        });
    }
    let after = expr.replace_at(site, ProbExpr::Term(new_term)).expect("site checked");
    let step = RuleStep {
        rule: spec.rule(),
        direction: spec.direction(),
        spec: spec.clone(),
        site: site.to_vec(),
        certificate,
        before: expr.clone(),
        after: after.clone(),
    };
    Ok((after, step))
}

/// Re-derives `step` from its `before` expression and checks that the stored
/// certificate and result match and that the certificate holds.
pub fn replay_rule_step(g: &CausalDiagram, step: &RuleStep) -> std::result::Result<(), String> {
    let term = match step.before.at(&step.site) {
        Some(ProbExpr::Term(t)) => t,
        _ => return Err("site does not address a term".into()),
    };
    let (query, new_term) = rewrite_term(g, term, &step.spec).map_err(|e| e.to_string())?;
    if step.rule != step.spec.rule() || step.direction != step.spec.direction() {
        return Err("rule number or direction does not match the rewrite".into());
    }
    if query.certificate(g) != step.certificate {
        return Err(format!("stored certificate {} differs from {}", step.certificate, query.certificate(g)));
    }
    match step.certificate.holds(g) {
        Ok(true) => {}
        Ok(false) => return Err(format!("{} does not hold", step.certificate)),
        Err(e) => return Err(e.to_string()),
    }
    let expected = step.before.replace_at(&step.site, ProbExpr::Term(new_term));
    if expected.as_ref() != Some(&step.after) {
        return Err("rewritten expression differs from the stored one".into());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::DiagramSpec;

    fn age() -> CausalDiagram {
        DiagramSpec::new()
            .nodes(&["X", "Y", "Z"])
            .edge("Z", "X")
            .edge("Z", "Y")
            .edge("X", "Y")
            .bidir("X", "Y")
            .sel("S", "Z")
            .build()
            .unwrap()
            .into_graph()
    }

    fn surrogate() -> CausalDiagram {
        DiagramSpec::new()
            .nodes(&["X", "Y", "Z"])
            .edge("X", "Z")
            .edge("Z", "Y")
            .edge("X", "Y")
            .bidir("X", "Y")
            .sel("S", "Z")
            .build()
            .unwrap()
            .into_graph()
    }

    fn s(g: &CausalDiagram, names: &[&str]) -> NodeSet {
        g.set_of(names).unwrap()
    }

    fn ids(names: &[&str]) -> BTreeSet<NodeId> {
        names.iter().map(|&n| NodeId::from(n)).collect()
    }

    #[test]
    fn rule1_selection_deletion_given_stratum() {
        let g = age();
        assert!(rule1_applicable(&g, s(&g, &["Y"]), s(&g, &["S"]), s(&g, &["X"]), s(&g, &["Z"])).unwrap());
        assert!(!rule1_applicable(&g, s(&g, &["Y"]), s(&g, &["S"]), s(&g, &["X"]), NodeSet::EMPTY).unwrap());
        assert!(rule1_applicable(&g, s(&g, &["Y"]), NodeSet::EMPTY, s(&g, &["X"]), NodeSet::EMPTY).unwrap());
    }

    #[test]
    fn rule2_unconfounded_exchange() {
        let g = surrogate();
        assert!(rule2_applicable(&g, s(&g, &["Z"]), s(&g, &["X"]), NodeSet::EMPTY, NodeSet::EMPTY).unwrap());
        assert!(!rule2_applicable(&g, s(&g, &["Y"]), s(&g, &["X"]), NodeSet::EMPTY, NodeSet::EMPTY).unwrap());
    }

    #[test]
    fn rule3_parent_action_not_deletable() {
        let g = DiagramSpec::new().nodes(&["X", "Y"]).edge("X", "Y").build().unwrap().into_graph();
        assert!(!rule3_applicable(&g, s(&g, &["Y"]), s(&g, &["X"]), NodeSet::EMPTY, NodeSet::EMPTY).unwrap());
        assert!(rule3_applicable(&g, s(&g, &["Y"]), NodeSet::EMPTY, s(&g, &["X"]), NodeSet::EMPTY).unwrap());
        let e: ProbExpr = ProbTerm::source(&["Y"], &["X"], &[]).into();
        match apply_rule(&g, &e, &[], &RuleSpec::delete_action(ids(&["X"]))) {
            Err(Error::RuleNotApplicable { query }) => assert_eq!(query.to_string(), "(Y _||_ X) in G[no arrows into X]"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn drop_selection_on_stratum_term() {
        let g = age();
        let e: ProbExpr = ProbTerm::target(&["Y"], &["X"], &["Z"]).into();
        let (after, step) = apply_rule(&g, &e, &[], &RuleSpec::DropSelection).unwrap();
        assert_eq!(after.to_string(), "P(y|do(x),z)");
        assert_eq!(step.certificate.to_string(), "(Y _||_ S | X,Z) in G[no arrows into X]");
        assert!(replay_rule_step(&g, &step).is_ok());

        let e: ProbExpr = ProbTerm::target(&["Y"], &["X"], &[]).into();
        assert!(matches!(
            apply_rule(&g, &e, &[], &RuleSpec::DropSelection),
            Err(Error::RuleNotApplicable { .. })
        ));
    }

    #[test]
    fn exchange_inside_a_product() {
        let g = surrogate();
        let e = crate::expr::parse_expr("sum_z P(y|do(x),z) P*(z|do(x))", &|n| Some(NodeId::new(n.to_uppercase()))).unwrap();
        let (after, step) = apply_rule(&g, &e, &[0, 1], &RuleSpec::action_to_observation(ids(&["X"]))).unwrap();
        assert_eq!(after.to_string(), "sum_z P(y|do(x),z) P*(z|x)");
        assert_eq!(step.direction, Direction::Exchange);
        assert!(matches!(
            apply_rule(&g, &e, &[0, 0], &RuleSpec::action_to_observation(ids(&["X"]))),
            Err(Error::RuleNotApplicable { .. })
        ));
        assert!(matches!(apply_rule(&g, &e, &[0, 2], &RuleSpec::DropSelection), Err(Error::BadSite(_))));
        assert!(matches!(apply_rule(&g, &e, &[0], &RuleSpec::DropSelection), Err(Error::BadSite(_))));
    }

    #[test]
    fn tampered_step_fails_replay() {
        let g = surrogate();
        let e: ProbExpr = ProbTerm::target(&["Z"], &["X"], &[]).into();
        let (_, step) = apply_rule(&g, &e, &[], &RuleSpec::action_to_observation(ids(&["X"]))).unwrap();
        assert!(replay_rule_step(&g, &step).is_ok());
        let mut bad = step.clone();
        bad.certificate.given.insert(NodeId::from("Y"));
        assert!(replay_rule_step(&g, &bad).is_err());
        let mut bad = step;
        bad.after = ProbTerm::target(&["Z"], &[], &[]).into();
        assert!(replay_rule_step(&g, &bad).is_err());
    }
}
