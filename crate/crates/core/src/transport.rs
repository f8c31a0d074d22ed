//! Transport decisions and formula synthesis.
//!
//! The recursive procedure for an average effect `P*(y|do(x))` tries, in
//! order: identification inside the target, reweighting through an
//! S-admissible set whose own effect transports, and replacing the effect by
//! a target observational conditional given a set whose effect transports.
//! Every accepted step stores the separation statements that license it.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::docalc::{apply_rule, replay_rule_step, RuleSpec, RuleStep};
use crate::dsep::{d_separated, Certificate, SeparationQuery};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::expr::{canonicalize, Population, ProbExpr, ProbTerm};
use crate::graph::{CausalDiagram, Mutilation, NodeId, NodeKind, NodeSet};

/// `P*(effect | do(interventions), strata)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Query {
    pub effect: BTreeSet<NodeId>,
    pub interventions: BTreeSet<NodeId>,
    #[serde(default)]
    pub strata: BTreeSet<NodeId>,
}

impl Query {
    pub fn new(effect: &[&str], interventions: &[&str]) -> Self {
        let ids = |s: &[&str]| s.iter().map(|&n| NodeId::from(n)).collect();
        Query {
            effect: ids(effect),
            interventions: ids(interventions),
            strata: BTreeSet::new(),
        }
    }

    pub fn with_strata(mut self, strata: &[&str]) -> Self {
        self.strata = strata.iter().map(|&n| NodeId::from(n)).collect();
        self
    }

    /// Checks the query against `g` and returns `(effect, interventions, strata)`.
    pub fn resolve(&self, g: &CausalDiagram) -> Result<(NodeSet, NodeSet, NodeSet)> {
        let set = |s: &BTreeSet<NodeId>| g.set_of(s.iter().map(NodeId::as_str));
        let (y, x, z) = (set(&self.effect)?, set(&self.interventions)?, set(&self.strata)?);
        if y.is_empty() {
            return Err(Error::InvalidQuery("empty effect set".into()));
        }
        if x.is_empty() {
            return Err(Error::InvalidQuery("empty intervention set".into()));
        }
        if let Some(v) = y.union(x).union(z).difference(g.observed()).first() {
            return Err(Error::InvalidQuery(format!("{} is a selection node", g.name(v))));
        }
        for (a, b) in [(y, x), (y, z), (x, z)] {
            if let Some(v) = a.intersection(b).first() {
                return Err(Error::OverlappingSets(g.name(v).to_string()));
            }
        }
        Ok((y, x, z))
    }

    /// All variables the query's answer ranges over.
    pub fn vars(&self) -> BTreeSet<NodeId> {
        self.effect.iter().chain(&self.interventions).chain(&self.strata).cloned().collect()
    }

    /// The source-population counterpart `P(y|do(x),z)`.
    pub fn source_term(&self) -> ProbTerm {
        ProbTerm {
            targets: self.effect.clone(),
            do_set: self.interventions.clone(),
            conds: self.strata.clone(),
            population: Population::Source,
        }
    }
}

impl fmt::Display for Query {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let t = ProbTerm {
            population: Population::Target,
            ..self.source_term()
        };
        write!(f, "{t}")
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransportOptions {
    /// Largest candidate set tried; `None` means unbounded.
    pub max_set_size: Option<usize>,
    /// Keep searching past the first success for a formula with fewer
    /// source interventional factors.
    pub prefer_observational: bool,
    pub execution: Execution,
}

impl TransportOptions {
    fn cap(&self) -> usize {
        self.max_set_size.unwrap_or(usize::MAX)
    }
}

/// Where candidate adjustment sets come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CandidatePool {
    /// Observed non-descendants of the interventions.
    Pretreatment,
    /// Any observed node outside the interventions and the effect.
    Any,
}

fn pool(g: &CausalDiagram, x: NodeSet, y: NodeSet, which: CandidatePool) -> Result<NodeSet> {
    let base = g.observed().difference(x).difference(y);
    Ok(match which {
        CandidatePool::Any => base,
        CandidatePool::Pretreatment => base.difference(g.descendants(x)?),
    })
}

/// `(Y ⊥ S | T, X)` in the diagram with no arrows into X, S being every
/// selection node.
pub fn admissibility_query(g: &CausalDiagram, t: NodeSet, x: NodeSet, y: NodeSet) -> SeparationQuery {
    SeparationQuery::new(y, g.selection_nodes(), t.union(x)).under(Mutilation::incoming(x))
}

pub fn s_admissible(g: &CausalDiagram, t: NodeSet, x: NodeSet, y: NodeSet) -> Result<bool> {
    if let Some(v) = t.difference(g.observed()).first() {
        return Err(Error::InvalidQuery(format!("{} is a selection node", g.name(v))));
    }
    d_separated(g, &admissibility_query(g, t, x, y))
}

/// First S-admissible set in canonical order (size, then lexicographic).
pub fn find_s_admissible(
    g: &CausalDiagram,
    x: NodeSet,
    y: NodeSet,
    max_size: usize,
    which: CandidatePool,
    execution: Execution,
) -> Result<Option<NodeSet>> {
    let candidates = pool(g, x, y, which)?.subsets_canonical(max_size);
    let hit = exec::position_first(&candidates, execution, |&t| {
        d_separated(g, &admissibility_query(g, t, x, y)).unwrap_or(false)
    });
    Ok(hit.map(|i| candidates[i]))
}

/// `(S ⊥ Y | X, Z)` with no arrows into X: the source relation carries over
/// verbatim.
pub fn directly_transportable(g: &CausalDiagram, q: &Query) -> Result<bool> {
    let (y, x, z) = q.resolve(g)?;
    d_separated(g, &admissibility_query(g, z, x, y))
}

/// Selection nodes all of whose children are interventions.
fn into_interventions(g: &CausalDiagram, x: NodeSet) -> NodeSet {
    g.selection_nodes().iter().filter(|&s| g.children(s).is_subset(x)).collect()
}

/// Selection nodes that can be ignored for the effect of X on Y: those
/// pointing only into X, and those separated from Y given X with no arrows
/// into X.
pub fn ignorable_selection_nodes(g: &CausalDiagram, x: NodeSet, y: NodeSet) -> Result<NodeSet> {
    let mut out = into_interventions(g, x);
    for s in g.selection_nodes().difference(out).iter() {
        let q = SeparationQuery::new(y, NodeSet::single(s), x).under(Mutilation::incoming(x));
        if d_separated(g, &q)? {
            out.insert(s);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    /// Every selection node points only into the interventions.
    SelectionFree,
    /// Condition 1 by do-calculus reduction of the single target term.
    TrivialRules,
    /// Condition 1 by back-door adjustment inside the target.
    TrivialBackDoor,
    /// Condition 2: S-admissible set.
    Admissible,
    /// Condition 3: observational replacement given a transportable set.
    Confounded,
    /// Strata-specific effect through an S-admissible stratum.
    Strata,
}

impl Condition {
    pub fn label(self) -> &'static str {
        match self {
            Condition::SelectionFree => "selection nodes point only into the interventions",
            Condition::TrivialRules => "condition 1: identified in the target by do-calculus",
            Condition::TrivialBackDoor => "condition 1: back-door adjustment in the target",
            Condition::Admissible => "condition 2: S-admissible set",
            Condition::Confounded => "condition 3: separation given a transportable set",
            Condition::Strata => "stratum is S-admissible",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckedCertificate {
    pub certificate: Certificate,
    pub holds: bool,
}

/// A transport-theorem application to `P*(effect|do(interventions))`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TheoremStep {
    pub condition: Condition,
    pub effect: BTreeSet<NodeId>,
    pub interventions: BTreeSet<NodeId>,
    #[serde(default)]
    pub chosen: BTreeSet<NodeId>,
    #[serde(default)]
    pub certificates: Vec<Certificate>,
    /// Recorded for inspection only; not required to hold.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub informational: Vec<CheckedCertificate>,
    pub formula: ProbExpr,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Step {
    Rule(RuleStep),
    Theorem(TheoremStep),
}

/// Ordered trace; sub-effects are derived before the steps that use them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Derivation {
    pub query: Query,
    pub formula: ProbExpr,
    pub steps: Vec<Step>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TransportResult {
    Transportable { formula: ProbExpr, derivation: Derivation },
    NotDerivable { reason: String },
}

impl TransportResult {
    pub fn formula(&self) -> Option<&ProbExpr> {
        match self {
            TransportResult::Transportable { formula, .. } => Some(formula),
            TransportResult::NotDerivable { .. } => None,
        }
    }

    pub fn derivation(&self) -> Option<&Derivation> {
        match self {
            TransportResult::Transportable { derivation, .. } => Some(derivation),
            TransportResult::NotDerivable { .. } => None,
        }
    }

    pub fn is_transportable(&self) -> bool {
        self.formula().is_some()
    }
}

/// No target term carries an intervention and no term mentions a selection
/// node.
pub fn satisfies_success_criterion(g: &CausalDiagram, expr: &ProbExpr) -> bool {
    expr.terms().iter().all(|t| {
        let target_do = t.population == Population::Target && !t.do_set.is_empty();
        let mentions_sel = t.vars().iter().any(|v| g.index(v.as_str()).map(|i| g.kind(i)) == Some(NodeKind::Selection));
        !target_do && !mentions_sel
    })
}

fn names(g: &CausalDiagram, s: NodeSet) -> BTreeSet<NodeId> {
    g.names_of(s)
}

fn term(g: &CausalDiagram, pop: Population, y: NodeSet, dos: NodeSet, conds: NodeSet) -> ProbTerm {
    ProbTerm {
        targets: names(g, y),
        do_set: names(g, dos),
        conds: names(g, conds),
        population: pop,
    }
}

fn do_term(g: &CausalDiagram, pop: Population, y: NodeSet, x: NodeSet) -> ProbExpr {
    term(g, pop, y, x, NodeSet::EMPTY).into()
}

fn summed(g: &CausalDiagram, over: NodeSet, factors: Vec<ProbExpr>) -> ProbExpr {
    canonicalize(&ProbExpr::sum_over(&names(g, over), ProbExpr::product(factors)))
}

/// Certificate for a back-door set: `(Y ⊥ X | Z, S)` with no arrows out of X.
fn back_door_query(g: &CausalDiagram, z: NodeSet, x: NodeSet, y: NodeSet) -> SeparationQuery {
    SeparationQuery::new(y, x, z.union(g.selection_nodes())).under(Mutilation {
        cut_incoming: NodeSet::EMPTY,
        cut_outgoing: x,
    })
}

fn back_door_formula(g: &CausalDiagram, z: NodeSet, x: NodeSet, y: NodeSet) -> ProbExpr {
    if z.is_empty() {
        return term(g, Population::Target, y, NodeSet::EMPTY, x).into();
    }
    summed(
        g,
        z,
        vec![
            term(g, Population::Target, y, NodeSet::EMPTY, x.union(z)).into(),
            term(g, Population::Target, z, NodeSet::EMPTY, NodeSet::EMPTY).into(),
        ],
    )
}

/// Rule 3 deleting `do(x)` from `P*(y|do(x),w)`: `(Y ⊥ X | W, S)` with no
/// arrows into the part of X outside the ancestors of `W ∪ S`.
fn confounded_query(g: &CausalDiagram, w: NodeSet, x: NodeSet, y: NodeSet) -> Result<SeparationQuery> {
    crate::docalc::rule_query(g, crate::docalc::Rule::Three, y, x, NodeSet::EMPTY, w.union(g.selection_nodes()))
}

/// The same test without the selection nodes in the conditioning set.
fn confounded_query_s_free(g: &CausalDiagram, w: NodeSet, x: NodeSet, y: NodeSet) -> Result<SeparationQuery> {
    crate::docalc::rule_query(g, crate::docalc::Rule::Three, y, x, NodeSet::EMPTY, w)
}

/// Condition-1 reduction of `P*(y|do(x))` by rules 3 and 2, first on the
/// whole intervention set, then one variable at a time.
fn trivial_rules(g: &CausalDiagram, y: NodeSet, x: NodeSet) -> Result<Option<(ProbExpr, Vec<RuleStep>)>> {
    let start = do_term(g, Population::Target, y, x);
    let whole = names(g, x);
    for spec in [RuleSpec::DeleteAction(whole.clone()), RuleSpec::ActionToObservation(whole)] {
        if let Ok((e, step)) = apply_rule(g, &start, &[], &spec) {
            return Ok(Some((e, vec![step])));
        }
    }
    let mut cur = start;
    let mut steps = Vec::new();
    loop {
        let ProbExpr::Term(t) = &cur else { unreachable!() };
        if t.do_set.is_empty() {
            return Ok(Some((cur, steps)));
        }
        let mut progressed = false;
        'vars: for v in t.do_set.clone() {
            let one: BTreeSet<NodeId> = [v].into();
            for spec in [RuleSpec::DeleteAction(one.clone()), RuleSpec::ActionToObservation(one.clone())] {
                match apply_rule(g, &cur, &[], &spec) {
                    Ok((e, step)) => {
                        cur = e;
                        steps.push(step);
                        progressed = true;
                        break 'vars;
                    }
                    Err(Error::RuleNotApplicable { .. }) => {}
                    Err(e) => return Err(e),
                }
            }
        }
        if !progressed {
            return Ok(None);
        }
    }
}

fn trivial_back_door(g: &CausalDiagram, y: NodeSet, x: NodeSet, cap: usize, execution: Execution) -> Result<Option<NodeSet>> {
    let candidates = pool(g, x, y, CandidatePool::Pretreatment)?.subsets_canonical(cap);
    let hit = exec::position_first(&candidates, execution, |&z| {
        d_separated(g, &back_door_query(g, z, x, y)).unwrap_or(false)
    });
    Ok(hit.map(|i| candidates[i]))
}

struct Solved {
    expr: ProbExpr,
    steps: Vec<Step>,
}

struct Solver<'a> {
    g: &'a CausalDiagram,
    x: NodeSet,
    opts: TransportOptions,
    memo: HashMap<NodeSet, Option<std::rc::Rc<Solved>>>,
    in_progress: HashSet<NodeSet>,
    cycle_hits: usize,
    failures: BTreeMap<BTreeSet<NodeId>, String>,
}

impl<'a> Solver<'a> {
    fn theorem(&self, condition: Condition, y: NodeSet, chosen: NodeSet, certificates: Vec<Certificate>, formula: &ProbExpr) -> TheoremStep {
        TheoremStep {
            condition,
            effect: names(self.g, y),
            interventions: names(self.g, self.x),
            chosen: names(self.g, chosen),
            certificates,
            informational: Vec::new(),
            formula: formula.clone(),
        }
    }

    fn solve(&mut self, y: NodeSet) -> Result<Option<std::rc::Rc<Solved>>> {
        if let Some(r) = self.memo.get(&y) {
            return Ok(r.clone());
        }
        if self.in_progress.contains(&y) {
            self.cycle_hits += 1;
            return Ok(None);
        }
        self.in_progress.insert(y);
        let hits_before = self.cycle_hits;
        let r = self.solve_uncached(y);
        self.in_progress.remove(&y);
        let r = r?.map(std::rc::Rc::new);
        if r.is_some() || self.cycle_hits == hits_before {
            self.memo.insert(y, r.clone());
        }
        Ok(r)
    }

    fn solve_uncached(&mut self, y: NodeSet) -> Result<Option<Solved>> {
        let g = self.g;
        let x = self.x;
        let cap = self.opts.cap();
        let exec = self.opts.execution;
        let mut found: Vec<Solved> = Vec::new();
        let mut notes: Vec<String> = Vec::new();
        let done = |found: &Vec<Solved>, opts: &TransportOptions| !found.is_empty() && !opts.prefer_observational;

        if into_interventions(g, x) == g.selection_nodes() {
            let expr = do_term(g, Population::Source, y, x);
            let step = self.theorem(Condition::SelectionFree, y, NodeSet::EMPTY, Vec::new(), &expr);
            return Ok(Some(Solved {
                expr,
                steps: vec![Step::Theorem(step)],
            }));
        }

        // condition 1
        if let Some((expr, rule_steps)) = trivial_rules(g, y, x)? {
            let expr = canonicalize(&expr);
            let step = self.theorem(Condition::TrivialRules, y, NodeSet::EMPTY, Vec::new(), &expr);
            let mut steps: Vec<Step> = rule_steps.into_iter().map(Step::Rule).collect();
            steps.push(Step::Theorem(step));
            found.push(Solved { expr, steps });
        } else if let Some(z) = trivial_back_door(g, y, x, cap, exec)? {
            let expr = back_door_formula(g, z, x, y);
            let cert = back_door_query(g, z, x, y).certificate(g);
            let step = self.theorem(Condition::TrivialBackDoor, y, z, vec![cert], &expr);
            found.push(Solved {
                expr,
                steps: vec![Step::Theorem(step)],
            });
        } else {
            notes.push("condition 1: no do-calculus reduction or back-door set in the target".into());
        }

        // condition 2
        if !done(&found, &self.opts) {
            let candidates = pool(g, x, y, CandidatePool::Any)?.subsets_canonical(cap);
            let admissible = exec::map(&candidates, exec, |&t| d_separated(g, &admissibility_query(g, t, x, y)).unwrap_or(false));
            let mut tried = Vec::new();
            for (&t, ok) in candidates.iter().zip(admissible) {
                if !ok {
                    continue;
                }
                let cert = admissibility_query(g, t, x, y).certificate(g);
                let main = term(g, Population::Source, y, x, t);
                let solved = if t.is_empty() {
                    let expr: ProbExpr = main.into();
                    let step = self.theorem(Condition::Admissible, y, t, vec![cert], &expr);
                    Some(Solved {
                        expr,
                        steps: vec![Step::Theorem(step)],
                    })
                } else {
                    self.solve(t)?.map(|sub| {
                        let expr = summed(g, t, vec![main.into(), sub.expr.clone()]);
                        let step = self.theorem(Condition::Admissible, y, t, vec![cert], &expr);
                        let mut steps = sub.steps.clone();
                        steps.push(Step::Theorem(step));
                        Solved { expr, steps }
                    })
                };
                match solved {
                    Some(s) => {
                        found.push(s);
                        if done(&found, &self.opts) {
                            break;
                        }
                    }
                    None => tried.push(fmt_set(g, t)),
                }
            }
            if found.is_empty() {
                notes.push(if tried.is_empty() {
                    "condition 2: no S-admissible set".into()
                } else {
                    format!("condition 2: S-admissible sets {} have effects that do not transport", tried.join(", "))
                });
            }
        }

        // condition 3
        if !done(&found, &self.opts) {
            let candidates: Vec<NodeSet> = pool(g, x, y, CandidatePool::Any)?
                .subsets_canonical(cap)
                .into_iter()
                .filter(|w| !w.is_empty())
                .collect();
            let separated = exec::map(&candidates, exec, |&w| {
                confounded_query(g, w, x, y).and_then(|q| d_separated(g, &q)).unwrap_or(false)
            });
            let mut tried = Vec::new();
            for (&w, ok) in candidates.iter().zip(separated) {
                if !ok {
                    continue;
                }
                let q = confounded_query(g, w, x, y)?;
                let q_free = confounded_query_s_free(g, w, x, y)?;
                let info = CheckedCertificate {
                    certificate: q_free.certificate(g),
                    holds: d_separated(g, &q_free)?,
                };
                let main = term(g, Population::Target, y, NodeSet::EMPTY, w);
                let solved = self.solve(w)?.map(|sub| {
                    let expr = summed(g, w, vec![main.into(), sub.expr.clone()]);
                    let mut step = self.theorem(Condition::Confounded, y, w, vec![q.certificate(g)], &expr);
                    step.informational.push(info);
                    let mut steps = sub.steps.clone();
                    steps.push(Step::Theorem(step));
                    Solved { expr, steps }
                });
                match solved {
                    Some(s) => {
                        found.push(s);
                        if done(&found, &self.opts) {
                            break;
                        }
                    }
                    None => tried.push(fmt_set(g, w)),
                }
            }
            if found.is_empty() {
                notes.push(if tried.is_empty() {
                    "condition 3: no separating set".into()
                } else {
                    format!("condition 3: separating sets {} have effects that do not transport", tried.join(", "))
                });
            }
        }

        if found.is_empty() {
            let key = names(g, y);
            let label = do_term(g, Population::Target, y, x).to_string();
            self.failures.entry(key).or_insert_with(|| format!("{label}: {}", notes.join("; ")));
            return Ok(None);
        }
        // first minimum in search order
        let best = (0..found.len())
            .min_by_key(|&i| (found[i].expr.interventional_factor_count(), i))
            .unwrap();
        Ok(Some(found.swap_remove(best)))
    }
}

fn fmt_set(g: &CausalDiagram, s: NodeSet) -> String {
    format!("{{{}}}", names(g, s).iter().map(NodeId::as_str).collect::<Vec<_>>().join(","))
}

/// Condition-1 check on its own: a star-only, do-free formula for the query,
/// or `None`.
pub fn trivially_transportable(g: &CausalDiagram, q: &Query) -> Result<Option<ProbExpr>> {
    let (y, x, z) = q.resolve(g)?;
    if !z.is_empty() {
        return Err(Error::InvalidQuery("trivial transportability is checked for average effects".into()));
    }
    if let Some((e, _)) = trivial_rules(g, y, x)? {
        return Ok(Some(canonicalize(&e)));
    }
    Ok(trivial_back_door(g, y, x, usize::MAX, Execution::Sequential)?.map(|z| back_door_formula(g, z, x, y)))
}

/// Strata-specific effect: the source term itself when the strata are
/// S-admissible.
pub fn transport_strata(g: &CausalDiagram, q: &Query) -> Result<TransportResult> {
    let (y, x, z) = q.resolve(g)?;
    let query = admissibility_query(g, z, x, y);
    if !d_separated(g, &query)? {
        return Ok(TransportResult::NotDerivable {
            reason: format!("{q}: strata {} are not S-admissible", fmt_set(g, z)),
        });
    }
    let formula: ProbExpr = q.source_term().into();
    let step = TheoremStep {
        condition: Condition::Strata,
        effect: q.effect.clone(),
        interventions: q.interventions.clone(),
        chosen: q.strata.clone(),
        certificates: vec![query.certificate(g)],
        informational: Vec::new(),
        formula: formula.clone(),
    };
    Ok(TransportResult::Transportable {
        formula: formula.clone(),
        derivation: Derivation {
            query: q.clone(),
            formula,
            steps: vec![Step::Theorem(step)],
        },
    })
}

/// Average effect `P*(y|do(x))` by the recursive procedure.
pub fn transport_effect(g: &CausalDiagram, q: &Query, opts: &TransportOptions) -> Result<TransportResult> {
    let (y, x, z) = q.resolve(g)?;
    if !z.is_empty() {
        return Err(Error::InvalidQuery("transport_effect takes an average effect; use transport_strata".into()));
    }
    let mut solver = Solver {
        g,
        x,
        opts: *opts,
        memo: HashMap::new(),
        in_progress: HashSet::new(),
        cycle_hits: 0,
        failures: BTreeMap::new(),
    };
    match solver.solve(y)? {
        Some(s) => {
            let formula = canonicalize(&s.expr);
            Ok(TransportResult::Transportable {
                formula: formula.clone(),
                derivation: Derivation {
                    query: q.clone(),
                    formula,
                    steps: s.steps.clone(),
                },
            })
        }
        None => {
            let top = solver.failures.remove(&q.effect).unwrap_or_default();
            let mut reason = top;
            for (_, r) in solver.failures {
                reason.push_str("\n  ");
                reason.push_str(&r);
            }
            Ok(TransportResult::NotDerivable { reason })
        }
    }
}

/// Dispatches on whether the query has strata.
pub fn transport(g: &CausalDiagram, q: &Query, opts: &TransportOptions) -> Result<TransportResult> {
    if q.strata.is_empty() {
        transport_effect(g, q, opts)
    } else {
        transport_strata(g, q)
    }
}

fn replay_err(step: usize, reason: impl Into<String>) -> Error {
    Error::Replay {
        step,
        reason: reason.into(),
    }
}

/// Re-derives every step of `d` on `g`: recomputes each certificate from the
/// stored sets, checks it equals the stored one and holds, and checks every
/// formula against the formulas of the steps it builds on.
pub fn replay(g: &CausalDiagram, d: &Derivation) -> Result<()> {
    let mut derived: HashMap<(BTreeSet<NodeId>, BTreeSet<NodeId>), ProbExpr> = HashMap::new();
    let mut last: Option<&TheoremStep> = None;
    for (k, step) in d.steps.iter().enumerate() {
        match step {
            Step::Rule(r) => replay_rule_step(g, r).map_err(|e| replay_err(k + 1, e))?,
            Step::Theorem(t) => {
                replay_theorem(g, t, &derived).map_err(|e| replay_err(k + 1, e))?;
                derived.insert((t.effect.clone(), t.interventions.clone()), t.formula.clone());
                last = Some(t);
            }
        }
    }
    let last = last.ok_or_else(|| replay_err(d.steps.len(), "no theorem step"))?;
    if last.effect != d.query.effect || last.interventions != d.query.interventions {
        return Err(replay_err(d.steps.len(), "final step does not answer the query"));
    }
    if last.condition == Condition::Strata && last.chosen != d.query.strata {
        return Err(replay_err(d.steps.len(), "strata differ from the query"));
    }
    if (last.condition == Condition::Strata) == d.query.strata.is_empty() {
        return Err(replay_err(d.steps.len(), "strata and final condition disagree"));
    }
    if canonicalize(&last.formula) != canonicalize(&d.formula) {
        return Err(replay_err(d.steps.len(), "final formula differs from the stored formula"));
    }
    Ok(())
}

fn replay_theorem(
    g: &CausalDiagram,
    t: &TheoremStep,
    derived: &HashMap<(BTreeSet<NodeId>, BTreeSet<NodeId>), ProbExpr>,
) -> std::result::Result<(), String> {
    let set = |s: &BTreeSet<NodeId>| g.set_of(s.iter().map(NodeId::as_str)).map_err(|e| e.to_string());
    let (y, x, c) = (set(&t.effect)?, set(&t.interventions)?, set(&t.chosen)?);
    let q = Query {
        effect: t.effect.clone(),
        interventions: t.interventions.clone(),
        strata: BTreeSet::new(),
    };
    q.resolve(g).map_err(|e| e.to_string())?;
    if !c.is_subset(g.observed()) || !c.is_disjoint(x.union(y)) {
        return Err("chosen set overlaps the query or contains selection nodes".into());
    }
    let sub = |what: &str| -> std::result::Result<ProbExpr, String> {
        derived
            .get(&(t.chosen.clone(), t.interventions.clone()))
            .cloned()
            .ok_or_else(|| format!("{what} uses an effect of {} not derived earlier", fmt_set(g, c)))
    };
    let (expected_certs, expected_formula, expected_info) = match t.condition {
        Condition::SelectionFree => {
            if into_interventions(g, x) != g.selection_nodes() {
                return Err("some selection node points outside the interventions".into());
            }
            if !c.is_empty() {
                return Err("selection-free step with a chosen set".into());
            }
            (Vec::new(), do_term(g, Population::Source, y, x), Vec::new())
        }
        Condition::TrivialRules => {
            if !c.is_empty() {
                return Err("rule reduction with a chosen set".into());
            }
            let (e, _) = trivial_rules(g, y, x).map_err(|e| e.to_string())?.ok_or("target term does not reduce")?;
            (Vec::new(), canonicalize(&e), Vec::new())
        }
        Condition::TrivialBackDoor => {
            let pre = pool(g, x, y, CandidatePool::Pretreatment).map_err(|e| e.to_string())?;
            if !c.is_subset(pre) {
                return Err("back-door set contains a descendant of the interventions".into());
            }
            (vec![back_door_query(g, c, x, y).certificate(g)], back_door_formula(g, c, x, y), Vec::new())
        }
        Condition::Admissible => {
            let cert = admissibility_query(g, c, x, y).certificate(g);
            let main = term(g, Population::Source, y, x, c);
            let formula = if c.is_empty() {
                main.into()
            } else {
                summed(g, c, vec![main.into(), sub("condition 2")?])
            };
            (vec![cert], formula, Vec::new())
        }
        Condition::Confounded => {
            if c.is_empty() {
                return Err("condition 3 with an empty set".into());
            }
            let q = confounded_query(g, c, x, y).map_err(|e| e.to_string())?;
            let q_free = confounded_query_s_free(g, c, x, y).map_err(|e| e.to_string())?;
            let info = CheckedCertificate {
                certificate: q_free.certificate(g),
                holds: d_separated(g, &q_free).map_err(|e| e.to_string())?,
            };
            let main = term(g, Population::Target, y, NodeSet::EMPTY, c);
            let formula = summed(g, c, vec![main.into(), sub("condition 3")?]);
            (vec![q.certificate(g)], formula, vec![info])
        }
        Condition::Strata => {
            let cert = admissibility_query(g, c, x, y).certificate(g);
            (vec![cert], term(g, Population::Source, y, x, c).into(), Vec::new())
        }
    };
    if expected_certs != t.certificates {
        return Err("stored certificates differ from the ones the step requires".into());
    }
    if expected_info != t.informational {
        return Err("stored informational certificates differ".into());
    }
    for cert in &t.certificates {
        match cert.holds(g) {
            Ok(true) => {}
            Ok(false) => return Err(format!("{cert} does not hold")),
            Err(e) => return Err(e.to_string()),
        }
    }
    if canonicalize(&expected_formula) != canonicalize(&t.formula) {
        return Err(format!("formula {} differs from the expected {}", t.formula, canonicalize(&expected_formula)));
    }
    Ok(())
}

impl Derivation {
    /// Human-readable trace, one step per paragraph.
    pub fn explain(&self) -> String {
        let mut out = format!("query: {}\nformula: {}\n", self.query, self.formula);
        for (k, step) in self.steps.iter().enumerate() {
            match step {
                Step::Rule(r) => {
                    out.push_str(&format!(
                        "{:>2}. rule {} ({}): {}\n      {} => {}\n      certified by {}\n",
                        k + 1,
                        r.rule.number(),
                        fmt_names(&r.spec),
                        r.spec,
                        r.before,
                        r.after,
                        r.certificate
                    ));
                }
                Step::Theorem(t) => {
                    let effect = ProbTerm {
                        targets: t.effect.clone(),
                        do_set: t.interventions.clone(),
                        conds: BTreeSet::new(),
                        population: Population::Target,
                    };
                    out.push_str(&format!("{:>2}. {} for {}", k + 1, t.condition.label(), effect));
                    if !t.chosen.is_empty() {
                        let c: Vec<&str> = t.chosen.iter().map(NodeId::as_str).collect();
                        out.push_str(&format!(" with {{{}}}", c.join(",")));
                    }
                    out.push_str(&format!("\n      = {}\n", t.formula));
                    for c in &t.certificates {
                        out.push_str(&format!("      certified by {c}\n"));
                    }
                    for c in &t.informational {
                        out.push_str(&format!("      (without selection nodes: {} {})\n", c.certificate, if c.holds { "holds" } else { "fails" }));
                    }
                }
            }
        }
        out
    }
}

fn fmt_names(spec: &RuleSpec) -> String {
    match spec.rule() {
        crate::docalc::Rule::One => "insertion/deletion of observations".into(),
        crate::docalc::Rule::Two => "action/observation exchange".into(),
        crate::docalc::Rule::Three => "insertion/deletion of actions".into(),
    }
}
