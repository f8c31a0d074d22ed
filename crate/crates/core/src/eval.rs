//! Numerical semantics of probability expressions over a model pair.
//!
//! Source terms with interventions read the source model's interventional
//! distributions, other source terms its joint, and target terms the target
//! joint. Target terms with interventions have no reading and are rejected.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::{Population, ProbExpr, ProbTerm};
use crate::graph::NodeId;
use crate::scm::{DiscreteScm, Dist, ScmPair};
use crate::transport::Query;

/// Values of an expression for every assignment of `vars`, row-major with
/// the last variable fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub vars: Vec<NodeId>,
    pub domains: Vec<usize>,
    pub values: Vec<f64>,
}

impl Table {
    fn assignments(vars: &[NodeId], domains: &[usize]) -> Vec<BTreeMap<NodeId, usize>> {
        let total: usize = domains.iter().product();
        (0..total)
            .map(|mut idx| {
                let mut a = BTreeMap::new();
                for (v, &d) in vars.iter().zip(domains).rev() {
                    a.insert(v.clone(), idx % d);
                    idx /= d;
                }
                a
            })
            .collect()
    }

    /// Value at the projection of `assignment` onto this table's variables.
    pub fn at(&self, assignment: &BTreeMap<NodeId, usize>) -> Result<f64> {
        let mut idx = 0;
        for (v, &d) in self.vars.iter().zip(&self.domains) {
            let x = *assignment.get(v).ok_or_else(|| Error::UnknownNode(v.to_string()))?;
            idx = idx * d + x;
        }
        Ok(self.values[idx])
    }

    /// Largest absolute difference, broadcasting `self` over the variables of
    /// `reference`. `self` may not range over variables `reference` lacks.
    pub fn max_deviation(&self, reference: &Table) -> Result<f64> {
        let have: BTreeSet<&NodeId> = reference.vars.iter().collect();
        if !self.vars.iter().all(|v| have.contains(v)) {
            return Err(mismatch(&self.vars, &reference.vars));
        }
        let mut worst: f64 = 0.0;
        for (k, a) in Self::assignments(&reference.vars, &reference.domains).iter().enumerate() {
            worst = worst.max((self.at(a)? - reference.values[k]).abs());
        }
        Ok(worst)
    }
}

fn mismatch(formula: &[NodeId], query: &[NodeId]) -> Error {
    let join = |v: &[NodeId]| v.iter().map(NodeId::as_str).collect::<Vec<_>>().join(",");
    Error::FreeVariableMismatch {
        formula: join(formula),
        query: join(query),
    }
}

type DistKey = (Population, Vec<(NodeId, usize)>);

struct Evaluator<'a> {
    pair: &'a ScmPair,
    dists: HashMap<DistKey, Rc<Dist>>,
    marginals: HashMap<(DistKey, Vec<NodeId>), Rc<Dist>>,
}

impl<'a> Evaluator<'a> {
    fn new(pair: &'a ScmPair) -> Self {
        Evaluator {
            pair,
            dists: HashMap::new(),
            marginals: HashMap::new(),
        }
    }

    fn model(&self, p: Population) -> &'a DiscreteScm {
        match p {
            Population::Source => &self.pair.source,
            Population::Target => &self.pair.target,
        }
    }

    fn marginal(&mut self, key: &DistKey, vars: &[NodeId]) -> Result<Rc<Dist>> {
        let mkey = (key.clone(), vars.to_vec());
        if let Some(d) = self.marginals.get(&mkey) {
            return Ok(d.clone());
        }
        let full = match self.dists.get(key) {
            Some(d) => d.clone(),
            None => {
                let assign: BTreeMap<NodeId, usize> = key.1.iter().cloned().collect();
                let d = Rc::new(self.model(key.0).interventional(&assign)?);
                self.dists.insert(key.clone(), d.clone());
                d
            }
        };
        let m = Rc::new(full.marginal(vars)?);
        self.marginals.insert(mkey, m.clone());
        Ok(m)
    }

    fn lookup(&mut self, key: &DistKey, vars: &BTreeSet<NodeId>, env: &BTreeMap<NodeId, usize>) -> Result<f64> {
        if vars.is_empty() {
            return Ok(1.0);
        }
        let vars: Vec<NodeId> = vars.iter().cloned().collect();
        let m = self.marginal(key, &vars)?;
        let values: Vec<usize> = vars.iter().map(|v| bound(env, v)).collect::<Result<_>>()?;
        Ok(m.get(&values))
    }

    fn term(&mut self, t: &ProbTerm, env: &BTreeMap<NodeId, usize>) -> Result<f64> {
        if t.population == Population::Target && !t.do_set.is_empty() {
            return Err(Error::UnresolvableTerm(t.to_string()));
        }
        let assign: Vec<(NodeId, usize)> = t.do_set.iter().map(|v| Ok((v.clone(), bound(env, v)?))).collect::<Result<_>>()?;
        let key = (t.population, assign);
        let joint: BTreeSet<NodeId> = t.targets.union(&t.conds).cloned().collect();
        let num = self.lookup(&key, &joint, env)?;
        let den = self.lookup(&key, &t.conds, env)?;
        if den == 0.0 {
            return Err(Error::DivisionUndefined(t.to_string()));
        }
        Ok(num / den)
    }

    fn value(&mut self, e: &ProbExpr, env: &mut BTreeMap<NodeId, usize>) -> Result<f64> {
        match e {
            ProbExpr::Term(t) => self.term(t, env),
            ProbExpr::Product { factors } => {
                let mut acc = 1.0;
                for f in factors {
                    acc *= self.value(f, env)?;
                }
                Ok(acc)
            }
            ProbExpr::Sum { var, body } => {
                let d = self.pair.source.domain(var)?;
                let mut acc = 0.0;
                for v in 0..d {
                    env.insert(var.clone(), v);
                    acc += self.value(body, env)?;
                }
                env.remove(var);
                Ok(acc)
            }
        }
    }
}

fn bound(env: &BTreeMap<NodeId, usize>, v: &NodeId) -> Result<usize> {
    env.get(v).copied().ok_or_else(|| Error::InvalidExpr(format!("{v} is not bound")))
}

/// Evaluates `expr` for every assignment of its free variables.
pub fn eval_expr(expr: &ProbExpr, pair: &ScmPair) -> Result<Table> {
    expr.validate()?;
    let vars: Vec<NodeId> = expr.free_vars().into_iter().collect();
    let domains: Vec<usize> = vars.iter().map(|v| pair.source.domain(v)).collect::<Result<_>>()?;
    let mut ev = Evaluator::new(pair);
    let mut values = Vec::new();
    for mut a in Table::assignments(&vars, &domains) {
        values.push(ev.value(expr, &mut a)?);
    }
    Ok(Table { vars, domains, values })
}

/// `P(y|do(x),z)` in one model, over the query's variables.
pub fn effect_in(scm: &DiscreteScm, q: &Query) -> Result<Table> {
    let vars: Vec<NodeId> = q.vars().into_iter().collect();
    let domains: Vec<usize> = vars.iter().map(|v| scm.domain(v)).collect::<Result<_>>()?;
    let yz: Vec<NodeId> = q.effect.union(&q.strata).cloned().collect();
    let z: Vec<NodeId> = q.strata.iter().cloned().collect();
    let mut cache: HashMap<Vec<usize>, (Dist, Dist)> = HashMap::new();
    let mut values = Vec::new();
    for a in Table::assignments(&vars, &domains) {
        let xs: Vec<usize> = q.interventions.iter().map(|v| a[v]).collect();
        if !cache.contains_key(&xs) {
            let assign: BTreeMap<NodeId, usize> = q.interventions.iter().cloned().zip(xs.iter().copied()).collect();
            let d = scm.interventional(&assign)?;
            cache.insert(xs.clone(), (d.marginal(&yz)?, d.marginal(&z)?));
        }
        let (num, den) = &cache[&xs];
        let nv: Vec<usize> = yz.iter().map(|v| a[v]).collect();
        let dv: Vec<usize> = z.iter().map(|v| a[v]).collect();
        let d = den.get(&dv);
        if d == 0.0 {
            return Err(Error::DivisionUndefined(q.to_string()));
        }
        values.push(num.get(&nv) / d);
    }
    Ok(Table { vars, domains, values })
}

/// Ground truth `P*(y|do(x),z)` from the target model.
pub fn target_effect(pair: &ScmPair, q: &Query) -> Result<Table> {
    effect_in(&pair.target, q)
}

/// Largest deviation of `formula` from the target effect of `q`.
pub fn formula_deviation(formula: &ProbExpr, pair: &ScmPair, q: &Query) -> Result<f64> {
    let free = formula.free_vars();
    let want = q.vars();
    if !free.is_subset(&want) {
        return Err(mismatch(&free.into_iter().collect::<Vec<_>>(), &want.into_iter().collect::<Vec<_>>()));
    }
    eval_expr(formula, pair)?.max_deviation(&target_effect(pair, q)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse_expr;
    use crate::graph::DiagramSpec;
    use crate::scm::{sample_pair, ScmConfig, Variable, DEFAULT_STATE_CAP};

    fn upper(s: &str) -> Option<NodeId> {
        Some(NodeId::new(s.to_uppercase()))
    }

    fn uniform_pair() -> ScmPair {
        let d = DiagramSpec::new().nodes(&["X", "Y"]).build().unwrap();
        let var = |n: &str| Variable {
            name: n.into(),
            domain: 2,
            parents: vec![],
            latents: vec![],
            noise: vec![0.5, 0.5],
            mechanism: vec![0, 1],
        };
        let scm = DiscreteScm {
            variables: vec![var("X"), var("Y")],
            latents: vec![],
            state_cap: DEFAULT_STATE_CAP,
        };
        ScmPair::new(d, scm.clone(), scm).unwrap()
    }

    #[test]
    fn uniform_conditional() {
        let t = eval_expr(&parse_expr("P*(y|x)", &upper).unwrap(), &uniform_pair()).unwrap();
        assert_eq!(t.vars, vec![NodeId::from("X"), NodeId::from("Y")]);
        assert!(t.values.iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn target_interventions_rejected() {
        let e = parse_expr("P*(y|do(x))", &upper).unwrap();
        assert!(matches!(eval_expr(&e, &uniform_pair()), Err(Error::UnresolvableTerm(_))));
    }

    #[test]
    fn reweighting_matches_target_effect() {
        let d = DiagramSpec::new()
            .nodes(&["X", "Y", "Z"])
            .edge("Z", "X")
            .edge("Z", "Y")
            .edge("X", "Y")
            .bidir("X", "Y")
            .sel("S", "Z")
            .build()
            .unwrap();
        let q = Query::new(&["Y"], &["X"]);
        let good = parse_expr("sum_z P(y|do(x),z) P*(z)", &upper).unwrap();
        let naive = parse_expr("P(y|do(x))", &upper).unwrap();
        let mut naive_max: f64 = 0.0;
        for seed in 0..10 {
            let pair = sample_pair(&d, seed, &ScmConfig::default());
            assert!(formula_deviation(&good, &pair, &q).unwrap() < 1e-12);
            naive_max = naive_max.max(formula_deviation(&naive, &pair, &q).unwrap());
        }
        assert!(naive_max > 1e-3);
    }

    #[test]
    fn free_variables_must_be_query_variables() {
        let pair = uniform_pair();
        let e = parse_expr("P*(y|x)", &upper).unwrap();
        let q = Query::new(&["Y"], &["X"]);
        assert!(formula_deviation(&e, &pair, &q).unwrap() < 1e-15);
        let q2 = Query::new(&["X"], &["Y"]);
        assert!(formula_deviation(&parse_expr("P*(x)", &upper).unwrap(), &pair, &q2).is_ok());
        let d = DiagramSpec::new().nodes(&["X", "Y", "Z"]).build().unwrap();
        let p3 = sample_pair(&d, 0, &ScmConfig::default());
        let e3 = parse_expr("P(y|do(x),z)", &upper).unwrap();
        assert!(matches!(formula_deviation(&e3, &p3, &q), Err(Error::FreeVariableMismatch { .. })));
    }

    #[test]
    fn zero_probability_condition() {
        let mut pair = uniform_pair();
        pair.source.variables[0].noise = vec![1.0, 0.0];
        let e = parse_expr("P(y|x)", &upper).unwrap();
        assert!(matches!(eval_expr(&e, &pair), Err(Error::DivisionUndefined(_))));
    }
}
