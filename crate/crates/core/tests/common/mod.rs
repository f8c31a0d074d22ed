//! Oracles and fixtures shared by the integration tests. Everything here is
//! written against plain edge lists and raw model tables so that it does not
//! reuse the library's traversal or enumeration code.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use transport_core::expr::parse_expr;
use transport_core::graph::{CausalDiagram, NodeKind, NodeSet};
use transport_core::parse::{parse_diagram, DiagramFile};
use transport_core::scm::DiscreteScm;
use transport_core::{NodeId, ProbExpr};

pub fn corpus_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../corpus")
}

pub fn load(name: &str) -> DiagramFile {
    let path = corpus_dir().join(name);
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    parse_diagram(&text).unwrap_or_else(|e| panic!("{name}: {e}"))
}

pub fn corpus() -> Vec<(String, DiagramFile)> {
    let mut names: Vec<String> = std::fs::read_dir(corpus_dir())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".dg"))
        .collect();
    names.sort();
    names.into_iter().map(|n| (n.clone(), load(&n))).collect()
}

/// Parses a formula written with lowercase variable names.
pub fn formula(text: &str) -> ProbExpr {
    parse_expr(text, &|n| Some(NodeId::new(n.to_uppercase()))).unwrap_or_else(|e| panic!("{text}: {e}"))
}

/// Edge-list copy of a diagram for the oracles.
#[derive(Debug, Clone)]
pub struct Edges {
    pub n: usize,
    pub directed: Vec<(usize, usize)>,
    pub bidirected: Vec<(usize, usize)>,
}

impl Edges {
    pub fn of(g: &CausalDiagram) -> Self {
        Edges {
            n: g.len(),
            directed: g.directed_edges().collect(),
            bidirected: g.bidirected_edges().collect(),
        }
    }

    pub fn mutilated(&self, cut_in: &BTreeSet<usize>, cut_out: &BTreeSet<usize>) -> Self {
        Edges {
            n: self.n,
            directed: self
                .directed
                .iter()
                .copied()
                .filter(|(a, b)| !cut_in.contains(b) && !cut_out.contains(a))
                .collect(),
            bidirected: self
                .bidirected
                .iter()
                .copied()
                .filter(|(a, b)| !cut_in.contains(a) && !cut_in.contains(b))
                .collect(),
        }
    }

    pub fn descendants(&self, v: usize) -> BTreeSet<usize> {
        let mut seen = BTreeSet::from([v]);
        let mut stack = vec![v];
        while let Some(u) = stack.pop() {
            for &(a, b) in &self.directed {
                if a == u && seen.insert(b) {
                    stack.push(b);
                }
            }
        }
        seen
    }

    pub fn ancestors(&self, start: &BTreeSet<usize>) -> BTreeSet<usize> {
        let mut seen = start.clone();
        let mut stack: Vec<usize> = start.iter().copied().collect();
        while let Some(u) = stack.pop() {
            for &(a, b) in &self.directed {
                if b == u && seen.insert(a) {
                    stack.push(a);
                }
            }
        }
        seen
    }

    /// `(neighbour, arrowhead at this end, arrowhead at the neighbour)`.
    fn incident(&self, v: usize) -> Vec<(usize, bool, bool)> {
        let mut out = Vec::new();
        for &(a, b) in &self.directed {
            if a == v {
                out.push((b, false, true));
            }
            if b == v {
                out.push((a, true, false));
            }
        }
        for &(a, b) in &self.bidirected {
            if a == v {
                out.push((b, true, true));
            }
            if b == v {
                out.push((a, true, true));
            }
        }
        out
    }

    /// Path-enumeration d-separation: every simple path between `x` and `y`
    /// is blocked by `z`.
    pub fn separated(&self, x: usize, y: usize, z: &BTreeSet<usize>) -> bool {
        let desc: Vec<BTreeSet<usize>> = (0..self.n).map(|v| self.descendants(v)).collect();
        let mut path = vec![x];
        !self.active_from(x, y, z, &desc, &mut path, None)
    }

    fn active_from(
        &self,
        v: usize,
        y: usize,
        z: &BTreeSet<usize>,
        desc: &[BTreeSet<usize>],
        path: &mut Vec<usize>,
        head_into_v: Option<bool>,
    ) -> bool {
        for (w, head_at_v, head_at_w) in self.incident(v) {
            if path.contains(&w) {
                continue;
            }
            if let Some(into) = head_into_v {
                let collider = into && head_at_v;
                let open = if collider {
                    desc[v].iter().any(|d| z.contains(d))
                } else {
                    !z.contains(&v)
                };
                if !open {
                    continue;
                }
            }
            if w == y {
                return true;
            }
            path.push(w);
            if self.active_from(w, y, z, desc, path, Some(head_at_w)) {
                return true;
            }
            path.pop();
        }
        false
    }
}

pub fn subsets(items: &[usize]) -> Vec<BTreeSet<usize>> {
    (0u64..1 << items.len())
        .map(|mask| items.iter().enumerate().filter(|(k, _)| mask >> k & 1 == 1).map(|(_, &v)| v).collect())
        .collect()
}

pub fn to_set(s: &BTreeSet<usize>) -> NodeSet {
    s.iter().copied().collect()
}

pub fn observed_indices(g: &CausalDiagram) -> Vec<usize> {
    (0..g.len()).filter(|&i| g.kind(i) == NodeKind::Observed).collect()
}

/// Joint distribution by enumerating every exogenous assignment (all private
/// noises and all shared latents) and evaluating the mechanisms directly.
/// Keys are value vectors in the model's variable order.
pub fn brute_force_joint(scm: &DiscreteScm, do_assign: &BTreeMap<NodeId, usize>) -> BTreeMap<Vec<usize>, f64> {
    let vars = &scm.variables;
    let n = vars.len();
    let pos = |name: &NodeId| vars.iter().position(|v| &v.name == name).unwrap();
    let lpos = |name: &str| scm.latents.iter().position(|l| l.name == name).unwrap();
    let mut radices: Vec<usize> = vars.iter().map(|v| v.noise.len()).collect();
    radices.extend(scm.latents.iter().map(|l| l.dist.len()));
    let total: usize = radices.iter().product();
    let mut out = BTreeMap::new();
    for mut idx in 0..total {
        let mut u = vec![0; radices.len()];
        for k in (0..radices.len()).rev() {
            u[k] = idx % radices[k];
            idx /= radices[k];
        }
        let mut p = 1.0;
        for (k, v) in vars.iter().enumerate() {
            p *= v.noise[u[k]];
        }
        for (k, l) in scm.latents.iter().enumerate() {
            p *= l.dist[u[n + k]];
        }
        let mut val: Vec<Option<usize>> = vec![None; n];
        // repeated passes until every variable is computed
        while val.iter().any(Option::is_none) {
            for (i, v) in vars.iter().enumerate() {
                if val[i].is_some() {
                    continue;
                }
                if let Some(&c) = do_assign.get(&v.name) {
                    val[i] = Some(c);
                    continue;
                }
                let pv: Option<Vec<usize>> = v.parents.iter().map(|p| val[pos(p)]).collect();
                let Some(pv) = pv else { continue };
                let mut row = 0;
                for (p, &x) in v.parents.iter().zip(&pv) {
                    row = row * vars[pos(p)].domain + x;
                }
                for l in &v.latents {
                    let li = lpos(l);
                    row = row * scm.latents[li].dist.len() + u[n + li];
                }
                val[i] = Some(v.mechanism[row * v.noise.len() + u[i]]);
            }
        }
        let key: Vec<usize> = val.into_iter().map(Option::unwrap).collect();
        *out.entry(key).or_insert(0.0) += p;
    }
    out
}

/// `P(a | b)` from a keyed joint; `a` and `b` are `(position, value)` lists.
pub fn conditional(joint: &BTreeMap<Vec<usize>, f64>, a: &[(usize, usize)], b: &[(usize, usize)]) -> f64 {
    let mass = |cond: &dyn Fn(&Vec<usize>) -> bool| joint.iter().filter(|(k, _)| cond(k)).map(|(_, p)| p).sum::<f64>();
    let den = mass(&|k| b.iter().all(|&(i, v)| k[i] == v));
    let num = mass(&|k| b.iter().chain(a).all(|&(i, v)| k[i] == v));
    num / den
}

/// Set-level separation through the pairwise oracle.
pub fn sets_separated(e: &Edges, x: &BTreeSet<usize>, y: &BTreeSet<usize>, z: &BTreeSet<usize>) -> bool {
    x.iter().all(|&a| y.iter().all(|&b| e.separated(a, b, z)))
}

/// Oracle for whether `rule` licenses `(y, z, x, w)`.
pub fn rule_oracle(e: &Edges, rule: u8, y: &BTreeSet<usize>, z: &BTreeSet<usize>, x: &BTreeSet<usize>, w: &BTreeSet<usize>) -> bool {
    let none = BTreeSet::new();
    let given: BTreeSet<usize> = x.union(w).copied().collect();
    let m = match rule {
        1 => e.mutilated(x, &none),
        2 => e.mutilated(x, z),
        _ => {
            let anc = e.mutilated(x, &none).ancestors(w);
            let cut: BTreeSet<usize> = x.iter().chain(z.iter().filter(|v| !anc.contains(v))).copied().collect();
            e.mutilated(&cut, &none)
        }
    };
    sets_separated(&m, y, z, &given)
}

#[derive(Debug, Default, Clone, Copy)]
pub struct FuzzStats {
    pub applied: usize,
    pub rejected: usize,
    /// applicability disagreements with the oracle
    pub oracle_mismatches: usize,
    /// rejections not reported as `RuleNotApplicable`
    pub wrong_errors: usize,
    pub worst: f64,
    pub evaluations: usize,
}

/// Random rule instances on `diagrams` random diagrams; every licensed
/// rewrite is evaluated on `models` sampled pairs in both orientations.
pub fn rule_fuzz(diagrams: u64, models: u64, seed_base: u64) -> FuzzStats {
    use rand::{Rng, SeedableRng};
    use transport_core::docalc::{apply_rule, RuleSpec};
    use transport_core::eval::eval_expr;
    use transport_core::expr::{Population, ProbTerm};
    use transport_core::scm::{sample_pair, ScmConfig, ScmPair};
    use transport_core::verify::{random_diagram, DiagramConfig};
    use transport_core::Error;

    let mut stats = FuzzStats::default();
    for k in 0..diagrams {
        let seed = seed_base + k;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let cfg = DiagramConfig {
            observed: rng.gen_range(3..=6),
            edge_prob: 0.45,
            bidir_prob: 0.2,
            selection_nodes: 1,
        };
        let d = random_diagram(seed, &cfg);
        let g = d.graph();
        let e = Edges::of(g);
        let sel: BTreeSet<usize> = g.selection_nodes().iter().collect();
        let obs = observed_indices(g);
        let pairs: Vec<ScmPair> = (0..models)
            .flat_map(|m| {
                let p = sample_pair(&d, seed * 1000 + m, &ScmConfig::default());
                let flipped = ScmPair::new(d.clone(), p.target.clone(), p.source.clone()).unwrap();
                [p, flipped]
            })
            .collect();
        for _ in 0..6 {
            // 0 = Y, 1 = Z, 2 = X, 3 = W, 4 = unused
            let role: Vec<usize> = obs.iter().map(|_| rng.gen_range(0..5)).collect();
            let pick = |r: usize| -> BTreeSet<usize> { obs.iter().zip(&role).filter(|(_, &k)| k == r).map(|(&v, _)| v).collect() };
            let (y, z, x, w) = (pick(0), pick(1), pick(2), pick(3));
            if y.is_empty() || z.is_empty() {
                continue;
            }
            let names = |s: &BTreeSet<usize>| s.iter().map(|&i| g.name(i).clone()).collect::<BTreeSet<NodeId>>();
            let w_sel: BTreeSet<usize> = w.union(&sel).copied().collect();
            let xz: BTreeSet<usize> = x.union(&z).copied().collect();
            let zw: BTreeSet<usize> = z.union(&w).copied().collect();
            let cases = [
                (1u8, ProbTerm::new(Population::Source, names(&y), names(&x), names(&zw)), RuleSpec::DeleteObservation(names(&z))),
                (2, ProbTerm::new(Population::Source, names(&y), names(&xz), names(&w)), RuleSpec::ActionToObservation(names(&z))),
                (3, ProbTerm::new(Population::Source, names(&y), names(&xz), names(&w)), RuleSpec::DeleteAction(names(&z))),
            ];
            for (rule, term, spec) in cases {
                let expected = rule_oracle(&e, rule, &y, &z, &x, &w_sel);
                let before = ProbExpr::Term(term);
                match apply_rule(g, &before, &[], &spec) {
                    Ok((after, _)) => {
                        stats.applied += 1;
                        if !expected {
                            stats.oracle_mismatches += 1;
                        }
                        for p in &pairs {
                            let a = eval_expr(&before, p).unwrap();
                            let b = eval_expr(&after, p).unwrap();
                            stats.worst = stats.worst.max(b.max_deviation(&a).unwrap());
                            stats.evaluations += 1;
                        }
                    }
                    Err(Error::RuleNotApplicable { .. }) => {
                        stats.rejected += 1;
                        if expected {
                            stats.oracle_mismatches += 1;
                        }
                    }
                    Err(_) => stats.wrong_errors += 1,
                }
            }
        }
    }
    stats
}

/// Every single-edit mutation of the string arrays in `v`: each element
/// removed in turn, and each name of `pool` missing from the array added.
pub fn array_mutations(v: &serde_json::Value, pool: &[String]) -> Vec<(String, serde_json::Value)> {
    use serde_json::Value;
    let mut out = Vec::new();
    fn walk(v: &Value, path: &mut Vec<String>, pool: &[String], root: &Value, out: &mut Vec<(String, Value)>) {
        match v {
            Value::Array(items) if items.iter().all(Value::is_string) => {
                let ptr = format!("/{}", path.join("/"));
                let have: BTreeSet<&str> = items.iter().filter_map(Value::as_str).collect();
                for (k, item) in items.iter().enumerate() {
                    let mut m = root.clone();
                    m.pointer_mut(&ptr).unwrap().as_array_mut().unwrap().remove(k);
                    out.push((format!("{ptr} -{item}"), m));
                }
                for name in pool.iter().filter(|n| !have.contains(n.as_str())) {
                    let mut m = root.clone();
                    let arr = m.pointer_mut(&ptr).unwrap().as_array_mut().unwrap();
                    arr.push(Value::String(name.clone()));
                    arr.sort_by(|a, b| a.as_str().cmp(&b.as_str()));
                    out.push((format!("{ptr} +{name}"), m));
                }
            }
            Value::Array(items) => {
                for (k, item) in items.iter().enumerate() {
                    path.push(k.to_string());
                    walk(item, path, pool, root, out);
                    path.pop();
                }
            }
            Value::Object(map) => {
                for (key, item) in map {
                    path.push(key.replace('~', "~0").replace('/', "~1"));
                    walk(item, path, pool, root, out);
                    path.pop();
                }
            }
            _ => {}
        }
    }
    walk(v, &mut Vec::new(), pool, v, &mut out);
    out
}

/// Mutations of a derivation that either fail to load or are accepted by
/// replay. An empty result means every mutation was caught.
pub fn undetected_mutations(g: &CausalDiagram, d: &transport_core::transport::Derivation) -> (usize, Vec<String>) {
    use transport_core::transport::{replay, Derivation};
    let v = serde_json::to_value(d).unwrap();
    let pool: Vec<String> = observed_indices(g).into_iter().map(|i| g.name(i).to_string()).collect();
    let muts = array_mutations(&v, &pool);
    let missed = muts
        .iter()
        .filter(|(_, m)| match serde_json::from_value::<Derivation>(m.clone()) {
            Ok(md) => replay(g, &md).is_ok(),
            Err(_) => false,
        })
        .map(|(what, _)| what.clone())
        .collect();
    (muts.len(), missed)
}
