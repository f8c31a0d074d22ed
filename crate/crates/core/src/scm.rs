//! Discrete structural causal models and exact enumeration.
//!
//! Each observed variable is a deterministic function of its observed
//! parents, the shared latents of its bidirected arcs, and one private noise
//! variable. Distributions are computed exactly by summing over latents and
//! noise.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{CausalDiagram, NodeId, NodeKind, SelectionDiagram};

pub const DEFAULT_STATE_CAP: u128 = 1 << 20;
const NORMALIZATION_TOL: f64 = 1e-12;

/// An observed variable and its mechanism.
///
/// `mechanism` is indexed row-major over `parents`, then `latents`, then the
/// noise value (fastest).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variable {
    pub name: NodeId,
    pub domain: usize,
    #[serde(default)]
    pub parents: Vec<NodeId>,
    #[serde(default)]
    pub latents: Vec<String>,
    pub noise: Vec<f64>,
    pub mechanism: Vec<usize>,
}

/// A latent shared by the two endpoints of a bidirected arc.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Latent {
    pub name: String,
    pub between: [NodeId; 2],
    pub dist: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteScm {
    pub variables: Vec<Variable>,
    #[serde(default)]
    pub latents: Vec<Latent>,
    #[serde(default = "default_cap", skip_serializing)]
    pub state_cap: u128,
}

fn default_cap() -> u128 {
    DEFAULT_STATE_CAP
}

/// Probability table over a set of variables, row-major with the last
/// variable fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dist {
    pub vars: Vec<NodeId>,
    pub domains: Vec<usize>,
    pub probs: Vec<f64>,
}

impl Dist {
    pub fn index(&self, values: &[usize]) -> usize {
        values.iter().zip(&self.domains).fold(0, |acc, (&v, &d)| acc * d + v)
    }

    pub fn assignment(&self, mut index: usize) -> Vec<usize> {
        let mut out = vec![0; self.domains.len()];
        for (slot, &d) in out.iter_mut().zip(&self.domains).rev() {
            *slot = index % d;
            index /= d;
        }
        out
    }

    pub fn get(&self, values: &[usize]) -> f64 {
        self.probs[self.index(values)]
    }

    pub fn total(&self) -> f64 {
        self.probs.iter().sum()
    }

    pub fn is_normalized(&self) -> bool {
        self.probs.iter().all(|&p| p >= 0.0) && (self.total() - 1.0).abs() <= NORMALIZATION_TOL
    }

    pub fn position(&self, v: &NodeId) -> Result<usize> {
        self.vars.iter().position(|w| w == v).ok_or_else(|| Error::UnknownNode(v.to_string()))
    }

    /// Marginal over `vars`, in the given order.
    pub fn marginal(&self, vars: &[NodeId]) -> Result<Dist> {
        let pos: Vec<usize> = vars.iter().map(|v| self.position(v)).collect::<Result<_>>()?;
        let domains: Vec<usize> = pos.iter().map(|&p| self.domains[p]).collect();
        let mut out = Dist {
            vars: vars.to_vec(),
            domains,
            probs: Vec::new(),
        };
        out.probs = vec![0.0; out.domains.iter().product()];
        for (i, &p) in self.probs.iter().enumerate() {
            let a = self.assignment(i);
            let sub: Vec<usize> = pos.iter().map(|&k| a[k]).collect();
            let j = out.index(&sub);
            out.probs[j] += p;
        }
        Ok(out)
    }
}

struct Compiled {
    order: Vec<usize>,
    parent_pos: Vec<Vec<usize>>,
    latent_pos: Vec<Vec<usize>>,
    /// per variable: rows over parent and latent configurations, `domain` entries each
    cpt: Vec<Vec<f64>>,
}

fn check_dist(what: &str, d: &[f64]) -> Result<()> {
    if d.is_empty() || d.iter().any(|&p| p.is_nan() || p < 0.0) {
        return Err(Error::InvalidModel(format!("{what}: probabilities must be nonnegative")));
    }
    let total: f64 = d.iter().sum();
    if (total - 1.0).abs() > NORMALIZATION_TOL {
        return Err(Error::InvalidModel(format!("{what}: probabilities sum to {total}")));
    }
    Ok(())
}

impl DiscreteScm {
    pub fn from_json(text: &str) -> Result<Self> {
        let scm: DiscreteScm = serde_json::from_str(text).map_err(|e| Error::InvalidModel(e.to_string()))?;
        scm.validate()?;
        Ok(scm)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    pub fn variable(&self, name: &NodeId) -> Option<&Variable> {
        self.variables.iter().find(|v| &v.name == name)
    }

    pub fn domain(&self, name: &NodeId) -> Result<usize> {
        self.variable(name).map(|v| v.domain).ok_or_else(|| Error::UnknownNode(name.to_string()))
    }

    /// Variable names in declaration order.
    pub fn names(&self) -> Vec<NodeId> {
        self.variables.iter().map(|v| v.name.clone()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.compile(&BTreeMap::new()).map(|_| ())
    }

    fn compile(&self, do_assign: &BTreeMap<NodeId, usize>) -> Result<Compiled> {
        let n = self.variables.len();
        let index: BTreeMap<&NodeId, usize> = self.variables.iter().enumerate().map(|(i, v)| (&v.name, i)).collect();
        if index.len() != n {
            return Err(Error::InvalidModel("duplicate variable names".into()));
        }
        let latent_index: BTreeMap<&str, usize> = self.latents.iter().enumerate().map(|(i, l)| (l.name.as_str(), i)).collect();
        if latent_index.len() != self.latents.len() {
            return Err(Error::InvalidModel("duplicate latent names".into()));
        }
        for l in &self.latents {
            check_dist(&format!("latent {}", l.name), &l.dist)?;
            for end in &l.between {
                let v = index.get(end).map(|&i| &self.variables[i]).ok_or_else(|| Error::UnknownNode(end.to_string()))?;
                if !v.latents.contains(&l.name) {
                    return Err(Error::InvalidModel(format!("{} does not read its latent {}", end, l.name)));
                }
            }
        }
        for (name, &value) in do_assign {
            let &i = index.get(name).ok_or_else(|| Error::UnknownNode(name.to_string()))?;
            if value >= self.variables[i].domain {
                return Err(Error::BadValue {
                    node: name.to_string(),
                    value,
                    size: self.variables[i].domain,
                });
            }
        }

        let mut parent_pos = Vec::with_capacity(n);
        let mut latent_pos = Vec::with_capacity(n);
        let mut cpt = Vec::with_capacity(n);
        for v in &self.variables {
            if v.domain < 1 {
                return Err(Error::InvalidModel(format!("{} has an empty domain", v.name)));
            }
            check_dist(&format!("noise of {}", v.name), &v.noise)?;
            let pp: Vec<usize> = v
                .parents
                .iter()
                .map(|p| index.get(p).copied().ok_or_else(|| Error::UnknownNode(p.to_string())))
                .collect::<Result<_>>()?;
            let lp: Vec<usize> = v
                .latents
                .iter()
                .map(|l| latent_index.get(l.as_str()).copied().ok_or_else(|| Error::UnknownNode(l.clone())))
                .collect::<Result<_>>()?;
            for &l in &lp {
                if !self.latents[l].between.contains(&v.name) {
                    return Err(Error::InvalidModel(format!("{} reads latent {} it is not an endpoint of", v.name, self.latents[l].name)));
                }
            }
            let rows: usize = pp.iter().map(|&p| self.variables[p].domain).product::<usize>()
                * lp.iter().map(|&l| self.latents[l].dist.len()).product::<usize>();
            let u = v.noise.len();
            if v.mechanism.len() != rows * u {
                return Err(Error::InvalidModel(format!(
                    "mechanism of {} has {} entries, expected {}",
                    v.name,
                    v.mechanism.len(),
                    rows * u
                )));
            }
            if let Some(&bad) = v.mechanism.iter().find(|&&m| m >= v.domain) {
                return Err(Error::BadValue {
                    node: v.name.to_string(),
                    value: bad,
                    size: v.domain,
                });
            }
            let mut table = vec![0.0; rows * v.domain];
            match do_assign.get(&v.name) {
                Some(&value) => (0..rows).for_each(|r| table[r * v.domain + value] = 1.0),
                None => {
                    for r in 0..rows {
                        for (k, &pu) in v.noise.iter().enumerate() {
                            table[r * v.domain + v.mechanism[r * u + k]] += pu;
                        }
                    }
                }
            }
            parent_pos.push(pp);
            latent_pos.push(lp);
            cpt.push(table);
        }

        // topological order of the directed part
        let mut order = Vec::with_capacity(n);
        let mut state = vec![0u8; n];
        fn visit(i: usize, vars: &[Variable], pp: &[Vec<usize>], state: &mut [u8], order: &mut Vec<usize>) -> Result<()> {
            match state[i] {
                2 => return Ok(()),
                1 => return Err(Error::Cycle(vec![vars[i].name.to_string()])),
                _ => {}
            }
            state[i] = 1;
            for &p in &pp[i] {
                visit(p, vars, pp, state, order)?;
            }
            state[i] = 2;
            order.push(i);
            Ok(())
        }
        for i in 0..n {
            visit(i, &self.variables, &parent_pos, &mut state, &mut order)?;
        }
        Ok(Compiled {
            order,
            parent_pos,
            latent_pos,
            cpt,
        })
    }

    fn enumerate(&self, c: &Compiled) -> Result<Dist> {
        let domains: Vec<usize> = self.variables.iter().map(|v| v.domain).collect();
        let states: u128 = domains.iter().map(|&d| d as u128).product();
        if states > self.state_cap {
            return Err(Error::DomainOverflow {
                states,
                cap: self.state_cap,
            });
        }
        let ldom: Vec<usize> = self.latents.iter().map(|l| l.dist.len()).collect();
        let configs: u128 = ldom.iter().map(|&d| d as u128).product();
        if states.saturating_mul(configs) > self.state_cap.saturating_mul(64) {
            return Err(Error::DomainOverflow {
                states: states.saturating_mul(configs),
                cap: self.state_cap.saturating_mul(64),
            });
        }
        let mut dist = Dist {
            vars: self.names(),
            domains: domains.clone(),
            probs: vec![0.0; states as usize],
        };
        let n = domains.len();
        let mut lat = vec![0usize; ldom.len()];
        let mut vals = vec![0usize; n];
        for _ in 0..configs {
            let pl: f64 = lat.iter().enumerate().map(|(k, &v)| self.latents[k].dist[v]).product();
            // depth-first over variables in topological order, pruning zero mass
            fn go(
                depth: usize,
                mass: f64,
                scm: &DiscreteScm,
                c: &Compiled,
                lat: &[usize],
                ldom: &[usize],
                vals: &mut [usize],
                dist: &mut Dist,
            ) {
                if mass == 0.0 {
                    return;
                }
                if depth == c.order.len() {
                    let j = dist.index(vals);
                    dist.probs[j] += mass;
                    return;
                }
                let i = c.order[depth];
                let mut row = 0;
                for &p in &c.parent_pos[i] {
                    row = row * scm.variables[p].domain + vals[p];
                }
                for &l in &c.latent_pos[i] {
                    row = row * ldom[l] + lat[l];
                }
                let d = scm.variables[i].domain;
                for v in 0..d {
                    vals[i] = v;
                    go(depth + 1, mass * c.cpt[i][row * d + v], scm, c, lat, ldom, vals, dist);
                }
            }
            go(0, pl, self, c, &lat, &ldom, &mut vals, &mut dist);
            for k in (0..lat.len()).rev() {
                lat[k] += 1;
                if lat[k] < ldom[k] {
                    break;
                }
                lat[k] = 0;
            }
        }
        Ok(dist)
    }

    /// Exact joint distribution over the observed variables.
    pub fn joint(&self) -> Result<Dist> {
        self.enumerate(&self.compile(&BTreeMap::new())?)
    }

    /// Joint distribution of the model with the assigned mechanisms replaced
    /// by constants.
    pub fn interventional(&self, do_assign: &BTreeMap<NodeId, usize>) -> Result<Dist> {
        self.enumerate(&self.compile(do_assign)?)
    }
}

/// Options for [`sample_pair`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScmConfig {
    pub domain_size: usize,
    /// Each value appears this many times in every mechanism row, so the
    /// noise domain has `domain_size * noise_granularity` values.
    pub noise_granularity: usize,
    pub latent_domain: usize,
    /// Noise probabilities are clamped to `[floor, 1 - floor]` before
    /// normalization.
    pub positivity_floor: f64,
    pub state_cap: u128,
}

impl Default for ScmConfig {
    fn default() -> Self {
        ScmConfig {
            domain_size: 2,
            noise_granularity: 2,
            latent_domain: 2,
            positivity_floor: 0.05,
            state_cap: DEFAULT_STATE_CAP,
        }
    }
}

/// Source and target models over one selection diagram.
#[derive(Debug, Clone)]
pub struct ScmPair {
    pub source: DiscreteScm,
    pub target: DiscreteScm,
    pub diagram: SelectionDiagram,
}

fn latent_name(a: &NodeId, b: &NodeId) -> String {
    format!("U_{a}_{b}")
}

/// Observed nodes with a selection parent.
pub fn selection_targets(g: &CausalDiagram) -> BTreeSet<NodeId> {
    g.selection_nodes().iter().flat_map(|s| g.children(s).iter()).map(|i| g.name(i).clone()).collect()
}

impl ScmPair {
    /// Checks that both models match the diagram and differ only where a
    /// selection node points.
    pub fn new(diagram: SelectionDiagram, source: DiscreteScm, target: DiscreteScm) -> Result<Self> {
        let g = diagram.graph();
        source.validate()?;
        target.validate()?;
        let observed: Vec<NodeId> = g.names_of(g.observed()).into_iter().collect();
        let pointed = selection_targets(g);
        for scm in [&source, &target] {
            let mut names = scm.names();
            names.sort();
            if names != observed {
                return Err(Error::InvalidModel("model variables differ from the diagram's observed nodes".into()));
            }
            for v in &scm.variables {
                let i = g.index_of(v.name.as_str())?;
                let mut ps = v.parents.clone();
                ps.sort();
                let want: Vec<NodeId> = g.names_of(g.parents(i).intersection(g.observed())).into_iter().collect();
                if ps != want {
                    return Err(Error::InvalidModel(format!("parents of {} differ from the diagram", v.name)));
                }
                if v.latents.len() != g.spouses(i).len() {
                    return Err(Error::InvalidModel(format!("latents of {} differ from the diagram", v.name)));
                }
            }
            for l in &scm.latents {
                let (a, b) = (g.index_of(l.between[0].as_str())?, g.index_of(l.between[1].as_str())?);
                if !g.spouses(a).contains(b) {
                    return Err(Error::InvalidModel(format!("latent {} has no bidirected arc", l.name)));
                }
            }
            if scm.latents.len() != g.bidirected_edges().count() {
                return Err(Error::InvalidModel("one latent per bidirected arc is required".into()));
            }
        }
        for (s, t) in source.variables.iter().zip(&target.variables) {
            if s.name != t.name || s.domain != t.domain || s.parents != t.parents || s.latents != t.latents {
                return Err(Error::InvalidModel(format!("{} differs in structure across the pair", s.name)));
            }
            if (s.noise != t.noise || s.mechanism != t.mechanism) && !pointed.contains(&s.name) {
                return Err(Error::InvalidModel(format!("{} differs across the pair without a selection node", s.name)));
            }
        }
        for (s, t) in source.latents.iter().zip(&target.latents) {
            if s.name != t.name || s.between != t.between {
                return Err(Error::InvalidModel("latents differ in structure across the pair".into()));
            }
            if s.dist != t.dist && !s.between.iter().all(|e| pointed.contains(e)) {
                return Err(Error::InvalidModel(format!("latent {} differs without selection at both ends", s.name)));
            }
        }
        Ok(ScmPair { source, target, diagram })
    }
}

fn noise_dist(rng: &mut ChaCha8Rng, len: usize, floor: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..len).map(|_| rng.gen::<f64>().clamp(floor, 1.0 - floor)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|p| p / total).collect()
}

fn mechanism(rng: &mut ChaCha8Rng, rows: usize, domain: usize, granularity: usize) -> Vec<usize> {
    let base: Vec<usize> = (0..domain).flat_map(|v| std::iter::repeat_n(v, granularity)).collect();
    let mut out = Vec::with_capacity(rows * base.len());
    for _ in 0..rows {
        let mut row = base.clone();
        row.shuffle(rng);
        out.extend(row);
    }
    out
}

/// Reproducible random pair on `d`. Every mechanism row maps the noise onto
/// every value, so all conditionals are strictly positive. The target
/// re-samples mechanism and noise at selection-pointed variables, and a
/// latent only when both its endpoints are selection-pointed.
pub fn sample_pair(d: &SelectionDiagram, seed: u64, config: &ScmConfig) -> ScmPair {
    let g = d.graph();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dom = config.domain_size.max(1);
    let gran = config.noise_granularity.max(1);
    let ldom = config.latent_domain.max(1);
    let floor = config.positivity_floor;

    let latents: Vec<Latent> = g
        .bidirected_edges()
        .map(|(a, b)| {
            let (a, b) = (g.name(a).clone(), g.name(b).clone());
            Latent {
                name: latent_name(&a, &b),
                between: [a, b],
                dist: noise_dist(&mut rng, ldom, floor),
            }
        })
        .collect();
    let mut variables = Vec::new();
    for i in g.observed().iter() {
        let name = g.name(i).clone();
        let parents: Vec<NodeId> = g.names_of(g.parents(i).intersection(g.observed())).into_iter().collect();
        let lats: Vec<String> = latents.iter().filter(|l| l.between.contains(&name)).map(|l| l.name.clone()).collect();
        let rows = dom.pow(parents.len() as u32) * ldom.pow(lats.len() as u32);
        variables.push(Variable {
            noise: noise_dist(&mut rng, dom * gran, floor),
            mechanism: mechanism(&mut rng, rows, dom, gran),
            name,
            domain: dom,
            parents,
            latents: lats,
        });
    }
    let source = DiscreteScm {
        variables,
        latents,
        state_cap: config.state_cap,
    };
    let mut target = source.clone();
    let pointed = selection_targets(g);
    for v in target.variables.iter_mut() {
        if pointed.contains(&v.name) {
            let rows = v.mechanism.len() / v.noise.len();
            v.noise = noise_dist(&mut rng, dom * gran, floor);
            v.mechanism = mechanism(&mut rng, rows, dom, gran);
        }
    }
    for l in target.latents.iter_mut() {
        if l.between.iter().all(|e| pointed.contains(e)) {
            l.dist = noise_dist(&mut rng, ldom, floor);
        }
    }
    debug_assert!(g.names().iter().enumerate().all(|(i, _)| g.kind(i) == NodeKind::Selection || source.variable(g.name(i)).is_some()));
    ScmPair {
        source,
        target,
        diagram: d.clone(),
    }
}
