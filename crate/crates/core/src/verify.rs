//! Seeded verification campaigns and random diagrams.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::eval::formula_deviation;
use crate::exec::{self, Execution};
use crate::expr::ProbExpr;
use crate::graph::{DiagramSpec, SelectionDiagram};
use crate::scm::{sample_pair, ScmConfig};
use crate::transport::Query;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerifyConfig {
    pub seeds: u64,
    pub seed_base: u64,
    pub tol: f64,
    pub scm: ScmConfig,
    pub execution: Execution,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            seeds: 100,
            seed_base: 0,
            tol: 1e-9,
            scm: ScmConfig::default(),
            execution: Execution::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub outcomes: Vec<SeedOutcome>,
    pub max_deviation: f64,
    pub worst_seed: u64,
    pub tol: f64,
    pub passed: bool,
}

impl VerifyReport {
    fn from_outcomes(outcomes: Vec<SeedOutcome>, tol: f64) -> Self {
        let worst = outcomes
            .iter()
            .fold(None::<SeedOutcome>, |acc, o| match acc {
                Some(a) if a.deviation >= o.deviation => Some(a),
                _ => Some(*o),
            })
            .unwrap_or(SeedOutcome { seed: 0, deviation: 0.0 });
        VerifyReport {
            passed: outcomes.iter().all(|o| o.deviation < tol),
            max_deviation: worst.deviation,
            worst_seed: worst.seed,
            tol,
            outcomes,
        }
    }

    /// Seeds whose deviation reaches `threshold`.
    pub fn failing_seeds(&self, threshold: f64) -> Vec<u64> {
        self.outcomes.iter().filter(|o| o.deviation >= threshold).map(|o| o.seed).collect()
    }
}

/// Compares `formula` with the target effect of `q` on `cfg.seeds` sampled
/// model pairs. Results are merged in seed order whatever the execution.
pub fn verify_formula(d: &SelectionDiagram, q: &Query, formula: &ProbExpr, cfg: &VerifyConfig) -> Result<VerifyReport> {
    let seeds: Vec<u64> = (0..cfg.seeds).map(|k| cfg.seed_base.wrapping_add(k)).collect();
    let results = exec::map(&seeds, cfg.execution, |&seed| {
        let pair = sample_pair(d, seed, &cfg.scm);
        formula_deviation(formula, &pair, q).map(|deviation| SeedOutcome { seed, deviation })
    });
    let outcomes = results.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(VerifyReport::from_outcomes(outcomes, cfg.tol))
}

/// Shape of [`random_diagram`] outputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiagramConfig {
    pub observed: usize,
    pub edge_prob: f64,
    pub bidir_prob: f64,
    pub selection_nodes: usize,
}

impl Default for DiagramConfig {
    fn default() -> Self {
        DiagramConfig {
            observed: 6,
            edge_prob: 0.35,
            bidir_prob: 0.15,
            selection_nodes: 1,
        }
    }
}

/// Observed nodes are `A`, `B`, ... in a random topological order; each
/// selection node points at one or two observed nodes.
pub fn random_diagram(seed: u64, cfg: &DiagramConfig) -> SelectionDiagram {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.observed.clamp(1, 26);
    let names: Vec<String> = (0..n).map(|i| ((b'A' + i as u8) as char).to_string()).collect();
    let order = sample(&mut rng, n, n).into_vec();
    let mut spec = DiagramSpec::new();
    spec.nodes = names.clone();
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (&names[order[i]], &names[order[j]]);
            if rng.gen_bool(cfg.edge_prob) {
                spec.edges.push((a.clone(), b.clone()));
            }
            if rng.gen_bool(cfg.bidir_prob) {
                spec.bidirected.push((a.clone(), b.clone()));
            }
        }
    }
    for s in 0..cfg.selection_nodes {
        let name = if s == 0 { "S".to_string() } else { format!("S{}", s + 1) };
        let k = rng.gen_range(1..=2.min(n));
        for t in sample(&mut rng, n, k) {
            spec.selection_edges.push((name.clone(), names[t].clone()));
        }
    }
    spec.build().expect("edges follow a topological order")
}
