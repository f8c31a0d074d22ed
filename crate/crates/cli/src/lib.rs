//! Command-line front end: argument model and command execution.
//!
//! Every command returns a [`Report`] holding the full stdout text and an
//! exit status, so output is assembled in one place and can be tested
//! without spawning a process.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};
use transport_core::dsep::{d_separated, witness_path, SeparationQuery};
use transport_core::exec::Execution;
use transport_core::parse::{parse_diagram, DiagramFile};
use transport_core::scm::ScmConfig;
use transport_core::transport::{
    admissibility_query, find_s_admissible, replay, transport, CandidatePool, Derivation, Query, TransportOptions,
    TransportResult,
};
use transport_core::verify::{verify_formula, VerifyConfig};
use transport_core::{parse_expr, CausalDiagram, Mutilation, NodeId, NodeSet, ProbExpr};

pub const SCHEMA: u32 = 1;

#[derive(Debug, Parser)]
#[command(name = "transport", version, about = "Transportability of causal effects across populations")]
pub struct RunConfig {
    #[command(subcommand)]
    pub command: Command,
    /// Output format.
    #[arg(long, value_enum, default_value_t = Format::Text, global = true)]
    pub format: Format,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Latex,
    Json,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Separation, S-admissibility and direct-transport checks.
    Check(CheckArgs),
    /// Derive a transport formula for the query.
    Derive(DeriveArgs),
    /// Check a formula against sampled source/target model pairs.
    Verify(VerifyArgs),
    /// Pretty-print a stored derivation.
    Explain(ExplainArgs),
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    /// Diagram file.
    #[arg(short = 'd', long)]
    pub diagram: PathBuf,
    /// Effect variables; overrides the file's query.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub effect: Option<Vec<String>>,
    /// Intervened variables; overrides the file's query.
    #[arg(long = "do", value_delimiter = ',', num_args = 1..)]
    pub interventions: Option<Vec<String>>,
    /// Strata of a z-specific effect; overrides the file's query.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    pub strata: Option<Vec<String>>,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    /// Largest candidate set considered.
    #[arg(long)]
    pub max_set_size: Option<usize>,
    /// Prefer formulas with fewer source interventional factors.
    #[arg(long)]
    pub prefer_observational: bool,
    /// Run on the calling thread only.
    #[arg(long)]
    pub sequential: bool,
}

impl SearchArgs {
    fn options(&self) -> TransportOptions {
        TransportOptions {
            max_set_size: self.max_set_size,
            prefer_observational: self.prefer_observational,
            execution: execution(self.sequential),
        }
    }
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    #[command(flatten)]
    pub query: QueryArgs,
    /// Test whether this set (possibly empty) is S-admissible.
    #[arg(long, value_delimiter = ',', num_args = 0.., conflicts_with_all = ["direct", "separate"])]
    pub sadmissible: Option<Vec<String>>,
    /// Test whether the query's relation carries over unchanged.
    #[arg(long, conflicts_with = "separate")]
    pub direct: bool,
    /// Test `separate _||_ from | given` instead of a query-based check.
    #[arg(long, value_delimiter = ',', num_args = 1.., requires = "from")]
    pub separate: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub from: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    pub given: Vec<String>,
    /// Remove arrows into these nodes first.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    pub cut_incoming: Vec<String>,
    /// Remove arrows out of these nodes first.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    pub cut_outgoing: Vec<String>,
    #[command(flatten)]
    pub search: SearchArgs,
}

#[derive(Debug, Args)]
pub struct DeriveArgs {
    #[command(flatten)]
    pub query: QueryArgs,
    #[command(flatten)]
    pub search: SearchArgs,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub query: QueryArgs,
    #[command(flatten)]
    pub search: SearchArgs,
    /// Formula to check instead of the derived one.
    #[arg(long, conflicts_with = "formula_file")]
    pub formula: Option<String>,
    /// File holding the formula to check.
    #[arg(long)]
    pub formula_file: Option<PathBuf>,
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    pub seeds: u64,
    #[arg(long, default_value_t = 0)]
    pub seed_base: u64,
    #[arg(long, default_value_t = 1e-9, value_parser = positive)]
    pub tol: f64,
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u64).range(1..=16))]
    pub domain_size: u64,
    #[arg(long, default_value_t = 0.05, value_parser = floor)]
    pub positivity_floor: f64,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    /// JSON file written by `derive --format json`, or a bare derivation.
    pub trace: PathBuf,
    /// Replay the trace against this diagram.
    #[arg(short = 'd', long)]
    pub diagram: Option<PathBuf>,
}

fn positive(s: &str) -> std::result::Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(v),
        _ => Err(format!("`{s}` is not a positive number")),
    }
}

fn floor(s: &str) -> std::result::Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if (0.0..0.5).contains(&v) => Ok(v),
        _ => Err(format!("`{s}` is not in [0, 0.5)")),
    }
}

fn execution(sequential: bool) -> Execution {
    if sequential {
        Execution::Sequential
    } else {
        Execution::default()
    }
}

/// Malformed input: unreadable files, parse errors, unknown nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct InputError(pub String);

impl fmt::Display for InputError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

impl From<transport_core::Error> for InputError {
    fn from(e: transport_core::Error) -> Self {
        InputError(e.to_string())
    }
}

type Result<T> = std::result::Result<T, InputError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Success = 0,
    Negative = 1,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub stdout: String,
    pub status: Status,
}

pub const INPUT_ERROR: u8 = 2;

impl Report {
    fn new(positive: bool, stdout: String) -> Self {
        Report {
            stdout,
            status: if positive { Status::Success } else { Status::Negative },
        }
    }

    fn json(positive: bool, value: Value) -> Self {
        Report::new(positive, format!("{}\n", serde_json::to_string_pretty(&value).expect("json values serialize")))
    }
}

pub fn run(cfg: &RunConfig) -> Result<Report> {
    match &cfg.command {
        Command::Check(a) => check(a, cfg.format),
        Command::Derive(a) => derive(a, cfg.format),
        Command::Verify(a) => verify(a, cfg.format),
        Command::Explain(a) => explain(a, cfg.format),
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| InputError(format!("{}: {e}", path.display())))
}

fn load(path: &Path) -> Result<DiagramFile> {
    parse_diagram(&read(path)?).map_err(|e| InputError(format!("{}: {e}", path.display())))
}

fn ids(names: &[String]) -> BTreeSet<NodeId> {
    names.iter().map(|n| NodeId::new(n.as_str())).collect()
}

fn query_of(file: &DiagramFile, a: &QueryArgs) -> Result<Query> {
    let base = file.query.clone();
    let pick = |flag: &Option<Vec<String>>, stored: Option<&BTreeSet<NodeId>>| flag.as_deref().map(ids).or(stored.cloned());
    let effect = pick(&a.effect, base.as_ref().map(|q| &q.effect));
    let interventions = pick(&a.interventions, base.as_ref().map(|q| &q.interventions));
    let (Some(effect), Some(interventions)) = (effect, interventions) else {
        return Err(InputError("no query: pass --effect and --do or add a `query` line to the diagram".into()));
    };
    let strata = pick(&a.strata, base.as_ref().map(|q| &q.strata)).unwrap_or_default();
    let q = Query {
        effect,
        interventions,
        strata,
    };
    q.resolve(file.diagram.graph())?;
    Ok(q)
}

fn set(g: &CausalDiagram, names: &[String]) -> Result<NodeSet> {
    Ok(g.set_of(names.iter().map(String::as_str))?)
}

fn braces(g: &CausalDiagram, s: NodeSet) -> String {
    let names: Vec<String> = g.names_of(s).into_iter().map(|n| n.to_string()).collect();
    format!("{{{}}}", names.join(","))
}

/// Verdict on one separation statement, with its certificate or a witness.
fn separation_report(g: &CausalDiagram, label: &str, q: &SeparationQuery, format: Format, extra: Value) -> Result<Report> {
    let holds = d_separated(g, q)?;
    let cert = q.certificate(g);
    let witness = if holds { None } else { witness_path(g, q)?.map(|p| p.to_string()) };
    if format == Format::Json {
        let mut v = json!({
            "schema": SCHEMA,
            "command": "check",
            "check": label,
            "holds": holds,
            "statement": cert.to_string(),
            "certificate": cert,
            "witness": witness,
        });
        if let (Value::Object(m), Value::Object(e)) = (&mut v, extra) {
            m.extend(e);
        }
        return Ok(Report::json(holds, v));
    }
    let mut out = format!("{label}: {holds}\n");
    if holds {
        out.push_str(&format!("certificate: {cert}\n"));
    } else {
        out.push_str(&format!("violated: {cert}\n"));
        if let Some(w) = witness {
            out.push_str(&format!("witness: {w}\n"));
        }
    }
    Ok(Report::new(holds, out))
}

fn check(a: &CheckArgs, format: Format) -> Result<Report> {
    let file = load(&a.query.diagram)?;
    let g = file.diagram.graph();
    if let Some(x) = &a.separate {
        let from = a.from.as_deref().unwrap_or_default();
        let m = Mutilation {
            cut_incoming: set(g, &a.cut_incoming)?,
            cut_outgoing: set(g, &a.cut_outgoing)?,
        };
        let q = SeparationQuery::new(set(g, x)?, set(g, from)?, set(g, &a.given)?).under(m);
        return separation_report(g, "separated", &q, format, json!({}));
    }
    let q = query_of(&file, &a.query)?;
    let (y, x, z) = q.resolve(g)?;
    if let Some(t) = &a.sadmissible {
        let t = set(g, t)?;
        if !t.is_subset(g.observed()) {
            return Err(InputError("selection nodes cannot be adjusted for".into()));
        }
        let extra = json!({ "set": g.names_of(t) });
        return separation_report(g, "S-admissible", &admissibility_query(g, t, x, y), format, extra);
    }
    if a.direct {
        return separation_report(g, "directly transportable", &admissibility_query(g, z, x, y), format, json!({}));
    }
    let cap = a.search.max_set_size.unwrap_or(usize::MAX);
    let found = find_s_admissible(g, x, y, cap, CandidatePool::Any, execution(a.search.sequential))?;
    if format == Format::Json {
        let v = json!({
            "schema": SCHEMA,
            "command": "check",
            "check": "S-admissible set",
            "holds": found.is_some(),
            "set": found.map(|t| g.names_of(t)),
            "certificate": found.map(|t| admissibility_query(g, t, x, y).certificate(g)),
        });
        return Ok(Report::json(found.is_some(), v));
    }
    let out = match found {
        Some(t) => format!(
            "S-admissible set: {}\ncertificate: {}\n",
            braces(g, t),
            admissibility_query(g, t, x, y).certificate(g)
        ),
        None => "S-admissible set: none\n".to_string(),
    };
    Ok(Report::new(found.is_some(), out))
}

fn derivation_json(command: &str, q: &Query, r: &TransportResult, replayed: Option<bool>) -> Value {
    let mut v = json!({ "schema": SCHEMA, "command": command, "query": q, "display": q.to_string() });
    let m = v.as_object_mut().expect("object literal");
    match r {
        TransportResult::Transportable { formula, derivation } => {
            m.insert("status".into(), json!("transportable"));
            m.insert("formula".into(), json!(formula.to_text()));
            m.insert("latex".into(), json!(formula.to_latex()));
            m.insert("expression".into(), json!(formula));
            m.insert("derivation".into(), json!(derivation));
        }
        TransportResult::NotDerivable { reason } => {
            m.insert("status".into(), json!("not_derivable"));
            m.insert("reason".into(), json!(reason));
        }
    }
    if let Some(ok) = replayed {
        m.insert("replayed".into(), json!(ok));
    }
    v
}

fn trace_text(d: &Derivation, format: Format) -> String {
    match format {
        Format::Latex => format!("{}\n\n{}", d.formula.to_latex(), d.explain()),
        _ => d.explain(),
    }
}

fn derive(a: &DeriveArgs, format: Format) -> Result<Report> {
    let file = load(&a.query.diagram)?;
    let g = file.diagram.graph();
    let q = query_of(&file, &a.query)?;
    let r = transport(g, &q, &a.search.options())?;
    let ok = r.is_transportable();
    Ok(match (format, &r) {
        (Format::Json, _) => Report::json(ok, derivation_json("derive", &q, &r, None)),
        (_, TransportResult::Transportable { derivation, .. }) => Report::new(true, trace_text(derivation, format)),
        (_, TransportResult::NotDerivable { reason }) => Report::new(false, format!("query: {q}\nnot derivable: {reason}\n")),
    })
}

/// Resolves lower-case formula names against the diagram.
fn resolver(g: &CausalDiagram) -> impl Fn(&str) -> Option<NodeId> + '_ {
    move |name: &str| g.names().iter().find(|n| n.as_str().eq_ignore_ascii_case(name)).cloned()
}

fn verify(a: &VerifyArgs, format: Format) -> Result<Report> {
    let file = load(&a.query.diagram)?;
    let g = file.diagram.graph();
    let q = query_of(&file, &a.query)?;
    let text = match (&a.formula, &a.formula_file) {
        (Some(t), _) => Some(t.clone()),
        (None, Some(p)) => Some(read(p)?.trim().to_string()),
        (None, None) => None,
    };
    let formula: ProbExpr = match text {
        Some(t) => parse_expr(&t, &resolver(g))?,
        None => match transport(g, &q, &a.search.options())? {
            TransportResult::Transportable { formula, .. } => formula,
            r @ TransportResult::NotDerivable { .. } => {
                return Ok(match (format, &r) {
                    (Format::Json, _) => Report::json(false, derivation_json("verify", &q, &r, None)),
                    (_, TransportResult::NotDerivable { reason }) => {
                        Report::new(false, format!("query: {q}\nnothing to verify: {reason}\n"))
                    }
                    _ => unreachable!(),
                });
            }
        },
    };
    let cfg = VerifyConfig {
        seeds: a.seeds,
        seed_base: a.seed_base,
        tol: a.tol,
        scm: ScmConfig {
            domain_size: a.domain_size as usize,
            positivity_floor: a.positivity_floor,
            ..ScmConfig::default()
        },
        execution: execution(a.search.sequential),
    };
    let rep = verify_formula(&file.diagram, &q, &formula, &cfg)?;
    if format == Format::Json {
        let v = json!({
            "schema": SCHEMA,
            "command": "verify",
            "query": q,
            "formula": formula.to_text(),
            "seeds": a.seeds,
            "seed_base": a.seed_base,
            "tol": a.tol,
            "max_deviation": rep.max_deviation,
            "worst_seed": rep.worst_seed,
            "failing_seeds": rep.failing_seeds(a.tol),
            "passed": rep.passed,
        });
        return Ok(Report::json(rep.passed, v));
    }
    let shown = if format == Format::Latex { formula.to_latex() } else { formula.to_text() };
    let failing = rep.failing_seeds(a.tol);
    let mut out = format!(
        "query: {q}\nformula: {shown}\nseeds: {} from {}\nmax deviation: {:.3e} (seed {})\ntolerance: {:e}\n",
        a.seeds, a.seed_base, rep.max_deviation, rep.worst_seed, a.tol
    );
    if rep.passed {
        out.push_str("result: pass\n");
    } else {
        out.push_str(&format!("result: fail on {} of {} seeds\n", failing.len(), a.seeds));
    }
    Ok(Report::new(rep.passed, out))
}

fn explain(a: &ExplainArgs, format: Format) -> Result<Report> {
    let text = read(&a.trace)?;
    let v: Value = serde_json::from_str(&text).map_err(|e| InputError(format!("{}: {e}", a.trace.display())))?;
    let body = v.get("derivation").cloned().unwrap_or(v);
    let d: Derivation =
        serde_json::from_value(body).map_err(|e| InputError(format!("{}: not a derivation: {e}", a.trace.display())))?;
    let replayed = match &a.diagram {
        Some(p) => {
            let file = load(p)?;
            Some(replay(file.diagram.graph(), &d).map_err(|e| e.to_string()))
        }
        None => None,
    };
    let ok = !matches!(replayed, Some(Err(_)));
    if format == Format::Json {
        let r = TransportResult::Transportable {
            formula: d.formula.clone(),
            derivation: d.clone(),
        };
        let mut v = derivation_json("explain", &d.query, &r, replayed.as_ref().map(|r| r.is_ok()));
        if let Some(Err(e)) = &replayed {
            v["replay_error"] = json!(e);
        }
        return Ok(Report::json(ok, v));
    }
    let mut out = trace_text(&d, format);
    match replayed {
        Some(Ok(())) => out.push_str("replay: ok\n"),
        Some(Err(e)) => out.push_str(&format!("replay: failed: {e}\n")),
        None => {}
    }
    Ok(Report::new(ok, out))
}
