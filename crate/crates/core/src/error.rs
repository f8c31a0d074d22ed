use thiserror::Error;

use crate::dsep::Certificate;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("directed cycle through {}", .0.join(" -> "))]
    Cycle(Vec<String>),

    #[error("edge {from} -> {to} references undeclared node {missing}")]
    DanglingEdge {
        from: String,
        to: String,
        missing: String,
    },

    #[error("bad selection node {node}: {reason}")]
    BadSelectionNode { node: String, reason: String },

    #[error("self-loop on {0}")]
    SelfLoop(String),

    #[error("unknown node {0}")]
    UnknownNode(String),

    #[error("node sets overlap on {0}")]
    OverlappingSets(String),

    #[error("diagram has {0} nodes; at most 64 are supported")]
    TooManyNodes(usize),

    #[error("line {line}, column {column}: {message} (at `{token}`)")]
    Parse {
        line: usize,
        column: usize,
        token: String,
        message: String,
    },

    #[error("rule not applicable: {query} does not hold")]
    RuleNotApplicable { query: Box<Certificate> },

    #[error("bad site: {0}")]
    BadSite(String),

    #[error("invalid query: {0}")]
    InvalidQuery(String),

    #[error("term {0} cannot be evaluated from the available distributions")]
    UnresolvableTerm(String),

    #[error("free variables of the formula ({formula}) do not match the query ({query})")]
    FreeVariableMismatch { formula: String, query: String },

    #[error("conditioning event of {0} has zero probability")]
    DivisionUndefined(String),

    #[error("state space of {states} exceeds the cap of {cap}")]
    DomainOverflow { states: u128, cap: u128 },

    #[error("value {value} is outside the domain of {node} (size {size})")]
    BadValue {
        node: String,
        value: usize,
        size: usize,
    },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid expression: {0}")]
    InvalidExpr(String),

    #[error("replay failed at step {step}: {reason}")]
    /// `step` is 1-based, matching the numbering of `Derivation::explain`.
    Replay { step: usize, reason: String },
}
