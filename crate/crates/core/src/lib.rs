//! Transportability of causal effects across populations.
//!
//! Given a selection diagram, decides whether an experimental effect measured
//! in a source population carries over to a target population, synthesizes
//! the transport formula, and checks it numerically against exact discrete
//! structural models.

pub mod docalc;
pub mod dsep;
pub mod error;
pub mod eval;
pub mod exec;
pub mod expr;
pub mod graph;
pub mod parse;
pub mod scm;
pub mod transport;
pub mod verify;

pub use dsep::{d_separated, witness_path, ActivePath, Certificate, SeparationQuery};
pub use error::{Error, Result};
pub use expr::{canonicalize, parse_expr, Population, ProbExpr, ProbTerm};
pub use graph::{CausalDiagram, DiagramSpec, Mutilation, NodeId, NodeKind, NodeSet, SelectionDiagram};
