//! Symbolic side of the pipeline: the primitive library, R²-ranked affine
//! snapping, and closed-form expression trees with a printer and parser.

mod expr;
mod library;
mod parse;
mod rank;

use thiserror::Error;

pub use expr::{print_expression, ExpressionTree};
pub use library::{builtin, candidate_library, CandidateFunction, CandidateLibrary, GAUSSIAN, IDENTITY, ZERO};
pub use parse::{parse_expression, parse_expression_with};
pub use rank::{rank_candidates, RankedCandidate, SnapResult, R2_TIE_TOLERANCE};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SymbolicError {
    #[error("invalid argument: {0}")]
    InvalidArg(String),
    #[error("no candidate function is defined on the observed inputs")]
    NoValidCandidate,
    #[error("{func} is undefined at {value} (node {path})")]
    DomainViolation { path: String, func: String, value: f64 },
    #[error("parse error at byte {pos}: {msg}")]
    Parse { pos: usize, msg: String },
    #[error("unknown function `{0}`")]
    UnknownFunction(String),
}
