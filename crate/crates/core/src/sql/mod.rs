//! SQL analysis: parsing a SELECT subset, resolving table and column
//! references against the schema, structural features for complexity, and
//! view-based rewriting.
//!
//! Supported: SELECT [DISTINCT] with projections, FROM with INNER/LEFT
//! JOIN ... ON, WHERE, GROUP BY, HAVING, ORDER BY, LIMIT/OFFSET, scalar and
//! IN subqueries, UNION [ALL]. Everything else is a parse error.

mod analyze;
pub mod ast;
mod lexer;
mod parser;
mod rewrite;

use thiserror::Error;

pub use analyze::{
    analyze, complexity_score, complexity_score_with, parse_pattern_key, pattern_key, Catalog, ComplexityWeights,
    JoinAtom, QueryAnalysis,
};
pub use lexer::token_count;
pub use parser::parse_query;
pub use rewrite::{build_view_sql, rewrite_with_view, view_column_name};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SqlError {
    #[error("empty SQL text")]
    Empty,
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("unresolved identifier `{0}`")]
    Unresolved(String),
    #[error("ambiguous column `{0}`")]
    Ambiguous(String),
    #[error("relation `{0}` is defined twice")]
    DuplicateRelation(String),
    #[error("join pattern mismatch: view covers `{expected}`, query has `{found}`")]
    PatternMismatch { expected: String, found: String },
}

impl SqlError {
    pub(crate) fn parse(offset: usize, message: impl Into<String>) -> Self {
        SqlError::Parse { offset, message: message.into() }
    }
}
