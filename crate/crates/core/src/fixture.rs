//! Shipped fixtures: the retail database creation script and a set of
//! predefined questions whose SQL shares join patterns.

use std::path::Path;

use rusqlite::Connection;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const RETAIL_SCRIPT: &str = include_str!("../fixtures/retail.sql");
pub const RETAIL_QUESTIONS: &str = include_str!("../fixtures/retail_questions.json");

/// Tables of the retail fixture, by name.
pub const RETAIL_TABLES: [&str; 6] = ["customers", "order_items", "orders", "payments", "products", "stores"];

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("`{0}` already exists")]
    AlreadyExists(String),
    #[error("fixture script failed: {0}")]
    Script(String),
    #[error("invalid questions file: {0}")]
    Questions(String),
}

/// Builds a database file at `path` by running a creation script.
pub fn load_script(script: &str, path: &Path) -> Result<(), FixtureError> {
    if path.exists() {
        return Err(FixtureError::AlreadyExists(path.display().to_string()));
    }
    let conn = Connection::open(path).map_err(|e| FixtureError::Script(e.to_string()))?;
    conn.execute_batch(script).map_err(|e| FixtureError::Script(e.to_string()))
}

pub fn build_retail(path: &Path) -> Result<(), FixtureError> {
    load_script(RETAIL_SCRIPT, path)
}

/// A question supplied alongside a data source, optionally with SQL.
/// Targets are `table` or `table.column`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredefinedQuestion {
    pub text: String,
    #[serde(default)]
    pub sql: Option<String>,
    #[serde(default)]
    pub targets: Vec<String>,
}

pub fn parse_questions(json: &str) -> Result<Vec<PredefinedQuestion>, FixtureError> {
    let questions: Vec<PredefinedQuestion> =
        serde_json::from_str(json).map_err(|e| FixtureError::Questions(e.to_string()))?;
    if let Some(q) = questions.iter().find(|q| q.text.trim().is_empty()) {
        return Err(FixtureError::Questions(format!("empty question text (sql: {:?})", q.sql)));
    }
    Ok(questions)
}

pub fn retail_questions() -> Vec<PredefinedQuestion> {
    parse_questions(RETAIL_QUESTIONS).expect("shipped questions parse")
}
