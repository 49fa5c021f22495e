//! Template question generation over schema metadata.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::text_to_sql::{join_tree, role_of, Role};
use super::{Artifact, Tool, ToolContext, ToolError, ToolInvocation, ToolResult};
use crate::registry::tools;
use crate::state::{ColumnRef, DataProductState, Question, QuestionOrigin, SchemaTarget, TableId, TableMeta};

pub struct QuestionGeneration;

#[derive(Debug, Clone)]
struct Candidate {
    text: String,
    targets: BTreeSet<SchemaTarget>,
    tables: BTreeSet<TableId>,
}

impl Candidate {
    fn new(text: String, targets: impl IntoIterator<Item = SchemaTarget>) -> Self {
        let targets: BTreeSet<SchemaTarget> = targets.into_iter().collect();
        let tables = targets.iter().map(|t| t.table.clone()).collect();
        Self { text, targets, tables }
    }

    fn columns(&self) -> impl Iterator<Item = ColumnRef> + '_ {
        self.targets.iter().filter_map(|t| t.column.as_ref().map(|c| ColumnRef::new(t.table.clone(), c)))
    }
}

fn by_role(table: &TableMeta, role: Role) -> Vec<&str> {
    table.columns.iter().filter(|c| role_of(table, &c.name) == Some(role)).map(|c| c.name.as_str()).collect()
}

fn single_table(t: &TableMeta, out: &mut Vec<Candidate>) {
    let id = &t.table_id;
    let col = |c: &str| SchemaTarget::column(id.clone(), c);
    let name = &t.name;
    let measures = by_role(t, Role::Measure);
    let categories = by_role(t, Role::Category);
    let times = by_role(t, Role::Time);

    for n in &measures {
        for c in &categories {
            out.push(Candidate::new(format!("What is the total {n} by {c} in {name}?"), [col(n), col(c)]));
            out.push(Candidate::new(format!("What is the average {n} for each {c} in {name}?"), [col(n), col(c)]));
            out.push(Candidate::new(format!("Which {c} has the highest {n} in {name}?"), [col(n), col(c)]));
            out.push(Candidate::new(format!("Which {c} has the lowest {n} in {name}?"), [col(n), col(c)]));
            out.push(Candidate::new(
                format!("Which {name} rows have {n} above average, and what is their {c}?"),
                [col(n), col(c)],
            ));
        }
        for d in &times {
            out.push(Candidate::new(format!("How does the total {n} in {name} trend over time by {d}?"), [col(n), col(d)]));
        }
        out.push(Candidate::new(format!("What is the total {n} across all {name}?"), [col(n)]));
    }
    for c in &categories {
        out.push(Candidate::new(format!("How many {name} rows are there for each {c}?"), [col(c)]));
    }
    for d in &times {
        out.push(Candidate::new(format!("How many {name} rows were recorded over time by {d}?"), [col(d)]));
    }
    let descriptive: Vec<&str> = categories.iter().chain(times.iter()).copied().collect();
    for (i, a) in descriptive.iter().enumerate() {
        for b in &descriptive[i + 1..] {
            out.push(Candidate::new(format!("List the distinct {a} and {b} combinations in {name}."), [col(a), col(b)]));
        }
    }
    out.push(Candidate::new(format!("How many {name} rows are there?"), [SchemaTarget::table(id.clone())]));
}

fn cross_table(state: &DataProductState, t: &TableMeta, out: &mut Vec<Candidate>) {
    for other in state.tables() {
        if other.table_id == t.table_id {
            continue;
        }
        let Some(path) = join_tree(state, &t.table_id, &BTreeSet::from([other.table_id.clone()])) else { continue };
        if path.is_empty() || path.len() > 2 {
            continue;
        }
        let (name, other_name) = (&t.name, &other.name);
        for c in by_role(other, Role::Category) {
            let group = SchemaTarget::column(other.table_id.clone(), c);
            for n in by_role(t, Role::Measure) {
                out.push(Candidate::new(
                    format!("What is the total {n} of {name} by {c} of {other_name}?"),
                    [SchemaTarget::column(t.table_id.clone(), n), group.clone()],
                ));
            }
            out.push(Candidate::new(
                format!("How many {name} rows are there for each {c} of {other_name}?"),
                [SchemaTarget::table(t.table_id.clone()), group.clone()],
            ));
        }
    }
}

fn candidates(state: &DataProductState) -> Vec<Candidate> {
    let mut out = Vec::new();
    for t in state.tables() {
        single_table(t, &mut out);
        cross_table(state, t, &mut out);
    }
    out
}

/// Tables in the order questions are spread over when no priority list is
/// given: largest first, then by name.
pub(crate) fn tables_by_size(state: &DataProductState) -> Vec<TableId> {
    let mut tables: Vec<&TableMeta> = state.tables().collect();
    tables.sort_by(|a, b| b.row_count_estimate.cmp(&a.row_count_estimate).then_with(|| a.table_id.cmp(&b.table_id)));
    tables.into_iter().map(|t| t.table_id.clone()).collect()
}

impl Tool for QuestionGeneration {
    fn name(&self) -> &str {
        tools::QUESTION_GENERATION
    }

    fn run(&self, ctx: &ToolContext<'_>, inv: &ToolInvocation) -> Result<ToolResult, ToolError> {
        let n = inv.count("count", 1)?;
        let state = ctx.snapshot;
        if state.table_count() == 0 {
            return Err(ToolError::EmptySchema);
        }
        let mut priority: Vec<TableId> = inv
            .parameters
            .get("priority_tables")
            .and_then(|p| p.as_tables())
            .map(|t| t.iter().filter(|id| state.table(id).is_some()).cloned().collect())
            .unwrap_or_default();
        if priority.is_empty() {
            priority = tables_by_size(state);
        }

        // Columns already referenced by SQL or promised by a pending question.
        let mut known: BTreeSet<ColumnRef> =
            state.latest_queries().flat_map(|q| q.analysis.referenced_columns.iter().cloned()).collect();
        let mut known_tables: BTreeSet<TableId> = state.covered_tables().into_iter().cloned().collect();
        for q in state.questions() {
            for t in &q.schema_targets {
                known_tables.insert(t.table.clone());
                if let Some(c) = &t.column {
                    known.insert(ColumnRef::new(t.table.clone(), c));
                }
            }
        }
        let mut texts: BTreeSet<String> = state.questions().map(|q| q.text.clone()).collect();
        let mut pool = candidates(state);
        pool.retain(|c| !texts.contains(&c.text));

        let mut rng = ChaCha8Rng::seed_from_u64(inv.seed);
        let mut artifacts = Vec::new();
        for i in 0..n {
            if pool.is_empty() {
                break;
            }
            let table = &priority[i % priority.len()];
            let score = |c: &Candidate| {
                2 * c.columns().filter(|col| !known.contains(col)).count()
                    + c.tables.iter().filter(|t| !known_tables.contains(*t)).count()
            };
            let mut eligible: Vec<usize> = (0..pool.len()).filter(|&j| pool[j].tables.contains(table)).collect();
            if eligible.is_empty() {
                eligible = (0..pool.len()).collect();
            }
            let best = eligible.iter().map(|&j| score(&pool[j])).max().expect("non-empty");
            let ties: Vec<usize> = eligible.into_iter().filter(|&j| score(&pool[j]) == best).collect();
            let pick = pool.swap_remove(ties[rng.gen_range(0..ties.len())]);
            known.extend(pick.columns());
            known_tables.extend(pick.tables.iter().cloned());
            texts.insert(pick.text.clone());
            artifacts.push(Artifact::Question(Question {
                question_id: state.next_question_id(artifacts.len()),
                text: pick.text,
                origin: QuestionOrigin::Generated,
                parent_question: None,
                schema_targets: pick.targets,
            }));
        }
        let log = if artifacts.len() == n {
            format!("generated {n} questions over {} priority tables", priority.len())
        } else {
            format!("generated {} of {n} requested questions; the templates are exhausted", artifacts.len())
        };
        Ok(ToolResult::new(artifacts, log))
    }
}
