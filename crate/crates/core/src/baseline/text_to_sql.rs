//! Template SQL synthesis from a question's text and schema targets.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use super::{execute_version, Artifact, Tool, ToolContext, ToolError, ToolInvocation, ToolResult, Versions};
use crate::registry::tools;
use crate::state::{DataKind, DataProductState, Question, SchemaTarget, TableId, TableMeta};

pub struct TextToSql;

/// How a column participates in generated SQL.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub(crate) enum Role {
    Key,
    Measure,
    Category,
    Time,
}

pub(crate) fn role_of(table: &TableMeta, column: &str) -> Option<Role> {
    let meta = table.column(column)?;
    if table.is_key_column(column) {
        return Some(Role::Key);
    }
    Some(match meta.data_kind {
        DataKind::Numeric => Role::Measure,
        DataKind::Temporal => Role::Time,
        DataKind::Text | DataKind::Boolean | DataKind::Other => Role::Category,
    })
}

/// One join step: `table` joins the tree via `table.column = other.other_column`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct JoinEdge {
    pub table: TableId,
    pub column: String,
    pub other: TableId,
    pub other_column: String,
}

/// Foreign-key adjacency, both directions, in deterministic order.
fn fk_graph(state: &DataProductState) -> BTreeMap<TableId, Vec<(TableId, String, String)>> {
    let mut graph: BTreeMap<TableId, Vec<(TableId, String, String)>> = BTreeMap::new();
    for t in state.tables() {
        for fk in &t.foreign_keys {
            if fk.references_table == t.table_id {
                continue;
            }
            let local = fk.column.to_ascii_lowercase();
            let remote = fk.references_column.to_ascii_lowercase();
            graph.entry(t.table_id.clone()).or_default().push((fk.references_table.clone(), local.clone(), remote.clone()));
            graph.entry(fk.references_table.clone()).or_default().push((t.table_id.clone(), remote, local));
        }
    }
    for edges in graph.values_mut() {
        edges.sort();
        edges.dedup();
    }
    graph
}

/// Shortest foreign-key paths from `base` to every table in `targets`,
/// merged into one join tree in breadth-first order.
pub(crate) fn join_tree(state: &DataProductState, base: &TableId, targets: &BTreeSet<TableId>) -> Option<Vec<JoinEdge>> {
    let graph = fk_graph(state);
    let mut parent: BTreeMap<TableId, (TableId, String, String)> = BTreeMap::new();
    let mut seen = BTreeSet::from([base.clone()]);
    let mut queue = VecDeque::from([base.clone()]);
    while let Some(t) = queue.pop_front() {
        for (next, local, remote) in graph.get(&t).into_iter().flatten() {
            if seen.insert(next.clone()) {
                parent.insert(next.clone(), (t.clone(), local.clone(), remote.clone()));
                queue.push_back(next.clone());
            }
        }
    }
    let mut needed: BTreeSet<TableId> = BTreeSet::new();
    for target in targets {
        let mut cur = target.clone();
        while &cur != base {
            let (prev, _, _) = parent.get(&cur)?;
            needed.insert(cur.clone());
            cur = prev.clone();
        }
    }
    // Emit in BFS discovery order so every edge attaches to a joined table.
    let mut order: Vec<TableId> = Vec::new();
    let mut frontier = vec![base.clone()];
    while !frontier.is_empty() {
        let mut next_frontier = Vec::new();
        for t in &frontier {
            for (child, (p, _, _)) in &parent {
                if p == t && needed.contains(child) {
                    order.push(child.clone());
                    next_frontier.push(child.clone());
                }
            }
        }
        frontier = next_frontier;
    }
    Some(
        order
            .into_iter()
            .map(|child| {
                let (p, p_col, c_col) = parent[&child].clone();
                JoinEdge { table: child, column: c_col, other: p, other_column: p_col }
            })
            .collect(),
    )
}

/// Tables and column names mentioned in free text, for questions that
/// carry no schema targets.
fn targets_from_text(state: &DataProductState, text: &str) -> BTreeSet<SchemaTarget> {
    let words: BTreeSet<String> = text
        .split(|c: char| !(c.is_alphanumeric() || c == '_'))
        .filter(|w| !w.is_empty())
        .map(|w| w.to_ascii_lowercase())
        .collect();
    let mut out = BTreeSet::new();
    for t in state.tables() {
        if words.contains(&t.name.to_ascii_lowercase()) {
            out.insert(SchemaTarget::table(t.table_id.clone()));
            for c in &t.columns {
                if words.contains(&c.name.to_ascii_lowercase()) && !t.is_key_column(&c.name) {
                    out.insert(SchemaTarget::column(t.table_id.clone(), &c.name));
                }
            }
        }
    }
    out
}

/// Builds SQL for `question` from its text keywords and schema targets.
/// Returns `None` when the targets cannot be joined or are empty.
pub fn synthesize_sql(state: &DataProductState, question: &Question) -> Option<String> {
    let targets = if question.schema_targets.is_empty() {
        targets_from_text(state, &question.text)
    } else {
        question.schema_targets.clone()
    };
    if targets.is_empty() {
        return None;
    }
    let text = question.text.to_ascii_lowercase();

    let mut columns: Vec<(TableId, String, Role)> = Vec::new();
    let mut plain_tables: Vec<TableId> = Vec::new();
    for target in &targets {
        let table = state.table(&target.table)?;
        match &target.column {
            Some(col) => {
                let name = table.column(col)?.name.to_ascii_lowercase();
                columns.push((table.table_id.clone(), name, role_of(table, col)?));
            }
            None => plain_tables.push(table.table_id.clone()),
        }
    }
    let measure = columns.iter().find(|c| c.2 == Role::Measure).cloned();
    let times: Vec<_> = columns.iter().filter(|c| c.2 == Role::Time).cloned().collect();
    let categories: Vec<_> = columns.iter().filter(|c| matches!(c.2, Role::Category | Role::Key)).cloned().collect();

    let base = plain_tables
        .first()
        .cloned()
        .or_else(|| measure.as_ref().map(|m| m.0.clone()))
        .or_else(|| columns.first().map(|c| c.0.clone()))?;
    let all_tables: BTreeSet<TableId> =
        plain_tables.iter().cloned().chain(columns.iter().map(|c| c.0.clone())).collect();
    let edges = join_tree(state, &base, &all_tables)?;
    let qualify = !edges.is_empty();
    let name_of = |t: &TableId| state.table(t).map(|m| m.name.clone()).unwrap_or_else(|| t.0.clone());
    let col = |c: &(TableId, String, Role)| {
        if qualify {
            format!("{}.{}", name_of(&c.0), c.1)
        } else {
            c.1.clone()
        }
    };
    let mut from = name_of(&base);
    for e in &edges {
        from.push_str(&format!(
            " JOIN {t} ON {o}.{oc} = {t}.{c}",
            t = name_of(&e.table),
            o = name_of(&e.other),
            oc = e.other_column,
            c = e.column
        ));
    }

    let has = |k: &str| text.contains(k);
    let agg = |m: &Option<(TableId, String, Role)>| -> String {
        match m {
            Some(m) if has("total") => format!("SUM({})", col(m)),
            Some(m) if has("average") || has("mean") => format!("AVG({})", col(m)),
            Some(m) if has("highest") || has("maximum") => format!("MAX({})", col(m)),
            Some(m) if has("lowest") || has("minimum") => format!("MIN({})", col(m)),
            _ => "COUNT(*)".to_string(),
        }
    };

    if has("above average") {
        if let Some(m) = &measure {
            let mut shown: Vec<String> = categories.iter().chain(times.iter()).map(col).collect();
            shown.push(col(m));
            let inner_col = &m.1;
            return Some(format!(
                "SELECT {} FROM {from} WHERE {} > (SELECT AVG({inner_col}) FROM {})",
                shown.join(", "),
                col(m),
                name_of(&m.0)
            ));
        }
    }
    if (has("trend") || has("over time")) && !times.is_empty() {
        let t = col(&times[0]);
        return Some(format!("SELECT {t}, {} FROM {from} GROUP BY {t} ORDER BY {t}", agg(&measure)));
    }
    if (has("highest") || has("lowest")) && measure.is_some() {
        if let Some(g) = categories.first().or(times.first()) {
            let g = col(g);
            let a = agg(&measure);
            let dir = if has("highest") { " DESC" } else { "" };
            return Some(format!("SELECT {g}, {a} FROM {from} GROUP BY {g} ORDER BY {a}{dir} LIMIT 1"));
        }
    }
    let aggregate = has("total") || has("average") || has("mean") || has("how many") || has("number of");
    if aggregate {
        let groups: Vec<String> = categories.iter().chain(times.iter()).map(col).collect();
        if groups.is_empty() {
            return Some(format!("SELECT {} FROM {from}", agg(&measure)));
        }
        let g = groups.join(", ");
        return Some(format!("SELECT {g}, {} FROM {from} GROUP BY {g}", agg(&measure)));
    }
    let shown: Vec<String> = columns.iter().map(col).collect();
    if shown.is_empty() {
        return Some(format!("SELECT COUNT(*) FROM {from}"));
    }
    let distinct = if has("distinct") { "DISTINCT " } else { "" };
    Some(format!("SELECT {distinct}{} FROM {from}", shown.join(", ")))
}

impl Tool for TextToSql {
    fn name(&self) -> &str {
        tools::TEXT_TO_SQL
    }

    fn run(&self, ctx: &ToolContext<'_>, inv: &ToolInvocation) -> Result<ToolResult, ToolError> {
        let m = inv.count("max_questions", 1)?;
        let pending: Vec<&Question> = ctx.snapshot.questions_without_sql().take(m).collect();
        if pending.is_empty() {
            return Err(ToolError::NoEligibleQuestion);
        }
        let catalog = ctx.snapshot.catalog()?;
        let mut versions = Versions::default();
        let mut artifacts: Vec<Artifact> = Vec::new();
        let mut skipped = Vec::new();
        let mut timed_out = 0;
        for q in &pending {
            let Some(sql) = synthesize_sql(ctx.snapshot, q) else {
                skipped.push(format!("{}: no usable schema targets", q.question_id));
                continue;
            };
            match execute_version(ctx, &catalog, &mut versions, &q.question_id, &sql, tools::TEXT_TO_SQL)? {
                Ok(mut produced) => {
                    if let Some(Artifact::QueryVersion(v)) = produced.first() {
                        timed_out += usize::from(v.timed_out);
                    }
                    artifacts.append(&mut produced);
                }
                Err(msg) => skipped.push(msg),
            }
        }
        let written = artifacts.iter().filter(|a| matches!(a, Artifact::QueryVersion(_))).count();
        let mut log = format!("wrote SQL for {written} of {} questions", pending.len());
        if timed_out > 0 {
            log.push_str(&format!("; {timed_out} timed out"));
        }
        if !skipped.is_empty() {
            log.push_str(&format!("; skipped {}", skipped.join("; ")));
        }
        Ok(ToolResult::new(artifacts, log))
    }
}
