//! Reference extraction and structural features over parsed queries.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::ast::*;
use super::lexer::token_count;
use super::parser::parse_query;
use super::SqlError;
use crate::state::{ColumnRef, TableId, TableMeta, ViewDef};

/// Features of one SQL statement that coverage and complexity metrics use.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryAnalysis {
    pub referenced_tables: BTreeSet<TableId>,
    pub referenced_columns: BTreeSet<ColumnRef>,
    pub token_count: usize,
    pub join_count: usize,
    pub subquery_depth: usize,
    pub aggregate_count: usize,
    pub has_group_by: bool,
    pub has_having: bool,
    pub set_op_count: usize,
    /// Canonical key of the top-level inner equi-join; empty when the query
    /// has no joins or its FROM clause is not eligible for view rewriting.
    pub join_pattern_key: String,
}

/// Weights of the complexity score. The defaults are a calibration choice,
/// not derived from data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComplexityWeights {
    pub base: f64,
    pub join: f64,
    pub subquery_depth: f64,
    pub aggregate: f64,
    pub group_by: f64,
    pub having: f64,
    pub set_op: f64,
}

impl Default for ComplexityWeights {
    fn default() -> Self {
        Self { base: 1.0, join: 2.0, subquery_depth: 3.0, aggregate: 1.0, group_by: 1.0, having: 1.0, set_op: 2.0 }
    }
}

pub fn complexity_score(a: &QueryAnalysis) -> f64 {
    complexity_score_with(a, &ComplexityWeights::default())
}

pub fn complexity_score_with(a: &QueryAnalysis, w: &ComplexityWeights) -> f64 {
    w.base
        + w.join * a.join_count as f64
        + w.subquery_depth * a.subquery_depth as f64
        + w.aggregate * a.aggregate_count as f64
        + w.group_by * f64::from(u8::from(a.has_group_by))
        + w.having * f64::from(u8::from(a.has_having))
        + w.set_op * a.set_op_count as f64
}

#[derive(Debug, Clone)]
pub(crate) struct CatalogTable {
    pub id: TableId,
    pub columns: Vec<String>,
}

impl CatalogTable {
    fn has_column(&self, name: &str) -> bool {
        self.columns.iter().any(|c| c.eq_ignore_ascii_case(name))
    }
}

#[derive(Debug, Clone)]
pub(crate) struct CatalogView {
    pub columns: Vec<String>,
    pub base_tables: BTreeSet<TableId>,
    /// Base columns each output column is computed from, parallel to
    /// `columns`.
    pub lineage: Vec<BTreeSet<ColumnRef>>,
    /// Base columns read outside the select list (join conditions,
    /// filters, grouping); any query over the view depends on them.
    pub structural: BTreeSet<ColumnRef>,
}

/// Tables and views that identifiers are resolved against. Lookups are
/// case-insensitive.
#[derive(Debug, Clone, Default)]
pub struct Catalog {
    pub(crate) tables: BTreeMap<String, CatalogTable>,
    pub(crate) views: BTreeMap<String, CatalogView>,
}

impl Catalog {
    pub fn from_tables<'a>(tables: impl IntoIterator<Item = &'a TableMeta>) -> Self {
        let tables = tables
            .into_iter()
            .map(|t| {
                let entry = CatalogTable {
                    id: t.table_id.clone(),
                    columns: t.columns.iter().map(|c| c.name.clone()).collect(),
                };
                (t.name.to_ascii_lowercase(), entry)
            })
            .collect();
        Self { tables, views: BTreeMap::new() }
    }

    /// Builds a catalog over `tables` plus `views`, analyzing each view
    /// definition in order so later views may select from earlier ones.
    pub fn new<'a>(
        tables: impl IntoIterator<Item = &'a TableMeta>,
        views: impl IntoIterator<Item = &'a ViewDef>,
    ) -> Result<Self, SqlError> {
        let mut catalog = Self::from_tables(tables);
        for view in views {
            catalog.add_view(&view.name, &view.sql_text)?;
        }
        Ok(catalog)
    }

    pub fn add_view(&mut self, name: &str, sql: &str) -> Result<(), SqlError> {
        let key = name.to_ascii_lowercase();
        if self.tables.contains_key(&key) || self.views.contains_key(&key) {
            return Err(SqlError::DuplicateRelation(name.to_string()));
        }
        let query = parse_query(sql)?;
        let mut acc = Analyzer::new(self);
        let outputs = acc.query(&query, &mut Vec::new(), 0)?;
        let (lineage, structural) = view_lineage(&query, self)
            .filter(|(l, _)| l.len() == outputs.len())
            .unwrap_or_else(|| (vec![BTreeSet::new(); outputs.len()], acc.columns));
        let view = CatalogView {
            columns: outputs,
            base_tables: acc.tables,
            lineage,
            structural,
        };
        self.views.insert(key, view);
        Ok(())
    }

    pub(crate) fn table(&self, name: &str) -> Option<&CatalogTable> {
        self.tables.get(&name.to_ascii_lowercase())
    }

    pub fn is_view(&self, name: &str) -> bool {
        self.views.contains_key(&name.to_ascii_lowercase())
    }

    /// Output column names of a view, in select-list order.
    pub fn view_columns(&self, name: &str) -> Option<&[String]> {
        self.views.get(&name.to_ascii_lowercase()).map(|v| v.columns.as_slice())
    }

    pub fn table_columns(&self, name: &str) -> Option<&[String]> {
        self.table(name).map(|t| t.columns.as_slice())
    }
}

/// Per-output lineage and structural columns of a single-SELECT view
/// definition. `None` for shapes it does not handle (unions, wildcards),
/// in which case every base column counts as structural.
fn view_lineage(query: &Query, catalog: &Catalog) -> Option<(Vec<BTreeSet<ColumnRef>>, BTreeSet<ColumnRef>)> {
    let SetExpr::Select(select) = &query.body else { return None };
    let columns_of = |q: &Query| -> Option<BTreeSet<ColumnRef>> {
        let mut acc = Analyzer::new(catalog);
        acc.query(q, &mut Vec::new(), 0).ok()?;
        Some(acc.columns)
    };
    let with_select = |s: Select| Query { body: SetExpr::Select(Box::new(s)), order_by: Vec::new(), limit: None, offset: None };
    let mut lineage = Vec::new();
    for item in &select.projection {
        if !matches!(item, SelectItem::Expr { .. }) {
            return None;
        }
        let only_item = Select {
            distinct: false,
            projection: vec![item.clone()],
            from: select.from.clone(),
            selection: None,
            group_by: Vec::new(),
            having: None,
        };
        lineage.push(columns_of(&with_select(only_item))?);
    }
    let mut skeleton = (**select).clone();
    skeleton.projection = vec![SelectItem::Expr { expr: Expr::Number("1".into()), alias: None }];
    let structural = columns_of(&with_select(skeleton))?;
    Some((lineage, structural))
}

pub fn analyze(sql: &str, catalog: &Catalog) -> Result<QueryAnalysis, SqlError> {
    if sql.trim().is_empty() {
        return Err(SqlError::Empty);
    }
    let query = parse_query(sql)?;
    analyze_parsed(sql, &query, catalog)
}

pub(crate) fn analyze_parsed(sql: &str, query: &Query, catalog: &Catalog) -> Result<QueryAnalysis, SqlError> {
    let mut acc = Analyzer::new(catalog);
    acc.query(query, &mut Vec::new(), 0)?;
    let join_pattern_key = match &query.body {
        SetExpr::Select(select) => join_pattern(select, catalog).map(|atoms| pattern_key(&atoms)).unwrap_or_default(),
        SetExpr::Union { .. } => String::new(),
    };
    Ok(QueryAnalysis {
        referenced_tables: acc.tables,
        referenced_columns: acc.columns,
        token_count: token_count(sql)?,
        join_count: acc.joins,
        subquery_depth: acc.max_depth,
        aggregate_count: acc.aggregates,
        has_group_by: acc.group_by,
        has_having: acc.having,
        set_op_count: acc.set_ops,
        join_pattern_key,
    })
}

#[derive(Clone, Copy)]
enum RelationKind<'c> {
    Table(&'c CatalogTable),
    View(&'c CatalogView),
}

#[derive(Clone, Copy)]
pub(crate) struct Relation<'c> {
    visible: &'c str,
    kind: RelationKind<'c>,
}

impl Relation<'_> {
    fn has_column(&self, name: &str) -> bool {
        match self.kind {
            RelationKind::Table(t) => t.has_column(name),
            RelationKind::View(v) => v.columns.iter().any(|c| c.eq_ignore_ascii_case(name)),
        }
    }

    fn output_columns(&self) -> Vec<String> {
        match self.kind {
            RelationKind::Table(t) => t.columns.clone(),
            RelationKind::View(v) => v.columns.clone(),
        }
    }
}

struct Analyzer<'c> {
    catalog: &'c Catalog,
    tables: BTreeSet<TableId>,
    columns: BTreeSet<ColumnRef>,
    joins: usize,
    max_depth: usize,
    aggregates: usize,
    group_by: bool,
    having: bool,
    set_ops: usize,
}

type Scopes<'c> = Vec<Vec<Relation<'c>>>;

impl<'c> Analyzer<'c> {
    fn new(catalog: &'c Catalog) -> Self {
        Self {
            catalog,
            tables: BTreeSet::new(),
            columns: BTreeSet::new(),
            joins: 0,
            max_depth: 0,
            aggregates: 0,
            group_by: false,
            having: false,
            set_ops: 0,
        }
    }

    /// Returns the output column names of the query.
    fn query(&mut self, query: &'c Query, scopes: &mut Scopes<'c>, depth: usize) -> Result<Vec<String>, SqlError> {
        self.max_depth = self.max_depth.max(depth);
        let (outputs, leftmost) = self.set_expr(&query.body, scopes, depth)?;
        if !query.order_by.is_empty() {
            scopes.push(leftmost);
            let result = query.order_by.iter().try_for_each(|item| self.expr(&item.expr, scopes, depth, Some(&outputs)));
            scopes.pop();
            result?;
        }
        for e in query.limit.iter().chain(query.offset.iter()) {
            self.expr(e, scopes, depth, None)?;
        }
        Ok(outputs)
    }

    fn set_expr(
        &mut self,
        body: &'c SetExpr,
        scopes: &mut Scopes<'c>,
        depth: usize,
    ) -> Result<(Vec<String>, Vec<Relation<'c>>), SqlError> {
        match body {
            SetExpr::Select(select) => self.select(select, scopes, depth),
            SetExpr::Union { left, right, .. } => {
                self.set_ops += 1;
                let left = self.set_expr(left, scopes, depth)?;
                self.set_expr(right, scopes, depth)?;
                Ok(left)
            }
        }
    }

    fn select(
        &mut self,
        select: &'c Select,
        scopes: &mut Scopes<'c>,
        depth: usize,
    ) -> Result<(Vec<String>, Vec<Relation<'c>>), SqlError> {
        let relations = match &select.from {
            Some(from) => {
                self.joins += from.joins.len();
                let rels = relations_of(from, self.catalog)?;
                for rel in &rels {
                    match rel.kind {
                        RelationKind::Table(t) => {
                            self.tables.insert(t.id.clone());
                        }
                        RelationKind::View(v) => {
                            self.tables.extend(v.base_tables.iter().cloned());
                            self.columns.extend(v.structural.iter().cloned());
                        }
                    }
                }
                rels
            }
            None => Vec::new(),
        };
        scopes.push(relations.clone());
        let result = self.select_body(select, &relations, scopes, depth);
        scopes.pop();
        result.map(|outputs| (outputs, relations))
    }

    fn select_body(
        &mut self,
        select: &'c Select,
        relations: &[Relation<'c>],
        scopes: &mut Scopes<'c>,
        depth: usize,
    ) -> Result<Vec<String>, SqlError> {
        if let Some(from) = &select.from {
            for join in &from.joins {
                self.expr(&join.on, scopes, depth, None)?;
            }
        }
        let mut outputs = Vec::new();
        for item in &select.projection {
            match item {
                SelectItem::Wildcard => {
                    if relations.is_empty() {
                        return Err(SqlError::Unresolved("*".into()));
                    }
                    for rel in relations {
                        self.touch_all(rel);
                        outputs.extend(rel.output_columns());
                    }
                }
                SelectItem::QualifiedWildcard(q) => {
                    let rel = relations
                        .iter()
                        .find(|r| q.matches(r.visible))
                        .ok_or_else(|| SqlError::Unresolved(format!("{}.*", q.value)))?;
                    self.touch_all(rel);
                    outputs.extend(rel.output_columns());
                }
                SelectItem::Expr { expr, alias } => {
                    self.expr(expr, scopes, depth, None)?;
                    outputs.push(match (alias, expr) {
                        (Some(alias), _) => alias.value.clone(),
                        (None, Expr::Column { name, .. }) => name.value.clone(),
                        (None, other) => other.to_string(),
                    });
                }
            }
        }
        if let Some(selection) = &select.selection {
            self.expr(selection, scopes, depth, None)?;
        }
        if !select.group_by.is_empty() {
            self.group_by = true;
            for e in &select.group_by {
                self.expr(e, scopes, depth, Some(&outputs))?;
            }
        }
        if let Some(having) = &select.having {
            self.having = true;
            self.expr(having, scopes, depth, Some(&outputs))?;
        }
        Ok(outputs)
    }

    fn touch_all(&mut self, rel: &Relation<'c>) {
        match rel.kind {
            RelationKind::Table(t) => {
                for c in &t.columns {
                    self.columns.insert(ColumnRef::new(t.id.clone(), c));
                }
            }
            RelationKind::View(v) => self.columns.extend(v.lineage.iter().flatten().cloned()),
        }
    }

    fn expr(
        &mut self,
        expr: &'c Expr,
        scopes: &mut Scopes<'c>,
        depth: usize,
        aliases: Option<&[String]>,
    ) -> Result<(), SqlError> {
        match expr {
            Expr::Column { table, name } => match resolve_column(scopes, table.as_ref(), name) {
                Ok(rel) => {
                    match rel.kind {
                        RelationKind::Table(t) => {
                            self.columns.insert(ColumnRef::new(t.id.clone(), &name.value));
                        }
                        RelationKind::View(v) => {
                            if let Some(i) = v.columns.iter().position(|c| name.matches(c)) {
                                self.columns.extend(v.lineage[i].iter().cloned());
                            }
                        }
                    }
                    Ok(())
                }
                Err(err) => {
                    let is_alias = table.is_none()
                        && aliases.is_some_and(|a| a.iter().any(|out| name.matches(out)));
                    if is_alias {
                        Ok(())
                    } else {
                        Err(err)
                    }
                }
            },
            Expr::Number(_) | Expr::String(_) | Expr::Null => Ok(()),
            Expr::Unary { expr, .. } | Expr::Nested(expr) | Expr::IsNull { expr, .. } => {
                self.expr(expr, scopes, depth, aliases)
            }
            Expr::Binary { left, right, .. } | Expr::Like { expr: left, pattern: right, .. } => {
                self.expr(left, scopes, depth, aliases)?;
                self.expr(right, scopes, depth, aliases)
            }
            Expr::Between { expr, low, high, .. } => {
                self.expr(expr, scopes, depth, aliases)?;
                self.expr(low, scopes, depth, aliases)?;
                self.expr(high, scopes, depth, aliases)
            }
            Expr::InList { expr, list, .. } => {
                self.expr(expr, scopes, depth, aliases)?;
                list.iter().try_for_each(|e| self.expr(e, scopes, depth, aliases))
            }
            Expr::InSubquery { expr, query, .. } => {
                self.expr(expr, scopes, depth, aliases)?;
                self.query(query, scopes, depth + 1).map(drop)
            }
            Expr::Subquery(query) => self.query(query, scopes, depth + 1).map(drop),
            Expr::Function { args, .. } => {
                if expr.is_aggregate_call() {
                    self.aggregates += 1;
                }
                match args {
                    FunctionArgs::Star => Ok(()),
                    FunctionArgs::List(list) => list.iter().try_for_each(|e| self.expr(e, scopes, depth, aliases)),
                }
            }
        }
    }
}

pub(crate) fn relations_of<'c>(from: &'c FromClause, catalog: &'c Catalog) -> Result<Vec<Relation<'c>>, SqlError> {
    let mut rels: Vec<Relation<'c>> = Vec::new();
    for factor in from.relations() {
        let key = factor.name.normalized();
        let kind = if let Some(t) = catalog.tables.get(&key) {
            RelationKind::Table(t)
        } else if let Some(v) = catalog.views.get(&key) {
            RelationKind::View(v)
        } else {
            return Err(SqlError::Unresolved(factor.name.value.clone()));
        };
        let visible = factor.visible_name().value.as_str();
        if rels.iter().any(|r| r.visible.eq_ignore_ascii_case(visible)) {
            return Err(SqlError::DuplicateRelation(visible.to_string()));
        }
        rels.push(Relation { visible, kind });
    }
    Ok(rels)
}

/// Finds the relation a column reference binds to, searching the innermost
/// scope first.
pub(crate) fn resolve_column<'c>(
    scopes: &[Vec<Relation<'c>>],
    qualifier: Option<&Ident>,
    name: &Ident,
) -> Result<Relation<'c>, SqlError> {
    let display = match qualifier {
        Some(q) => format!("{}.{}", q.value, name.value),
        None => name.value.clone(),
    };
    for scope in scopes.iter().rev() {
        match qualifier {
            Some(q) => {
                if let Some(rel) = scope.iter().find(|r| q.matches(r.visible)) {
                    return if rel.has_column(&name.value) { Ok(*rel) } else { Err(SqlError::Unresolved(display)) };
                }
            }
            None => {
                let mut hits = scope.iter().filter(|r| r.has_column(&name.value));
                if let Some(first) = hits.next() {
                    if hits.next().is_some() {
                        return Err(SqlError::Ambiguous(display));
                    }
                    return Ok(*first);
                }
            }
        }
    }
    Err(SqlError::Unresolved(display))
}

/// One equality of an inner equi-join, with endpoints in canonical order.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct JoinAtom {
    pub left_table: String,
    pub left_column: String,
    pub right_table: String,
    pub right_column: String,
}

impl JoinAtom {
    fn new(a: (String, String), b: (String, String)) -> Self {
        let (l, r) = if a <= b { (a, b) } else { (b, a) };
        Self { left_table: l.0, left_column: l.1, right_table: r.0, right_column: r.1 }
    }

    pub fn key(&self) -> String {
        format!(
            "{}⋈{} ON {}.{}={}.{}",
            self.left_table, self.right_table, self.left_table, self.left_column, self.right_table, self.right_column
        )
    }
}

pub fn pattern_key(atoms: &[JoinAtom]) -> String {
    atoms.iter().map(JoinAtom::key).collect::<Vec<_>>().join(" & ")
}

/// Inverse of [`pattern_key`]; `None` for an empty or malformed key.
pub fn parse_pattern_key(key: &str) -> Option<Vec<JoinAtom>> {
    if key.is_empty() {
        return None;
    }
    key.split(" & ")
        .map(|atom| {
            let (_, cond) = atom.split_once(" ON ")?;
            let (l, r) = cond.split_once('=')?;
            let (lt, lc) = l.split_once('.')?;
            let (rt, rc) = r.split_once('.')?;
            Some(JoinAtom::new((lt.into(), lc.into()), (rt.into(), rc.into())))
        })
        .collect()
}

fn simple_name(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_')
}

fn conjuncts<'e>(expr: &'e Expr, out: &mut Vec<&'e Expr>) {
    match expr {
        Expr::Binary { left, op: BinaryOp::And, right } => {
            conjuncts(left, out);
            conjuncts(right, out);
        }
        Expr::Nested(inner) => conjuncts(inner, out),
        other => out.push(other),
    }
}

/// Join atoms of a SELECT's FROM clause when it is a connected inner
/// equi-join over distinct base tables; `None` otherwise.
pub(crate) fn join_pattern(select: &Select, catalog: &Catalog) -> Option<Vec<JoinAtom>> {
    let from = select.from.as_ref()?;
    if from.joins.is_empty() || from.joins.iter().any(|j| j.kind != JoinKind::Inner) {
        return None;
    }
    let rels = relations_of(from, catalog).ok()?;
    let mut table_of: Vec<(&str, String)> = Vec::new();
    for rel in &rels {
        let RelationKind::Table(t) = rel.kind else { return None };
        if !simple_name(&t.id.0) || table_of.iter().any(|(_, id)| *id == t.id.0) {
            return None;
        }
        table_of.push((rel.visible, t.id.0.clone()));
    }
    let scopes = vec![rels.clone()];
    let endpoint = |e: &Expr| -> Option<(String, String)> {
        let Expr::Column { table, name } = e else { return None };
        let rel = resolve_column(&scopes, table.as_ref(), name).ok()?;
        let table = table_of.iter().find(|(v, _)| v.eq_ignore_ascii_case(rel.visible))?.1.clone();
        let column = name.normalized();
        simple_name(&column).then_some((table, column))
    };
    let mut atoms = Vec::new();
    for join in &from.joins {
        let mut parts = Vec::new();
        conjuncts(&join.on, &mut parts);
        for part in parts {
            let Expr::Binary { left, op: BinaryOp::Eq, right } = part else { return None };
            let (a, b) = (endpoint(left)?, endpoint(right)?);
            if a.0 == b.0 {
                return None;
            }
            atoms.push(JoinAtom::new(a, b));
        }
    }
    atoms.sort();
    atoms.dedup();
    // Every table must be reachable through the atoms.
    let mut reached: BTreeSet<&str> = BTreeSet::from([table_of[0].1.as_str()]);
    loop {
        let before = reached.len();
        for atom in &atoms {
            if reached.contains(atom.left_table.as_str()) || reached.contains(atom.right_table.as_str()) {
                reached.insert(&atom.left_table);
                reached.insert(&atom.right_table);
            }
        }
        if reached.len() == before {
            break;
        }
    }
    (reached.len() == table_of.len()).then_some(atoms)
}
