//! Materialized join views: building their definitions and rewriting
//! queries onto them.

use super::analyze::{join_pattern, parse_pattern_key, pattern_key, Catalog};
use super::ast::*;
use super::parser::parse_query;
use super::SqlError;
use crate::state::ViewDef;

/// Column name a join view exposes for `table.column`.
pub fn view_column_name(table: &str, column: &str) -> String {
    format!("{}__{}", table.to_ascii_lowercase(), column.to_ascii_lowercase())
}

/// SQL for a view that materializes the join described by `pattern_key`,
/// exposing every column of every joined table under [`view_column_name`].
pub fn build_view_sql(pattern: &str, catalog: &Catalog) -> Result<String, SqlError> {
    let atoms = parse_pattern_key(pattern).ok_or_else(|| SqlError::PatternMismatch {
        expected: pattern.to_string(),
        found: String::new(),
    })?;
    let mut tables: Vec<&str> = atoms.iter().flat_map(|a| [a.left_table.as_str(), a.right_table.as_str()]).collect();
    tables.sort_unstable();
    tables.dedup();

    let mut projection = Vec::new();
    for t in &tables {
        let cols = catalog.table_columns(t).ok_or_else(|| SqlError::Unresolved((*t).to_string()))?;
        for c in cols {
            projection.push(SelectItem::Expr {
                expr: Expr::column(Some(t), &c.to_ascii_lowercase()),
                alias: Some(Ident::new(view_column_name(t, c))),
            });
        }
    }

    // Grow the join chain in table order, attaching each atom to the first
    // join where both of its endpoints are available.
    let mut included = vec![tables[0]];
    let mut used = vec![false; atoms.len()];
    let mut joins = Vec::new();
    while included.len() < tables.len() {
        let next = tables
            .iter()
            .copied()
            .filter(|t| !included.contains(t))
            .find(|t| {
                atoms.iter().any(|a| {
                    (a.left_table == *t && included.contains(&a.right_table.as_str()))
                        || (a.right_table == *t && included.contains(&a.left_table.as_str()))
                })
            })
            .ok_or_else(|| SqlError::PatternMismatch { expected: pattern.to_string(), found: "disconnected".into() })?;
        included.push(next);
        let mut on: Option<Expr> = None;
        for (i, a) in atoms.iter().enumerate() {
            if !used[i] && included.contains(&a.left_table.as_str()) && included.contains(&a.right_table.as_str()) {
                used[i] = true;
                let eq = Expr::binary(
                    Expr::column(Some(&a.left_table), &a.left_column),
                    BinaryOp::Eq,
                    Expr::column(Some(&a.right_table), &a.right_column),
                );
                on = Some(match on {
                    Some(prev) => Expr::binary(prev, BinaryOp::And, eq),
                    None => eq,
                });
            }
        }
        joins.push(Join {
            kind: JoinKind::Inner,
            table: TableFactor { name: Ident::new(next), alias: None },
            on: on.expect("connecting atom exists"),
        });
    }

    let select = Select {
        projection,
        from: Some(FromClause { base: TableFactor { name: Ident::new(tables[0]), alias: None }, joins }),
        ..Select::default()
    };
    Ok(Query { body: SetExpr::Select(Box::new(select)), order_by: vec![], limit: None, offset: None }.to_string())
}

struct TopRelation {
    visible: String,
    table: String,
    columns: Vec<String>,
}

struct ScopeRelation {
    visible: String,
    columns: Vec<String>,
}

struct Rewriter<'a> {
    catalog: &'a Catalog,
    top: Vec<TopRelation>,
    inner: Vec<Vec<ScopeRelation>>,
}

/// Rewrites `sql` to read from `view` instead of the join the view
/// materializes. The query's top-level join pattern must equal the view's.
pub fn rewrite_with_view(sql: &str, view: &ViewDef, catalog: &Catalog) -> Result<String, SqlError> {
    let mut query = parse_query(sql)?;
    let SetExpr::Select(select) = &mut query.body else {
        return Err(SqlError::PatternMismatch { expected: view.covers_pattern.clone(), found: String::new() });
    };
    let found = join_pattern(select, catalog).map(|a| pattern_key(&a)).unwrap_or_default();
    if found.is_empty() || found != view.covers_pattern {
        return Err(SqlError::PatternMismatch { expected: view.covers_pattern.clone(), found });
    }
    let from = select.from.take().expect("join pattern implies FROM");
    let top = from
        .relations()
        .map(|f| {
            let t = catalog.table(&f.name.value).expect("pattern tables resolve");
            TopRelation {
                visible: f.visible_name().normalized(),
                table: t.id.0.clone(),
                columns: t.columns.clone(),
            }
        })
        .collect();
    let mut rw = Rewriter { catalog, top, inner: Vec::new() };

    let mut projection = Vec::new();
    for item in std::mem::take(&mut select.projection) {
        match item {
            SelectItem::Wildcard => {
                for rel in &rw.top {
                    projection.extend(rw.expand(rel));
                }
            }
            SelectItem::QualifiedWildcard(q) => {
                let rel = rw
                    .top
                    .iter()
                    .find(|r| q.matches(&r.visible))
                    .ok_or_else(|| SqlError::Unresolved(format!("{}.*", q.value)))?;
                projection.extend(rw.expand(rel));
            }
            SelectItem::Expr { mut expr, alias } => {
                rw.expr(&mut expr)?;
                projection.push(SelectItem::Expr { expr, alias });
            }
        }
    }
    select.projection = projection;
    select.from = Some(FromClause { base: TableFactor { name: Ident::new(&view.name), alias: None }, joins: vec![] });
    if let Some(e) = &mut select.selection {
        rw.expr(e)?;
    }
    for e in &mut select.group_by {
        rw.expr(e)?;
    }
    if let Some(e) = &mut select.having {
        rw.expr(e)?;
    }
    for item in &mut query.order_by {
        rw.expr(&mut item.expr)?;
    }
    for e in query.limit.iter_mut().chain(query.offset.iter_mut()) {
        rw.expr(e)?;
    }
    Ok(query.to_string())
}

impl Rewriter<'_> {
    fn expand(&self, rel: &TopRelation) -> Vec<SelectItem> {
        rel.columns
            .iter()
            .map(|c| SelectItem::Expr { expr: Expr::column(None, &view_column_name(&rel.table, c)), alias: None })
            .collect()
    }

    fn inner_binds(&self, qualifier: Option<&Ident>, name: &Ident) -> bool {
        self.inner.iter().rev().any(|scope| match qualifier {
            Some(q) => scope.iter().any(|r| q.matches(&r.visible)),
            None => scope.iter().any(|r| r.columns.iter().any(|c| name.matches(c))),
        })
    }

    fn expr(&mut self, expr: &mut Expr) -> Result<(), SqlError> {
        match expr {
            Expr::Column { table, name } => {
                if self.inner_binds(table.as_ref(), name) {
                    return Ok(());
                }
                let hits: Vec<&TopRelation> = match table {
                    Some(q) => {
                        let rel = self
                            .top
                            .iter()
                            .find(|r| q.matches(&r.visible))
                            .ok_or_else(|| SqlError::Unresolved(format!("{}.{}", q.value, name.value)))?;
                        vec![rel]
                    }
                    None => self.top.iter().filter(|r| r.columns.iter().any(|c| name.matches(c))).collect(),
                };
                match hits.as_slice() {
                    // An output alias (ORDER BY total); nothing to map.
                    [] => Ok(()),
                    [rel] => {
                        if !rel.columns.iter().any(|c| name.matches(c)) {
                            return Err(SqlError::Unresolved(name.value.clone()));
                        }
                        *expr = Expr::column(None, &view_column_name(&rel.table, &name.value));
                        Ok(())
                    }
                    _ => Err(SqlError::Ambiguous(name.value.clone())),
                }
            }
            Expr::Number(_) | Expr::String(_) | Expr::Null => Ok(()),
            Expr::Unary { expr, .. } | Expr::Nested(expr) | Expr::IsNull { expr, .. } => self.expr(expr),
            Expr::Binary { left, right, .. } | Expr::Like { expr: left, pattern: right, .. } => {
                self.expr(left)?;
                self.expr(right)
            }
            Expr::Between { expr, low, high, .. } => {
                self.expr(expr)?;
                self.expr(low)?;
                self.expr(high)
            }
            Expr::InList { expr, list, .. } => {
                self.expr(expr)?;
                list.iter_mut().try_for_each(|e| self.expr(e))
            }
            Expr::InSubquery { expr, query, .. } => {
                self.expr(expr)?;
                self.query(query)
            }
            Expr::Subquery(query) => self.query(query),
            Expr::Function { args, .. } => match args {
                FunctionArgs::Star => Ok(()),
                FunctionArgs::List(list) => list.iter_mut().try_for_each(|e| self.expr(e)),
            },
        }
    }

    fn query(&mut self, query: &mut Query) -> Result<(), SqlError> {
        let scope = self.set_expr(&mut query.body)?;
        self.inner.push(scope);
        let result = (|| {
            for item in &mut query.order_by {
                self.expr(&mut item.expr)?;
            }
            Ok(())
        })();
        self.inner.pop();
        result?;
        for e in query.limit.iter_mut().chain(query.offset.iter_mut()) {
            self.expr(e)?;
        }
        Ok(())
    }

    /// Rewrites outer references inside a nested set expression and returns
    /// the leftmost select's relations.
    fn set_expr(&mut self, body: &mut SetExpr) -> Result<Vec<ScopeRelation>, SqlError> {
        match body {
            SetExpr::Union { left, right, .. } => {
                let scope = self.set_expr(left)?;
                self.set_expr(right)?;
                Ok(scope)
            }
            SetExpr::Select(select) => {
                let scope = match &select.from {
                    Some(from) => from
                        .relations()
                        .map(|f| {
                            let columns = self
                                .catalog
                                .table_columns(&f.name.value)
                                .or_else(|| self.catalog.view_columns(&f.name.value))
                                .ok_or_else(|| SqlError::Unresolved(f.name.value.clone()))?
                                .to_vec();
                            Ok(ScopeRelation { visible: f.visible_name().normalized(), columns })
                        })
                        .collect::<Result<Vec<_>, SqlError>>()?,
                    None => Vec::new(),
                };
                self.inner.push(scope);
                let result = self.select_body(select);
                let scope = self.inner.pop().expect("pushed above");
                result.map(|()| scope)
            }
        }
    }

    fn select_body(&mut self, select: &mut Select) -> Result<(), SqlError> {
        if let Some(from) = &mut select.from {
            for join in &mut from.joins {
                self.expr(&mut join.on)?;
            }
        }
        for item in &mut select.projection {
            if let SelectItem::Expr { expr, .. } = item {
                self.expr(expr)?;
            }
        }
        if let Some(e) = &mut select.selection {
            self.expr(e)?;
        }
        for e in &mut select.group_by {
            self.expr(e)?;
        }
        if let Some(e) = &mut select.having {
            self.expr(e)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sql::analyze;
    use crate::state::{ColumnMeta, DataKind, TableId, TableMeta};

    fn table(name: &str, cols: &[&str]) -> TableMeta {
        TableMeta {
            table_id: TableId::from_name(name),
            name: name.into(),
            columns: cols.iter().map(|c| ColumnMeta { name: (*c).into(), data_kind: DataKind::Numeric, nullable: true }).collect(),
            row_count_estimate: 0,
            foreign_keys: vec![],
        }
    }

    fn setup() -> (Catalog, ViewDef) {
        let mut cat = Catalog::from_tables(&[table("t1", &["a", "b"]), table("t2", &["b", "c"]), table("t3", &["c", "d"])]);
        let key = "t1⋈t2 ON t1.b=t2.b".to_string();
        let sql = build_view_sql(&key, &cat).unwrap();
        cat.add_view("v_test", &sql).unwrap();
        let view = ViewDef { view_id: "v_test".into(), name: "v_test".into(), sql_text: sql, covers_pattern: key, created_at_iteration: 1 };
        (cat, view)
    }

    #[test]
    fn view_sql_exposes_prefixed_columns() {
        let (cat, view) = setup();
        assert_eq!(
            view.sql_text,
            "SELECT t1.a AS t1__a, t1.b AS t1__b, t2.b AS t2__b, t2.c AS t2__c FROM t1 JOIN t2 ON t1.b = t2.b"
        );
        assert_eq!(cat.view_columns("v_test").unwrap(), ["t1__a", "t1__b", "t2__b", "t2__c"]);
    }

    #[test]
    fn rewrite_removes_the_join() {
        let (cat, view) = setup();
        let sql = "SELECT t1.a, t2.c FROM t1 JOIN t2 ON t1.b = t2.b";
        let out = rewrite_with_view(sql, &view, &cat).unwrap();
        assert_eq!(out, "SELECT t1__a, t2__c FROM v_test");
        let before = analyze(sql, &cat).unwrap();
        let after = analyze(&out, &cat).unwrap();
        assert_eq!(after.join_count, before.join_count - 1);
        assert!(after.token_count < before.token_count);
        assert!(after.referenced_columns.is_superset(&before.referenced_columns));
    }

    #[test]
    fn rewrite_handles_aliases_wildcards_and_subqueries() {
        let (cat, view) = setup();
        let sql = "SELECT y.a, SUM(x.c) AS total FROM t2 AS x JOIN t1 AS y ON y.b = x.b \
                   WHERE x.c IN (SELECT c FROM t3 WHERE t3.d > y.a) GROUP BY y.a ORDER BY total DESC";
        let out = rewrite_with_view(sql, &view, &cat).unwrap();
        assert_eq!(
            out,
            "SELECT t1__a, SUM(t2__c) AS total FROM v_test WHERE t2__c IN (SELECT c FROM t3 WHERE t3.d > t1__a) \
             GROUP BY t1__a ORDER BY total DESC"
        );
        analyze(&out, &cat).unwrap();

        let star = rewrite_with_view("SELECT * FROM t2 JOIN t1 ON t1.b = t2.b", &view, &cat).unwrap();
        assert_eq!(star, "SELECT t2__b, t2__c, t1__a, t1__b FROM v_test");
    }

    #[test]
    fn mismatched_pattern_is_rejected() {
        let (cat, view) = setup();
        for sql in ["SELECT a FROM t1", "SELECT t2.c FROM t2 JOIN t3 ON t2.c = t3.c", "SELECT 1 UNION SELECT 2"] {
            assert!(matches!(rewrite_with_view(sql, &view, &cat), Err(SqlError::PatternMismatch { .. })), "{sql}");
        }
        assert!(matches!(rewrite_with_view("SELEC", &view, &cat), Err(SqlError::Parse { .. })));
    }
}
