//! View creation for join patterns shared by several queries, with
//! rewriting of the affected queries onto the new view.

use sha2::{Digest, Sha256};

use super::{execute_version, Artifact, Tool, ToolContext, ToolError, ToolInvocation, ToolResult, Versions};
use crate::registry::{shared_join_patterns, tools};
use crate::sql::{build_view_sql, rewrite_with_view};
use crate::state::ViewDef;

pub struct ViewCreation;

/// `v_` followed by the first eight hex digits of the pattern's SHA-256.
pub fn view_name(pattern: &str) -> String {
    let digest = hex::encode(Sha256::digest(pattern.as_bytes()));
    format!("v_{}", &digest[..8])
}

impl Tool for ViewCreation {
    fn name(&self) -> &str {
        tools::VIEW_CREATION
    }

    fn run(&self, ctx: &ToolContext<'_>, inv: &ToolInvocation) -> Result<ToolResult, ToolError> {
        let v = inv.count("max_views", 1)?;
        let state = ctx.snapshot;
        let mut patterns = shared_join_patterns(state);
        if patterns.is_empty() {
            return Err(ToolError::NoSharedPattern);
        }
        patterns.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        patterns.truncate(v);

        let mut catalog = state.catalog()?;
        let mut versions = Versions::default();
        let mut artifacts = Vec::new();
        let mut notes = Vec::new();
        for (pattern, freq) in patterns {
            let (view, created) = match state.view_by_pattern(&pattern) {
                Some(existing) => (existing.clone(), false),
                None => {
                    let view = ViewDef {
                        view_id: view_name(&pattern),
                        name: view_name(&pattern),
                        sql_text: build_view_sql(&pattern, &catalog)?,
                        covers_pattern: pattern.clone(),
                        created_at_iteration: inv.iteration,
                    };
                    ctx.db.create_view(&view)?;
                    catalog.add_view(&view.name, &view.sql_text)?;
                    (view, true)
                }
            };

            let mut rewritten = Vec::new();
            for q in state.latest_queries().filter(|q| q.analysis.join_pattern_key == pattern) {
                let sql = match rewrite_with_view(&q.sql_text, &view, &catalog) {
                    Ok(sql) => sql,
                    Err(e) => {
                        notes.push(format!("{}: {e}", q.question_id));
                        continue;
                    }
                };
                let before = ctx.db.execute_timed(&q.sql_text)?;
                let after = ctx.db.execute_timed(&sql)?;
                if !(before.succeeded() && after.succeeded() && before.digest == after.digest) {
                    notes.push(format!("{}: rewritten result differs from the original", q.question_id));
                    continue;
                }
                match execute_version(ctx, &catalog, &mut versions, &q.question_id, &sql, tools::VIEW_CREATION)? {
                    Ok(mut produced) => rewritten.append(&mut produced),
                    Err(msg) => notes.push(msg),
                }
            }
            let count = rewritten.iter().filter(|a| matches!(a, Artifact::QueryVersion(_))).count();
            if count == 0 {
                if created {
                    ctx.db.drop_view(&view.name)?;
                }
                notes.push(format!("pattern `{pattern}` left unchanged"));
                continue;
            }
            notes.push(format!("{} covers `{pattern}` ({freq} queries, {count} rewritten)", view.name));
            if created {
                artifacts.push(Artifact::View(view));
            }
            artifacts.append(&mut rewritten);
        }
        Ok(ToolResult::new(artifacts, notes.join("; ")))
    }
}
