//! Random valid event sequences with a hand-kept model of what each query
//! references, for oracle comparisons.

use std::collections::{BTreeMap, BTreeSet};

use dataprod_core::metrics::{Comparator, Contract};
use dataprod_core::sql::{analyze, Catalog};
use dataprod_core::state::{
    AnswerVersion, ColumnMeta, ColumnRef, DataKind, EventPayload, ForeignKey, Question, QuestionId, QuestionOrigin,
    QueryVersion, SchemaTarget, StateEvent, TableId, TableMeta, TopicAssignment, ViewDef,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// What a generated SQL text references and how it is shaped, derived from
/// the template rather than from the analyzer.
#[derive(Debug, Clone, PartialEq)]
pub struct Shape {
    pub sql: String,
    pub tables: BTreeSet<TableId>,
    pub columns: BTreeSet<ColumnRef>,
    pub tokens: usize,
    pub joins: usize,
    pub subquery_depth: usize,
    pub aggregates: usize,
    pub group_by: bool,
}

impl Shape {
    /// Complexity under the default weights.
    pub fn complexity(&self) -> f64 {
        1.0 + 2.0 * self.joins as f64
            + 3.0 * self.subquery_depth as f64
            + self.aggregates as f64
            + f64::from(u8::from(self.group_by))
    }
}

#[derive(Debug, Clone)]
pub struct Generated {
    pub event: StateEvent,
    pub shape: Option<Shape>,
}

/// Candidate tables, each referencing only earlier ones.
fn table_pool() -> Vec<TableMeta> {
    let col = |name: &str, kind| ColumnMeta { name: name.into(), data_kind: kind, nullable: false };
    let fk = |column: &str, table: &str, references: &str| ForeignKey {
        column: column.into(),
        references_table: TableId::from_name(table),
        references_column: references.into(),
    };
    let table = |name: &str, columns: Vec<ColumnMeta>, fks: Vec<ForeignKey>, rows| TableMeta {
        table_id: TableId::from_name(name),
        name: name.into(),
        columns,
        row_count_estimate: rows,
        foreign_keys: fks,
    };
    vec![
        table("regions", vec![col("id", DataKind::Numeric), col("label", DataKind::Text)], vec![], 4),
        table(
            "shops",
            vec![col("id", DataKind::Numeric), col("region_id", DataKind::Numeric), col("name", DataKind::Text), col("opened", DataKind::Temporal)],
            vec![fk("region_id", "regions", "id")],
            20,
        ),
        table(
            "items",
            vec![col("id", DataKind::Numeric), col("title", DataKind::Text), col("price", DataKind::Numeric)],
            vec![],
            300,
        ),
        table(
            "sales",
            vec![
                col("id", DataKind::Numeric),
                col("shop_id", DataKind::Numeric),
                col("item_id", DataKind::Numeric),
                col("qty", DataKind::Numeric),
                col("amount", DataKind::Numeric),
                col("sold", DataKind::Temporal),
            ],
            vec![fk("shop_id", "shops", "id"), fk("item_id", "items", "id")],
            5000,
        ),
        table("notes", vec![col("id", DataKind::Numeric), col("body", DataKind::Text), col("flag", DataKind::Boolean)], vec![], 12),
        table(
            "returns",
            vec![col("id", DataKind::Numeric), col("sale_id", DataKind::Numeric), col("reason", DataKind::Text)],
            vec![fk("sale_id", "sales", "id")],
            80,
        ),
        table("empty", vec![], vec![], 0),
    ]
}

pub struct EventGenerator {
    rng: ChaCha8Rng,
    pool: Vec<TableMeta>,
    added: Vec<TableMeta>,
    questions: Vec<QuestionId>,
    query_versions: BTreeMap<QuestionId, u32>,
    answer_versions: BTreeMap<QuestionId, u32>,
    topics: BTreeSet<QuestionId>,
    views: usize,
}

impl EventGenerator {
    pub fn new(seed: u64) -> Self {
        let mut pool = table_pool();
        pool.reverse();
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            pool,
            added: Vec::new(),
            questions: Vec::new(),
            query_versions: BTreeMap::new(),
            answer_versions: BTreeMap::new(),
            topics: BTreeSet::new(),
            views: 0,
        }
    }

    pub fn take(&mut self, n: usize) -> Vec<Generated> {
        (0..n).map(|_| self.next_event()).collect()
    }

    fn col(&mut self, t: &TableMeta) -> Option<String> {
        t.columns.choose(&mut self.rng).map(|c| c.name.clone())
    }

    pub fn next_event(&mut self) -> Generated {
        loop {
            let roll = self.rng.gen_range(0..100);
            let generated = match roll {
                0..=7 => self.table_added(),
                8..=29 => self.question_added(),
                30..=69 => self.query_version(),
                70..=81 => self.answer(),
                82..=88 => self.view(),
                89..=95 => self.topic(),
                _ => Some(self.contract()),
            };
            if let Some(g) = generated {
                return g;
            }
        }
    }

    fn plain(payload: EventPayload) -> Generated {
        Generated { event: StateEvent::new(payload), shape: None }
    }

    fn table_added(&mut self) -> Option<Generated> {
        let t = self.pool.pop()?;
        self.added.push(t.clone());
        Some(Self::plain(EventPayload::TableAdded(t)))
    }

    fn question_added(&mut self) -> Option<Generated> {
        let id = QuestionId::from_seq(self.questions.len() + 1);
        let mut targets = BTreeSet::new();
        if !self.added.is_empty() && self.rng.gen_bool(0.7) {
            let t = self.added.choose(&mut self.rng).unwrap().clone();
            match self.col(&t) {
                Some(c) if self.rng.gen_bool(0.5) => targets.insert(SchemaTarget::column(t.table_id.clone(), &c)),
                _ => targets.insert(SchemaTarget::table(t.table_id.clone())),
            };
        }
        let parent = (!self.questions.is_empty() && self.rng.gen_bool(0.2))
            .then(|| self.questions.choose(&mut self.rng).unwrap().clone());
        let origin = if parent.is_some() { QuestionOrigin::Followup } else { QuestionOrigin::Generated };
        self.questions.push(id.clone());
        Some(Self::plain(EventPayload::QuestionAdded(Question {
            question_id: id.clone(),
            text: format!("question {id}"),
            origin,
            parent_question: parent,
            schema_targets: targets,
        })))
    }

    fn query_version(&mut self) -> Option<Generated> {
        let qid = self.questions.choose(&mut self.rng)?.clone();
        let shape = self.shape()?;
        let catalog = Catalog::from_tables(self.added.iter());
        let analysis = analyze(&shape.sql, &catalog).unwrap_or_else(|e| panic!("{}: {e}", shape.sql));
        let version_no = {
            let v = self.query_versions.entry(qid.clone()).or_default();
            *v += 1;
            *v
        };
        let exec_ms = self.rng.gen_bool(0.8).then(|| (self.rng.gen_range(0.0..8000.0f64) * 1000.0).round() / 1000.0);
        let event = StateEvent::new(EventPayload::QueryVersionAdded(QueryVersion {
            question_id: qid,
            version_no,
            sql_text: shape.sql.clone(),
            created_by: "generator".into(),
            analysis,
            exec_ms,
            timed_out: false,
        }));
        Some(Generated { event, shape: Some(shape) })
    }

    /// SQL over the tables added so far, from one of five templates.
    pub fn shape(&mut self) -> Option<Shape> {
        let with_cols: Vec<TableMeta> = self.added.iter().filter(|t| !t.columns.is_empty()).cloned().collect();
        let t = with_cols.choose(&mut self.rng)?.clone();
        let name = t.name.clone();
        let cref = |table: &TableMeta, c: &str| ColumnRef::new(table.table_id.clone(), c);
        let base = |sql: String, tokens: usize| Shape {
            sql,
            tables: BTreeSet::from([t.table_id.clone()]),
            columns: BTreeSet::new(),
            tokens,
            joins: 0,
            subquery_depth: 0,
            aggregates: 0,
            group_by: false,
        };
        let shape = match self.rng.gen_range(0..5) {
            0 => {
                let n = self.rng.gen_range(1..=t.columns.len());
                let cols: Vec<String> =
                    t.columns.choose_multiple(&mut self.rng, n).map(|c| c.name.clone()).collect();
                let mut s = base(format!("SELECT {} FROM {name}", cols.join(", ")), 2 * n + 2);
                s.columns = cols.iter().map(|c| cref(&t, c)).collect();
                s
            }
            1 => {
                let c = self.col(&t)?;
                let mut s = base(format!("SELECT {c}, COUNT(*) FROM {name} GROUP BY {c}"), 12);
                s.columns.insert(cref(&t, &c));
                s.aggregates = 1;
                s.group_by = true;
                s
            }
            2 => {
                let c = self.col(&t)?;
                let mut s = base(format!("SELECT {c} FROM {name} WHERE {c} > 3"), 8);
                s.columns.insert(cref(&t, &c));
                s
            }
            3 => {
                let other = with_cols.choose(&mut self.rng)?.clone();
                if other.table_id == t.table_id {
                    return None;
                }
                let (c, d) = (self.col(&t)?, self.col(&t)?);
                let k = self.col(&other)?;
                let mut s = base(
                    format!("SELECT {c} FROM {name} WHERE {d} IN (SELECT {k} FROM {})", other.name),
                    13,
                );
                s.tables.insert(other.table_id.clone());
                s.columns.extend([cref(&t, &c), cref(&t, &d), cref(&other, &k)]);
                s.subquery_depth = 1;
                s
            }
            _ => {
                let fk = t.foreign_keys.choose(&mut self.rng)?.clone();
                let remote = self.added.iter().find(|r| r.table_id == fk.references_table)?.clone();
                let (x, y) = (self.col(&t)?, self.col(&remote)?);
                let r = &remote.name;
                let mut s = base(
                    format!("SELECT {name}.{x}, {r}.{y} FROM {name} JOIN {r} ON {name}.{} = {r}.{}", fk.column, fk.references_column),
                    20,
                );
                s.tables.insert(remote.table_id.clone());
                s.columns.extend([
                    cref(&t, &x),
                    cref(&remote, &y),
                    cref(&t, &fk.column),
                    cref(&remote, &fk.references_column),
                ]);
                s.joins = 1;
                s
            }
        };
        Some(shape)
    }

    fn answer(&mut self) -> Option<Generated> {
        let qid = self.questions.choose(&mut self.rng)?.clone();
        let v = self.answer_versions.entry(qid.clone()).or_default();
        *v += 1;
        let version_no = *v;
        Some(Self::plain(EventPayload::AnswerRecorded(AnswerVersion {
            question_id: qid,
            version_no,
            payload_digest: format!("{:016x}", self.rng.gen::<u64>()),
            confidence: self.rng.gen_range(0.0..=1.0),
        })))
    }

    fn view(&mut self) -> Option<Generated> {
        let t = self.added.iter().find(|t| !t.foreign_keys.is_empty())?.clone();
        let fk = t.foreign_keys[0].clone();
        let r = fk.references_table.as_str().to_string();
        self.views += 1;
        let name = format!("v_gen{}", self.views);
        Some(Self::plain(EventPayload::ViewAdded(ViewDef {
            view_id: name.clone(),
            name,
            sql_text: format!(
                "SELECT {n}.{c} AS {n}__{c} FROM {n} JOIN {r} ON {n}.{c} = {r}.{rc}",
                n = t.name,
                c = fk.column,
                rc = fk.references_column
            ),
            covers_pattern: format!("{}⋈{r}", t.name),
            created_at_iteration: 0,
        })))
    }

    fn topic(&mut self) -> Option<Generated> {
        let free: Vec<QuestionId> = self.questions.iter().filter(|q| !self.topics.contains(*q)).cloned().collect();
        let qid = free.choose(&mut self.rng)?.clone();
        self.topics.insert(qid.clone());
        Some(Self::plain(EventPayload::TopicAssigned(TopicAssignment {
            question_id: qid,
            topic_label: format!("topic {}", self.rng.gen_range(0..4)),
        })))
    }

    fn contract(&mut self) -> Generated {
        let target = self.rng.gen_range(0.1..=1.0);
        Self::plain(EventPayload::ContractChanged(Contract::new([("table_coverage", Comparator::AtLeast, target)])))
    }
}
