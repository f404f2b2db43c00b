//! Iterative edge editing.
//!
//! Every ordered entity pair is reclassified exactly once. Pairs are grouped
//! into buckets (by distance for close-first editing); all pairs of a bucket
//! are classified against the same graph snapshot and committed together, so
//! later buckets see the edits of earlier ones.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::relgraph::{build_schedule, init_random_graph, random_schedule, EditSchedule, EdgeClass, Pair, RelationGraph};
use crate::rules::RuleExtractor;
use crate::{stable_hash, Error, Result};

/// Anything that can label entity pairs given a document and a graph.
pub trait EdgeClassifier {
    /// Per-document state computed once and reused across rounds.
    type State;

    fn encode(&self, doc: &Document) -> Result<Self::State>;

    /// One class per pair, each decided from `graph` alone.
    fn classify(&self, state: &Self::State, graph: &RelationGraph, pairs: &[Pair]) -> Result<Vec<EdgeClass>>;
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditRecord {
    pub round: usize,
    /// Bucket distance (`None` for random-order buckets).
    pub distance: Option<usize>,
    pub head: usize,
    pub tail: usize,
    pub before: EdgeClass,
    pub after: EdgeClass,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EditTrace {
    pub doc_id: String,
    pub records: Vec<EditRecord>,
}

impl EditTrace {
    pub fn rounds(&self) -> usize {
        self.records.last().map_or(0, |r| r.round + 1)
    }

    /// Number of decisions that changed a pair's class.
    pub fn changes(&self) -> usize {
        self.records.iter().filter(|r| r.before != r.after).count()
    }

    /// One JSON object per decision.
    pub fn to_jsonl(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Line<'a> {
            doc_id: &'a str,
            #[serde(flatten)]
            record: &'a EditRecord,
        }
        let mut out = String::new();
        for record in &self.records {
            out.push_str(&serde_json::to_string(&Line {
                doc_id: &self.doc_id,
                record,
            })?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Classifies a bucket against a fixed snapshot.
pub fn edit_round<C: EdgeClassifier>(
    classifier: &C,
    state: &C::State,
    snapshot: &RelationGraph,
    pairs: &[Pair],
) -> Result<Vec<EdgeClass>> {
    if pairs.is_empty() {
        return Ok(Vec::new());
    }
    let decisions = classifier.classify(state, snapshot, pairs)?;
    if decisions.len() != pairs.len() {
        return Err(Error::Data(format!(
            "classifier returned {} decisions for {} pairs",
            decisions.len(),
            pairs.len()
        )));
    }
    Ok(decisions)
}

fn check_schedule(doc: &Document, initial: &RelationGraph, schedule: &EditSchedule) -> Result<()> {
    let n = doc.entities.len();
    if initial.n_nodes() != n {
        return Err(Error::Data(format!(
            "{}: initial graph has {} nodes, document has {n} entities",
            doc.doc_id,
            initial.n_nodes()
        )));
    }
    let mut seen = vec![false; n * n];
    for b in &schedule.buckets {
        for &(i, j) in &b.pairs {
            if i >= n || j >= n || i == j || std::mem::replace(&mut seen[i * n + j], true) {
                return Err(Error::Data(format!(
                    "{}: schedule pair ({i}, {j}) is invalid or repeated for {n} entities",
                    doc.doc_id
                )));
            }
        }
    }
    let expected = n * n.saturating_sub(1);
    if schedule.pair_count() != expected {
        return Err(Error::Data(format!(
            "{}: schedule covers {} of {expected} pairs",
            doc.doc_id,
            schedule.pair_count()
        )));
    }
    Ok(())
}

/// Runs every bucket of `schedule` in order, starting from `initial`.
pub fn edit_graph<C: EdgeClassifier>(
    classifier: &C,
    doc: &Document,
    initial: &RelationGraph,
    schedule: &EditSchedule,
) -> Result<(RelationGraph, EditTrace)> {
    check_schedule(doc, initial, schedule)?;
    let state = classifier.encode(doc)?;
    let mut graph = initial.clone();
    let mut trace = EditTrace {
        doc_id: doc.doc_id.clone(),
        records: Vec::with_capacity(schedule.pair_count()),
    };
    for (round, bucket) in schedule.buckets.iter().enumerate() {
        let decisions = edit_round(classifier, &state, &graph, &bucket.pairs)?;
        for (&(i, j), &after) in bucket.pairs.iter().zip(&decisions) {
            trace.records.push(EditRecord {
                round,
                distance: bucket.distance,
                head: i,
                tail: j,
                before: graph.class(i, j),
                after,
            });
        }
        for (&(i, j), &after) in bucket.pairs.iter().zip(&decisions) {
            graph.set(i, j, after)?;
        }
    }
    Ok((graph, trace))
}

/// Where the graph being edited comes from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum InitialGraphSource {
    Empty,
    #[default]
    Rule,
    /// As many random edges as the rule extractor would produce.
    Random { seed: u64 },
}

impl fmt::Display for InitialGraphSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InitialGraphSource::Empty => f.write_str("empty"),
            InitialGraphSource::Rule => f.write_str("rule"),
            InitialGraphSource::Random { .. } => f.write_str("random"),
        }
    }
}

/// Builds the starting graph for `doc`. Rule and random sources need the
/// rule extractor.
pub fn initial_graph(doc: &Document, source: InitialGraphSource, rules: Option<&RuleExtractor>) -> Result<RelationGraph> {
    let n = doc.entities.len();
    let need_rules = || {
        rules.ok_or_else(|| Error::Data(format!("`{source}` initial graphs need dictionaries for the rule extractor")))
    };
    match source {
        InitialGraphSource::Empty => Ok(RelationGraph::empty(n)),
        InitialGraphSource::Rule => Ok(need_rules()?.extract(doc)),
        InitialGraphSource::Random { seed } => {
            let n_edges = need_rules()?.extract(doc).edge_count();
            init_random_graph(n, n_edges, seed ^ stable_hash(&doc.doc_id))
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum EditOrder {
    #[default]
    CloseFirst,
    /// Shuffled pairs in as many buckets as close-first would use.
    Random { seed: u64 },
}

impl FromStr for EditOrder {
    type Err = Error;

    /// `close` or `random` (seed 0; set it afterwards).
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "close" | "close-first" => Ok(EditOrder::CloseFirst),
            "random" => Ok(EditOrder::Random { seed: 0 }),
            other => Err(Error::Data(format!("unknown edit order `{other}`"))),
        }
    }
}

impl FromStr for InitialGraphSource {
    type Err = Error;

    /// `empty`, `rule`, or `random` (seed 0; set it afterwards).
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "empty" => Ok(InitialGraphSource::Empty),
            "rule" => Ok(InitialGraphSource::Rule),
            "random" => Ok(InitialGraphSource::Random { seed: 0 }),
            other => Err(Error::Data(format!("unknown initial graph `{other}`"))),
        }
    }
}

/// The editing schedule for a document under `order`.
pub fn schedule_for(doc: &Document, d_max: usize, order: EditOrder) -> Result<EditSchedule> {
    let n = doc.entities.len();
    let close = build_schedule(n, d_max)?;
    match order {
        EditOrder::CloseFirst => Ok(close),
        EditOrder::Random { seed } => random_schedule(n, close.len().max(1), seed ^ stable_hash(&doc.doc_id)),
    }
}

/// How documents are edited: starting graph, pair order, and cutoff.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditSettings {
    pub init: InitialGraphSource,
    pub order: EditOrder,
    pub d_max: usize,
}

impl Default for EditSettings {
    fn default() -> Self {
        EditSettings {
            init: InitialGraphSource::Rule,
            order: EditOrder::CloseFirst,
            d_max: 4,
        }
    }
}

/// Builds the initial graph and schedule for `doc` and edits it.
pub fn edit_document<C: EdgeClassifier>(
    classifier: &C,
    doc: &Document,
    settings: &EditSettings,
    rules: Option<&RuleExtractor>,
) -> Result<(RelationGraph, EditTrace)> {
    let initial = initial_graph(doc, settings.init, rules)?;
    let schedule = schedule_for(doc, settings.d_max, settings.order)?;
    edit_graph(classifier, doc, &initial, &schedule)
}
