//! Relation graphs, appearance-order distance, and edit schedules.
//!
//! Nodes are the entities of one document in appearance order, so a node's
//! index is also its rank and the distance between two nodes is the absolute
//! difference of their indices.

use std::fmt;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Document, RelationInstance};
use crate::{Error, Result};

/// The sixteen directed relation classes of the synthesis-procedure corpus.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RelationLabel {
    #[serde(rename = "Next_Operation")]
    NextOperation,
    #[serde(rename = "Recipe_Precursor")]
    RecipePrecursor,
    #[serde(rename = "Recipe_Target")]
    RecipeTarget,
    #[serde(rename = "Participant_Material")]
    ParticipantMaterial,
    #[serde(rename = "Solvent_Material")]
    SolventMaterial,
    #[serde(rename = "Atmospheric_Material")]
    AtmosphericMaterial,
    #[serde(rename = "Property_Of")]
    PropertyOf,
    #[serde(rename = "Condition_Of")]
    ConditionOf,
    #[serde(rename = "Number_Of")]
    NumberOf,
    #[serde(rename = "Amount_Of")]
    AmountOf,
    #[serde(rename = "Descriptor_Of")]
    DescriptorOf,
    #[serde(rename = "Brand_Of")]
    BrandOf,
    #[serde(rename = "Type_Of")]
    TypeOf,
    #[serde(rename = "Apparatus_Of")]
    ApparatusOf,
    #[serde(rename = "Apparatus_Attr_Of")]
    ApparatusAttrOf,
    #[serde(rename = "Coref_Of")]
    CorefOf,
}

impl RelationLabel {
    pub const COUNT: usize = 16;

    pub const ALL: [RelationLabel; Self::COUNT] = [
        RelationLabel::NextOperation,
        RelationLabel::RecipePrecursor,
        RelationLabel::RecipeTarget,
        RelationLabel::ParticipantMaterial,
        RelationLabel::SolventMaterial,
        RelationLabel::AtmosphericMaterial,
        RelationLabel::PropertyOf,
        RelationLabel::ConditionOf,
        RelationLabel::NumberOf,
        RelationLabel::AmountOf,
        RelationLabel::DescriptorOf,
        RelationLabel::BrandOf,
        RelationLabel::TypeOf,
        RelationLabel::ApparatusOf,
        RelationLabel::ApparatusAttrOf,
        RelationLabel::CorefOf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RelationLabel::NextOperation => "Next_Operation",
            RelationLabel::RecipePrecursor => "Recipe_Precursor",
            RelationLabel::RecipeTarget => "Recipe_Target",
            RelationLabel::ParticipantMaterial => "Participant_Material",
            RelationLabel::SolventMaterial => "Solvent_Material",
            RelationLabel::AtmosphericMaterial => "Atmospheric_Material",
            RelationLabel::PropertyOf => "Property_Of",
            RelationLabel::ConditionOf => "Condition_Of",
            RelationLabel::NumberOf => "Number_Of",
            RelationLabel::AmountOf => "Amount_Of",
            RelationLabel::DescriptorOf => "Descriptor_Of",
            RelationLabel::BrandOf => "Brand_Of",
            RelationLabel::TypeOf => "Type_Of",
            RelationLabel::ApparatusOf => "Apparatus_Of",
            RelationLabel::ApparatusAttrOf => "Apparatus_Attr_Of",
            RelationLabel::CorefOf => "Coref_Of",
        }
    }

    /// Position in [`RelationLabel::ALL`].
    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for RelationLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RelationLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RelationLabel::ALL
            .iter()
            .copied()
            .find(|l| l.name() == s)
            .ok_or_else(|| Error::Data(format!("unknown relation label `{s}`")))
    }
}

/// Class of an ordered node pair: a relation or the absence of one.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum EdgeClass {
    #[default]
    NoRelation,
    Relation(RelationLabel),
}

impl EdgeClass {
    /// NoRelation plus the sixteen relations.
    pub const COUNT: usize = RelationLabel::COUNT + 1;

    /// Dense class index; NoRelation is 0.
    pub fn index(self) -> usize {
        match self {
            EdgeClass::NoRelation => 0,
            EdgeClass::Relation(l) => l.index() + 1,
        }
    }

    pub fn from_index(i: usize) -> Option<EdgeClass> {
        match i {
            0 => Some(EdgeClass::NoRelation),
            _ => RelationLabel::ALL.get(i - 1).map(|&l| EdgeClass::Relation(l)),
        }
    }

    pub fn relation(self) -> Option<RelationLabel> {
        match self {
            EdgeClass::NoRelation => None,
            EdgeClass::Relation(l) => Some(l),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EdgeClass::NoRelation => "NoRelation",
            EdgeClass::Relation(l) => l.name(),
        }
    }
}

impl fmt::Display for EdgeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EdgeClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "NoRelation" => Ok(EdgeClass::NoRelation),
            _ => s.parse::<RelationLabel>().map(EdgeClass::Relation),
        }
    }
}

impl From<EdgeClass> for String {
    fn from(c: EdgeClass) -> String {
        c.name().to_string()
    }
}

impl TryFrom<String> for EdgeClass {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<RelationLabel> for EdgeClass {
    fn from(l: RelationLabel) -> Self {
        EdgeClass::Relation(l)
    }
}

/// Ordered node pair `(head, tail)`.
pub type Pair = (usize, usize);

/// Appearance-order distance between two nodes of an `n_nodes` graph.
pub fn entity_distance(n_nodes: usize, i: usize, j: usize) -> Result<usize> {
    for idx in [i, j] {
        if idx >= n_nodes {
            return Err(Error::Index {
                what: "nodes",
                index: idx,
                len: n_nodes,
            });
        }
    }
    Ok(i.abs_diff(j))
}

/// Total map from ordered distinct node pairs to [`EdgeClass`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelationGraph {
    n_nodes: usize,
    classes: Vec<EdgeClass>,
}

impl RelationGraph {
    pub fn empty(n_nodes: usize) -> Self {
        RelationGraph {
            n_nodes,
            classes: vec![EdgeClass::NoRelation; n_nodes * n_nodes],
        }
    }

    /// Gold graph of a parsed document.
    pub fn from_document(doc: &Document) -> Result<Self> {
        Self::from_relations(doc.entities.len(), &doc.relations)
    }

    pub fn from_relations(n_nodes: usize, relations: &[RelationInstance]) -> Result<Self> {
        let mut g = Self::empty(n_nodes);
        for r in relations {
            g.set(r.head, r.tail, r.label.into())?;
        }
        Ok(g)
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    fn slot(&self, i: usize, j: usize) -> Result<usize> {
        entity_distance(self.n_nodes, i, j)?;
        if i == j {
            return Err(Error::Data(format!("self-edge ({i}, {i}) is not a graph slot")));
        }
        Ok(i * self.n_nodes + j)
    }

    pub fn get(&self, i: usize, j: usize) -> Result<EdgeClass> {
        Ok(self.classes[self.slot(i, j)?])
    }

    /// Class of `(i, j)`; panics on self-pairs or out-of-range indices.
    pub fn class(&self, i: usize, j: usize) -> EdgeClass {
        assert!(i != j && i < self.n_nodes && j < self.n_nodes, "invalid pair ({i}, {j})");
        self.classes[i * self.n_nodes + j]
    }

    pub fn set(&mut self, i: usize, j: usize, class: EdgeClass) -> Result<()> {
        let s = self.slot(i, j)?;
        self.classes[s] = class;
        Ok(())
    }

    /// Non-NoRelation edges in row-major `(head, tail)` order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, RelationLabel)> + '_ {
        let n = self.n_nodes;
        self.classes.iter().enumerate().filter_map(move |(s, c)| {
            c.relation().map(|l| (s / n, s % n, l))
        })
    }

    pub fn edge_count(&self) -> usize {
        self.classes.iter().filter(|c| **c != EdgeClass::NoRelation).count()
    }

    pub fn to_relations(&self) -> Vec<RelationInstance> {
        self.edges()
            .map(|(head, tail, label)| RelationInstance { head, tail, label })
            .collect()
    }

    /// JSON record listing only the non-NoRelation edges.
    pub fn to_record(&self, doc_id: &str) -> GraphRecord {
        GraphRecord {
            doc_id: doc_id.to_string(),
            nodes: None,
            edges: self
                .edges()
                .map(|(head, tail, label)| EdgeRecord { head, tail, label })
                .collect(),
        }
    }
}

/// Serialized graph: `{doc_id, edges: [{head, tail, label}]}`, optionally
/// carrying node descriptions so the record renders on its own.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphRecord {
    pub doc_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nodes: Option<Vec<NodeRecord>>,
    pub edges: Vec<EdgeRecord>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeRecord {
    pub head: usize,
    pub tail: usize,
    pub label: RelationLabel,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub index: usize,
    pub label: String,
    pub surface: String,
}

impl GraphRecord {
    /// Record with node descriptions taken from `doc`.
    pub fn with_nodes(graph: &RelationGraph, doc: &Document) -> Self {
        let mut rec = graph.to_record(&doc.doc_id);
        rec.nodes = Some(
            doc.entities
                .iter()
                .enumerate()
                .map(|(index, e)| NodeRecord {
                    index,
                    label: e.label.clone(),
                    surface: e.surface.clone(),
                })
                .collect(),
        );
        rec
    }

    /// Node count implied by the record: the node list if present, otherwise
    /// one past the largest endpoint.
    pub fn node_count(&self) -> usize {
        match &self.nodes {
            Some(nodes) => nodes.len(),
            None => self
                .edges
                .iter()
                .map(|e| e.head.max(e.tail) + 1)
                .max()
                .unwrap_or(0),
        }
    }

    pub fn to_graph(&self, n_nodes: usize) -> Result<RelationGraph> {
        let mut g = RelationGraph::empty(n_nodes);
        for e in &self.edges {
            g.set(e.head, e.tail, e.label.into())?;
        }
        Ok(g)
    }
}

/// One round of editing: the pairs classified together against one snapshot.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bucket {
    /// Distance the bucket covers for close-first schedules (the final bucket
    /// covers this distance and everything beyond); `None` for random order.
    pub distance: Option<usize>,
    pub pairs: Vec<Pair>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EditSchedule {
    pub buckets: Vec<Bucket>,
    pub d_max: usize,
}

impl EditSchedule {
    pub fn len(&self) -> usize {
        self.buckets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buckets.is_empty()
    }

    pub fn pair_count(&self) -> usize {
        self.buckets.iter().map(|b| b.pairs.len()).sum()
    }
}

/// Ordered pairs `(i, j)`, `i != j`, with `d1 <= |i - j| < d2`, sorted.
/// `d2 = None` means no upper bound.
pub fn pairs_at_distance(n_nodes: usize, d1: usize, d2: Option<usize>) -> Vec<Pair> {
    let mut out = Vec::new();
    for i in 0..n_nodes {
        for j in 0..n_nodes {
            if i == j {
                continue;
            }
            let d = i.abs_diff(j);
            if d >= d1 && d2.is_none_or(|hi| d < hi) {
                out.push((i, j));
            }
        }
    }
    out
}

/// Close-first schedule: one bucket per distance `1..d_max`, then one bucket
/// for every pair at distance `>= d_max`.
pub fn build_schedule(n_nodes: usize, d_max: usize) -> Result<EditSchedule> {
    if d_max == 0 {
        return Err(Error::Data("d_max must be at least 1".into()));
    }
    let rounds = d_max.min(n_nodes.saturating_sub(1));
    let buckets = (1..=rounds)
        .map(|d| {
            let pairs = if d == d_max {
                pairs_at_distance(n_nodes, d_max, None)
            } else {
                pairs_at_distance(n_nodes, d, Some(d + 1))
            };
            Bucket {
                distance: Some(d),
                pairs,
            }
        })
        .collect();
    Ok(EditSchedule { buckets, d_max })
}

/// All ordered pairs shuffled with `seed` and cut into `n_buckets` chunks of
/// near-equal size. Empty chunks are dropped.
pub fn random_schedule(n_nodes: usize, n_buckets: usize, seed: u64) -> Result<EditSchedule> {
    if n_buckets == 0 {
        return Err(Error::Data("a random schedule needs at least one bucket".into()));
    }
    let mut pairs = pairs_at_distance(n_nodes, 1, None);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pairs.shuffle(&mut rng);
    let total = pairs.len();
    let mut buckets = Vec::with_capacity(n_buckets);
    let mut start = 0;
    for k in 0..n_buckets {
        let end = total * (k + 1) / n_buckets;
        if end > start {
            buckets.push(Bucket {
                distance: None,
                pairs: pairs[start..end].to_vec(),
            });
        }
        start = end;
    }
    Ok(EditSchedule {
        buckets,
        d_max: n_buckets,
    })
}

/// Graph with exactly `n_edges` distinct ordered pairs carrying uniformly
/// random relation classes.
pub fn init_random_graph(n_nodes: usize, n_edges: usize, seed: u64) -> Result<RelationGraph> {
    let slots = n_nodes * n_nodes.saturating_sub(1);
    if n_edges > slots {
        return Err(Error::Data(format!(
            "cannot place {n_edges} edges in a {n_nodes}-node graph ({slots} slots)"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = RelationGraph::empty(n_nodes);
    let mut chosen = index::sample(&mut rng, slots, n_edges).into_vec();
    chosen.sort_unstable();
    for s in chosen {
        // slot s enumerates off-diagonal cells row by row
        let i = s / (n_nodes - 1);
        let mut j = s % (n_nodes - 1);
        if j >= i {
            j += 1;
        }
        let label = RelationLabel::ALL[rng.random_range(0..RelationLabel::COUNT)];
        g.set(i, j, label.into())?;
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;

    fn all_pairs(n: usize) -> BTreeSet<Pair> {
        let mut s = BTreeSet::new();
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s.insert((i, j));
                }
            }
        }
        s
    }

    #[test]
    fn distance_matches_rank_difference() {
        assert_eq!(entity_distance(10, 4, 7).unwrap(), 3);
        assert_eq!(entity_distance(10, 7, 4).unwrap(), 3);
        assert_eq!(entity_distance(10, 5, 5).unwrap(), 0);
        assert!(entity_distance(3, 0, 3).is_err());
    }

    #[test]
    fn pairs_at_distance_small_cases() {
        assert_eq!(pairs_at_distance(3, 1, Some(2)), vec![(0, 1), (1, 0), (1, 2), (2, 1)]);
        assert_eq!(pairs_at_distance(3, 2, None), vec![(0, 2), (2, 0)]);
        assert!(pairs_at_distance(3, 1, Some(1)).is_empty());
    }

    #[test]
    fn schedule_shapes() {
        let s = build_schedule(10, 4).unwrap();
        assert_eq!(s.len(), 4);
        assert!(s.buckets[3].pairs.iter().all(|&(i, j)| i.abs_diff(j) >= 4));
        assert_eq!(s.buckets[3].pairs.len(), 2 * (1..=6).sum::<usize>());

        let one = build_schedule(6, 1).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one.buckets[0].pairs.len(), 30);

        assert_eq!(build_schedule(3, 4).unwrap().len(), 2);
        assert!(build_schedule(1, 4).unwrap().is_empty());
        assert!(build_schedule(0, 4).unwrap().is_empty());
        assert!(build_schedule(5, 0).is_err());
    }

    #[test]
    fn random_schedule_is_seeded_partition() {
        let a = random_schedule(7, 3, 11).unwrap();
        let b = random_schedule(7, 3, 11).unwrap();
        assert_eq!(a, b);
        let union: BTreeSet<Pair> = a.buckets.iter().flat_map(|b| b.pairs.clone()).collect();
        assert_eq!(union, all_pairs(7));
        assert_eq!(a.pair_count(), 42);
        assert_ne!(a, random_schedule(7, 3, 12).unwrap());
        assert_eq!(random_schedule(4, 1, 0).unwrap().len(), 1);
    }

    #[test]
    fn random_graph_edge_count() {
        let g = init_random_graph(6, 12, 3).unwrap();
        assert_eq!(g.edge_count(), 12);
        assert_eq!(g, init_random_graph(6, 12, 3).unwrap());
        assert_eq!(init_random_graph(6, 0, 3).unwrap().edge_count(), 0);
        assert_eq!(init_random_graph(4, 12, 1).unwrap().edge_count(), 12);
        assert!(init_random_graph(4, 13, 1).is_err());
    }

    #[test]
    fn graph_rejects_self_edges() {
        let mut g = RelationGraph::empty(3);
        assert!(g.set(1, 1, RelationLabel::CorefOf.into()).is_err());
        g.set(0, 2, RelationLabel::CorefOf.into()).unwrap();
        assert_eq!(g.get(0, 2).unwrap(), EdgeClass::Relation(RelationLabel::CorefOf));
        assert_eq!(g.get(2, 0).unwrap(), EdgeClass::NoRelation);
    }

    #[test]
    fn class_index_round_trip() {
        for i in 0..EdgeClass::COUNT {
            assert_eq!(EdgeClass::from_index(i).unwrap().index(), i);
        }
        assert!(EdgeClass::from_index(EdgeClass::COUNT).is_none());
        assert_eq!("Apparatus_Attr_Of".parse::<RelationLabel>().unwrap(), RelationLabel::ApparatusAttrOf);
    }

    #[test]
    fn record_round_trip() {
        let mut g = RelationGraph::empty(4);
        g.set(0, 1, RelationLabel::NextOperation.into()).unwrap();
        g.set(3, 0, RelationLabel::RecipePrecursor.into()).unwrap();
        let json = serde_json::to_string(&g.to_record("d1")).unwrap();
        assert_eq!(
            json,
            r#"{"doc_id":"d1","edges":[{"head":0,"tail":1,"label":"Next_Operation"},{"head":3,"tail":0,"label":"Recipe_Precursor"}]}"#
        );
        let rec: GraphRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(rec.to_graph(4).unwrap(), g);
    }

    mod props {
        use proptest::prelude::*;

        use super::*;

        proptest! {
            #[test]
            fn schedule_covers_each_pair_once(n in 0usize..30, d_max in 1usize..11) {
                let s = build_schedule(n, d_max).unwrap();
                prop_assert!(s.len() <= d_max);
                let mut seen = BTreeSet::new();
                for (k, b) in s.buckets.iter().enumerate() {
                    let d = k + 1;
                    prop_assert_eq!(b.distance, Some(d));
                    for &(i, j) in &b.pairs {
                        prop_assert!(seen.insert((i, j)));
                        if d < d_max {
                            prop_assert_eq!(i.abs_diff(j), d);
                        } else {
                            prop_assert!(i.abs_diff(j) >= d_max);
                        }
                    }
                }
                prop_assert_eq!(seen, all_pairs(n));
            }

            #[test]
            fn graph_is_total(n in 2usize..8, ops in proptest::collection::vec((0usize..8, 0usize..8, 0usize..17), 0..40)) {
                let mut g = RelationGraph::empty(n);
                for (i, j, c) in ops {
                    let _ = g.set(i % n, j % n, EdgeClass::from_index(c).unwrap());
                }
                for i in 0..n {
                    for j in 0..n {
                        if i != j {
                            prop_assert!(g.get(i, j).is_ok());
                        }
                    }
                }
            }
        }
    }
}
