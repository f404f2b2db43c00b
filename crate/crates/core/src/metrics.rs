//! Micro precision, recall and F-score per relation class and pooled overall.

use std::collections::{BTreeMap, HashSet};

use serde::Serialize;

use crate::corpus::{Document, RelationInstance};
use crate::relgraph::{RelationGraph, RelationLabel};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    pub fn add(&mut self, other: Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    /// tp / (tp + fp), 0 when nothing was predicted.
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    /// tp / (tp + fn), 0 when nothing was expected.
    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f_score(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MetricsReport {
    per_class: [Counts; RelationLabel::COUNT],
}

impl MetricsReport {
    pub fn class(&self, label: RelationLabel) -> Counts {
        self.per_class[label.index()]
    }

    /// Counts pooled over every class.
    pub fn overall(&self) -> Counts {
        let mut c = Counts::default();
        for k in &self.per_class {
            c.add(*k);
        }
        c
    }

    pub fn micro_f(&self) -> f64 {
        self.overall().f_score()
    }

    pub fn merge(&mut self, other: &MetricsReport) {
        for (a, b) in self.per_class.iter_mut().zip(&other.per_class) {
            a.add(*b);
        }
    }

    /// Rows of (name, counts) in class order followed by `Overall`.
    pub fn rows(&self) -> Vec<(&'static str, Counts)> {
        let mut rows: Vec<_> = RelationLabel::ALL.iter().map(|&l| (l.name(), self.class(l))).collect();
        rows.push(("Overall", self.overall()));
        rows
    }

    /// Aligned plain-text table with three-decimal scores.
    pub fn report_table(&self) -> String {
        let width = RelationLabel::ALL.iter().map(|l| l.name().len()).max().unwrap_or(0).max(7);
        let mut out = format!(
            "{:<width$}  {:>6}  {:>6}  {:>7}  {:>5}  {:>5}  {:>5}\n",
            "Class", "Prec.", "Recall", "F-score", "TP", "FP", "FN"
        );
        for (name, c) in self.rows() {
            out.push_str(&format!(
                "{:<width$}  {:>6.3}  {:>6.3}  {:>7.3}  {:>5}  {:>5}  {:>5}\n",
                name,
                c.precision(),
                c.recall(),
                c.f_score(),
                c.tp,
                c.fp,
                c.fn_
            ));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,tp,fp,fn,precision,recall,f_score\n");
        for (name, c) in self.rows() {
            out.push_str(&format!(
                "{name},{},{},{},{:.6},{:.6},{:.6}\n",
                c.tp,
                c.fp,
                c.fn_,
                c.precision(),
                c.recall(),
                c.f_score()
            ));
        }
        out
    }
}

/// Counts for one document: a predicted edge is correct iff the same
/// `(head, tail, label)` triple is in `gold`.
pub fn score_graph(gold: &[RelationInstance], predicted: &RelationGraph) -> MetricsReport {
    let gold: HashSet<RelationInstance> = gold.iter().copied().collect();
    let predicted: HashSet<RelationInstance> = predicted.to_relations().into_iter().collect();
    let mut report = MetricsReport::default();
    for r in &predicted {
        let c = &mut report.per_class[r.label.index()];
        if gold.contains(r) {
            c.tp += 1;
        } else {
            c.fp += 1;
        }
    }
    for g in gold.difference(&predicted) {
        report.per_class[g.label.index()].fn_ += 1;
    }
    report
}

/// Pools counts over a split. Every gold document needs exactly one
/// prediction with the same id, and vice versa.
pub fn score(gold: &[Document], predicted: &[(String, RelationGraph)]) -> Result<MetricsReport> {
    let mut by_id: BTreeMap<&str, &RelationGraph> = BTreeMap::new();
    for (id, g) in predicted {
        if by_id.insert(id.as_str(), g).is_some() {
            return Err(Error::Data(format!("duplicate prediction for document `{id}`")));
        }
    }
    if by_id.len() != gold.len() {
        return Err(Error::Data(format!(
            "{} predicted documents for {} gold documents",
            by_id.len(),
            gold.len()
        )));
    }
    let mut report = MetricsReport::default();
    for doc in gold {
        let g = by_id
            .get(doc.doc_id.as_str())
            .ok_or_else(|| Error::Data(format!("no prediction for document `{}`", doc.doc_id)))?;
        if g.n_nodes() != doc.entities.len() {
            return Err(Error::Data(format!(
                "prediction for `{}` has {} nodes, document has {} entities",
                doc.doc_id,
                g.n_nodes(),
                doc.entities.len()
            )));
        }
        report.merge(&score_graph(&doc.relations, g));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(head: usize, tail: usize, label: RelationLabel) -> RelationInstance {
        RelationInstance { head, tail, label }
    }

    #[test]
    fn identical_predictions_score_one() {
        let gold = [rel(0, 1, RelationLabel::NextOperation), rel(2, 1, RelationLabel::RecipePrecursor)];
        let g = RelationGraph::from_relations(3, &gold).unwrap();
        let r = score_graph(&gold, &g);
        assert_eq!(r.micro_f(), 1.0);
        assert_eq!(r.class(RelationLabel::NextOperation).f_score(), 1.0);
    }

    #[test]
    fn empty_predictions_score_zero() {
        let gold = [rel(0, 1, RelationLabel::NextOperation)];
        let r = score_graph(&gold, &RelationGraph::empty(3));
        let o = r.overall();
        assert_eq!((o.precision(), o.recall(), o.f_score()), (0.0, 0.0, 0.0));
        assert_eq!(o.fn_, 1);
    }

    #[test]
    fn flipped_direction_is_a_false_positive_and_a_miss() {
        let gold = [rel(0, 1, RelationLabel::NextOperation)];
        let g = RelationGraph::from_relations(2, &[rel(1, 0, RelationLabel::NextOperation)]).unwrap();
        let c = score_graph(&gold, &g).overall();
        assert_eq!((c.tp, c.fp, c.fn_), (0, 1, 1));
    }

    #[test]
    fn absent_class_row_is_zero() {
        let r = MetricsReport::default();
        let table = r.report_table();
        let line = table.lines().find(|l| l.starts_with("Recipe_Target")).unwrap();
        assert!(line.contains("0.000"));
        assert_eq!(table.lines().count(), 18);
        assert!(table.lines().last().unwrap().starts_with("Overall"));
        assert_eq!(r.to_csv().lines().count(), 18);
    }

    #[test]
    fn score_checks_document_ids() {
        let d = Document {
            doc_id: "a".into(),
            text: String::new(),
            entities: vec![],
            relations: vec![],
            sentences: vec![],
        };
        assert!(score(std::slice::from_ref(&d), &[("b".into(), RelationGraph::empty(0))]).is_err());
        assert!(score(std::slice::from_ref(&d), &[]).is_err());
        assert!(score(std::slice::from_ref(&d), &[("a".into(), RelationGraph::empty(0))]).is_ok());
    }
}
