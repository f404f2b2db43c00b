mod common;

use edgeedit::corpus::{Document, RelationInstance};
use edgeedit::metrics::{score, Counts};
use edgeedit::relgraph::{RelationGraph, RelationLabel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::doc_from;

/// Random gold relations (one label per ordered pair at most) over `n`
/// placeholder entities.
fn random_doc(rng: &mut ChaCha8Rng, id: usize) -> Document {
    let n = rng.random_range(0..9);
    let names: Vec<String> = (0..n).map(|k| format!("e{k}")).collect();
    let entities: Vec<(&str, &str)> = names.iter().map(|s| (s.as_str(), "Material")).collect();
    let mut relations = Vec::new();
    let mut used = std::collections::HashSet::new();
    if n > 1 {
        for _ in 0..rng.random_range(0..12) {
            let (i, j) = (rng.random_range(0..n), rng.random_range(0..n));
            if i != j && used.insert((i, j)) {
                relations.push((i, j, RelationLabel::ALL[rng.random_range(0..3)]));
            }
        }
    }
    doc_from(&format!("doc{id}"), &entities, &relations)
}

/// A prediction that copies, relabels, drops and invents gold edges.
fn random_prediction(rng: &mut ChaCha8Rng, doc: &Document) -> RelationGraph {
    let n = doc.entities.len();
    let mut g = RelationGraph::empty(n);
    for r in &doc.relations {
        match rng.random_range(0..4) {
            0 | 1 => g.set(r.head, r.tail, r.label.into()).unwrap(),
            2 => g.set(r.head, r.tail, RelationLabel::ALL[rng.random_range(0..3)].into()).unwrap(),
            _ => {}
        }
    }
    if n > 1 {
        for _ in 0..rng.random_range(0..4) {
            let (i, j) = (rng.random_range(0..n), rng.random_range(0..n));
            if i != j {
                g.set(i, j, RelationLabel::ALL[rng.random_range(0..3)].into()).unwrap();
            }
        }
    }
    g
}

/// Counts by exhaustive comparison of triple lists.
fn brute_force(docs: &[Document], predicted: &[(String, RelationGraph)], label: Option<RelationLabel>) -> Counts {
    let keep = |r: &RelationInstance| label.is_none_or(|l| r.label == l);
    let mut c = Counts::default();
    for (doc, (_, g)) in docs.iter().zip(predicted) {
        let pred: Vec<RelationInstance> = g.to_relations();
        for p in pred.iter().filter(|r| keep(r)) {
            if doc.relations.iter().any(|gold| gold == p) {
                c.tp += 1;
            } else {
                c.fp += 1;
            }
        }
        for gold in doc.relations.iter().filter(|r| keep(r)) {
            if !pred.iter().any(|p| p == gold) {
                c.fn_ += 1;
            }
        }
    }
    c
}

fn f_by_formula(c: Counts) -> (f64, f64, f64) {
    let p = if c.tp + c.fp == 0 { 0.0 } else { c.tp as f64 / (c.tp + c.fp) as f64 };
    let r = if c.tp + c.fn_ == 0 { 0.0 } else { c.tp as f64 / (c.tp + c.fn_) as f64 };
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

#[test]
fn score_matches_brute_force_on_random_fixtures() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for fixture in 0..1000 {
        let docs: Vec<Document> = (0..rng.random_range(1..5)).map(|k| random_doc(&mut rng, k)).collect();
        let predicted: Vec<(String, RelationGraph)> =
            docs.iter().map(|d| (d.doc_id.clone(), random_prediction(&mut rng, d))).collect();
        let report = score(&docs, &predicted).unwrap();
        for label in RelationLabel::ALL {
            assert_eq!(report.class(label), brute_force(&docs, &predicted, Some(label)), "fixture {fixture}, {label:?}");
        }
        let overall = brute_force(&docs, &predicted, None);
        assert_eq!(report.overall(), overall, "fixture {fixture}");
        let (p, r, f) = f_by_formula(overall);
        let o = report.overall();
        assert_eq!((o.precision(), o.recall(), o.f_score()), (p, r, f), "fixture {fixture}");
        assert_eq!(report.micro_f(), f);
    }
}

#[test]
fn prediction_order_does_not_matter() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let docs: Vec<Document> = (0..6).map(|k| random_doc(&mut rng, k)).collect();
    let mut predicted: Vec<(String, RelationGraph)> =
        docs.iter().map(|d| (d.doc_id.clone(), random_prediction(&mut rng, d))).collect();
    let a = score(&docs, &predicted).unwrap();
    predicted.reverse();
    assert_eq!(score(&docs, &predicted).unwrap(), a);
}

#[test]
fn counts_are_pooled_not_averaged_over_documents() {
    use RelationLabel::*;
    let ents = [("a", "Operation"), ("b", "Operation"), ("c", "Operation"), ("d", "Operation")];
    // one gold edge, predicted correctly
    let easy = doc_from("easy", &ents[..2], &[(0, 1, NextOperation)]);
    // three gold edges, none predicted
    let hard = doc_from("hard", &ents, &[(0, 1, NextOperation), (1, 2, NextOperation), (2, 3, NextOperation)]);
    let predicted = vec![
        ("easy".to_string(), RelationGraph::from_document(&easy).unwrap()),
        ("hard".to_string(), RelationGraph::empty(4)),
    ];
    let report = score(&[easy, hard], &predicted).unwrap();
    let o = report.overall();
    assert_eq!((o.tp, o.fp, o.fn_), (1, 0, 3));
    // pooled: P = 1, R = 1/4, F = 0.4; the per-document average would be 0.5
    assert!((report.micro_f() - 0.4).abs() < 1e-12);
    assert!((report.micro_f() - 0.5).abs() > 0.05);
}

#[test]
fn overall_pools_classes_instead_of_averaging_them() {
    use RelationLabel::*;
    let ents = [("a", "Operation"), ("b", "Operation"), ("c", "Material"), ("d", "Material")];
    let gold = doc_from("g", &ents, &[(0, 1, NextOperation), (2, 0, RecipePrecursor), (3, 0, RecipePrecursor), (2, 1, RecipePrecursor)]);
    // Next_Operation right; one of three precursors found
    let mut g = RelationGraph::empty(4);
    g.set(0, 1, NextOperation.into()).unwrap();
    g.set(2, 0, RecipePrecursor.into()).unwrap();
    let report = score(std::slice::from_ref(&gold), &[("g".into(), g)]).unwrap();
    let next_f = report.class(NextOperation).f_score();
    let prec_f = report.class(RecipePrecursor).f_score();
    assert_eq!(next_f, 1.0);
    assert!((prec_f - 0.5).abs() < 1e-12);
    // pooled: tp 2, fp 0, fn 2 -> F = 2/3, not the class mean 0.75
    assert!((report.micro_f() - 2.0 / 3.0).abs() < 1e-12);
}

#[test]
fn empty_prediction_scores_zero_everywhere() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let docs: Vec<Document> = (0..5).map(|k| random_doc(&mut rng, k)).collect();
    let predicted: Vec<_> = docs.iter().map(|d| (d.doc_id.clone(), RelationGraph::empty(d.entities.len()))).collect();
    let report = score(&docs, &predicted).unwrap();
    assert_eq!(report.micro_f(), 0.0);
    assert_eq!(report.overall().fn_, docs.iter().map(|d| d.relations.len()).sum::<usize>());
}
