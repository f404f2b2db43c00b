#![allow(dead_code)]

use std::path::PathBuf;

use edgeedit::corpus::{parse_brat, Document, RelationInstance};
use edgeedit::model::ModelConfig;
use edgeedit::relgraph::RelationLabel;

/// Builds a document whose text is the entity surfaces joined by spaces,
/// followed by `tail` words that are not entities.
pub fn doc_from(doc_id: &str, entities: &[(&str, &str)], relations: &[(usize, usize, RelationLabel)]) -> Document {
    let mut text = String::new();
    let mut ann = String::new();
    for (k, (surface, label)) in entities.iter().enumerate() {
        if !text.is_empty() {
            text.push(' ');
        }
        let start = text.chars().count();
        text.push_str(surface);
        let end = text.chars().count();
        ann.push_str(&format!("T{}\t{label} {start} {end}\t{surface}\n", k + 1));
    }
    text.push_str(" .");
    for (k, &(h, t, label)) in relations.iter().enumerate() {
        ann.push_str(&format!("R{}\t{} Arg1:T{} Arg2:T{}\n", k + 1, label.name(), h + 1, t + 1));
    }
    let (doc, _) = parse_brat(doc_id, &text, &ann).expect("synthetic document parses");
    doc
}

/// Six entities with a few relations of different classes.
pub fn six_node_doc() -> Document {
    use RelationLabel::*;
    doc_from(
        "six",
        &[
            ("mixed", "Operation"),
            ("SrCO3", "Material"),
            ("TiO2", "Material"),
            ("heated", "Operation"),
            ("900", "Number"),
            ("°C", "Condition-Unit"),
        ],
        &[
            (0, 3, NextOperation),
            (1, 0, RecipePrecursor),
            (2, 0, RecipePrecursor),
            (4, 5, NumberOf),
            (5, 3, ConditionOf),
        ],
    )
}

pub fn gold(doc: &Document) -> Vec<RelationInstance> {
    doc.relations.clone()
}

/// A model small enough to train in seconds.
pub fn small_config() -> ModelConfig {
    ModelConfig {
        token_dim: 8,
        label_dim: 4,
        min_token_freq: 1,
        hidden_dim: 12,
        gcn_layers: 2,
        fc_out_layers: 2,
        epochs: 30,
        learning_rate: 0.01,
        ..ModelConfig::default()
    }
}

pub fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data")
}
