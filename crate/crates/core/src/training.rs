//! Maximum-likelihood training of the edge classifier.
//!
//! Each document is split into views, one per editing bucket. A view's input
//! graph is what the editor would see when reaching that bucket: the initial
//! graph, with the pairs of earlier buckets overwritten by gold classes
//! (teacher forcing) or by the model's own decisions (self exposure). The
//! targets are the gold classes of the bucket's pairs, so every ordered pair
//! is supervised exactly once.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::editor::{edit_document, edit_graph, initial_graph, schedule_for, EditOrder, EditSettings, InitialGraphSource};
use crate::metrics::{score, MetricsReport};
use crate::model::{nll_loss, EdgeModel, EdgeNet};
use crate::numeric::{AdamConfig, ParamStore, Tape, Var};
use crate::relgraph::{EditSchedule, EdgeClass, Pair, RelationGraph};
use crate::rules::RuleExtractor;
use crate::{Error, Result};

/// What earlier buckets look like in a training view.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Exposure {
    /// Gold classes on all earlier-bucket pairs.
    #[default]
    Gold,
    /// The current model's decisions on earlier buckets (no gradient).
    SelfExposure,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub init: InitialGraphSource,
    pub exposure: Exposure,
    pub order: EditOrder,
    pub d_max: usize,
    pub shuffle: bool,
    /// Report a checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            learning_rate: 0.001,
            seed: 0,
            init: InitialGraphSource::Rule,
            exposure: Exposure::Gold,
            order: EditOrder::CloseFirst,
            d_max: 4,
            shuffle: true,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn edit_settings(&self) -> EditSettings {
        EditSettings {
            init: self.init,
            order: self.order,
            d_max: self.d_max,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingView {
    pub input: RelationGraph,
    pub pairs: Vec<Pair>,
    pub targets: Vec<EdgeClass>,
}

fn check_sizes(doc: &Document, initial: &RelationGraph) -> Result<RelationGraph> {
    if initial.n_nodes() != doc.entities.len() {
        return Err(Error::Data(format!(
            "{}: initial graph has {} nodes for {} entities",
            doc.doc_id,
            initial.n_nodes(),
            doc.entities.len()
        )));
    }
    RelationGraph::from_document(doc)
}

/// Teacher-forced views: bucket `b` sees gold classes on buckets `< b` and
/// the initial graph elsewhere.
pub fn build_training_views(doc: &Document, initial: &RelationGraph, schedule: &EditSchedule) -> Result<Vec<TrainingView>> {
    let gold = check_sizes(doc, initial)?;
    let mut input = initial.clone();
    let mut views = Vec::with_capacity(schedule.len());
    for bucket in &schedule.buckets {
        let targets = bucket.pairs.iter().map(|&(i, j)| gold.class(i, j)).collect();
        views.push(TrainingView {
            input: input.clone(),
            pairs: bucket.pairs.clone(),
            targets,
        });
        for &(i, j) in &bucket.pairs {
            input.set(i, j, gold.class(i, j))?;
        }
    }
    Ok(views)
}

/// Views whose inputs follow the model's own edits of earlier buckets.
pub fn self_exposure_views(
    model: &EdgeModel,
    doc: &Document,
    initial: &RelationGraph,
    schedule: &EditSchedule,
) -> Result<Vec<TrainingView>> {
    let gold = check_sizes(doc, initial)?;
    let (_, trace) = edit_graph(model, doc, initial, schedule)?;
    let mut input = initial.clone();
    let mut views = Vec::with_capacity(schedule.len());
    let mut records = trace.records.iter().peekable();
    for (round, bucket) in schedule.buckets.iter().enumerate() {
        let targets = bucket.pairs.iter().map(|&(i, j)| gold.class(i, j)).collect();
        views.push(TrainingView {
            input: input.clone(),
            pairs: bucket.pairs.clone(),
            targets,
        });
        while let Some(r) = records.next_if(|r| r.round == round) {
            input.set(r.head, r.tail, r.after)?;
        }
    }
    Ok(views)
}

/// Summed NLL over all views of one document, and the number of pairs.
pub fn document_loss(
    net: &EdgeNet,
    params: &ParamStore,
    tape: &mut Tape,
    doc: &Document,
    views: &[TrainingView],
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(Var, usize)> {
    let nodes = net.encode_nodes(params, tape, doc)?;
    let mut total: Option<Var> = None;
    let mut count = 0;
    for v in views.iter().filter(|v| !v.pairs.is_empty()) {
        let logits = net.pair_logits(params, tape, nodes, &v.input, &v.pairs, dropout_rng.as_deref_mut())?;
        let loss = nll_loss(tape, logits, &v.targets)?;
        total = Some(match total {
            Some(t) => tape.add(t, loss)?,
            None => loss,
        });
        count += v.pairs.len();
    }
    match total {
        Some(t) => Ok((t, count)),
        None => Err(Error::Data(format!("{}: no entity pairs to train on", doc.doc_id))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean per-pair NLL over training documents.
    pub train_nll: f64,
    pub dev_micro_f: Option<f64>,
    pub dev_nll: Option<f64>,
    pub seconds: f64,
}

/// CSV with columns epoch, train_nll, dev_micro_f, seconds.
pub fn log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,train_nll,dev_micro_f,seconds\n");
    for e in log {
        let dev = e.dev_micro_f.map_or(String::new(), |f| format!("{f:.6}"));
        out.push_str(&format!("{},{:.6},{},{:.3}\n", e.epoch, e.train_nll, dev, e.seconds));
    }
    out
}

pub struct TrainOutcome {
    /// Model from the epoch with the best dev micro-F (ties: lower dev loss);
    /// the last epoch when there is no dev split.
    pub best: EdgeModel,
    pub best_epoch: usize,
    pub last: EdgeModel,
    pub log: Vec<EpochLog>,
}

/// Edits every document and scores the results.
pub fn evaluate(
    model: &EdgeModel,
    docs: &[Document],
    settings: &EditSettings,
    rules: Option<&RuleExtractor>,
) -> Result<MetricsReport> {
    let mut predicted = Vec::with_capacity(docs.len());
    for d in docs {
        let (g, _) = edit_document(model, d, settings, rules)?;
        predicted.push((d.doc_id.clone(), g));
    }
    score(docs, &predicted)
}

/// Mean per-pair NLL under teacher-forced views, without dropout.
pub fn mean_loss(model: &EdgeModel, docs: &[Document], settings: &EditSettings, rules: Option<&RuleExtractor>) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0;
    for d in docs.iter().filter(|d| d.entities.len() > 1) {
        let initial = initial_graph(d, settings.init, rules)?;
        let schedule = schedule_for(d, settings.d_max, settings.order)?;
        let views = build_training_views(d, &initial, &schedule)?;
        let mut tape = Tape::new();
        let (loss, pairs) = document_loss(&model.net, &model.params, &mut tape, d, &views, None)?;
        sum += tape.value(loss).item() / pairs as f64;
        n += 1;
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Trains from freshly initialized weights. `on_checkpoint` is called every
/// `checkpoint_every` epochs with the current model.
pub fn train(
    net: EdgeNet,
    train_docs: &[Document],
    dev_docs: &[Document],
    config: &TrainConfig,
    rules: Option<&RuleExtractor>,
    mut on_checkpoint: impl FnMut(&EpochLog, &EdgeModel) -> Result<()>,
) -> Result<TrainOutcome> {
    if config.epochs == 0 {
        return Err(Error::Data("training needs at least one epoch".into()));
    }
    let docs: Vec<&Document> = train_docs.iter().filter(|d| d.entities.len() > 1).collect();
    if docs.is_empty() {
        return Err(Error::Data("the training split has no document with two or more entities".into()));
    }
    let settings = config.edit_settings();
    // the initial graph and schedule of a document never change
    let prepared: Vec<(RelationGraph, EditSchedule)> = docs
        .iter()
        .map(|d| Ok((initial_graph(d, settings.init, rules)?, schedule_for(d, settings.d_max, settings.order)?)))
        .collect::<Result<_>>()?;

    let mut model = EdgeModel::new(net, config.seed)?;
    let adam = AdamConfig {
        lr: config.learning_rate,
        ..AdamConfig::default()
    };
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(2));
    let mut order: Vec<usize> = (0..docs.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, f64, usize, ParamStore)> = None;

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        if config.shuffle {
            order.shuffle(&mut order_rng);
        }
        let mut epoch_loss = 0.0;
        for &k in &order {
            let (doc, (initial, schedule)) = (docs[k], &prepared[k]);
            let views = match config.exposure {
                Exposure::Gold => build_training_views(doc, initial, schedule)?,
                Exposure::SelfExposure => self_exposure_views(&model, doc, initial, schedule)?,
            };
            let mut tape = Tape::new();
            let (sum, pairs) = document_loss(&model.net, &model.params, &mut tape, doc, &views, Some(&mut dropout_rng))?;
            let loss = tape.scale(sum, 1.0 / pairs as f64);
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss {value} on document `{}` in epoch {epoch}",
                    doc.doc_id
                )));
            }
            epoch_loss += value;
            let grads = tape.backward(loss)?;
            model.params.accumulate(&tape, &grads);
            model.params.adam_step(&adam)?;
        }
        let (dev_micro_f, dev_nll) = if dev_docs.is_empty() {
            (None, None)
        } else {
            let f = evaluate(&model, dev_docs, &settings, rules)?.micro_f();
            (Some(f), Some(mean_loss(&model, dev_docs, &settings, rules)?))
        };
        let entry = EpochLog {
            epoch,
            train_nll: epoch_loss / docs.len() as f64,
            dev_micro_f,
            dev_nll,
            seconds: started.elapsed().as_secs_f64(),
        };
        if let (Some(f), Some(l)) = (dev_micro_f, dev_nll) {
            let better = best.as_ref().is_none_or(|(bf, bl, _, _)| f > *bf || (f == *bf && l < *bl));
            if better {
                best = Some((f, l, epoch, model.params.clone()));
            }
        }
        if config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0 {
            on_checkpoint(&entry, &model)?;
        }
        log.push(entry);
    }

    let (best_model, best_epoch) = match best {
        Some((_, _, epoch, params)) => (
            EdgeModel {
                net: model.net.clone(),
                params,
            },
            epoch,
        ),
        None => (model.clone(), config.epochs),
    };
    Ok(TrainOutcome {
        best: best_model,
        best_epoch,
        last: model,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{EntityMention, RelationInstance};
    use crate::relgraph::{build_schedule, RelationLabel};

    fn doc(n: usize, relations: Vec<RelationInstance>) -> Document {
        let entities = (0..n)
            .map(|k| EntityMention {
                id: format!("T{}", k + 1),
                label: "Operation".into(),
                fragments: vec![(2 * k, 2 * k + 1)],
                surface: "x".into(),
            })
            .collect();
        Document {
            doc_id: "t".into(),
            text: "x ".repeat(n),
            entities,
            relations,
            sentences: vec![(0, 2 * n)],
        }
    }

    fn chain(n: usize) -> Vec<RelationInstance> {
        (0..n - 1)
            .map(|i| RelationInstance {
                head: i,
                tail: i + 1,
                label: RelationLabel::NextOperation,
            })
            .collect()
    }

    #[test]
    fn first_view_sees_the_initial_graph() {
        let d = doc(5, chain(5));
        let initial = RelationGraph::from_relations(
            5,
            &[RelationInstance {
                head: 4,
                tail: 0,
                label: RelationLabel::CorefOf,
            }],
        )
        .unwrap();
        let s = build_schedule(5, 3).unwrap();
        let views = build_training_views(&d, &initial, &s).unwrap();
        assert_eq!(views.len(), 3);
        assert_eq!(views[0].input, initial);
        // last view: every closer pair carries gold
        let gold = RelationGraph::from_document(&d).unwrap();
        for &(i, j) in s.buckets[0].pairs.iter().chain(&s.buckets[1].pairs) {
            assert_eq!(views[2].input.class(i, j), gold.class(i, j));
        }
        assert_eq!(views[2].input.class(4, 0), EdgeClass::Relation(RelationLabel::CorefOf));
        let targets: usize = views.iter().map(|v| v.targets.len()).sum();
        assert_eq!(targets, 20);
    }

    #[test]
    fn log_has_the_expected_columns() {
        let log = [EpochLog {
            epoch: 1,
            train_nll: 0.5,
            dev_micro_f: None,
            dev_nll: None,
            seconds: 0.25,
        }];
        let csv = log_csv(&log);
        assert_eq!(csv.lines().next().unwrap(), "epoch,train_nll,dev_micro_f,seconds");
        assert_eq!(csv.lines().nth(1).unwrap(), "1,0.500000,,0.250");
    }

    #[test]
    fn empty_training_split_is_an_error() {
        let net = EdgeNet::new(Default::default(), crate::model::Vocab::from_tokens(std::iter::empty())).unwrap();
        let cfg = TrainConfig {
            init: InitialGraphSource::Empty,
            ..TrainConfig::default()
        };
        assert!(train(net, &[doc(1, vec![])], &[], &cfg, None, |_, _| Ok(())).is_err());
    }
}
