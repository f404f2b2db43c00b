//! Deterministic rule-based relation extractor.
//!
//! Edges are decided from entity labels, appearance order, and sentence
//! membership only. Three rule families:
//!
//! * Operation–Operation: consecutive Operations are chained with `Next_Operation`.
//! * Operation–Material: dictionary matches give Solvent/Atmospheric/Participant
//!   edges from the nearest Operation in the sentence; every other Material
//!   becomes a `Recipe_Precursor` of its nearest Operation.
//! * Attribute rules: nearest-entity links for the remaining nine labels.
//!
//! "Nearest" is the smallest appearance-order distance; ties go to the
//! preceding entity.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use crate::corpus::{labels::*, Document};
use crate::relgraph::{RelationGraph, RelationLabel};
use crate::{Error, Result};

/// Case-folds and collapses internal whitespace.
pub fn normalize_surface(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Normalized surface forms for one dictionary label.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Dictionary {
    entries: BTreeSet<String>,
}

impl Dictionary {
    pub fn new<I, S>(entries: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Dictionary {
            entries: entries
                .into_iter()
                .map(|e| normalize_surface(e.as_ref()))
                .filter(|e| !e.is_empty())
                .collect(),
        }
    }

    /// One surface form per line; blank lines and `#` comment lines ignored.
    pub fn parse(content: &str) -> Self {
        Self::new(
            content
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#')),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::parse(&content))
    }

    pub fn contains(&self, surface: &str) -> bool {
        match_dictionary(surface, self)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(String::as_str)
    }

    /// File content accepted by [`Dictionary::parse`].
    pub fn to_file_content(&self, header: &str) -> String {
        let mut out = format!("# {header}\n");
        for e in &self.entries {
            out.push_str(e);
            out.push('\n');
        }
        out
    }
}

pub fn match_dictionary(surface: &str, dict: &Dictionary) -> bool {
    dict.entries.contains(&normalize_surface(surface))
}

/// The three Material dictionaries. A surface found in several sets is
/// resolved as solvent, then atmospheric, then participant.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DictionarySet {
    pub solvent: Dictionary,
    pub atmospheric: Dictionary,
    pub participant: Dictionary,
}

pub const DICTIONARY_FILES: [&str; 3] = ["solvent.dict", "atmospheric.dict", "participant.dict"];

impl DictionarySet {
    /// Loads `solvent.dict`, `atmospheric.dict` and `participant.dict` from `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        Ok(DictionarySet {
            solvent: Dictionary::load(&dir.join(DICTIONARY_FILES[0]))?,
            atmospheric: Dictionary::load(&dir.join(DICTIONARY_FILES[1]))?,
            participant: Dictionary::load(&dir.join(DICTIONARY_FILES[2]))?,
        })
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, dict) in DICTIONARY_FILES.iter().zip([&self.solvent, &self.atmospheric, &self.participant]) {
            let path = dir.join(name);
            let content = dict.to_file_content(&format!("{name}: one surface form per line"));
            fs::write(&path, content).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    /// Builds dictionaries from gold Operation–Material edges: a Material
    /// surface goes into the dictionary of the label it most often carries,
    /// if that label is Solvent, Atmospheric or Participant.
    pub fn from_gold(docs: &[Document]) -> Self {
        use RelationLabel::*;
        let mut counts: BTreeMap<String, BTreeMap<RelationLabel, usize>> = BTreeMap::new();
        for doc in docs {
            for r in &doc.relations {
                let material = match r.label {
                    SolventMaterial | AtmosphericMaterial | ParticipantMaterial | RecipeTarget => r.tail,
                    RecipePrecursor => r.head,
                    _ => continue,
                };
                let e = &doc.entities[material];
                if e.label != MATERIAL {
                    continue;
                }
                *counts
                    .entry(normalize_surface(&e.surface))
                    .or_default()
                    .entry(r.label)
                    .or_default() += 1;
            }
        }
        let mut out = DictionarySet::default();
        for (surface, by_label) in counts {
            // ties resolve to the earliest label in class order
            let best = by_label
                .iter()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                .map(|(l, _)| *l);
            let dict = match best {
                Some(SolventMaterial) => &mut out.solvent,
                Some(AtmosphericMaterial) => &mut out.atmospheric,
                Some(ParticipantMaterial) => &mut out.participant,
                _ => continue,
            };
            dict.entries.insert(surface);
        }
        out
    }

    /// Which Operation–Material label a dictionary match gives, if any.
    pub fn classify(&self, surface: &str) -> Option<RelationLabel> {
        if self.solvent.contains(surface) {
            Some(RelationLabel::SolventMaterial)
        } else if self.atmospheric.contains(surface) {
            Some(RelationLabel::AtmosphericMaterial)
        } else if self.participant.contains(surface) {
            Some(RelationLabel::ParticipantMaterial)
        } else {
            None
        }
    }
}

/// Knobs for choices the rule descriptions leave open.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RuleConfig {
    /// Labels whose emitted direction is reversed.
    pub flipped: BTreeSet<RelationLabel>,
    /// Let `Number_Of` also attach Numbers to a following Amount-Unit.
    pub number_of_amount_units: bool,
}

impl Default for RuleConfig {
    fn default() -> Self {
        RuleConfig {
            flipped: BTreeSet::new(),
            number_of_amount_units: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Search {
    /// Closest either way; ties to the preceding entity.
    Nearest,
    /// Closest preceding entity if any, else closest following.
    PreferBefore,
    OnlyAfter,
    OnlyBefore,
}

/// Precomputed per-document view used by all rules.
struct Scope<'a> {
    labels: Vec<&'a str>,
    /// Entity index range `[lo, hi)` of each entity's sentence.
    sentence_range: Vec<(usize, usize)>,
}

impl<'a> Scope<'a> {
    fn new(doc: &'a Document) -> Self {
        let sent = doc.entity_sentences();
        let n = sent.len();
        let mut sentence_range = vec![(0, 0); n];
        let mut lo = 0;
        while lo < n {
            let mut hi = lo + 1;
            while hi < n && sent[hi] == sent[lo] {
                hi += 1;
            }
            for r in &mut sentence_range[lo..hi] {
                *r = (lo, hi);
            }
            lo = hi;
        }
        Scope {
            labels: doc.entities.iter().map(|e| e.label.as_str()).collect(),
            sentence_range,
        }
    }

    fn is(&self, i: usize, targets: &[&str]) -> bool {
        targets.contains(&self.labels[i])
    }

    /// Nearest entity with a label in `targets`, looking only inside the
    /// anchor's sentence when `in_sentence` is set.
    fn find(&self, anchor: usize, targets: &[&str], search: Search, in_sentence: bool) -> Option<usize> {
        let (lo, hi) = if in_sentence {
            self.sentence_range[anchor]
        } else {
            (0, self.labels.len())
        };
        let before = (lo..anchor).rev().find(|&k| self.is(k, targets));
        let after = (anchor + 1..hi).find(|&k| self.is(k, targets));
        match search {
            Search::OnlyBefore => before,
            Search::OnlyAfter => after,
            Search::PreferBefore => before.or(after),
            Search::Nearest => match (before, after) {
                (Some(b), Some(a)) => Some(if anchor - b <= a - anchor { b } else { a }),
                (b, a) => b.or(a),
            },
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct RuleExtractor {
    pub dictionaries: DictionarySet,
    pub config: RuleConfig,
}

impl RuleExtractor {
    pub fn new(dictionaries: DictionarySet) -> Self {
        RuleExtractor {
            dictionaries,
            config: RuleConfig::default(),
        }
    }

    pub fn extract(&self, doc: &Document) -> RelationGraph {
        let mut graph = RelationGraph::empty(doc.entities.len());
        let scope = Scope::new(doc);
        let mut emit = |head: usize, tail: usize, label: RelationLabel| {
            let (h, t) = if self.config.flipped.contains(&label) {
                (tail, head)
            } else {
                (head, tail)
            };
            graph
                .set(h, t, label.into())
                .expect("rule endpoints are distinct in-range entities");
        };
        link_next_operation(&scope, &mut emit);
        link_operation_material(doc, &scope, &self.dictionaries, &mut emit);
        link_attribute_relations(&scope, &self.config, &mut emit);
        graph
    }
}

/// Shorthand for [`RuleExtractor::extract`].
pub fn rule_extract(doc: &Document, dicts: &DictionarySet) -> RelationGraph {
    RuleExtractor::new(dicts.clone()).extract(doc)
}

fn link_next_operation(scope: &Scope, emit: &mut impl FnMut(usize, usize, RelationLabel)) {
    let ops: Vec<usize> = (0..scope.labels.len()).filter(|&i| scope.is(i, &[OPERATION])).collect();
    for w in ops.windows(2) {
        emit(w[0], w[1], RelationLabel::NextOperation);
    }
}

fn link_operation_material(
    doc: &Document,
    scope: &Scope,
    dicts: &DictionarySet,
    emit: &mut impl FnMut(usize, usize, RelationLabel),
) {
    for m in (0..scope.labels.len()).filter(|&i| scope.is(i, &[MATERIAL])) {
        match dicts.classify(&doc.entities[m].surface) {
            Some(label) => {
                if let Some(op) = scope.find(m, &[OPERATION], Search::Nearest, true) {
                    emit(op, m, label);
                }
            }
            None => {
                if let Some(op) = scope.find(m, &[OPERATION], Search::Nearest, false) {
                    emit(m, op, RelationLabel::RecipePrecursor);
                }
            }
        }
    }
}

fn link_attribute_relations(scope: &Scope, config: &RuleConfig, emit: &mut impl FnMut(usize, usize, RelationLabel)) {
    use RelationLabel::*;

    let materials: &[&str] = &[MATERIAL, NONRECIPE_MATERIAL];
    let apparatus: &[&str] = &[SYNTHESIS_APPARATUS, CHARACTERIZATION_APPARATUS];
    let brandable: &[&str] = &[MATERIAL, NONRECIPE_MATERIAL, SYNTHESIS_APPARATUS, CHARACTERIZATION_APPARATUS];
    let number_units: &[&str] = if config.number_of_amount_units {
        &[PROPERTY_UNIT, CONDITION_UNIT, APPARATUS_UNIT, AMOUNT_UNIT]
    } else {
        &[PROPERTY_UNIT, CONDITION_UNIT, APPARATUS_UNIT]
    };

    for i in 0..scope.labels.len() {
        // (targets, search, sentence-scoped, label)
        let rule: Option<(&[&str], Search, bool, RelationLabel)> = match scope.labels[i] {
            PROPERTY_UNIT => Some((&[MATERIAL], Search::Nearest, true, PropertyOf)),
            PROPERTY_MISC => Some((materials, Search::Nearest, true, PropertyOf)),
            CONDITION_UNIT | CONDITION_MISC => Some((&[OPERATION], Search::Nearest, true, ConditionOf)),
            NUMBER => Some((number_units, Search::OnlyAfter, true, NumberOf)),
            AMOUNT_UNIT | AMOUNT_MISC => Some((materials, Search::Nearest, true, AmountOf)),
            MATERIAL_DESCRIPTOR => Some((materials, Search::Nearest, true, DescriptorOf)),
            APPARATUS_DESCRIPTOR => Some((&[SYNTHESIS_APPARATUS], Search::Nearest, true, DescriptorOf)),
            SYNTHESIS_APPARATUS | CHARACTERIZATION_APPARATUS => {
                Some((&[OPERATION], Search::PreferBefore, true, ApparatusOf))
            }
            PROPERTY_TYPE => Some((&[PROPERTY_UNIT], Search::Nearest, true, TypeOf)),
            APPARATUS_PROPERTY_TYPE => Some((&[APPARATUS_UNIT], Search::Nearest, true, TypeOf)),
            CONDITION_TYPE => Some((&[CONDITION_UNIT], Search::OnlyBefore, true, TypeOf)),
            BRAND => Some((brandable, Search::Nearest, true, BrandOf)),
            _ => None,
        };
        if let Some((targets, search, in_sentence, label)) = rule {
            if let Some(t) = scope.find(i, targets, search, in_sentence) {
                emit(i, t, label);
            }
        }
        // Apparatus-Unit carries a second, sentence-unconstrained rule.
        if scope.labels[i] == APPARATUS_UNIT {
            if let Some(t) = scope.find(i, apparatus, Search::Nearest, false) {
                emit(i, t, ApparatusAttrOf);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Document, EntityMention};
    use crate::relgraph::EdgeClass;

    /// Builds a document from `(label, surface)` tokens separated by spaces;
    /// `"."` tokens end a sentence and carry no entity.
    fn doc(tokens: &[(&str, &str)]) -> Document {
        let mut text = String::new();
        let mut entities = Vec::new();
        for (k, (label, surface)) in tokens.iter().enumerate() {
            if !text.is_empty() {
                text.push(' ');
            }
            if *surface == "." {
                text.push_str(". X");
                continue;
            }
            let start = text.chars().count();
            text.push_str(surface);
            let end = text.chars().count();
            entities.push(EntityMention {
                id: format!("T{}", k + 1),
                label: label.to_string(),
                fragments: vec![(start, end)],
                surface: surface.to_string(),
            });
        }
        let sentences = crate::corpus::Segmenter::default().segment(&text);
        Document {
            doc_id: "t".into(),
            text,
            entities,
            relations: vec![],
            sentences,
        }
    }

    fn dicts() -> DictionarySet {
        DictionarySet {
            solvent: Dictionary::new(["ethanol", "water"]),
            atmospheric: Dictionary::new(["air", "H2/Ar"]),
            participant: Dictionary::new(["powders", "air"]),
        }
    }

    fn edges(g: &RelationGraph) -> Vec<(usize, usize, RelationLabel)> {
        g.edges().collect()
    }

    #[test]
    fn dictionary_normalization() {
        let d = Dictionary::new(["h2/ar", "air"]);
        assert!(match_dictionary("H2/Ar", &d));
        assert!(match_dictionary("  air ", &d));
        assert!(!match_dictionary("SrCO3", &d));
        let parsed = Dictionary::parse("# solvents\nEthanol\n\n  distilled   water \n");
        assert_eq!(parsed.iter().collect::<Vec<_>>(), ["distilled water", "ethanol"]);
    }

    #[test]
    fn dictionary_priority_is_solvent_atmospheric_participant() {
        let d = dicts();
        assert_eq!(d.classify("AIR"), Some(RelationLabel::AtmosphericMaterial));
        assert_eq!(d.classify("powders"), Some(RelationLabel::ParticipantMaterial));
        assert_eq!(d.classify("SrCO3"), None);
    }

    #[test]
    fn operations_chain_in_order() {
        let d = doc(&[(OPERATION, "mixed"), (MATERIAL, "SrCO3"), (OPERATION, "fired"), ("", "."), (OPERATION, "ground")]);
        let g = rule_extract(&d, &DictionarySet::default());
        let next: Vec<_> = edges(&g).into_iter().filter(|e| e.2 == RelationLabel::NextOperation).collect();
        assert_eq!(next, vec![(0, 2, RelationLabel::NextOperation), (2, 3, RelationLabel::NextOperation)]);
    }

    #[test]
    fn undictionaried_material_is_precursor_of_nearest_operation() {
        // tie between "mixed" (distance 1 before) and "fired" (1 after): preceding wins
        let d = doc(&[(OPERATION, "mixed"), (MATERIAL, "SrCO3"), (OPERATION, "fired")]);
        let g = rule_extract(&d, &DictionarySet::default());
        assert_eq!(g.class(1, 0), EdgeClass::Relation(RelationLabel::RecipePrecursor));
        assert_eq!(g.class(1, 2), EdgeClass::NoRelation);
    }

    #[test]
    fn precursor_search_crosses_sentences() {
        let d = doc(&[(OPERATION, "mixed"), ("", "."), (MATERIAL, "SrCO3")]);
        let g = rule_extract(&d, &DictionarySet::default());
        assert_eq!(g.class(1, 0), EdgeClass::Relation(RelationLabel::RecipePrecursor));
    }

    #[test]
    fn dictionary_material_links_from_operation_within_sentence() {
        let d = doc(&[(OPERATION, "fired"), (MATERIAL, "air"), ("", "."), (MATERIAL, "water")]);
        let g = rule_extract(&d, &dicts());
        assert_eq!(g.class(0, 1), EdgeClass::Relation(RelationLabel::AtmosphericMaterial));
        // no Operation in the second sentence: nothing at all for "water"
        assert_eq!(g.class(0, 2), EdgeClass::NoRelation);
        assert_eq!(g.class(2, 0), EdgeClass::NoRelation);
        assert_eq!(g.edge_count(), 1);
    }

    #[test]
    fn number_links_forward_only() {
        let d = doc(&[(CONDITION_UNIT, "C"), (NUMBER, "900"), (CONDITION_UNIT, "C"), (NUMBER, "5")]);
        let g = rule_extract(&d, &DictionarySet::default());
        assert_eq!(g.class(1, 2), EdgeClass::Relation(RelationLabel::NumberOf));
        assert_eq!(g.class(3, 2), EdgeClass::NoRelation);
        assert_eq!(g.class(3, 0), EdgeClass::NoRelation);
    }

    #[test]
    fn number_of_amount_unit_is_configurable() {
        let d = doc(&[(NUMBER, "2"), (AMOUNT_UNIT, "g"), (MATERIAL, "SrCO3")]);
        let mut ex = RuleExtractor::default();
        assert_eq!(ex.extract(&d).class(0, 1), EdgeClass::Relation(RelationLabel::NumberOf));
        ex.config.number_of_amount_units = false;
        assert_eq!(ex.extract(&d).class(0, 1), EdgeClass::NoRelation);
    }

    #[test]
    fn apparatus_prefers_preceding_operation() {
        let d = doc(&[(OPERATION, "heated"), (NUMBER, "900"), (CONDITION_UNIT, "C"), (SYNTHESIS_APPARATUS, "furnace"), (OPERATION, "cooled")]);
        let g = rule_extract(&d, &DictionarySet::default());
        assert_eq!(g.class(3, 0), EdgeClass::Relation(RelationLabel::ApparatusOf));
        assert_eq!(g.class(3, 4), EdgeClass::NoRelation);
        // nearest Operation for the Condition-Unit is "heated" at distance 2
        assert_eq!(g.class(2, 0), EdgeClass::Relation(RelationLabel::ConditionOf));
    }

    #[test]
    fn condition_type_looks_backwards() {
        let d = doc(&[(CONDITION_UNIT, "rpm"), (CONDITION_TYPE, "speed"), (CONDITION_UNIT, "C")]);
        let g = rule_extract(&d, &DictionarySet::default());
        assert_eq!(g.class(1, 0), EdgeClass::Relation(RelationLabel::TypeOf));
        assert_eq!(g.class(1, 2), EdgeClass::NoRelation);
    }

    #[test]
    fn apparatus_unit_links_across_sentences() {
        let d = doc(&[(SYNTHESIS_APPARATUS, "autoclave"), ("", "."), (NUMBER, "50"), (APPARATUS_UNIT, "mL")]);
        let g = rule_extract(&d, &DictionarySet::default());
        assert_eq!(g.class(2, 0), EdgeClass::Relation(RelationLabel::ApparatusAttrOf));
        assert_eq!(g.class(1, 2), EdgeClass::Relation(RelationLabel::NumberOf));
    }

    #[test]
    fn attribute_rules() {
        let d = doc(&[
            (BRAND, "Aldrich"),
            (MATERIAL_DESCRIPTOR, "high-purity"),
            (MATERIAL, "SrCO3"),
            (PROPERTY_MISC, "white"),
            (NONRECIPE_MATERIAL, "crucible"),
            (AMOUNT_MISC, "excess"),
            (APPARATUS_DESCRIPTOR, "tube"),
            (SYNTHESIS_APPARATUS, "furnace"),
            (PROPERTY_TYPE, "size"),
            (PROPERTY_UNIT, "nm"),
        ]);
        let g = rule_extract(&d, &DictionarySet::default());
        use RelationLabel::*;
        assert_eq!(g.class(0, 2), BrandOf.into());
        assert_eq!(g.class(1, 2), DescriptorOf.into());
        assert_eq!(g.class(3, 2), PropertyOf.into());
        assert_eq!(g.class(5, 4), AmountOf.into());
        assert_eq!(g.class(6, 7), DescriptorOf.into());
        assert_eq!(g.class(8, 9), TypeOf.into());
        // Property-Unit only links to Material, never Nonrecipe-Material
        assert_eq!(g.class(9, 2), PropertyOf.into());
    }

    #[test]
    fn never_emits_target_or_coref_and_is_deterministic() {
        let d = doc(&[
            (MATERIAL, "SrCO3"),
            (OPERATION, "mixed"),
            (MATERIAL, "powders"),
            (OPERATION, "obtained"),
            (MATERIAL, "SrMoO4"),
        ]);
        let a = rule_extract(&d, &dicts());
        assert_eq!(a, rule_extract(&d, &dicts()));
        assert!(a
            .edges()
            .all(|(_, _, l)| l != RelationLabel::RecipeTarget && l != RelationLabel::CorefOf));
    }

    #[test]
    fn flipped_direction() {
        let d = doc(&[(OPERATION, "fired"), (MATERIAL, "air")]);
        let mut ex = RuleExtractor::new(dicts());
        ex.config.flipped.insert(RelationLabel::AtmosphericMaterial);
        assert_eq!(ex.extract(&d).class(1, 0), RelationLabel::AtmosphericMaterial.into());
    }

    #[test]
    fn gold_dictionaries() {
        let mut d = doc(&[(OPERATION, "dissolved"), (MATERIAL, "Water"), (MATERIAL, "SrCO3"), (MATERIAL, "water")]);
        use crate::corpus::RelationInstance as R;
        d.relations = vec![
            R { head: 0, tail: 1, label: RelationLabel::SolventMaterial },
            R { head: 2, tail: 0, label: RelationLabel::RecipePrecursor },
            R { head: 0, tail: 3, label: RelationLabel::SolventMaterial },
        ];
        let set = DictionarySet::from_gold(&[d]);
        assert_eq!(set.solvent.iter().collect::<Vec<_>>(), ["water"]);
        assert!(set.atmospheric.is_empty());
        assert!(set.participant.is_empty());
    }
}
