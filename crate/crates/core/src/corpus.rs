//! brat standoff documents, sentence spans, split manifests and corpus counts.
//!
//! All offsets are character (code point) offsets into the document text, as
//! in the `.ann` files.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::relgraph::RelationLabel;
use crate::{Error, Result};

/// Entity labels used by the rule system and the test fixtures.
pub mod labels {
    pub const OPERATION: &str = "Operation";
    pub const MATERIAL: &str = "Material";
    pub const NONRECIPE_MATERIAL: &str = "Nonrecipe-Material";
    pub const NUMBER: &str = "Number";
    pub const AMOUNT_UNIT: &str = "Amount-Unit";
    pub const AMOUNT_MISC: &str = "Amount-Misc";
    pub const CONDITION_UNIT: &str = "Condition-Unit";
    pub const CONDITION_MISC: &str = "Condition-Misc";
    pub const CONDITION_TYPE: &str = "Condition-Type";
    pub const PROPERTY_UNIT: &str = "Property-Unit";
    pub const PROPERTY_MISC: &str = "Property-Misc";
    pub const PROPERTY_TYPE: &str = "Property-Type";
    pub const MATERIAL_DESCRIPTOR: &str = "Material-Descriptor";
    pub const APPARATUS_DESCRIPTOR: &str = "Apparatus-Descriptor";
    pub const SYNTHESIS_APPARATUS: &str = "Synthesis-Apparatus";
    pub const CHARACTERIZATION_APPARATUS: &str = "Characterization-Apparatus";
    pub const APPARATUS_UNIT: &str = "Apparatus-Unit";
    pub const APPARATUS_PROPERTY_TYPE: &str = "Apparatus-Property-Type";
    pub const BRAND: &str = "Brand";
    pub const META: &str = "Meta";
    pub const REFERENCE: &str = "Reference";

    /// Every entity label of the annotation scheme.
    pub const ALL: [&str; 21] = [
        OPERATION,
        MATERIAL,
        NONRECIPE_MATERIAL,
        NUMBER,
        AMOUNT_UNIT,
        AMOUNT_MISC,
        CONDITION_UNIT,
        CONDITION_MISC,
        CONDITION_TYPE,
        PROPERTY_UNIT,
        PROPERTY_MISC,
        PROPERTY_TYPE,
        MATERIAL_DESCRIPTOR,
        APPARATUS_DESCRIPTOR,
        SYNTHESIS_APPARATUS,
        CHARACTERIZATION_APPARATUS,
        APPARATUS_UNIT,
        APPARATUS_PROPERTY_TYPE,
        BRAND,
        META,
        REFERENCE,
    ];
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityMention {
    pub id: String,
    pub label: String,
    /// Sorted, non-overlapping `(start, end)` character spans.
    pub fragments: Vec<(usize, usize)>,
    /// Text under the fragments, joined by single spaces.
    pub surface: String,
}

impl EntityMention {
    /// Start of the first fragment; all ordering and distance logic keys on it.
    pub fn start(&self) -> usize {
        self.fragments[0].0
    }

    pub fn end(&self) -> usize {
        self.fragments[self.fragments.len() - 1].1
    }

    fn order_key(&self) -> (usize, usize) {
        (self.fragments[0].0, self.fragments[0].1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RelationInstance {
    pub head: usize,
    pub tail: usize,
    pub label: RelationLabel,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub text: String,
    /// Entities in appearance order.
    pub entities: Vec<EntityMention>,
    pub relations: Vec<RelationInstance>,
    pub sentences: Vec<(usize, usize)>,
}

/// Lines that parsed cleanly but were dropped.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParseReport {
    /// Event, attribute, note, equivalence and comment lines.
    pub skipped_lines: usize,
    /// Relations repeating an ordered pair that already has a label.
    pub duplicate_relations: usize,
    /// Relations whose two arguments are the same entity.
    pub self_relations: usize,
}

impl ParseReport {
    pub fn warnings(&self) -> usize {
        self.skipped_lines + self.duplicate_relations + self.self_relations
    }
}

impl Document {
    /// Index of the sentence containing each entity's first character.
    pub fn entity_sentences(&self) -> Vec<usize> {
        self.entities
            .iter()
            .map(|e| sentence_index(&self.sentences, e.start()))
            .collect()
    }

    /// brat standoff lines reproducing this document's annotations.
    pub fn to_ann(&self) -> String {
        let mut out = String::new();
        for e in &self.entities {
            let offsets: Vec<String> = e.fragments.iter().map(|(s, t)| format!("{s} {t}")).collect();
            let surface = e.surface.replace(['\n', '\r', '\t'], " ");
            out.push_str(&format!("{}\t{} {}\t{}\n", e.id, e.label, offsets.join(";"), surface));
        }
        for (k, r) in self.relations.iter().enumerate() {
            out.push_str(&format!(
                "R{}\t{} Arg1:{} Arg2:{}\n",
                k + 1,
                r.label,
                self.entities[r.head].id,
                self.entities[r.tail].id
            ));
        }
        out
    }
}

fn sentence_index(sentences: &[(usize, usize)], pos: usize) -> usize {
    match sentences.partition_point(|&(s, _)| s <= pos) {
        0 => 0,
        k => k - 1,
    }
}

fn annotation_number(id: &str) -> Option<u64> {
    id.get(1..).and_then(|s| s.parse().ok())
}

fn compare_ids(a: &str, b: &str) -> Ordering {
    match (annotation_number(a), annotation_number(b)) {
        (Some(x), Some(y)) => x.cmp(&y).then_with(|| a.cmp(b)),
        _ => a.cmp(b),
    }
}

/// Parses one brat document with the default [`Segmenter`].
pub fn parse_brat(doc_id: &str, text: &str, ann: &str) -> Result<(Document, ParseReport)> {
    parse_brat_with(doc_id, text, ann, &Segmenter::default())
}

pub fn parse_brat_with(
    doc_id: &str,
    text: &str,
    ann: &str,
    segmenter: &Segmenter,
) -> Result<(Document, ParseReport)> {
    let chars: Vec<char> = text.chars().collect();
    let err = |line: usize, msg: String| Error::Parse {
        doc: doc_id.to_string(),
        line,
        msg,
    };
    let mut report = ParseReport::default();
    let mut entities = Vec::new();
    // (line, label, arg1, arg2)
    let mut raw_relations: Vec<(usize, RelationLabel, String, String)> = Vec::new();

    for (k, raw) in ann.lines().enumerate() {
        let line_no = k + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let mut cols = line.split('\t');
        let id = cols.next().unwrap_or_default();
        let body = cols.next().unwrap_or_default();
        match id.chars().next() {
            Some('T') => {
                let (label, offsets) = body
                    .split_once(' ')
                    .ok_or_else(|| err(line_no, format!("entity `{id}` has no offsets")))?;
                let mut fragments = Vec::new();
                for frag in offsets.split(';') {
                    let mut nums = frag.split_whitespace();
                    let (Some(s), Some(t), None) = (nums.next(), nums.next(), nums.next()) else {
                        return Err(err(line_no, format!("malformed offsets `{offsets}`")));
                    };
                    let s: usize = s.parse().map_err(|_| err(line_no, format!("malformed offset `{s}`")))?;
                    let t: usize = t.parse().map_err(|_| err(line_no, format!("malformed offset `{t}`")))?;
                    if s >= t {
                        return Err(err(line_no, format!("empty or reversed span {s}..{t}")));
                    }
                    if t > chars.len() {
                        return Err(err(
                            line_no,
                            format!("span {s}..{t} exceeds text length {}", chars.len()),
                        ));
                    }
                    fragments.push((s, t));
                }
                fragments.sort_unstable();
                if fragments.windows(2).any(|w| w[1].0 < w[0].1) {
                    return Err(err(line_no, format!("overlapping fragments `{offsets}`")));
                }
                let surface = fragments
                    .iter()
                    .map(|&(s, t)| chars[s..t].iter().collect::<String>())
                    .collect::<Vec<_>>()
                    .join(" ");
                entities.push(EntityMention {
                    id: id.to_string(),
                    label: label.to_string(),
                    fragments,
                    surface,
                });
            }
            Some('R') => {
                let mut parts = body.split_whitespace();
                let label = parts
                    .next()
                    .ok_or_else(|| err(line_no, format!("relation `{id}` has no label")))?;
                let label: RelationLabel = label.parse().map_err(|e: Error| err(line_no, e.to_string()))?;
                let mut arg1 = None;
                let mut arg2 = None;
                for p in parts {
                    if let Some(a) = p.strip_prefix("Arg1:") {
                        arg1 = Some(a.to_string());
                    } else if let Some(a) = p.strip_prefix("Arg2:") {
                        arg2 = Some(a.to_string());
                    }
                }
                let (Some(a1), Some(a2)) = (arg1, arg2) else {
                    return Err(err(line_no, format!("relation `{id}` needs Arg1 and Arg2")));
                };
                raw_relations.push((line_no, label, a1, a2));
            }
            _ => report.skipped_lines += 1,
        }
    }

    entities.sort_by(|a, b| a.order_key().cmp(&b.order_key()).then_with(|| compare_ids(&a.id, &b.id)));
    let mut by_id = BTreeMap::new();
    for (i, e) in entities.iter().enumerate() {
        if by_id.insert(e.id.as_str(), i).is_some() {
            return Err(Error::Parse {
                doc: doc_id.to_string(),
                line: 0,
                msg: format!("duplicate entity id `{}`", e.id),
            });
        }
    }

    let mut relations = Vec::with_capacity(raw_relations.len());
    let mut labelled = std::collections::BTreeSet::new();
    for (line_no, label, a1, a2) in raw_relations {
        let head = *by_id
            .get(a1.as_str())
            .ok_or_else(|| err(line_no, format!("dangling reference Arg1:{a1}")))?;
        let tail = *by_id
            .get(a2.as_str())
            .ok_or_else(|| err(line_no, format!("dangling reference Arg2:{a2}")))?;
        if head == tail {
            report.self_relations += 1;
            continue;
        }
        if !labelled.insert((head, tail)) {
            report.duplicate_relations += 1;
            continue;
        }
        relations.push(RelationInstance { head, tail, label });
    }

    let sentences = segmenter.segment(text);
    Ok((
        Document {
            doc_id: doc_id.to_string(),
            text: text.to_string(),
            entities,
            relations,
            sentences,
        },
        report,
    ))
}

/// Rule-based sentence splitter.
///
/// A boundary falls after `.`, `?` or `!` when whitespace follows and the next
/// non-whitespace character is an uppercase letter or a digit, unless the word
/// ending in `.` is a listed abbreviation.
#[derive(Clone, Debug)]
pub struct Segmenter {
    abbreviations: Vec<String>,
}

impl Default for Segmenter {
    fn default() -> Self {
        Segmenter::new([
            "al", "approx", "ca", "cf", "dr", "e.g", "eq", "eqs", "fig", "figs", "i.e", "no", "nos", "prof",
            "ref", "refs", "resp", "vol", "vs", "wt",
        ])
    }
}

impl Segmenter {
    pub fn new<I, S>(abbreviations: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Segmenter {
            abbreviations: abbreviations.into_iter().map(|s| s.as_ref().to_lowercase()).collect(),
        }
    }

    /// Sentence spans as `(start, end)` character offsets. Spans are disjoint
    /// and sorted, start at non-whitespace, and the last one ends at the end
    /// of the text.
    pub fn segment(&self, text: &str) -> Vec<(usize, usize)> {
        let chars: Vec<char> = text.chars().collect();
        let n = chars.len();
        let first = chars.iter().position(|c| !c.is_whitespace());
        let Some(mut start) = first else {
            return vec![(0, n)];
        };
        let mut spans = Vec::new();
        let mut i = start;
        while i < n {
            let c = chars[i];
            if matches!(c, '.' | '?' | '!') && i + 1 < n && chars[i + 1].is_whitespace() {
                let next = (i + 1..n).find(|&k| !chars[k].is_whitespace());
                if let Some(k) = next {
                    let opens = chars[k].is_uppercase() || chars[k].is_ascii_digit();
                    if opens && !(c == '.' && self.is_abbreviation(&chars[start..i])) {
                        spans.push((start, i + 1));
                        start = k;
                        i = k;
                        continue;
                    }
                }
            }
            i += 1;
        }
        spans.push((start, n));
        spans
    }

    fn is_abbreviation(&self, before: &[char]) -> bool {
        let word_start = before
            .iter()
            .rposition(|c| c.is_whitespace() || *c == '(')
            .map_or(0, |p| p + 1);
        let word: String = before[word_start..].iter().collect::<String>().to_lowercase();
        !word.is_empty() && self.abbreviations.iter().any(|a| *a == word)
    }
}

/// Standard corpus splits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!("unknown split `{other}`"))),
        }
    }
}

/// doc_ids per split, read from a `[train]` / `[dev]` / `[test]` sectioned file.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SplitManifest {
    pub splits: BTreeMap<Split, Vec<String>>,
}

impl SplitManifest {
    pub fn parse(content: &str) -> Result<Self> {
        let mut splits: BTreeMap<Split, Vec<String>> = BTreeMap::new();
        let mut current = None;
        for (k, raw) in content.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let split: Split = name.parse().map_err(|e: Error| Error::Parse {
                    doc: "manifest".into(),
                    line: k + 1,
                    msg: e.to_string(),
                })?;
                splits.entry(split).or_default();
                current = Some(split);
                continue;
            }
            let split = current.ok_or_else(|| Error::Parse {
                doc: "manifest".into(),
                line: k + 1,
                msg: format!("doc id `{line}` appears before any [section]"),
            })?;
            splits.entry(split).or_default().push(line.to_string());
        }
        Ok(SplitManifest { splits })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&content)
    }

    pub fn ids(&self, split: Split) -> &[String] {
        self.splits.get(&split).map_or(&[], Vec::as_slice)
    }
}

/// Reads `<dir>/<doc_id>.txt` and `<dir>/<doc_id>.ann`.
pub fn load_document(dir: &Path, doc_id: &str, segmenter: &Segmenter) -> Result<(Document, ParseReport)> {
    let txt_path: PathBuf = dir.join(format!("{doc_id}.txt"));
    let ann_path: PathBuf = dir.join(format!("{doc_id}.ann"));
    let text = fs::read_to_string(&txt_path).map_err(|e| Error::io(&txt_path, e))?;
    let ann = fs::read_to_string(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
    parse_brat_with(doc_id, &text, &ann, segmenter)
}

/// Documents of one corpus, grouped by split in manifest order.
#[derive(Clone, Debug, Default)]
pub struct Corpus {
    pub splits: BTreeMap<Split, Vec<Document>>,
    pub report: ParseReport,
}

impl Corpus {
    pub fn load(dir: &Path, manifest: &SplitManifest, segmenter: &Segmenter) -> Result<Self> {
        let mut corpus = Corpus::default();
        for (&split, ids) in &manifest.splits {
            let mut docs = Vec::with_capacity(ids.len());
            for id in ids {
                let (doc, rep) = load_document(dir, id, segmenter)?;
                corpus.report.skipped_lines += rep.skipped_lines;
                corpus.report.duplicate_relations += rep.duplicate_relations;
                corpus.report.self_relations += rep.self_relations;
                docs.push(doc);
            }
            corpus.splits.insert(split, docs);
        }
        Ok(corpus)
    }

    pub fn split(&self, split: Split) -> &[Document] {
        self.splits.get(&split).map_or(&[], Vec::as_slice)
    }
}

/// Per-class entity and relation counts of one split.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SplitStats {
    pub documents: usize,
    pub entities: BTreeMap<String, usize>,
    pub relations: BTreeMap<RelationLabel, usize>,
}

impl SplitStats {
    pub fn entity(&self, label: &str) -> usize {
        self.entities.get(label).copied().unwrap_or(0)
    }

    pub fn relation(&self, label: RelationLabel) -> usize {
        self.relations.get(&label).copied().unwrap_or(0)
    }
}

pub fn split_stats(docs: &[Document]) -> SplitStats {
    let mut stats = SplitStats {
        documents: docs.len(),
        ..SplitStats::default()
    };
    for doc in docs {
        for e in &doc.entities {
            *stats.entities.entry(e.label.clone()).or_default() += 1;
        }
        for r in &doc.relations {
            *stats.relations.entry(r.label).or_default() += 1;
        }
    }
    stats
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CorpusStats {
    pub splits: BTreeMap<Split, SplitStats>,
}

impl CorpusStats {
    pub fn split(&self, split: Split) -> SplitStats {
        self.splits.get(&split).cloned().unwrap_or_default()
    }

    /// Plain-text tables: entity classes by descending total, then the
    /// sixteen relation classes.
    pub fn to_table(&self) -> String {
        let splits: Vec<Split> = Split::ALL.to_vec();
        let mut labels: BTreeMap<&str, usize> = labels::ALL.iter().map(|&l| (l, 0)).collect();
        for s in self.splits.values() {
            for (l, c) in &s.entities {
                *labels.entry(l.as_str()).or_default() += c;
            }
        }
        let mut rows: Vec<(&str, usize)> = labels.into_iter().collect();
        rows.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));

        let mut out = format!("{:<28}", "Entity class");
        for s in &splits {
            out.push_str(&format!("{:>8}", s.name()));
        }
        out.push('\n');
        for (label, _) in rows {
            out.push_str(&format!("{label:<28}"));
            for s in &splits {
                out.push_str(&format!("{:>8}", self.split(*s).entity(label)));
            }
            out.push('\n');
        }
        out.push('\n');
        out.push_str(&format!("{:<28}", "Relation class"));
        for s in &splits {
            out.push_str(&format!("{:>8}", s.name()));
        }
        out.push('\n');
        for label in RelationLabel::ALL {
            out.push_str(&format!("{:<28}", label.name()));
            for s in &splits {
                out.push_str(&format!("{:>8}", self.split(*s).relation(label)));
            }
            out.push('\n');
        }
        out
    }
}

pub fn corpus_stats(corpus: &Corpus) -> CorpusStats {
    CorpusStats {
        splits: corpus.splits.iter().map(|(s, docs)| (*s, split_stats(docs))).collect(),
    }
}
