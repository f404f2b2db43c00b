//! The neural edge classifier.
//!
//! Node vectors are max-pooled token embeddings (or precomputed vectors)
//! joined with an entity-label embedding. A relational GCN enriches them with
//! the current graph, and each pair is represented by a bilinear head/tail
//! score, a clipped-distance embedding and an embedding of its current class,
//! then classified by a feed-forward stack into one of the 17 edge classes.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{labels, Document};
use crate::editor::EdgeClassifier;
use crate::numeric::{Init, ParamStore, Tape, Tensor, Var};
use crate::relgraph::{EdgeClass, Pair, RelationGraph, RelationLabel};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    /// Token embeddings trained with the rest of the model.
    #[default]
    LearnedEmbedding,
    /// Frozen per-entity vectors read from a sidecar file.
    PrecomputedFile,
}

/// Shape of the head/tail bilinear map.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BilinearKind {
    /// One score per hidden unit (a `[hidden, hidden, hidden]` tensor).
    #[default]
    Vector,
    /// A single score.
    Scalar,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder_kind: EncoderKind,
    pub token_dim: usize,
    pub label_dim: usize,
    pub min_token_freq: usize,
    pub hidden_dim: usize,
    pub gcn_layers: usize,
    pub fc_out_layers: usize,
    pub fc_head_tail_layers: usize,
    pub dropout_rate: f64,
    pub old_class_dim: usize,
    pub dist_embed_max: usize,
    pub dist_embed_dim: usize,
    pub bidirectional_gcn: bool,
    pub bilinear: BilinearKind,
    pub d_max: usize,
    pub learning_rate: f64,
    pub epochs: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder_kind: EncoderKind::LearnedEmbedding,
            token_dim: 64,
            label_dim: 16,
            min_token_freq: 2,
            hidden_dim: 85,
            gcn_layers: 3,
            fc_out_layers: 4,
            fc_head_tail_layers: 1,
            dropout_rate: 0.46,
            old_class_dim: 3,
            dist_embed_max: 3,
            dist_embed_dim: 1,
            bidirectional_gcn: true,
            bilinear: BilinearKind::Vector,
            d_max: 4,
            learning_rate: 0.001,
            epochs: 100,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("token_dim", self.token_dim),
            ("label_dim", self.label_dim),
            ("hidden_dim", self.hidden_dim),
            ("fc_out_layers", self.fc_out_layers),
            ("fc_head_tail_layers", self.fc_head_tail_layers),
            ("old_class_dim", self.old_class_dim),
            ("dist_embed_max", self.dist_embed_max),
            ("dist_embed_dim", self.dist_embed_dim),
            ("d_max", self.d_max),
            ("epochs", self.epochs),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Data(format!("model config: {name} must be at least 1")));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Data(format!("model config: dropout_rate {} outside [0, 1)", self.dropout_rate)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Data(format!("model config: learning_rate {} must be positive", self.learning_rate)));
        }
        Ok(())
    }

    /// Width of a node vector before the GCN.
    pub fn node_dim(&self) -> usize {
        self.token_dim + self.label_dim
    }

    pub fn bilinear_dim(&self) -> usize {
        match self.bilinear {
            BilinearKind::Vector => self.hidden_dim,
            BilinearKind::Scalar => 1,
        }
    }

    /// Width of a pair representation fed to the output stack.
    pub fn edge_dim(&self) -> usize {
        self.bilinear_dim() + self.dist_embed_dim + self.old_class_dim
    }
}

/// Alphanumeric runs and single punctuation characters; case is kept.
pub fn tokenize(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut run: Option<usize> = None;
    for (i, c) in text.char_indices() {
        if c.is_alphanumeric() {
            run.get_or_insert(i);
            continue;
        }
        if let Some(s) = run.take() {
            out.push(&text[s..i]);
        }
        if !c.is_whitespace() {
            out.push(&text[i..i + c.len_utf8()]);
        }
    }
    if let Some(s) = run {
        out.push(&text[s..]);
    }
    out
}

/// Token vocabulary; index 0 is the unknown token.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub const UNK: &'static str = "<unk>";

    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Self {
        let mut all = vec![Self::UNK.to_string()];
        all.extend(tokens.into_iter().filter(|t| t != Self::UNK));
        all.into()
    }

    /// Entity-surface tokens of `docs` seen at least `min_freq` times.
    pub fn build(docs: &[Document], min_freq: usize) -> Self {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for d in docs {
            for e in &d.entities {
                for t in tokenize(&e.surface) {
                    *counts.entry(t).or_default() += 1;
                }
            }
        }
        Self::from_tokens(
            counts
                .into_iter()
                .filter(|&(_, c)| c >= min_freq)
                .map(|(t, _)| t.to_string()),
        )
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

/// Embedding row of an entity label; 0 for labels outside the scheme.
pub fn label_id(label: &str) -> usize {
    labels::ALL.iter().position(|&l| l == label).map_or(0, |p| p + 1)
}

const LABEL_ROWS: usize = labels::ALL.len() + 1;

/// Precomputed per-entity vectors from a JSON-lines sidecar: a header line
/// `{"dim": D}` followed by `{"doc_id", "entity_index", "vector"}` records.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NodeVectors {
    dim: usize,
    vectors: HashMap<(String, usize), Vec<f64>>,
}

impl NodeVectors {
    pub fn parse(content: &str, source: &str) -> Result<Self> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Header {
            dim: usize,
        }
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Record {
            doc_id: String,
            entity_index: usize,
            vector: Vec<f64>,
        }
        let err = |line: usize, msg: String| Error::Parse {
            doc: source.to_string(),
            line,
            msg,
        };
        let mut lines = content.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (hl, header) = lines.next().ok_or_else(|| err(1, "missing {\"dim\": D} header".into()))?;
        let header: Header = serde_json::from_str(header).map_err(|e| err(hl + 1, format!("bad header: {e}")))?;
        if header.dim == 0 {
            return Err(err(hl + 1, "dim must be at least 1".into()));
        }
        let mut vectors = HashMap::new();
        for (k, line) in lines {
            let r: Record = serde_json::from_str(line).map_err(|e| err(k + 1, e.to_string()))?;
            if r.vector.len() != header.dim {
                return Err(err(k + 1, format!("vector has {} values, header says {}", r.vector.len(), header.dim)));
            }
            if r.vector.iter().any(|v| !v.is_finite()) {
                return Err(err(k + 1, "non-finite value".into()));
            }
            if vectors.insert((r.doc_id.clone(), r.entity_index), r.vector).is_some() {
                return Err(err(k + 1, format!("duplicate vector for {} entity {}", r.doc_id, r.entity_index)));
            }
        }
        Ok(NodeVectors {
            dim: header.dim,
            vectors,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&content, &path.display().to_string())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn insert(&mut self, doc_id: &str, entity_index: usize, vector: Vec<f64>) -> Result<()> {
        if self.dim == 0 {
            self.dim = vector.len();
        }
        if vector.len() != self.dim || self.dim == 0 {
            return Err(Error::Data(format!("vector width {} does not match {}", vector.len(), self.dim)));
        }
        self.vectors.insert((doc_id.to_string(), entity_index), vector);
        Ok(())
    }

    pub fn get(&self, doc_id: &str, entity_index: usize) -> Option<&[f64]> {
        self.vectors.get(&(doc_id.to_string(), entity_index)).map(Vec::as_slice)
    }

    /// Sidecar text; records sorted by document and entity.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut keys: Vec<_> = self.vectors.keys().collect();
        keys.sort();
        let mut out = serde_json::to_string(&serde_json::json!({ "dim": self.dim }))?;
        out.push('\n');
        for k in keys {
            let rec = serde_json::json!({
                "doc_id": k.0,
                "entity_index": k.1,
                "vector": self.vectors[k],
            });
            out.push_str(&serde_json::to_string(&rec)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Model architecture: configuration and input vocabularies, without weights.
#[derive(Clone, Debug)]
pub struct EdgeNet {
    config: ModelConfig,
    vocab: Vocab,
    vectors: Option<NodeVectors>,
}

/// Relation classes that carry GCN messages: the 16 relations, then their
/// inverses when the GCN is bidirectional.
fn gcn_relations(config: &ModelConfig) -> Vec<(RelationLabel, bool)> {
    let mut out: Vec<_> = RelationLabel::ALL.iter().map(|&l| (l, false)).collect();
    if config.bidirectional_gcn {
        out.extend(RelationLabel::ALL.iter().map(|&l| (l, true)));
    }
    out
}

fn gcn_param_name(layer: usize, label: RelationLabel, inverse: bool) -> String {
    let dir = if inverse { "inv" } else { "rel" };
    format!("gcn.{layer}.{dir}.{}", label.name())
}

impl EdgeNet {
    pub fn new(config: ModelConfig, vocab: Vocab) -> Result<Self> {
        config.validate()?;
        if config.encoder_kind == EncoderKind::PrecomputedFile {
            return Err(Error::Data("precomputed encoders are built with EdgeNet::with_vectors".into()));
        }
        Ok(EdgeNet {
            config,
            vocab,
            vectors: None,
        })
    }

    /// A precomputed-vector network; `token_dim` is taken from the sidecar.
    pub fn with_vectors(mut config: ModelConfig, vectors: NodeVectors) -> Result<Self> {
        config.encoder_kind = EncoderKind::PrecomputedFile;
        config.token_dim = vectors.dim();
        config.validate()?;
        Ok(EdgeNet {
            config,
            vocab: Vocab::from_tokens(std::iter::empty()),
            vectors: Some(vectors),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    /// Freshly initialized parameters for this architecture.
    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        let c = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let emb = Init::Normal { std: 0.02 };
        let glorot = |fan_in, fan_out| Init::Glorot { fan_in, fan_out };
        if c.encoder_kind == EncoderKind::LearnedEmbedding {
            s.add("emb.token", &[self.vocab.len(), c.token_dim], emb, &mut rng)?;
        }
        s.add("emb.label", &[LABEL_ROWS, c.label_dim], emb, &mut rng)?;
        let mut width = c.node_dim();
        for l in 0..c.gcn_layers {
            s.add(&format!("gcn.{l}.self"), &[width, c.hidden_dim], glorot(width, c.hidden_dim), &mut rng)?;
            s.add(&format!("gcn.{l}.bias"), &[c.hidden_dim], Init::Zeros, &mut rng)?;
            for (label, inv) in gcn_relations(c) {
                let name = gcn_param_name(l, label, inv);
                s.add(&name, &[width, c.hidden_dim], glorot(width, c.hidden_dim), &mut rng)?;
            }
            width = c.hidden_dim;
        }
        for side in ["head", "tail"] {
            let mut w = width;
            for k in 0..c.fc_head_tail_layers {
                s.add(&format!("fc.{side}.{k}.w"), &[w, c.hidden_dim], glorot(w, c.hidden_dim), &mut rng)?;
                s.add(&format!("fc.{side}.{k}.b"), &[c.hidden_dim], Init::Zeros, &mut rng)?;
                w = c.hidden_dim;
            }
        }
        let k = c.bilinear_dim();
        let h = c.hidden_dim;
        s.add("bilinear.w", &[h, k, h], glorot(h, h), &mut rng)?;
        s.add("emb.distance", &[c.dist_embed_max, c.dist_embed_dim], emb, &mut rng)?;
        s.add("emb.old_class", &[EdgeClass::COUNT, c.old_class_dim], emb, &mut rng)?;
        let mut w = c.edge_dim();
        for k in 0..c.fc_out_layers {
            let out = if k + 1 == c.fc_out_layers { EdgeClass::COUNT } else { c.hidden_dim };
            s.add(&format!("fc.out.{k}.w"), &[w, out], glorot(w, out), &mut rng)?;
            s.add(&format!("fc.out.{k}.b"), &[out], Init::Zeros, &mut rng)?;
            w = out;
        }
        Ok(s)
    }

    fn param(&self, params: &ParamStore, tape: &mut Tape, name: &str) -> Result<Var> {
        let id = params
            .id(name)
            .ok_or_else(|| Error::Data(format!("parameter `{name}` missing from the store")))?;
        Ok(tape.param(params, id))
    }

    /// Node vectors: pooled token (or precomputed) vectors joined with the
    /// label embedding; `[entities, token_dim + label_dim]`.
    pub fn encode_nodes(&self, params: &ParamStore, tape: &mut Tape, doc: &Document) -> Result<Var> {
        let n = doc.entities.len();
        let pooled = match &self.vectors {
            None => {
                let mut ids = Vec::new();
                let mut segments = Vec::with_capacity(n);
                for (k, e) in doc.entities.iter().enumerate() {
                    let start = ids.len();
                    ids.extend(tokenize(&e.surface).into_iter().map(|t| self.vocab.id(t)));
                    if ids.len() == start {
                        return Err(Error::Data(format!("{}: entity {k} ({}) has no tokens", doc.doc_id, e.id)));
                    }
                    segments.push(start..ids.len());
                }
                let table = self.param(params, tape, "emb.token")?;
                let tokens = tape.gather(table, &ids)?;
                tape.segment_max(tokens, &segments)?
            }
            Some(vectors) => {
                let mut data = Vec::with_capacity(n * vectors.dim());
                for (k, e) in doc.entities.iter().enumerate() {
                    let v = vectors.get(&doc.doc_id, k).ok_or_else(|| {
                        Error::Data(format!("{}: no precomputed vector for entity {k} ({})", doc.doc_id, e.id))
                    })?;
                    data.extend_from_slice(v);
                }
                tape.leaf(Tensor::matrix(n, vectors.dim(), data)?)
            }
        };
        let label_ids: Vec<usize> = doc.entities.iter().map(|e| label_id(&e.label)).collect();
        let table = self.param(params, tape, "emb.label")?;
        let label_vecs = tape.gather(table, &label_ids)?;
        tape.concat_cols(&[pooled, label_vecs])
    }

    /// Relational GCN over the non-NoRelation edges of `graph`. Messages flow
    /// from head to tail (and back through inverse weights when bidirectional),
    /// normalized by each receiver's per-class in-degree.
    pub fn gcn(&self, params: &ParamStore, tape: &mut Tape, nodes: Var, graph: &RelationGraph) -> Result<Var> {
        let n = tape.value(nodes).rows();
        if graph.n_nodes() != n {
            return Err(Error::shape("gcn", format!("{} graph nodes for {n} node vectors", graph.n_nodes())));
        }
        // receiver -> sender lists per (class, inverse)
        let mut adjacency: BTreeMap<(RelationLabel, bool), Vec<Vec<usize>>> = BTreeMap::new();
        for (head, tail, label) in graph.edges() {
            adjacency.entry((label, false)).or_insert_with(|| vec![Vec::new(); n])[tail].push(head);
            if self.config.bidirectional_gcn {
                adjacency.entry((label, true)).or_insert_with(|| vec![Vec::new(); n])[head].push(tail);
            }
        }
        let mut norm: Vec<((RelationLabel, bool), Tensor)> = Vec::with_capacity(adjacency.len());
        for (key, receivers) in adjacency {
            let mut a = vec![0.0; n * n];
            for (i, senders) in receivers.iter().enumerate() {
                for &j in senders {
                    a[i * n + j] += 1.0 / senders.len() as f64;
                }
            }
            norm.push((key, Tensor::matrix(n, n, a)?));
        }
        let mut h = nodes;
        for l in 0..self.config.gcn_layers {
            let w0 = self.param(params, tape, &format!("gcn.{l}.self"))?;
            let b = self.param(params, tape, &format!("gcn.{l}.bias"))?;
            let mut acc = tape.matmul(h, w0)?;
            acc = tape.add_row(acc, b)?;
            for ((label, inv), a) in &norm {
                let wr = self.param(params, tape, &gcn_param_name(l, *label, *inv))?;
                let a = tape.leaf(a.clone());
                let msg = tape.matmul(a, h)?;
                let msg = tape.matmul(msg, wr)?;
                acc = tape.add(acc, msg)?;
            }
            h = tape.relu(acc);
        }
        Ok(h)
    }

    fn fc_stack(&self, params: &ParamStore, tape: &mut Tape, x: Var, prefix: &str, layers: usize) -> Result<Var> {
        let mut h = x;
        for k in 0..layers {
            if k > 0 {
                h = tape.relu(h);
            }
            let w = self.param(params, tape, &format!("{prefix}.{k}.w"))?;
            let b = self.param(params, tape, &format!("{prefix}.{k}.b"))?;
            h = tape.matmul(h, w)?;
            h = tape.add_row(h, b)?;
        }
        Ok(h)
    }

    /// Pair representations `[bilinear; distance; old class]`, one row per pair.
    pub fn encode_edges(
        &self,
        params: &ParamStore,
        tape: &mut Tape,
        nodes_g: Var,
        graph: &RelationGraph,
        pairs: &[Pair],
    ) -> Result<Var> {
        let c = &self.config;
        let n = graph.n_nodes();
        if let Some(&(i, j)) = pairs.iter().find(|&&(i, j)| i == j || i >= n || j >= n) {
            return Err(Error::Data(format!("invalid pair ({i}, {j}) for {n} entities")));
        }
        let head = self.fc_stack(params, tape, nodes_g, "fc.head", c.fc_head_tail_layers)?;
        let tail = self.fc_stack(params, tape, nodes_g, "fc.tail", c.fc_head_tail_layers)?;
        let w = self.param(params, tape, "bilinear.w")?;
        let scores = tape.bilinear(head, w, tail, pairs)?;
        let dist_ids: Vec<usize> = pairs.iter().map(|&(i, j)| i.abs_diff(j).min(c.dist_embed_max) - 1).collect();
        let table = self.param(params, tape, "emb.distance")?;
        let dist = tape.gather(table, &dist_ids)?;
        let old_ids: Vec<usize> = pairs.iter().map(|&(i, j)| graph.class(i, j).index()).collect();
        let table = self.param(params, tape, "emb.old_class")?;
        let old = tape.gather(table, &old_ids)?;
        tape.concat_cols(&[scores, dist, old])
    }

    /// Class logits `[pairs, 17]`. Dropout is applied only when `dropout_rng`
    /// is given (training).
    pub fn classify_edges(
        &self,
        params: &ParamStore,
        tape: &mut Tape,
        edges: Var,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let x = match dropout_rng {
            Some(rng) => tape.dropout(edges, self.config.dropout_rate, true, rng)?,
            None => edges,
        };
        self.fc_stack(params, tape, x, "fc.out", self.config.fc_out_layers)
    }

    /// Logits for `pairs` given document-encoded nodes and the current graph.
    pub fn pair_logits(
        &self,
        params: &ParamStore,
        tape: &mut Tape,
        nodes: Var,
        graph: &RelationGraph,
        pairs: &[Pair],
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let g = self.gcn(params, tape, nodes, graph)?;
        let e = self.encode_edges(params, tape, g, graph, pairs)?;
        self.classify_edges(params, tape, e, dropout_rng)
    }
}

/// Summed NLL of `targets` under row-wise softmax of `logits`.
pub fn nll_loss(tape: &mut Tape, logits: Var, targets: &[EdgeClass]) -> Result<Var> {
    let lp = tape.log_softmax(logits);
    let t: Vec<usize> = targets.iter().map(|c| c.index()).collect();
    tape.nll(lp, &t)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct EdgePrediction {
    pub probabilities: Vec<f64>,
    pub class: EdgeClass,
}

/// A network together with its weights.
#[derive(Clone, Debug)]
pub struct EdgeModel {
    pub net: EdgeNet,
    pub params: ParamStore,
}

/// Document-encoded node vectors, reused across editing rounds.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeState(pub Tensor);

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    config: ModelConfig,
    vocab: Vocab,
    params: ParamStore,
}

const CHECKPOINT_FORMAT: &str = "edgeedit-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

impl EdgeModel {
    pub fn new(net: EdgeNet, seed: u64) -> Result<Self> {
        let params = net.init_params(seed)?;
        Ok(EdgeModel { net, params })
    }

    /// Probabilities and argmax class for each pair, without dropout.
    pub fn predict(&self, state: &NodeState, graph: &RelationGraph, pairs: &[Pair]) -> Result<Vec<EdgePrediction>> {
        let mut tape = Tape::new();
        let nodes = tape.leaf(state.0.clone());
        let logits = self.net.pair_logits(&self.params, &mut tape, nodes, graph, pairs, None)?;
        let probs = tape.softmax(logits);
        let p = tape.value(probs);
        Ok((0..pairs.len())
            .map(|r| {
                let row = p.row(r).to_vec();
                let class = EdgeClass::from_index(argmax(&row)).expect("17 classes");
                EdgePrediction {
                    probabilities: row,
                    class,
                }
            })
            .collect())
    }

    pub fn to_json(&self) -> Result<String> {
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.net.config.clone(),
            vocab: self.net.vocab.clone(),
            params: self.params.clone(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    /// Restores a model; precomputed-vector models need `vectors`.
    pub fn from_json(json: &str, vectors: Option<NodeVectors>) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_str(json)?;
        if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!(
                "unsupported checkpoint {} v{}",
                file.format, file.version
            )));
        }
        let net = match (file.config.encoder_kind, vectors) {
            (EncoderKind::LearnedEmbedding, _) => EdgeNet::new(file.config, file.vocab)?,
            (EncoderKind::PrecomputedFile, Some(v)) => {
                if v.dim() != file.config.token_dim {
                    return Err(Error::Data(format!(
                        "checkpoint expects {}-dim node vectors, sidecar has {}",
                        file.config.token_dim,
                        v.dim()
                    )));
                }
                EdgeNet::with_vectors(file.config, v)?
            }
            (EncoderKind::PrecomputedFile, None) => {
                return Err(Error::Data("checkpoint needs a precomputed node-vector sidecar".into()))
            }
        };
        let mut params = file.params;
        params.reindex()?;
        let fresh = net.init_params(0)?;
        let layout = |s: &ParamStore| -> Vec<(String, Vec<usize>)> {
            s.params().iter().map(|p| (p.name.clone(), p.value.shape().to_vec())).collect()
        };
        if layout(&fresh) != layout(&params) {
            return Err(Error::Data("checkpoint parameters do not match its configuration".into()));
        }
        Ok(EdgeModel { net, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, vectors: Option<NodeVectors>) -> Result<Self> {
        let json = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&json, vectors)
    }
}

impl EdgeClassifier for EdgeModel {
    type State = NodeState;

    fn encode(&self, doc: &Document) -> Result<NodeState> {
        let mut tape = Tape::new();
        let v = self.net.encode_nodes(&self.params, &mut tape, doc)?;
        Ok(NodeState(tape.value(v).clone()))
    }

    fn classify(&self, state: &NodeState, graph: &RelationGraph, pairs: &[Pair]) -> Result<Vec<EdgeClass>> {
        Ok(self.predict(state, graph, pairs)?.into_iter().map(|p| p.class).collect())
    }
}
