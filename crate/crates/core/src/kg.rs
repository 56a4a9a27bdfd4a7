//! Knowledge graph storage: vocabularies, splits, inverse relations,
//! adjacency and graph statistics.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

pub type NodeId = usize;
pub type RelId = usize;

/// Reserved suffix for generated inverse relations.
pub const INVERSE_SUFFIX: &str = "_inv";
/// Reserved name of the synthetic similarity relation.
pub const SIM_RELATION: &str = "sim";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub head: NodeId,
    pub rel: RelId,
    pub tail: NodeId,
}

impl Triple {
    pub fn new(head: NodeId, rel: RelId, tail: NodeId) -> Self {
        Triple { head, rel, tail }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" | "valid" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split {other:?}"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

/// Column order of a tuple file.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TupleFormat {
    /// `relation<TAB>source<TAB>target[<TAB>weight]` (ConceptNet style).
    #[default]
    RelHeadTail,
    /// `source<TAB>relation<TAB>target[<TAB>weight]`.
    HeadRelTail,
}

/// Node identity: surrounding whitespace trimmed, then NFC.
pub fn normalize_phrase(s: &str) -> String {
    s.trim().nfc().collect()
}

/// One parsed row before ids are assigned.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawTuple {
    pub head: String,
    pub rel: String,
    pub tail: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub rows: usize,
    /// Rows dropped because a phrase was empty after normalisation.
    pub rejected_rows: usize,
}

impl LoadReport {
    fn absorb(&mut self, other: &LoadReport) {
        self.rows += other.rows;
        self.rejected_rows += other.rejected_rows;
    }
}

pub fn parse_tuples<R: BufRead>(reader: R, format: TupleFormat, origin: &Path) -> Result<(Vec<RawTuple>, LoadReport)> {
    let mut out = Vec::new();
    let mut report = LoadReport::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 3 || cols.len() > 4 {
            return Err(Error::Parse {
                path: origin.to_path_buf(),
                line: lineno,
                message: format!("expected 3 or 4 tab-separated columns, found {}", cols.len()),
            });
        }
        let (rel, head, tail) = match format {
            TupleFormat::RelHeadTail => (cols[0], cols[1], cols[2]),
            TupleFormat::HeadRelTail => (cols[1], cols[0], cols[2]),
        };
        report.rows += 1;
        let (rel, head, tail) = (normalize_phrase(rel), normalize_phrase(head), normalize_phrase(tail));
        if rel.is_empty() {
            return Err(Error::Parse {
                path: origin.to_path_buf(),
                line: lineno,
                message: "empty relation name".into(),
            });
        }
        if head.is_empty() || tail.is_empty() {
            report.rejected_rows += 1;
            continue;
        }
        out.push(RawTuple { head, rel, tail });
    }
    Ok((out, report))
}

pub fn read_tuple_file(path: &Path, format: TupleFormat) -> Result<(Vec<RawTuple>, LoadReport)> {
    let file = File::open(path)?;
    parse_tuples(BufReader::new(file), format, path)
}

/// Node vocabulary: dense ids, bijective with phrases.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    phrases: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, NodeId>,
}

impl Vocab {
    fn intern(&mut self, phrase: &str) -> NodeId {
        if let Some(&id) = self.index.get(phrase) {
            return id;
        }
        let id = self.phrases.len();
        self.phrases.push(phrase.to_string());
        self.index.insert(phrase.to_string(), id);
        id
    }

    fn rebuild_index(&mut self) {
        self.index = self.phrases.iter().enumerate().map(|(i, p)| (p.clone(), i)).collect();
    }

    pub fn len(&self) -> usize {
        self.phrases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phrases.is_empty()
    }

    pub fn phrase(&self, id: NodeId) -> &str {
        &self.phrases[id]
    }

    pub fn id(&self, phrase: &str) -> Option<NodeId> {
        self.index.get(phrase).copied()
    }

    pub fn phrases(&self) -> &[String] {
        &self.phrases
    }
}

/// Relation ids: base relations `0..R`, their inverses `R..2R`, and `sim`
/// at `2R`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Relations {
    names: Vec<String>,
}

impl Relations {
    pub fn base_count(&self) -> usize {
        self.names.len()
    }

    /// Relations the decoder scores: base plus inverses.
    pub fn directed_count(&self) -> usize {
        2 * self.names.len()
    }

    /// All relations carried by message edges, `sim` included.
    pub fn total_count(&self) -> usize {
        2 * self.names.len() + 1
    }

    pub fn inverse(&self, rel: RelId) -> RelId {
        let r = self.names.len();
        debug_assert!(rel < 2 * r);
        if rel < r {
            rel + r
        } else {
            rel - r
        }
    }

    pub fn is_inverse(&self, rel: RelId) -> bool {
        rel >= self.names.len() && rel < 2 * self.names.len()
    }

    pub fn sim(&self) -> RelId {
        2 * self.names.len()
    }

    pub fn name(&self, rel: RelId) -> String {
        let r = self.names.len();
        if rel < r {
            self.names[rel].clone()
        } else if rel < 2 * r {
            format!("{}{INVERSE_SUFFIX}", self.names[rel - r])
        } else {
            SIM_RELATION.to_string()
        }
    }

    pub fn id(&self, name: &str) -> Option<RelId> {
        if name == SIM_RELATION {
            return Some(self.sim());
        }
        if let Some(base) = name.strip_suffix(INVERSE_SUFFIX) {
            return self.names.iter().position(|n| n == base).map(|i| i + self.names.len());
        }
        self.names.iter().position(|n| n == name)
    }

    fn intern(&mut self, name: &str) -> Result<RelId> {
        if let Some(i) = self.names.iter().position(|n| n == name) {
            return Ok(i);
        }
        if name.ends_with(INVERSE_SUFFIX) || name == SIM_RELATION {
            return Err(Error::invalid(format!(
                "relation name {name:?} collides with a reserved name (suffix {INVERSE_SUFFIX:?} or {SIM_RELATION:?})"
            )));
        }
        self.names.push(name.to_string());
        Ok(self.names.len() - 1)
    }
}

/// Incoming and outgoing typed neighbour lists.
#[derive(Clone, Debug, Default)]
pub struct Adjacency {
    pub incoming: Vec<Vec<(NodeId, RelId)>>,
    pub outgoing: Vec<Vec<(NodeId, RelId)>>,
}

impl Adjacency {
    pub fn from_edges(num_nodes: usize, edges: &[Triple]) -> Self {
        let mut adj = Adjacency {
            incoming: vec![Vec::new(); num_nodes],
            outgoing: vec![Vec::new(); num_nodes],
        };
        for t in edges {
            adj.incoming[t.tail].push((t.head, t.rel));
            adj.outgoing[t.head].push((t.tail, t.rel));
        }
        adj
    }

    pub fn entry_count(&self) -> usize {
        self.incoming.iter().map(Vec::len).sum()
    }
}

/// A loaded knowledge graph. Split edge lists hold base relations only;
/// inverses and `sim` edges are materialised by the edge views.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeGraph {
    nodes: Vocab,
    relations: Relations,
    train: Vec<Triple>,
    dev: Vec<Triple>,
    test: Vec<Triple>,
    /// Unordered similarity pairs, stored once with `a < b`.
    sim_pairs: Vec<(NodeId, NodeId)>,
}

impl KnowledgeGraph {
    /// Builds vocabularies over the union of all splits, in order of first
    /// appearance (train, then dev, then test).
    pub fn from_raw(train: &[RawTuple], dev: &[RawTuple], test: &[RawTuple]) -> Result<Self> {
        let mut g = KnowledgeGraph::default();
        let convert = |rows: &[RawTuple], g: &mut KnowledgeGraph| -> Result<Vec<Triple>> {
            rows.iter()
                .map(|r| {
                    let head = g.nodes.intern(&r.head);
                    let rel = g.relations.intern(&r.rel)?;
                    let tail = g.nodes.intern(&r.tail);
                    Ok(Triple { head, rel, tail })
                })
                .collect()
        };
        g.train = convert(train, &mut g)?;
        g.dev = convert(dev, &mut g)?;
        g.test = convert(test, &mut g)?;
        Ok(g)
    }

    pub fn nodes(&self) -> &Vocab {
        &self.nodes
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn relations(&self) -> &Relations {
        &self.relations
    }

    pub fn split(&self, split: Split) -> &[Triple] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    /// Base edges of every split, train first.
    pub fn all_base_edges(&self) -> Vec<Triple> {
        let mut all = self.train.clone();
        all.extend_from_slice(&self.dev);
        all.extend_from_slice(&self.test);
        all
    }

    pub fn inverse_of(&self, t: &Triple) -> Triple {
        Triple::new(t.tail, self.relations.inverse(t.rel), t.head)
    }

    /// Decoder-facing training edges: base edges followed by their inverses.
    /// Never contains `sim` edges.
    pub fn train_directed(&self) -> Vec<Triple> {
        let mut out = self.train.clone();
        out.extend(self.train.iter().map(|t| self.inverse_of(t)));
        out
    }

    pub fn sim_pairs(&self) -> &[(NodeId, NodeId)] {
        &self.sim_pairs
    }

    /// `sim` edges in both directions.
    pub fn sim_edges(&self) -> Vec<Triple> {
        let sim = self.relations.sim();
        self.sim_pairs
            .iter()
            .flat_map(|&(a, b)| [Triple::new(a, sim, b), Triple::new(b, sim, a)])
            .collect()
    }

    /// Encoder message edges: training edges, their inverses and, when
    /// requested, `sim` edges. Dev and test edges never appear here.
    pub fn message_edges(&self, with_sim: bool) -> Vec<Triple> {
        let mut out = self.train_directed();
        if with_sim {
            out.extend(self.sim_edges());
        }
        out
    }

    pub fn adjacency(&self, with_sim: bool) -> Adjacency {
        Adjacency::from_edges(self.num_nodes(), &self.message_edges(with_sim))
    }

    pub(crate) fn set_sim_pairs(&mut self, pairs: Vec<(NodeId, NodeId)>) {
        self.sim_pairs = pairs;
    }

    pub(crate) fn with_train(&self, train: Vec<Triple>) -> Self {
        KnowledgeGraph {
            train,
            ..self.clone()
        }
    }

    /// Replaces the splits according to `assignment` (ids unchanged).
    pub fn with_splits(&self, assignment: SplitAssignment) -> Self {
        KnowledgeGraph {
            train: assignment.train,
            dev: assignment.dev,
            test: assignment.test,
            ..self.clone()
        }
    }

    pub fn write_split_tsv(&self, split: Split, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for t in self.split(split) {
            writeln!(
                w,
                "{}\t{}\t{}",
                self.relations.name(t.rel),
                self.nodes.phrase(t.head),
                self.nodes.phrase(t.tail)
            )?;
        }
        w.flush()?;
        Ok(())
    }

    /// Graph cache: JSON with a format tag and version.
    pub fn save_cache(&self, path: &Path) -> Result<()> {
        let doc = serde_json::json!({
            "format": "kgc-graph",
            "version": 1,
            "graph": self,
        });
        let w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(w, &doc)?;
        Ok(())
    }

    pub fn load_cache(path: &Path) -> Result<Self> {
        let doc: serde_json::Value = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        if doc["format"] != "kgc-graph" || doc["version"] != 1 {
            return Err(Error::Format(format!("{} is not a version 1 graph cache", path.display())));
        }
        let mut g: KnowledgeGraph = serde_json::from_value(doc["graph"].clone())?;
        g.nodes.rebuild_index();
        Ok(g)
    }
}

/// Loads a single training file.
pub fn load_tuples(path: &Path, format: TupleFormat) -> Result<(KnowledgeGraph, LoadReport)> {
    let (rows, report) = read_tuple_file(path, format)?;
    Ok((KnowledgeGraph::from_raw(&rows, &[], &[])?, report))
}

/// Files recognised in a dataset directory. `train.tsv` is required.
pub fn dataset_files(dir: &Path) -> (PathBuf, Option<PathBuf>, Option<PathBuf>) {
    let opt = |name: &str| {
        let p = dir.join(name);
        p.exists().then_some(p)
    };
    (dir.join("train.tsv"), opt("dev.tsv"), opt("test.tsv"))
}

/// Loads `train.tsv` and, when present, `dev.tsv` and `test.tsv`.
pub fn load_dataset(dir: &Path, format: TupleFormat) -> Result<(KnowledgeGraph, LoadReport)> {
    let (train_path, dev_path, test_path) = dataset_files(dir);
    let mut report = LoadReport::default();
    let mut read = |p: Option<&Path>| -> Result<Vec<RawTuple>> {
        match p {
            Some(p) => {
                let (rows, r) = read_tuple_file(p, format)?;
                report.absorb(&r);
                Ok(rows)
            }
            None => Ok(Vec::new()),
        }
    };
    let train = read(Some(&train_path))?;
    let dev = read(dev_path.as_deref())?;
    let test = read(test_path.as_deref())?;
    Ok((KnowledgeGraph::from_raw(&train, &dev, &test)?, report))
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SplitAssignment {
    pub train: Vec<Triple>,
    pub dev: Vec<Triple>,
    pub test: Vec<Triple>,
}

/// Random train/dev/test split of every base edge in `graph`. Dev and test
/// edges touching a node that no training edge covers are moved into train.
pub fn make_random_split(graph: &KnowledgeGraph, ratios: (f64, f64, f64), seed: u64) -> Result<SplitAssignment> {
    let (a, b, c) = ratios;
    if [a, b, c].iter().any(|r| !(0.0..=1.0).contains(r)) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("split ratios {ratios:?} must be in [0,1] and sum to 1")));
    }
    let mut edges = graph.all_base_edges();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    edges.shuffle(&mut rng);
    let n = edges.len();
    let n_dev = (b * n as f64).round() as usize;
    let n_test = ((c * n as f64).round() as usize).min(n - n_dev);
    let n_train = n - n_dev - n_test;

    let mut train: Vec<Triple> = edges[..n_train].to_vec();
    let mut covered: HashSet<NodeId> = train.iter().flat_map(|t| [t.head, t.tail]).collect();
    let mut keep = |pool: &[Triple], train: &mut Vec<Triple>| -> Vec<Triple> {
        let mut kept = Vec::new();
        for t in pool {
            if covered.contains(&t.head) && covered.contains(&t.tail) {
                kept.push(*t);
            } else {
                covered.insert(t.head);
                covered.insert(t.tail);
                train.push(*t);
            }
        }
        kept
    };
    let dev = keep(&edges[n_train..n_train + n_dev], &mut train);
    let test = keep(&edges[n_train + n_dev..], &mut train);
    Ok(SplitAssignment { train, dev, test })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphStats {
    pub nodes: usize,
    pub edges: usize,
    pub relations: usize,
    pub density: f64,
    pub avg_in_degree: f64,
}

/// `V / (N (N - 1))`.
pub fn density(nodes: usize, edges: usize) -> f64 {
    if nodes < 2 {
        return 0.0;
    }
    edges as f64 / (nodes as f64 * (nodes as f64 - 1.0))
}

/// Statistics over base training edges. `nodes` is the vocabulary size.
pub fn compute_stats(graph: &KnowledgeGraph) -> GraphStats {
    let n = graph.num_nodes();
    let v = graph.train.len();
    GraphStats {
        nodes: n,
        edges: v,
        relations: graph.relations.base_count(),
        density: density(n, v),
        avg_in_degree: if n == 0 { 0.0 } else { v as f64 / n as f64 },
    }
}

/// Uniformly subsamples base training edges so the density approaches
/// `target`. Inverse edges follow automatically; the vocabulary is kept.
pub fn drop_edges_to_density(graph: &KnowledgeGraph, target: f64, seed: u64) -> Result<KnowledgeGraph> {
    let stats = compute_stats(graph);
    if !(target >= 0.0) || target > stats.density * (1.0 + 1e-12) {
        return Err(Error::invalid(format!(
            "target density {target:e} exceeds current density {:e}",
            stats.density
        )));
    }
    let n = stats.nodes as f64;
    let keep = ((target * n * (n - 1.0)).round() as usize).min(stats.edges);
    if keep == stats.edges {
        return Ok(graph.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = index::sample(&mut rng, stats.edges, keep).into_vec();
    chosen.sort_unstable();
    let train = chosen.into_iter().map(|i| graph.train[i]).collect();
    Ok(graph.with_train(train))
}
