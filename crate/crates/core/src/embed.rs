//! Node text embeddings, blocked all-pairs cosine similarity, similarity
//! threshold selection and graph densification with `sim` edges.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{normalize_phrase, KnowledgeGraph, NodeId};
use crate::numerics::Tensor;

pub const EMBEDDING_MAGIC: &[u8; 4] = b"KGE1";

/// Text embedding matrix with rows in graph node-id order.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeEmbeddingTable {
    dim: usize,
    data: Vec<f32>,
}

impl NodeEmbeddingTable {
    pub fn new(rows: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("embedding dimension must be positive"));
        }
        if data.len() != rows * dim {
            return Err(Error::shape("embedding table", &[rows, dim], &[data.len()]));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("embedding row {}", i / dim)));
        }
        Ok(NodeEmbeddingTable { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Selected rows widened to `f64`.
    pub fn select(&self, rows: &[NodeId]) -> Tensor {
        let mut out = Vec::with_capacity(rows.len() * self.dim);
        for &r in rows {
            out.extend(self.row(r).iter().map(|&v| v as f64));
        }
        Tensor::matrix(rows.len(), self.dim, out).expect("row-aligned")
    }

    pub fn to_tensor(&self) -> Tensor {
        let all: Vec<NodeId> = (0..self.rows()).collect();
        self.select(&all)
    }
}

/// Default location of the phrase sidecar: `emb.bin` → `emb.phrases.txt`.
pub fn sidecar_path(bin: &Path) -> PathBuf {
    bin.with_extension("phrases.txt")
}

/// Writes the binary matrix and its phrase sidecar.
pub fn write_embeddings(bin: &Path, phrases_path: &Path, phrases: &[String], dim: usize, data: &[f32]) -> Result<()> {
    if dim == 0 || data.len() != phrases.len() * dim {
        return Err(Error::shape("write_embeddings", &[phrases.len(), dim], &[data.len()]));
    }
    let mut w = BufWriter::new(File::create(bin)?);
    w.write_all(EMBEDDING_MAGIC)?;
    w.write_all(&(phrases.len() as u32).to_le_bytes())?;
    w.write_all(&(dim as u32).to_le_bytes())?;
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    let mut p = BufWriter::new(File::create(phrases_path)?);
    for phrase in phrases {
        writeln!(p, "{phrase}")?;
    }
    p.flush()?;
    Ok(())
}

/// Raw binary contents: `(count, dim, row-major values)`.
pub fn read_embedding_file(bin: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let mut r = BufReader::new(File::open(bin)?);
    let mut header = [0u8; 12];
    r.read_exact(&mut header)?;
    if &header[..4] != EMBEDDING_MAGIC {
        return Err(Error::Format(format!("{}: missing KGE1 magic", bin.display())));
    }
    let count = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    if dim == 0 {
        return Err(Error::Format(format!("{}: dimension 0", bin.display())));
    }
    let mut payload = vec![0u8; count * dim * 4];
    r.read_exact(&mut payload)?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((count, dim, data))
}

/// Loads an embedding file and permutes its rows into graph-id order.
pub fn load_embeddings(bin: &Path, phrases_path: &Path, graph: &KnowledgeGraph) -> Result<NodeEmbeddingTable> {
    let (count, dim, data) = read_embedding_file(bin)?;
    let phrases: Vec<String> = BufReader::new(File::open(phrases_path)?)
        .lines()
        .map(|l| l.map(|s| normalize_phrase(&s)))
        .collect::<std::io::Result<_>>()?;
    if phrases.len() != count {
        return Err(Error::VocabularyMismatch(format!(
            "{} rows but {} phrases in {}",
            count,
            phrases.len(),
            phrases_path.display()
        )));
    }
    align_rows(graph, &phrases, dim, &data)
}

fn align_rows(graph: &KnowledgeGraph, phrases: &[String], dim: usize, data: &[f32]) -> Result<NodeEmbeddingTable> {
    let n = graph.num_nodes();
    let mut slot: Vec<Option<usize>> = vec![None; n];
    let mut surplus = Vec::new();
    for (row, p) in phrases.iter().enumerate() {
        match graph.nodes().id(p) {
            Some(id) if slot[id].is_none() => slot[id] = Some(row),
            _ => surplus.push(p.clone()),
        }
    }
    let missing: Vec<String> = (0..n)
        .filter(|&i| slot[i].is_none())
        .map(|i| graph.nodes().phrase(i).to_string())
        .collect();
    if !missing.is_empty() || !surplus.is_empty() {
        let show = |v: &[String]| v.iter().take(10).map(|s| format!("{s:?}")).collect::<Vec<_>>().join(", ");
        return Err(Error::VocabularyMismatch(format!(
            "{} graph phrases missing [{}]; {} surplus or duplicate rows [{}]",
            missing.len(),
            show(&missing),
            surplus.len(),
            show(&surplus)
        )));
    }
    let mut out = Vec::with_capacity(n * dim);
    for s in slot {
        let row = s.expect("checked above");
        out.extend_from_slice(&data[row * dim..(row + 1) * dim]);
    }
    NodeEmbeddingTable::new(n, dim, out)
}

/// Unit-normalised rows in 64-bit; zero-norm rows are excluded.
#[derive(Clone, Debug)]
pub struct NormalizedRows {
    dim: usize,
    data: Vec<f64>,
    valid: Vec<bool>,
}

impl NormalizedRows {
    pub fn new(table: &NodeEmbeddingTable) -> Self {
        let dim = table.dim();
        let mut data = Vec::with_capacity(table.data().len());
        let mut valid = Vec::with_capacity(table.rows());
        for i in 0..table.rows() {
            let row = table.row(i);
            let norm = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
            valid.push(norm > 0.0);
            let inv = if norm > 0.0 { norm } else { 1.0 };
            data.extend(row.iter().map(|&v| v as f64 / inv));
        }
        NormalizedRows { dim, data, valid }
    }

    pub fn rows(&self) -> usize {
        self.valid.len()
    }

    pub fn zero_rows(&self) -> usize {
        self.valid.iter().filter(|v| !**v).count()
    }

    pub fn is_valid(&self, i: usize) -> bool {
        self.valid[i]
    }

    pub fn cosine(&self, i: usize, j: usize) -> f64 {
        let a = &self.data[i * self.dim..(i + 1) * self.dim];
        let b = &self.data[j * self.dim..(j + 1) * self.dim];
        let mut s = 0.0;
        for k in 0..self.dim {
            s += a[k] * b[k];
        }
        s
    }

    /// Visits every valid pair `i < j` tile by tile. Each tile is reduced
    /// independently by `per_tile`; results come back in tile order.
    pub fn map_tiles<T, F>(&self, block: usize, per_tile: F) -> Vec<T>
    where
        T: Send,
        F: Fn(&mut dyn FnMut(&mut dyn FnMut(usize, usize, f64))) -> T + Sync,
    {
        let n = self.rows();
        let block = block.max(1);
        let starts: Vec<usize> = (0..n).step_by(block).collect();
        let tiles: Vec<(usize, usize)> = starts
            .iter()
            .enumerate()
            .flat_map(|(a, &bi)| starts[a..].iter().map(move |&bj| (bi, bj)))
            .collect();
        let run = |&(bi, bj): &(usize, usize)| {
            per_tile(&mut |visit: &mut dyn FnMut(usize, usize, f64)| {
                for i in bi..(bi + block).min(n) {
                    if !self.valid[i] {
                        continue;
                    }
                    let j0 = if bi == bj { i + 1 } else { bj };
                    for j in j0..(bj + block).min(n) {
                        if self.valid[j] {
                            visit(i, j, self.cosine(i, j));
                        }
                    }
                }
            })
        };
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            tiles.par_iter().map(run).collect()
        }
        #[cfg(not(feature = "parallel"))]
        {
            tiles.iter().map(run).collect()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimPair {
    pub a: NodeId,
    pub b: NodeId,
    pub score: f64,
}

/// How the threshold was chosen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ThresholdCriterion {
    Explicit,
    Cap { max_new_edges: usize },
    Tail { k: f64, mean: f64, std: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimEdgeSet {
    pub pairs: Vec<SimPair>,
    pub tau: f64,
    pub criterion: ThresholdCriterion,
    /// Rows skipped because their norm was zero.
    pub zero_norm_rows: usize,
}

/// All pairs `i < j` with cosine ≥ `tau`, sorted by `(i, j)`.
pub fn pairwise_topk_by_threshold(table: &NodeEmbeddingTable, tau: f64, block: usize) -> Result<SimEdgeSet> {
    if block == 0 {
        return Err(Error::invalid("block size must be at least 1"));
    }
    let rows = NormalizedRows::new(table);
    warn_zero_rows(&rows);
    let tiles = rows.map_tiles(block, |walk| {
        let mut hits = Vec::new();
        walk(&mut |i, j, s| {
            if s >= tau {
                hits.push(SimPair { a: i, b: j, score: s });
            }
        });
        hits
    });
    let mut pairs: Vec<SimPair> = tiles.into_iter().flatten().collect();
    pairs.sort_by_key(|p| (p.a, p.b));
    Ok(SimEdgeSet {
        pairs,
        tau,
        criterion: ThresholdCriterion::Explicit,
        zero_norm_rows: rows.zero_rows(),
    })
}

fn warn_zero_rows(rows: &NormalizedRows) {
    let z = rows.zero_rows();
    if z > 0 {
        log::warn!("{z} zero-norm embedding rows excluded from similarity search");
    }
}

/// The threshold grid `1.00, 0.99, …, 0.00`.
pub fn grid_value(k: usize) -> f64 {
    k as f64 / 100.0
}

/// Largest grid index `k` with `k/100 ≤ s`, if any.
fn grid_floor(s: f64) -> Option<usize> {
    if !(s >= 0.0) {
        return None;
    }
    let mut k = ((s * 100.0).floor() as i64).clamp(0, 100);
    while k < 100 && grid_value(k as usize + 1) <= s {
        k += 1;
    }
    while k >= 0 && grid_value(k as usize) > s {
        k -= 1;
    }
    (k >= 0).then_some(k as usize)
}

/// `counts[k]` = number of pairs with cosine ≥ `k/100`.
pub fn grid_counts(table: &NodeEmbeddingTable, block: usize) -> [u64; 101] {
    let rows = NormalizedRows::new(table);
    warn_zero_rows(&rows);
    let tiles = rows.map_tiles(block, |walk| {
        let mut hist = [0u64; 101];
        walk(&mut |_, _, s| {
            if let Some(k) = grid_floor(s) {
                hist[k] += 1;
            }
        });
        hist
    });
    let mut hist = [0u64; 101];
    for t in tiles {
        for k in 0..=100 {
            hist[k] += t[k];
        }
    }
    let mut counts = [0u64; 101];
    let mut acc = 0;
    for k in (0..=100).rev() {
        acc += hist[k];
        counts[k] = acc;
    }
    counts
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CapChoice {
    pub tau: f64,
    pub pairs: u64,
    /// Even `tau = 1.00` selects more pairs than allowed.
    pub over_cap: bool,
}

/// Smallest two-decimal threshold whose pair count stays within the cap.
pub fn select_threshold_cap(table: &NodeEmbeddingTable, max_new_edges: usize, block: usize) -> Result<CapChoice> {
    if max_new_edges == 0 {
        return Err(Error::invalid("edge cap must be positive"));
    }
    Ok(choose_from_counts(&grid_counts(table, block), max_new_edges as u64))
}

pub fn choose_from_counts(counts: &[u64; 101], cap: u64) -> CapChoice {
    if counts[100] > cap {
        log::warn!("{} pairs have similarity 1.00, above the cap of {cap}", counts[100]);
        return CapChoice {
            tau: 1.0,
            pairs: counts[100],
            over_cap: true,
        };
    }
    let mut k = 100;
    while k > 0 && counts[k - 1] <= cap {
        k -= 1;
    }
    CapChoice {
        tau: grid_value(k),
        pairs: counts[k],
        over_cap: false,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TailEstimate {
    pub tau: f64,
    pub mean: f64,
    pub std: f64,
    pub samples: usize,
}

/// `tau = mean + k·std` of a similarity sample.
pub fn tail_threshold_from_samples(samples: &[f64], k: f64) -> Result<TailEstimate> {
    if samples.is_empty() {
        return Err(Error::invalid("no similarity samples"));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std > 1e-12) {
        return Err(Error::invalid("similarity distribution is degenerate (zero standard deviation)"));
    }
    Ok(TailEstimate {
        tau: mean + k * std,
        mean,
        std,
        samples: samples.len(),
    })
}

/// Default number of standard deviations above the mean for the tail rule.
pub const DEFAULT_TAIL_K: f64 = 3.0;
pub const DEFAULT_TAIL_SAMPLES: usize = 10_000_000;

/// Estimates the similarity distribution from uniformly sampled node pairs
/// (all pairs when there are fewer than `sample_pairs`) and returns
/// `mean + k·std`.
pub fn select_threshold_tail(table: &NodeEmbeddingTable, sample_pairs: usize, k: f64, seed: u64) -> Result<TailEstimate> {
    let rows = NormalizedRows::new(table);
    warn_zero_rows(&rows);
    let valid: Vec<usize> = (0..rows.rows()).filter(|&i| rows.is_valid(i)).collect();
    let m = valid.len();
    if m < 2 {
        return Err(Error::invalid("need at least two non-zero rows"));
    }
    let total = m * (m - 1) / 2;
    let samples: Vec<f64> = if total <= sample_pairs {
        let mut v = Vec::with_capacity(total);
        for a in 0..m {
            for b in a + 1..m {
                v.push(rows.cosine(valid[a], valid[b]));
            }
        }
        v
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..sample_pairs)
            .map(|_| {
                let a = rng.random_range(0..m);
                let mut b = rng.random_range(0..m - 1);
                if b >= a {
                    b += 1;
                }
                rows.cosine(valid[a], valid[b])
            })
            .collect()
    };
    tail_threshold_from_samples(&samples, k)
}

/// Adds each pair as a `sim` edge in both directions. Decoder-facing edge
/// views are unaffected.
pub fn densify(graph: &KnowledgeGraph, sim: &SimEdgeSet) -> Result<KnowledgeGraph> {
    let n = graph.num_nodes();
    let mut seen: HashSet<(NodeId, NodeId)> = graph.sim_pairs().iter().copied().collect();
    let mut pairs = graph.sim_pairs().to_vec();
    for p in &sim.pairs {
        if p.a >= n || p.b >= n {
            return Err(Error::invalid(format!("sim pair ({}, {}) outside {n} nodes", p.a, p.b)));
        }
        if p.a == p.b {
            continue;
        }
        let key = (p.a.min(p.b), p.a.max(p.b));
        if seen.insert(key) {
            pairs.push(key);
        }
    }
    let mut g = graph.clone();
    g.set_sim_pairs(pairs);
    Ok(g)
}

/// `phrase1<TAB>phrase2<TAB>similarity` rows.
pub fn write_sim_tsv(graph: &KnowledgeGraph, sim: &SimEdgeSet, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for p in &sim.pairs {
        writeln!(w, "{}\t{}\t{}", graph.nodes().phrase(p.a), graph.nodes().phrase(p.b), p.score)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sim_tsv(graph: &KnowledgeGraph, path: &Path) -> Result<SimEdgeSet> {
    let mut pairs = Vec::new();
    let mut tau = f64::INFINITY;
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(parse_err(format!("expected 3 columns, found {}", cols.len())));
        }
        let lookup = |s: &str| {
            graph
                .nodes()
                .id(&normalize_phrase(s))
                .ok_or_else(|| parse_err(format!("unknown phrase {s:?}")))
        };
        let (a, b) = (lookup(cols[0])?, lookup(cols[1])?);
        let score: f64 = cols[2].trim().parse().map_err(|e| parse_err(format!("{e}")))?;
        tau = tau.min(score);
        pairs.push(SimPair {
            a: a.min(b),
            b: a.max(b),
            score,
        });
    }
    Ok(SimEdgeSet {
        pairs,
        tau,
        criterion: ThresholdCriterion::Explicit,
        zero_norm_rows: 0,
    })
}
