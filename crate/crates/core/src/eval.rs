//! Filtered ranking evaluation, the graph-embedding permutation test and
//! the density ablation harness.

use std::collections::{HashMap, HashSet};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embed::NodeEmbeddingTable;
use crate::error::{Error, Result};
use crate::kg::{compute_stats, drop_edges_to_density, KnowledgeGraph, NodeId, RelId, Split};
use crate::model::{FrozenModel, Model};
use crate::numerics::Tensor;
use crate::train::{train, TrainConfig};

/// Every known answer for each `(entity, relation)` prefix, over all
/// splits and both directions.
#[derive(Clone, Debug, Default)]
pub struct FilterIndex {
    answers: HashMap<(NodeId, RelId), HashSet<NodeId>>,
}

impl FilterIndex {
    pub fn build(graph: &KnowledgeGraph) -> Self {
        let mut answers: HashMap<(NodeId, RelId), HashSet<NodeId>> = HashMap::new();
        for t in graph.all_base_edges() {
            answers.entry((t.head, t.rel)).or_default().insert(t.tail);
            let inv = graph.inverse_of(&t);
            answers.entry((inv.head, inv.rel)).or_default().insert(inv.tail);
        }
        FilterIndex { answers }
    }

    pub fn answers(&self, entity: NodeId, rel: RelId) -> Option<&HashSet<NodeId>> {
        self.answers.get(&(entity, rel))
    }

    pub fn contains(&self, entity: NodeId, rel: RelId, target: NodeId) -> bool {
        self.answers(entity, rel).is_some_and(|s| s.contains(&target))
    }
}

/// `1 + #{higher} + #{tied}/2` over candidates outside `filtered`. The gold
/// candidate itself is never filtered.
pub fn filtered_rank(scores: &[f64], gold: NodeId, filtered: Option<&HashSet<NodeId>>) -> Result<f64> {
    let g = *scores
        .get(gold)
        .ok_or_else(|| Error::invalid(format!("gold node {gold} outside {} candidates", scores.len())))?;
    if g.is_nan() {
        return Err(Error::NonFinite(format!("score of gold node {gold}")));
    }
    let (mut higher, mut tied) = (0usize, 0usize);
    for (j, &s) in scores.iter().enumerate() {
        if j == gold || filtered.is_some_and(|f| f.contains(&j)) {
            continue;
        }
        if s > g {
            higher += 1;
        } else if s == g {
            tied += 1;
        }
    }
    Ok(1.0 + higher as f64 + tied as f64 / 2.0)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
}

impl Metrics {
    pub fn from_ranks(ranks: &[f64]) -> Self {
        let n = ranks.len().max(1) as f64;
        let hits = |k: f64| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
        Metrics {
            mrr: ranks.iter().map(|r| 1.0 / r).sum::<f64>() / n,
            hits1: hits(1.0),
            hits3: hits(3.0),
            hits10: hits(10.0),
        }
    }

    pub fn mean(a: &Metrics, b: &Metrics) -> Self {
        Metrics {
            mrr: (a.mrr + b.mrr) / 2.0,
            hits1: (a.hits1 + b.hits1) / 2.0,
            hits3: (a.hits3 + b.hits3) / 2.0,
            hits10: (a.hits10 + b.hits10) / 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionReport {
    pub metrics: Metrics,
    pub ranks: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    /// `(e1, rel) → e2`.
    pub forward: DirectionReport,
    /// `(e2, rel_inv) → e1`.
    pub backward: DirectionReport,
    pub average: Metrics,
}

/// Something that scores every node as the answer to a batch of queries.
pub trait Scorer: Sync {
    fn num_candidates(&self) -> usize;

    /// Row-major `B × num_candidates` scores. `batch` is the index of the
    /// batch within the evaluation run.
    fn score_batch(&self, batch: usize, heads: &[NodeId], rels: &[RelId]) -> Result<Tensor>;
}

impl Scorer for FrozenModel<'_> {
    fn num_candidates(&self) -> usize {
        self.reprs().rows()
    }

    fn score_batch(&self, _batch: usize, heads: &[NodeId], rels: &[RelId]) -> Result<Tensor> {
        self.score_heads(heads, rels)
    }
}

/// Shuffles the graph-embedding columns of the query rows within each batch.
pub struct ShuffledGraphScorer<'a, 'm> {
    inner: &'a FrozenModel<'m>,
    seed: u64,
}

impl<'a, 'm> ShuffledGraphScorer<'a, 'm> {
    pub fn new(inner: &'a FrozenModel<'m>, seed: u64) -> Result<Self> {
        if inner.model().gcn().is_none() {
            return Err(Error::invalid(format!(
                "variant {} has no graph embeddings to permute",
                inner.model().variant()
            )));
        }
        Ok(ShuffledGraphScorer { inner, seed })
    }
}

impl Scorer for ShuffledGraphScorer<'_, '_> {
    fn num_candidates(&self) -> usize {
        self.inner.num_candidates()
    }

    fn score_batch(&self, batch: usize, heads: &[NodeId], rels: &[RelId]) -> Result<Tensor> {
        let reprs = self.inner.reprs();
        let gd = self.inner.model().graph_dim();
        let mut perm: Vec<usize> = (0..heads.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(batch as u64);
        perm.shuffle(&mut rng);
        let mut rows = reprs.select_rows(heads)?;
        for (b, &src) in perm.iter().enumerate() {
            rows.row_mut(b)[..gd].copy_from_slice(&reprs.row(heads[src])[..gd]);
        }
        self.inner.score_rows(rows, rels)
    }
}

pub const DEFAULT_EVAL_BATCH: usize = 128;

/// Queries of one direction: `(e1, rel, gold)`.
fn direction_queries(graph: &KnowledgeGraph, split: Split, backward: bool) -> Vec<(NodeId, RelId, NodeId)> {
    graph
        .split(split)
        .iter()
        .map(|t| {
            if backward {
                let inv = graph.inverse_of(t);
                (inv.head, inv.rel, inv.tail)
            } else {
                (t.head, t.rel, t.tail)
            }
        })
        .collect()
}

fn rank_direction<S: Scorer + ?Sized>(
    scorer: &S,
    queries: &[(NodeId, RelId, NodeId)],
    filter: &FilterIndex,
    batch_size: usize,
    batch_offset: usize,
) -> Result<Vec<f64>> {
    let n = scorer.num_candidates();
    let chunks: Vec<(usize, &[(NodeId, RelId, NodeId)])> = queries.chunks(batch_size).enumerate().collect();
    let run = |&(bi, chunk): &(usize, &[(NodeId, RelId, NodeId)])| -> Result<Vec<f64>> {
        let heads: Vec<NodeId> = chunk.iter().map(|q| q.0).collect();
        let rels: Vec<RelId> = chunk.iter().map(|q| q.1).collect();
        let scores = scorer.score_batch(batch_offset + bi, &heads, &rels)?;
        if scores.shape() != [chunk.len(), n] {
            return Err(Error::shape("score_batch", scores.shape(), &[chunk.len(), n]));
        }
        chunk
            .iter()
            .enumerate()
            .map(|(b, &(e1, rel, gold))| filtered_rank(scores.row(b), gold, filter.answers(e1, rel)))
            .collect()
    };
    #[cfg(feature = "parallel")]
    let per_batch: Vec<Result<Vec<f64>>> = {
        use rayon::prelude::*;
        chunks.par_iter().map(run).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let per_batch: Vec<Result<Vec<f64>>> = chunks.iter().map(run).collect();
    let mut ranks = Vec::with_capacity(queries.len());
    for r in per_batch {
        ranks.extend(r?);
    }
    Ok(ranks)
}

/// Ranks every edge of `split` in both directions.
pub fn evaluate_scorer<S: Scorer + ?Sized>(
    scorer: &S,
    graph: &KnowledgeGraph,
    split: Split,
    filter: &FilterIndex,
    batch_size: usize,
) -> Result<RankingReport> {
    if batch_size == 0 {
        return Err(Error::invalid("evaluation batch size must be at least 1"));
    }
    let fwd = direction_queries(graph, split, false);
    if fwd.is_empty() {
        return Err(Error::invalid(format!("the {split} split is empty")));
    }
    let bwd = direction_queries(graph, split, true);
    let forward_batches = fwd.len().div_ceil(batch_size);
    let f_ranks = rank_direction(scorer, &fwd, filter, batch_size, 0)?;
    let b_ranks = rank_direction(scorer, &bwd, filter, batch_size, forward_batches)?;
    let forward = DirectionReport {
        metrics: Metrics::from_ranks(&f_ranks),
        ranks: f_ranks,
    };
    let backward = DirectionReport {
        metrics: Metrics::from_ranks(&b_ranks),
        ranks: b_ranks,
    };
    let average = Metrics::mean(&forward.metrics, &backward.metrics);
    Ok(RankingReport {
        forward,
        backward,
        average,
    })
}

/// Full-graph evaluation of a trained model.
pub fn evaluate(
    model: &Model,
    graph: &KnowledgeGraph,
    text: Option<&NodeEmbeddingTable>,
    split: Split,
    filter: &FilterIndex,
    batch_size: usize,
) -> Result<RankingReport> {
    let frozen = model.freeze(graph, text)?;
    evaluate_scorer(&frozen, graph, split, filter, batch_size)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PermutationReport {
    pub base: Metrics,
    pub shuffled: Metrics,
    /// Shuffled minus unshuffled MRR.
    pub delta_mrr: f64,
}

pub fn permutation_test(
    model: &Model,
    graph: &KnowledgeGraph,
    text: Option<&NodeEmbeddingTable>,
    split: Split,
    filter: &FilterIndex,
    batch_size: usize,
    seed: u64,
) -> Result<PermutationReport> {
    let frozen = model.freeze(graph, text)?;
    let shuffled_scorer = ShuffledGraphScorer::new(&frozen, seed)?;
    let base = evaluate_scorer(&frozen, graph, split, filter, batch_size)?.average;
    let shuffled = evaluate_scorer(&shuffled_scorer, graph, split, filter, batch_size)?.average;
    Ok(PermutationReport {
        base,
        shuffled,
        delta_mrr: shuffled.mrr - base.mrr,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub target_density: f64,
    pub density: f64,
    pub base_edges: usize,
    pub best_epoch: Option<usize>,
    pub report: Metrics,
}

/// For each target density (descending): drop training edges, retrain from
/// scratch with the same configuration and report test metrics. The
/// filter index always comes from the undropped graph.
pub fn density_ablation(
    graph: &KnowledgeGraph,
    text: Option<&NodeEmbeddingTable>,
    densities: &[f64],
    config: &TrainConfig,
) -> Result<Vec<AblationRow>> {
    if densities.windows(2).any(|w| w[0] < w[1]) {
        return Err(Error::invalid("densities must be sorted in descending order"));
    }
    let filter = FilterIndex::build(graph);
    let mut rows = Vec::with_capacity(densities.len());
    for &target in densities {
        let dropped = drop_edges_to_density(graph, target, config.seed)?;
        let stats = compute_stats(&dropped);
        log::info!("ablation: density {:.3e} with {} base edges", stats.density, stats.edges);
        let outcome = train(&dropped, text, config)?;
        let report = evaluate(
            &outcome.model,
            &dropped,
            text,
            Split::Test,
            &filter,
            config.eval_batch_size,
        )?;
        rows.push(AblationRow {
            target_density: target,
            density: stats.density,
            base_edges: stats.edges,
            best_epoch: outcome.best_epoch,
            report: report.average,
        });
    }
    Ok(rows)
}

pub fn write_ablation_csv<W: Write>(rows: &[AblationRow], mut w: W) -> Result<()> {
    writeln!(w, "target_density,density,edges,mrr,hits1,hits3,hits10")?;
    for r in rows {
        writeln!(
            w,
            "{:e},{:e},{},{:.6},{:.6},{:.6},{:.6}",
            r.target_density, r.density, r.base_edges, r.report.mrr, r.report.hits1, r.report.hits3, r.report.hits10
        )?;
    }
    Ok(())
}

pub fn save_ablation_csv(rows: &[AblationRow], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_ablation_csv(rows, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

/// Ranks starting at 1, ties sharing their mean rank.
fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[order[k]] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation (Pearson on tie-averaged ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::invalid("spearman needs two equal-length samples of size ≥ 2"));
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(0.0);
    }
    Ok(sxy / (sxx * syy).sqrt())
}
