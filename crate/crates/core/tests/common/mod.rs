#![allow(dead_code)]

pub mod gradcheck;

use std::collections::BTreeSet;

use kgc_core::kg::{KnowledgeGraph, RawTuple};
use kgc_core::model::Variant;
use kgc_core::train::TrainConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tuple(rel: &str, head: &str, tail: &str) -> RawTuple {
    RawTuple {
        rel: rel.into(),
        head: head.into(),
        tail: tail.into(),
    }
}

/// `edges` distinct random tuples over `nodes` nodes and `relations`
/// relations. Every node appears in at least one edge.
pub fn random_tuples(nodes: usize, relations: usize, edges: usize, seed: u64) -> Vec<RawTuple> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(edges);
    let mut push = |h: usize, r: usize, t: usize, out: &mut Vec<RawTuple>| {
        if h != t && seen.insert((h, r, t)) {
            out.push(tuple(&format!("r{r}"), &format!("node {h}"), &format!("node {t}")));
            true
        } else {
            false
        }
    };
    for h in 0..nodes {
        loop {
            let (r, t) = (rng.random_range(0..relations), rng.random_range(0..nodes));
            if push(h, r, t, &mut out) {
                break;
            }
        }
    }
    while out.len() < edges {
        let (h, r, t) = (
            rng.random_range(0..nodes),
            rng.random_range(0..relations),
            rng.random_range(0..nodes),
        );
        push(h, r, t, &mut out);
    }
    out
}

pub fn random_graph(nodes: usize, relations: usize, edges: usize, seed: u64) -> KnowledgeGraph {
    KnowledgeGraph::from_raw(&random_tuples(nodes, relations, edges, seed), &[], &[]).unwrap()
}

/// Nodes in clusters; relation `r` links cluster `c` to cluster
/// `(c + r + 1) mod clusters`, tails uniform inside that cluster. Returns
/// `(train, test)` with `test_every`-th tuple held out.
pub fn clustered_tuples(
    nodes: usize,
    clusters: usize,
    relations: usize,
    per_node: usize,
    test_every: usize,
    seed: u64,
) -> (Vec<RawTuple>, Vec<RawTuple>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = nodes / clusters;
    let mut seen = BTreeSet::new();
    let mut all = Vec::new();
    for h in 0..nodes {
        let c = h / size;
        let mut made = 0;
        while made < per_node {
            let r = rng.random_range(0..relations);
            let target = (c + r + 1) % clusters;
            let t = target * size + rng.random_range(0..size);
            if seen.insert((h, r, t)) {
                all.push(tuple(&format!("r{r}"), &format!("n{h}"), &format!("n{t}")));
                made += 1;
            }
        }
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, t) in all.into_iter().enumerate() {
        if i % test_every == test_every - 1 {
            test.push(t);
        } else {
            train.push(t);
        }
    }
    (train, test)
}

/// Small, fast, regularisation-free settings for memorisation checks.
pub fn toy_config(variant: Variant) -> TrainConfig {
    TrainConfig {
        variant,
        epochs: 500,
        learning_rate: 0.01,
        l2: 0.0,
        label_smoothing: 0.0,
        dropout: 0.0,
        embedding_dim: 32,
        gcn_layers: 1,
        channels: 16,
        kernel_width: 3,
        eval_every: 50,
        seed: 7,
        ..TrainConfig::default()
    }
}

/// Nodes in clusters; each `(cluster, relation)` owns `prototypes` tail
/// nodes drawn from cluster `(c + r + 1) mod clusters`, and every node links
/// to `per_relation` of its cluster's prototypes for each relation. A
/// node's held-out edges are predictable from its cluster, which its other
/// edges reveal. Returns `(train, dev, test)`: every `holdout_every`-th tuple
/// is held out, alternating between dev and test.
pub fn prototype_tuples(
    nodes: usize,
    clusters: usize,
    relations: usize,
    prototypes: usize,
    per_relation: usize,
    holdout_every: usize,
    seed: u64,
) -> (Vec<RawTuple>, Vec<RawTuple>, Vec<RawTuple>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = nodes / clusters;
    let protos: Vec<Vec<Vec<usize>>> = (0..clusters)
        .map(|c| {
            (0..relations)
                .map(|r| {
                    let target = (c + r + 1) % clusters;
                    rand::seq::index::sample(&mut rng, size, prototypes)
                        .into_iter()
                        .map(|i| target * size + i)
                        .collect()
                })
                .collect()
        })
        .collect();
    let mut all = Vec::new();
    for h in 0..nodes {
        let c = h / size;
        for r in 0..relations {
            for k in rand::seq::index::sample(&mut rng, prototypes, per_relation) {
                let t = protos[c][r][k];
                all.push(tuple(&format!("r{r}"), &format!("n{h}"), &format!("n{t}")));
            }
        }
    }
    use rand::seq::SliceRandom;
    all.shuffle(&mut rng);
    let (mut train, mut dev, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (i, t) in all.into_iter().enumerate() {
        if i % holdout_every == holdout_every - 1 {
            if (i / holdout_every) % 2 == 0 {
                dev.push(t);
            } else {
                test.push(t);
            }
        } else {
            train.push(t);
        }
    }
    (train, dev, test)
}
