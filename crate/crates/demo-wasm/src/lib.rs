//! Browser bindings. Every export takes plain numbers and returns a JSON
//! string, so the page needs no generated glue beyond `wasm-bindgen`.

use kgc_core::embed::{choose_from_counts, grid_counts, grid_value, NodeEmbeddingTable};
use kgc_core::eval::density_ablation;
use kgc_core::kg::{compute_stats, KnowledgeGraph, RawTuple};
use kgc_core::model::Variant;
use kgc_core::train::{progressive_mask, MaskDirection, MaskSchedule, TrainConfig};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Debug, Serialize)]
pub struct ThresholdCurve {
    /// Grid thresholds 0.00 … 1.00.
    pub thresholds: Vec<f64>,
    /// Pairs with cosine at or above each threshold.
    pub pairs: Vec<u64>,
    pub cap: u64,
    pub chosen_tau: f64,
    pub chosen_pairs: u64,
    pub over_cap: bool,
}

/// `clusters` Gaussian blobs of `rows` vectors in `dim` dimensions; a
/// larger `spread` makes blobs overlap.
pub fn clustered_embeddings(rows: usize, dim: usize, clusters: usize, spread: f64, seed: u64) -> NodeEmbeddingTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    let centers: Vec<Vec<f64>> = (0..clusters.max(1)).map(|_| (0..dim).map(|_| draw(&mut rng)).collect()).collect();
    let mut data = Vec::with_capacity(rows * dim);
    for i in 0..rows {
        let c = &centers[i % centers.len()];
        data.extend(c.iter().map(|&v| (v + spread * draw(&mut rng)) as f32));
    }
    NodeEmbeddingTable::new(rows, dim, data).expect("finite by construction")
}

pub fn threshold_curve(rows: usize, dim: usize, clusters: usize, spread: f64, cap: u64, seed: u64) -> Result<ThresholdCurve, String> {
    if rows < 2 || dim == 0 || rows > 4000 || dim > 512 {
        return Err("need 2..=4000 rows and 1..=512 dimensions".into());
    }
    let table = clustered_embeddings(rows, dim, clusters, spread, seed);
    let counts = grid_counts(&table, 256);
    let choice = choose_from_counts(&counts, cap);
    Ok(ThresholdCurve {
        thresholds: (0..=100).map(grid_value).collect(),
        pairs: counts.to_vec(),
        cap,
        chosen_tau: choice.tau,
        chosen_pairs: choice.pairs,
        over_cap: choice.over_cap,
    })
}

#[derive(Debug, Serialize)]
pub struct MaskTrace {
    pub epochs: Vec<usize>,
    pub fraction: Vec<f64>,
    /// Visible dimensions in one sampled mask per epoch.
    pub visible: Vec<usize>,
    /// The last sampled mask, for drawing.
    pub last_mask: Vec<u8>,
}

pub fn mask_trace(dims: usize, horizon: usize, hide: bool, epochs: usize, seed: u64) -> Result<MaskTrace, String> {
    if dims == 0 || dims > 4096 || epochs > 2000 {
        return Err("need 1..=4096 dimensions and at most 2000 epochs".into());
    }
    let schedule = MaskSchedule {
        horizon,
        direction: if hide { MaskDirection::HideText } else { MaskDirection::RevealText },
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trace = MaskTrace {
        epochs: Vec::new(),
        fraction: Vec::new(),
        visible: Vec::new(),
        last_mask: Vec::new(),
    };
    for e in 0..=epochs {
        let mask = progressive_mask(dims, e, &schedule, &mut rng);
        trace.epochs.push(e);
        trace.fraction.push(schedule.visible_fraction(e));
        trace.visible.push(mask.iter().filter(|&&m| m == 1.0).count());
        trace.last_mask = mask.iter().map(|&m| m as u8).collect();
    }
    Ok(trace)
}

#[derive(Debug, Serialize)]
pub struct AblationPoint {
    pub density: f64,
    pub edges: usize,
    pub mrr: f64,
    pub hits10: f64,
}

/// A graph whose held-out edges are predictable: nodes sit in clusters,
/// and each (cluster, relation) links to a few fixed targets.
pub fn prototype_graph(nodes: usize, clusters: usize, relations: usize, seed: u64) -> Result<KnowledgeGraph, String> {
    let clusters = clusters.clamp(1, nodes.max(1));
    let size = nodes / clusters;
    if size < 3 || relations == 0 {
        return Err("need at least 3 nodes per cluster and one relation".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let targets: Vec<Vec<Vec<usize>>> = (0..clusters)
        .map(|c| {
            (0..relations)
                .map(|r| {
                    let to = (c + r + 1) % clusters;
                    sample(&mut rng, size, 3).into_iter().map(|i| to * size + i).collect()
                })
                .collect()
        })
        .collect();
    let mut all = Vec::new();
    for h in 0..clusters * size {
        let c = h / size;
        for (r, options) in targets[c].iter().enumerate() {
            for k in sample(&mut rng, options.len(), 2) {
                let t = options[k];
                if t != h {
                    all.push(RawTuple {
                        rel: format!("r{r}"),
                        head: format!("n{h}"),
                        tail: format!("n{t}"),
                    });
                }
            }
        }
    }
    let (mut train, mut dev, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for t in all {
        match rng.random_range(0..10) {
            0 => dev.push(t),
            1 => test.push(t),
            _ => train.push(t),
        }
    }
    KnowledgeGraph::from_raw(&train, &dev, &test).map_err(|e| e.to_string())
}

pub fn small_ablation(nodes: usize, levels: &[f64], epochs: usize, seed: u64) -> Result<Vec<AblationPoint>, String> {
    if !(30..=400).contains(&nodes) || epochs == 0 || epochs > 100 {
        return Err("need 30..=400 nodes and 1..=100 epochs".into());
    }
    let graph = prototype_graph(nodes, (nodes / 20).max(2), 3, seed)?;
    let d0 = compute_stats(&graph).density;
    let mut fractions: Vec<f64> = levels.iter().copied().filter(|f| *f > 0.0 && *f <= 1.0).collect();
    fractions.sort_by(|a, b| b.total_cmp(a));
    if fractions.is_empty() {
        return Err("give density fractions in (0, 1]".into());
    }
    let densities: Vec<f64> = fractions.iter().map(|f| f * d0).collect();
    let config = TrainConfig {
        variant: Variant::ConvTransE,
        epochs,
        learning_rate: 0.01,
        l2: 0.0,
        label_smoothing: 0.0,
        dropout: 0.2,
        batch_size: 32,
        eval_every: epochs.div_ceil(4),
        embedding_dim: 16,
        channels: 8,
        kernel_width: 3,
        seed,
        ..TrainConfig::default()
    };
    let rows = density_ablation(&graph, None, &densities, &config).map_err(|e| e.to_string())?;
    Ok(rows
        .into_iter()
        .map(|r| AblationPoint {
            density: r.density,
            edges: r.base_edges,
            mrr: r.report.mrr,
            hits10: r.report.hits10,
        })
        .collect())
}

fn to_json<T: Serialize>(r: Result<T, String>) -> Result<String, JsValue> {
    r.and_then(|v| serde_json::to_string(&v).map_err(|e| e.to_string()))
        .map_err(|e| JsValue::from_str(&e))
}

/// Pair counts over the 0.01 threshold grid and the cap-mode choice.
#[wasm_bindgen(js_name = thresholdCurve)]
pub fn threshold_curve_js(rows: usize, dim: usize, clusters: usize, spread: f64, cap: u32, seed: u32) -> Result<String, JsValue> {
    to_json(threshold_curve(rows, dim, clusters, spread, cap as u64, seed as u64))
}

/// Visible text dimensions per epoch under the progressive mask.
#[wasm_bindgen(js_name = maskTrace)]
pub fn mask_trace_js(dims: usize, horizon: usize, hide: bool, epochs: usize, seed: u32) -> Result<String, JsValue> {
    to_json(mask_trace(dims, horizon, hide, epochs, seed as u64))
}

/// Trains a small ConvTransE at each density fraction of a synthetic graph.
#[wasm_bindgen(js_name = densityAblation)]
pub fn density_ablation_js(nodes: usize, fractions: Vec<f64>, epochs: usize, seed: u32) -> Result<String, JsValue> {
    to_json(small_ablation(nodes, &fractions, epochs, seed as u64))
}
