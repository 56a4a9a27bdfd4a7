//! Training loop: subgraph sampling, representation fusion with
//! progressive text masking, 1-vs-all BCE with label smoothing, L2 on
//! projection weights, gradient clipping and Adam.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{score_all, FeatureActivation};
use crate::embed::NodeEmbeddingTable;
use crate::encoder::{full_view, sample_subgraph};
use crate::error::{Error, Result};
use crate::eval::{evaluate, FilterIndex, Metrics};
use crate::kg::{KnowledgeGraph, NodeId, RelId, Split};
use crate::model::{Model, ModelConfig, ModelShape, Variant};
use crate::numerics::{adam_step, clip_grad_norm, AdamConfig, AdamState, ParamKind, ParamStore, Tape, Tensor, Var};

pub const CONFIG_VERSION: u32 = 1;

/// Which way the text features are ramped during training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskDirection {
    /// Text starts fully masked and becomes fully visible at the horizon.
    #[default]
    RevealText,
    /// Text starts fully visible and is fully masked at the horizon.
    HideText,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSchedule {
    pub horizon: usize,
    pub direction: MaskDirection,
}

impl Default for MaskSchedule {
    fn default() -> Self {
        MaskSchedule {
            horizon: 100,
            direction: MaskDirection::RevealText,
        }
    }
}

impl MaskSchedule {
    /// `min(epoch / horizon, 1)` as an exact fraction `(num, den)`,
    /// mirrored for [`MaskDirection::HideText`].
    fn visible_ratio(&self, epoch: usize) -> (usize, usize) {
        let den = self.horizon.max(1);
        let ramp = if self.horizon == 0 { den } else { epoch.min(den) };
        match self.direction {
            MaskDirection::RevealText => (ramp, den),
            MaskDirection::HideText => (den - ramp, den),
        }
    }

    pub fn visible_fraction(&self, epoch: usize) -> f64 {
        let (num, den) = self.visible_ratio(epoch);
        num as f64 / den as f64
    }
}

/// A 0/1 mask over `dims` text dimensions with `fraction · dims` ones in
/// expectation. The integer part is exact; a fractional remainder is
/// resolved by one Bernoulli draw. The kept subset is uniform.
pub fn progressive_mask<R: Rng + ?Sized>(dims: usize, epoch: usize, schedule: &MaskSchedule, rng: &mut R) -> Vec<f64> {
    let (num, den) = schedule.visible_ratio(epoch);
    let whole = num * dims / den;
    let rem = num * dims % den;
    let count = whole + usize::from(rem > 0 && rng.random_range(0..den) < rem);
    let mut mask = vec![0.0; dims];
    if count == dims {
        mask.fill(1.0);
    } else {
        for i in sample(rng, dims, count) {
            mask[i] = 1.0;
        }
    }
    mask
}

/// `(1 − ε)·y + ε/|candidates|` for a multi-hot row per query.
pub fn smoothed_targets(golds: &[Vec<NodeId>], candidates: usize, epsilon: f64) -> Vec<f64> {
    let base = epsilon / candidates as f64;
    let mut out = vec![base; golds.len() * candidates];
    for (b, g) in golds.iter().enumerate() {
        for &t in g {
            out[b * candidates + t] = (1.0 - epsilon) + base;
        }
    }
    out
}

/// Mean BCE of `probs` (`B × candidates`) against smoothed multi-hot targets.
pub fn training_loss(tape: &mut Tape<'_>, probs: Var, golds: &[Vec<NodeId>], epsilon: f64) -> Result<Var> {
    let shape = tape.shape(probs).to_vec();
    if shape.len() != 2 || shape[0] != golds.len() {
        return Err(Error::shape("training_loss", &shape, &[golds.len()]));
    }
    if let Some(&bad) = golds.iter().flatten().find(|&&t| t >= shape[1]) {
        return Err(Error::invalid(format!("gold candidate {bad} outside {} candidates", shape[1])));
    }
    tape.bce_mean(probs, smoothed_targets(golds, shape[1], epsilon))
}

/// `λ · Σ ‖W‖²` over weight-kind parameters.
pub fn l2_penalty(tape: &mut Tape<'_>, lambda: f64) -> Option<Var> {
    if lambda == 0.0 {
        return None;
    }
    let ids: Vec<_> = tape
        .store()
        .iter()
        .filter(|(_, p)| p.kind == ParamKind::Weight)
        .map(|(id, _)| id)
        .collect();
    let mut total: Option<Var> = None;
    for id in ids {
        let w = tape.param(id);
        let sq = tape.sum_squares(w);
        total = Some(match total {
            Some(t) => tape.add(t, sq).expect("scalars"),
            None => sq,
        });
    }
    total.map(|t| tape.scale(t, lambda))
}

/// Every hyperparameter of a run. Missing JSON fields take their defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub version: u32,
    pub variant: Variant,
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub label_smoothing: f64,
    pub grad_clip: f64,
    pub dropout: f64,
    pub batch_size: usize,
    /// Base edges per sampled training subgraph.
    pub subgraph_edges: usize,
    pub eval_every: usize,
    pub eval_batch_size: usize,
    pub mask: MaskSchedule,
    pub embedding_dim: usize,
    pub gcn_layers: usize,
    pub channels: usize,
    pub kernel_width: usize,
    pub conv_activation: FeatureActivation,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            version: CONFIG_VERSION,
            variant: Variant::GcnConvTransE,
            epochs: 200,
            learning_rate: 1e-4,
            l2: 0.1,
            label_smoothing: 0.1,
            grad_clip: 1.0,
            dropout: 0.2,
            batch_size: 128,
            subgraph_edges: 30_000,
            eval_every: 10,
            eval_batch_size: 128,
            mask: MaskSchedule::default(),
            embedding_dim: 200,
            gcn_layers: 2,
            channels: 500,
            kernel_width: 5,
            conv_activation: FeatureActivation::Relu,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.version != CONFIG_VERSION {
            return fail(format!("unsupported config version {} (expected {CONFIG_VERSION})", self.version));
        }
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return fail(format!("l2 must be non-negative, got {}", self.l2));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return fail(format!("label_smoothing {} outside [0, 1)", self.label_smoothing));
        }
        if !(self.grad_clip > 0.0) {
            return fail(format!("grad_clip must be positive, got {}", self.grad_clip));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("subgraph_edges", self.subgraph_edges),
            ("eval_every", self.eval_every),
            ("eval_batch_size", self.eval_batch_size),
            ("embedding_dim", self.embedding_dim),
            ("gcn_layers", self.gcn_layers),
            ("channels", self.channels),
        ] {
            if v == 0 {
                return fail(format!("{name} must be at least 1"));
            }
        }
        if self.kernel_width % 2 == 0 {
            return fail(format!("kernel_width must be odd, got {}", self.kernel_width));
        }
        if self.variant == Variant::ComplEx && self.embedding_dim % 2 != 0 {
            return fail("complex needs an even embedding_dim".into());
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            variant: self.variant,
            dim: self.embedding_dim,
            layers: self.gcn_layers,
            channels: self.channels,
            kernel_width: self.kernel_width,
            activation: self.conv_activation,
            dropout: self.dropout,
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: TrainConfig = serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub epoch: usize,
    pub split: Split,
    pub metrics: Metrics,
}

pub struct TrainOutcome {
    /// Parameters of the best dev epoch (the last epoch without a dev split).
    pub model: Model,
    pub best_epoch: Option<usize>,
    pub history: Vec<MetricRow>,
    /// Mean minibatch loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub optimizer: AdamState,
}

pub const METRIC_CSV_HEADER: &str = "epoch,split,mrr,hits1,hits3,hits10";

pub fn write_metric_csv<W: Write>(rows: &[MetricRow], mut w: W) -> Result<()> {
    writeln!(w, "{METRIC_CSV_HEADER}")?;
    for r in rows {
        let m = r.metrics;
        writeln!(
            w,
            "{},{},{:.6},{:.6},{:.6},{:.6}",
            r.epoch, r.split, m.mrr, m.hits1, m.hits3, m.hits10
        )?;
    }
    Ok(())
}

pub fn save_metric_csv(rows: &[MetricRow], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_metric_csv(rows, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

/// `(e1, rel) → targets` in view-local ids, ordered by prefix.
fn prefixes(targets: &[crate::kg::Triple]) -> Vec<((usize, RelId), Vec<usize>)> {
    let mut map: BTreeMap<(usize, RelId), Vec<usize>> = BTreeMap::new();
    for t in targets {
        let e = map.entry((t.head, t.rel)).or_default();
        if !e.contains(&t.tail) {
            e.push(t.tail);
        }
    }
    map.into_iter().collect()
}

/// One optimizer step on a batch of prefixes; returns the loss.
#[allow(clippy::too_many_arguments)]
fn train_batch(
    model: &mut Model,
    view: &crate::encoder::GraphView,
    text: Option<&Tensor>,
    batch: &[((usize, RelId), Vec<usize>)],
    config: &TrainConfig,
    adam: &mut AdamState,
    adam_cfg: &AdamConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let grads = {
        let mut tape = Tape::new(&model.params);
        let reprs = model.node_reprs(&mut tape, view, text)?;
        let heads: Vec<usize> = batch.iter().map(|((h, _), _)| *h).collect();
        let rels: Vec<RelId> = batch.iter().map(|((_, r), _)| *r).collect();
        let golds: Vec<Vec<usize>> = batch.iter().map(|(_, g)| g.clone()).collect();
        let e1 = tape.index_rows(reprs, &heads)?;
        let q = model.query(&mut tape, e1, &rels, true, rng)?;
        let logits = score_all(&mut tape, q, reprs)?;
        let probs = tape.sigmoid(logits);
        let mut loss = training_loss(&mut tape, probs, &golds, config.label_smoothing)?;
        if let Some(pen) = l2_penalty(&mut tape, config.l2) {
            loss = tape.add(loss, pen)?;
        }
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("loss {value}")));
        }
        (tape.backward(loss)?.into_params(), value)
    };
    let (mut g, value) = grads;
    clip_grad_norm(&mut g, config.grad_clip);
    adam_step(&mut model.params, &g, adam, adam_cfg)?;
    Ok(value)
}

/// Trains from scratch. Dev metrics are recorded every `eval_every` epochs
/// and at the last epoch; the parameters with the best dev MRR are kept
/// and, when a test split exists, scored once on it.
pub fn train(graph: &KnowledgeGraph, text: Option<&NodeEmbeddingTable>, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let variant = config.variant;
    if variant.uses_text() && text.is_none() {
        return Err(Error::Config(format!("variant {variant} needs a node embedding file")));
    }
    let text = if variant.uses_text() { text } else { None };
    if graph.split(Split::Train).is_empty() {
        return Err(Error::invalid("no training edges"));
    }
    let mut model = Model::new(config.model_config(), ModelShape::of(graph, text), config.seed)?;
    let mut adam = AdamState::new(&model.params);
    let adam_cfg = AdamConfig {
        lr: config.learning_rate,
        ..AdamConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let text_full = text.map(|t| t.to_tensor());
    let filter = FilterIndex::build(graph);
    let has_dev = !graph.split(Split::Dev).is_empty();
    let with_sim = variant.uses_sim();

    let mut history = Vec::new();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ParamStore)> = None;

    for epoch in 0..config.epochs {
        let view = if config.subgraph_edges >= graph.split(Split::Train).len() {
            full_view(graph, with_sim)
        } else {
            sample_subgraph(graph, config.subgraph_edges, with_sim, &mut rng)?
        };
        let view_text = match &text_full {
            Some(t) => Some(t.select_rows(view.nodes())?),
            None => None,
        };
        let mut queries = prefixes(&view.targets);
        queries.shuffle(&mut rng);
        let mut total = 0.0;
        let batches = queries.len().div_ceil(config.batch_size);
        for (b, batch) in queries.chunks(config.batch_size).enumerate() {
            let masked = match &view_text {
                Some(t) if variant.is_concat() => {
                    let mask = progressive_mask(t.cols(), epoch, &config.mask, &mut rng);
                    let mut m = t.clone();
                    for r in 0..m.rows() {
                        for (v, k) in m.row_mut(r).iter_mut().zip(&mask) {
                            *v *= k;
                        }
                    }
                    Some(m)
                }
                Some(t) => Some(t.clone()),
                None => None,
            };
            let loss = train_batch(
                &mut model,
                &view,
                masked.as_ref(),
                batch,
                config,
                &mut adam,
                &adam_cfg,
                &mut rng,
            )
            .map_err(|e| match e {
                Error::NonFinite(what) => Error::NonFinite(format!("{what} at epoch {} batch {b}", epoch + 1)),
                other => other,
            })?;
            total += loss;
        }
        let mean_loss = total / batches.max(1) as f64;
        epoch_losses.push(mean_loss);
        let done = epoch + 1;
        log::debug!("epoch {done}: loss {mean_loss:.6}");

        if has_dev && (done % config.eval_every == 0 || done == config.epochs) {
            let report = evaluate(&model, graph, text, Split::Dev, &filter, config.eval_batch_size)?;
            log::info!("epoch {done}: dev mrr {:.4}", report.average.mrr);
            history.push(MetricRow {
                epoch: done,
                split: Split::Dev,
                metrics: report.average,
            });
            if best.as_ref().is_none_or(|(m, _, _)| report.average.mrr > *m) {
                best = Some((report.average.mrr, done, model.params.clone()));
            }
        }
    }

    let best_epoch = match best {
        Some((_, epoch, params)) => {
            model.params.copy_values_from(&params)?;
            Some(epoch)
        }
        None => None,
    };
    if !graph.split(Split::Test).is_empty() {
        let report = evaluate(&model, graph, text, Split::Test, &filter, config.eval_batch_size)?;
        history.push(MetricRow {
            epoch: best_epoch.unwrap_or(config.epochs),
            split: Split::Test,
            metrics: report.average,
        });
    }
    Ok(TrainOutcome {
        model,
        best_epoch,
        history,
        epoch_losses,
        optimizer: adam,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_fractions_at_checkpoints() {
        let s = MaskSchedule::default();
        let f: Vec<f64> = [0, 50, 100, 150].iter().map(|&e| s.visible_fraction(e)).collect();
        assert_eq!(f, vec![0.0, 0.5, 1.0, 1.0]);
    }

    #[test]
    fn mask_count_exact_when_integral() {
        let s = MaskSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let m = progressive_mask(512, 50, &s, &mut rng);
            assert_eq!(m.iter().filter(|&&v| v == 1.0).count(), 256);
        }
        assert!(progressive_mask(64, 0, &s, &mut rng).iter().all(|&v| v == 0.0));
        assert!(progressive_mask(64, 170, &s, &mut rng).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn hide_direction_mirrors_reveal() {
        let s = MaskSchedule {
            horizon: 100,
            direction: MaskDirection::HideText,
        };
        assert_eq!(s.visible_fraction(0), 1.0);
        assert_eq!(s.visible_fraction(25), 0.75);
        assert_eq!(s.visible_fraction(300), 0.0);
    }

    #[test]
    fn fractional_mask_count_matches_expectation() {
        // 3 of 100 epochs over 10 dims: 0.3 expected visible
        let s = MaskSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let trials = 20_000;
        let total: usize = (0..trials)
            .map(|_| progressive_mask(10, 3, &s, &mut rng).iter().filter(|&&v| v == 1.0).count())
            .sum();
        let mean = total as f64 / trials as f64;
        assert!((mean - 0.3).abs() < 0.02, "{mean}");
    }

    #[test]
    fn smoothed_three_candidates() {
        let t = smoothed_targets(&[vec![1]], 3, 0.1);
        let third = 0.1 / 3.0;
        assert_eq!(t, vec![third, 0.9 + third, third]);
    }

    #[test]
    fn default_config_round_trips_and_validates() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        let json = serde_json::to_string(&c).unwrap();
        assert_eq!(TrainConfig::from_json(&json).unwrap(), c);
        assert!(TrainConfig::from_json(r#"{"epochs": 5, "bogus": 1}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"kernel_width": 4}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"version": 9}"#).is_err());
        assert_eq!(TrainConfig::from_json(r#"{"epochs": 5}"#).unwrap().epochs, 5);
    }

    #[test]
    fn metric_csv_layout() {
        let rows = vec![MetricRow {
            epoch: 10,
            split: Split::Dev,
            metrics: Metrics {
                mrr: 0.5,
                hits1: 0.25,
                hits3: 0.5,
                hits10: 1.0,
            },
        }];
        let mut buf = Vec::new();
        write_metric_csv(&rows, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "epoch,split,mrr,hits1,hits3,hits10\n10,dev,0.500000,0.250000,0.500000,1.000000\n"
        );
    }
}
