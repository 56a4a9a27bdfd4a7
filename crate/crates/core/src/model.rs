//! Model variants: how node representations are built and which decoder
//! scores them.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{score_all, ComplExParams, ConvTransEParams, DistMultParams, DropoutRates, FeatureActivation};
use crate::embed::NodeEmbeddingTable;
use crate::encoder::{encode, full_view, GcnParams, GraphView};
use crate::error::{Error, Result};
use crate::kg::{KnowledgeGraph, NodeId, RelId};
use crate::numerics::{dot, AdamState, Checkpoint, ParamId, ParamKind, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "convtranse")]
    ConvTransE,
    #[serde(rename = "gcn+convtranse")]
    GcnConvTransE,
    #[serde(rename = "sim+gcn+convtranse")]
    SimGcnConvTransE,
    #[serde(rename = "bert+convtranse")]
    BertConvTransE,
    #[serde(rename = "gcn+bert+convtranse")]
    GcnBertConvTransE,
    #[serde(rename = "sim+gcn+bert+convtranse")]
    SimGcnBertConvTransE,
    #[serde(rename = "distmult")]
    DistMult,
    #[serde(rename = "complex")]
    ComplEx,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::ConvTransE,
        Variant::GcnConvTransE,
        Variant::SimGcnConvTransE,
        Variant::BertConvTransE,
        Variant::GcnBertConvTransE,
        Variant::SimGcnBertConvTransE,
        Variant::DistMult,
        Variant::ComplEx,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::ConvTransE => "convtranse",
            Variant::GcnConvTransE => "gcn+convtranse",
            Variant::SimGcnConvTransE => "sim+gcn+convtranse",
            Variant::BertConvTransE => "bert+convtranse",
            Variant::GcnBertConvTransE => "gcn+bert+convtranse",
            Variant::SimGcnBertConvTransE => "sim+gcn+bert+convtranse",
            Variant::DistMult => "distmult",
            Variant::ComplEx => "complex",
        }
    }

    pub fn uses_gcn(self) -> bool {
        matches!(
            self,
            Variant::GcnConvTransE | Variant::SimGcnConvTransE | Variant::GcnBertConvTransE | Variant::SimGcnBertConvTransE
        )
    }

    pub fn uses_sim(self) -> bool {
        matches!(self, Variant::SimGcnConvTransE | Variant::SimGcnBertConvTransE)
    }

    pub fn uses_text(self) -> bool {
        matches!(
            self,
            Variant::BertConvTransE | Variant::GcnBertConvTransE | Variant::SimGcnBertConvTransE
        )
    }

    /// Node representations come from a free lookup table.
    pub fn uses_entity_table(self) -> bool {
        matches!(self, Variant::ConvTransE | Variant::DistMult | Variant::ComplEx)
    }

    /// Graph and text features are concatenated (progressive masking applies).
    pub fn is_concat(self) -> bool {
        self.uses_gcn() && self.uses_text()
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace(' ', "");
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == key)
            .ok_or_else(|| Error::Config(format!("unknown model variant {s:?}")))
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Width of graph embeddings (GCN or lookup table).
    pub dim: usize,
    pub layers: usize,
    pub channels: usize,
    pub kernel_width: usize,
    #[serde(default)]
    pub activation: FeatureActivation,
    pub dropout: f64,
}

/// Dataset-dependent sizes a model is built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub num_nodes: usize,
    pub base_relations: usize,
    pub text_dim: usize,
}

impl ModelShape {
    pub fn of(graph: &KnowledgeGraph, text: Option<&NodeEmbeddingTable>) -> Self {
        ModelShape {
            num_nodes: graph.num_nodes(),
            base_relations: graph.relations().base_count(),
            text_dim: text.map_or(0, |t| t.dim()),
        }
    }
}

#[derive(Clone, Debug)]
enum Decoder {
    ConvTransE(ConvTransEParams),
    DistMult(DistMultParams),
    ComplEx(ComplExParams),
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    shape: ModelShape,
    pub params: ParamStore,
    entity: Option<ParamId>,
    gcn: Option<GcnParams>,
    decoder: Decoder,
}

impl Model {
    pub fn new(config: ModelConfig, shape: ModelShape, seed: u64) -> Result<Self> {
        let v = config.variant;
        if v.uses_text() && shape.text_dim == 0 {
            return Err(Error::Config(format!("variant {v} needs node text embeddings")));
        }
        if !v.uses_text() && shape.text_dim != 0 {
            return Err(Error::Config(format!("variant {v} does not take text embeddings")));
        }
        if !(0.0..1.0).contains(&config.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", config.dropout)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let directed = 2 * shape.base_relations;
        let entity = if v.uses_entity_table() {
            Some(params.add_glorot("entity", ParamKind::Embedding, shape.num_nodes, config.dim, &mut rng)?)
        } else {
            None
        };
        let gcn = if v.uses_gcn() {
            Some(GcnParams::init(
                &mut params,
                shape.num_nodes,
                directed + 1,
                config.dim,
                config.layers,
                &mut rng,
            )?)
        } else {
            None
        };
        let graph_dim = if v.uses_gcn() || v.uses_entity_table() { config.dim } else { 0 };
        let width = graph_dim + shape.text_dim;
        let decoder = match v {
            Variant::DistMult => Decoder::DistMult(DistMultParams::init(&mut params, directed, width, &mut rng)?),
            Variant::ComplEx => Decoder::ComplEx(ComplExParams::init(&mut params, directed, width, &mut rng)?),
            _ => Decoder::ConvTransE(ConvTransEParams::init(
                &mut params,
                directed,
                width,
                config.channels,
                config.kernel_width,
                config.activation,
                DropoutRates::uniform(config.dropout),
                &mut rng,
            )?),
        };
        Ok(Model {
            config,
            shape,
            params,
            entity,
            gcn,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn shape(&self) -> ModelShape {
        self.shape
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn gcn(&self) -> Option<&GcnParams> {
        self.gcn.as_ref()
    }

    /// Columns of a node representation that come from the graph side.
    pub fn graph_dim(&self) -> usize {
        if self.gcn.is_some() || self.entity.is_some() {
            self.config.dim
        } else {
            0
        }
    }

    pub fn repr_dim(&self) -> usize {
        self.graph_dim() + self.shape.text_dim
    }

    /// Representations of the view's nodes. `text` must hold one row per
    /// view node (already masked when training).
    pub fn node_reprs(&self, tape: &mut Tape<'_>, view: &GraphView, text: Option<&Tensor>) -> Result<Var> {
        let graph = if let Some(id) = self.entity {
            Some(tape.gather_param(id, view.nodes())?)
        } else if let Some(gcn) = &self.gcn {
            Some(encode(tape, view, gcn)?.h)
        } else {
            None
        };
        let text = match (self.variant().uses_text(), text) {
            (true, Some(t)) => {
                if t.rows() != view.len() || t.cols() != self.shape.text_dim {
                    return Err(Error::shape("node_reprs", t.shape(), &[view.len(), self.shape.text_dim]));
                }
                Some(tape.constant(t.clone()))
            }
            (true, None) => return Err(Error::Config(format!("variant {} needs text embeddings", self.variant()))),
            (false, _) => None,
        };
        match (graph, text) {
            (Some(g), Some(t)) => tape.concat_cols(&[g, t]),
            (Some(g), None) => Ok(g),
            (None, Some(t)) => Ok(t),
            (None, None) => unreachable!("every variant has a representation source"),
        }
    }

    /// Query vectors for `(e1, rel)` prefixes; candidates are scored as
    /// `q · e2`.
    pub fn query<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_>,
        e1: Var,
        rels: &[RelId],
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        match &self.decoder {
            Decoder::ConvTransE(p) => p.query(tape, e1, rels, train, rng),
            Decoder::DistMult(p) => p.query(tape, e1, rels),
            Decoder::ComplEx(p) => p.query(tape, e1, rels),
        }
    }

    /// Full-graph representations for inference (text fully visible).
    pub fn freeze(&self, graph: &KnowledgeGraph, text: Option<&NodeEmbeddingTable>) -> Result<FrozenModel<'_>> {
        if graph.num_nodes() != self.shape.num_nodes {
            return Err(Error::VocabularyMismatch(format!(
                "model built for {} nodes, graph has {}",
                self.shape.num_nodes,
                graph.num_nodes()
            )));
        }
        let view = full_view(graph, self.variant().uses_sim());
        let text = text.map(|t| t.to_tensor());
        let reprs = {
            let mut tape = Tape::new(&self.params);
            let v = self.node_reprs(&mut tape, &view, text.as_ref())?;
            tape.value(v).clone()
        };
        Ok(FrozenModel { model: self, reprs })
    }

    pub fn checkpoint(&self, adam: Option<&AdamState>, extra: serde_json::Value) -> Checkpoint {
        let metadata = serde_json::json!({
            "format": "kgc-checkpoint",
            "model": self.config,
            "shape": self.shape,
            "optimizer_step": adam.map_or(0, |a| a.step),
            "extra": extra,
        });
        Checkpoint::from_params(&self.params, adam, metadata)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let field = |name: &str| {
            ckpt.metadata
                .get(name)
                .cloned()
                .ok_or_else(|| Error::Format(format!("checkpoint metadata lacks {name:?}")))
        };
        let config: ModelConfig = serde_json::from_value(field("model")?)?;
        let shape: ModelShape = serde_json::from_value(field("shape")?)?;
        let mut model = Model::new(config, shape, 0)?;
        ckpt.restore_params(&mut model.params)?;
        Ok(model)
    }
}

/// A model with cached full-graph node representations.
pub struct FrozenModel<'m> {
    model: &'m Model,
    reprs: Tensor,
}

impl<'m> FrozenModel<'m> {
    pub fn model(&self) -> &Model {
        self.model
    }

    pub fn reprs(&self) -> &Tensor {
        &self.reprs
    }

    /// Logits of every node for each `(e1 row, rel)` pair, row-major `B×N`.
    pub fn score_rows(&self, e1_rows: Tensor, rels: &[RelId]) -> Result<Tensor> {
        let mut tape = Tape::new(&self.model.params);
        let e1 = tape.constant(e1_rows);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let q = self.model.query(&mut tape, e1, rels, false, &mut rng)?;
        let cand = tape.constant_ref(&self.reprs);
        let s = score_all(&mut tape, q, cand)?;
        Ok(tape.value(s).clone())
    }

    pub fn score_heads(&self, heads: &[NodeId], rels: &[RelId]) -> Result<Tensor> {
        self.score_rows(self.reprs.select_rows(heads)?, rels)
    }

    /// Scores one tuple without any batching.
    pub fn score_triple(&self, head: NodeId, rel: RelId, tail: NodeId) -> Result<f64> {
        let mut tape = Tape::new(&self.model.params);
        let e1 = tape.constant(self.reprs.select_rows(&[head])?);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let q = self.model.query(&mut tape, e1, &[rel], false, &mut rng)?;
        Ok(dot(tape.value(q).data(), self.reprs.row(tail)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::RawTuple;

    fn graph() -> KnowledgeGraph {
        let raw: Vec<RawTuple> = [("R", "a", "b"), ("S", "b", "c"), ("R", "c", "d")]
            .iter()
            .map(|(r, h, t)| RawTuple {
                rel: r.to_string(),
                head: h.to_string(),
                tail: t.to_string(),
            })
            .collect();
        KnowledgeGraph::from_raw(&raw, &[], &[]).unwrap()
    }

    fn config(variant: Variant) -> ModelConfig {
        ModelConfig {
            variant,
            dim: 4,
            layers: 1,
            channels: 2,
            kernel_width: 3,
            activation: FeatureActivation::Relu,
            dropout: 0.0,
        }
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
            assert_eq!(serde_json::to_string(&v).unwrap(), format!("\"{}\"", v.name()));
        }
        assert!("conve".parse::<Variant>().is_err());
    }

    #[test]
    fn text_variant_requires_embeddings() {
        let g = graph();
        let shape = ModelShape::of(&g, None);
        assert!(matches!(
            Model::new(config(Variant::GcnBertConvTransE), shape, 0),
            Err(Error::Config(_))
        ));
        assert!(Model::new(config(Variant::GcnConvTransE), shape, 0).is_ok());
    }

    #[test]
    fn concat_width_is_graph_plus_text() {
        let g = graph();
        let text = NodeEmbeddingTable::new(4, 3, vec![0.5; 12]).unwrap();
        let m = Model::new(config(Variant::GcnBertConvTransE), ModelShape::of(&g, Some(&text)), 0).unwrap();
        assert_eq!(m.repr_dim(), 7);
        let f = m.freeze(&g, Some(&text)).unwrap();
        assert_eq!(f.reprs().shape(), &[4, 7]);
    }

    #[test]
    fn batch_scores_equal_single_scores() {
        let g = graph();
        for v in [Variant::GcnConvTransE, Variant::DistMult, Variant::ComplEx] {
            let m = Model::new(config(v), ModelShape::of(&g, None), 3).unwrap();
            let f = m.freeze(&g, None).unwrap();
            let all = f.score_heads(&[0, 2], &[1, 3]).unwrap();
            for (b, (&h, &r)) in [0usize, 2].iter().zip(&[1usize, 3]).enumerate() {
                for t in 0..4 {
                    let single = f.score_triple(h, r, t).unwrap();
                    assert!((all.get(b, t) - single).abs() < 1e-12, "{v}");
                }
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_scores() {
        let g = graph();
        let m = Model::new(config(Variant::SimGcnConvTransE), ModelShape::of(&g, None), 11).unwrap();
        let ckpt = m.checkpoint(None, serde_json::Value::Null);
        let mut buf = Vec::new();
        ckpt.write_to(&mut buf).unwrap();
        let back = Model::from_checkpoint(&Checkpoint::read_from(buf.as_slice()).unwrap()).unwrap();
        let a = m.freeze(&g, None).unwrap().score_heads(&[1], &[0]).unwrap();
        let b = back.freeze(&g, None).unwrap().score_heads(&[1], &[0]).unwrap();
        // parameters pass through 32-bit storage
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-5);
        }
    }
}
