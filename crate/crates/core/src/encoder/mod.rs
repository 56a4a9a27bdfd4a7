//! Relation-weighted, neighbour-attentive graph convolution.
//!
//! Each layer updates a node from its in-neighbours:
//! `h_i' = tanh(Σ_{(j→i, r)} α_r β_ij (h_j W) + h_i W0)` where `β_i` is a
//! softmax of the dot products `h_i·h_j` over the pooled incoming edges of
//! `i` (all relations together, parallel edges counted separately) and
//! `α_r` is a learned scalar per relation.

mod view;

pub use view::{full_view, sample_subgraph, GraphView};

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamKind, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct GcnLayer {
    pub neighbor: ParamId,
    pub self_loop: ParamId,
}

#[derive(Clone, Debug)]
pub struct GcnParams {
    pub initial: ParamId,
    pub layers: Vec<GcnLayer>,
    /// One scalar per relation id (base, inverse and `sim`), shape `R×1`.
    pub relation_weight: ParamId,
    pub dim: usize,
}

impl GcnParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        num_nodes: usize,
        num_relations: usize,
        dim: usize,
        layers: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if layers == 0 {
            return Err(Error::invalid("the encoder needs at least one layer"));
        }
        if dim == 0 {
            return Err(Error::invalid("encoder dimension must be positive"));
        }
        let initial = store.add_glorot("gcn/initial", ParamKind::Embedding, num_nodes, dim, rng)?;
        let mut ls = Vec::with_capacity(layers);
        for l in 0..layers {
            ls.push(GcnLayer {
                neighbor: store.add_glorot(format!("gcn/layer{l}/neighbor"), ParamKind::Weight, dim, dim, rng)?,
                self_loop: store.add_glorot(format!("gcn/layer{l}/self"), ParamKind::Weight, dim, dim, rng)?,
            });
        }
        let relation_weight = store.add(
            "gcn/relation_weight",
            ParamKind::Scalar,
            Tensor::full(&[num_relations, 1], 1.0),
        )?;
        Ok(GcnParams {
            initial,
            layers: ls,
            relation_weight,
            dim,
        })
    }

    pub fn relation_count(&self, store: &ParamStore) -> usize {
        store.get(self.relation_weight).rows()
    }
}

pub struct Encoded {
    /// Final node representations, `|view| × D`.
    pub h: Var,
    /// Attention per layer, aligned with the view's message edges.
    pub attention: Vec<Vec<f64>>,
}

/// Runs every layer over `view` and records the attention weights.
pub fn encode(tape: &mut Tape<'_>, view: &GraphView, params: &GcnParams) -> Result<Encoded> {
    let n = view.len();
    let alpha_rows = tape.store().get(params.relation_weight).rows();
    if let Some(&r) = view.rel.iter().find(|&&r| r >= alpha_rows) {
        return Err(Error::invalid(format!("relation {r} has no encoder weight")));
    }
    let mut h = tape.gather_param(params.initial, view.nodes())?;
    let alpha = tape.param(params.relation_weight);
    let edge_alpha = if view.edge_count() > 0 {
        Some(tape.index_rows(alpha, &view.rel)?)
    } else {
        None
    };
    let mut attention = Vec::with_capacity(params.layers.len());
    for (l, layer) in params.layers.iter().enumerate() {
        let w0 = tape.param(layer.self_loop);
        let own = tape.matmul(h, w0)?;
        let pre = match edge_alpha {
            Some(a) => {
                let w = tape.param(layer.neighbor);
                let proj = tape.matmul(h, w)?;
                let logits = tape.edge_dot(h, &view.src, &view.dst)?;
                let beta = tape.segment_softmax(logits, &view.dst)?;
                attention.push(tape.value(beta).data().to_vec());
                let weight = tape.mul(a, beta)?;
                let msg = tape.scatter_weighted(proj, weight, &view.src, &view.dst, n)?;
                tape.add(msg, own)?
            }
            None => {
                attention.push(Vec::new());
                own
            }
        };
        h = tape.tanh(pre);
        if !tape.value(h).is_finite() {
            return Err(Error::NonFinite(format!("encoder layer {l}")));
        }
    }
    Ok(Encoded { h, attention })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{KnowledgeGraph, RawTuple};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn raw(rel: &str, h: &str, t: &str) -> RawTuple {
        RawTuple {
            rel: rel.into(),
            head: h.into(),
            tail: t.into(),
        }
    }

    fn setup(graph: &KnowledgeGraph, dim: usize, layers: usize) -> (ParamStore, GcnParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = GcnParams::init(
            &mut store,
            graph.num_nodes(),
            graph.relations().total_count(),
            dim,
            layers,
            &mut rng,
        )
        .unwrap();
        (store, p)
    }

    #[test]
    fn one_neighbor_unit_weights() {
        // a → b only: b has a single in-neighbour, a has b through the inverse
        let g = KnowledgeGraph::from_raw(&[raw("R", "a", "b")], &[], &[]).unwrap();
        let (mut store, p) = setup(&g, 1, 1);
        store.get_mut(p.layers[0].neighbor).data_mut()[0] = 1.0;
        store.get_mut(p.layers[0].self_loop).data_mut()[0] = 1.0;
        store.get_mut(p.initial).data_mut().copy_from_slice(&[0.3, -0.7]);
        let view = full_view(&g, false);
        let mut tape = Tape::new(&store);
        let out = encode(&mut tape, &view, &p).unwrap();
        let h = tape.value(out.h).data();
        assert!((h[1] - (0.3f64 - 0.7).tanh()).abs() < 1e-15);
        assert!((h[0] - (-0.7f64 + 0.3).tanh()).abs() < 1e-15);
        assert!(out.attention[0].iter().all(|&b| b == 1.0));
    }

    #[test]
    fn equal_neighbors_share_attention() {
        let g = KnowledgeGraph::from_raw(&[raw("R", "a", "c"), raw("R", "b", "c")], &[], &[]).unwrap();
        let (mut store, p) = setup(&g, 3, 1);
        let c = g.nodes().id("c").unwrap();
        {
            let h0 = store.get_mut(p.initial);
            for node in 0..3 {
                let row = if node == c { [0.1, 0.2, 0.3] } else { [0.5, -0.5, 0.25] };
                h0.row_mut(node).copy_from_slice(&row);
            }
        }
        let view = full_view(&g, false);
        let mut tape = Tape::new(&store);
        let out = encode(&mut tape, &view, &p).unwrap();
        let into_c: Vec<f64> = (0..view.edge_count())
            .filter(|&e| view.dst[e] == c)
            .map(|e| out.attention[0][e])
            .collect();
        assert_eq!(into_c, vec![0.5, 0.5]);
    }

    #[test]
    fn attention_sums_to_one_per_node() {
        let g = KnowledgeGraph::from_raw(
            &[raw("R", "a", "b"), raw("S", "a", "b"), raw("R", "c", "b"), raw("S", "b", "d")],
            &[],
            &[],
        )
        .unwrap();
        let (store, p) = setup(&g, 4, 2);
        let view = full_view(&g, false);
        let mut tape = Tape::new(&store);
        let out = encode(&mut tape, &view, &p).unwrap();
        for layer in &out.attention {
            let mut sums = vec![0.0; view.len()];
            for (e, &b) in layer.iter().enumerate() {
                sums[view.dst[e]] += b;
            }
            for (node, s) in sums.iter().enumerate() {
                let has_in = view.dst.contains(&node);
                if has_in {
                    assert!((s - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_layers_rejected() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(GcnParams::init(&mut store, 3, 3, 4, 0, &mut rng).is_err());
    }
}
