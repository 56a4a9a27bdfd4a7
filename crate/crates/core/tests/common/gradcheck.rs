//! Central finite differences against the tape's reverse pass.

use kgc_core::numerics::{ParamStore, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Magnitude floor in the relative error, so that gradients that are zero
/// up to rounding do not blow the ratio up.
pub const FLOOR: f64 = 1e-3;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Reduces any output to a scalar with fixed random weights, so every
/// output element contributes to the checked gradient.
pub fn project(tape: &mut Tape<'_>, out: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = Tensor::uniform(tape.shape(out), -1.0, 1.0, &mut rng);
    let r = tape.constant(r);
    let m = tape.mul(out, r).expect("same shape");
    tape.sum(m)
}

/// Largest relative error over every input element and every parameter
/// element used by `build`. `build` receives the input vars in order and
/// must be deterministic.
pub fn max_error<F>(store: &ParamStore, inputs: &[Tensor], build: F) -> f64
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Var,
{
    let eval = |store: &ParamStore, inputs: &[Tensor]| -> f64 {
        let mut tape = Tape::new(store);
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars);
        tape.value(out).data()[0]
    };

    let mut tape = Tape::new(store);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let grads = tape.backward(out).expect("scalar output");

    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; input.len()]);
        for i in 0..input.len() {
            let mut moved = inputs.to_vec();
            moved[k].data_mut()[i] += STEP;
            let up = eval(store, &moved);
            moved[k].data_mut()[i] -= 2.0 * STEP;
            let down = eval(store, &moved);
            worst = worst.max(rel_err(analytic[i], (up - down) / (2.0 * STEP)));
        }
    }
    for id in store.ids() {
        let len = store.get(id).len();
        let analytic = grads.params().get(id).map(|g| g.to_dense(len)).unwrap_or_else(|| vec![0.0; len]);
        for i in 0..len {
            let mut moved = store.clone();
            moved.get_mut(id).data_mut()[i] += STEP;
            let up = eval(&moved, inputs);
            moved.get_mut(id).data_mut()[i] -= 2.0 * STEP;
            let down = eval(&moved, inputs);
            worst = worst.max(rel_err(analytic[i], (up - down) / (2.0 * STEP)));
        }
    }
    worst
}

pub fn random(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn positive(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, 0.1, 0.9, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub mod suite {
    use super::*;
    use kgc_core::decoder::score_all;
    use kgc_core::embed::{densify, SimEdgeSet, SimPair, ThresholdCriterion};
    use kgc_core::encoder::{encode, full_view, GcnParams};
    use kgc_core::kg::KnowledgeGraph;
    use kgc_core::model::{Model, ModelShape, Variant};
    use kgc_core::numerics::ParamKind;
    use kgc_core::train::{l2_penalty, training_loss, TrainConfig};

    fn no_params() -> ParamStore {
        ParamStore::new()
    }

    fn op(inputs: &[Tensor], f: impl Fn(&mut Tape<'_>, &[Var]) -> Var) -> f64 {
        max_error(&no_params(), inputs, |t, v| {
            let out = f(t, v);
            project(t, out, 99)
        })
    }

    /// One entry per differentiable op: `(name, max relative error)`.
    pub fn ops() -> Vec<(&'static str, f64)> {
        let a = random(&[3, 4], 1);
        let b = random(&[4, 2], 2);
        let c = random(&[3, 4], 3);
        let d = random(&[5, 4], 4);
        let mask: Vec<f64> = random(&[3, 4], 5).data().iter().map(|v| if *v > 0.0 { 2.0 } else { 0.0 }).collect();
        let src = [0usize, 1, 2, 3, 4, 5, 1];
        let dst = [1usize, 0, 0, 2, 2, 2, 5];
        let h6 = random(&[6, 3], 6);
        let logits7 = random(&[7, 1], 7);
        vec![
            ("matmul", op(&[a.clone(), b.clone()], |t, v| t.matmul(v[0], v[1]).unwrap())),
            ("matmul_t", op(&[a.clone(), d.clone()], |t, v| t.matmul_t(v[0], v[1]).unwrap())),
            ("transpose", op(&[a.clone()], |t, v| t.transpose(v[0]).unwrap())),
            ("add", op(&[a.clone(), c.clone()], |t, v| t.add(v[0], v[1]).unwrap())),
            ("sub", op(&[a.clone(), c.clone()], |t, v| t.sub(v[0], v[1]).unwrap())),
            ("mul", op(&[a.clone(), c.clone()], |t, v| t.mul(v[0], v[1]).unwrap())),
            ("scale", op(&[a.clone()], |t, v| t.scale(v[0], -2.5))),
            ("mul_const", op(&[a.clone()], |t, v| t.mul_const(v[0], mask.clone()).unwrap())),
            (
                "dropout",
                op(&[a.clone()], |t, v| {
                    let mut rng = ChaCha8Rng::seed_from_u64(11);
                    t.dropout(v[0], 0.4, true, &mut rng).unwrap()
                }),
            ),
            ("concat_cols", op(&[a.clone(), random(&[3, 2], 8)], |t, v| t.concat_cols(&[v[0], v[1]]).unwrap())),
            ("concat_rows", op(&[a.clone(), d.clone()], |t, v| t.concat_rows(&[v[0], v[1]]).unwrap())),
            ("reshape", op(&[a.clone()], |t, v| t.reshape(v[0], &[6, 2]).unwrap())),
            ("slice_cols", op(&[a.clone()], |t, v| t.slice_cols(v[0], 1, 3).unwrap())),
            ("index_rows", op(&[a.clone()], |t, v| t.index_rows(v[0], &[2, 0, 2, 1]).unwrap())),
            ("gather_param", gather_param()),
            ("tanh", op(&[a.clone()], |t, v| t.tanh(v[0]))),
            ("relu", op(&[a.clone()], |t, v| t.relu(v[0]))),
            ("sigmoid", op(&[a.clone()], |t, v| t.sigmoid(v[0]))),
            ("softmax_rows", op(&[a.clone()], |t, v| t.softmax_rows(v[0]).unwrap())),
            (
                "conv1d_two_row",
                op(&[random(&[2, 5], 9), random(&[2, 5], 10), random(&[3, 6], 12)], |t, v| {
                    t.conv1d_two_row(v[0], v[1], v[2]).unwrap()
                }),
            ),
            ("sum", max_error(&no_params(), &[a.clone()], |t, v| t.sum(v[0]))),
            ("mean", max_error(&no_params(), &[a.clone()], |t, v| t.mean(v[0]))),
            ("sum_squares", max_error(&no_params(), &[a.clone()], |t, v| t.sum_squares(v[0]))),
            (
                "bce_mean",
                max_error(&no_params(), &[positive(&[3, 4], 13)], |t, v| {
                    let y: Vec<f64> = (0..12).map(|i| [0.0, 1.0, 0.3][i % 3]).collect();
                    t.bce_mean(v[0], y).unwrap()
                }),
            ),
            ("edge_dot", op(&[h6.clone()], |t, v| t.edge_dot(v[0], &src, &dst).unwrap())),
            ("segment_softmax", op(&[logits7.clone()], |t, v| t.segment_softmax(v[0], &dst).unwrap())),
            (
                "scatter_weighted",
                op(&[h6.clone(), logits7.clone()], |t, v| t.scatter_weighted(v[0], v[1], &src, &dst, 6).unwrap()),
            ),
        ]
    }

    fn gather_param() -> f64 {
        let mut store = ParamStore::new();
        let id = store.add("table", ParamKind::Embedding, random(&[4, 3], 14)).unwrap();
        max_error(&store, &[], |t, _| {
            let g = t.gather_param(id, &[3, 1, 3]).unwrap();
            project(t, g, 15)
        })
    }

    /// Six nodes, two relations, one `sim` pair and one isolated-in node.
    pub fn six_node_graph() -> KnowledgeGraph {
        use kgc_core::kg::RawTuple;
        let t = |r: &str, h: &str, tl: &str| RawTuple {
            rel: r.into(),
            head: h.into(),
            tail: tl.into(),
        };
        let g = KnowledgeGraph::from_raw(
            &[
                t("r0", "a", "b"),
                t("r0", "b", "c"),
                t("r1", "a", "c"),
                t("r1", "d", "e"),
                t("r0", "e", "f"),
                t("r1", "c", "a"),
            ],
            &[],
            &[],
        )
        .unwrap();
        let sim = SimEdgeSet {
            pairs: vec![SimPair { a: 1, b: 3, score: 0.9 }],
            tau: 0.8,
            criterion: ThresholdCriterion::Explicit,
            zero_norm_rows: 0,
        };
        densify(&g, &sim).unwrap()
    }

    pub fn encoder() -> f64 {
        let g = six_node_graph();
        let view = full_view(&g, true);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let params = GcnParams::init(&mut store, g.num_nodes(), g.relations().total_count(), 3, 2, &mut rng).unwrap();
        // Spread the relation weights so each gets a distinct gradient.
        let alpha = random(&[g.relations().total_count(), 1], 17);
        store.get_mut(params.relation_weight).data_mut().copy_from_slice(alpha.data());
        max_error(&store, &[], |t, _| {
            let h = encode(t, &view, &params).unwrap().h;
            project(t, h, 18)
        })
    }

    fn model_config(variant: Variant, dropout: f64) -> TrainConfig {
        TrainConfig {
            variant,
            embedding_dim: 4,
            gcn_layers: 1,
            channels: 2,
            kernel_width: 3,
            dropout,
            ..TrainConfig::default()
        }
    }

    /// Decoder logits for every prefix against every node, inputs included.
    pub fn decoder(variant: Variant) -> f64 {
        let g = six_node_graph();
        let model = Model::new(model_config(variant, 0.3).model_config(), ModelShape::of(&g, None), 19).unwrap();
        let e1 = random(&[3, model.repr_dim()], 20);
        let cand = random(&[6, model.repr_dim()], 21);
        max_error(&model.params, &[e1, cand], |t, v| {
            let mut rng = ChaCha8Rng::seed_from_u64(22);
            let q = model.query(t, v[0], &[0, 1, 2], true, &mut rng).unwrap();
            let s = score_all(t, q, v[1]).unwrap();
            project(t, s, 23)
        })
    }

    /// The full training objective: encoder, decoder, smoothed BCE and L2.
    pub fn training_objective(variant: Variant) -> f64 {
        let g = six_node_graph();
        let model = Model::new(model_config(variant, 0.3).model_config(), ModelShape::of(&g, None), 24).unwrap();
        let view = full_view(&g, variant.uses_sim());
        max_error(&model.params, &[], |t, _| {
            let mut rng = ChaCha8Rng::seed_from_u64(25);
            let reprs = model.node_reprs(t, &view, None).unwrap();
            let e1 = t.index_rows(reprs, &[0, 1, 4]).unwrap();
            let q = model.query(t, e1, &[0, 1, 2], true, &mut rng).unwrap();
            let logits = score_all(t, q, reprs).unwrap();
            let probs = t.sigmoid(logits);
            let loss = training_loss(t, probs, &[vec![1, 2], vec![2], vec![0]], 0.1).unwrap();
            match l2_penalty(t, 0.1) {
                Some(pen) => t.add(loss, pen).unwrap(),
                None => loss,
            }
        })
    }

    /// Every check of the suite, in a fixed order.
    pub fn all() -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = ops().into_iter().map(|(n, e)| (n.to_string(), e)).collect();
        out.push(("encoder".into(), encoder()));
        for v in [Variant::GcnConvTransE, Variant::DistMult, Variant::ComplEx] {
            out.push((format!("decoder {v}"), decoder(v)));
        }
        for v in [Variant::SimGcnConvTransE, Variant::ConvTransE, Variant::DistMult, Variant::ComplEx] {
            out.push((format!("objective {v}"), training_objective(v)));
        }
        out
    }
}
