//! Tuple scorers: ConvTransE and the DistMult/ComplEx baselines.
//!
//! Every scorer maps a batch of query prefixes `(e1, rel)` to a query
//! vector `q` and scores all candidates at once as `q · E_candᵀ`. The
//! returned values are logits; the training loss applies the sigmoid.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::RelId;
use crate::numerics::{ParamId, ParamKind, ParamStore, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DropoutRates {
    pub input: f64,
    pub feature_map: f64,
    pub projection: f64,
}

impl DropoutRates {
    pub fn uniform(p: f64) -> Self {
        DropoutRates {
            input: p,
            feature_map: p,
            projection: p,
        }
    }
}

/// Nonlinearity applied to the convolution feature map.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureActivation {
    /// ReLU, as in the reference ConvTransE. Without it the relation only
    /// contributes an additive term to the query.
    #[default]
    Relu,
    /// The feature map is used as is.
    Linear,
}

#[derive(Clone, Debug)]
pub struct ConvTransEParams {
    /// `R_directed × d`.
    pub relations: ParamId,
    /// `C × 2K`: taps over the node row, then taps over the relation row.
    pub kernels: ParamId,
    /// `C·d × d`.
    pub projection: ParamId,
    pub dim: usize,
    pub channels: usize,
    pub width: usize,
    pub activation: FeatureActivation,
    pub dropout: DropoutRates,
}

impl ConvTransEParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        num_relations: usize,
        dim: usize,
        channels: usize,
        width: usize,
        activation: FeatureActivation,
        dropout: DropoutRates,
        rng: &mut R,
    ) -> Result<Self> {
        if width % 2 == 0 {
            return Err(Error::invalid(format!("kernel width must be odd, got {width}")));
        }
        if dim == 0 || channels == 0 {
            return Err(Error::invalid("decoder dimension and channel count must be positive"));
        }
        Ok(ConvTransEParams {
            relations: store.add_glorot("convtranse/relations", ParamKind::Embedding, num_relations, dim, rng)?,
            kernels: store.add_glorot("convtranse/kernels", ParamKind::Weight, channels, 2 * width, rng)?,
            projection: store.add_glorot("convtranse/projection", ParamKind::Weight, channels * dim, dim, rng)?,
            dim,
            channels,
            width,
            activation,
            dropout,
        })
    }

    /// `q = M(e1, e_rel) · W_conv`, one row per query.
    pub fn query<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_>,
        e1: Var,
        rels: &[RelId],
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let width = tape.shape(e1)[1];
        if width != self.dim {
            return Err(Error::invalid(format!(
                "node representation width {width} differs from relation embedding width {}",
                self.dim
            )));
        }
        let rel = tape.gather_param(self.relations, rels)?;
        let x = tape.dropout(e1, self.dropout.input, train, rng)?;
        let r = tape.dropout(rel, self.dropout.input, train, rng)?;
        let kernels = tape.param(self.kernels);
        let mut maps = tape.conv1d_two_row(x, r, kernels)?;
        if self.activation == FeatureActivation::Relu {
            maps = tape.relu(maps);
        }
        let maps = tape.dropout(maps, self.dropout.feature_map, train, rng)?;
        let w = tape.param(self.projection);
        let q = tape.matmul(maps, w)?;
        tape.dropout(q, self.dropout.projection, train, rng)
    }
}

#[derive(Clone, Debug)]
pub struct DistMultParams {
    pub relations: ParamId,
    pub dim: usize,
}

impl DistMultParams {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, num_relations: usize, dim: usize, rng: &mut R) -> Result<Self> {
        Ok(DistMultParams {
            relations: store.add_glorot("distmult/relations", ParamKind::Embedding, num_relations, dim, rng)?,
            dim,
        })
    }

    /// `q = e1 ∘ w_rel`.
    pub fn query(&self, tape: &mut Tape<'_>, e1: Var, rels: &[RelId]) -> Result<Var> {
        let w = tape.gather_param(self.relations, rels)?;
        tape.mul(e1, w)
    }
}

/// Complex embeddings stored as `[real | imaginary]` halves.
#[derive(Clone, Debug)]
pub struct ComplExParams {
    pub relations: ParamId,
    pub dim: usize,
}

impl ComplExParams {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, num_relations: usize, dim: usize, rng: &mut R) -> Result<Self> {
        if dim % 2 != 0 {
            return Err(Error::invalid(format!("ComplEx needs an even dimension, got {dim}")));
        }
        Ok(ComplExParams {
            relations: store.add_glorot("complex/relations", ParamKind::Embedding, num_relations, dim, rng)?,
            dim,
        })
    }

    /// `q = e1 · w` as complex numbers, so that `q · [b_re | b_im]` equals
    /// `Re(Σ e1 w conj(b))`.
    pub fn query(&self, tape: &mut Tape<'_>, e1: Var, rels: &[RelId]) -> Result<Var> {
        let w = tape.gather_param(self.relations, rels)?;
        complex_query(tape, e1, w)
    }
}

pub(crate) fn complex_query(tape: &mut Tape<'_>, a: Var, w: Var) -> Result<Var> {
    let d = tape.shape(a)[1];
    if d % 2 != 0 {
        return Err(Error::invalid(format!("ComplEx needs an even dimension, got {d}")));
    }
    let h = d / 2;
    let (ar, ai) = (tape.slice_cols(a, 0, h)?, tape.slice_cols(a, h, d)?);
    let (wr, wi) = (tape.slice_cols(w, 0, h)?, tape.slice_cols(w, h, d)?);
    let (rr, ii) = (tape.mul(ar, wr)?, tape.mul(ai, wi)?);
    let (ri, ir) = (tape.mul(ar, wi)?, tape.mul(ai, wr)?);
    let re = tape.sub(rr, ii)?;
    let im = tape.add(ri, ir)?;
    tape.concat_cols(&[re, im])
}

/// `logits[b][c] = q_b · candidates_c`.
pub fn score_all(tape: &mut Tape<'_>, query: Var, candidates: Var) -> Result<Var> {
    tape.matmul_t(query, candidates)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{sigmoid, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(4)
    }

    #[test]
    fn unit_kernel_identity_projection() {
        let mut store = ParamStore::new();
        let p = ConvTransEParams::init(&mut store, 1, 2, 1, 1, FeatureActivation::Relu, DropoutRates::uniform(0.0), &mut rng()).unwrap();
        store.get_mut(p.kernels).data_mut().copy_from_slice(&[1.0, 1.0]);
        *store.get_mut(p.projection) = Tensor::identity(2);
        store.get_mut(p.relations).data_mut().copy_from_slice(&[0.0, 1.0]);
        let mut tape = Tape::new(&store);
        let e1 = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
        let cand = tape.constant(Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap());
        let q = p.query(&mut tape, e1, &[0], true, &mut rng()).unwrap();
        let s = score_all(&mut tape, q, cand).unwrap();
        let prob = sigmoid(tape.value(s).data()[0]);
        assert!((prob - 0.8808).abs() < 1e-4);
    }

    #[test]
    fn zero_kernels_give_half() {
        let mut store = ParamStore::new();
        let p = ConvTransEParams::init(&mut store, 2, 4, 3, 3, FeatureActivation::Relu, DropoutRates::uniform(0.0), &mut rng()).unwrap();
        store.get_mut(p.kernels).data_mut().fill(0.0);
        let mut tape = Tape::new(&store);
        let e1 = tape.constant(Tensor::uniform(&[2, 4], -1.0, 1.0, &mut rng()));
        let cand = tape.constant(Tensor::uniform(&[5, 4], -1.0, 1.0, &mut rng()));
        let q = p.query(&mut tape, e1, &[0, 1], false, &mut rng()).unwrap();
        let s = score_all(&mut tape, q, cand).unwrap();
        assert!(tape.value(s).data().iter().all(|&v| sigmoid(v) == 0.5));
    }

    #[test]
    fn width_mismatch_rejected() {
        let mut store = ParamStore::new();
        let p = ConvTransEParams::init(&mut store, 1, 4, 1, 3, FeatureActivation::Relu, DropoutRates::uniform(0.0), &mut rng()).unwrap();
        let mut tape = Tape::new(&store);
        let e1 = tape.constant(Tensor::zeros(&[1, 3]));
        assert!(p.query(&mut tape, e1, &[0], false, &mut rng()).is_err());
    }

    #[test]
    fn even_width_and_odd_complex_rejected() {
        let mut store = ParamStore::new();
        assert!(ConvTransEParams::init(&mut store, 1, 4, 1, 4, FeatureActivation::Relu, DropoutRates::uniform(0.0), &mut rng()).is_err());
        assert!(ComplExParams::init(&mut store, 1, 5, &mut rng()).is_err());
    }

    #[test]
    fn distmult_hand_cases() {
        let mut store = ParamStore::new();
        let p = DistMultParams::init(&mut store, 2, 2, &mut rng()).unwrap();
        store.get_mut(p.relations).data_mut().copy_from_slice(&[1.0, 1.0, 0.0, 0.0]);
        let mut tape = Tape::new(&store);
        let e1 = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap());
        let cand = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.3, 0.9]]).unwrap());
        let q = p.query(&mut tape, e1, &[0, 1]).unwrap();
        let s = score_all(&mut tape, q, cand).unwrap();
        assert_eq!(tape.value(s).data(), &[1.0, 0.3, 0.0, 0.0]);
    }

    #[test]
    fn complex_hand_case() {
        // e1 = w = 1+0i, e2 = 0+1i
        let mut store = ParamStore::new();
        let p = ComplExParams::init(&mut store, 1, 2, &mut rng()).unwrap();
        store.get_mut(p.relations).data_mut().copy_from_slice(&[1.0, 0.0]);
        let mut tape = Tape::new(&store);
        let e1 = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
        let cand = tape.constant(Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap());
        let q = p.query(&mut tape, e1, &[0]).unwrap();
        let s = score_all(&mut tape, q, cand).unwrap();
        assert_eq!(tape.value(s).data(), &[0.0]);
    }
}
