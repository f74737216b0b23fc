//! Classification heads over final CLS embeddings.

use std::cmp::Ordering;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{xavier_uniform, ParamGroup, ParamId, ParamStore};

#[derive(Debug, Clone)]
pub struct PatchHead {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl PatchHead {
    pub fn init<R: Rng + ?Sized>(dim: usize, classes: usize, store: &mut ParamStore, rng: &mut R) -> Self {
        Self {
            weight: store.add("head.patch.weight", ParamGroup::Head, xavier_uniform(rng, dim, classes, dim, classes)),
            bias: store.add("head.patch.bias", ParamGroup::Head, Array2::zeros((1, classes))),
        }
    }

    pub fn param_count(dim: usize, classes: usize) -> usize {
        dim * classes + classes
    }
}

pub fn trace_patch_logits(tape: &mut Tape<'_>, v: Var, head: &PatchHead) -> Result<Var> {
    let w = tape.param(head.weight);
    if tape.shape(v).1 != tape.shape(w).0 {
        return Err(Error::shape("patch head input", tape.shape(w).0, tape.shape(v).1));
    }
    let b = tape.param(head.bias);
    let z = tape.matmul(v, w);
    Ok(tape.add_row(z, b))
}

pub fn patch_logits(v: &Array1<f64>, head: &PatchHead, store: &ParamStore) -> Result<Array1<f64>> {
    let mut tape = Tape::inference(store);
    let x = tape.input(v.clone().insert_axis(Axis(0)));
    let z = trace_patch_logits(&mut tape, x, head)?;
    Ok(tape.value(z).row(0).to_owned())
}

/// Gated-attention MIL pooling followed by an affine classifier.
#[derive(Debug, Clone)]
pub struct WsiHead {
    pub attn_v: ParamId,
    pub attn_v_bias: ParamId,
    pub attn_u: ParamId,
    pub attn_u_bias: ParamId,
    pub attn_w: ParamId,
    pub attn_w_bias: ParamId,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl WsiHead {
    pub fn init<R: Rng + ?Sized>(dim: usize, attn_dim: usize, classes: usize, store: &mut ParamStore, rng: &mut R) -> Self {
        let g = ParamGroup::Head;
        Self {
            attn_v: store.add("head.wsi.attn_v.weight", g, xavier_uniform(rng, dim, attn_dim, dim, attn_dim)),
            attn_v_bias: store.add("head.wsi.attn_v.bias", g, Array2::zeros((1, attn_dim))),
            attn_u: store.add("head.wsi.attn_u.weight", g, xavier_uniform(rng, dim, attn_dim, dim, attn_dim)),
            attn_u_bias: store.add("head.wsi.attn_u.bias", g, Array2::zeros((1, attn_dim))),
            attn_w: store.add("head.wsi.attn_w.weight", g, xavier_uniform(rng, attn_dim, 1, attn_dim, 1)),
            attn_w_bias: store.add("head.wsi.attn_w.bias", g, Array2::zeros((1, 1))),
            weight: store.add("head.wsi.weight", g, xavier_uniform(rng, dim, classes, dim, classes)),
            bias: store.add("head.wsi.bias", g, Array2::zeros((1, classes))),
        }
    }

    pub fn param_count(dim: usize, attn_dim: usize, classes: usize) -> usize {
        2 * (dim * attn_dim + attn_dim) + attn_dim + 1 + dim * classes + classes
    }
}

/// Row permutation that sorts rows lexicographically by bit-exact value.
/// Pooling over the sorted bag makes the result independent of input order.
fn canonical_order(m: &Array2<f64>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..m.nrows()).collect();
    idx.sort_by(|&a, &b| {
        m.row(a)
            .iter()
            .zip(m.row(b).iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| *o != Ordering::Equal)
            .unwrap_or(Ordering::Equal)
    });
    idx
}

pub struct TracedWsi {
    pub logits: Var,
    /// `1 x n` attention weights over the canonically ordered bag.
    pub weights: Var,
    pub pooled: Var,
}

pub fn trace_wsi_aggregate(tape: &mut Tape<'_>, embeddings: Var, head: &WsiHead) -> Result<TracedWsi> {
    let (n, _) = tape.shape(embeddings);
    if n == 0 {
        return Err(Error::Input("cannot aggregate an empty bag".into()));
    }
    let order = canonical_order(tape.value(embeddings));
    let h = tape.gather_rows(embeddings, order);

    let v = tape.param(head.attn_v);
    let vb = tape.param(head.attn_v_bias);
    let u = tape.param(head.attn_u);
    let ub = tape.param(head.attn_u_bias);
    let w = tape.param(head.attn_w);
    let wb = tape.param(head.attn_w_bias);
    let t = tape.matmul(h, v);
    let t = tape.add_row(t, vb);
    let t = tape.tanh(t);
    let s = tape.matmul(h, u);
    let s = tape.add_row(s, ub);
    let s = tape.sigmoid(s);
    let gated = tape.mul(t, s);
    let scores = tape.matmul(gated, w);
    let scores = tape.add_row(scores, wb);
    let scores = tape.transpose(scores);
    let weights = tape.softmax_rows(scores);
    let pooled = tape.matmul(weights, h);

    let cw = tape.param(head.weight);
    let cb = tape.param(head.bias);
    let logits = tape.matmul(pooled, cw);
    let logits = tape.add_row(logits, cb);
    Ok(TracedWsi { logits, weights, pooled })
}

#[derive(Debug, Clone, PartialEq)]
pub struct WsiOutput {
    pub logits: Array1<f64>,
    pub pooled: Array1<f64>,
    /// Attention weights in canonical (sorted) bag order.
    pub weights: Array1<f64>,
}

pub fn wsi_aggregate(embeddings: &[Array1<f64>], head: &WsiHead, store: &ParamStore) -> Result<WsiOutput> {
    if embeddings.is_empty() {
        return Err(Error::Input("cannot aggregate an empty bag".into()));
    }
    let dim = embeddings[0].len();
    if let Some(bad) = embeddings.iter().find(|e| e.len() != dim) {
        return Err(Error::shape("bag embedding", dim, bad.len()));
    }
    let mut m = Array2::zeros((embeddings.len(), dim));
    for (mut row, e) in m.rows_mut().into_iter().zip(embeddings) {
        row.assign(e);
    }
    let mut tape = Tape::inference(store);
    let x = tape.input(m);
    let out = trace_wsi_aggregate(&mut tape, x, head)?;
    Ok(WsiOutput {
        logits: tape.value(out.logits).row(0).to_owned(),
        pooled: tape.value(out.pooled).row(0).to_owned(),
        weights: tape.value(out.weights).row(0).to_owned(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::normal;
    use crate::seed::rng_for;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn patch_head_affine_cases() {
        let mut store = ParamStore::new();
        let head = PatchHead::init(2, 2, &mut store, &mut rng_for(0, "h", 0));
        store.value_mut(head.weight).fill(0.0);
        let z = patch_logits(&array![0.3, -2.0], &head, &store).unwrap();
        assert_eq!(z, array![0.0, 0.0]);
        store.value_mut(head.weight).assign(&array![[1.0, 0.0], [0.0, 1.0]]);
        assert_eq!(patch_logits(&array![1.0, 0.0], &head, &store).unwrap(), array![1.0, 0.0]);
        assert!(patch_logits(&array![1.0, 0.0, 0.0], &head, &store).is_err());
    }

    fn wsi_fixture(dim: usize) -> (ParamStore, WsiHead) {
        let mut store = ParamStore::new();
        let head = WsiHead::init(dim, 6, 3, &mut store, &mut rng_for(2, "wsi", 0));
        (store, head)
    }

    #[test]
    fn single_and_duplicate_bags() {
        let (store, head) = wsi_fixture(4);
        let e = array![0.1, -0.4, 0.9, 0.0];
        let one = wsi_aggregate(&[e.clone()], &head, &store).unwrap();
        assert_eq!(one.weights, array![1.0]);
        assert_eq!(one.pooled, e);

        let two = wsi_aggregate(&[e.clone(), e.clone()], &head, &store).unwrap();
        assert_eq!(two.weights, array![0.5, 0.5]);
        for (p, x) in two.pooled.iter().zip(e.iter()) {
            assert!((p - x).abs() < 1e-15);
        }
        assert!(matches!(wsi_aggregate(&[], &head, &store), Err(Error::Input(_))));
    }

    #[test]
    fn patch_logits_is_affine() {
        let mut store = ParamStore::new();
        let head = PatchHead::init(5, 3, &mut store, &mut rng_for(9, "h", 0));
        store.value_mut(head.bias).assign(&array![[0.3, -0.2, 1.0]]);
        let v = normal(&mut rng_for(9, "v", 0), 1, 5, 1.0).row(0).to_owned();
        let zero = patch_logits(&Array1::zeros(5), &head, &store).unwrap();
        let base = patch_logits(&v, &head, &store).unwrap() - &zero;
        for alpha in [-2.0, 0.5, 3.0] {
            let scaled = patch_logits(&(&v * alpha), &head, &store).unwrap() - &zero;
            for (a, b) in scaled.iter().zip(base.iter()) {
                assert!((a - alpha * b).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn aggregation_is_permutation_invariant(
            rows in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 4), 1..9),
            perm_seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            let (store, head) = wsi_fixture(4);
            let bag: Vec<Array1<f64>> = rows.into_iter().map(Array1::from_vec).collect();
            let mut shuffled = bag.clone();
            shuffled.shuffle(&mut rng_for(perm_seed, "perm", 0));
            let a = wsi_aggregate(&bag, &head, &store).unwrap();
            let b = wsi_aggregate(&shuffled, &head, &store).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert!((a.weights.sum() - 1.0).abs() < 1e-6);
            prop_assert!(a.weights.iter().all(|w| *w >= 0.0));
        }
    }
}
