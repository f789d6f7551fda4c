//! Reconstruction loss, manifold constraint loss over the similarity
//! matrix, and the adaptive uncertainty-weighted combination.

use crate::error::{Error, Result};
use crate::masking::GroupIndex;
use crate::numerics::graph::{Graph, VarId};
use crate::numerics::tensor::Tensor;

/// Additive logit mask excluding a row's own similarity from the
/// constraint denominator. Underflows to exactly 0 after max-subtraction.
const SELF_LOGIT: f64 = -1e30;

/// Evaluated loss terms and weights for one step's report line.
#[derive(Clone, Copy, Debug)]
pub struct LossReport {
    pub rec: f64,
    pub con: f64,
    pub weight_rec: f64,
    pub weight_con: f64,
    pub total: f64,
}

/// Positive rows per row of the assembled batch. A row's positives are the
/// other members of its group: an original's M variants, or for a variant
/// its original plus its M-1 siblings. Every other row is a negative.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairSpec {
    pub positives: Vec<Vec<usize>>,
}

pub fn build_pairs(index: &GroupIndex) -> PairSpec {
    let positives = (0..index.d())
        .map(|row| {
            index
                .group_rows(index.group(row).0)
                .into_iter()
                .filter(|&r| r != row)
                .collect()
        })
        .collect();
    PairSpec { positives }
}

/// Mean squared error per element between `x` and `x_hat` [N, L, C].
pub fn loss_reconstruction(g: &mut Graph, x: VarId, x_hat: VarId) -> VarId {
    let (a, b) = (g.value(x).shape(), g.value(x_hat).shape());
    assert!(
        a == b,
        "dimension error: reconstruction loss over mismatched shapes {a:?} vs {b:?}"
    );
    let diff = g.sub(x_hat, x);
    let sq = g.mul(diff, diff);
    g.mean(sq)
}

/// Contrastive manifold constraint over the similarity matrix `r` [D, D]:
/// for every row s and positive s', the cross-entropy of picking s' among
/// all rows except s itself, at temperature `tau`. Row-max subtraction
/// (as a detached constant) keeps the log-sum-exp stable.
pub fn loss_constraint(g: &mut Graph, r: VarId, pairs: &PairSpec, tau: f64) -> Result<VarId> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Config(format!(
            "temperature must be positive and finite, got {tau}"
        )));
    }
    let shape = g.value(r).shape().to_vec();
    let d = pairs.positives.len();
    assert!(
        shape == [d, d],
        "dimension error: constraint loss expects [{d}, {d}] similarities, got {shape:?}"
    );
    let logits = g.mul_scalar(r, 1.0 / tau);

    let mut diag = vec![0.0; d * d];
    for s in 0..d {
        diag[s * d + s] = SELF_LOGIT;
    }
    let diag = g.constant(Tensor::from_raw(vec![d, d], diag));
    let masked = g.add(logits, diag);

    // detached per-row max: shifts value only, not gradients
    let masked_vals = g.value(masked).data();
    let row_max: Vec<f64> = (0..d)
        .map(|s| {
            masked_vals[s * d..(s + 1) * d]
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let max_col = g.constant(Tensor::from_raw(vec![d], row_max.clone()));
    let max_wide = g.expand_axis(max_col, 1, d);
    let shifted = g.sub(masked, max_wide);
    let e = g.exp(shifted);
    let sums = g.sum_axis(e, 1);
    let log_sums = g.log(sums);
    let lse = g.add(log_sums, max_col);

    let mut pos = vec![0.0; d * d];
    let mut counts = vec![0.0; d];
    for (s, ps) in pairs.positives.iter().enumerate() {
        for &p in ps {
            assert!(p != s, "positive set must not contain the row itself");
            pos[s * d + p] = 1.0;
            counts[s] += 1.0;
        }
    }
    let pos = g.constant(Tensor::from_raw(vec![d, d], pos));
    let picked = g.mul(logits, pos);
    let pos_sum = g.sum_axis(picked, 1);
    let counts = g.constant(Tensor::from_raw(vec![d], counts));
    let scaled_lse = g.mul(lse, counts);
    let per_row = g.sub(scaled_lse, pos_sum);
    Ok(g.sum(per_row))
}

/// Homoscedastic uncertainty weighting with learnable log-variance scalars
/// `a`, `b`: total = exp(-a)*rec + a + exp(-b)*con + b.
pub fn combine_adaptive(g: &mut Graph, rec: VarId, con: VarId, a: VarId, b: VarId) -> VarId {
    let na = g.neg(a);
    let wa = g.exp(na);
    let ra = g.mul(wa, rec);
    let nb = g.neg(b);
    let wb = g.exp(nb);
    let cb = g.mul(wb, con);
    let t1 = g.add(ra, a);
    let t2 = g.add(cb, b);
    g.add(t1, t2)
}
