//! Series-wise cosine similarity and softmax-weighted neighborhood
//! aggregation.
//!
//! Each original sample's point-wise representation is rebuilt as a convex
//! combination of other rows' representations, weighted by softmax over
//! cosine similarities at temperature `tau`. The candidate set is either
//! every other row (PNSA) or only the sample's own masked variants (PSA).

use crate::error::{Error, Result};
use crate::masking::{GroupIndex, MaskedSet};
use crate::model::{self, Bound, ModelConfig};
use crate::numerics::graph::{Graph, VarId};
use crate::numerics::tensor::Tensor;

/// Floor for cosine denominators; zero rows get similarity 0 instead of NaN.
pub const COSINE_EPS: f64 = 1e-8;

/// Additive logit mask for excluded rows. Large enough that `exp` underflows
/// to exactly 0.0 after max-subtraction at any reasonable temperature.
const EXCLUDED_LOGIT: f64 = -1e30;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CandidateSet {
    /// All D-1 other rows: own variants plus every row of other samples.
    Pnsa,
    /// Only the sample's own M masked variants.
    Psa,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AggregationConfig {
    pub candidate_set: CandidateSet,
    pub temperature: f64,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        Self {
            candidate_set: CandidateSet::Pnsa,
            temperature: 0.02,
        }
    }
}

impl AggregationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!(
                "temperature must be positive and finite, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Evaluated pairwise similarity matrix, for reporting and analysis.
#[derive(Clone, Debug)]
pub struct SimMatrix {
    /// [D, D] cosine similarities.
    pub r: Tensor,
    pub temperature: f64,
}

/// Pairwise cosine similarities of the rows of `s` [D, d_model] -> [D, D].
pub fn cosine_matrix(g: &mut Graph, s: VarId) -> VarId {
    let shape = g.value(s).shape();
    assert!(
        shape.len() == 2 && shape[0] >= 2,
        "dimension error: cosine_matrix expects [D >= 2, d_model], got {shape:?}"
    );
    let d = shape[0];
    let sq = g.mul(s, s);
    let row_sq = g.sum_axis(sq, 1);
    let norm_sq = g.sqrt(row_sq);
    let norm = g.clamp_min(norm_sq, COSINE_EPS);
    let st = g.permute(s, &[1, 0]);
    let gram = g.matmul(s, st);
    let rows = g.expand_axis(norm, 1, d);
    let cols = g.permute(rows, &[1, 0]);
    let denom = g.mul(rows, cols);
    g.div(gram, denom)
}

/// Aggregation weights per original sample: [N, D], rows summing to 1 over
/// the candidate set, exactly 0.0 elsewhere. Differentiable through `r`.
pub fn aggregation_weights(
    g: &mut Graph,
    r: VarId,
    index: &GroupIndex,
    cfg: &AggregationConfig,
) -> Result<VarId> {
    cfg.validate()?;
    if index.m < 1 {
        return Err(Error::Config(
            "aggregation requires at least one masked variant per sample".to_string(),
        ));
    }
    let d = index.d();
    let r_shape = g.value(r).shape();
    assert!(
        r_shape == [d, d],
        "dimension error: similarity matrix shape {r_shape:?} does not match D={d}"
    );

    let origin_rows: Vec<usize> = (0..index.n).map(|i| index.original_row(i)).collect();
    let own = g.index_select(r, &origin_rows);
    let logits = g.mul_scalar(own, 1.0 / cfg.temperature);

    let mut mask = vec![0.0; index.n * d];
    for i in 0..index.n {
        for c in 0..d {
            let (sample, variant) = index.group(c);
            let excluded = match cfg.candidate_set {
                CandidateSet::Pnsa => c == index.original_row(i),
                CandidateSet::Psa => sample != i || variant.is_none(),
            };
            if excluded {
                mask[i * d + c] = EXCLUDED_LOGIT;
            }
        }
    }
    let mask = g.constant(Tensor::from_raw(vec![index.n, d], mask));
    let masked = g.add(logits, mask);
    Ok(g.softmax(masked, 1))
}

/// Softmax-weighted aggregation of point-wise representations: for each
/// original sample i, `z_hat[i] = sum over candidates c of w[i,c] * z[c]`.
///
/// `z` is [D, L, d_model], `r` is [D, D]; returns [N, L, d_model].
pub fn aggregate(
    g: &mut Graph,
    z: VarId,
    r: VarId,
    index: &GroupIndex,
    cfg: &AggregationConfig,
) -> Result<VarId> {
    let z_shape = g.value(z).shape().to_vec();
    assert!(
        z_shape.len() == 3 && z_shape[0] == index.d(),
        "dimension error: aggregate expects z [D, L, d_model] with D={}, got {z_shape:?}",
        index.d()
    );
    let (l, dm) = (z_shape[1], z_shape[2]);
    let w = aggregation_weights(g, r, index, cfg)?;
    let z_flat = g.reshape(z, &[index.d(), l * dm]);
    let out = g.matmul(w, z_flat);
    Ok(g.reshape(out, &[index.n, l, dm]))
}

/// Everything the losses need from one reconstruction pass.
pub struct RepBundle {
    /// Assembled inputs [D, L, C]: originals interleaved with variants.
    pub inputs: VarId,
    /// Point-wise representations [D, L, d_model].
    pub z: VarId,
    /// Series-wise representations [D, d_model].
    pub s: VarId,
    /// Similarity matrix [D, D].
    pub r: VarId,
    /// Aggregated point-wise representations [N, L, d_model].
    pub z_hat: VarId,
    /// Reconstructed series [N, L, C].
    pub x_hat: VarId,
    pub index: GroupIndex,
}

/// Full reconstruction pipeline: assemble masked inputs, encode, project,
/// build the similarity matrix, aggregate, decode.
pub fn reconstruct(
    g: &mut Graph,
    bound: &Bound,
    model_cfg: &ModelConfig,
    batch: &crate::data::SeriesBatch,
    set: &MaskedSet,
    cfg: &AggregationConfig,
) -> Result<RepBundle> {
    if set.m < 1 {
        return Err(Error::Config(
            "reconstruction requires at least one masked variant per sample".to_string(),
        ));
    }
    let (assembled, index) = crate::masking::assemble_inputs(batch, set);
    let inputs = g.constant(assembled);
    let z = model::encode(g, bound, model_cfg, inputs);
    let s = model::project(g, bound, z);
    let r = cosine_matrix(g, s);
    let z_hat = aggregate(g, z, r, &index, cfg)?;
    let x_hat = model::decode(g, bound, z_hat);
    Ok(RepBundle {
        inputs,
        z,
        s,
        r,
        z_hat,
        x_hat,
        index,
    })
}

/// Snapshot the similarity matrix values for reporting.
pub fn sim_matrix(g: &Graph, r: VarId, temperature: f64) -> SimMatrix {
    SimMatrix {
        r: g.value(r).clone(),
        temperature,
    }
}
