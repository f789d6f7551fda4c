//! Representation analysis: linear centered kernel alignment between the
//! first and last encoder layers, and a reconstruction showcase comparing
//! neighborhood aggregation against direct masked reconstruction.

use crate::checkpoint::Checkpoint;
use crate::data::SeriesBatch;
use crate::error::{Error, Result};
use crate::masking::{assemble_inputs, mask, MaskConfig};
use crate::model;
use crate::numerics::graph::Graph;
use crate::numerics::tensor::Tensor;
use crate::similarity::{reconstruct, AggregationConfig};

#[derive(Clone, Copy, Debug)]
pub struct CkaReport {
    /// Linear CKA between first- and last-layer features, in [0, 1].
    pub cka_first_last: f64,
    pub first_layer: usize,
    pub last_layer: usize,
    pub samples: usize,
}

/// Table-style percentage with two decimals.
pub fn format_percent(fraction: f64) -> String {
    format!("{:.2}", 100.0 * fraction)
}

/// Linear CKA between representation matrices over the same n samples:
/// `||Yc' Xc||_F^2 / (||Xc' Xc||_F * ||Yc' Yc||_F)` with column-centered
/// Xc, Yc.
pub fn cka(x: &Tensor, y: &Tensor) -> Result<f64> {
    let (xs, ys) = (x.shape(), y.shape());
    assert!(
        xs.len() == 2 && ys.len() == 2 && xs[0] == ys[0],
        "dimension error: cka expects [n, p] and [n, q], got {xs:?} and {ys:?}"
    );
    let n = xs[0];
    if n < 2 {
        return Err(Error::InsufficientData(
            "cka needs at least 2 samples".to_string(),
        ));
    }
    let xc = center_columns(x);
    let yc = center_columns(y);
    let norm_x = gram_frobenius(&xc, &xc).sqrt();
    let norm_y = gram_frobenius(&yc, &yc).sqrt();
    if norm_x == 0.0 || norm_y == 0.0 {
        return Err(Error::DegenerateInput(
            "all rows identical: zero-variance representation".to_string(),
        ));
    }
    Ok(gram_frobenius(&yc, &xc) / (norm_x * norm_y))
}

fn center_columns(t: &Tensor) -> Tensor {
    let (n, p) = (t.shape()[0], t.shape()[1]);
    let mut means = vec![0.0; p];
    for i in 0..n {
        for j in 0..p {
            means[j] += t.data()[i * p + j];
        }
    }
    for m in &mut means {
        *m /= n as f64;
    }
    let data = t
        .data()
        .iter()
        .enumerate()
        .map(|(k, v)| v - means[k % p])
        .collect();
    Tensor::from_raw(t.shape().to_vec(), data)
}

/// `||B' A||_F^2` for [n, p] A and [n, q] B, without materializing B'A
/// beyond a q-by-p pass.
fn gram_frobenius(b: &Tensor, a: &Tensor) -> f64 {
    let n = a.shape()[0];
    let p = a.shape()[1];
    let q = b.shape()[1];
    let mut total = 0.0;
    for j in 0..q {
        for k in 0..p {
            let mut dot = 0.0;
            for i in 0..n {
                dot += b.data()[i * q + j] * a.data()[i * p + k];
            }
            total += dot * dot;
        }
    }
    total
}

/// Per-sample features of the first and last encoder layers, flattened
/// over the time axis: two [N, L*d_model] matrices.
pub fn first_last_features(ckpt: &Checkpoint, probe: &SeriesBatch) -> Result<(Tensor, Tensor)> {
    let cfg = &ckpt.model;
    let mut g = Graph::new();
    let bound = ckpt.params.bind(&mut g);
    let x = g.constant(probe.values.clone());
    let layers = model::encode_layers(&mut g, &bound, cfg, x);
    g.ensure_finite()?;
    let flatten = |t: &Tensor| {
        let (n, l, d) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        Tensor::from_raw(vec![n, l * d], t.data().to_vec())
    };
    Ok((
        flatten(g.value(layers[0])),
        flatten(g.value(*layers.last().unwrap())),
    ))
}

pub fn cka_first_last(ckpt: &Checkpoint, probe: &SeriesBatch) -> Result<CkaReport> {
    let (first, last) = first_last_features(ckpt, probe)?;
    Ok(CkaReport {
        cka_first_last: cka(&first, &last)?,
        first_layer: 0,
        last_layer: ckpt.model.e_layers - 1,
        samples: probe.n(),
    })
}

/// Absolute difference of first/last-layer CKA between two models on the
/// same probe batch.
pub fn representation_gap(
    a: &Checkpoint,
    b: &Checkpoint,
    probe: &SeriesBatch,
) -> Result<f64> {
    if a.model != b.model {
        return Err(Error::Config(format!(
            "checkpoints disagree on model config: {:?} vs {:?}",
            a.model, b.model
        )));
    }
    let ra = cka_first_last(a, probe)?;
    let rb = cka_first_last(b, probe)?;
    Ok((ra.cka_first_last - rb.cka_first_last).abs())
}

pub const DEMO_CSV_HEADER: &str =
    "sample,t,original,masked,simmtm_hat,direct_hat,simmtm_mse,direct_mse";

/// Side-by-side reconstruction table: for each probe series, the original,
/// its first masked variant, the aggregated reconstruction from `simmtm`,
/// and the direct per-variant reconstruction from `direct` (an encoder
/// pre-trained with M=1 and no aggregation). One CSV row per time point.
pub fn reconstruction_demo(
    probe: &SeriesBatch,
    simmtm: &Checkpoint,
    direct: &Checkpoint,
    mask_cfg: &MaskConfig,
    agg_cfg: &AggregationConfig,
) -> Result<String> {
    if probe.c() != 1 {
        return Err(Error::Config(
            "reconstruction demo expects univariate (flattened) series".to_string(),
        ));
    }
    let set = mask(probe, mask_cfg)?;
    let (n, l) = (set.n, set.l);

    // aggregated reconstruction
    let mut g = Graph::new();
    let bound = simmtm.params.bind(&mut g);
    let bundle = reconstruct(&mut g, &bound, &simmtm.model, probe, &set, agg_cfg)?;
    g.ensure_finite()?;
    let simmtm_hat = g.value(bundle.x_hat).clone();

    // direct reconstruction of each sample's first variant
    let mut gd = Graph::new();
    let bound_d = direct.params.bind(&mut gd);
    let (assembled, index) = assemble_inputs(probe, &set);
    let inputs = gd.constant(assembled);
    let z = model::encode(&mut gd, &bound_d, &direct.model, inputs);
    let first_variants: Vec<usize> = (0..n).map(|i| index.variant_row(i, 0)).collect();
    let zv = gd.index_select(z, &first_variants);
    let direct_hat_id = model::decode(&mut gd, &bound_d, zv);
    gd.ensure_finite()?;
    let direct_hat = gd.value(direct_hat_id).clone();

    let mut out = String::from(DEMO_CSV_HEADER);
    out.push('\n');
    for i in 0..n {
        let mut se_s = 0.0;
        let mut se_d = 0.0;
        for t in 0..l {
            let orig = probe.values.data()[i * l + t];
            se_s += (orig - simmtm_hat.data()[i * l + t]).powi(2);
            se_d += (orig - direct_hat.data()[i * l + t]).powi(2);
        }
        let mse_s = se_s / l as f64;
        let mse_d = se_d / l as f64;
        for t in 0..l {
            let orig = probe.values.data()[i * l + t];
            let masked = if set.masked(i, 0, t) { 0.0 } else { orig };
            out.push_str(&format!(
                "{i},{t},{orig:.6},{masked:.6},{:.6},{:.6},{mse_s:.6},{mse_d:.6}\n",
                simmtm_hat.data()[i * l + t],
                direct_hat.data()[i * l + t],
            ));
        }
    }
    Ok(out)
}

/// Mean per-sample reconstruction MSEs (aggregated, direct) extracted from
/// a demo table's summary columns.
pub fn demo_mean_mses(csv: &str) -> (f64, f64) {
    let mut sums = (0.0, 0.0);
    let mut count = 0.0;
    let mut last_sample = usize::MAX;
    for line in csv.lines().skip(1) {
        let cells: Vec<&str> = line.split(',').collect();
        let sample: usize = cells[0].parse().unwrap();
        if sample != last_sample {
            sums.0 += cells[6].parse::<f64>().unwrap();
            sums.1 += cells[7].parse::<f64>().unwrap();
            count += 1.0;
            last_sample = sample;
        }
    }
    (sums.0 / count, sums.1 / count)
}
