//! Pre-training and fine-tuning loops, Adam optimizer, data splits, and
//! evaluation metrics. All randomness flows from explicit seeds so reruns
//! are bit-identical.

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, FORMAT_VERSION};
use crate::data::{
    compute_stats, flatten_channels, make_windows, segment_samples, standardize, NormStats,
    RawDataset, SeriesBatch, SplitSpec,
};
use crate::error::{Error, Result};
use crate::losses::{build_pairs, combine_adaptive, loss_constraint, loss_reconstruction};
use crate::masking::{assemble_inputs, mask, MaskConfig};
use crate::model::{self, FinetuneModel, ModelConfig, ParamSet, PretrainModel};
use crate::numerics::graph::Graph;
use crate::numerics::tensor::Tensor;
use crate::similarity::{reconstruct, AggregationConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    FinetuneForecast,
    FinetuneClassify,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub phase: Phase,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Forecasting horizon; unused elsewhere.
    pub horizon: usize,
    /// Class count; unused outside classification.
    pub classes: usize,
}

impl TrainConfig {
    /// Forecasting pre-training defaults: 1e-3, batch 32, 50 epochs.
    pub fn pretrain_default(seed: u64) -> Self {
        Self {
            phase: Phase::Pretrain,
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 50,
            seed,
            horizon: 0,
            classes: 0,
        }
    }

    /// Forecasting fine-tune defaults: 1e-4, batch 32, 10 epochs, L2 loss.
    pub fn finetune_forecast_default(seed: u64, horizon: usize) -> Self {
        Self {
            phase: Phase::FinetuneForecast,
            learning_rate: 1e-4,
            batch_size: 32,
            epochs: 10,
            seed,
            horizon,
            classes: 0,
        }
    }

    pub fn finetune_classify_default(seed: u64, classes: usize) -> Self {
        Self {
            phase: Phase::FinetuneClassify,
            learning_rate: 1e-4,
            batch_size: 32,
            epochs: 10,
            seed,
            horizon: 0,
            classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || self.batch_size < 1 || self.epochs < 1 {
            return Err(Error::Config(format!(
                "learning_rate {} / batch_size {} / epochs {} out of range",
                self.learning_rate, self.batch_size, self.epochs
            )));
        }
        match self.phase {
            Phase::FinetuneForecast if self.horizon < 1 => {
                Err(Error::Config("forecast phase needs horizon >= 1".to_string()))
            }
            Phase::FinetuneClassify if self.classes < 2 => {
                Err(Error::Config("classification needs K >= 2".to_string()))
            }
            _ => Ok(()),
        }
    }
}

/// Which terms of the pre-training objective are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PretrainMode {
    Full,
    /// Constraint loss only.
    NoReconstruction,
    /// Reconstruction loss only.
    NoConstraint,
    /// Decode each masked variant's own representation; no aggregation,
    /// no constraint. The comparison baseline for the reconstruction demo.
    DirectBaseline,
}

// ── optimizer ───────────────────────────────────────────────────────

/// Adam with the standard moment defaults.
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(params: &ParamSet) -> Self {
        Self {
            m: params.entries().iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
            v: params.entries().iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One update; `grads` is parallel to the parameter set, `None` for
    /// parameters the loss did not touch (treated as zero gradient).
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<Tensor>], lr: f64) {
        assert_eq!(grads.len(), params.len(), "dimension error: gradient count");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (p, (_, tensor)) in params.entries_mut().iter_mut().enumerate() {
            let zero;
            let grad = match &grads[p] {
                Some(t) => t.data(),
                None => {
                    zero = vec![0.0; tensor.numel()];
                    &zero
                }
            };
            let data = tensor.data_mut();
            for k in 0..data.len() {
                let g = grad[k];
                self.m[p][k] = self.beta1 * self.m[p][k] + (1.0 - self.beta1) * g;
                self.v[p][k] = self.beta2 * self.v[p][k] + (1.0 - self.beta2) * g * g;
                let mh = self.m[p][k] / bc1;
                let vh = self.v[p][k] / bc2;
                data[k] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

// ── epoch logging ───────────────────────────────────────────────────

pub const EPOCH_LOG_HEADER: &str = "epoch,loss_rec,loss_con,weight_rec,weight_con,total";

#[derive(Clone, Copy, Debug)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_rec: f64,
    pub loss_con: f64,
    pub weight_rec: f64,
    pub weight_con: f64,
    pub total: f64,
}

impl EpochLog {
    pub fn line(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.epoch, self.loss_rec, self.loss_con, self.weight_rec, self.weight_con, self.total
        )
    }
}

// ── batching helpers ────────────────────────────────────────────────

fn select_rows(b: &SeriesBatch, rows: &[usize]) -> SeriesBatch {
    let (l, c) = (b.l(), b.c());
    let stride = l * c;
    let mut data = Vec::with_capacity(rows.len() * stride);
    let mut origin = Vec::with_capacity(rows.len());
    for &r in rows {
        data.extend_from_slice(&b.values.data()[r * stride..(r + 1) * stride]);
        origin.push(b.origin[r]);
    }
    SeriesBatch {
        values: Tensor::from_raw(vec![rows.len(), l, c], data),
        origin,
        normalization: b.normalization.clone(),
    }
}

fn select_tensor_rows(t: &Tensor, rows: &[usize]) -> Tensor {
    let stride: usize = t.shape()[1..].iter().product();
    let mut data = Vec::with_capacity(rows.len() * stride);
    for &r in rows {
        data.extend_from_slice(&t.data()[r * stride..(r + 1) * stride]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = rows.len();
    Tensor::from_raw(shape, data)
}

fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

// ── pre-training ────────────────────────────────────────────────────

pub fn pretrain(
    data: &SeriesBatch,
    mask_cfg: &MaskConfig,
    model_cfg: &ModelConfig,
    agg_cfg: &AggregationConfig,
    cfg: &TrainConfig,
    mode: PretrainMode,
) -> Result<(Checkpoint, Vec<EpochLog>)> {
    cfg.validate()?;
    mask_cfg.validate()?;
    agg_cfg.validate()?;
    let mut model = PretrainModel::init(model_cfg, cfg.seed)?;
    let mut adam = Adam::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut batch_counter = 0usize;

    for epoch in 0..cfg.epochs {
        let mut sums = (0.0, 0.0, 0.0, 0.0, 0.0);
        let batches = epoch_batches(data.n(), cfg.batch_size, &mut rng);
        let n_batches = batches.len();
        for rows in batches {
            let sub = select_rows(data, &rows);
            let batch_mask = MaskConfig {
                seed: rng.gen(),
                ..*mask_cfg
            };
            let set = mask(&sub, &batch_mask)?;

            let mut g = Graph::new();
            let bound = model.params.bind(&mut g);
            let targets = g.constant(sub.values.clone());

            let (rec_v, con_v, w_rec, w_con, total_v, total_id) = match mode {
                PretrainMode::Full | PretrainMode::NoReconstruction | PretrainMode::NoConstraint => {
                    let bundle = reconstruct(&mut g, &bound, model_cfg, &sub, &set, agg_cfg)?;
                    let rec = loss_reconstruction(&mut g, targets, bundle.x_hat);
                    let pairs = build_pairs(&bundle.index);
                    let con = loss_constraint(&mut g, bundle.r, &pairs, agg_cfg.temperature)?;
                    match mode {
                        PretrainMode::Full => {
                            let a = bound.id("loss.a");
                            let b = bound.id("loss.b");
                            let total = combine_adaptive(&mut g, rec, con, a, b);
                            (
                                g.value(rec).item(),
                                g.value(con).item(),
                                (-g.value(a).item()).exp(),
                                (-g.value(b).item()).exp(),
                                g.value(total).item(),
                                total,
                            )
                        }
                        PretrainMode::NoConstraint => (
                            g.value(rec).item(),
                            0.0,
                            1.0,
                            0.0,
                            g.value(rec).item(),
                            rec,
                        ),
                        _ => (0.0, g.value(con).item(), 0.0, 1.0, g.value(con).item(), con),
                    }
                }
                PretrainMode::DirectBaseline => {
                    let (assembled, index) = assemble_inputs(&sub, &set);
                    let inputs = g.constant(assembled);
                    let z = model::encode(&mut g, &bound, model_cfg, inputs);
                    let variant_rows: Vec<usize> = (0..index.n)
                        .flat_map(|i| (0..index.m).map(move |j| index.variant_row(i, j)))
                        .collect();
                    let zv = g.index_select(z, &variant_rows);
                    let x_hat = model::decode(&mut g, &bound, zv);
                    // each variant reconstructs its own original
                    let rep_rows: Vec<usize> = (0..sub.n())
                        .flat_map(|i| std::iter::repeat(i).take(index.m))
                        .collect();
                    let rep = g.index_select(targets, &rep_rows);
                    let rec = loss_reconstruction(&mut g, rep, x_hat);
                    (g.value(rec).item(), 0.0, 1.0, 0.0, g.value(rec).item(), rec)
                }
            };

            for (value, term) in [(rec_v, "reconstruction"), (con_v, "constraint"), (total_v, "total")] {
                if !value.is_finite() {
                    return Err(Error::Diverged {
                        batch: batch_counter,
                        term: term.to_string(),
                    });
                }
            }

            g.backward(total_id);
            g.ensure_finite().map_err(|_| Error::Diverged {
                batch: batch_counter,
                term: "gradient".to_string(),
            })?;
            let grads: Vec<Option<Tensor>> =
                bound.ordered().iter().map(|&id| g.grad(id)).collect();
            adam.step(&mut model.params, &grads, cfg.learning_rate);

            sums.0 += rec_v;
            sums.1 += con_v;
            sums.2 += w_rec;
            sums.3 += w_con;
            sums.4 += total_v;
            batch_counter += 1;
        }
        let k = n_batches as f64;
        logs.push(EpochLog {
            epoch,
            loss_rec: sums.0 / k,
            loss_con: sums.1 / k,
            weight_rec: sums.2 / k,
            weight_con: sums.3 / k,
            total: sums.4 / k,
        });
    }

    let ckpt = Checkpoint {
        version: FORMAT_VERSION,
        kind: "pretrain".to_string(),
        model: *model_cfg,
        params: model.params,
        seed: cfg.seed,
    };
    Ok((ckpt, logs))
}

// ── metrics ─────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub enum MetricsReport {
    Forecast {
        mse: f64,
        mae: f64,
    },
    /// Percentages, macro-averaged over classes.
    Classify {
        accuracy: f64,
        precision: f64,
        recall: f64,
        f1: f64,
    },
}

impl MetricsReport {
    pub fn lines(&self) -> String {
        match self {
            MetricsReport::Forecast { mse, mae } => format!("mse={mse:.6}\nmae={mae:.6}\n"),
            MetricsReport::Classify {
                accuracy,
                precision,
                recall,
                f1,
            } => format!(
                "accuracy={accuracy:.2}\nprecision={precision:.2}\nrecall={recall:.2}\nf1={f1:.2}\n"
            ),
        }
    }
}

/// MSE and MAE between equal-shaped tensors.
pub fn forecast_metrics(pred: &Tensor, target: &Tensor) -> MetricsReport {
    assert_eq!(
        pred.shape(),
        target.shape(),
        "dimension error: metric shapes"
    );
    let n = pred.numel() as f64;
    let mut se = 0.0;
    let mut ae = 0.0;
    for (a, b) in pred.data().iter().zip(target.data()) {
        se += (a - b) * (a - b);
        ae += (a - b).abs();
    }
    MetricsReport::Forecast {
        mse: se / n,
        mae: ae / n,
    }
}

/// Accuracy plus macro precision/recall/F1 from predicted and true labels.
/// Classes with no predictions get precision 0; with no members, recall 0.
pub fn classify_metrics(pred: &[usize], truth: &[usize], k: usize) -> MetricsReport {
    assert_eq!(pred.len(), truth.len(), "dimension error: label counts");
    let mut confusion = vec![0usize; k * k];
    for (&p, &t) in pred.iter().zip(truth) {
        confusion[t * k + p] += 1;
    }
    let correct: usize = (0..k).map(|c| confusion[c * k + c]).sum();
    let accuracy = correct as f64 / pred.len() as f64;
    let mut precision = 0.0;
    let mut recall = 0.0;
    let mut f1 = 0.0;
    for c in 0..k {
        let tp = confusion[c * k + c] as f64;
        let predicted: f64 = (0..k).map(|t| confusion[t * k + c]).sum::<usize>() as f64;
        let actual: f64 = (0..k).map(|p| confusion[c * k + p]).sum::<usize>() as f64;
        let p = if predicted > 0.0 { tp / predicted } else { 0.0 };
        let r = if actual > 0.0 { tp / actual } else { 0.0 };
        precision += p;
        recall += r;
        f1 += if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    }
    let kf = k as f64;
    MetricsReport::Classify {
        accuracy: 100.0 * accuracy,
        precision: 100.0 * precision / kf,
        recall: 100.0 * recall / kf,
        f1: 100.0 * f1 / kf,
    }
}

// ── data preparation ────────────────────────────────────────────────

/// Windowed chronological splits in standardized space, with channels
/// flattened to independent univariate samples.
pub struct ForecastSplits {
    pub train: (SeriesBatch, Tensor),
    pub val: (SeriesBatch, Tensor),
    pub test: (SeriesBatch, Tensor),
    pub stats: NormStats,
    pub channels: usize,
}

pub fn prepare_forecast(
    d: &RawDataset,
    split: &SplitSpec,
    input_len: usize,
    horizon: usize,
    stride: usize,
) -> Result<ForecastSplits> {
    split.validate()?;
    let (tr, va, te) = split.row_ranges(d.t_len());
    let stats = compute_stats(d, tr.clone())?;
    let sd = standardize(d, &stats);
    let cut = |range: Range<usize>| -> Result<(SeriesBatch, Tensor)> {
        let (inputs, targets) = make_windows(&sd, range, input_len, horizon, stride, Some(stats.clone()))?;
        let flat_inputs = flatten_channels(&inputs);
        let wrapped = SeriesBatch {
            values: targets,
            origin: inputs.origin.clone(),
            normalization: None,
        };
        let flat_targets = flatten_channels(&wrapped).values;
        Ok((flat_inputs, flat_targets))
    };
    Ok(ForecastSplits {
        train: cut(tr)?,
        val: cut(va)?,
        test: cut(te)?,
        stats,
        channels: d.n_channels(),
    })
}

/// Per-sample classification splits (standardized, channels kept).
pub struct ClassifySplits {
    pub train: (SeriesBatch, Vec<usize>),
    pub val: (SeriesBatch, Vec<usize>),
    pub test: (SeriesBatch, Vec<usize>),
    pub classes: usize,
}

pub fn prepare_classify(
    d: &RawDataset,
    split: &SplitSpec,
    sample_len: usize,
) -> Result<ClassifySplits> {
    split.validate()?;
    let segments = segment_samples(d, sample_len)?;
    let mut class_ids: Vec<i64> = segments.iter().map(|&(_, l)| l).collect();
    class_ids.sort_unstable();
    class_ids.dedup();
    let classes = class_ids.len();
    if classes < 2 {
        return Err(Error::Config(format!(
            "need at least 2 classes, found {classes}"
        )));
    }
    let stats = compute_stats(d, 0..d.t_len())?;
    let sd = standardize(d, &stats);
    let c = d.n_channels();
    let cut = |range: Range<usize>| -> (SeriesBatch, Vec<usize>) {
        let mut data = Vec::new();
        let mut origin = Vec::new();
        let mut labels = Vec::new();
        for &(start, label) in &segments[range] {
            for t in start..start + sample_len {
                data.extend_from_slice(&sd.rows[t]);
            }
            origin.push(start);
            labels.push(class_ids.iter().position(|&x| x == label).unwrap());
        }
        (
            SeriesBatch {
                values: Tensor::from_raw(vec![origin.len(), sample_len, c], data),
                origin,
                normalization: Some(stats.clone()),
            },
            labels,
        )
    };
    let (tr, va, te) = split.row_ranges(segments.len());
    let splits = ClassifySplits {
        train: cut(tr),
        val: cut(va),
        test: cut(te),
        classes,
    };
    let mut seen = vec![false; classes];
    for &l in &splits.train.1 {
        seen[l] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::Config(format!(
            "class {} absent from the train split",
            class_ids[missing]
        )));
    }
    Ok(splits)
}

// ── fine-tuning ─────────────────────────────────────────────────────

fn check_checkpoint(ckpt: Option<&Checkpoint>, model_cfg: &ModelConfig) -> Result<()> {
    if let Some(c) = ckpt {
        if c.model != *model_cfg {
            return Err(Error::Config(format!(
                "checkpoint model config {:?} does not match run config {:?}",
                c.model, model_cfg
            )));
        }
    }
    Ok(())
}

pub fn finetune_forecast(
    ckpt: Option<&Checkpoint>,
    splits: &ForecastSplits,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(FinetuneModel, MetricsReport)> {
    cfg.validate()?;
    check_checkpoint(ckpt, model_cfg)?;
    let mut model = FinetuneModel::init_forecast(
        model_cfg,
        cfg.horizon,
        cfg.seed,
        ckpt.map(|c| &c.params),
    )?;
    let mut adam = Adam::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (inputs, targets) = &splits.train;

    for _ in 0..cfg.epochs {
        for rows in epoch_batches(inputs.n(), cfg.batch_size, &mut rng) {
            let sub = select_rows(inputs, &rows);
            let tgt = select_tensor_rows(targets, &rows);
            let mut g = Graph::new();
            let bound = model.params.bind(&mut g);
            let x = g.constant(sub.values);
            let z = model::encode(&mut g, &bound, model_cfg, x);
            let pred = model::head_forecast(&mut g, &bound, z);
            let t = g.constant(tgt);
            let loss = loss_reconstruction(&mut g, t, pred);
            g.backward(loss);
            g.ensure_finite()?;
            let grads: Vec<Option<Tensor>> =
                bound.ordered().iter().map(|&id| g.grad(id)).collect();
            adam.step(&mut model.params, &grads, cfg.learning_rate);
        }
    }

    let pred = forecast_predict(&model, model_cfg, &splits.test.0, cfg.batch_size)?;
    let report = forecast_metrics(&pred, &splits.test.1);
    Ok((model, report))
}

/// Forward the forecast head over a batch without training.
pub fn forecast_predict(
    model: &FinetuneModel,
    model_cfg: &ModelConfig,
    inputs: &SeriesBatch,
    batch_size: usize,
) -> Result<Tensor> {
    let mut rows_out: Vec<f64> = Vec::new();
    let mut horizon = 0;
    for chunk in (0..inputs.n()).collect::<Vec<_>>().chunks(batch_size.max(1)) {
        let sub = select_rows(inputs, chunk);
        let mut g = Graph::new();
        let bound = model.params.bind(&mut g);
        let x = g.constant(sub.values);
        let z = model::encode(&mut g, &bound, model_cfg, x);
        let pred = model::head_forecast(&mut g, &bound, z);
        g.ensure_finite()?;
        horizon = g.value(pred).shape()[1];
        rows_out.extend_from_slice(g.value(pred).data());
    }
    Ok(Tensor::from_raw(vec![inputs.n(), horizon, 1], rows_out))
}

pub fn finetune_classify(
    ckpt: Option<&Checkpoint>,
    splits: &ClassifySplits,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(FinetuneModel, MetricsReport)> {
    cfg.validate()?;
    check_checkpoint(ckpt, model_cfg)?;
    if splits.classes > cfg.classes {
        return Err(Error::Config(format!(
            "data holds {} classes but config allows {}",
            splits.classes, cfg.classes
        )));
    }
    let mut model = FinetuneModel::init_classify(
        model_cfg,
        cfg.classes,
        cfg.seed,
        ckpt.map(|c| &c.params),
    )?;
    let mut adam = Adam::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (inputs, labels) = &splits.train;

    for _ in 0..cfg.epochs {
        for rows in epoch_batches(inputs.n(), cfg.batch_size, &mut rng) {
            let sub = select_rows(inputs, &rows);
            let mut g = Graph::new();
            let bound = model.params.bind(&mut g);
            let x = g.constant(sub.values);
            let z = model::encode(&mut g, &bound, model_cfg, x);
            let logits = model::head_classify(&mut g, &bound, z);
            let probs = g.softmax(logits, 1);
            let mut onehot = vec![0.0; rows.len() * cfg.classes];
            for (i, &r) in rows.iter().enumerate() {
                onehot[i * cfg.classes + labels[r]] = 1.0;
            }
            let oh = g.constant(Tensor::from_raw(vec![rows.len(), cfg.classes], onehot));
            let picked = g.mul(probs, oh);
            let per_sample = g.sum_axis(picked, 1);
            let logp = g.log(per_sample);
            let mean = g.mean(logp);
            let loss = g.neg(mean);
            g.backward(loss);
            g.ensure_finite()?;
            let grads: Vec<Option<Tensor>> =
                bound.ordered().iter().map(|&id| g.grad(id)).collect();
            adam.step(&mut model.params, &grads, cfg.learning_rate);
        }
    }

    let pred = classify_predict(&model, model_cfg, &splits.test.0, cfg.batch_size)?;
    let report = classify_metrics(&pred, &splits.test.1, cfg.classes);
    Ok((model, report))
}

/// Argmax class predictions for a batch.
pub fn classify_predict(
    model: &FinetuneModel,
    model_cfg: &ModelConfig,
    inputs: &SeriesBatch,
    batch_size: usize,
) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(inputs.n());
    for chunk in (0..inputs.n()).collect::<Vec<_>>().chunks(batch_size.max(1)) {
        let sub = select_rows(inputs, chunk);
        let mut g = Graph::new();
        let bound = model.params.bind(&mut g);
        let x = g.constant(sub.values);
        let z = model::encode(&mut g, &bound, model_cfg, x);
        let logits = model::head_classify(&mut g, &bound, z);
        g.ensure_finite()?;
        let vals = g.value(logits);
        let k = vals.shape()[1];
        for i in 0..chunk.len() {
            let row = &vals.data()[i * k..(i + 1) * k];
            let best = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            out.push(best);
        }
    }
    Ok(out)
}

// ── grid search ─────────────────────────────────────────────────────

pub const GRID_CSV_HEADER: &str = "ratio,count,temperature,val_mse,test_mse";

/// Pretrain + fine-tune per grid cell over masking ratio and variant
/// count; returns CSV rows in axis order.
#[allow(clippy::too_many_arguments)]
pub fn grid_search(
    splits: &ForecastSplits,
    ratios: &[f64],
    counts: &[usize],
    mask_cfg: &MaskConfig,
    model_cfg: &ModelConfig,
    agg_cfg: &AggregationConfig,
    pre_cfg: &TrainConfig,
    fine_cfg: &TrainConfig,
) -> Result<String> {
    let mut out = String::from(GRID_CSV_HEADER);
    out.push('\n');
    for &ratio in ratios {
        for &count in counts {
            let cell_mask = MaskConfig {
                ratio,
                count,
                ..*mask_cfg
            };
            let (ckpt, _) = pretrain(
                &splits.train.0,
                &cell_mask,
                model_cfg,
                agg_cfg,
                pre_cfg,
                PretrainMode::Full,
            )?;
            let (model, test_report) =
                finetune_forecast(Some(&ckpt), splits, model_cfg, fine_cfg)?;
            let val_pred =
                forecast_predict(&model, model_cfg, &splits.val.0, fine_cfg.batch_size)?;
            let val_report = forecast_metrics(&val_pred, &splits.val.1);
            let (val_mse, test_mse) = match (val_report, test_report) {
                (
                    MetricsReport::Forecast { mse: v, .. },
                    MetricsReport::Forecast { mse: t, .. },
                ) => (v, t),
                _ => unreachable!(),
            };
            // Display round-trips f64 exactly; a size-1 grid must
            // reproduce the equivalent standalone run verbatim
            out.push_str(&format!(
                "{ratio},{count},{},{val_mse},{test_mse}\n",
                agg_cfg.temperature
            ));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{gen_classify, gen_forecast, SynthSpec};

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            encoder_kind: crate::model::EncoderKind::Transformer,
            e_layers: 1,
            d_model: 8,
            n_heads: 2,
            kernel_size: 3,
            input_len: 32,
            in_channels: 1,
        }
    }

    fn tiny_splits(seed: u64) -> ForecastSplits {
        let spec = SynthSpec {
            length: 400,
            ..SynthSpec::forecast_default(seed)
        };
        let d = gen_forecast(&spec).unwrap();
        prepare_forecast(&d, &SplitSpec::default(), 32, 8, 4).unwrap()
    }

    #[test]
    fn adam_with_zero_learning_rate_is_a_no_op() {
        let model = PretrainModel::init(&tiny_model(), 1).unwrap();
        let mut params = model.params.clone();
        let mut adam = Adam::new(&params);
        let grads: Vec<Option<Tensor>> = params
            .entries()
            .iter()
            .map(|(_, t)| Some(Tensor::full(t.shape(), 0.3)))
            .collect();
        adam.step(&mut params, &grads, 0.0);
        for ((_, a), (_, b)) in params.entries().iter().zip(model.params.entries()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn pretraining_reduces_the_total_loss() {
        let splits = tiny_splits(2);
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 16,
            ..TrainConfig::pretrain_default(2)
        };
        let (_, logs) = pretrain(
            &splits.train.0,
            &MaskConfig::default(),
            &tiny_model(),
            &AggregationConfig::default(),
            &cfg,
            PretrainMode::Full,
        )
        .unwrap();
        assert!(logs.last().unwrap().total < logs[0].total);
    }

    #[test]
    fn no_constraint_ablation_logs_zero_constraint() {
        let splits = tiny_splits(3);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 16,
            ..TrainConfig::pretrain_default(3)
        };
        let (_, logs) = pretrain(
            &splits.train.0,
            &MaskConfig::default(),
            &tiny_model(),
            &AggregationConfig::default(),
            &cfg,
            PretrainMode::NoConstraint,
        )
        .unwrap();
        for log in &logs {
            assert_eq!(log.loss_con, 0.0);
            assert_eq!(log.weight_con, 0.0);
            assert_eq!(log.total, log.loss_rec);
        }
    }

    #[test]
    fn same_seed_gives_bit_identical_parameters() {
        let splits = tiny_splits(4);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 16,
            ..TrainConfig::pretrain_default(4)
        };
        let run = || {
            pretrain(
                &splits.train.0,
                &MaskConfig::default(),
                &tiny_model(),
                &AggregationConfig::default(),
                &cfg,
                PretrainMode::Full,
            )
            .unwrap()
        };
        let (a, la) = run();
        let (b, lb) = run();
        for ((_, x), (_, y)) in a.params.entries().iter().zip(b.params.entries()) {
            assert_eq!(x.data(), y.data());
        }
        for (p, q) in la.iter().zip(&lb) {
            assert_eq!(p.line(), q.line());
        }
    }

    #[test]
    fn epoch_log_line_format() {
        let log = EpochLog {
            epoch: 3,
            loss_rec: 1.0,
            loss_con: 2.0,
            weight_rec: 0.5,
            weight_con: 0.25,
            total: 4.0,
        };
        assert_eq!(log.line(), "3,1.000000,2.000000,0.500000,0.250000,4.000000");
    }

    #[test]
    fn forecast_learns_the_copy_task() {
        // targets repeat the last input value: learnable by any encoder
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 48;
        let (l, o) = (8, 4);
        let inputs: Vec<f64> = (0..n * l).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut targets = Vec::with_capacity(n * o);
        for i in 0..n {
            let last = inputs[i * l + l - 1];
            targets.extend(std::iter::repeat(last).take(o));
        }
        let batch = SeriesBatch {
            values: Tensor::from_raw(vec![n, l, 1], inputs),
            origin: (0..n).collect(),
            normalization: None,
        };
        let targets = Tensor::from_raw(vec![n, o, 1], targets);
        let splits = ForecastSplits {
            train: (batch.clone(), targets.clone()),
            val: (batch.clone(), targets.clone()),
            test: (batch, targets),
            stats: NormStats {
                mean: vec![0.0],
                std: vec![1.0],
                constant_variates: vec![],
            },
            channels: 1,
        };
        let model_cfg = ModelConfig {
            input_len: l,
            ..tiny_model()
        };
        let cfg = TrainConfig {
            learning_rate: 5e-3,
            epochs: 150,
            batch_size: 16,
            ..TrainConfig::finetune_forecast_default(5, o)
        };
        let (_, report) = finetune_forecast(None, &splits, &model_cfg, &cfg).unwrap();
        match report {
            MetricsReport::Forecast { mse, .. } => assert!(mse < 0.05, "test mse {mse}"),
            _ => unreachable!(),
        }
    }

    #[test]
    fn forecast_metrics_match_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pred: Vec<f64> = (0..60).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let tgt: Vec<f64> = (0..60).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut se = 0.0;
        let mut ae = 0.0;
        for (a, b) in pred.iter().zip(&tgt) {
            se += (a - b) * (a - b);
            ae += (a - b).abs();
        }
        let report = forecast_metrics(
            &Tensor::from_raw(vec![5, 4, 3], pred),
            &Tensor::from_raw(vec![5, 4, 3], tgt),
        );
        match report {
            MetricsReport::Forecast { mse, mae } => {
                assert!((mse - se / 60.0).abs() < 1e-12);
                assert!((mae - ae / 60.0).abs() < 1e-12);
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn all_one_class_predictions_on_balanced_data() {
        let pred = vec![0usize; 10];
        let truth: Vec<usize> = (0..10).map(|i| i % 2).collect();
        match classify_metrics(&pred, &truth, 2) {
            MetricsReport::Classify {
                accuracy,
                precision,
                recall,
                f1,
            } => {
                assert!((accuracy - 50.0).abs() < 1e-9);
                assert!((precision - 25.0).abs() < 1e-9);
                assert!((recall - 50.0).abs() < 1e-9);
                assert!((f1 - 100.0 / 3.0).abs() < 1e-9);
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn classify_metrics_match_confusion_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let k = 3;
        let pred: Vec<usize> = (0..50).map(|_| rng.gen_range(0..k)).collect();
        let truth: Vec<usize> = (0..50).map(|_| rng.gen_range(0..k)).collect();

        // independent oracle: build the matrix the other way around
        let mut tp = vec![0.0; k];
        let mut pred_count = vec![0.0; k];
        let mut true_count = vec![0.0; k];
        let mut correct = 0.0;
        for (&p, &t) in pred.iter().zip(&truth) {
            pred_count[p] += 1.0;
            true_count[t] += 1.0;
            if p == t {
                tp[p] += 1.0;
                correct += 1.0;
            }
        }
        let mut mp = 0.0;
        let mut mr = 0.0;
        let mut mf = 0.0;
        for c in 0..k {
            let p = if pred_count[c] > 0.0 { tp[c] / pred_count[c] } else { 0.0 };
            let r = if true_count[c] > 0.0 { tp[c] / true_count[c] } else { 0.0 };
            mp += p / k as f64;
            mr += r / k as f64;
            mf += if p + r > 0.0 { 2.0 * p * r / (p + r) / k as f64 } else { 0.0 };
        }
        match classify_metrics(&pred, &truth, k) {
            MetricsReport::Classify {
                accuracy,
                precision,
                recall,
                f1,
            } => {
                assert!((accuracy - 100.0 * correct / 50.0).abs() < 1e-9);
                assert!((precision - 100.0 * mp).abs() < 1e-9);
                assert!((recall - 100.0 * mr).abs() < 1e-9);
                assert!((f1 - 100.0 * mf).abs() < 1e-9);
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn classification_pipeline_learns_separable_classes() {
        let spec = SynthSpec {
            samples: 60,
            sample_len: 32,
            ..SynthSpec::classify_default(8)
        };
        let d = gen_classify(&spec).unwrap();
        let splits = prepare_classify(&d, &SplitSpec::default(), 32).unwrap();
        let model_cfg = ModelConfig {
            encoder_kind: crate::model::EncoderKind::ConvResnet,
            e_layers: 2,
            d_model: 8,
            n_heads: 2,
            kernel_size: 3,
            input_len: 32,
            in_channels: 1,
        };
        let cfg = TrainConfig {
            learning_rate: 5e-3,
            epochs: 30,
            batch_size: 16,
            ..TrainConfig::finetune_classify_default(8, 2)
        };
        let (_, report) = finetune_classify(None, &splits, &model_cfg, &cfg).unwrap();
        match report {
            MetricsReport::Classify { accuracy, .. } => {
                assert!(accuracy >= 95.0, "accuracy {accuracy}")
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn missing_train_class_is_rejected() {
        // class 1 appears only in the final (test-region) sample
        let rows: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64]).collect();
        let labels: Vec<i64> = (0..20).map(|i| if i >= 18 { 1 } else { 0 }).collect();
        let d = RawDataset {
            name: "t".to_string(),
            columns: vec!["v0".to_string()],
            rows,
            labels: Some(labels),
        };
        let err = match prepare_classify(&d, &SplitSpec::default(), 2) {
            Err(e) => e,
            Ok(_) => panic!("expected an error"),
        };
        assert!(err.to_string().contains("absent"), "{err}");
    }

    #[test]
    fn grid_search_emits_one_row_per_cell() {
        let splits = tiny_splits(9);
        let pre = TrainConfig {
            epochs: 1,
            batch_size: 16,
            ..TrainConfig::pretrain_default(9)
        };
        let fine = TrainConfig {
            epochs: 1,
            batch_size: 16,
            ..TrainConfig::finetune_forecast_default(9, 8)
        };
        let csv = grid_search(
            &splits,
            &[0.25, 0.5],
            &[1, 3],
            &MaskConfig::default(),
            &tiny_model(),
            &AggregationConfig::default(),
            &pre,
            &fine,
        )
        .unwrap();
        let lines: Vec<&str> = csv.trim().lines().collect();
        assert_eq!(lines[0], GRID_CSV_HEADER);
        assert_eq!(lines.len(), 5);
    }

    #[test]
    fn single_cell_grid_matches_a_direct_run() {
        let splits = tiny_splits(10);
        let pre = TrainConfig {
            epochs: 1,
            batch_size: 16,
            ..TrainConfig::pretrain_default(10)
        };
        let fine = TrainConfig {
            epochs: 1,
            batch_size: 16,
            ..TrainConfig::finetune_forecast_default(10, 8)
        };
        let mask_cfg = MaskConfig::default();
        let csv = grid_search(
            &splits,
            &[mask_cfg.ratio],
            &[mask_cfg.count],
            &mask_cfg,
            &tiny_model(),
            &AggregationConfig::default(),
            &pre,
            &fine,
        )
        .unwrap();
        let (ckpt, _) = pretrain(
            &splits.train.0,
            &mask_cfg,
            &tiny_model(),
            &AggregationConfig::default(),
            &pre,
            PretrainMode::Full,
        )
        .unwrap();
        let (_, report) = finetune_forecast(Some(&ckpt), &splits, &tiny_model(), &fine).unwrap();
        let test_mse = match report {
            MetricsReport::Forecast { mse, .. } => mse,
            _ => unreachable!(),
        };
        let row = csv.trim().lines().nth(1).unwrap();
        let cell_mse: f64 = row.split(',').nth(4).unwrap().parse().unwrap();
        assert!((cell_mse - test_mse).abs() < 1e-12);
    }
}
