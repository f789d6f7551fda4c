//! Encoders (temporal transformer with channel independence, or 1-D
//! convolutional residual network), temporal projector, channel decoder,
//! and task heads.
//!
//! Parameters live in a `ParamSet` of named plain tensors; each training
//! step binds them as leaves of a fresh `Graph`.

use std::collections::HashMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, VarId};
use crate::numerics::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderKind {
    Transformer,
    ConvResnet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub encoder_kind: EncoderKind,
    pub e_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    /// Conv encoder only.
    pub kernel_size: usize,
    pub input_len: usize,
    pub in_channels: usize,
}

impl ModelConfig {
    /// Forecasting defaults: 2-layer transformer, d_model 16.
    pub fn forecasting_default(input_len: usize, in_channels: usize) -> Self {
        Self {
            encoder_kind: EncoderKind::Transformer,
            e_layers: 2,
            d_model: 16,
            n_heads: 4,
            kernel_size: 3,
            input_len,
            in_channels,
        }
    }

    /// Classification defaults: 3-layer conv resnet, d_model 128.
    pub fn classification_default(input_len: usize, in_channels: usize) -> Self {
        Self {
            encoder_kind: EncoderKind::ConvResnet,
            e_layers: 3,
            d_model: 128,
            n_heads: 4,
            kernel_size: 3,
            input_len,
            in_channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.e_layers < 1 {
            return Err(Error::Config("e_layers must be >= 1".to_string()));
        }
        if self.d_model < 1 || self.input_len < 1 || self.in_channels < 1 {
            return Err(Error::Config(
                "d_model, input_len, in_channels must be positive".to_string(),
            ));
        }
        match self.encoder_kind {
            EncoderKind::Transformer => {
                if self.n_heads < 1 || self.d_model % self.n_heads != 0 {
                    return Err(Error::Config(format!(
                        "d_model {} must be divisible by n_heads {}",
                        self.d_model, self.n_heads
                    )));
                }
            }
            EncoderKind::ConvResnet => {
                if self.kernel_size % 2 == 0 || self.kernel_size < 1 {
                    return Err(Error::Config(format!(
                        "kernel_size must be odd and positive, got {}",
                        self.kernel_size
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Ordered collection of named parameter tensors. Order is the binding and
/// optimizer order, so it is part of run determinism.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, t: Tensor) {
        assert!(
            self.entries.iter().all(|(n, _)| n != name),
            "duplicate parameter name {name}"
        );
        self.entries.push((name.to_string(), t));
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self
            .entries
            .iter()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .1
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [(String, Tensor)] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Replace parameters whose names exist in `other` (e.g. load a
    /// pre-trained encoder into a fine-tuning model).
    pub fn load_matching(&mut self, other: &ParamSet) -> Result<()> {
        for (name, t) in &mut self.entries {
            if let Some((_, src)) = other.entries.iter().find(|(n, _)| n == name) {
                if src.shape() != t.shape() {
                    return Err(Error::Checkpoint(format!(
                        "parameter {name} has shape {:?}, expected {:?}",
                        src.shape(),
                        t.shape()
                    )));
                }
                *t = src.clone();
            }
        }
        Ok(())
    }

    /// Register every parameter as a `requires_grad` leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        let mut ids = HashMap::with_capacity(self.entries.len());
        let mut ordered = Vec::with_capacity(self.entries.len());
        for (name, t) in &self.entries {
            let id = g.leaf(t.clone(), true);
            ids.insert(name.clone(), id);
            ordered.push(id);
        }
        Bound { ids, ordered }
    }
}

/// Parameter leaves registered in a graph.
pub struct Bound {
    ids: HashMap<String, VarId>,
    ordered: Vec<VarId>,
}

impl Bound {
    pub fn id(&self, name: &str) -> VarId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub fn try_id(&self, name: &str) -> Option<VarId> {
        self.ids.get(name).copied()
    }

    /// VarIds in ParamSet order; parallel to `ParamSet::entries`.
    pub fn ordered(&self) -> &[VarId] {
        &self.ordered
    }
}

fn xavier(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::from_raw(shape.to_vec(), data)
}

fn linear_params(rng: &mut ChaCha8Rng, set: &mut ParamSet, name: &str, d_in: usize, d_out: usize) {
    set.add(&format!("{name}.w"), xavier(rng, &[d_in, d_out], d_in, d_out));
    set.add(&format!("{name}.b"), Tensor::zeros(&[d_out]));
}

fn linear_params_nobias(rng: &mut ChaCha8Rng, set: &mut ParamSet, name: &str, d_in: usize, d_out: usize) {
    set.add(&format!("{name}.w"), xavier(rng, &[d_in, d_out], d_in, d_out));
}

fn ln_params(set: &mut ParamSet, name: &str, d: usize) {
    set.add(&format!("{name}.g"), Tensor::full(&[d], 1.0));
    set.add(&format!("{name}.b"), Tensor::zeros(&[d]));
}

fn conv_params(
    rng: &mut ChaCha8Rng,
    set: &mut ParamSet,
    name: &str,
    k: usize,
    c_in: usize,
    c_out: usize,
) {
    set.add(
        &format!("{name}.k"),
        xavier(rng, &[k, c_in, c_out], k * c_in, k * c_out),
    );
    set.add(&format!("{name}.b"), Tensor::zeros(&[c_out]));
}

/// Linear layer on the last axis: flattens leading axes, multiplies, and
/// restores the leading shape with `d_out` as the last axis.
fn linear(g: &mut Graph, bound: &Bound, name: &str, x: VarId) -> VarId {
    let shape = g.value(x).shape().to_vec();
    let d_in = *shape.last().unwrap();
    let w = bound.id(&format!("{name}.w"));
    let d_out = g.value(w).shape()[1];
    let lead: usize = shape[..shape.len() - 1].iter().product();
    let flat = g.reshape(x, &[lead, d_in]);
    let y = g.matmul(flat, w);
    let y = match bound.try_id(&format!("{name}.b")) {
        Some(b) => g.add_last(y, b),
        None => y,
    };
    let mut out_shape = shape;
    *out_shape.last_mut().unwrap() = d_out;
    g.reshape(y, &out_shape)
}

fn layer_norm_affine(g: &mut Graph, bound: &Bound, name: &str, x: VarId) -> VarId {
    let n = g.layer_norm(x, LN_EPS);
    let s = g.mul_last(n, bound.id(&format!("{name}.g")));
    g.add_last(s, bound.id(&format!("{name}.b")))
}

/// Fixed sinusoidal position table `[L, d]`.
pub fn positional_encoding(l: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; l * d];
    for t in 0..l {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = t as f64 / 10000f64.powf(2.0 * pair / d as f64);
            data[t * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::from_raw(vec![l, d], data)
}

/// Add encoder parameters under the `enc.` prefix.
pub fn init_encoder_params(cfg: &ModelConfig, rng: &mut ChaCha8Rng, set: &mut ParamSet) {
    let d = cfg.d_model;
    match cfg.encoder_kind {
        EncoderKind::Transformer => {
            linear_params(rng, set, "enc.embed", cfg.in_channels, d);
            for l in 0..cfg.e_layers {
                for part in ["wq", "wv", "wo"] {
                    linear_params(rng, set, &format!("enc.l{l}.attn.{part}"), d, d);
                }
                // key projection carries no bias: a constant key offset
                // shifts every score in a softmax row equally
                linear_params_nobias(rng, set, &format!("enc.l{l}.attn.wk"), d, d);
                ln_params(set, &format!("enc.l{l}.ln1"), d);
                linear_params(rng, set, &format!("enc.l{l}.ffn.w1"), d, 4 * d);
                linear_params(rng, set, &format!("enc.l{l}.ffn.w2"), 4 * d, d);
                ln_params(set, &format!("enc.l{l}.ln2"), d);
            }
        }
        EncoderKind::ConvResnet => {
            let k = cfg.kernel_size;
            for l in 0..cfg.e_layers {
                let c_in = if l == 0 { cfg.in_channels } else { d };
                conv_params(rng, set, &format!("enc.l{l}.c1"), k, c_in, d);
                conv_params(rng, set, &format!("enc.l{l}.c2"), k, d, d);
                if c_in != d {
                    conv_params(rng, set, &format!("enc.l{l}.proj"), 1, c_in, d);
                }
            }
        }
    }
}

/// Encode `[D, L, C] -> [D, L, d_model]`, returning the output of every
/// encoder layer (last entry is the final representation). Samples never
/// mix across the first axis.
pub fn encode_layers(g: &mut Graph, bound: &Bound, cfg: &ModelConfig, x: VarId) -> Vec<VarId> {
    let shape = g.value(x).shape().to_vec();
    assert_eq!(
        shape[1..],
        [cfg.input_len, cfg.in_channels],
        "dimension error: encoder input {:?} does not match config (L={}, C={})",
        shape,
        cfg.input_len,
        cfg.in_channels
    );
    let d_rows = shape[0];
    let (l, d) = (cfg.input_len, cfg.d_model);
    match cfg.encoder_kind {
        EncoderKind::Transformer => {
            let mut h = linear(g, bound, "enc.embed", x);
            let pos = positional_encoding(l, d);
            let pos = g.constant(pos);
            let pos = g.expand_axis(pos, 0, d_rows);
            h = g.add(h, pos);
            let heads = cfg.n_heads;
            let dh = d / heads;
            let mut outputs = Vec::with_capacity(cfg.e_layers);
            for li in 0..cfg.e_layers {
                let p = format!("enc.l{li}");
                let q = linear(g, bound, &format!("{p}.attn.wq"), h);
                let k = linear(g, bound, &format!("{p}.attn.wk"), h);
                let v = linear(g, bound, &format!("{p}.attn.wv"), h);
                let split = |g: &mut Graph, t: VarId| {
                    let t = g.reshape(t, &[d_rows, l, heads, dh]);
                    let t = g.permute(t, &[0, 2, 1, 3]);
                    g.reshape(t, &[d_rows * heads, l, dh])
                };
                let q = split(g, q);
                let k = split(g, k);
                let v = split(g, v);
                let kt = g.permute(k, &[0, 2, 1]);
                let scores = g.bmm(q, kt);
                let scores = g.mul_scalar(scores, 1.0 / (dh as f64).sqrt());
                let attn = g.softmax(scores, 2);
                let ctx = g.bmm(attn, v);
                let ctx = g.reshape(ctx, &[d_rows, heads, l, dh]);
                let ctx = g.permute(ctx, &[0, 2, 1, 3]);
                let ctx = g.reshape(ctx, &[d_rows, l, d]);
                let ctx = linear(g, bound, &format!("{p}.attn.wo"), ctx);
                let res = g.add(h, ctx);
                h = layer_norm_affine(g, bound, &format!("{p}.ln1"), res);
                let f = linear(g, bound, &format!("{p}.ffn.w1"), h);
                let f = g.gelu(f);
                let f = linear(g, bound, &format!("{p}.ffn.w2"), f);
                let res = g.add(h, f);
                h = layer_norm_affine(g, bound, &format!("{p}.ln2"), res);
                outputs.push(h);
            }
            outputs
        }
        EncoderKind::ConvResnet => {
            let mut h = x;
            let mut outputs = Vec::with_capacity(cfg.e_layers);
            for li in 0..cfg.e_layers {
                let p = format!("enc.l{li}");
                let c_in = g.value(h).shape()[2];
                let skip = if c_in != d {
                    let k = bound.id(&format!("{p}.proj.k"));
                    let b = bound.id(&format!("{p}.proj.b"));
                    g.conv1d(h, k, b)
                } else {
                    h
                };
                let k1 = bound.id(&format!("{p}.c1.k"));
                let b1 = bound.id(&format!("{p}.c1.b"));
                let y = g.conv1d(h, k1, b1);
                let y = g.relu(y);
                let k2 = bound.id(&format!("{p}.c2.k"));
                let b2 = bound.id(&format!("{p}.c2.b"));
                let y = g.conv1d(y, k2, b2);
                let y = g.add(y, skip);
                h = g.relu(y);
                outputs.push(h);
            }
            outputs
        }
    }
}

pub fn encode(g: &mut Graph, bound: &Bound, cfg: &ModelConfig, x: VarId) -> VarId {
    *encode_layers(g, bound, cfg, x).last().unwrap()
}

/// Projector parameters: a linear map along the temporal axis shared by all
/// feature channels, under the `proj.` prefix.
pub fn init_projector_params(cfg: &ModelConfig, rng: &mut ChaCha8Rng, set: &mut ParamSet) {
    linear_params(rng, set, "proj", cfg.input_len, 1);
}

/// Series-wise representation: `[D, L, d] -> [D, d]` by a learned linear
/// L -> 1 map per channel followed by GELU.
pub fn project(g: &mut Graph, bound: &Bound, z: VarId) -> VarId {
    let shape = g.value(z).shape().to_vec();
    let (d_rows, l, d) = (shape[0], shape[1], shape[2]);
    let zt = g.permute(z, &[0, 2, 1]);
    let flat = g.reshape(zt, &[d_rows * d, l]);
    let w = bound.id("proj.w");
    let b = bound.id("proj.b");
    let y = g.matmul(flat, w);
    let y = g.add_last(y, b);
    let y = g.reshape(y, &[d_rows, d]);
    g.gelu(y)
}

/// Decoder parameters: a linear map along the channel axis, `dec.` prefix.
pub fn init_decoder_params(cfg: &ModelConfig, rng: &mut ChaCha8Rng, set: &mut ParamSet) {
    linear_params(rng, set, "dec", cfg.d_model, cfg.in_channels);
}

/// `[N, L, d_model] -> [N, L, C]`, applied at each time point.
pub fn decode(g: &mut Graph, bound: &Bound, z_hat: VarId) -> VarId {
    linear(g, bound, "dec", z_hat)
}

/// Forecast head parameters (`head.` prefix): flattened `[L*d_model]`
/// features to `horizon` outputs per channel-independent stream.
pub fn init_forecast_head(cfg: &ModelConfig, horizon: usize, rng: &mut ChaCha8Rng, set: &mut ParamSet) {
    linear_params(rng, set, "head", cfg.input_len * cfg.d_model, horizon);
}

/// `[N, L, d] -> [N, O, 1]`.
pub fn head_forecast(g: &mut Graph, bound: &Bound, z: VarId) -> VarId {
    let shape = g.value(z).shape().to_vec();
    let (n, l, d) = (shape[0], shape[1], shape[2]);
    let flat = g.reshape(z, &[n, l * d]);
    let w = bound.id("head.w");
    let horizon = g.value(w).shape()[1];
    let y = g.matmul(flat, w);
    let y = g.add_last(y, bound.id("head.b"));
    g.reshape(y, &[n, horizon, 1])
}

/// Classification head parameters (`head.` prefix).
pub fn init_classify_head(cfg: &ModelConfig, classes: usize, rng: &mut ChaCha8Rng, set: &mut ParamSet) {
    linear_params(rng, set, "head", cfg.d_model, classes);
}

/// `[N, L, d] -> [N, K]`: mean-pool over time, then a linear map.
pub fn head_classify(g: &mut Graph, bound: &Bound, z: VarId) -> VarId {
    let pooled = g.mean_axis(z, 1);
    let y = g.matmul(pooled, bound.id("head.w"));
    g.add_last(y, bound.id("head.b"))
}

/// Offset mixed into the seed for head initialization so the head draw is
/// the same whether or not the encoder came from a checkpoint.
pub const HEAD_SEED_OFFSET: u64 = 0x9E37_79B9_7F4A_7C15;

/// Pre-training model: encoder + projector + decoder + the two
/// uncertainty-weighting scalars.
#[derive(Clone, Debug)]
pub struct PretrainModel {
    pub cfg: ModelConfig,
    pub params: ParamSet,
}

impl PretrainModel {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        init_encoder_params(cfg, &mut rng, &mut params);
        init_projector_params(cfg, &mut rng, &mut params);
        init_decoder_params(cfg, &mut rng, &mut params);
        params.add("loss.a", Tensor::zeros(&[1]));
        params.add("loss.b", Tensor::zeros(&[1]));
        Ok(Self { cfg: *cfg, params })
    }
}

/// Fine-tuning model: encoder + a freshly initialized task head. The
/// projector and decoder are pre-training plumbing and are not carried over.
#[derive(Clone, Debug)]
pub struct FinetuneModel {
    pub cfg: ModelConfig,
    pub params: ParamSet,
}

impl FinetuneModel {
    /// Forecast variant; loads encoder weights from `pretrained` when given.
    pub fn init_forecast(
        cfg: &ModelConfig,
        horizon: usize,
        seed: u64,
        pretrained: Option<&ParamSet>,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        init_encoder_params(cfg, &mut rng, &mut params);
        let mut head_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(HEAD_SEED_OFFSET));
        init_forecast_head(cfg, horizon, &mut head_rng, &mut params);
        if let Some(pre) = pretrained {
            params.load_matching(pre)?;
        }
        Ok(Self { cfg: *cfg, params })
    }

    pub fn init_classify(
        cfg: &ModelConfig,
        classes: usize,
        seed: u64,
        pretrained: Option<&ParamSet>,
    ) -> Result<Self> {
        cfg.validate()?;
        if classes < 2 {
            return Err(Error::Config("need K >= 2 classes".to_string()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        init_encoder_params(cfg, &mut rng, &mut params);
        let mut head_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(HEAD_SEED_OFFSET));
        init_classify_head(cfg, classes, &mut head_rng, &mut params);
        if let Some(pre) = pretrained {
            params.load_matching(pre)?;
        }
        Ok(Self { cfg: *cfg, params })
    }
}
