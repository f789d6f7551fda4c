//! Checkpoint persistence: a small text header (version, kind, config
//! echo, tensor directory) followed by raw little-endian f64 blocks.
//! Byte-exact round trips are the portability contract, so the format
//! carries no timestamps or environment details.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{EncoderKind, ModelConfig, ParamSet, PretrainModel};
use crate::numerics::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "simmtm-checkpoint";

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub version: u32,
    /// Producing phase: `pretrain`, `finetune-forecast`, `finetune-classify`.
    pub kind: String,
    pub model: ModelConfig,
    pub params: ParamSet,
    /// Seed the producing run was started with.
    pub seed: u64,
}

fn encoder_kind_str(k: EncoderKind) -> &'static str {
    match k {
        EncoderKind::Transformer => "transformer",
        EncoderKind::ConvResnet => "conv_resnet",
    }
}

fn parse_encoder_kind(s: &str) -> Result<EncoderKind> {
    match s {
        "transformer" => Ok(EncoderKind::Transformer),
        "conv_resnet" => Ok(EncoderKind::ConvResnet),
        other => Err(Error::Checkpoint(format!("unknown encoder kind `{other}`"))),
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut header = String::new();
    header.push_str(&format!("{MAGIC} v{}\n", ckpt.version));
    header.push_str(&format!("kind={}\n", ckpt.kind));
    header.push_str(&format!("seed={}\n", ckpt.seed));
    let m = &ckpt.model;
    header.push_str(&format!(
        "encoder_kind={}\n",
        encoder_kind_str(m.encoder_kind)
    ));
    header.push_str(&format!("e_layers={}\n", m.e_layers));
    header.push_str(&format!("d_model={}\n", m.d_model));
    header.push_str(&format!("n_heads={}\n", m.n_heads));
    header.push_str(&format!("kernel_size={}\n", m.kernel_size));
    header.push_str(&format!("input_len={}\n", m.input_len));
    header.push_str(&format!("in_channels={}\n", m.in_channels));
    header.push_str(&format!("tensors={}\n", ckpt.params.len()));
    for (name, t) in ckpt.params.entries() {
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        header.push_str(&format!("{name} {}\n", dims.join(",")));
    }
    header.push_str("data\n");

    let mut f = std::fs::File::create(path)?;
    f.write_all(header.as_bytes())?;
    for (_, t) in ckpt.params.entries() {
        for v in t.data() {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn header_field<'a>(lines: &mut impl Iterator<Item = &'a str>, key: &str) -> Result<String> {
    let line = lines
        .next()
        .ok_or_else(|| Error::Checkpoint(format!("missing `{key}` field")))?;
    line.strip_prefix(&format!("{key}="))
        .map(str::to_string)
        .ok_or_else(|| Error::Checkpoint(format!("expected `{key}=...`, got `{line}`")))
}

fn parse_num<T: std::str::FromStr>(s: &str, key: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::Checkpoint(format!("unparsable `{key}` value `{s}`")))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?
        .read_to_end(&mut bytes)?;

    let data_marker = b"\ndata\n";
    let marker_pos = bytes
        .windows(data_marker.len())
        .position(|w| w == data_marker)
        .ok_or_else(|| Error::Checkpoint("missing data section".to_string()))?;
    let header = std::str::from_utf8(&bytes[..marker_pos])
        .map_err(|_| Error::Checkpoint("header is not UTF-8".to_string()))?;
    let payload = &bytes[marker_pos + data_marker.len()..];

    let mut lines = header.lines();
    let magic = lines
        .next()
        .ok_or_else(|| Error::Checkpoint("empty file".to_string()))?;
    let version: u32 = magic
        .strip_prefix(&format!("{MAGIC} v"))
        .ok_or_else(|| Error::Checkpoint(format!("not a checkpoint file: `{magic}`")))
        .and_then(|v| parse_num(v, "version"))?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version} not supported (expected {FORMAT_VERSION})"
        )));
    }

    let kind = header_field(&mut lines, "kind")?;
    let seed: u64 = parse_num(&header_field(&mut lines, "seed")?, "seed")?;
    let model = ModelConfig {
        encoder_kind: parse_encoder_kind(&header_field(&mut lines, "encoder_kind")?)?,
        e_layers: parse_num(&header_field(&mut lines, "e_layers")?, "e_layers")?,
        d_model: parse_num(&header_field(&mut lines, "d_model")?, "d_model")?,
        n_heads: parse_num(&header_field(&mut lines, "n_heads")?, "n_heads")?,
        kernel_size: parse_num(&header_field(&mut lines, "kernel_size")?, "kernel_size")?,
        input_len: parse_num(&header_field(&mut lines, "input_len")?, "input_len")?,
        in_channels: parse_num(&header_field(&mut lines, "in_channels")?, "in_channels")?,
    };
    let count: usize = parse_num(&header_field(&mut lines, "tensors")?, "tensors")?;

    let mut directory = Vec::with_capacity(count);
    let mut total = 0usize;
    for _ in 0..count {
        let line = lines
            .next()
            .ok_or_else(|| Error::Checkpoint("tensor directory truncated".to_string()))?;
        let (name, dims) = line
            .split_once(' ')
            .ok_or_else(|| Error::Checkpoint(format!("malformed directory line `{line}`")))?;
        let shape: Vec<usize> = dims
            .split(',')
            .map(|d| parse_num(d, "shape"))
            .collect::<Result<_>>()?;
        total += shape.iter().product::<usize>();
        directory.push((name.to_string(), shape));
    }
    if lines.next().is_some() {
        return Err(Error::Checkpoint("unexpected extra header lines".to_string()));
    }
    if payload.len() != total * 8 {
        return Err(Error::Checkpoint(format!(
            "payload holds {} bytes, expected {}: file corrupt or truncated",
            payload.len(),
            total * 8
        )));
    }

    let mut params = ParamSet::new();
    let mut offset = 0;
    for (name, shape) in directory {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|k| {
                let at = (offset + k) * 8;
                f64::from_le_bytes(payload[at..at + 8].try_into().unwrap())
            })
            .collect();
        offset += n;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Checkpoint(format!(
                "tensor {name} holds non-finite values"
            )));
        }
        params.add(&name, Tensor::new(shape, data)?);
    }

    let ckpt = Checkpoint {
        version,
        kind,
        model,
        params,
        seed,
    };
    validate_shapes(&ckpt)?;
    Ok(ckpt)
}

/// Check stored encoder/projector/decoder tensors against the shapes the
/// config implies. Task heads depend on run-time horizon/class counts and
/// are validated when a fine-tuning model loads them.
fn validate_shapes(ckpt: &Checkpoint) -> Result<()> {
    ckpt.model.validate()?;
    let reference = PretrainModel::init(&ckpt.model, 0)?;
    for (name, t) in ckpt.params.entries() {
        if let Some((_, expect)) = reference.params.entries().iter().find(|(n, _)| n == name) {
            if expect.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, config implies {:?}",
                    t.shape(),
                    expect.shape()
                )));
            }
        }
    }
    Ok(())
}
