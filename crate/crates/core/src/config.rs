//! Flat key-value run configuration with dotted section keys
//! (`mask.ratio=0.5`). The effective configuration serializes back to the
//! same format, so an echoed config reproduces its run exactly.

use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::masking::{MaskConfig, MaskKind};
use crate::model::{EncoderKind, ModelConfig};
use crate::similarity::{AggregationConfig, CandidateSet};
use crate::training::{Phase, PretrainMode, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data_path: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
    /// Second checkpoint for side-by-side reconstruction tables.
    pub direct_checkpoint: Option<PathBuf>,
    pub seed: u64,
    /// Window stride for forecasting datasets.
    pub stride: usize,
    pub mask: MaskConfig,
    pub model: ModelConfig,
    pub agg: AggregationConfig,
    pub pretrain_mode: PretrainMode,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    /// Grid-search axes.
    pub grid_ratios: Vec<f64>,
    pub grid_counts: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data_path: None,
            output_dir: PathBuf::from("out"),
            checkpoint: None,
            direct_checkpoint: None,
            seed: 0,
            stride: 1,
            mask: MaskConfig::default(),
            model: ModelConfig::forecasting_default(64, 1),
            agg: AggregationConfig::default(),
            pretrain_mode: PretrainMode::Full,
            pretrain: TrainConfig::pretrain_default(0),
            finetune: TrainConfig {
                classes: 2,
                ..TrainConfig::finetune_forecast_default(0, 16)
            },
            grid_ratios: vec![0.25, 0.5, 0.75],
            grid_counts: vec![1, 3],
        }
    }
}

fn parse_val<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("unparsable value `{value}` for key `{key}`")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|v| parse_val(key, v.trim())).collect()
}

impl RunConfig {
    /// Apply one dotted `key=value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "run.data" => self.data_path = Some(PathBuf::from(value)),
            "run.output_dir" => self.output_dir = PathBuf::from(value),
            "run.checkpoint" => {
                self.checkpoint = if value.is_empty() {
                    None
                } else {
                    Some(PathBuf::from(value))
                }
            }
            "run.direct_checkpoint" => {
                self.direct_checkpoint = if value.is_empty() {
                    None
                } else {
                    Some(PathBuf::from(value))
                }
            }
            "run.seed" => {
                self.seed = parse_val(key, value)?;
                self.mask.seed = self.seed;
                self.pretrain.seed = self.seed;
                self.finetune.seed = self.seed;
            }
            "data.stride" => self.stride = parse_val(key, value)?,
            "mask.ratio" => self.mask.ratio = parse_val(key, value)?,
            "mask.count" => self.mask.count = parse_val(key, value)?,
            "mask.kind" => {
                self.mask.kind = match value {
                    "random" => MaskKind::Random,
                    "geometric" => MaskKind::Geometric,
                    other => {
                        return Err(Error::Config(format!("unknown mask kind `{other}`")))
                    }
                }
            }
            "mask.mean_span" => self.mask.mean_span = parse_val(key, value)?,
            "model.encoder" => {
                self.model.encoder_kind = match value {
                    "transformer" => EncoderKind::Transformer,
                    "conv_resnet" => EncoderKind::ConvResnet,
                    other => {
                        return Err(Error::Config(format!("unknown encoder `{other}`")))
                    }
                }
            }
            "model.e_layers" => self.model.e_layers = parse_val(key, value)?,
            "model.d_model" => self.model.d_model = parse_val(key, value)?,
            "model.n_heads" => self.model.n_heads = parse_val(key, value)?,
            "model.kernel_size" => self.model.kernel_size = parse_val(key, value)?,
            "model.input_len" => self.model.input_len = parse_val(key, value)?,
            "model.in_channels" => self.model.in_channels = parse_val(key, value)?,
            "agg.candidate_set" => {
                self.agg.candidate_set = match value {
                    "pnsa" => CandidateSet::Pnsa,
                    "psa" => CandidateSet::Psa,
                    other => {
                        return Err(Error::Config(format!("unknown candidate set `{other}`")))
                    }
                }
            }
            "agg.temperature" => self.agg.temperature = parse_val(key, value)?,
            "pretrain.mode" => {
                self.pretrain_mode = match value {
                    "full" => PretrainMode::Full,
                    "no_reconstruction" => PretrainMode::NoReconstruction,
                    "no_constraint" => PretrainMode::NoConstraint,
                    "direct" => PretrainMode::DirectBaseline,
                    other => {
                        return Err(Error::Config(format!("unknown pretrain mode `{other}`")))
                    }
                }
            }
            "pretrain.learning_rate" => self.pretrain.learning_rate = parse_val(key, value)?,
            "pretrain.batch_size" => self.pretrain.batch_size = parse_val(key, value)?,
            "pretrain.epochs" => self.pretrain.epochs = parse_val(key, value)?,
            "finetune.learning_rate" => self.finetune.learning_rate = parse_val(key, value)?,
            "finetune.batch_size" => self.finetune.batch_size = parse_val(key, value)?,
            "finetune.epochs" => self.finetune.epochs = parse_val(key, value)?,
            "finetune.horizon" => self.finetune.horizon = parse_val(key, value)?,
            "finetune.classes" => self.finetune.classes = parse_val(key, value)?,
            "grid.ratios" => self.grid_ratios = parse_list(key, value)?,
            "grid.counts" => self.grid_counts = parse_list(key, value)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Parse a config file body on top of the defaults. Lines are
    /// `key=value`; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(text)?;
        Ok(cfg)
    }

    pub fn apply(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got `{line}`", i + 1))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Serialize the full effective configuration; `parse` of the output
    /// reproduces this config exactly.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if let Some(p) = &self.data_path {
            out.push_str(&format!("run.data={}\n", p.display()));
        }
        out.push_str(&format!("run.output_dir={}\n", self.output_dir.display()));
        if let Some(p) = &self.checkpoint {
            out.push_str(&format!("run.checkpoint={}\n", p.display()));
        }
        if let Some(p) = &self.direct_checkpoint {
            out.push_str(&format!("run.direct_checkpoint={}\n", p.display()));
        }
        out.push_str(&format!("run.seed={}\n", self.seed));
        out.push_str(&format!("data.stride={}\n", self.stride));
        out.push_str(&format!("mask.ratio={}\n", self.mask.ratio));
        out.push_str(&format!("mask.count={}\n", self.mask.count));
        out.push_str(&format!(
            "mask.kind={}\n",
            match self.mask.kind {
                MaskKind::Random => "random",
                MaskKind::Geometric => "geometric",
            }
        ));
        out.push_str(&format!("mask.mean_span={}\n", self.mask.mean_span));
        out.push_str(&format!(
            "model.encoder={}\n",
            match self.model.encoder_kind {
                EncoderKind::Transformer => "transformer",
                EncoderKind::ConvResnet => "conv_resnet",
            }
        ));
        out.push_str(&format!("model.e_layers={}\n", self.model.e_layers));
        out.push_str(&format!("model.d_model={}\n", self.model.d_model));
        out.push_str(&format!("model.n_heads={}\n", self.model.n_heads));
        out.push_str(&format!("model.kernel_size={}\n", self.model.kernel_size));
        out.push_str(&format!("model.input_len={}\n", self.model.input_len));
        out.push_str(&format!("model.in_channels={}\n", self.model.in_channels));
        out.push_str(&format!(
            "agg.candidate_set={}\n",
            match self.agg.candidate_set {
                CandidateSet::Pnsa => "pnsa",
                CandidateSet::Psa => "psa",
            }
        ));
        out.push_str(&format!("agg.temperature={}\n", self.agg.temperature));
        out.push_str(&format!(
            "pretrain.mode={}\n",
            match self.pretrain_mode {
                PretrainMode::Full => "full",
                PretrainMode::NoReconstruction => "no_reconstruction",
                PretrainMode::NoConstraint => "no_constraint",
                PretrainMode::DirectBaseline => "direct",
            }
        ));
        out.push_str(&format!(
            "pretrain.learning_rate={}\n",
            self.pretrain.learning_rate
        ));
        out.push_str(&format!("pretrain.batch_size={}\n", self.pretrain.batch_size));
        out.push_str(&format!("pretrain.epochs={}\n", self.pretrain.epochs));
        out.push_str(&format!(
            "finetune.learning_rate={}\n",
            self.finetune.learning_rate
        ));
        out.push_str(&format!("finetune.batch_size={}\n", self.finetune.batch_size));
        out.push_str(&format!("finetune.epochs={}\n", self.finetune.epochs));
        out.push_str(&format!("finetune.horizon={}\n", self.finetune.horizon));
        out.push_str(&format!("finetune.classes={}\n", self.finetune.classes));
        let ratios: Vec<String> = self.grid_ratios.iter().map(f64::to_string).collect();
        out.push_str(&format!("grid.ratios={}\n", ratios.join(",")));
        let counts: Vec<String> = self.grid_counts.iter().map(usize::to_string).collect();
        out.push_str(&format!("grid.counts={}\n", counts.join(",")));
        out
    }

    /// Per-phase train config views with the run seed applied.
    pub fn pretrain_cfg(&self) -> TrainConfig {
        TrainConfig {
            phase: Phase::Pretrain,
            seed: self.seed,
            ..self.pretrain
        }
    }

    pub fn finetune_forecast_cfg(&self) -> TrainConfig {
        TrainConfig {
            phase: Phase::FinetuneForecast,
            seed: self.seed,
            ..self.finetune
        }
    }

    pub fn finetune_classify_cfg(&self) -> TrainConfig {
        TrainConfig {
            phase: Phase::FinetuneClassify,
            seed: self.seed,
            ..self.finetune
        }
    }

    pub fn mask_cfg(&self) -> MaskConfig {
        MaskConfig {
            seed: self.seed,
            ..self.mask
        }
    }
}
