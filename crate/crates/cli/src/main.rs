//! `simmtm` command-line entry point: reproducible pre-training,
//! fine-tuning, evaluation, and analysis runs driven by a flat
//! key-value configuration.
//!
//! Every run echoes its effective configuration into the output
//! directory; re-running from that echo reproduces the artifacts
//! bit for bit. Artifact filenames embed the subcommand and seed.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use simmtm_core::analysis;
use simmtm_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, FORMAT_VERSION};
use simmtm_core::config::RunConfig;
use simmtm_core::data::{load_csv, CsvSchema, RawDataset, SeriesBatch, SplitSpec};
use simmtm_core::model::FinetuneModel;
use simmtm_core::synthetic::{self, SynthSpec};
use simmtm_core::training::{
    classify_metrics, classify_predict, finetune_classify, finetune_forecast, forecast_metrics,
    forecast_predict, grid_search, prepare_classify, prepare_forecast, pretrain,
    ClassifySplits, ForecastSplits, EPOCH_LOG_HEADER,
};
use simmtm_core::{Error, Tensor};

const EXIT_RUNTIME: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_CONFIG: u8 = 3;
const EXIT_MISSING_FILE: u8 = 4;

const USAGE: &str = "usage: simmtm <command> [--config PATH] [--<section.key> VALUE]...
commands:
  gen-data           write a synthetic dataset CSV (--kind forecast|classify)
  pretrain           masked pre-training; writes checkpoint and epoch log
  finetune-forecast  forecasting fine-tune (random init without --checkpoint)
  finetune-classify  classification fine-tune
  evaluate           test-split metrics for a fine-tuned checkpoint
  grid-search        pretrain+finetune over mask ratio and variant count
  analyze-cka        first/last layer representation similarity
  reconstruct-demo   side-by-side reconstruction table (needs --checkpoint
                     and --direct-checkpoint)
flag aliases: --seed, --data, --output-dir, --checkpoint, --direct-checkpoint";

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError { code, message }) => {
            eprintln!("error: {}", message.replace('\n', " "));
            ExitCode::from(code)
        }
    }
}

struct CliError {
    code: u8,
    message: String,
}

fn usage_err(message: impl Into<String>) -> CliError {
    CliError {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) => EXIT_CONFIG,
            Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => EXIT_MISSING_FILE,
            _ => EXIT_RUNTIME,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

/// Map a long flag to a config key: known aliases first, then any
/// dotted name verbatim.
fn flag_to_key(flag: &str) -> Option<String> {
    match flag {
        "seed" => Some("run.seed".to_string()),
        "data" => Some("run.data".to_string()),
        "output-dir" => Some("run.output_dir".to_string()),
        "checkpoint" => Some("run.checkpoint".to_string()),
        "direct-checkpoint" => Some("run.direct_checkpoint".to_string()),
        f if f.contains('.') => Some(f.to_string()),
        _ => None,
    }
}

fn run(args: &[String]) -> Result<(), CliError> {
    let command = match args.first().map(String::as_str) {
        None | Some("--help") | Some("-h") => {
            println!("{USAGE}");
            return Ok(());
        }
        Some(c) => c,
    };
    let known = [
        "gen-data",
        "pretrain",
        "finetune-forecast",
        "finetune-classify",
        "evaluate",
        "grid-search",
        "analyze-cka",
        "reconstruct-demo",
    ];
    if !known.contains(&command) {
        return Err(usage_err(format!("unknown command `{command}`")));
    }

    // Precedence: defaults < SIMMTM_SEED < config file < flag overrides.
    let mut cfg = RunConfig::default();
    if let Ok(seed) = std::env::var("SIMMTM_SEED") {
        cfg.set("run.seed", &seed)?;
    }
    let mut kind = "forecast".to_string();
    let mut overrides: Vec<(String, String)> = Vec::new();
    let mut config_path: Option<PathBuf> = None;

    let mut it = args[1..].iter();
    while let Some(arg) = it.next() {
        let flag = arg
            .strip_prefix("--")
            .ok_or_else(|| usage_err(format!("unexpected argument `{arg}`")))?;
        let value = it
            .next()
            .ok_or_else(|| usage_err(format!("flag --{flag} needs a value")))?;
        match flag {
            "config" => config_path = Some(PathBuf::from(value)),
            "kind" if command == "gen-data" => kind = value.clone(),
            _ => match flag_to_key(flag) {
                Some(key) => overrides.push((key, value.clone())),
                None => return Err(usage_err(format!("unknown flag --{flag}"))),
            },
        }
    }

    if let Some(path) = &config_path {
        let text = std::fs::read_to_string(path).map_err(|e| CliError {
            code: if e.kind() == std::io::ErrorKind::NotFound {
                EXIT_MISSING_FILE
            } else {
                EXIT_RUNTIME
            },
            message: format!("{}: {e}", path.display()),
        })?;
        cfg.apply(&text)?;
    }
    for (key, value) in &overrides {
        cfg.set(key, value).map_err(|e| {
            let msg = e.to_string();
            if msg.contains("unknown config key") {
                usage_err(format!("unknown flag --{key}"))
            } else {
                e.into()
            }
        })?;
    }

    std::fs::create_dir_all(&cfg.output_dir).map_err(Error::from)?;
    let prefix = format!("{command}-seed{}", cfg.seed);
    let artifact = |suffix: &str| cfg.output_dir.join(format!("{prefix}-{suffix}"));
    write_text(&artifact("config.txt"), &cfg.to_text())?;

    match command {
        "gen-data" => cmd_gen_data(&cfg, &kind, &artifact(&format!("{kind}.csv"))),
        "pretrain" => cmd_pretrain(&cfg, &artifact("model.ckpt"), &artifact("epochs.csv")),
        "finetune-forecast" => {
            cmd_finetune_forecast(&cfg, &artifact("model.ckpt"), &artifact("metrics.txt"))
        }
        "finetune-classify" => {
            cmd_finetune_classify(&cfg, &artifact("model.ckpt"), &artifact("metrics.txt"))
        }
        "evaluate" => cmd_evaluate(&cfg, &artifact("metrics.txt")),
        "grid-search" => cmd_grid_search(&cfg, &artifact("grid.csv")),
        "analyze-cka" => cmd_analyze_cka(&cfg, &artifact("cka.txt")),
        "reconstruct-demo" => cmd_reconstruct_demo(&cfg, &artifact("demo.csv")),
        _ => unreachable!(),
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| Error::from(e).into())
}

// ── data plumbing ───────────────────────────────────────────────────

/// Load the configured CSV, or fall back to a seeded synthetic dataset
/// (class waveforms when labels are needed, sinusoid mixtures otherwise).
fn load_dataset(cfg: &RunConfig, classify: bool) -> Result<RawDataset, CliError> {
    match &cfg.data_path {
        Some(path) => Ok(load_csv(path, &CsvSchema::default())?),
        None if classify => Ok(synthetic::gen_classify(&SynthSpec::classify_default(
            cfg.seed,
        ))?),
        None => Ok(synthetic::gen_forecast(&SynthSpec::forecast_default(
            cfg.seed,
        ))?),
    }
}

fn forecast_splits(cfg: &RunConfig, d: &RawDataset) -> Result<ForecastSplits, CliError> {
    Ok(prepare_forecast(
        d,
        &SplitSpec::default(),
        cfg.model.input_len,
        cfg.finetune.horizon,
        cfg.stride,
    )?)
}

fn classify_splits(cfg: &RunConfig, d: &RawDataset) -> Result<ClassifySplits, CliError> {
    Ok(prepare_classify(d, &SplitSpec::default(), cfg.model.input_len)?)
}

fn first_rows(b: &SeriesBatch, limit: usize) -> SeriesBatch {
    let n = b.n().min(limit);
    let stride = b.l() * b.c();
    SeriesBatch {
        values: Tensor::new(
            vec![n, b.l(), b.c()],
            b.values.data()[..n * stride].to_vec(),
        )
        .expect("dimension error: truncated batch"),
        origin: b.origin[..n].to_vec(),
        normalization: b.normalization.clone(),
    }
}

fn load_required_checkpoint(cfg: &RunConfig) -> Result<Checkpoint, CliError> {
    let path = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| CliError::from(Error::Config("this command needs --checkpoint".into())))?;
    Ok(load_checkpoint(path)?)
}

// ── subcommands ─────────────────────────────────────────────────────

fn cmd_gen_data(cfg: &RunConfig, kind: &str, out: &Path) -> Result<(), CliError> {
    let d = match kind {
        "forecast" => synthetic::gen_forecast(&SynthSpec::forecast_default(cfg.seed))?,
        "classify" => synthetic::gen_classify(&SynthSpec::classify_default(cfg.seed))?,
        other => {
            return Err(Error::Config(format!("unknown --kind `{other}`")).into());
        }
    };
    synthetic::write_csv(&d, out)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_pretrain(cfg: &RunConfig, ckpt_path: &Path, log_path: &Path) -> Result<(), CliError> {
    let d = load_dataset(cfg, false)?;
    // Labeled data pre-trains on its per-sample segments; plain series
    // pre-train on forecast-style windows.
    let batch = if d.labels.is_some() {
        classify_splits(cfg, &d)?.train.0
    } else {
        forecast_splits(cfg, &d)?.train.0
    };
    let (ckpt, logs) = pretrain(
        &batch,
        &cfg.mask_cfg(),
        &cfg.model,
        &cfg.agg,
        &cfg.pretrain_cfg(),
        cfg.pretrain_mode,
    )?;
    save_checkpoint(&ckpt, ckpt_path)?;
    let mut log = String::from(EPOCH_LOG_HEADER);
    log.push('\n');
    for e in &logs {
        log.push_str(&e.line());
        log.push('\n');
    }
    write_text(log_path, &log)?;
    if let Some(last) = logs.last() {
        println!("{EPOCH_LOG_HEADER}");
        println!("{}", last.line());
    }
    println!("wrote {}", ckpt_path.display());
    Ok(())
}

fn cmd_finetune_forecast(
    cfg: &RunConfig,
    ckpt_path: &Path,
    metrics_path: &Path,
) -> Result<(), CliError> {
    let d = load_dataset(cfg, false)?;
    let splits = forecast_splits(cfg, &d)?;
    let pretrained = cfg
        .checkpoint
        .as_ref()
        .map(|p| load_checkpoint(p))
        .transpose()?;
    let (model, report) = finetune_forecast(
        pretrained.as_ref(),
        &splits,
        &cfg.model,
        &cfg.finetune_forecast_cfg(),
    )?;
    save_checkpoint(
        &Checkpoint {
            version: FORMAT_VERSION,
            kind: "finetune-forecast".to_string(),
            model: cfg.model.clone(),
            params: model.params,
            seed: cfg.seed,
        },
        ckpt_path,
    )?;
    write_text(metrics_path, &report.lines())?;
    print!("{}", report.lines());
    Ok(())
}

fn cmd_finetune_classify(
    cfg: &RunConfig,
    ckpt_path: &Path,
    metrics_path: &Path,
) -> Result<(), CliError> {
    let d = load_dataset(cfg, true)?;
    let splits = classify_splits(cfg, &d)?;
    let pretrained = cfg
        .checkpoint
        .as_ref()
        .map(|p| load_checkpoint(p))
        .transpose()?;
    let (model, report) = finetune_classify(
        pretrained.as_ref(),
        &splits,
        &cfg.model,
        &cfg.finetune_classify_cfg(),
    )?;
    save_checkpoint(
        &Checkpoint {
            version: FORMAT_VERSION,
            kind: "finetune-classify".to_string(),
            model: cfg.model.clone(),
            params: model.params,
            seed: cfg.seed,
        },
        ckpt_path,
    )?;
    write_text(metrics_path, &report.lines())?;
    print!("{}", report.lines());
    Ok(())
}

fn cmd_evaluate(cfg: &RunConfig, metrics_path: &Path) -> Result<(), CliError> {
    let ckpt = load_required_checkpoint(cfg)?;
    let model = FinetuneModel {
        cfg: ckpt.model.clone(),
        params: ckpt.params.clone(),
    };
    let report = match ckpt.kind.as_str() {
        "finetune-forecast" => {
            let d = load_dataset(cfg, false)?;
            let splits = forecast_splits(cfg, &d)?;
            let pred = forecast_predict(
                &model,
                &ckpt.model,
                &splits.test.0,
                cfg.finetune.batch_size,
            )?;
            forecast_metrics(&pred, &splits.test.1)
        }
        "finetune-classify" => {
            let d = load_dataset(cfg, true)?;
            let splits = classify_splits(cfg, &d)?;
            let pred = classify_predict(
                &model,
                &ckpt.model,
                &splits.test.0,
                cfg.finetune.batch_size,
            )?;
            let classes = ckpt
                .params
                .entries()
                .iter()
                .find(|(n, _)| n == "head.w")
                .map(|(_, t)| t.shape()[1])
                .unwrap_or(splits.classes);
            classify_metrics(&pred, &splits.test.1, classes)
        }
        other => {
            return Err(Error::Config(format!(
                "checkpoint kind `{other}` has no task head; fine-tune it first"
            ))
            .into());
        }
    };
    write_text(metrics_path, &report.lines())?;
    print!("{}", report.lines());
    Ok(())
}

fn cmd_grid_search(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let d = load_dataset(cfg, false)?;
    let splits = forecast_splits(cfg, &d)?;
    let csv = grid_search(
        &splits,
        &cfg.grid_ratios,
        &cfg.grid_counts,
        &cfg.mask_cfg(),
        &cfg.model,
        &cfg.agg,
        &cfg.pretrain_cfg(),
        &cfg.finetune_forecast_cfg(),
    )?;
    write_text(out, &csv)?;
    print!("{csv}");
    Ok(())
}

/// Probe batch size for the analysis commands; enough samples for stable
/// statistics while keeping forward passes cheap.
const PROBE_LIMIT: usize = 64;

fn probe_batch(cfg: &RunConfig, classify: bool) -> Result<SeriesBatch, CliError> {
    let d = load_dataset(cfg, classify)?;
    let batch = if classify || d.labels.is_some() {
        classify_splits(cfg, &d)?.test.0
    } else {
        forecast_splits(cfg, &d)?.test.0
    };
    Ok(first_rows(&batch, PROBE_LIMIT))
}

fn cmd_analyze_cka(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let ckpt = load_required_checkpoint(cfg)?;
    let probe = probe_batch(cfg, ckpt.model.in_channels > 1)?;
    let report = analysis::cka_first_last(&ckpt, &probe)?;
    let text = format!(
        "cka_first_last={}\nfirst_layer={}\nlast_layer={}\nsamples={}\n",
        report.cka_first_last, report.first_layer, report.last_layer, report.samples
    );
    write_text(out, &text)?;
    print!("{text}");
    Ok(())
}

fn cmd_reconstruct_demo(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let simmtm = load_required_checkpoint(cfg)?;
    let direct_path = cfg.direct_checkpoint.as_ref().ok_or_else(|| {
        CliError::from(Error::Config(
            "reconstruct-demo needs --direct-checkpoint".into(),
        ))
    })?;
    let direct = load_checkpoint(direct_path)?;
    let probe = probe_batch(cfg, false)?;
    let probe = first_rows(&probe, 8);
    let csv = analysis::reconstruction_demo(&probe, &simmtm, &direct, &cfg.mask_cfg(), &cfg.agg)?;
    write_text(out, &csv)?;
    let (mse_s, mse_d) = analysis::demo_mean_mses(&csv);
    println!("wrote {}", out.display());
    println!("mean_mse aggregated={mse_s:.6} direct={mse_d:.6}");
    Ok(())
}
