//! CSV ingestion, standardization, windowing, and splits.

use std::io::Read;
use std::ops::Range;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// A parsed multivariate series: `rows` is T×C, with an optional integer
/// label per row (classification datasets carry one label per fixed-length
/// sample block).
#[derive(Clone, Debug)]
pub struct RawDataset {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub labels: Option<Vec<i64>>,
}

impl RawDataset {
    pub fn t_len(&self) -> usize {
        self.rows.len()
    }

    pub fn n_channels(&self) -> usize {
        self.columns.len()
    }
}

#[derive(Clone, Debug)]
pub struct CsvSchema {
    /// Column treated as the integer class label, when present.
    pub label_column: String,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            label_column: "label".to_string(),
        }
    }
}

/// Train/val/test fractions. Forecasting splits chronologically;
/// classification splits by sample.
#[derive(Clone, Copy, Debug)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub chronological: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: 0.7,
            val_fraction: 0.1,
            test_fraction: 0.2,
            chronological: true,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let fracs = [self.train_fraction, self.val_fraction, self.test_fraction];
        if fracs.iter().any(|f| *f <= 0.0 || *f >= 1.0) {
            return Err(Error::Config(format!(
                "split fractions must lie in (0,1), got {fracs:?}"
            )));
        }
        let sum: f64 = fracs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions must sum to 1, got {sum}"
            )));
        }
        Ok(())
    }

    /// Chronological row ranges (train, val, test).
    pub fn row_ranges(&self, t_len: usize) -> (Range<usize>, Range<usize>, Range<usize>) {
        let train_end = (t_len as f64 * self.train_fraction).floor() as usize;
        let val_end = train_end + (t_len as f64 * self.val_fraction).floor() as usize;
        (0..train_end, train_end..val_end, val_end..t_len)
    }
}

/// Per-variate standardization statistics (population stdev convention).
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Variates whose train-split values were constant; their stdev was
    /// substituted by 1.
    pub constant_variates: Vec<usize>,
}

/// A batch of windows `[N, L, C]` plus where each window started.
#[derive(Clone, Debug)]
pub struct SeriesBatch {
    pub values: Tensor,
    pub origin: Vec<usize>,
    pub normalization: Option<NormStats>,
}

impl SeriesBatch {
    pub fn n(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn l(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn c(&self) -> usize {
        self.values.shape()[2]
    }
}

/// Parse a comma-separated, header-first, UTF-8 CSV with `.` decimals.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<RawDataset> {
    let mut text = String::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?
        .read_to_string(&mut text)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string());
    parse_csv(&text, &name, schema)
}

/// CSV parsing split out for tests; `name` labels the dataset.
pub fn parse_csv(text: &str, name: &str, schema: &CsvSchema) -> Result<RawDataset> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::EmptyInput(format!("csv `{name}` has no header row")))?;
    let header: Vec<String> = header.split(',').map(|c| c.trim().to_string()).collect();
    let label_idx = header.iter().position(|c| *c == schema.label_column);
    let columns: Vec<String> = header
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != label_idx)
        .map(|(_, c)| c.clone())
        .collect();
    if columns.is_empty() {
        return Err(Error::EmptyInput(format!(
            "csv `{name}` has no value columns"
        )));
    }

    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (ri, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != header.len() {
            return Err(Error::Ingestion {
                row: ri + 1,
                col: 0,
                msg: format!("expected {} cells, got {}", header.len(), cells.len()),
            });
        }
        let mut row = Vec::with_capacity(columns.len());
        let mut value_col = 0;
        for (ci, cell) in cells.iter().enumerate() {
            if Some(ci) == label_idx {
                let lab: i64 = cell.parse().map_err(|_| Error::Ingestion {
                    row: ri + 1,
                    col: ci + 1,
                    msg: format!("unparsable label `{cell}`"),
                })?;
                labels.push(lab);
            } else {
                value_col += 1;
                let v: f64 = cell.parse().map_err(|_| Error::Ingestion {
                    row: ri + 1,
                    col: value_col,
                    msg: format!("unparsable value `{cell}`"),
                })?;
                if !v.is_finite() {
                    return Err(Error::Ingestion {
                        row: ri + 1,
                        col: value_col,
                        msg: format!("non-finite value `{cell}`"),
                    });
                }
                row.push(v);
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::EmptyInput(format!("csv `{name}` has no data rows")));
    }
    Ok(RawDataset {
        name: name.to_string(),
        columns,
        rows,
        labels: label_idx.map(|_| labels),
    })
}

/// Compute per-variate mean and population stdev from `train_rows` only.
/// Constant variates get stdev 1.
pub fn compute_stats(d: &RawDataset, train_rows: Range<usize>) -> Result<NormStats> {
    if train_rows.is_empty() {
        return Err(Error::EmptyInput("train split is empty".to_string()));
    }
    let c = d.n_channels();
    let n = train_rows.len() as f64;
    let mut mean = vec![0.0; c];
    let mut std = vec![0.0; c];
    for t in train_rows.clone() {
        for j in 0..c {
            mean[j] += d.rows[t][j];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    for t in train_rows {
        for j in 0..c {
            let dv = d.rows[t][j] - mean[j];
            std[j] += dv * dv;
        }
    }
    let mut constant_variates = Vec::new();
    for (j, s) in std.iter_mut().enumerate() {
        *s = (*s / n).sqrt();
        if *s == 0.0 {
            *s = 1.0;
            constant_variates.push(j);
        }
    }
    Ok(NormStats {
        mean,
        std,
        constant_variates,
    })
}

/// Transform every variate to `(x - mean) / stdev` using the given stats.
pub fn standardize(d: &RawDataset, stats: &NormStats) -> RawDataset {
    let mut out = d.clone();
    for row in &mut out.rows {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - stats.mean[j]) / stats.std[j];
        }
    }
    out
}

/// Inverse of `standardize`.
pub fn de_standardize(d: &RawDataset, stats: &NormStats) -> RawDataset {
    let mut out = d.clone();
    for row in &mut out.rows {
        for (j, v) in row.iter_mut().enumerate() {
            *v = *v * stats.std[j] + stats.mean[j];
        }
    }
    out
}

/// Slide windows of `input_len` (+ `horizon` target points) over the rows in
/// `range` with the given stride. Windows never leave `range`, so they never
/// cross a split boundary.
pub fn make_windows(
    d: &RawDataset,
    range: Range<usize>,
    input_len: usize,
    horizon: usize,
    stride: usize,
    stats: Option<NormStats>,
) -> Result<(SeriesBatch, Tensor)> {
    assert!(stride >= 1, "stride must be >= 1");
    let t = range.len();
    let c = d.n_channels();
    if t < input_len + horizon {
        return Err(Error::InsufficientData(format!(
            "need at least {} rows for input_len {} + horizon {}, have {}",
            input_len + horizon,
            input_len,
            horizon,
            t
        )));
    }
    let n = (t - input_len - horizon) / stride + 1;
    let mut inputs = Vec::with_capacity(n * input_len * c);
    let mut targets = Vec::with_capacity(n * horizon * c);
    let mut origin = Vec::with_capacity(n);
    for w in 0..n {
        let start = range.start + w * stride;
        origin.push(start);
        for t in start..start + input_len {
            inputs.extend_from_slice(&d.rows[t]);
        }
        for t in start + input_len..start + input_len + horizon {
            targets.extend_from_slice(&d.rows[t]);
        }
    }
    Ok((
        SeriesBatch {
            values: Tensor::new(vec![n, input_len, c], inputs)?,
            origin,
            normalization: stats,
        },
        Tensor::new(vec![n, horizon, c], targets)?,
    ))
}

/// Treat each variate as an independent univariate sample:
/// `[N, L, C] -> [N*C, L, 1]`, sample-major then channel.
pub fn flatten_channels(b: &SeriesBatch) -> SeriesBatch {
    let (n, l, c) = (b.n(), b.l(), b.c());
    let src = b.values.data();
    let mut data = vec![0.0; n * c * l];
    for i in 0..n {
        for ch in 0..c {
            for t in 0..l {
                data[(i * c + ch) * l + t] = src[(i * l + t) * c + ch];
            }
        }
    }
    let mut origin = Vec::with_capacity(n * c);
    for &o in &b.origin {
        for _ in 0..c {
            origin.push(o);
        }
    }
    SeriesBatch {
        values: Tensor::from_raw(vec![n * c, l, 1], data),
        origin,
        normalization: b.normalization.clone(),
    }
}

/// Reassemble `[N*C, H, 1]` values back to `[N, H, C]`.
pub fn unflatten_channels(values: &Tensor, n: usize, c: usize) -> Tensor {
    let h = values.shape()[1];
    assert_eq!(values.shape(), &[n * c, h, 1], "dimension error: unflatten");
    let src = values.data();
    let mut data = vec![0.0; n * h * c];
    for i in 0..n {
        for ch in 0..c {
            for t in 0..h {
                data[(i * h + t) * c + ch] = src[(i * c + ch) * h + t];
            }
        }
    }
    Tensor::from_raw(vec![n, h, c], data)
}

/// Segment a labeled dataset into fixed-length samples; the label must be
/// constant within each block.
pub fn segment_samples(d: &RawDataset, sample_len: usize) -> Result<Vec<(usize, i64)>> {
    let labels = d
        .labels
        .as_ref()
        .ok_or_else(|| Error::Config("dataset has no label column".to_string()))?;
    if d.t_len() % sample_len != 0 {
        return Err(Error::Config(format!(
            "row count {} is not a multiple of sample length {}",
            d.t_len(),
            sample_len
        )));
    }
    let mut out = Vec::new();
    for s in 0..d.t_len() / sample_len {
        let start = s * sample_len;
        let lab = labels[start];
        if labels[start..start + sample_len].iter().any(|&l| l != lab) {
            return Err(Error::Config(format!(
                "label changes inside sample block starting at row {start}"
            )));
        }
        out.push((start, lab));
    }
    Ok(out)
}

/// One-line-per-fact ingestion summary.
pub fn ingestion_report(d: &RawDataset, stats: Option<&NormStats>) -> String {
    let mut out = String::new();
    out.push_str(&format!("dataset: {}\n", d.name));
    out.push_str(&format!("rows: {}\n", d.t_len()));
    out.push_str(&format!("variates: {}\n", d.n_channels()));
    if let Some(labels) = &d.labels {
        let mut classes: Vec<i64> = labels.clone();
        classes.sort_unstable();
        classes.dedup();
        out.push_str(&format!("classes: {}\n", classes.len()));
    }
    if let Some(s) = stats {
        if !s.constant_variates.is_empty() {
            out.push_str(&format!(
                "constant variates (stdev substituted by 1): {:?}\n",
                s.constant_variates
            ));
        }
    }
    out
}
