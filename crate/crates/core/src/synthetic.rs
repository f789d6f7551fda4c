//! Deterministic synthetic datasets: sinusoid mixtures with trend for
//! forecasting, and class-distinct waveform families for classification.
//! Output uses the same CSV shape the data module ingests.

use std::f64::consts::PI;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::RawDataset;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthKind {
    SinMix,
    TrendSeason,
    ClassWaveforms,
}

#[derive(Clone, Debug)]
pub struct SynthSpec {
    pub kind: SynthKind,
    /// Total rows for forecasting; `samples * sample_len` for classification.
    pub length: usize,
    pub channels: usize,
    /// Inclusive range of sinusoid periods, in samples.
    pub period_range: (f64, f64),
    pub amp_range: (f64, f64),
    /// Inclusive range of sinusoids summed per channel.
    pub waves: (usize, usize),
    /// Linear trend slope magnitude bound (per step).
    pub trend: f64,
    pub noise_std: f64,
    /// Classification only.
    pub classes: usize,
    pub samples: usize,
    pub sample_len: usize,
    pub seed: u64,
}

impl SynthSpec {
    pub fn forecast_default(seed: u64) -> Self {
        Self {
            kind: SynthKind::SinMix,
            length: 2000,
            channels: 1,
            period_range: (16.0, 96.0),
            amp_range: (0.5, 1.5),
            waves: (2, 4),
            trend: 5e-4,
            noise_std: 0.05,
            classes: 0,
            samples: 0,
            sample_len: 0,
            seed,
        }
    }

    pub fn classify_default(seed: u64) -> Self {
        Self {
            kind: SynthKind::ClassWaveforms,
            length: 0,
            channels: 1,
            period_range: (8.0, 32.0),
            amp_range: (0.8, 1.2),
            waves: (1, 1),
            trend: 0.0,
            noise_std: 0.05,
            classes: 2,
            samples: 100,
            sample_len: 64,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.noise_std < 0.0 {
            return Err(Error::Config("noise stdev must be >= 0".to_string()));
        }
        if self.period_range.0 <= 0.0 || self.period_range.1 < self.period_range.0 {
            return Err(Error::Config(format!(
                "period range must be positive and ordered, got {:?}",
                self.period_range
            )));
        }
        if self.waves.0 < 1 || self.waves.1 < self.waves.0 {
            return Err(Error::Config(format!(
                "wave count range must be >= 1 and ordered, got {:?}",
                self.waves
            )));
        }
        Ok(())
    }
}

fn noise(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    if std == 0.0 {
        0.0
    } else {
        Normal::new(0.0, std).unwrap().sample(rng)
    }
}

/// Sum of 2-4 sinusoids plus a linear trend and Gaussian noise, per channel.
pub fn gen_forecast(spec: &SynthSpec) -> Result<RawDataset> {
    spec.validate()?;
    if spec.length < 2 || spec.channels < 1 {
        return Err(Error::Config(
            "forecast generation needs length >= 2 and channels >= 1".to_string(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut rows = vec![vec![0.0; spec.channels]; spec.length];
    let mut columns = Vec::with_capacity(spec.channels);
    for ch in 0..spec.channels {
        columns.push(format!("v{ch}"));
        let k = rng.gen_range(spec.waves.0..=spec.waves.1);
        let comps: Vec<(f64, f64, f64)> = (0..k)
            .map(|_| {
                (
                    rng.gen_range(spec.amp_range.0..=spec.amp_range.1),
                    rng.gen_range(spec.period_range.0..=spec.period_range.1),
                    rng.gen_range(0.0..2.0 * PI),
                )
            })
            .collect();
        let slope = if spec.trend == 0.0 {
            0.0
        } else {
            rng.gen_range(-spec.trend..spec.trend)
        };
        for (t, row) in rows.iter_mut().enumerate() {
            let mut v = slope * t as f64;
            for &(amp, period, phase) in &comps {
                v += amp * (2.0 * PI * t as f64 / period + phase).sin();
            }
            row[ch] = v + noise(&mut rng, spec.noise_std);
        }
    }
    Ok(RawDataset {
        name: format!("sin_mix_seed{}", spec.seed),
        columns,
        rows,
        labels: None,
    })
}

/// One waveform family per class: distinct base period and shape (sine,
/// square, sawtooth, ...), balanced labels assigned round-robin.
pub fn gen_classify(spec: &SynthSpec) -> Result<RawDataset> {
    spec.validate()?;
    if spec.classes < 2 {
        return Err(Error::Config("classification needs K >= 2".to_string()));
    }
    if spec.samples < spec.classes || spec.sample_len < 2 {
        return Err(Error::Config(
            "need samples >= classes and sample_len >= 2".to_string(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut rows = Vec::with_capacity(spec.samples * spec.sample_len);
    let mut labels = Vec::with_capacity(spec.samples * spec.sample_len);
    let columns: Vec<String> = (0..spec.channels).map(|ch| format!("v{ch}")).collect();
    for i in 0..spec.samples {
        let class = i % spec.classes;
        let base = spec.period_range.0 * (1.0 + class as f64);
        // small phase jitter only: keeps class-conditional means distinct
        let phase = rng.gen_range(0.0..0.3);
        let amp = rng.gen_range(spec.amp_range.0..=spec.amp_range.1);
        for t in 0..spec.sample_len {
            let arg = 2.0 * PI * t as f64 / base + phase;
            let shape = match class % 3 {
                0 => arg.sin(),
                1 => arg.sin().signum() * 0.8,
                _ => 2.0 * ((arg / (2.0 * PI)).fract() - 0.5),
            };
            let mut row = Vec::with_capacity(spec.channels);
            for ch in 0..spec.channels {
                let v = amp * shape * (1.0 + 0.1 * ch as f64) + noise(&mut rng, spec.noise_std);
                row.push(v);
            }
            rows.push(row);
            labels.push(class as i64);
        }
    }
    Ok(RawDataset {
        name: format!("class_waveforms_seed{}", spec.seed),
        columns,
        rows,
        labels: Some(labels),
    })
}

/// Serialize in the CSV shape `parse_csv` reads back (label column last
/// when present).
pub fn to_csv(d: &RawDataset) -> String {
    let mut out = String::new();
    out.push_str(&d.columns.join(","));
    if d.labels.is_some() {
        out.push_str(",label");
    }
    out.push('\n');
    for (i, row) in d.rows.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.12}")).collect();
        out.push_str(&cells.join(","));
        if let Some(labels) = &d.labels {
            out.push_str(&format!(",{}", labels[i]));
        }
        out.push('\n');
    }
    out
}

pub fn write_csv(d: &RawDataset, path: &std::path::Path) -> Result<()> {
    std::fs::write(path, to_csv(d))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{parse_csv, CsvSchema};

    #[test]
    fn single_noiseless_sinusoid_respects_amplitude_bound() {
        let spec = SynthSpec {
            waves: (1, 1),
            noise_std: 0.0,
            ..SynthSpec::forecast_default(3)
        };
        let d = gen_forecast(&spec).unwrap();
        let bound = spec.amp_range.1 + spec.trend * spec.length as f64;
        for row in &d.rows {
            assert!(row[0].abs() <= bound + 1e-9);
        }
    }

    #[test]
    fn same_seed_reproduces_forecast_data() {
        let spec = SynthSpec::forecast_default(7);
        let a = gen_forecast(&spec).unwrap();
        let b = gen_forecast(&spec).unwrap();
        assert_eq!(a.rows, b.rows);
    }

    fn autocorr(xs: &[f64], lag: usize) -> f64 {
        let n = xs.len() - lag;
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let num: f64 = (0..n).map(|t| (xs[t] - mean) * (xs[t + lag] - mean)).sum();
        let den: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum();
        num / den
    }

    #[test]
    fn periodicity_shows_in_autocorrelation() {
        let period = 50.0;
        let spec = SynthSpec {
            waves: (1, 1),
            period_range: (period, period),
            trend: 0.0,
            noise_std: 0.0,
            ..SynthSpec::forecast_default(11)
        };
        let d = gen_forecast(&spec).unwrap();
        let xs: Vec<f64> = d.rows.iter().map(|r| r[0]).collect();
        assert!(autocorr(&xs, 50) > autocorr(&xs, 25));
    }

    #[test]
    fn classes_are_balanced() {
        let spec = SynthSpec {
            samples: 100,
            ..SynthSpec::classify_default(5)
        };
        let d = gen_classify(&spec).unwrap();
        let labels = d.labels.as_ref().unwrap();
        let per_sample: Vec<i64> = (0..spec.samples)
            .map(|i| labels[i * spec.sample_len])
            .collect();
        let zeros = per_sample.iter().filter(|&&l| l == 0).count();
        assert_eq!(zeros, 50);
        assert_eq!(per_sample.len() - zeros, 50);
    }

    #[test]
    fn noiseless_classes_are_nearest_neighbor_separable() {
        let spec = SynthSpec {
            noise_std: 0.0,
            samples: 40,
            ..SynthSpec::classify_default(9)
        };
        let d = gen_classify(&spec).unwrap();
        let labels = d.labels.as_ref().unwrap();
        let l = spec.sample_len;
        let series: Vec<Vec<f64>> = (0..spec.samples)
            .map(|i| (0..l).map(|t| d.rows[i * l + t][0]).collect())
            .collect();
        let mut correct = 0;
        for i in 0..spec.samples {
            let mut best = (f64::INFINITY, 0usize);
            for j in 0..spec.samples {
                if i == j {
                    continue;
                }
                let dist: f64 = series[i]
                    .iter()
                    .zip(&series[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if dist < best.0 {
                    best = (dist, j);
                }
            }
            if labels[best.1 * l] == labels[i * l] {
                correct += 1;
            }
        }
        assert_eq!(correct, spec.samples);
    }

    #[test]
    fn same_seed_reproduces_labels_and_values() {
        let spec = SynthSpec::classify_default(13);
        let a = gen_classify(&spec).unwrap();
        let b = gen_classify(&spec).unwrap();
        assert_eq!(a.rows, b.rows);
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn class_means_are_well_separated() {
        let spec = SynthSpec::classify_default(17);
        let d = gen_classify(&spec).unwrap();
        let labels = d.labels.as_ref().unwrap();
        let l = spec.sample_len;
        let mut means = vec![vec![0.0; l]; spec.classes];
        let mut counts = vec![0.0; spec.classes];
        for i in 0..spec.samples {
            let class = labels[i * l] as usize;
            counts[class] += 1.0;
            for t in 0..l {
                means[class][t] += d.rows[i * l + t][0];
            }
        }
        for (k, m) in means.iter_mut().enumerate() {
            for v in m.iter_mut() {
                *v /= counts[k];
            }
        }
        let dist: f64 = means[0]
            .iter()
            .zip(&means[1])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(dist > 5.0 * spec.noise_std, "class mean distance {dist}");
    }

    #[test]
    fn csv_round_trips_through_ingestion() {
        let d = gen_classify(&SynthSpec {
            samples: 4,
            sample_len: 8,
            ..SynthSpec::classify_default(21)
        })
        .unwrap();
        let text = to_csv(&d);
        let back = parse_csv(&text, &d.name, &CsvSchema::default()).unwrap();
        assert_eq!(back.labels, d.labels);
        assert_eq!(back.columns, d.columns);
        for (a, b) in back.rows.iter().zip(&d.rows) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }
}
