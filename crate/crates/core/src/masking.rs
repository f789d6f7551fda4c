//! Masked-variant generation: random exact-count masking and geometric
//! span masking, with zero-filled variants and the layout used by the
//! rest of the pipeline.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::SeriesBatch;
use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    Random,
    Geometric,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskConfig {
    /// Masked fraction r in [0, 1].
    pub ratio: f64,
    /// Number of masked variants per sample (M >= 1).
    pub count: usize,
    pub kind: MaskKind,
    /// Mean masked-run length for geometric masking.
    pub mean_span: usize,
    pub seed: u64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            ratio: 0.5,
            count: 3,
            kind: MaskKind::Geometric,
            mean_span: 3,
            seed: 0,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ratio) {
            return Err(Error::Config(format!(
                "mask ratio must lie in [0,1], got {}",
                self.ratio
            )));
        }
        if self.count < 1 {
            return Err(Error::Config("mask count M must be >= 1".to_string()));
        }
        if self.kind == MaskKind::Geometric && self.mean_span < 1 {
            return Err(Error::Config("mean_span must be >= 1".to_string()));
        }
        Ok(())
    }
}

/// Boolean masks `[N, M, L]` (true = masked) plus the zero-filled variants
/// `[N, M, L, C]`. A masked time point is masked across all channels.
#[derive(Clone, Debug)]
pub struct MaskedSet {
    pub masks: Vec<bool>,
    pub variants: Tensor,
    pub n: usize,
    pub m: usize,
    pub l: usize,
    pub c: usize,
}

impl MaskedSet {
    pub fn masked(&self, sample: usize, variant: usize, t: usize) -> bool {
        self.masks[(sample * self.m + variant) * self.l + t]
    }
}

/// Row layout of the assembled input set: position `i*(M+1)` holds original
/// sample i, the following M rows hold its masked variants.
#[derive(Clone, Copy, Debug)]
pub struct GroupIndex {
    pub n: usize,
    pub m: usize,
}

impl GroupIndex {
    pub fn d(&self) -> usize {
        self.n * (self.m + 1)
    }

    pub fn original_row(&self, sample: usize) -> usize {
        sample * (self.m + 1)
    }

    pub fn variant_row(&self, sample: usize, variant: usize) -> usize {
        sample * (self.m + 1) + 1 + variant
    }

    pub fn is_original(&self, row: usize) -> bool {
        row % (self.m + 1) == 0
    }

    /// (sample, masked-variant index) of a row; `None` for originals.
    pub fn group(&self, row: usize) -> (usize, Option<usize>) {
        let sample = row / (self.m + 1);
        let within = row % (self.m + 1);
        (sample, (within > 0).then(|| within - 1))
    }

    /// All rows belonging to `sample`, original first.
    pub fn group_rows(&self, sample: usize) -> Vec<usize> {
        (0..=self.m).map(|j| sample * (self.m + 1) + j).collect()
    }
}

fn build_variants(b: &SeriesBatch, masks: &[bool], cfg: &MaskConfig) -> MaskedSet {
    let (n, l, c) = (b.n(), b.l(), b.c());
    let m = cfg.count;
    let src = b.values.data();
    let mut variants = vec![0.0; n * m * l * c];
    for i in 0..n {
        for j in 0..m {
            for t in 0..l {
                if masks[(i * m + j) * l + t] {
                    continue; // zero-filled
                }
                for ch in 0..c {
                    variants[(((i * m + j) * l + t) * c) + ch] = src[(i * l + t) * c + ch];
                }
            }
        }
    }
    MaskedSet {
        masks: masks.to_vec(),
        variants: Tensor::from_raw(vec![n, m, l, c], variants),
        n,
        m,
        l,
        c,
    }
}

/// Mask exactly `round(r*L)` uniformly chosen time points per variant.
pub fn mask_random(b: &SeriesBatch, cfg: &MaskConfig) -> Result<MaskedSet> {
    cfg.validate()?;
    assert_eq!(cfg.kind, MaskKind::Random, "mask_random requires kind=random");
    let (n, l) = (b.n(), b.l());
    let m = cfg.count;
    let k = (cfg.ratio * l as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut masks = vec![false; n * m * l];
    let mut perm: Vec<usize> = (0..l).collect();
    for i in 0..n {
        for j in 0..m {
            // partial Fisher-Yates: first k entries are the masked points
            for t in 0..k.min(l) {
                let swap = t + rng.gen_range(0..l - t);
                perm.swap(t, swap);
            }
            for &t in &perm[..k] {
                masks[(i * m + j) * l + t] = true;
            }
        }
    }
    Ok(build_variants(b, &masks, cfg))
}

/// Two-state span masking: masked-run lengths geometric with mean
/// `mean_span`, unmasked-run lengths geometric with mean
/// `mean_span*(1-r)/r`, so the expected masked fraction is r.
pub fn mask_geometric(b: &SeriesBatch, cfg: &MaskConfig) -> Result<MaskedSet> {
    cfg.validate()?;
    assert_eq!(
        cfg.kind,
        MaskKind::Geometric,
        "mask_geometric requires kind=geometric"
    );
    let (n, l) = (b.n(), b.l());
    let m = cfg.count;
    let mut masks = vec![false; n * m * l];
    if cfg.ratio == 1.0 {
        masks.iter_mut().for_each(|v| *v = true);
        return Ok(build_variants(b, &masks, cfg));
    }
    if cfg.ratio == 0.0 {
        return Ok(build_variants(b, &masks, cfg));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let r = cfg.ratio;
    let span = cfg.mean_span as f64;
    let p_masked = 1.0 / span;
    let p_unmasked = (r / (span * (1.0 - r))).min(1.0);
    for i in 0..n {
        for j in 0..m {
            let mut masked_state = rng.gen::<f64>() < r;
            let mut t = 0;
            while t < l {
                let p = if masked_state { p_masked } else { p_unmasked };
                let run = sample_geometric(&mut rng, p);
                let end = (t + run).min(l);
                if masked_state {
                    for u in t..end {
                        masks[(i * m + j) * l + u] = true;
                    }
                }
                t = end;
                masked_state = !masked_state;
            }
        }
    }
    Ok(build_variants(b, &masks, cfg))
}

pub fn mask(b: &SeriesBatch, cfg: &MaskConfig) -> Result<MaskedSet> {
    match cfg.kind {
        MaskKind::Random => mask_random(b, cfg),
        MaskKind::Geometric => mask_geometric(b, cfg),
    }
}

/// Run length >= 1 with mean 1/p (geometric, inverse-CDF sampling).
fn sample_geometric(rng: &mut ChaCha8Rng, p: f64) -> usize {
    if p >= 1.0 {
        return 1;
    }
    let u: f64 = rng.gen();
    ((1.0 - u).ln() / (1.0 - p).ln()).floor() as usize + 1
}

/// Interleave originals and masked variants into one `[D, L, C]` input set,
/// D = N(M+1).
pub fn assemble_inputs(b: &SeriesBatch, set: &MaskedSet) -> (Tensor, GroupIndex) {
    let (n, l, c) = (b.n(), b.l(), b.c());
    let m = set.m;
    let d = n * (m + 1);
    let src = b.values.data();
    let var = set.variants.data();
    let mut data = vec![0.0; d * l * c];
    let row_len = l * c;
    for i in 0..n {
        let dst = i * (m + 1) * row_len;
        data[dst..dst + row_len].copy_from_slice(&src[i * row_len..(i + 1) * row_len]);
        for j in 0..m {
            let dst = (i * (m + 1) + 1 + j) * row_len;
            let s = (i * m + j) * row_len;
            data[dst..dst + row_len].copy_from_slice(&var[s..s + row_len]);
        }
    }
    (
        Tensor::from_raw(vec![d, l, c], data),
        GroupIndex { n, m },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SeriesBatch;

    fn batch(n: usize, l: usize, c: usize) -> SeriesBatch {
        let data: Vec<f64> = (0..n * l * c).map(|i| i as f64 + 1.0).collect();
        SeriesBatch {
            values: Tensor::new(vec![n, l, c], data).unwrap(),
            origin: (0..n).collect(),
            normalization: None,
        }
    }

    fn cfg(ratio: f64, kind: MaskKind) -> MaskConfig {
        MaskConfig {
            ratio,
            count: 3,
            kind,
            mean_span: 3,
            seed: 7,
        }
    }

    #[test]
    fn random_masks_exact_count() {
        let b = batch(4, 8, 2);
        let set = mask_random(&b, &cfg(0.5, MaskKind::Random)).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                let k = (0..8).filter(|&t| set.masked(i, j, t)).count();
                assert_eq!(k, 4);
            }
        }
    }

    #[test]
    fn ratio_zero_is_identity() {
        let b = batch(2, 8, 1);
        let set = mask_random(&b, &cfg(0.0, MaskKind::Random)).unwrap();
        assert!(set.masks.iter().all(|&m| !m));
        for i in 0..2 {
            for j in 0..3 {
                for t in 0..8 {
                    assert_eq!(
                        set.variants.at(&[i, j, t, 0]),
                        b.values.at(&[i, t, 0])
                    );
                }
            }
        }
    }

    #[test]
    fn ratio_one_zeroes_everything() {
        let b = batch(2, 8, 1);
        let set = mask_random(&b, &cfg(1.0, MaskKind::Random)).unwrap();
        assert!(set.masks.iter().all(|&m| m));
        assert!(set.variants.data().iter().all(|&v| v == 0.0));
        let geo = mask_geometric(&b, &cfg(1.0, MaskKind::Geometric)).unwrap();
        assert!(geo.masks.iter().all(|&m| m));
    }

    #[test]
    fn geometric_ratio_zero_all_unmasked() {
        let b = batch(2, 8, 1);
        let set = mask_geometric(&b, &cfg(0.0, MaskKind::Geometric)).unwrap();
        assert!(set.masks.iter().all(|&m| !m));
    }

    #[test]
    fn zero_fill_property() {
        let b = batch(3, 16, 2);
        let set = mask_geometric(&b, &cfg(0.5, MaskKind::Geometric)).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                for t in 0..16 {
                    for ch in 0..2 {
                        let v = set.variants.at(&[i, j, t, ch]);
                        if set.masked(i, j, t) {
                            assert_eq!(v, 0.0);
                        } else {
                            assert_eq!(v, b.values.at(&[i, t, ch]));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let b = batch(3, 32, 1);
        for kind in [MaskKind::Random, MaskKind::Geometric] {
            let a = mask(&b, &cfg(0.5, kind)).unwrap();
            let c = mask(&b, &cfg(0.5, kind)).unwrap();
            assert_eq!(a.masks, c.masks);
            assert_eq!(a.variants.data(), c.variants.data());
        }
    }

    #[test]
    fn geometric_statistics_converge() {
        // L=10^4, 100 variants: empirical fraction 0.5 +- 0.02,
        // mean masked-run length 3 +- 0.3
        let b = batch(1, 10_000, 1);
        let cfg = MaskConfig {
            ratio: 0.5,
            count: 100,
            kind: MaskKind::Geometric,
            mean_span: 3,
            seed: 11,
        };
        let set = mask_geometric(&b, &cfg).unwrap();
        let masked = set.masks.iter().filter(|&&m| m).count();
        let frac = masked as f64 / set.masks.len() as f64;
        assert!((frac - 0.5).abs() <= 0.02, "fraction {frac}");

        let mut runs = 0usize;
        let mut run_total = 0usize;
        for j in 0..cfg.count {
            let mut t = 0;
            while t < 10_000 {
                if set.masked(0, j, t) {
                    let start = t;
                    while t < 10_000 && set.masked(0, j, t) {
                        t += 1;
                    }
                    runs += 1;
                    run_total += t - start;
                } else {
                    t += 1;
                }
            }
        }
        let mean_run = run_total as f64 / runs as f64;
        assert!((mean_run - 3.0).abs() <= 0.3, "mean run {mean_run}");
    }

    #[test]
    fn assemble_layout() {
        let b = batch(2, 4, 1);
        let cfg = MaskConfig {
            count: 3,
            ..cfg(0.5, MaskKind::Random)
        };
        let set = mask_random(&b, &cfg).unwrap();
        let (all, index) = assemble_inputs(&b, &set);
        assert_eq!(all.shape(), &[8, 4, 1]);
        assert_eq!(index.original_row(0), 0);
        assert_eq!(index.original_row(1), 4);
        for t in 0..4 {
            assert_eq!(all.at(&[0, t, 0]), b.values.at(&[0, t, 0]));
            assert_eq!(all.at(&[4, t, 0]), b.values.at(&[1, t, 0]));
        }
        assert_eq!(index.group(5), (1, Some(0)));
        assert_eq!(index.group(4), (1, None));
    }

    #[test]
    fn assemble_single_sample_single_variant() {
        let b = batch(1, 4, 1);
        let cfg = MaskConfig {
            count: 1,
            ..cfg(0.5, MaskKind::Random)
        };
        let set = mask_random(&b, &cfg).unwrap();
        let (all, index) = assemble_inputs(&b, &set);
        assert_eq!(all.shape(), &[2, 4, 1]);
        assert!(index.is_original(0));
        assert!(!index.is_original(1));
    }
}
