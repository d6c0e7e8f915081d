//! Synthetic paired volumes, CT intensity preprocessing and a text-embedding
//! stand-in.
//!
//! Every volume is `D × H × W`, stored depth-major. Each pair shares one
//! Hounsfield field: the clean side is clip-normalized, the degraded side is
//! lung-windowed and passed through a block-DCT quantizer.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::{encode_volume, write_file};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TEXT_DIM: usize = 768;
pub const LUNG_WINDOW: (f64, f64) = (-600.0, 1500.0);
pub const HU_CLIP: (f64, f64) = (-1000.0, 1000.0);
pub const DEFAULT_QUALITY: u32 = 90;
pub const MAX_LABELS: usize = 8;

const PATTERN_HU: f64 = 400.0;

/// Standard JPEG luminance table, row-major.
const LUMA_TABLE: [f64; 64] = [
    16., 11., 10., 16., 24., 40., 51., 61., //
    12., 12., 14., 19., 26., 58., 60., 55., //
    14., 13., 16., 24., 40., 57., 69., 56., //
    14., 17., 22., 29., 51., 87., 80., 62., //
    18., 22., 37., 56., 68., 109., 103., 77., //
    24., 35., 55., 64., 81., 104., 113., 92., //
    49., 64., 78., 87., 103., 121., 120., 101., //
    72., 92., 95., 98., 112., 100., 103., 99.,
];

pub fn hu_convert(raw: &Tensor, slope: f64, intercept: f64) -> Tensor {
    raw.map(|p| slope * p + intercept)
}

/// Clips to `[lo, hi]` and maps affinely onto `[-1, 1]`.
pub fn clip_normalize(hu: &Tensor, lo: f64, hi: f64) -> Result<Tensor> {
    if !(lo < hi) {
        return Err(Error::Range(format!("clip range requires lo < hi, got [{lo}, {hi}]")));
    }
    let span = hi - lo;
    Ok(hu.map(|v| (2.0 * (v.clamp(lo, hi) - lo) / span - 1.0).clamp(-1.0, 1.0)))
}

pub fn window_normalize(hu: &Tensor, center: f64, width: f64) -> Result<Tensor> {
    if !(width > 0.0) {
        return Err(Error::Range(format!("window width must be > 0, got {width}")));
    }
    clip_normalize(hu, center - width / 2.0, center + width / 2.0)
}

fn quant_table(quality: u32) -> [f64; 64] {
    let q = quality as f64;
    let scale = if quality < 50 { 5000.0 / q } else { 200.0 - 2.0 * q };
    LUMA_TABLE.map(|t| t * scale / 100.0)
}

/// Orthonormal 8-point DCT-II basis, `basis[u][x]`.
fn dct_basis() -> [[f64; 8]; 8] {
    let mut b = [[0.0; 8]; 8];
    for (u, row) in b.iter_mut().enumerate() {
        let c = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (x, v) in row.iter_mut().enumerate() {
            *v = c * (std::f64::consts::PI * (2 * x + 1) as f64 * u as f64 / 16.0).cos();
        }
    }
    b
}

fn degrade_slice(slice: &mut [f64], h: usize, w: usize, table: &[f64; 64], basis: &[[f64; 8]; 8]) {
    for by in (0..h).step_by(8) {
        for bx in (0..w).step_by(8) {
            // Edge-replicate partial blocks.
            let mut block = [0.0; 64];
            for y in 0..8 {
                for x in 0..8 {
                    let sy = (by + y).min(h - 1);
                    let sx = (bx + x).min(w - 1);
                    block[y * 8 + x] = slice[sy * w + sx] - 128.0;
                }
            }
            let mut coef = [0.0; 64];
            for u in 0..8 {
                for v in 0..8 {
                    let mut s = 0.0;
                    for y in 0..8 {
                        for x in 0..8 {
                            s += basis[u][y] * basis[v][x] * block[y * 8 + x];
                        }
                    }
                    coef[u * 8 + v] = s;
                }
            }
            // DC passes through unquantized.
            for i in 1..64 {
                if table[i] > 0.0 {
                    coef[i] = (coef[i] / table[i]).round() * table[i];
                }
            }
            for y in 0..8 {
                for x in 0..8 {
                    if by + y >= h || bx + x >= w {
                        continue;
                    }
                    let mut s = 0.0;
                    for u in 0..8 {
                        for v in 0..8 {
                            s += basis[u][y] * basis[v][x] * coef[u * 8 + v];
                        }
                    }
                    slice[(by + y) * w + bx + x] = (s + 128.0).round().clamp(0.0, 255.0);
                }
            }
        }
    }
}

/// Lossy block-DCT round trip of every depth slice.
///
/// Values are quantized to 8 bits, transformed in 8×8 blocks, AC
/// coefficients are rounded to multiples of the quality-scaled luminance
/// table, and the result is mapped back onto `[-1, 1]`.
pub fn degrade(vol: &Tensor, quality: u32) -> Result<Tensor> {
    if !(1..=100).contains(&quality) {
        return Err(Error::Range(format!("quality must be in 1..=100, got {quality}")));
    }
    if vol.ndim() != 3 {
        return Err(Error::Dimension(format!("degrade expects D×H×W, got {:?}", vol.shape())));
    }
    let (h, w) = (vol.shape()[1], vol.shape()[2]);
    let table = quant_table(quality);
    let basis = dct_basis();
    let mut px: Vec<f64> = vol
        .data()
        .iter()
        .map(|&x| ((x.clamp(-1.0, 1.0) + 1.0) * 127.5).round())
        .collect();
    if h * w > 0 {
        px.par_chunks_mut(h * w)
            .for_each(|s| degrade_slice(s, h, w, &table, &basis));
    }
    Tensor::new(vol.shape().to_vec(), px.into_iter().map(|p| p / 127.5 - 1.0).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct VolumePair {
    pub clean: Tensor,
    pub degraded: Tensor,
    pub labels: Vec<bool>,
    pub prompt_pos: Vec<String>,
    pub prompt_neg: Vec<String>,
}

impl VolumePair {
    /// Report text built from the prompts matching each label.
    pub fn report(&self) -> String {
        if self.labels.is_empty() {
            return "no findings".into();
        }
        self.labels
            .iter()
            .enumerate()
            .map(|(k, &on)| if on { self.prompt_pos[k].as_str() } else { self.prompt_neg[k].as_str() })
            .collect::<Vec<_>>()
            .join(", ")
    }
}

pub fn prompts(k: usize) -> (String, String) {
    (format!("pattern {k} present"), format!("no pattern {k}"))
}

/// Octant `k`, inset by a quarter of its extent on each side.
pub fn pattern_region(shape: [usize; 3], k: usize) -> [(usize, usize); 3] {
    let bits = [k & 1, (k >> 1) & 1, (k >> 2) & 1];
    let mut out = [(0, 0); 3];
    for a in 0..3 {
        let half = (shape[a] / 2).max(1);
        let start = (bits[a] * half + half / 4).min(shape[a].saturating_sub(1));
        let len = (half / 2).max(1);
        out[a] = (start, (start + len).min(shape[a]));
    }
    out
}

/// Smooth Hounsfield field of Gaussian blobs plus one raised box per active label.
pub fn synth_hu(seed: u64, shape: [usize; 3], labels: &[bool]) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let [d, h, w] = shape;
    let scale = d.min(h).min(w).max(1) as f64;
    let blobs: Vec<([f64; 3], f64, f64)> = (0..4)
        .map(|_| {
            let c = [
                rng.random_range(0.0..d.max(1) as f64),
                rng.random_range(0.0..h.max(1) as f64),
                rng.random_range(0.0..w.max(1) as f64),
            ];
            let sigma = scale * rng.random_range(0.12..0.3);
            let amp = rng.random_range(-250.0..250.0);
            (c, sigma, amp)
        })
        .collect();
    let mut data = Vec::with_capacity(d * h * w);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [z as f64, y as f64, x as f64];
                let mut v = -700.0;
                for (c, s, a) in &blobs {
                    let r2: f64 = (0..3).map(|i| (p[i] - c[i]).powi(2)).sum();
                    v += a * (-r2 / (2.0 * s * s)).exp();
                }
                let n: f64 = rng.sample(StandardNormal);
                data.push(v + 20.0 * n);
            }
        }
    }
    let mut t = Tensor::new(shape.to_vec(), data).expect("shape matches data");
    for (k, _) in labels.iter().enumerate().filter(|(_, &on)| on) {
        let [rz, ry, rx] = pattern_region(shape, k);
        let buf = t.data_mut();
        for z in rz.0..rz.1 {
            for y in ry.0..ry.1 {
                for x in rx.0..rx.1 {
                    buf[(z * h + y) * w + x] += PATTERN_HU;
                }
            }
        }
    }
    t
}

pub fn gen_pair(seed: u64, shape: [usize; 3], n_labels: usize) -> Result<VolumePair> {
    if n_labels > MAX_LABELS {
        return Err(Error::Config(format!("at most {MAX_LABELS} labels, got {n_labels}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<bool> = (0..n_labels).map(|_| rng.random_bool(0.5)).collect();
    gen_pair_with_labels(seed, shape, labels)
}

pub fn gen_pair_with_labels(seed: u64, shape: [usize; 3], labels: Vec<bool>) -> Result<VolumePair> {
    if labels.len() > MAX_LABELS {
        return Err(Error::Config(format!("at most {MAX_LABELS} labels, got {}", labels.len())));
    }
    let hu = synth_hu(seed, shape, &labels);
    let clean = clip_normalize(&hu, HU_CLIP.0, HU_CLIP.1)?;
    let windowed = window_normalize(&hu, LUNG_WINDOW.0, LUNG_WINDOW.1)?;
    let degraded = degrade(&windowed, DEFAULT_QUALITY)?;
    let (prompt_pos, prompt_neg) = (0..labels.len()).map(prompts).unzip();
    Ok(VolumePair {
        clean,
        degraded,
        labels,
        prompt_pos,
        prompt_neg,
    })
}

/// `n` pairs with seeds `seed, seed+1, …`.
pub fn gen_dataset(seed: u64, n: usize, shape: [usize; 3], n_labels: usize) -> Result<Vec<VolumePair>> {
    (0..n as u64).map(|i| gen_pair(seed.wrapping_add(i), shape, n_labels)).collect()
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub fn text_embed_stub(prompt: &str) -> Result<Tensor> {
    text_embed(prompt, TEXT_DIM)
}

/// Bag-of-tokens embedding: each lowercase token seeds a fixed Gaussian unit
/// vector; the sum is unit-normalized.
pub fn text_embed(prompt: &str, dim: usize) -> Result<Tensor> {
    let tokens: Vec<String> = prompt
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect();
    if tokens.is_empty() || dim == 0 {
        return Err(Error::Input(format!("cannot embed prompt {prompt:?}")));
    }
    let mut acc = vec![0.0; dim];
    for t in &tokens {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(t));
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (a, x) in acc.iter_mut().zip(&v) {
            *a += x / n;
        }
    }
    Tensor::vector(acc).l2_normalize(0)
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelRecord {
    index: usize,
    clean: String,
    degraded: String,
    labels: Vec<bool>,
    report: String,
}

/// Writes `pair_NNNN_{clean,degraded}.vol` files and `labels.json` into `dir`.
pub fn export_dataset(dir: &Path, pairs: &[VolumePair]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut records = Vec::with_capacity(pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        let clean = format!("pair_{i:04}_clean.vol");
        let degraded = format!("pair_{i:04}_degraded.vol");
        write_file(&dir.join(&clean), &encode_volume(&p.clean))?;
        write_file(&dir.join(&degraded), &encode_volume(&p.degraded))?;
        records.push(LabelRecord {
            index: i,
            clean,
            degraded,
            labels: p.labels.clone(),
            report: p.report(),
        });
    }
    let json = serde_json::to_string_pretty(&records).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(dir.join("labels.json"), json + "\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::container::decode_volume;
    use proptest::prelude::*;

    const SHAPE: [usize; 3] = [8, 8, 8];

    #[test]
    fn hu_examples() {
        let raw = Tensor::vector(vec![-3.0, 0.0, 7.5]);
        assert_eq!(hu_convert(&raw, 1.0, 0.0), raw);
        assert_eq!(hu_convert(&Tensor::zeros(&[3]), 1.5, -1024.0), Tensor::full(&[3], -1024.0));
        assert_eq!(hu_convert(&Tensor::vector(vec![512.0]), 2.0, -1024.0).data(), &[0.0]);
    }

    #[test]
    fn window_and_clip_examples() {
        let w = |v: f64| window_normalize(&Tensor::vector(vec![v]), -600.0, 1500.0).unwrap().data()[0];
        assert_eq!(w(-600.0), 0.0);
        assert_eq!(w(150.0), 1.0);
        assert_eq!(w(900.0), 1.0);
        assert_eq!(w(-1350.0), -1.0);
        assert!(window_normalize(&Tensor::zeros(&[1]), 0.0, 0.0).is_err());

        let c = |v: f64| clip_normalize(&Tensor::vector(vec![v]), -1000.0, 1000.0).unwrap().data()[0];
        assert_eq!(c(0.0), 0.0);
        assert_eq!(c(1000.0), 1.0);
        assert_eq!(c(-2000.0), -1.0);
        assert!(clip_normalize(&Tensor::zeros(&[1]), 1.0, 1.0).is_err());
    }

    #[test]
    fn degrade_examples() {
        for q in [1, 10, 50, 90, 100] {
            for &v in &[-1.0, -0.3, 0.0, 0.77, 1.0] {
                let vol = Tensor::full(&[2, 8, 8], v);
                let out = degrade(&vol, q).unwrap();
                assert!(out.max_abs_diff(&vol).unwrap() <= 1.0 / 255.0 + 1e-12, "q={q} v={v}");
            }
        }
        let mut r = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let vol = Tensor::random_uniform(&[1, 16, 16], -1.0, 1.0, &mut r);
            let out = degrade(&vol, 100).unwrap();
            assert!(out.max_abs_diff(&vol).unwrap() <= 2.0 / 255.0);
        }
        let vol = synth_hu(3, SHAPE, &[]);
        let vol = window_normalize(&vol, -600.0, 1500.0).unwrap();
        let e50 = crate::tensor::mse(&vol, &degrade(&vol, 50).unwrap()).unwrap();
        let e90 = crate::tensor::mse(&vol, &degrade(&vol, 90).unwrap()).unwrap();
        assert!(e50 >= e90);
        let noisy = Tensor::random_uniform(&[2, 8, 8], -1.0, 1.0, &mut r);
        let n50 = crate::tensor::mse(&noisy, &degrade(&noisy, 50).unwrap()).unwrap();
        let n90 = crate::tensor::mse(&noisy, &degrade(&noisy, 90).unwrap()).unwrap();
        assert!(n50 >= n90 && n90 > 0.0);

        assert!(degrade(&vol, 0).is_err());
        assert!(degrade(&vol, 101).is_err());
        assert!(degrade(&Tensor::zeros(&[8, 8]), 90).is_err());
    }

    #[test]
    fn degrade_handles_partial_blocks() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let vol = Tensor::random_uniform(&[3, 5, 11], -1.0, 1.0, &mut r);
        let out = degrade(&vol, 75).unwrap();
        assert_eq!(out.shape(), vol.shape());
        assert!(out.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(out, degrade(&vol, 75).unwrap());
    }

    #[test]
    fn gen_pair_examples() {
        let a = gen_pair(11, SHAPE, 3).unwrap();
        let b = gen_pair(11, SHAPE, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.clean.shape(), &SHAPE);
        assert!(a.clean.data().iter().chain(a.degraded.data()).all(|v| (-1.0..=1.0).contains(v)));

        let none = gen_pair(11, SHAPE, 0).unwrap();
        assert!(none.labels.is_empty());
        assert_eq!(none.report(), "no findings");
        assert!(gen_pair(1, SHAPE, MAX_LABELS + 1).is_err());

        for k in 0..4 {
            let mut on = vec![false; 4];
            on[k] = true;
            let with = gen_pair_with_labels(2, SHAPE, on).unwrap();
            let without = gen_pair_with_labels(2, SHAPE, vec![false; 4]).unwrap();
            let [rz, ry, rx] = pattern_region(SHAPE, k);
            let mean = |t: &Tensor| {
                let mut s = 0.0;
                let mut n = 0.0;
                for z in rz.0..rz.1 {
                    for y in ry.0..ry.1 {
                        for x in rx.0..rx.1 {
                            s += t.data()[(z * 8 + y) * 8 + x];
                            n += 1.0;
                        }
                    }
                }
                s / n
            };
            assert!(mean(&with.clean) - mean(&without.clean) > 0.1, "label {k}");
        }
    }

    #[test]
    fn clean_and_degraded_are_correlated() {
        for seed in 0..10 {
            let p = gen_pair(seed, SHAPE, 4).unwrap();
            let (a, b) = (p.clean.data(), p.degraded.data());
            let n = a.len() as f64;
            let ma = a.iter().sum::<f64>() / n;
            let mb = b.iter().sum::<f64>() / n;
            let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
            let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
            let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
            assert!(cov / (va * vb).sqrt() > 0.5, "seed {seed}");
        }
    }

    #[test]
    fn text_stub_examples() {
        let a = text_embed_stub("emphysema").unwrap();
        assert_eq!(a, text_embed_stub("emphysema").unwrap());
        assert_eq!(a.len(), TEXT_DIM);
        assert!((a.norm() - 1.0).abs() < 1e-12);
        let b = text_embed_stub("no emphysema").unwrap();
        assert!(a.dot(&b).unwrap() < 1.0 - 1e-6);
        assert!(matches!(text_embed_stub(""), Err(Error::Input(_))));
        assert!(text_embed_stub("  ,, ").is_err());
    }

    #[test]
    fn export_is_reproducible() {
        let pairs = gen_dataset(7, 3, SHAPE, 2).unwrap();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        export_dataset(d1.path(), &pairs).unwrap();
        export_dataset(d2.path(), &pairs).unwrap();
        for name in ["pair_0000_clean.vol", "pair_0002_degraded.vol", "labels.json"] {
            assert_eq!(
                std::fs::read(d1.path().join(name)).unwrap(),
                std::fs::read(d2.path().join(name)).unwrap()
            );
        }
        let back = decode_volume(&std::fs::read(d1.path().join("pair_0001_clean.vol")).unwrap()).unwrap();
        assert_eq!(back, pairs[1].clean);
    }

    proptest! {
        #[test]
        fn normalizers_bounded_and_monotone(a in -5000.0f64..5000.0, b in -5000.0f64..5000.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let t = Tensor::vector(vec![lo, hi]);
            for out in [window_normalize(&t, -600.0, 1500.0).unwrap(), clip_normalize(&t, -1000.0, 1000.0).unwrap()] {
                prop_assert!(out.data().iter().all(|v| (-1.0..=1.0).contains(v)));
                prop_assert!(out.data()[0] <= out.data()[1]);
            }
        }
    }
}
