//! Finite-difference suites for every hand-written backward pass.
//!
//! Each suite draws a small random instance per seed, compares the analytic
//! gradient of a scalar probe against central differences and reports the
//! worst relative error seen over all seeds and all checked tensors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::attention::{
    attend, attend_backward, AttnMask, BlockKind, BlockTaps, EncoderConfig, FeedForward, TinyEncoder,
};
use crate::error::{Error, Result};
use crate::fast::{loss_asp, loss_asp_with_grad, loss_daf, loss_daf_with_grad, loss_fr, loss_total,
    loss_total_with_grad, AspNorm, FastWeights};
use crate::sfp::{SfpConfig, SfpLayer};
use crate::siglip::{align_step, LossNorm};
use crate::tensor::{finite_diff_grad, max_rel_error, mse_grad_wrt_second, Tensor};

pub const GRAD_TOL: f64 = 1e-4;
pub const DEFAULT_SEEDS: usize = 20;
const EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Sfp,
    Attention,
    FeedForward,
    Asp,
    Daf,
    Fr,
    SiglipChain,
    Encoder,
}

impl Suite {
    pub const ALL: [Suite; 8] = [
        Suite::Sfp,
        Suite::Attention,
        Suite::FeedForward,
        Suite::Asp,
        Suite::Daf,
        Suite::Fr,
        Suite::SiglipChain,
        Suite::Encoder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Sfp => "sfp",
            Suite::Attention => "attention",
            Suite::FeedForward => "feed_forward",
            Suite::Asp => "asp",
            Suite::Daf => "daf",
            Suite::Fr => "fr",
            Suite::SiglipChain => "siglip_chain",
            Suite::Encoder => "encoder",
        }
    }

    /// Worst relative error for one random instance.
    pub fn check(self, seed: u64) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match self {
            Suite::Sfp => check_sfp(&mut rng),
            Suite::Attention => check_attention(&mut rng),
            Suite::FeedForward => check_feed_forward(&mut rng),
            Suite::Asp => check_asp(&mut rng),
            Suite::Daf => check_daf(&mut rng),
            Suite::Fr => check_fr(&mut rng),
            Suite::SiglipChain => check_siglip_chain(&mut rng),
            Suite::Encoder => check_encoder(&mut rng),
        }
    }
}

impl std::str::FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown gradient suite '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteResult {
    pub suite: &'static str,
    pub seeds: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradReport {
    pub tolerance: f64,
    pub suites: Vec<SuiteResult>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(|s| s.passed)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("suite,seeds,max_rel_error,passed\n");
        for s in &self.suites {
            out += &format!("{},{},{:e},{}\n", s.suite, s.seeds, s.max_rel_error, s.passed);
        }
        out
    }
}

/// Runs `suites` over seeds `base_seed..base_seed + seeds`.
pub fn run_suites(suites: &[Suite], seeds: usize, base_seed: u64) -> Result<GradReport> {
    if seeds == 0 {
        return Err(Error::Config("gradient check needs at least one seed".into()));
    }
    let mut results = Vec::with_capacity(suites.len());
    for &suite in suites {
        let errs: Vec<f64> = (0..seeds as u64)
            .into_par_iter()
            .map(|i| suite.check(base_seed.wrapping_add(i)))
            .collect::<Result<_>>()?;
        // NaN must fail the comparison, so fold with a NaN-propagating max.
        let worst = errs.iter().fold(0.0f64, |a, &b| if b.is_nan() || b > a { b } else { a });
        results.push(SuiteResult {
            suite: suite.name(),
            seeds,
            max_rel_error: worst,
            passed: worst < GRAD_TOL,
        });
    }
    Ok(GradReport {
        tolerance: GRAD_TOL,
        suites: results,
    })
}

pub fn run_all(seeds: usize) -> Result<GradReport> {
    run_suites(&Suite::ALL, seeds, 0)
}

fn compare<F>(f: F, x: &Tensor, analytic: &Tensor) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    max_rel_error(analytic, &finite_diff_grad(f, x, EPS)?)
}

fn normal(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::random_normal(shape, std, rng)
}

fn random_mask(n: usize, rng: &mut ChaCha8Rng) -> AttnMask {
    let divisors: Vec<usize> = (1..=n).filter(|s| n % s == 0).collect();
    let s = divisors[rng.random_range(0..divisors.len())];
    match rng.random_range(0..4) {
        0 => AttnMask::Full,
        1 => AttnMask::Causal,
        2 => AttnMask::WithinSlice { tokens_per_slice: s },
        _ => AttnMask::CausalAcrossSlices { tokens_per_slice: s },
    }
}

fn check_sfp(rng: &mut ChaCha8Rng) -> Result<f64> {
    let out_dim = [4usize, 6, 8, 9][rng.random_range(0..4)];
    let blocks = rng.random_range(1..=3);
    let rank = rng.random_range(1..=3);
    let cfg = SfpConfig::new(out_dim * blocks, out_dim, rank)?;
    let layer = SfpLayer::random(cfg, rng)?.with_bias(normal(&[out_dim], 0.5, rng))?;
    let x = normal(&[cfg.in_dim], 1.0, rng);
    let w = normal(&[out_dim], 1.0, rng);
    let g = layer.backward(&x, &w)?;

    let mut worst = compare(|p| layer.forward(p)?.dot(&w), &x, &g.input)?;
    let analytic: Vec<&Tensor> = g.left.iter().chain(&g.right).chain(g.bias.as_ref()).collect();
    for (idx, a) in analytic.into_iter().enumerate() {
        let base = layer.clone();
        let x0 = layer.clone().tensors_mut()[idx].clone();
        let err = compare(
            |p| {
                let mut l = base.clone();
                *l.tensors_mut()[idx] = p.clone();
                l.forward(&x)?.dot(&w)
            },
            &x0,
            a,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

fn check_attention(rng: &mut ChaCha8Rng) -> Result<f64> {
    let n = rng.random_range(2..=8);
    let d = rng.random_range(2..=6);
    let mask = random_mask(n, rng);
    let q = normal(&[n, d], 1.0, rng);
    let k = normal(&[n, d], 1.0, rng);
    let v = normal(&[n, d], 1.0, rng);
    let w = normal(&[n, d], 1.0, rng);
    let u = normal(&[n, n], 1.0, rng);
    let probe = |q: &Tensor, k: &Tensor, v: &Tensor| -> Result<f64> {
        let (s, o) = attend(q, k, v, mask)?;
        Ok(o.dot(&w)? + s.dot(&u)?)
    };
    let (scores, _) = attend(&q, &k, &v, mask)?;
    let g = attend_backward(&q, &k, &v, &scores, &w, Some(&u))?;
    let eq = compare(|p| probe(p, &k, &v), &q, &g.q)?;
    let ek = compare(|p| probe(&q, p, &v), &k, &g.k)?;
    let ev = compare(|p| probe(&q, &k, p), &v, &g.v)?;
    Ok(eq.max(ek).max(ev))
}

fn check_feed_forward(rng: &mut ChaCha8Rng) -> Result<f64> {
    let n = rng.random_range(1..=6);
    let d = rng.random_range(2..=6);
    let h = rng.random_range(2..=12);
    let ffn = FeedForward {
        w1: normal(&[d, h], 0.7, rng),
        b1: normal(&[h], 0.3, rng),
        w2: normal(&[h, d], 0.7, rng),
        b2: normal(&[d], 0.3, rng),
    };
    let x = normal(&[n, d], 1.0, rng);
    let w = normal(&[n, d], 1.0, rng);
    let (_, cache) = ffn.forward(&x)?;
    let mut grads = FeedForward {
        w1: Tensor::zeros(&[d, h]),
        b1: Tensor::zeros(&[h]),
        w2: Tensor::zeros(&[h, d]),
        b2: Tensor::zeros(&[d]),
    };
    let dx = ffn.backward(&x, &cache, &w, &mut grads)?;
    let mut worst = compare(|p| ffn.forward(p)?.0.dot(&w), &x, &dx)?;
    type Field = fn(&mut FeedForward) -> &mut Tensor;
    let fields: [Field; 4] = [|f| &mut f.w1, |f| &mut f.b1, |f| &mut f.w2, |f| &mut f.b2];
    for field in fields {
        let x0 = field(&mut ffn.clone()).clone();
        let a = field(&mut grads.clone()).clone();
        let err = compare(
            |p| {
                let mut f = ffn.clone();
                *field(&mut f) = p.clone();
                f.forward(&x)?.0.dot(&w)
            },
            &x0,
            &a,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

fn random_taps(rng: &mut ChaCha8Rng, n: usize, d: usize, masks: &[AttnMask]) -> Result<Vec<BlockTaps>> {
    masks
        .iter()
        .enumerate()
        .map(|(index, &mask)| {
            let q = normal(&[n, d], 1.0, rng);
            let k = normal(&[n, d], 1.0, rng);
            let v = normal(&[n, d], 1.0, rng);
            let (scores, out) = attend(&q, &k, &v, mask)?;
            Ok(BlockTaps {
                kind: if index % 2 == 0 { BlockKind::Spatial } else { BlockKind::Temporal },
                index,
                mask,
                q,
                k,
                v,
                scores,
                out,
            })
        })
        .collect()
}

fn tap_pair(rng: &mut ChaCha8Rng) -> Result<(Vec<BlockTaps>, Vec<BlockTaps>)> {
    let n = rng.random_range(2..=6);
    let d = rng.random_range(2..=6);
    let blocks = rng.random_range(1..=3);
    let masks: Vec<AttnMask> = (0..blocks).map(|_| random_mask(n, rng)).collect();
    Ok((random_taps(rng, n, d, &masks)?, random_taps(rng, n, d, &masks)?))
}

/// Worst error over every student block for a tap field `get`.
fn per_block<G, L>(taps_s: &[BlockTaps], get: G, analytic: &[&Tensor], loss: L) -> Result<f64>
where
    G: Fn(&mut BlockTaps) -> &mut Tensor,
    L: Fn(&[BlockTaps]) -> Result<f64>,
{
    let mut worst = 0.0f64;
    for (b, a) in analytic.iter().enumerate() {
        let x0 = get(&mut taps_s[b].clone()).clone();
        let err = compare(
            |p| {
                let mut s = taps_s.to_vec();
                *get(&mut s[b]) = p.clone();
                loss(&s)
            },
            &x0,
            a,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

fn check_asp(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (t, s) = tap_pair(rng)?;
    let mut worst = 0.0f64;
    for norm in [AspNorm::MeanSquared, AspNorm::Frobenius] {
        let (_, g) = loss_asp_with_grad(&t, &s, norm)?;
        let refs: Vec<&Tensor> = g.iter().collect();
        worst = worst.max(per_block(&s, |b| &mut b.scores, &refs, |s| loss_asp(&t, s, norm))?);
    }
    Ok(worst)
}

fn check_daf(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (t, s) = tap_pair(rng)?;
    let (_, g) = loss_daf_with_grad(&t, &s)?;
    let outs: Vec<&Tensor> = g.iter().map(|x| &x.out).collect();
    let qs: Vec<&Tensor> = g.iter().map(|x| &x.q).collect();
    let eo = per_block(&s, |b| &mut b.out, &outs, |s| loss_daf(&t, s))?;
    let eq = per_block(&s, |b| &mut b.q, &qs, |s| loss_daf(&t, s))?;
    Ok(eo.max(eq))
}

fn check_fr(rng: &mut ChaCha8Rng) -> Result<f64> {
    let n = rng.random_range(1..=8);
    let d = rng.random_range(1..=8);
    let ft = normal(&[n, d], 1.0, rng);
    let fs = normal(&[n, d], 1.0, rng);
    compare(|p| loss_fr(&ft, p), &fs, &mse_grad_wrt_second(&ft, &fs)?)
}

fn check_siglip_chain(rng: &mut ChaCha8Rng) -> Result<f64> {
    let b = rng.random_range(1..=4);
    let out_dim = [4usize, 6, 8][rng.random_range(0..3)];
    let cfg = SfpConfig::new(out_dim * rng.random_range(1..=3), out_dim, rng.random_range(1..=3))?;
    let txt_dim = rng.random_range(2..=8);
    let sfp = SfpLayer::random(cfg, rng)?;
    let vis = normal(&[b, cfg.in_dim], 1.0, rng);
    let txt = normal(&[b, txt_dim], 1.0, rng);
    let proj = normal(&[out_dim, txt_dim], 0.5, rng);
    let norm = if rng.random_bool(0.5) { LossNorm::Batch } else { LossNorm::Pairs };
    let (_, g) = align_step(&vis, &txt, &sfp, &proj, norm)?;

    let mut worst = compare(|p| Ok(align_step(&vis, &txt, &sfp, p, norm)?.0), &proj, &g.txt_proj)?;
    worst = worst.max(compare(|p| Ok(align_step(p, &txt, &sfp, &proj, norm)?.0), &vis, &g.sfp.input)?);
    let cores: Vec<&Tensor> = g.sfp.left.iter().chain(&g.sfp.right).collect();
    for (idx, a) in cores.into_iter().enumerate() {
        let x0 = sfp.clone().tensors_mut()[idx].clone();
        let err = compare(
            |p| {
                let mut l = sfp.clone();
                *l.tensors_mut()[idx] = p.clone();
                Ok(align_step(&vis, &txt, &l, &proj, norm)?.0)
            },
            &x0,
            a,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Whole-encoder chain: the weighted distillation loss against a fixed
/// teacher, differentiated through every student parameter.
fn check_encoder(rng: &mut ChaCha8Rng) -> Result<f64> {
    let cfg = EncoderConfig {
        volume: [4, 4, 4],
        patch: 2,
        width: rng.random_range(2..=4) * 2,
        n_spatial: 1,
        n_temporal: 1,
    };
    let teacher = TinyEncoder::random(cfg, rng)?;
    let student = TinyEncoder::random(cfg, rng)?;
    let vol_t = Tensor::random_uniform(&cfg.volume, -1.0, 1.0, rng);
    let vol_s = Tensor::random_uniform(&cfg.volume, -1.0, 1.0, rng);
    let w = FastWeights::default();
    let norm = AspNorm::MeanSquared;
    let (feat_t, taps_t) = teacher.forward(&vol_t)?;
    let loss = |enc: &TinyEncoder| -> Result<f64> {
        let (f, taps) = enc.forward(&vol_s)?;
        Ok(loss_total(&taps_t, &taps, &feat_t, &f, &w, norm)?.total)
    };
    let trace = student.forward_trace(&vol_s)?;
    let (_, tap_grads, dfeat) = loss_total_with_grad(&taps_t, &trace.taps, &feat_t, &trace.features, &w, norm)?;
    let grads = student.backward(&trace, &dfeat, &tap_grads)?;

    let mut worst = 0.0f64;
    for (idx, a) in grads.tensors().into_iter().enumerate() {
        let x0 = student.tensors()[idx].clone();
        let err = compare(
            |p| {
                let mut e = student.clone();
                *e.tensors_mut()[idx] = p.clone();
                loss(&e)
            },
            &x0,
            a,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_suite_passes_on_a_few_seeds() {
        let report = run_suites(&Suite::ALL, 3, 100).unwrap();
        assert_eq!(report.suites.len(), Suite::ALL.len());
        for s in &report.suites {
            assert!(s.passed, "{} worst {}", s.suite, s.max_rel_error);
        }
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = normal(&[5], 1.0, &mut rng);
        let bogus = x.scale(3.0);
        let err = compare(|p| p.dot(p), &x, &bogus).unwrap();
        assert!(err > GRAD_TOL);
    }

    #[test]
    fn suite_names_round_trip() {
        for s in Suite::ALL {
            assert_eq!(s.name().parse::<Suite>().unwrap(), s);
        }
        assert!("nope".parse::<Suite>().is_err());
        assert!(run_suites(&[Suite::Fr], 0, 0).is_err());
    }

    #[test]
    fn report_csv_shape() {
        let r = run_suites(&[Suite::Fr, Suite::Attention], 2, 0).unwrap();
        let csv = r.to_csv();
        assert!(csv.starts_with("suite,seeds,max_rel_error,passed\n"));
        assert_eq!(csv.lines().count(), 3);
        assert!(r.passed());
    }
}
