//! Feature-attention style transfer losses.
//!
//! Three terms compare a frozen teacher with a student block by block:
//!
//! * attention style: distance between Gram matrices `A·Aᵀ` of the score maps,
//! * dual attention features: student self-attention output against the
//!   teacher's, plus student queries cross-attending into teacher keys/values,
//! * final representation: MSE between the end token features.
//!
//! Block terms are summed over every spatial and temporal block. Each loss
//! has a matching gradient with respect to the student quantities, which the
//! trainer feeds into [`TinyEncoder::backward`](crate::attention::TinyEncoder::backward).

use serde::{Deserialize, Serialize};

use crate::attention::{attend, attend_backward, BlockTaps, TapGrads};
use crate::error::{dim_err, Error, Result};
use crate::tensor::{mse, mse_grad_wrt_second, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FastWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for FastWeights {
    /// `(2, 5, 22)`, chosen so the three terms sit near a 1:1:4 ratio.
    fn default() -> Self {
        Self {
            alpha: 2.0,
            beta: 5.0,
            gamma: 22.0,
        }
    }
}

impl FastWeights {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Result<Self> {
        let w = Self { alpha, beta, gamma };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.gamma];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and ≥ 0: {all:?}")));
        }
        if all.iter().all(|&w| w == 0.0) {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        Ok(())
    }
}

/// How the Gram difference is reduced to a scalar.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AspNorm {
    /// `‖G_T − G_S‖²_F / N²`
    #[default]
    MeanSquared,
    /// `‖G_T − G_S‖_F`
    Frobenius,
}

impl std::str::FromStr for AspNorm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean_squared" => Ok(Self::MeanSquared),
            "frobenius" => Ok(Self::Frobenius),
            _ => Err(Error::Config(format!("unknown asp norm '{s}'"))),
        }
    }
}

impl std::fmt::Display for AspNorm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::MeanSquared => "mean_squared",
            Self::Frobenius => "frobenius",
        })
    }
}

pub fn gram(scores: &Tensor) -> Result<Tensor> {
    let (n, m) = scores.dims2()?;
    if n != m {
        return Err(dim_err!("scores must be square, got {n}×{m}"));
    }
    scores.matmul_t(scores)
}

fn check_taps(taps_t: &[BlockTaps], taps_s: &[BlockTaps]) -> Result<()> {
    if taps_t.len() != taps_s.len() {
        return Err(Error::Structure(format!(
            "teacher has {} blocks, student {}",
            taps_t.len(),
            taps_s.len()
        )));
    }
    for (t, s) in taps_t.iter().zip(taps_s) {
        if t.kind != s.kind
            || t.mask != s.mask
            || t.scores.shape() != s.scores.shape()
            || t.q.shape() != s.q.shape()
            || t.out.shape() != s.out.shape()
        {
            return Err(Error::Structure(format!(
                "block {} differs between teacher and student",
                t.index
            )));
        }
    }
    Ok(())
}

/// Gram matrix of every block's score map.
pub fn grams(taps: &[BlockTaps]) -> Result<Vec<Tensor>> {
    taps.iter().map(|t| gram(&t.scores)).collect()
}

fn asp_block(g_t: &Tensor, s: &BlockTaps, norm: AspNorm, want_grad: bool) -> Result<(f64, Option<Tensor>)> {
    let g_s = gram(&s.scores)?;
    let diff = g_t.sub(&g_s)?;
    let n = s.scores.dims2()?.0 as f64;
    let sq = diff.dot(&diff)?;
    // dL/dG_S = c·(G_S − G_T); then dL/dA_S = 2·c·(G_S − G_T)·A_S (symmetric).
    let (loss, c) = match norm {
        AspNorm::MeanSquared => (sq / (n * n), 2.0 / (n * n)),
        AspNorm::Frobenius => {
            let f = sq.sqrt();
            (f, if f > 0.0 { 1.0 / f } else { 0.0 })
        }
    };
    let dscores = if want_grad {
        Some(diff.matmul(&s.scores)?.scale(-2.0 * c))
    } else {
        None
    };
    Ok((loss, dscores))
}

fn check_grams(grams_t: &[Tensor], taps_s: &[BlockTaps]) -> Result<()> {
    if grams_t.len() != taps_s.len() {
        return Err(Error::Structure(format!(
            "{} teacher Grams for {} student blocks",
            grams_t.len(),
            taps_s.len()
        )));
    }
    for (g, s) in grams_t.iter().zip(taps_s) {
        if g.shape() != s.scores.shape() {
            return Err(Error::Structure(format!("block {} Gram shape differs", s.index)));
        }
    }
    Ok(())
}

/// Attention-style loss summed over blocks.
pub fn loss_asp(taps_t: &[BlockTaps], taps_s: &[BlockTaps], norm: AspNorm) -> Result<f64> {
    check_taps(taps_t, taps_s)?;
    loss_asp_against(&grams(taps_t)?, taps_s, norm)
}

/// [`loss_asp`] with the teacher Grams precomputed.
pub fn loss_asp_against(grams_t: &[Tensor], taps_s: &[BlockTaps], norm: AspNorm) -> Result<f64> {
    check_grams(grams_t, taps_s)?;
    let mut total = 0.0;
    for (g, s) in grams_t.iter().zip(taps_s) {
        total += asp_block(g, s, norm, false)?.0;
    }
    Ok(total)
}

/// Attention-style loss and its gradient with respect to each student score map.
pub fn loss_asp_with_grad(
    taps_t: &[BlockTaps],
    taps_s: &[BlockTaps],
    norm: AspNorm,
) -> Result<(f64, Vec<Tensor>)> {
    check_taps(taps_t, taps_s)?;
    loss_asp_with_grad_against(&grams(taps_t)?, taps_s, norm)
}

pub fn loss_asp_with_grad_against(
    grams_t: &[Tensor],
    taps_s: &[BlockTaps],
    norm: AspNorm,
) -> Result<(f64, Vec<Tensor>)> {
    check_grams(grams_t, taps_s)?;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(taps_s.len());
    for (g, s) in grams_t.iter().zip(taps_s) {
        let (l, d) = asp_block(g, s, norm, true)?;
        total += l;
        grads.push(d.expect("gradient requested"));
    }
    Ok((total, grads))
}

/// Gradients of the dual attention loss for one student block.
#[derive(Debug, Clone)]
pub struct DafGrad {
    pub out: Tensor,
    pub q: Tensor,
}

pub fn loss_daf(taps_t: &[BlockTaps], taps_s: &[BlockTaps]) -> Result<f64> {
    check_taps(taps_t, taps_s)?;
    let mut total = 0.0;
    for (t, s) in taps_t.iter().zip(taps_s) {
        let (_, cross) = attend(&s.q, &t.k, &t.v, t.mask)?;
        total += mse(&t.out, &s.out)? + mse(&t.out, &cross)?;
    }
    Ok(total)
}

/// Self-attention alignment plus cross-attention from student queries into
/// the teacher's keys and values, summed over blocks.
pub fn loss_daf_with_grad(
    taps_t: &[BlockTaps],
    taps_s: &[BlockTaps],
) -> Result<(f64, Vec<DafGrad>)> {
    check_taps(taps_t, taps_s)?;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(taps_s.len());
    for (t, s) in taps_t.iter().zip(taps_s) {
        let self_term = mse(&t.out, &s.out)?;
        let dout = mse_grad_wrt_second(&t.out, &s.out)?;

        let (cross_scores, cross) = attend(&s.q, &t.k, &t.v, t.mask)?;
        let cross_term = mse(&t.out, &cross)?;
        let dcross = mse_grad_wrt_second(&t.out, &cross)?;
        let dq = attend_backward(&s.q, &t.k, &t.v, &cross_scores, &dcross, None)?.q;

        total += self_term + cross_term;
        grads.push(DafGrad { out: dout, q: dq });
    }
    Ok((total, grads))
}

pub fn loss_fr(feat_t: &Tensor, feat_s: &Tensor) -> Result<f64> {
    mse(feat_t, feat_s)
}

/// Plain feature distillation: attention-output MSE summed over blocks.
pub fn loss_feature_kd(taps_t: &[BlockTaps], taps_s: &[BlockTaps]) -> Result<f64> {
    check_taps(taps_t, taps_s)?;
    taps_t.iter().zip(taps_s).map(|(t, s)| mse(&t.out, &s.out)).sum()
}

pub fn loss_feature_kd_with_grad(
    taps_t: &[BlockTaps],
    taps_s: &[BlockTaps],
) -> Result<(f64, Vec<Tensor>)> {
    check_taps(taps_t, taps_s)?;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(taps_s.len());
    for (t, s) in taps_t.iter().zip(taps_s) {
        total += mse(&t.out, &s.out)?;
        grads.push(mse_grad_wrt_second(&t.out, &s.out)?);
    }
    Ok((total, grads))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FastLoss {
    pub total: f64,
    pub asp: f64,
    pub daf: f64,
    pub fr: f64,
}

pub fn loss_total(
    taps_t: &[BlockTaps],
    taps_s: &[BlockTaps],
    feat_t: &Tensor,
    feat_s: &Tensor,
    w: &FastWeights,
    norm: AspNorm,
) -> Result<FastLoss> {
    let asp = loss_asp(taps_t, taps_s, norm)?;
    let daf = loss_daf(taps_t, taps_s)?;
    let fr = loss_fr(feat_t, feat_s)?;
    Ok(FastLoss {
        total: w.alpha * asp + w.beta * daf + w.gamma * fr,
        asp,
        daf,
        fr,
    })
}

/// Weighted loss together with the student tap and feature gradients.
///
/// Terms with a zero weight are skipped entirely and report zero.
pub fn loss_total_with_grad(
    taps_t: &[BlockTaps],
    taps_s: &[BlockTaps],
    feat_t: &Tensor,
    feat_s: &Tensor,
    w: &FastWeights,
    norm: AspNorm,
) -> Result<(FastLoss, Vec<TapGrads>, Tensor)> {
    check_taps(taps_t, taps_s)?;
    let g = if w.alpha > 0.0 { grams(taps_t)? } else { Vec::new() };
    loss_total_with_grad_cached(taps_t, &g, taps_s, feat_t, feat_s, w, norm)
}

/// [`loss_total_with_grad`] with teacher Grams precomputed; `grams_t` may be
/// empty when `w.alpha == 0`.
pub fn loss_total_with_grad_cached(
    taps_t: &[BlockTaps],
    grams_t: &[Tensor],
    taps_s: &[BlockTaps],
    feat_t: &Tensor,
    feat_s: &Tensor,
    w: &FastWeights,
    norm: AspNorm,
) -> Result<(FastLoss, Vec<TapGrads>, Tensor)> {
    check_taps(taps_t, taps_s)?;
    let mut tap_grads = vec![TapGrads::default(); taps_s.len()];
    let mut loss = FastLoss::default();
    if w.alpha > 0.0 {
        let (l, g) = loss_asp_with_grad_against(grams_t, taps_s, norm)?;
        loss.asp = l;
        for (tg, ds) in tap_grads.iter_mut().zip(g) {
            tg.scores = Some(ds.scale(w.alpha));
        }
    }
    if w.beta > 0.0 {
        let (l, g) = loss_daf_with_grad(taps_t, taps_s)?;
        loss.daf = l;
        for (tg, dg) in tap_grads.iter_mut().zip(g) {
            tg.out = Some(dg.out.scale(w.beta));
            tg.q = Some(dg.q.scale(w.beta));
        }
    }
    loss.fr = loss_fr(feat_t, feat_s)?;
    let dfeat = mse_grad_wrt_second(feat_t, feat_s)?.scale(w.gamma);
    loss.total = w.alpha * loss.asp + w.beta * loss.daf + w.gamma * loss.fr;
    Ok((loss, tap_grads, dfeat))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{cross_attention, self_attention, AttnMask, BlockKind};
    use crate::tensor::{finite_diff_grad, max_rel_error};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_taps(seed: u64, n: usize, d: usize, blocks: usize) -> Vec<BlockTaps> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..blocks)
            .map(|index| {
                let q = Tensor::random_normal(&[n, d], 1.0, &mut r);
                let k = Tensor::random_normal(&[n, d], 1.0, &mut r);
                let v = Tensor::random_normal(&[n, d], 1.0, &mut r);
                let (scores, out) = attend(&q, &k, &v, AttnMask::Full).unwrap();
                BlockTaps {
                    kind: BlockKind::Spatial,
                    index,
                    mask: AttnMask::Full,
                    q,
                    k,
                    v,
                    scores,
                    out,
                }
            })
            .collect()
    }

    fn with_scores(mut taps: BlockTaps, scores: Tensor) -> BlockTaps {
        taps.scores = scores;
        taps
    }

    #[test]
    fn gram_examples() {
        assert_eq!(gram(&Tensor::eye(3)).unwrap(), Tensor::eye(3));
        let u = Tensor::full(&[4, 4], 0.25);
        for &v in gram(&u).unwrap().data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let a = Tensor::from_rows(&[vec![0.2, 0.3, 0.5], vec![0.1, 0.8, 0.1], vec![0.6, 0.2, 0.2]]).unwrap();
        let g = gram(&a).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let hand: f64 = (0..3).map(|k| a.at2(i, k) * a.at2(j, k)).sum();
                assert!((g.at2(i, j) - hand).abs() < 1e-15);
                assert_eq!(g.at2(i, j), g.at2(j, i));
            }
        }
        assert!(gram(&Tensor::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn asp_examples() {
        let t = random_taps(1, 4, 3, 2);
        assert_eq!(loss_asp(&t, &t, AspNorm::MeanSquared).unwrap(), 0.0);

        let base = random_taps(2, 2, 2, 1).remove(0);
        let teacher = vec![with_scores(base.clone(), Tensor::eye(2))];
        let student = vec![with_scores(base, Tensor::zeros(&[2, 2]))];
        let l = loss_asp(&teacher, &student, AspNorm::MeanSquared).unwrap();
        assert!((l - 0.5).abs() < 1e-15);
        let lf = loss_asp(&teacher, &student, AspNorm::Frobenius).unwrap();
        assert!((lf - 2f64.sqrt()).abs() < 1e-15);

        let s = random_taps(3, 4, 3, 2);
        let per_block: f64 = (0..2)
            .map(|b| {
                let d = gram(&t[b].scores).unwrap().sub(&gram(&s[b].scores).unwrap()).unwrap();
                d.data().iter().map(|x| x * x).sum::<f64>() / 16.0
            })
            .sum();
        assert!((loss_asp(&t, &s, AspNorm::MeanSquared).unwrap() - per_block).abs() < 1e-14);
        assert!(loss_asp(&t, &s[..1], AspNorm::MeanSquared).is_err());
    }

    #[test]
    fn daf_examples() {
        let t = random_taps(4, 5, 3, 2);
        assert!(loss_daf(&t, &t).unwrap().abs() < 1e-30);

        let t1 = random_taps(5, 1, 3, 1);
        let s1 = random_taps(6, 1, 3, 1);
        let expect = mse(&t1[0].v, &s1[0].v).unwrap();
        assert!((loss_daf(&t1, &s1).unwrap() - expect).abs() < 1e-14);

        let s = random_taps(7, 5, 3, 2);
        let oracle: f64 = (0..2)
            .map(|b| {
                let sa_t = self_attention(&t[b].q, &t[b].k, &t[b].v).unwrap();
                let sa_s = self_attention(&s[b].q, &s[b].k, &s[b].v).unwrap();
                let ca = cross_attention(&s[b].q, &t[b].k, &t[b].v).unwrap();
                mse(&sa_t, &sa_s).unwrap() + mse(&sa_t, &ca).unwrap()
            })
            .sum();
        assert!((loss_daf(&t, &s).unwrap() - oracle).abs() < 1e-13);
    }

    #[test]
    fn fr_and_total_examples() {
        let a = Tensor::vector(vec![1.0]);
        assert_eq!(loss_fr(&a, &a).unwrap(), 0.0);
        assert_eq!(loss_fr(&a, &Tensor::vector(vec![-1.0])).unwrap(), 4.0);
        assert!(loss_fr(&a, &Tensor::vector(vec![1.0, 2.0])).is_err());

        let t = random_taps(8, 4, 3, 2);
        let s = random_taps(9, 4, 3, 2);
        let mut r = ChaCha8Rng::seed_from_u64(10);
        let ft = Tensor::random_normal(&[4, 3], 1.0, &mut r);
        let fs = Tensor::random_normal(&[4, 3], 1.0, &mut r);
        let same = loss_total(&t, &t, &ft, &ft, &FastWeights::default(), AspNorm::MeanSquared).unwrap();
        assert_eq!(same.total, 0.0);

        let w1 = FastWeights::new(1.0, 0.0, 0.0).unwrap();
        let l1 = loss_total(&t, &s, &ft, &fs, &w1, AspNorm::MeanSquared).unwrap();
        assert_eq!(l1.total, loss_asp(&t, &s, AspNorm::MeanSquared).unwrap());

        let l = loss_total(&t, &s, &ft, &fs, &FastWeights::default(), AspNorm::MeanSquared).unwrap();
        let a = loss_asp(&t, &s, AspNorm::MeanSquared).unwrap();
        let b = loss_daf(&t, &s).unwrap();
        let c = mse(&ft, &fs).unwrap();
        assert!((l.total - (2.0 * a + 5.0 * b + 22.0 * c)).abs() < 1e-12);
        let (lg, _, _) = loss_total_with_grad(&t, &s, &ft, &fs, &FastWeights::default(), AspNorm::MeanSquared).unwrap();
        assert_eq!(lg, l);
    }

    #[test]
    fn weights_validation() {
        assert!(FastWeights::new(0.0, 0.0, 0.0).is_err());
        assert!(FastWeights::new(-1.0, 1.0, 1.0).is_err());
        assert!(FastWeights::new(0.0, 0.0, 1.0).is_ok());
    }

    /// Rebuilds student taps from raw `(q, k, v)` so finite differences see the
    /// same dependency structure as the encoder.
    fn rebuild(mut tap: BlockTaps, q: &Tensor, k: &Tensor, v: &Tensor) -> BlockTaps {
        let (s, o) = attend(q, k, v, tap.mask).unwrap();
        tap.q = q.clone();
        tap.k = k.clone();
        tap.v = v.clone();
        tap.scores = s;
        tap.out = o;
        tap
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        for seed in 0..20u64 {
            let n = 2 + (seed as usize % 5);
            let d = 2 + (seed as usize % 7);
            let t = random_taps(100 + seed, n, d, 1);
            let s = random_taps(200 + seed, n, d, 1);

            for norm in [AspNorm::MeanSquared, AspNorm::Frobenius] {
                let (_, g) = loss_asp_with_grad(&t, &s, norm).unwrap();
                let num = finite_diff_grad(
                    |p| loss_asp(&t, &[with_scores(s[0].clone(), p.clone())], norm),
                    &s[0].scores,
                    1e-5,
                )
                .unwrap();
                assert!(max_rel_error(&g[0], &num).unwrap() < 1e-4);
            }

            // DAF: out gradient via the self term, q gradient via the cross term.
            let (_, g) = loss_daf_with_grad(&t, &s).unwrap();
            let num_out = finite_diff_grad(
                |p| {
                    let mut ss = s[0].clone();
                    ss.out = p.clone();
                    loss_daf(&t, &[ss])
                },
                &s[0].out,
                1e-5,
            )
            .unwrap();
            assert!(max_rel_error(&g[0].out, &num_out).unwrap() < 1e-4);
            let num_q = finite_diff_grad(
                |p| {
                    let mut ss = s[0].clone();
                    ss.q = p.clone();
                    loss_daf(&t, &[ss])
                },
                &s[0].q,
                1e-5,
            )
            .unwrap();
            assert!(max_rel_error(&g[0].q, &num_q).unwrap() < 1e-4);

            // Full chain through the student's raw attention inputs.
            let w = FastWeights::default();
            let mut r = ChaCha8Rng::seed_from_u64(300 + seed);
            let ft = Tensor::random_normal(&[n, d], 1.0, &mut r);
            let fs = Tensor::random_normal(&[n, d], 1.0, &mut r);
            let (_, tg, dfeat) = loss_total_with_grad(&t, &s, &ft, &fs, &w, AspNorm::MeanSquared).unwrap();
            let num_f = finite_diff_grad(
                |p| Ok(loss_total(&t, &s, &ft, p, &w, AspNorm::MeanSquared)?.total),
                &fs,
                1e-5,
            )
            .unwrap();
            assert!(max_rel_error(&dfeat, &num_f).unwrap() < 1e-4);

            let s0 = &s[0];
            let ag = attend_backward(&s0.q, &s0.k, &s0.v, &s0.scores, tg[0].out.as_ref().unwrap(), tg[0].scores.as_ref()).unwrap();
            let mut dq = ag.q;
            dq.axpy(1.0, tg[0].q.as_ref().unwrap()).unwrap();
            let loss_qkv = |q: &Tensor, k: &Tensor, v: &Tensor| {
                Ok(loss_total(&t, &[rebuild(s0.clone(), q, k, v)], &ft, &fs, &w, AspNorm::MeanSquared)?.total)
            };
            let nq = finite_diff_grad(|p| loss_qkv(p, &s0.k, &s0.v), &s0.q, 1e-5).unwrap();
            let nk = finite_diff_grad(|p| loss_qkv(&s0.q, p, &s0.v), &s0.k, 1e-5).unwrap();
            let nv = finite_diff_grad(|p| loss_qkv(&s0.q, &s0.k, p), &s0.v, 1e-5).unwrap();
            assert!(max_rel_error(&dq, &nq).unwrap() < 1e-4, "seed {seed}");
            assert!(max_rel_error(&ag.k, &nk).unwrap() < 1e-4);
            assert!(max_rel_error(&ag.v, &nv).unwrap() < 1e-4);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn losses_nonnegative_and_linear_in_weights(
            seed in 0u64..10_000,
            w1 in (0.0f64..5.0, 0.0f64..5.0, 0.1f64..5.0),
            w2 in (0.0f64..5.0, 0.0f64..5.0, 0.1f64..5.0),
        ) {
            let t = random_taps(seed, 4, 3, 2);
            let s = random_taps(seed + 1, 4, 3, 2);
            let ft = t[1].out.clone();
            let fs = s[1].out.clone();
            let wa = FastWeights::new(w1.0, w1.1, w1.2).unwrap();
            let wb = FastWeights::new(w2.0, w2.1, w2.2).unwrap();
            let wab = FastWeights::new(w1.0 + w2.0, w1.1 + w2.1, w1.2 + w2.2).unwrap();
            let la = loss_total(&t, &s, &ft, &fs, &wa, AspNorm::MeanSquared).unwrap();
            let lb = loss_total(&t, &s, &ft, &fs, &wb, AspNorm::MeanSquared).unwrap();
            let lab = loss_total(&t, &s, &ft, &fs, &wab, AspNorm::MeanSquared).unwrap();
            prop_assert!(la.asp >= 0.0 && la.daf >= 0.0 && la.fr >= 0.0);
            prop_assert!((lab.total - la.total - lb.total).abs() <= 1e-10 * lab.total.max(1.0));
        }

        #[test]
        fn asp_invariant_to_joint_token_permutation(seed in 0u64..10_000, n in 2usize..7) {
            let t = random_taps(seed, n, 3, 1);
            let s = random_taps(seed + 7, n, 3, 1);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.rotate_left(1);
            let permute = |tap: &BlockTaps| {
                let p = Tensor::from_rows(&perm.iter().map(|&i| perm.iter().map(|&j| tap.scores.at2(i, j)).collect()).collect::<Vec<Vec<f64>>>()).unwrap();
                with_scores(tap.clone(), p)
            };
            let base = loss_asp(&t, &s, AspNorm::MeanSquared).unwrap();
            let permuted = loss_asp(&[permute(&t[0])], &[permute(&s[0])], AspNorm::MeanSquared).unwrap();
            prop_assert!((base - permuted).abs() < 1e-10);
        }
    }
}
