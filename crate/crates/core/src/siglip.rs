//! Sigmoid pairwise contrastive objective over projected visual and text
//! embeddings.
//!
//! There is no learned temperature or bias: logits are raw cosine
//! similarities, so every logit lies in `[-1, 1]`.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::sfp::{SfpGrads, SfpLayer};
use crate::tensor::{Tensor, NORM_EPS};

/// Divisor applied to the sum of the `B²` pair terms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossNorm {
    /// Divide by `B`.
    #[default]
    Batch,
    /// Divide by `B²`.
    Pairs,
}

impl LossNorm {
    fn divisor(self, b: usize) -> f64 {
        match self {
            Self::Batch => b as f64,
            Self::Pairs => (b * b) as f64,
        }
    }
}

impl std::str::FromStr for LossNorm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch" => Ok(Self::Batch),
            "pairs" => Ok(Self::Pairs),
            _ => Err(Error::Config(format!("unknown loss normalization '{s}'"))),
        }
    }
}

impl std::fmt::Display for LossNorm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Batch => "batch",
            Self::Pairs => "pairs",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch {
    pub y_vis: Tensor,
    pub y_txt: Tensor,
}

impl ContrastiveBatch {
    pub fn new(y_vis: Tensor, y_txt: Tensor) -> Result<Self> {
        let (bv, dv) = y_vis.dims2()?;
        let (bt, dt) = y_txt.dims2()?;
        if bv != bt || dv != dt || bv == 0 {
            return Err(dim_err!("visual {bv}×{dv} and text {bt}×{dt} embeddings must match"));
        }
        Ok(Self { y_vis, y_txt })
    }

    pub fn batch_size(&self) -> usize {
        self.y_vis.shape()[0]
    }
}

/// Row-normalizes `x`, returning the unit rows and the original norms.
fn normalize_rows(x: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    let (b, d) = x.dims2()?;
    let mut out = x.clone();
    let mut norms = Vec::with_capacity(b);
    for i in 0..b {
        let row = out.row_mut(i);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n <= NORM_EPS {
            return Err(Error::DegenerateVector { norm: n, eps: NORM_EPS });
        }
        row.iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    debug_assert_eq!(out.len(), b * d);
    Ok((out, norms))
}

/// Gradient through `y = x/‖x‖` per row: `dx = (dy − y⟨y, dy⟩)/‖x‖`.
fn normalize_rows_backward(y: &Tensor, norms: &[f64], dy: &Tensor) -> Result<Tensor> {
    let (b, _) = y.dims2()?;
    let mut dx = dy.clone();
    for (i, &n) in norms.iter().enumerate().take(b) {
        let yr = y.row(i);
        let proj: f64 = yr.iter().zip(dy.row(i)).map(|(a, g)| a * g).sum();
        for (g, &yy) in dx.row_mut(i).iter_mut().zip(yr) {
            *g = (*g - yy * proj) / n;
        }
    }
    Ok(dx)
}

/// `S[i][j] = ⟨txt_i, vis_j⟩` after unit-normalizing each row.
pub fn pairwise_logits(batch: &ContrastiveBatch) -> Result<Tensor> {
    let (t, _) = normalize_rows(&batch.y_txt)?;
    let (v, _) = normalize_rows(&batch.y_vis)?;
    t.matmul_t(&v)
}

fn target(i: usize, j: usize) -> f64 {
    if i == j {
        1.0
    } else {
        -1.0
    }
}

/// `log(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn siglip_loss(s: &Tensor) -> Result<f64> {
    siglip_loss_with(s, LossNorm::Batch)
}

/// `−(1/D)·Σᵢⱼ log σ(Tᵢⱼ·Sᵢⱼ)` with `T = +1` on the diagonal and `−1` elsewhere.
pub fn siglip_loss_with(s: &Tensor, norm: LossNorm) -> Result<f64> {
    let (b, m) = s.dims2()?;
    if b != m || b == 0 {
        return Err(dim_err!("logits must be square and non-empty, got {b}×{m}"));
    }
    let mut sum = 0.0;
    for i in 0..b {
        for j in 0..b {
            sum += softplus(-target(i, j) * s.at2(i, j));
        }
    }
    Ok(sum / norm.divisor(b))
}

/// `∂loss/∂S = −(1/D)·T·σ(−T·S)`.
pub fn siglip_loss_grad(s: &Tensor, norm: LossNorm) -> Result<Tensor> {
    let (b, m) = s.dims2()?;
    if b != m || b == 0 {
        return Err(dim_err!("logits must be square and non-empty, got {b}×{m}"));
    }
    let d = norm.divisor(b);
    let mut g = Tensor::zeros(&[b, b]);
    for i in 0..b {
        for j in 0..b {
            let t = target(i, j);
            g.row_mut(i)[j] = -t * sigmoid(-t * s.at2(i, j)) / d;
        }
    }
    Ok(g)
}

#[derive(Debug, Clone)]
pub struct AlignGrads {
    pub sfp: SfpGrads,
    pub txt_proj: Tensor,
}

/// Loss and gradients of the full projection chain:
/// SFP on visual rows, dense `txt_proj` on text rows, normalization,
/// pairwise logits, sigmoid loss.
pub fn align_step(
    vis: &Tensor,
    txt: &Tensor,
    sfp: &SfpLayer,
    txt_proj: &Tensor,
    norm: LossNorm,
) -> Result<(f64, AlignGrads)> {
    let (b, in_dim) = vis.dims2()?;
    let (bt, txt_dim) = txt.dims2()?;
    let (out_dim, pd) = txt_proj.dims2()?;
    let cfg = sfp.config();
    if bt != b || pd != txt_dim || out_dim != cfg.out_dim || in_dim != cfg.in_dim {
        return Err(dim_err!(
            "align_step: vis {b}×{in_dim}, txt {bt}×{txt_dim}, proj {out_dim}×{pd}, sfp {}→{}",
            cfg.in_dim,
            cfg.out_dim
        ));
    }
    let y_vis = sfp.forward_batched(vis)?;
    let y_txt = txt.matmul_t(txt_proj)?;
    let (v, vn) = normalize_rows(&y_vis)?;
    let (t, tn) = normalize_rows(&y_txt)?;
    let s = t.matmul_t(&v)?;
    let loss = siglip_loss_with(&s, norm)?;

    let ds = siglip_loss_grad(&s, norm)?;
    let dt = ds.matmul(&v)?;
    let dv = ds.t_matmul(&t)?;
    let dy_txt = normalize_rows_backward(&t, &tn, &dt)?;
    let dy_vis = normalize_rows_backward(&v, &vn, &dv)?;

    let dproj = dy_txt.t_matmul(txt)?;
    let mut gs = SfpGrads::zeros_for(sfp);
    let mut dinput = Vec::with_capacity(b * in_dim);
    for i in 0..b {
        let xi = Tensor::vector(vis.row(i).to_vec());
        let gi = sfp.backward(&xi, &Tensor::vector(dy_vis.row(i).to_vec()))?;
        gs.accumulate(&gi)?;
        dinput.extend_from_slice(gi.input.data());
    }
    gs.input = Tensor::new(vec![b, in_dim], dinput)?;
    Ok((loss, AlignGrads { sfp: gs, txt_proj: dproj }))
}

/// Mean cosine similarity of matched (diagonal) and mismatched pairs.
pub fn pair_similarity(s: &Tensor) -> Result<(f64, f64)> {
    let (b, m) = s.dims2()?;
    if b != m || b == 0 {
        return Err(dim_err!("logits must be square and non-empty, got {b}×{m}"));
    }
    let diag: f64 = (0..b).map(|i| s.at2(i, i)).sum::<f64>() / b as f64;
    let off = if b > 1 {
        (s.sum() - diag * b as f64) / (b * b - b) as f64
    } else {
        0.0
    };
    Ok((diag, off))
}
