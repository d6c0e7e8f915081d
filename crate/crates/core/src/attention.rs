//! Single-head scaled dot-product attention and a miniature spatiotemporal
//! encoder that records per-block attention taps.
//!
//! Tokens are laid out depth-major: token `t·S + s` is spatial position `s`
//! of depth slice `t`. Spatial blocks attend within a slice; temporal blocks
//! attend causally across slices at a fixed spatial position. Both are
//! expressed as masks over the full `N×N` score matrix, so masked entries
//! are exactly zero.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::container::{ContainerReader, ContainerWriter};
use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

pub const ENCODER_MAGIC: &[u8; 4] = b"ENC1";

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Spatial,
    Temporal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnMask {
    Full,
    Causal,
    /// Tokens attend only within their own depth slice.
    WithinSlice { tokens_per_slice: usize },
    /// Tokens attend to the same spatial position in the current or earlier slices.
    CausalAcrossSlices { tokens_per_slice: usize },
}

impl AttnMask {
    pub fn allows(&self, i: usize, j: usize) -> bool {
        match *self {
            AttnMask::Full => true,
            AttnMask::Causal => j <= i,
            AttnMask::WithinSlice { tokens_per_slice: s } => i / s == j / s,
            AttnMask::CausalAcrossSlices { tokens_per_slice: s } => i % s == j % s && j <= i,
        }
    }
}

/// Row-softmax of `q·kᵀ/√d_k` with disallowed entries set to zero.
pub fn masked_scores(q: &Tensor, k: &Tensor, mask: AttnMask) -> Result<Tensor> {
    let (n, d) = q.dims2()?;
    let (nk, dk) = k.dims2()?;
    if d != dk {
        return Err(dim_err!("q width {d} != k width {dk}"));
    }
    if n != nk {
        return Err(dim_err!("q has {n} rows, k has {nk}"));
    }
    let scale = 1.0 / (d as f64).sqrt();
    let mut logits = q.matmul_t(k)?;
    let ld = logits.data_mut();
    for i in 0..n {
        for j in 0..n {
            ld[i * n + j] = if mask.allows(i, j) {
                ld[i * n + j] * scale
            } else {
                f64::NEG_INFINITY
            };
        }
    }
    logits.softmax(1)
}

/// Attention weights; when `causal`, entries above the diagonal are zero.
pub fn attention_scores(q: &Tensor, k: &Tensor, causal: bool) -> Result<Tensor> {
    let mask = if causal { AttnMask::Causal } else { AttnMask::Full };
    masked_scores(q, k, mask)
}

/// Returns `(scores, scores·v)`.
pub fn attend(q: &Tensor, k: &Tensor, v: &Tensor, mask: AttnMask) -> Result<(Tensor, Tensor)> {
    let scores = masked_scores(q, k, mask)?;
    let (nv, _) = v.dims2()?;
    if nv != scores.dims2()?.0 {
        return Err(dim_err!("v has {nv} rows"));
    }
    let out = scores.matmul(v)?;
    Ok((scores, out))
}

pub fn self_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    Ok(attend(q, k, v, AttnMask::Full)?.1)
}

/// Student queries against teacher keys and values.
pub fn cross_attention(q_s: &Tensor, k_t: &Tensor, v_t: &Tensor) -> Result<Tensor> {
    Ok(attend(q_s, k_t, v_t, AttnMask::Full)?.1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttnGrads {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
}

/// Backward of `out = softmax(q·kᵀ/√d)·v`.
///
/// `dscores` is an extra gradient applied directly to the score matrix.
pub fn attend_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    scores: &Tensor,
    dout: &Tensor,
    dscores: Option<&Tensor>,
) -> Result<AttnGrads> {
    let (n, d) = q.dims2()?;
    let dv = scores.t_matmul(dout)?;
    let mut da = dout.matmul_t(v)?;
    if let Some(extra) = dscores {
        da.axpy(1.0, extra)?;
    }
    let dlogits = softmax_rows_backward(scores, &da)?;
    let scale = 1.0 / (d as f64).sqrt();
    let dq = dlogits.matmul(k)?.scale(scale);
    let dk = dlogits.t_matmul(q)?.scale(scale);
    debug_assert_eq!(dq.dims2()?, (n, d));
    Ok(AttnGrads { q: dq, k: dk, v: dv })
}

/// Gradient through a row softmax given its output `p` and upstream `dp`.
pub fn softmax_rows_backward(p: &Tensor, dp: &Tensor) -> Result<Tensor> {
    let (n, m) = p.dims2()?;
    if dp.shape() != p.shape() {
        return Err(dim_err!("softmax backward shape mismatch"));
    }
    let mut out = Tensor::zeros(&[n, m]);
    for i in 0..n {
        let pr = p.row(i);
        let dr = dp.row(i);
        let inner: f64 = pr.iter().zip(dr).map(|(a, b)| a * b).sum();
        for (o, (a, b)) in out.row_mut(i).iter_mut().zip(pr.iter().zip(dr)) {
            *o = a * (b - inner);
        }
    }
    Ok(out)
}

/// Row-wise layer normalization without affine parameters.
/// Returns the normalized rows and each row's reciprocal standard deviation.
pub fn layer_norm(x: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    let (n, d) = x.dims2()?;
    let mut y = Tensor::zeros(&[n, d]);
    let mut rstd = Vec::with_capacity(n);
    for i in 0..n {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        for (o, v) in y.row_mut(i).iter_mut().zip(row) {
            *o = (v - mean) * rs;
        }
        rstd.push(rs);
    }
    Ok((y, rstd))
}

pub fn layer_norm_backward(y: &Tensor, rstd: &[f64], dy: &Tensor) -> Result<Tensor> {
    let (n, d) = y.dims2()?;
    let mut dx = Tensor::zeros(&[n, d]);
    for i in 0..n {
        let yr = y.row(i);
        let dr = dy.row(i);
        let mean_dy = dr.iter().sum::<f64>() / d as f64;
        let mean_dyy = dr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        for (o, (g, yv)) in dx.row_mut(i).iter_mut().zip(dr.iter().zip(yr)) {
            *o = rstd[i] * (g - mean_dy - yv * mean_dyy);
        }
    }
    Ok(dx)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // √(2/π)

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn add_row_bias(x: &mut Tensor, b: &Tensor) {
    let d = b.len();
    for row in x.data_mut().chunks_exact_mut(d) {
        for (o, v) in row.iter_mut().zip(b.data()) {
            *o += v;
        }
    }
}

fn column_sums(x: &Tensor) -> Tensor {
    let (_, d) = x.dims2().expect("matrix");
    let mut s = vec![0.0; d];
    for row in x.data().chunks_exact(d) {
        for (o, v) in s.iter_mut().zip(row) {
            *o += v;
        }
    }
    Tensor::vector(s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Debug, Clone)]
pub struct FeedForwardCache {
    pre: Tensor,
    act: Tensor,
}

impl FeedForward {
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, FeedForwardCache)> {
        let mut pre = x.matmul(&self.w1)?;
        add_row_bias(&mut pre, &self.b1);
        let act = pre.map(gelu);
        let mut out = act.matmul(&self.w2)?;
        add_row_bias(&mut out, &self.b2);
        Ok((out, FeedForwardCache { pre, act }))
    }

    /// Accumulates parameter gradients into `grads` and returns the input gradient.
    pub fn backward(
        &self,
        x: &Tensor,
        cache: &FeedForwardCache,
        dout: &Tensor,
        grads: &mut FeedForward,
    ) -> Result<Tensor> {
        grads.w2.axpy(1.0, &cache.act.t_matmul(dout)?)?;
        grads.b2.axpy(1.0, &column_sums(dout))?;
        let dact = dout.matmul_t(&self.w2)?;
        let dpre = dact.zip_map(&cache.pre, |g, p| g * gelu_grad(p))?;
        grads.w1.axpy(1.0, &x.t_matmul(&dpre)?)?;
        grads.b1.axpy(1.0, &column_sums(&dpre))?;
        dpre.matmul_t(&self.w1)
    }

    fn tensors(&self) -> [&Tensor; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

/// Attention quantities captured from one transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockTaps {
    pub kind: BlockKind,
    pub index: usize,
    pub mask: AttnMask,
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub scores: Tensor,
    pub out: Tensor,
}

/// Extra gradients injected at a block's taps during the encoder backward.
#[derive(Debug, Clone, Default)]
pub struct TapGrads {
    pub q: Option<Tensor>,
    pub scores: Option<Tensor>,
    pub out: Option<Tensor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// `(depth, height, width)`
    pub volume: [usize; 3],
    pub patch: usize,
    pub width: usize,
    pub n_spatial: usize,
    pub n_temporal: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            volume: [8, 8, 8],
            patch: 2,
            width: 16,
            n_spatial: 2,
            n_temporal: 2,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.width == 0 {
            return Err(Error::Config("patch and width must be positive".into()));
        }
        if self.volume.iter().any(|&v| v == 0 || v % self.patch != 0) {
            return Err(dim_err!(
                "volume {:?} not divisible by patch {}",
                self.volume,
                self.patch
            ));
        }
        if self.n_spatial + self.n_temporal == 0 {
            return Err(Error::Config("encoder needs at least one block".into()));
        }
        Ok(())
    }

    pub fn slices(&self) -> usize {
        self.volume[0] / self.patch
    }

    pub fn tokens_per_slice(&self) -> usize {
        (self.volume[1] / self.patch) * (self.volume[2] / self.patch)
    }

    pub fn tokens(&self) -> usize {
        self.slices() * self.tokens_per_slice()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch.pow(3)
    }

    /// Flattened feature length `tokens · width`.
    pub fn feature_len(&self) -> usize {
        self.tokens() * self.width
    }

    fn block_kind(&self, index: usize) -> BlockKind {
        if index < self.n_spatial {
            BlockKind::Spatial
        } else {
            BlockKind::Temporal
        }
    }

    fn mask(&self, kind: BlockKind) -> AttnMask {
        let s = self.tokens_per_slice();
        match kind {
            BlockKind::Spatial => AttnMask::WithinSlice { tokens_per_slice: s },
            BlockKind::Temporal => AttnMask::CausalAcrossSlices { tokens_per_slice: s },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBlock {
    pub kind: BlockKind,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ffn: FeedForward,
}

impl EncoderBlock {
    fn zeros(kind: BlockKind, d: usize) -> Self {
        Self {
            kind,
            wq: Tensor::zeros(&[d, d]),
            wk: Tensor::zeros(&[d, d]),
            wv: Tensor::zeros(&[d, d]),
            wo: Tensor::zeros(&[d, d]),
            ffn: FeedForward {
                w1: Tensor::zeros(&[d, 2 * d]),
                b1: Tensor::zeros(&[2 * d]),
                w2: Tensor::zeros(&[2 * d, d]),
                b2: Tensor::zeros(&[d]),
            },
        }
    }
}

/// Pre-norm transformer encoder over 3-D patches.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyEncoder {
    config: EncoderConfig,
    pub patch_w: Tensor,
    pub patch_b: Tensor,
    pub pos: Tensor,
    pub blocks: Vec<EncoderBlock>,
}

#[derive(Debug, Clone)]
struct BlockCache {
    x_in: Tensor,
    ln1: Tensor,
    rstd1: Vec<f64>,
    ln2: Tensor,
    rstd2: Vec<f64>,
    ffn: FeedForwardCache,
}

/// Everything a forward pass produces, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct EncoderTrace {
    pub features: Tensor,
    pub taps: Vec<BlockTaps>,
    patches: Tensor,
    caches: Vec<BlockCache>,
}

impl TinyEncoder {
    pub fn zeros(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let d = config.width;
        Ok(Self {
            config,
            patch_w: Tensor::zeros(&[config.patch_dim(), d]),
            patch_b: Tensor::zeros(&[d]),
            pos: Tensor::zeros(&[config.tokens(), d]),
            blocks: (0..config.n_spatial + config.n_temporal)
                .map(|i| EncoderBlock::zeros(config.block_kind(i), d))
                .collect(),
        })
    }

    /// Gaussian weights with standard deviation `1/√fan_in`, zero biases.
    pub fn random<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        let mut enc = Self::zeros(config)?;
        let d = config.width;
        let sd = 1.0 / (d as f64).sqrt();
        enc.patch_w = Tensor::random_normal(&[config.patch_dim(), d], 1.0 / (config.patch_dim() as f64).sqrt(), rng);
        enc.pos = Tensor::random_normal(&[config.tokens(), d], 0.1, rng);
        for b in &mut enc.blocks {
            b.wq = Tensor::random_normal(&[d, d], sd, rng);
            b.wk = Tensor::random_normal(&[d, d], sd, rng);
            b.wv = Tensor::random_normal(&[d, d], sd, rng);
            b.wo = Tensor::random_normal(&[d, d], sd, rng);
            b.ffn.w1 = Tensor::random_normal(&[d, 2 * d], sd, rng);
            b.ffn.w2 = Tensor::random_normal(&[2 * d, d], 1.0 / ((2 * d) as f64).sqrt(), rng);
        }
        Ok(enc)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config).expect("validated config")
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Parameter tensors in canonical order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.patch_w, &self.patch_b, &self.pos];
        for b in &self.blocks {
            v.extend([&b.wq, &b.wk, &b.wv, &b.wo]);
            v.extend(b.ffn.tensors());
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.patch_w, &mut self.patch_b, &mut self.pos];
        for b in &mut self.blocks {
            v.extend([&mut b.wq, &mut b.wk, &mut b.wv, &mut b.wo]);
            v.extend(b.ffn.tensors_mut());
        }
        v
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Cuts a `D×H×W` volume into `patch³` cubes, one row per token.
    pub fn patchify(&self, volume: &Tensor) -> Result<Tensor> {
        let c = &self.config;
        if volume.shape() != c.volume {
            return Err(dim_err!(
                "volume shape {:?} != configured {:?}",
                volume.shape(),
                c.volume
            ));
        }
        let [_, h, w] = c.volume;
        let p = c.patch;
        let (ny, nx) = (h / p, w / p);
        let mut out = Tensor::zeros(&[c.tokens(), c.patch_dim()]);
        let od = out.data_mut();
        let vd = volume.data();
        for t in 0..c.slices() {
            for y in 0..ny {
                for x in 0..nx {
                    let token = (t * ny + y) * nx + x;
                    let mut col = 0;
                    for dz in 0..p {
                        for dy in 0..p {
                            for dx in 0..p {
                                let (zz, yy, xx) = (t * p + dz, y * p + dy, x * p + dx);
                                od[token * c.patch_dim() + col] = vd[(zz * h + yy) * w + xx];
                                col += 1;
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn forward_trace(&self, volume: &Tensor) -> Result<EncoderTrace> {
        let c = &self.config;
        let patches = self.patchify(volume)?;
        let mut x = patches.matmul(&self.patch_w)?;
        add_row_bias(&mut x, &self.patch_b);
        x.axpy(1.0, &self.pos)?;

        let mut taps = Vec::with_capacity(self.blocks.len());
        let mut caches = Vec::with_capacity(self.blocks.len());
        for (index, b) in self.blocks.iter().enumerate() {
            let mask = c.mask(b.kind);
            let (ln1, rstd1) = layer_norm(&x)?;
            let q = ln1.matmul(&b.wq)?;
            let k = ln1.matmul(&b.wk)?;
            let v = ln1.matmul(&b.wv)?;
            let (scores, out) = attend(&q, &k, &v, mask)?;
            let mut h = out.matmul(&b.wo)?;
            h.axpy(1.0, &x)?;
            let (ln2, rstd2) = layer_norm(&h)?;
            let (f, ffn) = b.ffn.forward(&ln2)?;
            let mut next = h.clone();
            next.axpy(1.0, &f)?;

            taps.push(BlockTaps {
                kind: b.kind,
                index,
                mask,
                q,
                k,
                v,
                scores,
                out,
            });
            caches.push(BlockCache {
                x_in: x,
                ln1,
                rstd1,
                ln2,
                rstd2,
                ffn,
            });
            x = next;
        }
        Ok(EncoderTrace {
            features: x,
            taps,
            patches,
            caches,
        })
    }

    /// Final token features and one tap record per block.
    pub fn forward(&self, volume: &Tensor) -> Result<(Tensor, Vec<BlockTaps>)> {
        let t = self.forward_trace(volume)?;
        Ok((t.features, t.taps))
    }

    /// Parameter gradients for upstream `dfeatures` plus per-block tap gradients.
    pub fn backward(
        &self,
        trace: &EncoderTrace,
        dfeatures: &Tensor,
        tap_grads: &[TapGrads],
    ) -> Result<TinyEncoder> {
        if !tap_grads.is_empty() && tap_grads.len() != self.blocks.len() {
            return Err(Error::Structure(format!(
                "{} tap gradients for {} blocks",
                tap_grads.len(),
                self.blocks.len()
            )));
        }
        if dfeatures.shape() != trace.features.shape() {
            return Err(dim_err!("feature gradient shape {:?}", dfeatures.shape()));
        }
        let mut grads = self.zeros_like();
        let mut dx = dfeatures.clone();
        for i in (0..self.blocks.len()).rev() {
            let b = &self.blocks[i];
            let cache = &trace.caches[i];
            let tap = &trace.taps[i];
            let extra = tap_grads.get(i);
            let g = &mut grads.blocks[i];

            // x_out = h + ffn(ln2(h))
            let dln2 = b.ffn.backward(&cache.ln2, &cache.ffn, &dx, &mut g.ffn)?;
            let mut dh = dx;
            dh.axpy(1.0, &layer_norm_backward(&cache.ln2, &cache.rstd2, &dln2)?)?;

            // h = x_in + out·wo
            g.wo.axpy(1.0, &tap.out.t_matmul(&dh)?)?;
            let mut dout = dh.matmul_t(&b.wo)?;
            if let Some(t) = extra.and_then(|e| e.out.as_ref()) {
                dout.axpy(1.0, t)?;
            }
            let ag = attend_backward(
                &tap.q,
                &tap.k,
                &tap.v,
                &tap.scores,
                &dout,
                extra.and_then(|e| e.scores.as_ref()),
            )?;
            let mut dq = ag.q;
            if let Some(t) = extra.and_then(|e| e.q.as_ref()) {
                dq.axpy(1.0, t)?;
            }
            g.wq.axpy(1.0, &cache.ln1.t_matmul(&dq)?)?;
            g.wk.axpy(1.0, &cache.ln1.t_matmul(&ag.k)?)?;
            g.wv.axpy(1.0, &cache.ln1.t_matmul(&ag.v)?)?;
            let mut dln1 = dq.matmul_t(&b.wq)?;
            dln1.axpy(1.0, &ag.k.matmul_t(&b.wk)?)?;
            dln1.axpy(1.0, &ag.v.matmul_t(&b.wv)?)?;

            dx = dh;
            dx.axpy(1.0, &layer_norm_backward(&cache.ln1, &cache.rstd1, &dln1)?)?;
            debug_assert_eq!(dx.shape(), cache.x_in.shape());
        }
        grads.patch_w = trace.patches.t_matmul(&dx)?;
        grads.patch_b = column_sums(&dx);
        grads.pos = dx;
        Ok(grads)
    }

    pub fn encode(&self) -> Vec<u8> {
        let c = &self.config;
        let mut w = ContainerWriter::new(ENCODER_MAGIC);
        for v in [
            c.volume[0],
            c.volume[1],
            c.volume[2],
            c.patch,
            c.width,
            c.n_spatial,
            c.n_temporal,
        ] {
            w.put_usize(v);
        }
        for t in self.tensors() {
            w.put_reals(t.data());
        }
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ContainerReader::open(bytes, ENCODER_MAGIC)?;
        let mut ints = [0usize; 7];
        for v in &mut ints {
            *v = r.usize()?;
        }
        let config = EncoderConfig {
            volume: [ints[0], ints[1], ints[2]],
            patch: ints[3],
            width: ints[4],
            n_spatial: ints[5],
            n_temporal: ints[6],
        };
        let mut enc = Self::zeros(config)?;
        for t in enc.tensors_mut() {
            let shape = t.shape().to_vec();
            *t = r.tensor(&shape)?;
        }
        r.finish()?;
        Ok(enc)
    }
}

pub fn encoder_forward(model: &TinyEncoder, volume: &Tensor) -> Result<(Tensor, Vec<BlockTaps>)> {
    model.forward(volume)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_grad, max_rel_error};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn small_config() -> EncoderConfig {
        EncoderConfig {
            volume: [4, 4, 4],
            patch: 2,
            width: 6,
            n_spatial: 1,
            n_temporal: 1,
        }
    }

    #[test]
    fn scores_examples() {
        let q = Tensor::zeros(&[3, 2]);
        let k = Tensor::random_normal(&[3, 2], 1.0, &mut rng(1));
        let s = attention_scores(&q, &k, false).unwrap();
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let one = Tensor::from_rows(&[vec![0.3, -1.0]]).unwrap();
        assert_eq!(attention_scores(&one, &one, false).unwrap().data(), &[1.0]);

        let e = Tensor::eye(2);
        let s = attention_scores(&e, &e, false).unwrap();
        let hi = (0.5f64.sqrt()).exp() / ((0.5f64.sqrt()).exp() + 1.0);
        assert!((s.at2(0, 0) - hi).abs() < 1e-12);
        assert!((s.at2(0, 0) - 0.6698).abs() < 1e-4);
        assert!((s.at2(1, 0) - (1.0 - hi)).abs() < 1e-12);
        assert!(attention_scores(&e, &Tensor::zeros(&[2, 3]), false).is_err());
    }

    #[test]
    fn causal_scores_zero_above_diagonal() {
        let q = Tensor::random_normal(&[5, 3], 1.0, &mut rng(2));
        let k = Tensor::random_normal(&[5, 3], 1.0, &mut rng(3));
        let s = attention_scores(&q, &k, true).unwrap();
        for i in 0..5 {
            for j in i + 1..5 {
                assert!(s.at2(i, j).abs() <= 1e-15);
            }
            assert!((s.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn self_attention_examples() {
        let mut r = rng(4);
        let q = Tensor::random_normal(&[4, 3], 1.0, &mut r);
        let k = Tensor::random_normal(&[4, 3], 1.0, &mut r);
        let row = vec![1.0, -2.0, 0.5];
        let v = Tensor::from_rows(&vec![row.clone(); 4]).unwrap();
        let out = self_attention(&q, &k, &v).unwrap();
        for i in 0..4 {
            for (a, b) in out.row(i).iter().zip(&row) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let v1 = Tensor::from_rows(&[vec![2.0, 3.0, 4.0]]).unwrap();
        let q1 = Tensor::from_rows(&[vec![1.0, 1.0, 1.0]]).unwrap();
        assert_eq!(self_attention(&q1, &q1, &v1).unwrap(), v1);

        let v = Tensor::random_normal(&[4, 3], 1.0, &mut r);
        let oracle = attention_scores(&q, &k, false).unwrap().matmul(&v).unwrap();
        assert!(self_attention(&q, &k, &v).unwrap().max_abs_diff(&oracle).unwrap() < 1e-15);
    }

    #[test]
    fn cross_attention_examples() {
        let mut r = rng(5);
        let q = Tensor::random_normal(&[4, 3], 1.0, &mut r);
        let k = Tensor::random_normal(&[4, 3], 1.0, &mut r);
        let v = Tensor::random_normal(&[4, 3], 1.0, &mut r);
        assert_eq!(cross_attention(&q, &k, &v).unwrap(), self_attention(&q, &k, &v).unwrap());

        let k_same = Tensor::from_rows(&vec![vec![0.2, -0.1, 0.4]; 4]).unwrap();
        let out = cross_attention(&q, &k_same, &v).unwrap();
        let mean: Vec<f64> = (0..3).map(|c| (0..4).map(|i| v.at2(i, c)).sum::<f64>() / 4.0).collect();
        for i in 0..4 {
            for (a, b) in out.row(i).iter().zip(&mean) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_backward_matches_finite_differences() {
        for seed in 0..20 {
            let mut r = rng(100 + seed);
            let n = 2 + (seed as usize % 5);
            let q = Tensor::random_normal(&[n, 4], 1.0, &mut r);
            let k = Tensor::random_normal(&[n, 4], 1.0, &mut r);
            let v = Tensor::random_normal(&[n, 4], 1.0, &mut r);
            let wout = Tensor::random_normal(&[n, 4], 1.0, &mut r);
            let wsc = Tensor::random_normal(&[n, n], 1.0, &mut r);
            let mask = if seed % 2 == 0 { AttnMask::Full } else { AttnMask::Causal };
            let loss = |q: &Tensor, k: &Tensor, v: &Tensor| -> Result<f64> {
                let (s, o) = attend(q, k, v, mask)?;
                Ok(o.dot(&wout)? + s.dot(&wsc)?)
            };
            let (s, _) = attend(&q, &k, &v, mask).unwrap();
            let g = attend_backward(&q, &k, &v, &s, &wout, Some(&wsc)).unwrap();
            let gq = finite_diff_grad(|p| loss(p, &k, &v), &q, 1e-5).unwrap();
            let gk = finite_diff_grad(|p| loss(&q, p, &v), &k, 1e-5).unwrap();
            let gv = finite_diff_grad(|p| loss(&q, &k, p), &v, 1e-5).unwrap();
            assert!(max_rel_error(&g.q, &gq).unwrap() < 1e-4);
            assert!(max_rel_error(&g.k, &gk).unwrap() < 1e-4);
            assert!(max_rel_error(&g.v, &gv).unwrap() < 1e-4);
        }
    }

    #[test]
    fn layer_norm_and_ffn_gradients() {
        let mut r = rng(7);
        let x = Tensor::random_normal(&[3, 5], 1.0, &mut r);
        let w = Tensor::random_normal(&[3, 5], 1.0, &mut r);
        let (y, rstd) = layer_norm(&x).unwrap();
        let g = layer_norm_backward(&y, &rstd, &w).unwrap();
        let gn = finite_diff_grad(|p| layer_norm(p)?.0.dot(&w), &x, 1e-5).unwrap();
        assert!(max_rel_error(&g, &gn).unwrap() < 1e-4);

        let ffn = FeedForward {
            w1: Tensor::random_normal(&[5, 10], 0.5, &mut r),
            b1: Tensor::random_normal(&[10], 0.5, &mut r),
            w2: Tensor::random_normal(&[10, 5], 0.5, &mut r),
            b2: Tensor::random_normal(&[5], 0.5, &mut r),
        };
        let (_, cache) = ffn.forward(&x).unwrap();
        let mut grads = FeedForward {
            w1: Tensor::zeros(&[5, 10]),
            b1: Tensor::zeros(&[10]),
            w2: Tensor::zeros(&[10, 5]),
            b2: Tensor::zeros(&[5]),
        };
        let dx = ffn.backward(&x, &cache, &w, &mut grads).unwrap();
        let gx = finite_diff_grad(|p| ffn.forward(p)?.0.dot(&w), &x, 1e-5).unwrap();
        assert!(max_rel_error(&dx, &gx).unwrap() < 1e-4);
        let gw1 = finite_diff_grad(
            |p| {
                let mut f = ffn.clone();
                f.w1 = p.clone();
                f.forward(&x)?.0.dot(&w)
            },
            &ffn.w1,
            1e-5,
        )
        .unwrap();
        assert!(max_rel_error(&grads.w1, &gw1).unwrap() < 1e-4);
    }

    #[test]
    fn encoder_zero_weights_give_zero_features_and_uniform_scores() {
        let cfg = small_config();
        let enc = TinyEncoder::zeros(cfg).unwrap();
        let vol = Tensor::zeros(&cfg.volume);
        let (feat, taps) = enc.forward(&vol).unwrap();
        assert!(feat.data().iter().all(|&v| v == 0.0));
        let n = cfg.tokens();
        for tap in &taps {
            for i in 0..n {
                let allowed: Vec<usize> = (0..n).filter(|&j| tap.mask.allows(i, j)).collect();
                for j in 0..n {
                    let expect = if allowed.contains(&j) { 1.0 / allowed.len() as f64 } else { 0.0 };
                    assert!((tap.scores.at2(i, j) - expect).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn encoder_taps_consistent_with_primitives() {
        let cfg = small_config();
        let enc = TinyEncoder::random(cfg, &mut rng(8)).unwrap();
        let vol = Tensor::random_uniform(&cfg.volume, -1.0, 1.0, &mut rng(9));
        let (feat, taps) = encoder_forward(&enc, &vol).unwrap();
        assert_eq!(feat.shape(), &[8, 6]);
        assert_eq!(taps.len(), 2);
        assert_eq!(taps[0].kind, BlockKind::Spatial);
        assert_eq!(taps[1].kind, BlockKind::Temporal);
        for tap in &taps {
            for i in 0..8 {
                assert!((tap.scores.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-10);
                for j in 0..8 {
                    if !tap.mask.allows(i, j) {
                        assert!(tap.scores.at2(i, j).abs() <= 1e-15);
                    }
                }
            }
            let recomputed = tap.scores.matmul(&tap.v).unwrap();
            assert!(recomputed.max_abs_diff(&tap.out).unwrap() < 1e-12);
            let s2 = masked_scores(&tap.q, &tap.k, tap.mask).unwrap();
            assert!(s2.max_abs_diff(&tap.scores).unwrap() < 1e-15);
        }
        let (feat2, taps2) = encoder_forward(&enc, &vol).unwrap();
        assert_eq!(feat, feat2);
        assert_eq!(taps, taps2);
        assert!(enc.forward(&Tensor::zeros(&[4, 4, 3])).is_err());
    }

    #[test]
    fn encoder_backward_matches_finite_differences() {
        let cfg = small_config();
        let mut r = rng(10);
        let enc = TinyEncoder::random(cfg, &mut r).unwrap();
        let vol = Tensor::random_uniform(&cfg.volume, -1.0, 1.0, &mut r);
        let wf = Tensor::random_normal(&[8, 6], 1.0, &mut r);
        let wsc: Vec<Tensor> = (0..2).map(|_| Tensor::random_normal(&[8, 8], 1.0, &mut r)).collect();
        let wq: Vec<Tensor> = (0..2).map(|_| Tensor::random_normal(&[8, 6], 1.0, &mut r)).collect();
        let wo: Vec<Tensor> = (0..2).map(|_| Tensor::random_normal(&[8, 6], 1.0, &mut r)).collect();
        let loss = |e: &TinyEncoder| -> Result<f64> {
            let (f, taps) = e.forward(&vol)?;
            let mut s = f.dot(&wf)?;
            for (i, t) in taps.iter().enumerate() {
                s += t.scores.dot(&wsc[i])? + t.q.dot(&wq[i])? + t.out.dot(&wo[i])?;
            }
            Ok(s)
        };
        let trace = enc.forward_trace(&vol).unwrap();
        let tg: Vec<TapGrads> = (0..2)
            .map(|i| TapGrads {
                q: Some(wq[i].clone()),
                scores: Some(wsc[i].clone()),
                out: Some(wo[i].clone()),
            })
            .collect();
        let grads = enc.backward(&trace, &wf, &tg).unwrap();
        let n_tensors = enc.tensors().len();
        for idx in 0..n_tensors {
            let base = enc.tensors()[idx].clone();
            let num = finite_diff_grad(
                |p| {
                    let mut e = enc.clone();
                    *e.tensors_mut()[idx] = p.clone();
                    loss(&e)
                },
                &base,
                1e-5,
            )
            .unwrap();
            let err = max_rel_error(grads.tensors()[idx], &num).unwrap();
            assert!(err < 1e-4, "tensor {idx}: {err}");
        }
    }

    #[test]
    fn encoder_serialization_roundtrip() {
        let enc = TinyEncoder::random(small_config(), &mut rng(11)).unwrap();
        let bytes = enc.encode();
        assert_eq!(&bytes[..4], b"ENC1");
        let back = TinyEncoder::decode(&bytes).unwrap();
        assert_eq!(back, enc);
        assert_eq!(back.encode(), bytes);
    }

    #[test]
    fn config_validation() {
        let mut c = small_config();
        c.volume = [4, 4, 5];
        assert!(TinyEncoder::zeros(c).is_err());
        let mut c = small_config();
        c.n_spatial = 0;
        c.n_temporal = 0;
        assert!(TinyEncoder::zeros(c).is_err());
        assert_eq!(EncoderConfig::default().tokens(), 64);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn self_attention_permutation_equivariant(seed in 0u64..10_000, n in 2usize..7) {
            let mut r = rng(seed);
            let q = Tensor::random_normal(&[n, 3], 1.0, &mut r);
            let k = Tensor::random_normal(&[n, 3], 1.0, &mut r);
            let v = Tensor::random_normal(&[n, 3], 1.0, &mut r);
            let perm: Vec<usize> = (0..n).rev().collect();
            let permute = |t: &Tensor| Tensor::from_rows(&perm.iter().map(|&i| t.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
            let out = self_attention(&q, &k, &v).unwrap();
            let out_p = self_attention(&permute(&q), &permute(&k), &permute(&v)).unwrap();
            prop_assert!(permute(&out).max_abs_diff(&out_p).unwrap() < 1e-12);
        }
    }
}
