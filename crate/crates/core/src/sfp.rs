//! Structured factorized projection: a dense `out_dim × in_dim` head replaced
//! by `M` square block-tensor-train blocks, one per `out_dim`-sized input chunk.
//!
//! Block `i` holds two cores, `L_i ∈ R^{d1×d2×d1×r}` and `R_i ∈ R^{r×d1×d2}`.
//! The input chunk is viewed as a `d1×d2` matrix `X` and the block output is
//!
//! ```text
//! Y[p,j] = Σ_{q,k,a} L[p,j,q,a] · R[a,q,k] · X[q,k]
//! ```
//!
//! evaluated as two contractions: `Z[a,q] = Σ_k R[a,q,k] X[q,k]`, then
//! `Y[p,j] = Σ_{q,a} L[p,j,q,a] Z[a,q]`. Block outputs are summed in
//! ascending block order.

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;

use crate::container::{ContainerReader, ContainerWriter};
use crate::error::{dim_err, Error, Result};
use crate::linalg;
use crate::tensor::Tensor;

pub const SFP_MAGIC: &[u8; 4] = b"SFP1";

/// Below this many multiply-adds per forward the blocks run sequentially.
const PAR_THRESHOLD: usize = 1 << 18;

/// The most balanced factorization `d1 · d2 = out_dim` with `d1 ≤ d2`.
pub fn factorize_out_dim(out_dim: usize) -> (usize, usize) {
    assert!(out_dim >= 1, "out_dim must be positive");
    let mut d1 = (out_dim as f64).sqrt() as usize;
    while d1 * d1 > out_dim {
        d1 -= 1;
    }
    while out_dim % d1 != 0 {
        d1 -= 1;
    }
    (d1, out_dim / d1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SfpConfig {
    pub in_dim: usize,
    pub out_dim: usize,
    pub d1: usize,
    pub d2: usize,
    pub blocks: usize,
    pub rank: usize,
}

impl SfpConfig {
    /// Config with the balanced `(d1, d2)` split and `M = in_dim / out_dim`.
    pub fn new(in_dim: usize, out_dim: usize, rank: usize) -> Result<Self> {
        if out_dim == 0 {
            return Err(Error::Config("out_dim must be positive".into()));
        }
        let (d1, d2) = factorize_out_dim(out_dim);
        Self::with_factors(in_dim, out_dim, d1, d2, rank)
    }

    pub fn with_factors(
        in_dim: usize,
        out_dim: usize,
        d1: usize,
        d2: usize,
        rank: usize,
    ) -> Result<Self> {
        if out_dim == 0 || in_dim == 0 || in_dim % out_dim != 0 {
            return Err(Error::Config(format!(
                "in_dim {in_dim} must be a positive multiple of out_dim {out_dim}"
            )));
        }
        let cfg = Self {
            in_dim,
            out_dim,
            d1,
            d2,
            blocks: in_dim / out_dim,
            rank,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d1 == 0 || self.d2 == 0 || self.d1 * self.d2 != self.out_dim {
            return Err(Error::Config(format!(
                "d1 × d2 = {} × {} does not equal out_dim {}",
                self.d1, self.d2, self.out_dim
            )));
        }
        if self.blocks == 0 || self.blocks * self.out_dim != self.in_dim {
            return Err(Error::Config(format!(
                "M × out_dim = {} × {} does not equal in_dim {}",
                self.blocks, self.out_dim, self.in_dim
            )));
        }
        if self.rank == 0 {
            return Err(Error::Config("rank must be at least 1".into()));
        }
        Ok(())
    }

    pub fn left_shape(&self) -> [usize; 4] {
        [self.d1, self.d2, self.d1, self.rank]
    }

    pub fn right_shape(&self) -> [usize; 3] {
        [self.rank, self.d1, self.d2]
    }

    fn left_len(&self) -> usize {
        self.d1 * self.d2 * self.d1 * self.rank
    }

    fn right_len(&self) -> usize {
        self.rank * self.d1 * self.d2
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SfpLayer {
    config: SfpConfig,
    left: Vec<Tensor>,
    right: Vec<Tensor>,
    bias: Option<Tensor>,
}

/// Gradients returned by [`SfpLayer::backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct SfpGrads {
    pub left: Vec<Tensor>,
    pub right: Vec<Tensor>,
    pub bias: Option<Tensor>,
    pub input: Tensor,
}

impl SfpGrads {
    pub fn zeros_for(layer: &SfpLayer) -> Self {
        Self {
            left: layer.left.iter().map(Tensor::zeros_like).collect(),
            right: layer.right.iter().map(Tensor::zeros_like).collect(),
            bias: layer.bias.as_ref().map(Tensor::zeros_like),
            input: Tensor::zeros(&[layer.config.in_dim]),
        }
    }

    /// `self += other` over the core and bias gradients.
    pub fn accumulate(&mut self, other: &SfpGrads) -> Result<()> {
        for (a, b) in self.left.iter_mut().zip(&other.left) {
            a.axpy(1.0, b)?;
        }
        for (a, b) in self.right.iter_mut().zip(&other.right) {
            a.axpy(1.0, b)?;
        }
        if let (Some(a), Some(b)) = (self.bias.as_mut(), other.bias.as_ref()) {
            a.axpy(1.0, b)?;
        }
        Ok(())
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.left
            .iter()
            .chain(&self.right)
            .chain(self.bias.as_ref())
            .collect()
    }
}

impl SfpLayer {
    pub fn zeros(config: SfpConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            left: (0..config.blocks)
                .map(|_| Tensor::zeros(&config.left_shape()))
                .collect(),
            right: (0..config.blocks)
                .map(|_| Tensor::zeros(&config.right_shape()))
                .collect(),
            bias: None,
        })
    }

    /// Scratch initialization: i.i.d. uniform in `±1/√(r·d1·d2)`.
    pub fn random<R: Rng + ?Sized>(config: SfpConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let bound = 1.0 / ((config.rank * config.d1 * config.d2) as f64).sqrt();
        let mut left = Vec::with_capacity(config.blocks);
        let mut right = Vec::with_capacity(config.blocks);
        for _ in 0..config.blocks {
            left.push(Tensor::random_uniform(&config.left_shape(), -bound, bound, rng));
            right.push(Tensor::random_uniform(&config.right_shape(), -bound, bound, rng));
        }
        Ok(Self {
            config,
            left,
            right,
            bias: None,
        })
    }

    pub fn from_cores(config: SfpConfig, left: Vec<Tensor>, right: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        if left.len() != config.blocks || right.len() != config.blocks {
            return Err(dim_err!(
                "expected {} core pairs, got {} / {}",
                config.blocks,
                left.len(),
                right.len()
            ));
        }
        for (l, r) in left.iter().zip(&right) {
            if l.shape() != config.left_shape() || r.shape() != config.right_shape() {
                return Err(dim_err!(
                    "core shapes {:?}/{:?} do not match config",
                    l.shape(),
                    r.shape()
                ));
            }
            if !l.all_finite() || !r.all_finite() {
                return Err(Error::Numeric("non-finite core entry".into()));
            }
        }
        Ok(Self {
            config,
            left,
            right,
            bias: None,
        })
    }

    pub fn with_bias(mut self, bias: Tensor) -> Result<Self> {
        if bias.shape() != [self.config.out_dim] {
            return Err(dim_err!("bias shape {:?}", bias.shape()));
        }
        self.bias = Some(bias);
        Ok(self)
    }

    pub fn config(&self) -> &SfpConfig {
        &self.config
    }

    pub fn left(&self) -> &[Tensor] {
        &self.left
    }

    pub fn right(&self) -> &[Tensor] {
        &self.right
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    /// Number of stored reals, bias included.
    pub fn stored_len(&self) -> usize {
        self.left.iter().chain(&self.right).map(Tensor::len).sum::<usize>()
            + self.bias.as_ref().map_or(0, Tensor::len)
    }

    /// Parameter tensors in a fixed order: all left cores, all right cores, bias.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.left
            .iter_mut()
            .chain(self.right.iter_mut())
            .chain(self.bias.as_mut())
            .collect()
    }

    /// `Z[a,q] = Σ_k R[a,q,k] X[q,k]`, stored `q`-major as `Zt[q*r + a]`.
    fn stage_right(&self, block: usize, chunk: &[f64]) -> Vec<f64> {
        let SfpConfig { d1, d2, rank, .. } = self.config;
        let r = self.right[block].data();
        let mut zt = vec![0.0; d1 * rank];
        for a in 0..rank {
            for q in 0..d1 {
                let rrow = &r[(a * d1 + q) * d2..(a * d1 + q + 1) * d2];
                let xrow = &chunk[q * d2..(q + 1) * d2];
                zt[q * rank + a] = rrow.iter().zip(xrow).map(|(u, v)| u * v).sum();
            }
        }
        zt
    }

    fn block_output(&self, block: usize, chunk: &[f64]) -> Vec<f64> {
        let SfpConfig { out_dim, d1, rank, .. } = self.config;
        let zt = self.stage_right(block, chunk);
        let l = self.left[block].data();
        let span = d1 * rank;
        (0..out_dim)
            .map(|pj| {
                l[pj * span..(pj + 1) * span]
                    .iter()
                    .zip(&zt)
                    .map(|(u, v)| u * v)
                    .sum()
            })
            .collect()
    }

    fn forward_slice(&self, x: &[f64]) -> Vec<f64> {
        let SfpConfig {
            out_dim, blocks, ..
        } = self.config;
        let chunk = |i: usize| &x[i * out_dim..(i + 1) * out_dim];
        let work = self.config.left_len() + self.config.right_len();
        let parts: Vec<Vec<f64>> = if blocks * work >= PAR_THRESHOLD {
            (0..blocks)
                .into_par_iter()
                .map(|i| self.block_output(i, chunk(i)))
                .collect()
        } else {
            (0..blocks).map(|i| self.block_output(i, chunk(i))).collect()
        };
        let mut y = vec![0.0; out_dim];
        for part in &parts {
            for (acc, v) in y.iter_mut().zip(part) {
                *acc += v;
            }
        }
        if let Some(b) = &self.bias {
            for (acc, v) in y.iter_mut().zip(b.data()) {
                *acc += v;
            }
        }
        y
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.len() != self.config.in_dim {
            return Err(dim_err!(
                "input length {} != in_dim {}",
                x.len(),
                self.config.in_dim
            ));
        }
        Ok(Tensor::vector(self.forward_slice(x.data())))
    }

    /// Row-wise [`forward`](Self::forward) over a `B × in_dim` batch.
    pub fn forward_batched(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n) = x.dims2()?;
        if n != self.config.in_dim {
            return Err(dim_err!("batch width {n} != in_dim {}", self.config.in_dim));
        }
        let mut out = Vec::with_capacity(b * self.config.out_dim);
        for i in 0..b {
            out.extend(self.forward_slice(x.row(i)));
        }
        Tensor::new(vec![b, self.config.out_dim], out)
    }

    /// Gradients of `⟨dy, forward(x)⟩` with respect to every core entry,
    /// the bias and the input.
    pub fn backward(&self, x: &Tensor, dy: &Tensor) -> Result<SfpGrads> {
        let SfpConfig {
            in_dim,
            out_dim,
            d1,
            d2,
            blocks,
            rank,
        } = self.config;
        if x.len() != in_dim || dy.len() != out_dim {
            return Err(dim_err!(
                "backward expects x[{in_dim}] and dy[{out_dim}], got {} and {}",
                x.len(),
                dy.len()
            ));
        }
        let dy = dy.data();
        let span = d1 * rank;
        let mut grads = SfpGrads::zeros_for(self);
        let dx = grads.input.data_mut();
        for i in 0..blocks {
            let chunk = &x.data()[i * out_dim..(i + 1) * out_dim];
            let zt = self.stage_right(i, chunk);
            let l = self.left[i].data();
            let r = self.right[i].data();

            let dl = grads.left[i].data_mut();
            let mut dzt = vec![0.0; span];
            for pj in 0..out_dim {
                let g = dy[pj];
                let lrow = &l[pj * span..(pj + 1) * span];
                let dlrow = &mut dl[pj * span..(pj + 1) * span];
                for t in 0..span {
                    dlrow[t] = g * zt[t];
                    dzt[t] += g * lrow[t];
                }
            }

            let dr = grads.right[i].data_mut();
            let dxc = &mut dx[i * out_dim..(i + 1) * out_dim];
            for a in 0..rank {
                for q in 0..d1 {
                    let g = dzt[q * rank + a];
                    let base = (a * d1 + q) * d2;
                    for k in 0..d2 {
                        dr[base + k] = g * chunk[q * d2 + k];
                        dxc[q * d2 + k] += g * r[base + k];
                    }
                }
            }
        }
        if let Some(db) = grads.bias.as_mut() {
            db.data_mut().copy_from_slice(dy);
        }
        Ok(grads)
    }

    /// Materializes the implied dense `out_dim × in_dim` matrix.
    pub fn contract_to_dense(&self) -> Tensor {
        let SfpConfig {
            in_dim,
            out_dim,
            d1,
            d2,
            blocks,
            rank,
        } = self.config;
        let mut w = Tensor::zeros(&[out_dim, in_dim]);
        let wd = w.data_mut();
        for i in 0..blocks {
            let l = self.left[i].data();
            let r = self.right[i].data();
            for pj in 0..out_dim {
                for q in 0..d1 {
                    for k in 0..d2 {
                        let mut s = 0.0;
                        for a in 0..rank {
                            s += l[(pj * d1 + q) * rank + a] * r[(a * d1 + q) * d2 + k];
                        }
                        wd[pj * in_dim + i * out_dim + q * d2 + k] = s;
                    }
                }
            }
        }
        w
    }

    pub fn encode(&self) -> Vec<u8> {
        let c = &self.config;
        let mut w = ContainerWriter::new(SFP_MAGIC);
        for v in [c.in_dim, c.out_dim, c.d1, c.d2, c.blocks, c.rank] {
            w.put_usize(v);
        }
        w.put_u64(u64::from(self.bias.is_some()));
        for t in self.left.iter().chain(&self.right).chain(self.bias.as_ref()) {
            w.put_reals(t.data());
        }
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ContainerReader::open(bytes, SFP_MAGIC)?;
        let mut ints = [0usize; 6];
        for v in &mut ints {
            *v = r.usize()?;
        }
        let [in_dim, out_dim, d1, d2, blocks, rank] = ints;
        let config = SfpConfig {
            in_dim,
            out_dim,
            d1,
            d2,
            blocks,
            rank,
        };
        config.validate()?;
        let has_bias = match r.u64()? {
            0 => false,
            1 => true,
            v => return Err(Error::Format(format!("bad bias flag {v}"))),
        };
        let left = (0..blocks)
            .map(|_| r.tensor(&config.left_shape()))
            .collect::<Result<Vec<_>>>()?;
        let right = (0..blocks)
            .map(|_| r.tensor(&config.right_shape()))
            .collect::<Result<Vec<_>>>()?;
        let bias = if has_bias {
            Some(r.tensor(&[out_dim])?)
        } else {
            None
        };
        r.finish()?;
        Ok(Self {
            config,
            left,
            right,
            bias,
        })
    }
}

/// Exact (from core shapes) and nominal (`2·r·in_dim·√out_dim`) parameter counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCount {
    pub exact: u64,
    pub nominal: u64,
}

pub fn param_count(config: &SfpConfig) -> ParamCount {
    let c = config;
    let exact = (c.blocks * c.rank * c.d1 * c.d2 * (c.d1 + 1)) as u64;
    ParamCount {
        exact,
        nominal: nominal_cost(c),
    }
}

fn nominal_cost(c: &SfpConfig) -> u64 {
    (2.0 * c.rank as f64 * c.in_dim as f64 * (c.out_dim as f64).sqrt()).round() as u64
}

pub fn dense_param_count(in_dim: usize, out_dim: usize) -> u64 {
    in_dim as u64 * out_dim as u64
}

/// Largest rank for which the nominal count does not exceed the dense one.
pub fn efficiency_bound(out_dim: usize) -> f64 {
    (out_dim as f64).sqrt() / 2.0
}

pub fn within_efficiency_bound(rank: usize, out_dim: usize) -> bool {
    rank as f64 <= efficiency_bound(out_dim)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlopEstimate {
    /// Multiplies in the two-stage contraction.
    pub two_stage: u64,
    pub nominal: u64,
    /// `nominal / (in_dim · out_dim)`
    pub relative_to_dense: f64,
}

pub fn flops_estimate(config: &SfpConfig) -> FlopEstimate {
    let c = config;
    let nominal = nominal_cost(c);
    FlopEstimate {
        two_stage: (c.blocks * c.rank * c.d1 * c.d2 * (c.d1 + 1)) as u64,
        nominal,
        relative_to_dense: nominal as f64 / dense_param_count(c.in_dim, c.out_dim) as f64,
    }
}

/// Singular values of each `out_dim × out_dim` block of `w`, descending.
pub fn block_singular_values(w: &Tensor, config: &SfpConfig) -> Result<Vec<Vec<f64>>> {
    check_dense_shape(w, config)?;
    (0..config.blocks)
        .map(|i| Ok(block_svd(w, config, i)?.1))
        .collect()
}

fn check_dense_shape(w: &Tensor, config: &SfpConfig) -> Result<()> {
    config.validate()?;
    if w.shape() != [config.out_dim, config.in_dim] {
        return Err(dim_err!(
            "dense weight shape {:?} does not match {}×{}",
            w.shape(),
            config.out_dim,
            config.in_dim
        ));
    }
    Ok(())
}

/// `(U, σ, Vᵀ)` of block `i`, singular values sorted descending.
fn block_svd(
    w: &Tensor,
    config: &SfpConfig,
    i: usize,
) -> Result<(DMatrix<f64>, Vec<f64>, DMatrix<f64>)> {
    let n = config.out_dim;
    let block = DMatrix::from_fn(n, n, |row, col| w.at2(row, i * n + col));
    linalg::svd(&block)
}

/// Initializes cores from a dense weight by per-block truncated SVD.
///
/// With `Û = U[:, :r]·√Σ` and `V̂ᵀ = √Σ·Vᵀ[:r, :]`, the right core holds
/// `V̂ᵀ` reshaped to `r×d1×d2` and the left core holds `Û[(p,j), a]` repeated
/// across its `q` axis, so each block contracts to exactly `Û·V̂ᵀ`.
pub fn svd_init(w: &Tensor, config: &SfpConfig) -> Result<SfpLayer> {
    check_dense_shape(w, config)?;
    let SfpConfig {
        out_dim, d1, rank, ..
    } = *config;
    if rank > out_dim {
        return Err(Error::Config(format!(
            "rank {rank} exceeds block size {out_dim}"
        )));
    }
    let mut left = Vec::with_capacity(config.blocks);
    let mut right = Vec::with_capacity(config.blocks);
    for i in 0..config.blocks {
        let (u, sigma, vt) = block_svd(w, config, i)?;
        let sqrt_s: Vec<f64> = sigma[..rank].iter().map(|s| s.sqrt()).collect();

        let mut l = Tensor::zeros(&config.left_shape());
        let ld = l.data_mut();
        for pj in 0..out_dim {
            for a in 0..rank {
                let v = u[(pj, a)] * sqrt_s[a];
                for q in 0..d1 {
                    ld[(pj * d1 + q) * rank + a] = v;
                }
            }
        }
        let mut r = Tensor::zeros(&config.right_shape());
        let rd = r.data_mut();
        for a in 0..rank {
            for qk in 0..out_dim {
                rd[a * out_dim + qk] = sqrt_s[a] * vt[(a, qk)];
            }
        }
        left.push(l);
        right.push(r);
    }
    SfpLayer::from_cores(*config, left, right)
}
