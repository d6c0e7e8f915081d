//! Cross-fidelity distillation and contrastive alignment loops.
//!
//! Distillation: a frozen teacher sees clean volumes, a student with the same
//! architecture sees degraded ones and is trained under one of five
//! objectives. Contrastive alignment: a frozen encoder feeds a factorized
//! projection that is aligned with projected report embeddings.
//!
//! History row `e` is an evaluation after `e` epochs of updates, so row 0 is
//! the untrained state. Per-sample gradients are computed in parallel and
//! summed in sample order, which keeps every run bit-reproducible.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{BlockTaps, EncoderConfig, TapGrads, TinyEncoder};
use crate::data::{gen_dataset, text_embed, VolumePair, TEXT_DIM};
use crate::error::{Error, Result};
use crate::fast::{
    grams, loss_asp_against, loss_daf, loss_feature_kd, loss_feature_kd_with_grad,
    loss_total_with_grad_cached, AspNorm, FastWeights,
};
use crate::metrics::{EmbeddingRecord, Split};
use crate::optim::{cosine_lr, mup_scale_lr, AdamWConfig, OptimState};
use crate::sfp::{flops_estimate, param_count, SfpConfig, SfpGrads, SfpLayer};
use crate::siglip::{align_step, pair_similarity, pairwise_logits, siglip_loss_with, ContrastiveBatch, LossNorm};
use crate::tensor::{mse, mse_grad_wrt_second, Tensor};

/// Reference learning rate for the five-way ablation.
pub const ABLATION_LR: f64 = 1e-5;
/// Reference learning rate for full-scale distillation and alignment.
pub const DEFAULT_LR: f64 = 5e-5;
pub const ETA_MIN: f64 = 1e-6;
/// Encoder width the reference learning rates apply to.
pub const REFERENCE_WIDTH: usize = 512;

/// Rescales a learning rate given at [`REFERENCE_WIDTH`] to `width` by the
/// μP hidden-width rule `lr · 512 / width`.
pub fn width_scaled_lr(lr: f64, width: usize) -> f64 {
    lr * REFERENCE_WIDTH as f64 / width.max(1) as f64
}

/// Seed offset of the held-out evaluation set.
const EVAL_SEED_OFFSET: u64 = 1_000_003;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    NaiveKd,
    FeatureKd,
    FastNoAsp,
    FastNoDaf,
    FastFull,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::NaiveKd,
        Strategy::FeatureKd,
        Strategy::FastNoAsp,
        Strategy::FastNoDaf,
        Strategy::FastFull,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::NaiveKd => "naive_kd",
            Self::FeatureKd => "feature_kd",
            Self::FastNoAsp => "fast_no_asp",
            Self::FastNoDaf => "fast_no_daf",
            Self::FastFull => "fast_full",
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub strategy: Strategy,
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub eta_min: f64,
    pub weight_decay: f64,
    pub weights: FastWeights,
    pub asp_norm: AspNorm,
    pub n_volumes: usize,
    pub n_labels: usize,
    /// Student sees degraded volumes when set, clean ones otherwise.
    pub degrade_student: bool,
    /// Student starts from the teacher's weights instead of a fresh draw.
    pub student_from_teacher: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::FastFull,
            seed: 0,
            encoder: EncoderConfig::default(),
            epochs: 20,
            batch_size: 4,
            base_lr: width_scaled_lr(DEFAULT_LR, EncoderConfig::default().width),
            eta_min: ETA_MIN,
            weight_decay: 0.01,
            weights: FastWeights::default(),
            asp_norm: AspNorm::default(),
            n_volumes: 50,
            n_labels: 4,
            degrade_student: true,
            student_from_teacher: false,
        }
    }
}

impl RunConfig {
    /// Five-way ablation preset: 50 volumes, 50 epochs, ablation learning rate.
    pub fn ablation(strategy: Strategy, seed: u64) -> Self {
        let encoder = EncoderConfig::default();
        Self {
            strategy,
            seed,
            encoder,
            epochs: 50,
            n_volumes: 50,
            base_lr: width_scaled_lr(ABLATION_LR, encoder.width),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.weights.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if self.n_volumes == 0 {
            return Err(Error::Config("n_volumes must be ≥ 1".into()));
        }
        if !(self.base_lr >= 0.0 && self.eta_min >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Config("learning rates and weight decay must be ≥ 0".into()));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.n_volumes.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self) -> usize {
        self.steps_per_epoch() * self.epochs
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            ..Default::default()
        }
    }
}

/// Schedule value for `step`, flat at `base` when there are no steps at all.
fn scheduled_lr(step: usize, total: usize, base: f64, min: f64) -> Result<f64> {
    if total == 0 {
        Ok(base)
    } else {
        cosine_lr(step as u64, total as u64, base, min)
    }
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0xa076_1d64_78bd_642f));
    idx.shuffle(&mut rng);
    idx
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillRow {
    pub epoch: usize,
    pub strategy: Strategy,
    pub lr: f64,
    /// Objective optimized by the strategy, averaged over training pairs.
    pub loss: f64,
    pub asp: f64,
    pub daf: f64,
    pub fr: f64,
    /// Final-feature MSE against the teacher on held-out pairs.
    pub end_mse: f64,
}

#[derive(Debug, Clone)]
pub struct DistillOutcome {
    pub history: Vec<DistillRow>,
    pub student: TinyEncoder,
    pub teacher: TinyEncoder,
}

struct TeacherView {
    features: Tensor,
    taps: Vec<BlockTaps>,
    grams: Vec<Tensor>,
}

fn student_input(cfg: &RunConfig, p: &VolumePair) -> Tensor {
    if cfg.degrade_student {
        p.degraded.clone()
    } else {
        p.clean.clone()
    }
}

/// Objective value, tap gradients and feature gradient for one sample.
fn strategy_loss(
    cfg: &RunConfig,
    t: &TeacherView,
    taps_s: &[BlockTaps],
    feat_s: &Tensor,
) -> Result<(f64, Vec<TapGrads>, Tensor)> {
    let w = cfg.weights;
    match cfg.strategy {
        Strategy::NaiveKd => {
            let fr = mse(&t.features, feat_s)?;
            let d = mse_grad_wrt_second(&t.features, feat_s)?.scale(w.gamma);
            Ok((w.gamma * fr, Vec::new(), d))
        }
        Strategy::FeatureKd => {
            let (fkd, g) = loss_feature_kd_with_grad(&t.taps, taps_s)?;
            let fr = mse(&t.features, feat_s)?;
            let d = mse_grad_wrt_second(&t.features, feat_s)?.scale(w.gamma);
            let taps = g
                .into_iter()
                .map(|o| TapGrads {
                    out: Some(o.scale(w.beta)),
                    ..Default::default()
                })
                .collect();
            Ok((w.beta * fkd + w.gamma * fr, taps, d))
        }
        Strategy::FastNoAsp | Strategy::FastNoDaf | Strategy::FastFull => {
            let mut ww = w;
            if cfg.strategy == Strategy::FastNoAsp {
                ww.alpha = 0.0;
            }
            if cfg.strategy == Strategy::FastNoDaf {
                ww.beta = 0.0;
            }
            let (l, taps, d) =
                loss_total_with_grad_cached(&t.taps, &t.grams, taps_s, &t.features, feat_s, &ww, cfg.asp_norm)?;
            Ok((l.total, taps, d))
        }
    }
}

fn evaluate_distill(
    cfg: &RunConfig,
    student: &TinyEncoder,
    train: &[VolumePair],
    teacher_train: &[TeacherView],
    eval: &[VolumePair],
    teacher_eval: &[TeacherView],
    epoch: usize,
    lr: f64,
) -> Result<DistillRow> {
    let per_sample: Vec<[f64; 4]> = train
        .par_iter()
        .zip(teacher_train)
        .map(|(p, t)| {
            let (feat, taps) = student.forward(&student_input(cfg, p))?;
            let asp = loss_asp_against(&t.grams, &taps, cfg.asp_norm)?;
            let daf = loss_daf(&t.taps, &taps)?;
            let fr = mse(&t.features, &feat)?;
            let w = cfg.weights;
            let obj = match cfg.strategy {
                Strategy::NaiveKd => w.gamma * fr,
                Strategy::FeatureKd => w.beta * loss_feature_kd(&t.taps, &taps)? + w.gamma * fr,
                Strategy::FastNoAsp => w.beta * daf + w.gamma * fr,
                Strategy::FastNoDaf => w.alpha * asp + w.gamma * fr,
                Strategy::FastFull => w.alpha * asp + w.beta * daf + w.gamma * fr,
            };
            Ok([obj, asp, daf, fr])
        })
        .collect::<Result<_>>()?;
    let end: Vec<f64> = eval
        .par_iter()
        .zip(teacher_eval)
        .map(|(p, t)| mse(&t.features, &student.forward(&student_input(cfg, p))?.0))
        .collect::<Result<_>>()?;
    let n = train.len() as f64;
    let mean = |k: usize| per_sample.iter().map(|s| s[k]).sum::<f64>() / n;
    Ok(DistillRow {
        epoch,
        strategy: cfg.strategy,
        lr,
        loss: mean(0),
        asp: mean(1),
        daf: mean(2),
        fr: mean(3),
        end_mse: end.iter().sum::<f64>() / end.len() as f64,
    })
}

fn add_encoder_grads(acc: &mut TinyEncoder, g: &TinyEncoder) -> Result<()> {
    for (a, b) in acc.tensors_mut().into_iter().zip(g.tensors()) {
        a.axpy(1.0, b)?;
    }
    Ok(())
}

type DistillInputs = (Vec<VolumePair>, Vec<VolumePair>, TinyEncoder, TinyEncoder);

fn distill_inputs(cfg: &RunConfig) -> Result<DistillInputs> {
    cfg.validate()?;
    let shape = cfg.encoder.volume;
    let train = gen_dataset(cfg.seed, cfg.n_volumes, shape, cfg.n_labels)?;
    let eval = gen_dataset(cfg.seed.wrapping_add(EVAL_SEED_OFFSET), cfg.n_volumes, shape, cfg.n_labels)?;
    let teacher = TinyEncoder::random(cfg.encoder, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let student = if cfg.student_from_teacher {
        teacher.clone()
    } else {
        TinyEncoder::random(cfg.encoder, &mut ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1)))?
    };
    Ok((train, eval, teacher, student))
}

/// Builds the teacher, student and both datasets, then trains the student.
pub fn run_distillation(cfg: &RunConfig) -> Result<DistillOutcome> {
    let (train, eval, teacher, student) = distill_inputs(cfg)?;
    distill_with(cfg, teacher, student, &train, &eval)
}

/// Trains `student` against a frozen `teacher` on explicit data.
pub fn distill_with(
    cfg: &RunConfig,
    teacher: TinyEncoder,
    mut student: TinyEncoder,
    train: &[VolumePair],
    eval: &[VolumePair],
) -> Result<DistillOutcome> {
    cfg.validate()?;
    if train.is_empty() || eval.is_empty() {
        return Err(Error::Input("distillation needs non-empty train and eval sets".into()));
    }
    let view = |p: &VolumePair| -> Result<TeacherView> {
        let (features, taps) = teacher.forward(&p.clean)?;
        let grams = grams(&taps)?;
        Ok(TeacherView { features, taps, grams })
    };
    let t_train: Vec<TeacherView> = train.par_iter().map(view).collect::<Result<_>>()?;
    let t_eval: Vec<TeacherView> = eval.par_iter().map(view).collect::<Result<_>>()?;

    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let mut opt = OptimState::new(&student.tensors(), cfg.adamw());
    let mut history = vec![evaluate_distill(cfg, &student, train, &t_train, eval, &t_eval, 0, cfg.base_lr)?];
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let order = epoch_order(cfg.seed, epoch, train.len());
        let mut lr = cfg.base_lr;
        for batch in order.chunks(cfg.batch_size) {
            let grads: Vec<TinyEncoder> = batch
                .par_iter()
                .map(|&i| {
                    let trace = student.forward_trace(&student_input(cfg, &train[i]))?;
                    let (_, taps, dfeat) = strategy_loss(cfg, &t_train[i], &trace.taps, &trace.features)?;
                    student.backward(&trace, &dfeat, &taps)
                })
                .collect::<Result<_>>()?;
            let mut sum = student.zeros_like();
            for g in &grads {
                add_encoder_grads(&mut sum, g)?;
            }
            let inv = 1.0 / batch.len() as f64;
            for t in sum.tensors_mut() {
                *t = t.scale(inv);
            }
            lr = scheduled_lr(step, total, cfg.base_lr, cfg.eta_min)?;
            opt.update(&mut student.tensors_mut(), &sum.tensors(), lr)?;
            step += 1;
        }
        history.push(evaluate_distill(cfg, &student, train, &t_train, eval, &t_eval, epoch, lr)?);
    }
    Ok(DistillOutcome {
        history,
        student,
        teacher,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRun {
    pub strategy: Strategy,
    pub history: Vec<DistillRow>,
}

impl AblationRun {
    /// Final over initial end-representation MSE.
    pub fn end_ratio(&self) -> f64 {
        let first = self.history.first().map_or(f64::NAN, |r| r.end_mse);
        let last = self.history.last().map_or(f64::NAN, |r| r.end_mse);
        last / first
    }
}

/// Every strategy from the same data, teacher and student draw;
/// `base.strategy` is ignored.
pub fn run_ablation(base: &RunConfig) -> Result<Vec<AblationRun>> {
    let (train, eval, teacher, student) = distill_inputs(base)?;
    Strategy::ALL
        .into_iter()
        .map(|strategy| {
            let cfg = RunConfig {
                strategy,
                ..base.clone()
            };
            let out = distill_with(&cfg, teacher.clone(), student.clone(), &train, &eval)?;
            Ok(AblationRun {
                strategy,
                history: out.history,
            })
        })
        .collect()
}

pub fn ablation_summary_csv(runs: &[AblationRun]) -> String {
    let mut s = String::from("strategy,epochs,initial_end_mse,final_end_mse,ratio\n");
    for r in runs {
        let first = r.history.first().map_or(f64::NAN, |h| h.end_mse);
        let last = r.history.last().map_or(f64::NAN, |h| h.end_mse);
        s += &format!(
            "{},{},{},{},{}\n",
            r.strategy,
            r.history.len() - 1,
            first,
            last,
            r.end_ratio()
        );
    }
    s
}

pub fn distill_csv(rows: &[DistillRow]) -> String {
    let mut s = String::from("epoch,strategy,lr,loss,asp,daf,fr,end_mse\n");
    for r in rows {
        s += &format!(
            "{},{},{},{},{},{},{},{}\n",
            r.epoch, r.strategy, r.lr, r.loss, r.asp, r.daf, r.fr, r.end_mse
        );
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub eta_min: f64,
    pub weight_decay: f64,
    pub out_dim: usize,
    pub rank: usize,
    pub txt_dim: usize,
    pub n_volumes: usize,
    pub n_labels: usize,
    pub loss_norm: LossNorm,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            encoder: EncoderConfig::default(),
            epochs: 10,
            batch_size: 4,
            base_lr: DEFAULT_LR,
            eta_min: ETA_MIN,
            weight_decay: 0.01,
            out_dim: 256,
            rank: 6,
            txt_dim: TEXT_DIM,
            n_volumes: 50,
            n_labels: 4,
            loss_norm: LossNorm::Batch,
        }
    }
}

impl ContrastiveConfig {
    pub fn sfp_config(&self) -> Result<SfpConfig> {
        SfpConfig::new(self.encoder.feature_len(), self.out_dim, self.rank)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.sfp_config()?;
        if self.batch_size == 0 || self.n_volumes == 0 || self.txt_dim == 0 {
            return Err(Error::Config("batch_size, n_volumes and txt_dim must be ≥ 1".into()));
        }
        if !(self.base_lr >= 0.0 && self.eta_min >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Config("learning rates and weight decay must be ≥ 0".into()));
        }
        Ok(())
    }

    /// Learning rate for the factorized cores.
    pub fn sfp_lr(&self) -> Result<f64> {
        let c = self.sfp_config()?;
        mup_scale_lr(self.base_lr, c.in_dim as u64, c.blocks as u64, c.rank as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveRow {
    pub epoch: usize,
    pub lr: f64,
    pub sfp_lr: f64,
    /// Mean loss over the fixed in-order batches of the training set.
    pub loss: f64,
    pub matched: f64,
    pub mismatched: f64,
}

#[derive(Debug, Clone)]
pub struct ContrastiveOutcome {
    pub history: Vec<ContrastiveRow>,
    pub sfp: SfpLayer,
    pub txt_proj: Tensor,
}

/// Frozen-encoder features for every pair, flattened, one row per pair.
pub fn visual_features(encoder: &TinyEncoder, pairs: &[VolumePair]) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = pairs
        .par_iter()
        .map(|p| Ok(encoder.forward(&p.degraded)?.0.into_data()))
        .collect::<Result<_>>()?;
    Tensor::from_rows(&rows)
}

pub fn report_embeddings(pairs: &[VolumePair], dim: usize) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = pairs
        .iter()
        .map(|p| Ok(text_embed(&p.report(), dim)?.into_data()))
        .collect::<Result<_>>()?;
    Tensor::from_rows(&rows)
}

fn select_rows(t: &Tensor, idx: &[usize]) -> Result<Tensor> {
    Tensor::from_rows(&idx.iter().map(|&i| t.row(i).to_vec()).collect::<Vec<_>>())
}

fn evaluate_contrastive(
    cfg: &ContrastiveConfig,
    sfp: &SfpLayer,
    proj: &Tensor,
    vis: &Tensor,
    txt: &Tensor,
    epoch: usize,
    lr: f64,
) -> Result<ContrastiveRow> {
    let n = vis.dims2()?.0;
    let idx: Vec<usize> = (0..n).collect();
    let mut total = 0.0;
    let mut batches = 0usize;
    for chunk in idx.chunks(cfg.batch_size) {
        let yv = sfp.forward_batched(&select_rows(vis, chunk)?)?;
        let yt = select_rows(txt, chunk)?.matmul_t(proj)?;
        total += siglip_loss_with(&pairwise_logits(&ContrastiveBatch::new(yv, yt)?)?, cfg.loss_norm)?;
        batches += 1;
    }
    let all = ContrastiveBatch::new(sfp.forward_batched(vis)?, txt.matmul_t(proj)?)?;
    let (matched, mismatched) = pair_similarity(&pairwise_logits(&all)?)?;
    Ok(ContrastiveRow {
        epoch,
        lr,
        sfp_lr: lr * cfg.sfp_lr()? / cfg.base_lr.max(f64::MIN_POSITIVE),
        loss: total / batches as f64,
        matched,
        mismatched,
    })
}

/// Trains a freshly seeded projection and text map against a frozen encoder.
pub fn run_contrastive(cfg: &ContrastiveConfig, encoder: &TinyEncoder, pairs: &[VolumePair]) -> Result<ContrastiveOutcome> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Input("contrastive run needs at least one pair".into()));
    }
    if *encoder.config() != cfg.encoder {
        return Err(Error::Config("encoder does not match the configured geometry".into()));
    }
    let sfp_cfg = cfg.sfp_config()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(17));
    let mut sfp = SfpLayer::random(sfp_cfg, &mut rng)?;
    let mut proj = Tensor::random_normal(&[cfg.out_dim, cfg.txt_dim], 1.0 / (cfg.txt_dim as f64).sqrt(), &mut rng);
    let vis = visual_features(encoder, pairs)?;
    let txt = report_embeddings(pairs, cfg.txt_dim)?;

    let steps_per_epoch = pairs.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    // μP ratio applied on top of the shared schedule.
    let ratio = if cfg.base_lr > 0.0 { cfg.sfp_lr()? / cfg.base_lr } else { 0.0 };
    let mut opt_sfp = OptimState::new(&sfp.tensors_mut().into_iter().map(|t| &*t).collect::<Vec<_>>(), AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..Default::default()
    });
    let mut opt_txt = OptimState::new(&[&proj], AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..Default::default()
    });

    let mut history = vec![evaluate_contrastive(cfg, &sfp, &proj, &vis, &txt, 0, cfg.base_lr)?];
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let order = epoch_order(cfg.seed.wrapping_add(29), epoch, pairs.len());
        let mut lr = cfg.base_lr;
        for batch in order.chunks(cfg.batch_size) {
            let (_, g) = align_step(&select_rows(&vis, batch)?, &select_rows(&txt, batch)?, &sfp, &proj, cfg.loss_norm)?;
            lr = scheduled_lr(step, total, cfg.base_lr, cfg.eta_min)?;
            let SfpGrads { left, right, bias, .. } = &g.sfp;
            let gs: Vec<&Tensor> = left.iter().chain(right).chain(bias.as_ref()).collect();
            opt_sfp.update(&mut sfp.tensors_mut(), &gs, lr * ratio)?;
            opt_txt.update(&mut [&mut proj], &[&g.txt_proj], lr)?;
            step += 1;
        }
        history.push(evaluate_contrastive(cfg, &sfp, &proj, &vis, &txt, epoch, lr)?);
    }
    Ok(ContrastiveOutcome { history, sfp, txt_proj: proj })
}

/// Frozen encoder seeded as a distillation teacher with the same seed would be.
pub fn default_encoder(cfg: EncoderConfig, seed: u64) -> Result<TinyEncoder> {
    TinyEncoder::random(cfg, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Dataset generation shared by the contrastive command and its evaluation.
pub fn contrastive_data(cfg: &ContrastiveConfig) -> Result<(Vec<VolumePair>, Vec<VolumePair>)> {
    let shape = cfg.encoder.volume;
    Ok((
        gen_dataset(cfg.seed, cfg.n_volumes, shape, cfg.n_labels)?,
        gen_dataset(cfg.seed.wrapping_add(EVAL_SEED_OFFSET), cfg.n_volumes, shape, cfg.n_labels)?,
    ))
}

pub fn contrastive_csv(rows: &[ContrastiveRow]) -> String {
    let mut s = String::from("epoch,lr,sfp_lr,loss,matched,mismatched\n");
    for r in rows {
        s += &format!(
            "{},{},{},{},{},{}\n",
            r.epoch, r.lr, r.sfp_lr, r.loss, r.matched, r.mismatched
        );
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankSweepRow {
    pub rank: usize,
    pub exact_params: u64,
    pub nominal_params: u64,
    pub relative_flops: f64,
    pub final_loss: f64,
    pub matched: f64,
    pub mismatched: f64,
}

/// Repeats the contrastive run once per rank on shared data and encoder.
pub fn run_rank_sweep(base: &ContrastiveConfig, ranks: &[usize]) -> Result<Vec<RankSweepRow>> {
    base.validate()?;
    let encoder = default_encoder(base.encoder, base.seed)?;
    let (train, _) = contrastive_data(base)?;
    ranks
        .iter()
        .map(|&rank| {
            let cfg = ContrastiveConfig { rank, ..base.clone() };
            let sfp_cfg = cfg.sfp_config()?;
            let out = run_contrastive(&cfg, &encoder, &train)?;
            let last = out.history.last().expect("history holds the initial row");
            Ok(RankSweepRow {
                rank,
                exact_params: param_count(&sfp_cfg).exact,
                nominal_params: param_count(&sfp_cfg).nominal,
                relative_flops: flops_estimate(&sfp_cfg).relative_to_dense,
                final_loss: last.loss,
                matched: last.matched,
                mismatched: last.mismatched,
            })
        })
        .collect()
}

pub fn rank_sweep_csv(rows: &[RankSweepRow]) -> String {
    let mut s = String::from("rank,exact_params,nominal_params,relative_flops,final_loss,matched,mismatched\n");
    for r in rows {
        s += &format!(
            "{},{},{},{},{},{},{}\n",
            r.rank, r.exact_params, r.nominal_params, r.relative_flops, r.final_loss, r.matched, r.mismatched
        );
    }
    s
}

/// One record per (pair, label) with projected embeddings; the first half of
/// `pairs` is the validation split, the rest the test split.
pub fn embedding_records(
    outcome: &ContrastiveOutcome,
    encoder: &TinyEncoder,
    pairs: &[VolumePair],
) -> Result<Vec<EmbeddingRecord>> {
    let vis = outcome.sfp.forward_batched(&visual_features(encoder, pairs)?)?;
    let dim = outcome.txt_proj.dims2()?.1;
    let mut out = Vec::new();
    let half = pairs.len().div_ceil(2);
    for (i, p) in pairs.iter().enumerate() {
        for (k, &label) in p.labels.iter().enumerate() {
            let embed = |prompt: &str| -> Result<Tensor> {
                outcome.txt_proj.matmul(&text_embed(prompt, dim)?.reshape(&[dim, 1])?)
            };
            let tp = embed(&p.prompt_pos[k])?;
            let tn = embed(&p.prompt_neg[k])?;
            out.push(EmbeddingRecord {
                task: format!("pattern_{k}"),
                split: if i < half { Split::Validation } else { Split::Test },
                vis: vis.row(i).to_vec(),
                txt_pos: tp.into_data(),
                txt_neg: tn.into_data(),
                label,
            });
        }
    }
    Ok(out)
}
