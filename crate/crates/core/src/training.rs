//! Two-stage trainer: full co-attention first, then the asymmetric mask.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Cond, ForwardMode, MaskMode, ModelError, ModelState};
use crate::objectives::{clip_loss, noise_clip, LossBreakdown, LossCoefs, LossWeights, TSampler};
use crate::real::Real;
use crate::tokenization::TokenSequence;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("non-finite {what} at iteration {iter}")]
    NonFinite { iter: usize, what: &'static str },
    #[error("iteration {iter}: stage {stage:?} expects mask {expected:?} but the model used {found:?}")]
    StageMask { iter: usize, stage: Stage, expected: MaskMode, found: MaskMode },
    #[error("empty batch at iteration {0}")]
    EmptyBatch(usize),
    #[error("invalid train config: {0}")]
    Config(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Stage1Full,
    Stage2Asymmetric,
}

impl Stage {
    pub fn mask_mode(self) -> MaskMode {
        match self {
            Stage::Stage1Full => MaskMode::Full,
            Stage::Stage2Asymmetric => MaskMode::Asymmetric,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Stage1Full => "stage1_full",
            Stage::Stage2Asymmetric => "stage2_asym",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub stage1_iters: usize,
    pub stage2_iters: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub batch: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub adam_eps: f64,
    pub clip_norm: f64,
    /// Probability of replacing the condition by the learned null vector.
    pub cond_dropout: f64,
    /// Train both streams; otherwise the structure stream is never built.
    pub dual_stream: bool,
    pub t_sampler: TSampler,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1_iters: 2000,
            stage2_iters: 500,
            lr: 1e-4,
            lr_min: 0.0,
            batch: 8,
            seed: 0,
            weights: LossWeights::default(),
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.01,
            adam_eps: 1e-8,
            clip_norm: 1.0,
            cond_dropout: 0.1,
            dual_stream: true,
            t_sampler: TSampler::Uniform,
        }
    }
}

impl TrainConfig {
    pub fn total_iters(&self) -> usize {
        self.stage1_iters + self.stage2_iters
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr >= 0.0) || !(self.lr_min >= 0.0) || self.lr_min > self.lr {
            return Err(TrainError::Config("need 0 <= lr_min <= lr"));
        }
        if self.batch == 0 {
            return Err(TrainError::Config("batch must be positive"));
        }
        if self.weights.lambda_h < 0.0 || self.weights.eta < 0.0 {
            return Err(TrainError::Config("loss weights must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return Err(TrainError::Config("cond_dropout must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Forward mode used during training at a given stage.
    pub fn forward_mode(&self, stage: Stage) -> ForwardMode {
        match (self.dual_stream, stage) {
            (false, _) => ForwardMode::RgbOnly,
            (true, Stage::Stage1Full) => ForwardMode::DualFull,
            (true, Stage::Stage2Asymmetric) => ForwardMode::DualAsymmetric,
        }
    }
}

pub fn stage_of(iteration: usize, cfg: &TrainConfig) -> Stage {
    if iteration < cfg.stage1_iters {
        Stage::Stage1Full
    } else {
        Stage::Stage2Asymmetric
    }
}

/// Half-cosine decay from `lr` at iteration 0 to `lr_min` at the last one.
pub fn cosine_lr(iteration: usize, cfg: &TrainConfig) -> f64 {
    let total = cfg.total_iters();
    if total == 0 {
        return cfg.lr;
    }
    let x = (iteration.min(total) as f64) / total as f64;
    cfg.lr_min + 0.5 * (cfg.lr - cfg.lr_min) * (1.0 + libm::cos(core::f64::consts::PI * x))
}

/// Adam moments with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

impl<T: Real> AdamW<T> {
    pub fn new(n: usize) -> Self {
        Self { m: alloc::vec![T::ZERO; n], v: alloc::vec![T::ZERO; n], step: 0 }
    }

    pub fn update(&mut self, params: &mut [T], grads: &[T], lr: f64, cfg: &TrainConfig) {
        self.step += 1;
        let (b1, b2) = (T::from_f64(cfg.beta1), T::from_f64(cfg.beta2));
        let c1 = 1.0 / (1.0 - libm::pow(cfg.beta1, self.step as f64));
        let c2 = 1.0 / (1.0 - libm::pow(cfg.beta2, self.step as f64));
        let (c1, c2) = (T::from_f64(c1), T::from_f64(c2));
        let lr_t = T::from_f64(lr);
        let decay = T::from_f64(1.0 - lr * cfg.weight_decay);
        let eps = T::from_f64(cfg.adam_eps);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(self.m.iter_mut()).zip(self.v.iter_mut()) {
            *m = b1 * *m + (T::ONE - b1) * *g;
            *v = b2 * *v + (T::ONE - b2) * *g * *g;
            let mhat = *m * c1;
            let vhat = *v * c2;
            *p = *p * decay - lr_t * mhat / (vhat.sqrt() + eps);
        }
    }
}

pub fn global_norm<T: Real>(g: &[T]) -> f64 {
    libm::sqrt(g.iter().map(|x| x.to_f64() * x.to_f64()).sum::<f64>())
}

/// Scales `g` in place so its global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm<T: Real>(g: &mut [T], max_norm: f64) -> f64 {
    let n = global_norm(g);
    if max_norm > 0.0 && n > max_norm {
        let s = T::from_f64(max_norm / n);
        for x in g.iter_mut() {
            *x *= s;
        }
    }
    n
}

/// A training clip: clean tokens in dual layout plus its condition vector.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample<T> {
    pub seq: TokenSequence<T>,
    pub cond: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub iter: usize,
    pub stage: Stage,
    /// Mask actually handed to the model at this step.
    pub mask: MaskMode,
    pub l_r: f64,
    pub l_h: f64,
    pub l_route: f64,
    pub total: f64,
    pub route_acc: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Per-clip RNG, a pure function of `(seed, iteration, slot)`.
pub fn clip_rng(seed: u64, iteration: usize, slot: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((iteration as u64) << 20) | slot as u64);
    rng
}

/// Pool indices drawn for one step, a pure function of `(seed, iteration)`.
pub fn batch_indices(cfg: &TrainConfig, iteration: usize, pool: usize) -> Vec<usize> {
    let mut rng = clip_rng(cfg.seed, iteration, (1 << 20) - 1);
    (0..cfg.batch).map(|_| rng.random_range(0..pool.max(1))).collect()
}

/// Loss and gradient of one clip at one iteration.
pub fn clip_grad<T: Real>(
    model: &ModelState<T>,
    ex: &TrainExample<T>,
    cfg: &TrainConfig,
    iteration: usize,
    slot: usize,
) -> Result<(LossBreakdown, Vec<T>), TrainError> {
    let mut rng = clip_rng(cfg.seed, iteration, slot);
    let mode = cfg.forward_mode(stage_of(iteration, cfg));
    let drop = rng.random::<f64>() < cfg.cond_dropout;
    let t = T::from_f64(cfg.t_sampler.sample(&mut rng));
    let seq = if mode == ForwardMode::RgbOnly && ex.seq.has_hoi() { ex.seq.rgb_only() } else { ex.seq.clone() };
    let noised = noise_clip(&seq, t, &mut rng);
    let cond = if drop { Cond::Null } else { Cond::Vector(&ex.cond) };
    let (lb, g) = clip_loss(model, &noised, cond, mode, LossCoefs::from(cfg.weights), true)?;
    Ok((lb, g.unwrap_or_default()))
}

/// Averages per-clip results (in slot order), clips and applies one update.
pub fn apply_update<T: Real>(
    model: &mut ModelState<T>,
    opt: &mut AdamW<T>,
    per_clip: Vec<(LossBreakdown, Vec<T>)>,
    iteration: usize,
    cfg: &TrainConfig,
) -> Result<StepMetrics, TrainError> {
    let b = per_clip.len();
    if b == 0 {
        return Err(TrainError::EmptyBatch(iteration));
    }
    let mut sum = model.zeros_like();
    let mut agg = LossBreakdown::default();
    for (lb, g) in &per_clip {
        for (s, x) in sum.iter_mut().zip(g) {
            *s += *x;
        }
        agg.l_r += lb.l_r;
        agg.l_h += lb.l_h;
        agg.l_route += lb.l_route;
        agg.total += lb.total;
        agg.route_correct += lb.route_correct;
        agg.route_count += lb.route_count;
    }
    let inv = 1.0 / b as f64;
    if !agg.total.is_finite() {
        return Err(TrainError::NonFinite { iter: iteration, what: "loss" });
    }
    let scale = T::from_f64(inv);
    for s in sum.iter_mut() {
        *s *= scale;
    }
    let grad_norm = clip_global_norm(&mut sum, cfg.clip_norm);
    if !grad_norm.is_finite() {
        return Err(TrainError::NonFinite { iter: iteration, what: "gradient" });
    }
    let stage = stage_of(iteration, cfg);
    let expected = cfg.forward_mode(stage).mask_mode();
    for (lb, _) in &per_clip {
        if let Some(found) = lb.mask {
            if found != expected {
                return Err(TrainError::StageMask { iter: iteration, stage, expected, found });
            }
        }
    }
    let lr = cosine_lr(iteration, cfg);
    opt.update(&mut model.params, &sum, lr, cfg);
    Ok(StepMetrics {
        iter: iteration,
        stage,
        mask: per_clip[0].0.mask.unwrap_or(expected),
        l_r: agg.l_r * inv,
        l_h: agg.l_h * inv,
        l_route: agg.l_route * inv,
        total: agg.total * inv,
        route_acc: agg.route_accuracy(),
        lr,
        grad_norm,
    })
}

/// One sequential optimizer step over `batch`.
pub fn train_step<T: Real>(
    model: &mut ModelState<T>,
    opt: &mut AdamW<T>,
    batch: &[TrainExample<T>],
    iteration: usize,
    cfg: &TrainConfig,
) -> Result<StepMetrics, TrainError> {
    let mut per_clip = Vec::with_capacity(batch.len());
    for (slot, ex) in batch.iter().enumerate() {
        per_clip.push(clip_grad(model, ex, cfg, iteration, slot)?);
    }
    apply_update(model, opt, per_clip, iteration, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_boundaries() {
        let cfg = TrainConfig::default();
        assert_eq!(stage_of(0, &cfg), Stage::Stage1Full);
        assert_eq!(stage_of(1999, &cfg), Stage::Stage1Full);
        assert_eq!(stage_of(2000, &cfg), Stage::Stage2Asymmetric);
    }

    #[test]
    fn cosine_endpoints() {
        let cfg = TrainConfig::default();
        assert_eq!(cosine_lr(0, &cfg), 1e-4);
        assert!(cosine_lr(cfg.total_iters(), &cfg).abs() < 1e-20);
        assert!((cosine_lr(cfg.total_iters() / 2, &cfg) - 5e-5).abs() < 1e-15);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = alloc::vec![3.0f64, 4.0];
        let n = clip_global_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn adamw_zero_lr_keeps_params() {
        let cfg = TrainConfig::default();
        let mut p = alloc::vec![0.5f32, -1.0, 2.0];
        let before = p.clone();
        let mut opt = AdamW::new(3);
        opt.update(&mut p, &[1.0, -2.0, 0.1], 0.0, &cfg);
        assert_eq!(p, before);
    }

    #[test]
    fn adamw_first_step_is_signed_lr() {
        let cfg = TrainConfig { weight_decay: 0.0, ..TrainConfig::default() };
        let mut p = alloc::vec![0.0f64, 0.0];
        let mut opt = AdamW::new(2);
        opt.update(&mut p, &[0.3, -2.0], 1e-3, &cfg);
        assert!((p[0] + 1e-3).abs() < 1e-9);
        assert!((p[1] - 1e-3).abs() < 1e-9);
    }
}
