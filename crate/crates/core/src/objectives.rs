//! Flow-matching paths and the loss stack.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::backbone::{Cond, ForwardInput, ForwardMode, MaskMode, ModelError, ModelState};
use crate::humoe::{argmax_region, routing_loss, routing_loss_grad, Phase};
use crate::real::Real;
use crate::tokenization::{TokenRole, TokenSequence};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum LossError {
    #[error("prediction has {pred} entries but target has {target}")]
    Shape { pred: usize, target: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TSampler {
    Uniform,
    /// `sigmoid(N(mean, std^2))`.
    LogitNormal { mean: f64, std: f64 },
}

impl TSampler {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            TSampler::Uniform => rng.random::<f64>(),
            TSampler::LogitNormal { mean, std } => {
                let z: f64 = StandardNormal.sample(rng);
                1.0 / (1.0 + libm::exp(-(mean + std * z)))
            }
        }
    }
}

/// One point on the linear path `z_t = (1 - t) z0 + t z1` with target
/// velocity `v = z1 - z0`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample<T> {
    pub z0: Vec<T>,
    pub z1: Vec<T>,
    pub t: T,
    pub zt: Vec<T>,
    pub v: Vec<T>,
}

pub fn flow_sample_at<T: Real>(z1: &[T], z0: Vec<T>, t: T) -> FlowSample<T> {
    let zt = z0.iter().zip(z1).map(|(a, b)| (T::ONE - t) * *a + t * *b).collect();
    let v = z0.iter().zip(z1).map(|(a, b)| *b - *a).collect();
    FlowSample { z0, z1: z1.to_vec(), t, zt, v }
}

/// Draws `z0 ~ N(0, I)` and `t` from `sampler`.
pub fn make_flow_sample<T: Real, R: Rng + ?Sized>(z1: &[T], rng: &mut R, sampler: TSampler) -> FlowSample<T> {
    let z0 = gaussian(z1.len(), rng);
    let t = T::from_f64(sampler.sample(rng));
    flow_sample_at(z1, z0, t)
}

pub fn gaussian<T: Real, R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<T> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::from_f64(z)
        })
        .collect()
}

/// Mean squared error over all entries.
pub fn flow_loss<T: Real>(pred: &[T], target: &[T]) -> Result<T, LossError> {
    if pred.len() != target.len() {
        return Err(LossError::Shape { pred: pred.len(), target: target.len() });
    }
    if pred.is_empty() {
        return Ok(T::ZERO);
    }
    let mut s = 0.0f64;
    for (p, t) in pred.iter().zip(target) {
        let e = (*p - *t).to_f64();
        s += e * e;
    }
    Ok(T::from_f64(s / pred.len() as f64))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_h: f64,
    pub eta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_h: 1.0, eta: 1.0 }
    }
}

/// `L_r + lambda_h * L_h + eta * L_route`; the structure term is dropped in
/// single-stream mode.
pub fn total_loss(l_r: f64, l_h: f64, l_route: f64, w: LossWeights, mode: ForwardMode) -> f64 {
    let l_h = if mode == ForwardMode::RgbOnly { 0.0 } else { l_h };
    l_r + w.lambda_h * l_h + w.eta * l_route
}

/// Coefficients on `(L_r, L_h, L_route)` used when differentiating.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossCoefs {
    pub r: f64,
    pub h: f64,
    pub route: f64,
}

impl From<LossWeights> for LossCoefs {
    fn from(w: LossWeights) -> Self {
        Self { r: 1.0, h: w.lambda_h, route: w.eta }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_r: f64,
    pub l_h: f64,
    pub l_route: f64,
    pub total: f64,
    /// Correct argmax routing decisions, pooled over blocks.
    pub route_correct: usize,
    pub route_count: usize,
    /// Mask reported by the forward pass.
    pub mask: Option<MaskMode>,
}

impl LossBreakdown {
    pub fn route_accuracy(&self) -> f64 {
        if self.route_count == 0 {
            0.0
        } else {
            self.route_correct as f64 / self.route_count as f64
        }
    }
}

/// A clip with its generated tokens moved to `z_t`, plus per-row targets.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisedClip<T> {
    pub seq: TokenSequence<T>,
    /// `[n, patch_dim]`; zero on context rows.
    pub target: Vec<T>,
    pub t: T,
}

/// Noises every generated token of `clean` at one shared `t`. RGB noise is
/// drawn before structure noise, so the RGB rows do not depend on whether
/// structure tokens are present.
pub fn noise_clip<T: Real, R: Rng + ?Sized>(clean: &TokenSequence<T>, t: T, rng: &mut R) -> NoisedClip<T> {
    let pd = clean.patch_dim;
    let mut seq = clean.clone();
    let mut target = vec![T::ZERO; clean.patches.len()];
    for role in [TokenRole::RgbGen, TokenRole::HoiGen] {
        for i in clean.indices_of(role) {
            let z1 = clean.patch(i);
            let z0: Vec<T> = gaussian(pd, rng);
            let fs = flow_sample_at(z1, z0, t);
            seq.patches[i * pd..(i + 1) * pd].copy_from_slice(&fs.zt);
            target[i * pd..(i + 1) * pd].copy_from_slice(&fs.v);
        }
    }
    NoisedClip { seq, target, t }
}

/// Loss of one noised clip and, optionally, its parameter gradient.
pub fn clip_loss<T: Real>(
    model: &ModelState<T>,
    clip: &NoisedClip<T>,
    cond: Cond<'_, T>,
    mode: ForwardMode,
    coefs: LossCoefs,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<Vec<T>>), ModelError> {
    let input = ForwardInput { seq: &clip.seq, t: clip.t, cond, mode, phase: Phase::Train };
    let (pred, tape) = if want_grad {
        let (p, t) = model.forward_with_tape(&input)?;
        (p, Some(t))
    } else {
        (model.forward(&input)?, None)
    };
    let seq = &clip.seq;
    let pd = seq.patch_dim;
    let mut dvel = vec![T::ZERO; pred.velocity.len()];
    let mut terms = [0.0f64; 2];
    for (s, role) in [TokenRole::RgbGen, TokenRole::HoiGen].into_iter().enumerate() {
        let rows = seq.indices_of(role);
        if rows.is_empty() {
            continue;
        }
        let denom = (rows.len() * pd) as f64;
        let coef = if s == 0 { coefs.r } else { coefs.h };
        let g = T::from_f64(2.0 * coef / denom);
        let mut acc = 0.0f64;
        for &i in &rows {
            for c in i * pd..(i + 1) * pd {
                let e = pred.velocity[c] - clip.target[c];
                acc += e.to_f64() * e.to_f64();
                dvel[c] = g * e;
            }
        }
        terms[s] = acc / denom;
    }

    let depth = pred.route_probs.len();
    let mut l_route = 0.0;
    let mut droute = Vec::with_capacity(depth);
    let (mut correct, mut count) = (0, 0);
    for probs in &pred.route_probs {
        let (l, _) = routing_loss(probs, &seq.labels);
        l_route += l.to_f64() / depth as f64;
        droute.push(routing_loss_grad(probs, &seq.labels, T::from_f64(coefs.route / depth as f64)));
        for (p, y) in probs.chunks_exact(3).zip(&seq.labels) {
            if let Some(y) = y {
                count += 1;
                if argmax_region(p) == *y {
                    correct += 1;
                }
            }
        }
    }
    let l_h = if mode == ForwardMode::RgbOnly { 0.0 } else { terms[1] };
    let breakdown = LossBreakdown {
        l_r: terms[0],
        l_h,
        l_route,
        total: coefs.r * terms[0] + coefs.h * l_h + coefs.route * l_route,
        route_correct: correct,
        route_count: count,
        mask: Some(pred.mask),
    };
    let grads = tape.map(|tape| {
        let mut g = model.zeros_like();
        let dr = (depth > 0).then_some(droute.as_slice());
        model.backward(&tape, &dvel, dr, &mut g);
        g
    });
    Ok((breakdown, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn endpoints_and_midpoint() {
        let z1 = vec![2.0f64; 4];
        let a = flow_sample_at(&z1, vec![0.0; 4], 0.0);
        assert_eq!(a.zt, a.z0);
        let b = flow_sample_at(&z1, vec![0.3; 4], 1.0);
        assert_eq!(b.zt, z1);
        let c = flow_sample_at(&z1, vec![0.0; 4], 0.5);
        assert_eq!(c.zt, vec![1.0; 4]);
        assert_eq!(c.v, vec![2.0; 4]);
    }

    #[test]
    fn flow_loss_cases() {
        let t = [0.5f64, -1.0, 2.0];
        assert_eq!(flow_loss(&t, &t).unwrap(), 0.0);
        let p: Vec<f64> = t.iter().map(|x| x + 1.0).collect();
        assert_eq!(flow_loss(&p, &t).unwrap(), 1.0);
        assert!(matches!(flow_loss(&t[..2], &t), Err(LossError::Shape { .. })));
    }

    #[test]
    fn total_loss_is_linear() {
        let w = LossWeights::default();
        assert!((total_loss(0.5, 0.3, 0.2, w, ForwardMode::DualAsymmetric) - 1.0).abs() < 1e-12);
        let w0 = LossWeights { lambda_h: 0.0, eta: 1.0 };
        assert_eq!(total_loss(0.5, 0.3, 0.2, w0, ForwardMode::DualFull), 0.7);
        assert_eq!(total_loss(0.5, 0.3, 0.2, w, ForwardMode::RgbOnly), 0.7);
    }

    #[test]
    fn samplers_stay_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for s in [TSampler::Uniform, TSampler::LogitNormal { mean: 0.0, std: 1.0 }] {
            for _ in 0..1000 {
                let t = s.sample(&mut rng);
                assert!((0.0..=1.0).contains(&t));
            }
        }
    }
}
