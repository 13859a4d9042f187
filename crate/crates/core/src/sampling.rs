//! Euler integration of the learned velocity field with classifier-free
//! guidance.

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Cond, ForwardInput, ForwardMode, ModelError, ModelState};
use crate::blobworld::Frames;
use crate::humoe::Phase;
use crate::objectives::gaussian;
use crate::real::Real;
use crate::tokenization::{unpatchify, TokenRole, TokenSequence};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum SampleError {
    #[error("non-finite state at step {0}")]
    NonFinite(usize),
    #[error("steps must be at least 1")]
    ZeroSteps,
    #[error("sampling mode must be RgbOnly or DualAsymmetric")]
    BadMode,
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleConfig {
    pub steps: usize,
    pub cfg_scale: f64,
    pub mode: ForwardMode,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { steps: 40, cfg_scale: 5.0, mode: ForwardMode::RgbOnly, seed: 0 }
    }
}

/// Anything that predicts a velocity for every token of a sequence.
pub trait VelocityField<T> {
    fn velocity(&self, seq: &TokenSequence<T>, t: T, cond: Cond<'_, T>, mode: ForwardMode) -> Result<Vec<T>, ModelError>;
}

impl<T: Real> VelocityField<T> for ModelState<T> {
    fn velocity(&self, seq: &TokenSequence<T>, t: T, cond: Cond<'_, T>, mode: ForwardMode) -> Result<Vec<T>, ModelError> {
        let input = ForwardInput { seq, t, cond, mode, phase: Phase::Infer };
        Ok(self.forward(&input)?.velocity)
    }
}

/// `v_u + s (v_c - v_u)`.
pub fn cfg_combine<T: Real>(v_cond: &[T], v_uncond: &[T], s: f64) -> Vec<T> {
    let s = T::from_f64(s);
    v_cond.iter().zip(v_uncond).map(|(c, u)| *u + s * (*c - *u)).collect()
}

/// The unconditional branch: the condition vector is swapped for the learned
/// null vector, everything else is kept.
pub fn null_condition<T>(_cond: Cond<'_, T>) -> Cond<'_, T> {
    Cond::Null
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleOutput<T> {
    pub rgb: Frames,
    pub hoi: Option<Frames>,
    /// Final token state (context rows untouched).
    pub tokens: TokenSequence<T>,
}

/// Integrates from noise at `t = 0` to data at `t = 1`. `context` holds the
/// clip's context tokens; its generated rows are overwritten by noise. The
/// structure stream is generated only in dual mode.
pub fn euler_integrate<T: Real, F: VelocityField<T>>(
    field: &F,
    context: &TokenSequence<T>,
    cond: &[T],
    frames: (usize, usize, usize),
    patch: usize,
    scfg: &SampleConfig,
) -> Result<SampleOutput<T>, SampleError> {
    if scfg.steps == 0 {
        return Err(SampleError::ZeroSteps);
    }
    let mut seq = match scfg.mode {
        ForwardMode::RgbOnly => context.rgb_only(),
        ForwardMode::DualAsymmetric => context.clone(),
        ForwardMode::DualFull => return Err(SampleError::BadMode),
    };
    let pd = seq.patch_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(scfg.seed);
    let roles = [TokenRole::RgbGen, TokenRole::HoiGen];
    let rows: Vec<Vec<usize>> = roles.iter().map(|r| seq.indices_of(*r)).collect();
    // RGB noise first so both modes start from the same RGB state.
    let n_gen = context.indices_of(TokenRole::RgbGen).len();
    let noise_rgb: Vec<T> = gaussian(n_gen * pd, &mut rng);
    let noise_hoi: Vec<T> = gaussian(n_gen * pd, &mut rng);
    for (k, &i) in rows[0].iter().enumerate() {
        seq.patches[i * pd..(i + 1) * pd].copy_from_slice(&noise_rgb[k * pd..(k + 1) * pd]);
    }
    for (k, &i) in rows[1].iter().enumerate() {
        seq.patches[i * pd..(i + 1) * pd].copy_from_slice(&noise_hoi[k * pd..(k + 1) * pd]);
    }

    let dt = T::from_f64(1.0 / scfg.steps as f64);
    for step in 0..scfg.steps {
        let t = T::from_f64(step as f64 / scfg.steps as f64);
        let vc = field.velocity(&seq, t, Cond::Vector(cond), scfg.mode)?;
        let v = if scfg.cfg_scale == 1.0 {
            vc
        } else {
            let vu = field.velocity(&seq, t, null_condition(Cond::Vector(cond)), scfg.mode)?;
            cfg_combine(&vc, &vu, scfg.cfg_scale)
        };
        for &i in rows[0].iter().chain(&rows[1]) {
            for c in i * pd..(i + 1) * pd {
                seq.patches[c] += dt * v[c];
            }
        }
        if seq.patches.iter().any(|x| !x.is_finite()) {
            return Err(SampleError::NonFinite(step));
        }
    }

    let (n, h, w) = frames;
    let gather = |r: &[usize]| {
        let mut out = Vec::with_capacity(r.len() * pd);
        for &i in r {
            out.extend_from_slice(seq.patch(i));
        }
        out
    };
    let rgb = unpatchify(&gather(&rows[0]), n, h, w, patch);
    let hoi = (!rows[1].is_empty()).then(|| unpatchify(&gather(&rows[1]), n, h, w, patch));
    Ok(SampleOutput { rgb, hoi, tokens: seq })
}
