//! Shared DiT trunk.
//!
//! Both streams run through the same attention and FFN weights. Only the
//! adaptive-norm modulation (shift, scale, gate), the patch embedding and the
//! output head differ per stream. Forward passes optionally record a tape so
//! that [`ModelState::backward`] can produce exact gradients for every
//! parameter.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::humoe::{dispatch, ExpertSet, Ffn, MoeConfig, MoeTape, Phase, RouteTape, Router};
use crate::nn::{layer_norm, layer_norm_backward, matmul_band_nt, matmul_dense_band, silu, silu_grad, Band};
use crate::params::{Init, Linear, ParamGroup, ParamTable};
use crate::real::{lane_dot, lane_sum, Real};
use crate::tokenization::{
    gather_rows, patch_embed, EmbedWeights, RegionLabel, RopeTable, TokenError, TokenRole, TokenSequence,
};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("config error: {0}")]
    Config(String),
    #[error("mode {mode:?} does not match the token roles: {reason}")]
    ModeMismatch { mode: ForwardMode, reason: &'static str },
    #[error("attention row {0} has no allowed key")]
    EmptyMaskRow(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Token(#[from] TokenError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub patch: usize,
    pub channels: usize,
    pub d_model: usize,
    pub depth: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub cond_dim: usize,
    pub t_freq_dim: usize,
    pub rope_base: f64,
    pub ln_eps: f64,
    pub moe: MoeConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            patch: 4,
            channels: 3,
            d_model: 64,
            depth: 4,
            heads: 4,
            ffn_mult: 4,
            cond_dim: 8,
            t_freq_dim: 32,
            rope_base: 100.0,
            ln_eps: 1e-6,
            moe: MoeConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(ModelError::Config(format!("d_model {} not divisible by heads {}", self.d_model, self.heads)));
        }
        crate::tokenization::rope_bands(self.d_head())?;
        if self.t_freq_dim % 2 != 0 || self.t_freq_dim == 0 {
            return Err(ModelError::Config("t_freq_dim must be even and positive".into()));
        }
        if self.depth == 0 || self.patch == 0 {
            return Err(ModelError::Config("depth and patch must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    Full,
    Asymmetric,
}

/// Boolean query-by-key mask, row-major (`allowed[i * n + j]`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnMask {
    pub n: usize,
    pub allowed: Vec<bool>,
}

impl AttnMask {
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.n + j]
    }

    pub fn is_full(&self) -> bool {
        self.allowed.iter().all(|a| *a)
    }
}

/// RGB-set queries see only RGB-set keys; structure queries see everything.
pub fn build_mask(roles: &[TokenRole], mode: MaskMode) -> AttnMask {
    let n = roles.len();
    let mut allowed = vec![true; n * n];
    if mode == MaskMode::Asymmetric {
        for (i, qi) in roles.iter().enumerate() {
            if qi.in_rgb_set() {
                for (j, kj) in roles.iter().enumerate() {
                    allowed[i * n + j] = kj.in_rgb_set();
                }
            }
        }
    }
    AttnMask { n, allowed }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardMode {
    DualFull,
    DualAsymmetric,
    RgbOnly,
}

impl ForwardMode {
    pub fn mask_mode(self) -> MaskMode {
        match self {
            ForwardMode::DualFull => MaskMode::Full,
            ForwardMode::DualAsymmetric | ForwardMode::RgbOnly => MaskMode::Asymmetric,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Cond<'a, T> {
    Vector(&'a [T]),
    /// The learned null condition used by the unconditional guidance branch.
    Null,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardInput<'a, T> {
    pub seq: &'a TokenSequence<T>,
    pub t: T,
    pub cond: Cond<'a, T>,
    pub mode: ForwardMode,
    pub phase: Phase,
}

#[derive(Clone, Debug)]
pub struct Prediction<T> {
    /// `[n, patch_dim]`; rows of context tokens are zero.
    pub velocity: Vec<T>,
    /// Per block `[n, 3]` routing probabilities (empty without experts).
    pub route_probs: Vec<Vec<T>>,
    pub dispatch: Vec<Vec<RegionLabel>>,
    /// Mask the attention layers were built with.
    pub mask: MaskMode,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockIds {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    /// Per stream: `silu(c) -> [shift1, scale1, gate1, shift2, scale2, gate2]`.
    pub mods: [Linear; 2],
    pub experts: ExpertSet,
    pub router: Option<Router>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Arch {
    pub table: ParamTable,
    pub embed: [Linear; 2],
    pub t_fc1: Linear,
    pub t_fc2: Linear,
    pub cond_proj: Linear,
    pub hoi_prompt: usize,
    pub null_cond: usize,
    pub blocks: Vec<BlockIds>,
    pub final_mod: [Linear; 2],
    pub head: [Linear; 2],
}

impl Arch {
    pub fn new(cfg: &ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let d = cfg.d_model;
        let pd = cfg.patch_dim();
        let n = |fan_in: usize| Init::Normal(1.0 / libm::sqrt(fan_in as f64));
        let mut t = ParamTable::default();
        let embed = [
            t.linear("embed.rgb", pd, d, ParamGroup::RgbStream, n(pd)),
            t.linear("embed.hoi", pd, d, ParamGroup::HoiStream, n(pd)),
        ];
        let t_fc1 = t.linear("t_embed.fc1", cfg.t_freq_dim, d, ParamGroup::Shared, n(cfg.t_freq_dim));
        let t_fc2 = t.linear("t_embed.fc2", d, d, ParamGroup::Shared, n(d));
        let cond_proj = t.linear("cond_proj", cfg.cond_dim, d, ParamGroup::Shared, n(cfg.cond_dim));
        let hoi_prompt = t.add("hoi_prompt".into(), vec![d], ParamGroup::HoiStream, Init::Normal(0.02));
        let null_cond = t.add("null_cond".into(), vec![cfg.cond_dim], ParamGroup::Shared, Init::Normal(0.02));
        let mut blocks = Vec::with_capacity(cfg.depth);
        for b in 0..cfg.depth {
            let p = format!("blocks.{b}");
            let q = t.linear(&format!("{p}.attn.q"), d, d, ParamGroup::Attention, n(d));
            let k = t.linear(&format!("{p}.attn.k"), d, d, ParamGroup::Attention, n(d));
            let v = t.linear(&format!("{p}.attn.v"), d, d, ParamGroup::Attention, n(d));
            let o = t.linear(&format!("{p}.attn.o"), d, d, ParamGroup::Attention, n(d));
            let mods = [
                t.linear(&format!("{p}.mod_rgb"), d, 6 * d, ParamGroup::RgbStream, n(d)),
                t.linear(&format!("{p}.mod_hoi"), d, 6 * d, ParamGroup::HoiStream, n(d)),
            ];
            let hidden = cfg.ffn_mult * d;
            let shared = Ffn {
                fc1: t.linear(&format!("{p}.ffn.fc1"), d, hidden, ParamGroup::Shared, n(d)),
                fc2: t.linear(&format!("{p}.ffn.fc2"), hidden, d, ParamGroup::Shared, n(hidden)),
            };
            let (light, router) = if cfg.moe.enabled {
                let eh = cfg.moe.expert_hidden;
                let mut mk = |name: &str| Ffn {
                    fc1: t.linear(&format!("{p}.experts.{name}.fc1"), d, eh, ParamGroup::Expert, n(d)),
                    fc2: t.linear(&format!("{p}.experts.{name}.fc2"), eh, d, ParamGroup::Expert, Init::Zeros),
                };
                let light = [mk("head"), mk("hand"), mk("base")];
                let rh = cfg.moe.router_hidden;
                let router = Router {
                    fc1: t.linear(&format!("{p}.router.fc1"), d, rh, ParamGroup::Router, n(d)),
                    fc2: t.linear(&format!("{p}.router.fc2"), rh, 3, ParamGroup::Router, n(rh)),
                };
                (Some(light), Some(router))
            } else {
                (None, None)
            };
            blocks.push(BlockIds { q, k, v, o, mods, experts: ExpertSet { shared, light }, router });
        }
        let final_mod = [
            t.linear("final.mod_rgb", d, 2 * d, ParamGroup::RgbStream, n(d)),
            t.linear("final.mod_hoi", d, 2 * d, ParamGroup::HoiStream, n(d)),
        ];
        let head = [
            t.linear("head.rgb", d, pd, ParamGroup::RgbStream, Init::Normal(0.02)),
            t.linear("head.hoi", d, pd, ParamGroup::HoiStream, Init::Normal(0.02)),
        ];
        Ok(Self { table: t, embed, t_fc1, t_fc2, cond_proj, hoi_prompt, null_cond, blocks, final_mod, head })
    }
}

/// All learnable parameters plus the architecture that indexes them.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<T> {
    pub cfg: ModelConfig,
    pub arch: Arch,
    pub params: Vec<T>,
}

/// Query rows per attention tile; a tile of scores stays in L2.
const TILE: usize = 64;

/// Row structure of an [`AttnMask`]. Rows whose allowed keys are exactly a
/// prefix `[0, len)` only ever touch that prefix; other rows use the boolean
/// row. Tiles never mix rows of different shape.
pub(crate) struct MaskRows {
    n: usize,
    prefix: Vec<Option<usize>>,
    allowed: Vec<bool>,
    /// `(first_row, end_row, key_len)`.
    tiles: Vec<(usize, usize, usize)>,
}

impl MaskRows {
    fn new(mask: &AttnMask) -> Result<Self, ModelError> {
        let n = mask.n;
        let mut prefix = Vec::with_capacity(n);
        for i in 0..n {
            let row = &mask.allowed[i * n..(i + 1) * n];
            let len = row.iter().position(|a| !*a).unwrap_or(n);
            if !row.iter().any(|a| *a) {
                return Err(ModelError::EmptyMaskRow(i));
            }
            prefix.push(row[len..].iter().all(|a| !*a).then_some(len));
        }
        let general = prefix.iter().any(|p| p.is_none());
        let allowed = if general { mask.allowed.clone() } else { Vec::new() };
        let mut tiles = Vec::new();
        let mut r0 = 0;
        while r0 < n {
            let key = prefix[r0];
            let mut r1 = r0 + 1;
            while r1 < n && r1 - r0 < TILE && prefix[r1] == key {
                r1 += 1;
            }
            tiles.push((r0, r1, key.unwrap_or(n)));
            r0 = r1;
        }
        Ok(Self { n, prefix, allowed, tiles })
    }

    fn row_mask(&self, i: usize) -> Option<&[bool]> {
        match self.prefix[i] {
            Some(_) => None,
            None => Some(&self.allowed[i * self.n..(i + 1) * self.n]),
        }
    }
}

/// Per head and row: softmax max and reciprocal normalizer, `[heads, n, 2]`.
pub struct AttnTape<T> {
    pub stats: Vec<T>,
}

fn lane_max<T: Real>(xs: &[T], allowed: Option<&[bool]>) -> T {
    let mut acc = [T::NEG_INFINITY; 8];
    match allowed {
        None => {
            let chunks = xs.chunks_exact(8);
            let rem = chunks.remainder();
            for c in chunks {
                for l in 0..8 {
                    acc[l] = acc[l].max(c[l]);
                }
            }
            for (l, x) in rem.iter().enumerate() {
                acc[l] = acc[l].max(*x);
            }
        }
        Some(a) => {
            for (j, (x, ok)) in xs.iter().zip(a).enumerate() {
                if *ok {
                    acc[j % 8] = acc[j % 8].max(*x);
                }
            }
        }
    }
    acc.iter().fold(T::NEG_INFINITY, |m, x| m.max(*x))
}

/// `row <- exp(row - mx)`, zero on disallowed keys.
fn shift_exp<T: Real>(row: &mut [T], allowed: Option<&[bool]>, mx: T) {
    for x in row.iter_mut() {
        *x -= mx;
    }
    T::exp_nonpos_slice(row);
    if let Some(a) = allowed {
        for (x, ok) in row.iter_mut().zip(a) {
            if !*ok {
                *x = T::ZERO;
            }
        }
    }
}

fn scale_row<T: Real>(row: &mut [T], s: T) {
    for x in row.iter_mut() {
        *x *= s;
    }
}

/// Masked multi-head attention over already-rotated `q`, `k` and `v`
/// (`[n, heads * d_head]`). Disallowed keys get exactly zero weight.
fn attention_core<T: Real>(q: &[T], k: &[T], v: &[T], heads: usize, mask: &MaskRows) -> (Vec<T>, AttnTape<T>) {
    let n = mask.n;
    let d = q.len() / n.max(1);
    let dh = d / heads;
    let scale = T::ONE / T::from_f64(dh as f64).sqrt();
    let mut ctx = vec![T::ZERO; n * d];
    let mut stats = vec![T::ZERO; heads * n * 2];
    let mut s = vec![T::ZERO; TILE * n];
    for h in 0..heads {
        let band = Band { offset: h * dh, row_stride: d };
        for &(r0, r1, kl) in &mask.tiles {
            let m = r1 - r0;
            let st = &mut s[..m * kl];
            matmul_band_nt(&q[r0 * d..], band, k, band, st, m, dh, kl, scale);
            for (ii, i) in (r0..r1).enumerate() {
                let row = &mut st[ii * kl..(ii + 1) * kl];
                let allowed = mask.row_mask(i);
                let mx = lane_max(row, allowed);
                shift_exp(row, allowed, mx);
                let inv = T::ONE / lane_sum(row);
                scale_row(row, inv);
                stats[(h * n + i) * 2] = mx;
                stats[(h * n + i) * 2 + 1] = inv;
            }
            matmul_dense_band(st, false, v, band, &mut ctx[r0 * d..], band, m, kl, dh, T::ZERO);
        }
    }
    (ctx, AttnTape { stats })
}

/// Returns `(dq, dk, dv)` for rotated `q`, `k`. Probabilities are recomputed
/// tile by tile with the forward statistics, reproducing them exactly.
#[allow(clippy::too_many_arguments)]
fn attention_core_backward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    heads: usize,
    mask: &MaskRows,
    tape: &AttnTape<T>,
    dctx: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let n = mask.n;
    let d = q.len() / n.max(1);
    let dh = d / heads;
    let scale = T::ONE / T::from_f64(dh as f64).sqrt();
    let mut dq = vec![T::ZERO; n * d];
    let mut dk = vec![T::ZERO; n * d];
    let mut dv = vec![T::ZERO; n * d];
    let mut pbuf = vec![T::ZERO; TILE * n];
    let mut dbuf = vec![T::ZERO; TILE * n];
    for h in 0..heads {
        let band = Band { offset: h * dh, row_stride: d };
        for &(r0, r1, kl) in &mask.tiles {
            let m = r1 - r0;
            let p = &mut pbuf[..m * kl];
            let ds = &mut dbuf[..m * kl];
            matmul_band_nt(&q[r0 * d..], band, k, band, p, m, dh, kl, scale);
            matmul_band_nt(&dctx[r0 * d..], band, v, band, ds, m, dh, kl, T::ONE);
            for (ii, i) in (r0..r1).enumerate() {
                let pr = &mut p[ii * kl..(ii + 1) * kl];
                let (mx, inv) = (tape.stats[(h * n + i) * 2], tape.stats[(h * n + i) * 2 + 1]);
                shift_exp(pr, mask.row_mask(i), mx);
                scale_row(pr, inv);
                let dr = &mut ds[ii * kl..(ii + 1) * kl];
                let r = lane_dot(dr, pr);
                for (g, pv) in dr.iter_mut().zip(pr.iter()) {
                    *g = *pv * (*g - r) * scale;
                }
            }
            matmul_dense_band(p, true, &dctx[r0 * d..], band, &mut dv, band, kl, m, dh, T::ONE);
            matmul_dense_band(ds, false, k, band, &mut dq[r0 * d..], band, m, kl, dh, T::ZERO);
            matmul_dense_band(ds, true, &q[r0 * d..], band, &mut dk, band, kl, m, dh, T::ONE);
        }
    }
    (dq, dk, dv)
}

/// Standalone masked attention with rotary encoding: projections `q, k, v`
/// of `x` must be supplied already computed (`[n, heads * d_head]`).
pub fn attention<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    heads: usize,
    rope: Option<&RopeTable<T>>,
    mask: &AttnMask,
) -> Result<Vec<T>, ModelError> {
    let rows = MaskRows::new(mask)?;
    let d = q.len() / mask.n.max(1);
    if q.len() != mask.n * d || k.len() != q.len() || v.len() != q.len() {
        return Err(ModelError::Shape(format!("q/k/v must be [{}, d]", mask.n)));
    }
    let (mut qr, mut kr) = (q.to_vec(), k.to_vec());
    if let Some(r) = rope {
        r.apply(&mut qr, d, false);
        r.apply(&mut kr, d, false);
    }
    Ok(attention_core(&qr, &kr, v, heads, &rows).0)
}

struct StreamIndex {
    sid: Vec<usize>,
    rows: [Vec<usize>; 2],
}

impl StreamIndex {
    fn new(roles: &[TokenRole]) -> Self {
        let sid: Vec<usize> = roles.iter().map(|r| r.stream().index()).collect();
        let rows = [
            (0..roles.len()).filter(|&i| sid[i] == 0).collect(),
            (0..roles.len()).filter(|&i| sid[i] == 1).collect(),
        ];
        Self { sid, rows }
    }
}

/// `out[i] = xhat[i] * (1 + scale[s_i]) + shift[s_i]`.
fn modulate<T: Real>(xhat: &[T], d: usize, sid: &[usize], shift: [&[T]; 2], scale: [&[T]; 2]) -> Vec<T> {
    let mut out = vec![T::ZERO; xhat.len()];
    for (i, s) in sid.iter().enumerate() {
        let (sh, sc) = (shift[*s], scale[*s]);
        for c in 0..d {
            out[i * d + c] = xhat[i * d + c] * (T::ONE + sc[c]) + sh[c];
        }
    }
    out
}

/// Backward of [`modulate`]: accumulates shift/scale grads per stream and
/// returns the gradient on `xhat`.
fn modulate_backward<T: Real>(
    xhat: &[T],
    dout: &[T],
    d: usize,
    sid: &[usize],
    scale: [&[T]; 2],
    dshift: &mut [Vec<T>; 2],
    dscale: &mut [Vec<T>; 2],
) -> Vec<T> {
    let mut dx = vec![T::ZERO; xhat.len()];
    for (i, s) in sid.iter().enumerate() {
        let sc = scale[*s];
        for c in 0..d {
            let g = dout[i * d + c];
            dshift[*s][c] += g;
            dscale[*s][c] += g * xhat[i * d + c];
            dx[i * d + c] = g * (T::ONE + sc[c]);
        }
    }
    dx
}

fn part<T>(m: &[Vec<T>; 2], d: usize, k: usize) -> [&[T]; 2] {
    [&m[0][k * d..(k + 1) * d], &m[1][k * d..(k + 1) * d]]
}

struct BlockTape<T> {
    xhat1: Vec<T>,
    rstd1: Vec<T>,
    a_in: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    attn: AttnTape<T>,
    ctx: Vec<T>,
    ao: Vec<T>,
    xhat2: Vec<T>,
    rstd2: Vec<T>,
    f_in: Vec<T>,
    route: Option<RouteTape<T>>,
    assignment: Vec<RegionLabel>,
    moe: MoeTape<T>,
    mo: Vec<T>,
    mods: [Vec<T>; 2],
}

/// Everything recorded by a forward pass that backward needs.
pub struct Tape<T> {
    n: usize,
    mask: MaskRows,
    cond: Vec<T>,
    cond_is_null: bool,
    t_feat: Vec<T>,
    t_pre: Vec<T>,
    t_act: Vec<T>,
    c: [Vec<T>; 2],
    sc: [Vec<T>; 2],
    rope: RopeTable<T>,
    streams: StreamIndex,
    blocks: Vec<BlockTape<T>>,
    xhat_f: Vec<T>,
    rstd_f: Vec<T>,
    fmods: [Vec<T>; 2],
    /// Generated rows per stream and their modulated final features.
    gen_rows: [Vec<usize>; 2],
    y_f: [Vec<T>; 2],
    patches: [Vec<T>; 2],
}

/// Sinusoidal timestep features; `t` in `[0, 1]` is scaled by 1000.
pub fn timestep_features<T: Real>(t: T, dim: usize) -> Vec<T> {
    let half = dim / 2;
    let mut out = vec![T::ZERO; dim];
    for k in 0..half {
        let f = libm::exp(-libm::log(10_000.0) * k as f64 / half as f64);
        let a = 1000.0 * t.to_f64() * f;
        out[k] = T::from_f64(libm::cos(a));
        out[half + k] = T::from_f64(libm::sin(a));
    }
    out
}

impl<T: Real> ModelState<T> {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let arch = Arch::new(cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![T::ZERO; arch.table.total];
        for spec in &arch.table.specs {
            if let Init::Normal(std) = spec.init {
                for p in &mut params[spec.range()] {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *p = T::from_f64(z * std);
                }
            }
        }
        Ok(Self { cfg: cfg.clone(), arch, params })
    }

    /// Overwrites every parameter (including zero-initialized ones) with
    /// `N(0, std^2)` noise. Used by gradient checks.
    pub fn randomize_all(&mut self, seed: u64, std: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in &mut self.params {
            let z: f64 = StandardNormal.sample(&mut rng);
            *p = T::from_f64(z * std);
        }
    }

    pub fn table(&self) -> &ParamTable {
        &self.arch.table
    }

    pub fn slice(&self, id: usize) -> &[T] {
        &self.params[self.arch.table.range(id)]
    }

    pub fn slice_mut(&mut self, id: usize) -> &mut [T] {
        let r = self.arch.table.range(id);
        &mut self.params[r]
    }

    pub fn null_cond(&self) -> &[T] {
        self.slice(self.arch.null_cond)
    }

    pub fn zeros_like(&self) -> Vec<T> {
        vec![T::ZERO; self.params.len()]
    }

    /// Converts every parameter to another precision.
    pub fn cast<U: Real>(&self) -> ModelState<U> {
        ModelState {
            cfg: self.cfg.clone(),
            arch: self.arch.clone(),
            params: self.params.iter().map(|p| U::from_f64(p.to_f64())).collect(),
        }
    }

    fn check_mode(&self, input: &ForwardInput<'_, T>) -> Result<(), ModelError> {
        let has_hoi = input.seq.has_hoi();
        match input.mode {
            ForwardMode::RgbOnly if has_hoi => {
                Err(ModelError::ModeMismatch { mode: input.mode, reason: "single-stream input contains structure tokens" })
            }
            ForwardMode::DualFull | ForwardMode::DualAsymmetric if !has_hoi => {
                Err(ModelError::ModeMismatch { mode: input.mode, reason: "dual-stream input has no structure tokens" })
            }
            _ => Ok(()),
        }?;
        let seq = input.seq;
        if seq.patch_dim != self.cfg.patch_dim() || seq.patches.len() != seq.len() * seq.patch_dim {
            return Err(ModelError::Shape(format!("patches must be [{}, {}]", seq.len(), self.cfg.patch_dim())));
        }
        if seq.coords.len() != seq.len() || seq.labels.len() != seq.len() {
            return Err(ModelError::Shape("coords/labels length differs from roles".into()));
        }
        if let Cond::Vector(c) = input.cond {
            if c.len() != self.cfg.cond_dim {
                return Err(ModelError::Shape(format!("cond must have {} entries", self.cfg.cond_dim)));
            }
        }
        Ok(())
    }

    pub fn forward(&self, input: &ForwardInput<'_, T>) -> Result<Prediction<T>, ModelError> {
        self.run(input, false).map(|(p, _)| p)
    }

    pub fn forward_with_tape(&self, input: &ForwardInput<'_, T>) -> Result<(Prediction<T>, Tape<T>), ModelError> {
        let (p, t) = self.run(input, true)?;
        Ok((p, t.expect("tape requested")))
    }

    fn run(&self, input: &ForwardInput<'_, T>, keep: bool) -> Result<(Prediction<T>, Option<Tape<T>>), ModelError> {
        self.check_mode(input)?;
        let cfg = &self.cfg;
        let a = &self.arch;
        let tb = &a.table;
        let p = &self.params;
        let seq = input.seq;
        let n = seq.len();
        let d = cfg.d_model;
        let pd = cfg.patch_dim();

        let mask = build_mask(&seq.roles, input.mode.mask_mode());
        let mm = MaskRows::new(&mask)?;
        let rope = RopeTable::new(&seq.coords, cfg.d_head(), cfg.rope_base)?;
        let streams = StreamIndex::new(&seq.roles);

        // conditioning
        let (cond, cond_is_null) = match input.cond {
            Cond::Vector(c) => (c.to_vec(), false),
            Cond::Null => (self.null_cond().to_vec(), true),
        };
        let t_feat = timestep_features(input.t, cfg.t_freq_dim);
        let t_pre = a.t_fc1.forward(tb, p, &t_feat, 1);
        let t_act: Vec<T> = t_pre.iter().map(|u| silu(*u)).collect();
        let temb = a.t_fc2.forward(tb, p, &t_act, 1);
        let cp = a.cond_proj.forward(tb, p, &cond, 1);
        let c_rgb: Vec<T> = temb.iter().zip(&cp).map(|(x, y)| *x + *y).collect();
        let prompt = self.slice(a.hoi_prompt);
        let c_hoi: Vec<T> = c_rgb.iter().zip(prompt).map(|(x, y)| *x + *y).collect();
        let sc = [
            c_rgb.iter().map(|u| silu(*u)).collect::<Vec<T>>(),
            c_hoi.iter().map(|u| silu(*u)).collect::<Vec<T>>(),
        ];

        let ew = |l: &Linear| EmbedWeights { w: l.weight(tb, p), b: l.bias(tb, p) };
        let mut x = patch_embed(&seq.patches, &seq.roles, pd, d, ew(&a.embed[0]), ew(&a.embed[1]));

        let eps = T::from_f64(cfg.ln_eps);
        let mut block_tapes = Vec::new();
        let mut route_probs = Vec::new();
        let mut dispatches = Vec::new();
        for blk in &a.blocks {
            let mods = [blk.mods[0].forward(tb, p, &sc[0], 1), blk.mods[1].forward(tb, p, &sc[1], 1)];
            let part = |k: usize| [&mods[0][k * d..(k + 1) * d], &mods[1][k * d..(k + 1) * d]];
            let (xhat1, rstd1) = layer_norm(&x, d, eps);
            let a_in = modulate(&xhat1, d, &streams.sid, part(0), part(1));
            let mut q = blk.q.forward(tb, p, &a_in, n);
            let mut k = blk.k.forward(tb, p, &a_in, n);
            let v = blk.v.forward(tb, p, &a_in, n);
            rope.apply(&mut q, d, false);
            rope.apply(&mut k, d, false);
            let (ctx, attn) = attention_core(&q, &k, &v, cfg.heads, &mm);
            let ao = blk.o.forward(tb, p, &ctx, n);
            let g1 = part(2);
            for i in 0..n {
                let g = g1[streams.sid[i]];
                for c in 0..d {
                    x[i * d + c] += g[c] * ao[i * d + c];
                }
            }
            let (xhat2, rstd2) = layer_norm(&x, d, eps);
            let f_in = modulate(&xhat2, d, &streams.sid, part(3), part(4));

            let route = blk.router.map(|r| r.route(tb, p, &f_in, n));
            let assignment = match &route {
                Some(rt) => dispatch(&rt.probs, &seq.labels, input.phase, cfg.moe.dispatch_train),
                None => vec![RegionLabel::Base; n],
            };
            let (mo, moe) = blk.experts.forward(tb, p, &f_in, n, &assignment);
            let g2 = part(5);
            for i in 0..n {
                let g = g2[streams.sid[i]];
                for c in 0..d {
                    x[i * d + c] += g[c] * mo[i * d + c];
                }
            }
            if let Some(rt) = &route {
                route_probs.push(rt.probs.clone());
            }
            dispatches.push(assignment.clone());
            if keep {
                block_tapes.push(BlockTape {
                    xhat1,
                    rstd1,
                    a_in,
                    q,
                    k,
                    v,
                    attn,
                    ctx,
                    ao,
                    xhat2,
                    rstd2,
                    f_in,
                    route,
                    assignment,
                    moe,
                    mo,
                    mods,
                });
            }
        }

        // final norm and per-stream heads on generated tokens only
        let (xhat_f, rstd_f) = layer_norm(&x, d, eps);
        let fmods = [a.final_mod[0].forward(tb, p, &sc[0], 1), a.final_mod[1].forward(tb, p, &sc[1], 1)];
        let mut velocity = vec![T::ZERO; n * pd];
        let mut gen_rows: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
        let mut y_f: [Vec<T>; 2] = [Vec::new(), Vec::new()];
        for s in 0..2 {
            let rows: Vec<usize> =
                streams.rows[s].iter().copied().filter(|&i| seq.roles[i].is_generated()).collect();
            if rows.is_empty() {
                continue;
            }
            let (shift, scale) = (&fmods[s][..d], &fmods[s][d..]);
            let mut y = gather_rows(&xhat_f, d, &rows);
            for r in y.chunks_exact_mut(d) {
                for c in 0..d {
                    r[c] = r[c] * (T::ONE + scale[c]) + shift[c];
                }
            }
            let out = a.head[s].forward(tb, p, &y, rows.len());
            for (k, &i) in rows.iter().enumerate() {
                velocity[i * pd..(i + 1) * pd].copy_from_slice(&out[k * pd..(k + 1) * pd]);
            }
            gen_rows[s] = rows;
            y_f[s] = y;
        }

        let pred = Prediction { velocity, route_probs, dispatch: dispatches, mask: input.mode.mask_mode() };
        let tape = keep.then(|| {
            let patches = [gather_rows(&seq.patches, pd, &streams.rows[0]), gather_rows(&seq.patches, pd, &streams.rows[1])];
            Tape {
                n,
                mask: mm,
                cond,
                cond_is_null,
                t_feat,
                t_pre,
                t_act,
                c: [c_rgb, c_hoi],
                sc,
                rope,
                streams,
                blocks: block_tapes,
                xhat_f,
                rstd_f,
                fmods,
                gen_rows,
                y_f,
                patches,
            }
        });
        Ok((pred, tape))
    }

    /// Accumulates into `grads` the gradient of a loss whose derivative with
    /// respect to the velocity output is `dvel` (`[n, patch_dim]`) and with
    /// respect to each block's router logits is `droute[b]` (`[n, 3]`).
    pub fn backward(&self, tape: &Tape<T>, dvel: &[T], droute: Option<&[Vec<T>]>, grads: &mut [T]) {
        let cfg = &self.cfg;
        let a = &self.arch;
        let tb = &a.table;
        let p = &self.params;
        let n = tape.n;
        let d = cfg.d_model;
        let pd = cfg.patch_dim();
        let sid = &tape.streams.sid;

        let mut dsc: [Vec<T>; 2] = [vec![T::ZERO; d], vec![T::ZERO; d]];
        let mut dx = vec![T::ZERO; n * d];

        // heads and final modulation
        for s in 0..2 {
            let rows = &tape.gen_rows[s];
            if rows.is_empty() {
                continue;
            }
            let dout = gather_rows(dvel, pd, rows);
            let dy = a.head[s].backward(tb, p, grads, &tape.y_f[s], &dout, rows.len(), true).unwrap_or_default();
            let scale = &tape.fmods[s][d..];
            let mut dfm = vec![T::ZERO; 2 * d];
            for (k, &i) in rows.iter().enumerate() {
                for c in 0..d {
                    let g = dy[k * d + c];
                    dfm[c] += g;
                    dfm[d + c] += g * tape.xhat_f[i * d + c];
                    dx[i * d + c] = g * (T::ONE + scale[c]);
                }
            }
            let dsc_s = a.final_mod[s].backward(tb, p, grads, &tape.sc[s], &dfm, 1, true).unwrap_or_default();
            for (o, v) in dsc[s].iter_mut().zip(&dsc_s) {
                *o += *v;
            }
        }
        let mut dx = layer_norm_backward(&tape.xhat_f, &tape.rstd_f, &dx, d);

        for (b, (blk, bt)) in a.blocks.iter().zip(&tape.blocks).enumerate().rev() {
            let mut dmods: [Vec<T>; 2] = [vec![T::ZERO; 6 * d], vec![T::ZERO; 6 * d]];

            // FFN slot
            let g2 = part(&bt.mods, d, 5);
            let mut dmo = vec![T::ZERO; n * d];
            for i in 0..n {
                let s = sid[i];
                for c in 0..d {
                    let g = dx[i * d + c];
                    dmo[i * d + c] = g * g2[s][c];
                    dmods[s][5 * d + c] += g * bt.mo[i * d + c];
                }
            }
            let mut df_in = blk.experts.backward(tb, p, grads, &bt.f_in, &bt.moe, &dmo, n, &bt.assignment);
            if let (Some(router), Some(rt), Some(dr)) = (&blk.router, &bt.route, droute) {
                let dh = router.backward(tb, p, grads, &bt.f_in, rt, &dr[b], n);
                for (o, v) in df_in.iter_mut().zip(&dh) {
                    *o += *v;
                }
            }
            let (mut dsh, mut dscl) = ([vec![T::ZERO; d], vec![T::ZERO; d]], [vec![T::ZERO; d], vec![T::ZERO; d]]);
            let dxhat2 = modulate_backward(&bt.xhat2, &df_in, d, sid, part(&bt.mods, d, 4), &mut dsh, &mut dscl);
            for s in 0..2 {
                for c in 0..d {
                    dmods[s][3 * d + c] += dsh[s][c];
                    dmods[s][4 * d + c] += dscl[s][c];
                }
            }
            let dln2 = layer_norm_backward(&bt.xhat2, &bt.rstd2, &dxhat2, d);
            for (o, v) in dx.iter_mut().zip(&dln2) {
                *o += *v;
            }

            // attention
            let g1 = part(&bt.mods, d, 2);
            let mut dao = vec![T::ZERO; n * d];
            for i in 0..n {
                let s = sid[i];
                for c in 0..d {
                    let g = dx[i * d + c];
                    dao[i * d + c] = g * g1[s][c];
                    dmods[s][2 * d + c] += g * bt.ao[i * d + c];
                }
            }
            let dctx = blk.o.backward(tb, p, grads, &bt.ctx, &dao, n, true).unwrap_or_default();
            let (mut dq, mut dk, dv) =
                attention_core_backward(&bt.q, &bt.k, &bt.v, cfg.heads, &tape.mask, &bt.attn, &dctx);
            tape.rope.apply(&mut dq, d, true);
            tape.rope.apply(&mut dk, d, true);
            let mut da_in = blk.q.backward(tb, p, grads, &bt.a_in, &dq, n, true).unwrap_or_default();
            for lin_d in [(&blk.k, &dk), (&blk.v, &dv)] {
                let g = lin_d.0.backward(tb, p, grads, &bt.a_in, lin_d.1, n, true).unwrap_or_default();
                for (o, v) in da_in.iter_mut().zip(&g) {
                    *o += *v;
                }
            }
            let (mut dsh, mut dscl) = ([vec![T::ZERO; d], vec![T::ZERO; d]], [vec![T::ZERO; d], vec![T::ZERO; d]]);
            let dxhat1 = modulate_backward(&bt.xhat1, &da_in, d, sid, part(&bt.mods, d, 1), &mut dsh, &mut dscl);
            for s in 0..2 {
                for c in 0..d {
                    dmods[s][c] += dsh[s][c];
                    dmods[s][d + c] += dscl[s][c];
                }
            }
            let dln1 = layer_norm_backward(&bt.xhat1, &bt.rstd1, &dxhat1, d);
            for (o, v) in dx.iter_mut().zip(&dln1) {
                *o += *v;
            }

            for s in 0..2 {
                if tape.streams.rows[s].is_empty() {
                    continue;
                }
                let g = blk.mods[s].backward(tb, p, grads, &tape.sc[s], &dmods[s], 1, true).unwrap_or_default();
                for (o, v) in dsc[s].iter_mut().zip(&g) {
                    *o += *v;
                }
            }
        }

        // patch embeddings
        for s in 0..2 {
            let rows = &tape.streams.rows[s];
            if rows.is_empty() {
                continue;
            }
            let dxs = gather_rows(&dx, d, rows);
            a.embed[s].backward(tb, p, grads, &tape.patches[s], &dxs, rows.len(), false);
        }

        // conditioning: c_hoi = c_rgb + prompt
        let mut dc_rgb = vec![T::ZERO; d];
        for s in 0..2 {
            for c in 0..d {
                let g = dsc[s][c] * silu_grad(tape.c[s][c]);
                dc_rgb[c] += g;
                if s == 1 {
                    grads[tb.range(a.hoi_prompt)][c] += g;
                }
            }
        }
        let dcond = a.cond_proj.backward(tb, p, grads, &tape.cond, &dc_rgb, 1, tape.cond_is_null).unwrap_or_default();
        if tape.cond_is_null {
            for (o, v) in grads[tb.range(a.null_cond)].iter_mut().zip(&dcond) {
                *o += *v;
            }
        }
        let mut dt = a.t_fc2.backward(tb, p, grads, &tape.t_act, &dc_rgb, 1, true).unwrap_or_default();
        for (g, u) in dt.iter_mut().zip(&tape.t_pre) {
            *g *= silu_grad(*u);
        }
        a.t_fc1.backward(tb, p, grads, &tape.t_feat, &dt, 1, false);
    }
}

/// Zero gates of every block, so that each block is the identity map.
pub fn zero_gates<T: Real>(model: &mut ModelState<T>) {
    let d = model.cfg.d_model;
    let blocks = model.arch.blocks.clone();
    for blk in blocks {
        for s in 0..2 {
            let (w, b) = (blk.mods[s].w, blk.mods[s].b);
            let wr = model.arch.table.range(w);
            for row in model.params[wr].chunks_exact_mut(6 * d) {
                for k in [2, 5] {
                    for v in &mut row[k * d..(k + 1) * d] {
                        *v = T::ZERO;
                    }
                }
            }
            let br = model.arch.table.range(b);
            for k in [2, 5] {
                for v in &mut model.params[br.clone()][k * d..(k + 1) * d] {
                    *v = T::ZERO;
                }
            }
        }
    }
}
