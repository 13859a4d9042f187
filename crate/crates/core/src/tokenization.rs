//! Patch tokens, multi-modal 3D coordinates, rotary encoding and region labels.
//!
//! Sequence order is fixed: `[RgbGen, MotionCtx, RefCtx, HoiGen]`. The
//! RGB-family prefix is exactly the single-stream sequence, which is what makes
//! dropping the structure stream at inference a pure truncation.

use alloc::vec;
use alloc::vec::Vec;

use crate::blobworld::{ClipRecord, FrameBox, Frames, PixelBox};
use crate::nn::matmul;
use crate::real::Real;

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum TokenError {
    #[error("layout field `{0}` must be positive")]
    NonPositive(&'static str),
    #[error("coordinate collision at (h={h}, w={w}, t={t})")]
    Collision { h: i32, w: i32, t: i32 },
    #[error("head dim {0} cannot be split into even t/h/w rotary bands")]
    HeadDim(usize),
    #[error("frame size {size} not divisible by patch {patch}")]
    PatchSize { size: usize, patch: usize },
    #[error("box {0:?} extends outside the {1}px canvas")]
    BoxOutside(PixelBox, usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Coord3D {
    pub h: i32,
    pub w: i32,
    pub t: i32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TokenRole {
    RgbGen,
    HoiGen,
    MotionCtx,
    RefCtx,
}

impl TokenRole {
    /// Membership in the RGB token set; every context token counts as RGB.
    pub fn in_rgb_set(self) -> bool {
        !matches!(self, TokenRole::HoiGen)
    }

    pub fn is_generated(self) -> bool {
        matches!(self, TokenRole::RgbGen | TokenRole::HoiGen)
    }

    pub fn stream(self) -> Stream {
        if self.in_rgb_set() {
            Stream::Rgb
        } else {
            Stream::Hoi
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stream {
    Rgb,
    Hoi,
}

impl Stream {
    pub fn index(self) -> usize {
        match self {
            Stream::Rgb => 0,
            Stream::Hoi => 1,
        }
    }
}

/// Region classes, in routing tie-break order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RegionLabel {
    Head = 0,
    Hand = 1,
    Base = 2,
}

impl RegionLabel {
    pub const ALL: [RegionLabel; 3] = [RegionLabel::Head, RegionLabel::Hand, RegionLabel::Base];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenLayout {
    pub frames: usize,
    pub hp: usize,
    pub wp: usize,
    pub n_motion: usize,
    pub t_ref_offset: usize,
}

impl TokenLayout {
    /// Default offset is twice the frame count.
    pub fn new(frames: usize, hp: usize, wp: usize, n_motion: usize) -> Self {
        Self { frames, hp, wp, n_motion, t_ref_offset: 2 * frames }
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.hp * self.wp
    }

    pub fn gen_tokens(&self) -> usize {
        self.frames * self.tokens_per_frame()
    }

    pub fn ctx_tokens(&self) -> usize {
        (self.n_motion + 2) * self.tokens_per_frame()
    }

    pub fn t_ref(&self) -> i32 {
        (self.frames + self.t_ref_offset) as i32
    }

    pub fn seq_len(&self, mode: StreamMode) -> usize {
        match mode {
            StreamMode::Dual => 2 * self.gen_tokens() + self.ctx_tokens(),
            StreamMode::RgbOnly => self.gen_tokens() + self.ctx_tokens(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StreamMode {
    Dual,
    RgbOnly,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoleCoords {
    pub rgb_gen: Vec<Coord3D>,
    pub hoi_gen: Vec<Coord3D>,
    pub motion: Vec<Coord3D>,
    pub reference: Vec<Coord3D>,
}

fn frame_coords(layout: &TokenLayout, t: i32, w_shift: i32, out: &mut Vec<Coord3D>) {
    for i in 0..layout.hp {
        for j in 0..layout.wp {
            out.push(Coord3D { h: i as i32, w: j as i32 + w_shift, t });
        }
    }
}

pub fn assign_coords(layout: &TokenLayout) -> Result<RoleCoords, TokenError> {
    if layout.frames == 0 {
        return Err(TokenError::NonPositive("frames"));
    }
    if layout.hp == 0 {
        return Err(TokenError::NonPositive("hp"));
    }
    if layout.wp == 0 {
        return Err(TokenError::NonPositive("wp"));
    }
    let wp = layout.wp as i32;
    let mut rgb_gen = Vec::with_capacity(layout.gen_tokens());
    let mut hoi_gen = Vec::with_capacity(layout.gen_tokens());
    for f in 0..layout.frames as i32 {
        frame_coords(layout, f, 0, &mut rgb_gen);
        frame_coords(layout, f, -wp, &mut hoi_gen);
    }
    let mut motion = Vec::new();
    let nm = layout.n_motion as i32;
    for m in 0..nm {
        frame_coords(layout, m - nm, 0, &mut motion);
    }
    let mut reference = Vec::new();
    frame_coords(layout, layout.t_ref(), 0, &mut reference);
    frame_coords(layout, layout.t_ref() + 1, 0, &mut reference);

    let mut all: Vec<Coord3D> =
        rgb_gen.iter().chain(&hoi_gen).chain(&motion).chain(&reference).copied().collect();
    all.sort_unstable();
    if let Some(w) = all.windows(2).find(|w| w[0] == w[1]) {
        let c = w[0];
        return Err(TokenError::Collision { h: c.h, w: c.w, t: c.t });
    }
    Ok(RoleCoords { rgb_gen, hoi_gen, motion, reference })
}

/// Roles and coordinates in canonical sequence order.
pub fn sequence_roles(layout: &TokenLayout, mode: StreamMode) -> Result<(Vec<TokenRole>, Vec<Coord3D>), TokenError> {
    let rc = assign_coords(layout)?;
    let mut roles = Vec::with_capacity(layout.seq_len(mode));
    let mut coords = Vec::with_capacity(layout.seq_len(mode));
    let mut push = |role: TokenRole, cs: &[Coord3D]| {
        for c in cs {
            roles.push(role);
            coords.push(*c);
        }
    };
    push(TokenRole::RgbGen, &rc.rgb_gen);
    push(TokenRole::MotionCtx, &rc.motion);
    push(TokenRole::RefCtx, &rc.reference);
    if mode == StreamMode::Dual {
        push(TokenRole::HoiGen, &rc.hoi_gen);
    }
    Ok((roles, coords))
}

/// Flattened patch tokens with their coordinates, roles and (training-only)
/// region labels.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence<T> {
    pub patches: Vec<T>,
    pub patch_dim: usize,
    pub coords: Vec<Coord3D>,
    pub roles: Vec<TokenRole>,
    pub labels: Vec<Option<RegionLabel>>,
}

impl<T: Real> TokenSequence<T> {
    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }

    pub fn patch(&self, i: usize) -> &[T] {
        &self.patches[i * self.patch_dim..(i + 1) * self.patch_dim]
    }

    pub fn indices_of(&self, role: TokenRole) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.roles[i] == role).collect()
    }

    pub fn has_hoi(&self) -> bool {
        self.roles.contains(&TokenRole::HoiGen)
    }

    /// Drops every structure-stream token.
    pub fn rgb_only(&self) -> Self {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| self.roles[i].in_rgb_set()).collect();
        let mut patches = Vec::with_capacity(keep.len() * self.patch_dim);
        for &i in &keep {
            patches.extend_from_slice(self.patch(i));
        }
        Self {
            patches,
            patch_dim: self.patch_dim,
            coords: keep.iter().map(|&i| self.coords[i]).collect(),
            roles: keep.iter().map(|&i| self.roles[i]).collect(),
            labels: keep.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Splits `[n, h, w, 3]` frames into `[n * h/p * w/p, p * p * 3]` tokens scaled
/// to `[-1, 1]`. Patch vectors are ordered `(row, col, channel)`.
pub fn patchify<T: Real>(frames: &Frames, patch: usize) -> Result<Vec<T>, TokenError> {
    for size in [frames.h, frames.w] {
        if patch == 0 || size % patch != 0 {
            return Err(TokenError::PatchSize { size, patch });
        }
    }
    let (hp, wp) = (frames.h / patch, frames.w / patch);
    let pd = patch * patch * 3;
    let mut out = Vec::with_capacity(frames.n * hp * wp * pd);
    let scale = T::from_f64(1.0 / 127.5);
    for f in 0..frames.n {
        let fr = frames.frame(f);
        for i in 0..hp {
            for j in 0..wp {
                for py in 0..patch {
                    let y = i * patch + py;
                    for px in 0..patch {
                        let x = j * patch + px;
                        for c in 0..3 {
                            let v = fr[(y * frames.w + x) * 3 + c];
                            out.push(T::from_f64(v as f64) * scale - T::ONE);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`], rounding and clamping to u8.
pub fn unpatchify<T: Real>(tokens: &[T], n: usize, h: usize, w: usize, patch: usize) -> Frames {
    let (hp, wp) = (h / patch, w / patch);
    let pd = patch * patch * 3;
    let mut frames = Frames::new(n, h, w);
    for f in 0..n {
        for i in 0..hp {
            for j in 0..wp {
                let tok = &tokens[((f * hp + i) * wp + j) * pd..][..pd];
                for py in 0..patch {
                    for px in 0..patch {
                        for c in 0..3 {
                            let v = (tok[(py * patch + px) * 3 + c].to_f64() + 1.0) * 127.5;
                            let v = libm::round(v).clamp(0.0, 255.0) as u8;
                            let (y, x) = (i * patch + py, j * patch + px);
                            frames.data[((f * h + y) * w + x) * 3 + c] = v;
                        }
                    }
                }
            }
        }
    }
    frames
}

/// Region labels for the generated tokens of one stream, frame-major.
/// Hand wins over Head when a patch touches both boxes.
pub fn label_tokens(
    head_boxes: &[FrameBox],
    hand_boxes: &[FrameBox],
    layout: &TokenLayout,
    patch: usize,
) -> Result<Vec<RegionLabel>, TokenError> {
    let canvas_w = layout.wp * patch;
    let canvas_h = layout.hp * patch;
    for b in head_boxes.iter().chain(hand_boxes) {
        if b.bbox.x1 > canvas_w || b.bbox.y1 > canvas_h {
            return Err(TokenError::BoxOutside(b.bbox, canvas_w.max(canvas_h)));
        }
    }
    let mut labels = Vec::with_capacity(layout.gen_tokens());
    for f in 0..layout.frames {
        for i in 0..layout.hp {
            for j in 0..layout.wp {
                let foot = PixelBox { x0: j * patch, y0: i * patch, x1: (j + 1) * patch, y1: (i + 1) * patch };
                let hits = |boxes: &[FrameBox]| boxes.iter().any(|b| b.frame == f && b.bbox.intersects(&foot));
                labels.push(if hits(hand_boxes) {
                    RegionLabel::Hand
                } else if hits(head_boxes) {
                    RegionLabel::Head
                } else {
                    RegionLabel::Base
                });
            }
        }
    }
    Ok(labels)
}

/// Number of rotary pairs given to the (t, h, w) axes.
pub fn rope_bands(d_head: usize) -> Result<[usize; 3], TokenError> {
    if d_head % 2 != 0 || d_head / 2 < 3 {
        return Err(TokenError::HeadDim(d_head));
    }
    let pairs = d_head / 2;
    let base = pairs / 3;
    Ok([base + pairs % 3, base, base])
}

/// Precomputed rotation angles for a token sequence.
#[derive(Clone, Debug)]
pub struct RopeTable<T> {
    pub pairs: usize,
    pub cos: Vec<T>,
    pub sin: Vec<T>,
}

impl<T: Real> RopeTable<T> {
    pub fn new(coords: &[Coord3D], d_head: usize, base: f64) -> Result<Self, TokenError> {
        let bands = rope_bands(d_head)?;
        let pairs = d_head / 2;
        let mut freqs: Vec<(usize, f64)> = Vec::with_capacity(pairs);
        for (axis, &n) in bands.iter().enumerate() {
            for k in 0..n {
                freqs.push((axis, libm::pow(base, -(k as f64) / n as f64)));
            }
        }
        let mut cos = Vec::with_capacity(coords.len() * pairs);
        let mut sin = Vec::with_capacity(coords.len() * pairs);
        for c in coords {
            let pos = [c.t as f64, c.h as f64, c.w as f64];
            for &(axis, fr) in &freqs {
                let a = pos[axis] * fr;
                cos.push(T::from_f64(libm::cos(a)));
                sin.push(T::from_f64(libm::sin(a)));
            }
        }
        Ok(Self { pairs, cos, sin })
    }

    /// Rotates every head of `x` (`[n, heads * d_head]`) in place. With
    /// `inverse` the transpose rotation is applied, which is the backward pass.
    pub fn apply(&self, x: &mut [T], width: usize, inverse: bool) {
        let d_head = 2 * self.pairs;
        let rows = x.len() / width;
        for r in 0..rows {
            let cs = &self.cos[r * self.pairs..(r + 1) * self.pairs];
            let sn = &self.sin[r * self.pairs..(r + 1) * self.pairs];
            for head in x[r * width..(r + 1) * width].chunks_exact_mut(d_head) {
                for p in 0..self.pairs {
                    let (a, b) = (head[2 * p], head[2 * p + 1]);
                    let (c, s) = (cs[p], if inverse { -sn[p] } else { sn[p] });
                    head[2 * p] = a * c - b * s;
                    head[2 * p + 1] = a * s + b * c;
                }
            }
        }
    }
}

/// Rotary encoding of `[n, d_head]` vectors at the given coordinates.
pub fn rope_apply<T: Real>(x: &[T], coords: &[Coord3D], d_head: usize, base: f64) -> Result<Vec<T>, TokenError> {
    let table = RopeTable::new(coords, d_head, base)?;
    let mut out = x.to_vec();
    table.apply(&mut out, d_head, false);
    Ok(out)
}

/// Weights of one patch-embedding layer (`[patch_dim, d]` and `[d]`).
#[derive(Clone, Copy, Debug)]
pub struct EmbedWeights<'a, T> {
    pub w: &'a [T],
    pub b: &'a [T],
}

/// Embeds patch tokens, using the structure-stream weights for `HoiGen`
/// tokens and the RGB weights for everything else.
pub fn patch_embed<T: Real>(
    patches: &[T],
    roles: &[TokenRole],
    patch_dim: usize,
    d: usize,
    rgb: EmbedWeights<'_, T>,
    hoi: EmbedWeights<'_, T>,
) -> Vec<T> {
    let mut out = vec![T::ZERO; roles.len() * d];
    for stream in [Stream::Rgb, Stream::Hoi] {
        let idx: Vec<usize> = (0..roles.len()).filter(|&i| roles[i].stream() == stream).collect();
        if idx.is_empty() {
            continue;
        }
        let wts = if stream == Stream::Rgb { rgb } else { hoi };
        let x = gather_rows(patches, patch_dim, &idx);
        let mut y = vec![T::ZERO; idx.len() * d];
        for r in y.chunks_exact_mut(d) {
            r.copy_from_slice(wts.b);
        }
        matmul(&x, false, wts.w, false, &mut y, idx.len(), patch_dim, d, T::ONE);
        scatter_rows(&y, d, &idx, &mut out);
    }
    out
}

pub fn gather_rows<T: Copy>(src: &[T], width: usize, idx: &[usize]) -> Vec<T> {
    let mut out = Vec::with_capacity(idx.len() * width);
    for &i in idx {
        out.extend_from_slice(&src[i * width..(i + 1) * width]);
    }
    out
}

pub fn scatter_rows<T: Copy>(src: &[T], width: usize, idx: &[usize], dst: &mut [T]) {
    for (k, &i) in idx.iter().enumerate() {
        dst[i * width..(i + 1) * width].copy_from_slice(&src[k * width..(k + 1) * width]);
    }
}

/// Clean token sequence of a clip in canonical order, with region labels on
/// the generated tokens.
pub fn tokenize_clip<T: Real>(
    clip: &ClipRecord,
    patch: usize,
    t_ref_offset: Option<usize>,
    mode: StreamMode,
) -> Result<TokenSequence<T>, TokenError> {
    let fr = &clip.rgb_frames;
    for size in [fr.h, fr.w] {
        if patch == 0 || size % patch != 0 {
            return Err(TokenError::PatchSize { size, patch });
        }
    }
    let mut layout = TokenLayout::new(fr.n, fr.h / patch, fr.w / patch, clip.motion_frames.n);
    if let Some(off) = t_ref_offset {
        layout.t_ref_offset = off;
    }
    let (roles, coords) = sequence_roles(&layout, mode)?;
    let mut patches = patchify::<T>(fr, patch)?;
    patches.extend(patchify::<T>(&clip.motion_frames, patch)?);
    patches.extend(patchify::<T>(&clip.ref_person, patch)?);
    patches.extend(patchify::<T>(&clip.ref_object, patch)?);
    let gen_labels = label_tokens(&clip.head_boxes, &clip.hand_boxes, &layout, patch)?;
    let mut labels: Vec<Option<RegionLabel>> = gen_labels.iter().map(|l| Some(*l)).collect();
    labels.resize(layout.gen_tokens() + layout.ctx_tokens(), None);
    if mode == StreamMode::Dual {
        patches.extend(patchify::<T>(&clip.hoi_frames, patch)?);
        labels.extend(gen_labels.iter().map(|l| Some(*l)));
    }
    Ok(TokenSequence { patches, patch_dim: patch * patch * 3, coords, roles, labels })
}
