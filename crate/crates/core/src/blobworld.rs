//! Procedural human-object interaction clips.
//!
//! A person (torso rectangle, head disc, one or two hand squares) reaches for
//! an object (rectangle or disc), touches it at `grasp_frame` and then carries
//! it rigidly. Every clip comes with its texture-stripped structure stream
//! (white silhouette, object in its own color, black background), tight head
//! and hand boxes, two reference frames, preceding motion frames and a small
//! conditioning vector.
//!
//! All geometry is produced once by [`ScenePlan`] and both renderers read from
//! it, so the RGB and structure streams can never disagree.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Rgb = [u8; 3];

pub const WHITE: Rgb = [255, 255, 255];
pub const BLACK: Rgb = [0, 0, 0];

/// Contact band in pixels: hand and object may share at most this much overlap.
pub const CONTACT_BAND: usize = 1;

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum BlobError {
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("canvas too small: {0}")]
    CanvasTooSmall(&'static str),
    #[error("frame {frame} out of range (clip has {frames} frames)")]
    FrameOutOfRange { frame: usize, frames: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObjectShape {
    Rect,
    Disc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Palette {
    pub background: Rgb,
    pub skin: Rgb,
    pub torso: Rgb,
    pub object: Rgb,
    pub spare: Rgb,
}

impl Default for Palette {
    fn default() -> Self {
        Self {
            background: [40, 40, 96],
            skin: [236, 188, 140],
            torso: [48, 160, 72],
            object: [208, 48, 40],
            spare: [128, 96, 224],
        }
    }
}

impl Palette {
    pub fn colors(&self) -> [Rgb; 5] {
        [self.background, self.skin, self.torso, self.object, self.spare]
    }
}

pub fn linf(a: Rgb, b: Rgb) -> u8 {
    let d = |x: u8, y: u8| x.abs_diff(y);
    d(a[0], b[0]).max(d(a[1], b[1])).max(d(a[2], b[2]))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub canvas_size: usize,
    pub num_frames: usize,
    pub n_motion: usize,
    pub head_radius: usize,
    pub hand_size: usize,
    pub object_size: usize,
    pub object_shape: ObjectShape,
    pub grasp_frame: usize,
    pub two_hands: bool,
    pub cond_dim: usize,
    pub palette: Palette,
    pub rng_seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            canvas_size: 32,
            num_frames: 8,
            n_motion: 2,
            head_radius: 3,
            hand_size: 4,
            object_size: 6,
            object_shape: ObjectShape::Rect,
            grasp_frame: 4,
            two_hands: false,
            cond_dim: 8,
            palette: Palette::default(),
            rng_seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn with_seed(&self, seed: u64) -> Self {
        Self { rng_seed: seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<(), BlobError> {
        let bad = |m: String| Err(BlobError::InvalidSpec(m));
        if self.num_frames < 2 {
            return bad("num_frames must be at least 2".into());
        }
        if self.grasp_frame < 1 || self.grasp_frame > self.num_frames - 1 {
            return bad(alloc::format!(
                "grasp_frame {} outside [1, {}]",
                self.grasp_frame,
                self.num_frames - 1
            ));
        }
        if self.head_radius == 0 || self.hand_size == 0 || self.object_size < 2 {
            return bad("blob sizes must be positive (object_size >= 2)".into());
        }
        let c = self.palette.colors();
        for i in 0..c.len() {
            for j in i + 1..c.len() {
                if linf(c[i], c[j]) < 64 {
                    return bad(alloc::format!("palette colors {i} and {j} closer than 64 (L-inf)"));
                }
            }
        }
        if linf(self.palette.object, WHITE) < 64 || linf(self.palette.object, BLACK) < 64 {
            return bad("object color must be at least 64 away from black and white".into());
        }
        Ok(())
    }
}

/// Half-open pixel box `[x0, x1) x [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PixelBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PixelBox {
    pub fn is_empty(&self) -> bool {
        self.x1 <= self.x0 || self.y1 <= self.y0
    }

    pub fn intersects(&self, other: &PixelBox) -> bool {
        !self.is_empty()
            && !other.is_empty()
            && self.x0 < other.x1
            && other.x0 < self.x1
            && self.y0 < other.y1
            && other.y0 < self.y1
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameBox {
    pub frame: usize,
    pub bbox: PixelBox,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Blob {
    Disc { cx: i32, cy: i32, r: i32 },
    Rect { x0: i32, y0: i32, w: i32, h: i32 },
}

impl Blob {
    pub fn contains(&self, x: i32, y: i32) -> bool {
        match *self {
            Blob::Disc { cx, cy, r } => {
                let (dx, dy) = (x - cx, y - cy);
                dx * dx + dy * dy <= r * r
            }
            Blob::Rect { x0, y0, w, h } => x >= x0 && x < x0 + w && y >= y0 && y < y0 + h,
        }
    }

    /// Inclusive-exclusive extent `(x0, y0, x1, y1)`.
    pub fn extent(&self) -> (i32, i32, i32, i32) {
        match *self {
            Blob::Disc { cx, cy, r } => (cx - r, cy - r, cx + r + 1, cy + r + 1),
            Blob::Rect { x0, y0, w, h } => (x0, y0, x0 + w, y0 + h),
        }
    }

    pub fn translated(&self, dx: i32, dy: i32) -> Blob {
        match *self {
            Blob::Disc { cx, cy, r } => Blob::Disc { cx: cx + dx, cy: cy + dy, r },
            Blob::Rect { x0, y0, w, h } => Blob::Rect { x0: x0 + dx, y0: y0 + dy, w, h },
        }
    }

    pub fn mirrored(&self, size: i32) -> Blob {
        match *self {
            Blob::Disc { cx, cy, r } => Blob::Disc { cx: size - 1 - cx, cy, r },
            Blob::Rect { x0, y0, w, h } => Blob::Rect { x0: size - x0 - w, y0, w, h },
        }
    }

    pub fn inside_canvas(&self, size: i32) -> bool {
        let (x0, y0, x1, y1) = self.extent();
        x0 >= 0 && y0 >= 0 && x1 <= size && y1 <= size
    }

    /// Pixel mask on a `size x size` canvas.
    pub fn mask(&self, size: usize) -> Vec<bool> {
        let mut m = vec![false; size * size];
        let (x0, y0, x1, y1) = self.extent();
        for y in y0.max(0)..y1.min(size as i32) {
            for x in x0.max(0)..x1.min(size as i32) {
                if self.contains(x, y) {
                    m[y as usize * size + x as usize] = true;
                }
            }
        }
        m
    }

    /// Tight box around the rasterized pixels.
    pub fn tight_box(&self, size: usize) -> PixelBox {
        let m = self.mask(size);
        mask_bbox(&m, size)
    }
}

pub fn mask_bbox(mask: &[bool], size: usize) -> PixelBox {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for (i, &on) in mask.iter().enumerate() {
        if on {
            let (x, y) = (i % size, i / size);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x + 1);
            y1 = y1.max(y + 1);
        }
    }
    if x0 == usize::MAX {
        PixelBox { x0: 0, y0: 0, x1: 0, y1: 0 }
    } else {
        PixelBox { x0, y0, x1, y1 }
    }
}

/// Number of pixels shared by two blobs.
pub fn overlap_pixels(a: &Blob, b: &Blob, size: usize) -> usize {
    a.mask(size).iter().zip(b.mask(size)).filter(|(p, q)| **p && *q).count()
}

/// Empty pixel gap between two blobs: minimum Chebyshev distance between
/// their pixels minus one. Touching blobs have gap 0; overlapping ones -1.
pub fn boundary_gap(a: &Blob, b: &Blob, size: usize) -> i32 {
    let pa: Vec<(i32, i32)> = pixels(&a.mask(size), size);
    let pb: Vec<(i32, i32)> = pixels(&b.mask(size), size);
    let mut best = i32::MAX;
    for &(x, y) in &pa {
        for &(u, v) in &pb {
            best = best.min((x - u).abs().max((y - v).abs()));
        }
    }
    best - 1
}

fn pixels(mask: &[bool], size: usize) -> Vec<(i32, i32)> {
    mask.iter()
        .enumerate()
        .filter(|(_, on)| **on)
        .map(|(i, _)| ((i % size) as i32, (i / size) as i32))
        .collect()
}

/// Row-major `[n, h, w, 3]` u8 frames.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frames {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl Frames {
    pub fn new(n: usize, h: usize, w: usize) -> Self {
        Self { n, h, w, data: vec![0; n * h * w * 3] }
    }

    pub fn frame_len(&self) -> usize {
        self.h * self.w * 3
    }

    pub fn frame(&self, f: usize) -> &[u8] {
        &self.data[f * self.frame_len()..(f + 1) * self.frame_len()]
    }

    pub fn frame_mut(&mut self, f: usize) -> &mut [u8] {
        let l = self.frame_len();
        &mut self.data[f * l..(f + 1) * l]
    }

    pub fn pixel(&self, f: usize, x: usize, y: usize) -> Rgb {
        let o = f * self.frame_len() + (y * self.w + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.h, self.w, 3]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipRecord {
    pub seed: u64,
    pub rgb_frames: Frames,
    pub hoi_frames: Frames,
    pub head_boxes: Vec<FrameBox>,
    pub hand_boxes: Vec<FrameBox>,
    pub ref_person: Frames,
    pub ref_object: Frames,
    pub motion_frames: Frames,
    pub cond_vec: Vec<f32>,
}

impl ClipRecord {
    pub fn num_frames(&self) -> usize {
        self.rgb_frames.n
    }

    pub fn boxes_in_frame<'a>(boxes: &'a [FrameBox], f: usize) -> impl Iterator<Item = PixelBox> + 'a {
        boxes.iter().filter(move |b| b.frame == f).map(|b| b.bbox)
    }
}

/// Geometry of one frame (negative indices are motion frames).
#[derive(Clone, Debug, PartialEq)]
pub struct FrameGeometry {
    pub torso: Blob,
    pub head: Blob,
    pub hands: Vec<Blob>,
    pub object: Blob,
}

/// All random choices of one clip, resolved once.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenePlan {
    pub spec: SceneSpec,
    pub torso: Blob,
    pub head: Blob,
    pub idle_hand: Option<Blob>,
    /// Active hand and object per frame index `f + n_motion`.
    pub hand_track: Vec<Blob>,
    pub object_track: Vec<Blob>,
    pub speed: i32,
    pub lift: (i32, i32),
    pub mirrored: bool,
}

const LIFTS: [(i32, i32); 4] = [(0, -1), (1, -1), (0, 1), (1, 0)];

impl ScenePlan {
    pub fn new(spec: &SceneSpec) -> Result<Self, BlobError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
        let s = spec.canvas_size as i32;
        let r = spec.head_radius as i32;
        let hs = spec.hand_size as i32;
        let (tw, th) = (2 * r + 2, 2 * r + 4);
        let ext = match spec.object_shape {
            ObjectShape::Rect => spec.object_size as i32,
            ObjectShape::Disc => 2 * (spec.object_size as i32 / 2) + 1,
        };
        if th + 2 * r + 2 > s {
            return Err(BlobError::CanvasTooSmall("person taller than canvas"));
        }
        if tw + hs + ext + 4 > s {
            return Err(BlobError::CanvasTooSmall("person, hand and object do not fit side by side"));
        }

        let tx = rng.random_range(1..=2);
        let ty = rng.random_range((s - th - 2).max(2 * r + 1)..=(s - th - 1));
        let torso = Blob::Rect { x0: tx, y0: ty, w: tw, h: th };
        let head = Blob::Disc { cx: tx + tw / 2, cy: ty - r - 1, r };

        let ox = rng.random_range((s - ext - 4).max(tx + tw + hs + 1)..=(s - ext - 1));
        let oy_lo = (ty - 2).max(0);
        let oy_hi = (ty + th - ext).min(s - ext - 1).max(oy_lo);
        let oy = rng.random_range(oy_lo..=oy_hi);
        let object0 = match spec.object_shape {
            ObjectShape::Rect => Blob::Rect { x0: ox, y0: oy, w: ext, h: ext },
            ObjectShape::Disc => {
                let ro = ext / 2;
                Blob::Disc { cx: ox + ro, cy: oy + ro, r: ro }
            }
        };

        // hand rows overlap the object rows by at least two pixels and stay
        // below the head
        let hy_lo = (oy - hs + 2).max(ty);
        let hy_hi = (oy + ext - 2).min(s - hs).max(hy_lo);
        let hy = rng.random_range(hy_lo..=hy_hi);
        let speed = if rng.random_bool(0.5) { 2 } else { 1 };
        let lift = LIFTS[rng.random_range(0..LIFTS.len())];
        let mirrored = rng.random_bool(0.5);

        let hand_at = |x: i32| Blob::Rect { x0: x, y0: hy, w: hs, h: hs };
        let size = spec.canvas_size;
        let mut contact = None;
        for x in 0..s - hs + 1 {
            if overlap_pixels(&hand_at(x), &object0, size) > 0 {
                contact = Some(x - 1);
                break;
            }
        }
        let contact = match contact {
            Some(x) if x >= 0 => x,
            _ => return Err(BlobError::CanvasTooSmall("no contact position for the hand")),
        };

        let g = spec.grasp_frame as i32;
        let nm = spec.n_motion as i32;
        let mut speed = speed;
        if contact - speed * (g + nm) < 0 {
            speed = 1;
        }
        if contact - speed * (g + nm) < 0 {
            return Err(BlobError::CanvasTooSmall("hand approach path leaves the canvas"));
        }

        let total = spec.n_motion + spec.num_frames;
        let mut hand_track = Vec::with_capacity(total);
        let mut object_track = Vec::with_capacity(total);
        let (mut carry_dx, mut carry_dy) = (0, 0);
        for i in 0..total as i32 {
            let f = i - nm;
            if f <= g {
                hand_track.push(hand_at(contact - speed * (g - f)));
                object_track.push(object0);
            } else {
                let (nx, ny) = (carry_dx + lift.0, carry_dy + lift.1);
                let hand = hand_at(contact).translated(nx, ny);
                let obj = object0.translated(nx, ny);
                if hand.inside_canvas(s) && obj.inside_canvas(s) {
                    carry_dx = nx;
                    carry_dy = ny;
                }
                hand_track.push(hand_at(contact).translated(carry_dx, carry_dy));
                object_track.push(object0.translated(carry_dx, carry_dy));
            }
        }

        let idle_hand = spec.two_hands.then(|| Blob::Rect { x0: tx + 1, y0: ty + th - hs - 1, w: hs, h: hs });

        let mut plan = ScenePlan {
            spec: spec.clone(),
            torso,
            head,
            idle_hand,
            hand_track,
            object_track,
            speed,
            lift,
            mirrored: false,
        };
        if mirrored {
            plan.mirror();
        }
        plan.check()?;
        Ok(plan)
    }

    fn mirror(&mut self) {
        let s = self.spec.canvas_size as i32;
        self.mirrored = true;
        self.torso = self.torso.mirrored(s);
        self.head = self.head.mirrored(s);
        self.idle_hand = self.idle_hand.map(|b| b.mirrored(s));
        for b in self.hand_track.iter_mut().chain(self.object_track.iter_mut()) {
            *b = b.mirrored(s);
        }
    }

    fn check(&self) -> Result<(), BlobError> {
        let s = self.spec.canvas_size;
        let si = s as i32;
        let blobs_ok = [self.torso, self.head].iter().all(|b| b.inside_canvas(si))
            && self.hand_track.iter().chain(&self.object_track).all(|b| b.inside_canvas(si))
            && self.idle_hand.is_none_or(|b| b.inside_canvas(si));
        if !blobs_ok {
            return Err(BlobError::CanvasTooSmall("blob leaves the canvas"));
        }
        let head_box = self.head.tight_box(s);
        for (hand, obj) in self.hand_track.iter().zip(&self.object_track) {
            if overlap_pixels(hand, obj, s) > CONTACT_BAND {
                return Err(BlobError::CanvasTooSmall("hand and object overlap"));
            }
            if hand.tight_box(s).intersects(&head_box) || self.head.tight_box(s).intersects(&obj.tight_box(s)) {
                return Err(BlobError::CanvasTooSmall("hand or object collides with the head"));
            }
        }
        Ok(())
    }

    pub fn total_frames(&self) -> usize {
        self.spec.n_motion + self.spec.num_frames
    }

    /// Geometry at frame `f`, where `-n_motion <= f < num_frames`.
    pub fn frame(&self, f: i32) -> FrameGeometry {
        let i = (f + self.spec.n_motion as i32) as usize;
        let mut hands = vec![self.hand_track[i]];
        if let Some(h) = self.idle_hand {
            hands.push(h);
        }
        FrameGeometry { torso: self.torso, head: self.head, hands, object: self.object_track[i] }
    }

    pub fn cond_vec(&self) -> Vec<f32> {
        let spec = &self.spec;
        let s = spec.canvas_size as f32;
        let (_, oy0, _, _) = self.object_track[0].extent();
        let (_, hy0, _, _) = self.hand_track[0].extent();
        let full = [
            spec.grasp_frame as f32 / spec.num_frames as f32,
            self.speed as f32 - 1.5,
            self.lift.0 as f32,
            self.lift.1 as f32,
            if spec.object_shape == ObjectShape::Rect { 1.0 } else { -1.0 },
            hy0 as f32 / s - 0.5,
            oy0 as f32 / s - 0.5,
            if self.mirrored { 1.0 } else { -1.0 },
        ];
        let mut v = vec![0.0; spec.cond_dim];
        for (o, x) in v.iter_mut().zip(full.iter()) {
            *o = *x;
        }
        v
    }
}

fn paint(frame: &mut [u8], size: usize, blob: &Blob, color: Rgb) {
    let m = blob.mask(size);
    for (i, on) in m.iter().enumerate() {
        if *on {
            frame[i * 3..i * 3 + 3].copy_from_slice(&color);
        }
    }
}

fn fill(frame: &mut [u8], color: Rgb) {
    for px in frame.chunks_exact_mut(3) {
        px.copy_from_slice(&color);
    }
}

/// RGB appearance: background, object, torso, head, hands (hands drawn last).
pub fn render_rgb(geom: &FrameGeometry, palette: &Palette, size: usize, out: &mut [u8]) {
    fill(out, palette.background);
    paint(out, size, &geom.object, palette.object);
    paint(out, size, &geom.torso, palette.torso);
    paint(out, size, &geom.head, palette.skin);
    for h in &geom.hands {
        paint(out, size, h, palette.skin);
    }
}

/// Structure stream: black background, object in its color, white silhouette
/// of head, torso and hands drawn over the object.
pub fn render_hoi(geom: &FrameGeometry, palette: &Palette, size: usize, out: &mut [u8]) {
    fill(out, BLACK);
    paint(out, size, &geom.object, palette.object);
    paint(out, size, &geom.torso, WHITE);
    paint(out, size, &geom.head, WHITE);
    for h in &geom.hands {
        paint(out, size, h, WHITE);
    }
}

pub fn generate_clip(spec: &SceneSpec) -> Result<ClipRecord, BlobError> {
    let plan = ScenePlan::new(spec)?;
    Ok(plan.render())
}

impl ScenePlan {
    pub fn render(&self) -> ClipRecord {
        let spec = &self.spec;
        let size = spec.canvas_size;
        let mut rgb = Frames::new(spec.num_frames, size, size);
        let mut hoi = Frames::new(spec.num_frames, size, size);
        let mut motion = Frames::new(spec.n_motion, size, size);
        let mut head_boxes = Vec::new();
        let mut hand_boxes = Vec::new();
        for f in 0..spec.num_frames {
            let g = self.frame(f as i32);
            render_rgb(&g, &spec.palette, size, rgb.frame_mut(f));
            render_hoi(&g, &spec.palette, size, hoi.frame_mut(f));
            head_boxes.push(FrameBox { frame: f, bbox: g.head.tight_box(size) });
            for h in &g.hands {
                hand_boxes.push(FrameBox { frame: f, bbox: h.tight_box(size) });
            }
        }
        for m in 0..spec.n_motion {
            let g = self.frame(m as i32 - spec.n_motion as i32);
            render_rgb(&g, &spec.palette, size, motion.frame_mut(m));
        }

        let mut ref_person = Frames::new(1, size, size);
        {
            let g = self.frame(0);
            let out = ref_person.frame_mut(0);
            fill(out, spec.palette.background);
            paint(out, size, &g.torso, spec.palette.torso);
            paint(out, size, &g.head, spec.palette.skin);
            for h in &g.hands {
                paint(out, size, h, spec.palette.skin);
            }
        }
        let mut ref_object = Frames::new(1, size, size);
        {
            let obj = self.object_track[0];
            let (x0, y0, x1, y1) = obj.extent();
            let c = size as i32 / 2;
            let centered = obj.translated(c - (x0 + x1) / 2, c - (y0 + y1) / 2);
            let out = ref_object.frame_mut(0);
            fill(out, spec.palette.background);
            paint(out, size, &centered, spec.palette.object);
        }

        ClipRecord {
            seed: spec.rng_seed,
            rgb_frames: rgb,
            hoi_frames: hoi,
            head_boxes,
            hand_boxes,
            ref_person,
            ref_object,
            motion_frames: motion,
            cond_vec: self.cond_vec(),
        }
    }
}

/// Renders one structure-stream frame straight from the scene plan.
pub fn render_hoi_from_rgb_truth(spec: &SceneSpec, frame_idx: usize) -> Result<Vec<u8>, BlobError> {
    if frame_idx >= spec.num_frames {
        return Err(BlobError::FrameOutOfRange { frame: frame_idx, frames: spec.num_frames });
    }
    let plan = ScenePlan::new(spec)?;
    let size = spec.canvas_size;
    let mut out = vec![0u8; size * size * 3];
    render_hoi(&plan.frame(frame_idx as i32), &spec.palette, size, &mut out);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_palette_is_separated() {
        SceneSpec::default().validate().unwrap();
    }

    #[test]
    fn grasp_frame_touches_without_overlap() {
        let spec = SceneSpec::default();
        let plan = ScenePlan::new(&spec).unwrap();
        let g = plan.frame(spec.grasp_frame as i32);
        assert_eq!(overlap_pixels(&g.hands[0], &g.object, 32), 0);
        assert_eq!(boundary_gap(&g.hands[0], &g.object, 32), 0);
    }

    #[test]
    fn object_follows_hand_after_grasp() {
        for seed in 0..20 {
            let spec = SceneSpec::default().with_seed(seed);
            let plan = ScenePlan::new(&spec).unwrap();
            let g = spec.grasp_frame as i32;
            let base = plan.frame(g);
            let (hx, hy, _, _) = base.hands[0].extent();
            let (ox, oy, _, _) = base.object.extent();
            for f in g..spec.num_frames as i32 {
                let cur = plan.frame(f);
                let (a, b, _, _) = cur.hands[0].extent();
                let (c, d, _, _) = cur.object.extent();
                assert_eq!((a - hx, b - hy), (c - ox, d - oy), "seed {seed} frame {f}");
            }
        }
    }

    #[test]
    fn motion_frames_precede_frame_zero_on_the_same_path() {
        let spec = SceneSpec::default().with_seed(7);
        let plan = ScenePlan::new(&spec).unwrap();
        let clip = plan.render();
        let mut expect = vec![0u8; 32 * 32 * 3];
        render_rgb(&plan.frame(-1), &spec.palette, 32, &mut expect);
        assert_eq!(clip.motion_frames.frame(spec.n_motion - 1), &expect[..]);
        let (x_prev, _, _, _) = plan.frame(-1).hands[0].extent();
        let (x0, _, _, _) = plan.frame(0).hands[0].extent();
        assert_eq!((x0 - x_prev).abs(), plan.speed);
    }

    #[test]
    fn rejects_tiny_canvas_with_constraint_name() {
        let spec = SceneSpec { canvas_size: 16, ..SceneSpec::default() };
        match generate_clip(&spec) {
            Err(BlobError::CanvasTooSmall(msg)) => assert!(!msg.is_empty()),
            other => panic!("expected canvas error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_grasp_frame() {
        let spec = SceneSpec { grasp_frame: 8, ..SceneSpec::default() };
        assert!(matches!(spec.validate(), Err(BlobError::InvalidSpec(_))));
        let spec = SceneSpec { grasp_frame: 0, ..SceneSpec::default() };
        assert!(matches!(spec.validate(), Err(BlobError::InvalidSpec(_))));
    }

    #[test]
    fn hoi_frames_use_three_colors() {
        let clip = generate_clip(&SceneSpec::default().with_seed(3)).unwrap();
        let obj = SceneSpec::default().palette.object;
        for px in clip.hoi_frames.data.chunks_exact(3) {
            let c = [px[0], px[1], px[2]];
            assert!(c == BLACK || c == WHITE || c == obj);
        }
    }

    #[test]
    fn render_hoi_range_check() {
        let spec = SceneSpec::default();
        assert!(matches!(render_hoi_from_rgb_truth(&spec, 8), Err(BlobError::FrameOutOfRange { .. })));
    }

    #[test]
    fn two_hands_give_two_boxes_per_frame() {
        let spec = SceneSpec { two_hands: true, ..SceneSpec::default() };
        let clip = generate_clip(&spec).unwrap();
        assert_eq!(clip.hand_boxes.len(), 2 * spec.num_frames);
    }
}
