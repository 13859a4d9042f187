//! Blob-world proxy metrics: palette segmentation, interpenetration, stream
//! alignment and routing accuracy.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Cond, ForwardInput, ForwardMode, ModelError, ModelState};
use crate::blobworld::{linf, Frames, Palette, Rgb, BLACK, CONTACT_BAND, WHITE};
use crate::humoe::{argmax_region, Phase};
use crate::real::Real;
use crate::tokenization::{RegionLabel, TokenSequence};

/// Mean nearest-color L-inf distance above which a frame is unsegmentable.
pub const SEGMENT_THRESHOLD: f64 = 48.0;
/// Extra pixels tolerated on top of the contact band.
pub const PENETRATION_SLACK: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct Segmentation {
    /// Index into the color list per pixel.
    pub class: Vec<u8>,
    pub mean_distance: f64,
}

impl Segmentation {
    pub fn segmentable(&self) -> bool {
        self.mean_distance <= SEGMENT_THRESHOLD
    }

    pub fn mask(&self, class: u8) -> Vec<bool> {
        self.class.iter().map(|c| *c == class).collect()
    }
}

/// Nearest-color labeling of one `[h, w, 3]` frame.
pub fn segment(frame: &[u8], colors: &[Rgb]) -> Segmentation {
    let mut class = Vec::with_capacity(frame.len() / 3);
    let mut total = 0u64;
    for px in frame.chunks_exact(3) {
        let p = [px[0], px[1], px[2]];
        let (mut best, mut bd) = (0u8, u8::MAX);
        for (k, c) in colors.iter().enumerate() {
            let dist = linf(p, *c);
            if dist < bd {
                bd = dist;
                best = k as u8;
            }
        }
        class.push(best);
        total += bd as u64;
    }
    let n = class.len().max(1);
    Segmentation { class, mean_distance: total as f64 / n as f64 }
}

/// RGB palette order used by [`segment`]: background, skin, torso, object, spare.
pub const RGB_SKIN: u8 = 1;
pub const RGB_TORSO: u8 = 2;
pub const RGB_OBJECT: u8 = 3;

/// Structure palette order: black, white, object.
pub fn hoi_colors(p: &Palette) -> [Rgb; 3] {
    [BLACK, WHITE, p.object]
}

/// Largest 8-connected component of `mask`.
pub fn largest_component(mask: &[bool], size: usize) -> Vec<bool> {
    let mut comp = vec![usize::MAX; mask.len()];
    let mut best = (0usize, usize::MAX);
    let mut stack = Vec::new();
    let mut id = 0;
    for start in 0..mask.len() {
        if !mask[start] || comp[start] != usize::MAX {
            continue;
        }
        let mut count = 0;
        comp[start] = id;
        stack.push(start);
        while let Some(i) = stack.pop() {
            count += 1;
            let (x, y) = ((i % size) as i32, (i / size) as i32);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= size as i32 || ny >= size as i32 {
                        continue;
                    }
                    let j = ny as usize * size + nx as usize;
                    if mask[j] && comp[j] == usize::MAX {
                        comp[j] = id;
                        stack.push(j);
                    }
                }
            }
        }
        if count > best.0 {
            best = (count, id);
        }
        id += 1;
    }
    comp.iter().map(|c| *c == best.1).collect()
}

/// Pixels with mask pixels on both sides along their row and their column.
pub fn orthogonal_hull(mask: &[bool], size: usize) -> Vec<bool> {
    let mut row = vec![false; mask.len()];
    let mut col = vec![false; mask.len()];
    for y in 0..size {
        let r = &mask[y * size..(y + 1) * size];
        if let (Some(a), Some(b)) = (r.iter().position(|m| *m), r.iter().rposition(|m| *m)) {
            for x in a..=b {
                row[y * size + x] = true;
            }
        }
    }
    for x in 0..size {
        let ys: Vec<usize> = (0..size).filter(|&y| mask[y * size + x]).collect();
        if let (Some(a), Some(b)) = (ys.first(), ys.last()) {
            for y in *a..=*b {
                col[y * size + x] = true;
            }
        }
    }
    row.iter().zip(&col).map(|(a, b)| *a && *b).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FramePenetration {
    pub overlap: usize,
    pub segmentable: bool,
}

impl FramePenetration {
    pub fn violates(&self) -> bool {
        self.overlap > CONTACT_BAND + PENETRATION_SLACK
    }
}

/// Skin pixels lying inside the object's region. The hand is drawn over the
/// object, so the region is recovered as the orthogonal hull of the largest
/// object-colored component.
pub fn frame_penetration(frame: &[u8], size: usize, palette: &Palette) -> FramePenetration {
    let seg = segment(frame, &palette.colors());
    let object = largest_component(&seg.mask(RGB_OBJECT), size);
    let hull = orthogonal_hull(&object, size);
    let overlap = seg.class.iter().zip(&hull).filter(|(c, h)| **c == RGB_SKIN && **h).count();
    FramePenetration { overlap, segmentable: seg.segmentable() }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PenetrationReport {
    pub frames: usize,
    pub violating: usize,
    pub unsegmentable: usize,
    /// Violating fraction of segmentable frames.
    pub rate: f64,
}

pub fn penetration_rate(clips: &[&Frames], palette: &Palette) -> PenetrationReport {
    let mut r = PenetrationReport::default();
    for fr in clips {
        for f in 0..fr.n {
            let p = frame_penetration(fr.frame(f), fr.w, palette);
            r.frames += 1;
            if !p.segmentable {
                r.unsegmentable += 1;
            } else if p.violates() {
                r.violating += 1;
            }
        }
    }
    let seg = r.frames - r.unsegmentable;
    r.rate = if seg == 0 { 0.0 } else { r.violating as f64 / seg as f64 };
    r
}

pub fn iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let uni = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if uni == 0 {
        1.0
    } else {
        inter as f64 / uni as f64
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AlignmentReport {
    pub frames: usize,
    pub unsegmentable: usize,
    pub mean_iou: f64,
    /// Expected IoU of independent random masks with the same areas.
    pub random_baseline: f64,
}

/// Silhouette of a structure frame and person mask of an RGB frame.
pub fn person_masks(hoi: &[u8], rgb: &[u8], palette: &Palette) -> (Vec<bool>, Vec<bool>, bool) {
    let hs = segment(hoi, &hoi_colors(palette));
    let rs = segment(rgb, &palette.colors());
    let sil = hs.mask(1);
    let person: Vec<bool> = rs.class.iter().map(|c| *c == RGB_SKIN || *c == RGB_TORSO).collect();
    (sil, person, hs.segmentable() && rs.segmentable())
}

/// Frame-averaged IoU between paired structure and RGB frames, plus a
/// Monte-Carlo baseline drawn with `trials` mask pairs per frame.
pub fn hoi_rgb_alignment(pairs: &[(&Frames, &Frames)], palette: &Palette, trials: usize, seed: u64) -> AlignmentReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = AlignmentReport::default();
    let (mut sum, mut base) = (0.0, 0.0);
    for (hoi, rgb) in pairs {
        for f in 0..hoi.n.min(rgb.n) {
            let (sil, person, ok) = person_masks(hoi.frame(f), rgb.frame(f), palette);
            r.frames += 1;
            if !ok {
                r.unsegmentable += 1;
            }
            sum += iou(&sil, &person);
            let n = sil.len() as f64;
            let p = sil.iter().filter(|x| **x).count() as f64 / n;
            let q = person.iter().filter(|x| **x).count() as f64 / n;
            let mut acc = 0.0;
            for _ in 0..trials {
                let a: Vec<bool> = (0..sil.len()).map(|_| rng.random_bool(p)).collect();
                let b: Vec<bool> = (0..sil.len()).map(|_| rng.random_bool(q)).collect();
                acc += iou(&a, &b);
            }
            base += acc / trials.max(1) as f64;
        }
    }
    let n = r.frames.max(1) as f64;
    r.mean_iou = sum / n;
    r.random_baseline = base / n;
    r
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RoutingReport {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
    /// Counts per true label `[Head, Hand, Base]`.
    pub label_counts: [usize; 3],
    /// Every scored token carries the same label.
    pub class_collapse: bool,
}

/// Argmax routing accuracy on labeled generated tokens, pooled over blocks,
/// with the generated tokens at time `t` (`t = 1` is clean data).
pub fn routing_accuracy<T: Real>(
    model: &ModelState<T>,
    clips: &[(TokenSequence<T>, Vec<T>)],
    mode: ForwardMode,
    t: T,
    noise_seed: u64,
) -> Result<RoutingReport, ModelError> {
    let mut r = RoutingReport::default();
    for (k, (clean, cond)) in clips.iter().enumerate() {
        let seq = if mode == ForwardMode::RgbOnly { clean.rgb_only() } else { clean.clone() };
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed ^ (k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let noised = crate::objectives::noise_clip(&seq, t, &mut rng);
        let input = ForwardInput { seq: &noised.seq, t, cond: Cond::Vector(cond), mode, phase: Phase::Infer };
        let pred = model.forward(&input)?;
        for probs in &pred.route_probs {
            for (p, y) in probs.chunks_exact(3).zip(&seq.labels) {
                if let Some(y) = y {
                    r.total += 1;
                    r.label_counts[y.index()] += 1;
                    if argmax_region(p) == *y {
                        r.correct += 1;
                    }
                }
            }
        }
    }
    r.accuracy = if r.total == 0 { 0.0 } else { r.correct as f64 / r.total as f64 };
    r.class_collapse = r.label_counts.iter().filter(|c| **c > 0).count() <= 1;
    Ok(r)
}

/// Per-label share of scored tokens, in `[Head, Hand, Base]` order.
pub fn label_shares(r: &RoutingReport) -> [f64; 3] {
    let n = r.label_counts.iter().sum::<usize>().max(1) as f64;
    [RegionLabel::Head, RegionLabel::Hand, RegionLabel::Base].map(|l| r.label_counts[l.index()] as f64 / n)
}
