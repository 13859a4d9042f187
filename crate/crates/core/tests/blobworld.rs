use cointeract_core::blobworld::{
    generate_clip, overlap_pixels, Blob, ClipRecord, ObjectShape, Palette, ScenePlan, SceneSpec, BLACK, CONTACT_BAND,
    WHITE,
};
use cointeract_core::metrics::penetration_rate;
use cointeract_core::tokenization::{label_tokens, tokenize_clip, RegionLabel, StreamMode, TokenLayout};
use proptest::prelude::*;

fn inside(b: &Blob, x: i32, y: i32) -> bool {
    match *b {
        Blob::Disc { cx, cy, r } => (x - cx).pow(2) + (y - cy).pow(2) <= r * r,
        Blob::Rect { x0, y0, w, h } => (x0..x0 + w).contains(&x) && (y0..y0 + h).contains(&y),
    }
}

#[test]
fn hundred_seeds_respect_contact_and_have_no_penetration() {
    let spec = SceneSpec::default();
    for seed in 0..100 {
        let s = spec.with_seed(seed);
        let plan = ScenePlan::new(&s).unwrap();
        for f in -(s.n_motion as i32)..s.num_frames as i32 {
            let g = plan.frame(f);
            for h in &g.hands {
                assert!(overlap_pixels(h, &g.object, 32) <= CONTACT_BAND, "seed {seed} frame {f}");
            }
        }
        let clip = plan.render();
        let r = penetration_rate(&[&clip.rgb_frames], &spec.palette);
        assert_eq!((r.violating, r.unsegmentable, r.rate), (0, 0, 0.0), "seed {seed}");
    }
}

#[test]
fn rasterized_masks_match_the_shape_equations() {
    let blobs = [
        Blob::Disc { cx: 5, cy: 7, r: 3 },
        Blob::Disc { cx: 0, cy: 31, r: 4 },
        Blob::Rect { x0: 3, y0: 2, w: 6, h: 4 },
        Blob::Rect { x0: 29, y0: -2, w: 6, h: 5 },
    ];
    for b in blobs {
        let m = b.mask(32);
        for y in 0..32 {
            for x in 0..32 {
                assert_eq!(m[y * 32 + x], inside(&b, x as i32, y as i32), "{b:?} ({x}, {y})");
            }
        }
    }
}

/// Painter's order written out per pixel.
fn expected_pixel(clip_plan: &ScenePlan, f: i32, x: i32, y: i32, p: &Palette) -> ([u8; 3], [u8; 3]) {
    let g = clip_plan.frame(f);
    let person = inside(&g.torso, x, y) || inside(&g.head, x, y) || g.hands.iter().any(|h| inside(h, x, y));
    let rgb = if g.hands.iter().any(|h| inside(h, x, y)) || inside(&g.head, x, y) {
        p.skin
    } else if inside(&g.torso, x, y) {
        p.torso
    } else if inside(&g.object, x, y) {
        p.object
    } else {
        p.background
    };
    let hoi = if person {
        WHITE
    } else if inside(&g.object, x, y) {
        p.object
    } else {
        BLACK
    };
    (rgb, hoi)
}

#[test]
fn rendered_streams_match_the_geometry() {
    for (seed, shape, two) in [(1, ObjectShape::Rect, false), (2, ObjectShape::Disc, false), (3, ObjectShape::Rect, true)] {
        let spec = SceneSpec { object_shape: shape, two_hands: two, ..SceneSpec::default() }.with_seed(seed);
        let plan = ScenePlan::new(&spec).unwrap();
        let clip = plan.render();
        for f in 0..spec.num_frames {
            for y in 0..32 {
                for x in 0..32 {
                    let (rgb, hoi) = expected_pixel(&plan, f as i32, x as i32, y as i32, &spec.palette);
                    assert_eq!(clip.rgb_frames.pixel(f, x, y), rgb);
                    assert_eq!(clip.hoi_frames.pixel(f, x, y), hoi);
                }
            }
        }
        for m in 0..spec.n_motion {
            for y in 0..32 {
                for x in 0..32 {
                    let (rgb, _) = expected_pixel(&plan, m as i32 - spec.n_motion as i32, x as i32, y as i32, &spec.palette);
                    assert_eq!(clip.motion_frames.pixel(m, x, y), rgb);
                }
            }
        }
    }
}

#[test]
fn boxes_are_tight_around_head_and_hands() {
    let spec = SceneSpec { two_hands: true, ..SceneSpec::default() }.with_seed(4);
    let plan = ScenePlan::new(&spec).unwrap();
    let clip = plan.render();
    for f in 0..spec.num_frames {
        let g = plan.frame(f as i32);
        let boxes: Vec<_> = ClipRecord::boxes_in_frame(&clip.hand_boxes, f).collect();
        for (b, h) in boxes.iter().zip(&g.hands) {
            let px: Vec<(usize, usize)> =
                (0..32).flat_map(|y| (0..32).map(move |x| (x, y))).filter(|&(x, y)| inside(h, x as i32, y as i32)).collect();
            assert_eq!(b.x0, px.iter().map(|p| p.0).min().unwrap());
            assert_eq!(b.x1, px.iter().map(|p| p.0).max().unwrap() + 1);
            assert_eq!(b.y0, px.iter().map(|p| p.1).min().unwrap());
            assert_eq!(b.y1, px.iter().map(|p| p.1).max().unwrap() + 1);
        }
        let head: Vec<_> = ClipRecord::boxes_in_frame(&clip.head_boxes, f).collect();
        assert_eq!(head.len(), 1);
        assert!(head[0].contains(g.head.extent().0 as usize + 3, g.head.extent().1 as usize + 3));
    }
}

#[test]
fn token_labels_follow_pixel_membership() {
    for seed in 0..20 {
        let clip = generate_clip(&SceneSpec::default().with_seed(seed)).unwrap();
        let layout = TokenLayout::new(8, 8, 8, 2);
        let labels = label_tokens(&clip.head_boxes, &clip.hand_boxes, &layout, 4).unwrap();
        let mut k = 0;
        for f in 0..8 {
            for i in 0..8 {
                for j in 0..8 {
                    let pixels = || (4 * i..4 * i + 4).flat_map(move |y| (4 * j..4 * j + 4).map(move |x| (x, y)));
                    let any_in = |boxes: &[_]| {
                        ClipRecord::boxes_in_frame(boxes, f).any(|b: cointeract_core::blobworld::PixelBox| pixels().any(|(x, y)| b.contains(x, y)))
                    };
                    let want = if any_in(&clip.hand_boxes) {
                        RegionLabel::Hand
                    } else if any_in(&clip.head_boxes) {
                        RegionLabel::Head
                    } else {
                        RegionLabel::Base
                    };
                    assert_eq!(labels[k], want, "seed {seed} token {k}");
                    k += 1;
                }
            }
        }
        assert!(labels.contains(&RegionLabel::Hand) && labels.contains(&RegionLabel::Head));
        let seq = tokenize_clip::<f32>(&clip, 4, None, StreamMode::Dual).unwrap();
        assert_eq!(seq.labels[..512], labels.iter().map(|l| Some(*l)).collect::<Vec<_>>()[..]);
        assert_eq!(seq.labels[768..], seq.labels[..512]);
        assert!(seq.labels[512..768].iter().all(|l| l.is_none()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn generation_is_a_pure_function_of_the_spec(seed in any::<u64>()) {
        let spec = SceneSpec::default().with_seed(seed);
        match (generate_clip(&spec), generate_clip(&spec)) {
            (Ok(a), Ok(b)) => prop_assert_eq!(a, b),
            (Err(a), Err(b)) => prop_assert_eq!(a, b),
            _ => prop_assert!(false, "outcome differs between calls"),
        }
    }

    #[test]
    fn structure_frames_use_three_colors(seed in 0u64..10_000) {
        let spec = SceneSpec::default().with_seed(seed);
        if let Ok(clip) = generate_clip(&spec) {
            for px in clip.hoi_frames.data.chunks_exact(3) {
                let c = [px[0], px[1], px[2]];
                prop_assert!(c == BLACK || c == WHITE || c == spec.palette.object);
            }
        }
    }
}
