mod common;

use cointeract_core::backbone::{Cond, ForwardInput, ForwardMode, ModelState};
use cointeract_core::objectives::{clip_loss, noise_clip, LossCoefs, NoisedClip};
use cointeract_core::params::ParamGroup;
use cointeract_core::tokenization::StreamMode;
use cointeract_core::Phase;
use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ROUTE_ONLY: LossCoefs = LossCoefs { r: 0.0, h: 0.0, route: 1.0 };

fn setup(seed: u64) -> (ModelState<f64>, NoisedClip<f64>) {
    let cfg = tiny_config();
    let clean = random_sequence(&tiny_layout(), cfg.patch_dim(), StreamMode::Dual, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (random_model(&cfg, seed), noise_clip(&clean, 0.6, &mut rng))
}

fn is_router(m: &ModelState<f64>, i: usize) -> bool {
    m.table().specs.iter().any(|s| s.group == ParamGroup::Router && s.range().contains(&i))
}

#[test]
fn arbitrary_router_output_gradient_stays_in_the_router() {
    for seed in 0..5 {
        let (m, clip) = setup(seed);
        let cond = [0.1, 0.2, -0.3];
        let input = ForwardInput { seq: &clip.seq, t: clip.t, cond: Cond::Vector(&cond), mode: ForwardMode::DualAsymmetric, phase: Phase::Train };
        let (pred, tape) = m.forward_with_tape(&input).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 50);
        let droute: Vec<Vec<f64>> =
            pred.route_probs.iter().map(|p| p.iter().map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let mut g = m.zeros_like();
        m.backward(&tape, &vec![0.0; pred.velocity.len()], Some(&droute), &mut g);
        let mut router_norm = 0.0;
        for (i, x) in g.iter().enumerate() {
            if is_router(&m, i) {
                router_norm += x * x;
            } else {
                assert_eq!(*x, 0.0, "seed {seed}: parameter {i} outside the router");
            }
        }
        assert!(router_norm > 0.0);
    }
}

#[test]
fn routing_loss_gradient_is_zero_before_the_router() {
    for seed in 0..5 {
        let (m, clip) = setup(seed);
        for mode in [ForwardMode::DualFull, ForwardMode::DualAsymmetric] {
            let (lb, g) = clip_loss(&m, &clip, Cond::Null, mode, ROUTE_ONLY, true).unwrap();
            assert!(lb.l_route > 0.0);
            let g = g.unwrap();
            for grp in ParamGroup::ALL.into_iter().filter(|g| *g != ParamGroup::Router) {
                assert_eq!(group_max_abs(&m, &g, grp), 0.0, "{grp:?}");
            }
            assert!(group_norm(&m, &g, ParamGroup::Router) > 0.0);
        }
    }
}

/// The numerical derivative through `h` is generally non-zero; the detached
/// gradient ignores it by construction. Router weights alone are checked
/// against central differences.
#[test]
fn router_gradient_matches_central_differences() {
    let (mut m, clip) = setup(9);
    let mode = ForwardMode::DualAsymmetric;
    let (_, g) = clip_loss(&m, &clip, Cond::Null, mode, ROUTE_ONLY, true).unwrap();
    let g = g.unwrap();
    let route = |m: &ModelState<f64>| clip_loss(m, &clip, Cond::Null, mode, ROUTE_ONLY, false).unwrap().0.l_route;
    let mut moved_backbone = false;
    for i in 0..m.params.len() {
        let orig = m.params[i];
        m.params[i] = orig + 1e-5;
        let lp = route(&m);
        m.params[i] = orig - 1e-5;
        let lm = route(&m);
        m.params[i] = orig;
        let fd = (lp - lm) / 2e-5;
        if is_router(&m, i) {
            assert!((fd - g[i]).abs() <= 1e-6 * (1.0 + fd.abs()), "param {i}: {fd} vs {}", g[i]);
        } else {
            assert_eq!(g[i], 0.0);
            moved_backbone |= fd.abs() > 1e-8;
        }
    }
    assert!(moved_backbone, "routing loss should depend numerically on the backbone");
}
