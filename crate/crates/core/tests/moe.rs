use cointeract_core::backbone::{Cond, ForwardInput, ForwardMode, ModelConfig, ModelState};
use cointeract_core::blobworld::{generate_clip, SceneSpec};
use cointeract_core::humoe::{
    argmax_region, dispatch, moe_forward, param_overhead, route, routing_loss, routing_loss_grad, DispatchTrain,
    ExpertSet, Ffn, MoeError, Router, Routing,
};
use cointeract_core::params::{Init, ParamGroup, ParamTable};
use cointeract_core::tokenization::{tokenize_clip, StreamMode};
use cointeract_core::{Phase, RegionLabel};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const D: usize = 8;

fn expert_set(t: &mut ParamTable) -> ExpertSet {
    let mut ffn = |name: &str, hidden: usize| Ffn {
        fc1: t.linear(&format!("{name}.fc1"), D, hidden, ParamGroup::Expert, Init::Zeros),
        fc2: t.linear(&format!("{name}.fc2"), hidden, D, ParamGroup::Expert, Init::Zeros),
    };
    let shared = ffn("shared", 4 * D);
    ExpertSet { shared, light: Some([ffn("head", 16), ffn("hand", 16), ffn("base", 16)]) }
}

fn random_params(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-0.5..0.5)).collect()
}

#[test]
fn zero_output_layers_leave_the_shared_path() {
    let mut t = ParamTable::default();
    let ex = expert_set(&mut t);
    let mut p = random_params(t.total, 1);
    for f in ex.light.unwrap() {
        for id in [f.fc2.w, f.fc2.b] {
            p[t.range(id)].iter_mut().for_each(|x| *x = 0.0);
        }
    }
    let x = random_params(5 * D, 2);
    let labels = [Some(RegionLabel::Head), Some(RegionLabel::Hand), Some(RegionLabel::Base), Some(RegionLabel::Hand), Some(RegionLabel::Head)];
    let y = moe_forward(&ex, &t, &p, &x, 5, Routing::Labels(&labels), Phase::Train).unwrap();
    let (shared, _) = ex.shared.forward(&t, &p, &x, 5);
    assert_eq!(y, shared);
}

#[test]
fn same_input_differs_only_through_its_expert() {
    let mut t = ParamTable::default();
    let ex = expert_set(&mut t);
    let p = random_params(t.total, 3);
    let row = random_params(D, 4);
    let x: Vec<f64> = row.iter().chain(&row).copied().collect();
    let run = |a, b| moe_forward(&ex, &t, &p, &x, 2, Routing::Labels(&[Some(a), Some(b)]), Phase::Train).unwrap();
    let y = run(RegionLabel::Hand, RegionLabel::Base);
    assert_ne!(y[..D], y[D..]);
    let y = run(RegionLabel::Base, RegionLabel::Base);
    assert_eq!(y[..D], y[D..]);

    // identical hand and base experts make the outputs coincide
    let mut q = p.clone();
    let [_, hand, base] = ex.light.unwrap();
    for (src, dst) in [(base.fc1.w, hand.fc1.w), (base.fc1.b, hand.fc1.b), (base.fc2.w, hand.fc2.w), (base.fc2.b, hand.fc2.b)] {
        let v = p[t.range(src)].to_vec();
        q[t.range(dst)].copy_from_slice(&v);
    }
    let y = moe_forward(&ex, &t, &q, &x, 2, Routing::Labels(&[Some(RegionLabel::Hand), Some(RegionLabel::Base)]), Phase::Train).unwrap();
    assert_eq!(y[..D], y[D..]);
}

#[test]
fn phase_requirements_are_enforced() {
    let mut t = ParamTable::default();
    let ex = expert_set(&mut t);
    let p = random_params(t.total, 5);
    let x = random_params(2 * D, 6);
    let labels = [Some(RegionLabel::Head), None];
    assert_eq!(moe_forward(&ex, &t, &p, &x, 2, Routing::Labels(&labels), Phase::Train), Err(MoeError::MissingLabel(1)));
    assert_eq!(moe_forward(&ex, &t, &p, &x, 2, Routing::Labels(&labels), Phase::Infer), Err(MoeError::MissingProbs));
    let probs = [0.2, 0.5, 0.3, 0.6, 0.2, 0.2];
    assert!(moe_forward(&ex, &t, &p, &x, 2, Routing::Probs(&probs), Phase::Infer).is_ok());
    assert!(moe_forward(&ex, &t, &p, &x, 2, Routing::Probs(&probs[..3]), Phase::Infer).is_err());
}

#[test]
fn uniform_routing_costs_ln_three() {
    let (l, n) = routing_loss(&route(&[0.0f64; 12]), &[Some(RegionLabel::Head), Some(RegionLabel::Hand), Some(RegionLabel::Base), Some(RegionLabel::Base)]);
    assert_eq!(n, 4);
    assert!((l - 3f64.ln()).abs() < 1e-12);
    assert!((l - 1.0986).abs() < 1e-4);
}

#[test]
fn hand_computed_batch_of_four() {
    let probs = [0.7, 0.2, 0.1, 0.1, 0.6, 0.3, 0.2, 0.3, 0.5, 0.25, 0.25, 0.5, 0.9, 0.05, 0.05];
    let labels = [Some(RegionLabel::Head), Some(RegionLabel::Hand), Some(RegionLabel::Base), Some(RegionLabel::Head), None];
    // -ln 0.7, -ln 0.6, -ln 0.5, -ln 0.25
    let terms = [0.356_674_943_938_732_4, 0.510_825_623_765_990_7, std::f64::consts::LN_2, 1.386_294_361_119_890_6];
    let want = terms.iter().sum::<f64>() / 4.0;
    let (got, n) = routing_loss(&probs, &labels);
    assert_eq!(n, 4);
    assert!((got - want).abs() < 1e-12);
    assert!((got - 0.736_735_527_346_139_8).abs() < 1e-12);
}

#[test]
fn analytic_parameter_overhead() {
    let cfg = ModelConfig::default();
    let mut off = cfg.clone();
    off.moe.enabled = false;
    let with = ModelState::<f32>::init(&cfg, 0).unwrap();
    let without = ModelState::<f32>::init(&off, 0).unwrap();
    let r = param_overhead(with.table(), without.table(), cfg.depth);
    let (d, eh, rh) = (64, 256, 64);
    let router = d * rh + rh + rh * 3 + 3;
    let per_block = 3 * (2 * d * eh + eh + d) + router;
    assert_eq!(r.per_block, vec![per_block; 4]);
    assert_eq!(r.params_with - r.params_without, 4 * per_block);
    assert_eq!(r.ratio, (4 * per_block) as f64 / r.params_without as f64);

    let same = param_overhead(without.table(), without.table(), cfg.depth);
    assert_eq!(same.ratio, 0.0);
}

#[test]
fn zeroed_experts_equal_the_expert_free_model() {
    let cfg = ModelConfig::default();
    let mut off = cfg.clone();
    off.moe.enabled = false;
    let mut with = ModelState::<f32>::init(&cfg, 3).unwrap();
    with.randomize_all(4, 0.05);
    for s in with.table().specs.clone() {
        if s.group == ParamGroup::Expert && s.name.contains(".fc2.") {
            with.params[s.range()].iter_mut().for_each(|x| *x = 0.0);
        }
    }
    let mut without = ModelState::<f32>::init(&off, 99).unwrap();
    for s in without.table().specs.clone() {
        let src = with.table().find(&s.name).expect("parameter exists in both models");
        let v = with.slice(src).to_vec();
        without.params[s.range()].copy_from_slice(&v);
    }
    let clip = generate_clip(&SceneSpec::default().with_seed(8)).unwrap();
    let dual = tokenize_clip::<f32>(&clip, 4, None, StreamMode::Dual).unwrap();
    let single = dual.rgb_only();
    for (seq, mode) in [(&dual, ForwardMode::DualAsymmetric), (&dual, ForwardMode::DualFull), (&single, ForwardMode::RgbOnly)] {
        for phase in [Phase::Train, Phase::Infer] {
            let input = ForwardInput { seq, t: 0.4, cond: Cond::Vector(&clip.cond_vec), mode, phase };
            let a = with.forward(&input).unwrap().velocity;
            let b = without.forward(&input).unwrap().velocity;
            assert_eq!(a, b, "{mode:?} {phase:?}");
        }
    }
}

/// Router fitted on three separable clusters until every token is routed to
/// its label; training and inference dispatch then agree.
#[test]
fn converged_router_dispatches_like_the_labels() {
    let mut t = ParamTable::default();
    let router = Router {
        fc1: t.linear("r.fc1", D, 16, ParamGroup::Router, Init::Zeros),
        fc2: t.linear("r.fc2", 16, 3, ParamGroup::Router, Init::Zeros),
    };
    let mut p = random_params(t.total, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let rows = 64;
    let labels: Vec<Option<RegionLabel>> = (0..rows).map(|i| Some(RegionLabel::from_index(i % 3))).collect();
    let mut h = vec![0.0f64; rows * D];
    for i in 0..rows {
        for c in 0..D {
            let centre = if c == i % 3 { 2.0 } else { 0.0 };
            h[i * D + c] = centre + rng.random_range(-0.3..0.3);
        }
    }
    let mut acc = 0.0;
    for _ in 0..2000 {
        let tape = router.route(&t, &p, &h, rows);
        let hits = tape.probs.chunks_exact(3).zip(&labels).filter(|(g, y)| argmax_region(g) == y.unwrap()).count();
        acc = hits as f64 / rows as f64;
        if acc == 1.0 && routing_loss(&tape.probs, &labels).0 < 0.05 {
            break;
        }
        let dl = routing_loss_grad(&tape.probs, &labels, 1.0);
        let mut g = vec![0.0; t.total];
        router.backward(&t, &p, &mut g, &h, &tape, &dl, rows);
        for (w, gw) in p.iter_mut().zip(&g) {
            *w -= 0.5 * gw;
        }
    }
    assert_eq!(acc, 1.0);
    let probs = router.route(&t, &p, &h, rows).probs;
    let train = dispatch(&probs, &labels, Phase::Train, DispatchTrain::Labels);
    let infer = dispatch(&probs, &labels, Phase::Infer, DispatchTrain::Labels);
    assert_eq!(train, infer);
}

proptest! {
    #[test]
    fn argmax_picks_first_maximum(p in prop::array::uniform3(0u8..4)) {
        let g = [p[0] as f64, p[1] as f64, p[2] as f64];
        let mx = g.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let first = g.iter().position(|x| *x == mx).unwrap();
        prop_assert_eq!(argmax_region(&g), RegionLabel::from_index(first));
    }

    #[test]
    fn probabilities_sum_to_one(logits in prop::collection::vec(-30.0f64..30.0, 3..=30)) {
        let n = logits.len() / 3 * 3;
        let g = route(&logits[..n]);
        for row in g.chunks_exact(3) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-7);
        }
    }

    #[test]
    fn dispatch_is_a_pure_function(logits in prop::collection::vec(-3.0f64..3.0, 12)) {
        let g = route(&logits);
        let none = [None; 4];
        let a = dispatch(&g, &none, Phase::Infer, DispatchTrain::Labels);
        let b = dispatch(&g, &none, Phase::Train, DispatchTrain::Argmax);
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a, g.chunks_exact(3).map(argmax_region).collect::<Vec<_>>());
    }
}
