mod common;

use cointeract::checkpoint::{load, save, Timing};
use cointeract::trainer::Trainer;
use cointeract::Error;
use cointeract_core::{Cond, ForwardInput, ForwardMode, Phase};
use common::tiny_run_config;

#[test]
fn round_trip_keeps_weights_optimizer_and_forward() {
    let cfg = tiny_run_config();
    let mut t = Trainer::new(&cfg).unwrap();
    for _ in 0..2 {
        t.step().unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.cikp");
    let timing = Timing { stage_secs: [1.5, 0.0], cpu_secs: 2.0 };
    save(&path, &cfg, &t.model, Some(&t.opt), t.iteration, timing).unwrap();
    let ck = load(&path, Some(&cfg)).unwrap();
    assert_eq!(ck.model.params, t.model.params);
    let opt = ck.opt.unwrap();
    assert_eq!((opt.m, opt.v, opt.step), (t.opt.m.clone(), t.opt.v.clone(), t.opt.step));
    assert_eq!(ck.header.iteration, 2);
    assert_eq!((ck.header.stage_secs, ck.header.cpu_secs), ([1.5, 0.0], 2.0));
    assert_eq!(ck.header.config, cfg);

    let h = cointeract::eval::heldout(&cfg, 1).unwrap().remove(0);
    let input = ForwardInput { seq: &h.seq, t: 0.3, cond: Cond::Vector(&h.clip.cond_vec), mode: ForwardMode::DualAsymmetric, phase: Phase::Infer };
    assert_eq!(ck.model.forward(&input).unwrap().velocity, t.model.forward(&input).unwrap().velocity);
}

#[test]
fn header_lists_every_parameter() {
    let cfg = tiny_run_config();
    let t = Trainer::new(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.cikp");
    save(&path, &cfg, &t.model, None, 0, Timing::default()).unwrap();
    let ck = load(&path, None).unwrap();
    assert!(ck.opt.is_none());
    let specs = &t.model.table().specs;
    assert_eq!(ck.header.params.len(), specs.len());
    for (e, s) in ck.header.params.iter().zip(specs) {
        assert_eq!((&e.name, &e.shape, e.offset), (&s.name, &s.shape, s.offset));
    }
    assert_eq!(ck.header.total, t.model.params.len());
    assert_eq!(ck.header.dtype, "f32");
}

#[test]
fn truncated_and_foreign_files_are_rejected() {
    let cfg = tiny_run_config();
    let t = Trainer::new(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.cikp");
    save(&path, &cfg, &t.model, Some(&t.opt), 0, Timing::default()).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    for cut in [0, 10, 40, bytes.len() - 1] {
        let p = dir.path().join(format!("cut{cut}.cikp"));
        std::fs::write(&p, &bytes[..cut]).unwrap();
        match load(&p, None) {
            Err(Error::Checkpoint(m)) => assert!(m.contains("truncated"), "{m}"),
            Err(e) => panic!("cut {cut}: {e}"),
            Ok(_) => panic!("cut {cut} loaded"),
        }
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    let p = dir.path().join("magic.cikp");
    std::fs::write(&p, &bad).unwrap();
    assert!(matches!(load(&p, None), Err(Error::Checkpoint(_))));
}

#[test]
fn model_hash_mismatch_is_reported() {
    let cfg = tiny_run_config();
    let t = Trainer::new(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.cikp");
    save(&path, &cfg, &t.model, None, 0, Timing::default()).unwrap();
    let mut other = cfg.clone();
    other.model.d_model = 24;
    assert!(matches!(load(&path, Some(&other)), Err(Error::ConfigMismatch { .. })));
    // training-only fields do not change the model hash
    let mut lr = cfg.clone();
    lr.train.lr = 1.0;
    assert!(load(&path, Some(&lr)).is_ok());
}
