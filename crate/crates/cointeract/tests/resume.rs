mod common;

use cointeract::checkpoint::load;
use cointeract::trainer::{read_metrics, Trainer, FINAL_CKPT, LATEST_CKPT, METRICS_FILE};
use cointeract::Error;
use common::tiny_run_config;

#[test]
fn interrupted_run_matches_an_uninterrupted_one() {
    let cfg = tiny_run_config();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    Trainer::new(&cfg).unwrap().run(a.path(), usize::MAX, |_| {}).unwrap();

    // stop inside stage 2, then resume from the checkpoint
    Trainer::new(&cfg).unwrap().run(b.path(), 4, |_| {}).unwrap();
    assert!(!b.path().join(FINAL_CKPT).exists());
    let mut t = Trainer::resume(&cfg, &b.path().join(LATEST_CKPT)).unwrap();
    assert_eq!(t.iteration, 4);
    t.run(b.path(), usize::MAX, |_| {}).unwrap();

    let read = |d: &std::path::Path| std::fs::read_to_string(d.join(METRICS_FILE)).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
    assert_eq!(read_metrics(&a.path().join(METRICS_FILE)).unwrap().len(), 6);
    let (ca, cb) = (load(&a.path().join(FINAL_CKPT), None).unwrap(), load(&b.path().join(FINAL_CKPT), None).unwrap());
    assert_eq!(ca.model.params, cb.model.params);
    assert_eq!(ca.opt.unwrap().m, cb.opt.unwrap().m);
    assert_eq!(ca.header.iteration, 6);
}

#[test]
fn resume_refuses_a_different_config() {
    let cfg = tiny_run_config();
    let dir = tempfile::tempdir().unwrap();
    Trainer::new(&cfg).unwrap().run(dir.path(), 2, |_| {}).unwrap();
    let mut other = cfg.clone();
    other.train.lr = 0.5;
    let err = Trainer::resume(&other, &dir.path().join(LATEST_CKPT)).err().unwrap();
    assert!(matches!(err, Error::ConfigMismatch { .. }), "{err}");
}
