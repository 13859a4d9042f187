#![allow(dead_code)]

use cointeract::RunConfig;

/// A few seconds of training end to end: 4x4 patches on a 32px canvas,
/// five frames, one block.
pub fn tiny_run_config() -> RunConfig {
    let json = r#"{
        "data": {"num_frames": 5, "n_motion": 1, "cond_dim": 4, "train_clips": 6, "heldout_clips": 2},
        "model": {"patch": 8, "d_model": 16, "depth": 1, "heads": 2, "t_freq_dim": 8},
        "moe": {"expert_hidden": 8, "router_hidden": 8},
        "train": {"stage1_iters": 3, "stage2_iters": 3, "batch": 2, "lr": 0.003, "checkpoint_every": 0},
        "sample": {"steps": 2}
    }"#;
    let cfg: RunConfig = serde_json::from_str(json).unwrap();
    cfg.validate().unwrap();
    cfg
}
