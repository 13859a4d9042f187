#![allow(dead_code)]

use cointeract_core::backbone::{ModelConfig, ModelState};
use cointeract_core::humoe::MoeConfig;
use cointeract_core::params::ParamGroup;
use cointeract_core::tokenization::{sequence_roles, RegionLabel, StreamMode, TokenLayout, TokenSequence};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// d = 8, one head, patch 2 on a 4x4 canvas, one frame, one motion frame:
/// 20 tokens in dual layout.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        patch: 2,
        channels: 3,
        d_model: 8,
        depth: 2,
        heads: 1,
        ffn_mult: 4,
        cond_dim: 3,
        t_freq_dim: 8,
        rope_base: 100.0,
        ln_eps: 1e-6,
        moe: MoeConfig { expert_hidden: 16, router_hidden: 8, ..MoeConfig::default() },
    }
}

pub fn tiny_layout() -> TokenLayout {
    TokenLayout::new(1, 2, 2, 1)
}

pub fn random_sequence(layout: &TokenLayout, patch_dim: usize, mode: StreamMode, seed: u64) -> TokenSequence<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (roles, coords) = sequence_roles(layout, mode).unwrap();
    let n = roles.len();
    let patches = (0..n * patch_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let gen = layout.gen_tokens();
    let gen_labels: Vec<RegionLabel> = (0..gen).map(|_| RegionLabel::from_index(rng.random_range(0..3))).collect();
    let labels = roles
        .iter()
        .enumerate()
        .map(|(i, r)| match r {
            cointeract_core::TokenRole::RgbGen => Some(gen_labels[i]),
            cointeract_core::TokenRole::HoiGen => Some(gen_labels[i - (n - gen)]),
            _ => None,
        })
        .collect();
    TokenSequence { patches, patch_dim, coords, roles, labels }
}

pub fn random_model(cfg: &ModelConfig, seed: u64) -> ModelState<f64> {
    let mut m = ModelState::<f64>::init(cfg, seed).unwrap();
    m.randomize_all(seed ^ 0xABCD, 0.4);
    m
}

pub fn group_norm(model: &ModelState<f64>, g: &[f64], group: ParamGroup) -> f64 {
    model
        .table()
        .specs
        .iter()
        .filter(|s| s.group == group)
        .flat_map(|s| g[s.range()].iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

pub fn group_max_abs(model: &ModelState<f64>, g: &[f64], group: ParamGroup) -> f64 {
    model
        .table()
        .specs
        .iter()
        .filter(|s| s.group == group)
        .flat_map(|s| g[s.range()].iter())
        .fold(0.0f64, |a, x| a.max(x.abs()))
}
