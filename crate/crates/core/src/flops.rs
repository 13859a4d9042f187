//! Closed-form inference cost in multiply-add FLOPs (2 per MAC).
//!
//! Only matrix products are counted; normalization, softmax and elementwise
//! work are ignored.

use alloc::vec::Vec;

use crate::backbone::ModelConfig;
use crate::tokenization::{StreamMode, TokenLayout};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlopReport {
    pub tokens: u64,
    /// `QK^T` and `PV`, all blocks.
    pub attention: u64,
    /// q, k, v, o projections, all blocks.
    pub projections: u64,
    pub ffn: u64,
    /// Routed light experts plus routers.
    pub moe: u64,
    /// Patch embedding, output heads, conditioning and modulation maps.
    pub io: u64,
    pub per_pass: u64,
    pub passes: u64,
    pub total: u64,
}

/// `QK^T` plus `PV` for one block: `4 n^2 d`.
pub fn attention_term(n: u64, d: u64) -> u64 {
    4 * n * n * d
}

/// Cost of `steps` denoising steps with `passes_per_step` forward passes
/// (2 with guidance).
pub fn flop_account(
    cfg: &ModelConfig,
    layout: &TokenLayout,
    mode: StreamMode,
    steps: u64,
    passes_per_step: u64,
) -> FlopReport {
    let n = layout.seq_len(mode) as u64;
    let n_gen_rgb = layout.gen_tokens() as u64;
    let n_gen = match mode {
        StreamMode::Dual => 2 * n_gen_rgb,
        StreamMode::RgbOnly => n_gen_rgb,
    };
    let streams: u64 = if mode == StreamMode::Dual { 2 } else { 1 };
    let d = cfg.d_model as u64;
    let depth = cfg.depth as u64;
    let pd = cfg.patch_dim() as u64;

    let attention = depth * attention_term(n, d);
    let projections = depth * 4 * 2 * n * d * d;
    let ffn = depth * 2 * 2 * n * d * (cfg.ffn_mult as u64 * d);
    let moe = if cfg.moe.enabled {
        let eh = cfg.moe.expert_hidden as u64;
        let rh = cfg.moe.router_hidden as u64;
        depth * (2 * 2 * n * d * eh + 2 * n * (d * rh + rh * 3))
    } else {
        0
    };
    let cond = 2 * (cfg.t_freq_dim as u64 * d + d * d) + 2 * cfg.cond_dim as u64 * d;
    let mods = streams * (depth * 2 * d * 6 * d + 2 * d * 2 * d);
    let io = 2 * n * pd * d + 2 * n_gen * d * pd + cond + mods;
    let per_pass = attention + projections + ffn + moe + io;
    let passes = steps * passes_per_step;
    FlopReport { tokens: n, attention, projections, ffn, moe, io, per_pass, passes, total: per_pass * passes }
}

/// One row of the inference-cost comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct CostRow {
    pub name: &'static str,
    pub report: FlopReport,
    /// Relative to the configuration without experts.
    pub ratio: f64,
    pub paper_ratio: Option<f64>,
}

/// Full model, no experts, no structure loss and no asymmetric mask (which
/// forces the dual sequence at inference).
pub fn cost_table(cfg: &ModelConfig, layout: &TokenLayout, steps: u64, passes_per_step: u64) -> Vec<CostRow> {
    let mut with = cfg.clone();
    with.moe.enabled = true;
    let mut without = cfg.clone();
    without.moe.enabled = false;
    let base = flop_account(&without, layout, StreamMode::RgbOnly, steps, passes_per_step);
    let rows = [
        ("full", flop_account(&with, layout, StreamMode::RgbOnly, steps, passes_per_step), Some(1.04)),
        ("w/o MoE", base, Some(1.00)),
        ("w/o Co-Gen", flop_account(&with, layout, StreamMode::RgbOnly, steps, passes_per_step), None),
        ("w/o Asym. Mask", flop_account(&with, layout, StreamMode::Dual, steps, passes_per_step), Some(4.13)),
    ];
    rows.into_iter()
        .map(|(name, report, paper_ratio)| CostRow {
            name,
            report,
            ratio: report.total as f64 / base.total as f64,
            paper_ratio,
        })
        .collect()
}
