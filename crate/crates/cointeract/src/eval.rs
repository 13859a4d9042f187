//! Evaluation suites and the versioned JSON report.

use std::time::Instant;

use cointeract_core::blobworld::{ClipRecord, Frames};
use cointeract_core::flops::{cost_table, flop_account, CostRow};
use cointeract_core::humoe::{param_overhead, OverheadReport, Phase};
use cointeract_core::metrics::{hoi_rgb_alignment, penetration_rate, routing_accuracy, AlignmentReport, PenetrationReport};
use cointeract_core::objectives::{clip_loss, noise_clip, LossCoefs};
use cointeract_core::params::ParamGroup;
use cointeract_core::sampling::{euler_integrate, SampleConfig, SampleOutput};
use cointeract_core::tokenization::{tokenize_clip, StreamMode, TokenLayout, TokenSequence};
use cointeract_core::{Cond, ForwardInput, ForwardMode, ModelConfig, ModelState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataset::generate_clips;
use crate::trainer::thread_pool;
use crate::Error;

pub const REPORT_VERSION: u32 = 1;
pub const ZERO_OVERHEAD_TOL: f64 = 1e-5;

/// A held-out clip with its clean dual-layout tokens.
pub struct HeldOut {
    pub clip: ClipRecord,
    pub seq: TokenSequence<f32>,
}

pub fn heldout(cfg: &RunConfig, count: usize) -> Result<Vec<HeldOut>, Error> {
    let seeds: Vec<u64> = cfg.data.heldout_seeds().into_iter().take(count).collect();
    generate_clips(&cfg.data.scene(), &seeds)?
        .into_iter()
        .map(|clip| {
            let seq = tokenize_clip(&clip, cfg.model.patch, None, StreamMode::Dual)?;
            Ok(HeldOut { clip, seq })
        })
        .collect()
}

pub fn layout(cfg: &RunConfig) -> TokenLayout {
    let hp = cfg.data.canvas_size / cfg.model.patch;
    TokenLayout::new(cfg.data.num_frames, hp, hp, cfg.data.n_motion)
}

/// Max-abs difference of RGB velocities between single-stream and
/// asymmetric dual-stream passes, each clip at its own random `t`.
pub fn zero_overhead_check(model: &ModelState<f32>, clips: &[HeldOut], seed: u64) -> Result<f64, Error> {
    let mut worst = 0.0f64;
    for (k, h) in clips.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
        let t: f32 = rng.random();
        let noised = noise_clip(&h.seq, t, &mut rng);
        let single = noised.seq.rgb_only();
        let cond = Cond::Vector(&h.clip.cond_vec);
        let run = |seq: &TokenSequence<f32>, mode| {
            model.forward(&ForwardInput { seq, t, cond, mode, phase: Phase::Infer }).map(|p| p.velocity)
        };
        let a = run(&noised.seq, ForwardMode::DualAsymmetric)?;
        let b = run(&single, ForwardMode::RgbOnly)?;
        for (x, y) in a.iter().zip(&b) {
            worst = worst.max((x - y).abs() as f64);
        }
    }
    Ok(worst)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradSeparation {
    /// Norm of the RGB-loss gradient on structure-only parameters.
    pub rgb_to_hoi_params: f64,
    /// Norm of the structure-loss gradient on shared attention parameters.
    pub hoi_to_shared_params: f64,
    /// The structure loss is switched off in this config.
    pub lambda_h_zero: bool,
}

fn group_norm(model: &ModelState<f32>, g: &[f32], group: ParamGroup) -> f64 {
    let mut s = 0.0f64;
    for spec in model.table().specs.iter().filter(|s| s.group == group) {
        s += g[spec.range()].iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>();
    }
    s.sqrt()
}

/// Worst case over `clips` of both separation norms under `mode`.
pub fn grad_separation_check(
    model: &ModelState<f32>,
    clips: &[HeldOut],
    mode: ForwardMode,
    lambda_h: f64,
    seed: u64,
) -> Result<GradSeparation, Error> {
    let mut out = GradSeparation { lambda_h_zero: lambda_h == 0.0, hoi_to_shared_params: f64::INFINITY, ..Default::default() };
    for (k, h) in clips.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
        let t: f32 = rng.random();
        let noised = noise_clip(&h.seq, t, &mut rng);
        let cond = Cond::Vector(&h.clip.cond_vec);
        let only = |r, hh| LossCoefs { r, h: hh, route: 0.0 };
        let (_, gr) = clip_loss(model, &noised, cond, mode, only(1.0, 0.0), true)?;
        let (_, gh) = clip_loss(model, &noised, cond, mode, only(0.0, 1.0), true)?;
        let (gr, gh) = (gr.unwrap_or_default(), gh.unwrap_or_default());
        out.rgb_to_hoi_params = out.rgb_to_hoi_params.max(group_norm(model, &gr, ParamGroup::HoiStream));
        out.hoi_to_shared_params = out.hoi_to_shared_params.min(group_norm(model, &gh, ParamGroup::Attention));
    }
    if clips.is_empty() {
        out.hoi_to_shared_params = 0.0;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopSummary {
    pub rgb_only: u64,
    pub dual: u64,
    pub ratio: f64,
    /// Attention term alone.
    pub attention_ratio: f64,
}

/// One sampling pass per token step, guidance doubling included.
pub fn flop_summary(model: &ModelConfig, layout: &TokenLayout, scfg: &SampleConfig) -> FlopSummary {
    let passes = if scfg.cfg_scale == 1.0 { 1 } else { 2 };
    let r = flop_account(model, layout, StreamMode::RgbOnly, scfg.steps as u64, passes);
    let d = flop_account(model, layout, StreamMode::Dual, scfg.steps as u64, passes);
    FlopSummary {
        rgb_only: r.total,
        dual: d.total,
        ratio: d.total as f64 / r.total as f64,
        attention_ratio: d.attention as f64 / r.attention as f64,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostEntry {
    pub name: String,
    pub flops: u64,
    pub ratio: f64,
    pub paper_ratio: Option<f64>,
    /// Measured forward wall-clock relative to the expert-free model.
    pub wallclock_ratio: Option<f64>,
}

fn time_forward(model: &ModelState<f32>, seq: &TokenSequence<f32>, cond: &[f32], mode: ForwardMode, reps: usize) -> Result<f64, Error> {
    let input = ForwardInput { seq, t: 0.5, cond: Cond::Vector(cond), mode, phase: Phase::Infer };
    model.forward(&input)?;
    let start = Instant::now();
    for _ in 0..reps {
        model.forward(&input)?;
    }
    Ok(start.elapsed().as_secs_f64() / reps.max(1) as f64)
}

/// FLOP ratios with optional measured forward-pass wall-clock ratios.
pub fn cost_report(cfg: &RunConfig, timing_reps: usize) -> Result<Vec<CostEntry>, Error> {
    let mcfg = cfg.model_config();
    let scfg = cfg.sample_config();
    let passes = if scfg.cfg_scale == 1.0 { 1 } else { 2 };
    let rows: Vec<CostRow> = cost_table(&mcfg, &layout(cfg), scfg.steps as u64, passes);
    let timings = if timing_reps > 0 {
        let h = heldout(cfg, 1)?.remove(0);
        let mut with = mcfg.clone();
        with.moe.enabled = true;
        let mut without = mcfg.clone();
        without.moe.enabled = false;
        let mw = ModelState::<f32>::init(&with, 0)?;
        let mo = ModelState::<f32>::init(&without, 0)?;
        let single = h.seq.rgb_only();
        let c = &h.clip.cond_vec;
        let base = time_forward(&mo, &single, c, ForwardMode::RgbOnly, timing_reps)?;
        let full = time_forward(&mw, &single, c, ForwardMode::RgbOnly, timing_reps)?;
        let dual = time_forward(&mw, &h.seq, c, ForwardMode::DualFull, timing_reps)?;
        Some([full / base, 1.0, full / base, dual / base])
    } else {
        None
    };
    Ok(rows
        .iter()
        .enumerate()
        .map(|(i, r)| CostEntry {
            name: r.name.into(),
            flops: r.report.total,
            ratio: r.ratio,
            paper_ratio: r.paper_ratio,
            wallclock_ratio: timings.map(|t| t[i]),
        })
        .collect())
}

/// Generates one clip from the held-out clip's context and condition.
pub fn sample_clip(model: &ModelState<f32>, cfg: &RunConfig, h: &HeldOut, scfg: &SampleConfig) -> Result<SampleOutput<f32>, Error> {
    let f = &h.clip.rgb_frames;
    Ok(euler_integrate(model, &h.seq, &h.clip.cond_vec, (f.n, f.h, f.w), cfg.model.patch, scfg)?)
}

/// Samples every clip in parallel; sampler seed is the clip's seed.
pub fn sample_all(model: &ModelState<f32>, cfg: &RunConfig, clips: &[HeldOut], mode: ForwardMode) -> Result<Vec<SampleOutput<f32>>, Error> {
    let pool = thread_pool()?;
    pool.install(|| {
        clips
            .par_iter()
            .map(|h| {
                let scfg = SampleConfig { mode, seed: h.clip.seed, ..cfg.sample_config() };
                sample_clip(model, cfg, h, &scfg)
            })
            .collect()
    })
}

pub fn sample_penetration(samples: &[SampleOutput<f32>], cfg: &RunConfig) -> PenetrationReport {
    let frames: Vec<&Frames> = samples.iter().map(|s| &s.rgb).collect();
    penetration_rate(&frames, &cfg.data.scene().palette)
}

pub fn sample_alignment(samples: &[SampleOutput<f32>], cfg: &RunConfig, trials: usize, seed: u64) -> AlignmentReport {
    let pairs: Vec<(&Frames, &Frames)> = samples.iter().filter_map(|s| s.hoi.as_ref().map(|h| (h, &s.rgb))).collect();
    hoi_rgb_alignment(&pairs, &cfg.data.scene().palette, trials, seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    /// Architectural checks only.
    Structural,
    /// Adds routing and sample-based metrics.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub suite: Suite,
    pub config_hash: String,
    pub iteration: usize,
    pub zero_overhead_maxdiff: f64,
    /// False for a model trained only with the full mask.
    pub zero_overhead_applicable: bool,
    pub grad_separation: GradSeparation,
    pub grad_separation_full_mask: GradSeparation,
    pub route_accuracy: Option<f64>,
    pub route_accuracy_noisy: Option<f64>,
    pub route_class_collapse: Option<bool>,
    pub flops: FlopSummary,
    pub param_overhead: f64,
    pub penetration_rate: Option<f64>,
    pub penetration_unsegmentable: Option<usize>,
    pub hoi_rgb_iou: Option<f64>,
    pub hoi_rgb_iou_random: Option<f64>,
    pub warnings: Vec<String>,
    pub failures: Vec<String>,
}

impl EvalReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

pub struct EvalOptions {
    pub suite: Suite,
    pub clips: usize,
    pub seed: u64,
    pub iou_trials: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { suite: Suite::Structural, clips: 4, seed: 0, iou_trials: 20 }
    }
}

pub fn overhead(cfg: &ModelConfig) -> Result<OverheadReport, Error> {
    let mut with = cfg.clone();
    with.moe.enabled = true;
    let mut without = cfg.clone();
    without.moe.enabled = false;
    let a = ModelState::<f32>::init(&with, 0)?;
    let b = ModelState::<f32>::init(&without, 0)?;
    Ok(param_overhead(a.table(), b.table(), cfg.depth))
}

/// Runs a suite. `iteration` is the number of completed training steps.
pub fn evaluate(model: &ModelState<f32>, cfg: &RunConfig, iteration: usize, opts: &EvalOptions) -> Result<EvalReport, Error> {
    let clips = heldout(cfg, opts.clips.max(1))?;
    let mut warnings = Vec::new();
    let mut failures = Vec::new();
    let tcfg = cfg.train_config();
    let applicable = tcfg.dual_stream && iteration > tcfg.stage1_iters || iteration == 0;
    if !applicable {
        warnings.push("model never trained under the asymmetric mask; zero-overhead claim does not apply".into());
    }
    let maxdiff = zero_overhead_check(model, &clips, opts.seed)?;
    if maxdiff > ZERO_OVERHEAD_TOL {
        failures.push(format!("zero-overhead maxdiff {maxdiff:e} > {ZERO_OVERHEAD_TOL:e}"));
    }
    let sep = grad_separation_check(model, &clips, ForwardMode::DualAsymmetric, cfg.loss.lambda_h, opts.seed)?;
    if sep.rgb_to_hoi_params != 0.0 {
        failures.push(format!("RGB loss reaches structure parameters (norm {:e})", sep.rgb_to_hoi_params));
    }
    if sep.hoi_to_shared_params <= 0.0 {
        failures.push("structure loss does not reach shared attention".into());
    }
    if sep.lambda_h_zero {
        warnings.push("lambda_h = 0: structure loss unused in training".into());
    }
    let sep_full = grad_separation_check(model, &clips[..1], ForwardMode::DualFull, cfg.loss.lambda_h, opts.seed)?;
    let flops = flop_summary(&cfg.model_config(), &layout(cfg), &cfg.sample_config());
    if flops.ratio < 1.0 {
        failures.push(format!("dual/rgb FLOP ratio {} < 1", flops.ratio));
    }
    let ov = overhead(&cfg.model_config())?;
    let mut report = EvalReport {
        schema_version: REPORT_VERSION,
        suite: opts.suite,
        config_hash: cfg.hash(),
        iteration,
        zero_overhead_maxdiff: maxdiff,
        zero_overhead_applicable: applicable,
        grad_separation: sep,
        grad_separation_full_mask: sep_full,
        route_accuracy: None,
        route_accuracy_noisy: None,
        route_class_collapse: None,
        flops,
        param_overhead: ov.ratio,
        penetration_rate: None,
        penetration_unsegmentable: None,
        hoi_rgb_iou: None,
        hoi_rgb_iou_random: None,
        warnings,
        failures,
    };
    if opts.suite == Suite::Full {
        let pairs: Vec<(TokenSequence<f32>, Vec<f32>)> =
            clips.iter().map(|h| (h.seq.clone(), h.clip.cond_vec.clone())).collect();
        if cfg.moe.enabled {
            let r = routing_accuracy(model, &pairs, ForwardMode::DualAsymmetric, 1.0, opts.seed)?;
            let noisy = routing_accuracy(model, &pairs, ForwardMode::DualAsymmetric, 0.5, opts.seed)?;
            report.route_accuracy = Some(r.accuracy);
            report.route_accuracy_noisy = Some(noisy.accuracy);
            report.route_class_collapse = Some(r.class_collapse);
        }
        let rgb = sample_all(model, cfg, &clips, ForwardMode::RgbOnly)?;
        let pen = sample_penetration(&rgb, cfg);
        report.penetration_rate = Some(pen.rate);
        report.penetration_unsegmentable = Some(pen.unsegmentable);
        if tcfg.dual_stream {
            let dual = sample_all(model, cfg, &clips, ForwardMode::DualAsymmetric)?;
            let al = sample_alignment(&dual, cfg, opts.iou_trials, opts.seed);
            report.hoi_rgb_iou = Some(al.mean_iou);
            report.hoi_rgb_iou_random = Some(al.random_baseline);
        }
    }
    Ok(report)
}
