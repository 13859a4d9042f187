//! Command line: `gen-data`, `train`, `sample`, `eval`, `flops`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use cointeract_core::sampling::SampleConfig;
use cointeract_core::tokenization::StreamMode;

use crate::checkpoint;
use crate::config::{RunConfig, SampleMode};
use crate::dataset::{encode_clip, generate_clips, write_dataset};
use crate::eval::{self, EvalOptions, Suite};
use crate::image::write_pngs;
use crate::trainer::{self, Trainer};
use crate::Error;

pub const EXIT_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "cointeract", version, about = "Dual-stream blob-world co-generation")]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a blob-world dataset directory.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Write the held-out split instead of the training split.
        #[arg(long)]
        heldout: bool,
        /// Cap on the number of clips written.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Run (or resume) the two-stage schedule.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many iterations in total.
        #[arg(long)]
        until: Option<usize>,
    },
    /// Generate one clip from a held-out clip's context.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum, default_value = "rgb")]
        mode: SampleMode,
        #[arg(long, default_value_t = 40)]
        steps: usize,
        #[arg(long, default_value_t = 5.0)]
        cfg: f64,
        /// Held-out clip index; also seeds the sampler noise.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also dump per-frame PNGs into this directory.
        #[arg(long)]
        png: Option<PathBuf>,
    },
    /// Run an evaluation suite and print the JSON report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum, default_value = "structural")]
        suite: Suite,
        #[arg(long, default_value_t = 4)]
        clips: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the analytic inference cost.
    Flops {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "dual")]
        mode: SampleMode,
        /// Forward passes per configuration for measured wall-clock ratios.
        #[arg(long, default_value_t = 0)]
        timing_reps: usize,
    },
}

impl clap::ValueEnum for SampleMode {
    fn value_variants<'a>() -> &'a [Self] {
        &[SampleMode::Rgb, SampleMode::Dual]
    }

    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(match self {
            SampleMode::Rgb => "rgb",
            SampleMode::Dual => "dual",
        }))
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Error> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn missing(path: &Path) -> Option<i32> {
    if path.exists() {
        None
    } else {
        eprintln!("error: checkpoint {} does not exist", path.display());
        Some(EXIT_USAGE)
    }
}

fn print_json<T: serde::Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("value serializes"));
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn run<I, A>(args: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_FAILED
        }
    }
}

fn dispatch(cmd: Command) -> Result<i32, Error> {
    match cmd {
        Command::GenData { config, out, heldout, count } => {
            let cfg = load_config(config.as_deref())?;
            let mut seeds = if heldout { cfg.data.heldout_seeds() } else { cfg.data.train_seeds() };
            if let Some(c) = count {
                seeds.truncate(c);
            }
            let clips = generate_clips(&cfg.data.scene(), &seeds)?;
            let m = write_dataset(&out, &clips)?;
            println!("wrote {} clips to {}", m.clips.len(), out.display());
            Ok(0)
        }
        Command::Train { config, out, resume, until } => {
            let cfg = load_config(config.as_deref())?;
            let mut t = match &resume {
                Some(p) => {
                    if let Some(code) = missing(p) {
                        return Ok(code);
                    }
                    Trainer::resume(&cfg, p)?
                }
                None => Trainer::new(&cfg)?,
            };
            let cfg_path = out.join("config.json");
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            std::fs::write(&cfg_path, cfg.to_json()).map_err(|e| Error::io(&cfg_path, e))?;
            let total = t.tcfg.total_iters();
            t.run(&out, until.unwrap_or(total), |m| {
                if m.iter % 50 == 0 || m.iter + 1 == total {
                    eprintln!(
                        "iter {} {} L_r {:.4} L_h {:.4} L_route {:.4} acc {:.3} lr {:.2e}",
                        m.iter,
                        m.stage.name(),
                        m.l_r,
                        m.l_h,
                        m.l_route,
                        m.route_acc,
                        m.lr
                    );
                }
            })?;
            Ok(0)
        }
        Command::Sample { ckpt, mode, steps, cfg: scale, seed, out, png } => {
            if let Some(code) = missing(&ckpt) {
                return Ok(code);
            }
            let ck = checkpoint::load(&ckpt, None)?;
            let cfg = ck.header.config.clone();
            let idx = seed as usize;
            let held = eval::heldout(&cfg, idx + 1)?;
            let h = held.get(idx).ok_or_else(|| Error::Config(format!("held-out split has no clip {idx}")))?;
            let scfg = SampleConfig { steps, cfg_scale: scale, mode: mode.forward_mode(), seed };
            let s = eval::sample_clip(&ck.model, &cfg, h, &scfg)?;
            let mut clip = h.clip.clone();
            clip.rgb_frames = s.rgb.clone();
            if let Some(hoi) = &s.hoi {
                clip.hoi_frames = hoi.clone();
            }
            let (entry, bytes) = encode_clip(0, &clip);
            std::fs::write(&out, bytes).map_err(|e| Error::io(&out, e))?;
            let side = out.with_extension("json");
            let text = serde_json::to_string_pretty(&entry).expect("entry serializes");
            std::fs::write(&side, text).map_err(|e| Error::io(&side, e))?;
            if let Some(dir) = png {
                write_pngs(&dir, "rgb", &s.rgb)?;
                if let Some(hoi) = &s.hoi {
                    write_pngs(&dir, "hoi", hoi)?;
                }
            }
            println!("wrote {}", out.display());
            Ok(0)
        }
        Command::Eval { ckpt, suite, clips, seed, out } => {
            if let Some(code) = missing(&ckpt) {
                return Ok(code);
            }
            let ck = checkpoint::load(&ckpt, None)?;
            let opts = EvalOptions { suite, clips, seed, ..EvalOptions::default() };
            let report = eval::evaluate(&ck.model, &ck.header.config, ck.header.iteration, &opts)?;
            print_json(&report);
            if let Some(p) = out {
                let text = serde_json::to_string_pretty(&report).expect("report serializes");
                std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
            }
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            for f in &report.failures {
                eprintln!("failed: {f}");
            }
            Ok(if report.passed() { 0 } else { EXIT_FAILED })
        }
        Command::Flops { config, mode, timing_reps } => {
            let cfg = load_config(config.as_deref())?;
            let stream = match mode {
                SampleMode::Rgb => StreamMode::RgbOnly,
                SampleMode::Dual => StreamMode::Dual,
            };
            let scfg = cfg.sample_config();
            let passes = if scfg.cfg_scale == 1.0 { 1 } else { 2 };
            let r = cointeract_core::flops::flop_account(&cfg.model_config(), &eval::layout(&cfg), stream, scfg.steps as u64, passes);
            let table = eval::cost_report(&cfg, timing_reps)?;
            print_json(&serde_json::json!({
                "mode": mode,
                "tokens": r.tokens,
                "attention": r.attention,
                "projections": r.projections,
                "ffn": r.ffn,
                "moe": r.moe,
                "io": r.io,
                "per_pass": r.per_pass,
                "passes": r.passes,
                "total": r.total,
                "summary": eval::flop_summary(&cfg.model_config(), &eval::layout(&cfg), &scfg),
                "table": table,
            }));
            Ok(0)
        }
    }
}

/// Output directory used for a config under `root`.
pub fn default_run_dir(root: &Path, cfg: &RunConfig) -> PathBuf {
    trainer::run_dir(root, cfg)
}
