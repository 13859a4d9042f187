//! Two-stage training driver: data pool, worker pool, metrics log and
//! periodic checkpoints.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use cointeract_core::tokenization::{tokenize_clip, StreamMode};
use cointeract_core::training::{
    apply_update, batch_indices, clip_grad, AdamW, Stage, StepMetrics, TrainConfig, TrainExample,
};
use cointeract_core::{MaskMode, ModelState};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::dataset::generate_clips;
use crate::Error;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_CKPT: &str = "final.cikp";
pub const LATEST_CKPT: &str = "latest.cikp";
pub const SUMMARY_FILE: &str = "run.json";

/// Worker count from `COINTERACT_THREADS`, else the machine's parallelism.
pub fn worker_threads() -> usize {
    std::env::var("COINTERACT_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|n| *n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

pub fn thread_pool() -> Result<rayon::ThreadPool, Error> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(worker_threads())
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// User plus system CPU seconds consumed by this process, all threads.
pub fn process_cpu_secs() -> f64 {
    let mut ru = std::mem::MaybeUninit::<libc::rusage>::zeroed();
    // SAFETY: getrusage fills the struct it is handed.
    let rc = unsafe { libc::getrusage(libc::RUSAGE_SELF, ru.as_mut_ptr()) };
    if rc != 0 {
        return 0.0;
    }
    let ru = unsafe { ru.assume_init() };
    let tv = |t: libc::timeval| t.tv_sec as f64 + t.tv_usec as f64 * 1e-6;
    tv(ru.ru_utime) + tv(ru.ru_stime)
}

/// One JSON-lines record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub iter: usize,
    pub stage: String,
    pub mask: String,
    #[serde(rename = "L_r")]
    pub l_r: f64,
    #[serde(rename = "L_h")]
    pub l_h: f64,
    #[serde(rename = "L_route")]
    pub l_route: f64,
    pub total: f64,
    pub route_acc: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

impl From<&StepMetrics> for MetricRecord {
    fn from(m: &StepMetrics) -> Self {
        Self {
            iter: m.iter,
            stage: m.stage.name().into(),
            mask: match m.mask {
                MaskMode::Full => "full".into(),
                MaskMode::Asymmetric => "asymmetric".into(),
            },
            l_r: m.l_r,
            l_h: m.l_h,
            l_route: m.l_route,
            total: m.total,
            route_acc: m.route_acc,
            lr: m.lr,
            grad_norm: m.grad_norm,
        }
    }
}

/// Written next to the final checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub iterations: usize,
    pub wall_secs: f64,
    pub stage_secs: [f64; 2],
    /// Process CPU seconds, summed over resumed segments.
    pub cpu_secs: f64,
    pub threads: usize,
}

/// Training clips tokenized once, in the dual layout.
pub fn build_pool(cfg: &RunConfig) -> Result<Vec<TrainExample<f32>>, Error> {
    let clips = generate_clips(&cfg.data.scene(), &cfg.data.train_seeds())?;
    clips
        .iter()
        .map(|c| {
            let seq = tokenize_clip::<f32>(c, cfg.model.patch, None, StreamMode::Dual)?;
            Ok(TrainExample { seq, cond: c.cond_vec.clone() })
        })
        .collect()
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub tcfg: TrainConfig,
    pub model: ModelState<f32>,
    pub opt: AdamW<f32>,
    /// Next iteration to run.
    pub iteration: usize,
    pub stage_secs: [f64; 2],
    /// CPU seconds of earlier segments of a resumed run.
    pub cpu_before: f64,
    pool: Vec<TrainExample<f32>>,
    workers: rayon::ThreadPool,
}

impl Trainer {
    pub fn new(cfg: &RunConfig) -> Result<Self, Error> {
        cfg.validate()?;
        let model = ModelState::<f32>::init(&cfg.model_config(), cfg.model.init_seed)?;
        let opt = AdamW::new(model.params.len());
        Ok(Self {
            cfg: cfg.clone(),
            tcfg: cfg.train_config(),
            model,
            opt,
            iteration: 0,
            stage_secs: [0.0; 2],
            cpu_before: 0.0,
            pool: build_pool(cfg)?,
            workers: thread_pool()?,
        })
    }

    pub fn resume(cfg: &RunConfig, ckpt: &Path) -> Result<Self, Error> {
        let ck = checkpoint::load(ckpt, Some(cfg))?;
        if ck.header.config.hash() != cfg.hash() {
            return Err(Error::ConfigMismatch { expected: cfg.hash(), found: ck.header.config.hash() });
        }
        let opt = ck.opt.ok_or_else(|| Error::Checkpoint(format!("{}: no optimizer state", ckpt.display())))?;
        let mut t = Self::new(cfg)?;
        t.model = ck.model;
        t.opt = opt;
        t.iteration = ck.header.iteration;
        t.stage_secs = ck.header.stage_secs;
        t.cpu_before = ck.header.cpu_secs - process_cpu_secs();
        Ok(t)
    }

    pub fn done(&self) -> bool {
        self.iteration >= self.tcfg.total_iters()
    }

    pub fn step(&mut self) -> Result<StepMetrics, Error> {
        let it = self.iteration;
        let start = Instant::now();
        let idx = batch_indices(&self.tcfg, it, self.pool.len());
        let (model, pool, tcfg) = (&self.model, &self.pool, &self.tcfg);
        let per_clip = self.workers.install(|| {
            idx.par_iter()
                .enumerate()
                .map(|(slot, &k)| clip_grad(model, &pool[k], tcfg, it, slot))
                .collect::<Result<Vec<_>, _>>()
        })?;
        let m = apply_update(&mut self.model, &mut self.opt, per_clip, it, &self.tcfg)?;
        let s = if m.stage == Stage::Stage1Full { 0 } else { 1 };
        self.stage_secs[s] += start.elapsed().as_secs_f64();
        self.iteration += 1;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<(), Error> {
        let timing = checkpoint::Timing { stage_secs: self.stage_secs, cpu_secs: self.cpu_before + process_cpu_secs() };
        checkpoint::save(path, &self.cfg, &self.model, Some(&self.opt), self.iteration, timing)
    }

    /// Runs until `until` (capped at the schedule end), appending metrics to
    /// `out/metrics.jsonl` and checkpointing into `out`.
    pub fn run(&mut self, out: &Path, until: usize, mut on_step: impl FnMut(&StepMetrics)) -> Result<(), Error> {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let log_path = out.join(METRICS_FILE);
        truncate_metrics(&log_path, self.iteration)?;
        let mut log = OpenOptions::new().create(true).append(true).open(&log_path).map_err(|e| Error::io(&log_path, e))?;
        let until = until.min(self.tcfg.total_iters());
        let every = self.cfg.train.checkpoint_every;
        while self.iteration < until {
            let m = self.step()?;
            let line = serde_json::to_string(&MetricRecord::from(&m)).expect("record serializes");
            writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
            on_step(&m);
            if every > 0 && self.iteration % every == 0 && self.iteration < until {
                log.flush().map_err(|e| Error::io(&log_path, e))?;
                self.save(&out.join(LATEST_CKPT))?;
            }
        }
        log.flush().map_err(|e| Error::io(&log_path, e))?;
        if self.done() {
            self.save(&out.join(FINAL_CKPT))?;
            let summary = RunSummary {
                config_hash: self.cfg.hash(),
                iterations: self.iteration,
                wall_secs: self.stage_secs[0] + self.stage_secs[1],
                stage_secs: self.stage_secs,
                cpu_secs: self.cpu_before + process_cpu_secs(),
                threads: worker_threads(),
            };
            let p = out.join(SUMMARY_FILE);
            fs::write(&p, serde_json::to_string_pretty(&summary).expect("summary serializes")).map_err(|e| Error::io(&p, e))?;
        } else {
            self.save(&out.join(LATEST_CKPT))?;
        }
        Ok(())
    }
}

/// Drops records at or beyond `from` so a resumed run does not duplicate them.
fn truncate_metrics(path: &Path, from: usize) -> Result<(), Error> {
    if !path.exists() {
        return Ok(());
    }
    let keep: Vec<String> = read_lines(path)?
        .into_iter()
        .filter(|l| serde_json::from_str::<MetricRecord>(l).map(|r| r.iter < from).unwrap_or(false))
        .collect();
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    for l in keep {
        writeln!(f, "{l}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn read_lines(path: &Path) -> Result<Vec<String>, Error> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(f).lines().collect::<Result<_, _>>().map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>, Error> {
    read_lines(path)?
        .iter()
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
        .collect()
}

pub fn run_dir(root: &Path, cfg: &RunConfig) -> PathBuf {
    root.join(&cfg.hash()[..16])
}
