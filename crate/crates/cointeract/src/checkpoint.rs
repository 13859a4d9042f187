//! Checkpoint files.
//!
//! Layout: `b"CIKP"`, `u32` format version, `u64` header length, a JSON
//! header, then `f32` little-endian data: the parameters followed (when
//! present) by the optimizer's first and second moments.

use std::fs;
use std::path::Path;

use cointeract_core::training::AdamW;
use cointeract_core::ModelState;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::Error;

pub const MAGIC: &[u8; 4] = b"CIKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    /// Hash of the model-shaping part of the config.
    pub config_hash: String,
    pub config: RunConfig,
    /// Iterations completed.
    pub iteration: usize,
    pub dtype: String,
    pub total: usize,
    pub params: Vec<ParamEntry>,
    pub optimizer_step: Option<u64>,
    /// Training wall-clock per stage so far.
    #[serde(default)]
    pub stage_secs: [f64; 2],
    #[serde(default)]
    pub cpu_secs: f64,
}

/// Elapsed training time carried across resumes.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Timing {
    pub stage_secs: [f64; 2],
    pub cpu_secs: f64,
}

pub struct Checkpoint {
    pub header: Header,
    pub model: ModelState<f32>,
    pub opt: Option<AdamW<f32>>,
}

pub fn save(
    path: &Path,
    cfg: &RunConfig,
    model: &ModelState<f32>,
    opt: Option<&AdamW<f32>>,
    iteration: usize,
    timing: Timing,
) -> Result<(), Error> {
    let table = model.table();
    let header = Header {
        version: FORMAT_VERSION,
        config_hash: cfg.model_hash(),
        config: cfg.clone(),
        iteration,
        dtype: "f32".into(),
        total: table.total,
        params: table
            .specs
            .iter()
            .map(|s| ParamEntry { name: s.name.clone(), shape: s.shape.clone(), offset: s.offset })
            .collect(),
        optimizer_step: opt.map(|o| o.step),
        stage_secs: timing.stage_secs,
        cpu_secs: timing.cpu_secs,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let blocks = 1 + if opt.is_some() { 2 } else { 0 };
    let mut out = Vec::with_capacity(16 + json.len() + 4 * table.total * blocks);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let mut put = |xs: &[f32]| {
        for x in xs {
            out.extend_from_slice(&x.to_le_bytes());
        }
    };
    put(&model.params);
    if let Some(o) = opt {
        put(&o.m);
        put(&o.v);
    }
    // write-then-rename so an interrupted save never leaves a torn file
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &out).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect()
}

/// Loads a checkpoint; its model hash must equal `expect`'s.
pub fn load(path: &Path, expect: Option<&RunConfig>) -> Result<Checkpoint, Error> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let trunc = |what: &str| Error::Checkpoint(format!("{}: truncated {what}", path.display()));
    if bytes.len() < 16 {
        return Err(trunc("preamble"));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint(format!("{}: bad magic", path.display())));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("{}: unsupported version {version}", path.display())));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| trunc("header"))?;
    let header: Header =
        serde_json::from_slice(body).map_err(|e| Error::Checkpoint(format!("{}: header: {e}", path.display())))?;
    if header.config_hash != header.config.model_hash() {
        return Err(Error::Checkpoint(format!("{}: header hash does not match its own config", path.display())));
    }
    if let Some(cfg) = expect {
        if cfg.model_hash() != header.config_hash {
            return Err(Error::ConfigMismatch { expected: cfg.model_hash(), found: header.config_hash.clone() });
        }
    }
    let mut model = ModelState::<f32>::init(&header.config.model_config(), header.config.model.init_seed)?;
    if model.params.len() != header.total {
        return Err(Error::Checkpoint(format!("{}: {} params but architecture has {}", path.display(), header.total, model.params.len())));
    }
    for (spec, e) in model.table().specs.iter().zip(&header.params) {
        if spec.name != e.name || spec.shape != e.shape || spec.offset != e.offset {
            return Err(Error::Checkpoint(format!("{}: parameter {} does not match architecture", path.display(), e.name)));
        }
    }
    let n = header.total * 4;
    let data = &bytes[16 + hlen..];
    let blocks = 1 + if header.optimizer_step.is_some() { 2 } else { 0 };
    if data.len() < n * blocks {
        return Err(trunc("data"));
    }
    if data.len() > n * blocks {
        return Err(Error::Checkpoint(format!("{}: trailing bytes", path.display())));
    }
    model.params = read_f32s(&data[..n]);
    let opt = header.optimizer_step.map(|step| AdamW { m: read_f32s(&data[n..2 * n]), v: read_f32s(&data[2 * n..3 * n]), step });
    Ok(Checkpoint { header, model, opt })
}
