//! Run configuration: one JSON document with sections
//! `{data, model, loss, train, sample, moe}`.

use std::path::Path;

use cointeract_core::blobworld::SceneSpec;
use cointeract_core::humoe::{DispatchTrain, MoeConfig};
use cointeract_core::objectives::{LossWeights, TSampler};
use cointeract_core::sampling::SampleConfig;
use cointeract_core::training::TrainConfig;
use cointeract_core::{ForwardMode, ModelConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::Error;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub canvas_size: usize,
    pub num_frames: usize,
    pub n_motion: usize,
    pub cond_dim: usize,
    /// Training clips use seeds `train_seed_base..train_seed_base + train_clips`.
    pub train_clips: usize,
    pub train_seed_base: u64,
    pub heldout_clips: usize,
    pub heldout_seed_base: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            canvas_size: 32,
            num_frames: 8,
            n_motion: 2,
            cond_dim: 8,
            train_clips: 512,
            train_seed_base: 0,
            heldout_clips: 50,
            heldout_seed_base: 1_000_000,
        }
    }
}

impl DataSection {
    pub fn scene(&self) -> SceneSpec {
        SceneSpec {
            canvas_size: self.canvas_size,
            num_frames: self.num_frames,
            n_motion: self.n_motion,
            cond_dim: self.cond_dim,
            ..SceneSpec::default()
        }
    }

    pub fn train_seeds(&self) -> Vec<u64> {
        (0..self.train_clips as u64).map(|k| self.train_seed_base + k).collect()
    }

    pub fn heldout_seeds(&self) -> Vec<u64> {
        (0..self.heldout_clips as u64).map(|k| self.heldout_seed_base + k).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub patch: usize,
    pub d_model: usize,
    pub depth: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub t_freq_dim: usize,
    pub rope_base: f64,
    pub init_seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            patch: m.patch,
            d_model: m.d_model,
            depth: m.depth,
            heads: m.heads,
            ffn_mult: m.ffn_mult,
            t_freq_dim: m.t_freq_dim,
            rope_base: m.rope_base,
            init_seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TSamplerKind {
    Uniform,
    LogitNormal { mean: f64, std: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub lambda_h: f64,
    pub eta: f64,
    pub t_sampler: TSamplerKind,
}

impl Default for LossSection {
    fn default() -> Self {
        Self { lambda_h: 1.0, eta: 1.0, t_sampler: TSamplerKind::Uniform }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub stage1_iters: usize,
    pub stage2_iters: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub batch: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub adam_eps: f64,
    pub clip_norm: f64,
    pub cond_dropout: f64,
    pub dual_stream: bool,
    /// Checkpoint every this many iterations (0 = only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            stage1_iters: t.stage1_iters,
            stage2_iters: t.stage2_iters,
            lr: t.lr,
            lr_min: t.lr_min,
            batch: t.batch,
            seed: t.seed,
            beta1: t.beta1,
            beta2: t.beta2,
            weight_decay: t.weight_decay,
            adam_eps: t.adam_eps,
            clip_norm: t.clip_norm,
            cond_dropout: t.cond_dropout,
            dual_stream: t.dual_stream,
            checkpoint_every: 250,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    Rgb,
    Dual,
}

impl SampleMode {
    pub fn forward_mode(self) -> ForwardMode {
        match self {
            SampleMode::Rgb => ForwardMode::RgbOnly,
            SampleMode::Dual => ForwardMode::DualAsymmetric,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    pub steps: usize,
    pub cfg_scale: f64,
    pub mode: SampleMode,
    pub seed: u64,
}

impl Default for SampleSection {
    fn default() -> Self {
        Self { steps: 40, cfg_scale: 5.0, mode: SampleMode::Rgb, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DispatchKind {
    Labels,
    Argmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MoeSection {
    pub enabled: bool,
    pub expert_hidden: usize,
    pub router_hidden: usize,
    pub dispatch_train: DispatchKind,
}

impl Default for MoeSection {
    fn default() -> Self {
        let m = MoeConfig::default();
        Self {
            enabled: m.enabled,
            expert_hidden: m.expert_hidden,
            router_hidden: m.router_hidden,
            dispatch_train: DispatchKind::Labels,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub loss: LossSection,
    pub train: TrainSection,
    pub sample: SampleSection,
    pub moe: MoeSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Hex SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        let compact = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(compact.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Hash of everything that shapes the parameter vector and its meaning.
    pub fn model_hash(&self) -> String {
        let key = serde_json::json!({ "model": self.model, "moe": self.moe, "cond_dim": self.data.cond_dim });
        let digest = Sha256::digest(key.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<(), Error> {
        self.model_config().validate()?;
        self.train_config().validate()?;
        self.data.scene().validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.data.canvas_size % self.model.patch != 0 {
            return Err(Error::Config(format!(
                "canvas {} not divisible by patch {}",
                self.data.canvas_size, self.model.patch
            )));
        }
        if self.data.train_clips == 0 {
            return Err(Error::Config("data.train_clips must be positive".into()));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            patch: m.patch,
            d_model: m.d_model,
            depth: m.depth,
            heads: m.heads,
            ffn_mult: m.ffn_mult,
            cond_dim: self.data.cond_dim,
            t_freq_dim: m.t_freq_dim,
            rope_base: m.rope_base,
            moe: MoeConfig {
                enabled: self.moe.enabled,
                expert_hidden: self.moe.expert_hidden,
                router_hidden: self.moe.router_hidden,
                dispatch_train: match self.moe.dispatch_train {
                    DispatchKind::Labels => DispatchTrain::Labels,
                    DispatchKind::Argmax => DispatchTrain::Argmax,
                },
            },
            ..ModelConfig::default()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            stage1_iters: t.stage1_iters,
            stage2_iters: t.stage2_iters,
            lr: t.lr,
            lr_min: t.lr_min,
            batch: t.batch,
            seed: t.seed,
            weights: LossWeights { lambda_h: self.loss.lambda_h, eta: self.loss.eta },
            beta1: t.beta1,
            beta2: t.beta2,
            weight_decay: t.weight_decay,
            adam_eps: t.adam_eps,
            clip_norm: t.clip_norm,
            cond_dropout: t.cond_dropout,
            dual_stream: t.dual_stream,
            t_sampler: match self.loss.t_sampler {
                TSamplerKind::Uniform => TSampler::Uniform,
                TSamplerKind::LogitNormal { mean, std } => TSampler::LogitNormal { mean, std },
            },
        }
    }

    pub fn sample_config(&self) -> SampleConfig {
        SampleConfig {
            steps: self.sample.steps,
            cfg_scale: self.sample.cfg_scale,
            mode: self.sample.mode.forward_mode(),
            seed: self.sample.seed,
        }
    }

    /// The "w/o Co-Gen" ablation: no structure stream, no structure loss.
    pub fn without_cogen(&self) -> Self {
        let mut c = self.clone();
        c.loss.lambda_h = 0.0;
        c.train.dual_stream = false;
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_hash_is_stable() {
        let c = RunConfig::default();
        let back: RunConfig = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_ne!(c.without_cogen().hash(), c.hash());
        assert_eq!(c.without_cogen().model_hash(), c.model_hash());
    }

    #[test]
    fn partial_sections_fill_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"train": {"batch": 2}, "sample": {"mode": "dual"}}"#).unwrap();
        assert_eq!(c.train.batch, 2);
        assert_eq!(c.train.stage1_iters, 2000);
        assert_eq!(c.sample.mode, SampleMode::Dual);
        assert!(serde_json::from_str::<RunConfig>(r#"{"train": {"bogus": 1}}"#).is_err());
    }
}
