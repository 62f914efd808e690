//! Run configuration. Every section has documented defaults and rejects
//! unknown keys.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tasks::{desk_suite, TaskSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Square input side in pixels (64).
    pub image_size: usize,
    /// Patch side in pixels (16).
    pub patch_size: usize,
    /// Input channels; greyscale renders are replicated (3).
    pub channels: usize,
    /// Token width `d` shared by every module (64).
    pub hidden_dim: usize,
    /// Number of encoder blocks `L` (6).
    pub depth: usize,
    pub heads: usize,
    /// MLP hidden width as a multiple of `d` (4).
    pub mlp_ratio: usize,
    /// Stochastic depth rate of the top block during fine-tuning (0.2).
    pub drop_path_rate: f64,
    /// 1-based block indices whose outputs feed the fusion ((2, 4, 6)).
    pub fusion_layers: [usize; 3],
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            image_size: 64,
            patch_size: 16,
            channels: 3,
            hidden_dim: 64,
            depth: 6,
            heads: 4,
            mlp_ratio: 4,
            drop_path_rate: 0.2,
            fusion_layers: [2, 4, 6],
        }
    }
}

impl EncoderConfig {
    /// ViT-B/16 at 224 pixels with taps at blocks 4, 8 and 12.
    pub fn full_scale() -> Self {
        EncoderConfig {
            image_size: 224,
            patch_size: 16,
            channels: 3,
            hidden_dim: 768,
            depth: 12,
            heads: 12,
            mlp_ratio: 4,
            drop_path_rate: 0.2,
            fusion_layers: [4, 8, 12],
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Patches plus the class token.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("encoder: {m}")));
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!("image size {} is not divisible by patch size {}", self.image_size, self.patch_size));
        }
        if self.channels == 0 || self.depth == 0 || self.mlp_ratio == 0 {
            return bad("channels, depth and mlp_ratio must be positive".into());
        }
        if self.heads == 0 || !self.hidden_dim.is_multiple_of(self.heads) {
            return bad(format!("{} heads do not divide width {}", self.heads, self.hidden_dim));
        }
        if !self.hidden_dim.is_multiple_of(2) {
            return bad(format!("width {} must be even for sin-cos positions", self.hidden_dim));
        }
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            return bad(format!("drop path rate {} outside [0, 1)", self.drop_path_rate));
        }
        let f = self.fusion_layers;
        if f[0] < 1 || f[0] >= f[1] || f[1] >= f[2] || f[2] > self.depth {
            return bad(format!("fusion layers {f:?} must be strictly increasing within 1..={}", self.depth));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MffConfig {
    /// Whether the fusion stage exists; `false` feeds the last encoder map
    /// straight to the decoder.
    pub enabled: bool,
    /// Standard deviation of the stage-embedding initialisation (0.02).
    pub stage_embedding_std: f64,
}

impl Default for MffConfig {
    fn default() -> Self {
        MffConfig { enabled: true, stage_embedding_std: 0.02 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    /// Decoder blocks (2).
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Standard deviation of the query and query-position initialisation (0.02).
    pub query_std: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig { depth: 2, heads: 4, mlp_ratio: 4, query_std: 0.02 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.05 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub floor_lr: f64,
    /// Per-group learning-rate decay towards the input (0.85).
    pub layer_decay: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { peak_lr: 1e-3, warmup_steps: 150, total_steps: 3000, floor_lr: 1e-6, layer_decay: 0.85 }
    }
}

impl ScheduleConfig {
    pub fn validate(&self, what: &str) -> Result<()> {
        if self.warmup_steps >= self.total_steps {
            return Err(Error::Config(format!(
                "{what}: warmup {} must be below total steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.layer_decay > 0.0 && self.layer_decay <= 1.0) {
            return Err(Error::Config(format!("{what}: layer decay {} outside (0, 1]", self.layer_decay)));
        }
        if !(self.peak_lr > 0.0) || self.floor_lr < 0.0 || self.floor_lr > self.peak_lr {
            return Err(Error::Config(format!("{what}: need 0 <= floor_lr <= peak_lr, peak_lr > 0")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MimConfig {
    pub mask_ratio: f64,
    /// Reconstruction decoder blocks (2).
    pub decoder_depth: usize,
    pub batch_size: usize,
    pub schedule: ScheduleConfig,
    pub weight_decay: f64,
    /// Held-out images used to measure reconstruction loss.
    pub eval_images: usize,
    pub log_every: usize,
}

impl Default for MimConfig {
    fn default() -> Self {
        MimConfig {
            mask_ratio: 0.75,
            decoder_depth: 2,
            batch_size: 32,
            schedule: ScheduleConfig {
                peak_lr: 1.5e-3,
                warmup_steps: 100,
                total_steps: 2000,
                floor_lr: 1e-6,
                layer_decay: 1.0,
            },
            weight_decay: 0.05,
            eval_images: 256,
            log_every: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_test: usize,
    /// Images per task per step.
    pub batch_per_task: usize,
    /// Steps between held-out evaluations; 0 evaluates only at the end.
    pub eval_every: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { n_train: 4096, n_test: 1024, batch_per_task: 16, eval_every: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct SeedConfig {
    /// Dataset factors.
    pub data: u64,
    /// Parameter initialisation, masking, label noise, drop path and batch order.
    pub run: u64,
}


#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub mff: MffConfig,
    pub decoder: DecoderConfig,
    pub tasks: Vec<TaskSpec>,
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleConfig,
    pub mim: MimConfig,
    pub data: DataConfig,
    pub seeds: SeedConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            encoder: EncoderConfig::default(),
            mff: MffConfig::default(),
            decoder: DecoderConfig::default(),
            tasks: desk_suite(),
            optimizer: OptimizerConfig::default(),
            schedule: ScheduleConfig::default(),
            mim: MimConfig::default(),
            data: DataConfig::default(),
            seeds: SeedConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.decoder.depth != 2 {
            return Err(Error::Config(format!("decoder depth must be 2, got {}", self.decoder.depth)));
        }
        if self.decoder.heads == 0 || !self.encoder.hidden_dim.is_multiple_of(self.decoder.heads) {
            return Err(Error::Config(format!("decoder heads {} do not divide width", self.decoder.heads)));
        }
        if self.decoder.mlp_ratio == 0 {
            return Err(Error::Config("decoder mlp_ratio must be positive".into()));
        }
        if self.tasks.is_empty() {
            return Err(Error::Config("at least one task is required".into()));
        }
        let mut names = std::collections::HashSet::new();
        for t in &self.tasks {
            t.validate()?;
            if !names.insert(&t.name) {
                return Err(Error::Config(format!("duplicate task `{}`", t.name)));
            }
        }
        self.schedule.validate("schedule")?;
        self.mim.schedule.validate("mim.schedule")?;
        if !(0.0..1.0).contains(&self.mim.mask_ratio) {
            return Err(Error::Config(format!("mask ratio {} outside [0, 1)", self.mim.mask_ratio)));
        }
        if self.mim.decoder_depth == 0 || self.mim.batch_size == 0 {
            return Err(Error::Config("mim decoder depth and batch size must be positive".into()));
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) || o.weight_decay < 0.0 {
            return Err(Error::Config("optimizer: need betas in [0, 1), eps > 0, weight decay >= 0".into()));
        }
        if self.data.n_train == 0 || self.data.batch_per_task == 0 || self.data.batch_per_task > self.data.n_train {
            return Err(Error::Config(format!(
                "data: batch per task {} must be within 1..={}",
                self.data.batch_per_task, self.data.n_train
            )));
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: RunConfig = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        RunConfig::from_json(&s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn num_queries(&self) -> usize {
        self.tasks.iter().map(|t| t.label_count).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_valid_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
        assert_eq!(c.num_queries(), 26);
    }

    #[test]
    fn empty_object_is_default() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_json(r#"{"encoder": {"widht": 3}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"extra": 1}"#).is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::from_json(r#"{"encoder": {"image_size": 60}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"encoder": {"fusion_layers": [2, 2, 6]}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"decoder": {"depth": 3}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"schedule": {"warmup_steps": 5000}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"mim": {"mask_ratio": 1.0}}"#).is_err());
    }

    #[test]
    fn token_counts() {
        assert_eq!(EncoderConfig::default().num_tokens(), 17);
        assert_eq!(EncoderConfig::full_scale().num_tokens(), 197);
        assert_eq!(EncoderConfig::full_scale().patch_dim(), 768);
    }
}
