//! Flat JSON run configuration shared by the CLI and embedders.
//!
//! Unknown keys are rejected so config typos fail loudly. Every field has a
//! default matching the desk-scale reference model and the probe protocol.

use crate::blocks::{BlockConfig, Expansion};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Variant};
use crate::train::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

fn d_vocab() -> usize { 256 }
fn d_dmodel() -> usize { 64 }
fn d_heads() -> usize { 4 }
fn d_layers() -> usize { 4 }
fn d_seq() -> usize { 128 }
fn d_expansion() -> Expansion { Expansion::default() }
fn d_theta() -> f64 { 10_000.0 }
fn d_ffn_mult() -> usize { 4 }
fn d_eps() -> f64 { 1e-5 }
fn d_tie() -> bool { true }
fn d_variant() -> String { "baseline".into() }
fn d_lr_max() -> f64 { 1e-5 }
fn d_steps() -> usize { 500 }
fn d_effective_batch() -> usize { 16 }
fn d_micro_batch() -> usize { 16 }
fn d_wd() -> f64 { 0.01 }
fn d_beta1() -> f64 { 0.9 }
fn d_beta2() -> f64 { 0.999 }
fn d_adam_eps() -> f64 { 1e-8 }

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    // model
    #[serde(default = "d_vocab")]
    pub vocab_size: usize,
    #[serde(default = "d_dmodel")]
    pub d_model: usize,
    #[serde(default = "d_heads")]
    pub n_heads: usize,
    #[serde(default = "d_layers")]
    pub n_layers: usize,
    #[serde(default = "d_seq")]
    pub max_seq_len: usize,
    #[serde(default = "d_expansion")]
    pub expansion: Expansion,
    #[serde(default = "d_theta")]
    pub rope_theta: f64,
    #[serde(default = "d_ffn_mult")]
    pub ffn_mult: usize,
    #[serde(default = "d_eps")]
    pub eps: f64,
    #[serde(default = "d_tie")]
    pub tie_embeddings: bool,
    // variant
    #[serde(default = "d_variant")]
    pub variant: String,
    #[serde(default)]
    pub lora_rank: usize,
    // training
    #[serde(default = "d_lr_max")]
    pub lr_max: f64,
    #[serde(default = "d_steps")]
    pub steps: usize,
    #[serde(default = "d_effective_batch")]
    pub effective_batch: usize,
    #[serde(default = "d_micro_batch")]
    pub micro_batch: usize,
    #[serde(default)]
    pub warmup_steps: usize,
    #[serde(default)]
    pub lr_min: f64,
    #[serde(default = "d_wd")]
    pub weight_decay: f64,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_adam_eps")]
    pub adam_eps: f64,
    // run
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub corpus_path: Option<String>,
    #[serde(default)]
    pub checkpoint_path: Option<String>,
    #[serde(default)]
    pub out_dir: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

impl RunConfig {
    pub fn from_json(json: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(json).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config()?;
        self.train_config().validate()
    }

    pub fn variant(&self) -> Result<Variant> {
        self.variant.parse()
    }

    /// Assemble and validate the model config with the variant applied.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut block = BlockConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            expansion: self.expansion,
            rope_theta: self.rope_theta,
            use_preproj: false,
            use_skip: false,
            lora_rank: 0,
            ffn_mult: self.ffn_mult,
            eps: self.eps,
        };
        self.variant()?.apply(&mut block, self.lora_rank)?;
        let cfg = ModelConfig {
            vocab_size: self.vocab_size,
            n_layers: self.n_layers,
            max_seq_len: self.max_seq_len,
            block,
            tie_embeddings: self.tie_embeddings,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr_max: self.lr_max,
            steps: self.steps,
            effective_batch: self.effective_batch,
            micro_batch: self.micro_batch,
            warmup_steps: self.warmup_steps,
            lr_min: self.lr_min,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            adam_eps: self.adam_eps,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_the_desk_config() {
        let cfg = RunConfig::default();
        let model = cfg.model_config().unwrap();
        assert_eq!(model.vocab_size, 256);
        assert_eq!(model.d_model(), 64);
        assert_eq!(model.n_layers, 4);
        assert_eq!(model.max_seq_len, 128);
        assert_eq!(model.block.preproj_hidden(), 80);
        assert!(!model.block.use_preproj);
        let train = cfg.train_config();
        assert_eq!(train.lr_max, 1e-5);
        assert_eq!(train.steps, 500);
        assert_eq!(train.effective_batch, 16);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_json(r#"{"d_mode": 64}"#).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn variant_wiring() {
        let cfg =
            RunConfig::from_json(r#"{"variant": "preproj-skip"}"#).unwrap();
        let model = cfg.model_config().unwrap();
        assert!(model.block.use_preproj && model.block.use_skip);

        let lora = RunConfig::from_json(r#"{"variant": "lora", "lora_rank": 8}"#).unwrap();
        assert_eq!(lora.model_config().unwrap().block.lora_rank, 8);

        // LoRA without a rank is a validation error.
        assert!(RunConfig::from_json(r#"{"variant": "lora"}"#).is_err());
        // Unknown variant names are rejected.
        assert!(RunConfig::from_json(r#"{"variant": "turbo"}"#).is_err());
    }

    #[test]
    fn expansion_string_roundtrip() {
        let cfg = RunConfig::from_json(r#"{"expansion": "3/2", "d_model": 64}"#).unwrap();
        assert_eq!(cfg.model_config().unwrap().block.preproj_hidden(), 96);
        let back = serde_json::to_string(&cfg).unwrap();
        assert!(back.contains("\"expansion\":\"3/2\""));
    }
}
