//! Analysis passes: parameter-overhead accounting, KV-cache footprint,
//! per-layer skip-weight norms, and perplexity evaluation.

use crate::error::{Error, Result};
use crate::model::{model_forward, ModelConfig, ParamRole, ParamStore, Variant};
use crate::tape::Tape;
use crate::tensor::Real;
use serde::Serialize;

/// Parameter accounting for one variant. `overhead_pct` is the share of the
/// grown model occupied by injected parameters:
/// `100 * total_new / (base_params + total_new)`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamReport {
    pub base_params: u64,
    pub preproj_params: u64,
    pub skip_params: u64,
    pub lora_params: u64,
    pub total_new: u64,
    pub overhead_pct: f64,
}

/// Closed-form parameter counts for a config under `variant`.
///
/// Per layer: the pre-projection adds `2 * d * ed`, the content skip adds
/// `d^2`, and LoRA adds `rank * (d + 3d)` at the fused QKV projection plus
/// `rank * 2d` at the output projection. `base_override` substitutes an
/// externally supplied base-model parameter count (for overhead accounting
/// against reference models); otherwise the frozen base of this config is
/// counted.
pub fn count_params(
    cfg: &ModelConfig,
    variant: Variant,
    base_override: Option<u64>,
) -> Result<ParamReport> {
    let mut block = cfg.block.clone();
    variant.apply(&mut block, cfg.block.lora_rank)?;
    let d = block.d_model as u64;
    let l = cfg.n_layers as u64;

    let preproj_params =
        if block.use_preproj { 2 * d * block.preproj_hidden() as u64 * l } else { 0 };
    let skip_params = if block.use_skip { d * d * l } else { 0 };
    let r = block.lora_rank as u64;
    let lora_params = if r > 0 { (r * (d + 3 * d) + r * 2 * d) * l } else { 0 };
    let total_new = preproj_params + skip_params + lora_params;

    let base_params = base_override.unwrap_or_else(|| {
        let embed = cfg.vocab_size as u64 * d;
        let per_layer = 2 * d + 4 * d * d + 2 * d * block.ffn_hidden() as u64;
        let head = if cfg.tie_embeddings { 0 } else { d * cfg.vocab_size as u64 };
        embed + per_layer * l + d + head
    });
    let overhead_pct = if total_new == 0 {
        0.0
    } else {
        100.0 * total_new as f64 / (base_params + total_new) as f64
    };

    Ok(ParamReport { base_params, preproj_params, skip_params, lora_params, total_new, overhead_pct })
}

/// KV-cache element count for `seq_len` decoded positions:
/// `seq_len * n_layers * 2 * n_heads * head_dim`. The variant takes no part
/// in the arithmetic; it is accepted to make that independence testable as
/// a literal assertion.
pub fn kv_cache_footprint(cfg: &ModelConfig, _variant: Variant, seq_len: usize) -> u64 {
    (seq_len * cfg.n_layers * 2 * cfg.block.n_heads * cfg.block.head_dim()) as u64
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SkipNorm {
    pub layer: usize,
    pub skip_frobenius_norm: f64,
}

/// Frobenius norm of each layer's skip matrix, in ascending layer order.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SkipNormReport {
    pub norms: Vec<SkipNorm>,
}

impl SkipNormReport {
    /// CSV rendering: header `layer,skip_frobenius_norm`, one row per layer.
    pub fn csv(&self) -> String {
        let mut out = String::from("layer,skip_frobenius_norm\n");
        for entry in &self.norms {
            out.push_str(&format!("{},{}\n", entry.layer, entry.skip_frobenius_norm));
        }
        out
    }
}

/// Collect per-layer skip norms straight from a store (checkpoints carry
/// enough structure on their own). Errors if the store has no skip matrices.
pub fn skip_norms_from_store<T: Real>(store: &ParamStore<T>) -> Result<SkipNormReport> {
    let mut norms = Vec::new();
    for (name, entry) in store.iter() {
        if entry.role != ParamRole::Skip {
            continue;
        }
        let layer: usize = name
            .strip_prefix("layers.")
            .and_then(|rest| rest.split('.').next())
            .and_then(|idx| idx.parse().ok())
            .ok_or_else(|| Error::Config(format!("malformed skip name {name:?}")))?;
        norms.push(SkipNorm { layer, skip_frobenius_norm: entry.tensor.frobenius_norm() });
    }
    if norms.is_empty() {
        return Err(Error::Config("this variant has no content-skip matrices".into()));
    }
    norms.sort_by_key(|e| e.layer);
    Ok(SkipNormReport { norms })
}

/// Per-layer skip norms validated against a config: the variant must carry
/// the skip and the report covers every layer.
pub fn skip_norms<T: Real>(store: &ParamStore<T>, cfg: &ModelConfig) -> Result<SkipNormReport> {
    if !cfg.block.use_skip {
        return Err(Error::Config("this variant has no content-skip matrices".into()));
    }
    let report = skip_norms_from_store(store)?;
    if report.norms.len() != cfg.n_layers {
        return Err(Error::Config(format!(
            "expected {} skip matrices, found {}",
            cfg.n_layers,
            report.norms.len()
        )));
    }
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct PerplexityReport {
    pub perplexity: f64,
    pub mean_nll: f64,
    pub tokens: u64,
    pub windows: u64,
}

/// Perplexity `exp(mean token NLL)` over contiguous non-overlapping windows
/// of `max_seq_len` bytes; a trailing partial window is dropped. Within each
/// window the first byte is context only and the rest are predicted.
pub fn perplexity<T: Real>(
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    corpus: &[u8],
) -> Result<PerplexityReport> {
    let window = cfg.max_seq_len;
    let n_windows = corpus.len() / window;
    if n_windows == 0 {
        return Err(Error::Config(format!(
            "corpus of {} bytes is shorter than one {window}-byte window",
            corpus.len()
        )));
    }
    let mut total_nll = 0.0f64;
    let mut total_tokens = 0u64;
    for w in 0..n_windows {
        let bytes = &corpus[w * window..(w + 1) * window];
        let tokens: Vec<usize> = bytes[..window - 1].iter().map(|&b| b as usize).collect();
        let targets: Vec<usize> = bytes[1..].iter().map(|&b| b as usize).collect();
        let mut tape = Tape::new();
        let logits = model_forward(&mut tape, &tokens, store, cfg)?;
        let loss = tape.cross_entropy(logits, &targets)?;
        total_nll += tape.value(loss).item()?.as_f64() * targets.len() as f64;
        total_tokens += targets.len() as u64;
    }
    let mean_nll = total_nll / total_tokens as f64;
    Ok(PerplexityReport {
        perplexity: mean_nll.exp(),
        mean_nll,
        tokens: total_tokens,
        windows: n_windows as u64,
    })
}
