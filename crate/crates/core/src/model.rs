//! Decoder-only model assembly: embeddings, block stack, output head, the
//! frozen/trainable parameter partition, and KV-cache incremental decoding.

use crate::blocks::{self, BlockConfig, BlockVars};
use crate::error::{Error, Result};
use crate::kernels;
use crate::rng::StreamRng;
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};
use indexmap::IndexMap;
use std::fmt;
use std::str::FromStr;

/// The five block configurations under study.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Baseline,
    Preproj,
    PreprojSkip,
    Lora,
    PreprojLora,
}

impl Variant {
    pub const ALL: [Variant; 5] =
        [Variant::Baseline, Variant::Preproj, Variant::PreprojSkip, Variant::Lora, Variant::PreprojLora];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Preproj => "preproj",
            Variant::PreprojSkip => "preproj-skip",
            Variant::Lora => "lora",
            Variant::PreprojLora => "preproj-lora",
        }
    }

    pub fn uses_preproj(&self) -> bool {
        matches!(self, Variant::Preproj | Variant::PreprojSkip | Variant::PreprojLora)
    }

    pub fn uses_skip(&self) -> bool {
        matches!(self, Variant::PreprojSkip)
    }

    pub fn uses_lora(&self) -> bool {
        matches!(self, Variant::Lora | Variant::PreprojLora)
    }

    /// Produce the block flags for this variant. `lora_rank` is consulted
    /// only by the LoRA variants and must be positive for them.
    pub fn apply(&self, cfg: &mut BlockConfig, lora_rank: usize) -> Result<()> {
        cfg.use_preproj = self.uses_preproj();
        cfg.use_skip = self.uses_skip();
        cfg.lora_rank = if self.uses_lora() {
            if lora_rank == 0 {
                return Err(Error::Config(format!(
                    "variant {} requires lora_rank >= 1",
                    self.name()
                )));
            }
            lora_rank
        } else {
            0
        };
        cfg.validate()
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "preproj" => Ok(Variant::Preproj),
            "preproj-skip" => Ok(Variant::PreprojSkip),
            "lora" => Ok(Variant::Lora),
            "preproj-lora" => Ok(Variant::PreprojLora),
            other => Err(Error::Config(format!(
                "unknown variant {other:?} (expected baseline | preproj | preproj-skip | lora | preproj-lora)"
            ))),
        }
    }
}

/// Whole-model hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub n_layers: usize,
    pub max_seq_len: usize,
    pub block: BlockConfig,
    pub tie_embeddings: bool,
}

impl ModelConfig {
    /// Desk-scale reference configuration: byte vocabulary, d=64, 4 heads,
    /// 4 layers, pre-projection hidden width 80, sequences up to 128.
    pub fn desk() -> Self {
        ModelConfig {
            vocab_size: 256,
            n_layers: 4,
            max_seq_len: 128,
            block: BlockConfig::default(),
            tie_embeddings: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.max_seq_len == 0 {
            return Err(Error::Config("vocab_size and max_seq_len must be positive".into()));
        }
        self.block.validate()
    }

    pub fn d_model(&self) -> usize {
        self.block.d_model
    }
}

/// Whether a tensor receives gradient updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Partition {
    Frozen,
    Trainable,
}

impl Partition {
    pub fn tag(&self) -> &'static str {
        match self {
            Partition::Frozen => "frozen",
            Partition::Trainable => "trainable",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "frozen" => Ok(Partition::Frozen),
            "trainable" => Ok(Partition::Trainable),
            other => Err(Error::Checkpoint(format!("unknown partition tag {other:?}"))),
        }
    }
}

/// Structural role of a parameter, derived from its name.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    Embedding,
    Head,
    NormGain,
    AttnProj,
    FfnProj,
    PreprojUp,
    PreprojDown,
    Skip,
    LoraA,
    LoraB,
}

impl ParamRole {
    /// Roles injected on top of the frozen base; exactly these train under
    /// the probe protocol.
    pub fn injected(&self) -> bool {
        matches!(
            self,
            ParamRole::PreprojUp
                | ParamRole::PreprojDown
                | ParamRole::Skip
                | ParamRole::LoraA
                | ParamRole::LoraB
        )
    }

    /// Recover the role from a parameter name. Errors on names outside the
    /// schema (`embed.weight`, `head.weight`, `final_norm.gain`,
    /// `layers.N.<part>`).
    pub fn from_name(name: &str) -> Result<Self> {
        let unknown = || Error::Config(format!("unknown parameter name {name:?}"));
        match name {
            "embed.weight" => return Ok(ParamRole::Embedding),
            "head.weight" => return Ok(ParamRole::Head),
            "final_norm.gain" => return Ok(ParamRole::NormGain),
            _ => {}
        }
        let rest = name.strip_prefix("layers.").ok_or_else(unknown)?;
        let (layer, part) = rest.split_once('.').ok_or_else(unknown)?;
        layer.parse::<usize>().map_err(|_| unknown())?;
        match part {
            "norm1.gain" | "norm2.gain" => Ok(ParamRole::NormGain),
            "preproj.w_up" => Ok(ParamRole::PreprojUp),
            "preproj.w_down" => Ok(ParamRole::PreprojDown),
            "attn.w_q" | "attn.w_k" | "attn.w_v" | "attn.w_o" => Ok(ParamRole::AttnProj),
            "attn.lora_qkv.a" | "attn.lora_o.a" => Ok(ParamRole::LoraA),
            "attn.lora_qkv.b" | "attn.lora_o.b" => Ok(ParamRole::LoraB),
            "skip.w" => Ok(ParamRole::Skip),
            "ffn.w1" | "ffn.w2" => Ok(ParamRole::FfnProj),
            _ => Err(unknown()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub tensor: Tensor<T>,
    pub role: ParamRole,
    pub partition: Partition,
}

/// Ordered name -> tensor registry with a frozen/trainable partition.
/// Iteration order is insertion order, which fixes the checkpoint layout and
/// every deterministic walk over parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: IndexMap<String, ParamEntry<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: IndexMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>, role: ParamRole) {
        self.entries.insert(name.into(), ParamEntry { tensor, role, partition: Partition::Frozen });
    }

    pub fn get(&self, name: &str) -> Result<&ParamEntry<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ParamEntry<T>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry<T>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ParamEntry<T>)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_scalars(&self) -> u64 {
        self.entries.values().map(|e| e.tensor.len() as u64).sum()
    }

    pub fn scalars_matching(&self, pred: impl Fn(&ParamEntry<T>) -> bool) -> u64 {
        self.entries.values().filter(|e| pred(e)).map(|e| e.tensor.len() as u64).sum()
    }

    pub fn trainable_scalars(&self) -> u64 {
        self.scalars_matching(|e| e.partition == Partition::Trainable)
    }

    /// Concatenated little-endian bytes of every tensor in one partition, in
    /// store order. Used to certify the frozen partition never moves.
    pub fn partition_bytes(&self, partition: Partition) -> Vec<u8> {
        let mut bytes = Vec::new();
        for entry in self.entries.values() {
            if entry.partition == partition {
                for v in entry.tensor.data() {
                    bytes.extend_from_slice(&v.as_f64().to_le_bytes());
                }
            }
        }
        bytes
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (name, entry) in self.iter() {
            out.entries.insert(
                name.clone(),
                ParamEntry {
                    tensor: entry.tensor.cast(),
                    role: entry.role,
                    partition: entry.partition,
                },
            );
        }
        out
    }
}

/// Training protocol: the probe freezes the base model and trains only the
/// injected parameters; `Full` trains everything.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Protocol {
    Probe,
    Full,
}

/// Re-tag every entry for the given protocol and return the trainable scalar
/// count. Roles are re-derived from names so stores loaded from checkpoints
/// are validated as a side effect.
pub fn partition_params<T: Real>(store: &mut ParamStore<T>, protocol: Protocol) -> Result<u64> {
    let mut trainable = 0u64;
    for (name, entry) in store.iter_mut() {
        let role = ParamRole::from_name(name)?;
        if role != entry.role {
            return Err(Error::Config(format!("parameter {name:?} carries mismatched role")));
        }
        let train = match protocol {
            Protocol::Probe => role.injected(),
            Protocol::Full => true,
        };
        entry.partition = if train { Partition::Trainable } else { Partition::Frozen };
        if train {
            trainable += entry.tensor.len() as u64;
        }
    }
    Ok(trainable)
}

fn normal_tensor<T: Real>(seed: u64, name: &str, shape: Vec<usize>, std: f64) -> Tensor<T> {
    let mut rng = StreamRng::for_label(seed, name);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(rng.next_normal() * std)).collect();
    Tensor::new(shape, data).expect("shape/data consistent by construction")
}

/// Elementwise standard deviation used at initialization for the content
/// skip; chosen so a fresh d x d skip matrix has Frobenius norm about
/// `1e-4 * d`, far below anything a trained model exhibits.
pub const SKIP_INIT_STD: f64 = 1e-4;

/// Conventional scale for the frozen base projections.
pub const BASE_INIT_STD: f64 = 0.02;

/// Build a freshly initialized parameter store. Every tensor draws from its
/// own named stream, so two configs built from the same seed agree exactly on
/// every parameter they share. Initialization makes the modified paths exact
/// no-ops: `W_down = 0`, LoRA `B = 0`, and `W_skip ~ N(0, (1e-4)^2)`.
pub fn init_param_store<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let d = cfg.d_model();
    let b = &cfg.block;
    let mut store = ParamStore::new();
    let add_normal = |store: &mut ParamStore<T>, name: String, shape: Vec<usize>, std: f64, role: ParamRole| {
        let tensor = normal_tensor(seed, &name, shape, std);
        store.insert(name, tensor, role);
    };

    add_normal(
        &mut store,
        "embed.weight".into(),
        vec![cfg.vocab_size, d],
        BASE_INIT_STD,
        ParamRole::Embedding,
    );

    for layer in 0..cfg.n_layers {
        let p = |part: &str| format!("layers.{layer}.{part}");
        store.insert(p("norm1.gain"), Tensor::full(vec![d], T::one()), ParamRole::NormGain);
        if b.use_preproj {
            let ed = b.preproj_hidden();
            add_normal(&mut store, p("preproj.w_up"), vec![d, ed], BASE_INIT_STD, ParamRole::PreprojUp);
            store.insert(p("preproj.w_down"), Tensor::zeros(vec![ed, d]), ParamRole::PreprojDown);
        }
        for w in ["attn.w_q", "attn.w_k", "attn.w_v", "attn.w_o"] {
            add_normal(&mut store, p(w), vec![d, d], BASE_INIT_STD, ParamRole::AttnProj);
        }
        if b.lora_rank > 0 {
            let r = b.lora_rank;
            add_normal(&mut store, p("attn.lora_qkv.a"), vec![r, d], BASE_INIT_STD, ParamRole::LoraA);
            store.insert(p("attn.lora_qkv.b"), Tensor::zeros(vec![3 * d, r]), ParamRole::LoraB);
            add_normal(&mut store, p("attn.lora_o.a"), vec![r, d], BASE_INIT_STD, ParamRole::LoraA);
            store.insert(p("attn.lora_o.b"), Tensor::zeros(vec![d, r]), ParamRole::LoraB);
        }
        if b.use_skip {
            add_normal(&mut store, p("skip.w"), vec![d, d], SKIP_INIT_STD, ParamRole::Skip);
        }
        store.insert(p("norm2.gain"), Tensor::full(vec![d], T::one()), ParamRole::NormGain);
        add_normal(&mut store, p("ffn.w1"), vec![d, b.ffn_hidden()], BASE_INIT_STD, ParamRole::FfnProj);
        add_normal(&mut store, p("ffn.w2"), vec![b.ffn_hidden(), d], BASE_INIT_STD, ParamRole::FfnProj);
    }

    store.insert("final_norm.gain", Tensor::full(vec![d], T::one()), ParamRole::NormGain);
    if !cfg.tie_embeddings {
        add_normal(&mut store, "head.weight".into(), vec![d, cfg.vocab_size], BASE_INIT_STD, ParamRole::Head);
    }
    Ok(store)
}

/// The expected name -> shape schema for a config, used to validate loaded
/// checkpoints before any compute.
pub fn expected_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.d_model();
    let b = &cfg.block;
    let mut out = vec![("embed.weight".to_string(), vec![cfg.vocab_size, d])];
    for layer in 0..cfg.n_layers {
        let p = |part: &str| format!("layers.{layer}.{part}");
        out.push((p("norm1.gain"), vec![d]));
        if b.use_preproj {
            out.push((p("preproj.w_up"), vec![d, b.preproj_hidden()]));
            out.push((p("preproj.w_down"), vec![b.preproj_hidden(), d]));
        }
        for w in ["attn.w_q", "attn.w_k", "attn.w_v", "attn.w_o"] {
            out.push((p(w), vec![d, d]));
        }
        if b.lora_rank > 0 {
            out.push((p("attn.lora_qkv.a"), vec![b.lora_rank, d]));
            out.push((p("attn.lora_qkv.b"), vec![3 * d, b.lora_rank]));
            out.push((p("attn.lora_o.a"), vec![b.lora_rank, d]));
            out.push((p("attn.lora_o.b"), vec![d, b.lora_rank]));
        }
        if b.use_skip {
            out.push((p("skip.w"), vec![d, d]));
        }
        out.push((p("norm2.gain"), vec![d]));
        out.push((p("ffn.w1"), vec![d, b.ffn_hidden()]));
        out.push((p("ffn.w2"), vec![b.ffn_hidden(), d]));
    }
    out.push(("final_norm.gain".to_string(), vec![d]));
    if !cfg.tie_embeddings {
        out.push(("head.weight".to_string(), vec![d, cfg.vocab_size]));
    }
    out
}

/// Check a store against the schema for `cfg`: every expected tensor present
/// with the right shape, nothing extra.
pub fn validate_store<T: Real>(store: &ParamStore<T>, cfg: &ModelConfig) -> Result<()> {
    let expected = expected_shapes(cfg);
    if expected.len() != store.len() {
        return Err(Error::Config(format!(
            "store has {} tensors, config expects {}",
            store.len(),
            expected.len()
        )));
    }
    for (name, shape) in &expected {
        let entry = store.get(name).map_err(|_| {
            Error::Config(format!("checkpoint does not provide parameter {name:?}"))
        })?;
        if entry.tensor.shape() != shape.as_slice() {
            return Err(Error::Config(format!(
                "parameter {name:?} has shape {:?}, config expects {:?}",
                entry.tensor.shape(),
                shape
            )));
        }
    }
    Ok(())
}

/// Tape bindings for the whole model.
pub struct BoundModel {
    pub embed: Var,
    pub layers: Vec<BlockVars>,
    pub final_gain: Var,
    /// Head projection [d, vocab]; for tied embeddings this is the transpose
    /// of the embedding node so gradient flows back to it under `Full`.
    pub head: Var,
    /// (name, var) for every trainable entry, in store order; gradient
    /// extraction after `backward` walks this list.
    pub trainable: Vec<(String, Var)>,
}

/// Register every store tensor on a tape. Trainable entries become gradient
/// leaves, frozen entries plain inputs.
pub fn bind_model<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
) -> Result<BoundModel> {
    validate_store(store, cfg)?;
    let mut trainable = Vec::new();
    let mut bind = |tape: &mut Tape<T>, name: &str| -> Result<Var> {
        let entry = store.get(name)?;
        Ok(match entry.partition {
            Partition::Trainable => {
                let var = tape.param(entry.tensor.clone());
                trainable.push((name.to_string(), var));
                var
            }
            Partition::Frozen => tape.input(entry.tensor.clone()),
        })
    };

    let embed = bind(tape, "embed.weight")?;
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for layer in 0..cfg.n_layers {
        let p = |part: &str| format!("layers.{layer}.{part}");
        let norm1_gain = bind(tape, &p("norm1.gain"))?;
        let preproj = if cfg.block.use_preproj {
            Some((bind(tape, &p("preproj.w_up"))?, bind(tape, &p("preproj.w_down"))?))
        } else {
            None
        };
        let w_q = bind(tape, &p("attn.w_q"))?;
        let w_k = bind(tape, &p("attn.w_k"))?;
        let w_v = bind(tape, &p("attn.w_v"))?;
        let w_o = bind(tape, &p("attn.w_o"))?;
        let (lora_qkv, lora_o) = if cfg.block.lora_rank > 0 {
            (
                Some((bind(tape, &p("attn.lora_qkv.a"))?, bind(tape, &p("attn.lora_qkv.b"))?)),
                Some((bind(tape, &p("attn.lora_o.a"))?, bind(tape, &p("attn.lora_o.b"))?)),
            )
        } else {
            (None, None)
        };
        let w_skip =
            if cfg.block.use_skip { Some(bind(tape, &p("skip.w"))?) } else { None };
        let norm2_gain = bind(tape, &p("norm2.gain"))?;
        let ffn_w1 = bind(tape, &p("ffn.w1"))?;
        let ffn_w2 = bind(tape, &p("ffn.w2"))?;
        layers.push(BlockVars {
            norm1_gain,
            preproj,
            w_q,
            w_k,
            w_v,
            w_o,
            lora_qkv,
            lora_o,
            w_skip,
            norm2_gain,
            ffn_w1,
            ffn_w2,
        });
    }
    let final_gain = bind(tape, "final_norm.gain")?;
    let head = if cfg.tie_embeddings {
        tape.transpose(embed)?
    } else {
        bind(tape, "head.weight")?
    };
    Ok(BoundModel { embed, layers, final_gain, head, trainable })
}

/// Forward pass over an already-bound model. `pos_offset` is the absolute
/// position of `tokens[0]`.
pub fn forward_bound<T: Real>(
    tape: &mut Tape<T>,
    tokens: &[usize],
    bound: &BoundModel,
    cfg: &ModelConfig,
    pos_offset: usize,
) -> Result<Var> {
    if tokens.is_empty() {
        return Err(Error::Config("empty token sequence".into()));
    }
    if pos_offset + tokens.len() > cfg.max_seq_len {
        return Err(Error::Config(format!(
            "sequence of {} tokens at offset {pos_offset} exceeds max_seq_len {}",
            tokens.len(),
            cfg.max_seq_len
        )));
    }
    let mut x = tape.embed(bound.embed, tokens)?;
    for vars in &bound.layers {
        x = blocks::block_forward(tape, x, vars, &cfg.block, pos_offset)?;
    }
    let eps = T::from_f64(cfg.block.eps);
    let normed = tape.rmsnorm(x, bound.final_gain, eps)?;
    tape.matmul(normed, bound.head)
}

/// Full forward pass: tokens -> logits [t, vocab].
pub fn model_forward<T: Real>(
    tape: &mut Tape<T>,
    tokens: &[usize],
    store: &ParamStore<T>,
    cfg: &ModelConfig,
) -> Result<Var> {
    let bound = bind_model(tape, store, cfg)?;
    forward_bound(tape, tokens, &bound, cfg, 0)
}

// ---- KV-cache incremental decoding ----------------------------------------

struct LayerKV<T> {
    k: Vec<T>,
    v: Vec<T>,
}

/// Per-layer store of past keys and values. Append-only within a decode
/// session; every variant stores exactly `2 * n_heads * head_dim` elements
/// per token per layer, regardless of pre-projection / skip / LoRA flags.
pub struct KVCache<T> {
    layers: Vec<LayerKV<T>>,
    len: usize,
    capacity: usize,
}

impl<T: Real> KVCache<T> {
    pub fn new(cfg: &ModelConfig) -> Self {
        let per_token = cfg.block.d_model;
        let layers = (0..cfg.n_layers)
            .map(|_| LayerKV {
                k: Vec::with_capacity(cfg.max_seq_len * per_token),
                v: Vec::with_capacity(cfg.max_seq_len * per_token),
            })
            .collect();
        KVCache { layers, len: 0, capacity: cfg.max_seq_len }
    }

    /// Number of cached positions.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Total stored elements across layers and both tensors.
    pub fn elems(&self) -> u64 {
        self.layers.iter().map(|l| (l.k.len() + l.v.len()) as u64).sum()
    }
}

struct LayerRefs<'a, T> {
    norm1_gain: &'a [T],
    preproj: Option<(&'a Tensor<T>, &'a Tensor<T>)>,
    w_q: &'a Tensor<T>,
    w_k: &'a Tensor<T>,
    w_v: &'a Tensor<T>,
    w_o: &'a Tensor<T>,
    lora_qkv: Option<(&'a Tensor<T>, &'a Tensor<T>)>,
    lora_o: Option<(&'a Tensor<T>, &'a Tensor<T>)>,
    w_skip: Option<&'a Tensor<T>>,
    norm2_gain: &'a [T],
    ffn_w1: &'a Tensor<T>,
    ffn_w2: &'a Tensor<T>,
}

fn layer_refs<'a, T: Real>(
    store: &'a ParamStore<T>,
    cfg: &ModelConfig,
    layer: usize,
) -> Result<LayerRefs<'a, T>> {
    let p = |part: &str| format!("layers.{layer}.{part}");
    let t = |name: String| store.get(&name).map(|e| &e.tensor);
    Ok(LayerRefs {
        norm1_gain: t(p("norm1.gain"))?.data(),
        preproj: if cfg.block.use_preproj {
            Some((t(p("preproj.w_up"))?, t(p("preproj.w_down"))?))
        } else {
            None
        },
        w_q: t(p("attn.w_q"))?,
        w_k: t(p("attn.w_k"))?,
        w_v: t(p("attn.w_v"))?,
        w_o: t(p("attn.w_o"))?,
        lora_qkv: if cfg.block.lora_rank > 0 {
            Some((t(p("attn.lora_qkv.a"))?, t(p("attn.lora_qkv.b"))?))
        } else {
            None
        },
        lora_o: if cfg.block.lora_rank > 0 {
            Some((t(p("attn.lora_o.a"))?, t(p("attn.lora_o.b"))?))
        } else {
            None
        },
        w_skip: if cfg.block.use_skip { Some(t(p("skip.w"))?) } else { None },
        norm2_gain: t(p("norm2.gain"))?.data(),
        ffn_w1: t(p("ffn.w1"))?,
        ffn_w2: t(p("ffn.w2"))?,
    })
}

fn finite_or<T: Real>(op: &'static str, data: &[T]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

/// Row-vector times matrix, with the same accumulation order as the full
/// forward matmul kernel restricted to one row.
fn row_matmul<T: Real>(row: &[T], w: &Tensor<T>) -> Vec<T> {
    let (k, n) = (w.shape()[0], w.shape()[1]);
    let mut out = vec![T::zero(); n];
    kernels::matmul(row, w.data(), 1, k, n, &mut out);
    out
}

fn add_assign<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

/// Projection with optional LoRA on a single row; `b_row_offset` selects the
/// row block of the fused B matrix. The LoRA update materializes the same
/// transposed operands the tape path multiplies against, so both paths share
/// one accumulation order.
fn project_row<T: Real>(
    x: &[T],
    w: &Tensor<T>,
    lora: Option<(&Tensor<T>, &Tensor<T>)>,
    b_row_offset: usize,
) -> Vec<T> {
    let mut out = row_matmul(x, w);
    if let Some((a, b)) = lora {
        let r = a.shape()[0];
        let d_in = a.shape()[1];
        let d_out = out.len();
        // u = x A^T
        let mut a_t = vec![T::zero(); r * d_in];
        kernels::transpose(a.data(), r, d_in, &mut a_t);
        let mut u = vec![T::zero(); r];
        kernels::matmul(x, &a_t, 1, d_in, r, &mut u);
        // delta = u * B_block^T, B rows b_row_offset..b_row_offset + d_out
        let b_cols = b.shape()[1];
        let block = &b.data()[b_row_offset * b_cols..(b_row_offset + d_out) * b_cols];
        let mut b_t = vec![T::zero(); d_out * b_cols];
        kernels::transpose(block, d_out, b_cols, &mut b_t);
        let mut delta = vec![T::zero(); d_out];
        kernels::matmul(&u, &b_t, 1, b_cols, d_out, &mut delta);
        add_assign(&mut out, &delta);
    }
    out
}

/// One incremental decode step: consume one token, append exactly one K and
/// one V row per layer, and return logits over the vocabulary. The logits
/// equal the last row of a full forward pass over the whole prefix.
pub fn decode_step<T: Real>(
    token: usize,
    cache: &mut KVCache<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
) -> Result<Vec<T>> {
    if token >= cfg.vocab_size {
        return Err(Error::Config(format!(
            "token {token} out of vocabulary range {}",
            cfg.vocab_size
        )));
    }
    if cache.len >= cache.capacity {
        return Err(Error::Config(format!(
            "cache overflow: {} positions already stored, max_seq_len {}",
            cache.len, cache.capacity
        )));
    }
    let d = cfg.d_model();
    let heads = cfg.block.n_heads;
    let hd = cfg.block.head_dim();
    let eps = T::from_f64(cfg.block.eps);
    let pos = cache.len;
    let embed = &store.get("embed.weight")?.tensor;

    let mut x = embed.data()[token * d..(token + 1) * d].to_vec();
    for layer in 0..cfg.n_layers {
        let refs = layer_refs(store, cfg, layer)?;
        let mut x_hat = vec![T::zero(); d];
        kernels::rmsnorm_rows(&x, refs.norm1_gain, eps, 1, d, &mut x_hat);
        let x_tilde = match refs.preproj {
            Some((w_up, w_down)) => {
                let mut hidden = row_matmul(&x_hat, w_up);
                let pre_act = hidden.clone();
                kernels::silu(&pre_act, &mut hidden);
                let delta = row_matmul(&hidden, w_down);
                let mut out = x_hat.clone();
                add_assign(&mut out, &delta);
                out
            }
            None => x_hat,
        };
        finite_or("pre_projection", &x_tilde)?;

        let mut q = project_row(&x_tilde, refs.w_q, refs.lora_qkv, 0);
        let mut k = project_row(&x_tilde, refs.w_k, refs.lora_qkv, d);
        let v = project_row(&x_tilde, refs.w_v, refs.lora_qkv, 2 * d);

        let q_in = q.clone();
        kernels::rope(&q_in, 1, heads, hd, cfg.block.rope_theta, pos, false, &mut q);
        let k_in = k.clone();
        kernels::rope(&k_in, 1, heads, hd, cfg.block.rope_theta, pos, false, &mut k);

        let kv = &mut cache.layers[layer];
        kv.k.extend_from_slice(&k);
        kv.v.extend_from_slice(&v);

        // Attention over the cached prefix, one head at a time, in the same
        // accumulation order as the full-sequence kernels.
        let scale = T::one() / T::from_f64((hd as f64).sqrt());
        let mut concat = vec![T::zero(); d];
        let prefix = pos + 1;
        let mut logits_row = vec![T::zero(); prefix];
        let mut weights = vec![T::zero(); prefix];
        for a in 0..heads {
            let q_head = &q[a * hd..(a + 1) * hd];
            for (j, l) in logits_row.iter_mut().enumerate() {
                let k_row = &kv.k[(j * heads + a) * hd..(j * heads + a + 1) * hd];
                *l = kernels::dot(q_head, k_row) * scale;
            }
            kernels::softmax_row(&logits_row, &mut weights);
            let out_seg = &mut concat[a * hd..(a + 1) * hd];
            for (j, &w) in weights.iter().enumerate() {
                if w == T::zero() {
                    continue;
                }
                let v_row = &kv.v[(j * heads + a) * hd..(j * heads + a + 1) * hd];
                for (o, &vv) in out_seg.iter_mut().zip(v_row) {
                    *o = *o + w * vv;
                }
            }
        }
        let attn_out = project_row(&concat, refs.w_o, refs.lora_o, 0);
        finite_or("causal_attention", &attn_out)?;

        add_assign(&mut x, &attn_out);
        if let Some(w_skip) = refs.w_skip {
            let skip = row_matmul(&x_tilde, w_skip);
            add_assign(&mut x, &skip);
        }

        let mut y = vec![T::zero(); d];
        kernels::rmsnorm_rows(&x, refs.norm2_gain, eps, 1, d, &mut y);
        let mut f_hidden = row_matmul(&y, refs.ffn_w1);
        let pre_act = f_hidden.clone();
        kernels::silu(&pre_act, &mut f_hidden);
        let f_out = row_matmul(&f_hidden, refs.ffn_w2);
        add_assign(&mut x, &f_out);
        finite_or("block_forward", &x)?;
    }
    cache.len += 1;

    let final_gain = store.get("final_norm.gain")?.tensor.data();
    let mut normed = vec![T::zero(); d];
    kernels::rmsnorm_rows(&x, final_gain, eps, 1, d, &mut normed);

    let logits = if cfg.tie_embeddings {
        // h E^T computed in the same order as matmul against the transposed
        // embedding: ascending over the shared d axis.
        let mut out = vec![T::zero(); cfg.vocab_size];
        for (kk, &h) in normed.iter().enumerate() {
            if h == T::zero() {
                continue;
            }
            for (j, o) in out.iter_mut().enumerate() {
                *o = *o + h * embed.data()[j * d + kk];
            }
        }
        out
    } else {
        row_matmul(&normed, &store.get("head.weight")?.tensor)
    };
    finite_or("decode_head", &logits)?;
    Ok(logits)
}

/// Smallest-index argmax.
pub fn argmax<T: Real>(logits: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Autoregressive generation through the KV cache. The prompt is consumed
/// token by token, then `n_new` tokens are sampled. Temperature 0 is greedy
/// argmax; temperature > 0 samples from `softmax(logits / temperature)`
/// using the pinned seeded generator.
pub fn generate<T: Real>(
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    prompt: &[usize],
    n_new: usize,
    temperature: f64,
    seed: u64,
) -> Result<Vec<usize>> {
    if prompt.is_empty() {
        return Err(Error::Config("prompt must contain at least one token".into()));
    }
    let mut cache = KVCache::new(cfg);
    let mut logits = Vec::new();
    for &tok in prompt {
        logits = decode_step(tok, &mut cache, store, cfg)?;
    }
    let mut rng = StreamRng::for_label(seed, "generate");
    let mut out = Vec::with_capacity(n_new);
    for _ in 0..n_new {
        let next = if temperature > 0.0 {
            let scaled: Vec<T> =
                logits.iter().map(|&v| v / T::from_f64(temperature)).collect();
            let mut probs = vec![T::zero(); scaled.len()];
            kernels::softmax_row(&scaled, &mut probs);
            let draw = T::from_f64(rng.next_f64());
            let mut acc = T::zero();
            let mut chosen = probs.len() - 1;
            for (i, &p) in probs.iter().enumerate() {
                acc = acc + p;
                if draw < acc {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            argmax(&logits)
        };
        out.push(next);
        if out.len() == n_new {
            break;
        }
        logits = decode_step(next, &mut cache, store, cfg)?;
    }
    Ok(out)
}
