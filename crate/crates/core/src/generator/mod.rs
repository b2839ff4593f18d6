//! Visual-knowledge-grounded response generator.
//!
//! A single transformer reads regions (O), concept tags (Q), the dialog
//! context (C) and the response (R) as one sequence. O, Q and C attend to
//! each other in both directions; R attends to everything before it and to
//! itself. Training combines masked concept prediction (order-free, matched
//! with the Hungarian solver) and masked response prediction, optionally
//! with a visual knowledge bias on the response logits.

mod forward;
mod infer;
mod inputs;
mod params;
mod train;

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, ParamTree};
use crate::checkpoint::{assign_tensors, read_checkpoint, write_checkpoint};
use crate::corpus::{Quadruple, TokenId, Tokenizer, SPECIALS};
use crate::error::{Error, Result};

pub use forward::{mcp_loss, mrp_loss, ForwardOutput, LossValues, TeacherForced};
pub use infer::{AttentionExport, Decode, Generation, IncrementalDecoder};
pub use inputs::{build_attention_mask, build_inputs, InputBatch, SequenceLayout, Segment};
pub use params::{vkb_distribution, DecodingHead, Generator, Layer};
pub use train::{train_generator, TrainReport};

pub const GENERATOR_MAGIC: &[u8; 4] = b"MGEN";

static EMPTY_MCP: AtomicUsize = AtomicUsize::new(0);
static VKB_FALLBACK: AtomicUsize = AtomicUsize::new(0);

/// Number of times an example had no masked concepts to score.
pub fn empty_mcp_count() -> usize {
    EMPTY_MCP.load(Ordering::Relaxed)
}

/// Number of times the visual knowledge bias was skipped for lack of concepts.
pub fn vkb_fallback_count() -> usize {
    VKB_FALLBACK.load(Ordering::Relaxed)
}

/// Which vocabulary entries may receive the visual knowledge bias.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VkbScope {
    /// The concept tags of the current example.
    #[default]
    PerInstance,
    /// Every concept tag seen in training.
    Global,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Filled from the tokenizer when a model is created.
    pub vocab_size: usize,
    pub max_context_len: usize,
    pub max_response_len: usize,
    /// Maximum number of regions (and concept tags) per example.
    pub region_len: usize,
    pub d_obj: usize,
    pub max_turns: usize,
    pub mcp_rate: f64,
    pub mrp_rate: f64,
    pub mcp_enabled: bool,
    pub vkb_enabled: bool,
    pub vkb_scope: VkbScope,
    pub init_std: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps; `0` means run all epochs.
    pub max_steps: usize,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            hidden: 64,
            heads: 4,
            ffn_dim: 256,
            vocab_size: 0,
            max_context_len: 110,
            max_response_len: 40,
            region_len: 36,
            d_obj: crate::detector::DEFAULT_D_OBJ,
            max_turns: 16,
            mcp_rate: 0.15,
            mrp_rate: 0.70,
            mcp_enabled: true,
            vkb_enabled: true,
            vkb_scope: VkbScope::PerInstance,
            init_std: 0.02,
            lr: 1e-3,
            batch_size: 8,
            epochs: 10,
            max_steps: 0,
            clip_norm: 1.0,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    /// Full-size settings: 12 layers, width 768, Adam at 3e-5, batch 64.
    pub fn full_scale() -> Self {
        Self { layers: 12, hidden: 768, heads: 12, ffn_dim: 3072, lr: 3e-5, batch_size: 64, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("max_context_len", self.max_context_len),
            ("max_response_len", self.max_response_len),
            ("region_len", self.region_len),
            ("d_obj", self.d_obj),
            ("max_turns", self.max_turns),
            ("batch_size", self.batch_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!("hidden {} not divisible by heads {}", self.hidden, self.heads)));
        }
        for (name, r) in [("mcp_rate", self.mcp_rate), ("mrp_rate", self.mrp_rate)] {
            if !(r > 0.0 && r < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {r}")));
            }
        }
        if self.vocab_size < SPECIALS.len() {
            return Err(Error::Config(format!("vocab_size {} smaller than the special tokens", self.vocab_size)));
        }
        if !(self.lr > 0.0) || !(self.init_std > 0.0) {
            return Err(Error::Config("lr and init_std must be positive".into()));
        }
        Ok(())
    }

    /// Size of the position table: both region blocks, context, BOS,
    /// response and one more slot for EOS.
    pub fn max_positions(&self) -> usize {
        2 * self.region_len + self.max_context_len + self.max_response_len + 2
    }
}

#[derive(Serialize, Deserialize)]
struct GeneratorHeader {
    config: GeneratorConfig,
    tokenizer_hash: String,
    vocab: Vec<String>,
    global_concepts: Vec<TokenId>,
}

/// Generator parameters together with everything needed to use them.
#[derive(Clone, Debug)]
pub struct GeneratorModel {
    pub config: GeneratorConfig,
    pub tokenizer: Tokenizer,
    pub params: Generator<Mat>,
    /// Concept ids used when the bias scope is global.
    pub global_concepts: Vec<TokenId>,
}

impl GeneratorModel {
    /// Randomly initialized model; `vocab_size` is taken from the tokenizer.
    pub fn new(mut config: GeneratorConfig, tokenizer: Tokenizer) -> Result<Self> {
        config.vocab_size = tokenizer.len();
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = Generator::init(&config, &mut rng);
        Ok(Self { config, tokenizer, params, global_concepts: Vec::new() })
    }

    /// Sets the global concept set from the tags of `quads`.
    pub fn collect_global_concepts(&mut self, quads: &[Quadruple]) {
        let set: BTreeSet<TokenId> =
            quads.iter().flat_map(|q| q.concepts.iter().copied()).filter(|&c| !Tokenizer::is_special(c)).collect();
        self.global_concepts = set.into_iter().collect();
    }

    /// Vocabulary ids that may receive the bias for this example.
    pub fn bias_concepts<'a>(&'a self, batch: &'a InputBatch) -> &'a [TokenId] {
        self.scope_concepts(&batch.concept_ids)
    }

    pub fn head(&self) -> DecodingHead<'_> {
        self.params.head()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = GeneratorHeader {
            config: self.config.clone(),
            tokenizer_hash: self.tokenizer.hash(),
            vocab: self.tokenizer.tokens().to_vec(),
            global_concepts: self.global_concepts.clone(),
        };
        write_checkpoint(path, GENERATOR_MAGIC, &header, &self.params.params())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, tensors): (GeneratorHeader, Vec<Mat>) = read_checkpoint(path, GENERATOR_MAGIC)?;
        let tokenizer = Tokenizer::from_tokens(header.vocab)?;
        if tokenizer.hash() != header.tokenizer_hash {
            return Err(Error::CheckpointMismatch("tokenizer hash does not match stored vocabulary".into()));
        }
        if header.config.vocab_size != tokenizer.len() {
            return Err(Error::CheckpointMismatch("vocab_size does not match stored vocabulary".into()));
        }
        let mut model = Self::new(header.config, tokenizer)?;
        assign_tensors(model.params.params_mut(), tensors)?;
        model.global_concepts = header.global_concepts;
        Ok(model)
    }

    /// Replaces the parameters with those of a compatible checkpoint
    /// (same shapes), keeping this model's config and tokenizer.
    pub fn init_from(&mut self, path: &Path) -> Result<()> {
        let other = Self::load(path)?;
        if other.tokenizer.hash() != self.tokenizer.hash() {
            return Err(Error::CheckpointMismatch("checkpoint was trained with a different vocabulary".into()));
        }
        let tensors: Vec<Mat> = other.params.params().into_iter().cloned().collect();
        assign_tensors(self.params.params_mut(), tensors)
    }
}
