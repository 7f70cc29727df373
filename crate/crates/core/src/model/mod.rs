//! Desk-scale differentiable models with named weight blocks.
//!
//! Two kinds are provided: a tanh MLP regressor and a feed-forward character
//! language model (embedding, tanh hidden layers, softmax head). Regulated
//! matrices live in [`BlockState`]s; biases and unregulated matrices are plain
//! tensors.

mod adam;
mod data;
mod net;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use data::{
    synthetic_corpus, Batch, DataSource, RegressionData, TextData, Vocab, UNKNOWN_CHAR,
};
pub use net::{evaluate, forward_backward, EvalResult, Grads, WeightSource};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{rho_for_block, BlockState, EngineConfig, EngineError};
use crate::tensor::Matrix;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("cannot ingest `{path}`: {reason}")]
    Ingestion { path: String, reason: String },
    #[error("block `{0}` has no surrogate; run an adaptation sweep first")]
    MissingSurrogate(String),
    #[error("state mismatch: {0}")]
    State(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    MlpRegression,
    CharLm,
}

/// Architecture and initialization of a toy model.
///
/// For `mlp_regression`, `layer_dims = [input, hidden.., output]` and every
/// weight matrix is a block. For `char_lm`, `layer_dims = [embed_dim,
/// hidden..]`; the first hidden layer reads `context_len * embed_dim` inputs
/// and a head maps the last hidden layer to `vocab_size` logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModelConfig {
    pub kind: ModelKind,
    pub layer_dims: Vec<usize>,
    pub vocab_size: usize,
    pub context_len: usize,
    pub include_embedding_block: bool,
    /// Regulate the output head too (char_lm only).
    #[serde(default)]
    pub include_head_block: bool,
    pub seed: u64,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        ToyModelConfig {
            kind: ModelKind::CharLm,
            layer_dims: vec![48, 320, 128],
            vocab_size: 64,
            context_len: 8,
            include_embedding_block: true,
            include_head_block: false,
            seed: 0,
        }
    }
}

impl ToyModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.layer_dims.len() < 2 {
            return Err(ModelError::Config("layer_dims needs at least two entries".into()));
        }
        if self.layer_dims.contains(&0) {
            return Err(ModelError::Config("layer_dims must be positive".into()));
        }
        if self.kind == ModelKind::CharLm {
            if !(2..=256).contains(&self.vocab_size) {
                return Err(ModelError::Config(format!(
                    "vocab_size {} outside [2, 256]",
                    self.vocab_size
                )));
            }
            if self.context_len == 0 {
                return Err(ModelError::Config("context_len must be positive".into()));
            }
        }
        Ok(())
    }

    /// `(out, in)` of every linear layer, head included.
    pub(crate) fn linear_shapes(&self) -> Vec<(usize, usize)> {
        let d = &self.layer_dims;
        match self.kind {
            ModelKind::MlpRegression => d.windows(2).map(|w| (w[1], w[0])).collect(),
            ModelKind::CharLm => {
                let mut shapes = vec![(d[1], self.context_len * d[0])];
                shapes.extend(d[1..].windows(2).map(|w| (w[1], w[0])));
                shapes.push((self.vocab_size, *d.last().unwrap()));
                shapes
            }
        }
    }
}

/// Where a parameter slot is stored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotLoc {
    Block(usize),
    Plain(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Slot {
    pub name: String,
    pub shape: (usize, usize),
    pub loc: SlotLoc,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub value: Matrix,
}

/// A model: parameter slots in forward order, each backed by a block or a
/// plain tensor. Slot order is `[embed], (weight, bias) per layer`.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ToyModelConfig,
    pub blocks: Vec<BlockState>,
    pub plain: Vec<NamedTensor>,
    slots: Vec<Slot>,
}

fn slot_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name, mixed with the model seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

struct SlotSpec {
    name: String,
    shape: (usize, usize),
    regulated: bool,
    std: f64,
}

fn slot_specs(cfg: &ToyModelConfig) -> Vec<SlotSpec> {
    let mut specs = Vec::new();
    let shapes = cfg.linear_shapes();
    let n_layers = shapes.len();
    if cfg.kind == ModelKind::CharLm {
        specs.push(SlotSpec {
            name: "embed".into(),
            shape: (cfg.vocab_size, cfg.layer_dims[0]),
            regulated: cfg.include_embedding_block,
            std: 1.0,
        });
    }
    for (i, &(out, inp)) in shapes.iter().enumerate() {
        let is_head = cfg.kind == ModelKind::CharLm && i + 1 == n_layers;
        let base = match (cfg.kind, is_head) {
            (ModelKind::CharLm, true) => "head".to_string(),
            (ModelKind::CharLm, false) => format!("hidden.{i}"),
            (ModelKind::MlpRegression, _) => format!("layer.{i}"),
        };
        specs.push(SlotSpec {
            name: base.clone(),
            shape: (out, inp),
            regulated: !is_head || cfg.include_head_block,
            std: 1.0 / (inp as f64).sqrt(),
        });
        specs.push(SlotSpec {
            name: format!("{base}.bias"),
            shape: (1, out),
            regulated: false,
            std: 0.0,
        });
    }
    specs
}

/// Builds a model with deterministic per-slot initialization. Each slot draws
/// from its own stream keyed by its name, so toggling which slots are
/// regulated never changes any initial weight.
pub fn build_model(cfg: &ToyModelConfig, engine: &EngineConfig) -> Result<Model, ModelError> {
    cfg.validate()?;
    engine.validate()?;
    let specs = slot_specs(cfg);
    let n_blocks = specs.iter().filter(|s| s.regulated).count();
    let mut blocks = Vec::new();
    let mut plain = Vec::new();
    let mut slots = Vec::new();
    for spec in specs {
        let (r, c) = spec.shape;
        let value = if spec.std == 0.0 {
            Matrix::zeros(r, c)
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(slot_seed(cfg.seed, &spec.name));
            Matrix::random_normal(r, c, spec.std, &mut rng)
        };
        let loc = if spec.regulated {
            let rho = rho_for_block(r, c, n_blocks, engine.rho_constant)?;
            let mut b = BlockState::new(spec.name.clone(), value, rho)?;
            b.alpha = engine.initial_alpha;
            b.beta = engine.initial_beta;
            blocks.push(b);
            SlotLoc::Block(blocks.len() - 1)
        } else {
            plain.push(NamedTensor {
                name: spec.name.clone(),
                value,
            });
            SlotLoc::Plain(plain.len() - 1)
        };
        slots.push(Slot {
            name: spec.name,
            shape: spec.shape,
            loc,
        });
    }
    Ok(Model {
        config: cfg.clone(),
        blocks,
        plain,
        slots,
    })
}

impl Model {
    /// Reassembles a model from stored parts, checking names and shapes.
    pub fn from_parts(
        config: ToyModelConfig,
        blocks: Vec<BlockState>,
        plain: Vec<NamedTensor>,
    ) -> Result<Model, ModelError> {
        config.validate()?;
        let mut slots = Vec::new();
        for spec in slot_specs(&config) {
            let loc = if let Some(i) = blocks.iter().position(|b| b.name == spec.name) {
                if blocks[i].shape() != spec.shape {
                    return Err(ModelError::State(format!(
                        "block `{}` has shape {:?}, expected {:?}",
                        spec.name,
                        blocks[i].shape(),
                        spec.shape
                    )));
                }
                SlotLoc::Block(i)
            } else if let Some(i) = plain.iter().position(|p| p.name == spec.name) {
                if plain[i].value.shape() != spec.shape {
                    return Err(ModelError::State(format!(
                        "tensor `{}` has shape {:?}, expected {:?}",
                        spec.name,
                        plain[i].value.shape(),
                        spec.shape
                    )));
                }
                SlotLoc::Plain(i)
            } else {
                return Err(ModelError::State(format!("missing tensor `{}`", spec.name)));
            };
            slots.push(Slot {
                name: spec.name,
                shape: spec.shape,
                loc,
            });
        }
        let used = slots.len();
        if blocks.len() + plain.len() != used {
            return Err(ModelError::State("checkpoint carries unknown tensors".into()));
        }
        Ok(Model {
            config,
            blocks,
            plain,
            slots,
        })
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    /// Live trainable tensor of a slot.
    pub fn slot_value(&self, i: usize) -> &Matrix {
        match self.slots[i].loc {
            SlotLoc::Block(b) => &self.blocks[b].x,
            SlotLoc::Plain(p) => &self.plain[p].value,
        }
    }

    pub fn slot_value_mut(&mut self, i: usize) -> &mut Matrix {
        match self.slots[i].loc {
            SlotLoc::Block(b) => &mut self.blocks[b].x,
            SlotLoc::Plain(p) => &mut self.plain[p].value,
        }
    }

    pub fn block(&self, name: &str) -> Option<&BlockState> {
        self.blocks.iter().find(|b| b.name == name)
    }

    pub fn param_count(&self) -> usize {
        self.slots.iter().map(|s| s.shape.0 * s.shape.1).sum()
    }

    /// Factored parameter count of all block surrogates.
    pub fn surrogate_param_count(&self) -> usize {
        self.blocks.iter().map(|b| b.surrogate_param_count()).sum()
    }

    /// Mean of `||X_i - L_i - S_i||_F` over blocks.
    pub fn avg_recon_error(&self) -> f64 {
        if self.blocks.is_empty() {
            return 0.0;
        }
        self.blocks.iter().map(|b| b.reconstruction_error()).sum::<f64>() / self.blocks.len() as f64
    }
}
