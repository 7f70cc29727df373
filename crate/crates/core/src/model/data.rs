use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{build_model, net::predict_features, Model, ModelError, ModelKind, ToyModelConfig};
use crate::engine::EngineConfig;
use crate::tensor::Matrix;

/// Placeholder printed for the unknown token.
pub const UNKNOWN_CHAR: char = '\u{fffd}';

/// Character order for vocabularies: the first 63 entries cover the built-in
/// corpus; the rest of printable ASCII follows.
const CHAR_ORDER: &str = " etaoinshrdlcumwfgypbvkjxqzETAOINSHRDLCUMWFGYPBVKJXQZ.,'!?;:-\n0\
123456789\"#$%&()*+/<=>@[\\]^_`{|}~\t";

/// Seed salt separating evaluation data from training data.
const EVAL_SALT: u64 = 0x5eed_e7a1;

/// Minibatch of examples.
#[derive(Debug, Clone, PartialEq)]
pub enum Batch {
    /// `inputs` holds `targets.len()` windows of `context_len` token ids.
    Tokens {
        context_len: usize,
        inputs: Vec<u32>,
        targets: Vec<u32>,
    },
    Features { inputs: Matrix, targets: Matrix },
}

impl Batch {
    pub fn len(&self) -> usize {
        match self {
            Batch::Tokens { targets, .. } => targets.len(),
            Batch::Features { inputs, .. } => inputs.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Byte-level vocabulary; anything outside the alphabet maps to the last id.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    table: [u32; 256],
    chars: Vec<char>,
    size: usize,
}

impl Vocab {
    pub fn new(vocab_size: usize) -> Vocab {
        let unknown = (vocab_size - 1) as u32;
        let chars: Vec<char> = CHAR_ORDER.chars().take(vocab_size - 1).collect();
        let mut table = [unknown; 256];
        for (i, &c) in chars.iter().enumerate() {
            table[c as usize] = i as u32;
        }
        Vocab {
            table,
            chars,
            size: vocab_size,
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn unknown(&self) -> u32 {
        (self.size - 1) as u32
    }

    pub fn encode(&self, bytes: &[u8]) -> Vec<u32> {
        bytes.iter().map(|&b| self.table[b as usize]).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| self.chars.get(i as usize).copied().unwrap_or(UNKNOWN_CHAR))
            .collect()
    }
}

const DETS: &[&str] = &["the", "a", "every", "some", "this", "that", "my", "our"];
const ADJS: &[&str] = &[
    "small", "red", "old", "quiet", "bright", "heavy", "green", "quick", "lazy", "warm", "cold", "tall",
];
const NOUNS: &[&str] = &[
    "cat", "dog", "river", "house", "garden", "child", "teacher", "bird", "stone", "tree", "road", "window",
    "king", "ship", "city",
];
const VERBS: &[&str] = &[
    "saw", "found", "liked", "watched", "followed", "carried", "painted", "heard", "crossed", "built",
];
const PREPS: &[&str] = &["near", "under", "behind", "beside", "over", "across"];
const ADVS: &[&str] = &["slowly", "quietly", "often", "never", "again", "today"];

fn noun_phrase(rng: &mut ChaCha8Rng, out: &mut String) {
    out.push_str(DETS.choose(rng).unwrap());
    out.push(' ');
    if rng.random_bool(0.5) {
        out.push_str(ADJS.choose(rng).unwrap());
        out.push(' ');
    }
    out.push_str(NOUNS.choose(rng).unwrap());
}

/// Seeded text from a small English-like grammar, at least `min_len` bytes.
pub fn synthetic_corpus(seed: u64, min_len: usize) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut text = String::with_capacity(min_len + 128);
    let mut in_line = 0;
    while text.len() < min_len {
        let mut s = String::new();
        match rng.random_range(0..4) {
            0 => {
                noun_phrase(&mut rng, &mut s);
                s.push(' ');
                s.push_str(VERBS.choose(&mut rng).unwrap());
                s.push(' ');
                noun_phrase(&mut rng, &mut s);
                s.push('.');
            }
            1 => {
                noun_phrase(&mut rng, &mut s);
                s.push(' ');
                s.push_str(VERBS.choose(&mut rng).unwrap());
                s.push(' ');
                noun_phrase(&mut rng, &mut s);
                s.push(' ');
                s.push_str(PREPS.choose(&mut rng).unwrap());
                s.push(' ');
                noun_phrase(&mut rng, &mut s);
                s.push('.');
            }
            2 => {
                noun_phrase(&mut rng, &mut s);
                s.push(' ');
                s.push_str(ADVS.choose(&mut rng).unwrap());
                s.push(' ');
                s.push_str(VERBS.choose(&mut rng).unwrap());
                s.push(' ');
                noun_phrase(&mut rng, &mut s);
                s.push_str(", and ");
                noun_phrase(&mut rng, &mut s);
                s.push(' ');
                s.push_str(VERBS.choose(&mut rng).unwrap());
                s.push_str(" it.");
            }
            _ => {
                s.push_str("did ");
                noun_phrase(&mut rng, &mut s);
                s.push_str(" see ");
                noun_phrase(&mut rng, &mut s);
                s.push('?');
            }
        }
        let mut chars = s.chars();
        if let Some(first) = chars.next() {
            text.push(first.to_ascii_uppercase());
            text.push_str(chars.as_str());
        }
        in_line += 1;
        if in_line == 5 {
            text.push('\n');
            in_line = 0;
        } else {
            text.push(' ');
        }
    }
    text
}

/// Character-level token stream with a 90/10 train/eval split.
#[derive(Debug, Clone)]
pub struct TextData {
    pub vocab: Vocab,
    pub context_len: usize,
    train: Vec<u32>,
    eval: Vec<u32>,
    rng: ChaCha8Rng,
}

/// Default size of the built-in corpus in bytes.
pub const SYNTHETIC_CORPUS_LEN: usize = 400_000;

impl TextData {
    pub fn from_bytes(bytes: &[u8], vocab_size: usize, context_len: usize, seed: u64) -> Result<TextData, ModelError> {
        if bytes.len() < context_len + 1 {
            return Err(ModelError::Data(format!(
                "text has {} bytes, needs at least context_len + 1 = {}",
                bytes.len(),
                context_len + 1
            )));
        }
        let vocab = Vocab::new(vocab_size);
        let tokens = vocab.encode(bytes);
        let eval_len = (tokens.len() / 10).max(context_len + 1);
        let split = tokens.len().saturating_sub(eval_len);
        let (train, eval) = if split > context_len {
            (tokens[..split].to_vec(), tokens[split..].to_vec())
        } else {
            (tokens.clone(), tokens)
        };
        Ok(TextData {
            vocab,
            context_len,
            train,
            eval,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn from_file(path: &Path, vocab_size: usize, context_len: usize, seed: u64) -> Result<TextData, ModelError> {
        let bytes = std::fs::read(path).map_err(|e| ModelError::Ingestion {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::from_bytes(&bytes, vocab_size, context_len, seed).map_err(|e| ModelError::Ingestion {
            path: path.display().to_string(),
            reason: e.to_string(),
        })
    }

    /// Built-in corpus; the text itself depends only on `seed`.
    pub fn synthetic(vocab_size: usize, context_len: usize, seed: u64) -> TextData {
        let text = synthetic_corpus(seed, SYNTHETIC_CORPUS_LEN);
        Self::from_bytes(text.as_bytes(), vocab_size, context_len, seed).expect("built-in corpus is long enough")
    }

    fn window(tokens: &[u32], ctx: usize, start: usize, inputs: &mut Vec<u32>, targets: &mut Vec<u32>) {
        inputs.extend_from_slice(&tokens[start..start + ctx]);
        targets.push(tokens[start + ctx]);
    }

    pub fn next_batch(&mut self, size: usize) -> Batch {
        let ctx = self.context_len;
        let mut inputs = Vec::with_capacity(size * ctx);
        let mut targets = Vec::with_capacity(size);
        for _ in 0..size {
            let start = self.rng.random_range(0..self.train.len() - ctx);
            Self::window(&self.train, ctx, start, &mut inputs, &mut targets);
        }
        Batch::Tokens {
            context_len: ctx,
            inputs,
            targets,
        }
    }

    /// Evenly strided windows over the held-out split, at most `max_examples`.
    pub fn eval_batches(&self, size: usize, max_examples: usize) -> Vec<Batch> {
        let ctx = self.context_len;
        let available = self.eval.len() - ctx;
        let stride = available.div_ceil(max_examples.max(1)).max(1);
        let starts: Vec<usize> = (0..available).step_by(stride).collect();
        starts
            .chunks(size.max(1))
            .map(|chunk| {
                let mut inputs = Vec::new();
                let mut targets = Vec::new();
                for &s in chunk {
                    Self::window(&self.eval, ctx, s, &mut inputs, &mut targets);
                }
                Batch::Tokens {
                    context_len: ctx,
                    inputs,
                    targets,
                }
            })
            .collect()
    }
}

/// Regression data from a fixed teacher network of the same architecture.
#[derive(Debug, Clone)]
pub struct RegressionData {
    pub teacher: Model,
    pub noise_std: f64,
    rng: ChaCha8Rng,
    seed: u64,
}

impl RegressionData {
    pub fn new(cfg: &ToyModelConfig, seed: u64, noise_std: f64) -> Result<RegressionData, ModelError> {
        let teacher_cfg = ToyModelConfig {
            kind: ModelKind::MlpRegression,
            seed: seed ^ 0x7eac_4e50,
            ..cfg.clone()
        };
        let teacher = build_model(&teacher_cfg, &EngineConfig::default())?;
        Ok(RegressionData {
            teacher,
            noise_std,
            rng: ChaCha8Rng::seed_from_u64(seed),
            seed,
        })
    }

    fn draw(&self, rng: &mut ChaCha8Rng, size: usize) -> Batch {
        let d_in = self.teacher.config.layer_dims[0];
        let inputs = Matrix::random_normal(size, d_in, 1.0, rng);
        let mut targets = predict_features(&self.teacher, &inputs);
        if self.noise_std > 0.0 {
            for v in targets.as_mut_slice() {
                *v += self.noise_std * rng.sample::<f64, _>(StandardNormal);
            }
        }
        Batch::Features { inputs, targets }
    }

    pub fn next_batch(&mut self, size: usize) -> Batch {
        let mut rng = self.rng.clone();
        let b = self.draw(&mut rng, size);
        self.rng = rng;
        b
    }

    pub fn eval_batches(&self, size: usize, max_examples: usize) -> Vec<Batch> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ EVAL_SALT);
        let mut left = max_examples.max(1);
        let mut out = Vec::new();
        while left > 0 {
            let n = left.min(size.max(1));
            out.push(self.draw(&mut rng, n));
            left -= n;
        }
        out
    }
}

/// Training and evaluation data for either model kind.
#[derive(Debug, Clone)]
pub enum DataSource {
    Text(TextData),
    Regression(RegressionData),
}

impl DataSource {
    /// Synthetic data unless a text file is given for a language model.
    pub fn for_model(
        cfg: &ToyModelConfig,
        seed: u64,
        text_path: Option<&Path>,
        noise_std: f64,
    ) -> Result<DataSource, ModelError> {
        match cfg.kind {
            ModelKind::CharLm => Ok(DataSource::Text(match text_path {
                Some(p) => TextData::from_file(p, cfg.vocab_size, cfg.context_len, seed)?,
                None => TextData::synthetic(cfg.vocab_size, cfg.context_len, seed),
            })),
            ModelKind::MlpRegression => Ok(DataSource::Regression(RegressionData::new(cfg, seed, noise_std)?)),
        }
    }

    pub fn next_batch(&mut self, size: usize) -> Batch {
        match self {
            DataSource::Text(t) => t.next_batch(size),
            DataSource::Regression(r) => r.next_batch(size),
        }
    }

    pub fn eval_batches(&self, size: usize, max_examples: usize) -> Vec<Batch> {
        match self {
            DataSource::Text(t) => t.eval_batches(size, max_examples),
            DataSource::Regression(r) => r.eval_batches(size, max_examples),
        }
    }
}
