//! Training loop and experiment drivers.
//!
//! A cycle is `k_inner` Adam steps on the task loss plus the structural
//! penalty, then `j_inner` adaptation sweeps on every block, then one
//! controller update per block. Metrics are recorded once per cycle.

mod config;
mod experiments;
mod report;

pub use config::{ConfigError, FlatConfig};
pub use experiments::{
    ablation_grid, compare_deployment, deployment_curve, embedding_ablation, rpca_surrogate, AblationAxes,
    CurvePoint, DeploymentComparison, EmbedPoint, EmbeddingAblation, GridRow,
};
pub use report::{summary_rows, write_csv, write_ndjson, SummaryRow};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{save_checkpoint, Checkpoint, CheckpointError};
use crate::engine::{adapt_blocks, ControllerConfig, EngineConfig, EngineError};
use crate::model::{
    adam_step, build_model, evaluate, forward_backward, AdamConfig, AdamState, Batch, DataSource, Model,
    ModelError, SlotLoc, ToyModelConfig, WeightSource,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid run config: {0}")]
    Config(String),
    #[error("training diverged at cycle {cycle}: {reason}")]
    Divergence {
        cycle: usize,
        reason: String,
        /// Most recent checkpoint written before the failure.
        last_checkpoint: Option<PathBuf>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Hpa(#[from] crate::hpa::HpaError),
    #[error("i/o error on `{path}`: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ToyModelConfig,
    pub engine: EngineConfig,
    pub controller: ControllerConfig,
    pub adam: AdamConfig,
    pub total_cycles: usize,
    pub eval_every: usize,
    pub log_every: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    /// Cap on held-out examples per evaluation.
    pub eval_examples: usize,
    pub data_seed: u64,
    /// Text corpus for `char_lm`; the built-in corpus when absent.
    pub text_path: Option<PathBuf>,
    /// Label noise for the regression teacher.
    pub noise_std: f64,
    /// Structural penalty and adaptation sweeps on; off gives plain Adam.
    pub regularize: bool,
    /// Controller updates on; off freezes `alpha`, `beta`.
    pub controller_enabled: bool,
    /// Mixing coefficient used by compression commands.
    pub kappa: f64,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ToyModelConfig::default(),
            engine: EngineConfig {
                rho_constant: 10.0,
                ..EngineConfig::default()
            },
            controller: ControllerConfig::default(),
            adam: AdamConfig::default(),
            total_cycles: 300,
            eval_every: 50,
            log_every: 10,
            batch_size: 32,
            eval_batch_size: 256,
            eval_examples: 4096,
            data_seed: 1,
            text_path: None,
            noise_std: 0.0,
            regularize: true,
            controller_enabled: true,
            kappa: 0.5,
            output_dir: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        self.model.validate()?;
        self.engine.validate()?;
        self.controller.validate()?;
        self.adam.validate()?;
        if self.total_cycles == 0 || self.eval_every == 0 || self.log_every == 0 {
            return Err(HarnessError::Config("total_cycles, eval_every and log_every must be >= 1".into()));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 || self.eval_examples == 0 {
            return Err(HarnessError::Config("batch sizes and eval_examples must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.kappa) {
            return Err(HarnessError::Config(format!("kappa {} outside [0, 1]", self.kappa)));
        }
        if !(self.noise_std >= 0.0) {
            return Err(HarnessError::Config("noise_std must be >= 0".into()));
        }
        Ok(())
    }

    pub fn data_source(&self) -> Result<DataSource, ModelError> {
        DataSource::for_model(&self.model, self.data_seed, self.text_path.as_deref(), self.noise_std)
    }

    /// Held-out batches; deterministic in the config.
    pub fn eval_batches(&self) -> Result<Vec<Batch>, ModelError> {
        Ok(self.data_source()?.eval_batches(self.eval_batch_size, self.eval_examples))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockMetrics {
    pub name: String,
    pub delta: f64,
    pub rank_ratio: f64,
    pub density: f64,
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub cycle: usize,
    /// Mean task loss over the cycle's gradient steps.
    pub train_loss: f64,
    /// Mean of the per-block `delta`.
    pub avg_recon_error: f64,
    pub per_block: Vec<BlockMetrics>,
    pub eval_loss_x: Option<f64>,
    pub eval_loss_surrogate: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub model: Model,
    pub adam: AdamState,
    pub metrics: Vec<MetricsRecord>,
    pub eval_batches: Vec<Batch>,
}

fn block_metrics(model: &Model, gamma: f64) -> Result<Vec<BlockMetrics>, HarnessError> {
    model
        .blocks
        .iter()
        .map(|b| {
            Ok(BlockMetrics {
                name: b.name.clone(),
                delta: b.reconstruction_error(),
                rank_ratio: b.rank_ratio(gamma)?,
                density: b.density(),
                alpha: b.alpha,
                beta: b.beta,
            })
        })
        .collect()
}

/// One gradient step on task loss plus structural penalty; returns the task loss.
fn guided_step(model: &mut Model, adam: &mut AdamState, batch: &Batch, regularize: bool) -> Result<f64, ModelError> {
    let (loss, mut grads) = forward_backward(model, batch)?;
    if !loss.is_finite() {
        return Err(ModelError::Divergence(format!("task loss is {loss}")));
    }
    if regularize {
        for (i, slot) in model.slots().iter().enumerate() {
            if let SlotLoc::Block(b) = slot.loc {
                let (_, g) = model.blocks[b].structural_penalty();
                grads.per_slot[i].add_assign(&g);
            }
        }
    }
    adam_step(adam, model, &grads)?;
    Ok(loss)
}

/// Runs the full training loop. With `output_dir` set, appends one JSON line
/// per cycle to `metrics.ndjson`, writes `summary.csv` at the end and a
/// checkpoint every `eval_every` cycles.
pub fn run_training(cfg: &RunConfig) -> Result<RunOutput, HarnessError> {
    cfg.validate()?;
    let mut model = build_model(&cfg.model, &cfg.engine)?;
    let mut adam = AdamState::new(cfg.adam, &model)?;
    let mut data = cfg.data_source()?;
    let eval_batches = data.eval_batches(cfg.eval_batch_size, cfg.eval_examples);
    let controller = cfg.controller_enabled.then_some(&cfg.controller);

    let mut sink = match &cfg.output_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
            let path = dir.join("metrics.ndjson");
            Some(report::NdjsonSink::create(&path)?)
        }
        None => None,
    };
    let mut last_checkpoint: Option<PathBuf> = None;
    let mut metrics = Vec::with_capacity(cfg.total_cycles);

    for cycle in 1..=cfg.total_cycles {
        let diverged = |reason: String, last: &Option<PathBuf>| HarnessError::Divergence {
            cycle,
            reason,
            last_checkpoint: last.clone(),
        };
        let mut loss_sum = 0.0;
        for _ in 0..cfg.engine.k_inner {
            let batch = data.next_batch(cfg.batch_size);
            match guided_step(&mut model, &mut adam, &batch, cfg.regularize) {
                Ok(l) => loss_sum += l,
                Err(ModelError::Divergence(r)) => return Err(diverged(r, &last_checkpoint)),
                Err(e) => return Err(e.into()),
            }
        }
        if cfg.regularize {
            if let Err(e) = adapt_blocks(&mut model.blocks, cfg.engine.j_inner, controller) {
                return Err(diverged(e.to_string(), &last_checkpoint));
            }
        }

        let per_block = if cfg.regularize {
            block_metrics(&model, cfg.controller.gamma)?
        } else {
            Vec::new()
        };
        let avg_recon_error = if per_block.is_empty() {
            0.0
        } else {
            per_block.iter().map(|b| b.delta).sum::<f64>() / per_block.len() as f64
        };
        let eval_now = cycle % cfg.eval_every == 0 || cycle == cfg.total_cycles;
        let (eval_loss_x, eval_loss_surrogate) = if eval_now {
            let x = evaluate(&model, &eval_batches, WeightSource::DenseX)?.loss;
            let s = if cfg.regularize {
                Some(evaluate(&model, &eval_batches, WeightSource::Surrogate)?.loss)
            } else {
                None
            };
            (Some(x), s)
        } else {
            (None, None)
        };
        let record = MetricsRecord {
            cycle,
            train_loss: loss_sum / cfg.engine.k_inner as f64,
            avg_recon_error,
            per_block,
            eval_loss_x,
            eval_loss_surrogate,
        };
        if cycle % cfg.log_every == 0 || cycle == cfg.total_cycles {
            log::info!(
                "cycle {cycle}: train_loss {:.4} avg_recon {:.3e}{}",
                record.train_loss,
                record.avg_recon_error,
                record
                    .eval_loss_x
                    .map(|x| format!(" eval_x {x:.4}"))
                    .unwrap_or_default()
            );
        }
        if let Some(s) = sink.as_mut() {
            s.append(&record)?;
        }
        metrics.push(record);

        if eval_now {
            if let Some(dir) = &cfg.output_dir {
                let path = dir.join(format!("checkpoint-{cycle:06}.slr"));
                let ckpt = Checkpoint {
                    model: model.clone(),
                    adam: Some(adam.clone()),
                    compressed: None,
                };
                save_checkpoint(&ckpt, &path)?;
                last_checkpoint = Some(path);
            }
        }
    }

    if let Some(dir) = &cfg.output_dir {
        write_csv(&dir.join("summary.csv"), &summary_rows(&metrics))?;
    }
    Ok(RunOutput {
        model,
        adam,
        metrics,
        eval_batches,
    })
}
