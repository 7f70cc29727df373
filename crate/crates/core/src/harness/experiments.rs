use serde::{Deserialize, Serialize};

use super::{run_training, HarnessError, MetricsRecord, RunConfig};
use crate::hpa::{apply_plan, make_plan, removable_counts};
use crate::model::{evaluate, Batch, Model, ModelKind, WeightSource};
use crate::rpca::{rpca_decompose, RpcaConfig, RpcaProfile};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedPoint {
    pub cycle: usize,
    pub rank_ratio: f64,
    pub density: f64,
}

#[derive(Debug, Clone)]
pub struct EmbeddingAblation {
    pub with_embedding: Vec<MetricsRecord>,
    pub without_embedding: Vec<MetricsRecord>,
    pub embed_trajectory: Vec<EmbedPoint>,
    /// Relative gap of the mean train loss over the final quarter of cycles.
    pub final_quarter_gap: f64,
}

fn final_quarter_mean(metrics: &[MetricsRecord]) -> f64 {
    let start = metrics.len() - metrics.len().div_ceil(4);
    let tail = &metrics[start..];
    tail.iter().map(|m| m.train_loss).sum::<f64>() / tail.len() as f64
}

/// Two runs differing only in whether the embedding matrix is regulated.
pub fn embedding_ablation(cfg: &RunConfig) -> Result<EmbeddingAblation, HarnessError> {
    if cfg.model.kind != ModelKind::CharLm {
        return Err(HarnessError::Config("embedding ablation needs a char_lm model".into()));
    }
    let variant = |include: bool, dir: &str| {
        let mut c = cfg.clone();
        c.model.include_embedding_block = include;
        c.output_dir = cfg.output_dir.as_ref().map(|d| d.join(dir));
        c
    };
    let with = run_training(&variant(true, "with_embedding"))?;
    let without = run_training(&variant(false, "without_embedding"))?;
    let embed_trajectory = with
        .metrics
        .iter()
        .filter_map(|m| {
            m.per_block.iter().find(|b| b.name == "embed").map(|b| EmbedPoint {
                cycle: m.cycle,
                rank_ratio: b.rank_ratio,
                density: b.density,
            })
        })
        .collect();
    let a = final_quarter_mean(&with.metrics);
    let b = final_quarter_mean(&without.metrics);
    Ok(EmbeddingAblation {
        final_quarter_gap: (a - b).abs() / b.abs().max(f64::MIN_POSITIVE),
        with_embedding: with.metrics,
        without_embedding: without.metrics,
        embed_trajectory,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub budget: u64,
    pub param_count: usize,
    pub eval_loss: f64,
    pub perplexity: Option<f64>,
    pub error: Option<String>,
}

/// Compresses at each budget and evaluates; points sorted by parameter count,
/// failures kept with an error and NaN loss.
pub fn deployment_curve(model: &Model, budgets: &[u64], kappa: f64, eval: &[Batch]) -> Vec<CurvePoint> {
    let mut points = crate::par::map_collect(budgets, |&budget| {
        let res = make_plan(model, budget, kappa)
            .and_then(|p| apply_plan(model, &p))
            .and_then(|cm| Ok((evaluate(model, eval, WeightSource::Compressed(&cm))?, cm.param_count)));
        match res {
            Ok((ev, params)) => CurvePoint {
                budget,
                param_count: params,
                eval_loss: ev.loss,
                perplexity: ev.perplexity,
                error: None,
            },
            Err(e) => CurvePoint {
                budget,
                param_count: 0,
                eval_loss: f64::NAN,
                perplexity: None,
                error: Some(e.to_string()),
            },
        }
    });
    points.sort_by(|a, b| a.param_count.cmp(&b.param_count).then(a.budget.cmp(&b.budget)));
    points
}

/// Replaces every block's surrogate by an RPCA decomposition of its dense
/// weight, returning the new model and the per-block statistics.
pub fn rpca_surrogate(model: &Model, cfg: &RpcaConfig) -> Result<(Model, RpcaProfile), HarnessError> {
    let results = crate::par::map_collect(&model.blocks, |b| rpca_decompose(&b.x, cfg));
    let mut out = model.clone();
    for (b, r) in out.blocks.iter_mut().zip(results) {
        let r = r.map_err(|e| HarnessError::Config(format!("rpca on `{}`: {e}", b.name)))?;
        b.l = r.l;
        b.s = r.s;
        b.y = crate::tensor::Matrix::zeros(b.x.rows(), b.x.cols());
        b.l_factors = Some(r.l_factors);
        b.last_singular_values = Some(r.spectrum);
    }
    let profile = crate::rpca::rpca_profile(model, cfg);
    Ok((out, profile))
}

#[derive(Debug, Clone)]
pub struct DeploymentComparison {
    /// Target parameter counts, one per fraction.
    pub targets: Vec<usize>,
    pub regularized: Vec<CurvePoint>,
    pub vanilla: Vec<CurvePoint>,
    /// Fraction of targets where the regularized model's loss is <= the baseline's.
    pub dominance: f64,
    pub vanilla_profile: RpcaProfile,
}

/// Compares the trained surrogate against RPCA of a plainly trained model at
/// matched parameter targets `fraction * surrogate_param_count`.
pub fn compare_deployment(
    trained: &Model,
    vanilla: &Model,
    fractions: &[f64],
    kappa: f64,
    eval: &[Batch],
    rpca_cfg: &RpcaConfig,
) -> Result<DeploymentComparison, HarnessError> {
    let (baseline, profile) = rpca_surrogate(vanilla, rpca_cfg)?;
    let full = trained.surrogate_param_count();
    let targets: Vec<usize> = fractions.iter().map(|f| (f * full as f64).round() as usize).collect();
    let budgets_for = |m: &Model| -> Result<Vec<u64>, HarnessError> {
        let current = m.surrogate_param_count() as u64;
        let (c_l, c_s) = removable_counts(m)?;
        Ok(targets
            .iter()
            .map(|&t| current.saturating_sub(t as u64).min(c_l + c_s))
            .collect())
    };
    let b_regularized = budgets_for(trained)?;
    let b_vanilla = budgets_for(&baseline)?;
    let by_budget = |m: &Model, budgets: &[u64]| -> Vec<CurvePoint> {
        budgets
            .iter()
            .map(|&b| deployment_curve(m, &[b], kappa, eval).remove(0))
            .collect()
    };
    let regularized = by_budget(trained, &b_regularized);
    let vanilla_curve = by_budget(&baseline, &b_vanilla);
    let wins = regularized
        .iter()
        .zip(&vanilla_curve)
        .filter(|(a, b)| a.error.is_none() && b.error.is_none() && a.eval_loss <= b.eval_loss)
        .count();
    Ok(DeploymentComparison {
        dominance: wins as f64 / targets.len().max(1) as f64,
        targets,
        regularized,
        vanilla: vanilla_curve,
        vanilla_profile: profile,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationAxes {
    pub delta_alpha: Vec<f64>,
    pub delta_beta: Vec<f64>,
    pub rho_constant: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub delta_alpha: f64,
    pub delta_beta: f64,
    pub rho_constant: f64,
    pub eval_x: f64,
    pub eval_surrogate: f64,
    pub param_count: usize,
    pub error: Option<String>,
}

/// Cartesian product of the axes; each cell is an independent run.
pub fn ablation_grid(base: &RunConfig, axes: &AblationAxes) -> Result<Vec<GridRow>, HarnessError> {
    if axes.delta_alpha.is_empty() || axes.delta_beta.is_empty() || axes.rho_constant.is_empty() {
        return Err(HarnessError::Config("ablation axes must be nonempty".into()));
    }
    let mut cells = Vec::new();
    for &da in &axes.delta_alpha {
        for &db in &axes.delta_beta {
            for &rc in &axes.rho_constant {
                cells.push((da, db, rc));
            }
        }
    }
    Ok(crate::par::map_collect(&cells, |&(da, db, rc)| {
        let mut cfg = base.clone();
        cfg.controller.delta_alpha = da;
        cfg.controller.delta_beta = db;
        cfg.engine.rho_constant = rc;
        cfg.output_dir = None;
        let row = |eval_x, eval_surrogate, param_count, error| GridRow {
            delta_alpha: da,
            delta_beta: db,
            rho_constant: rc,
            eval_x,
            eval_surrogate,
            param_count,
            error,
        };
        match run_training(&cfg) {
            Ok(out) => {
                let last = out.metrics.last().expect("at least one cycle");
                row(
                    last.eval_loss_x.unwrap_or(f64::NAN),
                    last.eval_loss_surrogate.unwrap_or(f64::NAN),
                    out.model.surrogate_param_count(),
                    None,
                )
            }
            Err(e) => row(f64::NAN, f64::NAN, 0, Some(e.to_string())),
        }
    }))
}
