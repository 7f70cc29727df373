//! Budgeted truncation of block surrogates with uniform per-block ratios.
//!
//! A removal budget `C` is split by `kappa` between singular values of the
//! `L_i` (each costing `n_i + m_i` factored parameters) and nonzeros of the
//! `S_i` (each costing 1). Within each kind, units are removed as a prefix of
//! one global order keyed by the per-block fraction `j / r_i` the removal
//! reaches, so every block loses (almost) the same fraction.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{evaluate, Batch, Model, ModelError, WeightSource};
use crate::tensor::{LowRank, Matrix};

#[derive(Debug, Error)]
pub enum HpaError {
    #[error("budget {budget} exceeds removable parameters C_L + C_S = {capacity}")]
    Budget { budget: u64, capacity: u64 },
    #[error("kappa {0} outside [0, 1]")]
    Kappa(f64),
    #[error("block `{0}` has no surrogate")]
    MissingSurrogate(String),
    #[error("plan does not match model: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Removal counts for one block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockDrop {
    pub block_name: String,
    /// Retained rank before truncation.
    pub rank: usize,
    /// Nonzeros of `S` before truncation.
    pub nnz: usize,
    pub drop_singular: usize,
    pub drop_sparse: usize,
    /// `rows + cols`, the cost of one singular value.
    pub unit_cost: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HpaPlan {
    pub budget_c: u64,
    pub kappa: f64,
    pub c_l: u64,
    pub c_s: u64,
    pub phi_l: f64,
    pub phi_s: f64,
    /// Integer parameter targets charged to each kind.
    pub target_l: u64,
    pub target_s: u64,
    /// Parameters actually removed by the per-block counts.
    pub removed: u64,
    pub per_block: Vec<BlockDrop>,
}

impl HpaPlan {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }
}

/// Truncated surrogate of one block; `sparse` is dense storage with exact zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedBlock {
    pub name: String,
    pub factors: LowRank,
    pub sparse: Matrix,
}

impl CompressedBlock {
    pub fn param_count(&self) -> usize {
        self.factors.param_count() + self.sparse.count_nonzero()
    }

    pub fn to_dense(&self) -> Matrix {
        self.factors.to_dense().add(&self.sparse)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedModel {
    pub blocks: Vec<CompressedBlock>,
    /// `sum_i r'_i (n_i + m_i) + nnz(S'_i)`
    pub param_count: usize,
}

impl CompressedModel {
    pub fn new(blocks: Vec<CompressedBlock>) -> CompressedModel {
        let param_count = blocks.iter().map(CompressedBlock::param_count).sum();
        CompressedModel { blocks, param_count }
    }

    pub fn dense_weight(&self, name: &str) -> Option<Matrix> {
        self.blocks.iter().find(|b| b.name == name).map(CompressedBlock::to_dense)
    }

    /// Untruncated copy of every block surrogate.
    pub fn from_surrogate(model: &Model) -> Result<CompressedModel, HpaError> {
        let blocks = model
            .blocks
            .iter()
            .map(|b| {
                let factors = b
                    .l_factors
                    .clone()
                    .ok_or_else(|| HpaError::MissingSurrogate(b.name.clone()))?;
                Ok(CompressedBlock {
                    name: b.name.clone(),
                    factors,
                    sparse: b.s.clone(),
                })
            })
            .collect::<Result<Vec<_>, HpaError>>()?;
        Ok(CompressedModel::new(blocks))
    }
}

struct BlockView<'a> {
    name: &'a str,
    factors: &'a LowRank,
    sparse: &'a Matrix,
}

fn block_views(model: &Model) -> Result<Vec<BlockView<'_>>, HpaError> {
    model
        .blocks
        .iter()
        .map(|b| {
            Ok(BlockView {
                name: &b.name,
                factors: b
                    .l_factors
                    .as_ref()
                    .ok_or_else(|| HpaError::MissingSurrogate(b.name.clone()))?,
                sparse: &b.s,
            })
        })
        .collect()
}

/// `(C_L, C_S)`: factored parameters held by all `L_i`, nonzeros of all `S_i`.
pub fn removable_counts(model: &Model) -> Result<(u64, u64), HpaError> {
    let views = block_views(model)?;
    let c_l = views.iter().map(|v| v.factors.param_count() as u64).sum();
    let c_s = views.iter().map(|v| v.sparse.count_nonzero() as u64).sum();
    Ok((c_l, c_s))
}

/// Flat indices of the nonzeros of `s`, smallest magnitude first.
fn sparse_order(s: &Matrix) -> Vec<usize> {
    let v = s.as_slice();
    let mut idx: Vec<usize> = (0..v.len()).filter(|&i| v[i] != 0.0).collect();
    idx.sort_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()).then(a.cmp(&b)));
    idx
}

/// One removable unit: the `step`-th smallest unit of a block of `size` units.
struct Unit {
    block: usize,
    step: usize,
    size: usize,
    magnitude: f64,
    cost: u64,
}

fn unit_order(a: &Unit, b: &Unit) -> Ordering {
    // step/size compared exactly as integers
    let lhs = a.step as u128 * b.size as u128;
    let rhs = b.step as u128 * a.size as u128;
    lhs.cmp(&rhs)
        .then(a.magnitude.total_cmp(&b.magnitude))
        .then(a.block.cmp(&b.block))
        .then(a.step.cmp(&b.step))
}

/// Per-block counts of the shortest prefix costing at least `target`.
fn select(mut units: Vec<Unit>, n_blocks: usize, target: u64) -> Vec<usize> {
    units.sort_by(unit_order);
    let mut counts = vec![0; n_blocks];
    let mut removed = 0;
    for u in units {
        if removed >= target {
            break;
        }
        counts[u.block] += 1;
        removed += u.cost;
    }
    counts
}

/// Splits `budget` by `kappa`, reassigning any surplus beyond one kind's
/// capacity to the other, and converts the targets into per-block drops.
pub fn make_plan(model: &Model, budget: u64, kappa: f64) -> Result<HpaPlan, HpaError> {
    if !(0.0..=1.0).contains(&kappa) {
        return Err(HpaError::Kappa(kappa));
    }
    let views = block_views(model)?;
    let (c_l, c_s) = removable_counts(model)?;
    if budget > c_l + c_s {
        return Err(HpaError::Budget {
            budget,
            capacity: c_l + c_s,
        });
    }

    // Real-valued ratios.
    let (mut raw_l, mut raw_s) = (kappa * budget as f64, (1.0 - kappa) * budget as f64);
    if raw_l > c_l as f64 {
        raw_s += raw_l - c_l as f64;
        raw_l = c_l as f64;
    } else if raw_s > c_s as f64 {
        raw_l += raw_s - c_s as f64;
        raw_s = c_s as f64;
    }
    let ratio = |raw: f64, cap: u64| if cap == 0 { 0.0 } else { (raw / cap as f64).min(1.0) };
    let phi_l = ratio(raw_l, c_l);
    let phi_s = ratio(raw_s, c_s);

    // Integer targets with the same surplus rule.
    let rounded = ((kappa * budget as f64).round() as u64).min(budget);
    let target_l = c_l.min(rounded.max(budget.saturating_sub(c_s)));
    let target_s = budget - target_l;

    let mut l_units = Vec::new();
    let mut s_units = Vec::new();
    let mut s_orders = Vec::new();
    for (i, v) in views.iter().enumerate() {
        let r = v.factors.rank();
        let cost = (v.factors.rows() + v.factors.cols()) as u64;
        for step in 1..=r {
            l_units.push(Unit {
                block: i,
                step,
                size: r,
                magnitude: v.factors.sigma[r - step],
                cost,
            });
        }
        let order = sparse_order(v.sparse);
        let nnz = order.len();
        for (k, &flat) in order.iter().enumerate() {
            s_units.push(Unit {
                block: i,
                step: k + 1,
                size: nnz,
                magnitude: v.sparse.as_slice()[flat].abs(),
                cost: 1,
            });
        }
        s_orders.push(nnz);
    }
    let d = select(l_units, views.len(), target_l);
    let e = select(s_units, views.len(), target_s);

    let per_block: Vec<BlockDrop> = views
        .iter()
        .enumerate()
        .map(|(i, v)| BlockDrop {
            block_name: v.name.to_string(),
            rank: v.factors.rank(),
            nnz: s_orders[i],
            drop_singular: d[i],
            drop_sparse: e[i],
            unit_cost: v.factors.rows() + v.factors.cols(),
        })
        .collect();
    let removed = per_block
        .iter()
        .map(|b| (b.drop_singular * b.unit_cost + b.drop_sparse) as u64)
        .sum();
    Ok(HpaPlan {
        budget_c: budget,
        kappa,
        c_l,
        c_s,
        phi_l,
        phi_s,
        target_l,
        target_s,
        removed,
        per_block,
    })
}

/// Drops the smallest singular values and sparse entries named by `plan`.
pub fn apply_plan(model: &Model, plan: &HpaPlan) -> Result<CompressedModel, HpaError> {
    let views = block_views(model)?;
    if views.len() != plan.per_block.len() {
        return Err(HpaError::Mismatch(format!(
            "plan has {} blocks, model has {}",
            plan.per_block.len(),
            views.len()
        )));
    }
    for (v, p) in views.iter().zip(&plan.per_block) {
        let nnz = v.sparse.count_nonzero();
        if v.name != p.block_name
            || v.factors.rank() != p.rank
            || nnz != p.nnz
            || p.drop_singular > p.rank
            || p.drop_sparse > p.nnz
        {
            return Err(HpaError::Mismatch(format!(
                "block `{}` (rank {}, nnz {}) vs plan entry `{}` (rank {}, nnz {})",
                v.name,
                v.factors.rank(),
                nnz,
                p.block_name,
                p.rank,
                p.nnz
            )));
        }
    }
    let jobs: Vec<(&BlockView, &BlockDrop)> = views.iter().zip(&plan.per_block).collect();
    let blocks = crate::par::map_collect(&jobs, |(v, p)| {
        let factors = v.factors.truncate(p.rank - p.drop_singular);
        let mut sparse = v.sparse.clone();
        for &flat in sparse_order(v.sparse).iter().take(p.drop_sparse) {
            sparse.as_mut_slice()[flat] = 0.0;
        }
        CompressedBlock {
            name: v.name.to_string(),
            factors,
            sparse,
        }
    });
    Ok(CompressedModel::new(blocks))
}

/// One cell of a kappa sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub budget: u64,
    pub kappa: f64,
    pub eval_loss: f64,
    pub perplexity: Option<f64>,
    pub param_count: usize,
    /// Lowest loss among the kappas tried for this budget.
    pub best: bool,
    pub error: Option<String>,
}

/// Evaluates the compressed model on the `budgets x kappas` grid. Rows are
/// sorted by `(budget, kappa)`; failing cells carry an error and NaN loss.
pub fn kappa_sweep(model: &Model, budgets: &[u64], kappas: &[f64], eval: &[Batch]) -> Vec<SweepRow> {
    let mut cells: Vec<(u64, f64)> = budgets
        .iter()
        .flat_map(|&b| kappas.iter().map(move |&k| (b, k)))
        .collect();
    cells.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut rows = crate::par::map_collect(&cells, |&(budget, kappa)| {
        let cell = make_plan(model, budget, kappa)
            .and_then(|plan| apply_plan(model, &plan))
            .and_then(|cm| Ok((evaluate(model, eval, WeightSource::Compressed(&cm))?, cm.param_count)));
        match cell {
            Ok((ev, params)) => SweepRow {
                budget,
                kappa,
                eval_loss: ev.loss,
                perplexity: ev.perplexity,
                param_count: params,
                best: false,
                error: None,
            },
            Err(e) => SweepRow {
                budget,
                kappa,
                eval_loss: f64::NAN,
                perplexity: None,
                param_count: 0,
                best: false,
                error: Some(e.to_string()),
            },
        }
    });
    let mut start = 0;
    while start < rows.len() {
        let budget = rows[start].budget;
        let end = start + rows[start..].iter().take_while(|r| r.budget == budget).count();
        let best = (start..end)
            .filter(|&i| rows[i].error.is_none())
            .min_by(|&a, &b| rows[a].eval_loss.total_cmp(&rows[b].eval_loss));
        if let Some(i) = best {
            rows[i].best = true;
        }
        start = end;
    }
    rows
}
