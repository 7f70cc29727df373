use std::borrow::Cow;

use super::{Batch, Model, ModelError, ModelKind, SlotLoc};
use crate::hpa::CompressedModel;
use crate::tensor::Matrix;

/// Examples per map-reduce chunk. Fixed so results do not depend on threads.
const CHUNK: usize = 16;

/// Gradients in slot order (see [`Model::slots`]).
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub per_slot: Vec<Matrix>,
}

impl Grads {
    pub fn zeros_like(model: &Model) -> Grads {
        Grads {
            per_slot: model
                .slots()
                .iter()
                .map(|s| Matrix::zeros(s.shape.0, s.shape.1))
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.per_slot.iter().all(Matrix::is_finite)
    }

    fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.per_slot.iter_mut().zip(&other.per_slot) {
            a.add_assign(b);
        }
    }
}

/// Which weights the forward pass reads for regulated blocks.
#[derive(Debug, Clone, Copy)]
pub enum WeightSource<'a> {
    DenseX,
    Surrogate,
    Compressed(&'a CompressedModel),
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalResult {
    pub loss: f64,
    /// `exp(loss)` for language models.
    pub perplexity: Option<f64>,
}

struct View<'a> {
    kind: ModelKind,
    embed: Option<&'a Matrix>,
    /// `(weight out x in, bias 1 x out)` per linear layer.
    layers: Vec<(&'a Matrix, &'a Matrix)>,
}

impl<'a> View<'a> {
    fn new(kind: ModelKind, slots: &'a [Cow<'a, Matrix>]) -> View<'a> {
        let (embed, rest) = match kind {
            ModelKind::CharLm => (Some(slots[0].as_ref()), &slots[1..]),
            ModelKind::MlpRegression => (None, slots),
        };
        let layers = rest
            .chunks(2)
            .map(|p| (p[0].as_ref(), p[1].as_ref()))
            .collect();
        View { kind, embed, layers }
    }
}

fn resolve<'a>(model: &'a Model, source: WeightSource<'a>) -> Result<Vec<Cow<'a, Matrix>>, ModelError> {
    model
        .slots()
        .iter()
        .enumerate()
        .map(|(i, slot)| match (slot.loc, source) {
            (SlotLoc::Plain(_), _) | (SlotLoc::Block(_), WeightSource::DenseX) => {
                Ok(Cow::Borrowed(model.slot_value(i)))
            }
            (SlotLoc::Block(b), WeightSource::Surrogate) => {
                let block = &model.blocks[b];
                if !block.has_surrogate() {
                    return Err(ModelError::MissingSurrogate(block.name.clone()));
                }
                Ok(Cow::Owned(block.surrogate()))
            }
            (SlotLoc::Block(_), WeightSource::Compressed(cm)) => {
                let dense = cm.dense_weight(&slot.name).ok_or_else(|| {
                    ModelError::State(format!("compressed model lacks block `{}`", slot.name))
                })?;
                if dense.shape() != slot.shape {
                    return Err(ModelError::State(format!(
                        "compressed block `{}` has shape {:?}, expected {:?}",
                        slot.name,
                        dense.shape(),
                        slot.shape
                    )));
                }
                Ok(Cow::Owned(dense))
            }
        })
        .collect()
}

fn check_batch(model: &Model, batch: &Batch) -> Result<(), ModelError> {
    let cfg = &model.config;
    match (cfg.kind, batch) {
        (
            ModelKind::CharLm,
            Batch::Tokens {
                context_len,
                inputs,
                targets,
            },
        ) => {
            if *context_len != cfg.context_len {
                return Err(ModelError::Data(format!(
                    "batch context {context_len} != model context {}",
                    cfg.context_len
                )));
            }
            if targets.is_empty() || inputs.len() != targets.len() * context_len {
                return Err(ModelError::Data("token batch is empty or ragged".into()));
            }
            if inputs.iter().chain(targets).any(|&t| t as usize >= cfg.vocab_size) {
                return Err(ModelError::Data("token id outside vocabulary".into()));
            }
            Ok(())
        }
        (ModelKind::MlpRegression, Batch::Features { inputs, targets }) => {
            let d = &cfg.layer_dims;
            if inputs.rows() == 0
                || inputs.rows() != targets.rows()
                || inputs.cols() != d[0]
                || targets.cols() != *d.last().unwrap()
            {
                return Err(ModelError::Data(format!(
                    "feature batch {:?} -> {:?} does not fit dims {:?}",
                    inputs.shape(),
                    targets.shape(),
                    d
                )));
            }
            Ok(())
        }
        _ => Err(ModelError::Data("batch kind does not match model kind".into())),
    }
}

/// Activations of every layer; the last entry is the linear output.
fn forward_layers(view: &View, a0: Matrix) -> Vec<Matrix> {
    let n_layers = view.layers.len();
    let rows = a0.rows();
    let mut acts = vec![a0];
    for (k, (w, b)) in view.layers.iter().enumerate() {
        let mut z = acts[k].matmul_nt(w);
        let bias = b.as_slice();
        let last = k + 1 == n_layers;
        for r in 0..rows {
            for (v, &bv) in z.row_mut(r).iter_mut().zip(bias) {
                *v += bv;
                if !last {
                    *v = v.tanh();
                }
            }
        }
        acts.push(z);
    }
    acts
}

/// Regression outputs for a feature matrix, using the dense weights.
pub(crate) fn predict_features(model: &Model, inputs: &Matrix) -> Matrix {
    let slots = resolve(model, WeightSource::DenseX).expect("dense weights always resolve");
    let view = View::new(model.config.kind, &slots);
    forward_layers(&view, inputs.clone()).pop().expect("at least one layer")
}

/// Per-chunk loss sum, normalizer and optional gradient (already divided by
/// the batch-wide normalizer).
fn run_chunk(view: &View, batch: &Batch, lo: usize, hi: usize, norm: f64, want_grad: bool) -> (f64, Option<Grads>) {
    let rows = hi - lo;
    // Input activations.
    let a0 = match batch {
        Batch::Tokens {
            context_len,
            inputs,
            ..
        } => {
            let e = view.embed.expect("char model has an embedding");
            let d = e.cols();
            let mut a = Matrix::zeros(rows, context_len * d);
            for r in 0..rows {
                let row = a.row_mut(r);
                for j in 0..*context_len {
                    let tok = inputs[(lo + r) * context_len + j] as usize;
                    row[j * d..(j + 1) * d].copy_from_slice(e.row(tok));
                }
            }
            a
        }
        Batch::Features { inputs, .. } => Matrix::from_fn(rows, inputs.cols(), |r, c| inputs.get(lo + r, c)),
    };

    let n_layers = view.layers.len();
    let acts = forward_layers(view, a0);
    let out = &acts[n_layers];

    let mut loss = 0.0;
    let mut d_out = Matrix::zeros(rows, out.cols());
    match batch {
        Batch::Tokens { targets, .. } => {
            for r in 0..rows {
                let logits = out.row(r);
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = logits.iter().map(|&z| (z - max).exp()).sum();
                let log_z = max + sum.ln();
                let t = targets[lo + r] as usize;
                loss += log_z - logits[t];
                if want_grad {
                    let g = d_out.row_mut(r);
                    for (c, gv) in g.iter_mut().enumerate() {
                        *gv = (logits[c] - log_z).exp() / norm;
                    }
                    g[t] -= 1.0 / norm;
                }
            }
        }
        Batch::Features { targets, .. } => {
            for r in 0..rows {
                let g = d_out.row_mut(r);
                for (c, &y) in out.row(r).iter().enumerate() {
                    let diff = y - targets.get(lo + r, c);
                    loss += diff * diff;
                    g[c] = 2.0 * diff / norm;
                }
            }
        }
    }
    if !want_grad {
        return (loss, None);
    }

    let offset = usize::from(view.kind == ModelKind::CharLm);
    let mut grads = vec![Matrix::zeros(0, 0); offset + 2 * n_layers];
    let mut delta = d_out;
    for k in (0..n_layers).rev() {
        let (w, b) = view.layers[k];
        let mut db = Matrix::zeros(1, b.cols());
        for r in 0..rows {
            for (acc, &d) in db.as_mut_slice().iter_mut().zip(delta.row(r)) {
                *acc += d;
            }
        }
        grads[offset + 2 * k] = delta.matmul_tn(&acts[k]);
        grads[offset + 2 * k + 1] = db;
        let mut d_prev = delta.matmul(w);
        if k > 0 {
            for (dv, &a) in d_prev.as_mut_slice().iter_mut().zip(acts[k].as_slice()) {
                *dv *= 1.0 - a * a;
            }
        }
        delta = d_prev;
    }
    if let (Batch::Tokens { context_len, inputs, .. }, Some(e)) = (batch, view.embed) {
        let d = e.cols();
        let mut de = Matrix::zeros(e.rows(), d);
        for r in 0..rows {
            let src = delta.row(r);
            for j in 0..*context_len {
                let tok = inputs[(lo + r) * context_len + j] as usize;
                for (acc, &g) in de.row_mut(tok).iter_mut().zip(&src[j * d..(j + 1) * d]) {
                    *acc += g;
                }
            }
        }
        grads[0] = de;
    }
    (loss, Some(Grads { per_slot: grads }))
}

fn normalizer(model: &Model, batch: &Batch) -> f64 {
    match batch {
        Batch::Tokens { targets, .. } => targets.len() as f64,
        Batch::Features { targets, .. } => (targets.rows() * model.config.layer_dims.last().unwrap()) as f64,
    }
}

fn chunk_bounds(len: usize) -> Vec<(usize, usize)> {
    (0..len).step_by(CHUNK).map(|lo| (lo, (lo + CHUNK).min(len))).collect()
}

/// Task loss and its exact gradient with respect to every slot, using the
/// dense `X` weights.
pub fn forward_backward(model: &Model, batch: &Batch) -> Result<(f64, Grads), ModelError> {
    check_batch(model, batch)?;
    let slots = resolve(model, WeightSource::DenseX)?;
    let view = View::new(model.config.kind, &slots);
    let norm = normalizer(model, batch);
    let parts = crate::par::map_collect(&chunk_bounds(batch.len()), |&(lo, hi)| {
        run_chunk(&view, batch, lo, hi, norm, true)
    });
    let mut loss = 0.0;
    let mut total = Grads::zeros_like(model);
    for (l, g) in parts {
        loss += l;
        total.add_assign(&g.expect("gradient requested"));
    }
    Ok((loss / norm, total))
}

/// Mean task loss over all evaluation batches with the chosen weights.
pub fn evaluate(model: &Model, batches: &[Batch], source: WeightSource) -> Result<EvalResult, ModelError> {
    if batches.is_empty() {
        return Err(ModelError::Data("no evaluation batches".into()));
    }
    for b in batches {
        check_batch(model, b)?;
    }
    let slots = resolve(model, source)?;
    let view = View::new(model.config.kind, &slots);
    let mut jobs = Vec::new();
    for (bi, b) in batches.iter().enumerate() {
        jobs.extend(chunk_bounds(b.len()).into_iter().map(|(lo, hi)| (bi, lo, hi)));
    }
    let sums = crate::par::map_collect(&jobs, |&(bi, lo, hi)| run_chunk(&view, &batches[bi], lo, hi, 1.0, false).0);
    let loss_sum: f64 = sums.iter().sum();
    let count: f64 = batches.iter().map(|b| normalizer(model, b)).sum();
    let loss = loss_sum / count;
    let perplexity = (model.config.kind == ModelKind::CharLm).then(|| loss.exp());
    Ok(EvalResult { loss, perplexity })
}
