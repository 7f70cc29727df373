//! Single-file checkpoints: a JSON manifest followed by a binary payload.
//!
//! Layout:
//!
//! ```text
//! SLRCKPT1\n
//! <manifest byte length, decimal ASCII>\n
//! <manifest JSON>
//! <payload: little-endian binary64, row-major, in manifest order>
//! ```
//!
//! Every manifest entry describes one array of `shape[0] * shape[1]` values.
//! Low-rank components are stored as `factored_lr` triples (`left`, `right`,
//! `sigma`) and sparse components as `sparse_coo` pairs (`indices` holding flat
//! row-major positions, `values`).

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::BlockState;
use crate::hpa::{CompressedBlock, CompressedModel};
use crate::model::{AdamConfig, AdamState, Model, ModelError, NamedTensor, ToyModelConfig};
use crate::tensor::{LowRank, Matrix};

pub const MAGIC: &[u8] = b"SLRCKPT1\n";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on `{path}`: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("payload truncated at tensor `{tensor}`: needs {needed} bytes, {available} available")]
    Truncated {
        tensor: String,
        needed: u64,
        available: u64,
    },
    #[error("tensor `{tensor}`: {detail}")]
    Shape { tensor: String, detail: String },
    #[error("payload has {0} unexpected trailing bytes")]
    Trailing(u64),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Storage {
    Dense,
    FactoredLr,
    SparseCoo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub storage: Storage,
    /// `left`, `right`, `sigma` for factored entries; `indices`, `values` for sparse.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub component: Option<String>,
    pub shape: [usize; 2],
    /// Shape of the matrix a factored or sparse group represents.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub dense_shape: Option<[usize; 2]>,
    pub byte_len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockScalars {
    pub name: String,
    pub alpha: f64,
    pub beta: f64,
    pub rho: f64,
    pub has_surrogate: bool,
    pub has_spectrum: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerInfo {
    pub step: u64,
    pub config: AdamConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub model_config: ToyModelConfig,
    pub blocks: Vec<BlockScalars>,
    pub plain: Vec<String>,
    pub optimizer: Option<OptimizerInfo>,
    /// Block names of the compressed variant, if stored.
    pub compressed: Option<Vec<String>>,
    pub tensors: Vec<TensorEntry>,
}

/// Everything a checkpoint can hold.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub adam: Option<AdamState>,
    pub compressed: Option<CompressedModel>,
}

impl Checkpoint {
    pub fn new(model: Model) -> Checkpoint {
        Checkpoint {
            model,
            adam: None,
            compressed: None,
        }
    }
}

struct Writer {
    entries: Vec<TensorEntry>,
    payload: Vec<u8>,
}

impl Writer {
    fn push(&mut self, name: String, storage: Storage, component: Option<&str>, dense: Option<[usize; 2]>, m: &Matrix) {
        let bytes = m.len() * 8;
        self.payload.reserve(bytes);
        for v in m.as_slice() {
            self.payload.extend_from_slice(&v.to_le_bytes());
        }
        self.entries.push(TensorEntry {
            name,
            storage,
            component: component.map(str::to_string),
            shape: [m.rows(), m.cols()],
            dense_shape: dense,
            byte_len: bytes as u64,
        });
    }

    fn dense(&mut self, name: String, m: &Matrix) {
        self.push(name, Storage::Dense, None, None, m);
    }

    fn factored(&mut self, name: String, f: &LowRank) {
        let dense = Some([f.rows(), f.cols()]);
        let sigma = Matrix::from_vec(1, f.sigma.len(), f.sigma.clone()).expect("finite sigma");
        self.push(name.clone(), Storage::FactoredLr, Some("left"), dense, &f.left);
        self.push(name.clone(), Storage::FactoredLr, Some("right"), dense, &f.right);
        self.push(name, Storage::FactoredLr, Some("sigma"), dense, &sigma);
    }

    fn sparse(&mut self, name: String, m: &Matrix) {
        let dense = Some([m.rows(), m.cols()]);
        let (idx, vals): (Vec<f64>, Vec<f64>) = m
            .as_slice()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(i, &v)| (i as f64, v))
            .unzip();
        let n = idx.len();
        let idx = Matrix::from_vec(n, 1, idx).expect("finite indices");
        let vals = Matrix::from_vec(n, 1, vals).expect("finite values");
        self.push(name.clone(), Storage::SparseCoo, Some("indices"), dense, &idx);
        self.push(name, Storage::SparseCoo, Some("values"), dense, &vals);
    }
}

/// Serializes a checkpoint into bytes.
pub fn to_bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let model = &ckpt.model;
    let mut w = Writer {
        entries: Vec::new(),
        payload: Vec::new(),
    };
    let mut blocks = Vec::new();
    for b in &model.blocks {
        w.dense(format!("{}/x", b.name), &b.x);
        match &b.l_factors {
            Some(f) => w.factored(format!("{}/l", b.name), f),
            None => w.dense(format!("{}/l", b.name), &b.l),
        }
        w.sparse(format!("{}/s", b.name), &b.s);
        w.dense(format!("{}/y", b.name), &b.y);
        if let Some(spec) = &b.last_singular_values {
            let m = Matrix::from_vec(1, spec.len(), spec.clone()).expect("finite spectrum");
            w.dense(format!("{}/spectrum", b.name), &m);
        }
        blocks.push(BlockScalars {
            name: b.name.clone(),
            alpha: b.alpha,
            beta: b.beta,
            rho: b.rho,
            has_surrogate: b.l_factors.is_some(),
            has_spectrum: b.last_singular_values.is_some(),
        });
    }
    for p in &model.plain {
        w.dense(p.name.clone(), &p.value);
    }
    if let Some(cm) = &ckpt.compressed {
        for cb in &cm.blocks {
            w.factored(format!("compressed/{}/l", cb.name), &cb.factors);
            w.sparse(format!("compressed/{}/s", cb.name), &cb.sparse);
        }
    }
    if let Some(adam) = &ckpt.adam {
        for (i, slot) in model.slots().iter().enumerate() {
            w.dense(format!("adam/first/{}", slot.name), &adam.first[i]);
            w.dense(format!("adam/second/{}", slot.name), &adam.second[i]);
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        model_config: model.config.clone(),
        blocks,
        plain: model.plain.iter().map(|p| p.name.clone()).collect(),
        optimizer: ckpt.adam.as_ref().map(|a| OptimizerInfo {
            step: a.step,
            config: a.config,
        }),
        compressed: ckpt
            .compressed
            .as_ref()
            .map(|cm| cm.blocks.iter().map(|b| b.name.clone()).collect()),
        tensors: w.entries,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(MAGIC.len() + 32 + json.len() + w.payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(format!("{}\n", json.len()).as_bytes());
    out.extend_from_slice(json.as_bytes());
    out.extend_from_slice(&w.payload);
    out
}

/// Splits the header off and parses the manifest; returns it with the payload.
pub fn parse_manifest(bytes: &[u8]) -> Result<(Manifest, &[u8]), CheckpointError> {
    let rest = bytes.strip_prefix(MAGIC).ok_or(CheckpointError::BadMagic)?;
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| CheckpointError::Manifest("missing manifest length".into()))?;
    let len: usize = std::str::from_utf8(&rest[..nl])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| CheckpointError::Manifest("bad manifest length".into()))?;
    let rest = &rest[nl + 1..];
    if rest.len() < len {
        return Err(CheckpointError::Manifest("manifest truncated".into()));
    }
    let value: serde_json::Value =
        serde_json::from_slice(&rest[..len]).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    let found = value
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| CheckpointError::Manifest("missing format_version".into()))? as u32;
    if found != FORMAT_VERSION {
        return Err(CheckpointError::Version {
            found,
            expected: FORMAT_VERSION,
        });
    }
    let manifest: Manifest = serde_json::from_value(value).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    Ok((manifest, &rest[len..]))
}

struct Reader<'a> {
    entries: std::slice::Iter<'a, TensorEntry>,
    payload: &'a [u8],
}

impl Reader<'_> {
    fn next(&mut self, name: &str, storage: Storage, component: Option<&str>) -> Result<(Matrix, Option<[usize; 2]>), CheckpointError> {
        let e = self
            .entries
            .next()
            .ok_or_else(|| CheckpointError::Manifest(format!("missing tensor `{name}`")))?;
        if e.name != name || e.storage != storage || e.component.as_deref() != component {
            return Err(CheckpointError::Manifest(format!(
                "expected `{name}` ({storage:?} {component:?}), found `{}` ({:?} {:?})",
                e.name, e.storage, e.component
            )));
        }
        let expected = (e.shape[0] * e.shape[1] * 8) as u64;
        if e.byte_len != expected {
            return Err(CheckpointError::Shape {
                tensor: label(e),
                detail: format!("byte_len {} disagrees with shape {:?} ({} bytes)", e.byte_len, e.shape, expected),
            });
        }
        if (self.payload.len() as u64) < e.byte_len {
            return Err(CheckpointError::Truncated {
                tensor: label(e),
                needed: e.byte_len,
                available: self.payload.len() as u64,
            });
        }
        let (head, tail) = self.payload.split_at(e.byte_len as usize);
        self.payload = tail;
        let data = head
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let m = Matrix::from_vec(e.shape[0], e.shape[1], data).map_err(|err| CheckpointError::Shape {
            tensor: label(e),
            detail: err.to_string(),
        })?;
        Ok((m, e.dense_shape))
    }

    fn dense(&mut self, name: &str) -> Result<Matrix, CheckpointError> {
        Ok(self.next(name, Storage::Dense, None)?.0)
    }

    fn factored(&mut self, name: &str) -> Result<LowRank, CheckpointError> {
        let (left, shape) = self.next(name, Storage::FactoredLr, Some("left"))?;
        let (right, _) = self.next(name, Storage::FactoredLr, Some("right"))?;
        let (sigma, _) = self.next(name, Storage::FactoredLr, Some("sigma"))?;
        let shape = shape.ok_or_else(|| shape_err(name, "factored entry without dense_shape"))?;
        if left.cols() != right.rows() || sigma.len() != left.cols() || [left.rows(), right.cols()] != shape {
            return Err(shape_err(
                name,
                &format!(
                    "left {:?}, right {:?}, sigma {} inconsistent with {:?}",
                    left.shape(),
                    right.shape(),
                    sigma.len(),
                    shape
                ),
            ));
        }
        Ok(LowRank {
            left,
            right,
            sigma: sigma.into_vec(),
        })
    }

    fn sparse(&mut self, name: &str) -> Result<Matrix, CheckpointError> {
        let (idx, shape) = self.next(name, Storage::SparseCoo, Some("indices"))?;
        let (vals, _) = self.next(name, Storage::SparseCoo, Some("values"))?;
        let [r, c] = shape.ok_or_else(|| shape_err(name, "sparse entry without dense_shape"))?;
        if idx.len() != vals.len() {
            return Err(shape_err(name, "indices and values differ in length"));
        }
        let mut m = Matrix::zeros(r, c);
        for (&i, &v) in idx.as_slice().iter().zip(vals.as_slice()) {
            if i < 0.0 || i.fract() != 0.0 || i as usize >= r * c {
                return Err(shape_err(name, &format!("index {i} outside {r}x{c}")));
            }
            m.as_mut_slice()[i as usize] = v;
        }
        Ok(m)
    }
}

fn label(e: &TensorEntry) -> String {
    match &e.component {
        Some(c) => format!("{}.{}", e.name, c),
        None => e.name.clone(),
    }
}

fn shape_err(name: &str, detail: &str) -> CheckpointError {
    CheckpointError::Shape {
        tensor: name.to_string(),
        detail: detail.to_string(),
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let (manifest, payload) = parse_manifest(bytes)?;
    let mut r = Reader {
        entries: manifest.tensors.iter(),
        payload,
    };
    let mut blocks = Vec::new();
    for bs in &manifest.blocks {
        let n = &bs.name;
        let x = r.dense(&format!("{n}/x"))?;
        let (l, l_factors) = if bs.has_surrogate {
            let f = r.factored(&format!("{n}/l"))?;
            (f.to_dense(), Some(f))
        } else {
            (r.dense(&format!("{n}/l"))?, None)
        };
        let s = r.sparse(&format!("{n}/s"))?;
        let y = r.dense(&format!("{n}/y"))?;
        let last_singular_values = if bs.has_spectrum {
            Some(r.dense(&format!("{n}/spectrum"))?.into_vec())
        } else {
            None
        };
        for (what, m) in [("l", &l), ("s", &s), ("y", &y)] {
            if m.shape() != x.shape() {
                return Err(shape_err(&format!("{n}/{what}"), "shape differs from x"));
            }
        }
        let mut b = BlockState::new(n.clone(), x, bs.rho).map_err(ModelError::from)?;
        b.l = l;
        b.s = s;
        b.y = y;
        b.alpha = bs.alpha;
        b.beta = bs.beta;
        b.l_factors = l_factors;
        b.last_singular_values = last_singular_values;
        blocks.push(b);
    }
    let mut plain = Vec::new();
    for name in &manifest.plain {
        plain.push(NamedTensor {
            name: name.clone(),
            value: r.dense(name)?,
        });
    }
    let model = Model::from_parts(manifest.model_config.clone(), blocks, plain)?;
    let compressed = match &manifest.compressed {
        Some(names) => {
            let mut cbs = Vec::new();
            for n in names {
                let factors = r.factored(&format!("compressed/{n}/l"))?;
                let sparse = r.sparse(&format!("compressed/{n}/s"))?;
                cbs.push(CompressedBlock {
                    name: n.clone(),
                    factors,
                    sparse,
                });
            }
            Some(CompressedModel::new(cbs))
        }
        None => None,
    };
    let adam = match &manifest.optimizer {
        Some(info) => {
            let mut first = Vec::new();
            let mut second = Vec::new();
            for slot in model.slots() {
                let a = r.dense(&format!("adam/first/{}", slot.name))?;
                let b = r.dense(&format!("adam/second/{}", slot.name))?;
                if a.shape() != slot.shape || b.shape() != slot.shape {
                    return Err(shape_err(&slot.name, "optimizer moment shape differs from slot"));
                }
                first.push(a);
                second.push(b);
            }
            Some(AdamState {
                config: info.config,
                step: info.step,
                first,
                second,
            })
        }
        None => None,
    };
    if r.entries.next().is_some() {
        return Err(CheckpointError::Manifest("manifest lists unused tensors".into()));
    }
    if !r.payload.is_empty() {
        return Err(CheckpointError::Trailing(r.payload.len() as u64));
    }
    Ok(Checkpoint {
        model,
        adam,
        compressed,
    })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes via a temporary sibling file and a rename, so an interrupted save
/// never clobbers an existing checkpoint.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    let bytes = to_bytes(ckpt);
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(&bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    from_bytes(&bytes)
}

/// Reads only the manifest.
pub fn read_manifest(path: &Path) -> Result<Manifest, CheckpointError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    Ok(parse_manifest(&bytes)?.0)
}
