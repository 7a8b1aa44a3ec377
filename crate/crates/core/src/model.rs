//! Desk-scale trainable networks: a residual MLP stack and a tiny
//! transformer, with exact manual backpropagation.
//!
//! Both architectures share the layout the sampling machinery expects: an
//! always-active embedding at the bottom, `n_layers` middle blocks that the
//! sampler freezes and unfreezes, and an always-active head on top. Weight
//! convention is `W: (C_out, C_in)` applied as `y = x * W^T` with activations
//! stored rows-first, one row per batch element (or per token, with batch and
//! sequence flattened together).
//!
//! Compute is `f64` throughout; checkpoints store `f32` (see `checkpoint`).

use std::borrow::Cow;
use std::collections::BTreeSet;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::linalg::{matmul, matmul_nt, matmul_tn, Matrix};

const RMS_EPS: f64 = 1e-6;

/// Architecture tags accepted in checkpoints and configs.
pub const ARCH_TAGS: [&str; 2] = ["mlp-stack", "tiny-transformer"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Arch {
    #[serde(rename = "mlp-stack")]
    MlpStack,
    #[serde(rename = "tiny-transformer")]
    TinyTransformer,
}

impl Arch {
    pub fn tag(&self) -> &'static str {
        match self {
            Arch::MlpStack => "mlp-stack",
            Arch::TinyTransformer => "tiny-transformer",
        }
    }
}

/// Shape description of a network: always-active embedding and head around
/// `n_layers` sampled middle blocks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub arch: Arch,
    pub n_layers: usize,
    pub d_model: usize,
    pub d_hidden: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_heads: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seq_len: Option<usize>,
    /// Transformer only: mask attention to past positions. Full attention
    /// when false.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub causal: bool,
}

impl ModelSpec {
    pub fn mlp(n_layers: usize, d_model: usize, d_hidden: usize) -> Self {
        Self {
            arch: Arch::MlpStack,
            n_layers,
            d_model,
            d_hidden,
            n_heads: None,
            vocab: None,
            seq_len: None,
            causal: false,
        }
    }

    pub fn transformer(
        n_layers: usize,
        d_model: usize,
        d_hidden: usize,
        n_heads: usize,
        vocab: usize,
        seq_len: usize,
    ) -> Self {
        Self {
            arch: Arch::TinyTransformer,
            n_layers,
            d_model,
            d_hidden,
            n_heads: Some(n_heads),
            vocab: Some(vocab),
            seq_len: Some(seq_len),
            causal: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.d_model == 0 || self.d_hidden == 0 {
            return Err(Error::config("n_layers, d_model and d_hidden must be positive"));
        }
        match self.arch {
            Arch::MlpStack => {
                if self.n_heads.is_some() || self.vocab.is_some() || self.seq_len.is_some() {
                    return Err(Error::config(
                        "n_heads/vocab/seq_len only apply to tiny-transformer",
                    ));
                }
            }
            Arch::TinyTransformer => {
                let heads = self.n_heads.ok_or_else(|| Error::config("n_heads required"))?;
                let vocab = self.vocab.ok_or_else(|| Error::config("vocab required"))?;
                let seq = self.seq_len.ok_or_else(|| Error::config("seq_len required"))?;
                if heads == 0 || self.d_model % heads != 0 {
                    return Err(Error::config(format!(
                        "d_model {} must divide into n_heads {}",
                        self.d_model, heads
                    )));
                }
                if vocab < 2 || seq == 0 {
                    return Err(Error::config("vocab must be >= 2 and seq_len >= 1"));
                }
            }
        }
        Ok(())
    }

    /// (rows, cols) for every weight matrix of one block, in canonical order.
    pub fn block_matrix_shapes(&self) -> Vec<(MatName, usize, usize)> {
        let d = self.d_model;
        let h = self.d_hidden;
        match self.arch {
            Arch::MlpStack => vec![(MatName::W1, h, d), (MatName::W2, d, h)],
            Arch::TinyTransformer => vec![
                (MatName::Wq, d, d),
                (MatName::Wk, d, d),
                (MatName::Wv, d, d),
                (MatName::Wo, d, d),
                (MatName::Up, h, d),
                (MatName::Down, d, h),
            ],
        }
    }

    /// Embedding matrix shape.
    pub fn embedding_shape(&self) -> (usize, usize) {
        match self.arch {
            Arch::MlpStack => (self.d_model, self.d_model),
            Arch::TinyTransformer => (self.vocab.unwrap(), self.d_model),
        }
    }

    /// Head matrix shape.
    pub fn head_shape(&self) -> (usize, usize) {
        match self.arch {
            Arch::MlpStack => (self.d_model, self.d_model),
            Arch::TinyTransformer => (self.vocab.unwrap(), self.d_model),
        }
    }

    pub fn block_param_elems(&self) -> usize {
        self.block_matrix_shapes().iter().map(|(_, r, c)| r * c).sum()
    }

    pub fn total_param_elems(&self) -> usize {
        let (er, ec) = self.embedding_shape();
        let (hr, hc) = self.head_shape();
        er * ec + hr * hc + self.n_layers * self.block_param_elems()
    }

    /// Smallest dimension over all block matrices; the cap for projection
    /// ranks.
    pub fn min_block_dim(&self) -> usize {
        self.block_matrix_shapes()
            .iter()
            .map(|(_, r, c)| (*r).min(*c))
            .min()
            .unwrap()
    }
}

/// Names of the weight matrices inside one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum MatName {
    W1,
    W2,
    Wq,
    Wk,
    Wv,
    Wo,
    Up,
    Down,
}

impl MatName {
    pub fn as_str(&self) -> &'static str {
        match self {
            MatName::W1 => "w1",
            MatName::W2 => "w2",
            MatName::Wq => "wq",
            MatName::Wk => "wk",
            MatName::Wv => "wv",
            MatName::Wo => "wo",
            MatName::Up => "up",
            MatName::Down => "down",
        }
    }

    pub fn parse(s: &str) -> Option<MatName> {
        Some(match s {
            "w1" => MatName::W1,
            "w2" => MatName::W2,
            "wq" => MatName::Wq,
            "wk" => MatName::Wk,
            "wv" => MatName::Wv,
            "wo" => MatName::Wo,
            "up" => MatName::Up,
            "down" => MatName::Down,
            _ => return None,
        })
    }
}

/// Addresses one parameter matrix in a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ParamRef {
    Embedding,
    Block(usize, MatName),
    Head,
}

/// One middle block: its weight matrices plus fixed RMS-norm gains.
/// Gains stay at 1.0 (they are not trained); only the matrices participate
/// in sampling, outlier scoring and optimization.
#[derive(Debug, Clone)]
pub struct Block {
    weights: BlockWeights,
    norm_gains: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
enum BlockWeights {
    Mlp { w1: Matrix, w2: Matrix },
    Attn { wq: Matrix, wk: Matrix, wv: Matrix, wo: Matrix, up: Matrix, down: Matrix },
}

impl Block {
    /// Weight matrices in canonical order.
    pub fn mats(&self) -> Vec<(MatName, &Matrix)> {
        match &self.weights {
            BlockWeights::Mlp { w1, w2 } => vec![(MatName::W1, w1), (MatName::W2, w2)],
            BlockWeights::Attn { wq, wk, wv, wo, up, down } => vec![
                (MatName::Wq, wq),
                (MatName::Wk, wk),
                (MatName::Wv, wv),
                (MatName::Wo, wo),
                (MatName::Up, up),
                (MatName::Down, down),
            ],
        }
    }

    pub fn mat(&self, name: MatName) -> Option<&Matrix> {
        self.mats().into_iter().find(|(n, _)| *n == name).map(|(_, m)| m)
    }

    fn mat_mut(&mut self, name: MatName) -> Option<&mut Matrix> {
        match &mut self.weights {
            BlockWeights::Mlp { w1, w2 } => match name {
                MatName::W1 => Some(w1),
                MatName::W2 => Some(w2),
                _ => None,
            },
            BlockWeights::Attn { wq, wk, wv, wo, up, down } => match name {
                MatName::Wq => Some(wq),
                MatName::Wk => Some(wk),
                MatName::Wv => Some(wv),
                MatName::Wo => Some(wo),
                MatName::Up => Some(up),
                MatName::Down => Some(down),
                _ => None,
            },
        }
    }

    pub fn norm_gain(&self, idx: usize) -> &[f64] {
        &self.norm_gains[idx]
    }

    pub fn param_elems(&self) -> usize {
        self.mats().iter().map(|(_, m)| m.len()).sum()
    }
}

/// A network with its parameter state. Immutable during one forward/backward
/// pass; the trainer mutates it between steps through [`Model::apply_update`],
/// which bumps the revision used to detect stale traces.
#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    embedding: Matrix,
    blocks: Vec<Block>,
    head: Matrix,
    revision: u64,
}

/// Deterministic scaled-normal initialization: entries ~ N(0, 1/fan_in).
pub fn init_model(spec: &ModelSpec, seed: u64) -> Result<Model> {
    spec.validate()?;
    let mut rng = crate::rng::stream(seed, crate::rng::tags::INIT);
    let mut draw = |rows: usize, cols: usize| {
        let normal = Normal::new(0.0, 1.0 / (cols as f64).sqrt()).unwrap();
        Matrix::from_fn(rows, cols, |_, _| normal.sample(&mut rng))
    };
    let (er, ec) = spec.embedding_shape();
    let embedding = draw(er, ec);
    let mut blocks = Vec::with_capacity(spec.n_layers);
    for _ in 0..spec.n_layers {
        let weights = match spec.arch {
            Arch::MlpStack => BlockWeights::Mlp {
                w1: draw(spec.d_hidden, spec.d_model),
                w2: draw(spec.d_model, spec.d_hidden),
            },
            Arch::TinyTransformer => BlockWeights::Attn {
                wq: draw(spec.d_model, spec.d_model),
                wk: draw(spec.d_model, spec.d_model),
                wv: draw(spec.d_model, spec.d_model),
                wo: draw(spec.d_model, spec.d_model),
                up: draw(spec.d_hidden, spec.d_model),
                down: draw(spec.d_model, spec.d_hidden),
            },
        };
        let gains = match spec.arch {
            Arch::MlpStack => vec![vec![1.0; spec.d_model]],
            Arch::TinyTransformer => vec![vec![1.0; spec.d_model]; 2],
        };
        blocks.push(Block { weights, norm_gains: gains });
    }
    let (hr, hc) = spec.head_shape();
    let head = draw(hr, hc);
    Ok(Model { spec: spec.clone(), embedding, blocks, head, revision: 0 })
}

impl Model {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn embedding(&self) -> &Matrix {
        &self.embedding
    }

    pub fn head(&self) -> &Matrix {
        &self.head
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn block(&self, i: usize) -> &Block {
        &self.blocks[i]
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    pub fn param(&self, r: ParamRef) -> Result<&Matrix> {
        match r {
            ParamRef::Embedding => Ok(&self.embedding),
            ParamRef::Head => Ok(&self.head),
            ParamRef::Block(i, name) => self
                .blocks
                .get(i)
                .and_then(|b| b.mat(name))
                .ok_or_else(|| Error::state(format!("no parameter {r:?}"))),
        }
    }

    /// All parameter references in canonical (checkpoint) order.
    pub fn param_refs(&self) -> Vec<ParamRef> {
        let mut out = vec![ParamRef::Embedding];
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, _) in b.mats() {
                out.push(ParamRef::Block(i, name));
            }
        }
        out.push(ParamRef::Head);
        out
    }

    /// Adds `update` to the addressed matrix and bumps the revision.
    pub fn apply_update(&mut self, r: ParamRef, update: &Matrix) -> Result<()> {
        let target = match r {
            ParamRef::Embedding => &mut self.embedding,
            ParamRef::Head => &mut self.head,
            ParamRef::Block(i, name) => self
                .blocks
                .get_mut(i)
                .and_then(|b| b.mat_mut(name))
                .ok_or_else(|| Error::state(format!("no parameter {r:?}")))?,
        };
        target.add_scaled(update, 1.0)?;
        self.revision += 1;
        Ok(())
    }

    /// Overwrite one matrix (used by task construction); bumps the revision.
    pub fn set_param(&mut self, r: ParamRef, value: Matrix) -> Result<()> {
        let target = match r {
            ParamRef::Embedding => &mut self.embedding,
            ParamRef::Head => &mut self.head,
            ParamRef::Block(i, name) => self
                .blocks
                .get_mut(i)
                .and_then(|b| b.mat_mut(name))
                .ok_or_else(|| Error::state(format!("no parameter {r:?}")))?,
        };
        if (target.rows(), target.cols()) != (value.rows(), value.cols()) {
            return Err(Error::shape("set_param", "replacement shape differs"));
        }
        *target = value;
        self.revision += 1;
        Ok(())
    }

    pub fn total_param_elems(&self) -> usize {
        self.spec.total_param_elems()
    }

    /// Frobenius distance between the full parameter vectors of two models.
    pub fn param_distance(&self, other: &Model) -> f64 {
        let mut acc = 0.0;
        for r in self.param_refs() {
            let a = self.param(r).unwrap();
            let b = other.param(r).unwrap();
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                acc += (x - y) * (x - y);
            }
        }
        acc.sqrt()
    }
}

/// One training batch; `Dense` for the MLP stack, `Tokens` for the
/// transformer (ids flattened row-major as `batch * seq`).
#[derive(Debug, Clone)]
pub enum Batch {
    Dense { inputs: Matrix, targets: Matrix },
    Tokens { inputs: Vec<usize>, targets: Vec<usize>, batch: usize, seq: usize },
}

/// Everything forward caches for backprop and calibration.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    revision: u64,
    loss: f64,
    /// `block_inputs[i]` is the residual-stream input of block `i`;
    /// the last entry is the head input.
    block_inputs: Vec<Matrix>,
    caches: Vec<BlockCache>,
    kind: TraceKind,
}

#[derive(Debug, Clone)]
enum TraceKind {
    Dense { inputs: Matrix, targets: Matrix, pred: Matrix },
    Tokens { tokens: Vec<usize>, targets: Vec<usize>, batch: usize, seq: usize, probs: Matrix },
}

#[derive(Debug, Clone)]
enum BlockCache {
    Mlp {
        u: Matrix,
        a: Matrix,
        inv_rms: Vec<f64>,
    },
    Attn {
        u1: Matrix,
        q: Matrix,
        k: Matrix,
        v: Matrix,
        /// One T x T attention matrix per (batch element, head).
        attn: Vec<Matrix>,
        o: Matrix,
        r1: Matrix,
        u2: Matrix,
        a2: Matrix,
        inv_rms1: Vec<f64>,
        inv_rms2: Vec<f64>,
    },
}

impl ForwardTrace {
    pub fn loss(&self) -> f64 {
        self.loss
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    pub fn n_blocks(&self) -> usize {
        self.caches.len()
    }

    /// Residual-stream input of block `i`; `i == n_layers` gives the head
    /// input.
    pub fn block_input(&self, i: usize) -> &Matrix {
        &self.block_inputs[i]
    }

    pub fn block_output(&self, i: usize) -> &Matrix {
        &self.block_inputs[i + 1]
    }

    pub fn head_input(&self) -> &Matrix {
        self.block_inputs.last().unwrap()
    }

    /// Dense predictions (MLP trace only).
    pub fn predictions(&self) -> Option<&Matrix> {
        match &self.kind {
            TraceKind::Dense { pred, .. } => Some(pred),
            TraceKind::Tokens { .. } => None,
        }
    }

    /// The activation rows consumed by one weight matrix, as needed for
    /// outlier calibration. Post-activation values are recomputed from the
    /// cached pre-activations.
    pub fn matrix_input(&self, block: usize, name: MatName) -> Result<Cow<'_, Matrix>> {
        let cache = self
            .caches
            .get(block)
            .ok_or_else(|| Error::state(format!("no block {block} in trace")))?;
        match (cache, name) {
            (BlockCache::Mlp { u, .. }, MatName::W1) => Ok(Cow::Borrowed(u)),
            (BlockCache::Mlp { a, .. }, MatName::W2) => Ok(Cow::Owned(map_silu(a))),
            (BlockCache::Attn { u1, .. }, MatName::Wq | MatName::Wk | MatName::Wv) => {
                Ok(Cow::Borrowed(u1))
            }
            (BlockCache::Attn { o, .. }, MatName::Wo) => Ok(Cow::Borrowed(o)),
            (BlockCache::Attn { u2, .. }, MatName::Up) => Ok(Cow::Borrowed(u2)),
            (BlockCache::Attn { a2, .. }, MatName::Down) => Ok(Cow::Owned(map_silu(a2))),
            _ => Err(Error::state(format!(
                "matrix {} does not exist in block {block}",
                name.as_str()
            ))),
        }
    }

    /// Total float elements retained by this trace (the activation memory
    /// the accountant charges for). Label/id arrays are not floats and are
    /// excluded.
    pub fn activation_elems(&self) -> usize {
        let mut n: usize = self.block_inputs.iter().map(Matrix::len).sum();
        for c in &self.caches {
            n += match c {
                BlockCache::Mlp { u, a, inv_rms } => u.len() + a.len() + inv_rms.len(),
                BlockCache::Attn { u1, q, k, v, attn, o, r1, u2, a2, inv_rms1, inv_rms2 } => {
                    u1.len()
                        + q.len()
                        + k.len()
                        + v.len()
                        + attn.iter().map(Matrix::len).sum::<usize>()
                        + o.len()
                        + r1.len()
                        + u2.len()
                        + a2.len()
                        + inv_rms1.len()
                        + inv_rms2.len()
                }
            };
        }
        n += match &self.kind {
            TraceKind::Dense { inputs, pred, .. } => inputs.len() + pred.len(),
            TraceKind::Tokens { probs, .. } => probs.len(),
        };
        n
    }
}

/// Gradients for the matrices selected by a [`GradScope`]; entries are
/// `None` for skipped units.
#[derive(Debug, Clone)]
pub struct GradientSet {
    pub embedding: Option<Matrix>,
    pub blocks: Vec<Option<Vec<(MatName, Matrix)>>>,
    pub head: Option<Matrix>,
}

impl GradientSet {
    pub fn get(&self, r: ParamRef) -> Option<&Matrix> {
        match r {
            ParamRef::Embedding => self.embedding.as_ref(),
            ParamRef::Head => self.head.as_ref(),
            ParamRef::Block(i, name) => self
                .blocks
                .get(i)?
                .as_ref()?
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, g)| g),
        }
    }

    /// Total float elements held by materialized gradients.
    pub fn elems(&self) -> usize {
        let mut n = self.embedding.as_ref().map_or(0, Matrix::len)
            + self.head.as_ref().map_or(0, Matrix::len);
        for b in self.blocks.iter().flatten() {
            n += b.iter().map(|(_, g)| g.len()).sum::<usize>();
        }
        n
    }
}

/// Which units receive materialized weight gradients. The loss signal always
/// propagates through every block; frozen blocks simply skip the gradient
/// accumulation into their matrices.
#[derive(Debug, Clone)]
pub struct GradScope {
    pub embedding: bool,
    pub head: bool,
    /// `None` means every block; otherwise only the listed blocks.
    pub blocks: Option<BTreeSet<usize>>,
}

impl GradScope {
    pub fn all() -> Self {
        Self { embedding: true, head: true, blocks: None }
    }

    pub fn active(blocks: BTreeSet<usize>) -> Self {
        Self { embedding: true, head: true, blocks: Some(blocks) }
    }

    fn wants_block(&self, i: usize) -> bool {
        match &self.blocks {
            None => true,
            Some(set) => set.contains(&i),
        }
    }
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn dsilu(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

fn map_silu(a: &Matrix) -> Matrix {
    let mut z = a.clone();
    for v in z.as_mut_slice() {
        *v = silu(*v);
    }
    z
}

/// RMS-normalize each row in place against a gain vector; returns the
/// per-row inverse RMS needed by backward.
fn rms_rows(x: &Matrix, gain: &[f64]) -> (Matrix, Vec<f64>) {
    let n = x.cols() as f64;
    let mut out = Matrix::zeros(x.rows(), x.cols());
    let mut inv = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = x.row(i);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / n;
        let ri = 1.0 / (ms + RMS_EPS).sqrt();
        inv.push(ri);
        let orow = out.row_mut(i);
        for (j, v) in row.iter().enumerate() {
            orow[j] = v * ri * gain[j];
        }
    }
    (out, inv)
}

/// Gradient of `rms_rows` with respect to its input, accumulated into `dx`.
fn rms_rows_backward(du: &Matrix, x: &Matrix, inv: &[f64], gain: &[f64], dx: &mut Matrix) {
    let n = x.cols() as f64;
    for i in 0..x.rows() {
        let ri = inv[i];
        let xrow = x.row(i);
        let durow = du.row(i);
        let mut dot = 0.0;
        for j in 0..xrow.len() {
            dot += durow[j] * gain[j] * xrow[j];
        }
        let coeff = ri * ri * ri / n * dot;
        let dxrow = dx.row_mut(i);
        for j in 0..xrow.len() {
            dxrow[j] += durow[j] * gain[j] * ri - coeff * xrow[j];
        }
    }
}

/// Sinusoidal position row, added to token embeddings.
fn position_row(t: usize, d: usize, out: &mut [f64]) {
    for i in 0..d {
        let exponent = 2.0 * ((i / 2) as f64) / d as f64;
        let angle = t as f64 / 10000f64.powf(exponent);
        out[i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
    }
}

/// Run the model on a batch, caching every intermediate needed by
/// [`backward`]. Loss is MSE for the MLP stack, mean token cross-entropy for
/// the transformer.
pub fn forward(model: &Model, batch: &Batch) -> Result<ForwardTrace> {
    match (&model.spec.arch, batch) {
        (Arch::MlpStack, Batch::Dense { inputs, targets }) => forward_dense(model, inputs, targets),
        (Arch::TinyTransformer, Batch::Tokens { inputs, targets, batch, seq }) => {
            forward_tokens(model, inputs, targets, *batch, *seq)
        }
        _ => Err(Error::shape("forward", "batch kind does not match architecture")),
    }
}

/// Dense predictions without a loss; used by teacher models.
pub fn predict_dense(model: &Model, inputs: &Matrix) -> Result<Matrix> {
    let (block_inputs, _caches) = run_dense(model, inputs)?;
    matmul_nt(block_inputs.last().unwrap(), &model.head)
}

fn check_dense_batch(model: &Model, inputs: &Matrix, targets: &Matrix) -> Result<()> {
    let d = model.spec.d_model;
    if inputs.cols() != d || targets.cols() != d || inputs.rows() != targets.rows() {
        return Err(Error::shape(
            "forward",
            format!(
                "dense batch {}x{} -> {}x{} does not fit d_model {d}",
                inputs.rows(),
                inputs.cols(),
                targets.rows(),
                targets.cols()
            ),
        ));
    }
    Ok(())
}

fn run_dense(model: &Model, inputs: &Matrix) -> Result<(Vec<Matrix>, Vec<BlockCache>)> {
    let mut h = matmul_nt(inputs, &model.embedding)?;
    let mut block_inputs = Vec::with_capacity(model.blocks.len() + 1);
    let mut caches = Vec::with_capacity(model.blocks.len());
    for block in &model.blocks {
        block_inputs.push(h.clone());
        let (w1, w2) = match &block.weights {
            BlockWeights::Mlp { w1, w2 } => (w1, w2),
            BlockWeights::Attn { .. } => unreachable!("dense forward on transformer block"),
        };
        let (u, inv_rms) = rms_rows(&h, block.norm_gain(0));
        let a = matmul_nt(&u, w1)?;
        let z = map_silu(&a);
        let m = matmul_nt(&z, w2)?;
        h.add_scaled(&m, 1.0)?;
        caches.push(BlockCache::Mlp { u, a, inv_rms });
    }
    block_inputs.push(h);
    Ok((block_inputs, caches))
}

fn forward_dense(model: &Model, inputs: &Matrix, targets: &Matrix) -> Result<ForwardTrace> {
    check_dense_batch(model, inputs, targets)?;
    let (block_inputs, caches) = run_dense(model, inputs)?;
    let pred = matmul_nt(block_inputs.last().unwrap(), &model.head)?;
    let count = (pred.rows() * pred.cols()) as f64;
    let mut loss = 0.0;
    for (p, t) in pred.as_slice().iter().zip(targets.as_slice()) {
        loss += (p - t) * (p - t);
    }
    loss /= count;
    Ok(ForwardTrace {
        revision: model.revision,
        loss,
        block_inputs,
        caches,
        kind: TraceKind::Dense { inputs: inputs.clone(), targets: targets.clone(), pred },
    })
}

fn forward_tokens(
    model: &Model,
    tokens: &[usize],
    targets: &[usize],
    batch: usize,
    seq: usize,
) -> Result<ForwardTrace> {
    let spec = &model.spec;
    let vocab = spec.vocab.unwrap();
    let expect_seq = spec.seq_len.unwrap();
    if seq != expect_seq || tokens.len() != batch * seq || targets.len() != tokens.len() {
        return Err(Error::shape(
            "forward",
            format!("token batch {}x{seq} does not fit seq_len {expect_seq}", batch),
        ));
    }
    if tokens.iter().chain(targets).any(|&t| t >= vocab) {
        return Err(Error::shape("forward", format!("token id out of vocab {vocab}")));
    }

    let d = spec.d_model;
    let rows = batch * seq;
    let mut h = Matrix::zeros(rows, d);
    let mut pos = vec![0.0; d];
    for b in 0..batch {
        for t in 0..seq {
            let r = b * seq + t;
            position_row(t, d, &mut pos);
            let emb = model.embedding.row(tokens[r]);
            let hrow = h.row_mut(r);
            for j in 0..d {
                hrow[j] = emb[j] + pos[j];
            }
        }
    }

    let heads = spec.n_heads.unwrap();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut block_inputs = Vec::with_capacity(model.blocks.len() + 1);
    let mut caches = Vec::with_capacity(model.blocks.len());

    for block in &model.blocks {
        block_inputs.push(h.clone());
        let (wq, wk, wv, wo, up, down) = match &block.weights {
            BlockWeights::Attn { wq, wk, wv, wo, up, down } => (wq, wk, wv, wo, up, down),
            BlockWeights::Mlp { .. } => unreachable!("token forward on mlp block"),
        };
        let (u1, inv_rms1) = rms_rows(&h, block.norm_gain(0));
        let q = matmul_nt(&u1, wq)?;
        let k = matmul_nt(&u1, wk)?;
        let v = matmul_nt(&u1, wv)?;

        let mut o = Matrix::zeros(rows, d);
        let mut attn = Vec::with_capacity(batch * heads);
        for b in 0..batch {
            for hd in 0..heads {
                let col0 = hd * dh;
                let mut a = Matrix::zeros(seq, seq);
                for ti in 0..seq {
                    let qrow = &q.row(b * seq + ti)[col0..col0 + dh];
                    let limit = if spec.causal { ti + 1 } else { seq };
                    let mut max = f64::NEG_INFINITY;
                    let mut scores = vec![f64::NEG_INFINITY; seq];
                    for (tj, sc) in scores.iter_mut().enumerate().take(limit) {
                        let krow = &k.row(b * seq + tj)[col0..col0 + dh];
                        let mut dot = 0.0;
                        for c in 0..dh {
                            dot += qrow[c] * krow[c];
                        }
                        *sc = dot * scale;
                        if *sc > max {
                            max = *sc;
                        }
                    }
                    let mut denom = 0.0;
                    for sc in scores.iter_mut().take(limit) {
                        *sc = (*sc - max).exp();
                        denom += *sc;
                    }
                    let arow = a.row_mut(ti);
                    for tj in 0..seq {
                        arow[tj] = if tj < limit { scores[tj] / denom } else { 0.0 };
                    }
                }
                // o rows for this (b, head): A * V_head
                for ti in 0..seq {
                    let arow = a.row(ti);
                    let orow_idx = b * seq + ti;
                    for c in 0..dh {
                        let mut acc = 0.0;
                        for tj in 0..seq {
                            acc += arow[tj] * v.at(b * seq + tj, col0 + c);
                        }
                        o.set(orow_idx, col0 + c, acc);
                    }
                }
                attn.push(a);
            }
        }

        let attn_out = matmul_nt(&o, wo)?;
        let mut r1 = h.clone();
        r1.add_scaled(&attn_out, 1.0)?;

        let (u2, inv_rms2) = rms_rows(&r1, block.norm_gain(1));
        let a2 = matmul_nt(&u2, up)?;
        let z = map_silu(&a2);
        let mlp_out = matmul_nt(&z, down)?;
        h = r1.clone();
        h.add_scaled(&mlp_out, 1.0)?;

        caches.push(BlockCache::Attn { u1, q, k, v, attn, o, r1, u2, a2, inv_rms1, inv_rms2 });
    }
    block_inputs.push(h);

    let logits = matmul_nt(block_inputs.last().unwrap(), &model.head)?;
    let mut probs = Matrix::zeros(rows, vocab);
    let mut loss = 0.0;
    for r in 0..rows {
        let lrow = logits.row(r);
        let max = lrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        let prow = probs.row_mut(r);
        for (j, l) in lrow.iter().enumerate() {
            let e = (l - max).exp();
            prow[j] = e;
            denom += e;
        }
        for p in prow.iter_mut() {
            *p /= denom;
        }
        loss -= prow[targets[r]].ln();
    }
    loss /= rows as f64;

    Ok(ForwardTrace {
        revision: model.revision,
        loss,
        block_inputs,
        caches,
        kind: TraceKind::Tokens {
            tokens: tokens.to_vec(),
            targets: targets.to_vec(),
            batch,
            seq,
            probs,
        },
    })
}

/// Exact gradients for the matrices selected by `scope`.
pub fn backward(model: &Model, trace: &ForwardTrace, scope: &GradScope) -> Result<GradientSet> {
    backward_scaled(model, trace, scope, 1.0)
}

/// [`backward`] with the loss multiplied by `loss_scale` (diagnostic knob;
/// gradients are linear in it).
pub fn backward_scaled(
    model: &Model,
    trace: &ForwardTrace,
    scope: &GradScope,
    loss_scale: f64,
) -> Result<GradientSet> {
    if trace.revision != model.revision {
        return Err(Error::state(format!(
            "stale trace: model revision {} but trace was taken at {}",
            model.revision, trace.revision
        )));
    }
    match &trace.kind {
        TraceKind::Dense { inputs, targets, pred } => {
            backward_dense(model, trace, scope, loss_scale, inputs, targets, pred)
        }
        TraceKind::Tokens { tokens, targets, batch, seq, probs } => {
            backward_tokens(model, trace, scope, loss_scale, tokens, targets, *batch, *seq, probs)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn backward_dense(
    model: &Model,
    trace: &ForwardTrace,
    scope: &GradScope,
    loss_scale: f64,
    inputs: &Matrix,
    targets: &Matrix,
    pred: &Matrix,
) -> Result<GradientSet> {
    let count = (pred.rows() * pred.cols()) as f64;
    let mut dpred = Matrix::zeros(pred.rows(), pred.cols());
    for i in 0..pred.rows() {
        let prow = pred.row(i);
        let trow = targets.row(i);
        let drow = dpred.row_mut(i);
        for j in 0..prow.len() {
            drow[j] = loss_scale * 2.0 * (prow[j] - trow[j]) / count;
        }
    }

    let head_grad =
        if scope.head { Some(matmul_tn(&dpred, trace.head_input())?) } else { None };
    let mut dh = matmul(&dpred, &model.head)?;

    let mut block_grads: Vec<Option<Vec<(MatName, Matrix)>>> = vec![None; model.blocks.len()];
    for (i, block) in model.blocks.iter().enumerate().rev() {
        let (w1, w2) = match &block.weights {
            BlockWeights::Mlp { w1, w2 } => (w1, w2),
            BlockWeights::Attn { .. } => unreachable!(),
        };
        let BlockCache::Mlp { u, a, inv_rms } = &trace.caches[i] else { unreachable!() };
        let x_in = trace.block_input(i);

        // h_out = x_in + silu(u W1^T) W2^T with u = rms(x_in)
        let dm = &dh; // residual branch
        let mut dz = matmul(dm, w2)?;
        let want = scope.wants_block(i);
        let dw2 = if want {
            let z = map_silu(a);
            Some(matmul_tn(dm, &z)?)
        } else {
            None
        };
        for (g, pre) in dz.as_mut_slice().iter_mut().zip(a.as_slice()) {
            *g *= dsilu(*pre);
        }
        let da = dz;
        let dw1 = if want { Some(matmul_tn(&da, u)?) } else { None };
        let du = matmul(&da, w1)?;

        let mut dx = dh; // residual passthrough
        rms_rows_backward(&du, x_in, inv_rms, block.norm_gain(0), &mut dx);
        dh = dx;

        if want {
            block_grads[i] =
                Some(vec![(MatName::W1, dw1.unwrap()), (MatName::W2, dw2.unwrap())]);
        }
    }

    let embedding = if scope.embedding {
        Some(matmul_tn(&dh, inputs)?)
    } else {
        None
    };
    Ok(GradientSet { embedding, blocks: block_grads, head: head_grad })
}

#[allow(clippy::too_many_arguments)]
fn backward_tokens(
    model: &Model,
    trace: &ForwardTrace,
    scope: &GradScope,
    loss_scale: f64,
    tokens: &[usize],
    targets: &[usize],
    batch: usize,
    seq: usize,
    probs: &Matrix,
) -> Result<GradientSet> {
    let spec = &model.spec;
    let d = spec.d_model;
    let heads = spec.n_heads.unwrap();
    let dh_dim = d / heads;
    let scale = 1.0 / (dh_dim as f64).sqrt();
    let rows = batch * seq;

    let mut dlogits = probs.clone();
    for r in 0..rows {
        let row = dlogits.row_mut(r);
        row[targets[r]] -= 1.0;
        for v in row.iter_mut() {
            *v *= loss_scale / rows as f64;
        }
    }

    let head_grad =
        if scope.head { Some(matmul_tn(&dlogits, trace.head_input())?) } else { None };
    let mut dh = matmul(&dlogits, &model.head)?;

    let mut block_grads: Vec<Option<Vec<(MatName, Matrix)>>> = vec![None; model.blocks.len()];
    for (i, block) in model.blocks.iter().enumerate().rev() {
        let (wq, wk, wv, wo, up, down) = match &block.weights {
            BlockWeights::Attn { wq, wk, wv, wo, up, down } => (wq, wk, wv, wo, up, down),
            BlockWeights::Mlp { .. } => unreachable!(),
        };
        let BlockCache::Attn { u1, q, k, v, attn, o, r1, u2, a2, inv_rms1, inv_rms2 } =
            &trace.caches[i]
        else {
            unreachable!()
        };
        let x_in = trace.block_input(i);
        let want = scope.wants_block(i);

        // MLP sub-layer: h_out = r1 + silu(u2 Up^T) Down^T
        let dmlp = &dh;
        let mut dz = matmul(dmlp, down)?;
        let ddown = if want {
            let z = map_silu(a2);
            Some(matmul_tn(dmlp, &z)?)
        } else {
            None
        };
        for (g, pre) in dz.as_mut_slice().iter_mut().zip(a2.as_slice()) {
            *g *= dsilu(*pre);
        }
        let da2 = dz;
        let dup = if want { Some(matmul_tn(&da2, u2)?) } else { None };
        let du2 = matmul(&da2, up)?;

        let mut dr1 = dh; // residual passthrough into r1
        rms_rows_backward(&du2, r1, inv_rms2, block.norm_gain(1), &mut dr1);

        // Attention sub-layer: r1 = x_in + (A V) Wo^T
        let dattn_out = &dr1;
        let dwo = if want { Some(matmul_tn(dattn_out, o)?) } else { None };
        let do_ = matmul(dattn_out, wo)?;

        let mut dq = Matrix::zeros(rows, d);
        let mut dk = Matrix::zeros(rows, d);
        let mut dv = Matrix::zeros(rows, d);
        for b in 0..batch {
            for hd in 0..heads {
                let col0 = hd * dh_dim;
                let a = &attn[b * heads + hd];
                // dA = dO V^T ; dV += A^T dO ; softmax rows; dQ,dK via scores
                for ti in 0..seq {
                    let arow = a.row(ti);
                    // dA row
                    let mut da_row = vec![0.0; seq];
                    for tj in 0..seq {
                        if arow[tj] == 0.0 && spec.causal && tj > ti {
                            continue;
                        }
                        let mut acc = 0.0;
                        for c in 0..dh_dim {
                            acc += do_.at(b * seq + ti, col0 + c) * v.at(b * seq + tj, col0 + c);
                        }
                        da_row[tj] = acc;
                    }
                    // softmax backward on the row
                    let mut dot = 0.0;
                    for tj in 0..seq {
                        dot += da_row[tj] * arow[tj];
                    }
                    for tj in 0..seq {
                        let ds = arow[tj] * (da_row[tj] - dot);
                        if ds == 0.0 {
                            continue;
                        }
                        let scaled = ds * scale;
                        for c in 0..dh_dim {
                            let qv = q.at(b * seq + ti, col0 + c);
                            let kv = k.at(b * seq + tj, col0 + c);
                            let dqv = dq.at(b * seq + ti, col0 + c) + scaled * kv;
                            dq.set(b * seq + ti, col0 + c, dqv);
                            let dkv = dk.at(b * seq + tj, col0 + c) + scaled * qv;
                            dk.set(b * seq + tj, col0 + c, dkv);
                        }
                    }
                    // dV accumulation: dV[tj] += A[ti,tj] * dO[ti]
                    for tj in 0..seq {
                        if arow[tj] == 0.0 {
                            continue;
                        }
                        for c in 0..dh_dim {
                            let cur = dv.at(b * seq + tj, col0 + c);
                            dv.set(
                                b * seq + tj,
                                col0 + c,
                                cur + arow[tj] * do_.at(b * seq + ti, col0 + c),
                            );
                        }
                    }
                }
            }
        }

        let dwq = if want { Some(matmul_tn(&dq, u1)?) } else { None };
        let dwk = if want { Some(matmul_tn(&dk, u1)?) } else { None };
        let dwv = if want { Some(matmul_tn(&dv, u1)?) } else { None };
        let mut du1 = matmul(&dq, wq)?;
        du1.add_scaled(&matmul(&dk, wk)?, 1.0)?;
        du1.add_scaled(&matmul(&dv, wv)?, 1.0)?;

        let mut dx = dr1; // residual passthrough into x_in
        rms_rows_backward(&du1, x_in, inv_rms1, block.norm_gain(0), &mut dx);
        dh = dx;

        if want {
            block_grads[i] = Some(vec![
                (MatName::Wq, dwq.unwrap()),
                (MatName::Wk, dwk.unwrap()),
                (MatName::Wv, dwv.unwrap()),
                (MatName::Wo, dwo.unwrap()),
                (MatName::Up, dup.unwrap()),
                (MatName::Down, ddown.unwrap()),
            ]);
        }
    }

    let embedding = if scope.embedding {
        let (er, ec) = spec.embedding_shape();
        let mut demb = Matrix::zeros(er, ec);
        for r in 0..rows {
            let src = dh.row(r);
            let dst = demb.row_mut(tokens[r]);
            for j in 0..ec {
                dst[j] += src[j];
            }
        }
        Some(demb)
    } else {
        None
    };
    Ok(GradientSet { embedding, blocks: block_grads, head: head_grad })
}

/// Tensor name for one parameter in checkpoint manifests.
pub fn tensor_name(r: ParamRef) -> String {
    match r {
        ParamRef::Embedding => "embedding".to_string(),
        ParamRef::Head => "head".to_string(),
        ParamRef::Block(i, name) => format!("blocks.{i}.{}", name.as_str()),
    }
}

/// Write a model to `<stem>.json` + `<stem>.bin`.
pub fn save_checkpoint(model: &Model, stem: &Path) -> Result<()> {
    let mut tensors: Vec<(String, &Matrix)> = Vec::new();
    for r in model.param_refs() {
        tensors.push((tensor_name(r), model.param(r)?));
    }
    checkpoint::save(stem, &model.spec, &tensors)
}

/// Load a model saved by [`save_checkpoint`].
pub fn load_checkpoint(stem: &Path) -> Result<Model> {
    let bundle = checkpoint::load(stem)?;
    model_from_bundle(&bundle)
}

/// Rebuild a model from a loaded tensor bundle (ignores any extra tensors,
/// e.g. optimizer snapshots stored alongside).
pub fn model_from_bundle(bundle: &checkpoint::Bundle) -> Result<Model> {
    let spec = bundle.spec.clone();
    spec.validate()?;
    let mut model = init_model(&spec, 0)?;
    for r in model.param_refs() {
        let name = tensor_name(r);
        let tensor = bundle.tensor(&name)?;
        let expect = model.param(r)?;
        if (tensor.rows(), tensor.cols()) != (expect.rows(), expect.cols()) {
            return Err(Error::format(
                "tensors",
                format!(
                    "tensor `{name}` is {}x{}, spec wants {}x{}",
                    tensor.rows(),
                    tensor.cols(),
                    expect.rows(),
                    expect.cols()
                ),
            ));
        }
        model.set_param(r, tensor.clone())?;
    }
    model.revision = 0;
    Ok(model)
}

/// Deterministic dense batch of standard normal inputs (used by tests and
/// tasks).
pub fn gaussian_inputs(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    let normal = Normal::new(0.0, 1.0).unwrap();
    Matrix::from_fn(rows, cols, |_, _| normal.sample(rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, tags};

    fn mlp_spec() -> ModelSpec {
        ModelSpec::mlp(2, 8, 12)
    }

    fn tf_spec() -> ModelSpec {
        ModelSpec::transformer(2, 8, 16, 2, 12, 6)
    }

    fn dense_batch(spec: &ModelSpec, rows: usize, seed: u64) -> Batch {
        let mut rng = stream(seed, tags::TRAIN);
        Batch::Dense {
            inputs: gaussian_inputs(rows, spec.d_model, &mut rng),
            targets: gaussian_inputs(rows, spec.d_model, &mut rng),
        }
    }

    fn token_batch(spec: &ModelSpec, batch: usize, seed: u64) -> Batch {
        let mut rng = stream(seed, tags::TRAIN);
        let seq = spec.seq_len.unwrap();
        let vocab = spec.vocab.unwrap();
        let inputs: Vec<usize> = (0..batch * seq).map(|_| rng.gen_range(0..vocab)).collect();
        let targets: Vec<usize> = (0..batch * seq).map(|_| rng.gen_range(0..vocab)).collect();
        Batch::Tokens { inputs, targets, batch, seq }
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let spec = mlp_spec();
        let a = init_model(&spec, 7).unwrap();
        let b = init_model(&spec, 7).unwrap();
        assert_eq!(a.param_distance(&b), 0.0);
        let c = init_model(&spec, 8).unwrap();
        assert!(a.param_distance(&c) > 0.0);
    }

    #[test]
    fn init_shapes_match_spec() {
        let spec = ModelSpec::mlp(4, 16, 32);
        let m = init_model(&spec, 1).unwrap();
        assert_eq!(m.blocks().len(), 4);
        for b in m.blocks() {
            let w1 = b.mat(MatName::W1).unwrap();
            let w2 = b.mat(MatName::W2).unwrap();
            assert_eq!((w1.rows(), w1.cols()), (32, 16));
            assert_eq!((w2.rows(), w2.cols()), (16, 32));
        }
    }

    #[test]
    fn invalid_spec_is_config_error() {
        let mut spec = mlp_spec();
        spec.n_layers = 0;
        assert!(matches!(init_model(&spec, 1), Err(Error::Config(_))));
        let mut spec = tf_spec();
        spec.n_heads = Some(3); // 8 % 3 != 0
        assert!(matches!(init_model(&spec, 1), Err(Error::Config(_))));
    }

    #[test]
    fn zero_weight_mlp_predicts_zero() {
        let spec = mlp_spec();
        let mut model = init_model(&spec, 3).unwrap();
        for r in model.param_refs() {
            let shape = model.param(r).unwrap();
            let zero = Matrix::zeros(shape.rows(), shape.cols());
            model.set_param(r, zero).unwrap();
        }
        let Batch::Dense { inputs, targets } = dense_batch(&spec, 4, 5) else { unreachable!() };
        let trace =
            forward(&model, &Batch::Dense { inputs, targets: targets.clone() }).unwrap();
        assert_eq!(trace.predictions().unwrap().as_slice().iter().sum::<f64>(), 0.0);
        let expect: f64 = targets.as_slice().iter().map(|t| t * t).sum::<f64>()
            / targets.len() as f64;
        assert!((trace.loss() - expect).abs() < 1e-12);
    }

    #[test]
    fn fresh_transformer_loss_near_uniform_bound() {
        let spec = tf_spec();
        let model = init_model(&spec, 11).unwrap();
        let trace = forward(&model, &token_batch(&spec, 1, 2)).unwrap();
        let bound = (spec.vocab.unwrap() as f64).ln();
        assert!(trace.loss() >= 0.0);
        assert!(trace.loss() <= bound + 2.0, "loss {} vs ln(vocab) {}", trace.loss(), bound);
    }

    #[test]
    fn forward_is_deterministic() {
        let spec = tf_spec();
        let model = init_model(&spec, 13).unwrap();
        let batch = token_batch(&spec, 2, 3);
        let a = forward(&model, &batch).unwrap();
        let b = forward(&model, &batch).unwrap();
        assert_eq!(a.loss(), b.loss());
    }

    #[test]
    fn zero_inputs_give_zero_gradients() {
        let spec = mlp_spec();
        let model = init_model(&spec, 17).unwrap();
        let batch = Batch::Dense {
            inputs: Matrix::zeros(4, spec.d_model),
            targets: Matrix::from_fn(4, spec.d_model, |i, j| (i + j) as f64),
        };
        let trace = forward(&model, &batch).unwrap();
        let grads = backward(&model, &trace, &GradScope::all()).unwrap();
        for r in model.param_refs() {
            let g = grads.get(r).unwrap();
            assert!(g.as_slice().iter().all(|v| *v == 0.0), "{r:?} should be dead");
        }
    }

    #[test]
    fn doubling_loss_doubles_gradients_exactly() {
        for (spec, batch) in [
            (mlp_spec(), dense_batch(&mlp_spec(), 3, 23)),
            (tf_spec(), token_batch(&tf_spec(), 2, 23)),
        ] {
            let model = init_model(&spec, 29).unwrap();
            let trace = forward(&model, &batch).unwrap();
            let g1 = backward_scaled(&model, &trace, &GradScope::all(), 1.0).unwrap();
            let g2 = backward_scaled(&model, &trace, &GradScope::all(), 2.0).unwrap();
            for r in model.param_refs() {
                let a = g1.get(r).unwrap();
                let b = g2.get(r).unwrap();
                for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                    assert_eq!(2.0 * x, *y, "{r:?}");
                }
            }
        }
    }

    #[test]
    fn stale_trace_is_a_state_error() {
        let spec = mlp_spec();
        let mut model = init_model(&spec, 31).unwrap();
        let trace = forward(&model, &dense_batch(&spec, 2, 1)).unwrap();
        let upd = Matrix::zeros(spec.d_hidden, spec.d_model);
        model.apply_update(ParamRef::Block(0, MatName::W1), &upd).unwrap();
        assert!(matches!(
            backward(&model, &trace, &GradScope::all()),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn freezing_a_block_leaves_other_gradients_untouched() {
        for (spec, batch) in [
            (mlp_spec(), dense_batch(&mlp_spec(), 3, 37)),
            (tf_spec(), token_batch(&tf_spec(), 2, 37)),
        ] {
            let model = init_model(&spec, 41).unwrap();
            let trace = forward(&model, &batch).unwrap();
            let full = backward(&model, &trace, &GradScope::all()).unwrap();
            let scope = GradScope::active([1usize].into_iter().collect());
            let masked = backward(&model, &trace, &scope).unwrap();
            assert!(masked.blocks[0].is_none());
            for r in [ParamRef::Embedding, ParamRef::Head] {
                assert_eq!(
                    full.get(r).unwrap().as_slice(),
                    masked.get(r).unwrap().as_slice()
                );
            }
            for (name, _) in model.block(1).mats() {
                let r = ParamRef::Block(1, name);
                assert_eq!(
                    full.get(r).unwrap().as_slice(),
                    masked.get(r).unwrap().as_slice()
                );
            }
        }
    }

    /// Central finite differences against analytic gradients, every matrix.
    fn grad_check(spec: &ModelSpec, batch: &Batch, seed: u64) {
        let mut model = init_model(spec, seed).unwrap();
        let trace = forward(&model, batch).unwrap();
        let grads = backward(&model, &trace, &GradScope::all()).unwrap();
        let h = 1e-5;
        for r in model.param_refs() {
            let g = grads.get(r).unwrap().clone();
            let (rows, cols) = (g.rows(), g.cols());
            let base = model.param(r).unwrap().clone();
            // Probe a bounded sample of entries per matrix to keep runtime sane.
            let total = rows * cols;
            let step = (total / 24).max(1);
            for idx in (0..total).step_by(step) {
                let (i, j) = (idx / cols, idx % cols);
                let mut pert = base.clone();
                pert.set(i, j, base.at(i, j) + h);
                model.set_param(r, pert).unwrap();
                let up = forward(&model, batch).unwrap().loss();
                let mut pert = base.clone();
                pert.set(i, j, base.at(i, j) - h);
                model.set_param(r, pert).unwrap();
                let down = forward(&model, batch).unwrap().loss();
                model.set_param(r, base.clone()).unwrap();
                let numeric = (up - down) / (2.0 * h);
                let analytic = g.at(i, j);
                let tol = 1e-4 * analytic.abs().max(numeric.abs()).max(1e-3);
                assert!(
                    (numeric - analytic).abs() <= tol,
                    "{r:?}[{i},{j}]: analytic {analytic} vs numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences_mlp() {
        let spec = mlp_spec();
        for seed in [1, 2, 3] {
            grad_check(&spec, &dense_batch(&spec, 3, 100 + seed), seed);
        }
    }

    #[test]
    fn gradients_match_finite_differences_transformer() {
        let spec = tf_spec();
        for seed in [1, 2, 3] {
            grad_check(&spec, &token_batch(&spec, 2, 200 + seed), seed);
        }
    }

    #[test]
    fn gradients_match_finite_differences_causal() {
        let mut spec = tf_spec();
        spec.causal = true;
        grad_check(&spec, &token_batch(&spec, 2, 300), 5);
    }

    #[test]
    fn checkpoint_round_trip_restores_parameters() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("model");
        let spec = tf_spec();
        let model = init_model(&spec, 43).unwrap();
        save_checkpoint(&model, &stem).unwrap();
        let loaded = load_checkpoint(&stem).unwrap();
        assert_eq!(loaded.spec(), model.spec());
        // f32 storage: distance equals the rounding error, re-save is exact.
        save_checkpoint(&loaded, &stem).unwrap();
        let again = load_checkpoint(&stem).unwrap();
        assert_eq!(loaded.param_distance(&again), 0.0);
    }

    #[test]
    fn trace_matrix_inputs_have_matching_columns() {
        let spec = tf_spec();
        let model = init_model(&spec, 47).unwrap();
        let trace = forward(&model, &token_batch(&spec, 2, 7)).unwrap();
        for (name, m) in model.block(0).mats() {
            let x = trace.matrix_input(0, name).unwrap();
            assert_eq!(x.cols(), m.cols(), "{name:?} input width");
        }
    }
}
