//! Rotation + two-layer GCN auto-encoder with a dot-product decoder.
//!
//! Forward pass for one concept matrix `X` (`|V| × d`):
//!
//! ```text
//! X_r = X R
//! H1  = ReLU(Â X_r W0 + b0)
//! Z   = Â H1 W1 + b1
//! S   = Z Zᵀ                    (edge logits)
//! ```
//!
//! The loss is `L_p + λ_o ‖RRᵀ − I‖²_F + λ_s Σ_j ‖W0[j,:]‖₂`. Only the first
//! two terms are differentiated; the row-sparsity term is handled by the
//! proximal step in [`crate::optim`].

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::linalg::{frobenius_sq, row_norms, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub h1: usize,
    pub h2: usize,
    pub lambda_o: f64,
    pub lambda_s: f64,
    pub rotate: bool,
    pub use_bias: bool,
}

impl ModelConfig {
    /// Rotating model with 10/10 hidden units and biases.
    pub fn new(d: usize) -> Self {
        ModelConfig {
            d,
            h1: 10,
            h2: 10,
            lambda_o: 0.0,
            lambda_s: 0.0,
            rotate: true,
            use_bias: true,
        }
    }

    /// Plain auto-encoder on the unrotated space, no sparsity.
    pub fn baseline(d: usize) -> Self {
        ModelConfig {
            rotate: false,
            ..ModelConfig::new(d)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.h1 == 0 || self.h2 == 0 || self.d < self.h1 {
            return Err(Error::InvalidInput(format!(
                "need d >= h1 >= 1 and h2 >= 1, got d={} h1={} h2={}",
                self.d, self.h1, self.h2
            )));
        }
        if !(self.lambda_o >= 0.0 && self.lambda_s >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "penalty weights must be non-negative, got λ_o={} λ_s={}",
                self.lambda_o, self.lambda_s
            )));
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        let rotation = if self.rotate { self.d * self.d } else { 0 };
        let bias = if self.use_bias { self.h1 + self.h2 } else { 0 };
        rotation + self.d * self.h1 + self.h1 * self.h2 + bias
    }
}

/// Trainable parameters. When rotation is off, `r` stays the identity and is
/// never updated; when biases are off, `b0`/`b1` stay zero.
#[derive(Debug, Clone, PartialEq)]
pub struct RotationGAE {
    pub d: usize,
    pub h1: usize,
    pub h2: usize,
    pub rotate: bool,
    pub use_bias: bool,
    pub r: Matrix,
    pub w0: Matrix,
    pub b0: Vec<f64>,
    pub w1: Matrix,
    pub b1: Vec<f64>,
}

impl RotationGAE {
    /// Identity rotation, Glorot-uniform weights, fan-in-scaled uniform biases.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ModelConfig { d, h1, h2, .. } = *config;
        let w0 = glorot(&mut rng, d, h1);
        let w1 = glorot(&mut rng, h1, h2);
        let (b0, b1) = if config.use_bias {
            (
                uniform_vec(&mut rng, h1, 1.0 / (d as f64).sqrt()),
                uniform_vec(&mut rng, h2, 1.0 / (h1 as f64).sqrt()),
            )
        } else {
            (vec![0.0; h1], vec![0.0; h2])
        };
        Ok(RotationGAE {
            d,
            h1,
            h2,
            rotate: config.rotate,
            use_bias: config.use_bias,
            r: Matrix::identity(d),
            w0,
            b0,
            w1,
            b1,
        })
    }

    /// All-zero weights and biases with identity rotation.
    pub fn zeros(config: &ModelConfig) -> Self {
        RotationGAE {
            d: config.d,
            h1: config.h1,
            h2: config.h2,
            rotate: config.rotate,
            use_bias: config.use_bias,
            r: Matrix::identity(config.d),
            w0: Matrix::zeros(config.d, config.h1),
            b0: vec![0.0; config.h1],
            w1: Matrix::zeros(config.h1, config.h2),
            b1: vec![0.0; config.h2],
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.architecture().parameter_count()
    }

    /// Config carrying this model's shape and flags (penalty weights zero).
    pub fn architecture(&self) -> ModelConfig {
        ModelConfig {
            d: self.d,
            h1: self.h1,
            h2: self.h2,
            lambda_o: 0.0,
            lambda_s: 0.0,
            rotate: self.rotate,
            use_bias: self.use_bias,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.r.is_finite()
            && self.w0.is_finite()
            && self.w1.is_finite()
            && self.b0.iter().chain(&self.b1).all(|x| x.is_finite())
    }

    /// Parameter tensors in the fixed order R, W0, b0, W1, b1.
    pub fn tensors_mut(&mut self) -> [&mut [f64]; 5] {
        [
            self.r.as_mut_slice(),
            self.w0.as_mut_slice(),
            &mut self.b0,
            self.w1.as_mut_slice(),
            &mut self.b1,
        ]
    }

    pub fn tensors(&self) -> [&[f64]; 5] {
        [
            self.r.as_slice(),
            self.w0.as_slice(),
            &self.b0,
            self.w1.as_slice(),
            &self.b1,
        ]
    }
}

fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Matrix {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = uniform_vec(rng, fan_in * fan_out, limit);
    Matrix::from_vec(fan_in, fan_out, data).expect("finite init")
}

fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, limit: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-limit..limit)).collect()
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `Â X`.
    pub ax: Matrix,
    /// `Â X R` (equal to `ax` when rotation is off).
    pub axr: Matrix,
    /// Layer-1 pre-activation.
    pub pre1: Matrix,
    pub h1: Matrix,
    /// `Â H1`.
    pub ah1: Matrix,
    pub z: Matrix,
    pub logits: Matrix,
}

/// Runs the encoder and decoder for one concept matrix.
pub fn forward(model: &RotationGAE, a_norm: &Matrix, x: &Matrix) -> Result<(Matrix, ForwardCache)> {
    let n = a_norm.rows();
    if a_norm.cols() != n || x.rows() != n || x.cols() != model.d {
        return Err(Error::Dimension(format!(
            "adjacency {}x{} and features {}x{} for a model with d={}",
            a_norm.rows(),
            a_norm.cols(),
            x.rows(),
            x.cols(),
            model.d
        )));
    }
    let ax = a_norm.matmul(x)?;
    forward_propagated(model, a_norm, ax)
}

/// Forward pass from precomputed `Â X`, which is fixed per concept for a
/// given message-passing graph.
pub fn forward_propagated(
    model: &RotationGAE,
    a_norm: &Matrix,
    ax: Matrix,
) -> Result<(Matrix, ForwardCache)> {
    let axr = if model.rotate {
        ax.matmul(&model.r)?
    } else {
        ax.clone()
    };
    let mut pre1 = axr.matmul(&model.w0)?;
    pre1.add_row_vector(&model.b0)?;
    let h1 = pre1.map(|v| v.max(0.0));
    let ah1 = a_norm.matmul(&h1)?;
    let mut z = ah1.matmul(&model.w1)?;
    z.add_row_vector(&model.b1)?;
    let logits = z.matmul_t(&z)?;
    let cache = ForwardCache {
        ax,
        axr,
        pre1,
        h1,
        ah1,
        z,
        logits: logits.clone(),
    };
    Ok((logits, cache))
}

/// Dense link-prediction target over all ordered off-diagonal pairs.
#[derive(Debug, Clone)]
pub struct LinkTarget {
    n: usize,
    adjacency: Vec<bool>,
    positive_pairs: usize,
    /// Weight applied to the loss of positive entries.
    pub pos_weight: f64,
}

impl LinkTarget {
    /// Positives are the edges of `g`, re-weighted by negatives/positives.
    pub fn from_graph(g: &Graph) -> Self {
        let n = g.node_count();
        let mut adjacency = vec![false; n * n];
        for (a, b) in g.edges() {
            adjacency[a * n + b] = true;
            adjacency[b * n + a] = true;
        }
        let positive_pairs = 2 * g.edge_count();
        let total = n * n - n;
        let pos_weight = if positive_pairs > 0 {
            (total - positive_pairs) as f64 / positive_pairs as f64
        } else {
            1.0
        };
        LinkTarget {
            n,
            adjacency,
            positive_pairs,
            pos_weight,
        }
    }

    pub fn unweighted(g: &Graph) -> Self {
        LinkTarget {
            pos_weight: 1.0,
            ..LinkTarget::from_graph(g)
        }
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn positive_pairs(&self) -> usize {
        self.positive_pairs
    }

    #[inline]
    pub fn is_edge(&self, i: usize, j: usize) -> bool {
        self.adjacency[i * self.n + j]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct LossBreakdown {
    pub prediction: f64,
    pub orthogonality: f64,
    pub sparsity: f64,
    pub total: f64,
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Weighted binary cross-entropy on logits, mean over ordered off-diagonal pairs.
pub fn prediction_loss(logits: &Matrix, target: &LinkTarget) -> Result<f64> {
    let n = target.n;
    if logits.shape() != (n, n) {
        return Err(Error::Dimension(format!(
            "logits {}x{} for {n} nodes",
            logits.rows(),
            logits.cols()
        )));
    }
    if n < 2 {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for i in 0..n {
        let row = logits.row(i);
        for (j, &s) in row.iter().enumerate() {
            if i == j {
                continue;
            }
            sum += if target.is_edge(i, j) {
                target.pos_weight * softplus(-s)
            } else {
                softplus(s)
            };
        }
    }
    Ok(sum / (n * n - n) as f64)
}

/// `‖RRᵀ − I‖²_F`.
pub fn orthogonality_penalty(r: &Matrix) -> f64 {
    let rrt = r.matmul_t(r).expect("square");
    frobenius_sq(&rrt.sub(&Matrix::identity(r.rows())).expect("square"))
}

/// `Σ_j ‖W0[j,:]‖₂`.
pub fn sparsity_penalty(w0: &Matrix) -> f64 {
    row_norms(w0).iter().sum()
}

pub fn loss(
    logits: &Matrix,
    target: &LinkTarget,
    model: &RotationGAE,
    config: &ModelConfig,
) -> Result<LossBreakdown> {
    let prediction = prediction_loss(logits, target)?;
    let orthogonality = if model.rotate {
        orthogonality_penalty(&model.r)
    } else {
        0.0
    };
    let sparsity = sparsity_penalty(&model.w0);
    Ok(LossBreakdown {
        prediction,
        orthogonality,
        sparsity,
        total: prediction + config.lambda_o * orthogonality + config.lambda_s * sparsity,
    })
}

/// Gradients with the same layout as [`RotationGAE`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub r: Matrix,
    pub w0: Matrix,
    pub b0: Vec<f64>,
    pub w1: Matrix,
    pub b1: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(model: &RotationGAE) -> Self {
        Gradients {
            r: Matrix::zeros(model.d, model.d),
            w0: Matrix::zeros(model.d, model.h1),
            b0: vec![0.0; model.h1],
            w1: Matrix::zeros(model.h1, model.h2),
            b1: vec![0.0; model.h2],
        }
    }

    pub fn tensors(&self) -> [&[f64]; 5] {
        [
            self.r.as_slice(),
            self.w0.as_slice(),
            &self.b0,
            self.w1.as_slice(),
            &self.b1,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 5] {
        [
            self.r.as_mut_slice(),
            self.w0.as_mut_slice(),
            &mut self.b0,
            self.w1.as_mut_slice(),
            &mut self.b1,
        ]
    }

    /// `self += s · other`.
    pub fn add_scaled(&mut self, s: f64, other: &Gradients) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            crate::linalg::axpy(s, b, a);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|x| x.is_finite()))
    }
}

/// `∂‖RRᵀ − I‖²_F / ∂R = 4 (RRᵀ − I) R`.
pub fn orthogonality_gradient(r: &Matrix) -> Matrix {
    let mut e = r.matmul_t(r).expect("square");
    for i in 0..r.rows() {
        e[(i, i)] -= 1.0;
    }
    e.matmul(r).expect("square").scale(4.0)
}

/// Gradients of `L_p` alone.
pub fn prediction_gradients(
    cache: &ForwardCache,
    a_norm: &Matrix,
    target: &LinkTarget,
    model: &RotationGAE,
) -> Result<Gradients> {
    let n = target.n;
    let logits = &cache.logits;
    if logits.shape() != (n, n) || a_norm.shape() != (n, n) {
        return Err(Error::Dimension(format!(
            "cache for {} nodes, target for {n}",
            logits.rows()
        )));
    }
    let mut grads = Gradients::zeros_like(model);
    if n < 2 {
        return Ok(grads);
    }
    let inv_m = 1.0 / (n * n - n) as f64;

    // dS is symmetric because S is and the target is; dZ = (dS + dSᵀ) Z = 2 dS Z.
    let mut ds = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let s = logits[(i, j)];
            ds[(i, j)] = if target.is_edge(i, j) {
                target.pos_weight * (sigmoid(s) - 1.0) * inv_m
            } else {
                sigmoid(s) * inv_m
            };
        }
    }
    let dz = ds.matmul(&cache.z)?.scale(2.0);

    if model.use_bias {
        grads.b1 = dz.column_sums();
    }
    grads.w1 = cache.ah1.t_matmul(&dz)?;
    // Â is symmetric.
    let dh1 = a_norm.matmul(&dz.matmul_t(&model.w1)?)?;
    let mut dpre1 = dh1;
    for (g, &p) in dpre1.as_mut_slice().iter_mut().zip(cache.pre1.as_slice()) {
        if p <= 0.0 {
            *g = 0.0;
        }
    }
    if model.use_bias {
        grads.b0 = dpre1.column_sums();
    }
    grads.w0 = cache.axr.t_matmul(&dpre1)?;
    if model.rotate {
        // ∂/∂R of tr(Gᵀ (ÂX) R W0) = (ÂX)ᵀ G W0ᵀ.
        grads.r = cache.ax.t_matmul(&dpre1.matmul_t(&model.w0)?)?;
    }
    Ok(grads)
}

/// Gradients of `L_p + λ_o L_o`. The sparsity term is never differentiated.
pub fn backward(
    cache: &ForwardCache,
    a_norm: &Matrix,
    target: &LinkTarget,
    model: &RotationGAE,
    config: &ModelConfig,
) -> Result<Gradients> {
    let mut grads = prediction_gradients(cache, a_norm, target, model)?;
    if model.rotate && config.lambda_o != 0.0 {
        grads
            .r
            .add_scaled(config.lambda_o, &orthogonality_gradient(&model.r))?;
    }
    Ok(grads)
}

const MAGIC: &[u8; 7] = b"BIAXIS1";
const FLAG_ROTATE: u32 = 1;
const FLAG_BIAS: u32 = 2;

/// Serializes parameters: magic, `d h1 h2 flags` as u32 LE, then
/// R, W0, b0, W1, b1 as f64 LE row-major.
pub fn checkpoint_bytes(model: &RotationGAE) -> Vec<u8> {
    let mut out = Vec::with_capacity(7 + 16 + 8 * model.parameter_count());
    out.extend_from_slice(MAGIC);
    let flags = ((model.rotate as u32) * FLAG_ROTATE) | ((model.use_bias as u32) * FLAG_BIAS);
    for v in [model.d as u32, model.h1 as u32, model.h2 as u32, flags] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for t in model.tensors() {
        for x in t {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn model_from_checkpoint_bytes(bytes: &[u8], origin: &Path) -> Result<RotationGAE> {
    let mut cursor = bytes;
    let mut magic = [0u8; 7];
    cursor
        .read_exact(&mut magic)
        .map_err(|_| Error::format(origin, "truncated header"))?;
    if &magic != MAGIC {
        return Err(Error::format(origin, "not a BIAXIS1 checkpoint"));
    }
    let mut header = [0u32; 4];
    for h in header.iter_mut() {
        let mut b = [0u8; 4];
        cursor
            .read_exact(&mut b)
            .map_err(|_| Error::format(origin, "truncated header"))?;
        *h = u32::from_le_bytes(b);
    }
    let [d, h1, h2, flags] = header.map(|v| v as usize);
    if flags & !3 != 0 {
        return Err(Error::format(origin, format!("unknown flags {flags:#x}")));
    }
    let config = ModelConfig {
        d,
        h1,
        h2,
        lambda_o: 0.0,
        lambda_s: 0.0,
        rotate: flags as u32 & FLAG_ROTATE != 0,
        use_bias: flags as u32 & FLAG_BIAS != 0,
    };
    config
        .validate()
        .map_err(|e| Error::format(origin, e.to_string()))?;
    let expected = 8 * (d * d + d * h1 + h1 + h1 * h2 + h2);
    if cursor.len() != expected {
        return Err(Error::format(
            origin,
            format!(
                "expected {expected} parameter bytes, found {}",
                cursor.len()
            ),
        ));
    }
    let mut model = RotationGAE::zeros(&config);
    for t in model.tensors_mut() {
        for x in t.iter_mut() {
            let (head, rest) = cursor.split_at(8);
            *x = f64::from_le_bytes(head.try_into().expect("8 bytes"));
            cursor = rest;
        }
    }
    if !model.is_finite() {
        return Err(Error::format(origin, "non-finite parameter"));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &RotationGAE, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&checkpoint_bytes(model))
        .map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<RotationGAE> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_checkpoint_bytes(&bytes, path)
}
