//! Adaptive layers: a one-hidden-layer ReLU network whose flat parameter
//! vector is composed as `theta = B ⊙ alpha + A`.
//!
//! `A` (local adaptive parameters) and `alpha` (attention over the base)
//! are trainable. `B` (base parameters dispatched by the server) is frozen
//! during local training. Flat layout, all row-major:
//!
//! | block | shape                     |
//! |-------|---------------------------|
//! | `W1`  | `proto_dim × hidden_dim`  |
//! | `b1`  | `hidden_dim`              |
//! | `W2`  | `hidden_dim × num_labels` |
//!
//! The classifier has no bias.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Matrix, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShapes {
    pub proto_dim: usize,
    pub hidden_dim: usize,
    pub num_labels: usize,
}

impl LayerShapes {
    pub fn new(proto_dim: usize, hidden_dim: usize, num_labels: usize) -> Result<Self> {
        if proto_dim == 0 || hidden_dim == 0 || num_labels == 0 {
            return Err(Error::InvalidInput(format!(
                "layer shapes must be positive: {proto_dim}/{hidden_dim}/{num_labels}"
            )));
        }
        Ok(LayerShapes {
            proto_dim,
            hidden_dim,
            num_labels,
        })
    }

    pub fn w1_len(&self) -> usize {
        self.proto_dim * self.hidden_dim
    }

    pub fn w2_len(&self) -> usize {
        self.hidden_dim * self.num_labels
    }

    pub fn param_count(&self) -> usize {
        self.w1_len() + self.hidden_dim + self.w2_len()
    }

    fn b1_offset(&self) -> usize {
        self.w1_len()
    }

    fn w2_offset(&self) -> usize {
        self.w1_len() + self.hidden_dim
    }
}

/// Flat parameters in the layout documented at module level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        ParamVector(vec![0.0; len])
    }

    pub fn filled(len: usize, value: f64) -> Self {
        ParamVector(vec![value; len])
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        ParamVector(values)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn w1<'a>(&'a self, s: &LayerShapes) -> &'a [f64] {
        &self.0[..s.w1_len()]
    }

    pub fn b1<'a>(&'a self, s: &LayerShapes) -> &'a [f64] {
        &self.0[s.b1_offset()..s.w2_offset()]
    }

    pub fn w2<'a>(&'a self, s: &LayerShapes) -> &'a [f64] {
        &self.0[s.w2_offset()..]
    }
}

/// The `(A, B, alpha)` decomposition plus the round-start anchors used by
/// the tying penalty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveParams {
    pub a: ParamVector,
    pub b: ParamVector,
    pub alpha: ParamVector,
    pub a_anchor: ParamVector,
    pub alpha_anchor: ParamVector,
}

impl AdaptiveParams {
    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    fn check(&self) -> Result<()> {
        let n = self.a.len();
        for v in [&self.b, &self.alpha, &self.a_anchor, &self.alpha_anchor] {
            if v.len() != n {
                return Err(Error::dim(n, v.len()));
            }
        }
        Ok(())
    }

    /// Takes the tying reference for the coming round.
    pub fn snapshot_anchors(&mut self) {
        self.a_anchor = self.a.clone();
        self.alpha_anchor = self.alpha.clone();
    }

    /// Installs freshly dispatched base parameters.
    pub fn install_base(&mut self, base: ParamVector) -> Result<()> {
        if base.len() != self.a.len() {
            return Err(Error::dim(self.a.len(), base.len()));
        }
        self.b = base;
        Ok(())
    }
}

/// He-normal `A` (per-block fan-in), `alpha = 1`, `B = 0`.
pub fn init_adaptive(shapes: &LayerShapes, seed: u64) -> AdaptiveParams {
    let mut rng = SeededRng::new(seed);
    let w1_scale = (2.0 / shapes.proto_dim as f64).sqrt();
    let w2_scale = (2.0 / shapes.hidden_dim as f64).sqrt();
    let mut a = Vec::with_capacity(shapes.param_count());
    a.extend((0..shapes.w1_len()).map(|_| w1_scale * rng.normal()));
    // b1 feeds the same units as W1 and shares its fan-in.
    a.extend((0..shapes.hidden_dim).map(|_| w1_scale * rng.normal()));
    a.extend((0..shapes.w2_len()).map(|_| w2_scale * rng.normal()));
    let a = ParamVector(a);
    let alpha = ParamVector::filled(a.len(), 1.0);
    AdaptiveParams {
        b: ParamVector::zeros(a.len()),
        a_anchor: a.clone(),
        alpha_anchor: alpha.clone(),
        a,
        alpha,
    }
}

/// Starts from `base` as frozen knowledge: `A = 0`, `alpha = 1`, so the
/// composed parameters equal `base`.
pub fn from_base(base: ParamVector) -> AdaptiveParams {
    let a = ParamVector::zeros(base.len());
    let alpha = ParamVector::filled(base.len(), 1.0);
    AdaptiveParams {
        a_anchor: a.clone(),
        alpha_anchor: alpha.clone(),
        a,
        b: base,
        alpha,
    }
}

/// `theta = B ⊙ alpha + A`.
pub fn compose(p: &AdaptiveParams) -> Result<ParamVector> {
    p.check()?;
    Ok(ParamVector(
        p.b.0
            .iter()
            .zip(&p.alpha.0)
            .zip(&p.a.0)
            .map(|((b, al), a)| b * al + a)
            .collect(),
    ))
}

/// Intermediate activations of one batch.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub inputs: Matrix,
    pub pre_activations: Matrix,
    /// ReLU outputs; these are the retrieval embeddings.
    pub hidden: Matrix,
    pub logits: Matrix,
}

fn check_theta(theta: &ParamVector, shapes: &LayerShapes, inputs: &Matrix) -> Result<()> {
    if theta.len() != shapes.param_count() {
        return Err(Error::dim(shapes.param_count(), theta.len()));
    }
    if inputs.cols() != shapes.proto_dim {
        return Err(Error::dim(shapes.proto_dim, inputs.cols()));
    }
    Ok(())
}

fn hidden_layer(theta: &ParamVector, shapes: &LayerShapes, inputs: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let (d, h) = (shapes.proto_dim, shapes.hidden_dim);
    let w1 = theta.w1(shapes);
    let b1 = theta.b1(shapes);
    let n = inputs.rows();
    let mut pre = Vec::with_capacity(n * h);
    for i in 0..n {
        pre.extend_from_slice(b1);
        let row = &mut pre[i * h..(i + 1) * h];
        for (k, &x) in inputs.row(i).iter().enumerate().take(d) {
            for (p, &w) in row.iter_mut().zip(&w1[k * h..(k + 1) * h]) {
                *p += x * w;
            }
        }
    }
    let hidden = pre.iter().map(|&v| v.max(0.0)).collect();
    (pre, hidden)
}

/// `hidden = relu(W1ᵀ x + b1)`, `logits = W2ᵀ hidden` for every row `x`.
pub fn forward(theta: &ParamVector, shapes: &LayerShapes, inputs: &Matrix) -> Result<ForwardCache> {
    check_theta(theta, shapes, inputs)?;
    let (h, l) = (shapes.hidden_dim, shapes.num_labels);
    let n = inputs.rows();
    let (pre, hidden) = hidden_layer(theta, shapes, inputs);
    let w2 = theta.w2(shapes);
    let mut logits = vec![0.0; n * l];
    for i in 0..n {
        let out = &mut logits[i * l..(i + 1) * l];
        for (j, &hv) in hidden[i * h..(i + 1) * h].iter().enumerate() {
            if hv == 0.0 {
                continue;
            }
            for (o, &w) in out.iter_mut().zip(&w2[j * l..(j + 1) * l]) {
                *o += hv * w;
            }
        }
    }
    Ok(ForwardCache {
        inputs: inputs.clone(),
        pre_activations: Matrix::from_trusted(n, h, pre),
        hidden: Matrix::from_trusted(n, h, hidden),
        logits: Matrix::from_trusted(n, l, logits),
    })
}

/// Hidden embeddings only.
pub fn embed(theta: &ParamVector, shapes: &LayerShapes, inputs: &Matrix) -> Result<Matrix> {
    check_theta(theta, shapes, inputs)?;
    let (_, hidden) = hidden_layer(theta, shapes, inputs);
    Ok(Matrix::from_trusted(inputs.rows(), shapes.hidden_dim, hidden))
}

#[derive(Debug, Clone)]
pub struct LossAndGrad {
    pub loss: f64,
    pub grad_a: ParamVector,
    pub grad_alpha: ParamVector,
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean cross-entropy plus the tying penalty
/// `tie_weight * (|A - A_anchor|_1 + |alpha - alpha_anchor|_1) / param_count`,
/// with gradients for `A` and `alpha` back-propagated through [`compose`].
pub fn loss_and_grad(
    p: &AdaptiveParams,
    shapes: &LayerShapes,
    inputs: &Matrix,
    labels: &[usize],
    tie_weight: f64,
) -> Result<LossAndGrad> {
    if labels.len() != inputs.rows() {
        return Err(Error::dim(inputs.rows(), labels.len()));
    }
    if let Some(&label) = labels.iter().find(|&&y| y >= shapes.num_labels) {
        return Err(Error::InvalidLabel {
            label,
            num_labels: shapes.num_labels,
        });
    }
    let theta = compose(p)?;
    let cache = forward(&theta, shapes, inputs)?;
    let (d, h, l) = (shapes.proto_dim, shapes.hidden_dim, shapes.num_labels);
    let n = inputs.rows();
    let inv_n = 1.0 / n as f64;

    // Cross-entropy via log-sum-exp; dlogits = (softmax - onehot) / n.
    let mut ce = 0.0;
    let mut dlogits = vec![0.0; n * l];
    for i in 0..n {
        let z = cache.logits.row(i);
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        ce += lse - z[labels[i]];
        let dz = &mut dlogits[i * l..(i + 1) * l];
        for (k, g) in dz.iter_mut().enumerate() {
            *g = (z[k] - lse).exp() * inv_n;
        }
        dz[labels[i]] -= inv_n;
    }
    ce *= inv_n;

    let w2 = theta.w2(shapes);
    let mut dtheta = vec![0.0; shapes.param_count()];
    let (dw1_b1, dw2) = dtheta.split_at_mut(shapes.w2_offset());
    let (dw1, db1) = dw1_b1.split_at_mut(shapes.w1_len());
    let mut dpre = vec![0.0; h];
    for i in 0..n {
        let hid = cache.hidden.row(i);
        let pre = cache.pre_activations.row(i);
        let dz = &dlogits[i * l..(i + 1) * l];
        for j in 0..h {
            let w2_row = &w2[j * l..(j + 1) * l];
            if hid[j] != 0.0 {
                for (g, &dzk) in dw2[j * l..(j + 1) * l].iter_mut().zip(dz) {
                    *g += hid[j] * dzk;
                }
            }
            dpre[j] = if pre[j] > 0.0 {
                w2_row.iter().zip(dz).map(|(w, g)| w * g).sum()
            } else {
                0.0
            };
        }
        for (k, &x) in inputs.row(i).iter().enumerate().take(d) {
            if x == 0.0 {
                continue;
            }
            for (g, &dp) in dw1[k * h..(k + 1) * h].iter_mut().zip(&dpre) {
                *g += x * dp;
            }
        }
        for (g, &dp) in db1.iter_mut().zip(&dpre) {
            *g += dp;
        }
    }

    let count = shapes.param_count() as f64;
    let tie_scale = tie_weight / count;
    let mut tie = 0.0;
    let mut grad_a = Vec::with_capacity(dtheta.len());
    let mut grad_alpha = Vec::with_capacity(dtheta.len());
    for idx in 0..dtheta.len() {
        let da = p.a.0[idx] - p.a_anchor.0[idx];
        let dal = p.alpha.0[idx] - p.alpha_anchor.0[idx];
        tie += da.abs() + dal.abs();
        grad_a.push(dtheta[idx] + tie_scale * sign(da));
        grad_alpha.push(dtheta[idx] * p.b.0[idx] + tie_scale * sign(dal));
    }

    Ok(LossAndGrad {
        loss: ce + tie_scale * tie,
        grad_a: ParamVector(grad_a),
        grad_alpha: ParamVector(grad_alpha),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// First and second moments for `A` and `alpha`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    m_a: Vec<f64>,
    v_a: Vec<f64>,
    m_alpha: Vec<f64>,
    v_alpha: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            step: 0,
            m_a: vec![0.0; len],
            v_a: vec![0.0; len],
            m_alpha: vec![0.0; len],
            v_alpha: vec![0.0; len],
        }
    }
}

fn adamw_update(
    params: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    cfg: &AdamConfig,
    bias1: f64,
    bias2: f64,
) {
    for i in 0..params.len() {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / bias1;
        let v_hat = v[i] / bias2;
        params[i] -= cfg.lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * params[i]);
    }
}

/// One AdamW step on `A`, and on `alpha` unless `grad_alpha` is `None`
/// (attention frozen). `B` and the anchors are never touched.
pub fn adam_step(
    p: &mut AdaptiveParams,
    grad_a: &ParamVector,
    grad_alpha: Option<&ParamVector>,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    let n = p.len();
    if grad_a.len() != n || state.m_a.len() != n {
        return Err(Error::dim(n, grad_a.len().min(state.m_a.len())));
    }
    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - cfg.beta1.powi(t);
    let bias2 = 1.0 - cfg.beta2.powi(t);
    adamw_update(&mut p.a.0, &grad_a.0, &mut state.m_a, &mut state.v_a, cfg, bias1, bias2);
    if let Some(ga) = grad_alpha {
        if ga.len() != n {
            return Err(Error::dim(n, ga.len()));
        }
        adamw_update(
            &mut p.alpha.0,
            &ga.0,
            &mut state.m_alpha,
            &mut state.v_alpha,
            cfg,
            bias1,
            bias2,
        );
    }
    Ok(())
}

// Checkpoint layout (little-endian):
//   magic      8 bytes  "FSTLPRM\0"
//   version    u32      1
//   proto_dim  u64
//   hidden_dim u64
//   num_labels u64
//   count      u32      number of vectors that follow (5)
//   vectors    count × param_count f64, order A, B, alpha, A_anchor, alpha_anchor
const MAGIC: &[u8; 8] = b"FSTLPRM\0";
const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(mut w: W, shapes: &LayerShapes, p: &AdaptiveParams) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for dim in [shapes.proto_dim, shapes.hidden_dim, shapes.num_labels] {
        w.write_all(&(dim as u64).to_le_bytes())?;
    }
    let vectors = [&p.a, &p.b, &p.alpha, &p.a_anchor, &p.alpha_anchor];
    w.write_all(&(vectors.len() as u32).to_le_bytes())?;
    for v in vectors {
        for x in v.as_slice() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()
}

fn bad_checkpoint(msg: impl Into<String>) -> Error {
    Error::Parse {
        line: 0,
        message: msg.into(),
    }
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(LayerShapes, AdaptiveParams)> {
    let io = |e: std::io::Error| bad_checkpoint(format!("truncated checkpoint: {e}"));
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(bad_checkpoint("bad checkpoint magic"));
    }
    let mut u32buf = [0u8; 4];
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u32buf).map_err(io)?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(bad_checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let mut dims = [0usize; 3];
    for d in dims.iter_mut() {
        r.read_exact(&mut u64buf).map_err(io)?;
        *d = u64::from_le_bytes(u64buf) as usize;
    }
    let shapes = LayerShapes::new(dims[0], dims[1], dims[2])?;
    r.read_exact(&mut u32buf).map_err(io)?;
    let count = u32::from_le_bytes(u32buf);
    if count != 5 {
        return Err(bad_checkpoint(format!("expected 5 vectors, found {count}")));
    }
    let n = shapes.param_count();
    let mut read_vec = || -> Result<ParamVector> {
        let mut v = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut u64buf).map_err(io)?;
            v.push(f64::from_le_bytes(u64buf));
        }
        Ok(ParamVector(v))
    };
    let params = AdaptiveParams {
        a: read_vec()?,
        b: read_vec()?,
        alpha: read_vec()?,
        a_anchor: read_vec()?,
        alpha_anchor: read_vec()?,
    };
    Ok((shapes, params))
}

pub fn save_checkpoint(path: &Path, shapes: &LayerShapes, p: &AdaptiveParams) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(std::io::BufWriter::new(file), shapes, p).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(LayerShapes, AdaptiveParams)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests;
