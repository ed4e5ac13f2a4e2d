//! Attentive regularization of related base-class prototypes.
//!
//! For one novel class with query feature `f` (the mean of its support
//! shots) and the prototypes `P` (`β × d`) of its semantically related base
//! classes:
//!
//! ```text
//! q = f Wq            K = P Wk            V = P Wv
//! w = softmax(q Kᵀ / √d)                  (β attention weights)
//! A = w V                                 (1 × d calibration amplitude)
//! P̂ = P + relu(A Wp)                      (broadcast over the β rows)
//! E = sigmoid(relu(P̂ W1 + b1) W2 + b2)    (row-wise squeeze-excite gate)
//! P̄ = E ⊙ P̂ + P
//! ```
//!
//! Forward passes return caches so the backward passes can produce exact
//! gradients for every trainable tensor.

use serde::{Deserialize, Serialize};

use crate::episodes_io::FeatureStore;
use crate::error::{AfrError, Result};
use crate::numerics::{relu, sigmoid, softmax_in_place, Matrix, Rng};
use crate::semantics::SelectionResult;

pub const DEFAULT_REDUCTION: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    pub class_names: Vec<String>,
    pub vectors: Matrix,
}

/// Mean feature of each listed class, rows in the order given.
pub fn compute_prototypes<S: AsRef<str>>(store: &FeatureStore, classes: &[S]) -> Result<PrototypeSet> {
    let d = store.dim();
    let mut vectors = Matrix::zeros(classes.len(), d);
    for (row, class) in classes.iter().enumerate() {
        let class = class.as_ref();
        let idx = store
            .indices_of(class)
            .map_err(|_| AfrError::data(format!("base class `{class}` has no features")))?;
        let out = vectors.row_mut(row);
        for &i in idx {
            for (o, &v) in out.iter_mut().zip(store.feature(i)) {
                *o += v;
            }
        }
        let n = idx.len() as f64;
        out.iter_mut().for_each(|o| *o /= n);
    }
    Ok(PrototypeSet {
        class_names: classes.iter().map(|c| c.as_ref().to_string()).collect(),
        vectors,
    })
}

fn glorot(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let mut m = Matrix::zeros(rows, cols);
    m.data_mut()
        .iter_mut()
        .for_each(|v| *v = rng.uniform(-bound, bound));
    m
}

/// Projections of the instance attention block, all `d × d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceAttentionParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_p: Matrix,
}

impl InstanceAttentionParams {
    pub fn zeros(dim: usize) -> Self {
        Self {
            w_q: Matrix::zeros(dim, dim),
            w_k: Matrix::zeros(dim, dim),
            w_v: Matrix::zeros(dim, dim),
            w_p: Matrix::zeros(dim, dim),
        }
    }

    pub fn init(dim: usize, rng: &mut Rng) -> Self {
        Self {
            w_q: glorot(dim, dim, rng),
            w_k: glorot(dim, dim, rng),
            w_v: glorot(dim, dim, rng),
            w_p: glorot(dim, dim, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.w_q.rows()
    }

    fn check(&self, dim: usize) -> Result<()> {
        for (name, m) in self.blocks() {
            if m.shape() != (dim, dim) {
                return Err(AfrError::shape(format!(
                    "{name} is {}x{}, expected {dim}x{dim}",
                    m.rows(),
                    m.cols()
                )));
            }
        }
        Ok(())
    }

    pub fn blocks(&self) -> [(&'static str, &Matrix); 4] {
        [
            ("W_q", &self.w_q),
            ("W_k", &self.w_k),
            ("W_v", &self.w_v),
            ("W_p", &self.w_p),
        ]
    }

    pub fn blocks_mut(&mut self) -> [(&'static str, &mut Matrix); 4] {
        [
            ("W_q", &mut self.w_q),
            ("W_k", &mut self.w_k),
            ("W_v", &mut self.w_v),
            ("W_p", &mut self.w_p),
        ]
    }
}

/// Squeeze-excite gate: `d → d/r → d` with biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelAttentionParams {
    pub w_fc1: Matrix,
    pub b_fc1: Vec<f64>,
    pub w_fc2: Matrix,
    pub b_fc2: Vec<f64>,
    pub reduction: usize,
}

impl ChannelAttentionParams {
    fn hidden_dim(dim: usize, reduction: usize) -> Result<usize> {
        if reduction < 2 || !dim.is_multiple_of(reduction) {
            return Err(AfrError::config(format!(
                "reduction {reduction} must be >= 2 and divide dim {dim}"
            )));
        }
        Ok(dim / reduction)
    }

    pub fn zeros(dim: usize, reduction: usize) -> Result<Self> {
        let h = Self::hidden_dim(dim, reduction)?;
        Ok(Self {
            w_fc1: Matrix::zeros(dim, h),
            b_fc1: vec![0.0; h],
            w_fc2: Matrix::zeros(h, dim),
            b_fc2: vec![0.0; dim],
            reduction,
        })
    }

    pub fn init(dim: usize, reduction: usize, rng: &mut Rng) -> Result<Self> {
        let h = Self::hidden_dim(dim, reduction)?;
        Ok(Self {
            w_fc1: glorot(dim, h, rng),
            b_fc1: vec![0.0; h],
            w_fc2: glorot(h, dim, rng),
            b_fc2: vec![0.0; dim],
            reduction,
        })
    }

    pub fn dim(&self) -> usize {
        self.w_fc1.rows()
    }

    pub fn hidden(&self) -> usize {
        self.w_fc1.cols()
    }

    fn check(&self, dim: usize) -> Result<()> {
        let h = self.hidden();
        if self.w_fc1.rows() != dim
            || self.w_fc2.shape() != (h, dim)
            || self.b_fc1.len() != h
            || self.b_fc2.len() != dim
        {
            return Err(AfrError::shape(format!(
                "channel attention parameters do not match dim {dim}"
            )));
        }
        Ok(())
    }

    /// Zeroed tensors with the same shapes, used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        Self {
            w_fc1: Matrix::zeros(self.w_fc1.rows(), self.w_fc1.cols()),
            b_fc1: vec![0.0; self.b_fc1.len()],
            w_fc2: Matrix::zeros(self.w_fc2.rows(), self.w_fc2.cols()),
            b_fc2: vec![0.0; self.b_fc2.len()],
            reduction: self.reduction,
        }
    }
}

/// Intermediate values of one instance attention forward pass.
#[derive(Debug, Clone)]
pub struct InstanceAttentionCache {
    query: Vec<f64>,
    q: Vec<f64>,
    keys: Matrix,
    values: Matrix,
    /// Softmax weights over the prototypes.
    pub weights: Vec<f64>,
    /// Calibration amplitude `A`.
    pub amplitude: Vec<f64>,
    projected: Vec<f64>,
}

fn vec_mat(v: &[f64], m: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for (k, &a) in v.iter().enumerate() {
        if a == 0.0 {
            continue;
        }
        for (o, &b) in out.iter_mut().zip(m.row(k)) {
            *o += a * b;
        }
    }
    out
}

/// `m vᵀ`: dot of every row of `m` with `v`.
fn mat_vec(m: &Matrix, v: &[f64]) -> Vec<f64> {
    m.iter_rows()
        .map(|r| r.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

/// `acc += uᵀ v` for row vectors `u`, `v`.
fn add_outer(acc: &mut Matrix, u: &[f64], v: &[f64]) {
    for (i, &a) in u.iter().enumerate() {
        if a == 0.0 {
            continue;
        }
        for (o, &b) in acc.row_mut(i).iter_mut().zip(v) {
            *o += a * b;
        }
    }
}

/// `acc += Xᵀ G`.
fn add_xt_g(acc: &mut Matrix, x: &Matrix, g: &Matrix) {
    for r in 0..x.rows() {
        add_outer(acc, x.row(r), g.row(r));
    }
}

pub fn instance_attention_forward(
    query: &[f64],
    protos: &Matrix,
    params: &InstanceAttentionParams,
) -> Result<(Matrix, InstanceAttentionCache)> {
    let d = protos.cols();
    if protos.rows() == 0 {
        return Err(AfrError::shape("instance attention needs at least one prototype"));
    }
    if query.len() != d {
        return Err(AfrError::shape(format!(
            "query has length {}, prototypes have dim {d}",
            query.len()
        )));
    }
    params.check(d)?;

    let q = vec_mat(query, &params.w_q);
    let keys = protos.matmul(&params.w_k)?;
    let values = protos.matmul(&params.w_v)?;
    let scale = 1.0 / (d as f64).sqrt();
    let mut weights: Vec<f64> = mat_vec(&keys, &q).into_iter().map(|z| z * scale).collect();
    softmax_in_place(&mut weights);
    let amplitude = vec_mat(&weights, &values);
    let projected = vec_mat(&amplitude, &params.w_p);

    let mut p_hat = protos.clone();
    for r in 0..p_hat.rows() {
        for (o, &u) in p_hat.row_mut(r).iter_mut().zip(&projected) {
            *o += relu(u);
        }
    }
    let cache = InstanceAttentionCache {
        query: query.to_vec(),
        q,
        keys,
        values,
        weights,
        amplitude,
        projected,
    };
    Ok((p_hat, cache))
}

/// Calibrated prototypes `P̂` for one query feature.
pub fn instance_attention(
    query: &[f64],
    protos: &PrototypeSet,
    params: &InstanceAttentionParams,
) -> Result<Matrix> {
    instance_attention_forward(query, &protos.vectors, params).map(|(p, _)| p)
}

/// Accumulates parameter gradients given `dL/dP̂` into `grads`.
pub fn instance_attention_backward(
    cache: &InstanceAttentionCache,
    protos: &Matrix,
    params: &InstanceAttentionParams,
    d_p_hat: &Matrix,
    grads: &mut InstanceAttentionParams,
) {
    let d = protos.cols();
    // relu(u) is broadcast to every row, so its gradient sums over rows
    let mut d_proj = vec![0.0; d];
    for row in d_p_hat.iter_rows() {
        for (a, &g) in d_proj.iter_mut().zip(row) {
            *a += g;
        }
    }
    for (g, &u) in d_proj.iter_mut().zip(&cache.projected) {
        if u <= 0.0 {
            *g = 0.0;
        }
    }
    if d_proj.iter().all(|&g| g == 0.0) {
        return;
    }
    add_outer(&mut grads.w_p, &cache.amplitude, &d_proj);
    let d_amp = mat_vec(&params.w_p, &d_proj);

    // A = w V
    let d_w = mat_vec(&cache.values, &d_amp);
    let mut d_values = Matrix::zeros(protos.rows(), d);
    for (j, &wj) in cache.weights.iter().enumerate() {
        for (o, &g) in d_values.row_mut(j).iter_mut().zip(&d_amp) {
            *o = wj * g;
        }
    }
    add_xt_g(&mut grads.w_v, protos, &d_values);

    // softmax backward, then the 1/√d scaled dot products
    let dot: f64 = cache.weights.iter().zip(&d_w).map(|(w, g)| w * g).sum();
    let scale = 1.0 / (d as f64).sqrt();
    let d_logits: Vec<f64> = cache
        .weights
        .iter()
        .zip(&d_w)
        .map(|(w, g)| w * (g - dot) * scale)
        .collect();
    let d_q = vec_mat(&d_logits, &cache.keys);
    let mut d_keys = Matrix::zeros(protos.rows(), d);
    for (j, &dz) in d_logits.iter().enumerate() {
        for (o, &qv) in d_keys.row_mut(j).iter_mut().zip(&cache.q) {
            *o = dz * qv;
        }
    }
    add_xt_g(&mut grads.w_k, protos, &d_keys);
    add_outer(&mut grads.w_q, &cache.query, &d_q);
}

#[derive(Debug, Clone)]
pub struct ChannelAttentionCache {
    hidden_pre: Matrix,
    hidden: Matrix,
    /// Sigmoid gate `E`, same shape as `P̂`.
    pub gate: Matrix,
}

pub fn channel_attention_forward(
    p_hat: &Matrix,
    p_raw: &Matrix,
    params: &ChannelAttentionParams,
) -> Result<(Matrix, ChannelAttentionCache)> {
    if p_hat.shape() != p_raw.shape() {
        return Err(AfrError::shape(format!(
            "calibrated prototypes {:?} vs raw prototypes {:?}",
            p_hat.shape(),
            p_raw.shape()
        )));
    }
    params.check(p_hat.cols())?;

    let mut hidden_pre = p_hat.matmul(&params.w_fc1)?;
    for r in 0..hidden_pre.rows() {
        for (h, &b) in hidden_pre.row_mut(r).iter_mut().zip(&params.b_fc1) {
            *h += b;
        }
    }
    let hidden = hidden_pre.map(relu);
    let mut gate = hidden.matmul(&params.w_fc2)?;
    for r in 0..gate.rows() {
        for (g, &b) in gate.row_mut(r).iter_mut().zip(&params.b_fc2) {
            *g = sigmoid(*g + b);
        }
    }
    let mut fused = p_raw.clone();
    for (o, (&e, &p)) in fused
        .data_mut()
        .iter_mut()
        .zip(gate.data().iter().zip(p_hat.data()))
    {
        *o += e * p;
    }
    Ok((
        fused,
        ChannelAttentionCache {
            hidden_pre,
            hidden,
            gate,
        },
    ))
}

/// Fused prototypes `P̄ = E ⊙ P̂ + P`.
pub fn channel_attention(
    p_hat: &Matrix,
    p_raw: &Matrix,
    params: &ChannelAttentionParams,
) -> Result<Matrix> {
    channel_attention_forward(p_hat, p_raw, params).map(|(p, _)| p)
}

/// Accumulates gate gradients into `grads` and returns `dL/dP̂` (the raw
/// prototypes are constants and receive no gradient).
pub fn channel_attention_backward(
    cache: &ChannelAttentionCache,
    p_hat: &Matrix,
    params: &ChannelAttentionParams,
    d_fused: &Matrix,
    grads: &mut ChannelAttentionParams,
) -> Matrix {
    let (rows, d) = p_hat.shape();
    let h = params.hidden();
    let mut d_p_hat = Matrix::zeros(rows, d);
    let mut d_gate_pre = vec![0.0; d];
    let mut d_hidden = vec![0.0; h];
    for r in 0..rows {
        let g_row = cache.gate.row(r);
        let p_row = p_hat.row(r);
        let dy = d_fused.row(r);
        for c in 0..d {
            let e = g_row[c];
            d_p_hat.row_mut(r)[c] = dy[c] * e;
            d_gate_pre[c] = dy[c] * p_row[c] * e * (1.0 - e);
        }
        add_outer(&mut grads.w_fc2, cache.hidden.row(r), &d_gate_pre);
        for (b, &g) in grads.b_fc2.iter_mut().zip(&d_gate_pre) {
            *b += g;
        }
        let pre = cache.hidden_pre.row(r);
        for (k, dh) in d_hidden.iter_mut().enumerate() {
            *dh = if pre[k] > 0.0 {
                params
                    .w_fc2
                    .row(k)
                    .iter()
                    .zip(&d_gate_pre)
                    .map(|(w, g)| w * g)
                    .sum()
            } else {
                0.0
            };
        }
        add_outer(&mut grads.w_fc1, p_row, &d_hidden);
        for (b, &g) in grads.b_fc1.iter_mut().zip(&d_hidden) {
            *b += g;
        }
        let extra = mat_vec(&params.w_fc1, &d_hidden);
        for (o, e) in d_p_hat.row_mut(r).iter_mut().zip(extra) {
            *o += e;
        }
    }
    d_p_hat
}

/// Which attention stages are active. A disabled stage is the identity:
/// no instance attention means `P̂ = P`, no channel attention means
/// `P̄ = P̂`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionSwitches {
    pub instance: bool,
    pub channel: bool,
}

impl Default for AttentionSwitches {
    fn default() -> Self {
        Self {
            instance: true,
            channel: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FusionCache {
    p_hat: Matrix,
    instance: Option<InstanceAttentionCache>,
    channel: Option<ChannelAttentionCache>,
}

/// Runs both attention stages on one class's prototypes.
pub fn fuse_prototypes(
    query: &[f64],
    protos: &Matrix,
    ip: &InstanceAttentionParams,
    cp: &ChannelAttentionParams,
    switches: AttentionSwitches,
) -> Result<(Matrix, FusionCache)> {
    let (p_hat, instance) = if switches.instance {
        let (p, c) = instance_attention_forward(query, protos, ip)?;
        (p, Some(c))
    } else {
        (protos.clone(), None)
    };
    let (fused, channel) = if switches.channel {
        let (p, c) = channel_attention_forward(&p_hat, protos, cp)?;
        (p, Some(c))
    } else {
        (p_hat.clone(), None)
    };
    Ok((
        fused,
        FusionCache {
            p_hat,
            instance,
            channel,
        },
    ))
}

/// Backward of [`fuse_prototypes`], accumulating into both gradient sets.
pub fn fuse_prototypes_backward(
    cache: &FusionCache,
    protos: &Matrix,
    ip: &InstanceAttentionParams,
    cp: &ChannelAttentionParams,
    d_fused: &Matrix,
    ip_grads: &mut InstanceAttentionParams,
    cp_grads: &mut ChannelAttentionParams,
) {
    let d_p_hat = match &cache.channel {
        Some(c) => channel_attention_backward(c, &cache.p_hat, cp, d_fused, cp_grads),
        None => d_fused.clone(),
    };
    if let Some(c) = &cache.instance {
        instance_attention_backward(c, protos, ip, &d_p_hat, ip_grads);
    }
}

/// Support features and fused prototypes of one novel class, all carrying
/// the class label. Rows of the set are the support rows followed by the
/// prototype rows.
#[derive(Debug, Clone, PartialEq)]
pub struct RegularizedSet {
    pub support_features: Matrix,
    pub fused_prototypes: Matrix,
    pub label: usize,
}

impl RegularizedSet {
    pub fn len(&self) -> usize {
        self.support_features.rows() + self.fused_prototypes.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.support_features.cols()
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.support_features
            .iter_rows()
            .chain(self.fused_prototypes.iter_rows())
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let k = self.support_features.rows();
        if i < k {
            self.support_features.row(i)
        } else {
            self.fused_prototypes.row(i - k)
        }
    }
}

/// Builds the regularized set of one novel class from its support shots.
///
/// The class mean of the shots is the attention query.
pub fn regularize_support(
    support: &Matrix,
    label: usize,
    base_store: &FeatureStore,
    selection: &SelectionResult,
    ip: &InstanceAttentionParams,
    cp: &ChannelAttentionParams,
) -> Result<RegularizedSet> {
    if support.rows() == 0 {
        return Err(AfrError::config("regularize_support needs at least one shot"));
    }
    if selection.ranked.is_empty() {
        return Err(AfrError::config("selection must contain at least one class"));
    }
    if support.cols() != base_store.dim() {
        return Err(AfrError::shape(format!(
            "support dim {} vs base dim {}",
            support.cols(),
            base_store.dim()
        )));
    }
    let protos = compute_prototypes(base_store, &selection.class_names())?;
    let query = support.row_mean();
    let (fused, _) = fuse_prototypes(&query, &protos.vectors, ip, cp, AttentionSwitches::default())?;
    Ok(RegularizedSet {
        support_features: support.clone(),
        fused_prototypes: fused,
        label,
    })
}
