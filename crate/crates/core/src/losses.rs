//! Training objective: cross-entropy on every regularized row, a
//! supervised contrastive term over the regularized sets, and a mean-gap
//! term pulling fused prototypes towards the support features.
//!
//! `total = ce + mu1 * sc + mu2 * mse`
//!
//! Each loss has a `*_with_grad` form that accumulates exact gradients with
//! respect to every support row, fused prototype row and classifier tensor.

use serde::{Deserialize, Serialize};

use crate::episodes_io::MixedSample;
use crate::error::{AfrError, Result};
use crate::numerics::Matrix;
use crate::regularizer::RegularizedSet;

/// Sign convention of the contrastive term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScSign {
    /// `-log(exp(pos) / sum exp(neg))`, minimized by separating classes.
    Standard,
    /// The same expression with a positive log.
    PositiveLog,
}

/// How the mean gap between support and prototypes is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MseNorm {
    /// Squared L2 norm divided by the dimension.
    Squared,
    /// Plain L2 norm.
    Plain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub mu1: f64,
    pub mu2: f64,
    pub tau: f64,
    pub normalize_for_sc: bool,
    pub sc_sign: ScSign,
    pub mse_norm: MseNorm,
}

impl LossConfig {
    pub const DEFAULT_MU1: f64 = 5.0;
    pub const DEFAULT_MU2: f64 = 20.0;
    pub const DEFAULT_TAU: f64 = 0.1;

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(AfrError::config(format!("tau {} must be > 0", self.tau)));
        }
        if !(self.mu1 >= 0.0 && self.mu2 >= 0.0) || !self.mu1.is_finite() || !self.mu2.is_finite() {
            return Err(AfrError::config(format!(
                "mu1 {} and mu2 {} must be finite and >= 0",
                self.mu1, self.mu2
            )));
        }
        Ok(())
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            mu1: Self::DEFAULT_MU1,
            mu2: Self::DEFAULT_MU2,
            tau: Self::DEFAULT_TAU,
            normalize_for_sc: true,
            sc_sign: ScSign::Standard,
            mse_norm: MseNorm::Squared,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub sc: f64,
    pub mse: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.ce.is_finite() && self.sc.is_finite() && self.mse.is_finite() && self.total.is_finite()
    }
}

/// Single affine layer `logits = W h + b` with `W` of shape `N × d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Classifier {
    pub fn zeros(num_classes: usize, dim: usize) -> Self {
        Self {
            weights: Matrix::zeros(num_classes, dim),
            bias: vec![0.0; num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.weights.rows()
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn logits(&self, feature: &[f64]) -> Vec<f64> {
        self.weights
            .iter_rows()
            .zip(&self.bias)
            .map(|(w, b)| w.iter().zip(feature).map(|(x, y)| x * y).sum::<f64>() + b)
            .collect()
    }
}

/// Gradients with respect to one [`RegularizedSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct SetGradients {
    pub support: Matrix,
    pub fused: Matrix,
}

impl SetGradients {
    fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let k = self.support.rows();
        if i < k {
            self.support.row_mut(i)
        } else {
            self.fused.row_mut(i - k)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGradients {
    pub sets: Vec<SetGradients>,
    pub classifier: Classifier,
}

impl LossGradients {
    pub fn zeros_for(sets: &[RegularizedSet], classifier: &Classifier) -> Self {
        Self {
            sets: sets
                .iter()
                .map(|s| SetGradients {
                    support: Matrix::zeros(s.support_features.rows(), s.dim()),
                    fused: Matrix::zeros(s.fused_prototypes.rows(), s.dim()),
                })
                .collect(),
            classifier: Classifier::zeros(classifier.num_classes(), classifier.dim()),
        }
    }
}

fn check_dims(sets: &[RegularizedSet]) -> Result<usize> {
    let d = sets
        .first()
        .map(RegularizedSet::dim)
        .ok_or_else(|| AfrError::config("no regularized sets"))?;
    for (i, s) in sets.iter().enumerate() {
        if s.dim() != d || (s.fused_prototypes.rows() > 0 && s.fused_prototypes.cols() != d) {
            return Err(AfrError::shape(format!("set {i} does not have dim {d}")));
        }
    }
    Ok(d)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Supervised contrastive loss (standard sign).
pub fn supervised_contrastive(sets: &[RegularizedSet], tau: f64, normalize: bool) -> Result<f64> {
    supervised_contrastive_impl(sets, tau, normalize, ScSign::Standard, None)
}

/// Contrastive loss, adding `weight * dL/dh` into `grads`.
pub fn supervised_contrastive_with_grad(
    sets: &[RegularizedSet],
    tau: f64,
    normalize: bool,
    sign: ScSign,
    weight: f64,
    grads: &mut LossGradients,
) -> Result<f64> {
    supervised_contrastive_impl(sets, tau, normalize, sign, Some((weight, grads)))
}

fn supervised_contrastive_impl(
    sets: &[RegularizedSet],
    tau: f64,
    normalize: bool,
    sign: ScSign,
    mut grads: Option<(f64, &mut LossGradients)>,
) -> Result<f64> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(AfrError::config(format!("tau {tau} must be > 0")));
    }
    if sets.len() < 2 {
        return Err(AfrError::config(
            "contrastive loss needs at least two classes",
        ));
    }
    if let Some(i) = sets.iter().position(|s| s.len() < 2) {
        return Err(AfrError::config(format!(
            "contrastive loss needs >= 2 rows per class, set {i} has {}",
            sets[i].len()
        )));
    }
    let d = check_dims(sets)?;

    // flatten all rows: (set index, position in set, embedding, norm)
    let mut owner = Vec::new();
    let mut z: Vec<Vec<f64>> = Vec::new();
    let mut norms = Vec::new();
    for (s, set) in sets.iter().enumerate() {
        for (i, row) in set.rows().enumerate() {
            owner.push((s, i));
            if normalize {
                let n = dot(row, row).sqrt();
                if n == 0.0 {
                    return Err(AfrError::numeric(format!(
                        "zero-norm row {i} in set {s} cannot be normalized"
                    )));
                }
                z.push(row.iter().map(|v| v / n).collect());
                norms.push(n);
            } else {
                z.push(row.to_vec());
                norms.push(1.0);
            }
        }
    }
    let total_rows = z.len();
    let sim: Vec<Vec<f64>> = (0..total_rows)
        .map(|a| (0..total_rows).map(|b| dot(&z[a], &z[b])).collect())
        .collect();

    let sgn = match sign {
        ScSign::Standard => 1.0,
        ScSign::PositiveLog => -1.0,
    };
    let n_sets = sets.len() as f64;
    let mut loss = 0.0;
    let mut d_sim = grads.as_ref().map(|_| vec![vec![0.0; total_rows]; total_rows]);

    for a in 0..total_rows {
        let s = owner[a].0;
        let n_s = sets[s].len() as f64;
        let coef = sgn / (n_sets * n_s * (n_s - 1.0));

        let neg: Vec<usize> = (0..total_rows).filter(|&p| owner[p].0 != s).collect();
        let max = neg
            .iter()
            .map(|&p| sim[a][p] / tau)
            .fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = neg.iter().map(|&p| (sim[a][p] / tau - max).exp()).collect();
        let denom: f64 = exps.iter().sum();
        let lse = max + denom.ln();

        let mut pos_sum = 0.0;
        for b in 0..total_rows {
            if b != a && owner[b].0 == s {
                pos_sum += sim[a][b] / tau;
            }
        }
        loss += coef * ((n_s - 1.0) * lse - pos_sum);

        if let Some(ds) = d_sim.as_mut() {
            for b in 0..total_rows {
                if b != a && owner[b].0 == s {
                    ds[a][b] -= coef / tau;
                }
            }
            for (&p, e) in neg.iter().zip(&exps) {
                ds[a][p] += coef * (n_s - 1.0) * (e / denom) / tau;
            }
        }
    }

    if let (Some((weight, g)), Some(ds)) = (grads.as_mut(), d_sim) {
        if *weight != 0.0 {
            let mut d_z = vec![vec![0.0; d]; total_rows];
            for a in 0..total_rows {
                for b in 0..total_rows {
                    let v = ds[a][b];
                    if v == 0.0 {
                        continue;
                    }
                    for k in 0..d {
                        d_z[a][k] += v * z[b][k];
                        d_z[b][k] += v * z[a][k];
                    }
                }
            }
            for a in 0..total_rows {
                let (s, i) = owner[a];
                let dh: Vec<f64> = if normalize {
                    let proj = dot(&z[a], &d_z[a]);
                    (0..d).map(|k| (d_z[a][k] - z[a][k] * proj) / norms[a]).collect()
                } else {
                    d_z[a].clone()
                };
                for (o, v) in g.sets[s].row_mut(i).iter_mut().zip(dh) {
                    *o += *weight * v;
                }
            }
        }
    }
    Ok(loss)
}

pub fn mean_gap_mse(sets: &[RegularizedSet]) -> Result<f64> {
    mean_gap_impl(sets, MseNorm::Squared, None)
}

pub fn mean_gap_mse_with_grad(
    sets: &[RegularizedSet],
    norm: MseNorm,
    weight: f64,
    grads: &mut LossGradients,
) -> Result<f64> {
    mean_gap_impl(sets, norm, Some((weight, grads)))
}

fn mean_gap_impl(
    sets: &[RegularizedSet],
    norm: MseNorm,
    mut grads: Option<(f64, &mut LossGradients)>,
) -> Result<f64> {
    let d = check_dims(sets)?;
    let n = sets.len() as f64;
    let mut loss = 0.0;
    for (s, set) in sets.iter().enumerate() {
        let k = set.support_features.rows();
        let beta = set.fused_prototypes.rows();
        if k == 0 || beta == 0 {
            return Err(AfrError::config(format!(
                "mean gap needs support rows and prototypes, set {s} has {k} and {beta}"
            )));
        }
        let sm = set.support_features.row_mean();
        let pm = set.fused_prototypes.row_mean();
        let gap: Vec<f64> = sm.iter().zip(&pm).map(|(a, b)| a - b).collect();
        let sq = dot(&gap, &gap);
        // dL/dgap for this set before the 1/N average
        let (value, d_gap): (f64, Vec<f64>) = match norm {
            MseNorm::Squared => (
                sq / d as f64,
                gap.iter().map(|g| 2.0 * g / d as f64).collect(),
            ),
            MseNorm::Plain => {
                let l = sq.sqrt();
                let dg = if l > 0.0 {
                    gap.iter().map(|g| g / l).collect()
                } else {
                    vec![0.0; d]
                };
                (l, dg)
            }
        };
        loss += value / n;
        if let Some((weight, g)) = grads.as_mut() {
            if *weight == 0.0 {
                continue;
            }
            let sg = &mut g.sets[s];
            let ws = *weight / (n * k as f64);
            for r in 0..k {
                for (o, dg) in sg.support.row_mut(r).iter_mut().zip(&d_gap) {
                    *o += ws * dg;
                }
            }
            let wp = *weight / (n * beta as f64);
            for r in 0..beta {
                for (o, dg) in sg.fused.row_mut(r).iter_mut().zip(&d_gap) {
                    *o -= wp * dg;
                }
            }
        }
    }
    Ok(loss)
}

pub fn cross_entropy(sets: &[RegularizedSet], classifier: &Classifier) -> Result<f64> {
    cross_entropy_impl(sets, &[], classifier, None)
}

/// Cross-entropy over every set row plus optional mixed rows with soft
/// targets, averaged over all rows.
pub fn cross_entropy_with_grad(
    sets: &[RegularizedSet],
    mixed: &[MixedSample],
    classifier: &Classifier,
    grads: &mut LossGradients,
) -> Result<f64> {
    cross_entropy_impl(sets, mixed, classifier, Some(grads))
}

/// Mean soft-target cross-entropy of mixed rows alone.
pub fn mixed_cross_entropy(mixed: &[MixedSample], classifier: &Classifier) -> Result<f64> {
    cross_entropy_impl(&[], mixed, classifier, None)
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

fn cross_entropy_impl(
    sets: &[RegularizedSet],
    mixed: &[MixedSample],
    classifier: &Classifier,
    mut grads: Option<&mut LossGradients>,
) -> Result<f64> {
    let n_cls = classifier.num_classes();
    let d = classifier.dim();
    let rows: usize = sets.iter().map(RegularizedSet::len).sum::<usize>() + mixed.len();
    if rows == 0 {
        return Err(AfrError::config("cross-entropy over zero rows"));
    }
    for (s, set) in sets.iter().enumerate() {
        if set.label >= n_cls {
            return Err(AfrError::data(format!(
                "set {s} has label {} outside [0, {n_cls})",
                set.label
            )));
        }
        if set.dim() != d {
            return Err(AfrError::shape(format!("set {s} has dim {}, classifier {d}", set.dim())));
        }
    }
    for m in mixed {
        if m.class_a >= n_cls || m.class_b >= n_cls {
            return Err(AfrError::data(format!(
                "mixed labels ({}, {}) outside [0, {n_cls})",
                m.class_a, m.class_b
            )));
        }
        if m.feature.len() != d {
            return Err(AfrError::shape("mixed feature dim does not match classifier"));
        }
    }
    let inv = 1.0 / rows as f64;
    let mut loss = 0.0;

    let mut accumulate = |h: &[f64], target: &[(usize, f64)], d_row: Option<&mut [f64]>, grads: &mut Option<&mut LossGradients>| {
        let logits = classifier.logits(h);
        let logp = log_softmax(&logits);
        for &(c, t) in target {
            loss -= inv * t * logp[c];
        }
        if let Some(g) = grads.as_mut() {
            let mut d_logits: Vec<f64> = logp.iter().map(|lp| inv * lp.exp()).collect();
            for &(c, t) in target {
                d_logits[c] -= inv * t;
            }
            for (c, &dl) in d_logits.iter().enumerate() {
                g.classifier.bias[c] += dl;
                for (o, &x) in g.classifier.weights.row_mut(c).iter_mut().zip(h) {
                    *o += dl * x;
                }
            }
            if let Some(d_row) = d_row {
                for (c, &dl) in d_logits.iter().enumerate() {
                    for (o, &w) in d_row.iter_mut().zip(classifier.weights.row(c)) {
                        *o += dl * w;
                    }
                }
            }
        }
    };

    for (s, set) in sets.iter().enumerate() {
        let target = [(set.label, 1.0)];
        for i in 0..set.len() {
            match grads.as_mut() {
                Some(g) => {
                    let mut d_row = vec![0.0; d];
                    accumulate(set.row(i), &target, Some(&mut d_row), &mut Some(&mut **g));
                    for (o, v) in g.sets[s].row_mut(i).iter_mut().zip(d_row) {
                        *o += v;
                    }
                }
                None => accumulate(set.row(i), &target, None, &mut None),
            }
        }
    }
    for m in mixed {
        let target = [(m.class_a, m.lambda), (m.class_b, 1.0 - m.lambda)];
        accumulate(&m.feature, &target, None, &mut grads);
    }
    Ok(loss)
}

pub fn total_loss(sets: &[RegularizedSet], classifier: &Classifier, cfg: &LossConfig) -> Result<LossBreakdown> {
    let mut scratch = LossGradients::zeros_for(sets, classifier);
    total_loss_with_grad(sets, &[], classifier, cfg, &mut scratch)
}

/// Evaluates the weighted objective and accumulates its gradient.
///
/// A term whose weight is zero contributes nothing to the gradient. Its
/// value is still reported when its preconditions hold, and as 0 otherwise.
pub fn total_loss_with_grad(
    sets: &[RegularizedSet],
    mixed: &[MixedSample],
    classifier: &Classifier,
    cfg: &LossConfig,
    grads: &mut LossGradients,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    let ce = cross_entropy_with_grad(sets, mixed, classifier, grads)?;
    let sc = if cfg.mu1 != 0.0 {
        supervised_contrastive_with_grad(sets, cfg.tau, cfg.normalize_for_sc, cfg.sc_sign, cfg.mu1, grads)?
    } else {
        supervised_contrastive_impl(sets, cfg.tau, cfg.normalize_for_sc, cfg.sc_sign, None).unwrap_or(0.0)
    };
    let mse = if cfg.mu2 != 0.0 {
        mean_gap_mse_with_grad(sets, cfg.mse_norm, cfg.mu2, grads)?
    } else {
        mean_gap_impl(sets, cfg.mse_norm, None).unwrap_or(0.0)
    };
    Ok(LossBreakdown {
        ce,
        sc,
        mse,
        total: ce + cfg.mu1 * sc + cfg.mu2 * mse,
    })
}
