//! Differentiable loss algebra for the multi-branch training objective.
//!
//! Each branch `i` optimizes a combination of its own cross entropy and dice
//! terms plus, once the cross gate opens, beta-weighted dice terms against
//! every other branch's label:
//!
//! ```text
//! L_i = alpha * CE(u_i, v_i) + DC(u_i, v_i) + 1/(N-1) * sum_{j != i} beta_j * DC(u_i, v_j)
//! ```
//!
//! All functions are pure; gradients are returned with respect to the input
//! probability maps and can be chained through [`softmax_backward`] to reach
//! pre-softmax logits.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use crate::backbone::{softmax_backward, softmax_forward};

/// Smoothing added to the numerator and denominator of each dice fraction,
/// preventing 0/0 on empty masks.
pub const DICE_SMOOTHING: f64 = 1e-5;

/// Probabilities are clamped to `[CE_CLAMP, 1]` before the logarithm.
pub const CE_CLAMP: f64 = 1e-12;

/// Coefficients of the per-branch loss combination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the cross-entropy term.
    pub alpha: f64,
    /// One beta per target annotation; indexed by the label branch `j`.
    pub betas: Vec<f64>,
    /// Gate for the cross-dice term.
    pub cross_enabled: bool,
}

impl LossWeights {
    pub fn uniform(n: usize) -> Self {
        LossWeights {
            alpha: 1.0,
            betas: vec![1.0; n],
            cross_enabled: false,
        }
    }

    pub fn validate(&self, n_branches: usize) -> Result<()> {
        if self.alpha < 0.0 || !self.alpha.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "alpha must be finite and >= 0, got {}",
                self.alpha
            )));
        }
        if self.betas.len() != n_branches {
            return Err(Error::InvalidConfig(format!(
                "expected {} betas, got {}",
                n_branches,
                self.betas.len()
            )));
        }
        if self.betas.iter().any(|b| !b.is_finite() || *b < 0.0) {
            return Err(Error::InvalidConfig("betas must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Loss components of one branch.
#[derive(Debug, Clone)]
pub struct BranchLossTerms {
    pub branch: usize,
    /// CE of the branch against its own label.
    pub cross_entropy: f64,
    /// Dice of the branch against its own label.
    pub dice_self: f64,
    /// `(j, DC(u_i, v_j))` for every other label `j`.
    pub dice_cross: Vec<(usize, f64)>,
    /// The combined per-branch loss.
    pub loss: f64,
}

impl BranchLossTerms {
    pub fn dice_cross_mean(&self) -> f64 {
        if self.dice_cross.is_empty() {
            0.0
        } else {
            self.dice_cross.iter().map(|(_, v)| v).sum::<f64>() / self.dice_cross.len() as f64
        }
    }
}

/// All branch components plus the aggregated training loss.
#[derive(Debug, Clone)]
pub struct LossReport {
    pub per_branch: Vec<BranchLossTerms>,
    pub total: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "epoch,branch,l_ce,l_dc_self,l_dc_cross_mean,l_loss,total";

    /// One CSV line per branch.
    pub fn csv_rows(&self, epoch: usize) -> String {
        let mut out = String::new();
        for b in &self.per_branch {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                epoch,
                b.branch,
                b.cross_entropy,
                b.dice_self,
                b.dice_cross_mean(),
                b.loss,
                self.total
            ));
        }
        out
    }
}

fn check_pair(pred: &Array3<f64>, target: &Array3<f64>) -> Result<()> {
    if pred.dim() != target.dim() {
        return Err(Error::shape(
            format!("{:?}", pred.dim()),
            format!("{:?}", target.dim()),
        ));
    }
    Ok(())
}

fn check_one_hot(target: &Array3<f64>) -> Result<()> {
    let (k, h, w) = target.dim();
    for y in 0..h {
        for x in 0..w {
            let mut sum = 0.0;
            for c in 0..k {
                let v = target[[c, y, x]];
                if v != 0.0 && v != 1.0 {
                    return Err(Error::Numeric(format!(
                        "target is not one-hot at ({y},{x}): channel {c} = {v}"
                    )));
                }
                sum += v;
            }
            if sum != 1.0 {
                return Err(Error::Numeric(format!(
                    "target is not one-hot at ({y},{x}): channel sum = {sum}"
                )));
            }
        }
    }
    Ok(())
}

/// Average dice loss over `class_set`, smoothed so empty masks are well
/// defined: `1 - mean_k (2*I_k + eps) / (S_k + eps)` with `I_k` the
/// pred/target overlap and `S_k` the sum of both masses.
pub fn dice_loss(pred: &Array3<f64>, target: &Array3<f64>, class_set: &[usize]) -> Result<f64> {
    Ok(dice_loss_with_grad(pred, target, class_set)?.0)
}

/// Dice loss plus its gradient with respect to `pred`.
pub fn dice_loss_with_grad(
    pred: &Array3<f64>,
    target: &Array3<f64>,
    class_set: &[usize],
) -> Result<(f64, Array3<f64>)> {
    check_pair(pred, target)?;
    check_one_hot(target)?;
    let (k, h, w) = pred.dim();
    if class_set.is_empty() {
        return Err(Error::InvalidConfig("class_set must be nonempty".into()));
    }
    if let Some(&bad) = class_set.iter().find(|&&c| c >= k) {
        return Err(Error::InvalidConfig(format!(
            "class {bad} out of range for {k} classes"
        )));
    }
    let mut grad = Array3::<f64>::zeros((k, h, w));
    let inv = 1.0 / class_set.len() as f64;
    let mut dice_sum = 0.0;
    for &c in class_set {
        let u = pred.index_axis(ndarray::Axis(0), c);
        let v = target.index_axis(ndarray::Axis(0), c);
        let mut inter = 0.0;
        let mut mass = 0.0;
        for (uv, vv) in u.iter().zip(v.iter()) {
            inter += uv * vv;
            mass += uv + vv;
        }
        let num = 2.0 * inter + DICE_SMOOTHING;
        let den = mass + DICE_SMOOTHING;
        dice_sum += num / den;
        let mut gc = grad.index_axis_mut(ndarray::Axis(0), c);
        for (gv, vv) in gc.iter_mut().zip(v.iter()) {
            // d/du of (2I+eps)/(S+eps), negated and averaged over classes
            *gv = -inv * (2.0 * vv * den - num) / (den * den);
        }
    }
    Ok((1.0 - inv * dice_sum, grad))
}

/// Mean over pixels of `-sum_k v_k log(u_k)` with the prediction clamped to
/// `[CE_CLAMP, 1]` before the logarithm.
pub fn cross_entropy_loss(pred: &Array3<f64>, target: &Array3<f64>) -> Result<f64> {
    Ok(cross_entropy_loss_with_grad(pred, target)?.0)
}

pub fn cross_entropy_loss_with_grad(
    pred: &Array3<f64>,
    target: &Array3<f64>,
) -> Result<(f64, Array3<f64>)> {
    check_pair(pred, target)?;
    check_one_hot(target)?;
    let (k, h, w) = pred.dim();
    let pixels = (h * w) as f64;
    let mut loss = 0.0;
    let mut grad = Array3::<f64>::zeros((k, h, w));
    for c in 0..k {
        let u = pred.index_axis(ndarray::Axis(0), c);
        let v = target.index_axis(ndarray::Axis(0), c);
        let mut gc = grad.index_axis_mut(ndarray::Axis(0), c);
        for ((uv, vv), gv) in u.iter().zip(v.iter()).zip(gc.iter_mut()) {
            if *vv != 0.0 {
                let clamped = uv.clamp(CE_CLAMP, 1.0);
                loss -= vv * clamped.ln();
                if *uv > CE_CLAMP {
                    *gv = -vv / (clamped * pixels);
                }
            }
        }
    }
    Ok((loss / pixels, grad))
}

/// The per-branch combination rule; the cross term is defined as zero when
/// `n == 1` or the gate is closed.
fn eq1_combination(
    alpha: f64,
    cross_entropy: f64,
    dice_self: f64,
    weighted_cross: &[(f64, f64)], // (beta_j, dice_ij)
    cross_enabled: bool,
    n: usize,
) -> f64 {
    let mut loss = alpha * cross_entropy + dice_self;
    if cross_enabled && n > 1 {
        let sum: f64 = weighted_cross.iter().map(|(b, d)| b * d).sum();
        loss += sum / (n - 1) as f64;
    }
    loss
}

fn foreground_classes(k: usize) -> Vec<usize> {
    (1..k).collect()
}

/// Loss of branch `i` against all labels, plus its gradient with respect to
/// the branch's own probability map.
pub fn branch_cross_loss_with_grad(
    i: usize,
    preds: &[Array3<f64>],
    targets: &[Array3<f64>],
    w: &LossWeights,
) -> Result<(BranchLossTerms, Array3<f64>)> {
    let n = preds.len();
    if targets.len() != n {
        return Err(Error::shape(
            format!("{n} labels"),
            format!("{}", targets.len()),
        ));
    }
    if i >= n {
        return Err(Error::InvalidConfig(format!(
            "branch index {i} out of range for {n} branches"
        )));
    }
    w.validate(n)?;
    let k = preds[i].dim().0;
    let class_set = foreground_classes(k);

    let (ce, ce_grad) = cross_entropy_loss_with_grad(&preds[i], &targets[i])?;
    let (dc_self, dc_self_grad) = dice_loss_with_grad(&preds[i], &targets[i], &class_set)?;

    let mut grad = &dc_self_grad + &(ce_grad * w.alpha);
    let mut dice_cross = Vec::with_capacity(n.saturating_sub(1));
    let mut weighted = Vec::with_capacity(n.saturating_sub(1));
    if n > 1 {
        let scale = if w.cross_enabled {
            1.0 / (n - 1) as f64
        } else {
            0.0
        };
        for (j, target) in targets.iter().enumerate() {
            if j == i {
                continue;
            }
            let (dc_ij, dc_ij_grad) = dice_loss_with_grad(&preds[i], target, &class_set)?;
            dice_cross.push((j, dc_ij));
            weighted.push((w.betas[j], dc_ij));
            if scale > 0.0 {
                grad.scaled_add(scale * w.betas[j], &dc_ij_grad);
            }
        }
    }
    let loss = eq1_combination(w.alpha, ce, dc_self, &weighted, w.cross_enabled, n);
    Ok((
        BranchLossTerms {
            branch: i,
            cross_entropy: ce,
            dice_self: dc_self,
            dice_cross,
            loss,
        },
        grad,
    ))
}

pub fn branch_cross_loss(
    i: usize,
    preds: &[Array3<f64>],
    targets: &[Array3<f64>],
    w: &LossWeights,
) -> Result<BranchLossTerms> {
    Ok(branch_cross_loss_with_grad(i, preds, targets, w)?.0)
}

/// Mean of the per-branch losses plus the full component report.
pub fn total_training_loss(
    preds: &[Array3<f64>],
    targets: &[Array3<f64>],
    w: &LossWeights,
) -> Result<(f64, LossReport)> {
    let (total, report, _) = total_training_loss_with_grads(preds, targets, w)?;
    Ok((total, report))
}

/// Also returns `d total / d preds[i]` for every branch.
pub fn total_training_loss_with_grads(
    preds: &[Array3<f64>],
    targets: &[Array3<f64>],
    w: &LossWeights,
) -> Result<(f64, LossReport, Vec<Array3<f64>>)> {
    let n = preds.len();
    if n == 0 {
        return Err(Error::InvalidConfig("no branches".into()));
    }
    let mut per_branch = Vec::with_capacity(n);
    let mut grads = Vec::with_capacity(n);
    let inv = 1.0 / n as f64;
    let mut total = 0.0;
    for i in 0..n {
        let (terms, g) = branch_cross_loss_with_grad(i, preds, targets, w)?;
        total += terms.loss;
        per_branch.push(terms);
        grads.push(g * inv);
    }
    total *= inv;
    Ok((total, LossReport { per_branch, total }, grads))
}
