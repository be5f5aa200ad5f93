//! Loss functions with analytic gradients: standard cross-entropy over
//! novel classes, base-normalized cross-entropy, squared-L2 weight
//! constraints against a parameter snapshot, their phase-2 combination,
//! and the KL-divergence distillation loss used for comparison.
//!
//! All batch losses reduce by the mean, so regularizer weights are
//! independent of batch size. Every gradient here is covered by the
//! finite-difference oracle in `numcore`.

use crate::error::{Error, Result};
use crate::numcore::Matrix;

/// Row-wise softmax with max subtraction.
fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

fn check_targets(targets: &[usize], num_classes: usize, batch: usize) -> Result<()> {
    if targets.len() != batch {
        return Err(Error::InvalidArgument(format!(
            "{} targets for a batch of {}",
            targets.len(),
            batch
        )));
    }
    for &t in targets {
        if t >= num_classes {
            return Err(Error::LabelOutOfRange {
                label: t,
                num_classes,
            });
        }
    }
    Ok(())
}

/// Mean negative log-likelihood of the targets under a softmax over the
/// novel logits only. Returns the loss and its gradient w.r.t. the logits.
pub fn softmax_ce(novel_logits: &Matrix, targets: &[usize]) -> Result<(f64, Matrix)> {
    let n = novel_logits.rows();
    check_targets(targets, novel_logits.cols(), n)?;
    let probs = softmax_rows(novel_logits);
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = probs.clone();
    for (i, &t) in targets.iter().enumerate() {
        loss -= probs.get(i, t).max(f64::MIN_POSITIVE).ln();
        grad.set(i, t, grad.get(i, t) - 1.0);
    }
    let grad = grad.scale(inv_n);
    Ok((loss * inv_n, grad))
}

/// Base-normalized cross-entropy: the softmax denominator for each novel
/// target additionally includes every base-class logit. Returns the loss
/// and gradients w.r.t. the novel and the base logit blocks.
pub fn base_normalized_ce(
    novel_logits: &Matrix,
    base_logits: &Matrix,
    targets: &[usize],
) -> Result<(f64, Matrix, Matrix)> {
    if novel_logits.rows() != base_logits.rows() {
        return Err(Error::ShapeMismatch {
            op: "base_normalized_ce",
            left_rows: novel_logits.rows(),
            left_cols: novel_logits.cols(),
            right_rows: base_logits.rows(),
            right_cols: base_logits.cols(),
        });
    }
    let n = novel_logits.rows();
    let n_novel = novel_logits.cols();
    check_targets(targets, n_novel, n)?;
    // Softmax over the concatenation [novel | base]; the target is always
    // in the novel block.
    let joint = novel_logits.hcat(base_logits)?;
    let probs = softmax_rows(&joint);
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut d_novel = Matrix::zeros(n, n_novel);
    let mut d_base = Matrix::zeros(n, base_logits.cols());
    for (i, &t) in targets.iter().enumerate() {
        loss -= probs.get(i, t).max(f64::MIN_POSITIVE).ln();
        for j in 0..n_novel {
            let y = (j == t) as u8 as f64;
            d_novel.set(i, j, (probs.get(i, j) - y) * inv_n);
        }
        for k in 0..base_logits.cols() {
            d_base.set(i, k, probs.get(i, n_novel + k) * inv_n);
        }
    }
    Ok((loss * inv_n, d_novel, d_base))
}

/// Squared-L2 constraint tying a parameter collection to its snapshot.
/// Returns the penalty and the gradients w.r.t. the current parameters,
/// `2 (cur - prev)` per tensor.
pub fn l2_wc(current: &[&Matrix], snapshot: &[&Matrix]) -> Result<(f64, Vec<Matrix>)> {
    if current.len() != snapshot.len() {
        return Err(Error::InvalidArgument(format!(
            "l2_wc over {} current vs {} snapshot tensors",
            current.len(),
            snapshot.len()
        )));
    }
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(current.len());
    for (cur, prev) in current.iter().zip(snapshot) {
        let diff = cur.sub(prev)?;
        value += diff.frobenius_sq();
        grads.push(diff.scale(2.0));
    }
    Ok((value, grads))
}

/// Combined second-phase loss: `base_normalized_ce + lambda * l2_wc`.
#[allow(clippy::too_many_arguments)]
pub fn phase2_loss(
    novel_logits: &Matrix,
    base_logits: &Matrix,
    targets: &[usize],
    current: &[&Matrix],
    snapshot: &[&Matrix],
    lambda: f64,
) -> Result<(f64, Matrix, Matrix, Vec<Matrix>)> {
    let (ce, d_novel, d_base) = base_normalized_ce(novel_logits, base_logits, targets)?;
    let (wc, wc_grads) = l2_wc(current, snapshot)?;
    let grads = wc_grads.into_iter().map(|g| g.scale(lambda)).collect();
    Ok((ce + lambda * wc, d_novel, d_base, grads))
}

/// Mean KL divergence between temperature-softened base-class
/// distributions of the frozen teacher (`old`) and the current model.
/// Gradients flow to the current logits only.
pub fn kd_kl(
    cur_base_logits: &Matrix,
    old_base_logits: &Matrix,
    temperature: f64,
) -> Result<(f64, Matrix)> {
    if !cur_base_logits.same_shape(old_base_logits) {
        return Err(Error::ShapeMismatch {
            op: "kd_kl",
            left_rows: cur_base_logits.rows(),
            left_cols: cur_base_logits.cols(),
            right_rows: old_base_logits.rows(),
            right_cols: old_base_logits.cols(),
        });
    }
    if !temperature.is_finite() || temperature <= 0.0 {
        return Err(Error::InvalidArgument(
            "temperature must be positive".into(),
        ));
    }
    let n = cur_base_logits.rows();
    let q = softmax_rows(&cur_base_logits.scale(1.0 / temperature));
    let p = softmax_rows(&old_base_logits.scale(1.0 / temperature));
    let inv_n = 1.0 / n as f64;
    let mut value = 0.0;
    let mut grad = Matrix::zeros(n, cur_base_logits.cols());
    for i in 0..n {
        for j in 0..cur_base_logits.cols() {
            let pj = p.get(i, j);
            let qj = q.get(i, j);
            if pj > 0.0 {
                value += pj * (pj.ln() - qj.max(f64::MIN_POSITIVE).ln());
            }
            grad.set(i, j, (qj - pj) * inv_n / temperature);
        }
    }
    Ok((value * inv_n, grad))
}

pub const DEFAULT_KD_TEMPERATURE: f64 = 2.0;
