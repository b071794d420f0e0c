//! Loss terms and their gradients. Every reduction is a mean, so the losses
//! do not depend on the order of samples within a batch.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};

use super::TrainConfig;
use crate::latent::{dot, norm, CentroidBank};
use crate::{Error, Result, Scalar};

fn check_labels(labels: &[usize], width: usize) -> Result<()> {
    match labels.iter().find(|&&k| k >= width) {
        Some(&k) => Err(Error::IndexOutOfRange { index: k, count: width }),
        None => Ok(()),
    }
}

/// Mean softmax cross-entropy of `logits` (one row per sample) against `labels`.
pub fn classification_loss<T: Scalar>(logits: ArrayView2<'_, T>, labels: &[usize]) -> Result<T> {
    Ok(classification_loss_grad(logits, labels)?.0)
}

/// The loss and its gradient with respect to `logits`.
pub fn classification_loss_grad<T: Scalar>(logits: ArrayView2<'_, T>, labels: &[usize]) -> Result<(T, Array2<T>)> {
    if logits.nrows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} logit rows for {} labels",
            logits.nrows(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    check_labels(labels, logits.ncols())?;
    let n = T::lit(labels.len() as f64);
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut total = T::zero();
    for ((row, mut g), &k) in logits.outer_iter().zip(grad.outer_iter_mut()).zip(labels) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        if max == T::infinity() {
            // Limit of a softmax with unbounded margins: the mass is shared
            // by the infinite logits.
            let winners = T::lit(row.iter().filter(|&&v| v == max).count() as f64);
            total += if row[k] == max { winners.ln() } else { T::infinity() };
            Zip::from(&mut g)
                .and(&row)
                .for_each(|g, &v| *g = if v == max { T::one() / (winners * n) } else { T::zero() });
        } else {
            let sum = row.iter().fold(T::zero(), |acc, &v| acc + (v - max).exp());
            let lse = max + sum.ln();
            total += lse - row[k];
            Zip::from(&mut g).and(&row).for_each(|g, &v| *g = (v - lse).exp() / n);
        }
        g[k] -= T::one() / n;
    }
    Ok((total / n, grad))
}

/// Mean absolute error between predicted and true magnitudes.
pub fn regression_loss<T: Scalar>(predicted: ArrayView1<'_, T>, target: ArrayView1<'_, T>) -> Result<T> {
    Ok(regression_loss_grad(predicted, target)?.0)
}

/// The loss and its (sub)gradient with respect to `predicted`; the
/// subgradient at an exact match is 0.
pub fn regression_loss_grad<T: Scalar>(
    predicted: ArrayView1<'_, T>,
    target: ArrayView1<'_, T>,
) -> Result<(T, Array1<T>)> {
    if predicted.len() != target.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} targets",
            predicted.len(),
            target.len()
        )));
    }
    if predicted.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let n = T::lit(predicted.len() as f64);
    let loss = Zip::from(&predicted)
        .and(&target)
        .fold(T::zero(), |acc, &p, &t| acc + (p - t).abs())
        / n;
    let grad = Zip::from(&predicted).and(&target).map_collect(|&p, &t| {
        if p > t {
            T::one() / n
        } else if p < t {
            -T::one() / n
        } else {
            T::zero()
        }
    });
    Ok((loss, grad))
}

/// The centroid term together with its gradient and a tally of the shifts
/// that could not contribute.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidTerm<T> {
    pub loss: T,
    /// Gradient with respect to each shift row. Centroids are constants.
    pub grad: Array2<T>,
    pub contributing: usize,
    /// Shifts whose direction has no centroid yet.
    pub skipped_unseeded: usize,
    /// Shifts (or centroids) with zero norm, where the cosine is undefined.
    pub skipped_zero_norm: usize,
}

/// `(1/N) Σ (1 − cos(s_i, c_{k_i}))` over the contributing shifts, where `N`
/// is the number of shifts in the batch. The bank is only read.
pub fn centroid_loss<T: Scalar>(
    bank: &CentroidBank<T>,
    shifts: ArrayView2<'_, T>,
    labels: &[usize],
) -> Result<CentroidTerm<T>> {
    if shifts.nrows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} shifts for {} labels",
            shifts.nrows(),
            labels.len()
        )));
    }
    if shifts.ncols() != bank.latent_dim() {
        return Err(Error::Shape(format!(
            "shifts have width {}, centroids have width {}",
            shifts.ncols(),
            bank.latent_dim()
        )));
    }
    check_labels(labels, bank.num_directions())?;
    let mut term = CentroidTerm {
        loss: T::zero(),
        grad: Array2::zeros(shifts.raw_dim()),
        contributing: 0,
        skipped_unseeded: 0,
        skipped_zero_norm: 0,
    };
    if labels.is_empty() {
        return Ok(term);
    }
    let n = T::lit(labels.len() as f64);
    for (i, (s, &k)) in shifts.axis_iter(Axis(0)).zip(labels).enumerate() {
        let Some(c) = bank.centroid(k) else {
            term.skipped_unseeded += 1;
            continue;
        };
        let (ns, nc) = (norm(s), norm(c));
        if ns == T::zero() || nc == T::zero() {
            term.skipped_zero_norm += 1;
            continue;
        }
        let cos = (dot(s, c) / (ns * nc)).max(-T::one()).min(T::one());
        term.loss += (T::one() - cos) / n;
        term.contributing += 1;
        // ∂(1 − cos)/∂s = cos·s/|s|² − c/(|s||c|)
        let mut g = term.grad.row_mut(i);
        Zip::from(&mut g)
            .and(&s)
            .and(&c)
            .for_each(|g, &sv, &cv| *g = (cos * sv / (ns * ns) - cv / (ns * nc)) / n);
    }
    Ok(term)
}

/// `cl + λ·r + γ·c`.
pub fn total_loss<T: Scalar>(classification: T, regression: T, centroid: T, cfg: &TrainConfig) -> T {
    classification + T::lit(cfg.lambda) * regression + T::lit(cfg.gamma) * centroid
}
