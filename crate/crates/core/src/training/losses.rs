//! Prompt-learning objectives and their analytic gradients.

use ndarray::{Array1, ArrayView1};

use crate::error::{Error, Result};
use crate::linalg::euclidean;
use crate::scalar::Scalar;

/// `−log softmax(logits)[0]` and its gradient w.r.t. every logit.
/// Uses a max shift, so large logits do not overflow.
pub fn clip_loss_from_logits<T: Scalar>(logits: &[T]) -> (T, Vec<T>) {
    let mx = logits.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let exps: Vec<T> = logits.iter().map(|&l| (l - mx).exp()).collect();
    let sum = exps.iter().fold(T::zero(), |a, &b| a + b);
    let loss = sum.ln() + mx - logits[0];
    let mut grad: Vec<T> = exps.iter().map(|&e| e / sum).collect();
    grad[0] -= T::one();
    (loss, grad)
}

#[derive(Debug, Clone)]
pub struct ClipLossGrad<T> {
    pub loss: T,
    pub d_z: Array1<T>,
    pub d_w_n: Array1<T>,
    pub d_anomaly: Vec<Array1<T>>,
}

fn check_negatives<T>(anomaly: &[Array1<T>]) -> Result<()> {
    if anomaly.is_empty() {
        return Err(Error::input("contrastive loss needs at least one anomaly prompt feature"));
    }
    Ok(())
}

/// Contrastive loss of a normal feature `z` against the normal prototype
/// and every anomaly prompt feature at temperature `tau`.
pub fn clip_contrastive_loss<T: Scalar>(
    z: ArrayView1<'_, T>,
    w_n: ArrayView1<'_, T>,
    anomaly: &[Array1<T>],
    tau: T,
) -> Result<T> {
    check_negatives(anomaly)?;
    let logits: Vec<T> = std::iter::once(z.dot(&w_n) / tau)
        .chain(anomaly.iter().map(|w| z.dot(w) / tau))
        .collect();
    Ok(clip_loss_from_logits(&logits).0)
}

pub fn clip_contrastive_grad<T: Scalar>(
    z: ArrayView1<'_, T>,
    w_n: ArrayView1<'_, T>,
    anomaly: &[Array1<T>],
    tau: T,
) -> Result<ClipLossGrad<T>> {
    check_negatives(anomaly)?;
    let logits: Vec<T> = std::iter::once(z.dot(&w_n) / tau)
        .chain(anomaly.iter().map(|w| z.dot(w) / tau))
        .collect();
    let (loss, dl) = clip_loss_from_logits(&logits);
    let mut d_z = w_n.mapv(|v| v * dl[0] / tau);
    for (w, &g) in anomaly.iter().zip(&dl[1..]) {
        d_z.scaled_add(g / tau, w);
    }
    Ok(ClipLossGrad {
        loss,
        d_z,
        d_w_n: z.mapv(|v| v * dl[0] / tau),
        d_anomaly: dl[1..].iter().map(|&g| z.mapv(|v| v * g / tau)).collect(),
    })
}

#[derive(Debug, Clone)]
pub struct EamGrad<T> {
    pub loss: T,
    pub d_z: Array1<T>,
    pub d_w_n: Array1<T>,
    pub d_w_a: Array1<T>,
}

/// `max(0, d(z, ŵₙ) − d(z, ŵₐ))` with Euclidean `d` and zero margin.
pub fn eam_loss<T: Scalar>(z: ArrayView1<'_, T>, w_n: ArrayView1<'_, T>, w_a: ArrayView1<'_, T>) -> T {
    (euclidean(z, w_n) - euclidean(z, w_a)).max(T::zero())
}

/// Subgradient 0 on the inactive side and at the kink.
pub fn eam_grad<T: Scalar>(z: ArrayView1<'_, T>, w_n: ArrayView1<'_, T>, w_a: ArrayView1<'_, T>) -> EamGrad<T> {
    let d_n = euclidean(z, w_n);
    let d_a = euclidean(z, w_a);
    let dim = z.len();
    if d_n - d_a <= T::zero() {
        return EamGrad {
            loss: T::zero(),
            d_z: Array1::zeros(dim),
            d_w_n: Array1::zeros(dim),
            d_w_a: Array1::zeros(dim),
        };
    }
    // active branch: d_n > d_a ≥ 0
    let u_n = (&z - &w_n).mapv(|v| v / d_n);
    let u_a = if d_a > T::zero() {
        (&z - &w_a).mapv(|v| v / d_a)
    } else {
        Array1::zeros(dim)
    };
    EamGrad {
        loss: d_n - d_a,
        d_z: &u_n - &u_a,
        d_w_n: u_n.mapv(|v| -v),
        d_w_a: u_a,
    }
}

#[derive(Debug, Clone)]
pub struct AlignGrad<T> {
    pub loss: T,
    pub d_w_m: Array1<T>,
    pub d_w_l: Array1<T>,
}

/// `λ · ‖ŵₘ − ŵₗ‖²`.
pub fn align_loss<T: Scalar>(w_m: ArrayView1<'_, T>, w_l: ArrayView1<'_, T>, lambda: T) -> T {
    let diff = &w_m - &w_l;
    lambda * diff.dot(&diff)
}

pub fn align_grad<T: Scalar>(w_m: ArrayView1<'_, T>, w_l: ArrayView1<'_, T>, lambda: T) -> AlignGrad<T> {
    let diff = &w_m - &w_l;
    let two_l = lambda + lambda;
    AlignGrad {
        loss: lambda * diff.dot(&diff),
        d_w_m: diff.mapv(|v| v * two_l),
        d_w_l: diff.mapv(|v| -v * two_l),
    }
}
