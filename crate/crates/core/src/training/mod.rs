//! Prompt optimization against normal visual features.

mod identity;
pub mod losses;
mod optim;

use ndarray::{s, Array1, Array2, ArrayView1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use identity::{IdentityTape, IdentityTextEncoder};
pub use losses::{
    align_grad, align_loss, clip_contrastive_grad, clip_contrastive_loss, clip_loss_from_logits,
    eam_grad, eam_loss,
};
pub use optim::Sgd;

use crate::backbone::TextEncoder;
use crate::error::{Error, Result};
use crate::prompts::{compute_prototypes, PromptBank, PromptId, PromptKind, PrototypeGrads, Prototypes};
use crate::scalar::Scalar;

/// Which visual features a bank is trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    /// Global (CLS) features.
    Image,
    /// Every patch feature of every shot.
    Pixel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Weight of the alignment term.
    pub lambda: f64,
    pub steps: usize,
    pub seed: u64,
    /// Explicit anomaly margin term on/off.
    pub eam: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.002,
            momentum: 0.9,
            weight_decay: 0.0005,
            lambda: 0.001,
            steps: 1000,
            seed: 0,
            eam: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::input(format!("lambda must be a finite value ≥ 0, got {}", self.lambda)));
        }
        for (name, v) in [("lr", self.lr), ("momentum", self.momentum), ("weight_decay", self.weight_decay)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::input(format!("{name} must be a finite value ≥ 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct PromptFeature<T> {
    pub id: PromptId,
    pub text: String,
    pub feature: Array1<T>,
}

/// A trained bank: learned tokens, frozen prompt features and prototypes.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct TrainedBank<T> {
    pub level: Level,
    pub bank: PromptBank<T>,
    pub prompts: Vec<PromptFeature<T>>,
    pub prototypes: Prototypes<T>,
    pub loss_trace: Vec<f64>,
}

/// Image-level and pixel-level banks trained for one object.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct TrainedModel<T> {
    pub image: TrainedBank<T>,
    pub pixel: TrainedBank<T>,
    pub config: TrainConfig,
}

/// Loss and per-feature gradients for one step, before they are pulled
/// back through the text encoder.
#[derive(Debug, Clone)]
pub struct StepObjective<T> {
    pub loss: T,
    pub clip: T,
    pub eam: T,
    pub align: T,
    /// d loss / d prompt feature, in prompt order.
    pub feature_grads: Vec<Array1<T>>,
}

/// Batch objective `mean_z (L_clip + L_eam) + L_align` as a function of the
/// prompt features.
pub fn objective<T: Scalar>(
    kinds: &[PromptKind],
    features: &[Array1<T>],
    normal_features: &[ArrayView1<'_, T>],
    tau: T,
    lambda: T,
    use_eam: bool,
) -> Result<StepObjective<T>> {
    if normal_features.is_empty() {
        return Err(Error::input("training needs at least one normal feature"));
    }
    let tagged: Vec<(PromptKind, Array1<T>)> =
        kinds.iter().copied().zip(features.iter().cloned()).collect();
    let protos = compute_prototypes(&tagged)?;
    let dim = protos.w_n.len();
    let mut grads = PrototypeGrads::zeros(dim, protos.anomaly.len());
    let mut clip = T::zero();
    let mut eam = T::zero();
    let inv_b = T::one() / T::from_len(normal_features.len());
    for z in normal_features {
        let g = clip_contrastive_grad(z.view(), protos.w_n.view(), &protos.anomaly, tau)?;
        clip += g.loss;
        grads.w_n.scaled_add(inv_b, &g.d_w_n);
        for (acc, d) in grads.anomaly.iter_mut().zip(&g.d_anomaly) {
            acc.scaled_add(inv_b, d);
        }
        if use_eam {
            let e = eam_grad(z.view(), protos.w_n.view(), protos.w_a.view());
            eam += e.loss;
            grads.w_n.scaled_add(inv_b, &e.d_w_n);
            grads.w_a.scaled_add(inv_b, &e.d_w_a);
        }
    }
    clip *= inv_b;
    eam *= inv_b;
    let mut align = T::zero();
    if let (Some(w_m), Some(w_l)) = (&protos.w_m, &protos.w_l) {
        if lambda > T::zero() {
            let a = align_grad(w_m.view(), w_l.view(), lambda);
            align = a.loss;
            grads.w_m = a.d_w_m;
            grads.w_l = a.d_w_l;
        }
    }
    Ok(StepObjective {
        loss: clip + eam + align,
        clip,
        eam,
        align,
        feature_grads: protos.backward(kinds, &grads),
    })
}

/// Loss value and gradient w.r.t. every learnable block of `bank`.
pub fn loss_and_grad<T: Scalar, E: TextEncoder<T>>(
    bank: &PromptBank<T>,
    encoder: &E,
    normal_features: &[ArrayView1<'_, T>],
    tau: T,
    lambda: T,
    use_eam: bool,
) -> Result<(StepObjective<T>, Vec<Array2<T>>)> {
    let assembled = bank.assemble_embeddings();
    let forward: Vec<(Array1<T>, E::Tape)> = assembled
        .par_iter()
        .map(|p| {
            encoder
                .forward_cached(p.sequence.view())
                .map_err(|e| e.context(format!("prompt '{}'", bank.describe(p.id))))
        })
        .collect::<Result<_>>()?;
    let kinds: Vec<PromptKind> = assembled.iter().map(|p| p.id.kind).collect();
    let features: Vec<Array1<T>> = forward.iter().map(|(f, _)| f.clone()).collect();
    let obj = objective(&kinds, &features, normal_features, tau, lambda, use_eam)?;
    let seq_grads: Vec<Array2<T>> = forward
        .par_iter()
        .zip(obj.feature_grads.par_iter())
        .map(|((_, tape), g)| encoder.backward(tape, g.view()))
        .collect();
    let mut param_grads: Vec<Array2<T>> =
        bank.params().iter().map(|p| Array2::zeros(p.raw_dim())).collect();
    for (p, g) in assembled.iter().zip(&seq_grads) {
        for slot in &p.slots {
            let rows = param_grads[slot.param].nrows();
            param_grads[slot.param] += &g.slice(s![slot.row..slot.row + rows, ..]);
        }
    }
    Ok((obj, param_grads))
}

/// Freezes a bank: encodes every prompt and computes its prototypes.
pub fn freeze_bank<T: Scalar, E: TextEncoder<T>>(
    bank: PromptBank<T>,
    encoder: &E,
    level: Level,
    loss_trace: Vec<f64>,
) -> Result<TrainedBank<T>> {
    let encoded = bank.encode_all(encoder)?;
    let tagged: Vec<(PromptKind, Array1<T>)> =
        encoded.iter().map(|(id, f)| (id.kind, f.clone())).collect();
    let prototypes = compute_prototypes(&tagged)?;
    let prompts = encoded
        .into_iter()
        .map(|(id, feature)| PromptFeature {
            id,
            text: bank.describe(id),
            feature,
        })
        .collect();
    Ok(TrainedBank {
        level,
        bank,
        prompts,
        prototypes,
        loss_trace,
    })
}

/// Runs `cfg.steps` full-batch SGD steps on the learnable blocks of
/// `bank`, then freezes it.
pub fn train<T: Scalar, E: TextEncoder<T>>(
    mut bank: PromptBank<T>,
    encoder: &E,
    normal_features: &[ArrayView1<'_, T>],
    tau: T,
    level: Level,
    cfg: &TrainConfig,
) -> Result<TrainedBank<T>> {
    cfg.validate()?;
    if normal_features.is_empty() {
        return Err(Error::input("training needs at least one normal feature"));
    }
    let lambda = T::lit(cfg.lambda);
    let mut opt = Sgd::new(T::lit(cfg.lr), T::lit(cfg.momentum), T::lit(cfg.weight_decay));
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (obj, grads) = loss_and_grad(&bank, encoder, normal_features, tau, lambda, cfg.eam)?;
        let loss = obj.loss.f64();
        trace.push(loss);
        if !loss.is_finite() || grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            let tail = trace[trace.len().saturating_sub(10)..].to_vec();
            return Err(Error::Divergence {
                step,
                loss,
                trace_tail: tail,
            });
        }
        if step % 100 == 0 || step + 1 == cfg.steps {
            log::debug!(
                "{} {:?} step {step}: loss {loss:.6} (clip {:.6}, eam {:.6}, align {:.6})",
                bank.object_name,
                level,
                obj.clip.f64(),
                obj.eam.f64(),
                obj.align.f64()
            );
        }
        opt.step(bank.params_mut(), &grads);
    }
    freeze_bank(bank, encoder, level, trace)
}
