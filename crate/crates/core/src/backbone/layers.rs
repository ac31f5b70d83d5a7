//! Pre-norm transformer pieces: forward passes for inference and cached
//! forward/backward passes that propagate gradients to the block *inputs*
//! only. Weights are frozen, so no parameter gradients are ever formed.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// Exact erf-based GELU (OpenCLIP default).
    Gelu,
    /// `x * sigmoid(1.702 x)` (original OpenAI weights).
    QuickGelu,
}

impl Activation {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Gelu => {
                let half = T::lit(0.5);
                half * x * (T::one() + (x / T::SQRT_2()).erf())
            }
            Activation::QuickGelu => x * sigmoid(T::lit(1.702) * x),
        }
    }

    pub fn derivative<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Gelu => {
                let half = T::lit(0.5);
                let cdf = half * (T::one() + (x / T::SQRT_2()).erf());
                let pdf = (-half * x * x).exp() / (T::lit(2.0) * T::PI()).sqrt();
                cdf + x * pdf
            }
            Activation::QuickGelu => {
                let a = T::lit(1.702);
                let sg = sigmoid(a * x);
                sg + a * x * sg * (T::one() - sg)
            }
        }
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// `y = x Wᵀ + b` with `W` stored as `[out, in]`.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: Array2<T>,
    pub bias: Option<Array1<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(weight: Array2<T>, bias: Option<Array1<T>>) -> Self {
        Self { weight, bias }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: ArrayView2<'_, T>) -> Array2<T> {
        let mut y = x.dot(&self.weight.t());
        if let Some(b) = &self.bias {
            y += b;
        }
        y
    }

    pub fn backward_input(&self, grad_y: ArrayView2<'_, T>) -> Array2<T> {
        grad_y.dot(&self.weight)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm<T> {
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
    pub eps: T,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    xhat: Array2<T>,
    rstd: Array1<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(gamma: Array1<T>, beta: Array1<T>) -> Self {
        Self {
            gamma,
            beta,
            eps: T::lit(1e-5),
        }
    }

    pub fn forward(&self, x: ArrayView2<'_, T>) -> Array2<T> {
        self.forward_cached(x).0
    }

    pub fn forward_row(&self, x: ArrayView1<'_, T>) -> Array1<T> {
        self.forward(x.insert_axis(Axis(0))).index_axis_move(Axis(0), 0)
    }

    pub fn forward_cached(&self, x: ArrayView2<'_, T>) -> (Array2<T>, LayerNormCache<T>) {
        let d = T::from_len(x.ncols());
        let mut xhat = x.to_owned();
        let mut rstd = Array1::<T>::zeros(x.nrows());
        for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
            let mu = row.sum() / d;
            row.mapv_inplace(|v| v - mu);
            let var = row.dot(&row) / d;
            *r = T::one() / (var + self.eps).sqrt();
            let rr = *r;
            row.mapv_inplace(|v| v * rr);
        }
        let y = &xhat * &self.gamma + &self.beta;
        (y, LayerNormCache { xhat, rstd })
    }

    pub fn backward(&self, cache: &LayerNormCache<T>, grad_y: ArrayView2<'_, T>) -> Array2<T> {
        let d = T::from_len(grad_y.ncols());
        let mut dx = &grad_y * &self.gamma;
        for ((mut g, xh), &r) in dx
            .rows_mut()
            .into_iter()
            .zip(cache.xhat.rows())
            .zip(cache.rstd.iter())
        {
            let mean_g = g.sum() / d;
            let mean_gx = g.dot(&xh) / d;
            Zip::from(&mut g)
                .and(&xh)
                .for_each(|gi, &xi| *gi = r * (*gi - mean_g - xi * mean_gx));
        }
        dx
    }
}

/// Row-wise softmax of `scores`, optionally restricted to the causal lower triangle.
pub fn softmax_rows<T: Scalar>(scores: &mut Array2<T>, causal: bool) {
    for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
        let limit = if causal { i + 1 } else { row.len() };
        let mx = row
            .slice(s![..limit])
            .fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut sum = T::zero();
        for (j, v) in row.iter_mut().enumerate() {
            if j < limit {
                *v = (*v - mx).exp();
                sum += *v;
            } else {
                *v = T::zero();
            }
        }
        row.mapv_inplace(|v| v / sum);
    }
}

/// Scaled dot-product attention weights `softmax(q kᵀ · scale)` for one head.
pub fn attention_weights<T: Scalar>(
    q: ArrayView2<'_, T>,
    k: ArrayView2<'_, T>,
    causal: bool,
) -> Array2<T> {
    let scale = T::one() / T::from_len(q.ncols()).sqrt();
    let mut scores = q.dot(&k.t());
    scores.mapv_inplace(|v| v * scale);
    softmax_rows(&mut scores, causal);
    scores
}

/// Multi-head self-attention with a fused `[q; k; v]` input projection.
#[derive(Debug, Clone)]
pub struct Attention<T> {
    pub in_proj: Linear<T>,
    pub out_proj: Linear<T>,
    pub heads: usize,
}

#[derive(Debug, Clone)]
struct AttentionCache<T> {
    qkv: Array2<T>,
    probs: Vec<Array2<T>>,
}

impl<T: Scalar> Attention<T> {
    pub fn width(&self) -> usize {
        self.out_proj.out_dim()
    }

    fn head_dim(&self) -> usize {
        self.width() / self.heads
    }

    fn head_cols(&self, part: usize, head: usize) -> std::ops::Range<usize> {
        let w = self.width();
        let hd = self.head_dim();
        let start = part * w + head * hd;
        start..start + hd
    }

    /// Mixes `qkv` rows with per-head attention; returns the concatenated
    /// head outputs (before the output projection) and the weights.
    fn mix(
        &self,
        qkv: &Array2<T>,
        query_part: usize,
        key_part: usize,
        causal: bool,
    ) -> (Array2<T>, Vec<Array2<T>>) {
        let n = qkv.nrows();
        let mut out = Array2::<T>::zeros((n, self.width()));
        let mut probs = Vec::with_capacity(self.heads);
        let hd = self.head_dim();
        for h in 0..self.heads {
            let q = qkv.slice(s![.., self.head_cols(query_part, h)]);
            let k = qkv.slice(s![.., self.head_cols(key_part, h)]);
            let v = qkv.slice(s![.., self.head_cols(2, h)]);
            let p = attention_weights(q, k, causal);
            out.slice_mut(s![.., h * hd..(h + 1) * hd])
                .assign(&p.dot(&v));
            probs.push(p);
        }
        (out, probs)
    }

    /// Standard QK attention; also returns the fused `qkv` projection.
    pub fn forward_with_qkv(&self, x: ArrayView2<'_, T>, causal: bool) -> (Array2<T>, Array2<T>) {
        let qkv = self.in_proj.forward(x);
        let (mixed, _) = self.mix(&qkv, 0, 1, causal);
        (self.out_proj.forward(mixed.view()), qkv)
    }

    /// `Proj(Attn(V, V, V))`: every head attends with its value projection
    /// standing in for both queries and keys.
    pub fn value_value(&self, qkv: &Array2<T>) -> Array2<T> {
        let (mixed, _) = self.mix(qkv, 2, 2, false);
        self.out_proj.forward(mixed.view())
    }

    /// Per-head V-V attention weights, exposed for inspection.
    pub fn value_value_weights(&self, qkv: &Array2<T>) -> Vec<Array2<T>> {
        self.mix(qkv, 2, 2, false).1
    }

    fn forward_cached(&self, x: ArrayView2<'_, T>, causal: bool) -> (Array2<T>, AttentionCache<T>) {
        let qkv = self.in_proj.forward(x);
        let (mixed, probs) = self.mix(&qkv, 0, 1, causal);
        (self.out_proj.forward(mixed.view()), AttentionCache { qkv, probs })
    }

    fn backward(&self, cache: &AttentionCache<T>, grad_out: ArrayView2<'_, T>) -> Array2<T> {
        let d_mixed = self.out_proj.backward_input(grad_out);
        let n = grad_out.nrows();
        let hd = self.head_dim();
        let scale = T::one() / T::from_len(hd).sqrt();
        let mut d_qkv = Array2::<T>::zeros((n, 3 * self.width()));
        for (h, p) in cache.probs.iter().enumerate() {
            let q = cache.qkv.slice(s![.., self.head_cols(0, h)]);
            let k = cache.qkv.slice(s![.., self.head_cols(1, h)]);
            let v = cache.qkv.slice(s![.., self.head_cols(2, h)]);
            let d_o = d_mixed.slice(s![.., h * hd..(h + 1) * hd]);
            let d_p = d_o.dot(&v.t());
            let d_v = p.t().dot(&d_o);
            // softmax backward: dS = P ⊙ (dP − rowsum(dP ⊙ P))
            let mut d_s = &d_p * p;
            for (mut row, prow) in d_s.rows_mut().into_iter().zip(p.rows()) {
                let total = row.sum();
                Zip::from(&mut row)
                    .and(&prow)
                    .for_each(|r, &pv| *r -= pv * total);
            }
            d_s.mapv_inplace(|v| v * scale);
            d_qkv
                .slice_mut(s![.., self.head_cols(0, h)])
                .assign(&d_s.dot(&k));
            d_qkv
                .slice_mut(s![.., self.head_cols(1, h)])
                .assign(&d_s.t().dot(&q));
            d_qkv.slice_mut(s![.., self.head_cols(2, h)]).assign(&d_v);
        }
        self.in_proj.backward_input(d_qkv.view())
    }
}

/// One pre-norm residual block: `x + attn(ln_1 x)`, then `+ mlp(ln_2 ·)`.
#[derive(Debug, Clone)]
pub struct ResidualBlock<T> {
    pub ln_1: LayerNorm<T>,
    pub attn: Attention<T>,
    pub ln_2: LayerNorm<T>,
    pub fc: Linear<T>,
    pub proj: Linear<T>,
    pub activation: Activation,
}

/// Saved activations of one block for the input-gradient pass.
#[derive(Debug, Clone)]
pub struct BlockTape<T> {
    ln_1: LayerNormCache<T>,
    attn: AttentionCache<T>,
    ln_2: LayerNormCache<T>,
    pre_act: Array2<T>,
}

impl<T: Scalar> ResidualBlock<T> {
    pub fn width(&self) -> usize {
        self.attn.width()
    }

    pub fn forward(&self, x: ArrayView2<'_, T>, causal: bool) -> Array2<T> {
        self.forward_with_qkv(x, causal).0
    }

    /// Block output plus the fused `qkv` projection of `ln_1(x)`.
    pub fn forward_with_qkv(&self, x: ArrayView2<'_, T>, causal: bool) -> (Array2<T>, Array2<T>) {
        let h = self.ln_1.forward(x);
        let (a, qkv) = self.attn.forward_with_qkv(h.view(), causal);
        let x1 = &x + &a;
        let h2 = self.ln_2.forward(x1.view());
        let u = self.fc.forward(h2.view());
        let act = u.mapv(|v| self.activation.apply(v));
        let m = self.proj.forward(act.view());
        (x1 + m, qkv)
    }

    pub fn forward_cached(&self, x: ArrayView2<'_, T>, causal: bool) -> (Array2<T>, BlockTape<T>) {
        let (h, ln_1) = self.ln_1.forward_cached(x);
        let (a, attn) = self.attn.forward_cached(h.view(), causal);
        let x1 = &x + &a;
        let (h2, ln_2) = self.ln_2.forward_cached(x1.view());
        let pre_act = self.fc.forward(h2.view());
        let act = pre_act.mapv(|v| self.activation.apply(v));
        let m = self.proj.forward(act.view());
        (
            x1 + m,
            BlockTape {
                ln_1,
                attn,
                ln_2,
                pre_act,
            },
        )
    }

    pub fn backward(&self, tape: &BlockTape<T>, grad_y: ArrayView2<'_, T>) -> Array2<T> {
        // MLP branch
        let d_act = self.proj.backward_input(grad_y);
        let d_pre = Zip::from(&d_act)
            .and(&tape.pre_act)
            .map_collect(|&g, &u| g * self.activation.derivative(u));
        let d_h2 = self.fc.backward_input(d_pre.view());
        let d_x1 = &grad_y + &self.ln_2.backward(&tape.ln_2, d_h2.view());
        // attention branch
        let d_h = self.attn.backward(&tape.attn, d_x1.view());
        &d_x1 + &self.ln_1.backward(&tape.ln_1, d_h.view())
    }
}
