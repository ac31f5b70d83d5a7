use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::layers::{BlockTape, LayerNorm, LayerNormCache, ResidualBlock};
use crate::error::{Error, Result};
use crate::linalg::{norm, normalize, normalize_backward};
use crate::scalar::Scalar;

/// Frozen causal text tower. Sequences are token *embeddings*; the feature
/// is read at the last position, which callers fill with the end-of-text token.
#[derive(Debug, Clone)]
pub struct TextTransformer<T> {
    pub token_embedding: Array2<T>,
    pub positional: Array2<T>,
    pub blocks: Vec<ResidualBlock<T>>,
    pub ln_final: LayerNorm<T>,
    /// `[width, joint_dim]`, applied as `x · proj`.
    pub projection: Array2<T>,
}

/// Activations retained by [`TextTransformer::forward_cached`].
#[derive(Debug, Clone)]
pub struct TextTape<T> {
    blocks: Vec<BlockTape<T>>,
    ln_final: LayerNormCache<T>,
    feature: Array1<T>,
    raw_norm: T,
    seq_len: usize,
}

impl<T: Scalar> TextTransformer<T> {
    pub fn width(&self) -> usize {
        self.token_embedding.ncols()
    }

    pub fn vocab_size(&self) -> usize {
        self.token_embedding.nrows()
    }

    pub fn context_length(&self) -> usize {
        self.positional.nrows()
    }

    pub fn joint_dim(&self) -> usize {
        self.projection.ncols()
    }

    pub fn embed_token(&self, id: u32) -> ArrayView1<'_, T> {
        self.token_embedding.row(id as usize)
    }

    pub fn embed_ids(&self, ids: &[u32]) -> Array2<T> {
        let mut out = Array2::zeros((ids.len(), self.width()));
        for (mut row, &id) in out.rows_mut().into_iter().zip(ids) {
            row.assign(&self.embed_token(id));
        }
        out
    }

    fn check(&self, seq: ArrayView2<'_, T>) -> Result<()> {
        if seq.nrows() == 0 {
            return Err(Error::input("empty token sequence"));
        }
        if seq.nrows() > self.context_length() {
            return Err(Error::input(format!(
                "sequence of {} tokens exceeds context length {}",
                seq.nrows(),
                self.context_length()
            )));
        }
        if seq.ncols() != self.width() {
            return Err(Error::structural(format!(
                "embedding width {} does not match text width {}",
                seq.ncols(),
                self.width()
            )));
        }
        Ok(())
    }

    pub fn encode(&self, seq: ArrayView2<'_, T>) -> Result<Array1<T>> {
        self.check(seq)?;
        let n = seq.nrows();
        let mut x = &seq + &self.positional.slice(s![..n, ..]);
        for block in &self.blocks {
            x = block.forward(x.view(), true);
        }
        let pooled = self.ln_final.forward_row(x.row(n - 1));
        Ok(normalize(pooled.dot(&self.projection).view()))
    }

    pub fn forward_cached(&self, seq: ArrayView2<'_, T>) -> Result<(Array1<T>, TextTape<T>)> {
        self.check(seq)?;
        let n = seq.nrows();
        let mut x = &seq + &self.positional.slice(s![..n, ..]);
        let mut tapes = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, tape) = block.forward_cached(x.view(), true);
            tapes.push(tape);
            x = y;
        }
        let (pooled, ln_final) = self.ln_final.forward_cached(x.slice(s![n - 1..n, ..]));
        let pooled = pooled.index_axis_move(Axis(0), 0);
        let raw = pooled.dot(&self.projection);
        let raw_norm = norm(raw.view());
        let feature = normalize(raw.view());
        Ok((
            feature.clone(),
            TextTape {
                blocks: tapes,
                ln_final,
                feature,
                raw_norm,
                seq_len: n,
            },
        ))
    }

    /// Gradient of a scalar loss w.r.t. the input embedding sequence, given
    /// its gradient w.r.t. the unit-norm output feature.
    pub fn backward(&self, tape: &TextTape<T>, grad_feature: ArrayView1<'_, T>) -> Array2<T> {
        let d_raw = normalize_backward(tape.feature.view(), tape.raw_norm, grad_feature);
        let d_pooled = self.projection.dot(&d_raw);
        let d_last = self
            .ln_final
            .backward(&tape.ln_final, d_pooled.view().insert_axis(Axis(0)));
        let mut grad = Array2::<T>::zeros((tape.seq_len, self.width()));
        grad.row_mut(tape.seq_len - 1).assign(&d_last.row(0));
        for (block, bt) in self.blocks.iter().zip(&tape.blocks).rev() {
            grad = block.backward(bt, grad.view());
        }
        grad
    }
}
