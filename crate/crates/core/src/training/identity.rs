use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::backbone::TextEncoder;
use crate::error::{Error, Result};
use crate::linalg::{norm, normalize, normalize_backward};
use crate::scalar::Scalar;

/// Synthetic frozen text encoder whose feature is the normalized sum of
/// its input embeddings, so learnable tokens act directly on the feature.
#[derive(Debug, Clone)]
pub struct IdentityTextEncoder<T> {
    pub vocab: Array2<T>,
    pub context_length: usize,
}

pub struct IdentityTape<T> {
    feature: Array1<T>,
    raw_norm: T,
    len: usize,
}

impl<T: Scalar> IdentityTextEncoder<T> {
    /// Frozen vocabulary drawn from N(0, `std`²).
    pub fn random(vocab_size: usize, width: usize, context_length: usize, std: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, std).expect("positive std");
        Self {
            vocab: Array2::from_shape_simple_fn((vocab_size, width), || T::lit(dist.sample(&mut rng))),
            context_length,
        }
    }

    fn raw(&self, seq: ArrayView2<'_, T>) -> Result<Array1<T>> {
        if seq.nrows() > self.context_length {
            return Err(Error::input(format!(
                "sequence of {} tokens exceeds context length {}",
                seq.nrows(),
                self.context_length
            )));
        }
        Ok(seq.sum_axis(Axis(0)))
    }
}

impl<T: Scalar> TextEncoder<T> for IdentityTextEncoder<T> {
    type Tape = IdentityTape<T>;

    fn width(&self) -> usize {
        self.vocab.ncols()
    }

    fn context_length(&self) -> usize {
        self.context_length
    }

    fn embed_ids(&self, ids: &[u32]) -> Array2<T> {
        self.vocab.select(Axis(0), &ids.iter().map(|&i| i as usize).collect::<Vec<_>>())
    }

    fn encode(&self, seq: ArrayView2<'_, T>) -> Result<Array1<T>> {
        Ok(normalize(self.raw(seq)?.view()))
    }

    fn forward_cached(&self, seq: ArrayView2<'_, T>) -> Result<(Array1<T>, IdentityTape<T>)> {
        let raw = self.raw(seq)?;
        let feature = normalize(raw.view());
        Ok((
            feature.clone(),
            IdentityTape {
                feature,
                raw_norm: norm(raw.view()),
                len: seq.nrows(),
            },
        ))
    }

    fn backward(&self, tape: &IdentityTape<T>, grad_feature: ArrayView1<'_, T>) -> Array2<T> {
        let g = normalize_backward(tape.feature.view(), tape.raw_norm, grad_feature);
        let width = g.len();
        g.insert_axis(Axis(0))
            .broadcast((tape.len, width))
            .expect("row broadcast")
            .to_owned()
    }
}
