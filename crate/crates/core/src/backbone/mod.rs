//! Frozen contrastive vision-language backbone with a parallel V-V branch.

pub mod cache;
pub mod checkpoint;
pub mod layers;
pub mod text;
pub mod tokenizer;
pub mod vision;

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};

pub use cache::FeatureCache;
pub use checkpoint::{ArchSpec, ClipModel, LoadOptions};
pub use layers::Activation;
pub use text::{TextTape, TextTransformer};
pub use tokenizer::{ClipBpeTokenizer, HashTokenizer, Tokenizer};
pub use vision::{vv_attention_block, VisionTransformer};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const DEFAULT_ARCHITECTURE_ID: &str = "ViT-B/16+ at input 240";
pub const DEFAULT_TAP_LAYERS: [usize; 2] = [3, 8];

/// `h × w` grid of feature vectors stored row-major as `[h·w, dim]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct FeatureGrid<T> {
    pub height: usize,
    pub width: usize,
    pub cells: Array2<T>,
}

impl<T: Scalar> FeatureGrid<T> {
    pub fn new(height: usize, width: usize, cells: Array2<T>) -> Result<Self> {
        if cells.nrows() != height * width {
            return Err(Error::structural(format!(
                "{} cells cannot fill a {height}×{width} grid",
                cells.nrows()
            )));
        }
        Ok(Self {
            height,
            width,
            cells,
        })
    }

    pub fn dim(&self) -> usize {
        self.cells.ncols()
    }

    pub fn len(&self) -> usize {
        self.cells.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.nrows() == 0
    }

    pub fn cell(&self, row: usize, col: usize) -> ArrayView1<'_, T> {
        self.cells.row(row * self.width + col)
    }
}

/// Per-image output of the two-stream encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct DualEncoderOutput<T> {
    /// Unit-norm CLS embedding from the untouched original stream.
    pub cls_feature: Array1<T>,
    /// Unit-norm joint-space patch embeddings from the final V-V stream.
    pub patch_map: FeatureGrid<T>,
    /// Raw V-V stream patch tokens after each tapped block (1-indexed).
    pub layer_taps: BTreeMap<usize, FeatureGrid<T>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub architecture_id: String,
    pub num_blocks: usize,
    pub tap_layers: Vec<usize>,
    pub joint_dim: usize,
    pub temperature: f64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tap_layers.is_empty() {
            return Err(Error::input("at least one tap layer is required"));
        }
        if let Some(&bad) = self
            .tap_layers
            .iter()
            .find(|&&t| t == 0 || t > self.num_blocks)
        {
            return Err(Error::input(format!(
                "tap layer {bad} outside 1..={}",
                self.num_blocks
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::input(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Differentiable frozen text encoder: maps a token-embedding sequence to a
/// unit-norm joint-space feature and back-propagates to the embeddings.
pub trait TextEncoder<T: Scalar>: Sync {
    type Tape: Send + Sync;

    fn width(&self) -> usize;
    fn context_length(&self) -> usize;
    fn embed_ids(&self, ids: &[u32]) -> Array2<T>;
    fn encode(&self, seq: ArrayView2<'_, T>) -> Result<Array1<T>>;
    fn forward_cached(&self, seq: ArrayView2<'_, T>) -> Result<(Array1<T>, Self::Tape)>;
    fn backward(&self, tape: &Self::Tape, grad_feature: ArrayView1<'_, T>) -> Array2<T>;
}

impl<T: Scalar> TextEncoder<T> for TextTransformer<T> {
    type Tape = TextTape<T>;

    fn width(&self) -> usize {
        TextTransformer::width(self)
    }

    fn context_length(&self) -> usize {
        TextTransformer::context_length(self)
    }

    fn embed_ids(&self, ids: &[u32]) -> Array2<T> {
        TextTransformer::embed_ids(self, ids)
    }

    fn encode(&self, seq: ArrayView2<'_, T>) -> Result<Array1<T>> {
        TextTransformer::encode(self, seq)
    }

    fn forward_cached(&self, seq: ArrayView2<'_, T>) -> Result<(Array1<T>, TextTape<T>)> {
        TextTransformer::forward_cached(self, seq)
    }

    fn backward(&self, tape: &TextTape<T>, grad_feature: ArrayView1<'_, T>) -> Array2<T> {
        TextTransformer::backward(self, tape, grad_feature)
    }
}

/// A loaded model, its tokenizer, and the encoder settings. Immutable
/// after construction; share it across threads by reference.
pub struct Backbone<T> {
    pub model: ClipModel<T>,
    pub tokenizer: Box<dyn Tokenizer>,
    pub config: EncoderConfig,
}

impl<T: Scalar> Backbone<T> {
    /// `temperature = None` uses the checkpoint's learned logit scale.
    pub fn new(
        model: ClipModel<T>,
        tokenizer: Box<dyn Tokenizer>,
        architecture_id: &str,
        tap_layers: &[usize],
        temperature: Option<f64>,
    ) -> Result<Self> {
        let mut taps = tap_layers.to_vec();
        taps.sort_unstable();
        taps.dedup();
        let config = EncoderConfig {
            architecture_id: architecture_id.to_string(),
            num_blocks: model.vision.num_blocks(),
            tap_layers: taps,
            joint_dim: model.vision.joint_dim(),
            temperature: temperature.unwrap_or_else(|| model.temperature().f64()),
        };
        config.validate()?;
        Ok(Self {
            model,
            tokenizer,
            config,
        })
    }

    pub fn temperature(&self) -> T {
        T::lit(self.config.temperature)
    }

    pub fn text(&self) -> &TextTransformer<T> {
        &self.model.text
    }

    pub fn encode_image(&self, image: ArrayView3<'_, T>) -> Result<DualEncoderOutput<T>> {
        self.model.vision.encode_dual(image, &self.config.tap_layers)
    }

    pub fn encode_text(&self, seq: ArrayView2<'_, T>) -> Result<Array1<T>> {
        self.model.text.encode(seq)
    }
}
