use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, ArrayView2, ArrayView3, Axis};

use super::layers::{LayerNorm, ResidualBlock};
use super::{DualEncoderOutput, FeatureGrid};
use crate::error::{Error, Result};
use crate::linalg::normalize;
use crate::scalar::Scalar;

/// Frozen ViT image tower: conv patch embedding, class token, learned
/// positions, pre-norm blocks, and a final projection into the joint space.
#[derive(Debug, Clone)]
pub struct VisionTransformer<T> {
    pub image_size: usize,
    pub patch_size: usize,
    /// Conv weight flattened to `[width, 3 · patch · patch]` in `(c, ky, kx)` order.
    pub patch_embed: Array2<T>,
    pub class_embedding: Array1<T>,
    pub positional: Array2<T>,
    pub ln_pre: LayerNorm<T>,
    pub blocks: Vec<ResidualBlock<T>>,
    pub ln_post: LayerNorm<T>,
    /// `[width, joint_dim]`, applied as `x · proj`.
    pub proj: Array2<T>,
}

/// One step of the two-stream encoder.
///
/// The original stream goes through the block untouched. The local stream
/// adds `Proj(Attn(V, V, V))` to its previous value, where `V` comes from
/// the block's own `qkv` projection of the *original* stream.
pub fn vv_attention_block<T: Scalar>(
    block: &ResidualBlock<T>,
    z_ori_prev: ArrayView2<'_, T>,
    z_prev: ArrayView2<'_, T>,
) -> Result<(Array2<T>, Array2<T>)> {
    if z_ori_prev.dim() != z_prev.dim() {
        return Err(Error::structural(format!(
            "stream shapes differ: original {:?} vs local {:?}",
            z_ori_prev.dim(),
            z_prev.dim()
        )));
    }
    if z_prev.ncols() != block.width() {
        return Err(Error::structural(format!(
            "token width {} does not match block width {}",
            z_prev.ncols(),
            block.width()
        )));
    }
    let (z_ori, qkv) = block.forward_with_qkv(z_ori_prev, false);
    let z = &z_prev + &block.attn.value_value(&qkv);
    Ok((z_ori, z))
}

impl<T: Scalar> VisionTransformer<T> {
    pub fn width(&self) -> usize {
        self.class_embedding.len()
    }

    pub fn joint_dim(&self) -> usize {
        self.proj.ncols()
    }

    pub fn grid_size(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Token sequence after patch embedding, class token, positions and `ln_pre`.
    pub fn embed(&self, image: ArrayView3<'_, T>) -> Result<Array2<T>> {
        let (c, h, w) = image.dim();
        if c != 3 || h != self.image_size || w != self.image_size {
            return Err(Error::structural(format!(
                "expected a 3×{0}×{0} image, got {c}×{h}×{w}",
                self.image_size
            )));
        }
        let p = self.patch_size;
        let g = self.grid_size();
        let mut patches = Array2::<T>::zeros((g * g, 3 * p * p));
        for gy in 0..g {
            for gx in 0..g {
                let mut row = patches.row_mut(gy * g + gx);
                let tile = image.slice(s![.., gy * p..(gy + 1) * p, gx * p..(gx + 1) * p]);
                for (dst, &src) in row.iter_mut().zip(tile.iter()) {
                    *dst = src;
                }
            }
        }
        let tokens = patches.dot(&self.patch_embed.t());
        let mut x = Array2::<T>::zeros((g * g + 1, self.width()));
        x.row_mut(0).assign(&self.class_embedding);
        x.slice_mut(s![1.., ..]).assign(&tokens);
        x += &self.positional;
        Ok(self.ln_pre.forward(x.view()))
    }

    fn project(&self, token: ndarray::ArrayView1<'_, T>) -> Array1<T> {
        let pooled = self.ln_post.forward_row(token);
        normalize(pooled.dot(&self.proj).view())
    }

    /// Unmodified encoder: the pretrained CLS embedding with no surgery.
    pub fn encode_cls(&self, image: ArrayView3<'_, T>) -> Result<Array1<T>> {
        let mut x = self.embed(image)?;
        for block in &self.blocks {
            x = block.forward(x.view(), false);
        }
        Ok(self.project(x.row(0)))
    }

    /// Runs both streams through every block. Taps are 1-indexed block
    /// outputs of the local (V-V) stream, CLS token excluded, unnormalized.
    pub fn encode_dual(&self, image: ArrayView3<'_, T>, tap_layers: &[usize]) -> Result<DualEncoderOutput<T>> {
        for &t in tap_layers {
            if t == 0 || t > self.num_blocks() {
                return Err(Error::structural(format!(
                    "tap layer {t} outside 1..={}",
                    self.num_blocks()
                )));
            }
        }
        let g = self.grid_size();
        let x0 = self.embed(image)?;
        let mut z_ori = x0.clone();
        let mut z = x0;
        let mut layer_taps = BTreeMap::new();
        for (i, block) in self.blocks.iter().enumerate() {
            let (next_ori, next) = vv_attention_block(block, z_ori.view(), z.view())?;
            z_ori = next_ori;
            z = next;
            if tap_layers.contains(&(i + 1)) {
                layer_taps.insert(i + 1, FeatureGrid::new(g, g, z.slice(s![1.., ..]).to_owned())?);
            }
        }
        let cls = self.project(z_ori.row(0));
        let mut cells = Array2::<T>::zeros((g * g, self.joint_dim()));
        for (mut dst, src) in cells.rows_mut().into_iter().zip(z.axis_iter(Axis(0)).skip(1)) {
            dst.assign(&self.project(src));
        }
        Ok(DualEncoderOutput {
            cls_feature: cls,
            patch_map: FeatureGrid::new(g, g, cells)?,
            layer_taps,
        })
    }
}
