//! Weight I/O for the frozen two-tower model.
//!
//! Checkpoints are safetensors files using OpenCLIP state-dict names
//! (`visual.transformer.resblocks.0.attn.in_proj_weight`, `token_embedding.weight`,
//! ...). Head counts and the MLP activation are read from the header
//! metadata when present; otherwise heads default to `width / 64` and the
//! activation to exact GELU.

use std::collections::HashMap;
use std::path::Path;

use ndarray::{Array, Array1, Array2, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};

use super::layers::{Activation, Attention, LayerNorm, Linear, ResidualBlock};
use super::text::TextTransformer;
use super::vision::VisionTransformer;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Architecture hyper-parameters of both towers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub image_size: usize,
    pub patch_size: usize,
    pub vision_width: usize,
    pub vision_layers: usize,
    pub vision_heads: usize,
    pub text_width: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    pub context_length: usize,
    pub vocab_size: usize,
    pub joint_dim: usize,
    pub mlp_ratio: usize,
    pub activation: Activation,
}

impl ArchSpec {
    /// ViT-B/16+ at 240 px with its 640-wide text tower.
    pub fn vit_b16_plus_240() -> Self {
        Self {
            image_size: 240,
            patch_size: 16,
            vision_width: 896,
            vision_layers: 12,
            vision_heads: 14,
            text_width: 640,
            text_layers: 12,
            text_heads: 10,
            context_length: 77,
            vocab_size: 49408,
            joint_dim: 640,
            mlp_ratio: 4,
            activation: Activation::Gelu,
        }
    }

    /// A small configuration for tests and smoke runs. Keeps 8 blocks so
    /// the default taps {3, 8} exist.
    pub fn tiny() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            vision_width: 16,
            vision_layers: 8,
            vision_heads: 2,
            text_width: 16,
            text_layers: 2,
            text_heads: 2,
            context_length: 24,
            vocab_size: 256,
            joint_dim: 12,
            mlp_ratio: 4,
            activation: Activation::Gelu,
        }
    }
}

/// Overrides for values a checkpoint cannot express through tensor shapes.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LoadOptions {
    pub vision_heads: Option<usize>,
    pub text_heads: Option<usize>,
    pub activation: Option<Activation>,
}

#[derive(Debug, Clone)]
pub struct ClipModel<T> {
    pub arch: ArchSpec,
    pub vision: VisionTransformer<T>,
    pub text: TextTransformer<T>,
    /// Learned log inverse temperature; τ = exp(−logit_scale).
    pub logit_scale: T,
}

impl<T: Scalar> ClipModel<T> {
    pub fn temperature(&self) -> T {
        (-self.logit_scale).exp()
    }

    /// Randomly initialized model (zero-mean Gaussian weights, unit norms).
    pub fn random(arch: &ArchSpec, seed: u64) -> Result<Self> {
        validate_arch(arch)?;
        let mut init = Init::new(seed);
        let vw = arch.vision_width;
        let tw = arch.text_width;
        let grid = arch.image_size / arch.patch_size;
        let vision = VisionTransformer {
            image_size: arch.image_size,
            patch_size: arch.patch_size,
            patch_embed: init.matrix(vw, 3 * arch.patch_size * arch.patch_size),
            class_embedding: init.vector(vw, 1.0 / (vw as f64).sqrt()),
            positional: init.scaled(grid * grid + 1, vw, 1.0 / (vw as f64).sqrt()),
            ln_pre: init.layer_norm(vw),
            blocks: (0..arch.vision_layers)
                .map(|_| init.block(vw, arch.vision_heads, arch.mlp_ratio, arch.activation))
                .collect(),
            ln_post: init.layer_norm(vw),
            proj: init.scaled(vw, arch.joint_dim, 1.0 / (vw as f64).sqrt()),
        };
        let text = TextTransformer {
            token_embedding: init.scaled(arch.vocab_size, tw, 0.02),
            positional: init.scaled(arch.context_length, tw, 0.01),
            blocks: (0..arch.text_layers)
                .map(|_| init.block(tw, arch.text_heads, arch.mlp_ratio, arch.activation))
                .collect(),
            ln_final: init.layer_norm(tw),
            projection: init.scaled(tw, arch.joint_dim, 1.0 / (tw as f64).sqrt()),
        };
        Ok(Self {
            arch: arch.clone(),
            vision,
            text,
            logit_scale: T::lit((1.0f64 / 0.07).ln()),
        })
    }

    pub fn load(path: &Path, opts: &LoadOptions) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, opts).map_err(|e| e.context(path.display()))
    }

    pub fn from_bytes(bytes: &[u8], opts: &LoadOptions) -> Result<Self> {
        let (_, meta) = SafeTensors::read_metadata(bytes).map_err(ckpt)?;
        let header = meta.metadata().clone().unwrap_or_default();
        let st = SafeTensors::deserialize(bytes).map_err(ckpt)?;
        let reader = Reader { st: &st };

        let class_embedding: Array1<T> = reader.vector("visual.class_embedding")?;
        let vw = class_embedding.len();
        let conv = reader.tensor("visual.conv1.weight")?;
        if conv.ndim() != 4 || conv.shape()[1] != 3 || conv.shape()[2] != conv.shape()[3] {
            return Err(Error::Checkpoint(format!(
                "visual.conv1.weight has shape {:?}, expected [width, 3, p, p]",
                conv.shape()
            )));
        }
        let patch = conv.shape()[2];
        let patch_embed = conv
            .into_shape_with_order((vw, 3 * patch * patch))
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let vpos: Array2<T> = reader.matrix("visual.positional_embedding")?;
        let grid = ((vpos.nrows() - 1) as f64).sqrt().round() as usize;
        if grid * grid + 1 != vpos.nrows() {
            return Err(Error::Checkpoint(format!(
                "{} positions do not form a square patch grid plus class token",
                vpos.nrows()
            )));
        }
        let proj: Array2<T> = reader.matrix("visual.proj")?;

        let token_embedding: Array2<T> = reader.matrix("token_embedding.weight")?;
        let tw = token_embedding.ncols();
        let tpos: Array2<T> = reader.matrix("positional_embedding")?;
        let text_projection: Array2<T> = reader.matrix("text_projection")?;

        let activation = opts
            .activation
            .or_else(|| header.get("activation").and_then(|a| parse_activation(a)))
            .unwrap_or(Activation::Gelu);
        let heads = |key: &str, over: Option<usize>, width: usize| -> Result<usize> {
            let h = over
                .or_else(|| header.get(key).and_then(|v| v.parse().ok()))
                .unwrap_or((width / 64).max(1));
            if h == 0 || !width.is_multiple_of(h) {
                return Err(Error::Checkpoint(format!("{h} heads do not divide width {width}")));
            }
            Ok(h)
        };
        let vision_heads = heads("vision_heads", opts.vision_heads, vw)?;
        let text_heads = heads("text_heads", opts.text_heads, tw)?;

        let vision_layers = count_blocks(&st, "visual.transformer.resblocks.");
        let text_layers = count_blocks(&st, "transformer.resblocks.");
        let load_blocks = |prefix: &str, n: usize, h: usize| -> Result<Vec<ResidualBlock<T>>> {
            (0..n)
                .map(|i| reader.block(&format!("{prefix}{i}."), h, activation))
                .collect()
        };
        let vision_blocks = load_blocks("visual.transformer.resblocks.", vision_layers, vision_heads)?;
        let mlp_ratio = vision_blocks
            .first()
            .map(|b| b.fc.out_dim() / vw.max(1))
            .unwrap_or(4);

        let logit_scale = match st.tensor("logit_scale") {
            Ok(_) => {
                let v: Array<T, IxDyn> = reader.tensor("logit_scale")?;
                v.iter().next().copied().unwrap_or(T::lit(100.0f64.ln()))
            }
            Err(_) => T::lit(100.0f64.ln()),
        };

        let arch = ArchSpec {
            image_size: grid * patch,
            patch_size: patch,
            vision_width: vw,
            vision_layers,
            vision_heads,
            text_width: tw,
            text_layers,
            text_heads,
            context_length: tpos.nrows(),
            vocab_size: token_embedding.nrows(),
            joint_dim: proj.ncols(),
            mlp_ratio,
            activation,
        };
        if text_projection.ncols() != arch.joint_dim {
            return Err(Error::Checkpoint(format!(
                "text projection width {} differs from image projection width {}",
                text_projection.ncols(),
                arch.joint_dim
            )));
        }
        Ok(Self {
            vision: VisionTransformer {
                image_size: arch.image_size,
                patch_size: patch,
                patch_embed,
                class_embedding,
                positional: vpos,
                ln_pre: reader.layer_norm("visual.ln_pre")?,
                blocks: vision_blocks,
                ln_post: reader.layer_norm("visual.ln_post")?,
                proj,
            },
            text: TextTransformer {
                token_embedding,
                positional: tpos,
                blocks: load_blocks("transformer.resblocks.", text_layers, text_heads)?,
                ln_final: reader.layer_norm("ln_final")?,
                projection: text_projection,
            },
            logit_scale,
            arch,
        })
    }

    /// Serializes to safetensors with OpenCLIP names, in `f64` when `T` is
    /// double precision and `f32` otherwise.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
        let mut put = |name: &str, shape: Vec<usize>, data: Vec<f64>| {
            out.push((name.to_string(), shape, data));
        };
        let flat = |a: &Array2<T>| a.iter().map(|v| v.f64()).collect::<Vec<_>>();
        let flat1 = |a: &Array1<T>| a.iter().map(|v| v.f64()).collect::<Vec<_>>();
        let v = &self.vision;
        let p = v.patch_size;
        put("visual.class_embedding", vec![v.width()], flat1(&v.class_embedding));
        put("visual.conv1.weight", vec![v.width(), 3, p, p], flat(&v.patch_embed));
        put("visual.positional_embedding", shape2(&v.positional), flat(&v.positional));
        put("visual.proj", shape2(&v.proj), flat(&v.proj));
        let put_ln = |name: &str, ln: &LayerNorm<T>, put: &mut dyn FnMut(&str, Vec<usize>, Vec<f64>)| {
            put(&format!("{name}.weight"), vec![ln.gamma.len()], flat1(&ln.gamma));
            put(&format!("{name}.bias"), vec![ln.beta.len()], flat1(&ln.beta));
        };
        put_ln("visual.ln_pre", &v.ln_pre, &mut put);
        put_ln("visual.ln_post", &v.ln_post, &mut put);
        let t = &self.text;
        put("token_embedding.weight", shape2(&t.token_embedding), flat(&t.token_embedding));
        put("positional_embedding", shape2(&t.positional), flat(&t.positional));
        put("text_projection", shape2(&t.projection), flat(&t.projection));
        put_ln("ln_final", &t.ln_final, &mut put);
        put("logit_scale", vec![], vec![self.logit_scale.f64()]);
        let blocks = v
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| (format!("visual.transformer.resblocks.{i}."), b))
            .chain(
                t.blocks
                    .iter()
                    .enumerate()
                    .map(|(i, b)| (format!("transformer.resblocks.{i}."), b)),
            );
        for (prefix, b) in blocks {
            put_ln(&format!("{prefix}ln_1"), &b.ln_1, &mut put);
            put_ln(&format!("{prefix}ln_2"), &b.ln_2, &mut put);
            let mut put_lin = |name: &str, l: &Linear<T>| {
                put(&format!("{name}weight"), shape2(&l.weight), flat(&l.weight));
                if let Some(bias) = &l.bias {
                    put(&format!("{name}bias"), vec![bias.len()], flat1(bias));
                }
            };
            put_lin(&format!("{prefix}attn.in_proj_"), &b.attn.in_proj);
            put_lin(&format!("{prefix}attn.out_proj."), &b.attn.out_proj);
            put_lin(&format!("{prefix}mlp.c_fc."), &b.fc);
            put_lin(&format!("{prefix}mlp.c_proj."), &b.proj);
        }

        let double = std::mem::size_of::<T>() == 8;
        let dtype = if double { Dtype::F64 } else { Dtype::F32 };
        let encoded: Vec<(String, Vec<usize>, Vec<u8>)> = out
            .into_iter()
            .map(|(name, shape, data)| {
                let bytes = if double {
                    data.iter().flat_map(|x| x.to_le_bytes()).collect()
                } else {
                    data.iter().flat_map(|&x| (x as f32).to_le_bytes()).collect()
                };
                (name, shape, bytes)
            })
            .collect();
        let views = encoded
            .iter()
            .map(|(name, shape, bytes)| {
                safetensors::tensor::TensorView::new(dtype, shape.clone(), bytes)
                    .map(|v| (name.clone(), v))
                    .map_err(ckpt)
            })
            .collect::<Result<Vec<_>>>()?;
        let meta: HashMap<String, String> = [
            ("vision_heads".to_string(), self.arch.vision_heads.to_string()),
            ("text_heads".to_string(), self.arch.text_heads.to_string()),
            (
                "activation".to_string(),
                match self.arch.activation {
                    Activation::Gelu => "gelu",
                    Activation::QuickGelu => "quick_gelu",
                }
                .to_string(),
            ),
        ]
        .into_iter()
        .collect();
        safetensors::serialize(views, &Some(meta)).map_err(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

fn validate_arch(a: &ArchSpec) -> Result<()> {
    let bad = |m: String| Err(Error::input(m));
    if a.patch_size == 0 || !a.image_size.is_multiple_of(a.patch_size) {
        return bad(format!("image size {} not divisible by patch {}", a.image_size, a.patch_size));
    }
    if a.vision_heads == 0 || !a.vision_width.is_multiple_of(a.vision_heads) {
        return bad(format!("{} heads do not divide vision width {}", a.vision_heads, a.vision_width));
    }
    if a.text_heads == 0 || !a.text_width.is_multiple_of(a.text_heads) {
        return bad(format!("{} heads do not divide text width {}", a.text_heads, a.text_width));
    }
    if a.vocab_size < 3 || a.context_length < 2 {
        return bad("vocabulary and context length too small".into());
    }
    Ok(())
}

fn shape2<T>(a: &Array2<T>) -> Vec<usize> {
    a.shape().to_vec()
}

fn parse_activation(s: &str) -> Option<Activation> {
    match s {
        "gelu" => Some(Activation::Gelu),
        "quick_gelu" | "quickgelu" => Some(Activation::QuickGelu),
        _ => None,
    }
}

fn ckpt(e: safetensors::SafeTensorError) -> Error {
    Error::Checkpoint(e.to_string())
}

fn count_blocks(st: &SafeTensors<'_>, prefix: &str) -> usize {
    let mut n = 0;
    while st.tensor(&format!("{prefix}{n}.ln_1.weight")).is_ok() {
        n += 1;
    }
    n
}

struct Reader<'a, 'b> {
    st: &'a SafeTensors<'b>,
}

impl Reader<'_, '_> {
    fn tensor<T: Scalar>(&self, name: &str) -> Result<Array<T, IxDyn>> {
        let view = self
            .st
            .tensor(name)
            .map_err(|_| Error::Checkpoint(format!("missing tensor '{name}'")))?;
        let data = view.data();
        let values: Vec<T> = match view.dtype() {
            Dtype::F32 => data
                .chunks_exact(4)
                .map(|c| T::lit(f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]]))))
                .collect(),
            Dtype::F64 => data
                .chunks_exact(8)
                .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
                .collect(),
            Dtype::F16 => data
                .chunks_exact(2)
                .map(|c| T::lit(half::f16::from_le_bytes([c[0], c[1]]).to_f64()))
                .collect(),
            Dtype::BF16 => data
                .chunks_exact(2)
                .map(|c| T::lit(half::bf16::from_le_bytes([c[0], c[1]]).to_f64()))
                .collect(),
            other => {
                return Err(Error::Checkpoint(format!(
                    "tensor '{name}' has unsupported dtype {other:?}"
                )))
            }
        };
        Array::from_shape_vec(IxDyn(view.shape()), values)
            .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))
    }

    fn matrix<T: Scalar>(&self, name: &str) -> Result<Array2<T>> {
        self.tensor(name)?
            .into_dimensionality()
            .map_err(|e| Error::Checkpoint(format!("{name}: expected a matrix ({e})")))
    }

    fn vector<T: Scalar>(&self, name: &str) -> Result<Array1<T>> {
        self.tensor(name)?
            .into_dimensionality()
            .map_err(|e| Error::Checkpoint(format!("{name}: expected a vector ({e})")))
    }

    fn layer_norm<T: Scalar>(&self, prefix: &str) -> Result<LayerNorm<T>> {
        Ok(LayerNorm::new(
            self.vector(&format!("{prefix}.weight"))?,
            self.vector(&format!("{prefix}.bias"))?,
        ))
    }

    fn linear<T: Scalar>(&self, weight: &str, bias: &str) -> Result<Linear<T>> {
        let b = if self.st.tensor(bias).is_ok() {
            Some(self.vector(bias)?)
        } else {
            None
        };
        Ok(Linear::new(self.matrix(weight)?, b))
    }

    fn block<T: Scalar>(&self, p: &str, heads: usize, activation: Activation) -> Result<ResidualBlock<T>> {
        Ok(ResidualBlock {
            ln_1: self.layer_norm(&format!("{p}ln_1"))?,
            attn: Attention {
                in_proj: self.linear(&format!("{p}attn.in_proj_weight"), &format!("{p}attn.in_proj_bias"))?,
                out_proj: self.linear(
                    &format!("{p}attn.out_proj.weight"),
                    &format!("{p}attn.out_proj.bias"),
                )?,
                heads,
            },
            ln_2: self.layer_norm(&format!("{p}ln_2"))?,
            fc: self.linear(&format!("{p}mlp.c_fc.weight"), &format!("{p}mlp.c_fc.bias"))?,
            proj: self.linear(&format!("{p}mlp.c_proj.weight"), &format!("{p}mlp.c_proj.bias"))?,
            activation,
        })
    }
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn scaled<T: Scalar>(&mut self, rows: usize, cols: usize, std: f64) -> Array2<T> {
        let dist = Normal::new(0.0, std).expect("positive std");
        Array2::from_shape_simple_fn((rows, cols), || T::lit(dist.sample(&mut self.rng)))
    }

    fn matrix<T: Scalar>(&mut self, rows: usize, cols: usize) -> Array2<T> {
        self.scaled(rows, cols, 1.0 / (cols as f64).sqrt())
    }

    fn vector<T: Scalar>(&mut self, n: usize, std: f64) -> Array1<T> {
        let dist = Normal::new(0.0, std).expect("positive std");
        Array1::from_shape_simple_fn(n, || T::lit(dist.sample(&mut self.rng)))
    }

    fn layer_norm<T: Scalar>(&mut self, width: usize) -> LayerNorm<T> {
        LayerNorm::new(Array1::ones(width), Array1::zeros(width))
    }

    fn linear<T: Scalar>(&mut self, out: usize, inp: usize) -> Linear<T> {
        let w = self.matrix(out, inp);
        let b = self.vector(out, 0.01);
        Linear::new(w, Some(b))
    }

    fn block<T: Scalar>(&mut self, width: usize, heads: usize, ratio: usize, act: Activation) -> ResidualBlock<T> {
        ResidualBlock {
            ln_1: self.layer_norm(width),
            attn: Attention {
                in_proj: self.linear(3 * width, width),
                out_proj: self.linear(width, width),
                heads,
            },
            ln_2: self.layer_norm(width),
            fc: self.linear(ratio * width, width),
            proj: self.linear(width, ratio * width),
            activation: act,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_through_safetensors_preserves_weights_and_arch() {
        let m = ClipModel::<f32>::random(&ArchSpec::tiny(), 5).unwrap();
        let bytes = m.to_bytes().unwrap();
        let back = ClipModel::<f32>::from_bytes(&bytes, &LoadOptions::default()).unwrap();
        assert_eq!(back.arch, m.arch);
        assert_eq!(back.vision.patch_embed, m.vision.patch_embed);
        assert_eq!(back.text.blocks[1].fc.weight, m.text.blocks[1].fc.weight);
        assert_eq!(back.logit_scale, m.logit_scale);
        // f32 weights widen exactly
        let wide = ClipModel::<f64>::from_bytes(&bytes, &LoadOptions::default()).unwrap();
        assert_eq!(wide.vision.proj[[3, 2]], f64::from(m.vision.proj[[3, 2]]));
    }

    #[test]
    fn missing_tensor_is_reported_by_name() {
        let bytes = safetensors::serialize(
            Vec::<(String, safetensors::tensor::TensorView<'_>)>::new(),
            &None,
        )
        .unwrap();
        let err = ClipModel::<f32>::from_bytes(&bytes, &LoadOptions::default()).unwrap_err();
        assert!(err.to_string().contains("visual.class_embedding"), "{err}");
    }

    #[test]
    fn bad_arch_rejected() {
        let mut a = ArchSpec::tiny();
        a.image_size = 30;
        assert!(ClipModel::<f32>::random(&a, 0).is_err());
    }
}
