//! Prompt-guided and vision-guided anomaly scores and their fusion.

mod export;
mod resample;

use ndarray::{Array2, ArrayView1, Zip};
use serde::{Deserialize, Serialize};

pub use export::{heatmap_to_png16, overlay, write_heatmap_png, write_overlay_png, write_score_csv, ScoreRow};
pub use resample::{gaussian_smooth, upsample_bilinear};

use crate::backbone::{DualEncoderOutput, FeatureGrid};
use crate::error::{Error, Result};
use crate::memory::FeatureMemory;
use crate::prompts::Prototypes;
use crate::scalar::Scalar;
use crate::training::TrainedModel;

pub const FUSE_EPS: f64 = 1e-12;

/// Anomaly-side two-way softmax of `z` against the normal and anomaly
/// prototypes: larger means more anomalous.
pub fn prompt_score<T: Scalar>(z: ArrayView1<'_, T>, protos: &Prototypes<T>, tau: T) -> T {
    let ln = z.dot(&protos.w_n) / tau;
    let la = z.dot(&protos.w_a) / tau;
    let mx = ln.max(la);
    let en = (ln - mx).exp();
    let ea = (la - mx).exp();
    ea / (en + ea)
}

pub fn prompt_score_map<T: Scalar>(patch_map: &FeatureGrid<T>, protos: &Prototypes<T>, tau: T) -> Array2<T> {
    Array2::from_shape_fn((patch_map.height, patch_map.width), |(r, c)| {
        prompt_score(patch_map.cell(r, c), protos, tau)
    })
}

/// Harmonic-style fusion `1 / (1/(a+ε) + 1/(b+ε))`, which is `ab/(a+b)`
/// away from zero and 0 when either input is 0.
pub fn fuse<T: Scalar>(a: T, b: T) -> T {
    let eps = T::lit(FUSE_EPS);
    if a <= T::zero() || b <= T::zero() {
        return T::zero();
    }
    T::one() / (T::one() / (a + eps) + T::one() / (b + eps))
}

pub fn fuse_maps<T: Scalar>(a: &Array2<T>, b: &Array2<T>) -> Result<Array2<T>> {
    if a.dim() != b.dim() {
        return Err(Error::structural(format!(
            "cannot fuse maps of shape {:?} and {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(Zip::from(a).and(b).map_collect(|&x, &y| fuse(x, y)))
}

/// Which score branches are active.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoringOptions {
    /// Vision-guided (memory) branch.
    pub vad: bool,
    /// Prompt-guided branch.
    pub prompts: bool,
    /// Gaussian smoothing width in output pixels; 0 disables smoothing.
    pub sigma: f64,
    /// Side length of the square output map.
    pub output_size: usize,
}

impl Default for ScoringOptions {
    fn default() -> Self {
        Self {
            vad: true,
            prompts: true,
            sigma: 4.0,
            output_size: 240,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct ScoreBundle<T> {
    /// Prompt-guided image score.
    pub s_t: Option<T>,
    /// Prompt-guided patch map.
    pub m_t: Option<Array2<T>>,
    /// Vision-guided patch map.
    pub m_v: Option<Array2<T>>,
    /// Final map at image resolution.
    pub m_pix: Array2<T>,
    /// Final image score.
    pub s_img: T,
}

fn max_of<T: Scalar>(m: &Array2<T>) -> T {
    m.iter().fold(T::neg_infinity(), |acc, &v| acc.max(v))
}

fn postprocess<T: Scalar>(map: &Array2<T>, opts: &ScoringOptions) -> Array2<T> {
    let up = upsample_bilinear(map, opts.output_size, opts.output_size);
    if opts.sigma > 0.0 {
        gaussian_smooth(&up, opts.sigma)
    } else {
        up
    }
}

/// Scores one encoded query image.
pub fn score_image<T: Scalar>(
    query: &DualEncoderOutput<T>,
    model: Option<&TrainedModel<T>>,
    memory: Option<&FeatureMemory<T>>,
    tau: T,
    opts: &ScoringOptions,
) -> Result<ScoreBundle<T>> {
    let (s_t, m_t) = if opts.prompts {
        let model = model.ok_or_else(|| Error::input("prompt scoring enabled but no trained prompts"))?;
        (
            Some(prompt_score(query.cls_feature.view(), &model.image.prototypes, tau)),
            Some(prompt_score_map(&query.patch_map, &model.pixel.prototypes, tau)),
        )
    } else {
        (None, None)
    };
    let m_v = if opts.vad {
        let mem = memory.ok_or_else(|| Error::input("vision scoring enabled but no feature memory"))?;
        Some(mem.vision_score_map(query)?)
    } else {
        None
    };
    let (patch, s_img) = match (&m_t, &m_v, s_t) {
        (Some(mt), Some(mv), Some(st)) => (fuse_maps(mv, mt)?, fuse(max_of(mv), st)),
        (Some(mt), None, Some(st)) => (mt.clone(), st),
        (None, Some(mv), _) => (mv.clone(), max_of(mv)),
        _ => return Err(Error::input("both prompt and vision scoring are disabled")),
    };
    Ok(ScoreBundle {
        s_t,
        m_t,
        m_v,
        m_pix: postprocess(&patch, opts),
        s_img,
    })
}
