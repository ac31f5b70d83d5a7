//! On-disk cache of encoder outputs keyed by `(image path, architecture id)`.
//!
//! File layout: magic `FSADFEAT`, little-endian `u32` format version,
//! `u32` header length, a JSON header with shapes and element width, then
//! the raw little-endian values (CLS, patch map, taps in layer order).

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DualEncoderOutput, FeatureGrid};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"FSADFEAT";
pub const CACHE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct FeatureCache {
    dir: PathBuf,
    architecture_id: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    element_bytes: usize,
    cls: usize,
    patch: [usize; 3],
    taps: Vec<(usize, [usize; 3])>,
}

impl FeatureCache {
    pub fn new(dir: impl Into<PathBuf>, architecture_id: &str) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self {
            dir,
            architecture_id: architecture_id.to_string(),
        })
    }

    pub fn entry_path(&self, image: &Path) -> PathBuf {
        let mut h = Sha256::new();
        h.update(image.to_string_lossy().as_bytes());
        h.update([0u8]);
        h.update(self.architecture_id.as_bytes());
        h.update(CACHE_FORMAT_VERSION.to_le_bytes());
        let key: String = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
        self.dir.join(format!("{key}.feat"))
    }

    /// Returns `None` on a miss, a stale version, or a width mismatch.
    pub fn get<T: Scalar>(&self, image: &Path) -> Option<DualEncoderOutput<T>> {
        let bytes = std::fs::read(self.entry_path(image)).ok()?;
        decode(&bytes)
    }

    pub fn put<T: Scalar>(&self, image: &Path, out: &DualEncoderOutput<T>) -> Result<()> {
        let path = self.entry_path(image);
        let tmp = path.with_extension("tmp");
        let bytes = encode(out)?;
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }
}

fn encode<T: Scalar>(out: &DualEncoderOutput<T>) -> Result<Vec<u8>> {
    let element_bytes = std::mem::size_of::<T>();
    let shape = |g: &FeatureGrid<T>| [g.height, g.width, g.dim()];
    let header = Header {
        element_bytes,
        cls: out.cls_feature.len(),
        patch: shape(&out.patch_map),
        taps: out.layer_taps.iter().map(|(&l, g)| (l, shape(g))).collect(),
    };
    let header = serde_json::to_vec(&header)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CACHE_FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    let values = out
        .cls_feature
        .iter()
        .chain(out.patch_map.cells.iter())
        .chain(out.layer_taps.values().flat_map(|g| g.cells.iter()));
    for v in values {
        if element_bytes == 8 {
            buf.extend_from_slice(&v.f64().to_le_bytes());
        } else {
            buf.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        }
    }
    Ok(buf)
}

fn decode<T: Scalar>(bytes: &[u8]) -> Option<DualEncoderOutput<T>> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return None;
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().ok()?);
    if version != CACHE_FORMAT_VERSION {
        return None;
    }
    let hlen = u32::from_le_bytes(bytes[12..16].try_into().ok()?) as usize;
    let header: Header = serde_json::from_slice(bytes.get(16..16 + hlen)?).ok()?;
    if header.element_bytes != std::mem::size_of::<T>() {
        return None;
    }
    let mut data = bytes[16 + hlen..].chunks_exact(header.element_bytes).map(|c| {
        if c.len() == 8 {
            T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes")))
        } else {
            T::lit(f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        }
    });
    let mut take = |n: usize| -> Option<Vec<T>> {
        let v: Vec<T> = data.by_ref().take(n).collect();
        (v.len() == n).then_some(v)
    };
    let cls = Array1::from(take(header.cls)?);
    let grid = |take: &mut dyn FnMut(usize) -> Option<Vec<T>>, [h, w, d]: [usize; 3]| {
        let cells = Array2::from_shape_vec((h * w, d), take(h * w * d)?).ok()?;
        FeatureGrid::new(h, w, cells).ok()
    };
    let patch_map = grid(&mut take, header.patch)?;
    let mut layer_taps = BTreeMap::new();
    for (layer, shape) in header.taps {
        layer_taps.insert(layer, grid(&mut take, shape)?);
    }
    Some(DualEncoderOutput {
        cls_feature: cls,
        patch_map,
        layer_taps,
    })
}
