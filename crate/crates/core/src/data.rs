//! MVTec-style dataset trees, image preprocessing and k-shot sampling.
//!
//! Expected layout per category:
//!
//! ```text
//! <root>/<category>/train/good/*.png
//! <root>/<category>/test/<defect or good>/*.png
//! <root>/<category>/ground_truth/<defect>/<stem>_mask.png
//! ```

use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{DynamicImage, GrayImage, ImageBuffer, Rgb, RgbImage};
use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

const IMAGE_EXTENSIONS: [&str; 5] = ["png", "jpg", "jpeg", "bmp", "tif"];
const GOOD: &str = "good";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Normal,
    Anomaly,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestItem {
    pub path: PathBuf,
    pub label: Label,
    /// Test subdirectory name (`good` for normals).
    pub defect: String,
    pub mask: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategorySpec {
    pub name: String,
    pub root: PathBuf,
    pub train_normals: Vec<PathBuf>,
    pub test_items: Vec<TestItem>,
    /// Defect subdirectory names under `test/`, `good` excluded.
    pub anomaly_labels: Vec<String>,
    /// Whether the tree carries ground-truth masks at all.
    pub has_masks: bool,
}

impl CategorySpec {
    /// True when every anomalous test item has a mask.
    pub fn pixel_ready(&self) -> bool {
        self.has_masks
            && self
                .test_items
                .iter()
                .all(|t| t.label == Label::Normal || t.mask.is_some())
    }
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    Ok(read_dir_sorted(dir)?
        .into_iter()
        .filter(|p| p.is_file() && is_image(p))
        .collect())
}

fn find_mask(gt_dir: &Path, image: &Path) -> Option<PathBuf> {
    let stem = image.file_stem()?.to_str()?;
    let candidates = [format!("{stem}_mask"), stem.to_string()];
    for base in &candidates {
        for ext in IMAGE_EXTENSIONS {
            let p = gt_dir.join(format!("{base}.{ext}"));
            if p.is_file() {
                return Some(p);
            }
        }
    }
    None
}

/// Category names under `root`: every subdirectory holding `train/good`.
pub fn list_categories(root: &Path) -> Result<Vec<String>> {
    Ok(read_dir_sorted(root)?
        .into_iter()
        .filter(|p| p.join("train").join(GOOD).is_dir())
        .filter_map(|p| p.file_name().and_then(|n| n.to_str()).map(str::to_string))
        .collect())
}

/// Indexes `<root>/<name>` with lexicographically sorted file lists.
pub fn scan_category(root: &Path, name: &str) -> Result<CategorySpec> {
    let dir = root.join(name);
    if !dir.is_dir() {
        return Err(Error::input(format!("category directory {} does not exist", dir.display())));
    }
    let train_dir = dir.join("train").join(GOOD);
    if !train_dir.is_dir() {
        return Err(Error::input(format!("missing {}", train_dir.display())));
    }
    let train_normals = list_images(&train_dir)?;
    if train_normals.is_empty() {
        return Err(Error::input(format!("no images in {}", train_dir.display())));
    }
    let test_dir = dir.join("test");
    if !test_dir.is_dir() {
        return Err(Error::input(format!("missing {}", test_dir.display())));
    }
    let gt_root = dir.join("ground_truth");
    let has_masks = gt_root.is_dir();
    let mut test_items = Vec::new();
    let mut anomaly_labels = Vec::new();
    for sub in read_dir_sorted(&test_dir)?.into_iter().filter(|p| p.is_dir()) {
        let defect = sub
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::input(format!("non-UTF-8 directory {}", sub.display())))?
            .to_string();
        let label = if defect == GOOD { Label::Normal } else { Label::Anomaly };
        if label == Label::Anomaly {
            anomaly_labels.push(defect.clone());
        }
        for path in list_images(&sub)? {
            let mask = match label {
                Label::Anomaly if has_masks => {
                    let m = find_mask(&gt_root.join(&defect), &path);
                    if m.is_none() {
                        log::warn!("no mask for {}; excluded from pixel metrics", path.display());
                    }
                    m
                }
                _ => None,
            };
            test_items.push(TestItem {
                path,
                label,
                defect: defect.clone(),
                mask,
            });
        }
    }
    if test_items.is_empty() {
        return Err(Error::input(format!("no test images under {}", test_dir.display())));
    }
    Ok(CategorySpec {
        name: name.to_string(),
        root: root.to_path_buf(),
        train_normals,
        test_items,
        anomaly_labels,
        has_masks,
    })
}

/// `k` distinct training images drawn uniformly with a seeded ChaCha8
/// stream, returned in their listing order.
pub fn sample_k_shot(spec: &CategorySpec, k: usize, seed: u64) -> Result<Vec<PathBuf>> {
    let n = spec.train_normals.len();
    if k == 0 || k > n {
        return Err(Error::input(format!(
            "cannot draw {k} shots from {n} training images of '{}'",
            spec.name
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, n, k).into_vec();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| spec.train_normals[i].clone()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessSpec {
    pub size: u32,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for PreprocessSpec {
    fn default() -> Self {
        Self {
            size: 240,
            mean: [0.48145466, 0.4578275, 0.40821073],
            std: [0.26862954, 0.26130258, 0.27577711],
        }
    }
}

impl PreprocessSpec {
    fn resized_dims(&self, w: u32, h: u32) -> (u32, u32) {
        let s = self.size as f64;
        if w <= h {
            (self.size, (s * h as f64 / w as f64) as u32)
        } else {
            ((s * w as f64 / h as f64) as u32, self.size)
        }
    }

    fn crop_origin(&self, w: u32, h: u32) -> (u32, u32) {
        let off = |len: u32| ((len - self.size) as f64 / 2.0).round() as u32;
        (off(w), off(h))
    }
}

fn decode(bytes: &[u8], path: &Path) -> Result<DynamicImage> {
    image::load_from_memory(bytes).map_err(|e| Error::input(format!("cannot decode {}: {e}", path.display())))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Bicubic short-edge resize and centre crop in `[0,1]` floating point.
fn resize_crop(img: &DynamicImage, spec: &PreprocessSpec) -> ImageBuffer<Rgb<f32>, Vec<f32>> {
    let rgb = img.to_rgb32f();
    let (nw, nh) = spec.resized_dims(rgb.width(), rgb.height());
    let resized = if (nw, nh) == rgb.dimensions() {
        rgb
    } else {
        imageops::resize(&rgb, nw, nh, FilterType::CatmullRom)
    };
    let (x, y) = spec.crop_origin(nw, nh);
    imageops::crop_imm(&resized, x, y, spec.size, spec.size).to_image()
}

/// Decoded bytes to a standardized `[3, size, size]` tensor.
pub fn preprocess<T: Scalar>(bytes: &[u8], spec: &PreprocessSpec) -> Result<Array3<T>> {
    preprocess_named(bytes, Path::new("<memory>"), spec)
}

fn preprocess_named<T: Scalar>(bytes: &[u8], path: &Path, spec: &PreprocessSpec) -> Result<Array3<T>> {
    let img = resize_crop(&decode(bytes, path)?, spec);
    let n = spec.size as usize;
    Ok(Array3::from_shape_fn((3, n, n), |(c, y, x)| {
        let v = img.get_pixel(x as u32, y as u32).0[c] as f64;
        T::lit((v - spec.mean[c]) / spec.std[c])
    }))
}

pub fn load_image<T: Scalar>(path: &Path, spec: &PreprocessSpec) -> Result<Array3<T>> {
    preprocess_named(&read(path)?, path, spec)
}

/// The resized and cropped image as 8-bit RGB, for overlays.
pub fn load_display_image(path: &Path, spec: &PreprocessSpec) -> Result<RgbImage> {
    let img = resize_crop(&decode(&read(path)?, path)?, spec);
    Ok(ImageBuffer::from_fn(spec.size, spec.size, |x, y| {
        let p = img.get_pixel(x, y).0;
        Rgb(p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
    }))
}

/// Nearest-neighbour resize and crop of a mask, binarized at 0.5.
pub fn preprocess_mask(bytes: &[u8], path: &Path, spec: &PreprocessSpec) -> Result<Array2<u8>> {
    let gray: GrayImage = decode(bytes, path)?.to_luma8();
    let (nw, nh) = spec.resized_dims(gray.width(), gray.height());
    let resized = imageops::resize(&gray, nw, nh, FilterType::Nearest);
    let (x, y) = spec.crop_origin(nw, nh);
    let crop = imageops::crop_imm(&resized, x, y, spec.size, spec.size).to_image();
    let n = spec.size as usize;
    Ok(Array2::from_shape_fn((n, n), |(r, c)| {
        u8::from(crop.get_pixel(c as u32, r as u32).0[0] as f64 / 255.0 >= 0.5)
    }))
}

pub fn load_mask(path: &Path, spec: &PreprocessSpec) -> Result<Array2<u8>> {
    preprocess_mask(&read(path)?, path, spec)
}
