use std::path::Path;

use image::{ImageBuffer, Luma, Rgb, RgbImage};
use ndarray::Array2;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

/// Linear `[0,1] → [0, 65535]` grayscale image of a map.
pub fn heatmap_to_png16<T: Scalar>(map: &Array2<T>) -> ImageBuffer<Luma<u16>, Vec<u16>> {
    let (h, w) = map.dim();
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let v = map[[y as usize, x as usize]].f64().clamp(0.0, 1.0);
        Luma([(v * 65535.0).round() as u16])
    })
}

pub fn write_heatmap_png<T: Scalar>(path: &Path, map: &Array2<T>) -> Result<()> {
    ensure_parent(path)?;
    heatmap_to_png16(map)
        .save(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Blue→cyan→yellow→red ramp.
fn jet(v: f64) -> [f64; 3] {
    let c = |x: f64| x.clamp(0.0, 1.0);
    [
        c(1.5 - (4.0 * v - 3.0).abs()),
        c(1.5 - (4.0 * v - 2.0).abs()),
        c(1.5 - (4.0 * v - 1.0).abs()),
    ]
}

/// Half-and-half blend of `base` with the colour-mapped score map.
pub fn overlay<T: Scalar>(base: &RgbImage, map: &Array2<T>) -> Result<RgbImage> {
    let (h, w) = map.dim();
    if base.dimensions() != (w as u32, h as u32) {
        return Err(Error::structural(format!(
            "overlay base is {:?}, map is {w}×{h}",
            base.dimensions()
        )));
    }
    Ok(ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let heat = jet(map[[y as usize, x as usize]].f64().clamp(0.0, 1.0));
        let px = base.get_pixel(x, y).0;
        let mix = |i: usize| (0.5 * px[i] as f64 + 0.5 * 255.0 * heat[i]).round() as u8;
        Rgb([mix(0), mix(1), mix(2)])
    }))
}

pub fn write_overlay_png<T: Scalar>(path: &Path, base: &RgbImage, map: &Array2<T>) -> Result<()> {
    ensure_parent(path)?;
    overlay(base, map)?.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreRow {
    pub image_path: String,
    pub s_img: f64,
}

pub fn write_score_csv(path: &Path, rows: &[ScoreRow]) -> Result<()> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Serde(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Serde(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn png16_endpoints() {
        let img = heatmap_to_png16(&array![[0.0f64, 0.5, 1.0]]);
        assert_eq!(img.get_pixel(0, 0).0, [0]);
        assert_eq!(img.get_pixel(1, 0).0, [32768]);
        assert_eq!(img.get_pixel(2, 0).0, [65535]);
    }

    #[test]
    fn csv_has_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("scores.csv");
        write_score_csv(
            &p,
            &[ScoreRow {
                image_path: "a,b.png".into(),
                s_img: 0.25,
            }],
        )
        .unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text, "image_path,s_img\n\"a,b.png\",0.25\n");
    }
}
