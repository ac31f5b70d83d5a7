//! Detection and segmentation metrics and their aggregation over seeds.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_FPR_CAP: f64 = 0.3;

fn check_lengths(scores: usize, labels: usize) -> Result<()> {
    if scores != labels {
        return Err(Error::structural(format!("{scores} scores but {labels} labels")));
    }
    Ok(())
}

fn check_finite(scores: &[f64]) -> Result<()> {
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::input("scores contain NaN"));
    }
    Ok(())
}

/// Indices sorted by descending score.
fn descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// Ranking AUROC with midranks for ties.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores.len(), labels.len())?;
    check_finite(scores)?;
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::input("AUROC needs both positive and negative labels"));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += midrank * idx[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let p = pos as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

/// Average precision: `Σ (Rᵢ − Rᵢ₋₁) Pᵢ` over distinct thresholds.
pub fn aupr(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores.len(), labels.len())?;
    check_finite(scores)?;
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 {
        return Err(Error::input("AUPR needs at least one positive label"));
    }
    let idx = descending(scores);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let t = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == t {
            if labels[idx[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

/// 8-connected component labels (1-based, 0 = background) and the count.
pub fn connected_components(mask: &Array2<u8>) -> (Array2<usize>, usize) {
    let (h, w) = mask.dim();
    let mut labels = Array2::<usize>::zeros((h, w));
    let mut next = 0;
    let mut stack = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if mask[[r, c]] == 0 || labels[[r, c]] != 0 {
                continue;
            }
            next += 1;
            labels[[r, c]] = next;
            stack.push((r, c));
            while let Some((y, x)) = stack.pop() {
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                        if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                            continue;
                        }
                        let (ny, nx) = (ny as usize, nx as usize);
                        if mask[[ny, nx]] != 0 && labels[[ny, nx]] == 0 {
                            labels[[ny, nx]] = next;
                            stack.push((ny, nx));
                        }
                    }
                }
            }
        }
    }
    (labels, next)
}

/// `(fpr, pro)` points, one per distinct threshold (pixels with
/// `score ≥ t` are positive), starting at `(0, 0)`.
pub fn pro_curve(maps: &[Array2<f64>], masks: &[Array2<u8>]) -> Result<Vec<(f64, f64)>> {
    if maps.len() != masks.len() {
        return Err(Error::structural(format!("{} maps but {} masks", maps.len(), masks.len())));
    }
    // per pixel: (score, component id or usize::MAX for normal)
    let mut pixels: Vec<(f64, usize)> = Vec::new();
    let mut sizes: Vec<usize> = Vec::new();
    let mut negatives = 0usize;
    for (i, (map, mask)) in maps.iter().zip(masks).enumerate() {
        if map.dim() != mask.dim() {
            return Err(Error::structural(format!(
                "map {i} is {:?} but its mask is {:?}",
                map.dim(),
                mask.dim()
            )));
        }
        let (labels, count) = connected_components(mask);
        let base = sizes.len();
        sizes.extend(std::iter::repeat_n(0, count));
        for (&s, &l) in map.iter().zip(labels.iter()) {
            if s.is_nan() {
                return Err(Error::input("score map contains NaN"));
            }
            if l == 0 {
                negatives += 1;
                pixels.push((s, usize::MAX));
            } else {
                sizes[base + l - 1] += 1;
                pixels.push((s, base + l - 1));
            }
        }
    }
    if sizes.is_empty() {
        return Err(Error::input("PRO needs at least one anomalous region"));
    }
    if negatives == 0 {
        return Err(Error::input("PRO needs at least one normal pixel"));
    }
    pixels.sort_by(|a, b| b.0.total_cmp(&a.0));
    let n_regions = sizes.len() as f64;
    let mut overlap_sum = 0.0;
    let mut fp = 0usize;
    let mut curve = vec![(0.0, 0.0)];
    let mut i = 0;
    while i < pixels.len() {
        let t = pixels[i].0;
        while i < pixels.len() && pixels[i].0 == t {
            match pixels[i].1 {
                usize::MAX => fp += 1,
                c => overlap_sum += 1.0 / sizes[c] as f64,
            }
            i += 1;
        }
        curve.push((fp as f64 / negatives as f64, overlap_sum / n_regions));
    }
    Ok(curve)
}

/// Trapezoidal area under `curve` for `x ∈ [0, cap]`, divided by `cap`.
/// Points must be sorted by `x`.
pub fn area_to_cap(curve: &[(f64, f64)], cap: f64) -> f64 {
    let mut area = 0.0;
    for pair in curve.windows(2) {
        let ((x0, y0), (x1, y1)) = (pair[0], pair[1]);
        if x0 >= cap {
            break;
        }
        if x1 <= cap {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            let y_cap = y0 + (y1 - y0) * (cap - x0) / (x1 - x0);
            area += (cap - x0) * (y0 + y_cap) / 2.0;
        }
    }
    area / cap
}

/// Normalized area under the per-region-overlap curve up to `fpr_cap`.
pub fn pro(maps: &[Array2<f64>], masks: &[Array2<u8>], fpr_cap: f64) -> Result<f64> {
    if !(fpr_cap > 0.0 && fpr_cap <= 1.0) {
        return Err(Error::input(format!("FPR cap must lie in (0, 1], got {fpr_cap}")));
    }
    Ok(area_to_cap(&pro_curve(maps, masks)?, fpr_cap))
}

/// Pixel AUROC with every pixel of every map pooled into one ranking.
pub fn pixel_auroc(maps: &[Array2<f64>], masks: &[Array2<u8>]) -> Result<f64> {
    if maps.len() != masks.len() {
        return Err(Error::structural(format!("{} maps but {} masks", maps.len(), masks.len())));
    }
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (i, (m, k)) in maps.iter().zip(masks).enumerate() {
        if m.dim() != k.dim() {
            return Err(Error::structural(format!("map {i} and its mask differ in shape")));
        }
        scores.extend(m.iter().copied());
        labels.extend(k.iter().map(|&v| v != 0));
    }
    auroc(&scores, &labels)
}

/// Metrics of one (category, seed) run, as fractions in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub category: String,
    pub seed: u64,
    pub image_auroc: f64,
    pub image_aupr: f64,
    pub pixel_auroc: Option<f64>,
    pub pixel_pro: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; absent for a single value.
    pub std: Option<f64>,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = (n >= 2).then(|| {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        });
        Some(Self { mean, std, n })
    }

    /// `mean±std` in percent with one decimal.
    pub fn percent(&self) -> String {
        match self.std {
            Some(s) => format!("{:.1}±{:.1}", 100.0 * self.mean, 100.0 * s),
            None => format!("{:.1}", 100.0 * self.mean),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub image_auroc: Option<MeanStd>,
    pub image_aupr: Option<MeanStd>,
    pub pixel_auroc: Option<MeanStd>,
    pub pixel_pro: Option<MeanStd>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub categories: Vec<Summary>,
    /// Per seed, the unweighted mean over categories; then mean ± std
    /// over seeds.
    pub dataset: Summary,
}

type Getter = fn(&MetricRow) -> Option<f64>;

const METRICS: [(&str, Getter); 4] = [
    ("image_auroc", |r| Some(r.image_auroc)),
    ("image_aupr", |r| Some(r.image_aupr)),
    ("pixel_auroc", |r| r.pixel_auroc),
    ("pixel_pro", |r| r.pixel_pro),
];

fn summarize(name: &str, rows: &[&MetricRow]) -> Summary {
    let stat = |get: Getter| -> Option<MeanStd> {
        let vals: Vec<f64> = rows.iter().filter_map(|r| get(r)).collect();
        MeanStd::of(&vals)
    };
    Summary {
        name: name.to_string(),
        image_auroc: stat(METRICS[0].1),
        image_aupr: stat(METRICS[1].1),
        pixel_auroc: stat(METRICS[2].1),
        pixel_pro: stat(METRICS[3].1),
    }
}

/// Per-category mean ± std over seeds and the dataset mean row.
pub fn aggregate(rows: Vec<MetricRow>) -> MetricReport {
    let mut by_cat: BTreeMap<&str, Vec<&MetricRow>> = BTreeMap::new();
    let mut by_seed: BTreeMap<u64, Vec<&MetricRow>> = BTreeMap::new();
    for r in &rows {
        by_cat.entry(&r.category).or_default().push(r);
        by_seed.entry(r.seed).or_default().push(r);
    }
    let categories = by_cat.iter().map(|(c, rs)| summarize(c, rs)).collect();
    let seed_means: Vec<MetricRow> = by_seed
        .iter()
        .map(|(&seed, rs)| {
            let avg = |get: Getter| -> Option<f64> {
                let v: Vec<f64> = rs.iter().filter_map(|r| get(r)).collect();
                (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
            };
            MetricRow {
                category: "mean".into(),
                seed,
                image_auroc: avg(METRICS[0].1).unwrap_or(f64::NAN),
                image_aupr: avg(METRICS[1].1).unwrap_or(f64::NAN),
                pixel_auroc: avg(METRICS[2].1),
                pixel_pro: avg(METRICS[3].1),
            }
        })
        .collect();
    let dataset = summarize("mean", &seed_means.iter().collect::<Vec<_>>());
    MetricReport {
        rows,
        categories,
        dataset,
    }
}

impl MetricReport {
    fn summaries(&self) -> impl Iterator<Item = &Summary> {
        self.categories.iter().chain(std::iter::once(&self.dataset))
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let ser = |e: csv::Error| Error::Serde(e.to_string());
        w.write_record(["category", "seed", "metric", "mean", "std", "n"]).map_err(ser)?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for r in &self.rows {
            for (name, get) in METRICS {
                if let Some(v) = get(r) {
                    w.write_record([&r.category, &r.seed.to_string(), name, &opt(Some(v)), "", "1"])
                        .map_err(ser)?;
                }
            }
        }
        for s in self.summaries() {
            let stats = [&s.image_auroc, &s.image_aupr, &s.pixel_auroc, &s.pixel_pro];
            for ((name, _), stat) in METRICS.iter().zip(stats) {
                if let Some(m) = stat {
                    w.write_record([&s.name, "all", name, &opt(Some(m.mean)), &opt(m.std), &m.n.to_string()])
                        .map_err(ser)?;
                }
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::Serde(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }

    /// Fixed-width table in percent: one row per category plus the mean.
    pub fn to_table(&self) -> String {
        let headers = ["category", "I-AUROC", "I-AUPR", "P-AUROC", "PRO"];
        let cell = |m: &Option<MeanStd>| m.map(|v| v.percent()).unwrap_or_else(|| "-".into());
        let lines: Vec<[String; 5]> = self
            .summaries()
            .map(|s| {
                [
                    s.name.clone(),
                    cell(&s.image_auroc),
                    cell(&s.image_aupr),
                    cell(&s.pixel_auroc),
                    cell(&s.pixel_pro),
                ]
            })
            .collect();
        let mut widths = headers.map(|h| h.chars().count());
        for l in &lines {
            for (w, c) in widths.iter_mut().zip(l) {
                *w = (*w).max(c.chars().count());
            }
        }
        let mut out = String::new();
        let mut row = |cells: &[String]| {
            let parts: Vec<String> = cells
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, &w))| {
                    let pad = w - c.chars().count();
                    if i == 0 {
                        format!("{c}{}", " ".repeat(pad))
                    } else {
                        format!("{}{c}", " ".repeat(pad))
                    }
                })
                .collect();
            let _ = writeln!(out, "{}", parts.join("  "));
        };
        row(&headers.map(String::from));
        for l in &lines {
            row(l);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn auroc_hand_cases() {
        let s = [0.9, 0.8, 0.3, 0.1];
        assert_eq!(auroc(&s, &[true, true, false, false]).unwrap(), 1.0);
        assert_eq!(auroc(&s, &[true, false, true, false]).unwrap(), 0.75);
        assert_eq!(auroc(&[0.5; 4], &[true, false, true, false]).unwrap(), 0.5);
        assert!(matches!(auroc(&s, &[true; 4]), Err(Error::Input(_))));
    }

    #[test]
    fn aupr_hand_cases() {
        let s = [0.9, 0.8, 0.3, 0.1];
        assert_eq!(aupr(&s, &[true, true, false, false]).unwrap(), 1.0);
        // thresholds 0.9 (P=1,R=.5), 0.8 (P=.5), 0.3 (P=2/3,R=1)
        let v = aupr(&s, &[true, false, true, false]).unwrap();
        assert!((v - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
        assert!((aupr(&[0.2; 5], &[true, false, false, true, false]).unwrap() - 0.4).abs() < 1e-12);
    }

    #[test]
    fn pro_extremes() {
        let mask = array![[0u8, 0, 0, 0], [0, 1, 1, 0], [0, 0, 0, 0], [1, 0, 0, 0]];
        let exact = mask.mapv(f64::from);
        assert!((pro(std::slice::from_ref(&exact), std::slice::from_ref(&mask), 0.3).unwrap() - 1.0).abs() < 1e-12);
        let inverse = exact.mapv(|v| 1.0 - v);
        assert_eq!(pro(&[inverse], std::slice::from_ref(&mask), 0.3).unwrap(), 0.0);
        let empty = Array2::<u8>::zeros((4, 4));
        assert!(matches!(pro(&[exact], &[empty], 0.3), Err(Error::Input(_))));
    }

    #[test]
    fn diagonal_pixels_join_one_component() {
        let mask = array![[1u8, 0, 0], [0, 1, 0], [0, 0, 1]];
        assert_eq!(connected_components(&mask).1, 1);
    }

    #[test]
    fn two_seed_std() {
        let row = |seed, v| MetricRow {
            category: "a".into(),
            seed,
            image_auroc: v,
            image_aupr: v,
            pixel_auroc: None,
            pixel_pro: None,
        };
        let rep = aggregate(vec![row(0, 0.94), row(1, 0.96)]);
        let m = rep.categories[0].image_auroc.unwrap();
        assert!((m.mean - 0.95).abs() < 1e-12);
        assert!((m.std.unwrap() - 0.014142135623730963).abs() < 1e-12);
        assert_eq!(m.percent(), "95.0±1.4");
        let single = aggregate(vec![row(0, 0.9)]);
        assert_eq!(single.categories[0].image_auroc.unwrap().std, None);
        assert!(single.to_table().contains("90.0"));
    }
}
