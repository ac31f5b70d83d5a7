//! Few-shot memory of normal patch features and the vision-guided score map.

use std::collections::BTreeMap;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::backbone::{DualEncoderOutput, FeatureGrid};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Unit-norm normal patch features per tapped layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct FeatureMemory<T> {
    layers: BTreeMap<usize, Array2<T>>,
}

fn normalize_rows<T: Scalar>(cells: &Array2<T>) -> Array2<T> {
    let mut out = cells.clone();
    for mut row in out.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n > T::zero() {
            row.mapv_inplace(|v| v / n);
        }
    }
    out
}

/// Flattens and normalizes every tapped patch vector of every shot.
pub fn build_memory<T: Scalar>(shots: &[DualEncoderOutput<T>]) -> Result<FeatureMemory<T>> {
    let first = shots
        .first()
        .ok_or_else(|| Error::input("memory needs at least one normal shot"))?;
    let mut layers = BTreeMap::new();
    for (&layer, grid) in &first.layer_taps {
        let mut blocks = Vec::with_capacity(shots.len());
        for (i, shot) in shots.iter().enumerate() {
            let g = shot.layer_taps.get(&layer).ok_or_else(|| {
                Error::structural(format!("shot {i} has no tap for layer {layer}"))
            })?;
            if g.dim() != grid.dim() {
                return Err(Error::structural(format!(
                    "shot {i} layer {layer} has width {}, expected {}",
                    g.dim(),
                    grid.dim()
                )));
            }
            blocks.push(normalize_rows(&g.cells));
        }
        let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
        let stacked = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| Error::structural(e.to_string()))?;
        if stacked.nrows() == 0 {
            return Err(Error::input(format!("layer {layer} memory is empty")));
        }
        layers.insert(layer, stacked);
    }
    if layers.is_empty() {
        return Err(Error::input("shots carry no tapped layers"));
    }
    Ok(FeatureMemory { layers })
}

impl<T: Scalar> FeatureMemory<T> {
    pub fn layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.layers.keys().copied()
    }

    pub fn layer(&self, layer: usize) -> Option<&Array2<T>> {
        self.layers.get(&layer)
    }

    pub fn len(&self, layer: usize) -> usize {
        self.layers.get(&layer).map_or(0, |m| m.nrows())
    }

    /// Appends (normalized) vectors to one layer's memory.
    pub fn extend(&mut self, layer: usize, vectors: &Array2<T>) -> Result<()> {
        let mem = self
            .layers
            .get_mut(&layer)
            .ok_or_else(|| Error::structural(format!("memory has no layer {layer}")))?;
        if vectors.ncols() != mem.ncols() {
            return Err(Error::structural(format!(
                "vectors of width {} cannot join layer {layer} of width {}",
                vectors.ncols(),
                mem.ncols()
            )));
        }
        *mem = ndarray::concatenate(Axis(0), &[mem.view(), normalize_rows(vectors).view()])
            .map_err(|e| Error::structural(e.to_string()))?;
        Ok(())
    }

    /// Per-cell `min_r ½(1 − cos(F, r))` for one layer, as an `h × w` map.
    pub fn layer_score_map(&self, layer: usize, grid: &FeatureGrid<T>) -> Result<Array2<T>> {
        let mem = self
            .layers
            .get(&layer)
            .ok_or_else(|| Error::structural(format!("memory has no layer {layer}")))?;
        if grid.dim() != mem.ncols() {
            return Err(Error::structural(format!(
                "query layer {layer} has width {}, memory has {}",
                grid.dim(),
                mem.ncols()
            )));
        }
        let q = normalize_rows(&grid.cells);
        let sims = q.dot(&mem.t());
        let half = T::lit(0.5);
        let scores: Vec<T> = sims
            .rows()
            .into_iter()
            .map(|row| {
                let best = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
                (half * (T::one() - best)).max(T::zero()).min(T::one())
            })
            .collect();
        Array2::from_shape_vec((grid.height, grid.width), scores)
            .map_err(|e| Error::structural(e.to_string()))
    }

    /// Mean over the memory layers of the per-layer score maps.
    pub fn vision_score_map(&self, query: &DualEncoderOutput<T>) -> Result<Array2<T>> {
        let mut acc: Option<Array2<T>> = None;
        for &layer in self.layers.keys() {
            let grid = query.layer_taps.get(&layer).ok_or_else(|| {
                Error::structural(format!("query has no tap for memory layer {layer}"))
            })?;
            let map = self.layer_score_map(layer, grid)?;
            acc = Some(match acc {
                None => map,
                Some(a) if a.dim() == map.dim() => a + map,
                Some(a) => {
                    return Err(Error::structural(format!(
                        "layer grids disagree: {:?} vs {:?}",
                        a.dim(),
                        map.dim()
                    )))
                }
            });
        }
        let count = T::from_len(self.layers.len());
        Ok(acc.expect("memory has at least one layer").mapv(|v| v / count))
    }
}

pub fn vision_score_map<T: Scalar>(
    query: &DualEncoderOutput<T>,
    mem: &FeatureMemory<T>,
) -> Result<Array2<T>> {
    mem.vision_score_map(query)
}
