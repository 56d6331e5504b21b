// SPDX-License-Identifier: MIT OR Apache-2.0

//! Input-space region partitions: rectangular grids or external label maps.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::spatial_extent;
use crate::error::{CrpError, Result};
use crate::model_io::{StoredTensor, TensorStore};
use crate::render::decode_label_png;
use crate::tensor::BooleanMask;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PartitionSource {
    Grid { rows: usize, cols: usize },
    External { path: String },
}

/// One region id per input pixel, ids dense in `[0, count)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionPartition {
    height: usize,
    width: usize,
    labels: Vec<usize>,
    count: usize,
    source: PartitionSource,
}

/// Near-equal rectangular tiles. Tile `i` along an axis of length `n` split
/// into `k` parts spans `[ceil(i*n/k), ceil((i+1)*n/k))`.
pub fn grid_partition(input_shape: &[usize], rows: usize, cols: usize) -> Result<RegionPartition> {
    let (h, w) = spatial_extent(input_shape)?;
    if rows == 0 || cols == 0 || rows > h || cols > w {
        return Err(CrpError::InvalidArgument(format!(
            "a {rows}x{cols} grid does not fit a {h}x{w} input"
        )));
    }
    let tile = |i: usize, n: usize, k: usize| -> usize {
        // Largest t with ceil(t*n/k) <= i.
        (0..k).rev().find(|&t| (t * n).div_ceil(k) <= i).unwrap_or(0)
    };
    let labels = (0..h * w)
        .map(|p| tile(p / w, h, rows) * cols + tile(p % w, w, cols))
        .collect();
    Ok(RegionPartition {
        height: h,
        width: w,
        labels,
        count: rows * cols,
        source: PartitionSource::Grid { rows, cols },
    })
}

impl RegionPartition {
    /// Validates an external label map.
    pub fn from_labels(height: usize, width: usize, labels: Vec<i64>, source: PartitionSource) -> Result<Self> {
        if labels.len() != height * width {
            return Err(CrpError::Shape(format!(
                "{} labels for a {height}x{width} input",
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l < 0) {
            return Err(CrpError::parse(format!("negative region id {bad}")));
        }
        let count = labels.iter().max().map_or(0, |&m| m as usize + 1);
        let mut seen = vec![false; count];
        for &l in &labels {
            seen[l as usize] = true;
        }
        if let Some(gap) = seen.iter().position(|s| !s) {
            return Err(CrpError::parse(format!(
                "region ids must be dense in [0, {count}); id {gap} is unused"
            )));
        }
        Ok(Self {
            height,
            width,
            labels: labels.into_iter().map(|l| l as usize).collect(),
            count,
            source,
        })
    }

    /// Reads an 8-bit indexed or greyscale PNG, or a CRPW file holding one
    /// i32 `(H, W)` tensor (named `regions` when there are several).
    pub fn load(path: impl AsRef<Path>, input_shape: &[usize]) -> Result<Self> {
        let path = path.as_ref();
        let source = PartitionSource::External {
            path: path.display().to_string(),
        };
        let (h, w) = spatial_extent(input_shape)?;
        let bytes = std::fs::read(path)?;
        let (lh, lw, labels): (usize, usize, Vec<i64>) = if bytes.starts_with(b"\x89PNG") {
            let (lh, lw, v) = decode_label_png(&bytes)?;
            (lh, lw, v.into_iter().map(i64::from).collect())
        } else {
            let store = TensorStore::decode(&bytes)?;
            let t = match store.get("regions") {
                Some(t) => t,
                None if store.len() == 1 => store.iter().next().expect("one tensor").1,
                None => return Err(CrpError::parse("region file has no tensor named `regions`")),
            };
            let StoredTensor::I32(t) = t else {
                return Err(CrpError::parse("region labels must be an i32 tensor"));
            };
            let (lh, lw) = match t.shape() {
                [a, b] => (*a, *b),
                [1, a, b] => (*a, *b),
                s => return Err(CrpError::parse(format!("region labels have shape {s:?}"))),
            };
            (lh, lw, t.data().iter().map(|&v| v as i64).collect())
        };
        if (lh, lw) != (h, w) {
            return Err(CrpError::Shape(format!(
                "region map is {lh}x{lw}, model input is {h}x{w}"
            )));
        }
        Self::from_labels(h, w, labels, source)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn source(&self) -> &PartitionSource {
        &self.source
    }

    pub fn pixel_count(&self, region: usize) -> usize {
        self.labels.iter().filter(|&&l| l == region).count()
    }

    pub fn region_mask(&self, region: usize) -> Result<BooleanMask> {
        if region >= self.count {
            return Err(CrpError::NotFound(format!("region {region} of {}", self.count)));
        }
        BooleanMask::new(
            vec![self.height, self.width],
            self.labels.iter().map(|&l| l == region).collect(),
        )
    }
}
