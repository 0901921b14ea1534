//! Weakly supervised localization on channel-summed activation maps.

use std::collections::VecDeque;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Half-open pixel (or cell) rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub row0: usize,
    pub col0: usize,
    pub row1: usize,
    pub col1: usize,
}

impl BoundingBox {
    pub fn new(row0: usize, col0: usize, row1: usize, col1: usize) -> Self {
        Self { row0, col0, row1, col1 }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self::new(0, 0, height, width)
    }

    pub fn height(&self) -> usize {
        self.row1 - self.row0
    }

    pub fn width(&self) -> usize {
        self.col1 - self.col0
    }

    pub fn area(&self) -> usize {
        self.height() * self.width()
    }

    pub fn is_valid_within(&self, height: usize, width: usize) -> bool {
        self.row0 < self.row1 && self.col0 < self.col1 && self.row1 <= height && self.col1 <= width
    }

    pub fn iou(&self, other: &Self) -> f64 {
        let r0 = self.row0.max(other.row0);
        let r1 = self.row1.min(other.row1);
        let c0 = self.col0.max(other.col0);
        let c1 = self.col1.min(other.col1);
        let inter = if r0 < r1 && c0 < c1 { (r1 - r0) * (c1 - c0) } else { 0 };
        let union = self.area() + other.area() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Maps a box on a `grid_h × grid_w` grid onto a `height × width` image.
    pub fn grid_to_pixels(&self, grid_h: usize, grid_w: usize, height: usize, width: usize) -> Self {
        let sr = |r: usize| (r * height / grid_h).min(height);
        let sc = |c: usize| (c * width / grid_w).min(width);
        Self::new(sr(self.row0), sc(self.col0), sr(self.row1), sc(self.col1))
    }
}

/// A channel-summed activation grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMap {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl ActivationMap {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), rows * cols, "activation map size");
        Self { rows, cols, values }
    }

    /// Sums a (C, H, W) feature map over channels.
    pub fn from_features(features: &Tensor) -> Result<Self> {
        let (_, h, w) = features.dims3()?;
        let summed = features
            .detach()
            .to_dtype(candle_core::DType::F64)?
            .sum(0)?
            .flatten_all()?
            .to_vec1::<f64>()?;
        Ok(Self::new(h, w, summed))
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Cells strictly above the map's own mean.
    pub fn above_mean(&self) -> Vec<bool> {
        let mean = self.mean();
        self.values.iter().map(|&v| v > mean).collect()
    }
}

/// One 4-connected region of a boolean grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Component {
    pub cells: usize,
    /// Tight half-open bounds in grid cells.
    pub bounds: BoundingBox,
}

/// The largest 4-connected component of `mask`; among equal sizes the one
/// whose first cell comes first in row-major order wins.
pub fn largest_component(mask: &[bool], rows: usize, cols: usize) -> Option<Component> {
    let mut seen = vec![false; mask.len()];
    let mut best: Option<Component> = None;
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let (mut r0, mut c0, mut r1, mut c1) = (usize::MAX, usize::MAX, 0, 0);
        let mut cells = 0;
        while let Some(i) = queue.pop_front() {
            let (r, c) = (i / cols, i % cols);
            cells += 1;
            r0 = r0.min(r);
            c0 = c0.min(c);
            r1 = r1.max(r + 1);
            c1 = c1.max(c + 1);
            let mut visit = |j: usize| {
                if mask[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if r > 0 {
                visit(i - cols);
            }
            if r + 1 < rows {
                visit(i + cols);
            }
            if c > 0 {
                visit(i - 1);
            }
            if c + 1 < cols {
                visit(i + 1);
            }
        }
        if best.as_ref().map_or(true, |b| cells > b.cells) {
            best = Some(Component {
                cells,
                bounds: BoundingBox::new(r0, c0, r1, c1),
            });
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AolmResult {
    pub bbox: BoundingBox,
    /// The intersected mask was empty and the whole image was returned.
    pub fallback: bool,
}

/// Locates the object from the two deepest activation maps.
///
/// Each map is binarized at its own mean, the coarse mask is upsampled
/// (nearest neighbour) onto the finer grid, the two masks are intersected,
/// and the tight bounds of the largest 4-connected component are scaled to
/// input pixels.
pub fn aolm_locate(fine: &ActivationMap, coarse: &ActivationMap, height: usize, width: usize) -> AolmResult {
    let fine_mask = fine.above_mean();
    let coarse_mask = coarse.above_mean();
    let (rows, cols) = (fine.rows, fine.cols);
    let mask: Vec<bool> = (0..rows * cols)
        .map(|i| {
            let (r, c) = (i / cols, i % cols);
            let cr = (r * coarse.rows / rows).min(coarse.rows - 1);
            let cc = (c * coarse.cols / cols).min(coarse.cols - 1);
            fine_mask[i] && coarse_mask[cr * coarse.cols + cc]
        })
        .collect();
    match largest_component(&mask, rows, cols) {
        Some(component) => AolmResult {
            bbox: component.bounds.grid_to_pixels(rows, cols, height, width),
            fallback: false,
        },
        None => AolmResult {
            bbox: BoundingBox::full(height, width),
            fallback: true,
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppmConfig {
    /// Window sizes (rows, cols) in feature-map cells, one per scale.
    pub windows: Vec<(usize, usize)>,
    /// Proposals kept per scale.
    pub top_k: Vec<usize>,
    /// Maximum IoU between two kept windows of the same scale.
    pub nms_iou: f64,
}

impl Default for AppmConfig {
    fn default() -> Self {
        Self {
            windows: vec![(2, 2), (3, 3), (4, 4)],
            top_k: vec![3, 2, 2],
            nms_iou: 0.25,
        }
    }
}

impl AppmConfig {
    pub fn parts_per_image(&self) -> usize {
        self.top_k.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartProposal {
    /// Window in feature-map cells.
    pub cells: BoundingBox,
    /// Window in image pixels.
    pub bbox: BoundingBox,
    /// Mean activation inside the window.
    pub score: f64,
    pub scale_id: usize,
}

/// Mean activation of every placement of a `wh × ww` window, row-major.
pub fn window_scores(map: &ActivationMap, wh: usize, ww: usize) -> Vec<(BoundingBox, f64)> {
    let mut out = Vec::with_capacity((map.rows - wh + 1) * (map.cols - ww + 1));
    let area = (wh * ww) as f64;
    for r in 0..=map.rows - wh {
        for c in 0..=map.cols - ww {
            let mut sum = 0.0;
            for rr in r..r + wh {
                for cc in c..c + ww {
                    sum += map.at(rr, cc);
                }
            }
            out.push((BoundingBox::new(r, c, r + wh, c + ww), sum / area));
        }
    }
    out
}

/// Proposes informative part windows: per scale, greedy non-maximum
/// suppression over all placements sorted by mean activation (ties in
/// row-major order), keeping `top_k` windows.
pub fn appm_propose(map: &ActivationMap, cfg: &AppmConfig, height: usize, width: usize) -> Result<Vec<PartProposal>> {
    if cfg.windows.len() != cfg.top_k.len() {
        return Err(Error::Config(format!(
            "{} APPM windows but {} top-k entries",
            cfg.windows.len(),
            cfg.top_k.len()
        )));
    }
    let mut proposals = Vec::with_capacity(cfg.parts_per_image());
    for (scale_id, (&(wh, ww), &k)) in cfg.windows.iter().zip(&cfg.top_k).enumerate() {
        if wh == 0 || ww == 0 || wh > map.rows || ww > map.cols {
            return Err(Error::WindowTooLarge {
                rows: wh,
                cols: ww,
                map_rows: map.rows,
                map_cols: map.cols,
            });
        }
        let mut candidates = window_scores(map, wh, ww);
        // stable: equal scores keep row-major order
        candidates.sort_by(|a, b| b.1.total_cmp(&a.1));
        let mut kept: Vec<(BoundingBox, f64)> = Vec::with_capacity(k);
        for (cells, score) in candidates {
            if kept.len() == k {
                break;
            }
            if kept.iter().all(|(other, _)| cells.iou(other) <= cfg.nms_iou) {
                kept.push((cells, score));
            }
        }
        proposals.extend(kept.into_iter().map(|(cells, score)| PartProposal {
            bbox: cells.grid_to_pixels(map.rows, map.cols, height, width),
            cells,
            score,
            scale_id,
        }));
    }
    Ok(proposals)
}
