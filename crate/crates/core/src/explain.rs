//! Grad-CAM heatmaps at the last feature-extractor block, and overlays.

use std::path::Path;

use candle_core::{IndexOp, Tensor};
use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn;

/// Blend weight of the colorized heatmap.
pub const OVERLAY_ALPHA: f64 = 0.4;

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    /// Row-major, in [0, 1]; max 1 unless all zero.
    pub values: Vec<f64>,
    pub source_layer: String,
    pub target_class: usize,
}

impl Heatmap {
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.width + c]
    }
}

/// `ReLU(Σ_k mean(∂y/∂A_k) · A_k)` from one (K, h, w) activation and its
/// gradient, max-normalized. Returns (h, w, values).
pub fn cam_from_gradients(activation: &Tensor, gradient: &Tensor) -> Result<(usize, usize, Vec<f64>)> {
    if activation.dims() != gradient.dims() {
        return Err(Error::ShapeMismatch(format!(
            "activation {:?} vs gradient {:?}",
            activation.dims(),
            gradient.dims()
        )));
    }
    let (k, h, w) = activation.dims3()?;
    let a = activation.to_dtype(candle_core::DType::F64)?;
    let weights = gradient.to_dtype(candle_core::DType::F64)?.mean((1, 2))?.reshape((k, 1, 1))?;
    let cam = a.broadcast_mul(&weights)?.sum(0)?.relu()?.flatten_all()?.to_vec1::<f64>()?;
    let max = cam.iter().cloned().fold(0.0, f64::max);
    let values = if max > 0.0 { cam.iter().map(|v| v / max).collect() } else { cam };
    Ok((h, w, values))
}

/// Grad-CAM of `target_class` for one image (1, 3, H, W) or (3, H, W).
pub fn grad_cam(model: &Model, image: &Tensor, target_class: usize) -> Result<Heatmap> {
    if target_class >= model.classes {
        return Err(Error::LabelOutOfRange {
            label: target_class,
            classes: model.classes,
            line: None,
        });
    }
    let image = if image.rank() == 3 { image.unsqueeze(0)? } else { image.clone() };
    if image.dim(0)? != 1 {
        return Err(Error::ShapeMismatch("Grad-CAM takes one image at a time".into()));
    }
    let (act, logits) = model.activation_and_logits(&image)?;
    let score = logits.i((0, target_class))?;
    let grads = score.backward()?;
    let grad = grads
        .get(act.as_tensor())
        .ok_or_else(|| Error::UnsupportedLayer(model.activation_layer().to_string()))?;
    let (height, width, values) = cam_from_gradients(&act.as_tensor().i(0)?, &grad.i(0)?)?;
    Ok(Heatmap {
        height,
        width,
        values,
        source_layer: model.activation_layer().to_string(),
        target_class,
    })
}

/// Jet colormap of a value in [0, 1].
pub fn jet(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    let ch = |center: f64| (1.5 - (4.0 * v - center).abs()).clamp(0.0, 1.0) * 255.0;
    [ch(3.0), ch(2.0), ch(1.0)]
}

/// Heatmap upsampled bilinearly to (height, width).
pub fn upsample(heatmap: &Heatmap, height: usize, width: usize) -> Vec<f64> {
    let rows = nn::bilinear_weights(heatmap.height, height);
    let cols = nn::bilinear_weights(heatmap.width, width);
    let mut out = vec![0.0; height * width];
    for y in 0..height {
        let wr = &rows[y * heatmap.height..(y + 1) * heatmap.height];
        for x in 0..width {
            let wc = &cols[x * heatmap.width..(x + 1) * heatmap.width];
            let mut acc = 0.0;
            for (r, &a) in wr.iter().enumerate().filter(|(_, a)| **a != 0.0) {
                for (c, &b) in wc.iter().enumerate().filter(|(_, b)| **b != 0.0) {
                    acc += a * b * heatmap.at(r, c);
                }
            }
            out[y * width + x] = acc;
        }
    }
    out
}

/// `(1 - alpha) · original + alpha · jet(heatmap)`, per pixel.
pub fn overlay_image(heatmap: &Heatmap, original: &RgbImage) -> RgbImage {
    let (w, h) = original.dimensions();
    let up = upsample(heatmap, h as usize, w as usize);
    RgbImage::from_fn(w, h, |x, y| {
        let color = jet(up[y as usize * w as usize + x as usize]);
        let px = original.get_pixel(x, y);
        Rgb(std::array::from_fn(|c| {
            ((1.0 - OVERLAY_ALPHA) * px[c] as f64 + OVERLAY_ALPHA * color[c]).round() as u8
        }))
    })
}

/// Writes the overlay; the format follows the file extension.
pub fn overlay(heatmap: &Heatmap, original: &RgbImage, out: &Path) -> Result<RgbImage> {
    let img = overlay_image(heatmap, original);
    img.save(out).map_err(|e| Error::WriteFailure {
        path: out.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(img)
}
