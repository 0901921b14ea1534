//! Synthetic folder-per-class image sets for smoke tests and demos.

use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Shape drawn for each class, cycled when there are more classes.
const SHAPES: [&str; 4] = ["disc", "square", "triangle", "ring"];

fn inside(shape: usize, dx: f64, dy: f64, r: f64) -> bool {
    match shape {
        0 => dx * dx + dy * dy <= r * r,
        1 => dx.abs() <= r * 0.85 && dy.abs() <= r * 0.85,
        2 => dy <= r * 0.8 && dy >= -r && dx.abs() <= (dy + r) * 0.6,
        _ => {
            let d2 = dx * dx + dy * dy;
            d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r)
        }
    }
}

/// One image of `class`: a jittered, class-tinted shape on a noisy
/// background.
pub fn render(class: usize, size: u32, rng: &mut impl Rng) -> RgbImage {
    let shape = class % SHAPES.len();
    let hue = class as f64 / 7.0;
    let tint = |phase: f64| (127.0 + 110.0 * (std::f64::consts::TAU * (hue + phase)).cos()) as i32;
    let color = [tint(0.0), tint(1.0 / 3.0), tint(2.0 / 3.0)];
    let s = size as f64;
    let r = s * rng.gen_range(0.22..0.34);
    let cx = rng.gen_range(r..s - r);
    let cy = rng.gen_range(r..s - r);
    let bg: [i32; 3] = [rng.gen_range(20..90), rng.gen_range(20..90), rng.gen_range(20..90)];
    RgbImage::from_fn(size, size, |x, y| {
        let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
        let base = if inside(shape, dx, dy, r) { color } else { bg };
        let noise = rng.gen_range(-12..=12);
        Rgb(base.map(|c| (c + noise).clamp(0, 255) as u8))
    })
}

/// Writes `root/<class>/<index>.png` for `classes` classes of `per_class`
/// images each.
pub fn write_shapes_dataset(root: &Path, classes: usize, per_class: usize, size: u32, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for class in 0..classes {
        let name = format!("{class:02}_{}", SHAPES[class % SHAPES.len()]);
        let dir = root.join(name);
        fs::create_dir_all(&dir)?;
        for i in 0..per_class {
            let path = dir.join(format!("{i:04}.png"));
            render(class, size, &mut rng).save(&path).map_err(|e| Error::WriteFailure {
                path: path.clone(),
                reason: e.to_string(),
            })?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_and_sized() {
        let a = render(2, 32, &mut ChaCha8Rng::seed_from_u64(1));
        let b = render(2, 32, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a, b);
        assert_eq!(a.dimensions(), (32, 32));
    }
}
