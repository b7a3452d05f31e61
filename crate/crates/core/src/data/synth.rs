//! Synthetic counting scenes: colored discs on a textured background.
//!
//! Each category gets a fixed palette color (evenly spaced hues) and a fixed
//! disc radius, object counts are Poisson-distributed, and centers land
//! uniformly inside a margin that keeps discs fully visible. Generation is
//! driven by a seeded ChaCha8 stream, so a given seed reproduces the same
//! scenes — and the same dataset bytes — on every platform.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::counting::Point;
use crate::data::{annotations, ppm};
use crate::data::manifest::{Manifest, ManifestEntry};
use crate::error::{MocError, Result};
use crate::nn::{sc, Scalar, Tensor};

/// Parameters of one synthetic scene.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    /// Number of object categories; each draws with its own color and radius.
    pub categories: usize,
    /// Poisson mean for the number of objects per category.
    pub mean_per_category: f64,
}

/// Disc radius for category `k`.
fn radius(category: usize) -> usize {
    2 + category % 5
}

/// Largest radius any of the first `categories` categories uses.
fn max_radius(categories: usize) -> usize {
    (0..categories).map(radius).max().unwrap_or(0)
}

fn check_spec(spec: &SceneSpec) -> Result<()> {
    if spec.categories == 0 {
        return Err(MocError::Argument("scene needs at least one category".into()));
    }
    if !(spec.mean_per_category.is_finite() && spec.mean_per_category >= 0.0) {
        return Err(MocError::Argument(format!(
            "objects-per-category mean must be finite and non-negative, got {}",
            spec.mean_per_category
        )));
    }
    let need = 2 * max_radius(spec.categories) + 2;
    if spec.height < need || spec.width < need {
        return Err(MocError::Argument(format!(
            "scene extent {}x{} too small for disc radius {} (need at least {need} per side)",
            spec.height,
            spec.width,
            max_radius(spec.categories)
        )));
    }
    Ok(())
}

/// Standard HSV-to-RGB conversion; all components in `[0, 1]`.
fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.fract() + 1.0).fract() * 6.0;
    let i = h6.floor() as usize % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Palette color for category `k` of `categories`: evenly spaced hues at
/// high saturation so categories stay visually separable.
fn palette(category: usize, categories: usize) -> [f64; 3] {
    hsv_to_rgb(category as f64 / categories as f64, 0.85, 0.9)
}

/// Poisson sample by Knuth's product-of-uniforms method. Fine for the small
/// means used here; cost grows linearly with the mean.
fn poisson(rng: &mut ChaCha8Rng, mean: f64) -> usize {
    let limit = (-mean).exp();
    let mut count = 0usize;
    let mut product = 1.0;
    loop {
        product *= rng.gen::<f64>();
        if product <= limit {
            return count;
        }
        count += 1;
    }
}

/// Renders one scene. Returns the `[h, w, 3]` image (values in `[0, 1]`)
/// and the object centers, in draw order. Draws consume the RNG stream in a
/// fixed order (background, then categories, then instances), so identical
/// seeds give identical scenes.
pub fn generate_scene<F: Scalar>(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<(Tensor<F>, Vec<Point>)> {
    check_spec(spec)?;
    let (h, w) = (spec.height, spec.width);

    // Dim, lightly saturated background tint with per-pixel brightness noise
    // so the scene isn't a flat field.
    let tint = hsv_to_rgb(rng.gen::<f64>(), 0.2, 0.35);
    let mut pixels = vec![0.0f64; h * w * 3];
    for i in 0..h * w {
        let noise = rng.gen::<f64>() * 0.1 - 0.05;
        for c in 0..3 {
            pixels[i * 3 + c] = (tint[c] + noise).clamp(0.0, 1.0);
        }
    }

    let mut points = Vec::new();
    for k in 0..spec.categories {
        let color = palette(k, spec.categories);
        let r = radius(k);
        let n = poisson(rng, spec.mean_per_category);
        for _ in 0..n {
            let x = rng.gen_range(r as f64..(w - 1 - r) as f64);
            let y = rng.gen_range(r as f64..(h - 1 - r) as f64);
            fill_disc(&mut pixels, h, w, x, y, r, color);
            points.push(Point { x, y, category: k });
        }
    }

    let data: Vec<F> = pixels.into_iter().map(sc).collect();
    Ok((Tensor::new(&[h, w, 3], data)?, points))
}

/// Paints a filled disc of radius `r` centered at `(x, y)` (x along width).
fn fill_disc(pixels: &mut [f64], h: usize, w: usize, x: f64, y: f64, r: usize, color: [f64; 3]) {
    let r2 = (r as f64) * (r as f64);
    let row_lo = (y - r as f64).floor().max(0.0) as usize;
    let row_hi = ((y + r as f64).ceil() as usize).min(h - 1);
    let col_lo = (x - r as f64).floor().max(0.0) as usize;
    let col_hi = ((x + r as f64).ceil() as usize).min(w - 1);
    for row in row_lo..=row_hi {
        for col in col_lo..=col_hi {
            let dy = row as f64 - y;
            let dx = col as f64 - x;
            if dx * dx + dy * dy <= r2 {
                let base = (row * w + col) * 3;
                pixels[base..base + 3].copy_from_slice(&color);
            }
        }
    }
}

/// Generates `images` scenes under `dir` as `img_NNNN.ppm` / `img_NNNN.csv`
/// pairs plus an `index.json` manifest, and returns the index path. The same
/// `(spec, images, seed)` triple always produces byte-identical files.
pub fn generate_dataset(
    dir: &Path,
    spec: &SceneSpec,
    images: usize,
    split: &str,
    seed: u64,
) -> Result<PathBuf> {
    check_spec(spec)?;
    std::fs::create_dir_all(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(images);
    for i in 0..images {
        let (image, points) = generate_scene::<f32>(spec, &mut rng)?;
        let image_name = format!("img_{i:04}.ppm");
        let ann_name = format!("img_{i:04}.csv");
        ppm::write_ppm(&dir.join(&image_name), &image)?;
        annotations::write_annotations(&dir.join(&ann_name), &points)?;
        entries.push(ManifestEntry { image: image_name, annotation: ann_name });
    }
    let manifest = Manifest { k: spec.categories, split: split.to_string(), entries };
    let index = dir.join("index.json");
    manifest.save(&index)?;
    Ok(index)
}
