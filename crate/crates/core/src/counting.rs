//! Density-map ground truth and counting metrics.
//!
//! Each annotated object is splatted as a small Gaussian onto its category's
//! density plane, so integrating a plane recovers that category's object
//! count. Density grids are stored in the model's scalar type; counts and
//! metrics always accumulate in `f64`.

use crate::error::{MocError, Result};
use crate::nn::{sc, Scalar, Tensor};

/// One annotated object center in pixel coordinates (x right, y down).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub category: usize,
}

/// Gaussian splat settings.
#[derive(Clone, Copy, Debug)]
pub struct DensityOptions {
    /// Standard deviation of the splat, in pixels.
    pub sigma: f64,
    /// Square window side length; the splat is truncated outside it.
    pub window: usize,
    /// When true (the default), a splat clipped by the image border is
    /// rescaled so its in-image mass is still exactly one. When false, every
    /// splat carries the full-window normalization and border objects lose
    /// the clipped part of their mass.
    pub renormalize: bool,
}

impl Default for DensityOptions {
    fn default() -> Self {
        Self { sigma: 4.0, window: 15, renormalize: true }
    }
}

/// Rasterizes annotations into an `[h, w, categories]` density grid.
///
/// Centers are rounded to the nearest pixel (and clamped to the grid, so a
/// coordinate like `w - 0.3` cannot escape). Each point must carry a
/// category below `categories` and coordinates inside `[0, w) x [0, h)`.
pub fn gt_density<F: Scalar>(
    points: &[Point],
    h: usize,
    w: usize,
    categories: usize,
    opts: &DensityOptions,
) -> Result<Tensor<F>> {
    if h == 0 || w == 0 || categories == 0 {
        return Err(MocError::Argument("density grid needs positive extent and category count".into()));
    }
    if opts.window == 0 || opts.sigma <= 0.0 {
        return Err(MocError::Argument("density options need a positive window and sigma".into()));
    }
    let mut grid = vec![0.0f64; h * w * categories];
    let half = (opts.window / 2) as isize;
    let inv_two_sigma_sq = 1.0 / (2.0 * opts.sigma * opts.sigma);

    // Full-window mass is position independent; compute it once.
    let mut full_mass = 0.0f64;
    for dy in -half..=half {
        for dx in -half..=half {
            full_mass += (-((dx * dx + dy * dy) as f64) * inv_two_sigma_sq).exp();
        }
    }

    for (i, p) in points.iter().enumerate() {
        if p.category >= categories {
            return Err(MocError::Argument(format!(
                "point {i} has category {} but only {categories} categories exist",
                p.category
            )));
        }
        if !(p.x.is_finite() && p.y.is_finite()) || p.x < 0.0 || p.y < 0.0 || p.x >= w as f64 || p.y >= h as f64 {
            return Err(MocError::Argument(format!(
                "point {i} at ({}, {}) lies outside the {w}x{h} image",
                p.x, p.y
            )));
        }
        let cx = (p.x.round() as isize).min(w as isize - 1);
        let cy = (p.y.round() as isize).min(h as isize - 1);
        let y0 = (cy - half).max(0);
        let y1 = (cy + half).min(h as isize - 1);
        let x0 = (cx - half).max(0);
        let x1 = (cx + half).min(w as isize - 1);

        let mass = if opts.renormalize {
            let mut m = 0.0f64;
            for iy in y0..=y1 {
                for ix in x0..=x1 {
                    let (dy, dx) = (iy - cy, ix - cx);
                    m += (-((dx * dx + dy * dy) as f64) * inv_two_sigma_sq).exp();
                }
            }
            m
        } else {
            full_mass
        };

        let scale = 1.0 / mass;
        for iy in y0..=y1 {
            for ix in x0..=x1 {
                let (dy, dx) = (iy - cy, ix - cx);
                let v = (-((dx * dx + dy * dy) as f64) * inv_two_sigma_sq).exp() * scale;
                grid[(iy as usize * w + ix as usize) * categories + p.category] += v;
            }
        }
    }

    let data: Vec<F> = grid.into_iter().map(sc).collect();
    Tensor::new(&[h, w, categories], data)
}

/// Integrates each category plane of an `[h, w, categories]` density grid.
pub fn counts_from_density<F: Scalar>(density: &Tensor<F>) -> Result<Vec<f64>> {
    let shape = density.shape();
    if shape.len() != 3 {
        return Err(MocError::Shape(format!("density must be [h, w, categories], got {shape:?}")));
    }
    let categories = shape[2];
    let mut sums = vec![0.0f64; categories];
    for (i, v) in density.data().iter().enumerate() {
        sums[i % categories] += v.to_f64().unwrap();
    }
    Ok(sums)
}

/// Downsamples a density grid by summing non-overlapping `factor x factor`
/// cells, preserving total mass. Used to bring full-resolution ground truth
/// to the model's output stride.
pub fn sum_pool<F: Scalar>(density: &Tensor<F>, factor: usize) -> Result<Tensor<F>> {
    let shape = density.shape();
    if shape.len() != 3 {
        return Err(MocError::Shape(format!("density must be [h, w, categories], got {shape:?}")));
    }
    if factor == 0 {
        return Err(MocError::Argument("pooling factor must be positive".into()));
    }
    let (h, w, k) = (shape[0], shape[1], shape[2]);
    if h % factor != 0 || w % factor != 0 {
        return Err(MocError::Shape(format!(
            "grid {h}x{w} is not divisible by pooling factor {factor}"
        )));
    }
    let (oh, ow) = (h / factor, w / factor);
    let d = density.data();
    let mut out = vec![F::zero(); oh * ow * k];
    for iy in 0..h {
        let oy = iy / factor;
        for ix in 0..w {
            let ox = ix / factor;
            let src = (iy * w + ix) * k;
            let dst = (oy * ow + ox) * k;
            for ch in 0..k {
                out[dst + ch] = out[dst + ch] + d[src + ch];
            }
        }
    }
    Tensor::new(&[oh, ow, k], out)
}

/// Mean absolute error and root mean squared error between paired counts.
pub fn mae_rmse(predicted: &[f64], actual: &[f64]) -> Result<(f64, f64)> {
    if predicted.is_empty() || predicted.len() != actual.len() {
        return Err(MocError::Argument(format!(
            "count series must be non-empty and equal length, got {} and {}",
            predicted.len(),
            actual.len()
        )));
    }
    let n = predicted.len() as f64;
    let mut abs_sum = 0.0;
    let mut sq_sum = 0.0;
    for (&p, &a) in predicted.iter().zip(actual) {
        let e = p - a;
        abs_sum += e.abs();
        sq_sum += e * e;
    }
    Ok((abs_sum / n, (sq_sum / n).sqrt()))
}

/// Mean of per-category RMSE values.
pub fn mse_bar(rmse_per_category: &[f64]) -> Result<f64> {
    if rmse_per_category.is_empty() {
        return Err(MocError::Argument("need at least one category RMSE".into()));
    }
    Ok(rmse_per_category.iter().sum::<f64>() / rmse_per_category.len() as f64)
}

/// Weighted mean of per-category squared RMSE values. Weights must be
/// non-negative and sum to one (within 1e-6).
pub fn wmse(rmse_per_category: &[f64], weights: &[f64]) -> Result<f64> {
    if rmse_per_category.is_empty() || rmse_per_category.len() != weights.len() {
        return Err(MocError::Argument(format!(
            "need matching non-empty RMSE and weight lists, got {} and {}",
            rmse_per_category.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|&w| !(w >= 0.0)) {
        return Err(MocError::Argument("weights must be non-negative".into()));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(MocError::Argument(format!("weights must sum to 1, got {total}")));
    }
    Ok(rmse_per_category.iter().zip(weights).map(|(&r, &w)| w * r * r).sum())
}

/// Per-category counting accuracy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CategoryMetrics {
    pub mae: f64,
    pub rmse: f64,
}

/// Full evaluation summary over a set of images.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub per_category: Vec<CategoryMetrics>,
    pub mse_bar: f64,
    pub wmse: f64,
}

impl MetricReport {
    /// Builds the report from per-image, per-category counts with uniform
    /// category weights.
    pub fn from_counts(predicted: &[Vec<f64>], actual: &[Vec<f64>]) -> Result<Self> {
        let k = predicted
            .first()
            .ok_or_else(|| MocError::Argument("need at least one image".into()))?
            .len();
        let uniform = vec![1.0 / k as f64; k];
        Self::from_counts_weighted(predicted, actual, &uniform)
    }

    /// Builds the report with explicit category weights for the weighted
    /// squared-error summary.
    pub fn from_counts_weighted(predicted: &[Vec<f64>], actual: &[Vec<f64>], weights: &[f64]) -> Result<Self> {
        if predicted.is_empty() || predicted.len() != actual.len() {
            return Err(MocError::Argument(format!(
                "need matching non-empty prediction/actual sets, got {} and {}",
                predicted.len(),
                actual.len()
            )));
        }
        let k = predicted[0].len();
        if k == 0 {
            return Err(MocError::Argument("need at least one category".into()));
        }
        for (i, (p, a)) in predicted.iter().zip(actual).enumerate() {
            if p.len() != k || a.len() != k {
                return Err(MocError::Argument(format!(
                    "image {i} has {}/{} category counts, expected {k}",
                    p.len(),
                    a.len()
                )));
            }
        }
        let mut per_category = Vec::with_capacity(k);
        for ch in 0..k {
            let pc: Vec<f64> = predicted.iter().map(|row| row[ch]).collect();
            let ac: Vec<f64> = actual.iter().map(|row| row[ch]).collect();
            let (mae, rmse) = mae_rmse(&pc, &ac)?;
            per_category.push(CategoryMetrics { mae, rmse });
        }
        let rmses: Vec<f64> = per_category.iter().map(|m| m.rmse).collect();
        Ok(Self {
            mse_bar: mse_bar(&rmses)?,
            wmse: wmse(&rmses, weights)?,
            per_category,
        })
    }

    /// CSV rendering: one row per category plus two summary rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("category,mae,rmse\n");
        for (i, m) in self.per_category.iter().enumerate() {
            out.push_str(&format!("{i},{},{}\n", m.mae, m.rmse));
        }
        out.push_str(&format!("mse_bar,{}\n", self.mse_bar));
        out.push_str(&format!("wmse,{}\n", self.wmse));
        out
    }
}
