//! Operators between image space and fibre space.
//!
//! Vectorisation averages an image over each fibre's Voronoi cell, min-max
//! normalises the cell means to [0, 1] and zero-pads them to a fixed length.
//! Reconstruction goes the other way by Delaunay interpolation. Synthetic LR
//! frames chain cell averaging, fibre noise and reconstruction.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::FibreLayout;
use crate::image::Image;

/// Default padded fibre-vector length.
pub const DEFAULT_N_F: usize = 682;

/// Normalised, zero-padded per-fibre signal.
#[derive(Debug, Clone, PartialEq)]
pub struct FibreVector {
    values: Vec<f32>,
    live_count: usize,
    norm_min: f64,
    norm_max: f64,
}

impl FibreVector {
    /// Min-max normalises `signals` and pads them with zeros to `n_f`.
    /// A constant signal normalises to all zeros.
    pub fn from_signals(signals: &[f64], n_f: usize) -> Result<FibreVector> {
        if signals.len() > n_f {
            return Err(Error::TooManyFibres {
                count: signals.len(),
                n_f,
            });
        }
        let (lo, hi) = signals
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        let mut values = vec![0.0f32; n_f];
        if hi > lo {
            let inv = 1.0 / (hi - lo);
            for (o, &s) in values.iter_mut().zip(signals) {
                *o = ((s - lo) * inv) as f32;
            }
        }
        Ok(FibreVector {
            values,
            live_count: signals.len(),
            norm_min: lo,
            norm_max: hi,
        })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// The entries belonging to real fibres.
    pub fn live(&self) -> &[f32] {
        &self.values[..self.live_count]
    }

    pub fn n_f(&self) -> usize {
        self.values.len()
    }

    pub fn live_count(&self) -> usize {
        self.live_count
    }

    /// Pre-normalisation range `(min, max)` of the cell means.
    pub fn range(&self) -> (f64, f64) {
        (self.norm_min, self.norm_max)
    }

    pub fn is_degenerate(&self) -> bool {
        self.norm_max <= self.norm_min
    }

    /// `index,value` rows, one per entry including padding.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,value\n");
        for (i, v) in self.values.iter().enumerate() {
            let _ = writeln!(out, "{i},{v}");
        }
        out
    }
}

/// Raw Voronoi cell means of `hr` (one per fibre).
pub fn extract_fibre_signals(hr: &Image, layout: &FibreLayout) -> Result<Vec<f64>> {
    if hr.dims() != layout.dims() {
        return Err(Error::DimensionMismatch {
            context: "image vs fibre layout",
            expected: layout.dims(),
            found: hr.dims(),
        });
    }
    let mut acc = vec![0.0f64; layout.fibre_count()];
    for (&label, &v) in layout.cell_labels().iter().zip(hr.data()) {
        acc[label as usize] += v as f64;
    }
    Ok(acc
        .into_iter()
        .zip(layout.cell_sizes())
        .map(|(s, &k)| if k == 0 { 0.0 } else { s / k as f64 })
        .collect())
}

pub fn vectorize(image: &Image, layout: &FibreLayout, n_f: usize) -> Result<FibreVector> {
    if layout.fibre_count() > n_f {
        return Err(Error::TooManyFibres {
            count: layout.fibre_count(),
            n_f,
        });
    }
    FibreVector::from_signals(&extract_fibre_signals(image, layout)?, n_f)
}

/// Delaunay reconstruction clamped to [0, 1].
pub fn reconstruct_lr(values: &[f64], layout: &FibreLayout) -> Result<Image> {
    let mut img = layout.interpolate(values)?;
    for v in img.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(img)
}

/// Fibre noise `fs · (1 + ε_mult) + ε_add`, clamped at zero.
#[derive(Debug, Clone)]
pub struct NoiseModel {
    sigma_add: f64,
    sigma_mult: f64,
    seed: u64,
    rng: ChaCha8Rng,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseParams {
    pub sigma_add: f64,
    pub sigma_mult: f64,
}

impl Default for NoiseParams {
    fn default() -> Self {
        NoiseParams {
            sigma_add: 0.02,
            sigma_mult: 0.05,
        }
    }
}

impl NoiseModel {
    pub fn new(sigma_add: f64, sigma_mult: f64, seed: u64) -> Result<NoiseModel> {
        if !(sigma_add >= 0.0 && sigma_mult >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "noise sigmas must be non-negative, got add={sigma_add} mult={sigma_mult}"
            )));
        }
        Ok(NoiseModel {
            sigma_add,
            sigma_mult,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn from_params(p: NoiseParams, seed: u64) -> Result<NoiseModel> {
        NoiseModel::new(p.sigma_add, p.sigma_mult, seed)
    }

    pub fn noiseless() -> NoiseModel {
        NoiseModel::new(0.0, 0.0, 0).expect("zero sigmas are valid")
    }

    pub fn params(&self) -> NoiseParams {
        NoiseParams {
            sigma_add: self.sigma_add,
            sigma_mult: self.sigma_mult,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Draws fresh noise for every signal, advancing the internal stream.
    pub fn apply(&mut self, fs: &[f64]) -> Vec<f64> {
        if self.sigma_add == 0.0 && self.sigma_mult == 0.0 {
            return fs.to_vec();
        }
        let std = Normal::new(0.0, 1.0).expect("unit normal");
        fs.iter()
            .map(|&s| {
                let em = self.sigma_mult * std.sample(&mut self.rng);
                let ea = self.sigma_add * std.sample(&mut self.rng);
                (s * (1.0 + em) + ea).max(0.0)
            })
            .collect()
    }
}

pub fn apply_noise(fs: &[f64], model: &mut NoiseModel) -> Vec<f64> {
    model.apply(fs)
}

/// Synthetic LR frame aligned with `hr`: cell means, fibre noise, Delaunay
/// reconstruction, then a per-frame rescale to [0, 1]. A flat reconstruction
/// is only clamped.
pub fn synthesize_lr(hr: &Image, layout: &FibreLayout, model: &mut NoiseModel) -> Result<Image> {
    let fs = extract_fibre_signals(hr, layout)?;
    let nfs = model.apply(&fs);
    let mut img = layout.interpolate(&nfs)?;
    let (lo, hi) = img.min_max();
    if hi > lo {
        let inv = 1.0 / (hi as f64 - lo as f64);
        for v in img.data_mut() {
            *v = ((*v as f64 - lo as f64) * inv) as f32;
        }
    } else {
        for v in img.data_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
    Ok(img.with_fov(hr.fov()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{generate_layout, Point};

    fn two_fibre_layout() -> FibreLayout {
        FibreLayout::new(vec![Point::new(0.5, 0.5), Point::new(1.5, 1.5)], 2, 2).unwrap()
    }

    #[test]
    fn hand_vectorize_case() {
        let layout = two_fibre_layout();
        assert_eq!(layout.cell_labels().as_ref(), &[0, 0, 0, 1]);
        let img = Image::new(2, 2, vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let fs = extract_fibre_signals(&img, &layout).unwrap();
        assert_eq!(fs, vec![3.0, 7.0]);
        let v = vectorize(&img, &layout, 10).unwrap();
        assert_eq!(&v.values()[..2], &[0.0, 1.0]);
        assert!(v.values()[2..].iter().all(|&x| x == 0.0));
        assert_eq!(v.range(), (3.0, 7.0));
    }

    #[test]
    fn constant_image_vectorizes_to_zeros() {
        let layout = generate_layout(16, 16, 0.25, 0.2, 1).unwrap();
        let v = vectorize(&Image::filled(16, 16, 0.3), &layout, 100).unwrap();
        assert!(v.values().iter().all(|&x| x == 0.0));
        assert!(v.is_degenerate());
    }

    #[test]
    fn too_many_fibres() {
        let layout = generate_layout(16, 16, 0.5, 0.2, 1).unwrap();
        let e = vectorize(&Image::filled(16, 16, 0.3), &layout, 10);
        assert!(matches!(e, Err(Error::TooManyFibres { .. })));
    }

    #[test]
    fn zero_noise_is_identity() {
        let mut m = NoiseModel::new(0.0, 0.0, 4).unwrap();
        assert_eq!(m.apply(&[0.1, 0.7]), vec![0.1, 0.7]);
        assert!(NoiseModel::new(-1.0, 0.0, 0).is_err());
    }

    #[test]
    fn padding_only_changes_tail() {
        let layout = generate_layout(16, 16, 0.25, 0.2, 2).unwrap();
        let img = Image::from_fn(16, 16, |x, y| ((x * y) % 7) as f32 / 7.0);
        let a = vectorize(&img, &layout, 80).unwrap();
        let b = vectorize(&img, &layout, 200).unwrap();
        assert_eq!(a.live(), b.live());
        assert!(b.values()[a.live_count()..].iter().all(|&x| x == 0.0));
    }
}
