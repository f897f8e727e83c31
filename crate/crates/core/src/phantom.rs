//! Procedural stand-ins for high-resolution endomicroscopy frames.

use std::f64::consts::PI;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Frame, Role};
use crate::error::{Error, Result};
use crate::forward_model::{synthesize_lr, NoiseModel, NoiseParams};
use crate::geometry::{generate_layout, FibreLayout};
use crate::image::Image;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhantomKind {
    /// Gaussian blobs of random size and sign.
    Blobs,
    /// Wavy thin ridges at random orientations.
    Filaments,
    /// Smooth ramps with a low-frequency modulation.
    Gradient,
    /// Weighted sum of the three above.
    Mixed,
}

impl FromStr for PhantomKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs" => Ok(PhantomKind::Blobs),
            "filaments" => Ok(PhantomKind::Filaments),
            "gradient" => Ok(PhantomKind::Gradient),
            "mixed" => Ok(PhantomKind::Mixed),
            other => Err(Error::Config(format!("unknown phantom kind {other:?}"))),
        }
    }
}

fn blobs(w: usize, h: usize, rng: &mut impl Rng) -> Vec<f64> {
    let scale = w.min(h) as f64;
    let count = rng.gen_range(12..28);
    let blobs: Vec<(f64, f64, f64, f64)> = (0..count)
        .map(|_| {
            let r = rng.gen_range(0.02..0.12) * scale;
            let amp = if rng.gen_bool(0.8) { 1.0 } else { -0.6 } * rng.gen_range(0.4..1.0);
            (
                rng.gen_range(0.0..w as f64),
                rng.gen_range(0.0..h as f64),
                r,
                amp,
            )
        })
        .collect();
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            out[y * w + x] = blobs
                .iter()
                .map(|&(cx, cy, r, a)| {
                    let d2 = (px - cx).powi(2) + (py - cy).powi(2);
                    a * (-d2 / (2.0 * r * r)).exp()
                })
                .sum();
        }
    }
    out
}

fn filaments(w: usize, h: usize, rng: &mut impl Rng) -> Vec<f64> {
    let scale = w.min(h) as f64;
    let count = rng.gen_range(3..7);
    let params: Vec<[f64; 6]> = (0..count)
        .map(|_| {
            [
                rng.gen_range(0.0..PI),
                2.0 * PI / (rng.gen_range(0.15..0.45) * scale),
                rng.gen_range(0.3..1.5),
                2.0 * PI / (rng.gen_range(0.3..1.0) * scale),
                rng.gen_range(0.0..2.0 * PI),
                rng.gen_range(0.5..1.0),
            ]
        })
        .collect();
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            out[y * w + x] = params
                .iter()
                .map(|&[theta, k, amp, k2, phi, weight]| {
                    let (s, c) = theta.sin_cos();
                    let u = px * c + py * s;
                    let v = -px * s + py * c;
                    let phase = k * u + amp * (k2 * v).sin() + phi;
                    weight * (1.0 - phase.sin().abs()).powi(8)
                })
                .sum();
        }
    }
    out
}

fn gradient(w: usize, h: usize, rng: &mut impl Rng) -> Vec<f64> {
    let theta: f64 = rng.gen_range(0.0..2.0 * PI);
    let (s, c) = theta.sin_cos();
    let k = 2.0 * PI / (rng.gen_range(0.5..1.5) * w.max(h) as f64);
    let phi: f64 = rng.gen_range(0.0..2.0 * PI);
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let (u, v) = (x as f64 / w as f64, y as f64 / h as f64);
            out[y * w + x] = u * c + v * s + 0.3 * (k * (x as f64 - y as f64) + phi).cos();
        }
    }
    out
}

fn rescale(v: Vec<f64>, w: usize, h: usize) -> Image {
    let (lo, hi) = v
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        });
    let inv = if hi > lo { 1.0 / (hi - lo) } else { 0.0 };
    Image::new(
        w,
        h,
        v.into_iter().map(|x| ((x - lo) * inv) as f32).collect(),
    )
    .expect("length matches dims")
}

/// A phantom frame rescaled to span [0, 1]. Deterministic given `seed`.
pub fn generate(kind: PhantomKind, width: usize, height: usize, seed: u64) -> Image {
    let mut rng = seed::rng(seed, "phantom", 0);
    let v = match kind {
        PhantomKind::Blobs => blobs(width, height, &mut rng),
        PhantomKind::Filaments => filaments(width, height, &mut rng),
        PhantomKind::Gradient => gradient(width, height, &mut rng),
        PhantomKind::Mixed => {
            let b = blobs(width, height, &mut rng);
            let f = filaments(width, height, &mut rng);
            let g = gradient(width, height, &mut rng);
            let norm = |v: &[f64]| {
                let m = v.iter().fold(0.0f64, |a, &x| a.max(x.abs()));
                if m > 0.0 {
                    1.0 / m
                } else {
                    0.0
                }
            };
            let (nb, nf, ng) = (norm(&b), norm(&f), norm(&g));
            (0..width * height)
                .map(|i| 0.45 * b[i] * nb + 0.4 * f[i] * nf + 0.15 * g[i] * ng)
                .collect()
        }
    };
    rescale(v, width, height)
}

/// Parameters of a procedural HR/LR corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub kind: PhantomKind,
    pub density: f64,
    pub jitter: f64,
    pub noise: NoiseParams,
    pub frames_per_video: usize,
    pub videos_per_patient: usize,
    /// Clinical-setting labels assigned to patients round-robin; empty for
    /// unlabelled data.
    pub settings: Vec<String>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            frames: 50,
            width: 64,
            height: 64,
            kind: PhantomKind::Mixed,
            density: 1.0 / 7.0,
            jitter: 0.15,
            noise: NoiseParams::default(),
            frames_per_video: 1,
            videos_per_patient: 1,
            settings: Vec::new(),
        }
    }
}

/// Matching HR phantoms and synthetic LR frames over one fibre layout.
/// `hr[i]` and `lr[i]` share id, video and patient.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub layout: FibreLayout,
    pub hr: Vec<Frame>,
    pub lr: Vec<Frame>,
}

pub fn synthesize_corpus(config: &CorpusConfig, seed: u64) -> Result<Corpus> {
    if config.frames == 0 || config.frames_per_video == 0 || config.videos_per_patient == 0 {
        return Err(Error::Config(
            "frames, frames_per_video and videos_per_patient must be positive".into(),
        ));
    }
    let layout = generate_layout(
        config.width,
        config.height,
        config.density,
        config.jitter,
        seed::derive(seed, "layout", 0),
    )?;
    let mut noise = NoiseModel::from_params(config.noise, seed::derive(seed, "noise", 0))?;
    let mut hr = Vec::with_capacity(config.frames);
    let mut lr = Vec::with_capacity(config.frames);
    for i in 0..config.frames {
        let video = i / config.frames_per_video;
        let patient = video / config.videos_per_patient;
        let setting = (!config.settings.is_empty())
            .then(|| config.settings[patient % config.settings.len()].clone());
        let id = format!("frame_{i:05}");
        let image = generate(
            config.kind,
            config.width,
            config.height,
            seed::derive(seed, "frame", i as u64),
        );
        let low = synthesize_lr(&image, &layout, &mut noise)?;
        let (v, p) = (format!("video_{video:04}"), format!("patient_{patient:04}"));
        hr.push(Frame::new(
            &id,
            image,
            &v,
            &p,
            setting.clone(),
            Role::EstimatedHr,
        )?);
        lr.push(Frame::new(&id, low, &v, &p, setting, Role::InputLr)?);
    }
    Ok(Corpus { layout, hr, lr })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phantoms_span_unit_range_and_are_deterministic() {
        for kind in [
            PhantomKind::Blobs,
            PhantomKind::Filaments,
            PhantomKind::Gradient,
            PhantomKind::Mixed,
        ] {
            let a = generate(kind, 48, 40, 7);
            assert_eq!(a.min_max(), (0.0, 1.0));
            assert_eq!(a, generate(kind, 48, 40, 7));
            assert_ne!(a, generate(kind, 48, 40, 8));
        }
        assert!("stripes".parse::<PhantomKind>().is_err());
    }

    #[test]
    fn corpus_pairs_share_ids() {
        let cfg = CorpusConfig {
            frames: 4,
            width: 32,
            height: 32,
            frames_per_video: 2,
            settings: vec!["a".into(), "b".into()],
            ..Default::default()
        };
        let c = synthesize_corpus(&cfg, 3).unwrap();
        assert_eq!(c.hr.len(), 4);
        for (h, l) in c.hr.iter().zip(&c.lr) {
            assert_eq!(
                (&h.id, &h.video_id, &h.patient_id),
                (&l.id, &l.video_id, &l.patient_id)
            );
            assert_eq!(l.image.dims(), (32, 32));
        }
        assert_eq!(c.hr[2].video_id, "video_0001");
        assert_eq!(c.hr[2].setting.as_deref(), Some("b"));
    }
}
