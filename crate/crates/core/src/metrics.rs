//! Image-quality metrics: SSIM, global contrast factor (GCF), contrast
//! differences and the composite score, plus report rendering.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const SSIM_RANGE: f64 = 1.0;
const GCF_LEVELS: usize = 9;

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable weighted sum over every valid `k × k` window.
fn filter_valid(src: &[f64], w: usize, h: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (ow, oh) = (w - k + 1, h - k + 1);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            tmp[y * ow + x] = g.iter().zip(&row[x..x + k]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|j| g[j] * tmp[(y + j) * ow + x]).sum();
        }
    }
    out
}

/// Mean structural similarity with an 11×11 Gaussian window (σ = 1.5),
/// `K1 = 0.01`, `K2 = 0.03` and dynamic range 1, over all window positions
/// fully inside the image. Images smaller than the window use the largest
/// odd window that fits.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.ensure_same_dims(b, "ssim")?;
    let (w, h) = a.dims();
    if w == 0 || h == 0 {
        return Err(Error::InvalidArgument("ssim of an empty image".into()));
    }
    let mut k = SSIM_WINDOW.min(w).min(h);
    if k % 2 == 0 {
        k -= 1;
    }
    let g = gaussian_window(k, SSIM_SIGMA);
    let x: Vec<f64> = a.data().iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = b.data().iter().map(|&v| v as f64).collect();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
    let mx = filter_valid(&x, w, h, &g);
    let my = filter_valid(&y, w, h, &g);
    let sxx = filter_valid(&xx, w, h, &g);
    let syy = filter_valid(&yy, w, h, &g);
    let sxy = filter_valid(&xy, w, h, &g);
    let c1 = (SSIM_K1 * SSIM_RANGE).powi(2);
    let c2 = (SSIM_K2 * SSIM_RANGE).powi(2);
    let n = mx.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / n as f64)
}

/// Weight of GCF level `i` (1-based).
pub fn gcf_weight(i: usize) -> f64 {
    let t = i as f64 / GCF_LEVELS as f64;
    (-0.406385 * t + 0.334573) * t + 0.0877526
}

/// Mean over pixels of the average absolute difference to the existing
/// 4-neighbours.
fn mean_local_contrast(lum: &[f64], w: usize, h: usize) -> f64 {
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            let c = lum[y * w + x];
            let mut s = 0.0;
            let mut k = 0usize;
            if x > 0 {
                s += (c - lum[y * w + x - 1]).abs();
                k += 1;
            }
            if x + 1 < w {
                s += (c - lum[y * w + x + 1]).abs();
                k += 1;
            }
            if y > 0 {
                s += (c - lum[(y - 1) * w + x]).abs();
                k += 1;
            }
            if y + 1 < h {
                s += (c - lum[(y + 1) * w + x]).abs();
                k += 1;
            }
            if k > 0 {
                total += s / k as f64;
            }
        }
    }
    total / (w * h) as f64
}

/// Per-level mean local contrasts `C_i`, starting at full resolution. Each
/// further level averages 2×2 blocks of the previous one; levels stop early
/// once a dimension would drop to zero.
pub fn gcf_levels(image: &Image) -> Vec<f64> {
    let (mut w, mut h) = image.dims();
    let mut pix: Vec<f64> = image.data().iter().map(|&v| v.max(0.0) as f64).collect();
    let mut out = Vec::with_capacity(GCF_LEVELS);
    for level in 0..GCF_LEVELS {
        if level > 0 {
            let (nw, nh) = (w / 2, h / 2);
            if nw == 0 || nh == 0 {
                break;
            }
            let mut next = vec![0.0; nw * nh];
            for y in 0..nh {
                for x in 0..nw {
                    let i = 2 * y * w + 2 * x;
                    next[y * nw + x] = (pix[i] + pix[i + 1] + pix[i + w] + pix[i + w + 1]) / 4.0;
                }
            }
            pix = next;
            w = nw;
            h = nh;
        }
        let lum: Vec<f64> = pix.iter().map(|&p| 100.0 * p.powf(2.2).sqrt()).collect();
        out.push(mean_local_contrast(&lum, w, h));
    }
    out
}

/// Global contrast factor: weighted sum of the per-level contrasts.
pub fn gcf(image: &Image) -> f64 {
    gcf_levels(image)
        .iter()
        .enumerate()
        .map(|(i, c)| gcf_weight(i + 1) * c)
        .sum()
}

/// Composite score: mean of SSIM mapped from [0.6, 1] and ΔGCF mapped from
/// [-0.5, 1.3] onto [0, 1]. Not clamped.
pub fn tot_cs(ssim_hr: f64, delta_gcf_hr: f64) -> f64 {
    ((ssim_hr - 0.6) / 0.4 + (delta_gcf_hr + 0.5) / 1.8) / 2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRow {
    pub image_id: String,
    pub ssim_hr: f64,
    pub gcf_sr: f64,
    pub gcf_hr: f64,
    pub gcf_lr: f64,
    pub delta_gcf_hr: f64,
    pub delta_gcf_lr: f64,
    pub tot_cs: f64,
}

impl EvaluationRow {
    pub fn compute(image_id: &str, sr: &Image, hr: &Image, lr: &Image) -> Result<EvaluationRow> {
        sr.ensure_same_dims(lr, "sr vs lr")?;
        let ssim_hr = ssim(sr, hr)?;
        let (gcf_sr, gcf_hr, gcf_lr) = (gcf(sr), gcf(hr), gcf(lr));
        let delta_gcf_hr = gcf_sr - gcf_hr;
        Ok(EvaluationRow {
            image_id: image_id.to_string(),
            ssim_hr,
            gcf_sr,
            gcf_hr,
            gcf_lr,
            delta_gcf_hr,
            delta_gcf_lr: gcf_sr - gcf_lr,
            tot_cs: tot_cs(ssim_hr, delta_gcf_hr),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    /// Sample standard deviation (zero for a single row).
    pub std: f64,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Aggregate {
        let n = values.len();
        if n == 0 {
            return Aggregate {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Aggregate { mean, std }
    }
}

pub const REPORT_COLUMNS: [&str; 7] = [
    "ssim_hr",
    "gcf_sr",
    "gcf_hr",
    "gcf_lr",
    "delta_gcf_hr",
    "delta_gcf_lr",
    "tot_cs",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub rows: Vec<EvaluationRow>,
}

impl EvaluationReport {
    pub fn column(&self, name: &str) -> Vec<f64> {
        self.rows
            .iter()
            .map(|r| match name {
                "ssim_hr" => r.ssim_hr,
                "gcf_sr" => r.gcf_sr,
                "gcf_hr" => r.gcf_hr,
                "gcf_lr" => r.gcf_lr,
                "delta_gcf_hr" => r.delta_gcf_hr,
                "delta_gcf_lr" => r.delta_gcf_lr,
                "tot_cs" => r.tot_cs,
                other => panic!("unknown report column {other}"),
            })
            .collect()
    }

    pub fn aggregates(&self) -> BTreeMap<&'static str, Aggregate> {
        REPORT_COLUMNS
            .iter()
            .map(|&c| (c, Aggregate::of(&self.column(c))))
            .collect()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn from_csv(text: &str) -> Result<EvaluationReport> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let rows = r
            .deserialize()
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(EvaluationReport { rows })
    }

    /// Mean ± std table in the layout of the published comparison tables.
    pub fn text_table(&self) -> String {
        let agg = self.aggregates();
        let mut out = String::new();
        let _ = writeln!(out, "images: {}", self.rows.len());
        let _ = writeln!(out, "{:<16} {:>10} {:>10}", "metric", "mean", "std");
        for (label, key) in [
            ("SSIM", "ssim_hr"),
            ("dGCF_HR", "delta_gcf_hr"),
            ("dGCF_LR", "delta_gcf_lr"),
            ("Tot_cs", "tot_cs"),
            ("GCF_SR", "gcf_sr"),
            ("GCF_HR", "gcf_hr"),
            ("GCF_LR", "gcf_lr"),
        ] {
            let a = agg[key];
            let _ = writeln!(out, "{label:<16} {:>10.4} {:>10.4}", a.mean, a.std);
        }
        out
    }

    /// Box plot of one column as a standalone SVG document.
    pub fn box_plot_svg(&self, column: &str) -> String {
        let mut v = self.column(column);
        v.sort_by(f64::total_cmp);
        let (w, h, pad) = (320.0, 240.0, 30.0);
        let mut svg = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n\
             <text x=\"{}\" y=\"18\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\">{column}</text>\n",
            w / 2.0
        );
        if v.is_empty() {
            svg.push_str("</svg>\n");
            return svg;
        }
        let q = |p: f64| {
            let pos = p * (v.len() - 1) as f64;
            let (i, f) = (pos.floor() as usize, pos.fract());
            if i + 1 < v.len() {
                v[i] * (1.0 - f) + v[i + 1] * f
            } else {
                v[i]
            }
        };
        let (lo, hi) = (v[0], v[v.len() - 1]);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let ypos = |x: f64| h - pad - (x - lo) / span * (h - 2.0 * pad - 10.0);
        let (q1, q2, q3) = (q(0.25), q(0.5), q(0.75));
        let cx = w / 2.0;
        let _ = writeln!(
            svg,
            "<line x1=\"{cx}\" y1=\"{:.2}\" x2=\"{cx}\" y2=\"{:.2}\" stroke=\"black\"/>",
            ypos(lo),
            ypos(hi)
        );
        let _ = writeln!(
            svg,
            "<rect x=\"{}\" y=\"{:.2}\" width=\"80\" height=\"{:.2}\" fill=\"#9ecae1\" stroke=\"black\"/>",
            cx - 40.0,
            ypos(q3),
            (ypos(q1) - ypos(q3)).max(0.5)
        );
        let _ = writeln!(
            svg,
            "<line x1=\"{}\" y1=\"{:.2}\" x2=\"{}\" y2=\"{:.2}\" stroke=\"black\" stroke-width=\"2\"/>",
            cx - 40.0,
            ypos(q2),
            cx + 40.0,
            ypos(q2)
        );
        for (val, label) in [(lo, lo), (hi, hi)] {
            let _ = writeln!(
                svg,
                "<text x=\"{}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"11\">{label:.4}</text>",
                cx + 50.0,
                ypos(val) + 4.0
            );
        }
        svg.push_str("</svg>\n");
        svg
    }

    /// Writes `report.csv`, `report.txt` and, if asked, one SVG per column.
    pub fn write(&self, dir: impl AsRef<Path>, plots: bool) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |name: &str, text: String| -> Result<()> {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        put("report.csv", self.to_csv()?)?;
        put("report.txt", self.text_table())?;
        if plots {
            for c in ["ssim_hr", "delta_gcf_hr", "delta_gcf_lr", "tot_cs"] {
                put(&format!("{c}.svg"), self.box_plot_svg(c))?;
            }
        }
        Ok(())
    }
}

/// Evaluates aligned `(sr, hr, lr)` triples keyed by image id. Every id must
/// be present in all three sets.
pub fn evaluate(
    sr_set: &BTreeMap<String, Image>,
    hr_set: &BTreeMap<String, Image>,
    lr_set: &BTreeMap<String, Image>,
) -> Result<EvaluationReport> {
    let all: BTreeSet<&String> = sr_set
        .keys()
        .chain(hr_set.keys())
        .chain(lr_set.keys())
        .collect();
    let missing: Vec<String> = all
        .iter()
        .filter(|id| {
            !(sr_set.contains_key(**id) && hr_set.contains_key(**id) && lr_set.contains_key(**id))
        })
        .map(|id| id.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingPairs(missing));
    }
    let rows = sr_set
        .iter()
        .map(|(id, sr)| EvaluationRow::compute(id, sr, &hr_set[id], &lr_set[id]))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvaluationReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ssim_constant_closed_form() {
        let a = Image::filled(16, 16, 0.5);
        let b = Image::filled(16, 16, 0.25);
        let expect = (2.0 * 0.125 + 1e-4) / (0.3125 + 1e-4);
        assert!((ssim(&a, &b).unwrap() - expect).abs() < 1e-12);
        assert!((expect - 0.8001).abs() < 1e-4);
    }

    #[test]
    fn gcf_weight_polynomial() {
        // (-0.406385/9 + 0.334573)/9 + 0.0877526
        assert!((gcf_weight(1) - 0.119_910_6).abs() < 1e-6);
        let w9 = -0.406385 + 0.334573 + 0.0877526;
        assert!((gcf_weight(9) - w9).abs() < 1e-15);
    }

    #[test]
    fn gcf_two_pixel_case() {
        let img = Image::new(2, 1, vec![0.0, 1.0]).unwrap();
        assert_eq!(gcf_levels(&img), vec![100.0]);
        assert!((gcf(&img) - 100.0 * gcf_weight(1)).abs() < 1e-12);
        assert!((gcf(&img) - 11.991).abs() < 1e-3);
    }

    #[test]
    fn gcf_constant_is_zero() {
        assert_eq!(gcf(&Image::filled(300, 300, 0.7)), 0.0);
        assert_eq!(gcf_levels(&Image::filled(512, 512, 0.2)).len(), 9);
        assert_eq!(gcf_levels(&Image::filled(64, 64, 0.2)).len(), 7);
    }

    #[test]
    fn tot_cs_published_pairs() {
        assert!((tot_cs(0.91, 0.38) - 0.6319).abs() < 1e-4);
        assert!((tot_cs(0.87, -0.13) - 0.4403).abs() < 1e-4);
        assert!(tot_cs(0.6, -0.5).abs() < 1e-15);
    }

    #[test]
    fn missing_pairs_listed() {
        let mut sr = BTreeMap::new();
        let mut hr = BTreeMap::new();
        let lr: BTreeMap<String, Image> = BTreeMap::new();
        sr.insert("a".to_string(), Image::filled(12, 12, 0.1));
        hr.insert("a".to_string(), Image::filled(12, 12, 0.1));
        hr.insert("b".to_string(), Image::filled(12, 12, 0.1));
        match evaluate(&sr, &hr, &lr) {
            Err(Error::MissingPairs(ids)) => assert_eq!(ids, vec!["a", "b"]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn aggregate_sample_std() {
        let a = Aggregate::of(&[1.0, 2.0, 3.0]);
        assert_eq!(a.mean, 2.0);
        assert_eq!(a.std, 1.0);
    }
}
