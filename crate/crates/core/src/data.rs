//! Frames, patches, grouped splits and the target-domain builders.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward_model::{synthesize_lr, NoiseModel};
use crate::geometry::FibreLayout;
use crate::image::Image;
use crate::seed;

pub const DEFAULT_PATCH_SIZE: usize = 64;
pub const DEFAULT_FOV_COVERAGE: f64 = 0.99;
/// Box-filter factor of the downsampled-LR target domain.
pub const RES_FACTOR: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    InputLr,
    EstimatedHr,
    Natural,
    Derived,
}

/// One source image with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub id: String,
    pub image: Image,
    pub video_id: String,
    pub patient_id: String,
    pub setting: Option<String>,
    pub role: Role,
}

impl Frame {
    pub fn new(
        id: impl Into<String>,
        image: Image,
        video_id: impl Into<String>,
        patient_id: impl Into<String>,
        setting: Option<String>,
        role: Role,
    ) -> Result<Frame> {
        let (id, video_id, patient_id) = (id.into(), video_id.into(), patient_id.into());
        if id.is_empty() || video_id.is_empty() || patient_id.is_empty() {
            return Err(Error::Data(format!(
                "frame ids must be non-empty (id {id:?}, video {video_id:?}, patient {patient_id:?})"
            )));
        }
        Ok(Frame {
            id,
            image,
            video_id,
            patient_id,
            setting,
            role,
        })
    }
}

/// Provenance fields used for grouping and stratification.
pub trait Grouped {
    fn video_id(&self) -> &str;
    fn patient_id(&self) -> &str;
    fn setting(&self) -> Option<&str>;
}

impl Grouped for Frame {
    fn video_id(&self) -> &str {
        &self.video_id
    }
    fn patient_id(&self) -> &str {
        &self.patient_id
    }
    fn setting(&self) -> Option<&str> {
        self.setting.as_deref()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    /// Input low-resolution patches.
    Lr,
    Nat,
    Orig,
    Syn,
    Res,
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lr" => Ok(Domain::Lr),
            "nat" => Ok(Domain::Nat),
            "orig" => Ok(Domain::Orig),
            "syn" => Ok(Domain::Syn),
            "res" => Ok(Domain::Res),
            other => Err(Error::Config(format!(
                "unknown domain {other:?} (expected nat, orig, syn or res)"
            ))),
        }
    }
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Domain::Lr => "lr",
            Domain::Nat => "nat",
            Domain::Orig => "orig",
            Domain::Syn => "syn",
            Domain::Res => "res",
        };
        f.write_str(s)
    }
}

/// A square crop of a frame. `layout` is the fibre layout restricted to the
/// crop (input patches only); `paired` is an aligned partner patch (the
/// synthetic LR of a `syn` target patch).
#[derive(Debug, Clone)]
pub struct Patch {
    pub frame_id: String,
    pub video_id: String,
    pub patient_id: String,
    pub setting: Option<String>,
    pub x: usize,
    pub y: usize,
    pub image: Image,
    pub layout: Option<Arc<FibreLayout>>,
    pub paired: Option<Image>,
}

impl Patch {
    /// Identifier of the scene region the patch shows: frame id plus
    /// coordinates. Aligned LR and HR patches share it.
    pub fn provenance(&self) -> String {
        format!("{}@{},{}", self.frame_id, self.x, self.y)
    }
}

impl Grouped for Patch {
    fn video_id(&self) -> &str {
        &self.video_id
    }
    fn patient_id(&self) -> &str {
        &self.patient_id
    }
    fn setting(&self) -> Option<&str> {
        self.setting.as_deref()
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub domain: Domain,
    pub patches: Vec<Patch>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

/// Z-scores the in-FOV pixels, then rescales them to [0, 1]. Pixels outside
/// the field of view become 0. A frame with zero variance maps to 0.5.
pub fn normalize_frame(raw: &Image) -> Result<Image> {
    let (w, h) = raw.dims();
    if w == 0 || h == 0 {
        return Err(Error::Data("cannot normalise an empty frame".into()));
    }
    let inside: Vec<bool> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .map(|(x, y)| raw.in_fov(x, y))
        .collect();
    let vals: Vec<f64> = raw
        .data()
        .iter()
        .zip(&inside)
        .filter(|(_, &i)| i)
        .map(|(&v, _)| v as f64)
        .collect();
    if vals.is_empty() {
        return Err(Error::Data("field of view contains no pixel".into()));
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let mut out = vec![0.0f32; w * h];
    if var <= 0.0 {
        for (o, &i) in out.iter_mut().zip(&inside) {
            if i {
                *o = 0.5;
            }
        }
    } else {
        let sd = var.sqrt();
        let z: Vec<f64> = raw.data().iter().map(|&v| (v as f64 - mean) / sd).collect();
        let (lo, hi) = z
            .iter()
            .zip(&inside)
            .filter(|(_, &i)| i)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (&v, _)| {
                (lo.min(v), hi.max(v))
            });
        let inv = 1.0 / (hi - lo);
        for ((o, &zv), &i) in out.iter_mut().zip(&z).zip(&inside) {
            if i {
                *o = ((zv - lo) * inv) as f32;
            }
        }
    }
    Ok(Image::new(w, h, out)?.with_fov(raw.fov()))
}

/// Top-left corners of the non-overlapping `patch_size` tiles of `image`
/// whose FOV coverage is at least `coverage`.
pub fn patch_grid(image: &Image, patch_size: usize, coverage: f64) -> Vec<(usize, usize)> {
    let (w, h) = image.dims();
    if patch_size == 0 || patch_size > w || patch_size > h {
        return Vec::new();
    }
    let need = (coverage * (patch_size * patch_size) as f64).ceil() as usize;
    let mut out = Vec::new();
    for ty in 0..h / patch_size {
        for tx in 0..w / patch_size {
            let (x0, y0) = (tx * patch_size, ty * patch_size);
            let inside = (y0..y0 + patch_size)
                .flat_map(|y| (x0..x0 + patch_size).map(move |x| (x, y)))
                .filter(|&(x, y)| image.in_fov(x, y))
                .count();
            if inside >= need {
                out.push((x0, y0));
            }
        }
    }
    out
}

fn patch_from(frame: &Frame, image: Image, x: usize, y: usize) -> Patch {
    Patch {
        frame_id: frame.id.clone(),
        video_id: frame.video_id.clone(),
        patient_id: frame.patient_id.clone(),
        setting: frame.setting.clone(),
        x,
        y,
        image,
        layout: None,
        paired: None,
    }
}

/// Non-overlapping FOV-covered patches of a frame.
pub fn extract_patches(frame: &Frame, patch_size: usize, coverage: f64) -> Result<Vec<Patch>> {
    patch_grid(&frame.image, patch_size, coverage)
        .into_iter()
        .map(|(x, y)| {
            Ok(patch_from(
                frame,
                frame.image.crop(x, y, patch_size, patch_size)?,
                x,
                y,
            ))
        })
        .collect()
}

/// Input patches of an LR frame, each carrying its cropped fibre layout.
pub fn extract_input_patches(
    frame: &Frame,
    layout: &FibreLayout,
    patch_size: usize,
    coverage: f64,
) -> Result<Vec<Patch>> {
    if layout.dims() != frame.image.dims() {
        return Err(Error::DimensionMismatch {
            context: "frame vs fibre layout",
            expected: layout.dims(),
            found: frame.image.dims(),
        });
    }
    let mut out = extract_patches(frame, patch_size, coverage)?;
    for p in &mut out {
        p.layout = Some(Arc::new(layout.crop(p.x, p.y, patch_size, patch_size)?));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    /// Group by video.
    Cs1,
    /// Group by patient.
    Cs2,
}

impl FromStr for SplitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cs1" => Ok(SplitMode::Cs1),
            "cs2" => Ok(SplitMode::Cs2),
            other => Err(Error::Config(format!("unknown split mode {other:?}"))),
        }
    }
}

impl SplitMode {
    pub fn key<'a, G: Grouped>(&self, item: &'a G) -> &'a str {
        match self {
            SplitMode::Cs1 => item.video_id(),
            SplitMode::Cs2 => item.patient_id(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Splits<T> {
    pub train: Vec<T>,
    pub validation: Vec<T>,
    pub test: Vec<T>,
    /// Strata too small for a meaningful three-way split.
    pub warnings: Vec<String>,
}

/// Largest-remainder apportionment of `total` items over `fractions`; ties
/// go to the earlier entry.
pub fn apportion(total: usize, fractions: [f64; 3]) -> [usize; 3] {
    let quotas = fractions.map(|f| f * total as f64);
    let mut counts = quotas.map(|q| q.floor() as usize);
    let assigned: usize = counts.iter().sum();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Group-level train/validation/test split.
///
/// Items sharing a group key (video for CS1, patient for CS2) always land in
/// the same split. Groups are stratified by their majority clinical setting
/// (missing settings form one stratum), shuffled with `seed`, and each
/// stratum's groups are apportioned to the three splits by largest
/// remainder.
pub fn split<T: Grouped + Clone>(
    items: &[T],
    mode: SplitMode,
    fractions: [f64; 3],
    seed: u64,
) -> Result<Splits<T>> {
    if fractions.iter().any(|&f| f < 0.0) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions {fractions:?} must be non-negative and sum to 1"
        )));
    }
    let mut settings: BTreeMap<&str, BTreeMap<&str, usize>> = BTreeMap::new();
    for it in items {
        *settings
            .entry(mode.key(it))
            .or_default()
            .entry(it.setting().unwrap_or(""))
            .or_default() += 1;
    }
    let mut strata: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (group, counts) in &settings {
        // highest count, ties to the lexicographically first setting
        let (majority, _) =
            counts.iter().fold(
                ("", 0usize),
                |best, (&s, &c)| if c > best.1 { (s, c) } else { best },
            );
        strata.entry(majority).or_default().push(group);
    }
    let mut rng = seed::rng(seed, "split", 0);
    let mut assignment: BTreeMap<&str, usize> = BTreeMap::new();
    let mut warnings = Vec::new();
    for (stratum, groups) in &mut strata {
        if groups.len() < 3 {
            let msg = format!(
                "stratum {:?} has only {} group(s); split is best-effort",
                stratum,
                groups.len()
            );
            log::warn!("{msg}");
            warnings.push(msg);
        }
        groups.shuffle(&mut rng);
        let [n_train, n_val, _] = apportion(groups.len(), fractions);
        for (i, g) in groups.iter().enumerate() {
            let part = if i < n_train {
                0
            } else if i < n_train + n_val {
                1
            } else {
                2
            };
            assignment.insert(g, part);
        }
    }
    let mut out = Splits {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
        warnings,
    };
    for it in items {
        match assignment[mode.key(it)] {
            0 => out.train.push(it.clone()),
            1 => out.validation.push(it.clone()),
            _ => out.test.push(it.clone()),
        }
    }
    Ok(out)
}

/// Group keys present in a slice of items.
pub fn group_keys<T: Grouped>(items: &[T], mode: SplitMode) -> BTreeSet<String> {
    items.iter().map(|i| mode.key(i).to_string()).collect()
}

/// Sources for [`build_target_domain`].
pub struct DomainSources<'a> {
    pub frames: &'a [Frame],
    /// Fibre layout matching the frames, needed for `syn`.
    pub layout: Option<&'a FibreLayout>,
    /// Noise applied when synthesising LR partners for `syn`.
    pub noise: Option<&'a mut NoiseModel>,
}

/// Builds a target-domain patch pool.
///
/// * `nat`: frames normalised then patched.
/// * `orig`: HR estimates patched as they are.
/// * `syn`: HR estimates patched, each with its pixel-aligned synthetic LR.
/// * `res`: LR regions of `4 · patch_size` box-downsampled by 4.
pub fn build_target_domain(
    kind: Domain,
    sources: DomainSources<'_>,
    patch_size: usize,
    coverage: f64,
) -> Result<Dataset> {
    let mut patches = Vec::new();
    match kind {
        Domain::Lr => {
            return Err(Error::Config(
                "lr is an input domain, not a target domain".into(),
            ))
        }
        Domain::Nat => {
            for f in sources.frames {
                let mut norm = f.clone();
                norm.image = normalize_frame(&f.image)?;
                patches.extend(extract_patches(&norm, patch_size, coverage)?);
            }
        }
        Domain::Orig => {
            for f in sources.frames {
                patches.extend(extract_patches(f, patch_size, coverage)?);
            }
        }
        Domain::Syn => {
            let layout = sources
                .layout
                .ok_or_else(|| Error::Config("the syn domain needs a fibre layout".into()))?;
            let mut quiet = NoiseModel::noiseless();
            let noise = match sources.noise {
                Some(n) => n,
                None => &mut quiet,
            };
            for f in sources.frames {
                let lr = synthesize_lr(&f.image, layout, noise)?;
                for mut p in extract_patches(f, patch_size, coverage)? {
                    p.paired = Some(lr.crop(p.x, p.y, patch_size, patch_size)?);
                    patches.push(p);
                }
            }
        }
        Domain::Res => {
            let region = RES_FACTOR * patch_size;
            for f in sources.frames {
                for (x, y) in patch_grid(&f.image, region, coverage) {
                    let small = f.image.crop(x, y, region, region)?.block_mean(RES_FACTOR)?;
                    patches.push(patch_from(f, small, x, y));
                }
            }
            if patches.is_empty() && !sources.frames.is_empty() {
                return Err(Error::Data(format!(
                    "no {region}x{region} region fits inside the LR frames' field of view"
                )));
            }
        }
    }
    Ok(Dataset {
        domain: kind,
        patches,
    })
}

/// One line of the JSON-lines frame manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameRecord {
    pub path: String,
    pub video_id: String,
    pub patient_id: String,
    #[serde(default)]
    pub setting: Option<String>,
    pub role: Role,
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[FrameRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<FrameRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// Loads every manifest record as a frame, resolving paths relative to the
/// manifest's directory.
pub fn load_frames(manifest: impl AsRef<Path>) -> Result<Vec<Frame>> {
    let manifest = manifest.as_ref();
    let base = manifest.parent().unwrap_or(Path::new("."));
    read_manifest(manifest)?
        .into_iter()
        .map(|r| {
            let img = Image::load_png(base.join(&r.path))?;
            let id = Path::new(&r.path)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| r.path.clone());
            Frame::new(id, img, r.video_id, r.patient_id, r.setting, r.role)
        })
        .collect()
}

const PACK_MAGIC: &[u8; 8] = b"FSRPATCH";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PackEntry {
    frame_id: String,
    video_id: String,
    patient_id: String,
    setting: Option<String>,
    x: usize,
    y: usize,
    paired: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PackHeader {
    domain: Domain,
    patch_size: usize,
    patches: Vec<PackEntry>,
}

/// Packed patch file: 8-byte magic, little-endian `u64` header length, a
/// JSON index, then the patch pixels (and paired pixels, if any) as
/// little-endian `f32` in index order. Layouts are not stored.
pub fn write_packed(path: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
    let path = path.as_ref();
    let patch_size = dataset.patches.first().map_or(0, |p| p.image.width());
    let header = PackHeader {
        domain: dataset.domain,
        patch_size,
        patches: dataset
            .patches
            .iter()
            .map(|p| PackEntry {
                frame_id: p.frame_id.clone(),
                video_id: p.video_id.clone(),
                patient_id: p.patient_id.clone(),
                setting: p.setting.clone(),
                x: p.x,
                y: p.y,
                paired: p.paired.is_some(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(16 + json.len());
    buf.extend_from_slice(PACK_MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for p in &dataset.patches {
        if p.image.dims() != (patch_size, patch_size) {
            return Err(Error::Data(
                "packed datasets need equal square patches".into(),
            ));
        }
        for img in std::iter::once(&p.image).chain(p.paired.as_ref()) {
            for v in img.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_packed(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Data(format!("{}: {m}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != PACK_MAGIC {
        return Err(bad("not a packed patch file"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header: PackHeader = serde_json::from_slice(
        bytes
            .get(16..16 + hlen)
            .ok_or_else(|| bad("truncated header"))?,
    )?;
    let mut floats = bytes[16 + hlen..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    let s = header.patch_size;
    let mut take = || -> Result<Image> {
        let data: Vec<f32> = floats.by_ref().take(s * s).collect();
        if data.len() != s * s {
            return Err(bad("truncated pixel data"));
        }
        Image::new(s, s, data)
    };
    let mut patches = Vec::with_capacity(header.patches.len());
    for e in header.patches {
        let image = take()?;
        let paired = if e.paired { Some(take()?) } else { None };
        patches.push(Patch {
            frame_id: e.frame_id,
            video_id: e.video_id,
            patient_id: e.patient_id,
            setting: e.setting,
            x: e.x,
            y: e.y,
            image,
            layout: None,
            paired,
        });
    }
    Ok(Dataset {
        domain: header.domain,
        patches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::FieldOfView;

    fn frame(id: &str, video: &str, patient: &str, setting: Option<&str>) -> Frame {
        Frame::new(
            id,
            Image::filled(8, 8, 0.0),
            video,
            patient,
            setting.map(String::from),
            Role::InputLr,
        )
        .unwrap()
    }

    #[test]
    fn normalize_hand_case() {
        let img = Image::new(3, 1, vec![0.0, 1.0, 2.0]).unwrap();
        let n = normalize_frame(&img).unwrap();
        assert_eq!(n.data(), &[0.0, 0.5, 1.0]);
        let c = normalize_frame(&Image::filled(4, 4, 3.0)).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn normalize_zeroes_outside_fov() {
        let img = Image::from_fn(16, 16, |x, y| (x + y) as f32)
            .with_fov(Some(FieldOfView::inscribed(16, 16)));
        let n = normalize_frame(&img).unwrap();
        assert_eq!(n.get(0, 0), 0.0);
        let inside: Vec<f32> = (0..16)
            .flat_map(|y| (0..16).map(move |x| (x, y)))
            .filter(|&(x, y)| img.in_fov(x, y))
            .map(|(x, y)| n.get(x, y))
            .collect();
        let lo = inside.iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = inside.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        assert_eq!((lo, hi), (0.0, 1.0));
    }

    #[test]
    fn full_fov_tiling() {
        let f = Frame::new(
            "a",
            Image::filled(512, 512, 0.1),
            "v",
            "p",
            None,
            Role::InputLr,
        )
        .unwrap();
        assert_eq!(extract_patches(&f, 64, 0.99).unwrap().len(), 64);
        assert!(extract_patches(&f, 600, 0.99).unwrap().is_empty());
    }

    #[test]
    fn apportion_largest_remainder() {
        assert_eq!(apportion(10, [0.7, 0.15, 0.15]), [7, 2, 1]);
        assert_eq!(apportion(20, [0.7, 0.15, 0.15]), [14, 3, 3]);
        assert_eq!(apportion(1, [0.7, 0.15, 0.15]), [1, 0, 0]);
        assert_eq!(apportion(0, [0.7, 0.15, 0.15]), [0, 0, 0]);
    }

    #[test]
    fn cs2_keeps_patient_videos_together() {
        let mut frames = Vec::new();
        for p in 0..12 {
            for v in 0..2 {
                frames.push(frame(
                    &format!("f{p}_{v}"),
                    &format!("v{p}_{v}"),
                    &format!("p{p}"),
                    Some("a"),
                ));
            }
        }
        for seed in 0..10 {
            let s = split(&frames, SplitMode::Cs2, [0.7, 0.15, 0.15], seed).unwrap();
            for part in [&s.train, &s.validation, &s.test] {
                let keys = group_keys(part, SplitMode::Cs2);
                for k in keys {
                    let videos = part.iter().filter(|f| f.patient_id == k).count();
                    assert_eq!(videos, 2);
                }
            }
        }
    }

    #[test]
    fn small_stratum_warns() {
        let frames = vec![
            frame("a", "v1", "p1", Some("x")),
            frame("b", "v2", "p2", Some("x")),
        ];
        let s = split(&frames, SplitMode::Cs1, [0.7, 0.15, 0.15], 0).unwrap();
        assert_eq!(s.warnings.len(), 1);
        assert!(split(&frames, SplitMode::Cs1, [0.7, 0.2, 0.2], 0).is_err());
    }

    #[test]
    fn res_domain_is_block_mean() {
        let img = Image::from_fn(256, 256, |x, y| ((x * 7 + y * 3) % 11) as f32 / 10.0);
        let f = Frame::new("lr", img.clone(), "v", "p", None, Role::InputLr).unwrap();
        let d = build_target_domain(
            Domain::Res,
            DomainSources {
                frames: std::slice::from_ref(&f),
                layout: None,
                noise: None,
            },
            64,
            0.99,
        )
        .unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d.patches[0].image, img.block_mean(4).unwrap());
    }

    #[test]
    fn packed_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(16, 16, |x, y| (x * y) as f32 / 225.0);
        let f = Frame::new("hr", img, "v", "p", Some("s".into()), Role::EstimatedHr).unwrap();
        let mut ds = Dataset {
            domain: Domain::Orig,
            patches: extract_patches(&f, 8, 0.99).unwrap(),
        };
        ds.patches[1].paired = Some(Image::filled(8, 8, 0.25));
        let p = dir.path().join("x.pack");
        write_packed(&p, &ds).unwrap();
        let back = read_packed(&p).unwrap();
        assert_eq!(back.domain, Domain::Orig);
        assert_eq!(back.len(), 4);
        for (a, b) in ds.patches.iter().zip(&back.patches) {
            assert_eq!(a.image, b.image);
            assert_eq!(a.paired, b.paired);
            assert_eq!(a.provenance(), b.provenance());
        }
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let recs = vec![FrameRecord {
            path: "hr/a.png".into(),
            video_id: "v".into(),
            patient_id: "p".into(),
            setting: None,
            role: Role::EstimatedHr,
        }];
        let p = dir.path().join("m.jsonl");
        write_manifest(&p, &recs).unwrap();
        assert_eq!(read_manifest(&p).unwrap(), recs);
        assert!(std::fs::read_to_string(&p)
            .unwrap()
            .contains("\"estimated-hr\""));
    }
}
