//! The super-resolution generator, the patch discriminator and the
//! checkpoint format shared by both.
//!
//! The generator is a fully convolutional residual network without the
//! upsampling stage, so output and input have the same size. The
//! discriminator is a strided convolution ladder followed by a dense head
//! and therefore expects a fixed patch size.

use std::path::{Path, PathBuf};

use fibresr_tensor::{Conv2dSpec, Tensor};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

const BN_EPS: f32 = 1e-5;
const BN_MOMENTUM: f32 = 0.1;
const OUTER_KERNEL: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running averages updated, discriminator noise on.
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_residual_blocks: usize,
    pub base_channels: usize,
    pub kernel_size: usize,
    pub use_batchnorm: bool,
    pub prelu_init: f32,
    /// Zero the last convolution so an untrained network outputs 0.5.
    pub zero_init_output: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_residual_blocks: 5,
            base_channels: 64,
            kernel_size: 3,
            use_batchnorm: true,
            prelu_init: 0.25,
            zero_init_output: true,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=16).contains(&self.n_residual_blocks) {
            return Err(Error::Config(format!(
                "n_residual_blocks must be in 1..=16, got {}",
                self.n_residual_blocks
            )));
        }
        if self.base_channels < 8 {
            return Err(Error::Config(format!(
                "base_channels must be at least 8, got {}",
                self.base_channels
            )));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "kernel_size must be odd, got {}",
                self.kernel_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub conv_channels: Vec<usize>,
    pub leaky_slope: f32,
    pub dense_units: usize,
    pub input_noise_sigma: f32,
    /// Side of the square input patches.
    pub patch_size: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            conv_channels: vec![64, 64, 128, 128, 256],
            leaky_slope: 0.2,
            dense_units: 512,
            input_noise_sigma: 0.1,
            patch_size: 64,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return Err(Error::Config(
                "conv_channels must be non-empty and positive".into(),
            ));
        }
        if self.dense_units == 0 {
            return Err(Error::Config("dense_units must be positive".into()));
        }
        if self.input_noise_sigma < 0.0 {
            return Err(Error::Config(
                "input_noise_sigma must be non-negative".into(),
            ));
        }
        if self.feature_side() == 0 {
            return Err(Error::Config(format!(
                "patch_size {} is too small for {} strided layers",
                self.patch_size,
                self.conv_channels.len() / 2
            )));
        }
        Ok(())
    }

    /// Stride of ladder layer `i`: 1, 2, 1, 2, ...
    pub fn stride(i: usize) -> usize {
        if i.is_multiple_of(2) {
            1
        } else {
            2
        }
    }

    /// Spatial side of the last feature map.
    pub fn feature_side(&self) -> usize {
        let mut s = self.patch_size;
        for i in 0..self.conv_channels.len() {
            if Self::stride(i) == 2 {
                // 3x3 kernel, padding 1
                s = if s == 0 { 0 } else { (s - 1) / 2 + 1 };
            }
        }
        s
    }
}

/// A named flat array, the unit of checkpoint storage.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

fn he_normal(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).expect("positive std");
    Ok(Tensor::parameter(
        (0..n).map(|_| dist.sample(rng)).collect(),
        shape,
    )?)
}

#[derive(Debug, Clone)]
struct Conv {
    weight: Tensor,
    bias: Option<Tensor>,
    spec: Conv2dSpec,
}

impl Conv {
    fn new(
        rng: &mut ChaCha8Rng,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        bias: bool,
        zero: bool,
    ) -> Result<Conv> {
        let shape = [c_out, c_in, k, k];
        let weight = if zero {
            Tensor::parameter(vec![0.0; c_out * c_in * k * k], &shape)?
        } else {
            he_normal(rng, &shape, c_in * k * k)?
        };
        let bias = if bias {
            Some(Tensor::parameter(vec![0.0; c_out], &[c_out])?)
        } else {
            None
        };
        Ok(Conv {
            weight,
            bias,
            spec: Conv2dSpec::new(stride, k / 2),
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.conv2d(&self.weight, self.bias.as_ref(), self.spec)?)
    }

    fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        if let Some(b) = &self.bias {
            out.push((format!("{prefix}.bias"), b.clone()));
        }
    }
}

#[derive(Debug, Clone)]
struct BatchNorm {
    gamma: Tensor,
    beta: Tensor,
    running_mean: Vec<f32>,
    running_var: Vec<f32>,
}

impl BatchNorm {
    fn new(c: usize) -> Result<BatchNorm> {
        Ok(BatchNorm {
            gamma: Tensor::parameter(vec![1.0; c], &[c])?,
            beta: Tensor::parameter(vec![0.0; c], &[c])?,
            running_mean: vec![0.0; c],
            running_var: vec![1.0; c],
        })
    }

    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        match mode {
            Mode::Eval => Ok(x
                .batch_norm2d(
                    &self.gamma,
                    &self.beta,
                    BN_EPS,
                    Some((&self.running_mean, &self.running_var)),
                )?
                .output),
            Mode::Train => {
                let out = x.batch_norm2d(&self.gamma, &self.beta, BN_EPS, None)?;
                let s = x.shape();
                let m = (x.numel() / s[1]) as f32;
                let unbias = m / (m - 1.0);
                for (r, &b) in self.running_mean.iter_mut().zip(&out.mean) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
                }
                for (r, &b) in self.running_var.iter_mut().zip(&out.var) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b * unbias;
                }
                Ok(out.output)
            }
        }
    }

    fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.gamma"), self.gamma.clone()));
        out.push((format!("{prefix}.beta"), self.beta.clone()));
    }

    fn buffers(&mut self, prefix: &str) -> [(String, &mut Vec<f32>); 2] {
        [
            (format!("{prefix}.running_mean"), &mut self.running_mean),
            (format!("{prefix}.running_var"), &mut self.running_var),
        ]
    }
}

#[derive(Debug, Clone)]
struct ResidualBlock {
    conv1: Conv,
    bn1: Option<BatchNorm>,
    alpha: Tensor,
    conv2: Conv,
    bn2: Option<BatchNorm>,
}

fn maybe_bn(bn: &mut Option<BatchNorm>, x: Tensor, mode: Mode) -> Result<Tensor> {
    match bn {
        Some(b) => b.forward(&x, mode),
        None => Ok(x),
    }
}

/// Residual super-resolution network with equal input and output size.
#[derive(Debug, Clone)]
pub struct Generator {
    config: GeneratorConfig,
    conv_in: Conv,
    alpha_in: Tensor,
    blocks: Vec<ResidualBlock>,
    conv_mid: Conv,
    bn_mid: Option<BatchNorm>,
    conv_out: Conv,
}

impl Generator {
    pub fn new(config: GeneratorConfig, rng: &mut ChaCha8Rng) -> Result<Generator> {
        config.validate()?;
        let c = config.base_channels;
        let k = config.kernel_size;
        let bn = config.use_batchnorm;
        let prelu = |c: usize| Tensor::parameter(vec![config.prelu_init; c], &[c]);
        let conv_in = Conv::new(rng, 1, c, OUTER_KERNEL, 1, true, false)?;
        let alpha_in = prelu(c)?;
        let mut blocks = Vec::with_capacity(config.n_residual_blocks);
        for _ in 0..config.n_residual_blocks {
            blocks.push(ResidualBlock {
                conv1: Conv::new(rng, c, c, k, 1, !bn, false)?,
                bn1: bn.then(|| BatchNorm::new(c)).transpose()?,
                alpha: prelu(c)?,
                conv2: Conv::new(rng, c, c, k, 1, !bn, false)?,
                bn2: bn.then(|| BatchNorm::new(c)).transpose()?,
            });
        }
        let conv_mid = Conv::new(rng, c, c, k, 1, !bn, false)?;
        let bn_mid = bn.then(|| BatchNorm::new(c)).transpose()?;
        let conv_out = Conv::new(rng, c, 1, OUTER_KERNEL, 1, true, config.zero_init_output)?;
        Ok(Generator {
            config,
            conv_in,
            alpha_in,
            blocks,
            conv_mid,
            bn_mid,
            conv_out,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    /// `[N, 1, H, W]` in, `[N, 1, H, W]` in (0, 1) out.
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        self.run(x, mode, false)
    }

    /// Evaluation-mode forward pass that keeps no graph, so memory stays
    /// bounded by a few activations on full-size frames.
    pub fn infer(&mut self, x: &Tensor) -> Result<Tensor> {
        self.run(x, Mode::Eval, true)
    }

    /// [`Generator::infer`] on a single frame of any size.
    pub fn infer_image(&mut self, image: &Image) -> Result<Image> {
        let (w, h) = image.dims();
        let x = Tensor::new(image.data().to_vec(), &[1, 1, h, w])?;
        let y = self.infer(&x)?;
        Ok(Image::new(w, h, y.to_vec())?.with_fov(image.fov()))
    }

    fn run(&mut self, x: &Tensor, mode: Mode, detach: bool) -> Result<Tensor> {
        let cut = |t: Tensor| if detach { t.stop_gradient() } else { t };
        if x.shape().len() != 4 || x.shape()[1] != 1 {
            return Err(Error::InvalidArgument(format!(
                "generator expects [N, 1, H, W], got {:?}",
                x.shape()
            )));
        }
        let head = cut(self.conv_in.forward(x)?.prelu(&self.alpha_in)?);
        let mut h = head.clone();
        for b in &mut self.blocks {
            let y = b.conv1.forward(&h)?;
            let y = cut(maybe_bn(&mut b.bn1, y, mode)?.prelu(&b.alpha)?);
            let y = b.conv2.forward(&y)?;
            let y = maybe_bn(&mut b.bn2, y, mode)?;
            h = cut(h.add(&y)?);
        }
        let y = self.conv_mid.forward(&h)?;
        let y = cut(maybe_bn(&mut self.bn_mid, y, mode)?.add(&head)?);
        Ok(cut(self.conv_out.forward(&y)?.sigmoid()))
    }

    pub fn parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.conv_in.params("conv_in", &mut out);
        out.push(("prelu_in.alpha".into(), self.alpha_in.clone()));
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("block{i}");
            b.conv1.params(&format!("{p}.conv1"), &mut out);
            if let Some(bn) = &b.bn1 {
                bn.params(&format!("{p}.bn1"), &mut out);
            }
            out.push((format!("{p}.prelu.alpha"), b.alpha.clone()));
            b.conv2.params(&format!("{p}.conv2"), &mut out);
            if let Some(bn) = &b.bn2 {
                bn.params(&format!("{p}.bn2"), &mut out);
            }
        }
        self.conv_mid.params("conv_mid", &mut out);
        if let Some(bn) = &self.bn_mid {
            bn.params("bn_mid", &mut out);
        }
        self.conv_out.params("conv_out", &mut out);
        out
    }

    fn buffers(&mut self) -> Vec<(String, &mut Vec<f32>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            if let Some(bn) = &mut b.bn1 {
                out.extend(bn.buffers(&format!("block{i}.bn1")));
            }
            if let Some(bn) = &mut b.bn2 {
                out.extend(bn.buffers(&format!("block{i}.bn2")));
            }
        }
        if let Some(bn) = &mut self.bn_mid {
            out.extend(bn.buffers("bn_mid"));
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Parameters followed by batch-norm running statistics.
    pub fn state(&mut self) -> Vec<NamedArray> {
        let mut out = state_of(&self.parameters());
        for (name, buf) in self.buffers() {
            out.push(NamedArray {
                shape: vec![buf.len()],
                name,
                data: buf.clone(),
            });
        }
        out
    }

    pub fn load_state(&mut self, arrays: &[NamedArray]) -> Result<()> {
        let params = self.parameters();
        let mut targets: Vec<Target<'_>> = Vec::new();
        for (name, t) in params {
            let shape = t.shape().to_vec();
            targets.push((
                name,
                shape,
                Box::new(move |d| t.data_mut().copy_from_slice(d)),
            ));
        }
        for (name, buf) in self.buffers() {
            let shape = vec![buf.len()];
            targets.push((name, shape, Box::new(move |d| buf.copy_from_slice(d))));
        }
        load_into(targets, arrays)
    }
}

/// Convolutional patch discriminator ending in a sigmoid probability.
#[derive(Debug, Clone)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    convs: Vec<Conv>,
    dense1_w: Tensor,
    dense1_b: Tensor,
    dense2_w: Tensor,
    dense2_b: Tensor,
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig, rng: &mut ChaCha8Rng) -> Result<Discriminator> {
        config.validate()?;
        let mut convs = Vec::with_capacity(config.conv_channels.len());
        let mut c_in = 1;
        for (i, &c) in config.conv_channels.iter().enumerate() {
            convs.push(Conv::new(
                rng,
                c_in,
                c,
                3,
                DiscriminatorConfig::stride(i),
                true,
                false,
            )?);
            c_in = c;
        }
        let s = config.feature_side();
        let features = c_in * s * s;
        let u = config.dense_units;
        Ok(Discriminator {
            dense1_w: he_normal(rng, &[features, u], features)?,
            dense1_b: Tensor::parameter(vec![0.0; u], &[u])?,
            dense2_w: he_normal(rng, &[u, 1], u)?,
            dense2_b: Tensor::parameter(vec![0.0], &[1])?,
            config,
            convs,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    /// `[N, 1, P, P]` in, `[N]` probabilities out. In training mode with a
    /// generator supplied, white Gaussian noise is added to the input first.
    pub fn forward(&self, x: &Tensor, noise: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        let p = self.config.patch_size;
        let n = match *x.shape() {
            [n, 1, h, w] if h == p && w == p => n,
            ref s => {
                return Err(Error::InvalidArgument(format!(
                    "discriminator expects [N, 1, {p}, {p}], got {s:?}"
                )))
            }
        };
        let sigma = self.config.input_noise_sigma;
        let mut h = match noise {
            Some(rng) if sigma > 0.0 => {
                let dist = Normal::new(0.0f32, sigma).expect("positive std");
                let eps: Vec<f32> = (0..x.numel()).map(|_| dist.sample(rng)).collect();
                x.add(&Tensor::new(eps, x.shape())?)?
            }
            _ => x.clone(),
        };
        let slope = self.config.leaky_slope;
        for c in &self.convs {
            h = c.forward(&h)?.leaky_relu(slope);
        }
        let features = h.numel() / n;
        let h = h.reshape(&[n, features])?;
        let h = h
            .matmul(&self.dense1_w)?
            .add(&self.dense1_b)?
            .leaky_relu(slope);
        let logits = h.matmul(&self.dense2_w)?.add(&self.dense2_b)?;
        Ok(logits.reshape(&[n])?.sigmoid())
    }

    pub fn parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            c.params(&format!("conv{i}"), &mut out);
        }
        out.push(("dense1.weight".into(), self.dense1_w.clone()));
        out.push(("dense1.bias".into(), self.dense1_b.clone()));
        out.push(("dense2.weight".into(), self.dense2_w.clone()));
        out.push(("dense2.bias".into(), self.dense2_b.clone()));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn state(&self) -> Vec<NamedArray> {
        state_of(&self.parameters())
    }

    pub fn load_state(&mut self, arrays: &[NamedArray]) -> Result<()> {
        let targets = self
            .parameters()
            .into_iter()
            .map(|(name, t)| -> Target<'_> {
                let shape = t.shape().to_vec();
                (
                    name,
                    shape,
                    Box::new(move |d| t.data_mut().copy_from_slice(d)),
                )
            })
            .collect();
        load_into(targets, arrays)
    }
}

fn state_of(params: &[(String, Tensor)]) -> Vec<NamedArray> {
    params
        .iter()
        .map(|(name, t)| NamedArray {
            name: name.clone(),
            shape: t.shape().to_vec(),
            data: t.to_vec(),
        })
        .collect()
}

type Target<'a> = (String, Vec<usize>, Box<dyn FnMut(&[f32]) + 'a>);

fn load_into(targets: Vec<Target<'_>>, arrays: &[NamedArray]) -> Result<()> {
    if targets.len() != arrays.len() {
        return Err(Error::Data(format!(
            "checkpoint has {} arrays, model expects {}",
            arrays.len(),
            targets.len()
        )));
    }
    for ((name, shape, _), a) in targets.iter().zip(arrays) {
        if *name != a.name || *shape != a.shape {
            return Err(Error::Data(format!(
                "checkpoint array {} {:?} does not match model array {name} {shape:?}",
                a.name, a.shape
            )));
        }
    }
    for ((_, _, mut set), a) in targets.into_iter().zip(arrays) {
        set(&a.data);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    tensors: Vec<ManifestEntry>,
    meta: serde_json::Value,
}

/// Checkpoint on disk: `<stem>.json` lists `{name, shape, dtype, offset}`
/// per array and `<stem>.bin` holds the little-endian `f32` data in the
/// same order. `meta` is free-form JSON stored alongside.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arrays: Vec<NamedArray>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn paths(stem: &Path) -> (PathBuf, PathBuf) {
        (stem.with_extension("json"), stem.with_extension("bin"))
    }

    pub fn save(&self, stem: impl AsRef<Path>) -> Result<()> {
        let (json, bin) = Self::paths(stem.as_ref());
        let mut blob = Vec::new();
        let mut tensors = Vec::with_capacity(self.arrays.len());
        for a in &self.arrays {
            tensors.push(ManifestEntry {
                name: a.name.clone(),
                shape: a.shape.clone(),
                dtype: "f32".into(),
                offset: blob.len(),
            });
            for v in &a.data {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest {
            tensors,
            meta: self.meta.clone(),
        };
        std::fs::write(&bin, blob).map_err(|e| Error::io(&bin, e))?;
        std::fs::write(&json, serde_json::to_string_pretty(&manifest)?)
            .map_err(|e| Error::io(&json, e))
    }

    pub fn load(stem: impl AsRef<Path>) -> Result<Checkpoint> {
        let (json, bin) = Self::paths(stem.as_ref());
        let text = std::fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        let blob = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        let mut arrays = Vec::with_capacity(manifest.tensors.len());
        for t in manifest.tensors {
            if t.dtype != "f32" {
                return Err(Error::Data(format!(
                    "{}: unsupported dtype {}",
                    t.name, t.dtype
                )));
            }
            let n: usize = t.shape.iter().product();
            let end = t.offset + 4 * n;
            let bytes = blob.get(t.offset..end).ok_or_else(|| {
                Error::Data(format!("{}: blob {} is truncated", t.name, bin.display()))
            })?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            arrays.push(NamedArray {
                name: t.name,
                shape: t.shape,
                data,
            });
        }
        Ok(Checkpoint {
            arrays,
            meta: manifest.meta,
        })
    }

    /// Arrays whose names start with `prefix.`, with the prefix removed.
    pub fn section(&self, prefix: &str) -> Vec<NamedArray> {
        let p = format!("{prefix}.");
        self.arrays
            .iter()
            .filter_map(|a| {
                a.name.strip_prefix(&p).map(|rest| NamedArray {
                    name: rest.to_string(),
                    shape: a.shape.clone(),
                    data: a.data.clone(),
                })
            })
            .collect()
    }

    pub fn push_section(&mut self, prefix: &str, arrays: Vec<NamedArray>) {
        self.arrays.extend(arrays.into_iter().map(|mut a| {
            a.name = format!("{prefix}.{}", a.name);
            a
        }));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small_gen(zero: bool) -> Generator {
        let cfg = GeneratorConfig {
            n_residual_blocks: 1,
            base_channels: 8,
            zero_init_output: zero,
            ..Default::default()
        };
        Generator::new(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    fn ramp(n: usize, s: usize) -> Tensor {
        Tensor::new(
            (0..n * s * s).map(|i| (i % 17) as f32 / 17.0).collect(),
            &[n, 1, s, s],
        )
        .unwrap()
    }

    #[test]
    fn zero_init_generator_outputs_half() {
        let mut g = small_gen(true);
        let y = g.forward(&ramp(2, 16), Mode::Train).unwrap();
        assert_eq!(y.shape(), &[2, 1, 16, 16]);
        assert!(y.to_vec().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn infer_matches_eval_forward() {
        let mut g = small_gen(false);
        let x = ramp(1, 20);
        let a = g.forward(&x, Mode::Eval).unwrap().to_vec();
        let b = g.infer(&x).unwrap();
        assert!(!b.requires_grad());
        assert_eq!(a, b.to_vec());
    }

    #[test]
    fn generator_is_fully_convolutional() {
        let mut g = small_gen(false);
        for s in [16, 24, 40] {
            let y = g.forward(&ramp(1, s), Mode::Eval).unwrap();
            assert_eq!(y.shape(), &[1, 1, s, s]);
        }
    }

    #[test]
    fn discriminator_shape_and_range() {
        let cfg = DiscriminatorConfig {
            conv_channels: vec![4, 4, 8],
            dense_units: 16,
            patch_size: 16,
            ..Default::default()
        };
        let d = Discriminator::new(cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let x = ramp(3, 16);
        let p = d.forward(&x, None).unwrap().to_vec();
        assert_eq!(p.len(), 3);
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(p, d.forward(&x, None).unwrap().to_vec());
        assert!(d.forward(&ramp(1, 12), None).is_err());
    }

    #[test]
    fn default_feature_side() {
        assert_eq!(DiscriminatorConfig::default().feature_side(), 16);
        let c = DiscriminatorConfig {
            patch_size: 32,
            ..Default::default()
        };
        assert_eq!(c.feature_side(), 8);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ck");
        let mut g = small_gen(false);
        g.forward(&ramp(2, 16), Mode::Train).unwrap();
        let mut ck = Checkpoint {
            arrays: Vec::new(),
            meta: serde_json::json!({"iteration": 3}),
        };
        ck.push_section("generator", g.state());
        ck.save(&stem).unwrap();
        let back = Checkpoint::load(&stem).unwrap();
        assert_eq!(back, ck);
        let mut g2 = small_gen(true);
        g2.load_state(&back.section("generator")).unwrap();
        assert_eq!(g2.state(), g.state());
        let mut wrong = Generator::new(
            GeneratorConfig {
                n_residual_blocks: 2,
                base_channels: 8,
                ..Default::default()
            },
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert!(wrong.load_state(&back.section("generator")).is_err());
    }

    #[test]
    fn config_validation() {
        let bad = GeneratorConfig {
            base_channels: 4,
            ..Default::default()
        };
        assert!(Generator::new(bad, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
