//! Layer-level operations with fused backward passes.

use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Result of [`Tensor::batch_norm2d`]: the normalised output plus the
/// per-channel statistics that were used (batch statistics in training
/// mode), so callers can maintain running averages.
pub struct BatchNormOutput<T: Scalar> {
    pub output: Tensor<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

fn channel_dims(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match shape {
        [n, c, rest @ ..] if !rest.is_empty() => Some((*n, *c, rest.iter().product())),
        [n, c] => Some((*n, *c, 1)),
        _ => None,
    }
}

impl<T: Scalar> Tensor<T> {
    /// Parametric ReLU. `alpha` is `[1]` (shared) or `[C]` (per channel,
    /// channel axis 1).
    pub fn prelu(&self, alpha: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c, inner) =
            channel_dims(self.shape()).ok_or_else(|| TensorError::invalid("prelu", "rank < 2"))?;
        let per_channel = match alpha.shape() {
            [1] => false,
            [k] if *k == c => true,
            s => return Err(TensorError::mismatch("prelu", self.shape(), s)),
        };
        let ad = alpha.to_vec();
        let slope = move |ch: usize| if per_channel { ad[ch] } else { ad[0] };
        let xd = self.data();
        let mut out = xd.clone();
        for s in 0..n {
            for ch in 0..c {
                let a = slope(ch);
                let base = (s * c + ch) * inner;
                for v in &mut out[base..base + inner] {
                    if *v < T::zero() {
                        *v = *v * a;
                    }
                }
            }
        }
        drop(xd);
        let (x, al) = (self.clone(), alpha.clone());
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone(), alpha.clone()],
            Box::new(move |g, _| {
                let xd = x.data();
                let ad = al.data();
                let mut gx = x.requires_grad().then(|| vec![T::zero(); xd.len()]);
                let mut ga = vec![T::zero(); ad.len()];
                for s in 0..n {
                    for ch in 0..c {
                        let ai = if per_channel { ch } else { 0 };
                        let a = ad[ai];
                        let base = (s * c + ch) * inner;
                        for i in base..base + inner {
                            let neg = xd[i] < T::zero();
                            if let Some(gx) = gx.as_mut() {
                                gx[i] = if neg { g[i] * a } else { g[i] };
                            }
                            if neg {
                                ga[ai] = ga[ai] + g[i] * xd[i];
                            }
                        }
                    }
                }
                vec![gx, al.requires_grad().then_some(ga)]
            }),
        ))
    }

    /// Batch normalisation over axes (N, H, W) of a `[N, C, H, W]` tensor.
    ///
    /// With `stats = None` the batch statistics are used and differentiated
    /// through; with `Some((mean, var))` the given statistics are treated as
    /// constants (inference mode).
    pub fn batch_norm2d(
        &self,
        gamma: &Tensor<T>,
        beta: &Tensor<T>,
        eps: T,
        stats: Option<(&[T], &[T])>,
    ) -> Result<BatchNormOutput<T>> {
        let (n, c, inner) = channel_dims(self.shape())
            .ok_or_else(|| TensorError::invalid("batch_norm2d", "rank < 2"))?;
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(TensorError::mismatch(
                "batch_norm2d",
                self.shape(),
                gamma.shape(),
            ));
        }
        let m = n * inner;
        if stats.is_none() && m < 2 {
            return Err(TensorError::invalid(
                "batch_norm2d",
                "batch statistics need at least two values per channel",
            ));
        }
        let (mean, var) = match stats {
            Some((mu, var)) => {
                if mu.len() != c || var.len() != c {
                    return Err(TensorError::invalid(
                        "batch_norm2d",
                        "stats length != channels",
                    ));
                }
                (mu.to_vec(), var.to_vec())
            }
            None => {
                let xd = self.data();
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = 0.0f64;
                    for smp in 0..n {
                        let base = (smp * c + ch) * inner;
                        s += xd[base..base + inner]
                            .iter()
                            .map(|v| v.as_f64())
                            .sum::<f64>();
                    }
                    let mu = s / m as f64;
                    let mut q = 0.0f64;
                    for smp in 0..n {
                        let base = (smp * c + ch) * inner;
                        q += xd[base..base + inner]
                            .iter()
                            .map(|v| (v.as_f64() - mu).powi(2))
                            .sum::<f64>();
                    }
                    mean[ch] = T::of(mu);
                    var[ch] = T::of(q / m as f64);
                }
                (mean, var)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gd = gamma.to_vec();
        let bd = beta.to_vec();
        let xd = self.data();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for smp in 0..n {
            for ch in 0..c {
                let base = (smp * c + ch) * inner;
                for i in base..base + inner {
                    let h = (xd[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = gd[ch] * h + bd[ch];
                }
            }
        }
        drop(xd);
        let batch_stats = stats.is_none();
        let (x, ga_t, be_t) = (self.clone(), gamma.clone(), beta.clone());
        let output = Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g, _| {
                let gd = ga_t.data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut sum_dxhat = vec![0.0f64; c];
                let mut sum_dxhat_xhat = vec![0.0f64; c];
                for smp in 0..n {
                    for ch in 0..c {
                        let base = (smp * c + ch) * inner;
                        for i in base..base + inner {
                            dgamma[ch] = dgamma[ch] + g[i] * xhat[i];
                            dbeta[ch] = dbeta[ch] + g[i];
                            let dxh = (g[i] * gd[ch]).as_f64();
                            sum_dxhat[ch] += dxh;
                            sum_dxhat_xhat[ch] += dxh * xhat[i].as_f64();
                        }
                    }
                }
                let gx = x.requires_grad().then(|| {
                    let mut gx = vec![T::zero(); g.len()];
                    for smp in 0..n {
                        for ch in 0..c {
                            let base = (smp * c + ch) * inner;
                            for i in base..base + inner {
                                let dxh = g[i] * gd[ch];
                                gx[i] = if batch_stats {
                                    let mf = m as f64;
                                    let v = mf * dxh.as_f64()
                                        - sum_dxhat[ch]
                                        - xhat[i].as_f64() * sum_dxhat_xhat[ch];
                                    T::of(v / mf) * inv_std[ch]
                                } else {
                                    dxh * inv_std[ch]
                                };
                            }
                        }
                    }
                    gx
                });
                vec![
                    gx,
                    ga_t.requires_grad().then_some(dgamma),
                    be_t.requires_grad().then_some(dbeta),
                ]
            }),
        );
        Ok(BatchNormOutput { output, mean, var })
    }

    /// Per-row segment means of a `[N, P]` tensor.
    ///
    /// `labels[r][p]` is the segment of element `p` in row `r`. The output is
    /// `[N, width]`: entry `(r, k)` is the mean of row `r` over segment `k`,
    /// and zero for segments with no members (including padding beyond the
    /// row's highest label).
    pub fn segment_mean(&self, labels: &[Arc<[u32]>], width: usize) -> Result<Tensor<T>> {
        let [n, p] = *self.shape() else {
            return Err(TensorError::invalid("segment_mean", "expects rank 2 input"));
        };
        if labels.len() != n || labels.iter().any(|l| l.len() != p) {
            return Err(TensorError::invalid(
                "segment_mean",
                "labels do not match input shape",
            ));
        }
        let mut counts = vec![0usize; n * width];
        for (r, row) in labels.iter().enumerate() {
            for &l in row.iter() {
                let l = l as usize;
                if l >= width {
                    return Err(TensorError::invalid(
                        "segment_mean",
                        format!("label {l} >= width {width}"),
                    ));
                }
                counts[r * width + l] += 1;
            }
        }
        let xd = self.data();
        let mut acc = vec![0.0f64; n * width];
        for (r, row) in labels.iter().enumerate() {
            for (i, &l) in row.iter().enumerate() {
                acc[r * width + l as usize] += xd[r * p + i].as_f64();
            }
        }
        drop(xd);
        let out = acc
            .iter()
            .zip(&counts)
            .map(|(&s, &k)| {
                if k == 0 {
                    T::zero()
                } else {
                    T::of(s / k as f64)
                }
            })
            .collect();
        let labels = labels.to_vec();
        Ok(Tensor::from_op(
            out,
            vec![n, width],
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![T::zero(); n * p];
                for (r, row) in labels.iter().enumerate() {
                    for (i, &l) in row.iter().enumerate() {
                        let k = r * width + l as usize;
                        gx[r * p + i] = g[k] / T::of(counts[k] as f64);
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prelu_forward() {
        let x = Tensor::<f64>::new(vec![-2.0, 1.0, -1.0, 3.0], &[1, 2, 2]).unwrap();
        let a = Tensor::new(vec![0.25], &[1]).unwrap();
        assert_eq!(x.prelu(&a).unwrap().to_vec(), vec![-0.5, 1.0, -0.25, 3.0]);
        let a = Tensor::new(vec![0.5, 0.1], &[2]).unwrap();
        let y = x.prelu(&a).unwrap().to_vec();
        assert!((y[2] + 0.1).abs() < 1e-12);
        assert_eq!(y[0], -1.0);
    }

    #[test]
    fn batch_norm_normalises_channels() {
        let x = Tensor::<f64>::new(vec![1.0, 3.0, 10.0, 10.0, 5.0, 7.0, 20.0, 40.0], &[2, 2, 2])
            .unwrap();
        let g = Tensor::new(vec![1.0, 1.0], &[2]).unwrap();
        let b = Tensor::new(vec![0.0, 0.0], &[2]).unwrap();
        let out = x.batch_norm2d(&g, &b, 0.0, None).unwrap();
        assert_eq!(out.mean, vec![4.0, 20.0]);
        let y = out.output.to_vec();
        let ch0: f64 = [y[0], y[1], y[4], y[5]].iter().sum();
        assert!(ch0.abs() < 1e-12);
    }

    #[test]
    fn segment_mean_pads_with_zero() {
        let x = Tensor::<f64>::new(vec![1.0, 3.0, 5.0, 7.0], &[1, 4]).unwrap();
        let labels: Vec<Arc<[u32]>> = vec![Arc::from(vec![0u32, 0, 0, 1])];
        let y = x.segment_mean(&labels, 4).unwrap();
        assert_eq!(y.to_vec(), vec![3.0, 7.0, 0.0, 0.0]);
        assert!(x.segment_mean(&labels, 1).is_err());
    }

    #[test]
    fn segment_mean_gradient_is_uniform_within_segment() {
        let x = Tensor::<f64>::parameter(vec![1.0, 3.0, 5.0, 7.0], &[1, 4]).unwrap();
        let labels: Vec<Arc<[u32]>> = vec![Arc::from(vec![0u32, 0, 0, 1])];
        x.segment_mean(&labels, 2)
            .unwrap()
            .sum()
            .backward()
            .unwrap();
        let g = x.grad().unwrap();
        assert!((g[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((g[2] - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(g[3], 1.0);
    }
}
