//! Element-wise arithmetic, reductions and shape manipulation.

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::shape::{broadcast_shapes, broadcast_strides, for_each_broadcast, numel};
use crate::tensor::Tensor;

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl Binary {
    fn name(self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        }
    }

    #[inline]
    fn apply<T: Scalar>(self, a: T, b: T) -> T {
        match self {
            Binary::Add => a + b,
            Binary::Sub => a - b,
            Binary::Mul => a * b,
            Binary::Div => a / b,
        }
    }

    /// Partial derivatives (d/da, d/db) at (a, b).
    #[inline]
    fn partials<T: Scalar>(self, a: T, b: T) -> (T, T) {
        match self {
            Binary::Add => (T::one(), T::one()),
            Binary::Sub => (T::one(), -T::one()),
            Binary::Mul => (b, a),
            Binary::Div => (T::one() / b, -a / (b * b)),
        }
    }
}

fn binary<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, op: Binary) -> Result<Tensor<T>> {
    let out_shape = broadcast_shapes(a.shape(), b.shape())
        .map_err(|_| TensorError::mismatch(op.name(), a.shape(), b.shape()))?;
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let same = a.shape() == b.shape();

    let ad = a.data();
    let bd = b.data();
    let mut out = vec![T::zero(); numel(&out_shape)];
    if same {
        for ((o, &x), &y) in out.iter_mut().zip(ad.iter()).zip(bd.iter()) {
            *o = op.apply(x, y);
        }
    } else {
        for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| {
            out[o] = op.apply(ad[ia], bd[ib]);
        });
    }
    drop((ad, bd));

    let (ac, bc) = (a.clone(), b.clone());
    let shape_for_bw = out_shape.clone();
    Ok(Tensor::from_op(
        out,
        out_shape,
        vec![a.clone(), b.clone()],
        Box::new(move |g, _| {
            let ad = ac.data();
            let bd = bc.data();
            let mut ga = ac.requires_grad().then(|| vec![T::zero(); ad.len()]);
            let mut gb = bc.requires_grad().then(|| vec![T::zero(); bd.len()]);
            if same {
                for i in 0..g.len() {
                    let (da, db) = op.partials(ad[i], bd[i]);
                    if let Some(ga) = ga.as_mut() {
                        ga[i] = g[i] * da;
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[i] = g[i] * db;
                    }
                }
            } else {
                for_each_broadcast(&shape_for_bw, &sa, &sb, |o, ia, ib| {
                    let (da, db) = op.partials(ad[ia], bd[ib]);
                    if let Some(ga) = ga.as_mut() {
                        ga[ia] = ga[ia] + g[o] * da;
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[ib] = gb[ib] + g[o] * db;
                    }
                });
            }
            vec![ga, gb]
        }),
    ))
}

/// Unary op with derivative expressed from (input, output).
fn unary<T: Scalar>(
    x: &Tensor<T>,
    f: impl Fn(T) -> T,
    df: impl Fn(T, T) -> T + 'static,
) -> Tensor<T> {
    let out: Vec<T> = x.data().iter().map(|&v| f(v)).collect();
    let xc = x.clone();
    Tensor::from_op(
        out,
        x.shape().to_vec(),
        vec![x.clone()],
        Box::new(move |g, y| {
            let xd = xc.data();
            let gx = g
                .iter()
                .zip(xd.iter().zip(y))
                .map(|(&g, (&x, &y))| g * df(x, y))
                .collect();
            vec![Some(gx)]
        }),
    )
}

impl<T: Scalar> Tensor<T> {
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(self, other, Binary::Add)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(self, other, Binary::Sub)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(self, other, Binary::Mul)
    }

    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(self, other, Binary::Div)
    }

    pub fn neg(&self) -> Tensor<T> {
        unary(self, |x| -x, |_, _| -T::one())
    }

    pub fn add_scalar(&self, c: T) -> Tensor<T> {
        unary(self, move |x| x + c, |_, _| T::one())
    }

    pub fn mul_scalar(&self, c: T) -> Tensor<T> {
        unary(self, move |x| x * c, move |_, _| c)
    }

    pub fn exp(&self) -> Tensor<T> {
        unary(self, |x| x.exp(), |_, y| y)
    }

    pub fn log(&self) -> Tensor<T> {
        unary(self, |x| x.ln(), |x, _| T::one() / x)
    }

    pub fn sqrt(&self) -> Tensor<T> {
        unary(self, |x| x.sqrt(), |_, y| T::of(0.5) / y)
    }

    pub fn square(&self) -> Tensor<T> {
        unary(self, |x| x * x, |x, _| x + x)
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        unary(
            self,
            |x| {
                if x >= T::zero() {
                    T::one() / (T::one() + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (T::one() + e)
                }
            },
            |_, y| y * (T::one() - y),
        )
    }

    pub fn tanh(&self) -> Tensor<T> {
        unary(self, |x| x.tanh(), |_, y| T::one() - y * y)
    }

    pub fn leaky_relu(&self, slope: T) -> Tensor<T> {
        unary(
            self,
            move |x| if x > T::zero() { x } else { x * slope },
            move |x, _| if x > T::zero() { T::one() } else { slope },
        )
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&self, lo: T, hi: T) -> Tensor<T> {
        unary(
            self,
            move |x| x.max(lo).min(hi),
            move |x, _| {
                if x < lo || x > hi {
                    T::zero()
                } else {
                    T::one()
                }
            },
        )
    }

    /// Sum of all elements (zero-dimensional result).
    pub fn sum(&self) -> Tensor<T> {
        let s = self.data().iter().fold(T::zero(), |a, &b| a + b);
        let n = self.numel();
        Tensor::from_op(
            vec![s],
            Vec::new(),
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(vec![g[0]; n])]),
        )
    }

    /// Mean of all elements (zero-dimensional result).
    pub fn mean(&self) -> Tensor<T> {
        let n = self.numel();
        self.sum().mul_scalar(T::one() / T::of(n as f64))
    }

    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor<T>> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::invalid(
                "sum_axis",
                format!("axis {axis} out of range for {shape:?}"),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xd = self.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let base = (o * len + k) * inner;
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, &v) in dst.iter_mut().zip(&xd[base..base + inner]) {
                    *d = *d + v;
                }
            }
        }
        drop(xd);
        let mut out_shape = shape.clone();
        if keepdim {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
        }
        Ok(Tensor::from_op(
            out,
            out_shape,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    for k in 0..len {
                        let base = (o * len + k) * inner;
                        gx[base..base + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor<T>> {
        let len = *self.shape().get(axis).ok_or_else(|| {
            TensorError::invalid("mean_axis", format!("axis {axis} out of range"))
        })?;
        Ok(self
            .sum_axis(axis, keepdim)?
            .mul_scalar(T::one() / T::of(len as f64)))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel(shape) != self.numel() {
            return Err(TensorError::mismatch("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op(
            self.to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            Box::new(|g, _| vec![Some(g.to_vec())]),
        ))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Tensor<T>> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() || start > end || end > shape[axis] {
            return Err(TensorError::invalid(
                "slice",
                format!("axis {axis} range {start}..{end} invalid for {shape:?}"),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let take = end - start;
        let xd = self.data();
        let mut out = Vec::with_capacity(outer * take * inner);
        for o in 0..outer {
            let base = (o * len + start) * inner;
            out.extend_from_slice(&xd[base..base + take * inner]);
        }
        drop(xd);
        let mut out_shape = shape;
        out_shape[axis] = take;
        Ok(Tensor::from_op(
            out,
            out_shape,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    let base = (o * len + start) * inner;
                    gx[base..base + take * inner]
                        .copy_from_slice(&g[o * take * inner..(o + 1) * take * inner]);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::invalid("concat", "no inputs"))?;
        let rank = first.shape().len();
        if axis >= rank {
            return Err(TensorError::invalid(
                "concat",
                format!("axis {axis} >= rank {rank}"),
            ));
        }
        for p in parts {
            let ok = p.shape().len() == rank
                && (0..rank).all(|d| d == axis || p.shape()[d] == first.shape()[d]);
            if !ok {
                return Err(TensorError::mismatch("concat", first.shape(), p.shape()));
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &l) in parts.iter().zip(&lens) {
                let d = p.data();
                out.extend_from_slice(&d[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        Ok(Tensor::from_op(
            out,
            shape,
            parts.to_vec(),
            Box::new(move |g, _| {
                let mut grads: Vec<Vec<T>> = lens
                    .iter()
                    .map(|&l| Vec::with_capacity(outer * l * inner))
                    .collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (gp, &l) in grads.iter_mut().zip(&lens) {
                        gp.extend_from_slice(&g[off..off + l * inner]);
                        off += l * inner;
                    }
                }
                grads.into_iter().map(Some).collect()
            }),
        ))
    }

    /// Broadcast to a larger shape (numpy rules).
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor<T>> {
        let out_shape = broadcast_shapes(self.shape(), shape)?;
        if out_shape != shape {
            return Err(TensorError::mismatch("broadcast_to", self.shape(), shape));
        }
        self.add(&Tensor::zeros(shape))
    }

    pub fn transpose2d(&self) -> Result<Tensor<T>> {
        if self.shape().len() != 2 {
            return Err(TensorError::invalid("transpose2d", "expects rank 2"));
        }
        let (r, c) = (self.shape()[0], self.shape()[1]);
        let xd = self.data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xd[i * c + j];
            }
        }
        drop(xd);
        Ok(Tensor::from_op(
            out,
            vec![c, r],
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] = g[j * r + i];
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

    fn t(v: &[f64], s: &[usize]) -> Tensor<f64> {
        Tensor::new(v.to_vec(), s).unwrap()
    }

    fn p(v: &[f64], s: &[usize]) -> Tensor<f64> {
        Tensor::parameter(v.to_vec(), s).unwrap()
    }

    #[test]
    fn sum_gives_ones() {
        let x = p(&[1.0, -2.0, 3.0], &[3]);
        x.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn sum_of_squares_gives_twice_x() {
        let x = p(&[1.0, -2.0, 3.5], &[3]);
        x.mul(&x).unwrap().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, -4.0, 7.0]);
    }

    #[test]
    fn stop_gradient_blocks_one_path() {
        let x = p(&[1.0, -2.0, 3.5], &[3]);
        x.mul(&x.stop_gradient()).unwrap().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, -2.0, 3.5]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let y = t(&[0.0], &[1]).sigmoid();
        assert_eq!(y.item(), 0.5);
    }

    #[test]
    fn sigmoid_is_stable_for_large_inputs() {
        let y = t(&[-1000.0, 1000.0], &[2]).sigmoid().to_vec();
        assert_eq!(y, vec![0.0, 1.0]);
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let a = p(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let b = p(&[10.0, 20.0, 30.0], &[3]);
        let c = a.add(&b).unwrap();
        assert_eq!(c.to_vec(), vec![11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        c.sum().backward().unwrap();
        assert_eq!(b.grad().unwrap(), vec![2.0, 2.0, 2.0]);
        assert_eq!(a.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn incompatible_shapes_error() {
        let a = t(&[1.0, 2.0], &[2]);
        let b = t(&[1.0, 2.0, 3.0], &[3]);
        assert!(matches!(a.add(&b), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn axis_reductions() {
        let a = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        assert_eq!(a.sum_axis(0, false).unwrap().to_vec(), vec![5.0, 7.0, 9.0]);
        assert_eq!(a.mean_axis(1, true).unwrap().shape(), &[2, 1]);
        assert_eq!(a.mean_axis(1, true).unwrap().to_vec(), vec![2.0, 5.0]);
    }

    #[test]
    fn slice_and_concat_round_trip() {
        let a = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let l = a.slice(1, 0, 1).unwrap();
        let r = a.slice(1, 1, 3).unwrap();
        let back = Tensor::concat(&[l, r], 1).unwrap();
        assert_eq!(back.to_vec(), a.to_vec());
        assert!(a.slice(1, 2, 4).is_err());
    }

    #[test]
    fn clamp_gradient_is_masked() {
        let x = p(&[-1.0, 0.5, 2.0], &[3]);
        x.clamp(0.0, 1.0).sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0, 0.0]);
    }
}
