//! Reshaping, slicing and reductions.

use crate::element::{lane_sum, Element};
use crate::error::{shape_err, Result};
use crate::tensor::{Backward, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
}

struct ReshapeOp;

impl<T: Element> Backward<T> for ReshapeOp {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(&self, _: &[Tensor<T>], _: &[T], g: &[T], _: &[bool]) -> Result<Vec<Option<Vec<T>>>> {
        Ok(vec![Some(g.to_vec())])
    }
}

/// Reinterprets the row-major data under a new shape.
pub fn reshape<T: Element>(x: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    let n: usize = shape.iter().product();
    if n != x.numel() || shape.contains(&0) {
        return shape_err(format!("cannot reshape {:?} ({} values) into {shape:?}", x.shape(), x.numel()));
    }
    Tensor::from_op(x.to_vec(), shape.to_vec(), Box::new(ReshapeOp), vec![x.clone()])
}

struct ReduceOp {
    kind: ReduceKind,
    /// output index of every input element; `None` when everything reduces to one value
    index: Option<Vec<usize>>,
    numel: usize,
    count: usize,
}

impl<T: Element> Backward<T> for ReduceOp {
    fn name(&self) -> &'static str {
        match self.kind {
            ReduceKind::Sum => "sum",
            ReduceKind::Mean => "mean",
        }
    }

    fn backward(&self, _: &[Tensor<T>], _: &[T], g: &[T], _: &[bool]) -> Result<Vec<Option<Vec<T>>>> {
        let scale = match self.kind {
            ReduceKind::Sum => T::one(),
            ReduceKind::Mean => T::one() / T::from_f64(self.count as f64),
        };
        Ok(vec![Some(match &self.index {
            Some(index) => index.iter().map(|&o| g[o] * scale).collect(),
            None => vec![g[0] * scale; self.numel],
        })])
    }
}

/// Sums or averages over `axes`, dropping them from the shape.
///
/// `None` reduces every axis and yields a rank-0 tensor.
pub fn reduce<T: Element>(kind: ReduceKind, x: &Tensor<T>, axes: Option<&[usize]>) -> Result<Tensor<T>> {
    let shape = x.shape();
    let rank = shape.len();
    let mut reduced = vec![axes.is_none(); rank];
    if let Some(axes) = axes {
        for &a in axes {
            if a >= rank {
                return shape_err(format!("axis {a} out of range for shape {shape:?}"));
            }
            reduced[a] = true;
        }
    }
    let out_shape: Vec<usize> = (0..rank).filter(|&a| !reduced[a]).map(|a| shape[a]).collect();
    let out_len: usize = out_shape.iter().product();
    let count = x.numel() / out_len;

    let mut out = vec![T::zero(); out_len];
    let index = if out_len == 1 {
        out[0] = lane_sum(&x.data());
        None
    } else {
        // Output stride contributed by each input axis (0 for reduced axes).
        let mut out_stride = vec![0usize; rank];
        let mut s = 1;
        for a in (0..rank).rev() {
            if !reduced[a] {
                out_stride[a] = s;
                s *= shape[a];
            }
        }
        let mut index = Vec::with_capacity(x.numel());
        let mut coord = vec![0usize; rank];
        for _ in 0..x.numel() {
            index.push(coord.iter().zip(&out_stride).map(|(c, s)| c * s).sum());
            for a in (0..rank).rev() {
                coord[a] += 1;
                if coord[a] < shape[a] {
                    break;
                }
                coord[a] = 0;
            }
        }
        let data = x.data();
        for (&o, &v) in index.iter().zip(data.iter()) {
            out[o] = out[o] + v;
        }
        Some(index)
    };
    if kind == ReduceKind::Mean {
        let c = T::from_f64(count as f64);
        out.iter_mut().for_each(|v| *v = *v / c);
    }
    Tensor::from_op(out, out_shape, Box::new(ReduceOp { kind, index, count, numel: x.numel() }), vec![x.clone()])
}

struct NarrowOp {
    axis: usize,
    start: usize,
    len: usize,
    in_shape: Vec<usize>,
}

impl<T: Element> Backward<T> for NarrowOp {
    fn name(&self) -> &'static str {
        "narrow"
    }

    fn backward(&self, _: &[Tensor<T>], _: &[T], g: &[T], _: &[bool]) -> Result<Vec<Option<Vec<T>>>> {
        let outer: usize = self.in_shape[..self.axis].iter().product();
        let inner: usize = self.in_shape[self.axis + 1..].iter().product();
        let dim = self.in_shape[self.axis];
        let mut grad = vec![T::zero(); outer * dim * inner];
        for o in 0..outer {
            let src = &g[o * self.len * inner..(o + 1) * self.len * inner];
            let dst = (o * dim + self.start) * inner;
            grad[dst..dst + self.len * inner].copy_from_slice(src);
        }
        Ok(vec![Some(grad)])
    }
}

/// Slice `start..start+len` along `axis`.
pub fn narrow<T: Element>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
    let shape = x.shape().to_vec();
    if axis >= shape.len() || len == 0 || start + len > shape[axis] {
        return shape_err(format!("narrow({axis}, {start}, {len}) out of range for shape {shape:?}"));
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let dim = shape[axis];
    let mut out = Vec::with_capacity(outer * len * inner);
    {
        let data = x.data();
        for o in 0..outer {
            let src = (o * dim + start) * inner;
            out.extend_from_slice(&data[src..src + len * inner]);
        }
    }
    let mut out_shape = shape.clone();
    out_shape[axis] = len;
    Tensor::from_op(out, out_shape, Box::new(NarrowOp { axis, start, len, in_shape: shape }), vec![x.clone()])
}

impl<T: Element> Tensor<T> {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        reshape(self, shape)
    }

    pub fn sum_all(&self) -> Result<Tensor<T>> {
        reduce(ReduceKind::Sum, self, None)
    }

    pub fn mean_all(&self) -> Result<Tensor<T>> {
        reduce(ReduceKind::Mean, self, None)
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        narrow(self, axis, start, len)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_of_three() {
        let x = Tensor::<f64>::from_vec(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        assert_eq!(x.mean_all().unwrap().item().unwrap(), 2.0);
    }

    #[test]
    fn reshape_keeps_row_major_order() {
        let x = Tensor::<f64>::from_vec((0..6).map(f64::from).collect(), &[2, 3]).unwrap();
        let y = x.reshape(&[3, 2]).unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.to_vec(), x.to_vec());
        assert!(x.reshape(&[4, 2]).is_err());
    }

    #[test]
    fn reduce_over_axes() {
        // [[1,2,3],[4,5,6]]
        let x = Tensor::<f64>::from_vec((1..=6).map(f64::from).collect(), &[2, 3]).unwrap();
        let rows = reduce(ReduceKind::Sum, &x, Some(&[1])).unwrap();
        assert_eq!(rows.shape(), &[2]);
        assert_eq!(rows.to_vec(), vec![6.0, 15.0]);
        let cols = reduce(ReduceKind::Mean, &x, Some(&[0])).unwrap();
        assert_eq!(cols.to_vec(), vec![2.5, 3.5, 4.5]);
        assert!(reduce(ReduceKind::Sum, &x, Some(&[2])).is_err());
    }

    #[test]
    fn reduce_gradient_broadcasts_back() {
        let x = Tensor::<f64>::parameter(vec![1.0; 6], &[2, 3]).unwrap();
        let m = reduce(ReduceKind::Mean, &x, Some(&[1])).unwrap();
        m.sum_all().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0 / 3.0; 6]);
    }

    #[test]
    fn narrow_channel_and_gradient() {
        let x = Tensor::<f64>::parameter((0..8).map(f64::from).collect(), &[2, 2, 2]).unwrap();
        let y = x.narrow(1, 1, 1).unwrap();
        assert_eq!(y.shape(), &[2, 1, 2]);
        assert_eq!(y.to_vec(), vec![2.0, 3.0, 6.0, 7.0]);
        y.sum_all().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
    }
}
