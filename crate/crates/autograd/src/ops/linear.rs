use crate::element::{gemm, Element, Trans};
use crate::error::{shape_err, Result};
use crate::tensor::{Backward, Tensor};

struct LinearOp {
    batch: usize,
    f_in: usize,
    f_out: usize,
}

/// `y = x * weight^T + bias` for `x [N, F_in]`, `weight [F_out, F_in]`, `bias [F_out]`.
pub fn linear<T: Element>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, f_in) = match *x.shape() {
        [n, f] => (n, f),
        ref s => return shape_err(format!("linear input must be rank 2, got {s:?}")),
    };
    let f_out = match *weight.shape() {
        [o, i] if i == f_in => o,
        ref s => return shape_err(format!("linear weight {s:?} incompatible with {f_in} input features")),
    };
    if bias.shape() != [f_out] {
        return shape_err(format!("linear bias {:?} expected [{f_out}]", bias.shape()));
    }
    let mut out = vec![T::zero(); n * f_out];
    {
        let b = bias.data();
        for row in out.chunks_mut(f_out) {
            row.copy_from_slice(&b);
        }
        gemm(n, f_in, f_out, &x.data(), Trans::No, &weight.data(), Trans::Yes, &mut out, true);
    }
    Tensor::from_op(
        out,
        vec![n, f_out],
        Box::new(LinearOp { batch: n, f_in, f_out }),
        vec![x.clone(), weight.clone(), bias.clone()],
    )
}

impl<T: Element> Backward<T> for LinearOp {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn backward(&self, inputs: &[Tensor<T>], _: &[T], g: &[T], needs: &[bool]) -> Result<Vec<Option<Vec<T>>>> {
        let (n, f_in, f_out) = (self.batch, self.f_in, self.f_out);
        let gx = needs[0].then(|| {
            let mut gx = vec![T::zero(); n * f_in];
            gemm(n, f_out, f_in, g, Trans::No, &inputs[1].data(), Trans::No, &mut gx, false);
            gx
        });
        let gw = needs[1].then(|| {
            let mut gw = vec![T::zero(); f_out * f_in];
            gemm(f_out, n, f_in, g, Trans::Yes, &inputs[0].data(), Trans::No, &mut gw, false);
            gw
        });
        let gb = needs[2].then(|| {
            let mut gb = vec![T::zero(); f_out];
            for row in g.chunks(f_out) {
                gb.iter_mut().zip(row).for_each(|(a, &b)| *a = *a + b);
            }
            gb
        });
        Ok(vec![gx, gw, gb])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: Vec<f64>, s: &[usize]) -> Tensor<f64> {
        Tensor::from_vec(v, s).unwrap()
    }

    #[test]
    fn identity_weight_passes_input() {
        let x = t(vec![1.0, -2.0, 0.5, 4.0], &[2, 2]);
        let y = linear(&x, &t(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]), &t(vec![0.0; 2], &[2])).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn dot_plus_bias() {
        let y = linear(&t(vec![1.0, 2.0], &[1, 2]), &t(vec![1.0, 1.0], &[1, 2]), &t(vec![0.5], &[1])).unwrap();
        assert_eq!(y.to_vec(), vec![3.5]);
    }

    #[test]
    fn zero_weight_broadcasts_bias() {
        let y = linear(&t(vec![3.0; 6], &[3, 2]), &t(vec![0.0; 4], &[2, 2]), &t(vec![1.0, -1.0], &[2])).unwrap();
        assert_eq!(y.to_vec(), vec![1.0, -1.0, 1.0, -1.0, 1.0, -1.0]);
    }

    #[test]
    fn dim_mismatch() {
        assert!(linear(&t(vec![1.0; 3], &[1, 3]), &t(vec![1.0; 2], &[1, 2]), &t(vec![0.0], &[1])).is_err());
    }
}
