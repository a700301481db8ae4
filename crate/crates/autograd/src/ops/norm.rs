//! Batch normalization over the channel axis of `[N, C]` or `[N, C, H, W]` inputs.

use crate::element::{lane_dot, lane_sum, Element};
use crate::error::{shape_err, Result};
use crate::tensor::{Backward, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// batch statistics, running statistics updated
    Train,
    /// running statistics only
    Eval,
}

/// Per-channel running statistics carried between batches.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState<T: Element> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Element> BatchNormState<T> {
    /// Zero mean, unit variance, momentum 0.1, eps 1e-5.
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

struct BatchNormOp<T> {
    channels: usize,
    plane: usize,
    /// normalized input
    xhat: Vec<T>,
    inv_std: Vec<T>,
    train: bool,
}

/// Normalizes each channel and applies `gamma * xhat + beta`.
///
/// Train mode uses biased (1/m) batch variance and folds the batch mean and
/// variance into the running statistics with the state's momentum.
pub fn batchnorm<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    state: &mut BatchNormState<T>,
    mode: NormMode,
) -> Result<Tensor<T>> {
    let shape = x.shape().to_vec();
    let (n, c, plane) = match shape[..] {
        [n, c] => (n, c, 1),
        [n, c, h, w] => (n, c, h * w),
        _ => return shape_err(format!("batchnorm input must be rank 2 or 4, got {shape:?}")),
    };
    if gamma.shape() != [c] || beta.shape() != [c] || state.channels() != c {
        return shape_err(format!(
            "batchnorm: input has {c} channels, gamma {:?}, beta {:?}, state {}",
            gamma.shape(),
            beta.shape(),
            state.channels()
        ));
    }
    let m = n * plane;
    if m == 0 || state.eps <= 0.0 {
        return shape_err("batchnorm needs at least one value per channel and eps > 0");
    }
    let eps = T::from_f64(state.eps);
    let data = x.data();
    let (mean, var) = match mode {
        NormMode::Train => {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            let inv_m = T::one() / T::from_f64(m as f64);
            for (i, chunk) in data.chunks(plane).enumerate() {
                let ch = i % c;
                mean[ch] = mean[ch] + lane_sum(chunk);
            }
            mean.iter_mut().for_each(|v| *v = *v * inv_m);
            for (i, chunk) in data.chunks(plane).enumerate() {
                let ch = i % c;
                let mu = mean[ch];
                let centered: Vec<T> = chunk.iter().map(|&v| v - mu).collect();
                var[ch] = var[ch] + lane_dot(&centered, &centered);
            }
            var.iter_mut().for_each(|v| *v = *v * inv_m);
            let mom = T::from_f64(state.momentum);
            for ch in 0..c {
                state.running_mean[ch] = (T::one() - mom) * state.running_mean[ch] + mom * mean[ch];
                state.running_var[ch] = (T::one() - mom) * state.running_var[ch] + mom * var[ch];
            }
            (mean, var)
        }
        NormMode::Eval => (state.running_mean.clone(), state.running_var.clone()),
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let g = gamma.data();
    let b = beta.data();
    let mut xhat = vec![T::zero(); data.len()];
    let mut out = vec![T::zero(); data.len()];
    for (i, ((src, xh), o)) in data.chunks(plane).zip(xhat.chunks_mut(plane)).zip(out.chunks_mut(plane)).enumerate() {
        let ch = i % c;
        let (mu, is, gm, bt) = (mean[ch], inv_std[ch], g[ch], b[ch]);
        for ((&v, xh), o) in src.iter().zip(xh.iter_mut()).zip(o.iter_mut()) {
            *xh = (v - mu) * is;
            *o = gm * *xh + bt;
        }
    }
    drop((data, g, b));
    Tensor::from_op(
        out,
        shape,
        Box::new(BatchNormOp { channels: c, plane, xhat, inv_std, train: mode == NormMode::Train }),
        vec![x.clone(), gamma.clone(), beta.clone()],
    )
}

impl<T: Element> Backward<T> for BatchNormOp<T> {
    fn name(&self) -> &'static str {
        "batchnorm"
    }

    fn backward(&self, inputs: &[Tensor<T>], _: &[T], g: &[T], needs: &[bool]) -> Result<Vec<Option<Vec<T>>>> {
        let c = self.channels;
        let mut sum_g = vec![T::zero(); c];
        let mut sum_gx = vec![T::zero(); c];
        for (i, (gc, xc)) in g.chunks(self.plane).zip(self.xhat.chunks(self.plane)).enumerate() {
            let ch = i % c;
            sum_g[ch] = sum_g[ch] + lane_sum(gc);
            sum_gx[ch] = sum_gx[ch] + lane_dot(gc, xc);
        }
        let gx = needs[0].then(|| {
            let gamma = inputs[1].data();
            let m = T::from_f64((g.len() / c) as f64);
            let mut gx = Vec::with_capacity(g.len());
            for (i, (gc, xc)) in g.chunks(self.plane).zip(self.xhat.chunks(self.plane)).enumerate() {
                let ch = i % c;
                let scale = gamma[ch] * self.inv_std[ch];
                if self.train {
                    let (mg, mgx) = (sum_g[ch] / m, sum_gx[ch] / m);
                    gx.extend(gc.iter().zip(xc).map(|(&gi, &xi)| scale * (gi - mg - xi * mgx)));
                } else {
                    gx.extend(gc.iter().map(|&gi| scale * gi));
                }
            }
            gx
        });
        Ok(vec![gx, needs[1].then_some(sum_gx), needs[2].then_some(sum_g)])
    }
}
