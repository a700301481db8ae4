//! 2-D convolution and transposed convolution via im2col + GEMM.
//!
//! Both ops share one [`ConvGeometry`]: the "image" side of a plain
//! convolution (`channels x height x width`) and its output grid. A
//! transposed convolution runs the same geometry in reverse, which makes its
//! forward pass exactly the input-gradient of `conv2d`.

use crate::element::{gemm, gemm_new, lane_sum, Element, Trans};
use crate::error::{shape_err, Result};
use crate::tensor::{Backward, Tensor};

/// Upper bound on unfolded column elements processed at once.
const BLOCK_ELEMS: usize = 1 << 18;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvGeometry {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeometry {
    fn new(channels: usize, height: usize, width: usize, kernel: usize, stride: usize, padding: usize) -> Result<Self> {
        if kernel == 0 || stride == 0 {
            return shape_err(format!("kernel ({kernel}) and stride ({stride}) must be >= 1"));
        }
        let span_h = height + 2 * padding;
        let span_w = width + 2 * padding;
        if span_h < kernel || span_w < kernel {
            return shape_err(format!("kernel {kernel} larger than padded input {span_h}x{span_w}"));
        }
        Ok(Self {
            channels,
            height,
            width,
            kernel,
            stride,
            padding,
            out_h: (span_h - kernel) / stride + 1,
            out_w: (span_w - kernel) / stride + 1,
        })
    }

    fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Splits a batch into runs of images whose unfolded columns stay
    /// cache-sized; yields `(first image, count)`.
    fn blocks(&self, batch: usize) -> impl Iterator<Item = (usize, usize)> {
        let per = (BLOCK_ELEMS / (self.col_rows() * self.col_cols()).max(1)).max(1);
        (0..batch).step_by(per).map(move |i| (i, per.min(batch - i)))
    }

    /// Output positions `o` whose source `o*stride + kj - padding` lies inside `0..extent`.
    #[inline]
    fn valid(&self, kj: usize, out: usize, extent: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.padding);
        let lo = if kj >= p { 0 } else { (p - kj).div_ceil(s) };
        let hi = if extent + p > kj { ((extent + p - kj - 1) / s + 1).min(out) } else { 0 };
        (lo.min(hi), hi)
    }

    /// Unfolds `batch` images into columns laid out `[col_rows, batch * col_cols]`.
    fn im2col<T: Element>(&self, images: &[T], batch: usize) -> Vec<T> {
        let (k, s, p, ow, w) = (self.kernel, self.stride, self.padding, self.out_w, self.width);
        let mut cols = Vec::with_capacity(self.col_rows() * batch * self.col_cols());
        for r in 0..self.col_rows() {
            let (c, ki, kj) = (r / (k * k), (r / k) % k, r % k);
            let (ylo, yhi) = self.valid(ki, self.out_h, self.height);
            let (xlo, xhi) = self.valid(kj, ow, w);
            let x0 = (xlo * s + kj).saturating_sub(p);
            for i in 0..batch {
                let chan = &images[(i * self.channels + c) * self.height * w..][..self.height * w];
                for oi in 0..self.out_h {
                    if oi < ylo || oi >= yhi {
                        cols.resize(cols.len() + ow, T::zero());
                        continue;
                    }
                    let line = &chan[(oi * s + ki - p) * w..][..w];
                    cols.resize(cols.len() + xlo, T::zero());
                    match (xhi - xlo, s) {
                        (0, _) => {}
                        (len, 1) => cols.extend_from_slice(&line[x0..x0 + len]),
                        (len, _) => {
                            let src = &line[x0..x0 + (len - 1) * s + 1];
                            cols.extend((0..len).map(|j| src[j * s]));
                        }
                    }
                    cols.resize(cols.len() + ow - xhi, T::zero());
                }
            }
        }
        cols
    }

    /// Adjoint of [`Self::im2col`]: scatters-and-adds columns back into `images`.
    fn col2im<T: Element>(&self, cols: &[T], batch: usize, images: &mut [T]) {
        let (k, s, p, ow, w) = (self.kernel, self.stride, self.padding, self.out_w, self.width);
        let plane = self.col_cols();
        let ld = batch * plane;
        for r in 0..self.col_rows() {
            let (c, ki, kj) = (r / (k * k), (r / k) % k, r % k);
            let (ylo, yhi) = self.valid(ki, self.out_h, self.height);
            let (xlo, xhi) = self.valid(kj, ow, w);
            if xlo >= xhi {
                continue;
            }
            for i in 0..batch {
                let chan = &mut images[(i * self.channels + c) * self.height * w..][..self.height * w];
                let row = &cols[r * ld + i * plane..][..plane];
                for oi in ylo..yhi {
                    let line = &mut chan[(oi * s + ki - p) * w..][..w];
                    let x0 = xlo * s + kj - p;
                    let src = &row[oi * ow + xlo..oi * ow + xhi];
                    let dst = &mut line[x0..x0 + (src.len() - 1) * s + 1];
                    for (j, &v) in src.iter().enumerate() {
                        dst[j * s] = dst[j * s] + v;
                    }
                }
            }
        }
    }
}

/// `[batch, channels, plane]` to `[channels, batch * plane]`.
fn to_channel_major<T: Element>(data: &[T], batch: usize, channels: usize, plane: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for c in 0..channels {
        for i in 0..batch {
            out.extend_from_slice(&data[(i * channels + c) * plane..][..plane]);
        }
    }
    out
}

/// Inverse of [`to_channel_major`], appended to `out`.
fn extend_from_channel_major<T: Element>(out: &mut Vec<T>, data: &[T], batch: usize, channels: usize, plane: usize) {
    for i in 0..batch {
        for c in 0..channels {
            out.extend_from_slice(&data[(c * batch + i) * plane..][..plane]);
        }
    }
}

fn dims4(t: &Tensor<impl Element>, what: &str) -> Result<[usize; 4]> {
    match *t.shape() {
        [a, b, c, d] => Ok([a, b, c, d]),
        ref s => shape_err(format!("{what} must be rank 4, got {s:?}")),
    }
}

fn check_bias<T: Element>(bias: &Tensor<T>, channels: usize) -> Result<()> {
    if bias.shape() != [channels] {
        return shape_err(format!("bias shape {:?} does not match {channels} output channels", bias.shape()));
    }
    Ok(())
}

fn add_bias<T: Element>(out: &mut [T], bias: &[T], plane: usize) {
    for (chunk, &b) in out.chunks_mut(plane).zip(bias.iter().cycle()) {
        chunk.iter_mut().for_each(|v| *v = *v + b);
    }
}

fn bias_grad<T: Element>(g: &[T], channels: usize, plane: usize) -> Vec<T> {
    let mut gb = vec![T::zero(); channels];
    for (i, chunk) in g.chunks(plane).enumerate() {
        let s = lane_sum(chunk);
        gb[i % channels] = gb[i % channels] + s;
    }
    gb
}

struct Conv2dOp {
    geom: ConvGeometry,
    batch: usize,
    out_channels: usize,
}

/// Cross-correlation of `x [N, C_in, H, W]` with `weight [C_out, C_in, k, k]`.
///
/// Output spatial size is `floor((H + 2*padding - k) / stride) + 1`.
pub fn conv2d<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let [n, c_in, h, w] = dims4(x, "conv2d input")?;
    let [c_out, wc_in, kh, kw] = dims4(weight, "conv2d weight")?;
    if wc_in != c_in {
        return shape_err(format!("conv2d: input has {c_in} channels, weight expects {wc_in}"));
    }
    if kh != kw {
        return shape_err(format!("conv2d: kernel must be square, got {kh}x{kw}"));
    }
    check_bias(bias, c_out)?;
    let geom = ConvGeometry::new(c_in, h, w, kh, stride, padding)?;
    let plane = geom.col_cols();

    let mut out = Vec::with_capacity(n * c_out * plane);
    {
        let (xd, wd) = (x.data(), weight.data());
        for (i, len) in geom.blocks(n) {
            let cols = geom.im2col(&xd[i * geom.image_len()..][..len * geom.image_len()], len);
            let y = gemm_new(c_out, geom.col_rows(), len * plane, &wd, Trans::No, &cols, Trans::No);
            extend_from_channel_major(&mut out, &y, len, c_out, plane);
        }
    }
    add_bias(&mut out, &bias.data(), plane);
    Tensor::from_op(
        out,
        vec![n, c_out, geom.out_h, geom.out_w],
        Box::new(Conv2dOp { geom, batch: n, out_channels: c_out }),
        vec![x.clone(), weight.clone(), bias.clone()],
    )
}

impl<T: Element> Backward<T> for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, inputs: &[Tensor<T>], _: &[T], g: &[T], needs: &[bool]) -> Result<Vec<Option<Vec<T>>>> {
        let geom = &self.geom;
        let (rows, plane, c_out) = (geom.col_rows(), geom.col_cols(), self.out_channels);
        let (x, wd) = (inputs[0].data(), inputs[1].data());
        let image = geom.image_len();
        let mut gw = needs[1].then(|| vec![T::zero(); c_out * rows]);
        let mut gx = needs[0].then(|| vec![T::zero(); self.batch * image]);
        for (i, len) in geom.blocks(self.batch) {
            let gt = to_channel_major(&g[i * c_out * plane..][..len * c_out * plane], len, c_out, plane);
            if let Some(gw) = gw.as_mut() {
                let cols = geom.im2col(&x[i * image..][..len * image], len);
                gemm(c_out, len * plane, rows, &gt, Trans::No, &cols, Trans::Yes, gw, true);
            }
            if let Some(gx) = gx.as_mut() {
                let cols = gemm_new(rows, c_out, len * plane, &wd, Trans::Yes, &gt, Trans::No);
                geom.col2im(&cols, len, &mut gx[i * image..][..len * image]);
            }
        }
        let gb = needs[2].then(|| bias_grad(g, c_out, plane));
        Ok(vec![gx, gw, gb])
    }
}

struct ConvTranspose2dOp {
    /// geometry of the equivalent forward convolution (output side = our input)
    geom: ConvGeometry,
    batch: usize,
    in_channels: usize,
}

/// Transposed convolution of `x [N, C_in, H, W]` with `weight [C_in, C_out, k, k]`.
///
/// Output spatial size is `(H - 1)*stride - 2*padding + k`.
pub fn conv_transpose2d<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let [n, c_in, h, w] = dims4(x, "conv_transpose2d input")?;
    let [wc_in, c_out, kh, kw] = dims4(weight, "conv_transpose2d weight")?;
    if wc_in != c_in {
        return shape_err(format!("conv_transpose2d: input has {c_in} channels, weight expects {wc_in}"));
    }
    if kh != kw {
        return shape_err(format!("conv_transpose2d: kernel must be square, got {kh}x{kw}"));
    }
    if kh == 0 || stride == 0 {
        return shape_err("conv_transpose2d: kernel and stride must be >= 1");
    }
    check_bias(bias, c_out)?;
    let full_h = (h - 1) * stride + kh;
    let full_w = (w - 1) * stride + kw;
    if full_h <= 2 * padding || full_w <= 2 * padding {
        return shape_err(format!("conv_transpose2d: padding {padding} leaves no output for {h}x{w} input"));
    }
    let (oh, ow) = (full_h - 2 * padding, full_w - 2 * padding);
    let geom = ConvGeometry::new(c_out, oh, ow, kh, stride, padding)?;
    debug_assert_eq!((geom.out_h, geom.out_w), (h, w));
    let (rows, plane) = (geom.col_rows(), geom.col_cols());

    let image = geom.image_len();
    let mut out = vec![T::zero(); n * image];
    {
        let (xd, wd) = (x.data(), weight.data());
        for (i, len) in geom.blocks(n) {
            let xt = to_channel_major(&xd[i * c_in * plane..][..len * c_in * plane], len, c_in, plane);
            let cols = gemm_new(rows, c_in, len * plane, &wd, Trans::Yes, &xt, Trans::No);
            geom.col2im(&cols, len, &mut out[i * image..][..len * image]);
        }
    }
    add_bias(&mut out, &bias.data(), oh * ow);
    Tensor::from_op(
        out,
        vec![n, c_out, oh, ow],
        Box::new(ConvTranspose2dOp { geom, batch: n, in_channels: c_in }),
        vec![x.clone(), weight.clone(), bias.clone()],
    )
}

impl<T: Element> Backward<T> for ConvTranspose2dOp {
    fn name(&self) -> &'static str {
        "conv_transpose2d"
    }

    fn backward(&self, inputs: &[Tensor<T>], _: &[T], g: &[T], needs: &[bool]) -> Result<Vec<Option<Vec<T>>>> {
        let geom = &self.geom;
        let (rows, plane, c_in) = (geom.col_rows(), geom.col_cols(), self.in_channels);
        let (x, wd) = (inputs[0].data(), inputs[1].data());
        let image = geom.image_len();
        let mut gx = needs[0].then(|| Vec::with_capacity(self.batch * c_in * plane));
        let mut gw = needs[1].then(|| vec![T::zero(); c_in * rows]);
        if needs[0] || needs[1] {
            for (i, len) in geom.blocks(self.batch) {
                let cols = geom.im2col(&g[i * image..][..len * image], len);
                if let Some(gx) = gx.as_mut() {
                    let gxt = gemm_new(c_in, rows, len * plane, &wd, Trans::No, &cols, Trans::No);
                    extend_from_channel_major(gx, &gxt, len, c_in, plane);
                }
                if let Some(gw) = gw.as_mut() {
                    let xt = to_channel_major(&x[i * c_in * plane..][..len * c_in * plane], len, c_in, plane);
                    gemm(c_in, len * plane, rows, &xt, Trans::No, &cols, Trans::Yes, gw, true);
                }
            }
        }
        let gb = needs[2].then(|| bias_grad(g, geom.channels, geom.height * geom.width));
        Ok(vec![gx, gw, gb])
    }
}
