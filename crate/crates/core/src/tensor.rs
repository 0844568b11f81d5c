//! Dense f64 tensors and the numeric kernels shared by every graph backend.
//!
//! Layout is row-major. Image-like tensors are `[batch, channels, height, width]`.
//! Convolutions go through im2col and a GEMM from `matrixmultiply`.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; numel] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; numel] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    /// `(n, c, h, w)` of a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::Dimension(format!("expected rank-4 tensor, got {:?}", self.shape))),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Self {
        debug_assert_eq!(self.data.len(), other.data.len());
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        pairwise_sum(&self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies sample `index` of the batch dimension out as a batch of one.
    pub fn batch_item(&self, index: usize) -> Tensor {
        let per = self.data.len() / self.shape[0];
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Tensor { shape, data: self.data[index * per..(index + 1) * per].to_vec() }
    }

    /// Stacks equally-shaped batch-of-one tensors along the batch dimension.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items.first().ok_or_else(|| Error::Dimension("empty stack".into()))?;
        let mut shape = first.shape.clone();
        if shape.is_empty() {
            return Err(Error::Dimension("cannot stack scalars".into()));
        }
        let mut data = Vec::with_capacity(first.numel() * items.len());
        let mut batch = 0;
        for t in items {
            if t.shape[1..] != first.shape[1..] {
                return Err(Error::Dimension(format!(
                    "stack shape mismatch {:?} vs {:?}",
                    t.shape, first.shape
                )));
            }
            batch += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        shape[0] = batch;
        Ok(Tensor { shape, data })
    }
}

/// Pairwise summation: the result depends only on the input order, and error
/// grows with log(n) instead of n.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const BLOCK: usize = 64;
    if values.len() <= BLOCK {
        values.iter().sum()
    } else {
        let mid = values.len() / 2;
        pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
    }
}

/// Mean taken around the first element, so constant inputs come back
/// exactly and large offsets cancel before summation.
pub fn shifted_mean(values: &[f64]) -> f64 {
    let Some(&first) = values.first() else { return 0.0 };
    let deviations: Vec<f64> = values.iter().map(|v| v - first).collect();
    first + pairwise_sum(&deviations) / values.len() as f64
}

/// `c = alpha * op(a) * op(b) + beta * c` for row-major operands, where
/// `op(a)` is `m x k` and `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserted slice lengths cover every index reachable through
    // the strides computed above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a square-kernel 2D convolution with zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_height() * self.out_width()
    }

    fn im2col(&self, image: &[f64], cols: &mut [f64]) {
        let (oh, ow) = (self.out_height(), self.out_width());
        let k = self.kernel;
        for c in 0..self.channels {
            let plane = &image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let line = &mut dst[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= self.height as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.width..(iy as usize + 1) * self.width];
                        for (ox, out) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *out = if ix < 0 || ix >= self.width as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Scatter-add of columns back onto the image (adjoint of `im2col`).
    fn col2im(&self, cols: &[f64], image: &mut [f64]) {
        let (oh, ow) = (self.out_height(), self.out_width());
        let k = self.kernel;
        for c in 0..self.channels {
            let plane =
                &mut image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        let dst =
                            &mut plane[iy as usize * self.width..(iy as usize + 1) * self.width];
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.width as isize {
                                dst[ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn check_conv_shapes(x: &Tensor, w: &Tensor, in_axis: usize) -> Result<(usize, usize, usize, usize, usize)> {
    let (n, c, h, wd) = x.dims4()?;
    let ws = w.shape();
    if ws.len() != 4 || ws[2] != ws[3] || ws[in_axis] != c {
        return Err(Error::Dimension(format!(
            "weight {:?} incompatible with input {:?}",
            ws,
            x.shape()
        )));
    }
    Ok((n, c, h, wd, ws[2]))
}

/// Forward 2D convolution. `w` is `[out, in, k, k]`.
pub fn conv2d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor> {
    let (n, c, h, wd, k) = check_conv_shapes(x, w, 1)?;
    if h + 2 * pad < k || wd + 2 * pad < k {
        return Err(Error::Dimension(format!("input {h}x{wd} smaller than kernel {k}")));
    }
    let geo = ConvGeometry { channels: c, height: h, width: wd, kernel: k, stride, pad };
    let out_c = w.shape()[0];
    let (oh, ow) = (geo.out_height(), geo.out_width());
    let mut out = Tensor::zeros(&[n, out_c, oh, ow]);
    let mut cols = vec![0.0; geo.col_rows() * geo.col_cols()];
    let in_per = c * h * wd;
    let out_per = out_c * oh * ow;
    for i in 0..n {
        geo.im2col(&x.data[i * in_per..(i + 1) * in_per], &mut cols);
        let dst = &mut out.data[i * out_per..(i + 1) * out_per];
        gemm(out_c, geo.col_rows(), oh * ow, &w.data, false, &cols, false, dst, 0.0);
        if let Some(b) = b {
            add_channel_bias(dst, &b.data, oh * ow);
        }
    }
    Ok(out)
}

fn add_channel_bias(dst: &mut [f64], bias: &[f64], plane: usize) {
    for (chunk, &bv) in dst.chunks_mut(plane).zip(bias) {
        for v in chunk {
            *v += bv;
        }
    }
}

fn channel_bias_grad(grad: &Tensor, channels: usize) -> Tensor {
    let (n, _, h, w) = grad.dims4().expect("rank-4 gradient");
    let plane = h * w;
    let mut db = vec![0.0; channels];
    for i in 0..n {
        for (c, acc) in db.iter_mut().enumerate() {
            let start = (i * channels + c) * plane;
            *acc += pairwise_sum(&grad.data[start..start + plane]);
        }
    }
    Tensor::from_vec(db)
}

/// Gradients of `conv2d` with respect to input, weight and bias.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    grad: &Tensor,
    stride: usize,
    pad: usize,
    need_input: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let (n, c, h, wd) = x.dims4().expect("rank-4 input");
    let k = w.shape()[2];
    let out_c = w.shape()[0];
    let geo = ConvGeometry { channels: c, height: h, width: wd, kernel: k, stride, pad };
    let (rows, ncols) = (geo.col_rows(), geo.col_cols());
    let mut cols = vec![0.0; rows * ncols];
    let mut dw = Tensor::zeros(w.shape());
    let mut dx = need_input.then(|| Tensor::zeros(x.shape()));
    let in_per = c * h * wd;
    let out_per = out_c * ncols;
    for i in 0..n {
        let g = &grad.data[i * out_per..(i + 1) * out_per];
        geo.im2col(&x.data[i * in_per..(i + 1) * in_per], &mut cols);
        gemm(out_c, ncols, rows, g, false, &cols, true, &mut dw.data, 1.0);
        if let Some(dx) = dx.as_mut() {
            gemm(rows, out_c, ncols, &w.data, true, g, false, &mut cols, 0.0);
            geo.col2im(&cols, &mut dx.data[i * in_per..(i + 1) * in_per]);
        }
    }
    (dx, dw, channel_bias_grad(grad, out_c))
}

/// Transposed convolution (the adjoint of `conv2d` in its input). `w` is
/// `[in, out, k, k]`; output size is `(h - 1) * stride - 2 * pad + k + out_pad`.
pub fn conv_transpose2d(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> Result<Tensor> {
    let (n, c, h, wd, k) = check_conv_shapes(x, w, 0)?;
    let out_c = w.shape()[1];
    let oh = ((h - 1) * stride + k + out_pad)
        .checked_sub(2 * pad)
        .ok_or_else(|| Error::Dimension("transposed conv output would be empty".into()))?;
    let ow = (wd - 1) * stride + k + out_pad - 2 * pad;
    let geo = ConvGeometry { channels: out_c, height: oh, width: ow, kernel: k, stride, pad };
    if geo.out_height() != h || geo.out_width() != wd {
        return Err(Error::Dimension("inconsistent transposed conv geometry".into()));
    }
    let mut out = Tensor::zeros(&[n, out_c, oh, ow]);
    let rows = geo.col_rows();
    let mut cols = vec![0.0; rows * h * wd];
    let in_per = c * h * wd;
    let out_per = out_c * oh * ow;
    for i in 0..n {
        gemm(rows, c, h * wd, &w.data, true, &x.data[i * in_per..(i + 1) * in_per], false, &mut cols, 0.0);
        let dst = &mut out.data[i * out_per..(i + 1) * out_per];
        geo.col2im(&cols, dst);
        if let Some(b) = b {
            add_channel_bias(dst, &b.data, oh * ow);
        }
    }
    Ok(out)
}

pub fn conv_transpose2d_backward(
    x: &Tensor,
    w: &Tensor,
    grad: &Tensor,
    stride: usize,
    pad: usize,
    need_input: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let (n, c, h, wd) = x.dims4().expect("rank-4 input");
    let (_, out_c, oh, ow) = grad.dims4().expect("rank-4 gradient");
    let k = w.shape()[2];
    let geo = ConvGeometry { channels: out_c, height: oh, width: ow, kernel: k, stride, pad };
    let rows = geo.col_rows();
    let mut cols = vec![0.0; rows * h * wd];
    let mut dw = Tensor::zeros(w.shape());
    let mut dx = need_input.then(|| Tensor::zeros(x.shape()));
    let in_per = c * h * wd;
    let out_per = out_c * oh * ow;
    for i in 0..n {
        geo.im2col(&grad.data[i * out_per..(i + 1) * out_per], &mut cols);
        let xi = &x.data[i * in_per..(i + 1) * in_per];
        gemm(c, h * wd, rows, xi, false, &cols, true, &mut dw.data, 1.0);
        if let Some(dx) = dx.as_mut() {
            gemm(c, rows, h * wd, &w.data, false, &cols, false, &mut dx.data[i * in_per..(i + 1) * in_per], 0.0);
        }
    }
    (dx, dw, channel_bias_grad(grad, out_c))
}

/// `y = x w^T + b` with `x: [batch, in]`, `w: [out, in]`.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || b.numel() != ws[0] {
        return Err(Error::Dimension(format!("linear: x {:?}, w {:?}", xs, ws)));
    }
    let (batch, inp, out) = (xs[0], xs[1], ws[0]);
    let mut y = Tensor::zeros(&[batch, out]);
    gemm(batch, inp, out, &x.data, false, &w.data, true, &mut y.data, 0.0);
    for row in y.data.chunks_mut(out) {
        for (v, bv) in row.iter_mut().zip(&b.data) {
            *v += bv;
        }
    }
    Ok(y)
}

pub fn stable_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow or loss of precision in either tail.
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}
