//! Differentiable computation graphs.
//!
//! Network code is written once against [`Graph`]. [`Eval`] runs it eagerly
//! and drops intermediates as soon as they go out of scope (inference).
//! [`Tape`] records every op so [`Tape::backward`] can produce exact
//! reverse-mode gradients (training, gradient checks).
//!
//! Only parameters listed as trainable when a tape is created become
//! differentiable leaves; every other parameter is recorded as a constant.
//! Freezing a network is therefore structural: its gradients are never
//! computed, not merely zeroed.

use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};
use crate::params::{Group, ParamId, ParamStore};
use crate::tensor::{self, pairwise_sum, stable_sigmoid, Tensor};

/// Probability floor applied by [`Op::RateBits`].
pub const LIKELIHOOD_FLOOR: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Op {
    /// Elementwise; the second operand may be a single-element tensor.
    Add,
    Sub,
    Mul,
    /// `scale * x + shift`.
    Affine { scale: f64, shift: f64 },
    Exp,
    LeakyRelu { slope: f64 },
    Softplus,
    Sum,
    Mean,
    /// Inputs: x `[n,c,h,w]`, w `[o,c,k,k]`, optional bias `[o]`.
    Conv2d { stride: usize, pad: usize },
    /// Inputs: x `[n,c,h,w]`, w `[c,o,k,k]`, optional bias `[o]`.
    ConvTranspose2d { stride: usize, pad: usize, out_pad: usize },
    /// Inputs: x `[b,in]`, w `[out,in]`, bias `[out]`.
    Linear,
    /// Inputs: x `[n,c,h,w]`, s `[c]`; `x * s` per channel.
    ChannelScale,
    /// Inputs: x `[n,c,h,w]`, gamma `[1|n,c]`, shift `[1|n,c]`;
    /// `x * (1 + gamma) + shift` per sample and channel.
    Modulate,
    ConcatChannels,
    /// Rounds half away from zero; the backward pass is the identity.
    RoundSte,
    Clamp { lo: f64, hi: f64 },
    /// Input: scalar weight `w`. Output `[1, 2*bands]` with entries
    /// `sin(2^k pi w / w_max), cos(2^k pi w / w_max)` interleaved.
    Fourier { bands: usize, max: f64 },
    /// Unit-normalises feature vectors across channels at every position.
    ChannelNormalize,
    /// Inputs: symbols `[n,c,h,w]`, loc `[c]`, log-scale `[c]`. Output: total
    /// bits under per-channel logistic densities integrated over unit bins.
    RateBits,
    /// Mean squared difference of two equally shaped tensors.
    Mse,
}

pub trait Graph {
    type Var: Clone;

    fn constant(&mut self, t: Tensor) -> Self::Var;
    fn param(&mut self, store: &ParamStore, id: ParamId) -> Self::Var;
    fn value<'a>(&'a self, v: &'a Self::Var) -> &'a Tensor;
    /// Same value, cut from the gradient path.
    fn detach(&mut self, v: &Self::Var) -> Self::Var;
    fn apply(&mut self, op: Op, inputs: &[&Self::Var]) -> Result<Self::Var>;

    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::Add, &[a, b])
    }
    fn sub(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::Sub, &[a, b])
    }
    fn mul(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::Mul, &[a, b])
    }
    fn affine(&mut self, a: &Self::Var, scale: f64, shift: f64) -> Result<Self::Var> {
        self.apply(Op::Affine { scale, shift }, &[a])
    }
    fn scale(&mut self, a: &Self::Var, scale: f64) -> Result<Self::Var> {
        self.affine(a, scale, 0.0)
    }
    fn exp(&mut self, a: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::Exp, &[a])
    }
    fn leaky_relu(&mut self, a: &Self::Var, slope: f64) -> Result<Self::Var> {
        self.apply(Op::LeakyRelu { slope }, &[a])
    }
    fn softplus(&mut self, a: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::Softplus, &[a])
    }
    fn sum(&mut self, a: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::Sum, &[a])
    }
    fn mean(&mut self, a: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::Mean, &[a])
    }
    fn conv2d(
        &mut self,
        x: &Self::Var,
        w: &Self::Var,
        b: Option<&Self::Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Self::Var> {
        let op = Op::Conv2d { stride, pad };
        match b {
            Some(b) => self.apply(op, &[x, w, b]),
            None => self.apply(op, &[x, w]),
        }
    }
    fn conv_transpose2d(
        &mut self,
        x: &Self::Var,
        w: &Self::Var,
        b: Option<&Self::Var>,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Result<Self::Var> {
        let op = Op::ConvTranspose2d { stride, pad, out_pad };
        match b {
            Some(b) => self.apply(op, &[x, w, b]),
            None => self.apply(op, &[x, w]),
        }
    }
    fn linear(&mut self, x: &Self::Var, w: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::Linear, &[x, w, b])
    }
    fn channel_scale(&mut self, x: &Self::Var, s: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::ChannelScale, &[x, s])
    }
    fn modulate(&mut self, x: &Self::Var, gamma: &Self::Var, shift: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::Modulate, &[x, gamma, shift])
    }
    fn concat_channels(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::ConcatChannels, &[a, b])
    }
    fn round_ste(&mut self, a: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::RoundSte, &[a])
    }
    fn clamp(&mut self, a: &Self::Var, lo: f64, hi: f64) -> Result<Self::Var> {
        self.apply(Op::Clamp { lo, hi }, &[a])
    }
    fn fourier(&mut self, w: &Self::Var, bands: usize, max: f64) -> Result<Self::Var> {
        self.apply(Op::Fourier { bands, max }, &[w])
    }
    fn channel_normalize(&mut self, x: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::ChannelNormalize, &[x])
    }
    fn rate_bits(&mut self, y: &Self::Var, loc: &Self::Var, log_scale: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::RateBits, &[y, loc, log_scale])
    }
    fn mse(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::Mse, &[a, b])
    }
}

fn arity_error(op: Op, n: usize) -> Error {
    Error::Dimension(format!("{op:?} got {n} inputs"))
}

fn broadcast_check(a: &Tensor, b: &Tensor) -> Result<bool> {
    if a.shape() == b.shape() {
        Ok(false)
    } else if b.numel() == 1 {
        Ok(true)
    } else {
        Err(Error::Dimension(format!("operands {:?} and {:?}", a.shape(), b.shape())))
    }
}

fn binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if broadcast_check(a, b)? {
        let bv = b.item();
        Ok(a.map(|v| f(v, bv)))
    } else {
        Ok(a.zip_map(b, f))
    }
}

fn modulation_rows(x: &Tensor, gamma: &Tensor) -> Result<usize> {
    let (n, c, _, _) = x.dims4()?;
    match gamma.shape() {
        [rows, gc] if *gc == c && (*rows == 1 || *rows == n) => Ok(*rows),
        s => Err(Error::Dimension(format!("modulation {:?} for features {:?}", s, x.shape()))),
    }
}

/// Logistic bin probability and its derivative pieces for one element.
/// Returns `(p, dp/dy, dp/dlog_scale)`.
pub(crate) fn logistic_bin(y: f64, loc: f64, log_scale: f64) -> (f64, f64, f64) {
    let s = log_scale.exp();
    // Evaluate in the tail nearer zero so the difference keeps its precision.
    let centered = y - loc;
    let sign = if centered > 0.0 { -1.0 } else { 1.0 };
    let upper = sign * (centered + sign * 0.5) / s;
    let lower = sign * (centered - sign * 0.5) / s;
    let p = stable_sigmoid(upper) - stable_sigmoid(lower);
    let dsig = |z: f64| stable_sigmoid(z) * stable_sigmoid(-z);
    let (du, dl) = (dsig(upper), dsig(lower));
    let dp_dy = (du - dl) / s * sign;
    let dp_dls = -(upper * du - lower * dl);
    (p.max(0.0), dp_dy, dp_dls)
}

/// Forward evaluation shared by every backend.
pub fn forward(op: Op, inputs: &[&Tensor]) -> Result<Tensor> {
    let need = |n: usize| if inputs.len() == n { Ok(()) } else { Err(arity_error(op, inputs.len())) };
    match op {
        Op::Add => {
            need(2)?;
            binary(inputs[0], inputs[1], |a, b| a + b)
        }
        Op::Sub => {
            need(2)?;
            binary(inputs[0], inputs[1], |a, b| a - b)
        }
        Op::Mul => {
            need(2)?;
            binary(inputs[0], inputs[1], |a, b| a * b)
        }
        Op::Affine { scale, shift } => {
            need(1)?;
            Ok(inputs[0].map(|v| scale * v + shift))
        }
        Op::Exp => {
            need(1)?;
            Ok(inputs[0].map(f64::exp))
        }
        Op::LeakyRelu { slope } => {
            need(1)?;
            Ok(inputs[0].map(|v| if v >= 0.0 { v } else { slope * v }))
        }
        Op::Softplus => {
            need(1)?;
            Ok(inputs[0].map(tensor::softplus))
        }
        Op::Sum => {
            need(1)?;
            Ok(Tensor::scalar(inputs[0].sum()))
        }
        Op::Mean => {
            need(1)?;
            Ok(Tensor::scalar(crate::tensor::shifted_mean(inputs[0].data())))
        }
        Op::Conv2d { stride, pad } => {
            if !(2..=3).contains(&inputs.len()) {
                return Err(arity_error(op, inputs.len()));
            }
            tensor::conv2d(inputs[0], inputs[1], inputs.get(2).copied(), stride, pad)
        }
        Op::ConvTranspose2d { stride, pad, out_pad } => {
            if !(2..=3).contains(&inputs.len()) {
                return Err(arity_error(op, inputs.len()));
            }
            tensor::conv_transpose2d(inputs[0], inputs[1], inputs.get(2).copied(), stride, pad, out_pad)
        }
        Op::Linear => {
            need(3)?;
            tensor::linear(inputs[0], inputs[1], inputs[2])
        }
        Op::ChannelScale => {
            need(2)?;
            let (x, s) = (inputs[0], inputs[1]);
            let (_, c, h, w) = x.dims4()?;
            if s.numel() != c {
                return Err(Error::Dimension(format!("scale of {} for {} channels", s.numel(), c)));
            }
            let plane = h * w;
            let mut out = x.clone();
            for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
                let sv = s.data()[i % c];
                chunk.iter_mut().for_each(|v| *v *= sv);
            }
            Ok(out)
        }
        Op::Modulate => {
            need(3)?;
            let (x, gamma, shift) = (inputs[0], inputs[1], inputs[2]);
            let rows = modulation_rows(x, gamma)?;
            if shift.shape() != gamma.shape() {
                return Err(Error::Dimension("modulation scale/shift shapes differ".into()));
            }
            let (_, c, h, w) = x.dims4()?;
            let plane = h * w;
            let mut out = x.clone();
            for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
                let (n, ch) = (i / c, i % c);
                let r = if rows == 1 { 0 } else { n };
                let g = 1.0 + gamma.data()[r * c + ch];
                let b = shift.data()[r * c + ch];
                chunk.iter_mut().for_each(|v| *v = *v * g + b);
            }
            Ok(out)
        }
        Op::ConcatChannels => {
            need(2)?;
            let (a, b) = (inputs[0], inputs[1]);
            let (n, ca, h, w) = a.dims4()?;
            let (nb, cb, hb, wb) = b.dims4()?;
            if (n, h, w) != (nb, hb, wb) {
                return Err(Error::Dimension(format!("concat {:?} with {:?}", a.shape(), b.shape())));
            }
            let (pa, pb) = (ca * h * w, cb * h * w);
            let mut data = Vec::with_capacity(n * (pa + pb));
            for i in 0..n {
                data.extend_from_slice(&a.data()[i * pa..(i + 1) * pa]);
                data.extend_from_slice(&b.data()[i * pb..(i + 1) * pb]);
            }
            Tensor::new(vec![n, ca + cb, h, w], data)
        }
        Op::RoundSte => {
            need(1)?;
            Ok(inputs[0].map(f64::round))
        }
        Op::Clamp { lo, hi } => {
            need(1)?;
            Ok(inputs[0].map(|v| v.clamp(lo, hi)))
        }
        Op::Fourier { bands, max } => {
            need(1)?;
            let w = inputs[0].item() / max;
            let mut data = Vec::with_capacity(2 * bands);
            for k in 0..bands {
                let arg = (1u64 << k) as f64 * std::f64::consts::PI * w;
                data.push(arg.sin());
                data.push(arg.cos());
            }
            Tensor::new(vec![1, 2 * bands], data)
        }
        Op::ChannelNormalize => {
            need(1)?;
            let x = inputs[0];
            let (n, c, h, w) = x.dims4()?;
            let plane = h * w;
            let mut out = x.clone();
            for i in 0..n {
                let base = i * c * plane;
                for p in 0..plane {
                    let norm = channel_norm(x.data(), base, c, plane, p);
                    for ch in 0..c {
                        out.data_mut()[base + ch * plane + p] /= norm;
                    }
                }
            }
            Ok(out)
        }
        Op::RateBits => {
            need(3)?;
            let (y, loc, ls) = (inputs[0], inputs[1], inputs[2]);
            let (_, c, h, w) = y.dims4()?;
            if loc.numel() != c || ls.numel() != c {
                return Err(Error::Dimension("entropy parameters do not match channels".into()));
            }
            let plane = h * w;
            let bits: Vec<f64> = y
                .data()
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    let ch = (i / plane) % c;
                    let (p, _, _) = logistic_bin(v, loc.data()[ch], ls.data()[ch]);
                    -p.max(LIKELIHOOD_FLOOR).log2()
                })
                .collect();
            Ok(Tensor::scalar(pairwise_sum(&bits)))
        }
        Op::Mse => {
            need(2)?;
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() != b.shape() {
                return Err(Error::Dimension(format!("mse of {:?} and {:?}", a.shape(), b.shape())));
            }
            let sq: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).collect();
            Ok(Tensor::scalar(pairwise_sum(&sq) / sq.len().max(1) as f64))
        }
    }
}

const NORMALIZE_EPS: f64 = 1e-10;

fn channel_norm(data: &[f64], base: usize, c: usize, plane: usize, p: usize) -> f64 {
    let mut ss = NORMALIZE_EPS;
    for ch in 0..c {
        let v = data[base + ch * plane + p];
        ss += v * v;
    }
    ss.sqrt()
}

/// Gradients of `op` with respect to each input, given the upstream gradient.
/// Entries for inputs with `need[i] == false` may be `None`.
fn backward(op: Op, inputs: &[&Tensor], output: &Tensor, grad: &Tensor, need: &[bool]) -> Vec<Option<Tensor>> {
    let reduce_to = |g: Tensor, target: &Tensor| -> Tensor {
        if target.numel() == 1 && g.numel() != 1 {
            Tensor::new(target.shape().to_vec(), vec![g.sum()]).expect("scalar")
        } else {
            g
        }
    };
    match op {
        Op::Add => vec![
            need[0].then(|| grad.clone()),
            need[1].then(|| reduce_to(grad.clone(), inputs[1])),
        ],
        Op::Sub => vec![
            need[0].then(|| grad.clone()),
            need[1].then(|| reduce_to(grad.map(|v| -v), inputs[1])),
        ],
        Op::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            let ga = need[0].then(|| binary(grad, b, |g, bv| g * bv).expect("shapes checked"));
            let gb = need[1].then(|| reduce_to(grad.zip_map(a, |g, av| g * av), b));
            vec![ga, gb]
        }
        Op::Affine { scale, .. } => vec![Some(grad.map(|g| g * scale))],
        Op::Exp => vec![Some(grad.zip_map(output, |g, y| g * y))],
        Op::LeakyRelu { slope } => {
            vec![Some(grad.zip_map(inputs[0], |g, x| if x >= 0.0 { g } else { g * slope }))]
        }
        Op::Softplus => vec![Some(grad.zip_map(inputs[0], |g, x| g * stable_sigmoid(x)))],
        Op::Sum => vec![Some(Tensor::full(inputs[0].shape(), grad.item()))],
        Op::Mean => {
            let n = inputs[0].numel().max(1) as f64;
            vec![Some(Tensor::full(inputs[0].shape(), grad.item() / n))]
        }
        Op::Conv2d { stride, pad } => {
            let (dx, dw, db) = tensor::conv2d_backward(inputs[0], inputs[1], grad, stride, pad, need[0]);
            let mut out = vec![dx, need[1].then_some(dw)];
            if inputs.len() == 3 {
                out.push(need[2].then_some(db));
            }
            out
        }
        Op::ConvTranspose2d { stride, pad, .. } => {
            let (dx, dw, db) =
                tensor::conv_transpose2d_backward(inputs[0], inputs[1], grad, stride, pad, need[0]);
            let mut out = vec![dx, need[1].then_some(dw)];
            if inputs.len() == 3 {
                out.push(need[2].then_some(db));
            }
            out
        }
        Op::Linear => {
            let (x, w) = (inputs[0], inputs[1]);
            let (batch, inp) = (x.shape()[0], x.shape()[1]);
            let out_dim = w.shape()[0];
            let dx = need[0].then(|| {
                let mut dx = Tensor::zeros(x.shape());
                tensor::gemm(batch, out_dim, inp, grad.data(), false, w.data(), false, dx.data_mut(), 0.0);
                dx
            });
            let dw = need[1].then(|| {
                let mut dw = Tensor::zeros(w.shape());
                tensor::gemm(out_dim, batch, inp, grad.data(), true, x.data(), false, dw.data_mut(), 0.0);
                dw
            });
            let db = need[2].then(|| {
                let mut db = vec![0.0; out_dim];
                for row in grad.data().chunks(out_dim) {
                    for (acc, g) in db.iter_mut().zip(row) {
                        *acc += g;
                    }
                }
                Tensor::new(inputs[2].shape().to_vec(), db).expect("bias shape")
            });
            vec![dx, dw, db]
        }
        Op::ChannelScale => {
            let (x, s) = (inputs[0], inputs[1]);
            let (_, c, h, w) = x.dims4().expect("rank-4");
            let plane = h * w;
            let dx = need[0].then(|| forward(Op::ChannelScale, &[grad, s]).expect("shapes checked"));
            let ds = need[1].then(|| {
                let mut ds = vec![0.0; c];
                for (i, (gc, xc)) in grad.data().chunks(plane).zip(x.data().chunks(plane)).enumerate() {
                    ds[i % c] += gc.iter().zip(xc).map(|(g, v)| g * v).sum::<f64>();
                }
                Tensor::new(s.shape().to_vec(), ds).expect("scale shape")
            });
            vec![dx, ds]
        }
        Op::Modulate => {
            let (x, gamma) = (inputs[0], inputs[1]);
            let (_, c, h, w) = x.dims4().expect("rank-4");
            let rows = gamma.shape()[0];
            let plane = h * w;
            let mut dx = need[0].then(|| grad.clone());
            let mut dg = vec![0.0; rows * c];
            let mut db = vec![0.0; rows * c];
            for (i, (gc, xc)) in grad.data().chunks(plane).zip(x.data().chunks(plane)).enumerate() {
                let (n, ch) = (i / c, i % c);
                let r = if rows == 1 { 0 } else { n };
                let scale = 1.0 + gamma.data()[r * c + ch];
                if let Some(dx) = dx.as_mut() {
                    dx.data_mut()[i * plane..(i + 1) * plane].iter_mut().for_each(|v| *v *= scale);
                }
                dg[r * c + ch] += gc.iter().zip(xc).map(|(g, v)| g * v).sum::<f64>();
                db[r * c + ch] += gc.iter().sum::<f64>();
            }
            vec![
                dx,
                need[1].then(|| Tensor::new(gamma.shape().to_vec(), dg).expect("gamma shape")),
                need[2].then(|| Tensor::new(gamma.shape().to_vec(), db).expect("shift shape")),
            ]
        }
        Op::ConcatChannels => {
            let (a, b) = (inputs[0], inputs[1]);
            let (n, ca, h, w) = a.dims4().expect("rank-4");
            let cb = b.shape()[1];
            let (pa, pb) = (ca * h * w, cb * h * w);
            let mut ga = Vec::with_capacity(n * pa);
            let mut gb = Vec::with_capacity(n * pb);
            for i in 0..n {
                let row = &grad.data()[i * (pa + pb)..(i + 1) * (pa + pb)];
                ga.extend_from_slice(&row[..pa]);
                gb.extend_from_slice(&row[pa..]);
            }
            vec![
                need[0].then(|| Tensor::new(a.shape().to_vec(), ga).expect("shape")),
                need[1].then(|| Tensor::new(b.shape().to_vec(), gb).expect("shape")),
            ]
        }
        Op::RoundSte => vec![Some(grad.clone())],
        Op::Clamp { lo, hi } => {
            vec![Some(grad.zip_map(inputs[0], |g, x| if x >= lo && x <= hi { g } else { 0.0 }))]
        }
        Op::Fourier { bands, max } => {
            let w = inputs[0].item() / max;
            let mut acc = 0.0;
            for k in 0..bands {
                let freq = (1u64 << k) as f64 * std::f64::consts::PI;
                let arg = freq * w;
                acc += grad.data()[2 * k] * arg.cos() * freq / max;
                acc -= grad.data()[2 * k + 1] * arg.sin() * freq / max;
            }
            vec![Some(Tensor::new(inputs[0].shape().to_vec(), vec![acc]).expect("scalar"))]
        }
        Op::ChannelNormalize => {
            let x = inputs[0];
            let (n, c, h, w) = x.dims4().expect("rank-4");
            let plane = h * w;
            let mut dx = Tensor::zeros(x.shape());
            for i in 0..n {
                let base = i * c * plane;
                for p in 0..plane {
                    let norm = channel_norm(x.data(), base, c, plane, p);
                    let mut dot = 0.0;
                    for ch in 0..c {
                        let idx = base + ch * plane + p;
                        dot += grad.data()[idx] * x.data()[idx];
                    }
                    let n3 = norm * norm * norm;
                    for ch in 0..c {
                        let idx = base + ch * plane + p;
                        dx.data_mut()[idx] = grad.data()[idx] / norm - x.data()[idx] * dot / n3;
                    }
                }
            }
            vec![Some(dx)]
        }
        Op::RateBits => {
            let (y, loc, ls) = (inputs[0], inputs[1], inputs[2]);
            let (_, c, h, w) = y.dims4().expect("rank-4");
            let plane = h * w;
            let g = grad.item();
            let ln2 = std::f64::consts::LN_2;
            let mut dy = Tensor::zeros(y.shape());
            let mut dloc = vec![0.0; c];
            let mut dls = vec![0.0; c];
            for (i, &v) in y.data().iter().enumerate() {
                let ch = (i / plane) % c;
                let (p, dp_dy, dp_dls) = logistic_bin(v, loc.data()[ch], ls.data()[ch]);
                // -log2(max(p, floor)): the floor bounds the value, the
                // gradient is always taken as if p were the floored value.
                let dbits_dp = -1.0 / (p.max(LIKELIHOOD_FLOOR) * ln2);
                let gy = g * dbits_dp * dp_dy;
                dy.data_mut()[i] = gy;
                dloc[ch] -= gy;
                dls[ch] += g * dbits_dp * dp_dls;
            }
            vec![
                need[0].then_some(dy),
                need[1].then(|| Tensor::new(loc.shape().to_vec(), dloc).expect("shape")),
                need[2].then(|| Tensor::new(ls.shape().to_vec(), dls).expect("shape")),
            ]
        }
        Op::Mse => {
            let (a, b) = (inputs[0], inputs[1]);
            let k = 2.0 * grad.item() / a.numel().max(1) as f64;
            let diff = a.zip_map(b, |x, y| k * (x - y));
            let gb = need[1].then(|| diff.map(|v| -v));
            vec![need[0].then_some(diff), gb]
        }
    }
}

/// Eager evaluation without gradient bookkeeping.
#[derive(Debug, Default)]
pub struct Eval;

impl Graph for Eval {
    type Var = Tensor;

    fn constant(&mut self, t: Tensor) -> Tensor {
        t
    }

    fn param(&mut self, store: &ParamStore, id: ParamId) -> Tensor {
        store.get(id).clone()
    }

    fn value<'a>(&'a self, v: &'a Tensor) -> &'a Tensor {
        v
    }

    fn detach(&mut self, v: &Tensor) -> Tensor {
        v.clone()
    }

    fn apply(&mut self, op: Op, inputs: &[&Tensor]) -> Result<Tensor> {
        forward(op, inputs)
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

struct Node {
    value: Tensor,
    op: Option<Op>,
    inputs: Vec<usize>,
    needs_grad: bool,
}

/// Recording graph for reverse-mode differentiation.
pub struct Tape {
    nodes: Vec<Node>,
    trainable: HashSet<Group>,
    param_leaves: HashMap<ParamId, usize>,
}

impl Tape {
    /// A tape on which parameters of the listed groups are differentiable.
    pub fn new(trainable: &[Group]) -> Self {
        Self { nodes: Vec::new(), trainable: trainable.iter().copied().collect(), param_leaves: HashMap::new() }
    }

    /// A differentiable input leaf (used for gradients w.r.t. data).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, None, Vec::new(), true)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Option<Op>, inputs: Vec<usize>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, inputs, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Dimension("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(op) = node.op else { continue };
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let need: Vec<bool> = node.inputs.iter().map(|&i| self.nodes[i].needs_grad).collect();
            let ins: Vec<&Tensor> = node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
            let input_grads = backward(op, &ins, &node.value, &g, &need);
            for ((&i, gi), &needed) in node.inputs.iter().zip(input_grads).zip(&need) {
                if !needed {
                    continue;
                }
                let Some(gi) = gi else { continue };
                match grads[i].as_mut() {
                    Some(acc) => acc.add_assign(&gi),
                    None => grads[i] = Some(gi),
                }
            }
            grads[idx] = Some(g);
        }
        let params = self
            .param_leaves
            .iter()
            .filter_map(|(&id, &node)| grads.get(node).and_then(|g| g.clone()).map(|g| (id, g)))
            .collect();
        Ok(Gradients { nodes: grads, params })
    }
}

impl Graph for Tape {
    type Var = Var;

    fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, None, Vec::new(), false)
    }

    fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&node) = self.param_leaves.get(&id) {
            return Var(node);
        }
        let trainable = self.trainable.contains(&id.group);
        let v = self.push(store.get(id).clone(), None, Vec::new(), trainable);
        if trainable {
            self.param_leaves.insert(id, v.0);
        }
        v
    }

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor {
        &self.nodes[v.0].value
    }

    fn detach(&mut self, v: &Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.push(value, None, Vec::new(), false)
    }

    fn apply(&mut self, op: Op, inputs: &[&Var]) -> Result<Var> {
        let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let out = forward(op, &values)?;
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push(out, Some(op), inputs.iter().map(|v| v.0).collect(), needs_grad))
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: HashMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn var(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn params(&self) -> impl Iterator<Item = (&ParamId, &Tensor)> {
        self.params.iter()
    }

    /// Whether any gradient reached a parameter of `group`.
    pub fn touches(&self, group: Group) -> bool {
        self.params.keys().any(|id| id.group == group)
    }
}
