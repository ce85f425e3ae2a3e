//! Layer kernels with explicit backward passes. Activations are NHWC internally.

use crate::model::params::{Gradients, ParameterSet};
use crate::tensor::{Scalar, Tensor};

/// Whether batch normalization uses batch statistics (and records them) or running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One node of a network graph. Parameter fields are indices into a [`ParameterSet`].
#[derive(Debug, Clone)]
pub enum Layer {
    Conv2d {
        weight: usize,
        bias: Option<usize>,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
    },
    BatchNorm {
        gamma: usize,
        beta: usize,
        running_mean: usize,
        running_var: usize,
        channels: usize,
    },
    Relu,
    Relu6,
    Flatten,
    GlobalAvgPool,
    Linear {
        weight: usize,
        bias: usize,
        in_features: usize,
        out_features: usize,
    },
    /// `body(x) + shortcut(x)`; an empty shortcut is the identity.
    Residual {
        body: Vec<Layer>,
        shortcut: Vec<Layer>,
    },
}

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

pub(crate) enum Saved<T> {
    Input(Tensor<T>),
    Output(Tensor<T>),
    Norm {
        xhat: Tensor<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Shape(Vec<usize>),
    Residual {
        body: Vec<Saved<T>>,
        shortcut: Vec<Saved<T>>,
    },
}

/// Batch statistics observed by a train-mode batch norm, to be folded into running buffers.
#[derive(Debug, Clone)]
pub struct BnUpdate<T> {
    pub running_mean: usize,
    pub running_var: usize,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> BnUpdate<T> {
    pub fn apply(&self, params: &mut ParameterSet<T>) {
        let m = T::lit(BN_MOMENTUM);
        let keep = T::one() - m;
        for (r, &b) in params
            .tensor_mut(self.running_mean)
            .data_mut()
            .iter_mut()
            .zip(&self.mean)
        {
            *r = keep * *r + m * b;
        }
        for (r, &b) in params
            .tensor_mut(self.running_var)
            .data_mut()
            .iter_mut()
            .zip(&self.var)
        {
            *r = keep * *r + m * b;
        }
    }
}

struct ConvGeometry {
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    ho: usize,
    wo: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeometry {
    fn new(shape: &[usize], kernel: usize, stride: usize, padding: usize) -> Self {
        let (n, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
        ConvGeometry {
            n,
            h,
            w,
            c,
            ho: (h + 2 * padding - kernel) / stride + 1,
            wo: (w + 2 * padding - kernel) / stride + 1,
            kernel,
            stride,
            padding,
        }
    }

    fn rows(&self) -> usize {
        self.n * self.ho * self.wo
    }

    /// Calls `f(row, col_offset, input_offset)` for every in-bounds kernel tap of `group`.
    fn for_each_tap(&self, group_channels: usize, mut f: impl FnMut(usize, usize, usize)) {
        let k = self.kernel;
        let mut row = 0;
        for n in 0..self.n {
            for oy in 0..self.ho {
                for ox in 0..self.wo {
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let src = ((n * self.h + iy as usize) * self.w + ix as usize) * self.c;
                            f(row, (ky * k + kx) * group_channels, src);
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    fn im2col<T: Scalar>(&self, x: &[T], group: usize, group_channels: usize) -> Vec<T> {
        let width = self.kernel * self.kernel * group_channels;
        let mut col = vec![T::zero(); self.rows() * width];
        let base = group * group_channels;
        self.for_each_tap(group_channels, |row, off, src| {
            let dst = row * width + off;
            col[dst..dst + group_channels]
                .copy_from_slice(&x[src + base..src + base + group_channels]);
        });
        col
    }

    fn col2im_add<T: Scalar>(&self, col: &[T], dx: &mut [T], group: usize, group_channels: usize) {
        let width = self.kernel * self.kernel * group_channels;
        let base = group * group_channels;
        self.for_each_tap(group_channels, |row, off, src| {
            let from = row * width + off;
            for (d, &v) in dx[src + base..src + base + group_channels]
                .iter_mut()
                .zip(&col[from..from + group_channels])
            {
                *d += v;
            }
        });
    }
}

pub(crate) fn forward<T: Scalar>(
    layers: &[Layer],
    params: &ParameterSet<T>,
    mut x: Tensor<T>,
    mode: Mode,
    saved: &mut Vec<Saved<T>>,
    bn_updates: &mut Vec<BnUpdate<T>>,
) -> Tensor<T> {
    for layer in layers {
        x = forward_one(layer, params, x, mode, saved, bn_updates);
    }
    x
}

fn forward_one<T: Scalar>(
    layer: &Layer,
    params: &ParameterSet<T>,
    x: Tensor<T>,
    mode: Mode,
    saved: &mut Vec<Saved<T>>,
    bn_updates: &mut Vec<BnUpdate<T>>,
) -> Tensor<T> {
    match *layer {
        Layer::Conv2d {
            weight,
            bias,
            out_channels,
            kernel,
            stride,
            padding,
            groups,
            ..
        } => {
            let g = ConvGeometry::new(x.shape(), kernel, stride, padding);
            let cg = g.c / groups;
            let og = out_channels / groups;
            let width = kernel * kernel * cg;
            let w = params.tensor(weight).data();
            let mut out = vec![T::zero(); g.rows() * out_channels];
            for gi in 0..groups {
                let col = g.im2col(x.data(), gi, cg);
                T::gemm(
                    g.rows(),
                    width,
                    og,
                    T::one(),
                    &col,
                    (width as isize, 1),
                    &w[gi * og * width..],
                    (1, width as isize),
                    T::zero(),
                    &mut out[gi * og..],
                    (out_channels as isize, 1),
                );
            }
            if let Some(b) = bias {
                let b = params.tensor(b).data();
                for row in out.chunks_exact_mut(out_channels) {
                    for (o, &bv) in row.iter_mut().zip(b) {
                        *o += bv;
                    }
                }
            }
            let shape = [g.n, g.ho, g.wo, out_channels];
            saved.push(Saved::Input(x));
            Tensor::from_vec(&shape, out).expect("conv output shape")
        }
        Layer::BatchNorm {
            gamma,
            beta,
            running_mean,
            running_var,
            channels,
        } => {
            let rows = x.len() / channels;
            let (mean, var, batch_stats) = match mode {
                Mode::Train => {
                    let mut mean = vec![T::zero(); channels];
                    let mut var = vec![T::zero(); channels];
                    for row in x.data().chunks_exact(channels) {
                        for (m, &v) in mean.iter_mut().zip(row) {
                            *m += v;
                        }
                    }
                    let inv_rows = T::one() / T::lit(rows as f64);
                    mean.iter_mut().for_each(|m| *m *= inv_rows);
                    for row in x.data().chunks_exact(channels) {
                        for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                            *s += (v - m) * (v - m);
                        }
                    }
                    let unbiased: Vec<T> = var
                        .iter()
                        .map(|&s| s / T::lit(rows.saturating_sub(1).max(1) as f64))
                        .collect();
                    var.iter_mut().for_each(|s| *s *= inv_rows);
                    bn_updates.push(BnUpdate {
                        running_mean,
                        running_var,
                        mean: mean.clone(),
                        var: unbiased,
                    });
                    (mean, var, true)
                }
                Mode::Eval => (
                    params.tensor(running_mean).data().to_vec(),
                    params.tensor(running_var).data().to_vec(),
                    false,
                ),
            };
            let inv_std: Vec<T> = var
                .iter()
                .map(|&v| T::one() / (v + T::lit(BN_EPS)).sqrt())
                .collect();
            let gm = params.tensor(gamma).data();
            let bt = params.tensor(beta).data();
            let mut xhat = x;
            let mut out = xhat.clone();
            for (hrow, orow) in xhat
                .data_mut()
                .chunks_exact_mut(channels)
                .zip(out.data_mut().chunks_exact_mut(channels))
            {
                for c in 0..channels {
                    let h = (hrow[c] - mean[c]) * inv_std[c];
                    hrow[c] = h;
                    orow[c] = gm[c] * h + bt[c];
                }
            }
            saved.push(Saved::Norm {
                xhat,
                inv_std,
                batch_stats,
            });
            out
        }
        Layer::Relu => {
            let out = x.map(|v| if v > T::zero() { v } else { T::zero() });
            saved.push(Saved::Output(out.clone()));
            out
        }
        Layer::Relu6 => {
            let six = T::lit(6.0);
            let out = x.map(|v| v.max(T::zero()).min(six));
            saved.push(Saved::Input(x));
            out
        }
        Layer::Flatten => {
            let shape = x.shape().to_vec();
            let n = x.rows();
            let f = x.row_len();
            saved.push(Saved::Shape(shape));
            x.reshape(&[n, f]).expect("flatten")
        }
        Layer::GlobalAvgPool => {
            let shape = x.shape().to_vec();
            let (n, c) = (shape[0], shape[3]);
            let hw = shape[1] * shape[2];
            let scale = T::one() / T::lit(hw as f64);
            let mut out = vec![T::zero(); n * c];
            for (ni, img) in x.data().chunks_exact(hw * c).enumerate() {
                let dst = &mut out[ni * c..(ni + 1) * c];
                for px in img.chunks_exact(c) {
                    for (d, &v) in dst.iter_mut().zip(px) {
                        *d += v;
                    }
                }
                dst.iter_mut().for_each(|d| *d *= scale);
            }
            saved.push(Saved::Shape(shape));
            Tensor::from_vec(&[n, c], out).expect("pool output")
        }
        Layer::Linear {
            weight,
            bias,
            in_features,
            out_features,
        } => {
            let n = x.rows();
            let w = params.tensor(weight).data();
            let b = params.tensor(bias).data();
            let mut out = Vec::with_capacity(n * out_features);
            for _ in 0..n {
                out.extend_from_slice(b);
            }
            T::gemm(
                n,
                in_features,
                out_features,
                T::one(),
                x.data(),
                (in_features as isize, 1),
                w,
                (1, in_features as isize),
                T::one(),
                &mut out,
                (out_features as isize, 1),
            );
            saved.push(Saved::Input(x));
            Tensor::from_vec(&[n, out_features], out).expect("linear output")
        }
        Layer::Residual {
            ref body,
            ref shortcut,
        } => {
            let mut body_saved = Vec::new();
            let mut sc_saved = Vec::new();
            let skip = if shortcut.is_empty() {
                x.clone()
            } else {
                forward(shortcut, params, x.clone(), mode, &mut sc_saved, bn_updates)
            };
            let mut out = forward(body, params, x, mode, &mut body_saved, bn_updates);
            for (o, &s) in out.data_mut().iter_mut().zip(skip.data()) {
                *o += s;
            }
            saved.push(Saved::Residual {
                body: body_saved,
                shortcut: sc_saved,
            });
            out
        }
    }
}

/// Back-propagates `grad` through `layers`. Parameter gradients are accumulated into
/// `grads` when given; the input gradient of the first layer is skipped unless
/// `need_input_grad` is set.
pub(crate) fn backward<T: Scalar>(
    layers: &[Layer],
    params: &ParameterSet<T>,
    saved: &[Saved<T>],
    mut grad: Tensor<T>,
    grads: &mut Option<&mut Gradients<T>>,
    need_input_grad: bool,
) -> Option<Tensor<T>> {
    for (i, (layer, s)) in layers.iter().zip(saved).enumerate().rev() {
        let want = i > 0 || need_input_grad;
        {
            let g = backward_one(layer, params, s, grad, grads, want)?;
            grad = g
        }
    }
    Some(grad)
}

fn backward_one<T: Scalar>(
    layer: &Layer,
    params: &ParameterSet<T>,
    saved: &Saved<T>,
    grad: Tensor<T>,
    grads: &mut Option<&mut Gradients<T>>,
    want_input_grad: bool,
) -> Option<Tensor<T>> {
    match (layer, saved) {
        (
            &Layer::Conv2d {
                weight,
                bias,
                out_channels,
                kernel,
                stride,
                padding,
                groups,
                ..
            },
            Saved::Input(x),
        ) => {
            let g = ConvGeometry::new(x.shape(), kernel, stride, padding);
            let cg = g.c / groups;
            let og = out_channels / groups;
            let width = kernel * kernel * cg;
            let w = params.tensor(weight).data();
            let gout = grad.data();
            if let Some(gs) = grads.as_deref_mut() {
                if let Some(b) = bias {
                    let db = gs.tensor_mut(b).data_mut();
                    for row in gout.chunks_exact(out_channels) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                }
            }
            let mut dx = if want_input_grad {
                Some(vec![T::zero(); x.len()])
            } else {
                None
            };
            for gi in 0..groups {
                if let Some(gs) = grads.as_deref_mut() {
                    let col = g.im2col(x.data(), gi, cg);
                    let dw = gs.tensor_mut(weight).data_mut();
                    T::gemm(
                        og,
                        g.rows(),
                        width,
                        T::one(),
                        &gout[gi * og..],
                        (1, out_channels as isize),
                        &col,
                        (width as isize, 1),
                        T::one(),
                        &mut dw[gi * og * width..],
                        (width as isize, 1),
                    );
                }
                if let Some(dx) = dx.as_mut() {
                    let mut dcol = vec![T::zero(); g.rows() * width];
                    T::gemm(
                        g.rows(),
                        og,
                        width,
                        T::one(),
                        &gout[gi * og..],
                        (out_channels as isize, 1),
                        &w[gi * og * width..],
                        (width as isize, 1),
                        T::zero(),
                        &mut dcol,
                        (width as isize, 1),
                    );
                    g.col2im_add(&dcol, dx, gi, cg);
                }
            }
            dx.map(|d| Tensor::from_vec(x.shape(), d).expect("conv input grad"))
        }
        (
            &Layer::BatchNorm {
                gamma,
                beta,
                channels,
                ..
            },
            Saved::Norm {
                xhat,
                inv_std,
                batch_stats,
            },
        ) => {
            let rows = xhat.len() / channels;
            let gm = params.tensor(gamma).data();
            let mut sum_dy = vec![T::zero(); channels];
            let mut sum_dy_xhat = vec![T::zero(); channels];
            for (gr, hr) in grad
                .data()
                .chunks_exact(channels)
                .zip(xhat.data().chunks_exact(channels))
            {
                for c in 0..channels {
                    sum_dy[c] += gr[c];
                    sum_dy_xhat[c] += gr[c] * hr[c];
                }
            }
            if let Some(gs) = grads.as_deref_mut() {
                for (d, &v) in gs.tensor_mut(gamma).data_mut().iter_mut().zip(&sum_dy_xhat) {
                    *d += v;
                }
                for (d, &v) in gs.tensor_mut(beta).data_mut().iter_mut().zip(&sum_dy) {
                    *d += v;
                }
            }
            if !want_input_grad {
                return None;
            }
            let mut dx = grad;
            let inv_m = T::one() / T::lit(rows as f64);
            for (dr, hr) in dx
                .data_mut()
                .chunks_exact_mut(channels)
                .zip(xhat.data().chunks_exact(channels))
            {
                for c in 0..channels {
                    let scale = gm[c] * inv_std[c];
                    dr[c] = if *batch_stats {
                        scale * (dr[c] - inv_m * sum_dy[c] - hr[c] * inv_m * sum_dy_xhat[c])
                    } else {
                        scale * dr[c]
                    };
                }
            }
            Some(dx)
        }
        (Layer::Relu, Saved::Output(out)) => {
            if !want_input_grad {
                return None;
            }
            let mut dx = grad;
            for (d, &o) in dx.data_mut().iter_mut().zip(out.data()) {
                if o <= T::zero() {
                    *d = T::zero();
                }
            }
            Some(dx)
        }
        (Layer::Relu6, Saved::Input(x)) => {
            if !want_input_grad {
                return None;
            }
            let six = T::lit(6.0);
            let mut dx = grad;
            for (d, &v) in dx.data_mut().iter_mut().zip(x.data()) {
                if v <= T::zero() || v >= six {
                    *d = T::zero();
                }
            }
            Some(dx)
        }
        (Layer::Flatten, Saved::Shape(shape)) => {
            if !want_input_grad {
                return None;
            }
            Some(grad.reshape(shape).expect("unflatten"))
        }
        (Layer::GlobalAvgPool, Saved::Shape(shape)) => {
            if !want_input_grad {
                return None;
            }
            let (c, hw) = (shape[3], shape[1] * shape[2]);
            let scale = T::one() / T::lit(hw as f64);
            let mut dx = Vec::with_capacity(shape.iter().product());
            for row in grad.data().chunks_exact(c) {
                for _ in 0..hw {
                    dx.extend(row.iter().map(|&v| v * scale));
                }
            }
            Some(Tensor::from_vec(shape, dx).expect("pool input grad"))
        }
        (
            &Layer::Linear {
                weight,
                bias,
                in_features,
                out_features,
            },
            Saved::Input(x),
        ) => {
            let n = x.rows();
            if let Some(gs) = grads.as_deref_mut() {
                let db = gs.tensor_mut(bias).data_mut();
                for row in grad.data().chunks_exact(out_features) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                T::gemm(
                    out_features,
                    n,
                    in_features,
                    T::one(),
                    grad.data(),
                    (1, out_features as isize),
                    x.data(),
                    (in_features as isize, 1),
                    T::one(),
                    gs.tensor_mut(weight).data_mut(),
                    (in_features as isize, 1),
                );
            }
            if !want_input_grad {
                return None;
            }
            let mut dx = vec![T::zero(); n * in_features];
            T::gemm(
                n,
                out_features,
                in_features,
                T::one(),
                grad.data(),
                (out_features as isize, 1),
                params.tensor(weight).data(),
                (in_features as isize, 1),
                T::zero(),
                &mut dx,
                (in_features as isize, 1),
            );
            Some(Tensor::from_vec(x.shape(), dx).expect("linear input grad"))
        }
        (
            Layer::Residual { body, shortcut },
            Saved::Residual {
                body: bs,
                shortcut: ss,
            },
        ) => {
            let through_body = backward(body, params, bs, grad.clone(), grads, want_input_grad);
            let through_skip = if shortcut.is_empty() {
                Some(grad)
            } else {
                backward(shortcut, params, ss, grad, grads, want_input_grad)
            };
            match (through_body, through_skip) {
                (Some(mut a), Some(b)) => {
                    for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
                        *x += y;
                    }
                    Some(a)
                }
                _ => None,
            }
        }
        _ => unreachable!("saved activation does not match layer kind"),
    }
}
