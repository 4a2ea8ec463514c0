//! Forward and backward kernels shared by the tape and by tape-free callers.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Resolved extents of a 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("expected rank-4 input and kernel, got {input:?} and {kernel:?}"),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be at least 1"));
        }
        let (batch, cin, h, w) = (input[0], input[1], input[2], input[3]);
        let (cout, kcin, kh, kw) = (kernel[0], kernel[1], kernel[2], kernel[3]);
        if kcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!("axis 1: input has {cin} channels, kernel expects {kcin}"),
            ));
        }
        let (ph, pw) = (h + 2 * padding, w + 2 * padding);
        if kh > ph || kw > pw || kh == 0 || kw == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("axes 2/3: kernel {kh}x{kw} does not fit padded input {ph}x{pw}"),
            ));
        }
        Ok(Self {
            batch,
            in_channels: cin,
            height: h,
            width: w,
            out_channels: cout,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            out_h: (ph - kh) / stride + 1,
            out_w: (pw - kw) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    fn out_len(&self) -> usize {
        self.out_channels * self.out_plane()
    }

    /// Visit every (patch row, output cell, input offset) triple inside the image.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let plane = self.out_plane();
        for c in 0..self.in_channels {
            for ky in 0..self.kernel_h {
                for kx in 0..self.kernel_w {
                    let row = (c * self.kernel_h + ky) * self.kernel_w + kx;
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        for ox in 0..self.out_w {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix >= self.width as isize {
                                continue;
                            }
                            let src = (c * self.height + iy as usize) * self.width + ix as usize;
                            f(row, row * plane + oy * self.out_w + ox, src);
                        }
                    }
                }
            }
        }
    }

    fn im2col<T: Real>(&self, image: &[T], cols: &mut [T]) {
        cols.iter_mut().for_each(|v| *v = T::zero());
        self.for_each_tap(|_, dst, src| cols[dst] = image[src]);
    }

    fn col2im<T: Real>(&self, cols: &[T], image_grad: &mut [T]) {
        self.for_each_tap(|_, dst, src| image_grad[src] += cols[dst]);
    }
}

pub fn conv2d_forward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<T>, ConvGeometry)> {
    let g = ConvGeometry::new(input.shape(), kernel.shape(), stride, padding)?;
    let (plen, plane) = (g.patch_len(), g.out_plane());
    let mut out = vec![T::zero(); g.batch * g.out_len()];
    let mut cols = vec![T::zero(); plen * plane];
    for b in 0..g.batch {
        g.im2col(&input.data()[b * g.in_len()..(b + 1) * g.in_len()], &mut cols);
        T::gemm(
            g.out_channels,
            plen,
            plane,
            kernel.data(),
            (plen as isize, 1),
            &cols,
            (plane as isize, 1),
            T::zero(),
            &mut out[b * g.out_len()..(b + 1) * g.out_len()],
        );
    }
    let t = Tensor::new([g.batch, g.out_channels, g.out_h, g.out_w], out)?;
    Ok((t, g))
}

/// Gradients of a cross-correlation with respect to its input and kernel.
pub fn conv2d_backward<T: Real>(
    g: &ConvGeometry,
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    need_input: bool,
    need_kernel: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let (plen, plane) = (g.patch_len(), g.out_plane());
    let mut cols = vec![T::zero(); plen * plane];
    let mut dcols = vec![T::zero(); plen * plane];
    let mut dinput = need_input.then(|| vec![T::zero(); g.batch * g.in_len()]);
    let mut dkernel = need_kernel.then(|| vec![T::zero(); kernel.len()]);
    for b in 0..g.batch {
        let gout = &grad_out.data()[b * g.out_len()..(b + 1) * g.out_len()];
        if let Some(dk) = dkernel.as_mut() {
            g.im2col(&input.data()[b * g.in_len()..(b + 1) * g.in_len()], &mut cols);
            // dK += dOut * cols^T
            T::gemm(
                g.out_channels,
                plane,
                plen,
                gout,
                (plane as isize, 1),
                &cols,
                (1, plane as isize),
                T::one(),
                dk,
            );
        }
        if let Some(dx) = dinput.as_mut() {
            // dcols = K^T * dOut
            T::gemm(
                plen,
                g.out_channels,
                plane,
                kernel.data(),
                (1, plen as isize),
                gout,
                (plane as isize, 1),
                T::zero(),
                &mut dcols,
            );
            g.col2im(&dcols, &mut dx[b * g.in_len()..(b + 1) * g.in_len()]);
        }
    }
    let shape_in = [g.batch, g.in_channels, g.height, g.width];
    (
        dinput.map(|d| Tensor::new(shape_in, d).expect("input grad shape")),
        dkernel.map(|d| Tensor::new(kernel.shape(), d).expect("kernel grad shape")),
    )
}

/// Non-overlapping max pooling; returns the output and the flat source index
/// of every maximum (first occurrence wins ties).
pub fn max_pool2d_forward<T: Real>(x: &Tensor<T>, size: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    let s = x.shape();
    if s.len() != 4 || size == 0 || s[2] < size || s[3] < size {
        return Err(Error::shape(
            "max_pool2d",
            format!("cannot pool {s:?} with window {size}"),
        ));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (oh, ow) = (h / size, w / size);
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut arg = Vec::with_capacity(b * c * oh * ow);
    let d = x.data();
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * size * w + ox * size;
                for dy in 0..size {
                    for dx in 0..size {
                        let idx = base + (oy * size + dy) * w + ox * size + dx;
                        if d[idx] > d[best] {
                            best = idx;
                        }
                    }
                }
                out.push(d[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new([b, c, oh, ow], out)?, arg))
}

/// Spatial mean over the trailing two axes of a `[B, N, P, Q]` tensor,
/// accumulated in `f64`.
pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 4 || s[2] == 0 || s[3] == 0 {
        return Err(Error::shape(
            "global_avg_pool",
            format!("expected [B,N,P,Q] with P,Q >= 1, got {s:?}"),
        ));
    }
    let cells = s[2] * s[3];
    let data = x
        .data()
        .chunks_exact(cells)
        .map(|plane| T::of(plane.iter().map(|v| v.f64()).sum::<f64>() / cells as f64))
        .collect();
    Tensor::new([s[0], s[1]], data)
}

/// Affine map `x · W + b` for `x: [B, N]`, `W: [N, C]`, `b: [C]`, accumulated in `f64`.
pub fn fully_connected<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (xs, ws, bs) = (x.shape(), weight.shape(), bias.shape());
    if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[0] || ws[1] != bs[0] {
        return Err(Error::shape(
            "fully_connected",
            format!("input {xs:?}, weight {ws:?}, bias {bs:?}"),
        ));
    }
    let (batch, n, c) = (xs[0], ws[0], ws[1]);
    let (xd, wd, bd) = (x.data(), weight.data(), bias.data());
    let mut out = Vec::with_capacity(batch * c);
    for row in 0..batch {
        for k in 0..c {
            let mut acc = bd[k].f64();
            for i in 0..n {
                acc += xd[row * n + i].f64() * wd[i * c + k].f64();
            }
            out.push(T::of(acc));
        }
    }
    Tensor::new([batch, c], out)
}

/// Row-wise softmax over the last axis of a `[B, C]` tensor, with the row
/// maximum subtracted before exponentiation.
pub fn softmax_rows<T: Real>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let s = logits.shape();
    if s.len() != 2 || s[1] == 0 {
        return Err(Error::shape("softmax", format!("expected [B,C], got {s:?}")));
    }
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks_exact(s[1]) {
        let max = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v.f64() - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| T::of(e / total)));
    }
    Tensor::new(s, out)
}

/// Log-softmax of one row, computed with log-sum-exp.
pub fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

pub fn sigmoid_scalar(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

pub fn sigmoid<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| T::of(sigmoid_scalar(v.f64())))
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax<T: Real>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
