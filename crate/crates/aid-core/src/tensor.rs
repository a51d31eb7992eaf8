//! Minimal dense-tensor substrate for the detector.
//!
//! Two layouts are used. [`Tensor`] is a per-image `[c, h, w]` array and is
//! what the public loss/weighting APIs consume. [`Feat`] is a batched
//! channel-major `[c, n, h, w]` array used inside the network so a whole
//! batch goes through one GEMM per layer (convolutions are lowered with
//! im2col). Everything is `f64`; gradient checks against central finite
//! differences rely on that.

use serde::{Deserialize, Serialize};

/// Per-image `[c, h, w]` tensor, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Tensor { c, h, w, data: vec![0.0; c * h * w] }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), c * h * w, "tensor data length mismatch");
        Tensor { c, h, w, data }
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.h + y) * self.w + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let i = self.idx(c, y, x);
        self.data[i] = v;
    }

    /// Channel plane as a slice.
    pub fn channel(&self, c: usize) -> &[f64] {
        &self.data[c * self.h * self.w..(c + 1) * self.h * self.w]
    }

    pub fn spatial(&self) -> usize {
        self.h * self.w
    }
}

/// Batched channel-major `[c, n, h, w]` activation.
#[derive(Debug, Clone)]
pub struct Feat {
    pub c: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Feat {
    pub fn zeros(c: usize, n: usize, h: usize, w: usize) -> Self {
        Feat { c, n, h, w, data: vec![0.0; c * n * h * w] }
    }

    #[inline]
    pub fn idx(&self, c: usize, n: usize, y: usize, x: usize) -> usize {
        ((c * self.n + n) * self.h + y) * self.w + x
    }

    /// Pack per-image `[c,h,w]` tensors (all identically shaped) into a batch.
    pub fn from_images(images: &[Tensor]) -> Self {
        let refs: Vec<&Tensor> = images.iter().collect();
        Feat::from_image_refs(&refs)
    }

    pub fn from_image_refs(images: &[&Tensor]) -> Self {
        assert!(!images.is_empty());
        let (c, h, w) = (images[0].c, images[0].h, images[0].w);
        let n = images.len();
        let mut out = Feat::zeros(c, n, h, w);
        for (ni, img) in images.iter().enumerate() {
            assert!(img.c == c && img.h == h && img.w == w, "batch shape mismatch");
            for ci in 0..c {
                let src = img.channel(ci);
                let base = out.idx(ci, ni, 0, 0);
                out.data[base..base + h * w].copy_from_slice(src);
            }
        }
        out
    }

    /// Extract image `n` as a standalone `[c,h,w]` tensor.
    pub fn image(&self, n: usize) -> Tensor {
        let mut t = Tensor::zeros(self.c, self.h, self.w);
        let hw = self.h * self.w;
        for ci in 0..self.c {
            let base = self.idx(ci, n, 0, 0);
            t.data[ci * hw..(ci + 1) * hw].copy_from_slice(&self.data[base..base + hw]);
        }
        t
    }

    /// Accumulate a per-image gradient back into the batched buffer.
    pub fn add_image(&mut self, n: usize, img: &Tensor) {
        assert!(img.c == self.c && img.h == self.h && img.w == self.w);
        let hw = self.h * self.w;
        for ci in 0..self.c {
            let base = self.idx(ci, n, 0, 0);
            for (dst, src) in self.data[base..base + hw].iter_mut().zip(&img.data[ci * hw..(ci + 1) * hw]) {
                *dst += src;
            }
        }
    }

    pub fn relu(&self) -> Feat {
        let mut out = self.clone();
        for v in &mut out.data {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        out
    }

    /// d(relu)/dx given the relu *output*: passes gradient where y > 0.
    pub fn relu_backward(output: &Feat, dy: &Feat) -> Feat {
        let mut dx = dy.clone();
        for (g, &y) in dx.data.iter_mut().zip(&output.data) {
            if y <= 0.0 {
                *g = 0.0;
            }
        }
        dx
    }

    pub fn add_inplace(&mut self, other: &Feat) {
        assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Nearest-neighbour upsample by an integer ratio.
    pub fn upsample_nearest(&self, ratio: usize) -> Feat {
        let mut out = Feat::zeros(self.c, self.n, self.h * ratio, self.w * ratio);
        for c in 0..self.c {
            for n in 0..self.n {
                for y in 0..out.h {
                    let sy = y / ratio;
                    for x in 0..out.w {
                        let v = self.data[self.idx(c, n, sy, x / ratio)];
                        let i = out.idx(c, n, y, x);
                        out.data[i] = v;
                    }
                }
            }
        }
        out
    }

    /// Adjoint of nearest upsampling: sums each ratio×ratio block.
    pub fn downsample_sum(&self, ratio: usize) -> Feat {
        assert!(self.h % ratio == 0 && self.w % ratio == 0);
        let mut out = Feat::zeros(self.c, self.n, self.h / ratio, self.w / ratio);
        for c in 0..self.c {
            for n in 0..self.n {
                for y in 0..self.h {
                    for x in 0..self.w {
                        let i = out.idx(c, n, y / ratio, x / ratio);
                        out.data[i] += self.data[self.idx(c, n, y, x)];
                    }
                }
            }
        }
        out
    }
}

/// Row-major f64 GEMM: `c[m,n] = a[m,k] · b[k,n]` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
) {
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
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// 2-D convolution layer. Weight layout `[c_out, c_in, k, k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Gradient buffers matching a [`Conv2d`].
#[derive(Debug, Clone)]
pub struct ConvGrad {
    pub dw: Vec<f64>,
    pub db: Vec<f64>,
}

impl Conv2d {
    pub fn new(c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize) -> Self {
        Conv2d {
            c_in,
            c_out,
            k,
            stride,
            pad,
            weight: vec![0.0; c_out * c_in * k * k],
            bias: vec![0.0; c_out],
        }
    }

    pub fn zero_grad(&self) -> ConvGrad {
        ConvGrad { dw: vec![0.0; self.weight.len()], db: vec![0.0; self.bias.len()] }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn im2col(&self, x: &Feat, h_out: usize, w_out: usize) -> Vec<f64> {
        let kdim = self.c_in * self.k * self.k;
        let mcols = x.n * h_out * w_out;
        let mut col = vec![0.0; kdim * mcols];
        for ci in 0..self.c_in {
            for dy in 0..self.k {
                for dx in 0..self.k {
                    let row = (ci * self.k + dy) * self.k + dx;
                    let dst = &mut col[row * mcols..(row + 1) * mcols];
                    for n in 0..x.n {
                        for y in 0..h_out {
                            let sy = (y * self.stride + dy) as isize - self.pad as isize;
                            if sy < 0 || sy >= x.h as isize {
                                continue;
                            }
                            let src_base = x.idx(ci, n, sy as usize, 0);
                            let dst_base = (n * h_out + y) * w_out;
                            for xx in 0..w_out {
                                let sx = (xx * self.stride + dx) as isize - self.pad as isize;
                                if sx >= 0 && sx < x.w as isize {
                                    dst[dst_base + xx] = x.data[src_base + sx as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        col
    }

    pub fn forward(&self, x: &Feat) -> Feat {
        assert_eq!(x.c, self.c_in, "conv input channel mismatch");
        let (h_out, w_out) = self.out_size(x.h, x.w);
        let mcols = x.n * h_out * w_out;
        let mut out = Feat::zeros(self.c_out, x.n, h_out, w_out);
        if self.is_pointwise() {
            gemm(
                self.c_out,
                self.c_in,
                mcols,
                &self.weight,
                self.c_in as isize,
                1,
                &x.data,
                mcols as isize,
                1,
                &mut out.data,
            );
        } else {
            let kdim = self.c_in * self.k * self.k;
            let col = self.im2col(x, h_out, w_out);
            gemm(
                self.c_out,
                kdim,
                mcols,
                &self.weight,
                kdim as isize,
                1,
                &col,
                mcols as isize,
                1,
                &mut out.data,
            );
        }
        for co in 0..self.c_out {
            let b = self.bias[co];
            for v in &mut out.data[co * mcols..(co + 1) * mcols] {
                *v += b;
            }
        }
        out
    }

    /// Backward pass: accumulates into `grad` and returns dL/dx.
    pub fn backward(&self, x: &Feat, dy: &Feat, grad: &mut ConvGrad) -> Feat {
        let (h_out, w_out) = self.out_size(x.h, x.w);
        assert!(dy.c == self.c_out && dy.h == h_out && dy.w == w_out && dy.n == x.n);
        let mcols = x.n * h_out * w_out;
        let kdim = self.c_in * self.k * self.k;

        for co in 0..self.c_out {
            let mut s = 0.0;
            for &g in &dy.data[co * mcols..(co + 1) * mcols] {
                s += g;
            }
            grad.db[co] += s;
        }

        let mut dw = vec![0.0; self.weight.len()];
        let mut dx = Feat::zeros(self.c_in, x.n, x.h, x.w);
        if self.is_pointwise() {
            // dW = dY · xᵀ
            gemm(
                self.c_out,
                mcols,
                kdim,
                &dy.data,
                mcols as isize,
                1,
                &x.data,
                1,
                mcols as isize,
                &mut dw,
            );
            // dX = Wᵀ · dY
            gemm(
                self.c_in,
                self.c_out,
                mcols,
                &self.weight,
                1,
                self.c_in as isize,
                &dy.data,
                mcols as isize,
                1,
                &mut dx.data,
            );
        } else {
            let col = self.im2col(x, h_out, w_out);
            gemm(
                self.c_out,
                mcols,
                kdim,
                &dy.data,
                mcols as isize,
                1,
                &col,
                1,
                mcols as isize,
                &mut dw,
            );
            let mut dcol = vec![0.0; kdim * mcols];
            gemm(
                kdim,
                self.c_out,
                mcols,
                &self.weight,
                1,
                kdim as isize,
                &dy.data,
                mcols as isize,
                1,
                &mut dcol,
            );
            self.col2im_add(&dcol, &mut dx, h_out, w_out);
        }
        for (g, d) in grad.dw.iter_mut().zip(&dw) {
            *g += d;
        }
        dx
    }

    fn col2im_add(&self, dcol: &[f64], dx: &mut Feat, h_out: usize, w_out: usize) {
        let mcols = dx.n * h_out * w_out;
        for ci in 0..self.c_in {
            for dy in 0..self.k {
                for dxk in 0..self.k {
                    let row = (ci * self.k + dy) * self.k + dxk;
                    let src = &dcol[row * mcols..(row + 1) * mcols];
                    for n in 0..dx.n {
                        for y in 0..h_out {
                            let sy = (y * self.stride + dy) as isize - self.pad as isize;
                            if sy < 0 || sy >= dx.h as isize {
                                continue;
                            }
                            let dst_base = dx.idx(ci, n, sy as usize, 0);
                            let src_base = (n * h_out + y) * w_out;
                            for xx in 0..w_out {
                                let sx = (xx * self.stride + dxk) as isize - self.pad as isize;
                                if sx >= 0 && sx < dx.w as isize {
                                    dx.data[dst_base + sx as usize] += src[src_base + xx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Numerically stable scalar helpers shared by the loss functions.
pub mod math {
    #[inline]
    pub fn sigmoid(x: f64) -> f64 {
        if x >= 0.0 {
            1.0 / (1.0 + (-x).exp())
        } else {
            let e = x.exp();
            e / (1.0 + e)
        }
    }

    #[inline]
    pub fn softplus(x: f64) -> f64 {
        if x > 35.0 {
            x
        } else if x < -35.0 {
            x.exp()
        } else {
            x.exp().ln_1p()
        }
    }

    /// ln(sigmoid(x)) without overflow.
    #[inline]
    pub fn ln_sigmoid(x: f64) -> f64 {
        -softplus(-x)
    }

    /// Softmax of `xs / temperature` in place.
    pub fn softmax_scaled(xs: &mut [f64], temperature: f64) {
        let mut max = f64::NEG_INFINITY;
        for &v in xs.iter() {
            let s = v / temperature;
            if s > max {
                max = s;
            }
        }
        let mut sum = 0.0;
        for v in xs.iter_mut() {
            *v = (*v / temperature - max).exp();
            sum += *v;
        }
        for v in xs.iter_mut() {
            *v /= sum;
        }
    }
}
