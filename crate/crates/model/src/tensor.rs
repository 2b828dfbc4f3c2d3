//! Height × width × channel tensors and the spatial operators of the
//! network, each with its adjoint.

use nowcast_core::geogrid::GeoGrid;

use crate::error::{ModelError, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Tensor { h, w, c, data: vec![T::zero(); h * w * c] }
    }

    pub fn from_vec(h: usize, w: usize, c: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != h * w * c {
            return Err(ModelError::shape("tensor", format!("{} values for {h}×{w}×{c}", data.len())));
        }
        Ok(Tensor { h, w, c, data })
    }

    pub fn from_grid(g: &GeoGrid) -> Self {
        Tensor {
            h: g.height(),
            w: g.width(),
            c: g.channels(),
            data: g.data().iter().map(|&v| T::of(v as f64)).collect(),
        }
    }

    pub fn pixels(&self) -> usize {
        self.h * self.w
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.c)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor { h: self.h, w: self.w, c: self.c, data: self.data.iter().map(|v| U::of(v.f64())).collect() }
    }

    pub fn add_assign(&mut self, o: &Tensor<T>) {
        debug_assert_eq!(self.shape(), o.shape());
        for (a, &b) in self.data.iter_mut().zip(&o.data) {
            *a = *a + b;
        }
    }
}

/// Rows of `k·k·c` patch values around each pixel, zero outside the tensor.
pub fn im2col<T: Scalar>(x: &Tensor<T>, k: usize, cols: &mut Vec<T>) {
    let p = (k / 2) as isize;
    let kk = k * k * x.c;
    cols.clear();
    cols.resize(x.pixels() * kk, T::zero());
    for y in 0..x.h {
        for xx in 0..x.w {
            let row = &mut cols[(y * x.w + xx) * kk..(y * x.w + xx + 1) * kk];
            for ky in 0..k {
                let sy = y as isize + ky as isize - p;
                if sy < 0 || sy >= x.h as isize {
                    continue;
                }
                for kx in 0..k {
                    let sx = xx as isize + kx as isize - p;
                    if sx < 0 || sx >= x.w as isize {
                        continue;
                    }
                    let src = (sy as usize * x.w + sx as usize) * x.c;
                    let dst = (ky * k + kx) * x.c;
                    row[dst..dst + x.c].copy_from_slice(&x.data[src..src + x.c]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto pixels.
pub fn col2im<T: Scalar>(dcols: &[T], k: usize, h: usize, w: usize, c: usize) -> Tensor<T> {
    let p = (k / 2) as isize;
    let kk = k * k * c;
    let mut dx = Tensor::zeros(h, w, c);
    for y in 0..h {
        for xx in 0..w {
            let row = &dcols[(y * w + xx) * kk..(y * w + xx + 1) * kk];
            for ky in 0..k {
                let sy = y as isize + ky as isize - p;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let sx = xx as isize + kx as isize - p;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let dst = (sy as usize * w + sx as usize) * c;
                    let src = (ky * k + kx) * c;
                    for ch in 0..c {
                        dx.data[dst + ch] = dx.data[dst + ch] + row[src + ch];
                    }
                }
            }
        }
    }
    dx
}

/// "Same" convolution with an odd square kernel laid out as
/// `[ky][kx][cin][cout]`. Returns the output and the patch matrix.
pub fn conv_forward<T: Scalar>(x: &Tensor<T>, k: usize, cout: usize, weight: &[T], bias: &[T]) -> (Tensor<T>, Vec<T>) {
    let kk = k * k * x.c;
    debug_assert_eq!(weight.len(), kk * cout);
    debug_assert_eq!(bias.len(), cout);
    let mut cols = Vec::new();
    im2col(x, k, &mut cols);
    let n = x.pixels();
    let mut out = Vec::with_capacity(n * cout);
    for _ in 0..n {
        out.extend_from_slice(bias);
    }
    T::gemm(n, kk, cout, &cols, kk as isize, 1, weight, cout as isize, 1, T::one(), &mut out);
    (Tensor { h: x.h, w: x.w, c: cout, data: out }, cols)
}

/// Gradients of [`conv_forward`]: accumulates into `dweight`/`dbias` and
/// returns the input gradient.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward<T: Scalar>(
    dout: &Tensor<T>,
    cols: &[T],
    k: usize,
    cin: usize,
    weight: &[T],
    dweight: &mut [T],
    dbias: &mut [T],
    need_input_grad: bool,
) -> Option<Tensor<T>> {
    let n = dout.pixels();
    let cout = dout.c;
    let kk = k * k * cin;
    // dW += colsᵀ · dout
    T::gemm(kk, n, cout, cols, 1, kk as isize, &dout.data, cout as isize, 1, T::one(), dweight);
    for px in dout.data.chunks_exact(cout) {
        for (b, &g) in dbias.iter_mut().zip(px) {
            *b = *b + g;
        }
    }
    if !need_input_grad {
        return None;
    }
    // dcols = dout · Wᵀ
    let mut dcols = vec![T::zero(); n * kk];
    T::gemm(n, cout, kk, &dout.data, cout as isize, 1, weight, 1, cout as isize, T::zero(), &mut dcols);
    Some(col2im(&dcols, k, dout.h, dout.w, cin))
}

/// Folds each `b×b` block into channels, ordered `(dy·b + dx)·C + c`.
pub fn space_to_depth<T: Scalar>(x: &Tensor<T>, b: usize) -> Tensor<T> {
    let (h, w, c) = (x.h / b, x.w / b, x.c * b * b);
    let mut out = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for xx in 0..w {
            for dy in 0..b {
                for dx in 0..b {
                    let src = ((y * b + dy) * x.w + xx * b + dx) * x.c;
                    out.extend_from_slice(&x.data[src..src + x.c]);
                }
            }
        }
    }
    Tensor { h, w, c, data: out }
}

/// Inverse of [`space_to_depth`].
pub fn depth_to_space<T: Scalar>(x: &Tensor<T>, b: usize) -> Tensor<T> {
    let c = x.c / (b * b);
    let (h, w) = (x.h * b, x.w * b);
    let mut out = vec![T::zero(); h * w * c];
    for y in 0..x.h {
        for xx in 0..x.w {
            let px = &x.data[(y * x.w + xx) * x.c..(y * x.w + xx + 1) * x.c];
            for dy in 0..b {
                for dx in 0..b {
                    let dst = ((y * b + dy) * w + xx * b + dx) * c;
                    let src = (dy * b + dx) * c;
                    out[dst..dst + c].copy_from_slice(&px[src..src + c]);
                }
            }
        }
    }
    Tensor { h, w, c, data: out }
}

/// Nearest-neighbour upsampling by repetition.
pub fn upsample<T: Scalar>(x: &Tensor<T>, f: usize) -> Tensor<T> {
    if f == 1 {
        return x.clone();
    }
    let (h, w) = (x.h * f, x.w * f);
    let mut out = Vec::with_capacity(h * w * x.c);
    for y in 0..h {
        for xx in 0..w {
            let src = ((y / f) * x.w + xx / f) * x.c;
            out.extend_from_slice(&x.data[src..src + x.c]);
        }
    }
    Tensor { h, w, c: x.c, data: out }
}

/// Adjoint of [`upsample`]: sums each `f×f` block.
pub fn upsample_backward<T: Scalar>(d: &Tensor<T>, f: usize) -> Tensor<T> {
    if f == 1 {
        return d.clone();
    }
    let mut out = Tensor::zeros(d.h / f, d.w / f, d.c);
    for y in 0..d.h {
        for xx in 0..d.w {
            let dst = ((y / f) * out.w + xx / f) * d.c;
            let src = (y * d.w + xx) * d.c;
            for ch in 0..d.c {
                out.data[dst + ch] = out.data[dst + ch] + d.data[src + ch];
            }
        }
    }
    out
}

/// Removes `m` pixels from every side.
pub fn crop<T: Scalar>(x: &Tensor<T>, m: usize) -> Tensor<T> {
    if m == 0 {
        return x.clone();
    }
    let (h, w) = (x.h - 2 * m, x.w - 2 * m);
    let mut out = Vec::with_capacity(h * w * x.c);
    for y in 0..h {
        let src = ((y + m) * x.w + m) * x.c;
        out.extend_from_slice(&x.data[src..src + w * x.c]);
    }
    Tensor { h, w, c: x.c, data: out }
}

/// Adjoint of [`crop`]: embeds the gradient in a zero border.
pub fn crop_backward<T: Scalar>(d: &Tensor<T>, m: usize) -> Tensor<T> {
    if m == 0 {
        return d.clone();
    }
    let mut out = Tensor::zeros(d.h + 2 * m, d.w + 2 * m, d.c);
    for y in 0..d.h {
        let dst = ((y + m) * out.w + m) * d.c;
        out.data[dst..dst + d.w * d.c].copy_from_slice(&d.data[y * d.w * d.c..(y + 1) * d.w * d.c]);
    }
    out
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    Tensor { h: x.h, w: x.w, c: x.c, data: x.data.iter().map(|&v| v.max(T::zero())).collect() }
}

/// Passes gradient where the activation output was positive.
pub fn relu_backward<T: Scalar>(d: &mut Tensor<T>, out: &Tensor<T>) {
    for (g, &o) in d.data.iter_mut().zip(&out.data) {
        if o <= T::zero() {
            *g = T::zero();
        }
    }
}

/// Per-pixel softmax over channels.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let mut out = logits.clone();
    for px in out.data.chunks_exact_mut(logits.c) {
        let m = px.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut s = T::zero();
        for v in px.iter_mut() {
            *v = (*v - m).exp();
            s = s + *v;
        }
        for v in px.iter_mut() {
            *v = *v / s;
        }
    }
    out
}
