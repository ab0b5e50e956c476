//! Forward and adjoint kernels for the denoiser's building blocks, generic
//! over `f32` (training, inference) and `f64` (gradient checks).
//!
//! Feature maps are channels-last: value `(y, x, c)` lives at
//! `(y * w + x) * channels + c`. Convolutions lower to one GEMM via im2col.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

pub trait Scalar:
    Copy
    + Send
    + Sync
    + Default
    + Debug
    + PartialOrd
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;

    /// `c = a * b + beta * c` with arbitrary element strides.
    ///
    /// # Safety
    /// The pointers and strides must describe in-bounds `m x k`, `k x n` and
    /// `m x n` views, and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        exp_f32(self)
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Branch-free single-precision exp (range reduction by ln 2, degree-6
/// minimax polynomial) that the compiler can vectorize. Inputs are clamped so
/// the result stays finite.
#[inline]
fn exp_f32(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    const ROUND: f32 = 12_582_912.0; // 1.5 * 2^23
    let x = x.max(-87.0).min(88.0);
    // after adding ROUND the low mantissa bits hold round(x / ln 2)
    let shifted = x * LOG2E + ROUND;
    let n = shifted - ROUND;
    let ni = shifted.to_bits() as i32 - ROUND.to_bits() as i32;
    let r = x - n * LN2_HI - n * LN2_LO;
    let p = ((((1.987_569_1e-4 * r + 1.398_199_9e-3) * r + 8.333_452e-3) * r + 4.166_579_6e-2) * r
        + 1.666_666_5e-1)
        * r
        + 5e-1;
    let poly = p * r * r + r + 1.0;
    let scale = f32::from_bits(((ni + 127) as u32) << 23);
    poly * scale
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Row-major or transposed view of a dense buffer.
#[derive(Clone, Copy)]
pub(crate) enum Op {
    /// buffer holds the `rows x cols` matrix row-major
    N,
    /// buffer holds the transpose, i.e. a `cols x rows` row-major matrix
    T,
}

/// `c[m x n] = op(a)[m x k] * op(b)[k x n] + beta * c`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<S: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[S],
    op_a: Op,
    b: &[S],
    op_b: Op,
    beta: S,
    c: &mut [S],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs size");
    assert_eq!(b.len(), k * n, "gemm: rhs size");
    assert_eq!(c.len(), m * n, "gemm: output size");
    if m == 0 || n == 0 {
        return;
    }
    // degenerate shapes run far below peak through the blocked kernel
    if n == 1 || k == 1 {
        return gemm_thin(m, k, n, a, op_a, b, beta, c);
    }
    let (rsa, csa) = match op_a {
        Op::N => (k as isize, 1),
        Op::T => (1, m as isize),
    };
    let (rsb, csb) = match op_b {
        Op::N => (n as isize, 1),
        Op::T => (1, k as isize),
    };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        S::gemm_raw(
            m,
            k,
            n,
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
        )
    }
}

/// `n == 1` (matrix-vector) or `k == 1` (outer product). In both cases the
/// vector operands are contiguous whatever their transpose flag.
#[allow(clippy::too_many_arguments)]
fn gemm_thin<S: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[S],
    op_a: Op,
    b: &[S],
    beta: S,
    c: &mut [S],
) {
    if beta == S::ZERO {
        c.iter_mut().for_each(|v| *v = S::ZERO);
    } else if beta != S::ONE {
        c.iter_mut().for_each(|v| *v = beta * *v);
    }
    if k == 1 {
        for (row, &ai) in c.chunks_exact_mut(n).zip(a) {
            for (v, &bj) in row.iter_mut().zip(b) {
                *v += ai * bj;
            }
        }
        return;
    }
    match op_a {
        Op::N => {
            for (v, row) in c.iter_mut().zip(a.chunks_exact(k)) {
                let mut acc = S::ZERO;
                for (&x, &y) in row.iter().zip(b) {
                    acc += x * y;
                }
                *v += acc;
            }
        }
        Op::T => {
            for (col, &bp) in a.chunks_exact(m).zip(b) {
                for (v, &x) in c.iter_mut().zip(col) {
                    *v += x * bp;
                }
            }
        }
    }
}

/// Channels-last feature map.
#[derive(Clone, Debug)]
pub(crate) struct Fmap<S> {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<S>,
}

impl<S: Scalar> Fmap<S> {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self {
            h,
            w,
            c,
            data: vec![S::ZERO; h * w * c],
        }
    }

    pub fn pixels(&self) -> usize {
        self.h * self.w
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn patch(&self) -> usize {
        self.kernel * self.kernel * self.cin
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let pad = self.kernel / 2;
        (
            (h + 2 * pad - self.kernel) / self.stride + 1,
            (w + 2 * pad - self.kernel) / self.stride + 1,
        )
    }
}

/// Zero-padded patch matrix: one row per output pixel, columns ordered
/// `(ky, kx, c)`.
pub(crate) fn im2col<S: Scalar>(x: &Fmap<S>, g: &ConvGeom) -> (Vec<S>, usize, usize) {
    let (oh, ow) = g.out_dims(x.h, x.w);
    let k = g.kernel;
    let pad = (k / 2) as isize;
    let patch = g.patch();
    let mut col = vec![S::ZERO; oh * ow * patch];
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &mut col[(oy * ow + ox) * patch..(oy * ow + ox + 1) * patch];
            for ky in 0..k {
                let iy = (oy * g.stride) as isize + ky as isize - pad;
                if iy < 0 || iy >= x.h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * g.stride) as isize + kx as isize - pad;
                    if ix < 0 || ix >= x.w as isize {
                        continue;
                    }
                    let src = (iy as usize * x.w + ix as usize) * x.c;
                    let dst = (ky * k + kx) * g.cin;
                    // element loop: short memcpy calls dominate otherwise
                    for (d, &v) in row[dst..dst + g.cin].iter_mut().zip(&x.data[src..src + g.cin]) {
                        *d = v;
                    }
                }
            }
        }
    }
    (col, oh, ow)
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input grid.
pub(crate) fn col2im<S: Scalar>(dcol: &[S], h: usize, w: usize, g: &ConvGeom) -> Fmap<S> {
    let (oh, ow) = g.out_dims(h, w);
    let k = g.kernel;
    let pad = (k / 2) as isize;
    let patch = g.patch();
    let mut dx = Fmap::zeros(h, w, g.cin);
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &dcol[(oy * ow + ox) * patch..(oy * ow + ox + 1) * patch];
            for ky in 0..k {
                let iy = (oy * g.stride) as isize + ky as isize - pad;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * g.stride) as isize + kx as isize - pad;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let dst = (iy as usize * w + ix as usize) * g.cin;
                    let src = (ky * k + kx) * g.cin;
                    for (d, &v) in dx.data[dst..dst + g.cin].iter_mut().zip(&row[src..src + g.cin]) {
                        *d += v;
                    }
                }
            }
        }
    }
    dx
}

/// Convolution forward. Returns the output map and the patch matrix kept for
/// the backward pass. `weight` is `[patch x cout]` row-major.
pub(crate) fn conv_forward<S: Scalar>(
    x: &Fmap<S>,
    g: &ConvGeom,
    weight: &[S],
    bias: &[S],
) -> (Fmap<S>, Vec<S>) {
    debug_assert_eq!(x.c, g.cin);
    let (col, oh, ow) = im2col(x, g);
    let p = oh * ow;
    let mut out = Fmap::zeros(oh, ow, g.cout);
    for px in out.data.chunks_exact_mut(g.cout) {
        px.copy_from_slice(bias);
    }
    gemm(p, g.patch(), g.cout, &col, Op::N, weight, Op::N, S::ONE, &mut out.data);
    (out, col)
}

/// Convolution backward. Accumulates into `dweight` / `dbias` and returns the
/// input gradient when `need_input` is set.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward<S: Scalar>(
    dy: &Fmap<S>,
    col: &[S],
    in_h: usize,
    in_w: usize,
    g: &ConvGeom,
    weight: &[S],
    dweight: &mut [S],
    dbias: &mut [S],
    need_input: bool,
) -> Option<Fmap<S>> {
    let p = dy.pixels();
    let patch = g.patch();
    gemm(patch, p, g.cout, col, Op::T, &dy.data, Op::N, S::ONE, dweight);
    for px in dy.data.chunks_exact(g.cout) {
        for (b, &d) in dbias.iter_mut().zip(px) {
            *b += d;
        }
    }
    if !need_input {
        return None;
    }
    let mut dcol = vec![S::ZERO; p * patch];
    gemm(p, g.cout, patch, &dy.data, Op::N, weight, Op::T, S::ZERO, &mut dcol);
    Some(col2im(&dcol, in_h, in_w, g))
}

pub(crate) fn sigmoid<S: Scalar>(v: S) -> S {
    S::ONE / (S::ONE + (-v).exp())
}

pub(crate) fn silu<S: Scalar>(v: S) -> S {
    v * sigmoid(v)
}

pub(crate) fn silu_grad<S: Scalar>(v: S) -> S {
    let s = sigmoid(v);
    s * (S::ONE + v * (S::ONE - s))
}

/// SiLU of every element, plus the sigmoid values for the backward pass.
pub(crate) fn silu_map<S: Scalar>(x: &Fmap<S>) -> (Fmap<S>, Vec<S>) {
    let sig: Vec<S> = x.data.iter().map(|&v| sigmoid(v)).collect();
    let data = x.data.iter().zip(&sig).map(|(&v, &s)| v * s).collect();
    (
        Fmap {
            h: x.h,
            w: x.w,
            c: x.c,
            data,
        },
        sig,
    )
}

/// `grad * silu'(pre)` elementwise, given `sig = sigmoid(pre)`.
pub(crate) fn silu_back<S: Scalar>(grad: &Fmap<S>, pre: &Fmap<S>, sig: &[S]) -> Fmap<S> {
    Fmap {
        h: grad.h,
        w: grad.w,
        c: grad.c,
        data: grad
            .data
            .iter()
            .zip(&pre.data)
            .zip(sig)
            .map(|((&g, &p), &s)| g * s * (S::ONE + p * (S::ONE - s)))
            .collect(),
    }
}

/// Nearest-neighbour x2 upsampling.
pub(crate) fn upsample2<S: Scalar>(x: &Fmap<S>) -> Fmap<S> {
    let (h, w, c) = (x.h * 2, x.w * 2, x.c);
    let mut out = Fmap::zeros(h, w, c);
    for y in 0..h {
        for xx in 0..w {
            let src = ((y / 2) * x.w + xx / 2) * c;
            let dst = (y * w + xx) * c;
            out.data[dst..dst + c].copy_from_slice(&x.data[src..src + c]);
        }
    }
    out
}

/// Adjoint of [`upsample2`]: sums each 2x2 block.
pub(crate) fn upsample2_back<S: Scalar>(dy: &Fmap<S>) -> Fmap<S> {
    let (h, w, c) = (dy.h / 2, dy.w / 2, dy.c);
    let mut out = Fmap::zeros(h, w, c);
    for y in 0..dy.h {
        for x in 0..dy.w {
            let src = (y * dy.w + x) * c;
            let dst = ((y / 2) * w + x / 2) * c;
            for ch in 0..c {
                out.data[dst + ch] += dy.data[src + ch];
            }
        }
    }
    out
}

/// Adds the same per-channel vector to every pixel.
pub(crate) fn add_channel_bias<S: Scalar>(x: &mut Fmap<S>, v: &[S]) {
    for px in x.data.chunks_exact_mut(x.c) {
        for (a, &b) in px.iter_mut().zip(v) {
            *a += b;
        }
    }
}

/// Per-channel sum over pixels.
pub(crate) fn channel_sums<S: Scalar>(x: &Fmap<S>) -> Vec<S> {
    let mut out = vec![S::ZERO; x.c];
    for px in x.data.chunks_exact(x.c) {
        for (a, &b) in out.iter_mut().zip(px) {
            *a += b;
        }
    }
    out
}

/// `W v` for row-major `W` of shape `[rows x v.len()]`.
pub(crate) fn matvec<S: Scalar>(w: &[S], v: &[S]) -> Vec<S> {
    w.chunks_exact(v.len())
        .map(|row| {
            let mut acc = S::ZERO;
            for (&a, &b) in row.iter().zip(v) {
                acc += a * b;
            }
            acc
        })
        .collect()
}
