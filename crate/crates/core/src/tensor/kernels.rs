//! Raw forward/backward kernels on flat NCHW buffers.
//!
//! These carry no graph bookkeeping; [`super::Graph`] wires them together.

use super::{Real, Shape};

#[inline]
fn cast<T: Real>(v: f64) -> T {
    T::from_f64_lossy(v)
}

/// Spatial output size of a strided convolution.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Spatial output size of a transposed convolution.
pub fn conv_transpose_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if input == 0 || stride == 0 {
        return None;
    }
    ((input - 1) * stride + kernel).checked_sub(2 * pad).filter(|&d| d > 0)
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.cols();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = ((c * g.kh + i) * g.kw + j) * p;
                for oy in 0..g.oh {
                    let dst = &mut cols[row + oy * g.ow..row + (oy + 1) * g.ow];
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + j) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column entries back, accumulating into `x`.
fn col2im<T: Real>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let p = g.cols();
    for c in 0..g.c {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = ((c * g.kh + i) * g.kw + j) * p;
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &cols[row + oy * g.ow..row + (oy + 1) * g.ow];
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * g.stride + j) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Row-major `c[m x n] = alpha * a[m x k] * b[k x n] + beta * c`, with optional transposes.
#[allow(clippy::too_many_arguments)]
fn matmul<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    beta: T,
    c: &mut [T],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices above have exactly the lengths the strides address.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
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

fn add_bias<T: Real>(out: &mut [T], bias: &[T], plane: usize) {
    for (chunk, &b) in out.chunks_mut(plane).zip(bias.iter().cycle()) {
        for v in chunk {
            *v += b;
        }
    }
}

fn bias_grad<T: Real>(gout: &[T], channels: usize, plane: usize) -> Vec<T> {
    let mut acc = vec![0.0f64; channels];
    for (i, chunk) in gout.chunks(plane).enumerate() {
        acc[i % channels] += chunk.iter().map(|v| v.as_f64()).sum::<f64>();
    }
    acc.into_iter().map(cast).collect()
}

/// Cross-correlation; `k` is `(C_out, C_in, kH, kW)`.
pub fn conv2d<T: Real>(
    x: &[T],
    xs: Shape,
    k: &[T],
    ks: Shape,
    bias: Option<&[T]>,
    stride: usize,
    pad: usize,
) -> (Vec<T>, Shape) {
    let oh = conv_out_dim(xs.h, ks.h, stride, pad).expect("validated by caller");
    let ow = conv_out_dim(xs.w, ks.w, stride, pad).expect("validated by caller");
    let g = ConvGeom {
        c: xs.c,
        h: xs.h,
        w: xs.w,
        kh: ks.h,
        kw: ks.w,
        stride,
        pad,
        oh,
        ow,
    };
    let os = Shape::new(xs.n, ks.n, oh, ow);
    let mut out = vec![T::zero(); os.numel()];
    let mut cols = vec![T::zero(); g.rows() * g.cols()];
    let in_len = xs.c * xs.plane();
    let out_len = os.c * os.plane();
    for n in 0..xs.n {
        im2col(&x[n * in_len..(n + 1) * in_len], &g, &mut cols);
        matmul(
            ks.n,
            g.rows(),
            g.cols(),
            k,
            false,
            &cols,
            false,
            T::zero(),
            &mut out[n * out_len..(n + 1) * out_len],
        );
    }
    if let Some(b) = bias {
        add_bias(&mut out, b, os.plane());
    }
    (out, os)
}

pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub kernel: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Real>(
    x: &[T],
    xs: Shape,
    k: &[T],
    ks: Shape,
    gout: &[T],
    os: Shape,
    stride: usize,
    pad: usize,
    need: [bool; 3],
) -> ConvGrads<T> {
    let g = ConvGeom {
        c: xs.c,
        h: xs.h,
        w: xs.w,
        kh: ks.h,
        kw: ks.w,
        stride,
        pad,
        oh: os.h,
        ow: os.w,
    };
    let in_len = xs.c * xs.plane();
    let out_len = os.c * os.plane();
    let mut gx = need[0].then(|| vec![T::zero(); xs.numel()]);
    let mut gk = need[1].then(|| vec![T::zero(); ks.numel()]);
    let mut cols = vec![T::zero(); g.rows() * g.cols()];
    for n in 0..xs.n {
        let go = &gout[n * out_len..(n + 1) * out_len];
        if let Some(gk) = gk.as_mut() {
            im2col(&x[n * in_len..(n + 1) * in_len], &g, &mut cols);
            matmul(ks.n, g.cols(), g.rows(), go, false, &cols, true, T::one(), gk);
        }
        if let Some(gx) = gx.as_mut() {
            matmul(g.rows(), ks.n, g.cols(), k, true, go, false, T::zero(), &mut cols);
            col2im(&cols, &g, &mut gx[n * in_len..(n + 1) * in_len]);
        }
    }
    ConvGrads {
        input: gx,
        kernel: gk,
        bias: need[2].then(|| bias_grad(gout, os.c, os.plane())),
    }
}

/// Transposed convolution, the adjoint of [`conv2d`] with the same kernel.
///
/// `k` is `(C_in, C_out, kH, kW)` where `C_in` matches the channels of `y`.
pub fn conv_transpose2d<T: Real>(
    y: &[T],
    ys: Shape,
    k: &[T],
    ks: Shape,
    bias: Option<&[T]>,
    stride: usize,
    pad: usize,
) -> (Vec<T>, Shape) {
    let oh = conv_transpose_out_dim(ys.h, ks.h, stride, pad).expect("validated by caller");
    let ow = conv_transpose_out_dim(ys.w, ks.w, stride, pad).expect("validated by caller");
    let os = Shape::new(ys.n, ks.c, oh, ow);
    let g = ConvGeom {
        c: ks.c,
        h: oh,
        w: ow,
        kh: ks.h,
        kw: ks.w,
        stride,
        pad,
        oh: ys.h,
        ow: ys.w,
    };
    let mut out = vec![T::zero(); os.numel()];
    let mut cols = vec![T::zero(); g.rows() * g.cols()];
    let in_len = ys.c * ys.plane();
    let out_len = os.c * os.plane();
    for n in 0..ys.n {
        matmul(
            g.rows(),
            ks.n,
            g.cols(),
            k,
            true,
            &y[n * in_len..(n + 1) * in_len],
            false,
            T::zero(),
            &mut cols,
        );
        col2im(&cols, &g, &mut out[n * out_len..(n + 1) * out_len]);
    }
    if let Some(b) = bias {
        add_bias(&mut out, b, os.plane());
    }
    (out, os)
}

#[allow(clippy::too_many_arguments)]
pub fn conv_transpose2d_backward<T: Real>(
    y: &[T],
    ys: Shape,
    k: &[T],
    ks: Shape,
    gout: &[T],
    os: Shape,
    stride: usize,
    pad: usize,
    need: [bool; 3],
) -> ConvGrads<T> {
    let g = ConvGeom {
        c: ks.c,
        h: os.h,
        w: os.w,
        kh: ks.h,
        kw: ks.w,
        stride,
        pad,
        oh: ys.h,
        ow: ys.w,
    };
    let in_len = ys.c * ys.plane();
    let out_len = os.c * os.plane();
    let mut gy = need[0].then(|| vec![T::zero(); ys.numel()]);
    let mut gk = need[1].then(|| vec![T::zero(); ks.numel()]);
    let mut cols = vec![T::zero(); g.rows() * g.cols()];
    for n in 0..ys.n {
        im2col(&gout[n * out_len..(n + 1) * out_len], &g, &mut cols);
        if let Some(gy) = gy.as_mut() {
            matmul(
                ks.n,
                g.rows(),
                g.cols(),
                k,
                false,
                &cols,
                false,
                T::zero(),
                &mut gy[n * in_len..(n + 1) * in_len],
            );
        }
        if let Some(gk) = gk.as_mut() {
            matmul(
                ks.n,
                g.cols(),
                g.rows(),
                &y[n * in_len..(n + 1) * in_len],
                false,
                &cols,
                true,
                T::one(),
                gk,
            );
        }
    }
    ConvGrads {
        input: gy,
        kernel: gk,
        bias: need[2].then(|| bias_grad(gout, os.c, os.plane())),
    }
}

/// Bilinear tap on a clamped coordinate: `(lo, hi, frac, inside)`.
///
/// `inside` is false when the coordinate was clamped, in which case the
/// sample does not vary with it.
#[inline]
pub fn clamped_tap<T: Real>(coord: T, len: usize) -> (usize, usize, T, bool) {
    let max = T::from_f64_lossy((len - 1) as f64);
    let inside = coord >= T::zero() && coord <= max;
    let c = coord.max(T::zero()).min(max);
    let lo = c.floor();
    let lo_i = lo.to_usize().unwrap_or(0).min(len - 1);
    let hi_i = (lo_i + 1).min(len - 1);
    (lo_i, hi_i, c - lo, inside)
}

/// `out(x, y) = img(x + u, y + v)` with clamp-to-border bilinear sampling.
pub fn warp<T: Real>(img: &[T], is: Shape, flow: &[T]) -> Vec<T> {
    let plane = is.plane();
    let mut out = vec![T::zero(); img.len()];
    for n in 0..is.n {
        let fu = &flow[(n * 2) * plane..(n * 2 + 1) * plane];
        let fv = &flow[(n * 2 + 1) * plane..(n * 2 + 2) * plane];
        for y in 0..is.h {
            for x in 0..is.w {
                let p = y * is.w + x;
                let sx = T::from_f64_lossy(x as f64) + fu[p];
                let sy = T::from_f64_lossy(y as f64) + fv[p];
                let (x0, x1, ax, _) = clamped_tap(sx, is.w);
                let (y0, y1, ay, _) = clamped_tap(sy, is.h);
                let w00 = (T::one() - ax) * (T::one() - ay);
                let w01 = ax * (T::one() - ay);
                let w10 = (T::one() - ax) * ay;
                let w11 = ax * ay;
                for c in 0..is.c {
                    let base = (n * is.c + c) * plane;
                    let src = &img[base..base + plane];
                    out[base + p] = w00 * src[y0 * is.w + x0]
                        + w01 * src[y0 * is.w + x1]
                        + w10 * src[y1 * is.w + x0]
                        + w11 * src[y1 * is.w + x1];
                }
            }
        }
    }
    out
}

pub fn warp_backward<T: Real>(
    img: &[T],
    is: Shape,
    flow: &[T],
    gout: &[T],
    need: [bool; 2],
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let plane = is.plane();
    let mut gimg = need[0].then(|| vec![T::zero(); img.len()]);
    let mut gflow = need[1].then(|| vec![T::zero(); flow.len()]);
    for n in 0..is.n {
        for y in 0..is.h {
            for x in 0..is.w {
                let p = y * is.w + x;
                let sx = T::from_f64_lossy(x as f64) + flow[(n * 2) * plane + p];
                let sy = T::from_f64_lossy(y as f64) + flow[(n * 2 + 1) * plane + p];
                let (x0, x1, ax, in_x) = clamped_tap(sx, is.w);
                let (y0, y1, ay, in_y) = clamped_tap(sy, is.h);
                let one = T::one();
                let mut du = T::zero();
                let mut dv = T::zero();
                for c in 0..is.c {
                    let base = (n * is.c + c) * plane;
                    let g = gout[base + p];
                    if let Some(gi) = gimg.as_mut() {
                        gi[base + y0 * is.w + x0] += g * (one - ax) * (one - ay);
                        gi[base + y0 * is.w + x1] += g * ax * (one - ay);
                        gi[base + y1 * is.w + x0] += g * (one - ax) * ay;
                        gi[base + y1 * is.w + x1] += g * ax * ay;
                    }
                    if gflow.is_some() {
                        let a = img[base + y0 * is.w + x0];
                        let b = img[base + y0 * is.w + x1];
                        let cc = img[base + y1 * is.w + x0];
                        let d = img[base + y1 * is.w + x1];
                        du += g * ((one - ay) * (b - a) + ay * (d - cc));
                        dv += g * ((one - ax) * (cc - a) + ax * (d - b));
                    }
                }
                if let Some(gf) = gflow.as_mut() {
                    if in_x {
                        gf[(n * 2) * plane + p] += du;
                    }
                    if in_y {
                        gf[(n * 2 + 1) * plane + p] += dv;
                    }
                }
            }
        }
    }
    (gimg, gflow)
}

/// Taps of ×2 bilinear upsampling along one axis (half-pixel centers, clamped).
fn upsample_taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (in_len - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

pub fn upsample2<T: Real>(x: &[T], xs: Shape) -> (Vec<T>, Shape) {
    let os = Shape::new(xs.n, xs.c, xs.h * 2, xs.w * 2);
    let ty = upsample_taps(os.h, xs.h);
    let tx = upsample_taps(os.w, xs.w);
    let mut out = vec![T::zero(); os.numel()];
    for (src, dst) in x.chunks(xs.plane()).zip(out.chunks_mut(os.plane())) {
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy: T = cast(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx: T = cast(fx);
                let top = src[y0 * xs.w + x0] * (T::one() - fx) + src[y0 * xs.w + x1] * fx;
                let bot = src[y1 * xs.w + x0] * (T::one() - fx) + src[y1 * xs.w + x1] * fx;
                dst[oy * os.w + ox] = top * (T::one() - fy) + bot * fy;
            }
        }
    }
    (out, os)
}

pub fn upsample2_backward<T: Real>(gout: &[T], xs: Shape) -> Vec<T> {
    let os = Shape::new(xs.n, xs.c, xs.h * 2, xs.w * 2);
    let ty = upsample_taps(os.h, xs.h);
    let tx = upsample_taps(os.w, xs.w);
    let mut gx = vec![T::zero(); xs.numel()];
    for (go, gi) in gout.chunks(os.plane()).zip(gx.chunks_mut(xs.plane())) {
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy: T = cast(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx: T = cast(fx);
                let g = go[oy * os.w + ox];
                let gt = g * (T::one() - fy);
                let gb = g * fy;
                gi[y0 * xs.w + x0] += gt * (T::one() - fx);
                gi[y0 * xs.w + x1] += gt * fx;
                gi[y1 * xs.w + x0] += gb * (T::one() - fx);
                gi[y1 * xs.w + x1] += gb * fx;
            }
        }
    }
    gx
}

pub fn avg_pool2<T: Real>(x: &[T], xs: Shape) -> (Vec<T>, Shape) {
    let os = Shape::new(xs.n, xs.c, xs.h / 2, xs.w / 2);
    let quarter: T = cast(0.25);
    let mut out = vec![T::zero(); os.numel()];
    for (src, dst) in x.chunks(xs.plane()).zip(out.chunks_mut(os.plane())) {
        for oy in 0..os.h {
            for ox in 0..os.w {
                let i = 2 * oy * xs.w + 2 * ox;
                dst[oy * os.w + ox] =
                    (src[i] + src[i + 1] + src[i + xs.w] + src[i + xs.w + 1]) * quarter;
            }
        }
    }
    (out, os)
}

pub fn avg_pool2_backward<T: Real>(gout: &[T], xs: Shape) -> Vec<T> {
    let os = Shape::new(xs.n, xs.c, xs.h / 2, xs.w / 2);
    let quarter: T = cast(0.25);
    let mut gx = vec![T::zero(); xs.numel()];
    for (go, gi) in gout.chunks(os.plane()).zip(gx.chunks_mut(xs.plane())) {
        for oy in 0..os.h {
            for ox in 0..os.w {
                let g = go[oy * os.w + ox] * quarter;
                let i = 2 * oy * xs.w + 2 * ox;
                gi[i] += g;
                gi[i + 1] += g;
                gi[i + xs.w] += g;
                gi[i + xs.w + 1] += g;
            }
        }
    }
    gx
}

/// Valid output range `[lo, hi)` along an axis for displacement `d`.
#[inline]
fn shifted_range(len: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (len as isize - d.max(0)).max(0) as usize;
    (lo.min(hi), hi)
}

/// Local cost volume: channel `(dy + m) * (2m + 1) + (dx + m)` holds
/// `(1/C) sum_c f1(x) f2(x + d)`, zero where `x + d` leaves the map.
pub fn correlation<T: Real>(f1: &[T], f2: &[T], fs: Shape, max_disp: usize) -> (Vec<T>, Shape) {
    let side = 2 * max_disp + 1;
    let os = Shape::new(fs.n, side * side, fs.h, fs.w);
    let plane = fs.plane();
    let norm: T = cast(1.0 / fs.c as f64);
    let m = max_disp as isize;
    let mut out = vec![T::zero(); os.numel()];
    for n in 0..fs.n {
        for dy in -m..=m {
            for dx in -m..=m {
                let d = ((dy + m) as usize) * side + (dx + m) as usize;
                let dst = &mut out[(n * os.c + d) * plane..(n * os.c + d + 1) * plane];
                let (y_lo, y_hi) = shifted_range(fs.h, dy);
                let (x_lo, x_hi) = shifted_range(fs.w, dx);
                for c in 0..fs.c {
                    let a = &f1[(n * fs.c + c) * plane..(n * fs.c + c + 1) * plane];
                    let b = &f2[(n * fs.c + c) * plane..(n * fs.c + c + 1) * plane];
                    for y in y_lo..y_hi {
                        let ya = y * fs.w;
                        let yb = (y as isize + dy) as usize * fs.w;
                        for x in x_lo..x_hi {
                            dst[ya + x] += a[ya + x] * b[(yb as isize + x as isize + dx) as usize];
                        }
                    }
                }
                for v in dst.iter_mut() {
                    *v *= norm;
                }
            }
        }
    }
    (out, os)
}

pub fn correlation_backward<T: Real>(
    f1: &[T],
    f2: &[T],
    fs: Shape,
    max_disp: usize,
    gout: &[T],
    need: [bool; 2],
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let side = 2 * max_disp + 1;
    let oc = side * side;
    let plane = fs.plane();
    let norm: T = cast(1.0 / fs.c as f64);
    let m = max_disp as isize;
    let mut g1 = need[0].then(|| vec![T::zero(); f1.len()]);
    let mut g2 = need[1].then(|| vec![T::zero(); f2.len()]);
    for n in 0..fs.n {
        for dy in -m..=m {
            for dx in -m..=m {
                let d = ((dy + m) as usize) * side + (dx + m) as usize;
                let go = &gout[(n * oc + d) * plane..(n * oc + d + 1) * plane];
                let (y_lo, y_hi) = shifted_range(fs.h, dy);
                let (x_lo, x_hi) = shifted_range(fs.w, dx);
                for c in 0..fs.c {
                    let off = (n * fs.c + c) * plane;
                    for y in y_lo..y_hi {
                        let ya = y * fs.w;
                        let yb = (y as isize + dy) as usize * fs.w;
                        for x in x_lo..x_hi {
                            let g = go[ya + x] * norm;
                            let xb = (yb as isize + x as isize + dx) as usize;
                            if let Some(g1) = g1.as_mut() {
                                g1[off + ya + x] += g * f2[off + xb];
                            }
                            if let Some(g2) = g2.as_mut() {
                                g2[off + xb] += g * f1[off + ya + x];
                            }
                        }
                    }
                }
            }
        }
    }
    (g1, g2)
}
