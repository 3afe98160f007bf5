// Raw slice kernels behind the tape ops.
//
// Convolution loops are ordered so that every output element accumulates
// its terms in the same order as a plain nested-loop reference. In f64 the
// results are therefore bit-identical to that reference.

use super::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

// Convolutions run on zero-padded planes split into `stride²` phase
// planes, so that each kernel tap becomes one contiguous axpy over an
// output plane laid out with the phase row width. Columns past `ow` are
// scratch. Padded terms contribute exact zeros, and an accumulator that
// starts at +0 is unchanged by adding ±0, so every valid output matches
// the skip-out-of-bounds loop bit for bit.
struct Phased {
    s: usize,
    hq: usize,
    wq: usize,
    span: usize,
}

impl Phased {
    fn new(g: &ConvGeom) -> Self {
        let s = g.stride;
        let (hp, wp) = (g.h + 2 * g.pad, g.w + 2 * g.pad);
        let (hq, wq) = (hp.div_ceil(s), wp.div_ceil(s));
        Self { s, hq, wq, span: (g.oh - 1) * wq + g.ow }
    }

    fn plane(&self) -> usize {
        self.hq * self.wq
    }

    /// Phase plane index and offset read by tap `(ky, kx)`.
    fn tap(&self, ky: usize, kx: usize) -> (usize, usize) {
        ((ky % self.s) * self.s + kx % self.s, (ky / self.s) * self.wq + kx / self.s)
    }

    /// Source rows (or columns) of `extent` landing in phase `a`: the first
    /// source index and its position inside the phase plane.
    fn first(&self, a: usize, pad: usize, extent: usize) -> Option<(usize, usize)> {
        let start = (a + self.s - pad % self.s) % self.s;
        (start < extent).then(|| (start, (start + pad) / self.s))
    }

    /// Pads every `h × w` plane by `pad` and splits it into phases.
    fn split<T: Real>(&self, x: &[T], planes: usize, g: &ConvGeom) -> Vec<T> {
        let (s, pl) = (self.s, self.plane());
        let mut out = vec![T::zero(); planes * s * s * pl];
        for p in 0..planes {
            let src = &x[p * g.h * g.w..][..g.h * g.w];
            for a in 0..s {
                let Some((r0, q0)) = self.first(a, g.pad, g.h) else { continue };
                for b in 0..s {
                    let Some((c0, k0)) = self.first(b, g.pad, g.w) else { continue };
                    let dst = &mut out[(p * s * s + a * s + b) * pl..][..pl];
                    for (i, r) in (r0..g.h).step_by(s).enumerate() {
                        let row = &src[r * g.w..][..g.w];
                        let drow = &mut dst[(q0 + i) * self.wq + k0..];
                        if s == 1 {
                            drow[..g.w].copy_from_slice(row);
                            continue;
                        }
                        for (d, &v) in drow.iter_mut().zip(row[c0..].iter().step_by(s)) {
                            *d = v;
                        }
                    }
                }
            }
        }
        out
    }

    /// Inverse of [`Phased::split`] for one plane, dropping the border.
    fn merge<T: Real>(&self, ph: &[T], dst: &mut [T], g: &ConvGeom) {
        let (s, pl) = (self.s, self.plane());
        for a in 0..s {
            let Some((r0, q0)) = self.first(a, g.pad, g.h) else { continue };
            for b in 0..s {
                let Some((c0, k0)) = self.first(b, g.pad, g.w) else { continue };
                let src = &ph[(a * s + b) * pl..][..pl];
                for (i, r) in (r0..g.h).step_by(s).enumerate() {
                    let srow = &src[(q0 + i) * self.wq + k0..];
                    for (d, &v) in dst[r * g.w..][..g.w][c0..].iter_mut().step_by(s).zip(srow) {
                        *d = v;
                    }
                }
            }
        }
    }
}

/// All nine taps of a 3x3 stride-1 kernel over one padded plane, applied
/// in row-major tap order to each accumulator element.
#[inline(always)]
fn taps3x3_body<T: Real>(acc: &mut [T], src: &[T], kern: &[T], wp: usize) {
    let span = acc.len();
    let w: [T; 9] = std::array::from_fn(|i| kern[i]);
    let r0 = &src[..span + 2];
    let r1 = &src[wp..][..span + 2];
    let r2 = &src[2 * wp..][..span + 2];
    for (i, a) in acc.iter_mut().enumerate() {
        let mut v = *a;
        v += w[0] * r0[i];
        v += w[1] * r0[i + 1];
        v += w[2] * r0[i + 2];
        v += w[3] * r1[i];
        v += w[4] * r1[i + 1];
        v += w[5] * r1[i + 2];
        v += w[6] * r2[i];
        v += w[7] * r2[i + 1];
        v += w[8] * r2[i + 2];
        *a = v;
    }
}

/// Adjoint of [`taps3x3`]: `g` holds the output gradient at offset
/// `2*wp+2`, zero elsewhere.
#[inline(always)]
fn gather3x3_body<T: Real>(acc: &mut [T], g: &[T], kern: &[T], wp: usize) {
    let n = acc.len();
    let w: [T; 9] = std::array::from_fn(|i| kern[i]);
    let o = 2 * wp + 2;
    let r0 = &g[o - 2..][..n + 2];
    let r1 = &g[o - wp - 2..][..n + 2];
    let r2 = &g[o - 2 * wp - 2..][..n + 2];
    for (j, a) in acc.iter_mut().enumerate() {
        let mut v = *a;
        v += w[0] * r0[j + 2];
        v += w[1] * r0[j + 1];
        v += w[2] * r0[j];
        v += w[3] * r1[j + 2];
        v += w[4] * r1[j + 1];
        v += w[5] * r1[j];
        v += w[6] * r2[j + 2];
        v += w[7] * r2[j + 1];
        v += w[8] * r2[j];
        *a = v;
    }
}

// Hot loops are compiled twice and picked at run time. Only wider vectors
// are enabled, never fused multiply-add, so both builds round identically.
macro_rules! dispatch {
    ($(fn $name:ident / $avx:ident = $body:ident ($($arg:ident: $ty:ty),*) $(-> $ret:ty)?;)*) => {$(
        #[cfg(target_arch = "x86_64")]
        #[target_feature(enable = "avx2")]
        unsafe fn $avx<T: Real>($($arg: $ty),*) $(-> $ret)? {
            $body($($arg),*)
        }

        fn $name<T: Real>($($arg: $ty),*) $(-> $ret)? {
            #[cfg(target_arch = "x86_64")]
            if std::arch::is_x86_feature_detected!("avx2") {
                // SAFETY: the CPU supports AVX2, checked just above.
                return unsafe { $avx($($arg),*) };
            }
            $body($($arg),*)
        }
    )*};
}

dispatch! {
    fn taps3x3 / taps3x3_avx2 = taps3x3_body(acc: &mut [T], src: &[T], kern: &[T], wp: usize);
    fn gather3x3 / gather3x3_avx2 = gather3x3_body(acc: &mut [T], g: &[T], kern: &[T], wp: usize);
    fn dot / dot_avx2 = dot_body(a: &[T], b: &[T]) -> T;
    fn axpy / axpy_avx2 = axpy_body(acc: &mut [T], w: T, x: &[T]);
}

#[inline(always)]
fn axpy_body<T: Real>(acc: &mut [T], w: T, x: &[T]) {
    for (a, &v) in acc.iter_mut().zip(x) {
        *a += w * v;
    }
}

pub(crate) fn conv2d_forward<T: Real>(x: &[T], k: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let ph = Phased::new(g);
    let (ss, pl, khw) = (g.stride * g.stride, ph.plane(), g.kh * g.kw);
    let fused = g.stride == 1 && g.kh == 3 && g.kw == 3;
    let xq = ph.split(x, g.n * g.cin, g);
    let mut acc = vec![T::zero(); ph.span];
    let mut out = vec![T::zero(); g.n * g.cout * g.oh * g.ow];
    for n in 0..g.n {
        for co in 0..g.cout {
            acc.iter_mut().for_each(|a| *a = T::zero());
            for ci in 0..g.cin {
                let planes = &xq[(n * g.cin + ci) * ss * pl..][..ss * pl];
                let kern = &k[(co * g.cin + ci) * khw..][..khw];
                if fused {
                    taps3x3(&mut acc, planes, kern, ph.wq);
                    continue;
                }
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wv = kern[ky * g.kw + kx];
                        let (q, off) = ph.tap(ky, kx);
                        axpy(&mut acc, wv, &planes[q * pl + off..][..ph.span]);
                    }
                }
            }
            let plane = &mut out[(n * g.cout + co) * g.oh * g.ow..][..g.oh * g.ow];
            for oy in 0..g.oh {
                plane[oy * g.ow..][..g.ow].copy_from_slice(&acc[oy * ph.wq..][..g.ow]);
            }
            if let Some(b) = bias {
                let bv = b[co];
                for o in plane.iter_mut() {
                    *o += bv;
                }
            }
        }
    }
    out
}

pub(crate) fn conv2d_backward_input<T: Real>(gout: &[T], k: &[T], g: &ConvGeom) -> Vec<T> {
    let ph = Phased::new(g);
    let (ss, pl, ohw, khw) = (g.stride * g.stride, ph.plane(), g.oh * g.ow, g.kh * g.kw);
    let fused = g.stride == 1 && g.kh == 3 && g.kw == 3;
    // the fused gather reads up to 2*wq+2 before each position
    let lead = if fused { 2 * ph.wq + 2 } else { 0 };
    let mut gbuf = vec![T::zero(); lead + pl];
    let mut acc = vec![T::zero(); ss * pl];
    let mut gin = vec![T::zero(); g.n * g.cin * g.h * g.w];
    for n in 0..g.n {
        for ci in 0..g.cin {
            acc.iter_mut().for_each(|a| *a = T::zero());
            for co in 0..g.cout {
                let gp = &gout[(n * g.cout + co) * ohw..][..ohw];
                for oy in 0..g.oh {
                    gbuf[lead + oy * ph.wq..][..g.ow].copy_from_slice(&gp[oy * g.ow..][..g.ow]);
                }
                let kern = &k[(co * g.cin + ci) * khw..][..khw];
                if fused {
                    gather3x3(&mut acc, &gbuf, kern, ph.wq);
                    continue;
                }
                let gsrc = &gbuf[..ph.span];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wv = kern[ky * g.kw + kx];
                        let (q, off) = ph.tap(ky, kx);
                        axpy(&mut acc[q * pl + off..][..ph.span], wv, gsrc);
                    }
                }
            }
            ph.merge(&acc, &mut gin[(n * g.cin + ci) * g.h * g.w..][..g.h * g.w], g);
        }
    }
    gin
}

/// Dot product over eight interleaved partial sums.
#[inline(always)]
fn dot_body<T: Real>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: T = ca.remainder().iter().zip(cb.remainder()).fold(T::zero(), |s, (&x, &y)| s + x * y);
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    let pairs = [lanes[0] + lanes[4], lanes[1] + lanes[5], lanes[2] + lanes[6], lanes[3] + lanes[7]];
    (pairs[0] + pairs[2]) + (pairs[1] + pairs[3]) + tail
}

pub(crate) fn conv2d_backward_kernel<T: Real>(gout: &[T], x: &[T], g: &ConvGeom) -> Vec<T> {
    let ph = Phased::new(g);
    let (ss, pl, ohw, khw) = (g.stride * g.stride, ph.plane(), g.oh * g.ow, g.kh * g.kw);
    let xq = ph.split(x, g.n * g.cin, g);
    // output gradient in phase row width; scratch columns stay zero
    let mut gbuf = vec![T::zero(); ph.span];
    let mut gk = vec![T::zero(); g.cout * g.cin * khw];
    // 64-bit runs are for verification and keep the reference summation
    // order; 32-bit runs split each sum over vector lanes
    let exact = T::NAME == "f64";
    for n in 0..g.n {
        for co in 0..g.cout {
            let gp = &gout[(n * g.cout + co) * ohw..][..ohw];
            for oy in 0..g.oh {
                gbuf[oy * ph.wq..][..g.ow].copy_from_slice(&gp[oy * g.ow..][..g.ow]);
            }
            for ci in 0..g.cin {
                let planes = &xq[(n * g.cin + ci) * ss * pl..][..ss * pl];
                let dst = &mut gk[(co * g.cin + ci) * khw..][..khw];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let (q, off) = ph.tap(ky, kx);
                        let xs = &planes[q * pl + off..][..ph.span];
                        let d = &mut dst[ky * g.kw + kx];
                        if exact {
                            *d = xs.iter().zip(&gbuf).fold(*d, |acc, (&xv, &gv)| acc + gv * xv);
                        } else {
                            *d += dot(&gbuf, xs);
                        }
                    }
                }
            }
        }
    }
    gk
}

pub(crate) fn conv2d_backward_bias<T: Real>(gout: &[T], g: &ConvGeom) -> Vec<T> {
    let ohw = g.oh * g.ow;
    let mut gb = vec![T::zero(); g.cout];
    for n in 0..g.n {
        for (co, b) in gb.iter_mut().enumerate() {
            for &v in &gout[(n * g.cout + co) * ohw..][..ohw] {
                *b += v;
            }
        }
    }
    gb
}

/// Per-channel mean and biased variance over `(N, spatial)`.
pub(crate) fn channel_stats<T: Real>(x: &[T], n: usize, c: usize, sp: usize) -> (Vec<T>, Vec<T>) {
    let m = T::of((n * sp) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for b in 0..n {
            for &v in &x[(b * c + ch) * sp..][..sp] {
                s += v;
            }
        }
        let mu = s / m;
        let mut q = T::zero();
        for b in 0..n {
            for &v in &x[(b * c + ch) * sp..][..sp] {
                let d = v - mu;
                q += d * d;
            }
        }
        mean[ch] = mu;
        var[ch] = q / m;
    }
    (mean, var)
}

/// Iterates `(outer, k, inner)` strides for a reduction along `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let k = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, k, inner)
}

// Softmax kernels sweep whole rows of `inner` elements per class so the
// inner loops run over contiguous memory.
pub(crate) fn softmax_forward<T: Real>(x: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, k, inner) = axis_split(shape, axis);
    let mut out = vec![T::zero(); x.len()];
    let mut mx = vec![T::zero(); inner];
    let mut sum = vec![T::zero(); inner];
    for o in 0..outer {
        let base = o * k * inner;
        mx.iter_mut().for_each(|m| *m = T::neg_infinity());
        sum.iter_mut().for_each(|v| *v = T::zero());
        for j in 0..k {
            for (m, &v) in mx.iter_mut().zip(&x[base + j * inner..][..inner]) {
                *m = m.max(v);
            }
        }
        for j in 0..k {
            let row = base + j * inner;
            let dst = &mut out[row..][..inner];
            for (((d, &v), &m), s) in dst.iter_mut().zip(&x[row..][..inner]).zip(&mx).zip(sum.iter_mut()) {
                let e = (v - m).exp();
                *d = e;
                *s += e;
            }
        }
        for j in 0..k {
            for (d, &s) in out[base + j * inner..][..inner].iter_mut().zip(&sum) {
                *d /= s;
            }
        }
    }
    out
}

pub(crate) fn softmax_backward<T: Real>(y: &[T], gout: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, k, inner) = axis_split(shape, axis);
    let mut gin = vec![T::zero(); y.len()];
    let mut dot = vec![T::zero(); inner];
    for o in 0..outer {
        let base = o * k * inner;
        dot.iter_mut().for_each(|d| *d = T::zero());
        for j in 0..k {
            let row = base + j * inner;
            for ((d, &g), &v) in dot.iter_mut().zip(&gout[row..][..inner]).zip(&y[row..][..inner]) {
                *d += g * v;
            }
        }
        for j in 0..k {
            let row = base + j * inner;
            let dst = &mut gin[row..][..inner];
            for (((d, &g), &v), &dt) in dst.iter_mut().zip(&gout[row..][..inner]).zip(&y[row..][..inner]).zip(&dot) {
                *d = v * (g - dt);
            }
        }
    }
    gin
}

pub(crate) fn upsample2x<T: Real>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..][..h * w];
        let dst = &mut out[p * oh * ow..][..oh * ow];
        for y in 0..h {
            let row = &src[y * w..][..w];
            let (even, odd) = dst[2 * y * ow..][..2 * ow].split_at_mut(ow);
            for (pair, &v) in even.chunks_exact_mut(2).zip(row) {
                pair[0] = v;
                pair[1] = v;
            }
            odd.copy_from_slice(even);
        }
    }
    out
}

pub(crate) fn upsample2x_backward<T: Real>(g: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &g[p * oh * ow..][..oh * ow];
        let dst = &mut out[p * h * w..][..h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                dst[(oy / 2) * w + ox / 2] += src[oy * ow + ox];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn naive_forward(x: &[f64], k: &[f64], g: &ConvGeom) -> Vec<f64> {
        let mut out = vec![0.0; g.n * g.cout * g.oh * g.ow];
        for n in 0..g.n {
            for co in 0..g.cout {
                for ci in 0..g.cin {
                    for ky in 0..g.kh {
                        for kx in 0..g.kw {
                            for oy in 0..g.oh {
                                for ox in 0..g.ow {
                                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                        continue;
                                    }
                                    out[((n * g.cout + co) * g.oh + oy) * g.ow + ox] += k[((co * g.cin + ci) * g.kh + ky) * g.kw + kx]
                                        * x[((n * g.cin + ci) * g.h + iy as usize) * g.w + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn phased_forward_is_bit_exact() {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for &(stride, pad, ksz, h, w) in &[(1, 1, 3, 7, 6), (2, 1, 3, 9, 8), (2, 0, 2, 6, 7), (1, 0, 1, 5, 5), (3, 2, 4, 10, 9)] {
            let (n, cin, cout) = (2, 3, 2);
            let oh = (h + 2 * pad - ksz) / stride + 1;
            let ow = (w + 2 * pad - ksz) / stride + 1;
            let g = ConvGeom { n, cin, h, w, cout, kh: ksz, kw: ksz, stride, pad, oh, ow };
            let x: Vec<f64> = (0..n * cin * h * w).map(|_| r.random::<f64>() - 0.5).collect();
            let k: Vec<f64> = (0..cout * cin * ksz * ksz).map(|_| r.random::<f64>() - 0.5).collect();
            let got = conv2d_forward(&x, &k, None, &g);
            let want = naive_forward(&x, &k, &g);
            assert!(got.iter().zip(&want).all(|(a, b)| a.to_bits() == b.to_bits()), "stride {stride} pad {pad} k {ksz}");
        }
    }

    #[test]
    fn phased_input_gradient_is_bit_exact() {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for &(stride, pad, ksz, h, w) in &[(1, 1, 3, 7, 6), (2, 1, 3, 9, 8), (2, 0, 2, 6, 7), (1, 0, 1, 5, 5), (3, 2, 4, 10, 9)] {
            let (n, cin, cout) = (2, 3, 2);
            let oh = (h + 2 * pad - ksz) / stride + 1;
            let ow = (w + 2 * pad - ksz) / stride + 1;
            let g = ConvGeom { n, cin, h, w, cout, kh: ksz, kw: ksz, stride, pad, oh, ow };
            let go: Vec<f64> = (0..n * cout * oh * ow).map(|_| r.random::<f64>() - 0.5).collect();
            let k: Vec<f64> = (0..cout * cin * ksz * ksz).map(|_| r.random::<f64>() - 0.5).collect();
            let mut want = vec![0.0; n * cin * h * w];
            for b in 0..n {
                for ci in 0..cin {
                    for co in 0..cout {
                        for ky in 0..ksz {
                            for kx in 0..ksz {
                                for oy in 0..oh {
                                    for ox in 0..ow {
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                            continue;
                                        }
                                        want[((b * cin + ci) * h + iy as usize) * w + ix as usize] +=
                                            k[((co * cin + ci) * ksz + ky) * ksz + kx] * go[((b * cout + co) * oh + oy) * ow + ox];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            let got = conv2d_backward_input(&go, &k, &g);
            assert!(got.iter().zip(&want).all(|(a, b)| a.to_bits() == b.to_bits()), "stride {stride} pad {pad} k {ksz}");
        }
    }
}
