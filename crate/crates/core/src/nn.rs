//! Minimal 3D tensor kernels with explicit backward passes.
//!
//! Feature maps are single-sample `(channel, depth, height, width)` buffers.
//! Every kernel is generic over [`Real`] so that the same code trains in `f32`
//! and is gradient-checked in `f64`.

use std::fmt::Debug;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::types::Shape3;

pub trait Real:
    Float + AddAssign + SubAssign + MulAssign + Default + Debug + Send + Sync + 'static
{
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Single-sample feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct Feat<T> {
    pub channels: usize,
    pub shape: Shape3,
    pub data: Vec<T>,
}

impl<T: Real> Feat<T> {
    pub fn zeros(channels: usize, shape: Shape3) -> Self {
        Self {
            channels,
            shape,
            data: vec![T::zero(); channels * spatial(shape)],
        }
    }

    pub fn from_vec(channels: usize, shape: Shape3, data: Vec<T>) -> Self {
        assert_eq!(data.len(), channels * spatial(shape), "feature buffer size");
        Self {
            channels,
            shape,
            data,
        }
    }

    pub fn spatial(&self) -> usize {
        spatial(self.shape)
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.spatial();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.spatial();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn add_assign(&mut self, other: &Feat<T>) {
        assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }
}

#[inline]
pub fn spatial(shape: Shape3) -> usize {
    shape[0] * shape[1] * shape[2]
}

#[inline]
pub fn axpy<T: Real>(acc: &mut [T], w: T, src: &[T]) {
    let src = &src[..acc.len()];
    for (a, s) in acc.iter_mut().zip(src) {
        *a += w * *s;
    }
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let b = &b[..a.len()];
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for j in 0..8 {
            acc[j] += x[j] * y[j];
        }
    }
    let mut tail = T::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail += *x * *y;
    }
    let s01 = (acc[0] + acc[4]) + (acc[1] + acc[5]);
    let s23 = (acc[2] + acc[6]) + (acc[3] + acc[7]);
    s01 + s23 + tail
}

#[inline]
fn sum<T: Real>(a: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let c = a.chunks_exact(8);
    let r = c.remainder();
    for x in c {
        for j in 0..8 {
            acc[j] += x[j];
        }
    }
    let mut tail = T::zero();
    for x in r {
        tail += *x;
    }
    acc.iter().fold(tail, |s, v| s + *v)
}

/// Geometry of a one-voxel zero-padded volume used by the 3x3x3 kernels.
///
/// In padded coordinates every interior output position `p` reads its
/// neighbours at `p + offset[k]`, so each (in, out, tap) triple becomes a
/// single contiguous axpy over `start..end`.
#[derive(Clone, Debug)]
struct PadGeom {
    shape: Shape3,
    padded: Shape3,
    /// Per-channel buffer stride: the padded volume plus a zero margin so that whole
    /// tiles can be read and written past the last interior voxel.
    stride: usize,
    start: usize,
    end: usize,
    offsets: [isize; 27],
}

impl PadGeom {
    fn new(shape: Shape3) -> Self {
        let padded = [shape[0] + 2, shape[1] + 2, shape[2] + 2];
        let plane = (padded[1] * padded[2]) as isize;
        let row = padded[2] as isize;
        let mut offsets = [0isize; 27];
        let mut k = 0;
        for dz in -1..=1isize {
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    offsets[k] = dz * plane + dy * row + dx;
                    k += 1;
                }
            }
        }
        let idx = |z: usize, y: usize, x: usize| (z * padded[1] + y) * padded[2] + x;
        Self {
            shape,
            padded,
            stride: spatial(padded) + 2 * TILE,
            start: idx(1, 1, 1),
            end: idx(shape[0], shape[1], shape[2]) + 1,
            offsets,
        }
    }

    fn pad<T: Real>(&self, f: &Feat<T>) -> Vec<T> {
        let mut out = vec![T::zero(); f.channels * self.stride];
        let [d, h, w] = self.shape;
        for c in 0..f.channels {
            let src = f.channel(c);
            let dst = &mut out[c * self.stride..(c + 1) * self.stride];
            for z in 0..d {
                for y in 0..h {
                    let s = (z * h + y) * w;
                    let t = ((z + 1) * self.padded[1] + y + 1) * self.padded[2] + 1;
                    dst[t..t + w].copy_from_slice(&src[s..s + w]);
                }
            }
        }
        out
    }

    fn unpad<T: Real>(&self, buf: &[T], channels: usize) -> Feat<T> {
        let [d, h, w] = self.shape;
        let mut out = Feat::zeros(channels, self.shape);
        for c in 0..channels {
            let src = &buf[c * self.stride..(c + 1) * self.stride];
            let dst = out.channel_mut(c);
            for z in 0..d {
                for y in 0..h {
                    let s = ((z + 1) * self.padded[1] + y + 1) * self.padded[2] + 1;
                    let t = (z * h + y) * w;
                    dst[t..t + w].copy_from_slice(&src[s..s + w]);
                }
            }
        }
        out
    }
}

const TILE: usize = 8;

/// `out[o][p] = sum_i sum_k w[o][i][k] * src[i][p + offsets[k]]` for every
/// padded position `p` in `start..end` (rounded up to whole tiles).
fn correlate27<T: Real>(
    src: &[T],
    n_in: usize,
    w: &[T],
    n_out: usize,
    g: &PadGeom,
    offsets: &[isize; 27],
) -> Vec<T> {
    let mut out = vec![T::zero(); n_out * g.stride];
    if n_out % 8 == 0 {
        correlate27_blocked::<T, 8>(src, n_in, w, n_out, g, offsets, &mut out);
    } else if n_out % 4 == 0 {
        correlate27_blocked::<T, 4>(src, n_in, w, n_out, g, offsets, &mut out);
    } else {
        correlate27_blocked::<T, 1>(src, n_in, w, n_out, g, offsets, &mut out);
    }
    out
}

fn correlate27_blocked<T: Real, const CB: usize>(
    src: &[T],
    n_in: usize,
    w: &[T],
    n_out: usize,
    g: &PadGeom,
    offsets: &[isize; 27],
    out: &mut [T],
) {
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2, checked above.
        return unsafe { correlate27_avx2::<T, CB>(src, n_in, w, n_out, g, offsets, out) };
    }
    correlate27_body::<T, CB>(src, n_in, w, n_out, g, offsets, out)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn correlate27_avx2<T: Real, const CB: usize>(
    src: &[T],
    n_in: usize,
    w: &[T],
    n_out: usize,
    g: &PadGeom,
    offsets: &[isize; 27],
    out: &mut [T],
) {
    correlate27_body::<T, CB>(src, n_in, w, n_out, g, offsets, out)
}

#[inline(always)]
fn correlate27_body<T: Real, const CB: usize>(
    src: &[T],
    n_in: usize,
    w: &[T],
    n_out: usize,
    g: &PadGeom,
    offsets: &[isize; 27],
    out: &mut [T],
) {
    let stride = g.stride;
    let per_block = n_in * 27 * CB;
    // packed[blk][i][k][j] = w[blk * CB + j][i][k]
    let mut packed = vec![T::zero(); n_out * n_in * 27];
    for blk in 0..n_out / CB {
        for i in 0..n_in {
            for k in 0..27 {
                for j in 0..CB {
                    packed[blk * per_block + (i * 27 + k) * CB + j] =
                        w[((blk * CB + j) * n_in + i) * 27 + k];
                }
            }
        }
    }
    for blk in 0..n_out / CB {
        let wb = &packed[blk * per_block..(blk + 1) * per_block];
        let mut p0 = g.start;
        while p0 < g.end {
            let mut acc = [[T::zero(); TILE]; CB];
            for i in 0..n_in {
                let si = &src[i * stride..(i + 1) * stride];
                let wi = &wb[i * 27 * CB..(i + 1) * 27 * CB];
                for k in 0..27 {
                    let base = (p0 as isize + offsets[k]) as usize;
                    let s: &[T; TILE] = si[base..base + TILE].try_into().unwrap();
                    let wk: &[T; CB] = wi[k * CB..(k + 1) * CB].try_into().unwrap();
                    for j in 0..CB {
                        for l in 0..TILE {
                            acc[j][l] += wk[j] * s[l];
                        }
                    }
                }
            }
            for (j, a) in acc.iter().enumerate() {
                let o = (blk * CB + j) * stride + p0;
                out[o..o + TILE].copy_from_slice(a);
            }
            p0 += TILE;
        }
    }
}

/// `dw[o][i][k] += sum_p gout[o][p] * src[i][p + offsets[k]]` over padded
/// interior positions; `gout` must be zero outside the interior.
fn weight_grad27<T: Real>(gout: &[T], n_out: usize, src: &[T], n_in: usize, g: &PadGeom, dw: &mut [T]) {
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2, checked above.
        return unsafe { weight_grad27_avx2(gout, n_out, src, n_in, g, dw) };
    }
    weight_grad27_body(gout, n_out, src, n_in, g, dw)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn weight_grad27_avx2<T: Real>(
    gout: &[T],
    n_out: usize,
    src: &[T],
    n_in: usize,
    g: &PadGeom,
    dw: &mut [T],
) {
    weight_grad27_body(gout, n_out, src, n_in, g, dw)
}

#[inline(always)]
fn weight_grad27_body<T: Real>(gout: &[T], n_out: usize, src: &[T], n_in: usize, g: &PadGeom, dw: &mut [T]) {
    let stride = g.stride;
    for o in 0..n_out {
        let go = &gout[o * stride + g.start..o * stride + g.end];
        for i in 0..n_in {
            let si = &src[i * stride..(i + 1) * stride];
            let dwk = &mut dw[(o * n_in + i) * 27..(o * n_in + i + 1) * 27];
            for (k, &off) in g.offsets.iter().enumerate() {
                let lo = (g.start as isize + off) as usize;
                dwk[k] += dot(go, &si[lo..lo + go.len()]);
            }
        }
    }
}

/// Convolution flavours used by the backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvKind {
    /// 3x3x3, stride 1, zero padding 1. Weights `[out][in][27]`.
    Same3,
    /// 2x2x2, stride 2. Weights `[out][in][8]`.
    Down2,
    /// Transposed 2x2x2, stride 2. Weights `[in][out][8]`.
    Up2,
    /// 1x1x1. Weights `[out][in]`.
    Point,
}

impl ConvKind {
    pub fn taps(self) -> usize {
        match self {
            ConvKind::Same3 => 27,
            ConvKind::Down2 | ConvKind::Up2 => 8,
            ConvKind::Point => 1,
        }
    }

    pub fn out_shape(self, s: Shape3) -> Shape3 {
        match self {
            ConvKind::Same3 | ConvKind::Point => s,
            ConvKind::Down2 => [s[0] / 2, s[1] / 2, s[2] / 2],
            ConvKind::Up2 => [s[0] * 2, s[1] * 2, s[2] * 2],
        }
    }
}

/// Saved forward state needed by [`conv_backward`].
#[derive(Clone, Debug)]
pub enum ConvCache<T> {
    Padded { buf: Vec<T>, shape: Shape3, channels: usize },
    Columns { col: Vec<T>, shape: Shape3, channels: usize },
    Input(Feat<T>),
}

pub fn conv_forward<T: Real>(
    kind: ConvKind,
    x: &Feat<T>,
    w: &[T],
    b: &[T],
    cout: usize,
) -> (Feat<T>, ConvCache<T>) {
    let cin = x.channels;
    debug_assert_eq!(w.len(), cin * cout * kind.taps());
    debug_assert_eq!(b.len(), cout);
    match kind {
        ConvKind::Same3 => {
            let g = PadGeom::new(x.shape);
            let xp = g.pad(x);
            let op = correlate27(&xp, cin, w, cout, &g, &g.offsets);
            let mut out = g.unpad(&op, cout);
            add_bias(&mut out, b);
            (
                out,
                ConvCache::Padded {
                    buf: xp,
                    shape: x.shape,
                    channels: cin,
                },
            )
        }
        ConvKind::Down2 => {
            let os = kind.out_shape(x.shape);
            let col = im2col2(x);
            let mut out = Feat::zeros(cout, os);
            for co in 0..cout {
                let dst = out.channel_mut(co);
                for (r, row) in col.chunks_exact(dst.len()).enumerate() {
                    axpy(dst, w[co * cin * 8 + r], row);
                }
            }
            add_bias(&mut out, b);
            (
                out,
                ConvCache::Columns {
                    col,
                    shape: x.shape,
                    channels: cin,
                },
            )
        }
        ConvKind::Up2 => {
            let n = x.spatial();
            // sub[k][co] holds the output voxels at sub-grid offset k
            let mut sub = vec![T::zero(); 8 * cout * n];
            for k in 0..8 {
                for co in 0..cout {
                    let dst = &mut sub[(k * cout + co) * n..(k * cout + co + 1) * n];
                    for ci in 0..cin {
                        axpy(dst, w[(ci * cout + co) * 8 + k], x.channel(ci));
                    }
                }
            }
            let mut out = Feat::zeros(cout, kind.out_shape(x.shape));
            col2im2(&sub, PlaneOrder::TapMajor, x.shape, &mut out);
            add_bias(&mut out, b);
            (out, ConvCache::Input(x.clone()))
        }
        ConvKind::Point => {
            let mut out = Feat::zeros(cout, x.shape);
            for co in 0..cout {
                let dst = out.channel_mut(co);
                for ci in 0..cin {
                    axpy(dst, w[co * cin + ci], x.channel(ci));
                }
            }
            add_bias(&mut out, b);
            (out, ConvCache::Input(x.clone()))
        }
    }
}

/// Splits each channel into its eight stride-2 sub-grids:
/// `out[(c * 8 + k)][q] = x[c][2q + offset(k)]`.
fn im2col2<T: Real>(x: &Feat<T>) -> Vec<T> {
    let [_, ih, iw] = x.shape;
    let os = ConvKind::Down2.out_shape(x.shape);
    let [d, h, w] = os;
    let n = spatial(os);
    let mut col = vec![T::zero(); x.channels * 8 * n];
    for c in 0..x.channels {
        let src = x.channel(c);
        for k in 0..8 {
            let (kz, ky, kx) = (k >> 2, (k >> 1) & 1, k & 1);
            let dst = &mut col[(c * 8 + k) * n..(c * 8 + k + 1) * n];
            for z in 0..d {
                for y in 0..h {
                    let srow = ((2 * z + kz) * ih + 2 * y + ky) * iw + kx;
                    let drow = (z * h + y) * w;
                    for (xx, v) in dst[drow..drow + w].iter_mut().enumerate() {
                        *v = src[srow + 2 * xx];
                    }
                }
            }
        }
    }
    col
}

/// Same split as [`im2col2`] applied to a feature map at the fine resolution,
/// laid out as `[k][c][q]`.
fn gather2<T: Real>(x: &Feat<T>) -> Vec<T> {
    let col = im2col2(x);
    let n = col.len() / (8 * x.channels);
    let mut out = vec![T::zero(); col.len()];
    for c in 0..x.channels {
        for k in 0..8 {
            let s = (c * 8 + k) * n;
            let t = (k * x.channels + c) * n;
            out[t..t + n].copy_from_slice(&col[s..s + n]);
        }
    }
    out
}

#[derive(Clone, Copy)]
enum PlaneOrder {
    /// `[channel][tap][q]`, as produced by [`im2col2`].
    ChannelMajor,
    /// `[tap][channel][q]`.
    TapMajor,
}

/// Adds stride-2 sub-grid planes back into a fine-resolution map.
fn col2im2<T: Real>(planes: &[T], order: PlaneOrder, coarse: Shape3, out: &mut Feat<T>) {
    let [d, h, w] = coarse;
    let [_, oh, ow] = out.shape;
    let n = spatial(coarse);
    let channels = out.channels;
    for c in 0..channels {
        for k in 0..8 {
            let (kz, ky, kx) = (k >> 2, (k >> 1) & 1, k & 1);
            let base = match order {
                PlaneOrder::ChannelMajor => (c * 8 + k) * n,
                PlaneOrder::TapMajor => (k * channels + c) * n,
            };
            let src = &planes[base..base + n];
            let dst = out.channel_mut(c);
            for z in 0..d {
                for y in 0..h {
                    let drow = ((2 * z + kz) * oh + 2 * y + ky) * ow + kx;
                    let srow = (z * h + y) * w;
                    for xx in 0..w {
                        dst[drow + 2 * xx] += src[srow + xx];
                    }
                }
            }
        }
    }
}

fn add_bias<T: Real>(out: &mut Feat<T>, b: &[T]) {
    for (c, &bv) in b.iter().enumerate() {
        if bv != T::zero() {
            for v in out.channel_mut(c) {
                *v += bv;
            }
        }
    }
}

/// Accumulates weight and bias gradients into `dw`/`db` and returns the
/// gradient with respect to the layer input.
pub fn conv_backward<T: Real>(
    kind: ConvKind,
    cache: &ConvCache<T>,
    gout: &Feat<T>,
    w: &[T],
    dw: &mut [T],
    db: &mut [T],
) -> Feat<T> {
    let cout = gout.channels;
    for (co, d) in db.iter_mut().enumerate() {
        *d += sum(gout.channel(co));
    }
    match (kind, cache) {
        (
            ConvKind::Same3,
            ConvCache::Padded {
                buf: xp,
                shape,
                channels: cin,
            },
        ) => {
            let cin = *cin;
            let g = PadGeom::new(*shape);
            let gp = g.pad(gout);
            // input gradient: correlation with transposed weights and mirrored taps
            let mut wt = vec![T::zero(); w.len()];
            for co in 0..cout {
                for ci in 0..cin {
                    let (src, dst) = ((co * cin + ci) * 27, (ci * cout + co) * 27);
                    wt[dst..dst + 27].copy_from_slice(&w[src..src + 27]);
                }
            }
            let mirrored = g.offsets.map(|o| -o);
            let gin = correlate27(&gp, cout, &wt, cin, &g, &mirrored);
            weight_grad27(&gp, cout, xp, cin, &g, dw);
            g.unpad(&gin, cin)
        }
        (
            ConvKind::Down2,
            ConvCache::Columns {
                col,
                shape,
                channels: cin,
            },
        ) => {
            let cin = *cin;
            let n = gout.spatial();
            let mut dcol = vec![T::zero(); cin * 8 * n];
            for co in 0..cout {
                let go = gout.channel(co);
                for (r, (row, drow)) in col.chunks_exact(n).zip(dcol.chunks_exact_mut(n)).enumerate() {
                    let idx = co * cin * 8 + r;
                    dw[idx] += dot(go, row);
                    axpy(drow, w[idx], go);
                }
            }
            let mut gin = Feat::zeros(cin, *shape);
            col2im2(&dcol, PlaneOrder::ChannelMajor, gout.shape, &mut gin);
            gin
        }
        (ConvKind::Up2, ConvCache::Input(x)) => {
            let cin = x.channels;
            let n = x.spatial();
            let gsub = gather2(gout);
            let mut gin = Feat::zeros(cin, x.shape);
            for ci in 0..cin {
                for k in 0..8 {
                    for co in 0..cout {
                        let g = &gsub[(k * cout + co) * n..(k * cout + co + 1) * n];
                        let idx = (ci * cout + co) * 8 + k;
                        dw[idx] += dot(g, x.channel(ci));
                        axpy(gin.channel_mut(ci), w[idx], g);
                    }
                }
            }
            gin
        }
        (ConvKind::Point, ConvCache::Input(x)) => {
            let cin = x.channels;
            let mut gin = Feat::zeros(cin, x.shape);
            for co in 0..cout {
                let go = gout.channel(co);
                for ci in 0..cin {
                    let idx = co * cin + ci;
                    dw[idx] += dot(go, x.channel(ci));
                    axpy(gin.channel_mut(ci), w[idx], go);
                }
            }
            gin
        }
        (k, _) => unreachable!("cache does not match conv kind {k:?}"),
    }
}

pub const GN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct NormCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<f64>,
    groups: usize,
}

/// Group normalisation with per-channel affine parameters.
pub fn group_norm_forward<T: Real>(
    x: &Feat<T>,
    groups: usize,
    gamma: &[T],
    beta: &[T],
) -> (Feat<T>, NormCache<T>) {
    let c = x.channels;
    assert!(groups > 0 && c % groups == 0, "{c} channels not divisible into {groups} groups");
    let n = x.spatial();
    let per = (c / groups) * n;
    let mut xhat = vec![T::zero(); x.data.len()];
    let mut inv_std = Vec::with_capacity(groups);
    for g in 0..groups {
        let seg = &x.data[g * per..(g + 1) * per];
        let mean = seg.iter().map(|v| v.as_f64()).sum::<f64>() / per as f64;
        let var = seg
            .iter()
            .map(|v| {
                let d = v.as_f64() - mean;
                d * d
            })
            .sum::<f64>()
            / per as f64;
        let is = 1.0 / (var + GN_EPS).sqrt();
        inv_std.push(is);
        let (m, s) = (T::of(mean), T::of(is));
        for (o, v) in xhat[g * per..(g + 1) * per].iter_mut().zip(seg) {
            *o = (*v - m) * s;
        }
    }
    let mut out = Feat::from_vec(c, x.shape, xhat.clone());
    for ch in 0..c {
        let (ga, be) = (gamma[ch], beta[ch]);
        for v in out.channel_mut(ch) {
            *v = ga * *v + be;
        }
    }
    (
        out,
        NormCache {
            xhat,
            inv_std,
            groups,
        },
    )
}

pub fn group_norm_backward<T: Real>(
    cache: &NormCache<T>,
    gout: &Feat<T>,
    gamma: &[T],
    dgamma: &mut [T],
    dbeta: &mut [T],
) -> Feat<T> {
    let c = gout.channels;
    let n = gout.spatial();
    let per = (c / cache.groups) * n;
    let mut dxhat = vec![T::zero(); gout.data.len()];
    for ch in 0..c {
        let go = gout.channel(ch);
        let xh = &cache.xhat[ch * n..(ch + 1) * n];
        dgamma[ch] += dot(go, xh);
        dbeta[ch] += sum(go);
        let ga = gamma[ch];
        for (d, g) in dxhat[ch * n..(ch + 1) * n].iter_mut().zip(go) {
            *d = *g * ga;
        }
    }
    let mut gin = Feat::zeros(c, gout.shape);
    for g in 0..cache.groups {
        let r = g * per..(g + 1) * per;
        let dx = &dxhat[r.clone()];
        let xh = &cache.xhat[r.clone()];
        let m1 = dx.iter().map(|v| v.as_f64()).sum::<f64>() / per as f64;
        let m2 = dx
            .iter()
            .zip(xh)
            .map(|(a, b)| a.as_f64() * b.as_f64())
            .sum::<f64>()
            / per as f64;
        let (m1, m2, is) = (T::of(m1), T::of(m2), T::of(cache.inv_std[g]));
        for ((o, d), x) in gin.data[r].iter_mut().zip(dx).zip(xh) {
            *o = is * (*d - m1 - *x * m2);
        }
    }
    gin
}

/// SiLU activation `x * sigmoid(x)`; smooth, so finite-difference checks stay
/// well conditioned.
pub fn silu_forward<T: Real>(x: &mut Feat<T>) -> Vec<T> {
    let pre = x.data.clone();
    for v in &mut x.data {
        let s = T::one() / (T::one() + (-*v).exp());
        *v = *v * s;
    }
    pre
}

pub fn silu_backward<T: Real>(pre: &[T], g: &mut Feat<T>) {
    for (gv, &x) in g.data.iter_mut().zip(pre) {
        let s = T::one() / (T::one() + (-x).exp());
        *gv = *gv * s * (T::one() + x * (T::one() - s));
    }
}
