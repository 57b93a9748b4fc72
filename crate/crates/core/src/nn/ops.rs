//! Convolution kernels and their adjoints on channel-major tensors.
//!
//! Convolutions pad the input once and then treat the padded grid as one
//! flat array: each kernel tap becomes a constant offset, so the inner loop
//! is a contiguous multiply-add regardless of row length. Positions that
//! fall in the padding are computed and thrown away. Stride-2 convolutions
//! are first split into their eight parity phases to get the same form.
//!
//! Every output voxel accumulates its terms in the same order (bias, then
//! input channel, then kernel tap in z-y-x order) wherever it sits in the
//! grid, which makes results independent of how a volume is tiled.

use super::scalar::{axpy, dot, Scalar};
use crate::volume::{voxel_count, Shape};

/// Channel-major activation tensor: `channels` consecutive x-fastest grids.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub channels: usize,
    pub shape: Shape,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(channels: usize, shape: Shape) -> Self {
        Self {
            channels,
            shape,
            data: vec![T::zero(); channels * voxel_count(shape)],
        }
    }

    pub fn from_vec(channels: usize, shape: Shape, data: Vec<T>) -> Self {
        assert_eq!(data.len(), channels * voxel_count(shape), "tensor size");
        Self { channels, shape, data }
    }

    #[inline]
    pub fn voxels(&self) -> usize {
        voxel_count(self.shape)
    }

    #[inline]
    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.voxels();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }
}

#[inline]
fn padded_dims(shape: Shape, pad: usize) -> [usize; 3] {
    [shape[0] + 2 * pad, shape[1] + 2 * pad, shape[2] + 2 * pad]
}

#[inline]
fn flat(layout: [usize; 3], p: [usize; 3]) -> usize {
    p[0] + layout[0] * (p[1] + layout[1] * p[2])
}

/// Places every channel of `t` into a zero grid of extent `layout`, with the
/// tensor's origin at `lo`. Channels are `voxel_count(layout)` apart.
fn embed<T: Scalar>(t: &Tensor<T>, layout: [usize; 3], lo: [usize; 3]) -> Vec<T> {
    let s = t.shape;
    let ln = voxel_count(layout);
    let mut out = vec![T::zero(); t.channels * ln];
    for c in 0..t.channels {
        let src = t.channel(c);
        let dst = &mut out[c * ln..(c + 1) * ln];
        for z in 0..s[2] {
            for y in 0..s[1] {
                let d = flat(layout, [lo[0], lo[1] + y, lo[2] + z]);
                let from = s[0] * (y + s[1] * z);
                dst[d..d + s[0]].copy_from_slice(&src[from..from + s[0]]);
            }
        }
    }
    out
}

/// Copies the `shape` box whose corner sits at flat index `origin` of a grid
/// with extent `layout` into `dst`.
fn gather<T: Scalar>(buf: &[T], layout: [usize; 3], origin: usize, shape: Shape, dst: &mut [T]) {
    for z in 0..shape[2] {
        for y in 0..shape[1] {
            let q = origin + flat(layout, [0, y, z]);
            let d = shape[0] * (y + shape[1] * z);
            dst[d..d + shape[0]].copy_from_slice(&buf[q..q + shape[0]]);
        }
    }
}

const LANES: usize = 32;
const BLOCK: usize = 4;

/// `out[c][q] = bias[c] + Σ_j w[c][j] · src[starts[j] + q]` for `q < len`,
/// where `w` is `[cout][starts.len()]` and `out` is `[cout][len]`.
///
/// Terms are added in `j` order for every `q`, so a voxel's value does not
/// depend on where it falls within the range.
fn flat_conv<T: Scalar>(src: &[T], starts: &[usize], w: &[T], bias: &[T], len: usize, out: &mut [T]) {
    let nt = starts.len();
    let cout = bias.len();
    debug_assert_eq!(w.len(), cout * nt);
    debug_assert_eq!(out.len(), cout * len);
    let mut co = 0;
    while co < cout {
        let cb = (cout - co).min(BLOCK);
        // Tap-major copy of the weights so one slice serves all cb channels.
        let mut wb = vec![T::zero(); nt * cb];
        for c in 0..cb {
            for j in 0..nt {
                wb[j * cb + c] = w[(co + c) * nt + j];
            }
        }
        let wb = &wb[..];
        let bb = &bias[co..co + cb];
        let ob = &mut out[co * len..(co + cb) * len];
        match cb {
            4 => conv_block::<T, 4>(src, starts, wb, bb, len, ob),
            3 => conv_block::<T, 3>(src, starts, wb, bb, len, ob),
            2 => conv_block::<T, 2>(src, starts, wb, bb, len, ob),
            _ => conv_block::<T, 1>(src, starts, wb, bb, len, ob),
        }
        co += cb;
    }
}

/// `wt` is tap-major: `[starts.len()][CB]`.
fn conv_block<T: Scalar, const CB: usize>(src: &[T], starts: &[usize], wt: &[T], bias: &[T], len: usize, out: &mut [T]) {
    let mut q = 0;
    while q + LANES <= len {
        let mut acc = [[T::zero(); LANES]; CB];
        for c in 0..CB {
            acc[c] = [bias[c]; LANES];
        }
        for (j, &s) in starts.iter().enumerate() {
            let x: &[T; LANES] = src[s + q..s + q + LANES].try_into().expect("lane slice");
            let wj: &[T; CB] = wt[j * CB..(j + 1) * CB].try_into().expect("weight slice");
            for c in 0..CB {
                for l in 0..LANES {
                    acc[c][l] = wj[c].mul_add(x[l], acc[c][l]);
                }
            }
        }
        for c in 0..CB {
            out[c * len + q..c * len + q + LANES].copy_from_slice(&acc[c]);
        }
        q += LANES;
    }
    if q < len {
        let r = len - q;
        for c in 0..CB {
            let dst = &mut out[c * len + q..c * len + len];
            dst.iter_mut().for_each(|v| *v = bias[c]);
            for (j, &s) in starts.iter().enumerate() {
                axpy(dst, wt[j * CB + c], &src[s + q..s + q + r]);
            }
        }
    }
}

/// `gw[c][j] += Σ_{q<len} g[c·stride + q] · src[starts[j] + q]`.
fn flat_corr<T: Scalar>(g: &[T], stride: usize, src: &[T], starts: &[usize], len: usize, gw: &mut [T]) {
    let nt = starts.len();
    let cout = gw.len() / nt;
    let (cfull, tfull) = (cout / BLOCK * BLOCK, nt / BLOCK * BLOCK);
    for c0 in (0..cfull).step_by(BLOCK) {
        for j0 in (0..tfull).step_by(BLOCK) {
            let mut acc = [[[T::zero(); 16]; BLOCK]; BLOCK];
            let mut q = 0;
            while q + 16 <= len {
                let mut gs = [[T::zero(); 16]; BLOCK];
                for c in 0..BLOCK {
                    let at = (c0 + c) * stride + q;
                    gs[c].copy_from_slice(&g[at..at + 16]);
                }
                for t in 0..BLOCK {
                    let s = starts[j0 + t] + q;
                    let x: &[T; 16] = src[s..s + 16].try_into().expect("lanes");
                    for c in 0..BLOCK {
                        for l in 0..16 {
                            acc[c][t][l] = gs[c][l].mul_add(x[l], acc[c][t][l]);
                        }
                    }
                }
                q += 16;
            }
            for c in 0..BLOCK {
                let gc = &g[(c0 + c) * stride..(c0 + c) * stride + len];
                for t in 0..BLOCK {
                    let s = starts[j0 + t];
                    let tail = dot(&gc[q..], &src[s + q..s + len]);
                    let a = &acc[c][t];
                    let head = (0..8).map(|l| a[l] + a[l + 8]).fold(T::zero(), |u, v| u + v);
                    let i = (c0 + c) * nt + j0 + t;
                    gw[i] = gw[i] + head + tail;
                }
            }
        }
    }
    for c in 0..cout {
        let gc = &g[c * stride..c * stride + len];
        let taps = if c < cfull { tfull..nt } else { 0..nt };
        for j in taps {
            let s = starts[j];
            gw[c * nt + j] = gw[c * nt + j] + dot(gc, &src[s..s + len]);
        }
    }
}

/// Geometry shared by the stride-1 forward and backward passes: the input
/// is zero padded by `k/2` and every output voxel `p` maps to flat index
/// `q0 + flat(padded, p)`.
struct SameGeometry {
    layout: [usize; 3],
    padded: usize,
    q0: usize,
    len: usize,
    offsets: Vec<isize>,
}

impl SameGeometry {
    fn new(shape: Shape, k: usize) -> Self {
        let pad = k / 2;
        let pd = padded_dims(shape, pad);
        let q0 = flat(pd, [pad; 3]);
        let q1 = flat(pd, [shape[0] + pad - 1, shape[1] + pad - 1, shape[2] + pad - 1]) + 1;
        let mut offsets = Vec::with_capacity(k * k * k);
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let o = (kx as isize - pad as isize)
                        + pd[0] as isize * (ky as isize - pad as isize)
                        + (pd[0] * pd[1]) as isize * (kz as isize - pad as isize);
                    offsets.push(o);
                }
            }
        }
        Self {
            layout: pd,
            padded: voxel_count(pd),
            q0,
            len: q1 - q0,
            offsets,
        }
    }

    /// Source start of every (channel, tap) pair, channel-major.
    fn starts(&self, channels: usize, sign: isize) -> Vec<usize> {
        (0..channels)
            .flat_map(|c| {
                let base = (c * self.padded + self.q0) as isize;
                self.offsets.iter().map(move |&o| (base + sign * o) as usize)
            })
            .collect()
    }

    fn pad(&self, t: &Tensor<impl Scalar>) -> usize {
        (self.layout[0] - t.shape[0]) / 2
    }
}

/// Stride-1 convolution with odd kernel `k` and zero "same" padding.
///
/// `weight` is laid out `[cout][cin][kz][ky][kx]`.
pub fn conv_same<T: Scalar>(input: &Tensor<T>, weight: &[T], bias: &[T], cout: usize, k: usize) -> Tensor<T> {
    let cin = input.channels;
    debug_assert_eq!(weight.len(), cout * cin * k * k * k);
    let g = SameGeometry::new(input.shape, k);
    let pad = g.pad(input);
    let padded = embed(input, g.layout, [pad; 3]);
    let mut acc = vec![T::zero(); cout * g.len];
    flat_conv(&padded, &g.starts(cin, 1), weight, bias, g.len, &mut acc);
    let mut out = Tensor::zeros(cout, input.shape);
    for co in 0..cout {
        gather(&acc[co * g.len..], g.layout, 0, input.shape, out.channel_mut(co));
    }
    out
}

/// Adjoint of [`conv_same`]. Accumulates into `grad_weight`/`grad_bias` and
/// returns the input gradient when requested.
pub fn conv_same_backward<T: Scalar>(
    input: &Tensor<T>,
    grad_out: &Tensor<T>,
    weight: &[T],
    k: usize,
    grad_weight: &mut [T],
    grad_bias: &mut [T],
    want_input_grad: bool,
) -> Option<Tensor<T>> {
    let cin = input.channels;
    let cout = grad_out.channels;
    let taps = k * k * k;
    let g = SameGeometry::new(input.shape, k);
    let pad = g.pad(input);
    let padded = embed(input, g.layout, [pad; 3]);
    let gpad = embed(grad_out, g.layout, [pad; 3]);
    for co in 0..cout {
        grad_bias[co] = grad_bias[co] + sum(grad_out.channel(co));
    }
    flat_corr(&gpad[g.q0..], g.padded, &padded, &g.starts(cin, 1), g.len, grad_weight);
    if !want_input_grad {
        return None;
    }
    let mut wt = vec![T::zero(); weight.len()];
    for co in 0..cout {
        for ci in 0..cin {
            for t in 0..taps {
                wt[(ci * cout + co) * taps + t] = weight[(co * cin + ci) * taps + t];
            }
        }
    }
    let mut acc = vec![T::zero(); cin * g.len];
    flat_conv(&gpad, &g.starts(cout, -1), &wt, &vec![T::zero(); cin], g.len, &mut acc);
    let mut grad_in = Tensor::zeros(cin, input.shape);
    for ci in 0..cin {
        gather(&acc[ci * g.len..], g.layout, 0, input.shape, grad_in.channel_mut(ci));
    }
    Some(grad_in)
}

/// Geometry of the stride-2 convolution. The input is zero padded by one
/// voxel and split into its eight parity phases, each of extent
/// `out + 1`; tap `k` along an axis then reads phase `k % 2` at offset
/// `k / 2`, which turns the strided convolution into a stride-1 one.
struct DownGeometry {
    out: Shape,
    padded: [usize; 3],
    phase: [usize; 3],
    phase_len: usize,
    len: usize,
}

impl DownGeometry {
    fn new(shape: Shape) -> Self {
        debug_assert!(shape.iter().all(|v| v % 2 == 0));
        let out = [shape[0] / 2, shape[1] / 2, shape[2] / 2];
        let phase = [out[0] + 1, out[1] + 1, out[2] + 1];
        Self {
            out,
            padded: padded_dims(shape, 1),
            phase,
            phase_len: voxel_count(phase),
            len: flat(phase, [out[0] - 1, out[1] - 1, out[2] - 1]) + 1,
        }
    }

    fn starts(&self, cin: usize) -> Vec<usize> {
        let mut v = Vec::with_capacity(cin * 27);
        for ci in 0..cin {
            for kz in 0..3 {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let p = (kx % 2) + 2 * (ky % 2) + 4 * (kz % 2);
                        v.push((ci * 8 + p) * self.phase_len + flat(self.phase, [kx / 2, ky / 2, kz / 2]));
                    }
                }
            }
        }
        v
    }
}

fn split_phases<T: Scalar>(input: &Tensor<T>, g: &DownGeometry) -> Vec<T> {
    let padded = embed(input, g.padded, [1; 3]);
    let pn = voxel_count(g.padded);
    let mut phases = vec![T::zero(); input.channels * 8 * g.phase_len];
    for ci in 0..input.channels {
        let src = &padded[ci * pn..(ci + 1) * pn];
        for p in 0..8 {
            let (px, py, pz) = (p & 1, (p >> 1) & 1, p >> 2);
            let dst = &mut phases[(ci * 8 + p) * g.phase_len..(ci * 8 + p + 1) * g.phase_len];
            for z in 0..g.phase[2] {
                for y in 0..g.phase[1] {
                    let row = flat(g.padded, [px, 2 * y + py, 2 * z + pz]);
                    let d = flat(g.phase, [0, y, z]);
                    for x in 0..g.phase[0] {
                        dst[d + x] = src[row + 2 * x];
                    }
                }
            }
        }
    }
    phases
}

/// 3³ convolution, stride 2, zero padding 1. Input extents must be even.
pub fn conv_down<T: Scalar>(input: &Tensor<T>, weight: &[T], bias: &[T], cout: usize) -> Tensor<T> {
    let cin = input.channels;
    let g = DownGeometry::new(input.shape);
    let phases = split_phases(input, &g);
    let mut acc = vec![T::zero(); cout * g.len];
    flat_conv(&phases, &g.starts(cin), weight, bias, g.len, &mut acc);
    let mut out = Tensor::zeros(cout, g.out);
    for co in 0..cout {
        gather(&acc[co * g.len..], g.phase, 0, g.out, out.channel_mut(co));
    }
    out
}

pub fn conv_down_backward<T: Scalar>(
    input: &Tensor<T>,
    grad_out: &Tensor<T>,
    weight: &[T],
    grad_weight: &mut [T],
    grad_bias: &mut [T],
    want_input_grad: bool,
) -> Option<Tensor<T>> {
    let cin = input.channels;
    let cout = grad_out.channels;
    let s = input.shape;
    let g = DownGeometry::new(s);
    let phases = split_phases(input, &g);
    for co in 0..cout {
        grad_bias[co] = grad_bias[co] + sum(grad_out.channel(co));
    }
    let gphase = embed(grad_out, g.phase, [0; 3]);
    flat_corr(&gphase, g.phase_len, &phases, &g.starts(cin), g.len, grad_weight);
    if !want_input_grad {
        return None;
    }
    // Phase p of the padded input gradient at r collects w[k] · grad[r - k/2]
    // over the taps k of parity p; the gradient is shifted by one so that
    // r - k/2 never goes negative.
    let e = [g.out[0] + 2, g.out[1] + 2, g.out[2] + 2];
    let en = voxel_count(e);
    let gshift = embed(grad_out, e, [1; 3]);
    let len = flat(e, g.out) + 1;
    let mut padded_grad = vec![T::zero(); cin * voxel_count(g.padded)];
    let pn = voxel_count(g.padded);
    for p in 0..8 {
        let (px, py, pz) = (p & 1, (p >> 1) & 1, p >> 2);
        let ks = |par: usize| if par == 0 { vec![0, 2] } else { vec![1] };
        let mut taps = Vec::new();
        for kz in ks(pz) {
            for ky in ks(py) {
                for kx in ks(px) {
                    taps.push((kz * 9 + ky * 3 + kx, flat(e, [1 - kx / 2, 1 - ky / 2, 1 - kz / 2])));
                }
            }
        }
        let nt = taps.len();
        let starts: Vec<usize> = (0..cout).flat_map(|co| taps.iter().map(move |&(_, o)| co * en + o)).collect();
        let mut w = vec![T::zero(); cin * cout * nt];
        for ci in 0..cin {
            for co in 0..cout {
                for (j, &(k, _)) in taps.iter().enumerate() {
                    w[ci * cout * nt + co * nt + j] = weight[(co * cin + ci) * 27 + k];
                }
            }
        }
        let mut acc = vec![T::zero(); cin * len];
        flat_conv(&gshift, &starts, &w, &vec![T::zero(); cin], len, &mut acc);
        for ci in 0..cin {
            let src = &acc[ci * len..(ci + 1) * len];
            let dst = &mut padded_grad[ci * pn..(ci + 1) * pn];
            for z in 0..=g.out[2] {
                for y in 0..=g.out[1] {
                    let row = flat(g.padded, [px, 2 * y + py, 2 * z + pz]);
                    let r = flat(e, [0, y, z]);
                    for x in 0..=g.out[0] {
                        dst[row + 2 * x] = src[r + x];
                    }
                }
            }
        }
    }
    let mut grad_in = Tensor::zeros(cin, s);
    for ci in 0..cin {
        gather(&padded_grad[ci * pn..], g.padded, flat(g.padded, [1; 3]), s, grad_in.channel_mut(ci));
    }
    Some(grad_in)
}

/// Transposed convolution with a 2³ kernel and stride 2 (exact 2× upsampling).
///
/// `weight` is laid out `[cin][cout][dz][dy][dx]`.
pub fn conv_up<T: Scalar>(input: &Tensor<T>, weight: &[T], bias: &[T], cout: usize) -> Tensor<T> {
    let cin = input.channels;
    let s = input.shape;
    let os = [2 * s[0], 2 * s[1], 2 * s[2]];
    let n = input.voxels();
    let mut out = Tensor::zeros(cout, os);
    let mut tmp = vec![T::zero(); n];
    for co in 0..cout {
        for d in 0..8 {
            let (dx, dy, dz) = (d & 1, (d >> 1) & 1, d >> 2);
            tmp.iter_mut().for_each(|v| *v = bias[co]);
            for ci in 0..cin {
                axpy(&mut tmp, weight[(ci * cout + co) * 8 + d], input.channel(ci));
            }
            let dst = out.channel_mut(co);
            for z in 0..s[2] {
                for y in 0..s[1] {
                    let row = os[0] * ((2 * y + dy) + os[1] * (2 * z + dz)) + dx;
                    let src = &tmp[s[0] * (y + s[1] * z)..s[0] * (y + s[1] * z + 1)];
                    for (x, &v) in src.iter().enumerate() {
                        dst[row + 2 * x] = v;
                    }
                }
            }
        }
    }
    out
}

/// Gathers the `d`-th 2×2×2 phase of a fine grid onto the coarse grid.
fn gather_phase<T: Scalar>(fine: &[T], coarse: Shape, d: usize, dst: &mut [T]) {
    let (dx, dy, dz) = (d & 1, (d >> 1) & 1, d >> 2);
    let fs = [2 * coarse[0], 2 * coarse[1]];
    for z in 0..coarse[2] {
        for y in 0..coarse[1] {
            let row = fs[0] * ((2 * y + dy) + fs[1] * (2 * z + dz)) + dx;
            let out = &mut dst[coarse[0] * (y + coarse[1] * z)..coarse[0] * (y + coarse[1] * z + 1)];
            for (x, o) in out.iter_mut().enumerate() {
                *o = fine[row + 2 * x];
            }
        }
    }
}

pub fn conv_up_backward<T: Scalar>(
    input: &Tensor<T>,
    grad_out: &Tensor<T>,
    weight: &[T],
    grad_weight: &mut [T],
    grad_bias: &mut [T],
) -> Tensor<T> {
    let cin = input.channels;
    let cout = grad_out.channels;
    let n = input.voxels();
    let mut phases = vec![T::zero(); cout * 8 * n];
    for co in 0..cout {
        grad_bias[co] = grad_bias[co] + sum(grad_out.channel(co));
        for d in 0..8 {
            let at = (co * 8 + d) * n;
            gather_phase(grad_out.channel(co), input.shape, d, &mut phases[at..at + n]);
        }
    }
    let mut grad_in = Tensor::zeros(cin, input.shape);
    for ci in 0..cin {
        for co in 0..cout {
            for d in 0..8 {
                let ph = &phases[(co * 8 + d) * n..(co * 8 + d + 1) * n];
                let i = (ci * cout + co) * 8 + d;
                grad_weight[i] = grad_weight[i] + dot(input.channel(ci), ph);
                axpy(grad_in.channel_mut(ci), weight[i], ph);
            }
        }
    }
    grad_in
}

/// 1×1×1 convolution; `weight` is `[cout][cin]`.
pub fn conv_point<T: Scalar>(input: &Tensor<T>, weight: &[T], bias: &[T], cout: usize) -> Tensor<T> {
    let cin = input.channels;
    let mut out = Tensor::zeros(cout, input.shape);
    for co in 0..cout {
        let dst = out.channel_mut(co);
        dst.iter_mut().for_each(|v| *v = bias[co]);
        for ci in 0..cin {
            axpy(dst, weight[co * cin + ci], input.channel(ci));
        }
    }
    out
}

pub fn conv_point_backward<T: Scalar>(
    input: &Tensor<T>,
    grad_out: &Tensor<T>,
    weight: &[T],
    grad_weight: &mut [T],
    grad_bias: &mut [T],
) -> Tensor<T> {
    let cin = input.channels;
    let cout = grad_out.channels;
    let mut grad_in = Tensor::zeros(cin, input.shape);
    for co in 0..cout {
        let go = grad_out.channel(co);
        grad_bias[co] = grad_bias[co] + sum(go);
        for ci in 0..cin {
            let i = co * cin + ci;
            grad_weight[i] = grad_weight[i] + dot(input.channel(ci), go);
            axpy(grad_in.channel_mut(ci), weight[i], go);
        }
    }
    grad_in
}

pub fn relu_in_place<T: Scalar>(t: &mut Tensor<T>) {
    for v in t.data.iter_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Masks `grad` by `activated > 0`, where `activated` is a ReLU output.
pub fn relu_backward_in_place<T: Scalar>(grad: &mut Tensor<T>, activated: &Tensor<T>) {
    for (g, &a) in grad.data.iter_mut().zip(&activated.data) {
        if a <= T::zero() {
            *g = T::zero();
        }
    }
}

/// Softmax across channels at every voxel.
/// Exponent below which a softmax term is set to exactly zero (e^-27.6 is
/// about 1e-12 of the largest term). Keeps subnormal floats, which are very
/// slow on common CPUs, out of both passes.
pub const SOFTMAX_FLOOR_LN: f64 = -27.631;

pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let n = logits.voxels();
    let c = logits.channels;
    let mut out = logits.clone();
    let mut max = logits.channel(0).to_vec();
    for k in 1..c {
        for (m, &v) in max.iter_mut().zip(logits.channel(k)) {
            *m = m.max(v);
        }
    }
    let mut total = vec![T::zero(); n];
    let floor = T::of(SOFTMAX_FLOOR_LN);
    for k in 0..c {
        for ((o, &m), t) in out.channel_mut(k).iter_mut().zip(&max).zip(total.iter_mut()) {
            let d = *o - m;
            *o = if d < floor { T::zero() } else { d.exp() };
            *t = *t + *o;
        }
    }
    for k in 0..c {
        for (o, &t) in out.channel_mut(k).iter_mut().zip(&total) {
            *o = *o / t;
        }
    }
    out
}

pub(crate) fn sum<T: Scalar>(v: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = v.chunks_exact(8);
    let rem = chunks.remainder();
    for c in chunks {
        for k in 0..8 {
            acc[k] = acc[k] + c[k];
        }
    }
    let tail = rem.iter().fold(T::zero(), |a, &b| a + b);
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn at(t: &Tensor<f64>, c: usize, p: [isize; 3]) -> f64 {
        let s = t.shape;
        if (0..3).any(|a| p[a] < 0 || p[a] >= s[a] as isize) {
            return 0.0;
        }
        t.channel(c)[p[0] as usize + s[0] * (p[1] as usize + s[1] * p[2] as usize)]
    }

    /// Direct definition of a zero-padded strided convolution.
    fn naive_conv(input: &Tensor<f64>, w: &[f64], b: &[f64], cout: usize, k: usize, stride: usize) -> Tensor<f64> {
        let pad = (k / 2) as isize;
        let s = input.shape;
        let os = [s[0] / stride, s[1] / stride, s[2] / stride];
        let mut out = Tensor::zeros(cout, os);
        for co in 0..cout {
            for z in 0..os[2] {
                for y in 0..os[1] {
                    for x in 0..os[0] {
                        let mut acc = b[co];
                        for ci in 0..input.channels {
                            for kz in 0..k {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let p = [
                                            (stride * x) as isize + kx as isize - pad,
                                            (stride * y) as isize + ky as isize - pad,
                                            (stride * z) as isize + kz as isize - pad,
                                        ];
                                        acc += w[(((co * input.channels + ci) * k + kz) * k + ky) * k + kx] * at(input, ci, p);
                                    }
                                }
                            }
                        }
                        out.channel_mut(co)[x + os[0] * (y + os[1] * z)] = acc;
                    }
                }
            }
        }
        out
    }

    fn naive_up(input: &Tensor<f64>, w: &[f64], b: &[f64], cout: usize) -> Tensor<f64> {
        let s = input.shape;
        let os = [2 * s[0], 2 * s[1], 2 * s[2]];
        Tensor::from_vec(cout, os, {
            let mut v = Vec::new();
            for co in 0..cout {
                for z in 0..os[2] {
                    for y in 0..os[1] {
                        for x in 0..os[0] {
                            let d = (x % 2) + 2 * (y % 2) + 4 * (z % 2);
                            let src = [(x / 2) as isize, (y / 2) as isize, (z / 2) as isize];
                            let mut acc = b[co];
                            for ci in 0..input.channels {
                                acc += w[(ci * cout + co) * 8 + d] * at(input, ci, src);
                            }
                            v.push(acc);
                        }
                    }
                }
            }
            v
        })
    }

    fn close(a: &[f64], b: &[f64]) {
        assert_eq!(a.len(), b.len());
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            assert!((x - y).abs() < 1e-10, "index {i}: {x} vs {y}");
        }
    }

    fn setup(cin: usize, shape: Shape, seed: u64) -> (ChaCha8Rng, Tensor<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = random(&mut rng, cin * voxel_count(shape));
        (rng, Tensor::from_vec(cin, shape, data))
    }

    #[test]
    fn conv_same_matches_naive() {
        for (k, shape) in [(3, [5, 4, 6]), (1, [3, 3, 2]), (5, [6, 5, 4]), (3, [1, 1, 1])] {
            let (mut rng, input) = setup(2, shape, 11);
            let w = random(&mut rng, 3 * 2 * k * k * k);
            let b = random(&mut rng, 3);
            let fast = conv_same(&input, &w, &b, 3, k);
            close(&fast.data, &naive_conv(&input, &w, &b, 3, k, 1).data);
        }
        let (mut rng, input) = setup(3, [12, 9, 7], 15);
        let w = random(&mut rng, 6 * 3 * 27);
        let b = random(&mut rng, 6);
        close(&conv_same(&input, &w, &b, 6, 3).data, &naive_conv(&input, &w, &b, 6, 3, 1).data);
    }

    #[test]
    fn conv_down_matches_naive() {
        let (mut rng, input) = setup(2, [6, 4, 8], 12);
        let w = random(&mut rng, 3 * 2 * 27);
        let b = random(&mut rng, 3);
        close(&conv_down(&input, &w, &b, 3).data, &naive_conv(&input, &w, &b, 3, 3, 2).data);
    }

    #[test]
    fn conv_up_matches_naive() {
        let (mut rng, input) = setup(3, [2, 3, 2], 13);
        let w = random(&mut rng, 3 * 2 * 8);
        let b = random(&mut rng, 2);
        close(&conv_up(&input, &w, &b, 2).data, &naive_up(&input, &w, &b, 2).data);
    }

    #[test]
    fn softmax_normalizes() {
        let (_, logits) = setup(4, [3, 2, 2], 14);
        let p = softmax(&logits);
        for v in 0..p.voxels() {
            let s: f64 = (0..4).map(|c| p.channel(c)[v]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let zeros = Tensor::<f32>::zeros(4, [2, 2, 2]);
        assert!(softmax(&zeros).data.iter().all(|&v| v == 0.25));
    }

    /// Checks an op's adjoint through the identity <A x, g> = <x, A* g> and
    /// the weight gradient against central differences of <A_w x, g>.
    fn check_adjoint(
        forward: &dyn Fn(&Tensor<f64>, &[f64], &[f64]) -> Tensor<f64>,
        backward: &dyn Fn(&Tensor<f64>, &Tensor<f64>, &[f64], &mut [f64], &mut [f64]) -> Tensor<f64>,
        input: Tensor<f64>,
        wlen: usize,
        cout: usize,
        rng: &mut ChaCha8Rng,
    ) {
        let w = random(rng, wlen);
        let b = random(rng, cout);
        let out = forward(&input, &w, &b);
        let g = Tensor::from_vec(cout, out.shape, random(rng, out.data.len()));
        let mut gw = vec![0.0; wlen];
        let mut gb = vec![0.0; cout];
        let gi = backward(&input, &g, &w, &mut gw, &mut gb);
        let objective = |inp: &Tensor<f64>, w: &[f64], b: &[f64]| -> f64 {
            forward(inp, w, b).data.iter().zip(&g.data).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        for i in 0..wlen {
            let mut wp = w.clone();
            wp[i] += h;
            let mut wm = w.clone();
            wm[i] -= h;
            let fd = (objective(&input, &wp, &b) - objective(&input, &wm, &b)) / (2.0 * h);
            assert!((fd - gw[i]).abs() < 1e-6 * (1.0 + fd.abs()), "weight {i}: {fd} vs {}", gw[i]);
        }
        for c in 0..cout {
            let mut bp = b.clone();
            bp[c] += h;
            let mut bm = b.clone();
            bm[c] -= h;
            let fd = (objective(&input, &w, &bp) - objective(&input, &w, &bm)) / (2.0 * h);
            assert!((fd - gb[c]).abs() < 1e-6 * (1.0 + fd.abs()));
        }
        for i in (0..input.data.len()).step_by(7) {
            let mut ip = input.clone();
            ip.data[i] += h;
            let mut im = input.clone();
            im.data[i] -= h;
            let fd = (objective(&ip, &w, &b) - objective(&im, &w, &b)) / (2.0 * h);
            assert!((fd - gi.data[i]).abs() < 1e-6 * (1.0 + fd.abs()), "input {i}");
        }
    }

    #[test]
    fn conv_same_gradients() {
        let (mut rng, input) = setup(2, [4, 3, 5], 21);
        check_adjoint(
            &|x, w, b| conv_same(x, w, b, 2, 3),
            &|x, g, w, gw, gb| conv_same_backward(x, g, w, 3, gw, gb, true).unwrap(),
            input,
            2 * 2 * 27,
            2,
            &mut rng,
        );
    }

    #[test]
    fn blocked_conv_same_gradients() {
        let (mut rng, input) = setup(3, [9, 6, 7], 25);
        check_adjoint(
            &|x, w, b| conv_same(x, w, b, 5, 3),
            &|x, g, w, gw, gb| conv_same_backward(x, g, w, 3, gw, gb, true).unwrap(),
            input,
            5 * 3 * 27,
            5,
            &mut rng,
        );
    }

    #[test]
    fn blocked_conv_down_gradients() {
        let (mut rng, input) = setup(3, [10, 8, 6], 26);
        check_adjoint(
            &|x, w, b| conv_down(x, w, b, 5),
            &|x, g, w, gw, gb| conv_down_backward(x, g, w, gw, gb, true).unwrap(),
            input,
            5 * 3 * 27,
            5,
            &mut rng,
        );
    }

    #[test]
    fn conv_down_gradients() {
        let (mut rng, input) = setup(2, [4, 6, 4], 22);
        check_adjoint(
            &|x, w, b| conv_down(x, w, b, 3),
            &|x, g, w, gw, gb| conv_down_backward(x, g, w, gw, gb, true).unwrap(),
            input,
            3 * 2 * 27,
            3,
            &mut rng,
        );
    }

    #[test]
    fn conv_up_gradients() {
        let (mut rng, input) = setup(2, [2, 3, 2], 23);
        check_adjoint(
            &|x, w, b| conv_up(x, w, b, 3),
            &|x, g, w, gw, gb| conv_up_backward(x, g, w, gw, gb),
            input,
            2 * 3 * 8,
            3,
            &mut rng,
        );
    }

    #[test]
    fn conv_point_gradients() {
        let (mut rng, input) = setup(3, [3, 2, 2], 24);
        check_adjoint(
            &|x, w, b| conv_point(x, w, b, 4),
            &|x, g, w, gw, gb| conv_point_backward(x, g, w, gw, gb),
            input,
            4 * 3,
            4,
            &mut rng,
        );
    }
}
