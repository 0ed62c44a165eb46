//! Value-level kernels behind the graph ops.

use rayon::prelude::*;

use crate::scalar::gemm;
use crate::{Scalar, Tensor};

/// Output extent of a convolution along one axis.
pub fn conv_out_len(len: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(len + 2 * pad >= k, "kernel larger than padded input");
    (len + 2 * pad - k) / stride + 1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(cin: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Self {
        Self {
            cin,
            h,
            w,
            k,
            stride,
            pad,
            ho: conv_out_len(h, k, stride, pad),
            wo: conv_out_len(w, k, stride, pad),
        }
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// 1×1, stride 1, no padding: the input plane already is the column matrix.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output columns `[lo, hi)` whose tap `kx` lands inside the input row.
fn valid_cols(g: &ConvGeom, kx: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kx).div_ceil(g.stride);
    let hi = if g.w + g.pad > kx {
        ((g.w + g.pad - kx - 1) / g.stride + 1).min(g.wo)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn im2col<S: Scalar>(x: &[S], g: &ConvGeom, cols: &mut [S]) {
    let (ho, wo) = (g.ho, g.wo);
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.iter_mut().for_each(|v| *v = S::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let (lo, hi) = valid_cols(g, kx);
                    out_row[..lo].iter_mut().for_each(|v| *v = S::zero());
                    out_row[hi..].iter_mut().for_each(|v| *v = S::zero());
                    if lo < hi {
                        let ix0 = lo * g.stride + kx - g.pad;
                        if g.stride == 1 {
                            out_row[lo..hi].copy_from_slice(&src[ix0..ix0 + hi - lo]);
                        } else {
                            for (j, v) in out_row[lo..hi].iter_mut().enumerate() {
                                *v = src[ix0 + j * g.stride];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<S: Scalar>(cols: &[S], g: &ConvGeom, x: &mut [S]) {
    let (ho, wo) = (g.ho, g.wo);
    for ci in 0..g.cin {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let (lo, hi) = valid_cols(g, kx);
                    if lo < hi {
                        let ix0 = lo * g.stride + kx - g.pad;
                        let s_row = &src[oy * wo + lo..oy * wo + hi];
                        if g.stride == 1 {
                            for (d, &v) in dst[ix0..ix0 + hi - lo].iter_mut().zip(s_row) {
                                *d += v;
                            }
                        } else {
                            for (j, &v) in s_row.iter().enumerate() {
                                dst[ix0 + j * g.stride] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `y = conv(x, w)` without bias. `x: [N,Ci,H,W]`, `w: [Co,Ci,k,k]`.
pub fn conv2d<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, stride: usize, pad: usize) -> Tensor<S> {
    let [n, ci, h, wd] = x.shape();
    let [co, wci, k, k2] = w.shape();
    assert_eq!(ci, wci, "conv2d channel mismatch");
    assert_eq!(k, k2, "conv2d expects square kernels");
    let g = ConvGeom::new(ci, h, wd, k, stride, pad);
    let out_per = co * g.cols();
    let mut out = vec![S::zero(); n * out_per];
    out.par_chunks_mut(out_per)
        .enumerate()
        .for_each(|(i, dst)| {
            let xs = x.sample(i);
            if g.is_pointwise() {
                gemm(false, false, co, g.cols(), g.rows(), w.data(), xs, S::zero(), dst);
            } else {
                let mut cols = vec![S::zero(); g.rows() * g.cols()];
                im2col(xs, &g, &mut cols);
                gemm(false, false, co, g.cols(), g.rows(), w.data(), &cols, S::zero(), dst);
            }
        });
    Tensor::from_vec([n, co, g.ho, g.wo], out)
}

/// Adjoint of [`conv2d`] with respect to its input.
pub fn conv2d_grad_input<S: Scalar>(
    gout: &Tensor<S>,
    w: &Tensor<S>,
    stride: usize,
    pad: usize,
    in_hw: (usize, usize),
) -> Tensor<S> {
    let [n, co, ho, wo] = gout.shape();
    let [wco, ci, k, _] = w.shape();
    assert_eq!(co, wco, "conv2d_grad_input channel mismatch");
    let g = ConvGeom::new(ci, in_hw.0, in_hw.1, k, stride, pad);
    assert_eq!((g.ho, g.wo), (ho, wo), "conv2d_grad_input geometry mismatch");
    let in_per = ci * in_hw.0 * in_hw.1;
    let mut out = vec![S::zero(); n * in_per];
    out.par_chunks_mut(in_per).enumerate().for_each(|(i, dst)| {
        let gs = gout.sample(i);
        if g.is_pointwise() {
            gemm(true, false, g.rows(), g.cols(), co, w.data(), gs, S::zero(), dst);
        } else {
            let mut cols = vec![S::zero(); g.rows() * g.cols()];
            gemm(true, false, g.rows(), g.cols(), co, w.data(), gs, S::zero(), &mut cols);
            col2im(&cols, &g, dst);
        }
    });
    Tensor::from_vec([n, ci, in_hw.0, in_hw.1], out)
}

/// Gradient of `<conv2d(x, w), gout>` with respect to `w`. Samples are summed in order.
pub fn conv2d_grad_weight<S: Scalar>(
    x: &Tensor<S>,
    gout: &Tensor<S>,
    stride: usize,
    pad: usize,
    k: usize,
) -> Tensor<S> {
    let [n, ci, h, wd] = x.shape();
    let [gn, co, ho, wo] = gout.shape();
    assert_eq!(n, gn, "conv2d_grad_weight batch mismatch");
    let g = ConvGeom::new(ci, h, wd, k, stride, pad);
    assert_eq!((g.ho, g.wo), (ho, wo), "conv2d_grad_weight geometry mismatch");
    let mut dw = vec![S::zero(); co * g.rows()];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![S::zero(); g.rows() * g.cols()]
    };
    for i in 0..n {
        let gs = gout.sample(i);
        let xs = x.sample(i);
        let b: &[S] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, &g, &mut cols);
            &cols
        };
        gemm(false, true, co, g.rows(), g.cols(), gs, b, S::one(), &mut dw);
    }
    Tensor::from_vec([co, ci, k, k], dw)
}

/// `out = a ⊙ c` where every axis of `c` is either equal to `a`'s or 1.
pub fn mul_broadcast<S: Scalar>(a: &Tensor<S>, c: &Tensor<S>) -> Tensor<S> {
    let sa = a.shape();
    let sc = c.shape();
    if sa == sc {
        return a.zip_map(c, |x, y| x * y);
    }
    for d in 0..4 {
        assert!(
            sc[d] == sa[d] || sc[d] == 1,
            "mul_broadcast: {sc:?} does not broadcast to {sa:?}"
        );
    }
    let strides = [
        sc[1] * sc[2] * sc[3],
        sc[2] * sc[3],
        sc[3],
        1,
    ];
    let pick = |d: usize, i: usize| if sc[d] == 1 { 0 } else { i * strides[d] };
    let mut out = Vec::with_capacity(a.len());
    let ad = a.data();
    let cd = c.data();
    let mut idx = 0;
    for n in 0..sa[0] {
        for ch in 0..sa[1] {
            for y in 0..sa[2] {
                let base = pick(0, n) + pick(1, ch) + pick(2, y);
                for x in 0..sa[3] {
                    out.push(ad[idx] * cd[base + pick(3, x)]);
                    idx += 1;
                }
            }
        }
    }
    Tensor::from_vec(sa, out)
}

pub fn add_bias<S: Scalar>(x: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let [n, c, h, w] = x.shape();
    assert_eq!(b.len(), c, "bias length mismatch");
    let mut out = x.clone();
    let hw = h * w;
    for (i, plane) in out.data_mut().chunks_mut(hw).enumerate() {
        let bv = b.data()[i % c];
        plane.iter_mut().for_each(|v| *v += bv);
    }
    let _ = n;
    out
}

pub fn sum_to_channels<S: Scalar>(g: &Tensor<S>) -> Tensor<S> {
    let [_, c, h, w] = g.shape();
    let mut out = vec![S::zero(); c];
    for (i, plane) in g.data().chunks(h * w).enumerate() {
        out[i % c] += plane.iter().copied().sum::<S>();
    }
    Tensor::from_vec([1, c, 1, 1], out)
}

pub fn broadcast_channels<S: Scalar>(b: &Tensor<S>, shape: [usize; 4]) -> Tensor<S> {
    let [n, c, h, w] = shape;
    assert_eq!(b.len(), c);
    let mut out = Vec::with_capacity(n * c * h * w);
    for _ in 0..n {
        for ch in 0..c {
            out.extend(std::iter::repeat(b.data()[ch]).take(h * w));
        }
    }
    Tensor::from_vec(shape, out)
}

/// 2×2 max pooling with stride 2. Returns pooled values and, per output
/// element, the flat input index it came from (first maximum wins).
pub fn max_pool2<S: Scalar>(x: &Tensor<S>) -> (Tensor<S>, Vec<u32>) {
    let [n, c, h, w] = x.shape();
    let (ho, wo) = (h / 2, w / 2);
    let mut vals = Vec::with_capacity(n * c * ho * wo);
    let mut idx = Vec::with_capacity(n * c * ho * wo);
    let d = x.data();
    for p in 0..n * c {
        let base = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let j = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if d[j] > d[best] {
                        best = j;
                    }
                }
                vals.push(d[best]);
                idx.push(best as u32);
            }
        }
    }
    (Tensor::from_vec([n, c, ho, wo], vals), idx)
}

pub fn gather<S: Scalar>(x: &Tensor<S>, idx: &[u32], out_shape: [usize; 4]) -> Tensor<S> {
    let d = x.data();
    Tensor::from_vec(out_shape, idx.iter().map(|&i| d[i as usize]).collect())
}

pub fn scatter<S: Scalar>(g: &Tensor<S>, idx: &[u32], in_shape: [usize; 4]) -> Tensor<S> {
    let mut out = Tensor::zeros(in_shape);
    let o = out.data_mut();
    for (&i, &v) in idx.iter().zip(g.data()) {
        o[i as usize] += v;
    }
    out
}

/// Dense row-major matrix used by separable resampling.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat<S> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<S>,
}

impl<S: Scalar> Mat<S> {
    pub fn transpose(&self) -> Self {
        let mut data = vec![S::zero(); self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }
}

/// Separable linear resampling `Y = R · X · Cᵀ` applied to every plane.
#[derive(Clone, Debug)]
pub struct ResamplePlan<S> {
    pub rows: Mat<S>,
    pub cols: Mat<S>,
    rows_t: Mat<S>,
    cols_t: Mat<S>,
}

impl<S: Scalar> ResamplePlan<S> {
    pub fn new(rows: Mat<S>, cols: Mat<S>) -> Self {
        Self {
            rows_t: rows.transpose(),
            cols_t: cols.transpose(),
            rows,
            cols,
        }
    }

    pub fn in_hw(&self, adjoint: bool) -> (usize, usize) {
        if adjoint {
            (self.rows.rows, self.cols.rows)
        } else {
            (self.rows.cols, self.cols.cols)
        }
    }

    pub fn out_hw(&self, adjoint: bool) -> (usize, usize) {
        if adjoint {
            (self.rows.cols, self.cols.cols)
        } else {
            (self.rows.rows, self.cols.rows)
        }
    }

    pub fn apply(&self, x: &Tensor<S>, adjoint: bool) -> Tensor<S> {
        let (r, c) = if adjoint {
            (&self.rows_t, &self.cols_t)
        } else {
            (&self.rows, &self.cols)
        };
        let [n, ch, h, w] = x.shape();
        assert_eq!((h, w), (r.cols, c.cols), "resample input size mismatch");
        let planes = n * ch;
        let (ho, wo) = (r.rows, c.rows);
        // X · Cᵀ for all planes at once: [(planes·h) × w] · [w × wo].
        let mut tmp = vec![S::zero(); planes * h * wo];
        gemm(false, true, planes * h, wo, w, x.data(), &c.data, S::zero(), &mut tmp);
        let mut out = vec![S::zero(); planes * ho * wo];
        for p in 0..planes {
            gemm(
                false,
                false,
                ho,
                wo,
                h,
                &r.data,
                &tmp[p * h * wo..(p + 1) * h * wo],
                S::zero(),
                &mut out[p * ho * wo..(p + 1) * ho * wo],
            );
        }
        Tensor::from_vec([n, ch, ho, wo], out)
    }
}

/// Sparse channel-independent spatial linear map: `y[o] = Σ w · x[i]` per plane.
#[derive(Clone, Debug)]
pub struct SpatialPlan<S> {
    pub in_hw: (usize, usize),
    pub out_hw: (usize, usize),
    pub entries: Vec<(u32, u32, S)>,
}

impl<S: Scalar> SpatialPlan<S> {
    pub fn in_hw(&self, adjoint: bool) -> (usize, usize) {
        if adjoint {
            self.out_hw
        } else {
            self.in_hw
        }
    }

    pub fn out_hw(&self, adjoint: bool) -> (usize, usize) {
        if adjoint {
            self.in_hw
        } else {
            self.out_hw
        }
    }

    pub fn apply(&self, x: &Tensor<S>, adjoint: bool) -> Tensor<S> {
        let [n, c, h, w] = x.shape();
        let (ih, iw) = self.in_hw(adjoint);
        let (oh, ow) = self.out_hw(adjoint);
        assert_eq!((h, w), (ih, iw), "spatial map input size mismatch");
        let mut out = Tensor::zeros([n, c, oh, ow]);
        let src = x.data();
        for (p, dst) in out.data_mut().chunks_mut(oh * ow).enumerate() {
            let plane = &src[p * ih * iw..(p + 1) * ih * iw];
            if adjoint {
                for &(o, i, wt) in &self.entries {
                    dst[i as usize] += wt * plane[o as usize];
                }
            } else {
                for &(o, i, wt) in &self.entries {
                    dst[o as usize] += wt * plane[i as usize];
                }
            }
        }
        out
    }
}

pub fn concat_channels<S: Scalar>(parts: &[&Tensor<S>]) -> Tensor<S> {
    let [n, _, h, w] = parts[0].shape();
    let total: usize = parts.iter().map(|p| p.shape()[1]).sum();
    let mut out = Vec::with_capacity(n * total * h * w);
    for i in 0..n {
        for p in parts {
            let s = p.shape();
            assert_eq!([s[0], s[2], s[3]], [n, h, w], "concat shape mismatch");
            out.extend_from_slice(p.sample(i));
        }
    }
    Tensor::from_vec([n, total, h, w], out)
}

pub fn slice_channels<S: Scalar>(x: &Tensor<S>, start: usize, len: usize) -> Tensor<S> {
    let [n, c, h, w] = x.shape();
    assert!(start + len <= c);
    let mut out = Vec::with_capacity(n * len * h * w);
    for i in 0..n {
        let s = x.sample(i);
        out.extend_from_slice(&s[start * h * w..(start + len) * h * w]);
    }
    Tensor::from_vec([n, len, h, w], out)
}

pub fn pad_channels<S: Scalar>(x: &Tensor<S>, start: usize, total: usize) -> Tensor<S> {
    let [n, c, h, w] = x.shape();
    assert!(start + c <= total);
    let mut out = Tensor::zeros([n, total, h, w]);
    let per = total * h * w;
    for i in 0..n {
        let dst = &mut out.data_mut()[i * per + start * h * w..i * per + (start + c) * h * w];
        dst.copy_from_slice(x.sample(i));
    }
    out
}

/// `op(A) · op(B)` for tensors viewed as `[shape0, rest]` matrices.
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, ta: bool, tb: bool) -> Tensor<S> {
    let (ar, ac) = as_matrix(a);
    let (br, bc) = as_matrix(b);
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    assert_eq!(k, k2, "matmul inner dimension mismatch");
    let mut out = vec![S::zero(); m * n];
    gemm(ta, tb, m, n, k, a.data(), b.data(), S::zero(), &mut out);
    Tensor::from_vec([m, n, 1, 1], out)
}

pub fn as_matrix<S: Scalar>(t: &Tensor<S>) -> (usize, usize) {
    let [a, b, c, d] = t.shape();
    (a, b * c * d)
}

pub fn sum_per_sample<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let n = x.shape()[0];
    Tensor::from_vec(
        [n, 1, 1, 1],
        (0..n).map(|i| x.sample(i).iter().copied().sum()).collect(),
    )
}

pub fn expand_per_sample<S: Scalar>(x: &Tensor<S>, shape: [usize; 4]) -> Tensor<S> {
    let per = shape[1] * shape[2] * shape[3];
    assert_eq!(x.len(), shape[0]);
    let mut out = Vec::with_capacity(shape[0] * per);
    for &v in x.data() {
        out.extend(std::iter::repeat(v).take(per));
    }
    Tensor::from_vec(shape, out)
}
