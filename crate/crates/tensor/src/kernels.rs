//! Forward and adjoint kernels used by the autodiff ops.

use crate::scalar::gemm;
use crate::{Float, Tensor};

/// Stride and zero padding of a 2-D convolution along (height, width).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvGeom {
    pub const fn same(kh: usize, kw: usize) -> Self {
        Self { stride: (1, 1), padding: (kh / 2, kw / 2) }
    }

    pub fn output_hw(&self, h: usize, w: usize, kh: usize, kw: usize) -> (usize, usize) {
        let ho = (h + 2 * self.padding.0 - kh) / self.stride.0 + 1;
        let wo = (w + 2 * self.padding.1 - kw) / self.stride.1 + 1;
        (ho, wo)
    }

    fn is_pointwise(&self, kh: usize, kw: usize) -> bool {
        kh == 1 && kw == 1 && self.stride == (1, 1) && self.padding == (0, 0)
    }
}

struct ConvDims {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
}

fn conv_dims<F: Float>(x: &Tensor<F>, weight: &Tensor<F>, geom: &ConvGeom) -> ConvDims {
    let xs = x.shape();
    let ws = weight.shape();
    assert_eq!(xs.len(), 4, "conv2d input must be [B, C, H, W], got {xs:?}");
    assert_eq!(ws.len(), 4, "conv2d weight must be [Cout, Cin, kh, kw], got {ws:?}");
    assert_eq!(xs[1], ws[1], "conv2d channel mismatch: input {xs:?} weight {ws:?}");
    assert!(
        xs[2] + 2 * geom.padding.0 >= ws[2] && xs[3] + 2 * geom.padding.1 >= ws[3],
        "conv2d kernel {ws:?} larger than padded input {xs:?}"
    );
    let (ho, wo) = geom.output_hw(xs[2], xs[3], ws[2], ws[3]);
    ConvDims {
        batch: xs[0],
        cin: xs[1],
        h: xs[2],
        w: xs[3],
        cout: ws[0],
        kh: ws[2],
        kw: ws[3],
        ho,
        wo,
    }
}

/// Output columns `ox` in `[lo, hi)` read input column `ox * stride + kj - pad`
/// inside `[0, w)`.
fn valid_range(out_len: usize, in_len: usize, stride: usize, k: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k).div_ceil(stride).min(out_len);
    let hi = if in_len + pad > k { (in_len + pad - k - 1) / stride + 1 } else { 0 };
    (lo, hi.clamp(lo, out_len))
}

fn im2col<F: Float>(plane: &[F], d: &ConvDims, g: &ConvGeom, cols: &mut [F]) {
    let n = d.ho * d.wo;
    for c in 0..d.cin {
        let src = &plane[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = ((c * d.kh + ki) * d.kw + kj) * n;
                let dst = &mut cols[row..row + n];
                let (lo, hi) = valid_range(d.wo, d.w, g.stride.1, kj, g.padding.1);
                for oy in 0..d.ho {
                    let iy = (oy * g.stride.0 + ki) as isize - g.padding.0 as isize;
                    let line = &mut dst[oy * d.wo..(oy + 1) * d.wo];
                    if iy < 0 || iy >= d.h as isize {
                        line.fill(F::zero());
                        continue;
                    }
                    let srow = &src[iy as usize * d.w..(iy as usize + 1) * d.w];
                    line[..lo].fill(F::zero());
                    line[hi..].fill(F::zero());
                    if lo < hi {
                        let start = lo * g.stride.1 + kj - g.padding.1;
                        if g.stride.1 == 1 {
                            line[lo..hi].copy_from_slice(&srow[start..start + hi - lo]);
                        } else {
                            for (i, v) in line[lo..hi].iter_mut().enumerate() {
                                *v = srow[start + i * g.stride.1];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<F: Float>(cols: &[F], d: &ConvDims, g: &ConvGeom, plane: &mut [F]) {
    let n = d.ho * d.wo;
    for c in 0..d.cin {
        let dst = &mut plane[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = ((c * d.kh + ki) * d.kw + kj) * n;
                let src = &cols[row..row + n];
                let (lo, hi) = valid_range(d.wo, d.w, g.stride.1, kj, g.padding.1);
                if lo >= hi {
                    continue;
                }
                for oy in 0..d.ho {
                    let iy = (oy * g.stride.0 + ki) as isize - g.padding.0 as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let drow = &mut dst[iy as usize * d.w..(iy as usize + 1) * d.w];
                    let start = lo * g.stride.1 + kj - g.padding.1;
                    let srow = &src[oy * d.wo + lo..oy * d.wo + hi];
                    for (i, v) in srow.iter().enumerate() {
                        drow[start + i * g.stride.1] += *v;
                    }
                }
            }
        }
    }
}

/// `dst[j * rows + i] = src[i * cols + j]`, in cache-sized tiles.
fn transpose_into<F: Float>(src: &[F], rows: usize, cols: usize, dst: &mut [F]) {
    const TILE: usize = 32;
    for i0 in (0..rows).step_by(TILE) {
        for j0 in (0..cols).step_by(TILE) {
            for i in i0..(i0 + TILE).min(rows) {
                for j in j0..(j0 + TILE).min(cols) {
                    dst[j * rows + i] = src[i * cols + j];
                }
            }
        }
    }
}

/// Cross-correlation of `x: [B, Cin, H, W]` with `weight: [Cout, Cin, kh, kw]`.
pub fn conv2d<F: Float>(x: &Tensor<F>, weight: &Tensor<F>, geom: &ConvGeom) -> Tensor<F> {
    let d = conv_dims(x, weight, geom);
    let k = d.cin * d.kh * d.kw;
    let n = d.ho * d.wo;
    let mut out = vec![F::zero(); d.batch * d.cout * n];
    let pointwise = geom.is_pointwise(d.kh, d.kw);
    let mut cols = if pointwise { Vec::new() } else { vec![F::zero(); k * n] };
    for b in 0..d.batch {
        let plane = &x.data()[b * d.cin * d.h * d.w..(b + 1) * d.cin * d.h * d.w];
        let cols_ref: &[F] = if pointwise {
            plane
        } else {
            im2col(plane, &d, geom, &mut cols);
            &cols
        };
        let dst = &mut out[b * d.cout * n..(b + 1) * d.cout * n];
        gemm(false, false, d.cout, k, n, F::one(), weight.data(), cols_ref, F::zero(), dst);
    }
    Tensor::new([d.batch, d.cout, d.ho, d.wo], out)
}

/// Gradients of [`conv2d`] with respect to its input and/or weight.
pub fn conv2d_backward<F: Float>(
    x: &Tensor<F>,
    weight: &Tensor<F>,
    geom: &ConvGeom,
    grad_out: &Tensor<F>,
    need_input: bool,
    need_weight: bool,
) -> (Option<Tensor<F>>, Option<Tensor<F>>) {
    let d = conv_dims(x, weight, geom);
    let k = d.cin * d.kh * d.kw;
    let n = d.ho * d.wo;
    assert_eq!(grad_out.shape(), &[d.batch, d.cout, d.ho, d.wo], "conv2d grad shape mismatch");
    let pointwise = geom.is_pointwise(d.kh, d.kw);
    let mut gx = need_input.then(|| vec![F::zero(); x.numel()]);
    let mut gw = need_weight.then(|| vec![F::zero(); weight.numel()]);
    let mut cols = vec![F::zero(); if pointwise { 0 } else { k * n }];
    let mut dcols = vec![F::zero(); if pointwise || !need_input { 0 } else { k * n }];
    let mut cols_t = vec![F::zero(); if need_weight { k * n } else { 0 }];
    let plane_len = d.cin * d.h * d.w;
    for b in 0..d.batch {
        let gy = &grad_out.data()[b * d.cout * n..(b + 1) * d.cout * n];
        let plane = &x.data()[b * plane_len..(b + 1) * plane_len];
        if let Some(gw) = gw.as_mut() {
            let cols_ref: &[F] = if pointwise {
                plane
            } else {
                im2col(plane, &d, geom, &mut cols);
                &cols
            };
            // gemm is much faster on a row-major [n, k] operand than on a
            // transposed view when the reduction axis n is long
            transpose_into(cols_ref, k, n, &mut cols_t);
            gemm(false, false, d.cout, n, k, F::one(), gy, &cols_t, F::one(), gw);
        }
        if let Some(gx) = gx.as_mut() {
            let dst = &mut gx[b * plane_len..(b + 1) * plane_len];
            if pointwise {
                gemm(true, false, k, d.cout, n, F::one(), weight.data(), gy, F::zero(), dst);
            } else {
                gemm(true, false, k, d.cout, n, F::one(), weight.data(), gy, F::zero(), &mut dcols);
                col2im(&dcols, &d, geom, dst);
            }
        }
    }
    (
        gx.map(|v| Tensor::new(x.shape().to_vec(), v)),
        gw.map(|v| Tensor::new(weight.shape().to_vec(), v)),
    )
}

/// Batched matrix product over matching leading axes: `[.., m, k] @ [.., k, n]`.
pub fn matmul<F: Float>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    let (batch, m, k, n) = matmul_dims(a, b);
    let mut out = vec![F::zero(); batch * m * n];
    for i in 0..batch {
        gemm(
            false,
            false,
            m,
            k,
            n,
            F::one(),
            &a.data()[i * m * k..(i + 1) * m * k],
            &b.data()[i * k * n..(i + 1) * k * n],
            F::zero(),
            &mut out[i * m * n..(i + 1) * m * n],
        );
    }
    let mut shape = a.shape().to_vec();
    let r = shape.len();
    shape[r - 1] = n;
    Tensor::new(shape, out)
}

pub(crate) fn matmul_dims<F: Float>(a: &Tensor<F>, b: &Tensor<F>) -> (usize, usize, usize, usize) {
    let (sa, sb) = (a.shape(), b.shape());
    assert!(sa.len() >= 2 && sa.len() == sb.len(), "matmul rank mismatch {sa:?} @ {sb:?}");
    let r = sa.len();
    assert_eq!(sa[..r - 2], sb[..r - 2], "matmul batch mismatch {sa:?} @ {sb:?}");
    assert_eq!(sa[r - 1], sb[r - 2], "matmul inner mismatch {sa:?} @ {sb:?}");
    let batch = sa[..r - 2].iter().product();
    (batch, sa[r - 2], sa[r - 1], sb[r - 1])
}

/// Gradients of [`matmul`].
pub fn matmul_backward<F: Float>(
    a: &Tensor<F>,
    b: &Tensor<F>,
    grad_out: &Tensor<F>,
    need_a: bool,
    need_b: bool,
) -> (Option<Tensor<F>>, Option<Tensor<F>>) {
    let (batch, m, k, n) = matmul_dims(a, b);
    let ga = need_a.then(|| {
        let mut out = vec![F::zero(); a.numel()];
        for i in 0..batch {
            gemm(
                false,
                true,
                m,
                n,
                k,
                F::one(),
                &grad_out.data()[i * m * n..(i + 1) * m * n],
                &b.data()[i * k * n..(i + 1) * k * n],
                F::zero(),
                &mut out[i * m * k..(i + 1) * m * k],
            );
        }
        Tensor::new(a.shape().to_vec(), out)
    });
    let gb = need_b.then(|| {
        let mut out = vec![F::zero(); b.numel()];
        for i in 0..batch {
            gemm(
                true,
                false,
                k,
                m,
                n,
                F::one(),
                &a.data()[i * m * k..(i + 1) * m * k],
                &grad_out.data()[i * m * n..(i + 1) * m * n],
                F::zero(),
                &mut out[i * k * n..(i + 1) * k * n],
            );
        }
        Tensor::new(b.shape().to_vec(), out)
    });
    (ga, gb)
}

/// Saved statistics of a group normalisation, needed by its adjoint.
pub struct GroupNormCache<F> {
    pub normalized: Tensor<F>,
    pub inv_std: Vec<F>,
    pub groups: usize,
}

/// Normalises `x: [B, C, ...]` to zero mean and unit variance within each
/// of `groups` channel groups (no affine part).
pub fn group_norm<F: Float>(x: &Tensor<F>, groups: usize, eps: F) -> GroupNormCache<F> {
    let s = x.shape();
    assert!(s.len() >= 2, "group_norm needs [B, C, ...], got {s:?}");
    let (b, c) = (s[0], s[1]);
    assert!(groups > 0 && c % groups == 0, "{groups} groups do not divide {c} channels");
    let group_len = x.numel() / (b * groups);
    let inv_n = F::one() / F::of(group_len as f64);
    let mut out = vec![F::zero(); x.numel()];
    let mut inv_std = Vec::with_capacity(b * groups);
    for (src, dst) in x.data().chunks(group_len).zip(out.chunks_mut(group_len)) {
        let mean = src.iter().copied().sum::<F>() * inv_n;
        let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_n;
        let r = F::one() / (var + eps).sqrt();
        for (o, &v) in dst.iter_mut().zip(src) {
            *o = (v - mean) * r;
        }
        inv_std.push(r);
    }
    GroupNormCache { normalized: Tensor::new(s.to_vec(), out), inv_std, groups }
}

pub fn group_norm_backward<F: Float>(cache: &GroupNormCache<F>, grad_out: &Tensor<F>) -> Tensor<F> {
    let xhat = &cache.normalized;
    let group_len = xhat.numel() / cache.inv_std.len();
    let inv_n = F::one() / F::of(group_len as f64);
    let mut out = vec![F::zero(); xhat.numel()];
    for (g, ((xh, gy), dst)) in xhat
        .data()
        .chunks(group_len)
        .zip(grad_out.data().chunks(group_len))
        .zip(out.chunks_mut(group_len))
        .enumerate()
    {
        let mean_g = gy.iter().copied().sum::<F>() * inv_n;
        let mean_gx = gy.iter().zip(xh).map(|(&a, &b)| a * b).sum::<F>() * inv_n;
        let r = cache.inv_std[g];
        for ((d, &a), &b) in dst.iter_mut().zip(gy).zip(xh) {
            *d = r * (a - mean_g - b * mean_gx);
        }
    }
    Tensor::new(xhat.shape().to_vec(), out)
}

/// Softmax over the last axis.
pub fn softmax_last<F: Float>(x: &Tensor<F>) -> Tensor<F> {
    let n = *x.shape().last().expect("softmax of a scalar");
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(n) {
        let m = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
        let mut s = F::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        let inv = F::one() / s;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    out
}

pub fn softmax_last_backward<F: Float>(y: &Tensor<F>, grad_out: &Tensor<F>) -> Tensor<F> {
    let n = *y.shape().last().expect("softmax of a scalar");
    let mut out = grad_out.clone();
    for (g, yr) in out.data_mut().chunks_mut(n).zip(y.data().chunks(n)) {
        let dot: F = g.iter().zip(yr).map(|(&a, &b)| a * b).sum();
        for (gv, &yv) in g.iter_mut().zip(yr) {
            *gv = yv * (*gv - dot);
        }
    }
    out
}
