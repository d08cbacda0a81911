//! 3D convolution and transposed convolution on channel-first volumes.
//!
//! Convolution uses the cross-correlation convention (the kernel is not
//! flipped). Inputs are `C×D×H×W`, kernels `Cout×Cin×k×k×k`. Transposed
//! convolution is implemented as the exact adjoint of [`conv3d`] with the same
//! kernel tensor, so a deconvolution kernel is laid out `Cx×Cy×k×k×k` where
//! `Cx` is the channel count of its *input*.
//!
//! Both directions lower to GEMM over column buffers built slab-by-slab so the
//! scratch space stays bounded regardless of the volume size.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Scalar, Tensor};

/// Upper bound on column-buffer elements per GEMM call.
#[cfg(not(test))]
const COL_BUDGET: usize = 1 << 22;
#[cfg(test)]
const COL_BUDGET: usize = 1 << 12;

/// Geometry of a convolution from `cin×in_ext` to `cout×out_ext`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub in_ext: [usize; 3],
    pub out_ext: [usize; 3],
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    /// Geometry of a forward convolution, rejecting non-integral output extents.
    pub fn forward(x_shape: &[usize], w_shape: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (cin, in_ext) = split_volume(x_shape, "conv3d")?;
        let (cout, wcin, k) = split_kernel(w_shape, "conv3d")?;
        if wcin != cin {
            return Err(Error::Shape {
                op: "conv3d",
                detail: format!("input {:?} has {} channels, kernel {:?} expects {}", x_shape, cin, w_shape, wcin),
            });
        }
        if stride == 0 {
            return Err(Error::Shape { op: "conv3d", detail: "stride must be >= 1".into() });
        }
        let mut out_ext = [0; 3];
        for d in 0..3 {
            let span = in_ext[d] + 2 * pad;
            if span < k || (span - k) % stride != 0 {
                return Err(Error::Shape {
                    op: "conv3d",
                    detail: format!(
                        "extent {} with pad {}, kernel {}, stride {} gives a non-integral output extent",
                        in_ext[d], pad, k, stride
                    ),
                });
            }
            out_ext[d] = (span - k) / stride + 1;
        }
        Ok(ConvGeom { cin, cout, in_ext, out_ext, k, stride, pad })
    }

    /// Geometry of the convolution whose adjoint is the requested deconvolution.
    ///
    /// `x_shape` is the deconvolution input (`Cx×a³`); the returned geometry
    /// maps `Cy×A³` to `Cx×a³` with `A = (a-1)·stride - 2·pad + k`.
    pub fn transposed(x_shape: &[usize], w_shape: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (cx, small) = split_volume(x_shape, "deconv3d")?;
        let (wcx, cy, k) = split_kernel(w_shape, "deconv3d")?;
        if wcx != cx {
            return Err(Error::Shape {
                op: "deconv3d",
                detail: format!("input {:?} has {} channels, kernel {:?} expects {}", x_shape, cx, w_shape, wcx),
            });
        }
        if stride == 0 {
            return Err(Error::Shape { op: "deconv3d", detail: "stride must be >= 1".into() });
        }
        let mut big = [0; 3];
        for d in 0..3 {
            let full = (small[d] - 1) * stride + k;
            if full <= 2 * pad {
                return Err(Error::Shape { op: "deconv3d", detail: format!("padding {} too large", pad) });
            }
            big[d] = full - 2 * pad;
        }
        Ok(ConvGeom { cin: cy, cout: cx, in_ext: big, out_ext: small, k, stride, pad })
    }

    pub fn in_len(&self) -> usize {
        self.in_ext.iter().product()
    }

    pub fn out_len(&self) -> usize {
        self.out_ext.iter().product()
    }

    /// Rows of the column matrix: `cin·k³`.
    pub fn col_rows(&self) -> usize {
        self.cin * self.k * self.k * self.k
    }

    fn plane(&self) -> usize {
        self.out_ext[1] * self.out_ext[2]
    }

    /// Output depth-planes per GEMM chunk.
    fn planes_per_chunk(&self) -> usize {
        (COL_BUDGET / (self.col_rows() * self.plane()).max(1)).clamp(1, self.out_ext[0])
    }

    fn chunks(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let step = self.planes_per_chunk();
        (0..self.out_ext[0]).step_by(step).map(move |d0| (d0, (d0 + step).min(self.out_ext[0])))
    }
}

fn split_volume(shape: &[usize], op: &'static str) -> Result<(usize, [usize; 3])> {
    match shape {
        [c, d, h, w] => Ok((*c, [*d, *h, *w])),
        _ => Err(Error::Shape { op, detail: format!("expected C×D×H×W volume, got {:?}", shape) }),
    }
}

fn split_kernel(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    match shape {
        [a, b, k1, k2, k3] if k1 == k2 && k2 == k3 => Ok((*a, *b, *k1)),
        _ => Err(Error::Shape { op, detail: format!("expected A×B×k×k×k kernel, got {:?}", shape) }),
    }
}

/// Fill `cols` (`col_rows × chunk`) from input planes `[d0, d1)` of the output.
fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], d0: usize, d1: usize, cols: &mut [T]) {
    let [id, ih, iw] = g.in_ext;
    let [_, oh, ow] = g.out_ext;
    let cp = (d1 - d0) * oh * ow;
    let k = g.k;
    let (s, p) = (g.stride as isize, g.pad as isize);
    let mut row = 0;
    for ci in 0..g.cin {
        let xc = &x[ci * id * ih * iw..(ci + 1) * id * ih * iw];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let dst = &mut cols[row * cp..(row + 1) * cp];
                    let mut col = 0;
                    for od in d0..d1 {
                        let zd = od as isize * s - p + kd as isize;
                        if zd < 0 || zd >= id as isize {
                            dst[col..col + oh * ow].fill(T::zero());
                            col += oh * ow;
                            continue;
                        }
                        let xd = &xc[zd as usize * ih * iw..];
                        for oy in 0..oh {
                            let zh = oy as isize * s - p + kh as isize;
                            if zh < 0 || zh >= ih as isize {
                                dst[col..col + ow].fill(T::zero());
                                col += ow;
                                continue;
                            }
                            let xr = &xd[zh as usize * iw..zh as usize * iw + iw];
                            for ox in 0..ow {
                                let zw = ox as isize * s - p + kw as isize;
                                dst[col] = if zw < 0 || zw >= iw as isize { T::zero() } else { xr[zw as usize] };
                                col += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Scatter-add `cols` back into the input-shaped buffer `dx`.
fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], d0: usize, d1: usize, dx: &mut [T]) {
    let [id, ih, iw] = g.in_ext;
    let [_, oh, ow] = g.out_ext;
    let cp = (d1 - d0) * oh * ow;
    let k = g.k;
    let (s, p) = (g.stride as isize, g.pad as isize);
    let mut row = 0;
    for ci in 0..g.cin {
        let xc = &mut dx[ci * id * ih * iw..(ci + 1) * id * ih * iw];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let src = &cols[row * cp..(row + 1) * cp];
                    let mut col = 0;
                    for od in d0..d1 {
                        let zd = od as isize * s - p + kd as isize;
                        if zd < 0 || zd >= id as isize {
                            col += oh * ow;
                            continue;
                        }
                        for oy in 0..oh {
                            let zh = oy as isize * s - p + kh as isize;
                            if zh < 0 || zh >= ih as isize {
                                col += ow;
                                continue;
                            }
                            let base = zd as usize * ih * iw + zh as usize * iw;
                            for ox in 0..ow {
                                let zw = ox as isize * s - p + kw as isize;
                                if zw >= 0 && zw < iw as isize {
                                    let t = &mut xc[base + zw as usize];
                                    *t = *t + src[col];
                                }
                                col += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// `out[cout, P] = W · im2col(x)`.
fn conv_apply<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T]) -> Vec<T> {
    let rows = g.col_rows();
    let p_total = g.out_len();
    let plane = g.plane();
    let mut out = vec![T::zero(); g.cout * p_total];
    let mut cols = Vec::new();
    for (d0, d1) in g.chunks() {
        let cp = (d1 - d0) * plane;
        cols.resize(rows * cp, T::zero());
        im2col(g, x, d0, d1, &mut cols);
        gemm(g.cout, rows, cp, T::one(), w, false, rows, &cols, false, cp, T::zero(), &mut out[d0 * plane..], p_total);
    }
    out
}

/// `dx = col2im(Wᵀ · dy)`, the adjoint of [`conv_apply`] in `x`.
fn conv_apply_adjoint<T: Scalar>(g: &ConvGeom, dy: &[T], w: &[T]) -> Vec<T> {
    let rows = g.col_rows();
    let p_total = g.out_len();
    let plane = g.plane();
    let mut dx = vec![T::zero(); g.cin * g.in_len()];
    let mut cols = Vec::new();
    for (d0, d1) in g.chunks() {
        let cp = (d1 - d0) * plane;
        cols.resize(rows * cp, T::zero());
        gemm(rows, g.cout, cp, T::one(), w, true, rows, &dy[d0 * plane..], false, p_total, T::zero(), &mut cols, cp);
        col2im(g, &cols, d0, d1, &mut dx);
    }
    dx
}

/// `dW += dy · im2col(x)ᵀ` (shape `cout × col_rows`).
fn conv_weight_grad<T: Scalar>(g: &ConvGeom, x: &[T], dy: &[T]) -> Vec<T> {
    let rows = g.col_rows();
    let p_total = g.out_len();
    let plane = g.plane();
    let mut dw = vec![T::zero(); g.cout * rows];
    let mut cols = Vec::new();
    for (d0, d1) in g.chunks() {
        let cp = (d1 - d0) * plane;
        cols.resize(rows * cp, T::zero());
        im2col(g, x, d0, d1, &mut cols);
        gemm(g.cout, cp, rows, T::one(), &dy[d0 * plane..], false, p_total, &cols, true, cp, T::one(), &mut dw, rows);
    }
    dw
}

fn out_shape(c: usize, ext: [usize; 3]) -> Vec<usize> {
    vec![c, ext[0], ext[1], ext[2]]
}

/// Cross-correlation of `x` (`Cin×D×H×W`) with `w` (`Cout×Cin×k³`).
pub fn conv3d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, stride: usize, pad: usize) -> Result<Tensor<T>> {
    let g = ConvGeom::forward(x.shape(), w.shape(), stride, pad)?;
    Tensor::from_vec(&out_shape(g.cout, g.out_ext), conv_apply(&g, x.data(), w.data()))
}

/// Gradients of [`conv3d`] with respect to its input and kernel.
pub fn conv3d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_x: bool,
    need_w: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let g = ConvGeom::forward(x.shape(), w.shape(), stride, pad)?;
    let dx = if need_x { Some(Tensor::from_vec(x.shape(), conv_apply_adjoint(&g, dy.data(), w.data()))?) } else { None };
    let dw = if need_w { Some(Tensor::from_vec(w.shape(), conv_weight_grad(&g, x.data(), dy.data()))?) } else { None };
    Ok((dx, dw))
}

/// Transposed convolution: the adjoint of `conv3d(·, w, stride, pad)`.
///
/// `x` is `Cx×a³`, `w` is `Cx×Cy×k³`; output is `Cy×A³` with
/// `A = (a-1)·stride - 2·pad + k`. With `k == stride` and no padding the
/// output extent is exactly `a·stride`.
pub fn deconv3d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, stride: usize, pad: usize) -> Result<Tensor<T>> {
    let g = ConvGeom::transposed(x.shape(), w.shape(), stride, pad)?;
    Tensor::from_vec(&out_shape(g.cin, g.in_ext), conv_apply_adjoint(&g, x.data(), w.data()))
}

/// Gradients of [`deconv3d`] with respect to its input and kernel.
pub fn deconv3d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_x: bool,
    need_w: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let g = ConvGeom::transposed(x.shape(), w.shape(), stride, pad)?;
    let dx = if need_x { Some(Tensor::from_vec(x.shape(), conv_apply(&g, dy.data(), w.data()))?) } else { None };
    // d/dW <dy, adj(W) x> = d/dW <W im2col(dy), x> = x · im2col(dy)ᵀ
    let dw = if need_w { Some(Tensor::from_vec(w.shape(), conv_weight_grad(&g, dy.data(), x.data()))?) } else { None };
    Ok((dx, dw))
}
