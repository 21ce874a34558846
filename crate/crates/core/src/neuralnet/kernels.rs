//! Raw NCHW kernels shared by the forward and backward passes.

use super::tensor::Real;
use super::Padding;

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: Padding,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn p(&self) -> usize {
        self.ho * self.wo
    }

    /// A 1×1, stride-1, unpadded convolution reads its input directly as the
    /// column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == Padding::default()
    }

    /// Input coordinate read by output coordinate `o` at kernel tap `k`.
    #[inline]
    fn src(o: usize, k: usize, stride: usize, pad: usize, n: usize) -> Option<usize> {
        let i = (o * stride + k) as isize - pad as isize;
        (i >= 0 && (i as usize) < n).then_some(i as usize)
    }
}

/// Unfolds one sample `x[cin, h, w]` into `cols[k, p]`.
pub(crate) fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.p();
    for c in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &mut cols[((c * g.kh + ky) * g.kw + kx) * p..][..p];
                for oy in 0..g.ho {
                    let dst = &mut row[oy * g.wo..][..g.wo];
                    match ConvGeom::src(oy, ky, g.stride, g.pad.top, g.h) {
                        None => dst.fill(T::zero()),
                        Some(iy) => {
                            let src = &x[(c * g.h + iy) * g.w..][..g.w];
                            for (ox, d) in dst.iter_mut().enumerate() {
                                *d = match ConvGeom::src(ox, kx, g.stride, g.pad.left, g.w) {
                                    Some(ix) => src[ix],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `cols[k, p]` back, accumulating into `dx`.
pub(crate) fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.p();
    for c in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &cols[((c * g.kh + ky) * g.kw + kx) * p..][..p];
                for oy in 0..g.ho {
                    let Some(iy) = ConvGeom::src(oy, ky, g.stride, g.pad.top, g.h) else { continue };
                    let dst = &mut dx[(c * g.h + iy) * g.w..][..g.w];
                    for ox in 0..g.wo {
                        if let Some(ix) = ConvGeom::src(ox, kx, g.stride, g.pad.left, g.w) {
                            dst[ix] += row[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Convolution forward over a batch of `n` samples. `wt` is `[cout, k]`.
pub(crate) fn conv_forward<T: Real>(
    x: &[T],
    n: usize,
    g: &ConvGeom,
    wt: &[T],
    cout: usize,
    bias: Option<&[T]>,
) -> Vec<T> {
    let (k, p) = (g.k(), g.p());
    let in_len = g.cin * g.h * g.w;
    let mut out = vec![T::zero(); n * cout * p];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
    for s in 0..n {
        let xs = &x[s * in_len..][..in_len];
        let b: &[T] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, g, &mut cols);
            &cols
        };
        let os = &mut out[s * cout * p..][..cout * p];
        if let Some(bias) = bias {
            for (o, &bv) in os.chunks_mut(p).zip(bias) {
                o.fill(bv);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(cout, k, p, T::one(), wt, k, 1, b, p, 1, beta, os);
    }
    out
}

/// Convolution backward. Accumulates into whichever of `dx`, `dw`, `db` is
/// requested.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward<T: Real>(
    x: &[T],
    n: usize,
    g: &ConvGeom,
    wt: &[T],
    cout: usize,
    dout: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let (k, p) = (g.k(), g.p());
    let in_len = g.cin * g.h * g.w;
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
    let mut dcols = if dx.is_some() && !g.is_pointwise() { vec![T::zero(); k * p] } else { Vec::new() };
    for s in 0..n {
        let xs = &x[s * in_len..][..in_len];
        let ds = &dout[s * cout * p..][..cout * p];
        if let Some(dw) = dw.as_deref_mut() {
            let b: &[T] = if g.is_pointwise() {
                xs
            } else {
                im2col(xs, g, &mut cols);
                &cols
            };
            // dw[cout, k] += dout[cout, p] · colsᵀ
            T::gemm(cout, p, k, T::one(), ds, p, 1, b, 1, p, T::one(), dw);
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxs = &mut dx[s * in_len..][..in_len];
            if g.is_pointwise() {
                T::gemm(k, cout, p, T::one(), wt, 1, k, ds, p, 1, T::one(), dxs);
            } else {
                T::gemm(k, cout, p, T::one(), wt, 1, k, ds, p, 1, T::zero(), &mut dcols);
                col2im(&dcols, g, dxs);
            }
        }
    }
    if let Some(db) = db {
        for s in 0..n {
            for (c, d) in db.iter_mut().enumerate() {
                *d += dout[(s * cout + c) * p..][..p].iter().copied().sum::<T>();
            }
        }
    }
}
