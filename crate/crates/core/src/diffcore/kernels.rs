//! Dense loops shared by the forward and backward passes. Every reduction
//! runs in a fixed sequential order.

use crate::num::Scalar;

/// `out = a[m,k] * b[k,n]` (overwrites `out`).
pub fn gemm<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    out.iter_mut().for_each(|v| *v = T::zero());
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `acc[m,k] += g[m,n] * b[k,n]^T`.
pub fn gemm_a_bt<T: Scalar>(g: &[T], b: &[T], m: usize, n: usize, k: usize, acc: &mut [T]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = T::zero();
            for (&x, &y) in grow.iter().zip(brow) {
                s += x * y;
            }
            acc[i * k + p] += s;
        }
    }
}

/// `acc[k,n] += a[m,k]^T * g[m,n]`.
pub fn gemm_at_b<T: Scalar>(a: &[T], g: &[T], m: usize, k: usize, n: usize, acc: &mut [T]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let arow = &mut acc[p * n..(p + 1) * n];
            for (o, &gv) in arow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvGeometry {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeometry {
    fn patch_len(&self) -> usize {
        self.c * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    /// Input coordinate for output position `(oy, ox)` and kernel tap
    /// `(ky, kx)`, or `None` inside the zero padding.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky).checked_sub(self.pad)?;
        let x = (ox * self.stride + kx).checked_sub(self.pad)?;
        (y < self.h && x < self.w).then_some((y, x))
    }
}

fn im2col<T: Scalar>(img: &[T], geo: &ConvGeometry, cols: &mut [T]) {
    let plane = geo.out_plane();
    for c in 0..geo.c {
        for ky in 0..geo.k {
            for kx in 0..geo.k {
                let row = (c * geo.k + ky) * geo.k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..geo.ho {
                    for ox in 0..geo.wo {
                        dst[oy * geo.wo + ox] = match geo.source(oy, ox, ky, kx) {
                            Some((y, x)) => img[(c * geo.h + y) * geo.w + x],
                            None => T::zero(),
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(cols: &[T], geo: &ConvGeometry, img: &mut [T]) {
    let plane = geo.out_plane();
    for c in 0..geo.c {
        for ky in 0..geo.k {
            for kx in 0..geo.k {
                let row = (c * geo.k + ky) * geo.k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..geo.ho {
                    for ox in 0..geo.wo {
                        if let Some((y, x)) = geo.source(oy, ox, ky, kx) {
                            img[(c * geo.h + y) * geo.w + x] += src[oy * geo.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(x: &[T], w: &[T], b: &[T], geo: &ConvGeometry) -> Vec<T> {
    let plane = geo.out_plane();
    let in_len = geo.c * geo.h * geo.w;
    let out_len = geo.o * plane;
    let mut cols = vec![T::zero(); geo.patch_len() * plane];
    let mut out = vec![T::zero(); geo.n * out_len];
    for img in 0..geo.n {
        im2col(&x[img * in_len..(img + 1) * in_len], geo, &mut cols);
        let o = &mut out[img * out_len..(img + 1) * out_len];
        gemm(w, &cols, geo.o, geo.patch_len(), plane, o);
        for (oc, chunk) in o.chunks_mut(plane).enumerate() {
            chunk.iter_mut().for_each(|v| *v += b[oc]);
        }
    }
    out
}

pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    gout: &[T],
    geo: &ConvGeometry,
    mut gw: Option<&mut [T]>,
    mut gx: Option<&mut [T]>,
) {
    let plane = geo.out_plane();
    let in_len = geo.c * geo.h * geo.w;
    let out_len = geo.o * plane;
    let plen = geo.patch_len();
    let mut cols = vec![T::zero(); plen * plane];
    for img in 0..geo.n {
        let g = &gout[img * out_len..(img + 1) * out_len];
        if let Some(gw) = gw.as_deref_mut() {
            im2col(&x[img * in_len..(img + 1) * in_len], geo, &mut cols);
            gemm_a_bt(g, &cols, geo.o, plane, plen, gw);
        }
        if let Some(gx) = gx.as_deref_mut() {
            cols.iter_mut().for_each(|v| *v = T::zero());
            gemm_at_b(w, g, geo.o, plen, plane, &mut cols);
            col2im_add(&cols, geo, &mut gx[img * in_len..(img + 1) * in_len]);
        }
    }
}
