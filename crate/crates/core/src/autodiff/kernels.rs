//! Raw loops behind the tape's heavier operators.

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub pad: usize,
    pub stride: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    /// Output column range `[lo, hi)` for which input column `ox*stride + kj - pad` is in bounds.
    #[inline]
    fn valid_range(&self, kk: usize, extent_in: usize, extent_out: usize) -> (usize, usize) {
        // need 0 <= o*s + kk - pad < extent_in
        let s = self.stride;
        let lo = if kk >= self.pad { 0 } else { (self.pad - kk).div_ceil(s) };
        let limit = extent_in + self.pad; // o*s + kk < limit
        let hi = if limit > kk { (limit - kk).div_ceil(s) } else { 0 };
        (lo.min(extent_out), hi.min(extent_out))
    }
}

/// Dot product with four independent accumulators so the loop vectorizes.
#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = T::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub(crate) fn conv2d_forward<T: Scalar>(g: &ConvGeometry, input: &[T], kernel: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); g.c_out * g.h_out * g.w_out];
    let plane_in = g.h * g.w;
    let plane_out = g.h_out * g.w_out;
    for co in 0..g.c_out {
        let out_plane = &mut out[co * plane_out..(co + 1) * plane_out];
        for ci in 0..g.c_in {
            let in_plane = &input[ci * plane_in..(ci + 1) * plane_in];
            let kbase = (co * g.c_in + ci) * g.k * g.k;
            for ki in 0..g.k {
                let (oy0, oy1) = g.valid_range(ki, g.h, g.h_out);
                for kj in 0..g.k {
                    let wv = kernel[kbase + ki * g.k + kj];
                    if wv == T::zero() {
                        continue;
                    }
                    let (ox0, ox1) = g.valid_range(kj, g.w, g.w_out);
                    if ox0 >= ox1 {
                        continue;
                    }
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ki - g.pad;
                        let row_out = &mut out_plane[oy * g.w_out..(oy + 1) * g.w_out];
                        let row_in = &in_plane[iy * g.w..(iy + 1) * g.w];
                        if g.stride == 1 {
                            let shift = ox0 + kj - g.pad;
                            let src = &row_in[shift..shift + (ox1 - ox0)];
                            for (o, &x) in row_out[ox0..ox1].iter_mut().zip(src) {
                                *o += wv * x;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                row_out[ox] += wv * row_in[ox * g.stride + kj - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradient w.r.t. the kernel.
pub(crate) fn conv2d_grad_kernel<T: Scalar>(g: &ConvGeometry, input: &[T], grad_out: &[T]) -> Vec<T> {
    let mut gk = vec![T::zero(); g.c_out * g.c_in * g.k * g.k];
    let plane_in = g.h * g.w;
    let plane_out = g.h_out * g.w_out;
    for co in 0..g.c_out {
        let go_plane = &grad_out[co * plane_out..(co + 1) * plane_out];
        for ci in 0..g.c_in {
            let in_plane = &input[ci * plane_in..(ci + 1) * plane_in];
            let kbase = (co * g.c_in + ci) * g.k * g.k;
            for ki in 0..g.k {
                let (oy0, oy1) = g.valid_range(ki, g.h, g.h_out);
                for kj in 0..g.k {
                    let (ox0, ox1) = g.valid_range(kj, g.w, g.w_out);
                    if ox0 >= ox1 {
                        continue;
                    }
                    let mut acc = T::zero();
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ki - g.pad;
                        let row_go = &go_plane[oy * g.w_out..(oy + 1) * g.w_out];
                        let row_in = &in_plane[iy * g.w..(iy + 1) * g.w];
                        if g.stride == 1 {
                            let shift = ox0 + kj - g.pad;
                            acc += dot(&row_go[ox0..ox1], &row_in[shift..shift + (ox1 - ox0)]);
                        } else {
                            for ox in ox0..ox1 {
                                acc += row_go[ox] * row_in[ox * g.stride + kj - g.pad];
                            }
                        }
                    }
                    gk[kbase + ki * g.k + kj] += acc;
                }
            }
        }
    }
    gk
}

/// Gradient w.r.t. the input.
pub(crate) fn conv2d_grad_input<T: Scalar>(g: &ConvGeometry, kernel: &[T], grad_out: &[T]) -> Vec<T> {
    let mut gi = vec![T::zero(); g.c_in * g.h * g.w];
    let plane_in = g.h * g.w;
    let plane_out = g.h_out * g.w_out;
    for co in 0..g.c_out {
        let go_plane = &grad_out[co * plane_out..(co + 1) * plane_out];
        for ci in 0..g.c_in {
            let gi_plane = &mut gi[ci * plane_in..(ci + 1) * plane_in];
            let kbase = (co * g.c_in + ci) * g.k * g.k;
            for ki in 0..g.k {
                let (oy0, oy1) = g.valid_range(ki, g.h, g.h_out);
                for kj in 0..g.k {
                    let wv = kernel[kbase + ki * g.k + kj];
                    if wv == T::zero() {
                        continue;
                    }
                    let (ox0, ox1) = g.valid_range(kj, g.w, g.w_out);
                    if ox0 >= ox1 {
                        continue;
                    }
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ki - g.pad;
                        let row_go = &go_plane[oy * g.w_out..(oy + 1) * g.w_out];
                        let row_gi = &mut gi_plane[iy * g.w..(iy + 1) * g.w];
                        if g.stride == 1 {
                            let shift = ox0 + kj - g.pad;
                            let dst = &mut row_gi[shift..shift + (ox1 - ox0)];
                            for (o, &d) in dst.iter_mut().zip(&row_go[ox0..ox1]) {
                                *o += wv * d;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                row_gi[ox * g.stride + kj - g.pad] += wv * row_go[ox];
                            }
                        }
                    }
                }
            }
        }
    }
    gi
}

/// `c[m×n] = a[m×k] · b[k×n]`
pub(crate) fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let row_c = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let row_b = &b[p * n..(p + 1) * n];
            for (cv, &bv) in row_c.iter_mut().zip(row_b) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `c[m×n] = a[m×k] · b[n×k]ᵀ`
pub(crate) fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let row_a = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let row_b = &b[j * k..(j + 1) * k];
            c[i * n + j] = dot(row_a, row_b);
        }
    }
    c
}

/// `c[k×n] = a[m×k]ᵀ · b[m×n]`
pub(crate) fn matmul_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); k * n];
    for i in 0..m {
        let row_b = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let row_c = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in row_c.iter_mut().zip(row_b) {
                *cv += av * bv;
            }
        }
    }
    c
}

pub(crate) fn transpose<T: Scalar>(a: &[T], m: usize, n: usize) -> Vec<T> {
    let mut t = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            t[j * m + i] = a[i * n + j];
        }
    }
    t
}
